//! Command-line pipeline: quantize, dequantize, report, sweep, synthesize,
//! and verify the divergence-approximation claims.
//!
//! Machine-readable JSON Lines go to stdout; human-readable summaries go to
//! stderr. Exit status 0 means every tensor was processed without error.
//! `PRECALQ_THREADS` caps worker threads when the `parallel` feature is on.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use precalq_core::diagnostics::{
    claim1_gap_schedule, fuzz_claim2, report_tensor_with_bins, DensityModel, ErrorModel,
};
use precalq_core::io;
use precalq_core::packing;
use precalq_core::quantizer::{self, ClipScope, QuantConfig};
use precalq_core::synth::{self, Distribution};
use precalq_core::tensor::TensorContainer;

#[derive(Parser)]
#[command(
    name = "precalq",
    about = "Calibration-free weight quantization with salient-weight classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a WTS1 tensor file into a packed PCQ1 artifact.
    Quantize {
        /// Input .wts file
        input: PathBuf,
        /// Output .pcq file
        output: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
        /// Histogram bins for the per-tensor KL report
        #[arg(long, default_value_t = 2048)]
        bins: usize,
    },
    /// Reconstruct a WTS1 tensor file from a packed PCQ1 artifact.
    Dequantize {
        /// Input .pcq file
        input: PathBuf,
        /// Output .wts file
        output: PathBuf,
    },
    /// Measure a packed artifact against the original tensors.
    Report {
        /// Original .wts file
        original: PathBuf,
        /// Quantized .pcq file
        quantized: PathBuf,
        #[arg(long, default_value_t = 2048)]
        bins: usize,
    },
    /// Quantize under a grid of salient fractions and bit-widths.
    Sweep {
        /// Input .wts file
        input: PathBuf,
        /// Salient fractions to sweep, comma separated
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.05,0.08")]
        alphas: Vec<f64>,
        /// Common bit-widths to sweep, comma separated
        #[arg(long, value_delimiter = ',', default_value = "4")]
        bits: Vec<u8>,
        #[arg(long, default_value_t = 4)]
        outlier_bits: u8,
        #[arg(long, default_value_t = 128)]
        group: u32,
        #[arg(long, default_value_t = 2048)]
        bins: usize,
    },
    /// Numerically check the divergence-approximation claims.
    VerifyClaims {
        /// Mean of the synthetic quantization error
        #[arg(long, default_value_t = 0.04)]
        mu_delta: f64,
        /// Std-dev of the synthetic error (defaults to mu_delta / 2)
        #[arg(long)]
        sigma_delta: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        density_mean: f64,
        #[arg(long, default_value_t = 1.0)]
        density_std: f64,
        /// Weights drawn per experiment
        #[arg(long, short = 'n', default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Halvings of the error scale to walk through
        #[arg(long, default_value_t = 4)]
        steps: usize,
        /// Random instances for the penalty-bound fuzz
        #[arg(long, default_value_t = 10_000)]
        claim2_instances: usize,
    },
    /// Generate a synthetic WTS1 tensor file.
    Synth {
        /// Output .wts file
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = DistArg::Gaussian)]
        dist: DistArg,
        #[arg(long, default_value_t = 0.0)]
        mean: f64,
        /// Std-dev for gaussian
        #[arg(long, default_value_t = 1.0)]
        std_dev: f64,
        /// Scale for laplace and student-t
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Degrees of freedom for student-t
        #[arg(long, default_value_t = 3.0)]
        dof: f64,
        #[arg(long)]
        rows: u32,
        #[arg(long)]
        cols: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
}

#[derive(Args)]
struct ConfigFlags {
    /// Bits per common weight
    #[arg(long, default_value_t = 4)]
    bits: u8,
    /// Bits per salient weight
    #[arg(long, default_value_t = 4)]
    outlier_bits: u8,
    /// Group size (power of two)
    #[arg(long, default_value_t = 128)]
    group: u32,
    /// Fraction of weights classified salient
    #[arg(long, default_value_t = 0.08)]
    alpha: f64,
    /// Clip percentile for common weights, e.g. 0.95
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, value_enum, default_value_t = ClipScopeArg::PerGroup)]
    clip_scope: ClipScopeArg,
}

impl ConfigFlags {
    fn to_config(&self) -> Result<QuantConfig> {
        let mut config = QuantConfig::new(self.bits, self.outlier_bits, self.group, self.alpha);
        if let Some(p) = self.clip {
            config = config.with_clip(p, self.clip_scope.into());
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClipScopeArg {
    PerGroup,
    PerTensor,
}

impl From<ClipScopeArg> for ClipScope {
    fn from(v: ClipScopeArg) -> Self {
        match v {
            ClipScopeArg::PerGroup => ClipScope::PerGroup,
            ClipScopeArg::PerTensor => ClipScope::PerTensor,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Gaussian,
    Laplace,
    StudentT,
}

fn main() -> ExitCode {
    init_thread_pool();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(feature = "parallel")]
fn init_thread_pool() {
    if let Ok(raw) = std::env::var("PRECALQ_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n >= 1 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .expect("thread pool not yet initialized");
            }
            _ => {
                eprintln!("warning: ignoring invalid PRECALQ_THREADS={raw:?}");
            }
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn init_thread_pool() {}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Quantize {
            input,
            output,
            config,
            bins,
        } => cmd_quantize(&input, &output, &config, bins),
        Command::Dequantize { input, output } => cmd_dequantize(&input, &output),
        Command::Report {
            original,
            quantized,
            bins,
        } => cmd_report(&original, &quantized, bins),
        Command::Sweep {
            input,
            alphas,
            bits,
            outlier_bits,
            group,
            bins,
        } => cmd_sweep(&input, &alphas, &bits, outlier_bits, group, bins),
        Command::VerifyClaims {
            mu_delta,
            sigma_delta,
            density_mean,
            density_std,
            samples,
            seed,
            steps,
            claim2_instances,
        } => cmd_verify_claims(
            mu_delta,
            sigma_delta.unwrap_or(mu_delta / 2.0),
            density_mean,
            density_std,
            samples,
            seed,
            steps,
            claim2_instances,
        ),
        Command::Synth {
            output,
            dist,
            mean,
            std_dev,
            scale,
            dof,
            rows,
            cols,
            seed,
            name,
        } => {
            let distribution = match dist {
                DistArg::Gaussian => Distribution::Gaussian { mean, std_dev },
                DistArg::Laplace => Distribution::Laplace { mean, scale },
                DistArg::StudentT => Distribution::StudentT { dof, scale },
            };
            cmd_synth(&output, distribution, rows, cols, seed, &name)
        }
    }
}

fn cmd_quantize(input: &Path, output: &Path, flags: &ConfigFlags, bins: usize) -> Result<()> {
    // Flags must validate before any file is touched.
    let config = flags.to_config()?;
    if bins < 2 {
        bail!("--bins must be at least 2");
    }
    let container = io::load_container(input).with_context(|| format!("reading {input:?}"))?;
    let mut quantized = Vec::with_capacity(container.len());
    let mut reports = Vec::with_capacity(container.len());
    for tensor in container.tensors() {
        let q = quantizer::quantize_tensor(tensor, &config)
            .with_context(|| format!("quantizing '{}'", tensor.name()))?;
        reports.push(report_tensor_with_bins(tensor, &q, bins)?);
        quantized.push(q);
    }
    let bytes = packing::pack_artifact(&quantized);
    write_atomically(output, &bytes)?;
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
        eprintln!(
            "{}: {:.2} bits/weight (measured {:.3}), mse {:.3e}, kl {:.3e}, {} salient",
            r.tensor_name, r.avg_bits_formula, r.measured_bits, r.mse, r.kl_histogram, r.salient_count
        );
    }
    eprintln!(
        "wrote {} tensor(s), {} bytes -> {}",
        quantized.len(),
        bytes.len(),
        output.display()
    );
    Ok(())
}

fn cmd_dequantize(input: &Path, output: &Path) -> Result<()> {
    let bytes = std::fs::read(input).with_context(|| format!("reading {input:?}"))?;
    let artifacts = packing::unpack_artifact(&bytes)?;
    let mut tensors = Vec::with_capacity(artifacts.len());
    for q in &artifacts {
        tensors.push(quantizer::dequantize_tensor(q)?);
    }
    let container = TensorContainer::new(tensors)?;
    write_atomically(output, &io::encode_container(&container))?;
    eprintln!(
        "reconstructed {} tensor(s) -> {}",
        container.len(),
        output.display()
    );
    Ok(())
}

fn cmd_report(original: &Path, quantized: &Path, bins: usize) -> Result<()> {
    if bins < 2 {
        bail!("--bins must be at least 2");
    }
    let container =
        io::load_container(original).with_context(|| format!("reading {original:?}"))?;
    let bytes = std::fs::read(quantized).with_context(|| format!("reading {quantized:?}"))?;
    let artifacts = packing::unpack_artifact(&bytes)?;
    for q in &artifacts {
        let tensor = container
            .tensors()
            .iter()
            .find(|t| t.name() == q.name)
            .with_context(|| format!("original file has no tensor named '{}'", q.name))?;
        let report = report_tensor_with_bins(tensor, q, bins)?;
        println!("{}", serde_json::to_string(&report)?);
        eprintln!(
            "{}: mse {:.3e}, kl {:.3e} ({bins} bins)",
            report.tensor_name, report.mse, report.kl_histogram
        );
    }
    Ok(())
}

fn cmd_sweep(
    input: &Path,
    alphas: &[f64],
    bits: &[u8],
    outlier_bits: u8,
    group: u32,
    bins: usize,
) -> Result<()> {
    if alphas.is_empty() || bits.is_empty() {
        bail!("sweep needs at least one alpha and one bit-width");
    }
    // Validate the whole grid before any work.
    for &b in bits {
        for &alpha in alphas {
            QuantConfig::new(b, outlier_bits, group, alpha).validate()?;
        }
    }
    if bins < 2 {
        bail!("--bins must be at least 2");
    }
    let container = io::load_container(input).with_context(|| format!("reading {input:?}"))?;
    for tensor in container.tensors() {
        for &b in bits {
            for &alpha in alphas {
                let config = QuantConfig::new(b, outlier_bits, group, alpha);
                let q = quantizer::quantize_tensor(tensor, &config)?;
                let report = report_tensor_with_bins(tensor, &q, bins)?;
                let mut line = serde_json::to_value(&report)?;
                let obj = line.as_object_mut().expect("report serializes to object");
                obj.insert("alpha".into(), alpha.into());
                obj.insert("bits".into(), b.into());
                obj.insert("outlier_bits".into(), outlier_bits.into());
                obj.insert("group".into(), group.into());
                println!("{}", serde_json::to_string(&line)?);
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify_claims(
    mu_delta: f64,
    sigma_delta: f64,
    density_mean: f64,
    density_std: f64,
    samples: usize,
    seed: u64,
    steps: usize,
    claim2_instances: usize,
) -> Result<()> {
    if steps == 0 {
        bail!("--steps must be at least 1");
    }
    let density = DensityModel::gaussian(density_mean, density_std);
    let mut schedule = Vec::with_capacity(steps);
    let mut error = ErrorModel::new(mu_delta, sigma_delta)?;
    for _ in 0..steps {
        schedule.push(error);
        error = error.halved();
    }
    let points = claim1_gap_schedule(&density, &schedule, samples, seed)?;
    for p in &points {
        let mut line = serde_json::to_value(p)?;
        let obj = line.as_object_mut().expect("point serializes to object");
        obj.insert("record".into(), "claim1".into());
        obj.insert("n".into(), samples.into());
        obj.insert("seed".into(), seed.into());
        println!("{}", serde_json::to_string(&line)?);
    }
    for pair in points.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        eprintln!(
            "claim1: gap {:.4e} -> {:.4e} (ratio {:.3}) as error halves from mu={}",
            a.gap,
            b.gap,
            if a.gap != 0.0 { b.gap / a.gap } else { 0.0 },
            a.mu_delta
        );
    }

    let summary = fuzz_claim2(claim2_instances, seed);
    let mut line = serde_json::to_value(summary)?;
    let obj = line.as_object_mut().expect("summary serializes to object");
    obj.insert("record".into(), "claim2".into());
    obj.insert("holds".into(), summary.holds().into());
    println!("{}", serde_json::to_string(&line)?);
    eprintln!(
        "claim2: {} instances, {} violations, worst lhs/rhs {:.3}",
        summary.instances, summary.violations, summary.worst_ratio
    );
    if !summary.holds() {
        bail!("penalty bound violated in fuzzing");
    }
    Ok(())
}

fn cmd_synth(
    output: &Path,
    dist: Distribution,
    rows: u32,
    cols: u32,
    seed: u64,
    name: &str,
) -> Result<()> {
    let tensor = synth::gen_synthetic(name, dist, rows, cols, seed)?;
    let container = TensorContainer::new(vec![tensor])?;
    write_atomically(output, &io::encode_container(&container))?;
    eprintln!("wrote {rows}x{cols} '{name}' (seed {seed}) -> {}", output.display());
    Ok(())
}

/// Writes through a temporary sibling and renames, so a failed run never
/// leaves a partial file at the destination.
fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let write = || -> Result<()> {
        std::fs::write(&tmp, bytes).with_context(|| format!("writing {tmp:?}"))?;
        std::fs::rename(&tmp, path).with_context(|| format!("renaming to {path:?}"))?;
        Ok(())
    };
    write().inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}
