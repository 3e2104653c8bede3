//! Seeded synthetic weight tensors for testing and diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, StudentT};
use thiserror::Error;

use crate::parallel;
use crate::tensor::WeightTensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad distribution parameter: {0}")]
    BadParam(String),
    #[error("bad shape: rows and cols must be at least 1")]
    BadShape,
}

/// Sampling distribution for synthetic tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Gaussian { mean: f64, std_dev: f64 },
    Laplace { mean: f64, scale: f64 },
    StudentT { dof: f64, scale: f64 },
}

impl Distribution {
    fn validate(&self) -> Result<(), SynthError> {
        let check = |ok: bool, what: &str, v: f64| {
            if ok && v.is_finite() {
                Ok(())
            } else {
                Err(SynthError::BadParam(format!("{what} = {v}")))
            }
        };
        match *self {
            Distribution::Gaussian { mean, std_dev } => {
                check(mean.is_finite(), "gaussian mean", mean)?;
                check(std_dev > 0.0, "gaussian std_dev", std_dev)
            }
            Distribution::Laplace { mean, scale } => {
                check(mean.is_finite(), "laplace mean", mean)?;
                check(scale > 0.0, "laplace scale", scale)
            }
            Distribution::StudentT { dof, scale } => {
                check(dof > 0.0, "student_t dof", dof)?;
                check(scale > 0.0, "student_t scale", scale)
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Distribution::Gaussian { mean, std_dev } => {
                Normal::new(mean, std_dev).unwrap().sample(rng)
            }
            Distribution::Laplace { mean, scale } => {
                // Inverse-CDF transform; u is in [0, 1).
                let u: f64 = rng.random();
                let centered = u - 0.5;
                mean - scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
            }
            Distribution::StudentT { dof, scale } => {
                scale * StudentT::new(dof).unwrap().sample(rng)
            }
        }
    }
}

/// Generates a deterministic `rows x cols` tensor of i.i.d. draws.
///
/// Each row is sampled from its own ChaCha stream derived from `(seed, row)`,
/// so generation parallelizes across rows without changing the output.
pub fn gen_synthetic(
    name: impl Into<String>,
    dist: Distribution,
    rows: u32,
    cols: u32,
    seed: u64,
) -> Result<WeightTensor, SynthError> {
    dist.validate()?;
    if rows == 0 || cols == 0 {
        return Err(SynthError::BadShape);
    }
    let row_data = parallel::map_range(rows as usize, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut row = Vec::with_capacity(cols as usize);
        for _ in 0..cols {
            // Resample on the (vanishingly rare) draw that does not fit f32.
            let v = loop {
                let x = dist.sample(&mut rng) as f32;
                if x.is_finite() {
                    break x;
                }
            };
            row.push(v);
        }
        row
    });
    let mut data = Vec::with_capacity(rows as usize * cols as usize);
    for row in row_data {
        data.extend_from_slice(&row);
    }
    Ok(WeightTensor::new(name, rows, cols, data).expect("generated data is finite and sized"))
}
