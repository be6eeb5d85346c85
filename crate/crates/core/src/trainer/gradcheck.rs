//! Central finite-difference check of the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{gradients, loss_all, DebiasAdapter};
use crate::error::Result;
use crate::math::{EmbeddingVector, GroupEmbeddings, KernelParams};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error, so entries that are zero
/// in both gradients compare by absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Instances closer than this to a kink of `|k_i - k_j|` or `|r|` are
/// redrawn: a central difference straddling a kink is not a derivative.
const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub parameters: usize,
    pub instances: usize,
}

impl GradCheckReport {
    fn merge(self, other: Self) -> Self {
        Self {
            max_relative_error: self.max_relative_error.max(other.max_relative_error),
            max_absolute_error: self.max_absolute_error.max(other.max_absolute_error),
            parameters: self.parameters + other.parameters,
            instances: self.instances + other.instances,
        }
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn finite_difference_gradient(
    batch: &[GroupEmbeddings],
    adapter: &DebiasAdapter,
    k: KernelParams,
    beta: f64,
    h: f64,
) -> Result<Vec<f64>> {
    let base = adapter.params();
    let mut probe = adapter.clone();
    let mut theta = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        theta[i] = base[i] + h;
        probe.set_params(&theta);
        let plus = loss_all(batch, &probe, k, beta)?;
        theta[i] = base[i] - h;
        probe.set_params(&theta);
        let minus = loss_all(batch, &probe, k, beta)?;
        theta[i] = base[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

pub fn check_gradients(
    batch: &[GroupEmbeddings],
    adapter: &DebiasAdapter,
    k: KernelParams,
    beta: f64,
    h: f64,
) -> Result<GradCheckReport> {
    let analytic = gradients(batch, adapter, k, beta)?.flatten();
    let numeric = finite_difference_gradient(batch, adapter, k, beta, h)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        parameters: analytic.len(),
        instances: 1,
    };
    for (a, n) in analytic.iter().zip(&numeric) {
        report.max_relative_error = report.max_relative_error.max(relative_error(*a, *n));
        report.max_absolute_error = report.max_absolute_error.max((a - n).abs());
    }
    Ok(report)
}

/// A randomly drawn gradient-check problem.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub batch: Vec<GroupEmbeddings>,
    pub adapter: DebiasAdapter,
    pub kernel: KernelParams,
    pub beta: f64,
}

/// Shape of the random instances.
#[derive(Debug, Clone, Copy)]
pub struct InstanceShape {
    pub dim: usize,
    pub batch: usize,
    pub attributes: usize,
    pub beta: f64,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn near_kink(inst: &GradCheckInstance) -> bool {
    let rho2 = inst.kernel.rho() * inst.kernel.rho();
    inst.batch.iter().any(|item| {
        let yn = inst.adapter.apply_slice(item.neutral.as_slice());
        let ks: Vec<f64> = item
            .attributes
            .iter()
            .map(|z| {
                let y = inst.adapter.apply_slice(z.as_slice());
                let sq: f64 = y.iter().zip(&yn).map(|(a, b)| (a - b).powi(2)).sum();
                (-sq / (2.0 * rho2)).exp()
            })
            .collect();
        let close_pair = ks
            .iter()
            .enumerate()
            .any(|(i, a)| ks[i + 1..].iter().any(|b| (a - b).abs() < KINK_MARGIN));
        let orig = item.neutral_original.as_ref().unwrap().as_slice();
        let r: f64 = yn.iter().zip(orig).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        close_pair || r < KINK_MARGIN
    })
}

/// Draws an instance away from the loss kinks.
pub fn random_instance(rng: &mut ChaCha8Rng, shape: InstanceShape) -> GradCheckInstance {
    loop {
        let d = shape.dim;
        let batch: Vec<GroupEmbeddings> = (0..shape.batch)
            .map(|i| {
                let neutral = gaussian_vec(rng, d, 1.0);
                let attributes = (0..shape.attributes)
                    .map(|_| {
                        let offset = gaussian_vec(rng, d, 0.7);
                        let z = neutral.iter().zip(&offset).map(|(a, b)| a + b).collect();
                        EmbeddingVector::new(z).unwrap()
                    })
                    .collect();
                let original: Vec<f64> = neutral
                    .iter()
                    .zip(gaussian_vec(rng, d, 0.2))
                    .map(|(a, b)| a + b)
                    .collect();
                GroupEmbeddings {
                    content_id: format!("g{i}"),
                    attributes,
                    neutral: EmbeddingVector::new(neutral).unwrap(),
                    neutral_original: Some(EmbeddingVector::new(original).unwrap()),
                }
            })
            .collect();
        let mut weight = gaussian_vec(rng, d * d, 0.2);
        for i in 0..d {
            weight[i * d + i] += 1.0;
        }
        let bias = rng.gen_bool(0.5).then(|| gaussian_vec(rng, d, 0.1));
        let adapter = DebiasAdapter::from_parts(d, weight, bias).unwrap();
        // typical adapted offset length is about 0.7 * sqrt(d)
        let rho = 0.7 * (d as f64).sqrt() * rng.gen_range(0.5..1.5);
        let inst = GradCheckInstance {
            batch,
            adapter,
            kernel: KernelParams::new(rho).unwrap(),
            beta: shape.beta,
        };
        if !near_kink(&inst) {
            return inst;
        }
    }
}

/// Checks `instances` random problems of dimension `dim` with three groups
/// each, cycling through two and three attributes and beta in {0, 0.5, 1}.
pub fn random_gradcheck(dim: usize, seed: u64, instances: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        parameters: 0,
        instances: 0,
    };
    for i in 0..instances {
        let shape = InstanceShape {
            dim,
            batch: 3,
            attributes: 2 + i % 2,
            beta: [0.0, 0.5, 1.0][i % 3],
        };
        let inst = random_instance(&mut rng, shape);
        let report = check_gradients(&inst.batch, &inst.adapter, inst.kernel, inst.beta, DEFAULT_STEP)?;
        total = total.merge(report);
    }
    Ok(total)
}
