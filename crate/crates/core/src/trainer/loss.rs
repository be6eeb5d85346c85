//! The content-conditional debiasing objective and its analytic gradient.
//!
//! For one content group with adapted embeddings `y_i = W z_i + b` (one per
//! attribute) and `y_n = W z_n + b`:
//!
//! ```text
//! k_i    = exp(-|y_i - y_n|^2 / (2 rho^2))
//! L_bias = sum_i sum_{j != i} |k_i - k_j|
//! L_rep  = |W z_n + b - z_n_original|
//! L_all  = L_bias + beta * L_rep
//! ```
//!
//! Both terms are averaged over the batch. At `k_i == k_j` and at `L_rep == 0`
//! the subgradient 0 is used.

use serde::{Deserialize, Serialize};

use super::adapter::DebiasAdapter;
use crate::error::{Error, Result};
use crate::math::{kernel_from_squared, norm, GroupEmbeddings, KernelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bias: f64,
    pub rep: f64,
    pub total: f64,
}

/// Gradient with the same layout as the adapter's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradient {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl AdapterGradient {
    fn zeros(adapter: &DebiasAdapter) -> Self {
        let d = adapter.dim();
        Self {
            weight: vec![0.0; d * d],
            bias: adapter.has_bias().then(|| vec![0.0; d]),
        }
    }

    /// Weight entries followed by bias entries.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weight.clone();
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
        out
    }
}

fn validate(batch: &[GroupEmbeddings], adapter: &DebiasAdapter) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::MalformedBatch("empty batch".into()));
    }
    for item in batch {
        item.check_dim(adapter.dim())?;
        if item.neutral_original.is_none() {
            return Err(Error::MalformedBatch(format!(
                "group {:?} has no original neutral embedding",
                item.content_id
            )));
        }
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adapted sensitive-minus-neutral differences and their kernel values.
struct ItemKernels {
    diffs: Vec<Vec<f64>>,
    kernels: Vec<f64>,
}

fn item_kernels(item: &GroupEmbeddings, adapter: &DebiasAdapter, k: KernelParams) -> ItemKernels {
    let yn = adapter.apply_slice(item.neutral.as_slice());
    let mut diffs = Vec::with_capacity(item.attributes.len());
    let mut kernels = Vec::with_capacity(item.attributes.len());
    for z in &item.attributes {
        let y = adapter.apply_slice(z.as_slice());
        let diff: Vec<f64> = y.iter().zip(&yn).map(|(a, b)| a - b).collect();
        let sq: f64 = diff.iter().map(|x| x * x).sum();
        kernels.push(kernel_from_squared(sq, k.rho()));
        diffs.push(diff);
    }
    ItemKernels { diffs, kernels }
}

fn pairwise_gap(kernels: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, ki) in kernels.iter().enumerate() {
        for (j, kj) in kernels.iter().enumerate() {
            if i != j {
                total += (ki - kj).abs();
            }
        }
    }
    total
}

fn residual(item: &GroupEmbeddings, adapter: &DebiasAdapter) -> Vec<f64> {
    let original = item
        .neutral_original
        .as_ref()
        .expect("validated before use")
        .as_slice();
    adapter
        .apply_slice(item.neutral.as_slice())
        .iter()
        .zip(original)
        .map(|(a, b)| a - b)
        .collect()
}

pub fn loss_bias(batch: &[GroupEmbeddings], adapter: &DebiasAdapter, k: KernelParams) -> Result<f64> {
    validate(batch, adapter)?;
    let total: f64 = batch
        .iter()
        .map(|item| pairwise_gap(&item_kernels(item, adapter, k).kernels))
        .sum();
    Ok(total / batch.len() as f64)
}

pub fn loss_rep(batch: &[GroupEmbeddings], adapter: &DebiasAdapter) -> Result<f64> {
    validate(batch, adapter)?;
    let total: f64 = batch.iter().map(|item| norm(&residual(item, adapter))).sum();
    Ok(total / batch.len() as f64)
}

pub fn loss_all(
    batch: &[GroupEmbeddings],
    adapter: &DebiasAdapter,
    k: KernelParams,
    beta: f64,
) -> Result<f64> {
    Ok(loss_breakdown(batch, adapter, k, beta)?.total)
}

pub fn loss_breakdown(
    batch: &[GroupEmbeddings],
    adapter: &DebiasAdapter,
    k: KernelParams,
    beta: f64,
) -> Result<LossBreakdown> {
    let bias = loss_bias(batch, adapter, k)?;
    let rep = loss_rep(batch, adapter)?;
    Ok(LossBreakdown {
        bias,
        rep,
        total: bias + beta * rep,
    })
}

pub fn gradients(
    batch: &[GroupEmbeddings],
    adapter: &DebiasAdapter,
    k: KernelParams,
    beta: f64,
) -> Result<AdapterGradient> {
    Ok(loss_and_gradients(batch, adapter, k, beta)?.1)
}

/// Loss and gradient in one pass over the batch.
pub fn loss_and_gradients(
    batch: &[GroupEmbeddings],
    adapter: &DebiasAdapter,
    k: KernelParams,
    beta: f64,
) -> Result<(LossBreakdown, AdapterGradient)> {
    validate(batch, adapter)?;
    let d = adapter.dim();
    let scale = 1.0 / batch.len() as f64;
    let inv_rho2 = 1.0 / (k.rho() * k.rho());
    let mut grad = AdapterGradient::zeros(adapter);
    let mut bias_loss = 0.0;
    let mut rep_loss = 0.0;

    for item in batch {
        let ItemKernels { diffs, kernels } = item_kernels(item, adapter, k);
        bias_loss += pairwise_gap(&kernels);

        // dL/dk_i: each unordered pair appears twice in the ordered sum.
        for (i, ki) in kernels.iter().enumerate() {
            let dl_dk: f64 = kernels
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, kj)| 2.0 * sign(ki - kj))
                .sum();
            if dl_dk == 0.0 {
                continue;
            }
            // dk_i/dW = -k_i / rho^2 * (y_i - y_n) (z_i - z_n)^T; b cancels.
            let coef = scale * dl_dk * (-ki * inv_rho2);
            let zi = item.attributes[i].as_slice();
            let zn = item.neutral.as_slice();
            for (r, dr) in diffs[i].iter().enumerate() {
                let row = &mut grad.weight[r * d..(r + 1) * d];
                for (c, g) in row.iter_mut().enumerate() {
                    *g += coef * dr * (zi[c] - zn[c]);
                }
            }
        }

        let res = residual(item, adapter);
        let res_norm = norm(&res);
        rep_loss += res_norm;
        if beta != 0.0 && res_norm > 0.0 {
            let coef = scale * beta / res_norm;
            let zn = item.neutral.as_slice();
            for (r, rr) in res.iter().enumerate() {
                let row = &mut grad.weight[r * d..(r + 1) * d];
                for (c, g) in row.iter_mut().enumerate() {
                    *g += coef * rr * zn[c];
                }
            }
            if let Some(gb) = &mut grad.bias {
                for (g, rr) in gb.iter_mut().zip(&res) {
                    *g += coef * rr;
                }
            }
        }
    }

    let bias = bias_loss * scale;
    let rep = rep_loss * scale;
    Ok((
        LossBreakdown {
            bias,
            rep,
            total: bias + beta * rep,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::EmbeddingVector;
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    fn scalar(m: f64, f: f64, n: f64) -> GroupEmbeddings {
        GroupEmbeddings::new("s", vec![v(&[m]), v(&[f])], v(&[n]))
    }

    fn k1() -> KernelParams {
        KernelParams::new(1.0).unwrap()
    }

    #[test]
    fn loss_bias_examples() {
        let id = DebiasAdapter::identity(1, false);
        assert_eq!(loss_bias(&[scalar(2.0, 0.0, 1.0)], &id, k1()).unwrap(), 0.0);
        let expected = 2.0 * ((-2.0f64).exp() - (-0.5f64).exp()).abs();
        assert_abs_diff_eq!(
            loss_bias(&[scalar(3.0, 0.0, 1.0)], &id, k1()).unwrap(),
            expected,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(expected, 0.942391, epsilon = 1e-6);
        assert_eq!(loss_bias(&[scalar(4.0, 4.0, 1.0)], &id, k1()).unwrap(), 0.0);
    }

    #[test]
    fn loss_rep_examples() {
        let item = GroupEmbeddings::new("r", vec![v(&[0.0, 1.0]), v(&[1.0, 1.0])], v(&[1.0, 0.0]));
        assert_eq!(loss_rep(std::slice::from_ref(&item), &DebiasAdapter::identity(2, false)).unwrap(), 0.0);
        let double = DebiasAdapter::from_parts(2, vec![2.0, 0.0, 0.0, 2.0], None).unwrap();
        assert_eq!(loss_rep(std::slice::from_ref(&item), &double).unwrap(), 1.0);
        let shift =
            DebiasAdapter::from_parts(2, vec![1.0, 0.0, 0.0, 1.0], Some(vec![0.3, 0.4])).unwrap();
        assert_abs_diff_eq!(
            loss_rep(&[item.clone(), item.clone()], &shift).unwrap(),
            0.5,
            epsilon = 1e-15
        );

        let mut missing = item;
        missing.neutral_original = None;
        assert!(matches!(
            loss_rep(&[missing], &shift),
            Err(Error::MalformedBatch(_))
        ));
    }

    #[test]
    fn loss_all_examples() {
        let id = DebiasAdapter::identity(1, true);
        let batch = [scalar(3.0, 0.0, 1.0)];
        let lb = loss_bias(&batch, &id, k1()).unwrap();
        assert_eq!(loss_all(&batch, &id, k1(), 0.0).unwrap(), lb);

        let shifted = DebiasAdapter::from_parts(1, vec![1.0], Some(vec![0.5])).unwrap();
        let lb = loss_bias(&batch, &shifted, k1()).unwrap();
        let lr = loss_rep(&batch, &shifted).unwrap();
        assert_eq!(loss_all(&batch, &shifted, k1(), 1.0).unwrap(), lb + lr);
        assert_eq!(loss_all(&[scalar(2.0, 0.0, 1.0)], &id, k1(), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_minimum_has_zero_gradient() {
        let id = DebiasAdapter::identity(1, true);
        let g = gradients(&[scalar(2.0, 0.0, 1.0)], &id, k1(), 5.0).unwrap();
        assert_eq!(g.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn rep_term_vanishes_at_identity() {
        // beta large, asymmetric batch: only the bias term contributes
        let id = DebiasAdapter::identity(1, false);
        let batch = [scalar(3.0, 0.0, 1.0)];
        let g0 = gradients(&batch, &id, k1(), 0.0).unwrap();
        let g1 = gradients(&batch, &id, k1(), 1e6).unwrap();
        assert_eq!(g0, g1);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let id = DebiasAdapter::identity(1, false);
        assert!(matches!(loss_bias(&[], &id, k1()), Err(Error::MalformedBatch(_))));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let id = DebiasAdapter::identity(2, false);
        assert!(matches!(
            loss_bias(&[scalar(1.0, 2.0, 3.0)], &id, k1()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
