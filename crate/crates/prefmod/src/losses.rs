//! Training objectives: flow-matching interpolation and velocity loss,
//! the per-adapter user-dispersion loss, and their weighted combination.

use crate::config::LossWeights;
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// `z_t = (1 - t) * z0 + t * z1`.
pub fn interpolate(tape: &mut Tape, z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    if z0.shape() != z1.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "interpolate",
            lhs: z0.shape().to_vec(),
            rhs: z1.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(TensorError::Invalid {
            op: "interpolate",
            msg: format!("t = {t} outside [0, 1]"),
        });
    }
    let a = tape.scale(z0, 1.0 - t)?;
    let b = tape.scale(z1, t)?;
    tape.add(&a, &b)
}

/// Mean squared error of the predicted velocity against the target
/// velocity `z1 - z0`. Element mean, so the scale is resolution-free.
pub fn flow_loss(tape: &mut Tape, v_pred: &Tensor, z0: &Tensor, z1: &Tensor) -> Result<Tensor> {
    if v_pred.shape() != z0.shape() || z0.shape() != z1.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "flow_loss",
            lhs: v_pred.shape().to_vec(),
            rhs: z0.shape().to_vec(),
        });
    }
    let target = tape.sub(z1, z0)?;
    let diff = tape.sub(v_pred, &target)?;
    let sq = tape.mul(&diff, &diff)?;
    tape.mean(&sq)
}

/// Dispersion over one adapter's outputs: for each anchor user `u`,
/// `log sum_{u' != u} exp(-||d_u - d_u'||)`, averaged over anchors.
/// Each entry is one user's flattened direction vector; user ids must be
/// distinct and at least two users must be present.
pub fn dispersion_loss(tape: &mut Tape, deltas: &[(u32, Tensor)]) -> Result<Tensor> {
    if deltas.len() < 2 {
        return Err(TensorError::Invalid {
            op: "dispersion_loss",
            msg: format!("needs >= 2 distinct users, got {}", deltas.len()),
        });
    }
    for (i, (ida, _)) in deltas.iter().enumerate() {
        for (idb, _) in &deltas[i + 1..] {
            if ida == idb {
                return Err(TensorError::Invalid {
                    op: "dispersion_loss",
                    msg: format!("duplicate user id {ida}"),
                });
            }
        }
    }

    // Pairwise distances, computed once per unordered pair.
    let n = deltas.len();
    let mut neg_dist = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = tape.l2_distance(&deltas[i].1, &deltas[j].1)?;
            let nd = tape.neg(&d)?;
            neg_dist[i][j] = Some(nd.clone());
            neg_dist[j][i] = Some(nd);
        }
    }

    let mut anchor_terms = Vec::with_capacity(n);
    for i in 0..n {
        // max-shifted log-sum-exp: the shift is a runtime constant, so the
        // value and gradient are exact while exp stays in range even when
        // users are pushed very far apart
        let negatives: Vec<&Tensor> = (0..n)
            .filter(|&j| j != i)
            .map(|j| neg_dist[i][j].as_ref().unwrap())
            .collect();
        let shift = negatives
            .iter()
            .map(|t| t.item())
            .fold(f64::NEG_INFINITY, f64::max);
        let shift_t = Tensor::scalar(shift);
        let exps: Vec<Tensor> = negatives
            .iter()
            .map(|nd| {
                let shifted = tape.sub(nd, &shift_t)?;
                tape.exp(&shifted)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = exps.iter().collect();
        let stacked = tape.concat(&refs, 0)?;
        let total = tape.sum(&stacked)?;
        let logsum = tape.ln(&total)?;
        anchor_terms.push(tape.add(&logsum, &shift_t)?);
    }
    let refs: Vec<&Tensor> = anchor_terms.iter().collect();
    let stacked = tape.concat(&refs, 0)?;
    tape.mean(&stacked)
}

/// `flow + lambda_shared * disp_shared + lambda_distinct * disp_distinct`.
pub fn total_loss(
    tape: &mut Tape,
    flow: &Tensor,
    disp_shared: &Tensor,
    disp_distinct: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    let ws = tape.scale(disp_shared, weights.lambda_shared)?;
    let wd = tape.scale(disp_distinct, weights.lambda_distinct)?;
    let partial = tape.add(flow, &ws)?;
    tape.add(&partial, &wd)
}
