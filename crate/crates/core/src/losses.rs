//! Training objectives: scale-invariant log loss for metric fine-tuning,
//! scale-and-shift-invariant loss for relative pre-training, cross-entropy
//! for the trained router.

use crate::array::NdArray;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Variance-term weight of the scale-invariant log loss, in [0, 1].
    pub silog_lambda: f64,
    /// Output scale of the scale-invariant log loss.
    pub silog_scale: f64,
    /// Fraction of largest residuals dropped by the shift/scale-invariant
    /// loss, in [0, 0.5). 0 disables trimming.
    pub ssi_trim: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { silog_lambda: 0.85, silog_scale: 10.0, ssi_trim: 0.0 }
    }
}

fn mask_and_count<S: Scalar>(
    tape: &Tape<S>,
    valid: &[bool],
    shape: &[usize],
    min_count: usize,
    what: &str,
) -> Result<(NodeId, usize)> {
    let count = valid.iter().filter(|&&v| v).count();
    if count < min_count {
        return Err(Error::Contract(format!(
            "{what}: needs at least {min_count} valid pixels, got {count}"
        )));
    }
    let mask = NdArray::from_vec(
        shape.to_vec(),
        valid.iter().map(|&v| if v { S::ONE } else { S::ZERO }).collect(),
    )?;
    Ok((tape.leaf(mask), count))
}

/// Replaces values at invalid pixels with 1.0 so logs stay finite; the mask
/// removes their contribution.
fn sanitized_leaf<S: Scalar>(tape: &Tape<S>, values: &NdArray<S>, valid: &[bool]) -> NodeId {
    let mut data = values.data().to_vec();
    for (v, &ok) in data.iter_mut().zip(valid) {
        if !ok {
            *v = S::ONE;
        }
    }
    tape.leaf(NdArray::from_vec(values.shape().to_vec(), data).expect("same shape"))
}

fn masked_sum<S: Scalar>(tape: &Tape<S>, x: NodeId, mask: NodeId) -> Result<NodeId> {
    let m = tape.mul(x, mask)?;
    Ok(tape.sum_all(m))
}

/// Scale-invariant log loss over jointly-valid pixels:
/// `scale * sqrt(mean(g^2) - lambda * mean(g)^2)` with `g = ln(pred) - ln(gt)`.
///
/// Differentiable in `pred`. The value under the square root is clamped at
/// zero before the root so converged predictions cannot produce NaN from
/// rounding.
pub fn silog<S: Scalar>(
    tape: &Tape<S>,
    pred: NodeId,
    gt: &NdArray<S>,
    valid: &[bool],
    cfg: &LossConfig,
) -> Result<NodeId> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::Dimension(format!(
            "silog: pred {:?} vs gt {:?}",
            tape.shape(pred),
            gt.shape()
        )));
    }
    {
        let pv = tape.value(pred);
        for ((&p, &g), &ok) in pv.data().iter().zip(gt.data()).zip(valid) {
            if ok && (p <= S::ZERO || g <= S::ZERO) {
                return Err(Error::Contract("silog: depths must be positive on valid set".into()));
            }
        }
    }
    let (mask, count) = mask_and_count(tape, valid, gt.shape(), 1, "silog")?;
    let gt_node = sanitized_leaf(tape, gt, valid);
    let g = tape.sub(tape.ln(pred), tape.ln(gt_node))?;
    let inv = S::from_f64(1.0 / count as f64);
    let mean_g = tape.mul_scalar(masked_sum(tape, g, mask)?, inv);
    let g2 = tape.mul(g, g)?;
    let mean_g2 = tape.mul_scalar(masked_sum(tape, g2, mask)?, inv);
    let mean_g_sq = tape.mul(mean_g, mean_g)?;
    let lam = tape.mul_scalar(mean_g_sq, S::from_f64(cfg.silog_lambda));
    let inner = tape.sub(mean_g2, lam)?;
    let clamped = tape.clamp(inner, 0.0, f64::INFINITY);
    let guarded = tape.add_scalar(clamped, S::from_f64(1e-15));
    let root = tape.sqrt(guarded);
    Ok(tape.mul_scalar(root, S::from_f64(cfg.silog_scale)))
}

/// Least-squares aligns `pred` to `gt` with a scale and a shift over valid
/// pixels, then averages absolute residuals. Invariant to affine transforms
/// of `pred`; gradients flow through the closed-form alignment.
pub fn ssi_loss<S: Scalar>(
    tape: &Tape<S>,
    pred: NodeId,
    gt: &NdArray<S>,
    valid: &[bool],
    cfg: &LossConfig,
) -> Result<NodeId> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::Dimension(format!(
            "ssi_loss: pred {:?} vs gt {:?}",
            tape.shape(pred),
            gt.shape()
        )));
    }
    let (mask, count) = mask_and_count(tape, valid, gt.shape(), 2, "ssi_loss")?;
    let gt_node = sanitized_leaf(tape, gt, valid);
    let m = S::from_f64(count as f64);
    let inv = S::from_f64(1.0 / count as f64);

    let sp = masked_sum(tape, pred, mask)?;
    let sg = masked_sum(tape, gt_node, mask)?;
    let pp = tape.mul(pred, pred)?;
    let spp = masked_sum(tape, pp, mask)?;
    let pg = tape.mul(pred, gt_node)?;
    let spg = masked_sum(tape, pg, mask)?;

    // denom = M * sum(p^2) - sum(p)^2; zero iff pred is constant on the mask.
    let denom = tape.sub(tape.mul_scalar(spp, m), tape.mul(sp, sp)?)?;
    let denom_v = tape.value(denom).item().to_f64();
    let scale_v = tape.value(spp).item().to_f64().abs().max(1.0);
    let degenerate = denom_v.abs() <= 1e-12 * scale_v * count as f64;

    let (s, b) = if degenerate {
        // Constant prediction: best fit is s = 0, b = mean(gt).
        let zero = tape.leaf(NdArray::scalar(S::ZERO));
        let b = tape.mul_scalar(sg, inv);
        (zero, b)
    } else {
        let num = tape.sub(tape.mul_scalar(spg, m), tape.mul(sp, sg)?)?;
        let s = tape.div(num, denom)?;
        let b = tape.mul_scalar(tape.sub(sg, tape.mul(s, sp)?)?, inv);
        (s, b)
    };

    let ones = tape.leaf(NdArray::full(gt.shape().to_vec(), S::ONE));
    let aligned = tape.add(tape.scalar_mul(pred, s)?, tape.scalar_mul(ones, b)?)?;
    let resid = tape.sub(aligned, gt_node)?;
    let abs_resid = tape.abs_pow(resid, 1.0);

    let trim_count = (cfg.ssi_trim * count as f64).floor() as usize;
    if trim_count == 0 {
        return Ok(tape.mul_scalar(masked_sum(tape, abs_resid, mask)?, inv));
    }
    // Trimmed variant: drop the largest residuals (selected by current value).
    let keep = count - trim_count;
    let resid_vals = tape.value_clone(abs_resid);
    let mut order: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    order.sort_by(|&a, &b| {
        resid_vals.data()[a]
            .partial_cmp(&resid_vals.data()[b])
            .expect("finite residuals")
            .then(a.cmp(&b))
    });
    let mut trimmed = vec![false; valid.len()];
    for &i in order.iter().take(keep) {
        trimmed[i] = true;
    }
    let (trim_mask, kept) = mask_and_count(tape, &trimmed, gt.shape(), 1, "ssi_loss")?;
    Ok(tape.mul_scalar(
        masked_sum(tape, abs_resid, trim_mask)?,
        S::from_f64(1.0 / kept as f64),
    ))
}

/// Negative log softmax probability of the true class.
pub fn router_ce<S: Scalar>(tape: &Tape<S>, logits: NodeId, label: usize) -> Result<NodeId> {
    let shape = tape.shape(logits);
    if shape.len() != 1 {
        return Err(Error::Dimension(format!("router_ce: logits must be rank 1, got {shape:?}")));
    }
    if label >= shape[0] {
        return Err(Error::Contract(format!(
            "router_ce: label {label} out of range for {} heads",
            shape[0]
        )));
    }
    let ls = tape.channel_log_softmax(logits)?;
    let picked = tape.pick(ls, label)?;
    Ok(tape.mul_scalar(picked, -S::ONE))
}

/// Convenience evaluation of silog on concrete depth maps (f64 graph).
pub fn silog_value(pred: &DepthMap, gt: &DepthMap, cfg: &LossConfig) -> Result<f64> {
    let joint: Vec<bool> =
        pred.valid.iter().zip(&gt.valid).map(|(&a, &b)| a && b).collect();
    let tape: Tape<f64> = Tape::new();
    let mut pv = pred.values.cast::<f64>();
    for (v, &ok) in pv.data_mut().iter_mut().zip(&joint) {
        if !ok {
            *v = 1.0;
        }
    }
    let p = tape.leaf(pv);
    let loss = silog(&tape, p, &gt.values.cast::<f64>(), &joint, cfg)?;
    let v = tape.value(loss).item();
    Ok(v)
}

/// Convenience evaluation of ssi_loss on concrete maps (f64 graph).
pub fn ssi_value(pred: &NdArray<f32>, gt: &DepthMap, cfg: &LossConfig) -> Result<f64> {
    let tape: Tape<f64> = Tape::new();
    let p = tape.leaf(pred.cast::<f64>());
    let loss = ssi_loss(&tape, p, &gt.values.cast::<f64>(), &gt.valid, cfg)?;
    let v = tape.value(loss).item();
    Ok(v)
}
