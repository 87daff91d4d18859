//! Depth evaluation protocol: REL / RMSE / log10 / threshold accuracies under
//! caps, floors, crops and flip averaging, plus mean-relative-improvement
//! aggregation across datasets and across metrics.

use crate::array::{resample_bilinear, NdArray};
use crate::depth::DepthMap;
use crate::error::{Error, Result};

/// Scores of one dataset evaluation; the unit of relative-improvement math.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub rmse: f64,
    pub log10: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropKind {
    None,
    Eigen,
    Garg,
}

impl CropKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CropKind::None),
            "eigen" => Ok(CropKind::Eigen),
            "garg" => Ok(CropKind::Garg),
            other => Err(Error::Config(format!("unknown crop kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CropKind::None => "none",
            CropKind::Eigen => "eigen",
            CropKind::Garg => "garg",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub depth_cap: f64,
    pub depth_floor: f64,
    pub crop: CropKind,
    pub flip_average: bool,
}

impl EvalProtocol {
    pub fn new(depth_cap: f64, depth_floor: f64, crop: CropKind, flip_average: bool) -> Result<Self> {
        if !(depth_floor > 0.0 && depth_cap > depth_floor) {
            return Err(Error::Contract(format!(
                "protocol requires cap > floor > 0, got cap={depth_cap}, floor={depth_floor}"
            )));
        }
        Ok(EvalProtocol { depth_cap, depth_floor, crop, flip_average })
    }
}

/// Standard rectangular evaluation crops as (row_lo, row_hi, col_lo, col_hi)
/// fractions; indices keep floor(lo*dim) <= i < floor(hi*dim).
const GARG_CROP: (f64, f64, f64, f64) = (0.40810811, 0.99189189, 0.03594771, 0.96405229);
const EIGEN_CROP: (f64, f64, f64, f64) = (0.3324324, 0.91351351, 0.03594771, 0.96405229);

/// Restricts a validity mask to the crop window.
pub fn apply_crop(mask: &[bool], crop: CropKind, h: usize, w: usize) -> Result<Vec<bool>> {
    if mask.len() != h * w {
        return Err(Error::Dimension(format!(
            "apply_crop: mask length {} != {h}x{w}",
            mask.len()
        )));
    }
    let fractions = match crop {
        CropKind::None => return Ok(mask.to_vec()),
        CropKind::Garg => GARG_CROP,
        CropKind::Eigen => EIGEN_CROP,
    };
    let (r_lo, r_hi, c_lo, c_hi) = (
        (fractions.0 * h as f64).floor() as usize,
        (fractions.1 * h as f64).floor() as usize,
        (fractions.2 * w as f64).floor() as usize,
        (fractions.3 * w as f64).floor() as usize,
    );
    let mut out = vec![false; mask.len()];
    for r in r_lo..r_hi.min(h) {
        for c in c_lo..c_hi.min(w) {
            out[r * w + c] = mask[r * w + c];
        }
    }
    Ok(out)
}

/// REL, RMSE, log10 and threshold accuracies over valid pixels with
/// floor < gt <= cap inside the crop; the prediction is resampled to the
/// ground-truth resolution first.
pub fn compute_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    protocol: &EvalProtocol,
) -> Result<MetricRecord> {
    let (gh, gw) = (gt.height(), gt.width());
    let pred_vals: Vec<f32> = if pred.height() == gh && pred.width() == gw {
        pred.values.data().to_vec()
    } else {
        resample_bilinear(pred.values.data(), 1, pred.height(), pred.width(), gh, gw)
    };
    let mask = apply_crop(&gt.valid, protocol.crop, gh, gw)?;

    let mut n = 0usize;
    let (mut rel, mut sq, mut log10, mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0, 0u32, 0u32, 0u32);
    for ((&p, &g), &ok) in pred_vals.iter().zip(gt.values.data()).zip(&mask) {
        let (p, g) = (p as f64, g as f64);
        if !ok || !(g > protocol.depth_floor && g <= protocol.depth_cap) || !p.is_finite() {
            continue;
        }
        if p <= 0.0 {
            return Err(Error::Contract("compute_metrics: nonpositive prediction".into()));
        }
        n += 1;
        rel += (g - p).abs() / g;
        sq += (g - p) * (g - p);
        log10 += (g.log10() - p.log10()).abs();
        let ratio = (g / p).max(p / g);
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            d2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract(
            "compute_metrics: no valid pixels after mask, crop and cap".into(),
        ));
    }
    let nf = n as f64;
    Ok(MetricRecord {
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        rel: rel / nf,
        rmse: (sq / nf).sqrt(),
        log10: log10 / nf,
        n_pixels: n,
    })
}

/// Combines a prediction with the prediction made on the mirrored input:
/// output = (pred + mirror(pred_of_mirrored)) / 2 per pixel.
pub fn flip_average(pred: &DepthMap, pred_of_mirrored: &DepthMap) -> Result<DepthMap> {
    if pred.values.shape() != pred_of_mirrored.values.shape() {
        return Err(Error::Dimension(format!(
            "flip_average: extents {:?} vs {:?}",
            pred.values.shape(),
            pred_of_mirrored.values.shape()
        )));
    }
    let mirrored = pred_of_mirrored.flip_horizontal();
    let data: Vec<f32> = pred
        .values
        .data()
        .iter()
        .zip(mirrored.values.data())
        .map(|(&a, &b)| (a + b) / 2.0)
        .collect();
    let values = NdArray::from_vec(pred.values.shape().to_vec(), data)?;
    DepthMap::from_values(values)
}

/// Per-sample records averaged into one dataset record.
pub fn average_records(records: &[MetricRecord]) -> Result<MetricRecord> {
    if records.is_empty() {
        return Err(Error::Contract("average_records: empty".into()));
    }
    let n = records.len() as f64;
    Ok(MetricRecord {
        delta1: records.iter().map(|r| r.delta1).sum::<f64>() / n,
        delta2: records.iter().map(|r| r.delta2).sum::<f64>() / n,
        delta3: records.iter().map(|r| r.delta3).sum::<f64>() / n,
        rel: records.iter().map(|r| r.rel).sum::<f64>() / n,
        rmse: records.iter().map(|r| r.rmse).sum::<f64>() / n,
        log10: records.iter().map(|r| r.log10).sum::<f64>() / n,
        n_pixels: records.iter().map(|r| r.n_pixels).sum(),
    })
}

fn relative_improvement(r: f64, t: f64, lower_is_better: bool) -> Result<f64> {
    if r == 0.0 {
        return Err(Error::Contract("relative improvement: reference score is zero".into()));
    }
    Ok(if lower_is_better { (r - t) / r } else { (t - r) / r })
}

/// Mean relative improvement over datasets: each slot pairs one dataset's
/// reference and target score under the given direction.
pub fn mri_datasets(
    reference: &[f64],
    target: &[f64],
    lower_is_better: &[bool],
) -> Result<f64> {
    if reference.len() != target.len() || reference.len() != lower_is_better.len() {
        return Err(Error::Dimension(format!(
            "mri_datasets: lengths {} / {} / {} differ",
            reference.len(),
            target.len(),
            lower_is_better.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Contract("mri_datasets: empty score lists".into()));
    }
    let mut acc = 0.0;
    for ((&r, &t), &lb) in reference.iter().zip(target).zip(lower_is_better) {
        acc += relative_improvement(r, t, lb)?;
    }
    Ok(acc / reference.len() as f64)
}

/// Mean relative improvement across the (delta1 up, REL down, RMSE down)
/// metric triple of a single dataset.
pub fn mri_metrics(reference: &MetricRecord, target: &MetricRecord) -> Result<f64> {
    let ris = [
        relative_improvement(reference.delta1, target.delta1, false)?,
        relative_improvement(reference.rel, target.rel, true)?,
        relative_improvement(reference.rmse, target.rmse, true)?,
    ];
    Ok(ris.iter().sum::<f64>() / 3.0)
}
