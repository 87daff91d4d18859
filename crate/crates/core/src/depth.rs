use crate::array::NdArray;
use crate::error::{Error, Result};

/// Metric depth grid in meters with a validity mask.
///
/// Invalid pixels (no ground truth, e.g. sky) carry NaN in `values` and
/// `false` in `valid`; valid pixels are finite and positive.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub values: NdArray<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a fully-valid map from positive finite values.
    pub fn dense(values: NdArray<f32>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "depth map must be [H, W], got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Contract("dense depth map requires positive finite values".into()));
        }
        let valid = vec![true; values.len()];
        Ok(DepthMap { values, valid })
    }

    /// Builds from raw values where NaN marks invalid pixels.
    pub fn from_values(values: NdArray<f32>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "depth map must be [H, W], got {:?}",
                values.shape()
            )));
        }
        let valid: Vec<bool> = values.data().iter().map(|v| v.is_finite()).collect();
        if values
            .data()
            .iter()
            .zip(&valid)
            .any(|(v, &ok)| ok && *v <= 0.0)
        {
            return Err(Error::Contract("valid depth values must be positive".into()));
        }
        Ok(DepthMap { values, valid })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Horizontal mirror, preserving the mask.
    pub fn flip_horizontal(&self) -> Self {
        let values = self.values.flip_horizontal();
        let w = self.width();
        let mut valid = self.valid.clone();
        for row in valid.chunks_mut(w) {
            row.reverse();
        }
        DepthMap { values, valid }
    }
}

/// Scale/shift-ambiguous depth prediction, full resolution, unitless.
#[derive(Debug, Clone)]
pub struct RelativeDepthMap {
    pub values: NdArray<f32>,
}
