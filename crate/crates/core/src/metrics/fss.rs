use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

/// Per-pixel event fractions over an `n x n` window centred on each pixel.
/// Windows shrink at the borders: only in-grid cells are averaged.
pub fn fractions(mask: &Mask, n: usize) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    // Summed-area table with a zero row and column in front.
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0u32;
        for j in 0..w {
            row += u32::from(mask.data()[i * w + j]);
            sat[(i + 1) * (w + 1) + j + 1] = sat[i * (w + 1) + j + 1] + row;
        }
    }
    let r = n / 2;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(h));
        for j in 0..w {
            let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(w));
            let s = sat[i1 * (w + 1) + j1] + sat[i0 * (w + 1) + j0] - sat[i0 * (w + 1) + j1] - sat[i1 * (w + 1) + j0];
            out.push(f64::from(s) / ((i1 - i0) * (j1 - j0)) as f64);
        }
    }
    out
}

/// Sums behind an FSS value; additive across samples for pooled scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FssParts {
    /// Sum over pixels of `(f_pred - f_obs)^2`.
    pub mse_sum: f64,
    /// Sum over pixels of `f_pred^2 + f_obs^2`.
    pub ref_sum: f64,
}

impl FssParts {
    pub fn merge(self, o: Self) -> Self {
        Self {
            mse_sum: self.mse_sum + o.mse_sum,
            ref_sum: self.ref_sum + o.ref_sum,
        }
    }

    /// `1 - MSE / MSE_ref`, or 1 when both fields are empty.
    pub fn score(&self) -> f64 {
        if self.ref_sum == 0.0 {
            1.0
        } else {
            1.0 - self.mse_sum / self.ref_sum
        }
    }
}

fn check(pred: &Mask, obs: &Mask, n: usize) -> Result<()> {
    if !pred.same_shape(obs) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", obs.height(), obs.width()),
            actual: format!("{}x{}", pred.height(), pred.width()),
        });
    }
    if n == 0 || n.is_multiple_of(2) {
        return Err(Error::Config(format!("FSS neighbourhood must be odd and positive, got {n}")));
    }
    if n > obs.height() || n > obs.width() {
        return Err(Error::Config(format!(
            "FSS neighbourhood {n} exceeds the {}x{} grid",
            obs.height(),
            obs.width()
        )));
    }
    Ok(())
}

pub fn fss_parts(pred: &Mask, obs: &Mask, n: usize) -> Result<FssParts> {
    check(pred, obs, n)?;
    let fp = fractions(pred, n);
    let fo = fractions(obs, n);
    let mut parts = FssParts::default();
    for (a, b) in fp.iter().zip(&fo) {
        parts.mse_sum += (a - b) * (a - b);
        parts.ref_sum += a * a + b * b;
    }
    Ok(parts)
}

pub fn fss(pred: &Mask, obs: &Mask, n: usize) -> Result<f64> {
    Ok(fss_parts(pred, obs, n)?.score())
}
