//! Training-free destriping references: midway histogram equalization of
//! neighbouring columns and two-pass one-dimensional guided filtering.

use crate::error::{Error, Result};
use crate::gray::ImageGray;

/// Half-width of the column neighbourhood used by [`mhe_destripe`].
pub const MHE_DEFAULT_HALF_WIDTH: usize = 8;

/// Maps each column's sorted values onto the midway distribution of its
/// `2k + 1` neighbouring columns (clipped at the borders). Pixels keep
/// their within-column rank; equal values are ranked by row.
pub fn mhe_destripe(image: &ImageGray, k: usize) -> Result<ImageGray> {
    let (h, w) = (image.height(), image.width());
    if w < 2 {
        return Err(Error::dim(
            "mhe",
            "width",
            format!("{w} column(s); need at least 2"),
        ));
    }
    // order[x][i]: row holding the i-th smallest value of column x
    let mut order = Vec::with_capacity(w);
    let mut sorted = vec![0.0f64; w * h];
    for x in 0..w {
        let mut rows: Vec<usize> = (0..h).collect();
        rows.sort_by(|&a, &b| image.get(a, x).total_cmp(&image.get(b, x)));
        for (i, &y) in rows.iter().enumerate() {
            sorted[i * w + x] = image.get(y, x) as f64;
        }
        order.push(rows);
    }
    let mut out = image.clone();
    let mut prefix = vec![0.0f64; w + 1];
    for i in 0..h {
        for x in 0..w {
            prefix[x + 1] = prefix[x] + sorted[i * w + x];
        }
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(k), (x + k).min(w - 1));
            let mid = (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64;
            out.set(order[x][i], x, mid as f32);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidedFilterParams {
    /// Half-width of the 1-D window.
    pub radius: usize,
    /// Regularization; larger values smooth more.
    pub eps: f64,
}

impl Default for GuidedFilterParams {
    fn default() -> Self {
        Self {
            radius: 8,
            eps: 1e-3,
        }
    }
}

impl GuidedFilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::config("radius", "must be at least 1"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(
                "eps",
                format!("{} is not positive", self.eps),
            ));
        }
        Ok(())
    }
}

/// Means over `[i - r, i + r]` clipped to the signal.
fn box_mean(v: &[f64], r: usize) -> Vec<f64> {
    let n = v.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + v[i];
    }
    (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(r), (i + r).min(n - 1));
            (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect()
}

/// Self-guided 1-D guided filter of a signal.
pub fn guided_filter_1d(p: &[f64], params: &GuidedFilterParams) -> Vec<f64> {
    let r = params.radius;
    let mean = box_mean(p, r);
    let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
    let mean_sq = box_mean(&sq, r);
    let a: Vec<f64> = mean
        .iter()
        .zip(&mean_sq)
        .map(|(m, s)| {
            let var = (s - m * m).max(0.0);
            var / (var + params.eps)
        })
        .collect();
    let b: Vec<f64> = mean.iter().zip(&a).map(|(m, a)| m - a * m).collect();
    let (ma, mb) = (box_mean(&a, r), box_mean(&b, r));
    p.iter()
        .zip(ma.iter().zip(&mb))
        .map(|(v, (a, b))| a * v + b)
        .collect()
}

/// Row-wise guided filtering separates a stripe-free base; column-wise
/// filtering of the residual keeps its column-coherent part as the stripe
/// estimate, which is subtracted. The output is clamped to [0, 1].
pub fn gf_destripe(image: &ImageGray, params: &GuidedFilterParams) -> Result<ImageGray> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let mut residual = vec![0.0f64; h * w];
    for y in 0..h {
        let row: Vec<f64> = image.row(y).iter().map(|&v| v as f64).collect();
        let base = guided_filter_1d(&row, params);
        for x in 0..w {
            residual[y * w + x] = row[x] - base[x];
        }
    }
    let mut out = image.clone();
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| residual[y * w + x]).collect();
        let stripe = guided_filter_1d(&col, params);
        for y in 0..h {
            out.set(
                y,
                x,
                (image.get(y, x) as f64 - stripe[y]).clamp(0.0, 1.0) as f32,
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_mean_clips_window_at_borders() {
        let m = box_mean(&[1.0, 2.0, 3.0, 4.0], 1);
        assert_eq!(m, [1.5, 2.0, 3.0, 3.5]);
    }

    #[test]
    fn guided_filter_keeps_constant_signal() {
        let p = vec![0.3; 9];
        let q = guided_filter_1d(&p, &GuidedFilterParams::default());
        assert!(q.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
