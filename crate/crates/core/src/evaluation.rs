//! Full-reference metrics, roughness, column profiles and inference on
//! images of any size.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gray::{list_images, read_gray, ImageGray};
use crate::model::Model;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(op: &'static str, a: &ImageGray, b: &ImageGray) -> Result<()> {
    if a.height() != b.height() {
        return Err(Error::dim(
            op,
            "height",
            format!("{} vs {}", a.height(), b.height()),
        ));
    }
    if a.width() != b.width() {
        return Err(Error::dim(
            op,
            "width",
            format!("{} vs {}", a.width(), b.width()),
        ));
    }
    Ok(())
}

pub fn mse(a: &ImageGray, b: &ImageGray) -> Result<f64> {
    check_same("mse", a, b)?;
    let s: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum();
    Ok(s / a.pixels().len() as f64)
}

/// Peak-1 PSNR in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageGray, b: &ImageGray) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * e.log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable valid-region Gaussian filtering of `f(y, x)`.
fn filter_valid(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let t = gaussian_taps();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| t[k] * f(y, x + k)).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|k| t[k] * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over every full 11x11 Gaussian window (sigma 1.5, L = 1).
pub fn ssim(a: &ImageGray, b: &ImageGray) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim",
            "height",
            format!("{h} is below the {SSIM_WINDOW}-pixel window"),
        ));
    }
    if w < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim",
            "width",
            format!("{w} is below the {SSIM_WINDOW}-pixel window"),
        ));
    }
    let pa = |y: usize, x: usize| a.get(y, x) as f64;
    let pb = |y: usize, x: usize| b.get(y, x) as f64;
    let ma = filter_valid(h, w, pa);
    let mb = filter_valid(h, w, pb);
    let saa = filter_valid(h, w, |y, x| pa(y, x) * pa(y, x));
    let sbb = filter_valid(h, w, |y, x| pb(y, x) * pb(y, x));
    let sab = filter_valid(h, w, |y, x| pa(y, x) * pb(y, x));
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..ma.len())
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cov = sab[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / ma.len() as f64)
}

/// First-difference L1 energy over image L1 energy:
/// `(sum |a(y,x+1) - a(y,x)| + sum |a(y+1,x) - a(y,x)|) / sum |a|`.
/// Zero for an all-zero image.
pub fn roughness(a: &ImageGray) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut horiz = 0.0;
    let mut vert = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = a.get(y, x) as f64;
            if x + 1 < w {
                horiz += (a.get(y, x + 1) as f64 - v).abs();
            }
            if y + 1 < h {
                vert += (a.get(y + 1, x) as f64 - v).abs();
            }
        }
    }
    let norm: f64 = a.pixels().iter().map(|&v| (v as f64).abs()).sum();
    if norm == 0.0 {
        0.0
    } else {
        (horiz + vert) / norm
    }
}

/// Mean of every column.
pub fn column_means(a: &ImageGray) -> Vec<f64> {
    let mut m = vec![0.0; a.width()];
    for y in 0..a.height() {
        for (acc, &v) in m.iter_mut().zip(a.row(y)) {
            *acc += v as f64;
        }
    }
    m.iter().map(|s| s / a.height() as f64).collect()
}

/// One-column CSV (`x,mean`) of [`column_means`].
pub fn column_means_csv(a: &ImageGray) -> String {
    let mut s = String::from("x,mean\n");
    for (x, m) in column_means(a).iter().enumerate() {
        let _ = writeln!(s, "{x},{m:.8}");
    }
    s
}

/// Restores an image of any size at least 8x8: mirror-pads bottom and
/// right up to the model's required multiple, runs the network and crops
/// back. The result is clamped to [0, 1].
pub fn infer_padded(model: &Model<f32>, img: &ImageGray) -> Result<ImageGray> {
    let (h, w) = (img.height(), img.width());
    if h < 8 {
        return Err(Error::dim("infer", "height", format!("{h} is below 8")));
    }
    if w < 8 {
        return Err(Error::dim("infer", "width", format!("{w} is below 8")));
    }
    let k = model.config().required_multiple();
    let (ph, pw) = (h.div_ceil(k) * k, w.div_ceil(k) * k);
    let input = if (ph, pw) == (h, w) {
        img.clone()
    } else {
        img.reflect_pad(ph, pw)?
    };
    let out = model.predict(&input.to_tensor())?;
    let full = ImageGray::from_tensor(&out, 0)?;
    Ok(full.crop(0, 0, h, w)?.clamped())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Roughness of the evaluated (not the reference) image.
    pub rho: f64,
}

impl ImageMetrics {
    pub fn compute(
        name: impl Into<String>,
        pred: &ImageGray,
        reference: &ImageGray,
    ) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            psnr: psnr(pred, reference)?,
            ssim: ssim(pred, reference)?,
            rho: roughness(pred),
        })
    }
}

/// Per-image metrics with aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ImageMetrics>,
}

/// `(mean, population std)`; zeros for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt(),
    )
}

impl MetricsReport {
    pub fn psnr(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.psnr).collect::<Vec<_>>())
    }

    pub fn ssim(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.ssim).collect::<Vec<_>>())
    }

    pub fn rho(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.rho).collect::<Vec<_>>())
    }

    /// `image,psnr,ssim,rho` with fixed precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim,rho\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.8},{:.8}", r.name, r.psnr, r.ssim, r.rho);
        }
        s
    }

    pub fn summary(&self) -> String {
        let (pm, ps) = self.psnr();
        let (sm, ss) = self.ssim();
        let (rm, rs) = self.rho();
        format!(
            "images: {}\npsnr_mean: {pm:.4}\npsnr_std: {ps:.4}\nssim_mean: {sm:.6}\nssim_std: {ss:.6}\nrho_mean: {rm:.6}\nrho_std: {rs:.6}\n",
            self.rows.len()
        )
    }
}

/// Scores every image in `pred_dir` against the same-named file in
/// `ref_dir`. A missing reference or a size mismatch names the file.
pub fn compare_dirs(pred_dir: &Path, ref_dir: &Path) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for p in list_images(pred_dir)? {
        let name = p
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let r = ref_dir.join(&name);
        if !r.is_file() {
            return Err(Error::Image {
                path: r,
                detail: "no reference with this name".into(),
            });
        }
        let (pred, reference) = (read_gray(&p)?, read_gray(&r)?);
        if !pred.same_shape(&reference) {
            return Err(Error::dim(
                "compare",
                "shape",
                format!(
                    "{}: {}x{} does not match reference {}x{}",
                    p.display(),
                    pred.height(),
                    pred.width(),
                    reference.height(),
                    reference.width()
                ),
            ));
        }
        report
            .rows
            .push(ImageMetrics::compute(name, &pred, &reference)?);
    }
    Ok(report)
}
