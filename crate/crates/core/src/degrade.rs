//! Column stripe-noise synthesis, procedural clean textures and paired
//! training corpora.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gray::{list_images, read_gray, ImageGray};
use crate::tensor::Tensor;

/// Largest accepted noise magnitude (intensity units).
pub const MAX_MAGNITUDE: f64 = 1.0;

/// Relative standard deviation of the per-column jitter on periodic stripes.
pub const PERIODIC_JITTER: f64 = 0.1;

/// Stripe-noise family with its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    /// Column offsets drawn from N(0, sigma).
    Gaussian { sigma: f64 },
    /// Column offsets drawn from U(-mu, mu).
    Uniform { mu: f64 },
    /// A random base pattern of length `period` repeated across the width.
    /// Its half-range is drawn from `[amp_min, amp_max]`.
    Periodic {
        period: usize,
        amp_min: f64,
        amp_max: f64,
        jitter: bool,
    },
    /// Per-column offset, gain and quadratic response:
    /// `I + n1 + n2 * I + n3 * I^2` with `n_k ~ N(0, sigma[k])`.
    Poly3 { sigma: [f64; 3] },
}

impl NoiseKind {
    pub fn family(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian { .. } => "gaussian",
            NoiseKind::Uniform { .. } => "uniform",
            NoiseKind::Periodic { .. } => "periodic",
            NoiseKind::Poly3 { .. } => "poly3",
        }
    }

    /// True when the corruption does not depend on the clean intensity.
    pub fn is_additive(&self) -> bool {
        !matches!(self, NoiseKind::Poly3 { .. })
    }

    /// Builds a kind from a family name and its numeric parameters:
    /// `gaussian sigma`, `uniform mu`, `periodic T amp_min amp_max`,
    /// `poly3 s1 s2 s3`.
    pub fn from_parts(family: &str, params: &[f64]) -> Result<Self> {
        let want = |n: usize| -> Result<()> {
            if params.len() != n {
                return Err(Error::config(
                    "params",
                    format!("{family} takes {n} parameter(s), got {}", params.len()),
                ));
            }
            Ok(())
        };
        let kind = match family {
            "gaussian" => {
                want(1)?;
                NoiseKind::Gaussian { sigma: params[0] }
            }
            "uniform" => {
                want(1)?;
                NoiseKind::Uniform { mu: params[0] }
            }
            "periodic" => {
                want(3)?;
                if params[0].fract() != 0.0 || params[0] < 0.0 {
                    return Err(Error::config(
                        "period",
                        format!("{} is not a whole number", params[0]),
                    ));
                }
                NoiseKind::Periodic {
                    period: params[0] as usize,
                    amp_min: params[1],
                    amp_max: params[2],
                    jitter: true,
                }
            }
            "poly3" => {
                want(3)?;
                NoiseKind::Poly3 {
                    sigma: [params[0], params[1], params[2]],
                }
            }
            other => return Err(Error::config("noise", format!("unknown family `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        let mag = |field: &str, v: f64| -> Result<()> {
            if !(0.0..=MAX_MAGNITUDE).contains(&v) {
                return Err(Error::config(
                    field,
                    format!("{v} outside [0, {MAX_MAGNITUDE}]"),
                ));
            }
            Ok(())
        };
        match *self {
            NoiseKind::Gaussian { sigma } => mag("sigma", sigma),
            NoiseKind::Uniform { mu } => mag("mu", mu),
            NoiseKind::Periodic {
                period,
                amp_min,
                amp_max,
                ..
            } => {
                if period < 2 {
                    return Err(Error::config("period", format!("{period} is below 2")));
                }
                mag("amp_min", amp_min)?;
                mag("amp_max", amp_max)?;
                if amp_min > amp_max {
                    return Err(Error::config(
                        "amp_min",
                        format!("{amp_min} exceeds amp_max {amp_max}"),
                    ));
                }
                Ok(())
            }
            NoiseKind::Poly3 { sigma } => {
                for (i, s) in sigma.iter().enumerate() {
                    mag(&format!("sigma{}", i + 1), *s)?;
                }
                Ok(())
            }
        }
    }

    /// Same family with every magnitude multiplied by `u`.
    pub fn scaled(&self, u: f64) -> Self {
        match *self {
            NoiseKind::Gaussian { sigma } => NoiseKind::Gaussian { sigma: sigma * u },
            NoiseKind::Uniform { mu } => NoiseKind::Uniform { mu: mu * u },
            NoiseKind::Periodic {
                period,
                amp_min,
                amp_max,
                jitter,
            } => NoiseKind::Periodic {
                period,
                amp_min: amp_min * u,
                amp_max: amp_max * u,
                jitter,
            },
            NoiseKind::Poly3 { sigma } => NoiseKind::Poly3 {
                sigma: sigma.map(|s| s * u),
            },
        }
    }
}

/// `family:p1:p2...`, e.g. `gaussian:0.05` or `periodic:8:0.02:0.05:nojitter`.
impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            NoiseKind::Uniform { mu } => write!(f, "uniform:{mu}"),
            NoiseKind::Periodic {
                period,
                amp_min,
                amp_max,
                jitter,
            } => {
                write!(f, "periodic:{period}:{amp_min}:{amp_max}")?;
                if !jitter {
                    write!(f, ":nojitter")?;
                }
                Ok(())
            }
            NoiseKind::Poly3 { sigma } => write!(f, "poly3:{}:{}:{}", sigma[0], sigma[1], sigma[2]),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts: Vec<&str> = s.split(':').collect();
        let family = parts.remove(0);
        let jitter = !(family == "periodic" && parts.last() == Some(&"nojitter"));
        if !jitter {
            parts.pop();
        }
        let params = parts
            .iter()
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::config("params", format!("`{p}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        match NoiseKind::from_parts(family, &params)? {
            NoiseKind::Periodic {
                period,
                amp_min,
                amp_max,
                ..
            } => Ok(NoiseKind::Periodic {
                period,
                amp_min,
                amp_max,
                jitter,
            }),
            k => Ok(k),
        }
    }
}

/// A noise kind bound to the seed of its random draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StripeSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl StripeSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// Mixes `index` into `seed` (splitmix64) for independent per-record streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("validated sigma")
}

/// Unclamped column offsets of an additive kind.
pub fn column_offsets(spec: &StripeSpec, width: usize) -> Result<Vec<f64>> {
    spec.kind.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        NoiseKind::Gaussian { sigma } => {
            let d = normal(sigma);
            Ok((0..width).map(|_| d.sample(&mut rng)).collect())
        }
        NoiseKind::Uniform { mu } => {
            if mu == 0.0 {
                return Ok(vec![0.0; width]);
            }
            let d = Uniform::new_inclusive(-mu, mu).expect("validated mu");
            Ok((0..width).map(|_| d.sample(&mut rng)).collect())
        }
        NoiseKind::Periodic {
            period,
            amp_min,
            amp_max,
            jitter,
        } => {
            let amp = if amp_max > amp_min {
                rng.random_range(amp_min..=amp_max)
            } else {
                amp_min
            };
            if amp == 0.0 {
                return Ok(vec![0.0; width]);
            }
            let base: Vec<f64> = (0..period).map(|_| rng.random_range(-amp..=amp)).collect();
            let eps = normal(PERIODIC_JITTER * amp);
            Ok((0..width)
                .map(|x| base[x % period] + if jitter { eps.sample(&mut rng) } else { 0.0 })
                .collect())
        }
        NoiseKind::Poly3 { .. } => Err(Error::config(
            "noise",
            "poly3 depends on the clean intensity and has no additive field",
        )),
    }
}

/// The unclamped additive stripe field of an `height x width` image.
pub fn stripe_field(spec: &StripeSpec, height: usize, width: usize) -> Result<ImageGray> {
    let c = column_offsets(spec, width)?;
    Ok(ImageGray::from_fn(height, width, |_, x| c[x] as f32))
}

/// Corrupts `clean` with column stripes. Returns `(degraded, noise)` where
/// `degraded` is clamped to [0, 1] and `noise = degraded - clean`.
pub fn synth_stripe(clean: &ImageGray, spec: &StripeSpec) -> Result<(ImageGray, ImageGray)> {
    let (h, w) = (clean.height(), clean.width());
    let respond: Box<dyn Fn(usize, f64) -> f64> = match spec.kind {
        NoiseKind::Poly3 { sigma } => {
            spec.kind.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let d = sigma.map(normal);
            let n: Vec<[f64; 3]> = (0..w)
                .map(|_| {
                    [
                        d[0].sample(&mut rng),
                        d[1].sample(&mut rng),
                        d[2].sample(&mut rng),
                    ]
                })
                .collect();
            Box::new(move |x, v| v + n[x][0] + n[x][1] * v + n[x][2] * v * v)
        }
        _ => {
            let c = column_offsets(spec, w)?;
            Box::new(move |x, v| v + c[x])
        }
    };
    let degraded = ImageGray::from_fn(h, w, |y, x| {
        respond(x, clean.get(y, x) as f64).clamp(0.0, 1.0) as f32
    });
    let noise = ImageGray::from_fn(h, w, |y, x| degraded.get(y, x) - clean.get(y, x));
    Ok((degraded, noise))
}

/// Per-record choice of noise parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSampler {
    /// Every record uses this kind.
    Fixed(NoiseKind),
    /// Magnitudes scaled by `u ~ U(0, 1)` per record.
    UpTo(NoiseKind),
}

impl NoiseSampler {
    pub fn draw(&self, rng: &mut impl Rng) -> NoiseKind {
        match self {
            NoiseSampler::Fixed(k) => *k,
            NoiseSampler::UpTo(k) => k.scaled(rng.random_range(0.0..=1.0)),
        }
    }

    fn kind(&self) -> &NoiseKind {
        match self {
            NoiseSampler::Fixed(k) | NoiseSampler::UpTo(k) => k,
        }
    }
}

impl Default for NoiseSampler {
    /// Training noise: Gaussian column offsets with sigma up to 0.15.
    fn default() -> Self {
        NoiseSampler::UpTo(NoiseKind::Gaussian { sigma: 0.15 })
    }
}

/// Extra patch variants emitted for every base crop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub rot90: bool,
    pub flip: bool,
    pub scale: bool,
}

impl Augment {
    pub fn all() -> Self {
        Self {
            rot90: true,
            flip: true,
            scale: true,
        }
    }

    fn variants(&self) -> Vec<Transform> {
        let mut v = vec![Transform::Identity];
        if self.rot90 {
            v.push(Transform::Rot90);
        }
        if self.flip {
            v.push(Transform::Flip);
        }
        if self.scale {
            v.push(Transform::Scale);
        }
        v
    }
}

/// How a record's clean patch was derived from its source crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Rot90,
    Flip,
    /// Resampled from a larger or smaller source region.
    Scale,
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transform::Identity => "identity",
            Transform::Rot90 => "rot90",
            Transform::Flip => "flip",
            Transform::Scale => "scale",
        })
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Transform::Identity),
            "rot90" => Ok(Transform::Rot90),
            "flip" => Ok(Transform::Flip),
            "scale" => Ok(Transform::Scale),
            other => Err(Error::format("transform", format!("unknown `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    /// Square patch side.
    pub patch: usize,
    pub count: usize,
    pub augment: Augment,
    pub sampler: NoiseSampler,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            patch: 64,
            count: 1000,
            augment: Augment::default(),
            sampler: NoiseSampler::default(),
            seed: 0,
        }
    }
}

/// One clean/degraded patch pair and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: usize,
    pub source: String,
    /// Source region `(top, left, extent)` before the transform.
    pub region: (usize, usize, usize),
    pub transform: Transform,
    pub spec: StripeSpec,
    pub clean: ImageGray,
    pub degraded: ImageGray,
}

impl Record {
    pub fn noise(&self) -> ImageGray {
        let (c, d) = (&self.clean, &self.degraded);
        ImageGray::from_fn(c.height(), c.width(), |y, x| d.get(y, x) - c.get(y, x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub patch: usize,
    pub records: Vec<Record>,
}

pub const MANIFEST: &str = "manifest.txt";
pub const DATA: &str = "data.bin";

/// Cuts `count` patches from `sources` and corrupts each one. Record `i`
/// is base crop `i / m` under variant `i % m`, where `m` counts the
/// enabled augmentations plus the identity. Sources smaller than the patch
/// are skipped with a warning.
pub fn make_corpus(sources: &[(String, ImageGray)], cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.sampler.kind().validate()?;
    if cfg.patch == 0 {
        return Err(Error::config("patch", "must be at least 1"));
    }
    let usable: Vec<&(String, ImageGray)> = sources
        .iter()
        .filter(|(name, im)| {
            let ok = im.height() >= cfg.patch && im.width() >= cfg.patch;
            if !ok {
                log::warn!(
                    "skipping {name}: {}x{} is smaller than the patch",
                    im.height(),
                    im.width()
                );
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::config(
            "clean images",
            format!("no image is at least {0}x{0}", cfg.patch),
        ));
    }
    let variants = cfg.augment.variants();
    let m = variants.len();
    let records = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut base = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, (i / m) as u64));
            let (name, src) = usable[base.random_range(0..usable.len())];
            let p = cfg.patch;
            let top = base.random_range(0..=src.height() - p);
            let left = base.random_range(0..=src.width() - p);
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x5EED_0F_5712_1FE5, i as u64));
            let transform = variants[i % m];
            let crop = src.crop(top, left, p, p)?;
            let (region, clean) = match transform {
                Transform::Identity => ((top, left, p), crop),
                Transform::Rot90 => ((top, left, p), crop.rot90()),
                Transform::Flip => ((top, left, p), crop.flip_horizontal()),
                Transform::Scale => {
                    let limit = src.height().min(src.width());
                    let s: f64 = rng.random_range(0.5..=2.0);
                    let e = ((p as f64 * s).round() as usize).clamp(1, limit);
                    let ct = (top + p / 2).saturating_sub(e / 2).min(src.height() - e);
                    let cl = (left + p / 2).saturating_sub(e / 2).min(src.width() - e);
                    ((ct, cl, e), src.crop(ct, cl, e, e)?.resized(p, p).clamped())
                }
            };
            let kind = cfg.sampler.draw(&mut rng);
            let spec = StripeSpec::new(kind, rng.random());
            let (degraded, _) = synth_stripe(&clean, &spec)?;
            Ok(Record {
                id: i,
                source: name.clone(),
                region,
                transform,
                spec,
                clean,
                degraded,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        patch: cfg.patch,
        records,
    })
}

/// Reads every image in `dir`, skipping unreadable files with a warning.
pub fn load_sources(dir: &Path) -> Result<Vec<(String, ImageGray)>> {
    let mut out = Vec::new();
    for p in list_images(dir)? {
        match read_gray(&p) {
            Ok(im) => out.push((
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                im,
            )),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes `manifest.txt` and `data.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut man = BufWriter::new(File::create(dir.join(MANIFEST))?);
        writeln!(
            man,
            "# stripeclean corpus v1 patch={} records={}",
            self.patch,
            self.records.len()
        )?;
        writeln!(
            man,
            "# id\tsource\ttop\tleft\textent\ttransform\tnoise\tseed"
        )?;
        let mut data = BufWriter::new(File::create(dir.join(DATA))?);
        for r in &self.records {
            let (t, l, e) = r.region;
            writeln!(
                man,
                "{}\t{}\t{t}\t{l}\t{e}\t{}\t{}\t{}",
                r.id, r.source, r.transform, r.spec.kind, r.spec.seed
            )?;
            r.clean.to_tensor().write_tnsr(&mut data)?;
            r.degraded.to_tensor().write_tnsr(&mut data)?;
        }
        man.flush()?;
        data.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man = BufReader::new(File::open(dir.join(MANIFEST))?);
        let mut data = BufReader::new(File::open(dir.join(DATA))?);
        let mut patch = None;
        let mut records = Vec::new();
        for (n, line) in man.lines().enumerate() {
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(p) = rest
                    .split_whitespace()
                    .find_map(|f| f.strip_prefix("patch="))
                {
                    patch = Some(
                        p.parse::<usize>()
                            .map_err(|e| Error::format("manifest patch", e.to_string()))?,
                    );
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let field = |k: &str| format!("manifest line {} {k}", n + 1);
            if f.len() != 8 {
                return Err(Error::format(
                    field("columns"),
                    format!("expected 8, got {}", f.len()),
                ));
            }
            let num = |i: usize, k: &str| {
                f[i].parse::<u64>()
                    .map_err(|e| Error::format(field(k), e.to_string()))
            };
            let kind: NoiseKind = f[6]
                .parse()
                .map_err(|e: Error| Error::format(field("noise"), e.to_string()))?;
            let mut tensor = |what: &str| -> Result<ImageGray> {
                let t = Tensor::<f32>::read_tnsr(&mut data).map_err(|e| {
                    Error::format(format!("data.bin record {} {what}", n + 1), e.to_string())
                })?;
                ImageGray::from_tensor(&t, 0)
            };
            let clean = tensor("clean")?;
            let degraded = tensor("degraded")?;
            records.push(Record {
                id: num(0, "id")? as usize,
                source: f[1].to_string(),
                region: (
                    num(2, "top")? as usize,
                    num(3, "left")? as usize,
                    num(4, "extent")? as usize,
                ),
                transform: f[5].parse()?,
                spec: StripeSpec::new(kind, num(7, "seed")?),
                clean,
                degraded,
            });
        }
        let patch = patch.ok_or_else(|| Error::format("manifest header", "missing patch="))?;
        if data.fill_buf()?.is_empty() {
            Ok(Self { patch, records })
        } else {
            Err(Error::format(
                "data.bin",
                "trailing bytes after the last manifest record",
            ))
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated random lattice with the given cell size.
fn value_noise(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let (gy, ty) = (y / cell, smoothstep((y % cell) as f64 / cell as f64));
        for x in 0..size {
            let (gx, tx) = (x / cell, smoothstep((x % cell) as f64 / cell as f64));
            let at = |a: usize, b: usize| lattice[a * n + b];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bot = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn smooth_field(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let level = rng.random_range(0.35..=0.65);
    let slope = rng.random_range(-0.25..=0.25);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (cs, sn) = (theta.cos(), theta.sin());
    let mut f: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = (
                (i / size) as f64 / size as f64 - 0.5,
                (i % size) as f64 / size as f64 - 0.5,
            );
            level + slope * (cs * x + sn * y)
        })
        .collect();
    for (cell, amp) in [(32, 0.12), (8, 0.05)] {
        let cell = cell.min(size.max(2) / 2).max(1);
        let a = rng.random_range(0.3..=1.0) * amp;
        for (v, n) in f.iter_mut().zip(value_noise(size, cell, rng)) {
            *v += a * n;
        }
    }
    f
}

/// Gradient plus value noise; no sharp structure.
pub fn smooth_texture(size: usize, seed: u64) -> ImageGray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = smooth_field(size, &mut rng);
    ImageGray::from_fn(size, size, |y, x| f[y * size + x].clamp(0.0, 1.0) as f32)
}

/// Procedural clean images: smooth backgrounds, and on every other image
/// up to three rectangles whose vertical sides are step edges of contrast
/// at least 0.35. Odd images get low-contrast discs instead.
pub fn builtin_textures(n: usize, size: usize, seed: u64) -> Vec<ImageGray> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut f = smooth_field(size, &mut rng);
            if i % 2 == 0 {
                for _ in 0..rng.random_range(1..=3) {
                    let h = rng.random_range(size / 3..=size);
                    let w = rng.random_range((size / 8).max(1)..=size / 2);
                    let top = rng.random_range(0..=size - h);
                    let left = rng.random_range(0..=size - w);
                    let inside = |k: usize| {
                        let (y, x) = (k / size, k % size);
                        (top..top + h).contains(&y) && (left..left + w).contains(&x)
                    };
                    let mean = (0..size * size)
                        .filter(|&k| inside(k))
                        .map(|k| f[k])
                        .sum::<f64>()
                        / (h * w) as f64;
                    let step = rng.random_range(0.35..=0.45) * if mean > 0.5 { -1.0 } else { 1.0 };
                    for (k, v) in f.iter_mut().enumerate() {
                        if inside(k) {
                            *v += step;
                        }
                    }
                }
            } else {
                for _ in 0..rng.random_range(0..=2) {
                    let r = rng.random_range(size as f64 / 12.0..=size as f64 / 4.0);
                    let (cy, cx) = (
                        rng.random_range(0.0..size as f64),
                        rng.random_range(0.0..size as f64),
                    );
                    let step = rng.random_range(-0.2..=0.2);
                    for (k, v) in f.iter_mut().enumerate() {
                        let (y, x) = ((k / size) as f64 - cy, (k % size) as f64 - cx);
                        if y * y + x * x <= r * r {
                            *v += step;
                        }
                    }
                }
            }
            ImageGray::from_fn(size, size, |y, x| f[y * size + x].clamp(0.0, 1.0) as f32)
        })
        .collect()
}
