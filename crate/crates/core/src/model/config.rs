use std::fmt::Write as _;

use crate::attention::{BranchToggles, CabVariant};
use crate::error::{Error, Result};
use crate::wavelet::{DownKind, RhdwtVariant, UpKind};

/// Complete description of a network instance. Every ablation variant is a
/// value of this type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Width of the first feature map; levels use C, 2C, 4C, 8C.
    pub base_channels: usize,
    /// Encoder samplers, shallowest first.
    pub downs: [DownKind; 3],
    /// Decoder samplers, deepest first (`ups[j]` mirrors `downs[2 - j]`).
    pub ups: [UpKind; 3],
    pub toggles: BranchToggles,
    /// Attention blocks per correction module.
    pub num_rcssc: usize,
    /// Correction module on the full-resolution features before the first down.
    pub cncm_input: bool,
    /// Correction module after each downsampler.
    pub cncm_encoder: [bool; 3],
    /// Correction module after each decoder fuse, deepest first.
    pub cncm_decoder: [bool; 3],
}

/// Named sampler layouts, symmetric (S) and asymmetric (A).
pub const LAYOUTS: [&str; 7] = ["S0", "S1", "S2", "S3", "A1", "A2", "A3"];

/// Named wavelet-sampler wirings.
pub const RHDWT_VARIANTS: [&str; 3] = ["V1", "V2", "V3"];

/// Named model sizes.
pub const PRESETS: [&str; 4] = ["arcnet", "light", "desk", "toy"];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::arcnet()
    }
}

impl ModelConfig {
    /// Full-size network: two residual wavelet downsamplers, one residual
    /// pooling, transposed-convolution decoder.
    pub fn arcnet() -> Self {
        Self {
            base_channels: 32,
            downs: [
                DownKind::Rhdwt(RhdwtVariant::V3),
                DownKind::Rhdwt(RhdwtVariant::V3),
                DownKind::ResidualPool,
            ],
            ups: [UpKind::TConv; 3],
            toggles: BranchToggles::default(),
            num_rcssc: 2,
            cncm_input: false,
            cncm_encoder: [true; 3],
            cncm_decoder: [true; 3],
        }
    }

    /// Half-width network.
    pub fn light() -> Self {
        Self {
            base_channels: 16,
            ..Self::arcnet()
        }
    }

    /// Small enough to train on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            num_rcssc: 1,
            ..Self::arcnet()
        }
    }

    /// Smallest instance, for tests and gradient checks.
    pub fn toy() -> Self {
        Self {
            base_channels: 4,
            num_rcssc: 1,
            ..Self::arcnet()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "arcnet" | "full" => Ok(Self::arcnet()),
            "light" => Ok(Self::light()),
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }

    /// Replaces the samplers with one of the named plain layouts.
    pub fn with_layout(mut self, name: &str) -> Result<Self> {
        use DownKind::{Hdwt as H, Maxpool as M};
        use UpKind::{Ihdwt as I, TConv as T};
        let (downs, ups) = match name {
            "S0" => ([M, M, M], [T, T, T]),
            "S1" => ([H, M, M], [T, T, I]),
            "S2" => ([H, H, M], [T, I, I]),
            "S3" => ([H, H, H], [I, I, I]),
            "A1" => ([H, M, M], [T, T, T]),
            "A2" => ([H, H, M], [T, T, T]),
            "A3" => ([H, H, H], [T, T, T]),
            other => return Err(Error::config("layout", format!("unknown layout `{other}`"))),
        };
        self.downs = downs;
        self.ups = ups;
        Ok(self)
    }

    /// Uses the given wiring for both wavelet downsamplers.
    pub fn with_rhdwt(mut self, name: &str) -> Result<Self> {
        let v = match name {
            "V1" => RhdwtVariant::V1,
            "V2" => RhdwtVariant::V2,
            "V3" => RhdwtVariant::V3,
            other => return Err(Error::config("rhdwt", format!("unknown variant `{other}`"))),
        };
        self.downs[0] = DownKind::Rhdwt(v);
        self.downs[1] = DownKind::Rhdwt(v);
        Ok(self)
    }

    pub fn with_branches(mut self, name: &str) -> Result<Self> {
        self.toggles = BranchToggles::combination(name)?;
        Ok(self)
    }

    /// Channel width entering down level `i` (also the width leaving up `2 - i`).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input extents must be multiples of this: 8 for the three 2× samplers,
    /// 16 when a self-calibration gate (which pools 2×2) runs at the
    /// bottleneck.
    pub fn required_multiple(&self) -> usize {
        if self.toggles.use_scb && self.cncm_encoder[2] {
            16
        } else {
            8
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("base_channels", "must be at least 1"));
        }
        if self.num_rcssc == 0 {
            return Err(Error::config("num_rcssc", "must be at least 1"));
        }
        for (j, up) in self.ups.iter().enumerate() {
            if *up == UpKind::Ihdwt && !self.downs[2 - j].is_haar() {
                return Err(Error::config(
                    "up",
                    format!(
                        "inverse wavelet upsampler {j} mirrors non-wavelet downsampler `{}`",
                        self.downs[2 - j]
                    ),
                ));
            }
        }
        let mut widths = Vec::new();
        if self.cncm_input {
            widths.push(self.width(0));
        }
        for i in 0..3 {
            if self.cncm_encoder[i] {
                widths.push(self.width(i + 1));
            }
            if self.cncm_decoder[i] {
                widths.push(self.width(2 - i));
            }
        }
        for c in widths {
            self.toggles.validate(c)?;
        }
        Ok(())
    }

    /// `key=value` lines; the inverse of [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let t = &self.toggles;
        let mut s = String::new();
        let _ = writeln!(s, "base_channels={}", self.base_channels);
        let _ = writeln!(s, "down={}", join(&self.downs.map(|d| d.to_string())));
        let _ = writeln!(s, "up={}", join(&self.ups.map(|u| u.to_string())));
        let _ = writeln!(s, "sab={}", t.use_sab);
        let _ = writeln!(s, "scb={}", t.use_scb);
        let _ = writeln!(
            s,
            "cab={}",
            t.cab.map_or("none".to_string(), |c| c.to_string())
        );
        let _ = writeln!(s, "reduction={}", t.reduction);
        let _ = writeln!(s, "num_rcssc={}", self.num_rcssc);
        let _ = writeln!(s, "cncm_input={}", self.cncm_input);
        let _ = writeln!(
            s,
            "cncm_encoder={}",
            join(&self.cncm_encoder.map(|b| b.to_string()))
        );
        let _ = writeln!(
            s,
            "cncm_decoder={}",
            join(&self.cncm_decoder.map(|b| b.to_string()))
        );
        s
    }

    /// Parses `key=value` lines. A `preset`, `layout`, `rhdwt` or
    /// `branches` key is applied before the explicit fields regardless of
    /// its position. Blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let get = |k: &str| {
            pairs
                .iter()
                .rev()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
        };
        let mut cfg = match get("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::arcnet(),
        };
        if let Some(l) = get("layout") {
            cfg = cfg.with_layout(l)?;
        }
        if let Some(v) = get("rhdwt") {
            cfg = cfg.with_rhdwt(v)?;
        }
        if let Some(b) = get("branches") {
            cfg = cfg.with_branches(b)?;
        }
        for (key, value) in &pairs {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |detail: String| Error::config(key, detail);
        match key {
            "preset" | "layout" | "rhdwt" | "branches" => {}
            "base_channels" => self.base_channels = parse_usize(key, value)?,
            "reduction" => self.toggles.reduction = parse_usize(key, value)?,
            "num_rcssc" => self.num_rcssc = parse_usize(key, value)?,
            "sab" => self.toggles.use_sab = parse_bool(key, value)?,
            "scb" => self.toggles.use_scb = parse_bool(key, value)?,
            "cncm_input" => self.cncm_input = parse_bool(key, value)?,
            "cab" => {
                self.toggles.cab = match value {
                    "none" => None,
                    v => Some(
                        v.parse::<CabVariant>()
                            .map_err(|_| bad(format!("unknown column branch `{v}`")))?,
                    ),
                }
            }
            "down" => {
                let v = triple(key, value)?;
                for (slot, s) in self.downs.iter_mut().zip(v) {
                    *slot = s
                        .parse()
                        .map_err(|_| bad(format!("unknown sampler `{s}`")))?;
                }
            }
            "up" => {
                let v = triple(key, value)?;
                for (slot, s) in self.ups.iter_mut().zip(v) {
                    *slot = s
                        .parse()
                        .map_err(|_| bad(format!("unknown sampler `{s}`")))?;
                }
            }
            "cncm_encoder" | "cncm_decoder" => {
                let v = triple(key, value)?;
                let mut flags = [false; 3];
                for (slot, s) in flags.iter_mut().zip(v) {
                    *slot = parse_bool(key, s)?;
                }
                if key == "cncm_encoder" {
                    self.cncm_encoder = flags;
                } else {
                    self.cncm_decoder = flags;
                }
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", n + 1),
                format!("expected key=value, got `{line}`"),
            )
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| {
        Error::config(
            key,
            format!("expected a non-negative integer, got `{value}`"),
        )
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(Error::config(
            key,
            format!("expected true/false, got `{other}`"),
        )),
    }
}

fn triple<'a>(key: &str, value: &'a str) -> Result<Vec<&'a str>> {
    let v: Vec<&str> = value.split(',').map(str::trim).collect();
    if v.len() != 3 {
        return Err(Error::config(
            key,
            format!("expected 3 comma-separated entries, got {}", v.len()),
        ));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_for_every_variant() {
        let mut all = vec![ModelConfig::arcnet(), ModelConfig::toy()];
        for l in LAYOUTS {
            all.push(ModelConfig::desk().with_layout(l).unwrap());
        }
        for v in RHDWT_VARIANTS {
            all.push(ModelConfig::desk().with_rhdwt(v).unwrap());
        }
        for cfg in all {
            assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cfg = ModelConfig::from_text("base_channels=12\npreset=toy\nlayout=A2\n").unwrap();
        assert_eq!(cfg.base_channels, 12);
        assert_eq!(cfg.num_rcssc, 1);
        assert_eq!(cfg.downs[2], DownKind::Maxpool);
    }

    #[test]
    fn bad_field_is_named() {
        for (text, field) in [
            ("base_channels=abc", "base_channels"),
            ("down=hdwt,hdwt", "down"),
            ("colour=blue", "colour"),
            ("sab=maybe", "sab"),
            ("base_channels=6", "reduction"),
            ("up=ihdwt,tconv,tconv\ndown=hdwt,hdwt,maxpool", "up"),
        ] {
            match ModelConfig::from_text(text) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
