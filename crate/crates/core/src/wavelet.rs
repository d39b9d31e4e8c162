//! Single-level 2D Haar transforms and the wavelet-based samplers.
//!
//! Filters are unnormalized: analysis produces `[LL | LH | HL | HH]`
//! channel blocks, synthesis carries the compensating factor 1/4.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{Conv, LRELU_SLOPE};
use crate::tensor::{kernels, Graph, ParamStore, Scalar, Tensor, Var};

/// The four 2×2 Haar kernels, indexed `[row][col]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarFilters {
    pub ll: [[f64; 2]; 2],
    pub lh: [[f64; 2]; 2],
    pub hl: [[f64; 2]; 2],
    pub hh: [[f64; 2]; 2],
}

impl HaarFilters {
    pub const fn new() -> Self {
        Self {
            ll: [[1.0, 1.0], [1.0, 1.0]],
            lh: [[-1.0, -1.0], [1.0, 1.0]],
            hl: [[-1.0, 1.0], [-1.0, 1.0]],
            hh: [[1.0, -1.0], [-1.0, 1.0]],
        }
    }

    /// Kernels in subband order.
    pub fn bank(&self) -> [[[f64; 2]; 2]; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }
}

impl Default for HaarFilters {
    fn default() -> Self {
        Self::new()
    }
}

/// `(N,C,H,W) -> (N,4C,H/2,W/2)`
pub fn hdwt<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::haar_analysis(x, T::one())
}

/// `(N,4C,H,W) -> (N,C,2H,2W)`, exact inverse of [`hdwt`].
pub fn ihdwt<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::haar_synthesis(x, T::c(0.25))
}

/// Where the data-driven branch joins the wavelet branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RhdwtVariant {
    /// Wavelet branch only.
    V1,
    /// Residual added to the subband stack before the squeeze.
    V2,
    /// Residual added after the squeeze.
    V3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DownKind {
    Hdwt,
    Rhdwt(RhdwtVariant),
    ResidualPool,
    Maxpool,
    StridedConv,
}

impl DownKind {
    pub fn is_haar(self) -> bool {
        matches!(self, DownKind::Hdwt | DownKind::Rhdwt(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpKind {
    TConv,
    Ihdwt,
}

impl fmt::Display for DownKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DownKind::Hdwt => "hdwt",
            DownKind::Rhdwt(RhdwtVariant::V1) => "rhdwt-v1",
            DownKind::Rhdwt(RhdwtVariant::V2) => "rhdwt-v2",
            DownKind::Rhdwt(RhdwtVariant::V3) => "rhdwt-v3",
            DownKind::ResidualPool => "residual-pool",
            DownKind::Maxpool => "maxpool",
            DownKind::StridedConv => "strided-conv",
        })
    }
}

impl FromStr for DownKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "hdwt" => DownKind::Hdwt,
            "rhdwt-v1" => DownKind::Rhdwt(RhdwtVariant::V1),
            "rhdwt-v2" => DownKind::Rhdwt(RhdwtVariant::V2),
            "rhdwt-v3" | "rhdwt" => DownKind::Rhdwt(RhdwtVariant::V3),
            "residual-pool" => DownKind::ResidualPool,
            "maxpool" => DownKind::Maxpool,
            "strided-conv" => DownKind::StridedConv,
            other => return Err(Error::config("down", format!("unknown sampler `{other}`"))),
        })
    }
}

impl fmt::Display for UpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpKind::TConv => "tconv",
            UpKind::Ihdwt => "ihdwt",
        })
    }
}

impl FromStr for UpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tconv" => Ok(UpKind::TConv),
            "ihdwt" => Ok(UpKind::Ihdwt),
            other => Err(Error::config("up", format!("unknown sampler `{other}`"))),
        }
    }
}

/// Downsampler `(N,C,H,W) -> (N,2C,H/2,W/2)`.
#[derive(Clone, Debug)]
pub struct Down {
    kind: DownKind,
    /// 1×1 channel squeeze after the fixed transform (absent for strided conv).
    squeeze: Option<Conv>,
    /// 2×2 stride-2 learned branch.
    residual: Option<Conv>,
}

impl Down {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: DownKind,
        c: usize,
    ) -> Result<Self> {
        let sq = |store: &mut ParamStore<T>, cin| {
            Conv::pointwise(store, &format!("{name}.squeeze"), cin, 2 * c)
        };
        let res = |store: &mut ParamStore<T>, cout| {
            Conv::new(store, &format!("{name}.residual"), c, cout, 2, 2, 0)
        };
        let (squeeze, residual) = match kind {
            DownKind::Hdwt | DownKind::Rhdwt(RhdwtVariant::V1) => (Some(sq(store, 4 * c)?), None),
            DownKind::Rhdwt(RhdwtVariant::V2) => {
                (Some(sq(store, 4 * c)?), Some(res(store, 4 * c)?))
            }
            DownKind::Rhdwt(RhdwtVariant::V3) => {
                (Some(sq(store, 4 * c)?), Some(res(store, 2 * c)?))
            }
            DownKind::ResidualPool => (Some(sq(store, c)?), Some(res(store, 2 * c)?)),
            DownKind::Maxpool => (Some(sq(store, c)?), None),
            DownKind::StridedConv => (None, Some(res(store, 2 * c)?)),
        };
        Ok(Self {
            kind,
            squeeze,
            residual,
        })
    }

    pub fn kind(&self) -> DownKind {
        self.kind
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        match self.kind {
            DownKind::StridedConv => {
                let res = self
                    .residual
                    .as_ref()
                    .expect("strided conv has a residual conv");
                res.forward_lrelu(g, store, x)
            }
            DownKind::Rhdwt(RhdwtVariant::V2) => {
                let bands = g.hdwt(x)?;
                let r = self
                    .residual
                    .as_ref()
                    .expect("v2 has a residual conv")
                    .forward(g, store, x)?;
                let s = g.add(bands, r)?;
                self.squeeze
                    .as_ref()
                    .expect("v2 has a squeeze")
                    .forward_lrelu(g, store, s)
            }
            _ => {
                let model = match self.kind {
                    DownKind::ResidualPool | DownKind::Maxpool => g.maxpool2d(x, 2, 2)?,
                    _ => g.hdwt(x)?,
                };
                let squeeze = self.squeeze.as_ref().expect("model branch has a squeeze");
                let y = squeeze.forward(g, store, model)?;
                let y = g.leaky_relu(y, LRELU_SLOPE);
                match &self.residual {
                    Some(r) => {
                        let d = r.forward(g, store, x)?;
                        g.add(y, d)
                    }
                    None => Ok(y),
                }
            }
        }
    }
}

/// Upsampler `(N,C,H,W) -> (N,C/2,2H,2W)`.
#[derive(Clone, Debug)]
pub struct Up {
    kind: UpKind,
    conv: Conv,
}

impl Up {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: UpKind,
        c: usize,
    ) -> Result<Self> {
        if !c.is_multiple_of(2) {
            return Err(Error::config(
                "base_channels",
                format!("upsampler input width {c} is odd"),
            ));
        }
        let conv = match kind {
            UpKind::TConv => Conv::transposed(store, &format!("{name}.tconv"), c, c / 2, 2, 2)?,
            // expand to 2C so that the inverse transform yields C/2 channels
            UpKind::Ihdwt => Conv::pointwise(store, &format!("{name}.expand"), c, 2 * c)?,
        };
        Ok(Self { kind, conv })
    }

    pub fn kind(&self) -> UpKind {
        self.kind
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        match self.kind {
            UpKind::TConv => Ok(y),
            UpKind::Ihdwt => g.ihdwt(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_are_orthogonal_with_norm_four() {
        let bank = HaarFilters::new().bank();
        for (i, a) in bank.iter().enumerate() {
            for (j, b) in bank.iter().enumerate() {
                let dot: f64 = (0..4).map(|k| a[k / 2][k % 2] * b[k / 2][k % 2]).sum();
                assert_eq!(dot, if i == j { 4.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn sampler_names_round_trip() {
        for k in [
            DownKind::Hdwt,
            DownKind::Rhdwt(RhdwtVariant::V1),
            DownKind::Rhdwt(RhdwtVariant::V2),
            DownKind::Rhdwt(RhdwtVariant::V3),
            DownKind::ResidualPool,
            DownKind::Maxpool,
            DownKind::StridedConv,
        ] {
            assert_eq!(k.to_string().parse::<DownKind>().unwrap(), k);
        }
        assert!("haar".parse::<DownKind>().is_err());
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 4]);
        assert!(hdwt(&x).is_err());
        let y = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
        assert!(ihdwt(&y).is_err());
    }
}
