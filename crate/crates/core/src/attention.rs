//! Spatial, column and self-calibrated attention branches, their fused
//! block, its residual wrapper and the densely connected container.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, LRELU_SLOPE};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

/// Structure of the column attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CabVariant {
    /// Average column pooling, expanded to full size, then excitation.
    Ccm,
    /// Average and max column pooling, expanded, then one excitation.
    V1,
    /// Dual pooling and shared interaction at column resolution, one excitation.
    V2,
    /// Dual pooling, shared interaction, split into two excitations.
    Cab,
}

impl fmt::Display for CabVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CabVariant::Ccm => "ccm",
            CabVariant::V1 => "v1",
            CabVariant::V2 => "v2",
            CabVariant::Cab => "cab",
        })
    }
}

impl FromStr for CabVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ccm" => Ok(CabVariant::Ccm),
            "v1" => Ok(CabVariant::V1),
            "v2" => Ok(CabVariant::V2),
            "cab" => Ok(CabVariant::Cab),
            other => Err(Error::config(
                "cab",
                format!("unknown column branch `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BranchToggles {
    pub use_sab: bool,
    pub use_scb: bool,
    /// `None` disables the column branch.
    pub cab: Option<CabVariant>,
    /// Excitation bottleneck ratio.
    pub reduction: usize,
}

impl Default for BranchToggles {
    fn default() -> Self {
        Self::combination("K6").expect("K6 is a known combination")
    }
}

/// Names of the branch combinations, in order.
pub const COMBINATIONS: [&str; 6] = ["K1", "K2", "K3", "K4", "K5", "K6"];

impl BranchToggles {
    pub fn combination(name: &str) -> Result<Self> {
        let (cab, use_scb, use_sab) = match name {
            "K1" => (CabVariant::Cab, true, false),
            "K2" => (CabVariant::Cab, false, true),
            "K3" => (CabVariant::Ccm, true, true),
            "K4" => (CabVariant::V1, true, true),
            "K5" => (CabVariant::V2, true, true),
            "K6" => (CabVariant::Cab, true, true),
            other => {
                return Err(Error::config(
                    "branches",
                    format!("unknown combination `{other}`"),
                ))
            }
        };
        Ok(Self {
            use_sab,
            use_scb,
            cab: Some(cab),
            reduction: 4,
        })
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !self.use_sab && self.cab.is_none() {
            return Err(Error::config(
                "sab",
                "at least one of the spatial or column branches must be enabled",
            ));
        }
        if self.reduction == 0 || !channels.is_multiple_of(self.reduction) {
            return Err(Error::config(
                "reduction",
                format!(
                    "{} does not divide channel count {channels}",
                    self.reduction
                ),
            ));
        }
        Ok(())
    }
}

/// `sigmoid(conv3×3(channel_pool(x))) ⊙ x`
#[derive(Clone, Debug)]
pub struct Sab {
    conv: Conv,
}

impl Sab {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            conv: Conv::same3(store, &format!("{name}.conv"), 2, 1)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let p = g.channel_pool(x)?;
        let a = self.conv.forward(g, store, p)?;
        let a = g.sigmoid(a);
        g.mul(x, a)
    }
}

/// `sigmoid(conv1×1(lrelu(conv1×1(x))))`, a pointwise bottleneck gate.
#[derive(Clone, Debug)]
pub struct Excitation {
    reduce: Conv,
    expand: Conv,
}

impl Excitation {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
    ) -> Result<Self> {
        Ok(Self {
            reduce: Conv::pointwise(store, &format!("{name}.reduce"), cin, hidden)?,
            expand: Conv::pointwise(store, &format!("{name}.expand"), hidden, cout)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.reduce.forward_lrelu(g, store, x)?;
        let y = self.expand.forward(g, store, h)?;
        Ok(g.sigmoid(y))
    }
}

/// conv1×1 + batch norm + LeakyReLU.
#[derive(Clone, Debug)]
struct Cbl {
    conv: Conv,
    bn: BatchNorm,
}

impl Cbl {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::pointwise(store, &format!("{name}.conv"), c, c)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.leaky_relu(y, LRELU_SLOPE))
    }
}

/// Column attention branch; all variants map `(N,C,H,W) -> (N,C,H,W)`.
#[derive(Clone, Debug)]
pub struct Cab {
    variant: CabVariant,
    channels: usize,
    cbl: Option<Cbl>,
    exc: Excitation,
    exc_max: Option<Excitation>,
}

impl Cab {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        variant: CabVariant,
        c: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || !c.is_multiple_of(reduction) {
            return Err(Error::config(
                "reduction",
                format!("{reduction} does not divide channel count {c}"),
            ));
        }
        let r = c / reduction;
        let (cbl, exc, exc_max) = match variant {
            CabVariant::Ccm => (
                None,
                Excitation::new(store, &format!("{name}.exc"), c, r, c)?,
                None,
            ),
            CabVariant::V1 => (
                None,
                Excitation::new(store, &format!("{name}.exc"), 2 * c, 2 * r, c)?,
                None,
            ),
            CabVariant::V2 => (
                Some(Cbl::new(store, &format!("{name}.cbl"), 2 * c)?),
                Excitation::new(store, &format!("{name}.exc"), 2 * c, 2 * r, c)?,
                None,
            ),
            CabVariant::Cab => (
                Some(Cbl::new(store, &format!("{name}.cbl"), 2 * c)?),
                Excitation::new(store, &format!("{name}.exc_avg"), c, r, c)?,
                Some(Excitation::new(store, &format!("{name}.exc_max"), c, r, c)?),
            ),
        };
        Ok(Self {
            variant,
            channels: c,
            cbl,
            exc,
            exc_max,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let full = g.value(x).shape().to_vec();
        match self.variant {
            CabVariant::Ccm => {
                let a = g.column_avg(x)?;
                let a = g.broadcast_to(a, &full)?;
                let w = self.exc.forward(g, store, a)?;
                g.mul(x, w)
            }
            CabVariant::V1 => {
                let (a, m) = g.column_pool(x)?;
                let mc = g.concat(&[a, m], 1)?;
                let mut wide = full.clone();
                wide[1] = 2 * self.channels;
                let mc = g.broadcast_to(mc, &wide)?;
                let w = self.exc.forward(g, store, mc)?;
                g.mul(x, w)
            }
            CabVariant::V2 => {
                let (a, m) = g.column_pool(x)?;
                let mc = g.concat(&[a, m], 1)?;
                let f = self
                    .cbl
                    .as_ref()
                    .expect("v2 has a cbl")
                    .forward(g, store, mc)?;
                let w = self.exc.forward(g, store, f)?;
                g.mul(x, w)
            }
            CabVariant::Cab => {
                let (a, m) = g.column_pool(x)?;
                let mc = g.concat(&[a, m], 1)?;
                let f = self
                    .cbl
                    .as_ref()
                    .expect("cab has a cbl")
                    .forward(g, store, mc)?;
                let parts = g.split(f, 1, &[self.channels, self.channels])?;
                let wa = self.exc.forward(g, store, parts[0])?;
                let wm = self
                    .exc_max
                    .as_ref()
                    .expect("cab has two excitations")
                    .forward(g, store, parts[1])?;
                let y = g.mul(x, wa)?;
                g.mul(y, wm)
            }
        }
    }
}

/// `sigmoid(x + upsample(conv3×3(avgpool(x))))`, a gate map in (0, 1).
#[derive(Clone, Debug)]
pub struct Scb {
    conv: Conv,
}

impl Scb {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::same3(store, &format!("{name}.conv"), c, c)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let p = g.avgpool2d(x, 2, 2)?;
        let c = self.conv.forward(g, store, p)?;
        let u = g.upsample_bilinear2x(c)?;
        let s = g.add(x, u)?;
        Ok(g.sigmoid(s))
    }
}

/// `conv1×1([SAB(x); CAB(x)]) ⊙ SCB(x) + x`
#[derive(Clone, Debug)]
pub struct Cssc {
    sab: Option<Sab>,
    cab: Option<Cab>,
    scb: Option<Scb>,
    fuse: Conv,
}

impl Cssc {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        t: &BranchToggles,
    ) -> Result<Self> {
        t.validate(c)?;
        let sab = if t.use_sab {
            Some(Sab::new(store, &format!("{name}.sab"))?)
        } else {
            None
        };
        let cab = match t.cab {
            Some(v) => Some(Cab::new(store, &format!("{name}.cab"), v, c, t.reduction)?),
            None => None,
        };
        let scb = if t.use_scb {
            Some(Scb::new(store, &format!("{name}.scb"), c)?)
        } else {
            None
        };
        let branches = usize::from(sab.is_some()) + usize::from(cab.is_some());
        let fuse = Conv::pointwise(store, &format!("{name}.fuse"), branches * c, c)?;
        Ok(Self {
            sab,
            cab,
            scb,
            fuse,
        })
    }

    pub fn fuse(&self) -> &Conv {
        &self.fuse
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        if let Some(s) = &self.sab {
            parts.push(s.forward(g, store, x)?);
        }
        if let Some(c) = &self.cab {
            parts.push(c.forward(g, store, x)?);
        }
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        let mut y = self.fuse.forward(g, store, cat)?;
        if let Some(s) = &self.scb {
            let gate = s.forward(g, store, x)?;
            y = g.mul(y, gate)?;
        }
        g.add(y, x)
    }
}

/// `x + lrelu(conv3×3(cssc(x)))`
#[derive(Clone, Debug)]
pub struct Rcssc {
    cssc: Cssc,
    conv: Conv,
}

impl Rcssc {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        t: &BranchToggles,
    ) -> Result<Self> {
        Ok(Self {
            cssc: Cssc::new(store, &format!("{name}.cssc"), c, t)?,
            conv: Conv::same3(store, &format!("{name}.conv"), c, c)?,
        })
    }

    pub fn cssc(&self) -> &Cssc {
        &self.cssc
    }

    pub fn conv(&self) -> &Conv {
        &self.conv
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.cssc.forward(g, store, x)?;
        let y = self.conv.forward_lrelu(g, store, y)?;
        g.add(x, y)
    }
}

/// Densely connected stack of [`Rcssc`] blocks with a module residual.
///
/// Block `k` sees `conv1×1(concat(x, y_1..y_{k-1}))`; the first block sees
/// `x` directly. The output is `x + conv1×1(concat(x, y_1..y_K))`.
#[derive(Clone, Debug)]
pub struct Cncm {
    blocks: Vec<Rcssc>,
    /// Entry fusions for blocks 2..K.
    entry: Vec<Conv>,
    out: Conv,
}

impl Cncm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        num_rcssc: usize,
        t: &BranchToggles,
    ) -> Result<Self> {
        if num_rcssc == 0 {
            return Err(Error::config("num_rcssc", "must be at least 1"));
        }
        let mut blocks = Vec::with_capacity(num_rcssc);
        let mut entry = Vec::new();
        for k in 0..num_rcssc {
            if k > 0 {
                entry.push(Conv::pointwise(
                    store,
                    &format!("{name}.entry{k}"),
                    (k + 1) * c,
                    c,
                )?);
            }
            blocks.push(Rcssc::new(store, &format!("{name}.block{k}"), c, t)?);
        }
        let out = Conv::pointwise(store, &format!("{name}.out"), (num_rcssc + 1) * c, c)?;
        Ok(Self { blocks, entry, out })
    }

    pub fn out(&self) -> &Conv {
        &self.out
    }

    pub fn blocks(&self) -> &[Rcssc] {
        &self.blocks
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut feats = vec![x];
        for (k, block) in self.blocks.iter().enumerate() {
            let input = if k == 0 {
                x
            } else {
                let cat = g.concat(&feats, 1)?;
                self.entry[k - 1].forward(g, store, cat)?
            };
            feats.push(block.forward(g, store, input)?);
        }
        let cat = g.concat(&feats, 1)?;
        let y = self.out.forward(g, store, cat)?;
        g.add(x, y)
    }
}
