//! Parameterized building blocks shared by the samplers, attention blocks
//! and the full network. Layers only hold ids into a [`ParamStore`]; the
//! same layer description drives stores of any scalar type.

use crate::error::Result;
use crate::tensor::{BufferId, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const LRELU_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Convolution (or transposed convolution) with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    transposed: bool,
}

impl Conv {
    /// Square-kernel convolution `cin -> cout`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight =
            store.add_param(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]))?;
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
            transposed: false,
        })
    }

    /// 3×3, stride 1, same padding.
    pub fn same3<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Self::new(store, name, cin, cout, 3, 1, 1)
    }

    pub fn pointwise<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Self::new(store, name, cin, cout, 1, 1, 0)
    }

    /// Transposed convolution; weights are laid out `(cin, cout, k, k)`.
    pub fn transposed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight =
            store.add_param(format!("{name}.weight"), Tensor::zeros(&[cin, cout, k, k]))?;
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: 0,
            transposed: true,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        if self.transposed {
            g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
        } else {
            g.conv2d(x, w, Some(b), self.stride, self.pad)
        }
    }

    /// `leaky_relu(conv(x))`
    pub fn forward_lrelu<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.leaky_relu(y, LRELU_SLOPE))
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(&[c], T::one()))?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[c]))?,
            mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], T::one()))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(
            store,
            x,
            gamma,
            beta,
            (self.mean, self.var),
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

/// Two `conv3×3 + LeakyReLU` stages at constant width.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    a: Conv,
    b: Conv,
}

impl DoubleConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            a: Conv::same3(store, &format!("{name}.0"), c, c)?,
            b: Conv::same3(store, &format!("{name}.1"), c, c)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.a.forward_lrelu(g, store, x)?;
        self.b.forward_lrelu(g, store, y)
    }
}
