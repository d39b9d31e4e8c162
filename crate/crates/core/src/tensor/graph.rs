use super::kernels::{self as k, BatchNormCache};
use super::param::{BufferId, ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    ChannelPool {
        x: Var,
        arg: Vec<usize>,
    },
    ColumnAvg {
        x: Var,
    },
    ColumnMax {
        x: Var,
        arg: Vec<usize>,
    },
    Upsample2x {
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastTo(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid(Var),
    Tanh(Var),
    Scale {
        x: Var,
        s: f64,
    },
    AddScalar(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Hdwt(Var),
    Ihdwt(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of forward computations (the tape). Backward replays the
/// recorded operations in reverse order exactly once each.
///
/// `training` selects batch statistics for batch norm; running-statistic
/// updates are queued and applied by [`Graph::commit_buffers`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    training: bool,
    pending: Vec<(BufferId, Tensor<T>)>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new(false)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            pending: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient flows to it).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A free variable whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.param(id).value.clone(), Op::Param(id), &[])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = k::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &ins,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = k::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(
            out,
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &ins,
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, arg) = k::maxpool2d(self.value(x), kernel, stride)?;
        Ok(self.push(out, Op::MaxPool { x, arg }, &[x]))
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let out = k::avgpool2d(self.value(x), kernel, stride)?;
        Ok(self.push(
            out,
            Op::AvgPool {
                x,
                k: kernel,
                stride,
            },
            &[x],
        ))
    }

    /// Channel-wise mean and max, concatenated: (N, 2, H, W).
    pub fn channel_pool(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = k::channel_pool(self.value(x))?;
        Ok(self.push(out, Op::ChannelPool { x, arg }, &[x]))
    }

    pub fn column_avg(&mut self, x: Var) -> Result<Var> {
        let out = k::column_avg(self.value(x))?;
        Ok(self.push(out, Op::ColumnAvg { x }, &[x]))
    }

    pub fn column_max(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = k::column_max(self.value(x))?;
        Ok(self.push(out, Op::ColumnMax { x, arg }, &[x]))
    }

    /// Column average and column max pools, each (N, C, 1, W).
    pub fn column_pool(&mut self, x: Var) -> Result<(Var, Var)> {
        Ok((self.column_avg(x)?, self.column_max(x)?))
    }

    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let out = k::upsample_bilinear2x(self.value(x))?;
        Ok(self.push(out, Op::Upsample2x { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Broadcasting Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Expands singleton axes of `x` to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = k::broadcast_to(self.value(x), shape)?;
        Ok(self.push(out, Op::BroadcastTo(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = k::concat(&vals, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = k::slice(self.value(x), axis, start, len)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self.value(x).shape().get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::dim(
                "split",
                "axis",
                format!("sizes {sizes:?} do not sum to extent {extent}"),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.slice(x, axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::c(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let f = T::c(s);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let f = T::c(s);
        let out = self.value(x).map(|v| v + f);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// Batch norm over (N, H, W) per channel. In training mode batch
    /// statistics are used and the running buffers receive a queued
    /// exponential update with the given momentum.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (BufferId, BufferId),
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let stats = (!self.training).then(|| {
            (
                store.buffer(running.0).data(),
                store.buffer(running.1).data(),
            )
        });
        let (out, cache, batch) = k::batchnorm2d(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            stats,
            eps,
        )?;
        if let Some((mean, var)) = batch {
            let m = T::c(momentum);
            let blend = |old: &Tensor<T>, new: Vec<T>| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(&o, n)| (T::one() - m) * o + m * n)
                    .collect();
                Tensor::from_parts(old.shape().to_vec(), data)
            };
            let rm = blend(store.buffer(running.0), mean);
            let rv = blend(store.buffer(running.1), var);
            self.pending.push((running.0, rm));
            self.pending.push((running.1, rv));
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    /// Applies queued running-statistic updates to `store`.
    pub fn commit_buffers(&mut self, store: &mut ParamStore<T>) {
        for (id, t) in self.pending.drain(..) {
            *store.buffer_mut(id) = t;
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::c(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "mse",
                "shape",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y).as_f64().powi(2))
            .sum();
        let v = T::c(s / ta.len() as f64);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), &[a, b]))
    }

    /// Haar analysis with the unnormalized filters.
    pub fn hdwt(&mut self, x: Var) -> Result<Var> {
        let out = k::haar_analysis(self.value(x), T::one())?;
        Ok(self.push(out, Op::Hdwt(x), &[x]))
    }

    /// Exact inverse of [`Graph::hdwt`].
    pub fn ihdwt(&mut self, x: Var) -> Result<Var> {
        let out = k::haar_synthesis(self.value(x), T::c(0.25))?;
        Ok(self.push(out, Op::Ihdwt(x), &[x]))
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every
    /// recorded value that depends on a parameter or variable.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_op(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.param_mut(*id).grad.add_assign(g);
            }
        }
        Ok(grads)
    }

    fn backward_op(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (gx, gw, gb) = k::conv2d_backward(val(x), val(w), b.is_some(), stride, pad, g)?;
                send(x, gx);
                send(w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    send(b, gb);
                }
            }
            &Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (gx, gw, gb) =
                    k::conv_transpose2d_backward(val(x), val(w), b.is_some(), stride, pad, g)?;
                send(x, gx);
                send(w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    send(b, gb);
                }
            }
            Op::MaxPool { x, arg } | Op::ColumnMax { x, arg } => {
                send(*x, k::scatter_argmax(val(*x).shape(), arg, g));
            }
            &Op::AvgPool {
                x,
                k: kernel,
                stride,
            } => {
                send(x, k::avgpool2d_backward(val(x).shape(), kernel, stride, g)?);
            }
            Op::ChannelPool { x, arg } => {
                send(*x, k::channel_pool_backward(val(*x).shape(), arg, g));
            }
            &Op::ColumnAvg { x } => send(x, k::column_avg_backward(val(x).shape(), g)),
            &Op::Upsample2x { x } => send(x, k::upsample_bilinear2x_backward(val(x).shape(), g)),
            &Op::Add(a, b) => {
                send(a, k::reduce_to(g, val(a).shape()));
                send(b, k::reduce_to(g, val(b).shape()));
            }
            &Op::Sub(a, b) => {
                send(a, k::reduce_to(g, val(a).shape()));
                send(b, k::reduce_to(&g.map(|v| -v), val(b).shape()));
            }
            &Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    send(a, k::mul_backward(g, val(b), val(a).shape()));
                }
                if self.nodes[b.0].needs_grad {
                    send(b, k::mul_backward(g, val(a), val(b).shape()));
                }
            }
            &Op::BroadcastTo(x) => send(x, k::reduce_to(g, val(x).shape())),
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    send(x, k::slice(g, *axis, start, len)?);
                    start += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                send(x, k::slice_backward(val(x).shape(), axis, start, g));
            }
            &Op::LeakyRelu { x, slope } => {
                let s = T::c(slope);
                let data = val(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * s })
                    .collect();
                send(x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            &Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                send(x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            &Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * (T::one() - y * y))
                    .collect();
                send(x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            &Op::Scale { x, s } => {
                let f = T::c(s);
                send(x, g.map(|v| v * f));
            }
            &Op::AddScalar(x) => send(x, g.clone()),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = k::batchnorm2d_backward(cache, val(*gamma), g);
                send(*x, dx);
                send(*gamma, dg);
                send(*beta, db);
            }
            &Op::Sum(x) => send(x, Tensor::full(val(x).shape(), g.data()[0])),
            &Op::Mean(x) => {
                let n = T::c(val(x).len() as f64);
                send(x, Tensor::full(val(x).shape(), g.data()[0] / n));
            }
            &Op::Mse(a, b) => {
                let scale = T::c(2.0) * g.data()[0] / T::c(val(a).len() as f64);
                let diff = k::broadcast_binary("mse", val(a), val(b), |x, y| (x - y) * scale)?;
                send(b, diff.map(|v| -v));
                send(a, diff);
            }
            &Op::Hdwt(x) => send(x, k::haar_synthesis(g, T::one())?),
            &Op::Ihdwt(x) => send(x, k::haar_analysis(g, T::c(0.25))?),
        }
        Ok(())
    }
}
