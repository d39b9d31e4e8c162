//! The U-shaped residual destriping network.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{parse_pairs, ModelConfig, LAYOUTS, PRESETS, RHDWT_VARIANTS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::attention::Cncm;
use crate::error::{Error, Result};
use crate::layers::{Conv, DoubleConv, LRELU_SLOPE};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::wavelet::{Down, Up};

/// Scale applied to the head's Kaiming bound at initialization.
pub const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug)]
struct Net {
    stem: Conv,
    f1: DoubleConv,
    enc_input: Option<Cncm>,
    downs: Vec<Down>,
    enc: Vec<Option<Cncm>>,
    ups: Vec<Up>,
    fuse: Vec<Conv>,
    dec: Vec<Option<Cncm>>,
    tail: DoubleConv,
    head: Conv,
}

/// Network description plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    net: Net,
    store: ParamStore<T>,
}

fn opt_cncm<T: Scalar>(
    store: &mut ParamStore<T>,
    on: bool,
    name: &str,
    c: usize,
    cfg: &ModelConfig,
) -> Result<Option<Cncm>> {
    if on {
        Ok(Some(Cncm::new(
            store,
            name,
            c,
            cfg.num_rcssc,
            &cfg.toggles,
        )?))
    } else {
        Ok(None)
    }
}

impl<T: Scalar> Model<T> {
    /// Allocates every parameter (all zeros) without initializing.
    pub fn empty(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let c = cfg.base_channels;
        let mut s = ParamStore::new();
        let stem = Conv::same3(&mut s, "stem", 1, c)?;
        let f1 = DoubleConv::new(&mut s, "f1", c)?;
        let enc_input = opt_cncm(&mut s, cfg.cncm_input, "enc_in.cncm", c, cfg)?;
        let mut downs = Vec::new();
        let mut enc = Vec::new();
        for i in 0..3 {
            downs.push(Down::new(
                &mut s,
                &format!("enc{i}.down"),
                cfg.downs[i],
                cfg.width(i),
            )?);
            enc.push(opt_cncm(
                &mut s,
                cfg.cncm_encoder[i],
                &format!("enc{i}.cncm"),
                cfg.width(i + 1),
                cfg,
            )?);
        }
        let mut ups = Vec::new();
        let mut fuse = Vec::new();
        let mut dec = Vec::new();
        for j in 0..3 {
            let cin = cfg.width(3 - j);
            let cout = cfg.width(2 - j);
            ups.push(Up::new(&mut s, &format!("dec{j}.up"), cfg.ups[j], cin)?);
            fuse.push(Conv::pointwise(
                &mut s,
                &format!("dec{j}.fuse"),
                2 * cout,
                cout,
            )?);
            dec.push(opt_cncm(
                &mut s,
                cfg.cncm_decoder[j],
                &format!("dec{j}.cncm"),
                cout,
                cfg,
            )?);
        }
        let tail = DoubleConv::new(&mut s, "tail", c)?;
        let head = Conv::same3(&mut s, "head", c, 1)?;
        let net = Net {
            stem,
            f1,
            enc_input,
            downs,
            enc,
            ups,
            fuse,
            dec,
            tail,
            head,
        };
        Ok(Self {
            config: config.clone(),
            net,
            store: s,
        })
    }

    /// Builds and initializes a model deterministically from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::empty(config)?;
        m.init(seed);
        Ok(m)
    }

    /// Kaiming-uniform conv weights (fan-in, LeakyReLU gain), zero biases,
    /// unit/zero batch-norm affine terms and reset running statistics.
    ///
    /// Two exceptions keep the untrained network near the identity map:
    /// the output fusion of every correction module starts at zero, and the
    /// head's bound is scaled by [`HEAD_INIT_SCALE`]. Without them feature
    /// magnitudes grow several-fold per module and the tanh head saturates.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + LRELU_SLOPE * LRELU_SLOPE)).sqrt();
        for p in self.store.params_mut() {
            let shape = p.value.shape().to_vec();
            if p.name.ends_with("cncm.out.weight") {
                p.value = Tensor::zeros(&shape);
            } else if p.name.ends_with(".weight") && shape.len() == 4 {
                let fan_in = shape[1] * shape[2] * shape[3];
                let mut bound = gain * (3.0 / fan_in as f64).sqrt();
                if p.name == "head.weight" {
                    bound *= HEAD_INIT_SCALE;
                }
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                p.value = Tensor::from_fn(&shape, |_| T::c(dist.sample(&mut rng)));
            } else if p.name.ends_with(".gamma") {
                p.value = Tensor::full(&shape, T::one());
            } else {
                p.value = Tensor::zeros(&shape);
            }
            p.grad = Tensor::zeros(&shape);
        }
        let names: Vec<(String, Vec<usize>)> = self
            .store
            .buffers()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let v = if name.ends_with("running_var") {
                T::one()
            } else {
                T::zero()
            };
            self.store
                .assign(&name, Tensor::full(&shape, v))
                .expect("own buffer");
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of learnable scalars.
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Records the network on `g`. Returns `(I_N, I_B)`: the predicted
    /// stripe residual in (-1, 1) and the restored image `I_D - I_N`.
    pub fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<(Var, Var)> {
        self.forward_with(g, &self.store, input)
    }

    /// As [`Model::forward`] but reading parameters from `store`, which must
    /// have this model's layout.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: Var,
    ) -> Result<(Var, Var)> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != 1 {
            return Err(Error::dim(
                "forward",
                "channel",
                format!("expected 1 input channel, got {c}"),
            ));
        }
        let k = self.config.required_multiple();
        if h % k != 0 {
            return Err(Error::dim(
                "forward",
                "height",
                format!("{h} is not a multiple of {k}"),
            ));
        }
        if w % k != 0 {
            return Err(Error::dim(
                "forward",
                "width",
                format!("{w} is not a multiple of {k}"),
            ));
        }
        let (n, s) = (&self.net, store);
        let f0 = n.stem.forward(g, s, input)?;
        let mut x = n.f1.forward(g, s, f0)?;
        if let Some(m) = &n.enc_input {
            x = m.forward(g, s, x)?;
        }
        let mut skips = Vec::with_capacity(3);
        for (down, cncm) in n.downs.iter().zip(&n.enc) {
            skips.push(x);
            x = down.forward(g, s, x)?;
            if let Some(m) = cncm {
                x = m.forward(g, s, x)?;
            }
        }
        for j in 0..3 {
            let u = n.ups[j].forward(g, s, x)?;
            let cat = g.concat(&[u, skips[2 - j]], 1)?;
            x = n.fuse[j].forward(g, s, cat)?;
            if let Some(m) = &n.dec[j] {
                x = m.forward(g, s, x)?;
            }
        }
        let d = n.tail.forward(g, s, x)?;
        let r = n.head.forward(g, s, d)?;
        let noise = g.tanh(r);
        let restored = g.sub(input, noise)?;
        Ok((noise, restored))
    }

    /// Inference-mode restoration of a `(N,1,H,W)` batch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(false);
        let x = g.constant(input.clone());
        let (_, restored) = self.forward(&mut g, x)?;
        Ok(g.value(restored).clone())
    }

    /// Copies all parameters and buffers into a model of another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut m = Model::<U>::empty(&self.config).expect("config already validated");
        for p in self.store.params() {
            m.store
                .assign(&p.name, p.value.cast())
                .expect("identical layout");
        }
        for (name, t) in self.store.buffers() {
            m.store.assign(name, t.cast()).expect("identical layout");
        }
        m
    }
}
