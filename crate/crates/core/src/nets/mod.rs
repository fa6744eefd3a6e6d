//! Desk-scale segmentation target and perturbation generator.
//!
//! Both networks normalise `[0, 255]` pixels to `[-1, 1]` internally and use
//! three 2x max-pool stages, so spatial sizes must be divisible by 8.
//!
//! Target (FCN with additive skips):
//!
//! ```text
//! enc0 -> pool -> enc1 -> pool -> enc2 -> pool -> enc3
//!   dec2 = up(relu(1x1 enc3)) + enc2
//!   dec1 = up(relu(1x1 dec2)) + enc1
//!   dec0 = up(relu(1x1 dec1)) + enc0
//!   head = 1x1 dec0 -> classes
//! ```
//!
//! Generator (UNet with concatenated skips and two sibling heads):
//!
//! ```text
//! enc0 -> pool -> enc1 -> pool -> enc2 -> pool -> mid
//!   dec2 = relu(1x1 [up(mid), enc2])
//!   dec1 = relu(1x1 [up(dec2), enc1])
//!   dec0 = relu(1x1 [up(dec1), enc0])
//!   pert_head = 1x1 dec0 -> 3,  reg_head = 1x1 dec0 -> classes
//! ```

mod checkpoint;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    TargetFCN,
    GeneratorUNet,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub width_multiplier: f32,
    pub seed: u64,
    /// Generator only: whether the segmentation regularizer head exists.
    #[serde(default = "default_true")]
    pub regularizer_head: bool,
}

impl ModelConfig {
    pub fn target(num_classes: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::TargetFCN,
            in_channels: 3,
            num_classes,
            base_width: 16,
            width_multiplier: 1.0,
            seed,
            regularizer_head: false,
        }
    }

    pub fn generator(num_classes: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::GeneratorUNet,
            regularizer_head: true,
            ..Self::target(num_classes, seed)
        }
    }

    pub fn with_width_multiplier(mut self, m: f32) -> Self {
        self.width_multiplier = m;
        self
    }

    pub fn with_base_width(mut self, w: usize) -> Self {
        self.base_width = w;
        self
    }

    /// Hidden channel count at encoder `level`:
    /// `round(base_width * 2^level * width_multiplier)`, at least 4.
    pub fn channels(&self, level: u32) -> usize {
        let c = (self.base_width as f64 * f64::from(1u32 << level) * self.width_multiplier as f64).round();
        (c as usize).max(4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::config(format!("num_classes must be in 2..=256, got {}", self.num_classes)));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::config("in_channels and base_width must be positive"));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::config(format!("width_multiplier must be positive, got {}", self.width_multiplier)));
        }
        if self.kind == ModelKind::TargetFCN && self.regularizer_head {
            return Err(Error::config("a target model has no regularizer head"));
        }
        Ok(())
    }
}

/// Shape of one convolution layer (weight `c_out x c_in x k x k`, bias `c_out`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvSpec {
    name: &'static str,
    c_in: usize,
    c_out: usize,
    k: usize,
}

fn layer_specs(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let c = |l| cfg.channels(l);
    let conv = |name, c_in, c_out, k| ConvSpec { name, c_in, c_out, k };
    match cfg.kind {
        ModelKind::TargetFCN => vec![
            conv("enc0", cfg.in_channels, c(0), 3),
            conv("enc1", c(0), c(1), 3),
            conv("enc2", c(1), c(2), 3),
            conv("enc3", c(2), c(3), 3),
            conv("dec2", c(3), c(2), 1),
            conv("dec1", c(2), c(1), 1),
            conv("dec0", c(1), c(0), 1),
            conv("head", c(0), cfg.num_classes, 1),
        ],
        ModelKind::GeneratorUNet => {
            let mut specs = vec![
                conv("enc0", cfg.in_channels, c(0), 3),
                conv("enc1", c(0), c(1), 3),
                conv("enc2", c(1), c(2), 3),
                conv("mid", c(2), c(2), 3),
                conv("dec2", 2 * c(2), c(2), 1),
                conv("dec1", c(2) + c(1), c(1), 1),
                conv("dec0", c(1) + c(0), c(0), 1),
                conv("pert_head", c(0), 3, 1),
            ];
            if cfg.regularizer_head {
                specs.push(conv("reg_head", c(0), cfg.num_classes, 1));
            }
            specs
        }
    }
}

/// Expected parameter shapes for a configuration, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layer_specs(cfg)
        .into_iter()
        .flat_map(|s| {
            [
                (format!("{}.weight", s.name), vec![s.c_out, s.c_in, s.k, s.k]),
                (format!("{}.bias", s.name), vec![s.c_out]),
            ]
        })
        .collect()
}

/// A network: configuration plus named parameters in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
    frozen: bool,
}

/// Parameters of a [`Model`] recorded as leaves of one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Raw outputs of the generator's two heads.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    /// `n x 3 x h x w`, before bounding.
    pub raw_perturbation: Var,
    /// `n x num_classes x h x w`; absent when the regularizer head was removed.
    pub regularizer_logits: Option<Var>,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("layer shape")
}

impl Model {
    /// Builds a model with Kaiming-uniform weights (fan-in, ReLU gain) and
    /// zero biases drawn from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = param_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".weight") {
                    kaiming_uniform(&mut rng, &shape)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub(crate) fn from_params(config: ModelConfig, params: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Contract(format!(
                "{:?} expects {} tensors, got {}",
                config.kind,
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "model parameter",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezes the model: its parameters never require gradients again.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for t in self.params.values_mut() {
            t.set_requires_grad(false);
            t.clear_grad();
        }
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Mutable access to the named parameters, for an optimizer step.
    /// Refuses frozen models.
    pub fn trainable_params<'a>(
        &'a mut self,
        filter: impl Fn(&str) -> bool + 'a,
    ) -> Result<impl Iterator<Item = (&'a str, &'a mut Tensor)> + 'a> {
        if self.frozen {
            return Err(Error::Contract("frozen model cannot be updated".into()));
        }
        Ok(self
            .params
            .iter_mut()
            .filter(move |(k, _)| filter(k))
            .map(|(k, v)| (k.as_str(), v)))
    }

    /// Total number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// FNV-1a over parameter names and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in &self.params {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    /// Records every parameter as a graph leaf. Leaves require gradients only
    /// when `trainable` is set and the model is not frozen.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let grad = trainable && !self.frozen;
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let t = t.cast::<T>();
                let v = if grad { g.param(t) } else { g.constant(t) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Like [`Model::bind`] with every parameter constant, except `name`,
    /// which is replaced by the caller's `value`. Used to differentiate the
    /// network with respect to a single tensor.
    pub fn bind_with<T: Real>(&self, g: &mut Graph<T>, name: &str, value: Var) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if n == name { value } else { g.constant(t.cast::<T>()) };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients recorded on `g` into the parameters' gradient
    /// buffers. Parameters the backward pass did not reach are left alone.
    pub fn accumulate_grads(&mut self, g: &Graph<f32>, bound: &Bound) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        for (name, var) in bound.iter() {
            if let Some(grad) = g.grad(var) {
                self.param_mut(name)?.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, image: Var) -> Result<()> {
        let shape = g.shape(image);
        match *shape {
            [_, c, h, w] if c == self.config.in_channels && h % 8 == 0 && w % 8 == 0 => Ok(()),
            _ => Err(Error::InvalidShape {
                op: "model input",
                detail: format!(
                    "expected n x {} x h x w with h, w divisible by 8, got {shape:?}",
                    self.config.in_channels
                ),
            }),
        }
    }

    /// Target forward pass: `n x 3 x h x w` pixels in `[0, 255]` to
    /// `n x num_classes x h x w` logits.
    pub fn forward_target<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        if self.config.kind != ModelKind::TargetFCN {
            return Err(Error::Contract(format!("forward_target on a {:?}", self.config.kind)));
        }
        self.check_input(g, image)?;
        let x = normalize(g, image);
        let e0 = conv_relu(g, p, "enc0", x, 1)?;
        let x = g.maxpool2d(e0, 2)?;
        let e1 = conv_relu(g, p, "enc1", x, 1)?;
        let x = g.maxpool2d(e1, 2)?;
        let e2 = conv_relu(g, p, "enc2", x, 1)?;
        let x = g.maxpool2d(e2, 2)?;
        let e3 = conv_relu(g, p, "enc3", x, 1)?;

        let d = conv_relu(g, p, "dec2", e3, 0)?;
        let d = g.upsample_bilinear(d, 2)?;
        let d2 = g.add(d, e2)?;
        let d = conv_relu(g, p, "dec1", d2, 0)?;
        let d = g.upsample_bilinear(d, 2)?;
        let d1 = g.add(d, e1)?;
        let d = conv_relu(g, p, "dec0", d1, 0)?;
        let d = g.upsample_bilinear(d, 2)?;
        let d0 = g.add(d, e0)?;
        conv(g, p, "head", d0, 0)
    }

    /// Generator forward pass producing both heads from the shared backbone.
    pub fn forward_generator<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<GeneratorOutput> {
        if self.config.kind != ModelKind::GeneratorUNet {
            return Err(Error::Contract(format!("forward_generator on a {:?}", self.config.kind)));
        }
        self.check_input(g, image)?;
        let x = normalize(g, image);
        let e0 = conv_relu(g, p, "enc0", x, 1)?;
        let x = g.maxpool2d(e0, 2)?;
        let e1 = conv_relu(g, p, "enc1", x, 1)?;
        let x = g.maxpool2d(e1, 2)?;
        let e2 = conv_relu(g, p, "enc2", x, 1)?;
        let x = g.maxpool2d(e2, 2)?;
        let mid = conv_relu(g, p, "mid", x, 1)?;

        let u = g.upsample_bilinear(mid, 2)?;
        let u = g.concat_channels(u, e2)?;
        let d2 = conv_relu(g, p, "dec2", u, 0)?;
        let u = g.upsample_bilinear(d2, 2)?;
        let u = g.concat_channels(u, e1)?;
        let d1 = conv_relu(g, p, "dec1", u, 0)?;
        let u = g.upsample_bilinear(d1, 2)?;
        let u = g.concat_channels(u, e0)?;
        let d0 = conv_relu(g, p, "dec0", u, 0)?;

        let raw_perturbation = conv(g, p, "pert_head", d0, 0)?;
        let regularizer_logits = if self.config.regularizer_head {
            Some(conv(g, p, "reg_head", d0, 0)?)
        } else {
            None
        };
        Ok(GeneratorOutput {
            raw_perturbation,
            regularizer_logits,
        })
    }

    /// Gradient-free target logits for a batch of images.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.forward_target(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    /// Copy of a generator with the regularizer head removed.
    pub fn without_regularizer_head(&self) -> Result<Self> {
        if self.config.kind != ModelKind::GeneratorUNet {
            return Err(Error::Contract("only generators carry a regularizer head".into()));
        }
        let mut config = self.config.clone();
        config.regularizer_head = false;
        let params = self
            .params
            .iter()
            .filter(|(k, _)| !k.starts_with("reg_head."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut m = Self::from_params(config, params)?;
        m.frozen = self.frozen;
        Ok(m)
    }
}

fn normalize<T: Real>(g: &mut Graph<T>, image: Var) -> Var {
    let x = g.scale(image, T::from_f64(1.0 / 127.5));
    g.add_scalar(x, -T::one())
}

fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    g.conv2d(x, w, b, 1, pad)
}

fn conv_relu<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, pad: usize) -> Result<Var> {
    let y = conv(g, p, name, x, pad)?;
    Ok(g.relu(y))
}

/// Convenience: build a target model.
pub fn build_target_fcn(config: ModelConfig) -> Result<Model> {
    if config.kind != ModelKind::TargetFCN {
        return Err(Error::config("build_target_fcn needs kind TargetFCN"));
    }
    Model::build(config)
}

/// Convenience: build a generator model.
pub fn build_generator_unet(config: ModelConfig) -> Result<Model> {
    if config.kind != ModelKind::GeneratorUNet {
        return Err(Error::config("build_generator_unet needs kind GeneratorUNet"));
    }
    Model::build(config)
}
