use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, ConvGeom};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::quant::{binarize_forward, binarize_levels, uniform_quantize, ActQuantState, BinaryLevels, SteParams};
use crate::tensor::Tensor;

use super::arch::{Architecture, Block, LayerSpec};

/// Which parts of the network are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Activation bitwidth; `None` leaves activations in full precision.
    pub act_bits: Option<u32>,
    pub binarize_weights: bool,
    /// Also binarize the first and last weight layers.
    pub binarize_first_last: bool,
    pub ema_momentum: f64,
}

impl QuantConfig {
    /// Bitwidth value that disables quantization altogether.
    pub const FLOAT_SENTINEL: u32 = 32;

    /// Binary weights with `act_bits`-bit activations, or a float baseline
    /// when `act_bits` is [`Self::FLOAT_SENTINEL`].
    pub fn bwma(act_bits: u32) -> Self {
        if act_bits == Self::FLOAT_SENTINEL {
            Self::float()
        } else {
            Self {
                act_bits: Some(act_bits),
                binarize_weights: true,
                binarize_first_last: false,
                ema_momentum: 0.9,
            }
        }
    }

    pub fn float() -> Self {
        Self {
            act_bits: None,
            binarize_weights: false,
            binarize_first_last: false,
            ema_momentum: 0.9,
        }
    }
}

/// Running state of one activation quantization site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActSite {
    pub name: String,
    pub state: ActQuantState,
    /// The first training batch sets the range directly; later ones use the EMA.
    pub initialized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Range tracking active.
    Train,
    /// Ranges frozen.
    Eval,
}

/// A weight as seen by the inference path.
#[derive(Debug, Clone)]
pub struct EffectiveWeight<'a> {
    pub name: &'a str,
    /// Full-precision shadow weight.
    pub shadow: &'a Tensor,
    /// Binarized weight, or the shadow itself for full-precision layers.
    pub value: Tensor,
    pub levels: Option<BinaryLevels>,
}

/// Executes the weight layers of an inference pass.
///
/// `input_quant` is the quantizer whose grid the layer input lies on, if any.
pub trait MvmBackend {
    fn conv2d(
        &mut self,
        weight: &EffectiveWeight<'_>,
        input: &Tensor,
        input_quant: Option<&ActQuantState>,
        geom: &ConvGeom,
    ) -> Result<Tensor>;

    fn linear(
        &mut self,
        weight: &EffectiveWeight<'_>,
        input: &Tensor,
        input_quant: Option<&ActQuantState>,
    ) -> Result<Tensor>;
}

/// Exact floating-point matrix products.
#[derive(Debug, Default, Clone, Copy)]
pub struct DigitalBackend;

impl MvmBackend for DigitalBackend {
    fn conv2d(
        &mut self,
        weight: &EffectiveWeight<'_>,
        input: &Tensor,
        _input_quant: Option<&ActQuantState>,
        geom: &ConvGeom,
    ) -> Result<Tensor> {
        Ok(kernels::conv2d_forward(input, &weight.value, geom).0)
    }

    fn linear(
        &mut self,
        weight: &EffectiveWeight<'_>,
        input: &Tensor,
        _input_quant: Option<&ActQuantState>,
    ) -> Result<Tensor> {
        kernels::linear_forward(input, &weight.value, None)
    }
}

/// Graph handles of one training forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
}

/// Network parameters plus quantizer state.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub quant: QuantConfig,
    params: Vec<(String, Tensor)>,
    pub sites: Vec<ActSite>,
}

impl Model {
    /// Fresh model with Kaiming-uniform weights, unit scales and zero shifts.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, quant: QuantConfig, rng: &mut R) -> Result<Self> {
        arch.weight_layers()?;
        let mut params = Vec::new();
        for layer in arch.layers() {
            match layer {
                LayerSpec::Conv {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let fan_in = in_ch * kernel * kernel;
                    params.push((
                        format!("{name}.weight"),
                        Tensor::kaiming_uniform(&[*out_ch, *in_ch, *kernel, *kernel], fan_in, rng),
                    ));
                }
                LayerSpec::Linear {
                    name,
                    in_features,
                    out_features,
                } => {
                    params.push((
                        format!("{name}.weight"),
                        Tensor::kaiming_uniform(&[*in_features, *out_features], *in_features, rng),
                    ));
                    params.push((format!("{name}.bias"), Tensor::zeros(&[*out_features])));
                }
                LayerSpec::ScaleShift { name, channels } => {
                    params.push((format!("{name}.scale"), Tensor::ones(&[*channels])));
                    params.push((format!("{name}.shift"), Tensor::zeros(&[*channels])));
                }
                _ => {}
            }
        }
        let bits = quant.act_bits.unwrap_or(8);
        let sites = arch
            .act_sites()
            .into_iter()
            .map(|name| {
                Ok(ActSite {
                    name,
                    state: ActQuantState::new(0.0, 1.0, bits, quant.ema_momentum)?,
                    initialized: false,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            arch,
            quant,
            params,
            sites,
        })
    }

    /// Rebuild from stored tensors; every expected parameter must be present with the right shape.
    pub fn from_parts(
        arch: Architecture,
        quant: QuantConfig,
        params: Vec<(String, Tensor)>,
        sites: Vec<ActSite>,
    ) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::new(arch, quant, &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((want_name, want), (name, t)) in template.params.iter().zip(&params) {
            if want_name != name || want.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {want_name} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        let want_sites: Vec<_> = template.sites.iter().map(|s| &s.name).collect();
        let got_sites: Vec<_> = sites.iter().map(|s| &s.name).collect();
        if want_sites != got_sites {
            return Err(Error::Checkpoint(format!(
                "activation sites {got_sites:?} do not match {want_sites:?}"
            )));
        }
        for s in &sites {
            s.state.validate()?;
        }
        Ok(Self {
            params,
            sites,
            ..template
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn site(&self, name: &str) -> Option<&ActSite> {
        self.sites.iter().find(|s| s.name == name)
    }

    /// Whether the weight layer `layer` (by layer name) is binarized.
    pub fn is_binarized(&self, layer: &str) -> bool {
        if !self.quant.binarize_weights {
            return false;
        }
        if self.quant.binarize_first_last {
            return true;
        }
        let Ok(layers) = self.arch.weight_layers() else {
            return false;
        };
        let last = layers.len().saturating_sub(1);
        layers
            .iter()
            .find(|l| l.name == layer)
            .is_some_and(|l| l.index != 0 && l.index != last)
    }

    /// Names of weight parameters whose shadow values are clamped to `[-1, 1]`.
    pub fn binarized_weight_params(&self) -> Vec<String> {
        self.arch
            .weight_layers()
            .unwrap_or_default()
            .into_iter()
            .filter(|l| self.is_binarized(&l.name))
            .map(|l| format!("{}.weight", l.name))
            .collect()
    }

    /// Change the activation bitwidth of every site, keeping tracked ranges.
    pub fn set_act_bits(&mut self, bits: Option<u32>) -> Result<()> {
        self.quant.act_bits = bits;
        if let Some(b) = bits {
            for s in &mut self.sites {
                s.state = s.state.with_bits(b)?;
            }
        }
        Ok(())
    }

    /// Clamp shadow weights of binarized layers to `[-1, 1]` and snap all
    /// parameters to `f32` precision.
    pub fn post_update(&mut self) {
        let clamp: Vec<String> = self.binarized_weight_params();
        for (name, t) in &mut self.params {
            if clamp.contains(name) {
                for v in t.data_mut() {
                    *v = v.clamp(-1.0, 1.0);
                }
            }
            t.round_to_f32();
        }
    }

    fn effective_weight(&self, layer: &str) -> Result<EffectiveWeight<'_>> {
        let pname = format!("{layer}.weight");
        let (name, shadow) = self
            .params
            .iter()
            .find(|(n, _)| *n == pname)
            .map(|(n, t)| (n.as_str(), t))
            .ok_or_else(|| Error::Config(format!("missing parameter {pname}")))?;
        if self.is_binarized(layer) {
            let levels = binarize_levels(shadow)?;
            Ok(EffectiveWeight {
                name,
                shadow,
                value: binarize_forward(shadow, &levels),
                levels: Some(levels),
            })
        } else {
            Ok(EffectiveWeight {
                name,
                shadow,
                value: shadow.clone(),
                levels: None,
            })
        }
    }

    fn param_index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Record the forward pass on `g`. In [`Mode::Train`] activation ranges are updated first.
    pub fn forward(&mut self, g: &mut Graph, x: Tensor, mode: Mode, ste: SteParams) -> Result<ForwardPass> {
        let params: Vec<Var> = self.params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let mut h = g.input(x);
        let blocks = self.arch.blocks.clone();
        for block in &blocks {
            h = match block {
                Block::Layer(l) => self.forward_layer(g, &params, l, h, mode, ste)?,
                Block::Residual { body, shortcut } => {
                    let mut a = h;
                    for l in body {
                        a = self.forward_layer(g, &params, l, a, mode, ste)?;
                    }
                    let mut b = h;
                    for l in shortcut {
                        b = self.forward_layer(g, &params, l, b, mode, ste)?;
                    }
                    g.add(a, b)?
                }
            };
        }
        Ok(ForwardPass { logits: h, params })
    }

    fn forward_layer(
        &mut self,
        g: &mut Graph,
        params: &[Var],
        layer: &LayerSpec,
        h: Var,
        mode: Mode,
        ste: SteParams,
    ) -> Result<Var> {
        match layer {
            LayerSpec::Conv {
                name,
                stride,
                padding,
                ..
            } => {
                let w = params[self.param_index(&format!("{name}.weight"))?];
                let w = if self.is_binarized(name) { g.binarize(w, ste)? } else { w };
                g.conv2d(h, w, *stride, *padding)
            }
            LayerSpec::Linear { name, .. } => {
                let w = params[self.param_index(&format!("{name}.weight"))?];
                let b = params[self.param_index(&format!("{name}.bias"))?];
                let w = if self.is_binarized(name) { g.binarize(w, ste)? } else { w };
                g.linear(h, w, Some(b))
            }
            LayerSpec::ScaleShift { name, .. } => {
                let s = params[self.param_index(&format!("{name}.scale"))?];
                let b = params[self.param_index(&format!("{name}.shift"))?];
                g.scale_shift(h, s, b)
            }
            LayerSpec::Relu => Ok(g.relu(h)),
            LayerSpec::ActQuant { name } => {
                if self.quant.act_bits.is_none() {
                    return Ok(h);
                }
                let site = self
                    .sites
                    .iter_mut()
                    .find(|s| &s.name == name)
                    .ok_or_else(|| Error::Config(format!("missing activation site {name}")))?;
                if mode == Mode::Train {
                    let batch = g.value(h);
                    site.state = if site.initialized {
                        site.state.update_range(batch)?
                    } else {
                        let mut snap = site.state;
                        snap.ema_momentum = 0.0;
                        let mut s = snap.update_range(batch)?;
                        s.ema_momentum = site.state.ema_momentum;
                        s
                    };
                    site.initialized = true;
                }
                Ok(g.act_quant(h, site.state))
            }
            LayerSpec::MaxPool { kernel } => g.max_pool2d(h, *kernel),
            LayerSpec::AvgPool { kernel } => g.avg_pool2d(h, *kernel),
            LayerSpec::Flatten => g.flatten(h),
        }
    }

    /// Inference pass with frozen quantizers; weight layers run on `backend`.
    pub fn infer(&self, x: &Tensor, backend: &mut dyn MvmBackend) -> Result<Tensor> {
        let mut cur = Feature {
            t: x.clone(),
            quant: None,
        };
        for block in &self.arch.blocks {
            cur = match block {
                Block::Layer(l) => self.infer_layer(l, cur, backend)?,
                Block::Residual { body, shortcut } => {
                    let mut a = cur.clone();
                    for l in body {
                        a = self.infer_layer(l, a, backend)?;
                    }
                    let mut b = cur;
                    for l in shortcut {
                        b = self.infer_layer(l, b, backend)?;
                    }
                    Feature {
                        t: a.t.zip_map(&b.t, |p, q| p + q)?,
                        quant: None,
                    }
                }
            };
        }
        Ok(cur.t)
    }

    fn infer_layer(&self, layer: &LayerSpec, cur: Feature, backend: &mut dyn MvmBackend) -> Result<Feature> {
        Ok(match layer {
            LayerSpec::Conv {
                name,
                stride,
                padding,
                ..
            } => {
                let w = self.effective_weight(name)?;
                let geom = ConvGeom::new(cur.t.shape(), w.value.shape(), *stride, *padding)?;
                Feature {
                    t: backend.conv2d(&w, &cur.t, cur.quant.as_ref(), &geom)?,
                    quant: None,
                }
            }
            LayerSpec::Linear { name, .. } => {
                let w = self.effective_weight(name)?;
                let mut y = backend.linear(&w, &cur.t, cur.quant.as_ref())?;
                let b = self.param(&format!("{name}.bias")).expect("bias exists");
                let g = b.numel();
                for row in y.data_mut().chunks_mut(g) {
                    for (v, bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
                Feature { t: y, quant: None }
            }
            LayerSpec::ScaleShift { name, .. } => {
                let s = self.param(&format!("{name}.scale")).expect("scale exists");
                let b = self.param(&format!("{name}.shift")).expect("shift exists");
                let (_, c, inner) = kernels::channel_layout(cur.t.shape())?;
                let mut t = cur.t;
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    let ch = (i / inner) % c;
                    *v = *v * s.data()[ch] + b.data()[ch];
                }
                Feature { t, quant: None }
            }
            LayerSpec::Relu => Feature {
                t: cur.t.map(|v| v.max(0.0)),
                quant: None,
            },
            LayerSpec::ActQuant { name } => {
                if self.quant.act_bits.is_none() {
                    return Ok(cur);
                }
                let site = self
                    .site(name)
                    .ok_or_else(|| Error::Config(format!("missing activation site {name}")))?;
                let st = site.state;
                Feature {
                    t: cur.t.map(|a| uniform_quantize(a, &st)),
                    quant: Some(st),
                }
            }
            // the max of grid values is a grid value
            LayerSpec::MaxPool { kernel } => Feature {
                t: kernels::max_pool2d_forward(&cur.t, *kernel)?.0,
                quant: cur.quant,
            },
            LayerSpec::AvgPool { kernel } => Feature {
                t: kernels::avg_pool2d_forward(&cur.t, *kernel)?,
                quant: None,
            },
            LayerSpec::Flatten => {
                let n = cur.t.shape()[0];
                let rest = cur.t.numel() / n;
                Feature {
                    t: cur.t.reshape(&[n, rest])?,
                    quant: cur.quant,
                }
            }
        })
    }

    /// Digital quantized inference.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x, &mut DigitalBackend)
    }
}

#[derive(Debug, Clone)]
struct Feature {
    t: Tensor,
    quant: Option<ActQuantState>,
}
