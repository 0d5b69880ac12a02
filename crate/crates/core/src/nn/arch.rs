//! Network topologies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    /// Per-channel learnable affine map (stands in for batch norm).
    ScaleShift { name: String, channels: usize },
    Relu,
    /// Activation quantization site.
    ActQuant { name: String },
    MaxPool { kernel: usize },
    AvgPool { kernel: usize },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "snake_case")]
pub enum Block {
    Layer(LayerSpec),
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    /// `[C, H, W]` of one input sample.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub blocks: Vec<Block>,
}

/// Shape of a weight layer, the unit that gets mapped onto crossbars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightShape {
    /// `(O, I, K, K)`
    Conv {
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
    },
    /// `(F, G)`: `F` inputs, `G` outputs.
    Linear { in_features: usize, out_features: usize },
}

impl WeightShape {
    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [o, i, k, k2] if k == k2 => Ok(WeightShape::Conv {
                out_ch: o,
                in_ch: i,
                kernel: k,
            }),
            [f, g] => Ok(WeightShape::Linear {
                in_features: f,
                out_features: g,
            }),
            _ => Err(Error::Mapping(format!(
                "unsupported layer kind with weight shape {dims:?}; expected (O,I,K,K) or (F,G)"
            ))),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            WeightShape::Conv {
                out_ch,
                in_ch,
                kernel,
            } => vec![out_ch, in_ch, kernel, kernel],
            WeightShape::Linear {
                in_features,
                out_features,
            } => vec![in_features, out_features],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            WeightShape::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
            WeightShape::Linear { in_features, .. } => in_features,
        }
    }
}

/// A weight layer together with the feature-map geometry it sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightLayerInfo {
    pub name: String,
    pub shape: WeightShape,
    pub stride: usize,
    pub padding: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// Index in network order among weight layers.
    pub index: usize,
}

impl WeightLayerInfo {
    /// Output positions per sample (1 for linear layers).
    pub fn positions(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FeatureShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Architecture {
    /// Weight layers in forward order, with inferred geometry.
    pub fn weight_layers(&self) -> Result<Vec<WeightLayerInfo>> {
        let mut out = Vec::new();
        let [c, h, w] = self.input;
        let end = self.walk(
            &self.blocks_flat(),
            FeatureShape::Map { c, h, w },
            &mut out,
        )?;
        match end {
            FeatureShape::Flat(n) if n == self.num_classes => Ok(out),
            other => Err(Error::Config(format!(
                "{}: network ends in {other:?}, expected {} logits",
                self.name, self.num_classes
            ))),
        }
    }

    fn blocks_flat(&self) -> Vec<&Block> {
        self.blocks.iter().collect()
    }

    fn walk(
        &self,
        blocks: &[&Block],
        mut shape: FeatureShape,
        out: &mut Vec<WeightLayerInfo>,
    ) -> Result<FeatureShape> {
        for block in blocks {
            shape = match block {
                Block::Layer(l) => self.step(l, shape, out)?,
                Block::Residual { body, shortcut } => {
                    let mut a = shape;
                    for l in body {
                        a = self.step(l, a, out)?;
                    }
                    let mut b = shape;
                    for l in shortcut {
                        b = self.step(l, b, out)?;
                    }
                    if a != b {
                        return Err(Error::Config(format!(
                            "{}: residual branches disagree ({a:?} vs {b:?})",
                            self.name
                        )));
                    }
                    a
                }
            };
        }
        Ok(shape)
    }

    fn step(
        &self,
        layer: &LayerSpec,
        shape: FeatureShape,
        out: &mut Vec<WeightLayerInfo>,
    ) -> Result<FeatureShape> {
        let bad = |what: &str| {
            Error::Config(format!("{}: layer {layer:?} {what} (input {shape:?})", self.name))
        };
        Ok(match (layer, shape) {
            (
                LayerSpec::Conv {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                },
                FeatureShape::Map { c, h, w },
            ) => {
                if *in_ch != c || *stride == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(bad("does not fit"));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                out.push(WeightLayerInfo {
                    name: name.clone(),
                    shape: WeightShape::Conv {
                        out_ch: *out_ch,
                        in_ch: *in_ch,
                        kernel: *kernel,
                    },
                    stride: *stride,
                    padding: *padding,
                    in_hw: (h, w),
                    out_hw: (oh, ow),
                    index: out.len(),
                });
                FeatureShape::Map {
                    c: *out_ch,
                    h: oh,
                    w: ow,
                }
            }
            (
                LayerSpec::Linear {
                    name,
                    in_features,
                    out_features,
                },
                FeatureShape::Flat(n),
            ) => {
                if *in_features != n {
                    return Err(bad("does not fit"));
                }
                out.push(WeightLayerInfo {
                    name: name.clone(),
                    shape: WeightShape::Linear {
                        in_features: *in_features,
                        out_features: *out_features,
                    },
                    stride: 1,
                    padding: 0,
                    in_hw: (1, 1),
                    out_hw: (1, 1),
                    index: out.len(),
                });
                FeatureShape::Flat(*out_features)
            }
            (LayerSpec::ScaleShift { channels, .. }, s) => {
                let c = match s {
                    FeatureShape::Map { c, .. } => c,
                    FeatureShape::Flat(n) => n,
                };
                if *channels != c {
                    return Err(bad("has the wrong channel count"));
                }
                s
            }
            (LayerSpec::Relu | LayerSpec::ActQuant { .. }, s) => s,
            (
                LayerSpec::MaxPool { kernel } | LayerSpec::AvgPool { kernel },
                FeatureShape::Map { c, h, w },
            ) => {
                if *kernel == 0 || h < *kernel || w < *kernel {
                    return Err(bad("does not fit"));
                }
                FeatureShape::Map {
                    c,
                    h: h / kernel,
                    w: w / kernel,
                }
            }
            (LayerSpec::Flatten, FeatureShape::Map { c, h, w }) => FeatureShape::Flat(c * h * w),
            (LayerSpec::Flatten, s @ FeatureShape::Flat(_)) => s,
            _ => return Err(bad("is incompatible with its input")),
        })
    }

    /// Every layer spec in forward order, residual branches included (body first).
    pub fn layers(&self) -> Vec<&LayerSpec> {
        let mut v = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Layer(l) => v.push(l),
                Block::Residual { body, shortcut } => {
                    v.extend(body.iter());
                    v.extend(shortcut.iter());
                }
            }
        }
        v
    }

    pub fn act_sites(&self) -> Vec<String> {
        self.layers()
            .into_iter()
            .filter_map(|l| match l {
                LayerSpec::ActQuant { name } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    /// Built-in reference networks: `mnist-tiny`, `vgg8-cifar`, `resnet20-cifar`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "mnist-tiny" => Ok(mnist_tiny()),
            "vgg8-cifar" => Ok(vgg8_cifar()),
            "resnet20-cifar" => Ok(resnet20_cifar()),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?}; expected mnist-tiny, vgg8-cifar or resnet20-cifar"
            ))),
        }
    }

    pub const BUILTIN_NAMES: [&'static str; 3] = ["mnist-tiny", "vgg8-cifar", "resnet20-cifar"];
}

fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        name: name.into(),
        in_ch,
        out_ch,
        kernel,
        stride,
        padding: kernel / 2,
    }
}

fn ss(name: &str, channels: usize) -> LayerSpec {
    LayerSpec::ScaleShift {
        name: format!("{name}.ss"),
        channels,
    }
}

fn aq(name: &str) -> LayerSpec {
    LayerSpec::ActQuant {
        name: format!("{name}.aq"),
    }
}

fn linear(name: &str, in_features: usize, out_features: usize) -> LayerSpec {
    LayerSpec::Linear {
        name: name.into(),
        in_features,
        out_features,
    }
}

/// conv(16, /2) - conv(32) - pool - fc
fn mnist_tiny() -> Architecture {
    use Block::Layer as L;
    Architecture {
        name: "mnist-tiny".into(),
        input: [1, 28, 28],
        num_classes: 10,
        blocks: vec![
            L(conv("conv1", 1, 16, 3, 2)),
            L(ss("conv1", 16)),
            L(LayerSpec::Relu),
            L(aq("conv1")),
            L(conv("conv2", 16, 32, 3, 1)),
            L(ss("conv2", 32)),
            L(LayerSpec::Relu),
            L(aq("conv2")),
            L(LayerSpec::MaxPool { kernel: 2 }),
            L(LayerSpec::Flatten),
            L(linear("fc", 32 * 7 * 7, 10)),
        ],
    }
}

/// Six 3×3 convolutions (128-128-256-256-512-512, pooling after every pair)
/// and two fully connected layers (8192-1024-10).
fn vgg8_cifar() -> Architecture {
    use Block::Layer as L;
    let mut blocks = Vec::new();
    let chans = [(3, 128), (128, 128), (128, 256), (256, 256), (256, 512), (512, 512)];
    for (i, &(cin, cout)) in chans.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        blocks.push(L(conv(&name, cin, cout, 3, 1)));
        blocks.push(L(ss(&name, cout)));
        blocks.push(L(LayerSpec::Relu));
        blocks.push(L(aq(&name)));
        if i % 2 == 1 {
            blocks.push(L(LayerSpec::MaxPool { kernel: 2 }));
        }
    }
    blocks.push(L(LayerSpec::Flatten));
    blocks.push(L(linear("fc1", 8192, 1024)));
    blocks.push(L(ss("fc1", 1024)));
    blocks.push(L(LayerSpec::Relu));
    blocks.push(L(aq("fc1")));
    blocks.push(L(linear("fc2", 1024, 10)));
    Architecture {
        name: "vgg8-cifar".into(),
        input: [3, 32, 32],
        num_classes: 10,
        blocks,
    }
}

/// 3 stages × 3 basic blocks (16/32/64 channels) with 1×1 projection shortcuts
/// where the shape changes.
fn resnet20_cifar() -> Architecture {
    use Block::Layer as L;
    let mut blocks = vec![
        L(conv("conv1", 3, 16, 3, 1)),
        L(ss("conv1", 16)),
        L(LayerSpec::Relu),
        L(aq("conv1")),
    ];
    let mut cin = 16;
    for (stage, &cout) in [16usize, 32, 64].iter().enumerate() {
        for blk in 0..3 {
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", stage + 1, blk + 1);
            let body = vec![
                conv(&format!("{p}.conv1"), cin, cout, 3, stride),
                ss(&format!("{p}.conv1"), cout),
                LayerSpec::Relu,
                aq(&format!("{p}.conv1")),
                conv(&format!("{p}.conv2"), cout, cout, 3, 1),
                ss(&format!("{p}.conv2"), cout),
            ];
            let shortcut = if stride != 1 || cin != cout {
                vec![
                    conv(&format!("{p}.proj"), cin, cout, 1, stride),
                    ss(&format!("{p}.proj"), cout),
                ]
            } else {
                Vec::new()
            };
            blocks.push(Block::Residual { body, shortcut });
            blocks.push(L(LayerSpec::Relu));
            blocks.push(L(aq(&p)));
            cin = cout;
        }
    }
    // global average pooling over the final 8×8 map
    blocks.push(L(LayerSpec::AvgPool { kernel: 8 }));
    blocks.push(L(LayerSpec::Flatten));
    blocks.push(L(linear("fc", 64, 10)));
    Architecture {
        name: "resnet20-cifar".into(),
        input: [3, 32, 32],
        num_classes: 10,
        blocks,
    }
}
