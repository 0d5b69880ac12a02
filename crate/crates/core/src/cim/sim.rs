use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::nn::{EffectiveWeight, Model, MvmBackend};
use crate::quant::ActQuantState;
use crate::tensor::{gemm, Tensor};

use super::signal::{adc_decode, adc_quantize, dac_slices};
use super::{map_weight, CrossbarSpec};

/// Gaussian perturbation of every programmed conductance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation relative to `g_max - g_min`.
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub analog_layers: u64,
    pub digital_layers: u64,
    pub array_reads: u64,
    pub adc_conversions: u64,
}

impl SimStats {
    fn merge(&mut self, o: &SimStats) {
        self.analog_layers += o.analog_layers;
        self.digital_layers += o.digital_layers;
        self.array_reads += o.array_reads;
        self.adc_conversions += o.adc_conversions;
    }
}

/// Bit-serial crossbar execution of binarized layers.
///
/// Layers with full-precision weights, or whose input is not on an
/// activation grid, run digitally.
#[derive(Debug, Clone)]
pub struct CimBackend {
    spec: CrossbarSpec,
    noise: Option<NoiseConfig>,
    pub stats: SimStats,
}

/// Differential conductances of one sub-matrix, `rows × cols` row-major.
struct Programmed {
    rows: usize,
    cols: usize,
    diff: Vec<f64>,
}

fn name_seed(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

impl CimBackend {
    pub fn new(spec: CrossbarSpec, noise: Option<NoiseConfig>) -> Result<Self> {
        spec.validate()?;
        if let Some(n) = noise {
            if !(n.sigma >= 0.0 && n.sigma.is_finite()) {
                return Err(Error::Config(format!("noise sigma must be >= 0, got {}", n.sigma)));
            }
        }
        Ok(Self {
            spec,
            noise,
            stats: SimStats::default(),
        })
    }

    /// Program `(rows × cols)` weights given by `w(i, o)` with scale `s_w`.
    fn program(&self, name: &str, rows: usize, cols: usize, s_w: f64, w: impl Fn(usize, usize) -> f64) -> Programmed {
        let mut diff = Vec::with_capacity(rows * cols);
        let spec = &self.spec;
        match self.noise.filter(|n| n.sigma > 0.0) {
            None => {
                for i in 0..rows {
                    for o in 0..cols {
                        diff.push(map_weight(w(i, o), s_w, spec).differential());
                    }
                }
            }
            Some(n) => {
                let mut rng = ChaCha8Rng::seed_from_u64(n.seed ^ name_seed(name));
                let dist = Normal::new(0.0, n.sigma * spec.g_span()).expect("finite sigma");
                for i in 0..rows {
                    for o in 0..cols {
                        let p = map_weight(w(i, o), s_w, spec);
                        let gp = (p.g_pos + dist.sample(&mut rng)).clamp(spec.g_min, spec.g_max);
                        let gn = (p.g_neg + dist.sample(&mut rng)).clamp(spec.g_min, spec.g_max);
                        diff.push(gp - gn);
                    }
                }
            }
        }
        Programmed { rows, cols, diff }
    }

    /// Bit-serial product of integer codes `codes` (`m × rows`) with a
    /// programmed block, accumulated into `acc` (`m × cols`) in units of
    /// code · conductance.
    fn run(&mut self, codes: &[u32], m: usize, block: &Programmed, b: u32, acc: &mut [f64]) {
        let spec = self.spec;
        let dac = spec.dac_bits;
        let slices = dac_slices(b, dac);
        let mask = (1u32 << dac) - 1;
        let (rows, cols) = (block.rows, block.cols);
        let tile_cols = spec.logical_cols();
        let mut xs = vec![0.0; m * rows];
        let mut part = Vec::new();
        for s in 0..slices {
            let shift = dac * (slices - 1 - s);
            for (x, &c) in xs.iter_mut().zip(codes) {
                *x = ((c >> shift) & mask) as f64;
            }
            let weight = (1u64 << shift) as f64;
            for r0 in (0..rows).step_by(spec.rows) {
                let r1 = (r0 + spec.rows).min(rows);
                let full_scale = (r1 - r0) as f64 * spec.g_span() * mask as f64;
                for c0 in (0..cols).step_by(tile_cols) {
                    let c1 = (c0 + tile_cols).min(cols);
                    let w = c1 - c0;
                    part.clear();
                    part.resize(m * w, 0.0);
                    gemm(
                        m,
                        r1 - r0,
                        w,
                        1.0,
                        &xs[r0..],
                        (rows, 1),
                        &block.diff[r0 * cols + c0..],
                        (cols, 1),
                        0.0,
                        &mut part,
                        (w, 1),
                    );
                    self.stats.array_reads += m as u64;
                    if !spec.adc_bypassed() {
                        self.stats.adc_conversions += (m * w) as u64;
                    }
                    for (row, out) in part.chunks(w).zip(acc.chunks_mut(cols)) {
                        for (v, a) in row.iter().zip(&mut out[c0..c1]) {
                            let read = if spec.adc_bypassed() {
                                *v
                            } else {
                                adc_decode(adc_quantize(*v, spec.adc_bits, full_scale), spec.adc_bits, full_scale)
                            };
                            *a += read * weight;
                        }
                    }
                }
            }
        }
    }

    fn input_codes(input: &Tensor, q: &ActQuantState) -> Result<Vec<u32>> {
        let tol = 1e-9 * q.a_max.abs().max(q.a_min.abs()).max(q.delta());
        input
            .data()
            .iter()
            .map(|&a| {
                let c = q.code(a);
                if (q.level(c) - a).abs() > tol {
                    Err(Error::InvalidArgument(format!(
                        "crossbar input {a} is not on the {}-bit activation grid",
                        q.b
                    )))
                } else {
                    Ok(c)
                }
            })
            .collect()
    }

    fn scale(levels_weight: &EffectiveWeight<'_>) -> Result<f64> {
        let s_w = levels_weight.value.max_abs();
        if s_w == 0.0 {
            return Err(Error::Mapping(format!(
                "layer {} has all-zero weights; conductance mapping undefined",
                levels_weight.name
            )));
        }
        Ok(s_w)
    }
}

impl MvmBackend for CimBackend {
    fn conv2d(
        &mut self,
        weight: &EffectiveWeight<'_>,
        input: &Tensor,
        input_quant: Option<&ActQuantState>,
        geom: &ConvGeom,
    ) -> Result<Tensor> {
        let q = match (weight.levels, input_quant) {
            (Some(_), Some(q)) => q,
            _ => {
                self.stats.digital_layers += 1;
                return Ok(kernels::conv2d_forward(input, &weight.value, geom).0);
            }
        };
        self.stats.analog_layers += 1;
        let s_w = Self::scale(weight)?;
        let codes = Self::input_codes(input, q)?;
        let g = *geom;
        let (ci, co, k) = (g.in_ch, g.out_ch, g.kernel);
        let wd = weight.value.data();
        let widx = |o: usize, i: usize, kh: usize, kw: usize| ((o * ci + i) * k + kh) * k + kw;
        let mut out = vec![0.0; g.batch * co * g.out_positions()];
        let to_weight = s_w / self.spec.g_span();
        for kh in 0..k {
            for kw in 0..k {
                let block = self.program(weight.name, ci, co, s_w, |i, o| wd[widx(o, i, kh, kw)]);
                let colsum: Vec<f64> = (0..co).map(|o| (0..ci).map(|i| wd[widx(o, i, kh, kw)]).sum()).collect();
                // rows of the streamed input: (sample, output position) pairs whose source pixel is inside the image
                let mut targets = Vec::new();
                let mut x = Vec::new();
                for n in 0..g.batch {
                    for oh in 0..g.out_h {
                        for ow in 0..g.out_w {
                            if let Some((y, xx)) = g.source(oh, ow, kh, kw) {
                                targets.push((n, oh * g.out_w + ow));
                                for i in 0..ci {
                                    x.push(codes[((n * ci + i) * g.in_h + y) * g.in_w + xx]);
                                }
                            }
                        }
                    }
                }
                let m = targets.len();
                let mut acc = vec![0.0; m * co];
                self.run(&x, m, &block, q.b, &mut acc);
                for (&(n, pos), row) in targets.iter().zip(acc.chunks(co)) {
                    for o in 0..co {
                        out[(n * co + o) * g.out_positions() + pos] +=
                            q.a_min * colsum[o] + q.delta() * row[o] * to_weight;
                    }
                }
            }
        }
        Tensor::new(&g.out_shape(), out)
    }

    fn linear(
        &mut self,
        weight: &EffectiveWeight<'_>,
        input: &Tensor,
        input_quant: Option<&ActQuantState>,
    ) -> Result<Tensor> {
        let q = match (weight.levels, input_quant) {
            (Some(_), Some(q)) => q,
            _ => {
                self.stats.digital_layers += 1;
                return kernels::linear_forward(input, &weight.value, None);
            }
        };
        let (n, f, gcols) = kernels::linear_dims(input, &weight.value)?;
        self.stats.analog_layers += 1;
        let s_w = Self::scale(weight)?;
        let codes = Self::input_codes(input, q)?;
        let wd = weight.value.data();
        let block = self.program(weight.name, f, gcols, s_w, |i, o| wd[i * gcols + o]);
        let colsum: Vec<f64> = (0..gcols).map(|o| (0..f).map(|i| wd[i * gcols + o]).sum()).collect();
        let mut acc = vec![0.0; n * gcols];
        self.run(&codes, n, &block, q.b, &mut acc);
        let to_weight = s_w / self.spec.g_span();
        let out = acc
            .chunks(gcols)
            .flat_map(|row| {
                row.iter()
                    .zip(&colsum)
                    .map(|(a, cs)| q.a_min * cs + q.delta() * a * to_weight)
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(&[n, gcols], out)
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub logits: Tensor,
    pub accuracy: f64,
    pub stats: SimStats,
}

/// Run `images` through the mixed-signal pipeline in batches of `batch_size`.
///
/// `expected_act_bits` guards against simulating a model trained at another resolution.
pub fn simulate_network(
    model: &Model,
    spec: &CrossbarSpec,
    noise: Option<NoiseConfig>,
    expected_act_bits: Option<u32>,
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<SimResult> {
    let bits = model.quant.act_bits.ok_or_else(|| {
        Error::Config("model has full-precision activations; the crossbar pipeline needs quantized inputs".into())
    })?;
    if let Some(want) = expected_act_bits {
        if want != bits {
            return Err(Error::Config(format!(
                "simulation expects {want}-bit activations but the checkpoint uses {bits}"
            )));
        }
    }
    let n = images.shape().first().copied().unwrap_or(0);
    if labels.len() != n || n == 0 {
        return Err(Error::InvalidArgument(format!("{n} images with {} labels", labels.len())));
    }
    let batch_size = batch_size.max(1);
    let chunks: Vec<usize> = (0..n).step_by(batch_size).collect();
    let parts: Vec<(Tensor, SimStats)> = chunks
        .par_iter()
        .map(|&start| {
            let x = images.slice_outer(start, (start + batch_size).min(n))?;
            let mut backend = CimBackend::new(*spec, noise)?;
            let y = model.infer(&x, &mut backend)?;
            Ok((y, backend.stats))
        })
        .collect::<Result<_>>()?;
    let mut stats = SimStats::default();
    let mut data = Vec::new();
    let mut classes = 0;
    for (y, s) in &parts {
        stats.merge(s);
        classes = y.shape()[1];
        data.extend_from_slice(y.data());
    }
    let logits = Tensor::new(&[n, classes], data)?;
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(SimResult {
        accuracy: correct as f64 / n as f64,
        logits,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, Block, LayerSpec, QuantConfig};

    /// in.aq -> flatten -> fc(2 -> 2), all weights binarized
    fn toy() -> Model {
        let arch = Architecture {
            name: "toy".into(),
            input: [2, 1, 1],
            num_classes: 2,
            blocks: vec![
                Block::Layer(LayerSpec::ActQuant { name: "in.aq".into() }),
                Block::Layer(LayerSpec::Flatten),
                Block::Layer(LayerSpec::Linear {
                    name: "fc".into(),
                    in_features: 2,
                    out_features: 2,
                }),
            ],
        };
        let quant = QuantConfig {
            act_bits: Some(2),
            binarize_weights: true,
            binarize_first_last: true,
            ema_momentum: 0.9,
        };
        let params = vec![
            // levels: c = 0.25, r = 0.75 -> {-0.5, 1.0}
            ("fc.weight".to_string(), Tensor::new(&[2, 2], vec![1.0, -0.5, -0.5, 1.0]).unwrap()),
            ("fc.bias".to_string(), Tensor::zeros(&[2])),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::new(arch, quant, &mut rng).unwrap();
        let mut sites = m.sites.clone();
        sites[0].state = ActQuantState::new(0.0, 3.0, 2, 0.9).unwrap();
        m = Model::from_parts(m.arch.clone(), quant, params, sites).unwrap();
        m
    }

    #[test]
    fn toy_trace_by_hand() {
        // input codes (3, 1) with delta = 1; S_w = 1, g_span = 1e-4
        // column 0: 3*1e-4 + 1*(-0.5e-4) = 2.5e-4, column 1: 3*(-0.5e-4) + 1*1e-4 = -0.5e-4
        // bit-serial with 1-bit DAC: slice 1 = (1, 0), slice 0 = (1, 1); full scale = 2e-4
        //   slice 1: col0 1e-4, col1 -0.5e-4
        //   slice 0: col0 0.5e-4, col1 0.5e-4
        // an 8-bit ADC has step 4e-4/255; each read is rounded to that grid
        let m = toy();
        let spec = CrossbarSpec {
            adc_bits: 8,
            g_min: 1e-6,
            g_max: 1.01e-4,
            ..CrossbarSpec::default()
        };
        let x = Tensor::new(&[1, 2, 1, 1], vec![3.0, 1.0]).unwrap();
        let r = simulate_network(&m, &spec, None, Some(2), &x, &[0], 1).unwrap();
        let fs = 2e-4;
        let step = 2.0 * fs / 255.0;
        let read = |v: f64| -fs + ((v + fs) / step).round() * step;
        let col0 = 2.0 * read(1e-4) + read(0.5e-4);
        let col1 = 2.0 * read(-0.5e-4) + read(0.5e-4);
        let want = [col0 / 1e-4, col1 / 1e-4];
        for (got, w) in r.logits.data().iter().zip(want) {
            assert!((got - w).abs() < 1e-9, "{got} vs {w}");
        }
        // close to the exact product (2.5, -0.5)
        assert!((r.logits.data()[0] - 2.5).abs() < 0.02);
        assert!((r.logits.data()[1] + 0.5).abs() < 0.02);
        assert_eq!(r.stats.adc_conversions, 4);
    }

    #[test]
    fn bypass_reproduces_digital_and_bitwidth_is_checked() {
        let m = toy();
        let spec = CrossbarSpec {
            adc_bits: CrossbarSpec::ADC_BYPASS,
            ..CrossbarSpec::default()
        };
        let x = Tensor::new(&[2, 2, 1, 1], vec![3.0, 1.0, 0.4, 2.2]).unwrap();
        let r = simulate_network(&m, &spec, None, None, &x, &[0, 1], 2).unwrap();
        let d = m.predict(&x).unwrap();
        for (a, b) in r.logits.data().iter().zip(d.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(simulate_network(&m, &spec, None, Some(4), &x, &[0, 1], 2).is_err());
    }

    #[test]
    fn zero_sigma_noise_is_bitwise_noiseless() {
        let m = toy();
        let spec = CrossbarSpec::default();
        let x = Tensor::new(&[2, 2, 1, 1], vec![3.0, 1.0, 0.4, 2.2]).unwrap();
        let a = simulate_network(&m, &spec, None, None, &x, &[0, 1], 2).unwrap();
        let noise = NoiseConfig { sigma: 0.0, seed: 3 };
        let b = simulate_network(&m, &spec, Some(noise), None, &x, &[0, 1], 2).unwrap();
        assert_eq!(a.logits, b.logits);
        let noise = NoiseConfig { sigma: 0.2, seed: 3 };
        let c = simulate_network(&m, &CrossbarSpec { adc_bits: 0, ..spec }, Some(noise), None, &x, &[0, 1], 2).unwrap();
        assert_ne!(a.logits, c.logits);
    }
}
