use crate::error::{Error, Result};
use crate::quant::ActQuantState;

use super::ConductancePair;

/// Number of DAC slices for a `b`-bit code.
pub fn dac_slices(b: u32, dac_bits: u32) -> u32 {
    b.div_ceil(dac_bits)
}

/// Split the code of grid value `a` into `dac_bits`-wide slices, most significant first.
pub fn dac_encode(a: f64, s: &ActQuantState, dac_bits: u32) -> Result<Vec<u32>> {
    if dac_bits == 0 || dac_bits > 16 {
        return Err(Error::InvalidArgument(format!("dac_bits {dac_bits} outside 1..=16")));
    }
    let code = s.code(a);
    let tol = 1e-9 * s.a_max.abs().max(s.a_min.abs()).max(s.delta());
    if !a.is_finite() || (s.level(code) - a).abs() > tol {
        return Err(Error::InvalidArgument(format!(
            "{a} is not a level of the {}-bit grid on [{}, {}]",
            s.b, s.a_min, s.a_max
        )));
    }
    let n = dac_slices(s.b, dac_bits);
    let mask = (1u32 << dac_bits) - 1;
    Ok((0..n).rev().map(|i| (code >> (i * dac_bits)) & mask).collect())
}

/// Reassemble an integer code from its slices.
pub fn dac_decode(slices: &[u32], dac_bits: u32) -> u32 {
    slices.iter().fold(0, |acc, &s| (acc << dac_bits) | s)
}

/// Differential conductances of one array, row-major `rows × cols` over
/// logical (pair) columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub rows: usize,
    pub cols: usize,
    pub diff: Vec<f64>,
}

impl Tile {
    pub fn from_pairs(rows: usize, cols: usize, pairs: &[ConductancePair]) -> Result<Self> {
        if pairs.len() != rows * cols {
            return Err(Error::shape(
                "tile",
                format!("{} pairs for a {rows}x{cols} tile", pairs.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            diff: pairs.iter().map(ConductancePair::differential).collect(),
        })
    }
}

/// Ideal column read-out: `Σ_i x_i · (g_pos - g_neg)_ij`.
pub fn analog_mvm(tile: &Tile, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != tile.rows {
        return Err(Error::shape(
            "analog_mvm",
            format!("{} inputs for {} tile rows", x.len(), tile.rows),
        ));
    }
    let mut out = vec![0.0; tile.cols];
    for (xi, row) in x.iter().zip(tile.diff.chunks(tile.cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, g) in out.iter_mut().zip(row) {
            *o += xi * g;
        }
    }
    Ok(out)
}

fn adc_step(bits: u32, full_scale: f64) -> f64 {
    2.0 * full_scale / ((1u64 << bits) - 1) as f64
}

/// Symmetric uniform conversion over `[-full_scale, full_scale]` to `2^bits` codes.
pub fn adc_quantize(value: f64, bits: u32, full_scale: f64) -> u32 {
    let top = (1u64 << bits) - 1;
    let v = value.clamp(-full_scale, full_scale);
    let code = ((v + full_scale) / adc_step(bits, full_scale)).round();
    (code as u64).min(top) as u32
}

pub fn adc_decode(code: u32, bits: u32, full_scale: f64) -> f64 {
    if code as u64 == (1u64 << bits) - 1 {
        return full_scale;
    }
    -full_scale + code as f64 * adc_step(bits, full_scale)
}
