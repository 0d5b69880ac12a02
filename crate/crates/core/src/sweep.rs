//! Accuracy and hardware cost as functions of activation precision.

use std::fmt::Write as _;

use serde::Serialize;

use crate::cim::CrossbarSpec;
use crate::error::{Error, Result};
use crate::hw_cost::{estimate, CostTables, Workload};
use crate::nn::Architecture;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BitSweepRow {
    pub act_bits: u32,
    pub accuracy: f64,
    /// Normalized to the lowest bitwidth in the sweep.
    pub latency: f64,
    pub area: f64,
    pub energy: f64,
    pub latency_s: f64,
    pub area_m2: f64,
    pub energy_j: f64,
}

pub const BIT_SWEEP_CSV_HEADER: &str = "act_bits,accuracy,latency_norm,area_norm,energy_norm,latency_s,area_m2,energy_j";

/// One row per bitwidth; `accuracy_at` supplies the measured accuracy.
pub fn act_bit_sweep(
    arch: &Architecture,
    spec: &CrossbarSpec,
    tables: &CostTables,
    bits: &[u32],
    mut accuracy_at: impl FnMut(u32) -> Result<f64>,
) -> Result<Vec<BitSweepRow>> {
    if bits.is_empty() {
        return Err(Error::Config("bit sweep needs at least one bitwidth".into()));
    }
    if let Some(b) = bits.iter().find(|b| !(1..=8).contains(*b)) {
        return Err(Error::Config(format!("activation bitwidth {b} outside 1..=8")));
    }
    let cost = |b: u32| {
        estimate(
            arch,
            spec,
            tables,
            &Workload {
                act_bits: b,
                ..Workload::default()
            },
        )
    };
    let base = cost(*bits.iter().min().expect("non-empty"))?;
    let ratio = |x: f64, y: f64| if y == 0.0 { 1.0 } else { x / y };
    bits.iter()
        .map(|&b| {
            let r = cost(b)?;
            Ok(BitSweepRow {
                act_bits: b,
                accuracy: accuracy_at(b)?,
                latency: ratio(r.latency_s.total, base.latency_s.total),
                area: ratio(r.area_m2.total, base.area_m2.total),
                energy: ratio(r.energy_j.total, base.energy_j.total),
                latency_s: r.latency_s.total,
                area_m2: r.area_m2.total,
                energy_j: r.energy_j.total,
            })
        })
        .collect()
}

pub fn bit_sweep_to_csv(rows: &[BitSweepRow]) -> String {
    let mut out = format!("{BIT_SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:e},{:e},{:e}",
            r.act_bits, r.accuracy, r.latency, r.area, r.energy, r.latency_s, r.area_m2, r.energy_j
        );
    }
    out
}
