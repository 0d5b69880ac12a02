//! Latency, energy and area estimates for a mapped network.
//!
//! Every weight layer executes as a sequence of passes, one per output
//! position and input slice. All arrays of a layer work in parallel within a
//! pass and layers run one after another.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cim::{dac_slices, map_architecture, CrossbarSpec, DeviceType, MappedLayer};
use crate::error::{Error, Result};
use crate::nn::Architecture;

/// Tables shipped with the crate.
pub const DEFAULT_COST_TABLES: &str = include_str!("../data/cost_tables.json");

/// Converter cost `per_level · 2^bits + fixed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpCost {
    pub per_level: f64,
    pub fixed: f64,
}

impl ExpCost {
    pub fn at(&self, bits: u32) -> f64 {
        self.per_level * (1u64 << bits) as f64 + self.fixed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcCosts {
    pub latency_s: ExpCost,
    pub energy_j: ExpCost,
    pub area_f2_per_level: f64,
    /// Columns multiplexed onto one converter.
    pub columns_per_adc: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceCosts {
    pub cell_area_f2: f64,
    /// Per cell read at 1 V.
    pub read_energy_j: f64,
    /// Charged on every instantiated cell of an active array, used or not.
    pub leak_energy_j: f64,
    pub working_voltage_v: f64,
    pub read_latency_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCost {
    pub latency_s: f64,
    pub energy_j: f64,
    pub area_f2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverCost {
    /// Per row per pass at 1 V.
    pub energy_j: f64,
    /// Per row.
    pub area_f2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeripheralCosts {
    /// Input/output buffering; area per column.
    pub buffer: UnitCost,
    /// Inter-array routing; latency and energy scale with the square root of the array count.
    pub routing: UnitCost,
    /// Per-array control.
    pub control: UnitCost,
    pub driver: DriverCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTables {
    pub label: String,
    #[serde(default)]
    pub notes: String,
    pub feature_size_m: f64,
    pub adc: AdcCosts,
    pub devices: BTreeMap<DeviceType, DeviceCosts>,
    /// Shift-and-add and partial-sum merging; area per converter.
    pub accumulation: UnitCost,
    pub peripheral: PeripheralCosts,
}

impl Default for CostTables {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_COST_TABLES).expect("shipped cost tables parse")
    }
}

impl CostTables {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut vals = vec![
            ("feature_size_m", self.feature_size_m),
            ("adc.latency_s.per_level", self.adc.latency_s.per_level),
            ("adc.energy_j.per_level", self.adc.energy_j.per_level),
            ("adc.area_f2_per_level", self.adc.area_f2_per_level),
            ("accumulation.latency_s", self.accumulation.latency_s),
            ("accumulation.energy_j", self.accumulation.energy_j),
            ("accumulation.area_f2", self.accumulation.area_f2),
        ];
        let p = &self.peripheral;
        for (n, u) in [("buffer", p.buffer), ("routing", p.routing), ("control", p.control)] {
            vals.push((n, u.latency_s));
            vals.push((n, u.energy_j));
            vals.push((n, u.area_f2));
        }
        vals.push(("driver", p.driver.energy_j));
        vals.push(("driver", p.driver.area_f2));
        for (d, c) in &self.devices {
            for v in [c.cell_area_f2, c.read_energy_j, c.leak_energy_j, c.working_voltage_v, c.read_latency_s] {
                vals.push((d.as_str(), v));
            }
        }
        for (name, v) in vals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("cost table entry {name} must be positive, got {v}")));
            }
        }
        if self.adc.latency_s.fixed < 0.0 || self.adc.energy_j.fixed < 0.0 || self.adc.columns_per_adc == 0 {
            return Err(Error::Config("adc fixed costs must be >= 0 and columns_per_adc >= 1".into()));
        }
        Ok(())
    }

    pub fn device(&self, d: DeviceType) -> Result<&DeviceCosts> {
        self.devices
            .get(&d)
            .ok_or_else(|| Error::Config(format!("cost tables have no {d} preset")))
    }
}

/// Amount of work costed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    /// Input activation resolution, which sets the number of DAC slices.
    pub act_bits: u32,
    pub inferences: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            act_bits: 4,
            inferences: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub array: f64,
    pub adc: f64,
    pub accumulation: f64,
    pub peripheral: f64,
}

impl Breakdown {
    pub const COMPONENTS: [&'static str; 4] = ["array", "adc", "accumulation", "peripheral"];

    pub fn total(&self) -> f64 {
        self.array + self.adc + self.accumulation + self.peripheral
    }

    pub fn values(&self) -> [f64; 4] {
        [self.array, self.adc, self.accumulation, self.peripheral]
    }

    fn add(&mut self, o: &Breakdown) {
        self.array += o.array;
        self.adc += o.adc;
        self.accumulation += o.accumulation;
        self.peripheral += o.peripheral;
    }

    fn scale(&self, k: f64) -> Breakdown {
        Breakdown {
            array: self.array * k,
            adc: self.adc * k,
            accumulation: self.accumulation * k,
            peripheral: self.peripheral * k,
        }
    }

    /// Fractions of the total; all zero for an empty total.
    pub fn shares(&self) -> Breakdown {
        let t = self.total();
        if t == 0.0 {
            Breakdown::default()
        } else {
            self.scale(1.0 / t)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub total: f64,
    pub breakdown: Breakdown,
    pub shares: Breakdown,
}

impl Metric {
    fn new(b: Breakdown) -> Self {
        Self {
            total: b.total(),
            breakdown: b,
            shares: b.shares(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub latency_s: Breakdown,
    pub energy_j: Breakdown,
    pub area_m2: Breakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub network: String,
    pub crossbar: CrossbarSpec,
    pub workload: Workload,
    pub tables_label: String,
    pub latency_s: Metric,
    pub energy_j: Metric,
    pub area_m2: Metric,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "layer,metric,array,adc,accumulation,peripheral,total";

    /// One row per layer and metric, then network totals and shares.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let mut row = |layer: &str, metric: &str, b: &Breakdown, total: f64| {
            let v = b.values();
            let _ = writeln!(out, "{layer},{metric},{:e},{:e},{:e},{:e},{:e}", v[0], v[1], v[2], v[3], total);
        };
        for l in &self.layers {
            row(&l.name, "latency_s", &l.latency_s, l.latency_s.total());
            row(&l.name, "energy_j", &l.energy_j, l.energy_j.total());
            row(&l.name, "area_m2", &l.area_m2, l.area_m2.total());
        }
        for (name, m) in [("latency_s", &self.latency_s), ("energy_j", &self.energy_j), ("area_m2", &self.area_m2)] {
            row("network", name, &m.breakdown, m.total);
            row("network", &format!("{name}_share"), &m.shares, m.shares.total());
        }
        out
    }
}

fn layer_cost(l: &MappedLayer, spec: &CrossbarSpec, t: &CostTables, dev: &DeviceCosts, slices: u32) -> LayerCost {
    let n_rows = spec.rows as f64;
    let lcols = spec.logical_cols();
    let mux = t.adc.columns_per_adc.min(lcols) as f64;
    let f2 = t.feature_size_m * t.feature_size_m;
    let v2 = dev.working_voltage_v * dev.working_voltage_v;
    let adc_bits = spec.adc_bits;

    let positions = l.positions as f64;
    let passes = positions * slices as f64;
    let tiles = l.tiles as f64;
    let total_cells = l.total_cells as f64;
    // cells carrying current in a pass: one of each differential pair
    let active_cells = l.used_cells as f64 / 2.0;
    // partial sums per output column and conversions per pass
    let partials: usize = l.tiling.iter().map(|ti| ti.row_tiles).sum();
    let conversions: f64 = l
        .tiling
        .iter()
        .zip(&l.sub_matrices)
        .map(|(ti, s)| (ti.row_tiles * s.cols) as f64)
        .sum();
    let out_cols = l.sub_matrices.first().map_or(0, |s| s.cols) as f64;
    let merge_depth = (partials as f64).log2().ceil().max(0.0);
    let route = tiles.sqrt();
    let p = &t.peripheral;
    let acc = &t.accumulation;

    let latency = Breakdown {
        array: passes * dev.read_latency_s,
        adc: passes * t.adc.latency_s.at(adc_bits) * mux,
        accumulation: passes * acc.latency_s + positions * merge_depth * acc.latency_s,
        peripheral: passes * (p.buffer.latency_s + p.control.latency_s + p.routing.latency_s * route),
    };
    let energy = Breakdown {
        array: passes * (active_cells * dev.read_energy_j + total_cells * dev.leak_energy_j) * v2,
        adc: passes * conversions * t.adc.energy_j.at(adc_bits),
        accumulation: (passes * conversions + positions * out_cols * (partials as f64 - 1.0)) * acc.energy_j,
        peripheral: passes
            * (tiles * n_rows * p.driver.energy_j * v2
                + tiles * p.control.energy_j
                + conversions * (p.buffer.energy_j + p.routing.energy_j * route)),
    };
    let adcs = tiles * lcols as f64 / mux;
    let area = Breakdown {
        array: total_cells * dev.cell_area_f2 * f2,
        adc: adcs * t.adc.area_f2_per_level * (1u64 << adc_bits) as f64 * f2,
        accumulation: adcs * acc.area_f2 * f2,
        peripheral: tiles
            * (n_rows * p.driver.area_f2
                + spec.cols as f64 * p.buffer.area_f2
                + p.control.area_f2
                + p.routing.area_f2 * route)
            * f2,
    };
    LayerCost {
        name: l.name.clone(),
        latency_s: latency,
        energy_j: energy,
        area_m2: area,
    }
}

/// Cost of running `workload` on `arch` mapped to `spec` arrays.
pub fn estimate(arch: &Architecture, spec: &CrossbarSpec, tables: &CostTables, workload: &Workload) -> Result<CostReport> {
    tables.validate()?;
    if spec.adc_bypassed() {
        return Err(Error::Config("cost estimates need a real ADC resolution (adc_bits >= 1)".into()));
    }
    if workload.act_bits == 0 {
        return Err(Error::Config("workload act_bits must be >= 1".into()));
    }
    let mapping = map_architecture(arch, spec)?;
    let dev = tables.device(spec.device_type)?;
    let slices = dac_slices(workload.act_bits, spec.dac_bits);
    let layers: Vec<LayerCost> = mapping
        .layers
        .iter()
        .map(|l| layer_cost(l, spec, tables, dev, slices))
        .collect();
    let n = workload.inferences as f64;
    let (mut lat, mut en, mut area) = (Breakdown::default(), Breakdown::default(), Breakdown::default());
    for l in &layers {
        lat.add(&l.latency_s);
        en.add(&l.energy_j);
        area.add(&l.area_m2);
    }
    Ok(CostReport {
        network: arch.name.clone(),
        crossbar: *spec,
        workload: *workload,
        tables_label: tables.label.clone(),
        latency_s: Metric::new(lat.scale(n)),
        energy_j: Metric::new(en.scale(n)),
        area_m2: Metric::new(area),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub adc_bits: u32,
    pub latency: f64,
    pub area: f64,
    pub energy: f64,
    pub latency_s: f64,
    pub area_m2: f64,
    pub energy_j: f64,
}

/// Costs at each ADC resolution, normalized to the 3-bit converter.
pub fn sweep_adc_bits(
    arch: &Architecture,
    spec: &CrossbarSpec,
    tables: &CostTables,
    workload: &Workload,
    bits: &[u32],
) -> Result<Vec<SweepRow>> {
    if bits.is_empty() {
        return Err(Error::Config("ADC sweep needs at least one bitwidth".into()));
    }
    if !bits.contains(&3) {
        return Err(Error::Config(
            "ADC sweep is normalized to 3-bit converters, so 3 must be among the bitwidths".into(),
        ));
    }
    let run = |b: u32| estimate(arch, &CrossbarSpec { adc_bits: b, ..*spec }, tables, workload);
    let base = run(3)?;
    let ratio = |x: f64, y: f64| if y == 0.0 { 1.0 } else { x / y };
    bits.iter()
        .map(|&b| {
            let r = run(b)?;
            Ok(SweepRow {
                adc_bits: b,
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

pub const SWEEP_CSV_HEADER: &str = "adc_bits,latency_norm,area_norm,energy_norm,latency_s,area_m2,energy_j";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:e},{:e},{:e}",
            r.adc_bits, r.latency, r.area, r.energy, r.latency_s, r.area_m2, r.energy_j
        );
    }
    out
}

/// Total energy for each device preset under the same geometry.
pub fn device_compare(
    arch: &Architecture,
    spec: &CrossbarSpec,
    tables: &CostTables,
    workload: &Workload,
) -> Result<Vec<(DeviceType, f64)>> {
    DeviceType::ALL
        .iter()
        .map(|&d| {
            tables.device(d)?;
            let r = estimate(arch, &CrossbarSpec { device_type: d, ..*spec }, tables, workload)?;
            Ok((d, r.energy_j.total))
        })
        .collect()
}
