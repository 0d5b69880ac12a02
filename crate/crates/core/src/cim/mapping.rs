use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Architecture, WeightLayerInfo, WeightShape};

use super::CrossbarSpec;

/// One 2-D weight block that is mapped onto its own set of arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubMatrix {
    /// Logical rows (inputs).
    pub rows: usize,
    /// Logical columns (outputs).
    pub cols: usize,
    /// Kernel position `(kh, kw)`; `(0, 0)` for linear layers.
    pub position: (usize, usize),
}

/// Split a weight layer into crossbar sub-matrices: one `I×O` block per
/// kernel position for convolutions, a single `F×G` block for linear layers.
pub fn partition_layer(shape: &WeightShape) -> Vec<SubMatrix> {
    match *shape {
        WeightShape::Conv {
            out_ch,
            in_ch,
            kernel,
        } => (0..kernel * kernel)
            .map(|p| SubMatrix {
                rows: in_ch,
                cols: out_ch,
                position: (p / kernel, p % kernel),
            })
            .collect(),
        WeightShape::Linear {
            in_features,
            out_features,
        } => vec![SubMatrix {
            rows: in_features,
            cols: out_features,
            position: (0, 0),
        }],
    }
}

/// Tiling of an `R×C` block of physical cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileInfo {
    pub row_tiles: usize,
    pub col_tiles: usize,
    pub tiles: usize,
    pub used_cells: usize,
    pub total_cells: usize,
    pub utilization: f64,
}

/// Cover an `r×c` cell block with whole arrays. Distinct blocks never share an array.
pub fn tile_submatrix(r: usize, c: usize, spec: &CrossbarSpec) -> TileInfo {
    let row_tiles = r.div_ceil(spec.rows);
    let col_tiles = c.div_ceil(spec.cols);
    let tiles = row_tiles * col_tiles;
    let total_cells = tiles * spec.rows * spec.cols;
    let used_cells = r * c;
    TileInfo {
        row_tiles,
        col_tiles,
        tiles,
        used_cells,
        total_cells,
        utilization: used_cells as f64 / total_cells as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedLayer {
    pub name: String,
    pub shape: WeightShape,
    pub sub_matrices: Vec<SubMatrix>,
    /// Tiling of each sub-matrix after doubling its columns for differential pairs.
    pub tiling: Vec<TileInfo>,
    pub tiles: usize,
    pub used_cells: usize,
    pub total_cells: usize,
    pub utilization: f64,
    /// Output positions per inference.
    pub positions: usize,
}

impl MappedLayer {
    pub fn new(info: &WeightLayerInfo, spec: &CrossbarSpec) -> Self {
        let sub_matrices = partition_layer(&info.shape);
        let tiling: Vec<TileInfo> = sub_matrices
            .iter()
            .map(|s| tile_submatrix(s.rows, 2 * s.cols, spec))
            .collect();
        let tiles = tiling.iter().map(|t| t.tiles).sum();
        let used_cells = tiling.iter().map(|t| t.used_cells).sum();
        let total_cells = tiling.iter().map(|t| t.total_cells).sum();
        Self {
            name: info.name.clone(),
            shape: info.shape,
            sub_matrices,
            tiling,
            tiles,
            used_cells,
            total_cells,
            utilization: used_cells as f64 / total_cells as f64,
            positions: info.positions(),
        }
    }

    pub fn unused_fraction(&self) -> f64 {
        1.0 - self.utilization
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingTotals {
    pub layers: usize,
    pub tiles: usize,
    pub used_cells: usize,
    pub total_cells: usize,
    pub utilization: f64,
    pub unused_fraction: f64,
}

/// Per-layer tiling of a whole network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingReport {
    pub network: String,
    pub crossbar: CrossbarSpec,
    pub layers: Vec<MappedLayer>,
    pub totals: MappingTotals,
}

/// Map every weight layer of `arch` onto `spec`-sized arrays.
pub fn map_architecture(arch: &Architecture, spec: &CrossbarSpec) -> Result<MappingReport> {
    spec.validate()?;
    let layers: Vec<MappedLayer> = arch
        .weight_layers()?
        .iter()
        .map(|l| MappedLayer::new(l, spec))
        .collect();
    let tiles = layers.iter().map(|l| l.tiles).sum();
    let used_cells = layers.iter().map(|l| l.used_cells).sum();
    let total_cells: usize = layers.iter().map(|l| l.total_cells).sum();
    let utilization = if total_cells == 0 {
        0.0
    } else {
        used_cells as f64 / total_cells as f64
    };
    Ok(MappingReport {
        network: arch.name.clone(),
        crossbar: *spec,
        totals: MappingTotals {
            layers: layers.len(),
            tiles,
            used_cells,
            total_cells,
            utilization,
            unused_fraction: if total_cells == 0 { 0.0 } else { 1.0 - utilization },
        },
        layers,
    })
}

/// Conductances of the two cells encoding one signed weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConductancePair {
    pub g_pos: f64,
    pub g_neg: f64,
}

impl ConductancePair {
    pub fn differential(&self) -> f64 {
        self.g_pos - self.g_neg
    }
}

/// Linear weight-to-conductance map with scale `s_w` and `η_w = 1`, offset by `g_min`.
pub fn map_weight(w: f64, s_w: f64, spec: &CrossbarSpec) -> ConductancePair {
    let g = (w.abs() / s_w).min(1.0) * spec.g_span();
    if w > 0.0 {
        ConductancePair {
            g_pos: spec.g_min + g,
            g_neg: spec.g_min,
        }
    } else {
        ConductancePair {
            g_pos: spec.g_min,
            g_neg: spec.g_min + g,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConductanceMap {
    /// `max |w|` over the layer.
    pub s_w: f64,
    pub pairs: Vec<ConductancePair>,
}

/// Map a whole layer with `S_w = max |w|`.
pub fn map_weights(w: &[f64], spec: &CrossbarSpec) -> Result<ConductanceMap> {
    let s_w = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !s_w.is_finite() {
        return Err(Error::NonFinite("weights passed to the conductance map".into()));
    }
    if s_w == 0.0 {
        return Err(Error::Mapping(
            "all weights are zero, so the scale S_w = max|w| is 0 and the conductance mapping is undefined".into(),
        ));
    }
    Ok(ConductanceMap {
        s_w,
        pairs: w.iter().map(|&v| map_weight(v, s_w, spec)).collect(),
    })
}
