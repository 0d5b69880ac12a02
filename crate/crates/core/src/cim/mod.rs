//! Crossbar mapping, tiling and mixed-signal simulation.

mod mapping;
mod signal;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mapping::{
    map_architecture, map_weight, map_weights, partition_layer, tile_submatrix, ConductanceMap, ConductancePair,
    MappedLayer, MappingReport, MappingTotals, SubMatrix, TileInfo,
};
pub use signal::{adc_decode, adc_quantize, analog_mvm, dac_decode, dac_encode, dac_slices, Tile};
pub use sim::{simulate_network, CimBackend, NoiseConfig, SimResult, SimStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceType {
    Sram,
    Rram,
    Fefet,
}

impl DeviceType {
    pub const ALL: [DeviceType; 3] = [DeviceType::Sram, DeviceType::Rram, DeviceType::Fefet];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceType::Sram => "sram",
            DeviceType::Rram => "rram",
            DeviceType::Fefet => "fefet",
        }
    }
}

impl fmt::Display for DeviceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sram" => Ok(DeviceType::Sram),
            "rram" => Ok(DeviceType::Rram),
            "fefet" => Ok(DeviceType::Fefet),
            _ => Err(Error::Config(format!("unknown device {s:?}; expected sram, rram or fefet"))),
        }
    }
}

/// Array geometry, conductance range and converter resolutions.
///
/// `cols` counts physical columns. Every signed weight occupies a
/// differential pair of adjacent columns, so an array holds `cols / 2`
/// logical output columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossbarSpec {
    pub rows: usize,
    pub cols: usize,
    /// Siemens.
    pub g_min: f64,
    pub g_max: f64,
    pub cell_bits: u32,
    pub dac_bits: u32,
    /// [`CrossbarSpec::ADC_BYPASS`] reads column values without quantization.
    pub adc_bits: u32,
    pub device_type: DeviceType,
}

impl Default for CrossbarSpec {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            g_min: 1e-6,
            g_max: 1.01e-4,
            cell_bits: 1,
            dac_bits: 1,
            adc_bits: 4,
            device_type: DeviceType::Rram,
        }
    }
}

impl CrossbarSpec {
    pub const ADC_BYPASS: u32 = 0;
    pub const MAX_CONVERTER_BITS: u32 = 16;

    pub fn with_size(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols < 2 || !self.cols.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "crossbar {}x{} must have at least one row and an even, nonzero column count",
                self.rows, self.cols
            )));
        }
        if !(self.g_min > 0.0 && self.g_max > self.g_min && self.g_max.is_finite()) {
            return Err(Error::Config(format!(
                "conductance range [{}, {}] must satisfy 0 < g_min < g_max",
                self.g_min, self.g_max
            )));
        }
        if self.cell_bits != 1 {
            return Err(Error::Config(format!("cells store 1 bit, got cell_bits = {}", self.cell_bits)));
        }
        if self.dac_bits == 0 || self.dac_bits > Self::MAX_CONVERTER_BITS {
            return Err(Error::Config(format!("dac_bits must be in 1..=16, got {}", self.dac_bits)));
        }
        if self.adc_bits > Self::MAX_CONVERTER_BITS {
            return Err(Error::Config(format!(
                "adc_bits must be in 1..=16 or 0 for bypass, got {}",
                self.adc_bits
            )));
        }
        Ok(())
    }

    pub fn adc_bypassed(&self) -> bool {
        self.adc_bits == Self::ADC_BYPASS
    }

    /// Weight columns per array.
    pub fn logical_cols(&self) -> usize {
        self.cols / 2
    }

    pub fn g_span(&self) -> f64 {
        self.g_max - self.g_min
    }

    /// Parse `RxC`, e.g. `64x64`.
    pub fn parse_size(s: &str) -> Result<(usize, usize)> {
        let bad = || Error::Config(format!("crossbar size {s:?} is not of the form RxC"));
        let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let r = r.trim().parse().map_err(|_| bad())?;
        let c = c.trim().parse().map_err(|_| bad())?;
        Ok((r, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(CrossbarSpec::parse_size("64x32").unwrap(), (64, 32));
        assert!(CrossbarSpec::parse_size("64").is_err());
        assert!(CrossbarSpec::parse_size("ax2").is_err());
    }

    #[test]
    fn validation() {
        assert!(CrossbarSpec::default().validate().is_ok());
        assert!(CrossbarSpec::with_size(32, 31).validate().is_err());
        let s = CrossbarSpec { cell_bits: 2, ..Default::default() };
        assert!(s.validate().is_err());
        let s = CrossbarSpec { g_min: 0.0, ..Default::default() };
        assert!(s.validate().is_err());
        assert_eq!("FeFET".parse::<DeviceType>().unwrap(), DeviceType::Fefet);
    }
}
