//! `BWMA` | version (1 byte) | header length (u32 LE) | JSON header |
//! f32 LE tensor payloads in header order | CRC32 of the payloads (u32 LE).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActSite, Architecture, Model, QuantConfig};
use crate::quant::{binarize_levels, SteParams};
use crate::tensor::Tensor;

use super::RunConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BWMA";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Binarization state of one layer at save time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelsEntry {
    pub layer: String,
    pub c: f64,
    pub r: f64,
    pub threshold: f64,
    pub t: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Architecture,
    pub quant: QuantConfig,
    pub tensors: Vec<TensorEntry>,
    pub act_sites: Vec<ActSite>,
    pub binary_levels: Vec<LevelsEntry>,
    pub ste: SteParams,
    pub config: Option<RunConfig>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

/// Write `model` with the STE parameters it was last trained with.
pub fn save_checkpoint(path: &Path, model: &Model, ste: SteParams, config: Option<&RunConfig>) -> Result<()> {
    let mut binary_levels = Vec::new();
    for layer in model.arch.weight_layers()? {
        if model.is_binarized(&layer.name) {
            let w = model
                .param(&format!("{}.weight", layer.name))
                .ok_or_else(|| corrupt(format!("missing weight of {}", layer.name)))?;
            let l = binarize_levels(w)?;
            binary_levels.push(LevelsEntry {
                layer: layer.name.clone(),
                c: l.c,
                r: l.r,
                threshold: l.threshold,
                t: ste.t,
                alpha: ste.alpha,
            });
        }
    }
    let header = CheckpointHeader {
        arch: model.arch.clone(),
        quant: model.quant,
        tensors: model
            .params()
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        act_sites: model.sites.clone(),
        binary_levels,
        ste,
        config: config.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    for (_, t) in model.params() {
        for v in t.to_f32_vec() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(13 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "format version {} is not supported (expected {CHECKPOINT_VERSION})",
            bytes[4]
        )));
    }
    let hlen = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let hend = 9 + hlen;
    let header_bytes = bytes.get(9..hend).ok_or_else(|| corrupt("header extends past end of file"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("corrupt header: {e}")))?;
    let numel: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let pend = hend + 4 * numel;
    if bytes.len() != pend + 4 {
        return Err(corrupt(format!(
            "expected {} bytes for {} tensors, file has {}",
            pend + 4,
            header.tensors.len(),
            bytes.len()
        )));
    }
    let payload = &bytes[hend..pend];
    let stored = u32::from_le_bytes([bytes[pend], bytes[pend + 1], bytes[pend + 2], bytes[pend + 3]]);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut params = Vec::with_capacity(header.tensors.len());
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        params.push((entry.name.clone(), Tensor::from_f32(&entry.shape, &data)?));
    }
    let model = Model::from_parts(header.arch.clone(), header.quant, params, header.act_sites.clone())?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = Model::new(Architecture::builtin("mnist-tiny").unwrap(), QuantConfig::bwma(4), &mut rng).unwrap();
        for t in m.params_mut() {
            for v in t.data_mut() {
                *v += 0.013;
            }
        }
        m.post_update();
        m.sites[0].state.a_max = 1.2345678901234567;
        m.sites[1].initialized = true;
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&p, &m, SteParams::new(3.5, 1.0).unwrap(), Some(&RunConfig::default())).unwrap();
        let (back, header) = load_checkpoint(&p).unwrap();
        for ((n1, a), (n2, b)) in m.params().iter().zip(back.params()) {
            assert_eq!(n1, n2);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(m.sites, back.sites);
        assert_eq!(header.ste.t, 3.5);
        let names: Vec<_> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        let want: Vec<_> = m.params().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, want);
        assert_eq!(header.binary_levels.len(), 1);
        assert_eq!(header.binary_levels[0].layer, "conv2");
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &model(), SteParams::default(), None).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut b = good.clone();
        let last = b.len() - 10;
        b[last] ^= 0x01;
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checksum { .. })));

        let mut b = good.clone();
        b[4] = 9;
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(m)) if m.contains("version")));

        let mut b = good.clone();
        b[12] = b'#';
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(m)) if m.contains("header")));

        std::fs::write(&p, &good[..good.len() - 1]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
