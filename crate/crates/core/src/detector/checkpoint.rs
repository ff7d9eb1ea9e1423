//! Single-file model checkpoint: magic, little-endian manifest length, JSON
//! manifest, then every parameter as raw little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DetectorConfig, STRIDE};
use super::model::DetectorModel;
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"FADACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    stride: usize,
    num_classes: usize,
    anchor_scales: Vec<f64>,
    anchor_ratios: Vec<f64>,
    config: DetectorConfig,
    params: Vec<(String, Vec<usize>)>,
}

pub fn write_checkpoint(model: &DetectorModel, w: &mut impl Write) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stride: STRIDE,
        num_classes: model.config.num_classes,
        anchor_scales: model.config.anchor_scales.clone(),
        anchor_ratios: model.config.anchor_ratios.clone(),
        config: model.config.clone(),
        params: model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(n, t)| (n.clone(), t.shape.clone()))
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(model.params.num_values() * 8);
    for t in model.params.tensors() {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<DetectorModel> {
    let io = |e| Error::Checkpoint(format!("read failed: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.stride != STRIDE {
        return Err(Error::Checkpoint(format!("stride {} differs from {STRIDE}", manifest.stride)));
    }
    let mut params = ParamSet::new();
    for (name, shape) in manifest.params {
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(io)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(name, Tensor::new(shape, data));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    DetectorModel::from_parts(manifest.config, params)
}

pub fn save(model: &DetectorModel, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_checkpoint(model, &mut f)?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DetectorModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = DetectorModel::new(DetectorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(9));
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params.checksum(), model.params.checksum());
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_files_rejected() {
        let model = DetectorModel::new(DetectorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(9));
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert!(read_checkpoint(&mut &buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&mut extra.as_slice()).is_err());
        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
