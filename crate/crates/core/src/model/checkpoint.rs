//! Self-describing checkpoint container.
//!
//! On-disk format: magic + version, a JSON header (network config, epoch,
//! validation Dice, training stamp), then raw little-endian f32 blobs for
//! every parameter tensor (value and both optimizer moment buffers) and
//! every normalization running-statistics buffer. Round-trips are lossless:
//! tensors are restored bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::PipelineParams;

use super::{UNet, UNetConfig};

const MAGIC: &[u8; 8] = b"BSEGCKPT";
const VERSION: u32 = 1;

/// Provenance of a training run, enough to reproduce it and to preprocess
/// inputs identically at inference time. The RNG state is (seed, epoch):
/// every stream is derived from those.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainStamp {
    pub seed: u64,
    pub loss_name: String,
    pub pipeline: PipelineParams,
}

impl Default for TrainStamp {
    fn default() -> Self {
        TrainStamp {
            seed: 0,
            loss_name: "BW-CE".to_string(),
            pipeline: PipelineParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    epoch: usize,
    val_dice: f64,
    stamp: TrainStamp,
    tensors: Vec<TensorInfo>,
    buffers: Vec<BufferInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BufferInfo {
    name: String,
    len: usize,
}

/// A trained parameter snapshot with its selection score and optimizer
/// state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub epoch: usize,
    pub val_dice: f64,
    pub stamp: TrainStamp,
    tensors: Vec<(TensorInfo, Vec<f32>, Vec<f32>, Vec<f32>)>,
    buffers: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    /// Snapshot the network's parameters, optimizer moments, and
    /// normalization statistics.
    pub fn capture(net: &mut UNet, epoch: usize, val_dice: f64, stamp: TrainStamp) -> Checkpoint {
        let mut tensors = Vec::new();
        net.visit_params(&mut |p| {
            tensors.push((
                TensorInfo {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                },
                p.value.iter().copied().collect(),
                p.moment1.iter().copied().collect(),
                p.moment2.iter().copied().collect(),
            ));
        });
        let mut buffers = Vec::new();
        net.visit_buffers(&mut |name, v| buffers.push((name, v.clone())));
        Checkpoint {
            config: net.config,
            epoch,
            val_dice,
            stamp,
            tensors,
            buffers,
        }
    }

    /// Rebuild the network from this snapshot.
    pub fn restore(&self) -> Result<UNet> {
        let mut net = UNet::new(self.config, self.stamp.seed)?;
        let mut idx = 0usize;
        let tensors = &self.tensors;
        let mut mismatch: Option<String> = None;
        net.visit_params(&mut |p| {
            if mismatch.is_some() {
                return;
            }
            let Some((info, v, m1, m2)) = tensors.get(idx) else {
                mismatch = Some("checkpoint has fewer tensors than the network".to_string());
                return;
            };
            if info.name != p.name || info.shape != p.value.shape() {
                mismatch = Some(format!(
                    "tensor {idx} mismatch: checkpoint {} {:?} vs network {} {:?}",
                    info.name,
                    info.shape,
                    p.name,
                    p.value.shape()
                ));
                return;
            }
            p.value.as_slice_mut().unwrap().copy_from_slice(v);
            p.moment1.as_slice_mut().unwrap().copy_from_slice(m1);
            p.moment2.as_slice_mut().unwrap().copy_from_slice(m2);
            idx += 1;
        });
        if let Some(m) = mismatch {
            return Err(Error::Config(m));
        }
        if idx != tensors.len() {
            return Err(Error::Config(
                "checkpoint has more tensors than the network".to_string(),
            ));
        }
        let mut bidx = 0usize;
        let buffers = &self.buffers;
        let mut buf_err: Option<String> = None;
        net.visit_buffers(&mut |name, v| {
            if buf_err.is_some() {
                return;
            }
            let Some((bname, data)) = buffers.get(bidx) else {
                buf_err = Some("checkpoint has fewer buffers than the network".to_string());
                return;
            };
            if *bname != name || data.len() != v.len() {
                buf_err = Some(format!("buffer {bidx} mismatch: {bname} vs {name}"));
                return;
            }
            v.copy_from_slice(data);
            bidx += 1;
        });
        if let Some(m) = buf_err {
            return Err(Error::Config(m));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            config: self.config,
            epoch: self.epoch,
            val_dice: self.val_dice,
            stamp: self.stamp.clone(),
            tensors: self.tensors.iter().map(|(i, ..)| i.clone()).collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, v)| BufferInfo {
                    name: n.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("header encode: {e}"),
        })?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&header_json).map_err(io_err)?;
        let write_f32s = |vals: &[f32], w: &mut std::io::BufWriter<std::fs::File>| {
            let mut bytes = Vec::with_capacity(vals.len() * 4);
            for v in vals {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)
        };
        for (_, v, m1, m2) in &self.tensors {
            write_f32s(v, &mut w).map_err(io_err)?;
            write_f32s(m1, &mut w).map_err(io_err)?;
            write_f32s(m2, &mut w).map_err(io_err)?;
        }
        for (_, v) in &self.buffers {
            write_f32s(v, &mut w).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let ck_err = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(ck_err("bad magic; not a checkpoint file".to_string()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(ck_err(format!("unsupported checkpoint version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(u64buf) as usize;
        if header_len > 64 * 1024 * 1024 {
            return Err(ck_err(format!("implausible header length {header_len}")));
        }
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json)
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| ck_err(format!("header decode: {e}")))?;
        let read_f32s = |n: usize, r: &mut std::io::BufReader<std::fs::File>| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| ck_err("truncated tensor data".to_string()))?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let n: usize = info.shape.iter().product();
            let v = read_f32s(n, &mut r)?;
            let m1 = read_f32s(n, &mut r)?;
            let m2 = read_f32s(n, &mut r)?;
            tensors.push((info.clone(), v, m1, m2));
        }
        let mut buffers = Vec::with_capacity(header.buffers.len());
        for info in &header.buffers {
            let v = read_f32s(info.len, &mut r)?;
            buffers.push((info.name.clone(), v));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            val_dice: header.val_dice,
            stamp: header.stamp,
            tensors,
            buffers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OutMode;
    use ndarray::Array5;
    use rand::Rng;

    #[test]
    fn checkpoint_round_trip_preserves_network() {
        let cfg = UNetConfig {
            levels: 2,
            base_width: 2,
            in_channels: 1,
            out_mode: OutMode::TwoClassSoftmax,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        let mut net = UNet::new(cfg, 77).unwrap();
        // run a training-mode forward so running stats move off init
        let mut rng = crate::rng::stream(78, "ckpt-test", &[]);
        let x = Array5::from_shape_fn((2, 1, 8, 8, 8), |_| rng.random_range(-1.0f32..1.0));
        let _ = net.forward_train(x.clone()).unwrap();

        let stamp = TrainStamp {
            seed: 123,
            loss_name: "BW-CE".to_string(),
            pipeline: Default::default(),
        };
        let ckpt = Checkpoint::capture(&mut net, 42, 87.5, stamp.clone());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 42);
        assert_eq!(loaded.val_dice, 87.5);
        assert_eq!(loaded.stamp, stamp);

        let restored = loaded.restore().unwrap();
        let a = net.forward_eval(&x).unwrap();
        let b = restored.forward_eval(&x).unwrap();
        assert_eq!(a, b, "restored network must match bit-exactly");
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
