//! Checkpoint files.
//!
//! ```text
//! "HIRLCKPT" | version: u32 | config_len: u32 | config text (key=value)
//! | input_dim: u32 | epoch: u64 | step: u64 | tensor_count: u32
//! | per tensor: rank: u32 | dims: rank x u32 | payload f64
//! ```
//!
//! Little-endian throughout. Tensors are the parameters, then the
//! normalization buffers, then the velocity buffers, each in declaration
//! order. Payloads are 64-bit so a round trip is bit-exact.

use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use super::TrainState;
use crate::config::TrainConfig;
use crate::data_io::{atomic_write, ByteReader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HIRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &ArrayViewD<f64>) {
    put_u32(out, t.ndim());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut ByteReader, mut dst: ArrayViewMutD<f64>) -> Result<()> {
    let rank = r.u32()? as usize;
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if dims != dst.shape() {
        return Err(Error::Format(format!(
            "checkpoint tensor has shape {dims:?}, model expects {:?}",
            dst.shape()
        )));
    }
    for v in dst.iter_mut() {
        *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    }
    Ok(())
}

impl TrainState {
    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.input_dim());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let params = self.params();
        let buffers = self.buffers();
        put_u32(&mut out, params.len() + buffers.len() + self.velocity.len());
        for t in params.iter().chain(&buffers) {
            put_tensor(&mut out, t);
        }
        for v in &self.velocity {
            put_tensor(&mut out, &v.view());
        }
        out
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Format("config snapshot is not UTF-8".into()))?;
        let config = TrainConfig::parse(cfg_text)?;
        let input_dim = r.u32()? as usize;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let mut state = TrainState::new(&config, input_dim)?;
        state.epoch = epoch;
        state.step = step;

        let count = r.u32()? as usize;
        let expected = state.params().len() + state.buffers().len() + state.velocity.len();
        if count != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, model expects {expected}"
            )));
        }
        for t in state.params_mut() {
            read_tensor(&mut r, t)?;
        }
        for t in state.buffers_mut() {
            read_tensor(&mut r, t)?;
        }
        for v in state.velocity.iter_mut() {
            read_tensor(&mut r, v.view_mut())?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_checkpoint(&std::fs::read(path)?)
    }
}

/// Owned copies of every tensor in checkpoint order.
pub fn snapshot(state: &TrainState) -> Vec<ArrayD<f64>> {
    state
        .params()
        .iter()
        .chain(state.buffers().iter())
        .map(|t| t.to_owned())
        .chain(state.velocity.iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sgd_step, Gradients, Mode};
    use ndarray::Array2;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = TrainConfig {
            encoder_hidden: 5,
            rep_dim: 3,
            head_hidden: 4,
            level_sizes: vec![4, 2],
            seed: 17,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&cfg, 6).unwrap();
        // exercise running stats and velocity so they are non-trivial
        let z = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.4);
        state.heads[0].forward(z.view(), Mode::Train).unwrap();
        let g = Gradients(
            state
                .params()
                .iter()
                .map(|p| Some(ArrayD::from_elem(p.shape(), 0.01)))
                .collect(),
        );
        sgd_step(&mut state, &g, 0.1, 0.9, 1e-4).unwrap();
        state.epoch = 3;
        state.step = 41;
        state.clear_caches();

        let bytes = state.encode_checkpoint();
        let back = TrainState::decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, state);
        let bits = |s: &TrainState| -> Vec<u64> {
            snapshot(s)
                .iter()
                .flat_map(|t| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(bits(&back), bits(&state));
        assert_eq!(back.encode_checkpoint(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let state = TrainState::new(&TrainConfig::default(), 4).unwrap();
        let bytes = state.encode_checkpoint();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TrainState::decode_checkpoint(&bad),
            Err(Error::Format(_))
        ));
        assert!(TrainState::decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
