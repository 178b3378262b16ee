//! Versioned little-endian checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes  "CACPSCKP"
//! version      u32
//! config_len   u32, then config_len bytes of UTF-8 config text
//! epoch        u64
//! rng          32-byte seed, u64 stream, u128 word position
//! 2 × network  u32 tensor count, then per tensor:
//!                u32 ndim, ndim × u64 dims, prod(dims) × f64
//! 2 × optimizer u64 step, then per tensor: u64 len, len × f64 m, len × f64 v
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::segnet::{NetParams, NetworkPair};
use crate::tensor::Tensor;
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"CACPSCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub trainer: Trainer,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // every element needs 8 bytes, so anything larger is corrupt
        if n > (self.buf.len() / 8) as u64 {
            return Err(Error::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(config: &ExperimentConfig, trainer: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&trainer.epoch.to_le_bytes());
    let rng = &trainer.partner_rng;
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    for net in &trainer.pair.nets {
        out.extend_from_slice(&(net.tensors.len() as u32).to_le_bytes());
        for t in &net.tensors {
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
    }
    for opt in &trainer.optimizers {
        out.extend_from_slice(&opt.step.to_le_bytes());
        for (m, v) in opt.m.iter().zip(&opt.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let config_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = ExperimentConfig::parse(text)?;
    let epoch = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut partner_rng = ChaCha8Rng::from_seed(seed);
    partner_rng.set_stream(stream);
    partner_rng.set_word_pos(word_pos);

    let spec = config.net;
    let mut nets = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("tensor rank {ndim} is implausible")));
            }
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
            tensors.push(Tensor::new(shape, r.f64s(n)?)?);
        }
        let params = NetParams { tensors };
        params
            .check_layout(&spec)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match the config: {e}")))?;
        nets.push(params);
    }
    let mut optimizers = Vec::with_capacity(2);
    for net in &nets {
        let step = r.u64()?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in &net.tensors {
            let n = r.len()?;
            m.push(r.f64s(n)?);
            v.push(r.f64s(n)?);
        }
        let state = OptimizerState { step, m, v };
        state.check_against(&net.tensors)?;
        optimizers.push(state);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let [net1, net2]: [NetParams; 2] = nets.try_into().expect("two networks");
    let [opt1, opt2]: [OptimizerState; 2] = optimizers.try_into().expect("two optimizers");
    let trainer = Trainer {
        cfg: config.train,
        pair: NetworkPair {
            spec,
            nets: [net1, net2],
            seeds: (config.train.net1_seed, config.train.net2_seed),
        },
        optimizers: [opt1, opt2],
        epoch,
        partner_rng,
    };
    Ok(Checkpoint { config, trainer })
}

pub fn save(path: &Path, config: &ExperimentConfig, trainer: &Trainer) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(config, trainer))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::NetSpec;

    fn small() -> (ExperimentConfig, Trainer) {
        let mut cfg = ExperimentConfig::default();
        cfg.net = NetSpec {
            base_width: 2,
            depth: 1,
            ..NetSpec::default()
        };
        cfg.train.crop = 8;
        let mut t = Trainer::new(cfg.train, cfg.net).unwrap();
        t.epoch = 3;
        t.optimizers[0].step = 7;
        t.optimizers[1].m[0][0] = 0.25;
        (cfg, t)
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let (cfg, t) = small();
        let bytes = encode(&cfg, &t);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.trainer, t);
        assert_eq!(encode(&ck.config, &ck.trainer), bytes);
    }

    #[test]
    fn rng_position_survives() {
        use rand::Rng;
        let (cfg, mut t) = small();
        let _: u64 = t.partner_rng.random();
        let mut ck = decode(&encode(&cfg, &t)).unwrap();
        assert_eq!(t.partner_rng.random::<u64>(), ck.trainer.partner_rng.random::<u64>());
    }

    #[test]
    fn corrupt_files_are_refused() {
        let (cfg, t) = small();
        let bytes = encode(&cfg, &t);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
