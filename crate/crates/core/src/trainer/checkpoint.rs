//! Binary checkpoint:
//!
//! ```text
//! "RAPC" u32 version
//! u32 count, records            parameters and batch-norm buffers
//! u64 step, u32 count, records  Adam first moments, then count more records of second moments
//! u32 count, (seed[32], u64 stream, u128 word_pos)*  rng states
//! u32 len, utf-8                effective config
//! u32 len, utf-8                key=value run metadata
//! ```
//!
//! A record is `u32 name_len, name, u32 rank, u32 extents[rank], f32 LE payload`.
//! All integers are little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rap_autodiff::Tensor;

use crate::config::RunConfig;
use crate::error::{io_err, RapError, Result};
use crate::model::RapModel;
use crate::trainer::adam::{Adam, AdamConfig};

const MAGIC: &[u8; 4] = b"RAPC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam_step: u64,
    pub adam_m: Vec<(String, Tensor<f32>)>,
    pub adam_v: Vec<(String, Tensor<f32>)>,
    pub rngs: Vec<RngState>,
    pub config: String,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn capture(
        model: &RapModel,
        adam: Option<&Adam>,
        rngs: &[&ChaCha8Rng],
        config: &RunConfig,
        meta: Vec<(String, String)>,
    ) -> Self {
        let params = model
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        if let Some(a) = adam {
            for (i, e) in model.params.entries().iter().enumerate() {
                if e.trainable {
                    adam_m.push((e.name.clone(), a.m[i].clone()));
                    adam_v.push((e.name.clone(), a.v[i].clone()));
                }
            }
        }
        Self {
            params,
            adam_step: adam.map_or(0, |a| a.step),
            adam_m,
            adam_v,
            rngs: rngs.iter().map(|r| RngState::capture(r)).collect(),
            config: config.to_string(),
            meta,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        self.config.parse()
    }

    /// Rebuilds the model described by the config echo and fills in every
    /// stored tensor.
    pub fn model(&self) -> Result<RapModel> {
        let cfg = self.run_config()?;
        let classes = self
            .params
            .iter()
            .find(|(n, _)| n == "head.weight")
            .map(|(_, t)| t.shape()[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = RapModel::new(&cfg.backbone, &cfg.policy, classes, &mut rng)?;
        if model.params.len() != self.params.len() {
            return Err(RapError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| RapError::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(RapError::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    /// Optimizer state aligned with `model`'s parameter store.
    pub fn adam(&self, model: &RapModel, cfg: AdamConfig) -> Result<Adam> {
        let mut adam = Adam::new(cfg, &model.params);
        adam.step = self.adam_step;
        for (moments, slots) in [(&self.adam_m, &mut adam.m), (&self.adam_v, &mut adam.v)] {
            for (name, t) in moments {
                let id = model
                    .params
                    .find(name)
                    .ok_or_else(|| RapError::Checkpoint(format!("moment for unknown tensor `{name}`")))?;
                if slots[id.index()].shape() != t.shape() {
                    return Err(RapError::Checkpoint(format!("moment `{name}` has the wrong shape")));
                }
                slots[id.index()] = t.clone();
            }
        }
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_records(&mut out, &self.params);
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        put_records(&mut out, &self.adam_m);
        for (name, t) in &self.adam_v {
            put_record(&mut out, name, t);
        }
        put_u32(&mut out, self.rngs.len() as u32);
        for r in &self.rngs {
            out.extend_from_slice(&r.seed);
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        put_str(&mut out, &self.config);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut out, &meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(RapError::Checkpoint("bad magic (not a RAPC file)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(RapError::Checkpoint(format!("unsupported version {version}")));
        }
        let params = r.records()?;
        let adam_step = r.u64()?;
        let adam_m = r.records()?;
        let adam_v = (0..adam_m.len()).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            rngs.push(RngState { seed, stream, word_pos });
        }
        let config = r.string()?;
        let meta = r
            .string()?
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        if r.pos != bytes.len() {
            return Err(RapError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            params,
            adam_step,
            adam_m,
            adam_v,
            rngs,
            config,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_str(out, name);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_records(out: &mut Vec<u8>, records: &[(String, Tensor<f32>)]) {
    put_u32(out, records.len() as u32);
    for (name, t) in records {
        put_record(out, name, t);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| RapError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| RapError::Checkpoint("string is not UTF-8".into()))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| RapError::Checkpoint(format!("`{name}` extents overflow")))?;
        let raw = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| RapError::Checkpoint("payload overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn records(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.record()).collect()
    }
}
