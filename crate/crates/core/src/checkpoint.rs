//! Single-file, self-describing checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "SVCK" u32 version  [32] architecture digest
//! u32 len, model config text    u32 len, train config text
//! u64 iteration  u8 phase  f64 beta
//! u64 rng key  u64 rng stream  u128 rng word position
//! u64 data seed start  u64 data seed end
//! u32 tensor count, then per tensor: u16 name len, name, u8 rank, u32 dims…, f32 values…
//! f64 lr, β1, β2, ε  u8 non-finite policy  u64 skipped steps
//! u32 slot count, then per slot: u16 name len, name, u64 step, u32 len, f32 m…, f32 v…
//! ```

use std::fs;
use std::ops::Range;
use std::path::Path;

use sv2p_autodiff::{AdamConfig, AdamState, Moments, NonFinitePolicy, ParamSet, Tensor};

use crate::config::{ModelConfig, RunConfig, TrainConfig};
use crate::error::{io_err, Error, Result};
use crate::model::param_shapes;
use crate::rng::StreamState;
use crate::trainer::Phase;

pub const MAGIC: &[u8; 4] = b"SVCK";
pub const VERSION: u32 = 1;

/// Position in the training schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseCursor {
    /// Next iteration to run.
    pub iteration: u64,
    /// Phase of the last completed iteration.
    pub phase: Phase,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    pub cursor: PhaseCursor,
    /// Training stream positioned at the next iteration.
    pub rng: StreamState,
    /// Seeds of the videos the model was trained on.
    pub data_seeds: Range<u64>,
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Fails unless `expected` describes the architecture stored here.
    pub fn check_architecture(&self, expected: &ModelConfig) -> Result<()> {
        let (have, want) = (self.model.digest(), expected.digest());
        if have != want {
            let diffs: Vec<String> = self
                .model
                .to_text()
                .lines()
                .zip(expected.to_text().lines())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("checkpoint `{a}` vs config `{b}`"))
                .collect();
            return Err(Error::Invalid(format!(
                "architecture mismatch (digest {} vs {}): {}",
                &hex(&have)[..12],
                &hex(&want)[..12],
                diffs.join("; ")
            )));
        }
        Ok(())
    }

    /// Training is complete when the cursor reached the end of the schedule.
    pub fn is_finished(&self) -> bool {
        self.cursor.iteration >= self.train.total_iterations()
    }

    /// Whether the model never left the prior-latent phase.
    pub fn is_deterministic(&self) -> bool {
        !self.train.naive && self.train.phase2 == 0 && self.train.phase3 == 0
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            ..RunConfig::default()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.0.extend_from_slice(&self.model.digest());
        w.text(&self.model.to_text());
        w.text(&self.train.to_text());
        w.u64(self.cursor.iteration);
        w.0.push(self.cursor.phase.id());
        w.f64(self.cursor.beta);
        w.u64(self.rng.key);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.data_seeds.start);
        w.u64(self.data_seeds.end);

        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.name(name);
            w.0.push(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }

        let c = &self.adam.config;
        for x in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
            w.f64(x);
        }
        w.0.push(match c.non_finite {
            NonFinitePolicy::Skip => 0,
            NonFinitePolicy::Reject => 1,
        });
        w.u64(self.adam.skipped_steps);
        w.u32(self.adam.slots.len() as u32);
        for (name, m) in &self.adam.slots {
            w.name(name);
            w.u64(m.step);
            w.u32(m.m.len() as u32);
            w.f32s(&m.m);
            w.f32s(&m.v);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let model = ModelConfig::from_text(&r.text()?)?;
        if model.digest() != digest {
            return Err(Error::Format(
                "checkpoint: architecture digest does not match the embedded model config".into(),
            ));
        }
        let train_text = r.text()?;
        let train = RunConfig::parse(&train_text)?.train;
        let iteration = r.u64()?;
        let phase = Phase::from_id(r.take(1)?[0])?;
        let beta = r.f64()?;
        let rng = StreamState {
            key: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
        };
        let data_seeds = r.u64()?..r.u64()?;

        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            params.insert(name, Tensor::new(shape, r.f32s(n)?)?);
        }
        let expected = param_shapes(&model);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint: {} tensors stored, the architecture has {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "checkpoint: `{name}` has shape {:?}, the architecture needs {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("checkpoint: missing tensor `{name}`"))),
            }
        }

        let config = AdamConfig {
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
            non_finite: match r.take(1)?[0] {
                0 => NonFinitePolicy::Skip,
                1 => NonFinitePolicy::Reject,
                p => return Err(Error::Format(format!("checkpoint: unknown non-finite policy {p}"))),
            },
        };
        let mut adam = AdamState::new(config);
        adam.skipped_steps = r.u64()?;
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let step = r.u64()?;
            let n = r.u32()? as usize;
            let m = r.f32s(n)?;
            let v = r.f32s(n)?;
            if params.get(&name).map(|t| t.numel()) != Some(n) {
                return Err(Error::Format(format!("checkpoint: optimizer slot `{name}` does not match a parameter")));
            }
            adam.slots.insert(name, Moments { m, v, step });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint: {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            train,
            params,
            adam,
            cursor: PhaseCursor { iteration, phase, beta },
            rng,
            data_seeds,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f32s(&mut self, xs: &[f32]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn name(&mut self, s: &str) {
        self.0.extend_from_slice(&(s.len() as u16).to_le_bytes());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint: truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("checkpoint: tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint: invalid UTF-8".into()))
    }
    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }
    fn name(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        self.utf8(n)
    }
}
