//! Versioned binary checkpoints: model configuration, parameters,
//! optimizer moments, scheduler state, shuffle-RNG position, and the epoch
//! counter, in one little-endian container that round-trips bitwise.
//!
//! Layout: an 8-byte magic, a u32 format version, then six length-framed
//! sections in fixed order (`CFG `, `PAR `, `OPT `, `SCH `, `RNG `,
//! `EPO `). Every section must parse to exactly its framed length and the
//! file must end after the last one, so truncation and corruption are
//! detected rather than misread.

use super::optim::{Moments, OptimizerState, PlateauScheduler};
use super::TrainError;
use crate::nn::params::{Param, ParamId};
use crate::nn::{ClsMode, LocMode, Model, ModelConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPCKPT1\n";
pub const CHECKPOINT_VERSION: u32 = 1;

const SECTION_TAGS: [&[u8; 4]; 6] = [b"CFG ", b"PAR ", b"OPT ", b"SCH ", b"RNG ", b"EPO "];

/// Full state of the epoch-shuffle generator: the ChaCha seed, stream, and
/// word position. Restoring it continues the exact random sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue (or evaluate) a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub optimizer: OptimizerState,
    pub scheduler: PlateauScheduler,
    pub rng: RngState,
    /// Completed epochs (0 = freshly initialized).
    pub epoch: usize,
}

impl Checkpoint {
    /// Copies the live training state into a checkpoint.
    pub fn snapshot(
        model: &Model,
        optimizer: &OptimizerState,
        scheduler: &PlateauScheduler,
        rng: &ChaCha20Rng,
        epoch: usize,
    ) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.store().iter().map(|(_, p)| p.clone()).collect(),
            optimizer: optimizer.clone(),
            scheduler: scheduler.clone(),
            rng: RngState::capture(rng),
            epoch,
        }
    }

    /// Rebuilds the model this checkpoint describes, with its exact
    /// parameter values installed.
    pub fn build_model(&self) -> Result<Model, TrainError> {
        // The init seed is irrelevant: every value is overwritten below.
        let mut model = Model::new(self.config.clone(), 0)?;
        if model.store().len() != self.params.len() {
            return Err(super::config_err(format!(
                "checkpoint holds {} parameter tensors, the configuration builds {}",
                self.params.len(),
                model.store().len()
            )));
        }
        for i in 0..self.params.len() {
            let saved = &self.params[i];
            let live = model.store_mut().get_mut(ParamId(i));
            if live.name != saved.name || live.shape != saved.shape {
                return Err(super::config_err(format!(
                    "checkpoint parameter {i} is `{}` {:?}, model expects `{}` {:?}",
                    saved.name, saved.shape, live.name, live.shape
                )));
            }
            live.data.copy_from_slice(&saved.data);
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Encoding

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn new() -> Self {
        Enc { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

fn encode_config(cfg: &ModelConfig) -> Vec<u8> {
    let mut e = Enc::new();
    for v in cfg.crop {
        e.u64(v as u64);
    }
    e.u64(cfg.classes as u64);
    e.u64(cfg.base_channels as u64);
    for v in cfg.multipliers {
        e.u64(v as u64);
    }
    e.u64(cfg.lstm_hidden as u64);
    e.u64(cfg.lstm_layers as u64);
    e.u64(cfg.groups as u64);
    e.u8(match cfg.loc_mode {
        LocMode::Integral => 0,
        LocMode::DirectFc => 1,
        LocMode::HeatmapArgmax => 2,
    });
    e.u8(match cfg.cls_mode {
        ClsMode::BiLstm => 0,
        ClsMode::GlobalPool => 1,
    });
    e.buf
}

fn encode_params(params: &[Param]) -> Vec<u8> {
    let mut e = Enc::new();
    e.u64(params.len() as u64);
    for p in params {
        e.str(&p.name);
        e.u32(p.shape.len() as u32);
        for &d in &p.shape {
            e.u64(d as u64);
        }
        e.f64s(&p.data);
    }
    e.buf
}

fn encode_optimizer(opt: &OptimizerState) -> Vec<u8> {
    let mut e = Enc::new();
    e.f64(opt.lr);
    e.f64(opt.beta1);
    e.f64(opt.beta2);
    e.f64(opt.eps);
    e.f64(opt.weight_decay);
    e.u64(opt.step);
    e.u64(opt.moments.len() as u64);
    for m in &opt.moments {
        e.f64s(&m.m);
        e.f64s(&m.v);
    }
    e.buf
}

fn encode_scheduler(s: &PlateauScheduler) -> Vec<u8> {
    let mut e = Enc::new();
    e.u64(s.patience as u64);
    e.f64(s.factor);
    e.f64(s.min_lr);
    e.f64(s.threshold);
    e.f64(s.best);
    e.u64(s.wait as u64);
    e.buf
}

fn encode_rng(r: &RngState) -> Vec<u8> {
    let mut e = Enc::new();
    e.buf.extend_from_slice(&r.seed);
    e.u64(r.stream);
    e.u128(r.word_pos);
    e.buf
}

fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let sections = [
        encode_config(&ckpt.config),
        encode_params(&ckpt.params),
        encode_optimizer(&ckpt.optimizer),
        encode_scheduler(&ckpt.scheduler),
        encode_rng(&ckpt.rng),
        {
            let mut e = Enc::new();
            e.u64(ckpt.epoch as u64);
            e.buf
        },
    ];
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (tag, payload) in SECTION_TAGS.iter().zip(sections) {
        out.extend_from_slice(*tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

/// Writes `ckpt` to `path` in the container format above.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Decoding

struct Dec<'a> {
    bytes: &'a [u8],
    off: usize,
}

type DecResult<T> = Result<T, String>;

impl<'a> Dec<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Dec { bytes, off: 0 }
    }
    fn take(&mut self, n: usize) -> DecResult<&'a [u8]> {
        if self.bytes.len() - self.off < n {
            return Err(format!(
                "wanted {n} bytes at offset {}, only {} remain",
                self.off,
                self.bytes.len() - self.off
            ));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }
    fn u8(&mut self) -> DecResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> DecResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> DecResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> DecResult<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> DecResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> DecResult<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn usize64(&mut self) -> DecResult<usize> {
        usize::try_from(self.u64()?).map_err(|_| "value exceeds this platform's usize".to_string())
    }
    fn str(&mut self) -> DecResult<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| "string is not UTF-8".to_string())
    }
    fn finish(&self, what: &str) -> DecResult<()> {
        if self.off != self.bytes.len() {
            return Err(format!(
                "{what} has {} trailing bytes",
                self.bytes.len() - self.off
            ));
        }
        Ok(())
    }
}

fn decode_config(bytes: &[u8]) -> DecResult<ModelConfig> {
    let mut d = Dec::new(bytes);
    let crop = [d.usize64()?, d.usize64()?, d.usize64()?];
    let classes = d.usize64()?;
    let base_channels = d.usize64()?;
    let multipliers = [d.usize64()?, d.usize64()?, d.usize64()?, d.usize64()?];
    let lstm_hidden = d.usize64()?;
    let lstm_layers = d.usize64()?;
    let groups = d.usize64()?;
    let loc_mode = match d.u8()? {
        0 => LocMode::Integral,
        1 => LocMode::DirectFc,
        2 => LocMode::HeatmapArgmax,
        other => return Err(format!("unknown localization mode code {other}")),
    };
    let cls_mode = match d.u8()? {
        0 => ClsMode::BiLstm,
        1 => ClsMode::GlobalPool,
        other => return Err(format!("unknown classification mode code {other}")),
    };
    d.finish("configuration section")?;
    Ok(ModelConfig {
        crop,
        classes,
        base_channels,
        multipliers,
        lstm_hidden,
        lstm_layers,
        groups,
        loc_mode,
        cls_mode,
    })
}

fn decode_params(bytes: &[u8]) -> DecResult<Vec<Param>> {
    let mut d = Dec::new(bytes);
    let count = d.usize64()?;
    let mut params = Vec::new();
    for i in 0..count {
        let name = d.str()?;
        let rank = d.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(d.usize64()?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| {
            format!("parameter {i} (`{name}`) has an overflowing element count")
        })?;
        let data = d.f64s(numel)?;
        params.push(Param { name, shape, data });
    }
    d.finish("parameter section")?;
    Ok(params)
}

fn decode_optimizer(bytes: &[u8], params: &[Param]) -> DecResult<OptimizerState> {
    let mut d = Dec::new(bytes);
    let lr = d.f64()?;
    let beta1 = d.f64()?;
    let beta2 = d.f64()?;
    let eps = d.f64()?;
    let weight_decay = d.f64()?;
    let step = d.u64()?;
    let count = d.usize64()?;
    if count != params.len() {
        return Err(format!(
            "optimizer covers {count} tensors, checkpoint has {} parameters",
            params.len()
        ));
    }
    let mut moments = Vec::with_capacity(count);
    for p in params {
        let m = d.f64s(p.data.len())?;
        let v = d.f64s(p.data.len())?;
        moments.push(Moments { m, v });
    }
    d.finish("optimizer section")?;
    Ok(OptimizerState { lr, beta1, beta2, eps, weight_decay, step, moments })
}

fn decode_scheduler(bytes: &[u8]) -> DecResult<PlateauScheduler> {
    let mut d = Dec::new(bytes);
    let patience = d.usize64()?;
    let factor = d.f64()?;
    let min_lr = d.f64()?;
    let threshold = d.f64()?;
    let best = d.f64()?;
    let wait = d.usize64()?;
    d.finish("scheduler section")?;
    Ok(PlateauScheduler { patience, factor, min_lr, threshold, best, wait })
}

fn decode_rng(bytes: &[u8]) -> DecResult<RngState> {
    let mut d = Dec::new(bytes);
    let seed: [u8; 32] = d.take(32)?.try_into().unwrap();
    let stream = d.u64()?;
    let word_pos = d.u128()?;
    d.finish("rng section")?;
    Ok(RngState { seed, stream, word_pos })
}

fn decode_checkpoint(bytes: &[u8]) -> DecResult<Checkpoint> {
    let mut d = Dec::new(bytes);
    let magic = d.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format!("bad magic {:?}", String::from_utf8_lossy(magic)));
    }
    let version = d.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let mut sections = Vec::with_capacity(SECTION_TAGS.len());
    for tag in SECTION_TAGS {
        let got = d.take(4)?;
        if got != tag {
            return Err(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            ));
        }
        let len = d.usize64()?;
        let payload = d
            .take(len)
            .map_err(|e| format!("section {:?}: {e}", String::from_utf8_lossy(tag)))?;
        sections.push(payload);
    }
    d.finish("checkpoint")?;

    let config = decode_config(sections[0])?;
    let params = decode_params(sections[1])?;
    let optimizer = decode_optimizer(sections[2], &params)?;
    let scheduler = decode_scheduler(sections[3])?;
    let rng = decode_rng(sections[4])?;
    let mut ed = Dec::new(sections[5]);
    let epoch = ed.usize64()?;
    ed.finish("epoch section")?;

    config.validate().map_err(|e| format!("stored configuration is invalid: {e}"))?;
    Ok(Checkpoint { config, params, optimizer, scheduler, rng, epoch })
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
        .map_err(|detail| TrainError::Format { path: path.display().to_string(), detail })
}
