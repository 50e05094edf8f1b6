//! Learning-to-remember training loop.
//!
//! The stream is read `T` symbols at a time. Each segment runs the model
//! online over the newest `T` symbols from the carried-over state, then
//! replays a past snippet of `T` symbols that starts somewhere in
//! `[t - P, t - T]` from a replay state derived from the online end state
//! (activations reset, weights kept). Only the replay loss is optimized by
//! default; its gradient flows back through both runs, i.e. `2T` steps.
//! The state entering a segment is a tape constant, so nothing older than
//! the segment is differentiated.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, TapeError, Var};
use crate::corpus::SymbolStream;
use crate::kernels::KernelError;
use crate::network::{Checkpoint, CheckpointError, Entry, NetworkError, NetworkState, PlasticNetwork, TapeState};
use crate::optimizer::{Adam, AdamConfig, OptimizerError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics output: {0}")]
    Io(#[from] io::Error),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

/// Learning-rate multiplier over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half cosine from the full rate at step 0 to zero at `steps`.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    /// Multiplier at stream position `t` of a run of `steps` positions.
    pub fn factor(self, t: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let progress = (t as f64 / steps.max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(format!("unknown learning-rate schedule `{other}` (constant, cosine)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Segment and snippet length `T`.
    pub segment_len: usize,
    /// `D`; snippets start at most `T + D` steps back.
    pub delay: usize,
    /// Stream positions to consume; rounded down to whole segments.
    pub steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a metrics row every this many segments.
    pub log_every: usize,
    /// Checkpoint cadence in stream steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Also optimize the online loss (ablation).
    pub online_loss: bool,
    /// Record elapsed wall time in the metrics; zero when off.
    pub wall_clock: bool,
    /// Full-state finiteness check cadence in steps (debug builds check
    /// every segment).
    pub check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            segment_len: 10,
            delay: 10,
            steps: 150_000,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            adam: AdamConfig::default(),
            seed: 1,
            log_every: 1,
            checkpoint_every: 50_000,
            online_loss: false,
            wall_clock: true,
            check_every: 100,
        }
    }
}

impl TrainConfig {
    /// `P = T + D`.
    pub fn horizon(&self) -> usize {
        self.segment_len + self.delay
    }

    /// Learning rate for the segment starting at position `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * self.lr_schedule.factor(t, self.steps)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.segment_len == 0 {
            return Err(TrainError::Config("segment_len must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(TrainError::Config("log_every must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }
}

/// Start index and targets of one replayed snippet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnippetSample {
    pub start: usize,
    pub targets: Vec<usize>,
}

/// Uniform start in `[max(0, t - P), t - T]`.
pub fn sample_past<R: Rng + ?Sized>(t: usize, segment_len: usize, horizon: usize, rng: &mut R) -> usize {
    assert!(t >= segment_len, "need a full segment before sampling the past");
    let hi = t - segment_len;
    let lo = t.saturating_sub(horizon).min(hi);
    rng.random_range(lo..=hi)
}

pub fn sample_snippet<R: Rng + ?Sized>(
    stream: &SymbolStream,
    t: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> SnippetSample {
    let start = sample_past(t, cfg.segment_len, cfg.horizon(), rng);
    SnippetSample {
        start,
        targets: stream.window(start, cfg.segment_len),
    }
}

/// A recurrent model trained with the segment protocol.
pub trait SegmentModel {
    /// Carried-over runtime state.
    type State: Clone + PartialEq + std::fmt::Debug;
    /// The same state on a tape.
    type OnTape: Clone;

    /// Value of the `model` metrics column.
    fn kind(&self) -> &'static str;
    fn load(&self, tape: &mut Tape, state: &Self::State) -> Self::OnTape;
    fn read(&self, tape: &Tape, state: &Self::OnTape) -> Self::State;
    /// Replay start state derived from the end of the online run.
    fn replay_start(&self, tape: &mut Tape, online_end: &Self::OnTape) -> Self::OnTape;
    /// One prediction step; returns the next state and the `1 x 1` loss.
    fn step(&self, tape: &mut Tape, state: &Self::OnTape, target: usize) -> Result<(Self::OnTape, Var), TrainError>;
    fn first_non_finite(&self, state: &Self::State) -> Option<String>;
    fn save_state(&self, ckpt: &mut Checkpoint, state: &Self::State);
    fn load_state(&self, ckpt: &Checkpoint) -> Result<Self::State, TrainError>;
}

impl SegmentModel for PlasticNetwork {
    type State = NetworkState;
    type OnTape = TapeState;

    fn kind(&self) -> &'static str {
        "plastic"
    }

    fn load(&self, tape: &mut Tape, state: &NetworkState) -> TapeState {
        PlasticNetwork::load(self, tape, state)
    }

    fn read(&self, tape: &Tape, state: &TapeState) -> NetworkState {
        PlasticNetwork::read(self, tape, state)
    }

    fn replay_start(&self, tape: &mut Tape, online_end: &TapeState) -> TapeState {
        self.reset_on_tape(tape, online_end)
    }

    fn step(&self, tape: &mut Tape, state: &TapeState, target: usize) -> Result<(TapeState, Var), TrainError> {
        let out = self.step_on_tape(tape, state, target)?;
        Ok((out.state, out.loss))
    }

    fn first_non_finite(&self, state: &NetworkState) -> Option<String> {
        state
            .first_non_finite()
            .map(|(what, layer)| format!("{what} in layer {layer}"))
    }

    fn save_state(&self, ckpt: &mut Checkpoint, state: &NetworkState) {
        ckpt.insert_state("state", state);
    }

    fn load_state(&self, ckpt: &Checkpoint) -> Result<NetworkState, TrainError> {
        let state = ckpt.state("state")?;
        self.check_state(&state)?;
        Ok(state)
    }
}

/// Losses of one recorded segment.
#[derive(Clone, Debug)]
pub struct SegmentRecord<S> {
    /// Mean per-symbol replay loss.
    pub loss_past: Var,
    /// Mean per-symbol online loss.
    pub loss_online: Var,
    /// Online state after the segment, on the tape.
    pub online_end: S,
}

impl<S> SegmentRecord<S> {
    /// The replay loss, plus the online loss when `online_loss` is set.
    pub fn objective(&self, tape: &mut Tape, online_loss: bool) -> Result<Var, TapeError> {
        if online_loss {
            tape.add(self.loss_past, self.loss_online)
        } else {
            Ok(self.loss_past)
        }
    }
}

fn mean_loss<M: SegmentModel>(
    model: &M,
    tape: &mut Tape,
    mut state: M::OnTape,
    stream: &SymbolStream,
    start: usize,
    len: usize,
) -> Result<(M::OnTape, Var), TrainError> {
    let mut total: Option<Var> = None;
    for k in 0..len {
        let (next, loss) = model.step(tape, &state, stream.at(start + k))?;
        state = next;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let total = total.expect("segment length is at least 1");
    Ok((state, tape.scale(total, 1.0 / len as f64)?))
}

/// Records the online run over `online_start..online_start + len` from the
/// detached `state`, then the replay of `past_start..past_start + len` from
/// the replay start state.
pub fn record_segment<M: SegmentModel>(
    model: &M,
    tape: &mut Tape,
    state: &M::State,
    stream: &SymbolStream,
    online_start: usize,
    past_start: usize,
    len: usize,
) -> Result<SegmentRecord<M::OnTape>, TrainError> {
    if len == 0 {
        return Err(TrainError::Config("segment_len must be at least 1".into()));
    }
    let start = model.load(tape, state);
    let (online_end, loss_online) = mean_loss(model, tape, start, stream, online_start, len)?;
    let replay = model.replay_start(tape, &online_end);
    let (_, loss_past) = mean_loss(model, tape, replay, stream, past_start, len)?;
    Ok(SegmentRecord {
        loss_past,
        loss_online,
        online_end,
    })
}

/// Objective of one segment, for gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn segment_loss<M: SegmentModel>(
    model: &M,
    tape: &mut Tape,
    state: &M::State,
    stream: &SymbolStream,
    online_start: usize,
    past_start: usize,
    len: usize,
    online_loss: bool,
) -> Result<Var, TrainError> {
    let rec = record_segment(model, tape, state, stream, online_start, past_start, len)?;
    Ok(rec.objective(tape, online_loss)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMetrics {
    /// Stream position after the segment.
    pub step: usize,
    /// Mean per-symbol replay loss, nats.
    pub loss_past: f64,
    /// Mean per-symbol online loss, nats.
    pub loss_online: f64,
    pub snippet_start: usize,
}

pub const METRICS_HEADER: &str = "step,loss_past,loss_online,delay,seed,wall_ms";

/// Append-only CSV writer for per-segment metrics.
pub struct MetricsWriter<W: Write> {
    out: W,
    delay: usize,
    seed: u64,
    model: Option<&'static str>,
}

impl<W: Write> MetricsWriter<W> {
    /// `model` adds a trailing `model` column (used by the baseline).
    pub fn new(mut out: W, delay: usize, seed: u64, model: Option<&'static str>) -> io::Result<Self> {
        match model {
            Some(_) => writeln!(out, "{METRICS_HEADER},model")?,
            None => writeln!(out, "{METRICS_HEADER}")?,
        }
        Ok(Self {
            out,
            delay,
            seed,
            model,
        })
    }

    pub fn row(&mut self, m: &SegmentMetrics, wall_ms: u128) -> io::Result<()> {
        write!(
            self.out,
            "{},{},{},{},{},{}",
            m.step, m.loss_past, m.loss_online, self.delay, self.seed, wall_ms
        )?;
        match self.model {
            Some(model) => writeln!(self.out, ",{model}"),
            None => writeln!(self.out),
        }
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Owns everything a single training run mutates.
pub struct Trainer<M: SegmentModel> {
    model: M,
    cfg: TrainConfig,
    meta: ParamStore,
    state: M::State,
    opt: Adam,
    sampler: ChaCha8Rng,
    t: usize,
    tape: Tape,
    segments: usize,
}

/// Sampling RNG shared by every model kind so equal seeds replay the same
/// snippets.
pub fn snippet_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    rng
}

impl<M: SegmentModel> Trainer<M> {
    pub fn new(model: M, meta: ParamStore, state: M::State, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let opt = Adam::new(&meta, cfg.adam);
        let tape = Tape::with_params(&meta);
        Ok(Self {
            sampler: snippet_rng(cfg.seed),
            model,
            cfg,
            meta,
            state,
            opt,
            t: 0,
            tape,
            segments: 0,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn meta(&self) -> &ParamStore {
        &self.meta
    }

    pub fn state(&self) -> &M::State {
        &self.state
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    /// Stream position: symbols consumed so far.
    pub fn position(&self) -> usize {
        self.t
    }

    /// Runs one online segment plus one replayed snippet and updates the
    /// meta-parameters. On error the carried state is left unchanged.
    pub fn train_segment(&mut self, stream: &SymbolStream) -> Result<SegmentMetrics, TrainError> {
        let seg = self.cfg.segment_len;
        let start = self.t;
        let end = start + seg;

        let snippet_start = sample_past(end, seg, self.cfg.horizon(), &mut self.sampler);
        self.tape.clear();
        let rec = record_segment(
            &self.model,
            &mut self.tape,
            &self.state,
            stream,
            start,
            snippet_start,
            seg,
        )?;
        let tape = &mut self.tape;
        let metrics = SegmentMetrics {
            step: end,
            loss_past: tape.scalar_value(rec.loss_past),
            loss_online: tape.scalar_value(rec.loss_online),
            snippet_start,
        };
        if !metrics.loss_past.is_finite() || !metrics.loss_online.is_finite() {
            return Err(TrainError::NonFinite {
                what: "loss".into(),
                step: end,
            });
        }

        let objective = rec.objective(tape, self.cfg.online_loss)?;
        let grads = tape.backward(objective)?;
        let next_state = self.model.read(tape, &rec.online_end);

        let check = cfg!(debug_assertions) || {
            let every = self.cfg.check_every.max(seg);
            end % every < seg
        };
        if check {
            if let Some(what) = self.model.first_non_finite(&next_state) {
                return Err(TrainError::NonFinite { what, step: end });
            }
        }
        self.opt.update(&mut self.meta, &grads, self.cfg.lr_at(start))?;
        self.tape.refresh_params(&self.meta);
        self.state = next_state;
        self.t = end;
        self.segments += 1;
        Ok(metrics)
    }

    /// Trains until `cfg.steps` stream positions are consumed, writing a
    /// metrics row every `log_every` segments. Checkpoints go to
    /// `checkpoint_path` periodically and at the end; on a non-finite
    /// failure a diagnostic checkpoint is written next to it.
    pub fn run<W: Write>(
        &mut self,
        stream: &SymbolStream,
        metrics: &mut MetricsWriter<W>,
        checkpoint_path: Option<&Path>,
        config_text: &str,
    ) -> Result<Vec<SegmentMetrics>, TrainError> {
        let clock = Instant::now();
        let mut rows = Vec::new();
        let seg = self.cfg.segment_len;
        while self.t + seg <= self.cfg.steps {
            let m = match self.train_segment(stream) {
                Ok(m) => m,
                Err(e) => {
                    if let Some(path) = checkpoint_path {
                        let diag = path.with_file_name("diagnostic.ckpt");
                        self.checkpoint(config_text).save(&diag)?;
                    }
                    metrics.flush()?;
                    return Err(e);
                }
            };
            if self.segments.is_multiple_of(self.cfg.log_every) {
                let wall = if self.cfg.wall_clock {
                    clock.elapsed().as_millis()
                } else {
                    0
                };
                metrics.row(&m, wall)?;
            }
            if let Some(path) = checkpoint_path {
                if self.cfg.checkpoint_every > 0 && self.t % self.cfg.checkpoint_every < seg {
                    self.checkpoint(config_text).save(path)?;
                }
            }
            rows.push(m);
        }
        metrics.flush()?;
        if let Some(path) = checkpoint_path {
            self.checkpoint(config_text).save(path)?;
        }
        Ok(rows)
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("model", Entry::Text(self.model.kind().into()));
        c.insert("config", Entry::Text(config_text.into()));
        c.insert("step", Entry::U64(self.t as u64));
        c.insert("segments", Entry::U64(self.segments as u64));
        c.insert_params("meta", &self.meta);
        self.model.save_state(&mut c, &self.state);
        c.insert("adam.step", Entry::U64(self.opt.step));
        let names = self.meta.names().to_vec();
        c.insert_params(
            "adam.m",
            &ParamStore::from_values(names.iter().cloned().zip(self.opt.m.clone()).collect()),
        );
        c.insert_params(
            "adam.v",
            &ParamStore::from_values(names.into_iter().zip(self.opt.v.clone()).collect()),
        );
        let mut rng = Vec::with_capacity(56);
        rng.extend_from_slice(&self.sampler.get_seed());
        rng.extend_from_slice(&self.sampler.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.sampler.get_word_pos().to_le_bytes());
        c.insert("rng.chacha8", Entry::Bytes(rng));
        c
    }

    /// Restores a run from [`Trainer::checkpoint`] output.
    pub fn restore(model: M, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let meta = ckpt.params("meta")?;
        let state = model.load_state(ckpt)?;
        let mut trainer = Self::new(model, meta, state, cfg)?;
        trainer.t = ckpt.u64("step")? as usize;
        trainer.segments = ckpt.u64("segments")? as usize;
        trainer.opt.step = ckpt.u64("adam.step")?;
        trainer.opt.m = ckpt.params("adam.m")?.values().to_vec();
        trainer.opt.v = ckpt.params("adam.v")?.values().to_vec();
        let raw = ckpt.bytes("rng.chacha8")?;
        if raw.len() != 56 {
            return Err(CheckpointError::Malformed("rng state must be 56 bytes".into()).into());
        }
        let seed: [u8; 32] = raw[..32].try_into().expect("32 bytes");
        let stream = u64::from_le_bytes(raw[32..40].try_into().expect("8 bytes"));
        let pos = u128::from_le_bytes(raw[40..56].try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(pos);
        trainer.sampler = rng;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.factor(0, 100), 1.0);
        assert!((s.factor(50, 100) - 0.5).abs() < 1e-15);
        assert!(s.factor(100, 100).abs() < 1e-15);
        assert_eq!(s.factor(500, 100), s.factor(100, 100));
        assert_eq!(LrSchedule::Constant.factor(70, 100), 1.0);
        for sched in [LrSchedule::Constant, LrSchedule::Cosine] {
            assert_eq!(sched.name().parse::<LrSchedule>().unwrap(), sched);
        }
        assert!("linear".parse::<LrSchedule>().is_err());
    }

    #[test]
    fn past_interval() {
        let mut rng = snippet_rng(3);
        for _ in 0..1000 {
            let s = sample_past(100, 10, 20, &mut rng);
            assert!((80..=90).contains(&s));
            let s = sample_past(15, 10, 20, &mut rng);
            assert!(s <= 5);
            assert_eq!(sample_past(100, 10, 10, &mut rng), 90);
        }
    }

    #[test]
    fn metrics_csv_format() {
        let mut w = MetricsWriter::new(Vec::new(), 40, 3, None).unwrap();
        w.row(
            &SegmentMetrics {
                step: 10,
                loss_past: 0.5,
                loss_online: 1.25,
                snippet_start: 0,
            },
            7,
        )
        .unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(
            text,
            "step,loss_past,loss_online,delay,seed,wall_ms\n10,0.5,1.25,40,3,7\n"
        );
    }
}
