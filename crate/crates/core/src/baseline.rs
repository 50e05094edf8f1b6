//! Character-level LSTM language model trained on the same remember
//! objective. Its weights are the trained parameters; it can carry
//! information across steps only through its `(h, c)` state.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::kernels::{lstm_cell, Activation};
use crate::network::{Checkpoint, Entry, ALPHABET};
use crate::trainer::{SegmentModel, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaselineConfig {
    pub units: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { units: 128 }
    }
}

/// `4U(U + 27) + 4U + 27U + 27`.
pub fn baseline_param_count(units: usize) -> usize {
    4 * units * (units + ALPHABET) + 4 * units + ALPHABET * units + ALPHABET
}

/// Recurrent state plus the symbol fed as the next input.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Array2<f64>,
    pub c: Array2<f64>,
    /// Previous target; `None` after a reset, which feeds a zero input.
    pub prev: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct LstmTapeState {
    pub h: Var,
    pub c: Var,
    pub prev: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct LstmStep {
    pub state: LstmTapeState,
    pub loss: Var,
    /// `1 x 27` predicted distribution.
    pub probs: Var,
}

/// Parameter slots: `w` `(27 + U) x 4U` (input rows first), `b` `1 x 4U`,
/// `w_out` `U x 27`, `b_out` `1 x 27`. Gate order is input, forget, output,
/// candidate.
#[derive(Clone, Debug)]
pub struct LstmBaseline {
    cfg: BaselineConfig,
}

impl LstmBaseline {
    pub fn new(cfg: BaselineConfig) -> Result<Self, TrainError> {
        if cfg.units == 0 {
            return Err(TrainError::Config("units must be at least 1".into()));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.cfg
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let u = self.cfg.units;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut uniform = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
        };
        let w = uniform(ALPHABET + u, 4 * u);
        let w_out = uniform(u, ALPHABET);
        let mut b = Array2::zeros((1, 4 * u));
        b.slice_mut(ndarray::s![.., u..2 * u]).fill(1.0);
        ParamStore::from_values(vec![
            ("lstm.w".into(), w),
            ("lstm.b".into(), b),
            ("lstm.w_out".into(), w_out),
            ("lstm.b_out".into(), Array2::zeros((1, ALPHABET))),
        ])
    }

    pub fn zero_state(&self) -> LstmState {
        LstmState {
            h: Array2::zeros((1, self.cfg.units)),
            c: Array2::zeros((1, self.cfg.units)),
            prev: None,
        }
    }

    pub fn step_on_tape(&self, tape: &mut Tape, state: &LstmTapeState, target: usize) -> Result<LstmStep, TrainError> {
        if target >= ALPHABET {
            return Err(TrainError::Config(format!("target {target} outside the alphabet")));
        }
        let u = self.cfg.units;
        let w = tape.param(0)?;
        let b = tape.param(1)?;
        let w_out = tape.param(2)?;
        let b_out = tape.param(3)?;

        let w_h = tape.row_range(w, ALPHABET, u)?;
        let mut z = tape.matmul(state.h, w_h)?;
        if let Some(prev) = state.prev {
            // one-hot input times the input rows is a single row
            let w_x = tape.gather(w, Arc::from([prev]))?;
            z = tape.add(z, w_x)?;
        }
        let z = tape.add(z, b)?;
        let (h, c) = lstm_cell(tape, state.c, z, Activation::Tanh)?;

        let logits = tape.matmul(h, w_out)?;
        let logits = tape.add(logits, b_out)?;
        let probs = softmax_row(tape, logits)?;
        let picked = tape.select(probs, target, 1)?;
        let log_p = tape.ln(picked)?;
        let loss = tape.scale(log_p, -1.0)?;
        Ok(LstmStep {
            state: LstmTapeState {
                h,
                c,
                prev: Some(target),
            },
            loss,
            probs,
        })
    }

    /// Untracked step.
    pub fn step(
        &self,
        params: &ParamStore,
        state: &LstmState,
        target: usize,
    ) -> Result<(LstmState, Vec<f64>, f64), TrainError> {
        let mut tape = Tape::with_params(params);
        let on_tape = SegmentModel::load(self, &mut tape, state);
        let out = self.step_on_tape(&mut tape, &on_tape, target)?;
        let next = SegmentModel::read(self, &tape, &out.state);
        let probs = tape.value(out.probs).iter().copied().collect();
        Ok((next, probs, tape.scalar_value(out.loss)))
    }
}

fn softmax_row(tape: &mut Tape, logits: Var) -> Result<Var, TrainError> {
    let column = tape.transpose(logits)?;
    let soft = tape.softmax_rows(column)?;
    Ok(tape.transpose(soft)?)
}

impl SegmentModel for LstmBaseline {
    type State = LstmState;
    type OnTape = LstmTapeState;

    fn kind(&self) -> &'static str {
        "lstm"
    }

    fn load(&self, tape: &mut Tape, state: &LstmState) -> LstmTapeState {
        LstmTapeState {
            h: tape.constant(state.h.clone()),
            c: tape.constant(state.c.clone()),
            prev: state.prev,
        }
    }

    fn read(&self, tape: &Tape, state: &LstmTapeState) -> LstmState {
        LstmState {
            h: tape.value(state.h).clone(),
            c: tape.value(state.c).clone(),
            prev: state.prev,
        }
    }

    fn replay_start(&self, tape: &mut Tape, _online_end: &LstmTapeState) -> LstmTapeState {
        let zero = Array2::zeros((1, self.cfg.units));
        LstmTapeState {
            h: tape.constant(zero.clone()),
            c: tape.constant(zero),
            prev: None,
        }
    }

    fn step(&self, tape: &mut Tape, state: &LstmTapeState, target: usize) -> Result<(LstmTapeState, Var), TrainError> {
        let out = self.step_on_tape(tape, state, target)?;
        Ok((out.state, out.loss))
    }

    fn first_non_finite(&self, state: &LstmState) -> Option<String> {
        if !state.h.iter().all(|x| x.is_finite()) {
            return Some("hidden state".into());
        }
        if !state.c.iter().all(|x| x.is_finite()) {
            return Some("cell state".into());
        }
        None
    }

    fn save_state(&self, ckpt: &mut Checkpoint, state: &LstmState) {
        ckpt.insert_matrix("state.h", &state.h);
        ckpt.insert_matrix("state.c", &state.c);
        // u64::MAX marks "no previous symbol"
        let prev = state.prev.map_or(u64::MAX, |p| p as u64);
        ckpt.insert("state.prev", Entry::U64(prev));
    }

    fn load_state(&self, ckpt: &Checkpoint) -> Result<LstmState, TrainError> {
        let h = ckpt.matrix("state.h")?;
        let c = ckpt.matrix("state.c")?;
        let shape = (1, self.cfg.units);
        if h.dim() != shape || c.dim() != shape {
            return Err(TrainError::Config(format!(
                "checkpoint state does not match {} units",
                self.cfg.units
            )));
        }
        let prev = match ckpt.u64("state.prev")? {
            u64::MAX => None,
            p => Some(p as usize),
        };
        Ok(LstmState { h, c, prev })
    }
}
