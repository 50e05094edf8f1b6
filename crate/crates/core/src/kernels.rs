//! Shared update operators for neuron and synapse states.
//!
//! A kernel maps `(state, input)` to a new state and is applied to a whole
//! batch of neurons or synapses at once: row `r` of every operand belongs to
//! element `r` of the batch. Kernel parameters are shared by every element,
//! so their count never depends on how many neurons or synapses exist.
//!
//! Inputs are passed as a list of [`InputBlock`]s whose widths concatenate to
//! the kernel input. A block may live at a coarser granularity than the batch
//! (for example one row per post-synaptic neuron) and be expanded through a
//! row index; its contribution to the first dense layer is then computed once
//! per distinct row and gathered afterwards, which is mathematically the same
//! as concatenating the expanded blocks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{ParamStore, Tape, TapeError, Var};

/// Candidate update operator for a state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Mlp,
    MlpTanh,
    Lstm,
    LstmSigmoid,
    LstmId,
    Gated,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::Mlp,
        OpKind::MlpTanh,
        OpKind::Lstm,
        OpKind::LstmSigmoid,
        OpKind::LstmId,
        OpKind::Gated,
    ];

    pub fn is_lstm(self) -> bool {
        matches!(self, OpKind::Lstm | OpKind::LstmSigmoid | OpKind::LstmId)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Mlp => "mlp",
            OpKind::MlpTanh => "mlp-tanh",
            OpKind::Lstm => "lstm",
            OpKind::LstmSigmoid => "lstm-sigmoid",
            OpKind::LstmId => "lstm-id",
            OpKind::Gated => "gated",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlp" => Ok(OpKind::Mlp),
            "mlp-tanh" | "mlp_tanh" => Ok(OpKind::MlpTanh),
            "lstm" => Ok(OpKind::Lstm),
            "lstm-sigmoid" | "lstm_sigmoid" | "lstm-sigma" | "lstm-σ" => Ok(OpKind::LstmSigmoid),
            "lstm-id" | "lstm_id" => Ok(OpKind::LstmId),
            "gated" => Ok(OpKind::Gated),
            other => Err(KernelError::UnknownOp(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
}

/// What a kernel updates. Decides the output non-linearity of a plain MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelRole {
    /// Neuron states; MLP output is squashed by a sigmoid.
    Neuron,
    /// Synapse states; MLP output is left linear.
    Synapse,
    /// Input-layer logits; always a linear-output MLP.
    Readout,
}

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("unknown update operator `{0}`")]
    UnknownOp(String),
    #[error("invalid kernel: {0}")]
    InvalidSpec(String),
    #[error("kernel expects input width {expected}, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    pub op: OpKind,
    pub role: KernelRole,
    pub state_dim: usize,
    pub input_dim: usize,
    /// Hidden width of the MLP-based operators.
    pub hidden: usize,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), KernelError> {
        if self.state_dim == 0 || self.input_dim == 0 || self.hidden == 0 {
            return Err(KernelError::InvalidSpec(format!(
                "{} kernel needs positive sizes, got state {} input {} hidden {}",
                self.op, self.state_dim, self.input_dim, self.hidden
            )));
        }
        if self.op.is_lstm() && !self.state_dim.is_multiple_of(2) {
            return Err(KernelError::InvalidSpec(format!(
                "{} splits its state into hidden and cell halves; state size {} is odd",
                self.op, self.state_dim
            )));
        }
        Ok(())
    }

    pub fn mlp_output(&self) -> Activation {
        match (self.role, self.op) {
            (KernelRole::Readout, _) => Activation::Identity,
            (_, OpKind::MlpTanh) => Activation::Tanh,
            (KernelRole::Neuron, _) => Activation::Sigmoid,
            (KernelRole::Synapse, _) => Activation::Identity,
        }
    }

    pub fn cell_output(&self) -> Activation {
        match self.op {
            OpKind::LstmSigmoid => Activation::Sigmoid,
            OpKind::LstmId => Activation::Identity,
            _ => Activation::Tanh,
        }
    }

    /// `(name, rows, cols)` of every parameter tensor, in slot order.
    pub fn param_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let (s, x, m) = (self.state_dim, self.input_dim, self.hidden);
        match self.op {
            OpKind::Mlp | OpKind::MlpTanh => vec![("w1", s + x, m), ("b1", 1, m), ("w2", m, s), ("b2", 1, s)],
            OpKind::Gated => vec![("w1", s + x, m), ("b1", 1, m), ("w2", m, 2 * s), ("b2", 1, 2 * s)],
            OpKind::Lstm | OpKind::LstmSigmoid | OpKind::LstmId => {
                let k = s / 2;
                vec![("w", k + x, 4 * k), ("b", 1, 4 * k)]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// One slice of a kernel input. See the module docs.
#[derive(Clone, Debug)]
pub struct InputBlock {
    pub value: Var,
    pub rows: Option<Arc<[usize]>>,
}

impl InputBlock {
    /// A block with one row per batch element.
    pub fn direct(value: Var) -> Self {
        Self { value, rows: None }
    }

    /// Batch row `r` reads row `rows[r]` of `value`.
    pub fn gathered(value: Var, rows: Arc<[usize]>) -> Self {
        Self {
            value,
            rows: Some(rows),
        }
    }
}

/// A kernel bound to its parameter slots in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    spec: KernelSpec,
    first_slot: usize,
}

impl Kernel {
    /// Allocates and initializes the kernel parameters in `store`.
    ///
    /// Dense weights are uniform in ±sqrt(6 / (fan_in + fan_out)), biases are
    /// zero except the LSTM forget gate, which starts at +1.
    pub fn register<R: Rng + ?Sized>(
        spec: KernelSpec,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, KernelError> {
        spec.validate()?;
        let first_slot = store.len();
        for (name, rows, cols) in spec.param_shapes() {
            let value = if rows == 1 {
                let mut b = Array2::zeros((1, cols));
                if spec.op.is_lstm() {
                    let k = cols / 4;
                    b.slice_mut(ndarray::s![.., k..2 * k]).fill(1.0);
                }
                b
            } else {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
            };
            store.push(format!("{prefix}.{name}"), value);
        }
        Ok(Self { spec, first_slot })
    }

    /// Binds to slots that already exist, e.g. after loading a checkpoint.
    pub fn bind(spec: KernelSpec, first_slot: usize) -> Result<Self, KernelError> {
        spec.validate()?;
        Ok(Self { spec, first_slot })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn slots(&self) -> std::ops::Range<usize> {
        self.first_slot..self.first_slot + self.spec.param_shapes().len()
    }

    fn leaves(&self, tape: &Tape) -> Result<Vec<Var>, KernelError> {
        self.slots().map(|s| tape.param(s).map_err(KernelError::from)).collect()
    }

    /// New states for a batch. `hebb` is only read by [`OpKind::Gated`].
    pub fn apply(
        &self,
        tape: &mut Tape,
        state: Var,
        inputs: &[InputBlock],
        hebb: Option<Var>,
    ) -> Result<Var, KernelError> {
        let width: usize = inputs.iter().map(|b| tape.shape(b.value).1).sum();
        if width != self.spec.input_dim {
            return Err(KernelError::InputWidth {
                expected: self.spec.input_dim,
                got: width,
            });
        }
        let p = self.leaves(tape)?;
        match self.spec.op {
            OpKind::Mlp | OpKind::MlpTanh => {
                let out = mlp(tape, &p, state, inputs)?;
                activate(tape, out, self.spec.mlp_output())
            }
            OpKind::Gated => {
                let ab = mlp(tape, &p, state, inputs)?;
                let k = self.spec.state_dim;
                let a = tape.select(ab, 0, k)?;
                let b = tape.select(ab, k, k)?;
                gated_combine(tape, state, a, b, hebb)
            }
            OpKind::Lstm | OpKind::LstmSigmoid | OpKind::LstmId => {
                let k = self.spec.state_dim / 2;
                let hidden = tape.select(state, 0, k)?;
                let cell = tape.select(state, k, k)?;
                let mut blocks = Vec::with_capacity(inputs.len() + 1);
                blocks.push(InputBlock::direct(hidden));
                blocks.extend_from_slice(inputs);
                let z = affine(tape, p[0], p[1], &blocks)?;
                let (h, c) = lstm_cell(tape, cell, z, self.spec.cell_output())?;
                Ok(tape.concat_cols(&[h, c])?)
            }
        }
    }

    /// Single-vector form of [`Kernel::apply`], evaluated on a scratch tape.
    pub fn apply_vector(
        &self,
        params: &ParamStore,
        state: &[f64],
        input: &[f64],
        hebb: Option<&[f64]>,
    ) -> Result<Vec<f64>, KernelError> {
        let mut tape = Tape::with_params(params);
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
        let s = tape.constant(row(state));
        let x = tape.constant(row(input));
        let h = hebb.map(|h| tape.constant(row(h)));
        let out = self.apply(&mut tape, s, &[InputBlock::direct(x)], h)?;
        Ok(tape.value(out).iter().copied().collect())
    }
}

/// `sum_b expand_b(block_b . weight[rows of b]) + bias`.
pub fn affine(tape: &mut Tape, weight: Var, bias: Var, blocks: &[InputBlock]) -> Result<Var, KernelError> {
    let mut offset = 0;
    let mut direct: Option<Var> = None;
    let mut expanded: Vec<(Arc<[usize]>, Var)> = Vec::new();
    for block in blocks {
        let width = tape.shape(block.value).1;
        let w = tape.row_range(weight, offset, width)?;
        offset += width;
        let prod = tape.matmul(block.value, w)?;
        match &block.rows {
            None => {
                direct = Some(match direct {
                    Some(d) => tape.add(d, prod)?,
                    None => prod,
                });
            }
            Some(rows) => match expanded.iter_mut().find(|(r, _)| Arc::ptr_eq(r, rows)) {
                Some((_, acc)) => *acc = tape.add(*acc, prod)?,
                None => expanded.push((rows.clone(), prod)),
            },
        }
    }
    let expected = tape.shape(weight).0;
    if offset != expected {
        return Err(KernelError::InputWidth { expected, got: offset });
    }
    let mut acc = direct;
    for (rows, partial) in expanded {
        let g = tape.gather(partial, rows)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, g)?,
            None => g,
        });
    }
    let acc = acc.ok_or_else(|| KernelError::InvalidSpec("affine layer without inputs".into()))?;
    Ok(tape.add(acc, bias)?)
}

/// One-hidden-layer network with tanh hidden units and linear output,
/// applied to `[state, inputs...]`.
fn mlp(tape: &mut Tape, p: &[Var], state: Var, inputs: &[InputBlock]) -> Result<Var, KernelError> {
    let mut blocks = Vec::with_capacity(inputs.len() + 1);
    blocks.push(InputBlock::direct(state));
    blocks.extend_from_slice(inputs);
    let pre = affine(tape, p[0], p[1], &blocks)?;
    let hidden = tape.tanh(pre)?;
    let out = tape.matmul(hidden, p[2])?;
    Ok(tape.add(out, p[3])?)
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var, KernelError> {
    Ok(match act {
        Activation::Identity => x,
        Activation::Sigmoid => tape.sigmoid(x)?,
        Activation::Tanh => tape.tanh(x)?,
    })
}

/// `(1 - g) * s + g * (r + hebb)` with `g = sigmoid(a)`, `r = tanh(b)`.
pub fn gated_combine(tape: &mut Tape, state: Var, a: Var, b: Var, hebb: Option<Var>) -> Result<Var, KernelError> {
    let g = tape.sigmoid(a)?;
    let r = tape.tanh(b)?;
    let target = match hebb {
        Some(h) => tape.add(r, h)?,
        None => r,
    };
    let one = tape.scalar(1.0);
    let keep = tape.sub(one, g)?;
    let kept = tape.mul(keep, state)?;
    let written = tape.mul(g, target)?;
    Ok(tape.add(kept, written)?)
}

/// LSTM cell update from gate pre-activations `z = [i, f, o, candidate]`.
/// Returns `(hidden, cell)`.
pub fn lstm_cell(tape: &mut Tape, cell: Var, z: Var, output: Activation) -> Result<(Var, Var), KernelError> {
    let k = tape.shape(cell).1;
    let zi = tape.select(z, 0, k)?;
    let zf = tape.select(z, k, k)?;
    let zo = tape.select(z, 2 * k, k)?;
    let zc = tape.select(z, 3 * k, k)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let o = tape.sigmoid(zo)?;
    let cand = tape.tanh(zc)?;
    let kept = tape.mul(f, cell)?;
    let written = tape.mul(i, cand)?;
    let c = tape.add(kept, written)?;
    let squashed = activate(tape, c, output)?;
    let h = tape.mul(o, squashed)?;
    Ok((h, c))
}

/// `u_ij = w_ij * h_j^0` for a batch of synapses; `pre` holds the
/// pre-synaptic neuron state of each synapse row.
pub fn synapse_effect(tape: &mut Tape, w: Var, pre: Var) -> Result<Var, KernelError> {
    let h0 = tape.select(pre, 0, 1)?;
    Ok(tape.mul(w, h0)?)
}

/// `h_i * h_j^1`: the post-synaptic state scaled by component 1 of the
/// pre-synaptic state.
pub fn hebbian_term(tape: &mut Tape, post: Var, pre: Var) -> Result<Var, KernelError> {
    let h1 = tape.select(pre, 1, 1)?;
    Ok(tape.mul(post, h1)?)
}

/// `u_i = sum_j u_ij` where each post-synaptic neuron owns `fan_in`
/// consecutive rows of `effects`.
pub fn integrate(tape: &mut Tape, effects: Var, fan_in: usize) -> Result<Var, KernelError> {
    Ok(tape.sum_rows(effects, fan_in)?)
}

/// Vector form of the synapse effect.
pub fn synapse_effect_vector(w: &[f64], pre: &[f64]) -> Vec<f64> {
    w.iter().map(|&x| x * pre[0]).collect()
}

/// `x_ij = [h_i, h_j, u_ij, h_i * h_j^1, e_i, e_j]`.
pub fn synapse_input_vector(
    post: &[f64],
    pre: &[f64],
    effect: &[f64],
    post_type: &[f64],
    pre_type: &[f64],
) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 * post.len() + effect.len() + 2 * post_type.len());
    x.extend_from_slice(post);
    x.extend_from_slice(pre);
    x.extend_from_slice(effect);
    x.extend(post.iter().map(|&h| h * pre[1]));
    x.extend_from_slice(post_type);
    x.extend_from_slice(pre_type);
    x
}

/// Componentwise sum of incoming effects; zero vector when there are none.
pub fn integrate_vectors(effects: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for u in effects {
        for (o, x) in out.iter_mut().zip(u) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(spec: KernelSpec) -> (Kernel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = Kernel::register(spec, &mut store, "k", &mut rng).unwrap();
        for v in store.values_mut() {
            v.fill(0.0);
        }
        (k, store)
    }

    fn spec(op: OpKind, role: KernelRole, state: usize, input: usize) -> KernelSpec {
        KernelSpec {
            op,
            role,
            state_dim: state,
            input_dim: input,
            hidden: 5,
        }
    }

    #[test]
    fn op_names_round_trip() {
        for op in OpKind::ALL {
            assert_eq!(op.name().parse::<OpKind>().unwrap(), op);
        }
        assert!("lstm-x".parse::<OpKind>().is_err());
    }

    #[test]
    fn zero_mlp_outputs() {
        let (k, p) = zeroed(spec(OpKind::Mlp, KernelRole::Neuron, 3, 2));
        let out = k.apply_vector(&p, &[0.3, -1.0, 2.0], &[1.0, 1.0], None).unwrap();
        assert_eq!(out, vec![0.5; 3]);
        let (k, p) = zeroed(spec(OpKind::Mlp, KernelRole::Synapse, 3, 2));
        let out = k.apply_vector(&p, &[0.3, -1.0, 2.0], &[1.0, 1.0], None).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn zero_gated_halves_state_plus_hebb() {
        let (k, p) = zeroed(spec(OpKind::Gated, KernelRole::Synapse, 2, 3));
        let out = k
            .apply_vector(&p, &[0.4, -0.8], &[1.0, 2.0, 3.0], Some(&[0.2, 0.6]))
            .unwrap();
        assert_eq!(out, vec![0.5 * 0.4 + 0.5 * 0.2, 0.5 * -0.8 + 0.5 * 0.6]);
        let out = k.apply_vector(&p, &[0.4, -0.8], &[1.0, 2.0, 3.0], None).unwrap();
        assert_eq!(out, vec![0.2, -0.4]);
    }

    #[test]
    fn zero_lstm_variants() {
        for (op, hidden) in [(OpKind::Lstm, 0.0), (OpKind::LstmId, 0.0), (OpKind::LstmSigmoid, 0.25)] {
            let (k, p) = zeroed(spec(op, KernelRole::Neuron, 2, 2));
            let out = k.apply_vector(&p, &[0.0, 0.0], &[0.0, 0.0], None).unwrap();
            assert_eq!(out, vec![hidden, 0.0], "{op}");
        }
    }

    #[test]
    fn odd_lstm_state_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Kernel::register(
            spec(OpKind::LstmId, KernelRole::Synapse, 3, 2),
            &mut store,
            "k",
            &mut rng,
        );
        assert!(matches!(err, Err(KernelError::InvalidSpec(_))));
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Kernel::register(spec(OpKind::Lstm, KernelRole::Neuron, 4, 3), &mut store, "k", &mut rng).unwrap();
        let b = store.get(1);
        assert_eq!(b.row(0).to_vec(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn saturated_gates() {
        let mut tape = Tape::new();
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
        let s = tape.constant(row(&[0.7, -0.3]));
        let b = tape.constant(row(&[0.5, -1.0]));
        let hebb = tape.constant(row(&[0.1, 0.2]));
        let closed = tape.constant(row(&[-800.0, -800.0]));
        let out = gated_combine(&mut tape, s, closed, b, Some(hebb)).unwrap();
        assert_eq!(tape.value(out).row(0).to_vec(), vec![0.7, -0.3]);
        let open = tape.constant(row(&[38.0, 38.0]));
        let out = gated_combine(&mut tape, s, open, b, Some(hebb)).unwrap();
        let expect = vec![0.5f64.tanh() + 0.1, (-1.0f64).tanh() + 0.2];
        assert_eq!(tape.value(out).row(0).to_vec(), expect);

        // forget = 1, input = 0 keeps the cell exactly
        let cell = tape.constant(row(&[0.9]));
        let z = tape.constant(row(&[-800.0, 800.0, 0.0, 3.0]));
        let (_, c) = lstm_cell(&mut tape, cell, z, Activation::Tanh).unwrap();
        assert_eq!(tape.value(c)[[0, 0]], 0.9);
    }

    #[test]
    fn synapse_vectors() {
        assert_eq!(synapse_effect_vector(&[0.2, -0.5], &[0.0, 3.0]), vec![0.0, 0.0]);
        assert_eq!(synapse_effect_vector(&[0.2, -0.5], &[1.0, 3.0]), vec![0.2, -0.5]);
        let x = synapse_input_vector(&[1.0, 2.0], &[0.5, 0.0], &[3.0, 4.0], &[9.0], &[8.0]);
        assert_eq!(x.len(), 10);
        assert_eq!(&x[6..8], &[0.0, 0.0]);
        let u = vec![1.0, -2.0];
        assert_eq!(integrate_vectors(std::slice::from_ref(&u), 2), u);
        assert_eq!(integrate_vectors(&[u.clone(), vec![-1.0, 2.0]], 2), vec![0.0, 0.0]);
        assert_eq!(integrate_vectors(&[], 3), vec![0.0; 3]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (k, p) = zeroed(spec(OpKind::Mlp, KernelRole::Neuron, 3, 2));
        let err = k.apply_vector(&p, &[0.0; 3], &[0.0; 3], None).unwrap_err();
        assert!(matches!(err, KernelError::InputWidth { expected: 2, got: 3 }));
    }
}
