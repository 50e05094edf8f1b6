//! Layered network of vector-state neurons and synapses.
//!
//! Layers are hidden layers in configuration order followed by the input
//! layer, which has one neuron per alphabet symbol. Every ordered pair of
//! layers is fully connected, self-pairs included, so each neuron receives a
//! synapse from every neuron in the network.
//!
//! Synapse states of post-synaptic layer `l` are stored as one matrix with
//! `n_l * N` rows (`N` = total neurons). Row `i * N + j` is the synapse from
//! global neuron `j` onto neuron `i` of layer `l`.

mod checkpoint;

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamStore, Tape, TapeError, Var};
use crate::kernels::{
    hebbian_term, integrate, synapse_effect, InputBlock, Kernel, KernelError, KernelRole, KernelSpec, OpKind,
};

pub use checkpoint::{Checkpoint, CheckpointError, Entry, CHECKPOINT_VERSION};

/// Symbols in the character alphabet: 26 letters plus one non-letter class.
pub const ALPHABET: usize = 27;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("target symbol {target} outside alphabet of {alphabet}")]
    TargetOutOfRange { target: usize, alphabet: usize },
    #[error("non-finite {what} in layer {layer}")]
    NonFinite { what: &'static str, layer: usize },
    #[error("state does not match the network: {0}")]
    StateShape(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Neuron count of each hidden layer, in processing order.
    pub hidden_layers: Vec<usize>,
    /// Neuron state size `d_h`.
    pub neuron_dim: usize,
    /// Synapse state size `d_w`.
    pub synapse_dim: usize,
    /// Type embedding size `d_e`.
    pub embed_dim: usize,
    /// Hidden width `m` of the MLP-based kernels and of the input readout.
    pub kernel_hidden: usize,
    pub h_op: OpKind,
    pub w_op: OpKind,
    pub alphabet: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![4],
            neuron_dim: 6,
            synapse_dim: 6,
            embed_dim: 4,
            kernel_hidden: 16,
            h_op: OpKind::Gated,
            w_op: OpKind::Gated,
            alphabet: ALPHABET,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |msg: String| Err(NetworkError::InvalidConfig(msg));
        if self.neuron_dim < 2 {
            return bad(format!("neuron state size must be at least 2, got {}", self.neuron_dim));
        }
        if self.synapse_dim < 1 || self.embed_dim < 1 || self.kernel_hidden < 1 {
            return bad("synapse, embedding and kernel sizes must be positive".into());
        }
        if self.alphabet < 2 {
            return bad(format!("alphabet must have at least 2 symbols, got {}", self.alphabet));
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layers must have at least one neuron".into());
        }
        if self.w_op.is_lstm() && !self.synapse_dim.is_multiple_of(2) {
            return bad(format!("{} synapse rule needs an even synapse state size", self.w_op));
        }
        if self.h_op.is_lstm() && !self.neuron_dim.is_multiple_of(2) {
            return bad(format!("{} neuron rule needs an even neuron state size", self.h_op));
        }
        if self.w_op == OpKind::Gated && self.synapse_dim != self.neuron_dim {
            return bad("gated synapse rule adds h_i * h_j^1, so synapse and neuron state sizes must match".into());
        }
        Ok(())
    }

    /// Neuron counts per layer in processing order (input layer last).
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = self.hidden_layers.clone();
        sizes.push(self.alphabet);
        sizes
    }

    pub fn total_neurons(&self) -> usize {
        self.hidden_layers.iter().sum::<usize>() + self.alphabet
    }

    fn synapse_input_dim(&self) -> usize {
        3 * self.neuron_dim + self.synapse_dim + 2 * self.embed_dim
    }

    pub fn synapse_kernel(&self) -> KernelSpec {
        KernelSpec {
            op: self.w_op,
            role: KernelRole::Synapse,
            state_dim: self.synapse_dim,
            input_dim: self.synapse_input_dim(),
            hidden: self.kernel_hidden,
        }
    }

    pub fn neuron_kernel(&self) -> KernelSpec {
        KernelSpec {
            op: self.h_op,
            role: KernelRole::Neuron,
            state_dim: self.neuron_dim,
            input_dim: self.synapse_dim + self.embed_dim,
            hidden: self.kernel_hidden,
        }
    }

    pub fn readout_kernel(&self) -> KernelSpec {
        KernelSpec {
            op: OpKind::Mlp,
            role: KernelRole::Readout,
            state_dim: self.neuron_dim,
            input_dim: self.synapse_dim + self.embed_dim,
            hidden: self.kernel_hidden,
        }
    }
}

impl fmt::Display for NetworkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hidden: Vec<String> = self.hidden_layers.iter().map(|n| n.to_string()).collect();
        write!(
            f,
            "h_op={} w_op={} d_h={} d_w={} d_e={} m={} hidden=[{}] alphabet={}",
            self.h_op,
            self.w_op,
            self.neuron_dim,
            self.synapse_dim,
            self.embed_dim,
            self.kernel_hidden,
            hidden.join(","),
            self.alphabet
        )
    }
}

/// Closed-form count of backprop-trained parameters. Independent of the
/// number of neurons in any layer; each layer adds one type embedding.
pub fn meta_param_count(cfg: &NetworkConfig) -> usize {
    fn kernel(op: OpKind, s: usize, x: usize, m: usize) -> usize {
        match op {
            OpKind::Mlp | OpKind::MlpTanh => (s + x) * m + m + m * s + s,
            OpKind::Gated => (s + x) * m + m + 2 * m * s + 2 * s,
            OpKind::Lstm | OpKind::LstmSigmoid | OpKind::LstmId => {
                let k = s / 2;
                (k + x) * 4 * k + 4 * k
            }
        }
    }
    let (dh, dw, de, m) = (cfg.neuron_dim, cfg.synapse_dim, cfg.embed_dim, cfg.kernel_hidden);
    kernel(cfg.w_op, dw, 3 * dh + dw + 2 * de, m)
        + kernel(cfg.h_op, dh, dw + de, m)
        + kernel(OpKind::Mlp, dh, dw + de, m)
        + (cfg.hidden_layers.len() + 1) * de
}

/// Runtime state: one activation matrix and one synapse matrix per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    /// `h[l]` is `n_l x d_h`.
    pub h: Vec<Array2<f64>>,
    /// `w[l]` is `(n_l * N) x d_w`, see the module docs for row order.
    pub w: Vec<Array2<f64>>,
}

impl NetworkState {
    pub fn synapse_count(&self) -> usize {
        self.w.iter().map(Array2::nrows).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.w).all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// First layer holding a non-finite value, with what kind of value.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        let bad = |m: &Array2<f64>| m.iter().any(|x| !x.is_finite());
        if let Some(l) = self.h.iter().position(bad) {
            return Some(("activation", l));
        }
        self.w.iter().position(bad).map(|l| ("synapse state", l))
    }
}

/// All activations set to zero, synapses untouched.
pub fn reset_activations(state: &NetworkState) -> NetworkState {
    NetworkState {
        h: state.h.iter().map(|h| Array2::zeros(h.dim())).collect(),
        w: state.w.clone(),
    }
}

/// Network state held on a tape.
#[derive(Clone, Debug)]
pub struct TapeState {
    pub h: Vec<Var>,
    pub w: Vec<Var>,
}

/// Result of one step recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeStep {
    pub state: TapeState,
    /// `1 x 1` cross-entropy of the target.
    pub loss: Var,
    /// `alphabet x 1` predicted distribution.
    pub probs: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    /// `-ln p[target]` in nats.
    pub loss: f64,
}

/// Topology and kernel bindings for one configuration.
#[derive(Clone, Debug)]
pub struct PlasticNetwork {
    cfg: NetworkConfig,
    sizes: Vec<usize>,
    total: usize,
    /// per layer, synapse row -> post-synaptic neuron within the layer
    post_rows: Vec<Arc<[usize]>>,
    /// per layer, synapse row -> pre-synaptic global neuron
    pre_rows: Vec<Arc<[usize]>>,
    /// per layer, neuron -> layer index (for embedding lookup)
    layer_rows: Vec<Arc<[usize]>>,
    /// global neuron -> layer index
    neuron_type: Arc<[usize]>,
    synapse_kernel: Kernel,
    neuron_kernel: Kernel,
    readout: Kernel,
    embed_slot: usize,
}

impl PlasticNetwork {
    pub fn new(cfg: NetworkConfig) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let sizes = cfg.layer_sizes();
        let total = cfg.total_neurons();

        let post_rows = sizes
            .iter()
            .map(|&n| (0..n * total).map(|r| r / total).collect())
            .collect();
        let pre_rows = sizes
            .iter()
            .map(|&n| (0..n * total).map(|r| r % total).collect())
            .collect();
        let layer_rows = sizes.iter().enumerate().map(|(l, &n)| vec![l; n].into()).collect();
        let neuron_type = sizes
            .iter()
            .enumerate()
            .flat_map(|(l, &n)| std::iter::repeat_n(l, n))
            .collect();

        let w_spec = cfg.synapse_kernel();
        let h_spec = cfg.neuron_kernel();
        let r_spec = cfg.readout_kernel();
        let mut slot = 0;
        let synapse_kernel = Kernel::bind(w_spec, slot)?;
        slot += w_spec.param_shapes().len();
        let neuron_kernel = Kernel::bind(h_spec, slot)?;
        slot += h_spec.param_shapes().len();
        let readout = Kernel::bind(r_spec, slot)?;
        slot += r_spec.param_shapes().len();

        Ok(Self {
            cfg,
            sizes,
            total,
            post_rows,
            pre_rows,
            layer_rows,
            neuron_type,
            synapse_kernel,
            neuron_kernel,
            readout,
            embed_slot: slot,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_layer(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Fresh meta-parameters: kernel weights and one embedding per layer.
    pub fn init_meta(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut store = ParamStore::new();
        for (kernel, prefix) in [
            (&self.synapse_kernel, "synapse"),
            (&self.neuron_kernel, "neuron"),
            (&self.readout, "readout"),
        ] {
            let k = Kernel::register(*kernel.spec(), &mut store, prefix, &mut rng)
                .expect("spec validated in PlasticNetwork::new");
            debug_assert_eq!(k.slots(), kernel.slots());
        }
        let emb = Array2::from_shape_fn((self.sizes.len(), self.cfg.embed_dim), |_| rng.random_range(-1.0..1.0));
        let slot = store.push("embeddings", emb);
        debug_assert_eq!(slot, self.embed_slot);
        store
    }

    /// Checks that `meta` has the slot layout this network expects.
    pub fn check_meta(&self, meta: &ParamStore) -> Result<(), NetworkError> {
        let mut expected: Vec<(usize, usize)> = Vec::new();
        for spec in [
            self.cfg.synapse_kernel(),
            self.cfg.neuron_kernel(),
            self.cfg.readout_kernel(),
        ] {
            expected.extend(spec.param_shapes().iter().map(|&(_, r, c)| (r, c)));
        }
        expected.push((self.sizes.len(), self.cfg.embed_dim));
        let got: Vec<_> = meta.values().iter().map(Array2::dim).collect();
        if got != expected {
            return Err(NetworkError::InvalidConfig(format!(
                "meta-parameter shapes {got:?} do not match {expected:?}"
            )));
        }
        Ok(())
    }

    /// Zero activations; synapse component `a` of a synapse from layer `s`
    /// drawn from `N(0, 1/n_s)`.
    pub fn init_state(&self, seed: u64) -> NetworkState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let std_of: Vec<f64> = self
            .neuron_type
            .iter()
            .map(|&l| 1.0 / (self.sizes[l] as f64).sqrt())
            .collect();
        let h = self
            .sizes
            .iter()
            .map(|&n| Array2::zeros((n, self.cfg.neuron_dim)))
            .collect();
        let w = self
            .sizes
            .iter()
            .map(|&n| {
                let mut m = Array2::zeros((n * self.total, self.cfg.synapse_dim));
                for (r, mut row) in m.outer_iter_mut().enumerate() {
                    let normal = Normal::new(0.0, std_of[r % self.total]).expect("positive std");
                    row.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
                }
                m
            })
            .collect();
        NetworkState { h, w }
    }

    pub fn check_state(&self, state: &NetworkState) -> Result<(), NetworkError> {
        let ok = state.h.len() == self.sizes.len()
            && state.w.len() == self.sizes.len()
            && self.sizes.iter().enumerate().all(|(l, &n)| {
                state.h[l].dim() == (n, self.cfg.neuron_dim)
                    && state.w[l].dim() == (n * self.total, self.cfg.synapse_dim)
            });
        if ok {
            Ok(())
        } else {
            Err(NetworkError::StateShape(format!("expected layers {:?}", self.sizes)))
        }
    }

    /// Places `state` on the tape as constants; no gradient reaches it.
    pub fn load(&self, tape: &mut Tape, state: &NetworkState) -> TapeState {
        TapeState {
            h: state.h.iter().map(|h| tape.constant(h.clone())).collect(),
            w: state.w.iter().map(|w| tape.constant(w.clone())).collect(),
        }
    }

    pub fn read(&self, tape: &Tape, state: &TapeState) -> NetworkState {
        NetworkState {
            h: state.h.iter().map(|&v| tape.value(v).clone()).collect(),
            w: state.w.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }

    /// Zero activations with the synapse nodes shared, so gradients still
    /// flow into whatever produced them.
    pub fn reset_on_tape(&self, tape: &mut Tape, state: &TapeState) -> TapeState {
        TapeState {
            h: self
                .sizes
                .iter()
                .map(|&n| tape.constant(Array2::zeros((n, self.cfg.neuron_dim))))
                .collect(),
            w: state.w.clone(),
        }
    }

    /// One global update. Layers run in order; a layer sees the new
    /// activations of the layers before it and the previous activations of
    /// itself and the layers after it. The input layer then predicts
    /// `target`, and its states are overwritten with the one-hot target
    /// (component 0) and the prediction error (last component).
    pub fn step_on_tape(&self, tape: &mut Tape, state: &TapeState, target: usize) -> Result<TapeStep, NetworkError> {
        let alphabet = self.cfg.alphabet;
        if target >= alphabet {
            return Err(NetworkError::TargetOutOfRange { target, alphabet });
        }
        let d_h = self.cfg.neuron_dim;
        let emb = tape.param(self.embed_slot)?;
        let emb_all = tape.gather(emb, self.neuron_type.clone())?;
        let gated_w = self.cfg.w_op == OpKind::Gated;

        let mut h = state.h.clone();
        let mut w = state.w.clone();
        let mut out = None;
        for l in 0..self.sizes.len() {
            let post_rows = self.post_rows[l].clone();
            let pre_rows = self.pre_rows[l].clone();
            let h_all = tape.concat_rows(&h)?;
            let post = h[l];
            let pre = tape.gather(h_all, pre_rows.clone())?;
            let post_syn = tape.gather(post, post_rows.clone())?;
            let effect = synapse_effect(tape, w[l], pre)?;
            let hebb = hebbian_term(tape, post_syn, pre)?;
            let emb_l = tape.gather(emb, self.layer_rows[l].clone())?;

            let x_ij = [
                InputBlock::gathered(post, post_rows.clone()),
                InputBlock::gathered(h_all, pre_rows.clone()),
                InputBlock::direct(effect),
                InputBlock::direct(hebb),
                InputBlock::gathered(emb_l, post_rows),
                InputBlock::gathered(emb_all, pre_rows),
            ];
            let new_w = self
                .synapse_kernel
                .apply(tape, w[l], &x_ij, if gated_w { Some(hebb) } else { None })?;
            let u_i = integrate(tape, effect, self.total)?;
            let neuron_in = [InputBlock::direct(u_i), InputBlock::direct(emb_l)];

            if l == self.input_layer() {
                let logits = self.readout.apply(tape, post, &neuron_in, None)?;
                let soft = tape.softmax_rows(logits)?;
                let probs = tape.select(soft, 0, 1)?;
                let picked = tape.gather(probs, Arc::from([target]))?;
                let log_p = tape.ln(picked)?;
                let loss = tape.scale(log_p, -1.0)?;

                let mut onehot = Array2::zeros((alphabet, 1));
                onehot[[target, 0]] = 1.0;
                let y = tape.constant(onehot);
                let error = tape.sub(y, probs)?;
                let mut parts = vec![y];
                if d_h > 2 {
                    parts.push(tape.select(soft, 1, d_h - 2)?);
                }
                parts.push(error);
                h[l] = tape.concat_cols(&parts)?;
                out = Some((loss, probs));
            } else {
                h[l] = self.neuron_kernel.apply(tape, post, &neuron_in, None)?;
            }
            w[l] = new_w;
        }
        let (loss, probs) = out.expect("input layer is always processed");
        Ok(TapeStep {
            state: TapeState { h, w },
            loss,
            probs,
        })
    }

    /// Untracked step on plain state.
    pub fn step(
        &self,
        meta: &ParamStore,
        state: &NetworkState,
        target: usize,
    ) -> Result<(NetworkState, StepOutput), NetworkError> {
        self.check_state(state)?;
        let mut tape = Tape::with_params(meta);
        let on_tape = self.load(&mut tape, state);
        let step = self.step_on_tape(&mut tape, &on_tape, target)?;
        let next = self.read(&tape, &step.state);
        if let Some((what, layer)) = next.first_non_finite() {
            return Err(NetworkError::NonFinite { what, layer });
        }
        let output = StepOutput {
            probs: tape.value(step.probs).iter().copied().collect(),
            loss: tape.scalar_value(step.loss),
        };
        Ok((next, output))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(h_op: OpKind, w_op: OpKind) -> NetworkConfig {
        NetworkConfig {
            hidden_layers: vec![3],
            neuron_dim: 4,
            synapse_dim: 4,
            embed_dim: 2,
            kernel_hidden: 5,
            h_op,
            w_op,
            alphabet: ALPHABET,
        }
    }

    #[test]
    fn init_state_is_zero_activations_and_deterministic() {
        let net = PlasticNetwork::new(small(OpKind::Gated, OpKind::Gated)).unwrap();
        let a = net.init_state(7);
        assert!(a.h.iter().all(|h| h.iter().all(|&x| x == 0.0)));
        assert_eq!(a, net.init_state(7));
        assert_ne!(a, net.init_state(8));
        assert_eq!(a.synapse_count(), 30 * 30);
    }

    #[test]
    fn synapse_init_spread_matches_fan_in() {
        let cfg = NetworkConfig {
            hidden_layers: vec![4],
            ..small(OpKind::Gated, OpKind::Gated)
        };
        let net = PlasticNetwork::new(cfg).unwrap();
        let state = net.init_state(3);
        let total = 31;
        // synapses whose source is in the input layer (global neurons 4..31)
        let samples: Vec<f64> = state
            .w
            .iter()
            .flat_map(|w| {
                w.outer_iter()
                    .enumerate()
                    .filter(|(r, _)| r % total >= 4)
                    .flat_map(|(_, row)| row.to_vec())
                    .collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(samples.len(), 31 * 27 * 4);
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = 1.0 / 27f64.sqrt();
        assert!((std - expected).abs() < 0.2 * expected, "std {std} vs {expected}");
    }

    #[test]
    fn reset_zeroes_activations_only() {
        let net = PlasticNetwork::new(small(OpKind::Gated, OpKind::Gated)).unwrap();
        let meta = net.init_meta(1);
        let (state, _) = net.step(&meta, &net.init_state(1), 4).unwrap();
        let reset = reset_activations(&state);
        assert!(reset.h.iter().all(|h| h.iter().all(|&x| x == 0.0)));
        assert_eq!(reset.w, state.w);
    }

    #[test]
    fn substitution_writes_target_and_error() {
        let net = PlasticNetwork::new(small(OpKind::LstmId, OpKind::Gated)).unwrap();
        let meta = net.init_meta(2);
        let (state, out) = net.step(&meta, &net.init_state(2), 11).unwrap();
        let input = &state.h[net.input_layer()];
        for i in 0..ALPHABET {
            assert_eq!(input[[i, 0]], if i == 11 { 1.0 } else { 0.0 });
        }
        let err_sum: f64 = input.column(3).sum();
        assert!(err_sum.abs() < 1e-12);
        let p_sum: f64 = out.probs.iter().sum();
        assert!((p_sum - 1.0).abs() < 1e-12);
        assert!((out.loss + out.probs[11].ln()).abs() < 1e-15);
    }

    #[test]
    fn target_out_of_range() {
        let net = PlasticNetwork::new(small(OpKind::Gated, OpKind::Gated)).unwrap();
        let meta = net.init_meta(2);
        let err = net.step(&meta, &net.init_state(2), 27).unwrap_err();
        assert!(matches!(err, NetworkError::TargetOutOfRange { target: 27, .. }));
    }

    #[test]
    fn erasing_synapse_rule_zeroes_weights() {
        let net = PlasticNetwork::new(small(OpKind::Gated, OpKind::Mlp)).unwrap();
        let mut meta = net.init_meta(5);
        for slot in net.synapse_kernel.slots() {
            meta.get_mut(slot).fill(0.0);
        }
        let (state, _) = net.step(&meta, &net.init_state(5), 0).unwrap();
        assert!(state.w.iter().all(|w| w.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(OpKind::Gated, OpKind::Lstm);
        cfg.synapse_dim = 3;
        cfg.neuron_dim = 3;
        assert!(PlasticNetwork::new(cfg).is_err());
        let mut cfg = small(OpKind::Gated, OpKind::Gated);
        cfg.synapse_dim = 2;
        assert!(PlasticNetwork::new(cfg).is_err());
        let mut cfg = small(OpKind::Mlp, OpKind::Mlp);
        cfg.neuron_dim = 1;
        assert!(PlasticNetwork::new(cfg).is_err());
    }

    #[test]
    fn param_count_matches_store() {
        for h_op in OpKind::ALL {
            for w_op in OpKind::ALL {
                let cfg = small(h_op, w_op);
                let net = PlasticNetwork::new(cfg.clone()).unwrap();
                assert_eq!(net.init_meta(0).scalar_count(), meta_param_count(&cfg));
            }
        }
    }
}
