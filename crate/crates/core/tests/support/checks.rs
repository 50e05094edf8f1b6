//! Oracle comparisons shared by the oracle tests and the acceptance run.
//! Each returns the worst absolute difference and the number of instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use l2r::autodiff::ParamStore;
use l2r::baseline::{BaselineConfig, LstmBaseline, LstmState};
use l2r::kernels::{Kernel, KernelRole, KernelSpec, OpKind};
use l2r::network::{NetworkConfig, PlasticNetwork};

use super::oracle::{self, Role};
use super::{flat_diff, flat_net, max_abs_diff, random_matrix, random_state, to_flat};

#[derive(Clone, Copy, Debug, Default)]
pub struct Comparison {
    pub worst: f64,
    pub instances: usize,
}

impl Comparison {
    fn record(&mut self, diff: f64) {
        // NaN must not hide behind max
        self.worst = if diff.is_nan() {
            f64::INFINITY
        } else {
            self.worst.max(diff)
        };
    }
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Every operator in every role it can play, `per_case` random instances each.
pub fn operators(seed: u64, per_case: usize) -> Comparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Comparison::default();
    let roles = [
        (KernelRole::Neuron, Role::Neuron),
        (KernelRole::Synapse, Role::Synapse),
        (KernelRole::Readout, Role::Readout),
    ];
    for op in OpKind::ALL {
        for (role, oracle_role) in roles {
            if role == KernelRole::Readout && op != OpKind::Mlp {
                continue;
            }
            for _ in 0..per_case {
                let state_dim = 2 * rng.random_range(1..4);
                let spec = KernelSpec {
                    op,
                    role,
                    state_dim,
                    input_dim: rng.random_range(1..9),
                    hidden: rng.random_range(1..7),
                };
                let mut store = ParamStore::new();
                let kernel = Kernel::register(spec, &mut store, "k", &mut rng).unwrap();
                for p in store.values_mut() {
                    let (r, c) = p.dim();
                    *p = random_matrix(&mut rng, r, c, 1.0);
                }
                let state = vector(&mut rng, state_dim);
                let input = vector(&mut rng, spec.input_dim);
                let hebb = (op == OpKind::Gated && rng.random_bool(0.5)).then(|| vector(&mut rng, state_dim));
                let got = kernel.apply_vector(&store, &state, &input, hebb.as_deref()).unwrap();
                let want = oracle::op_step(op, oracle_role, store.values(), &state, &input, hebb.as_deref());
                out.record(max_abs_diff(&got, &want));
                out.instances += 1;
            }
        }
    }
    out
}

/// Full network steps for every operator pair at `d` in {2, 4, 6}, two
/// consecutive steps per instance. Probabilities must also sum to one.
pub fn network_steps(seed: u64) -> Comparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Comparison::default();
    for h_op in OpKind::ALL {
        for w_op in OpKind::ALL {
            for d in [2, 4, 6] {
                let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..4)).collect();
                let cfg = NetworkConfig {
                    hidden_layers: hidden,
                    neuron_dim: d,
                    synapse_dim: d,
                    embed_dim: rng.random_range(1..4),
                    kernel_hidden: rng.random_range(1..6),
                    h_op,
                    w_op,
                    ..NetworkConfig::default()
                };
                let net = PlasticNetwork::new(cfg).unwrap();
                let seed = rng.random();
                let meta = net.init_meta(seed);
                let mut state = random_state(&net, seed);
                let flat = flat_net(&net);
                let mut flat_state = to_flat(&net, &state);
                for _ in 0..2 {
                    let target = rng.random_range(0..27);
                    let (next, got) = net.step(&meta, &state, target).unwrap();
                    let (flat_next, probs, loss) = flat.step(meta.values(), &flat_state, target);
                    out.record(flat_diff(&to_flat(&net, &next), &flat_next));
                    out.record(max_abs_diff(&got.probs, &probs));
                    out.record((got.loss - loss).abs());
                    out.record((got.probs.iter().sum::<f64>() - 1.0).abs());
                    state = next;
                    flat_state = flat_next;
                }
                out.instances += 1;
            }
        }
    }
    out
}

/// LSTM baseline steps, three per instance, some starting from a reset.
pub fn lstm_steps(seed: u64, count: usize) -> Comparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Comparison::default();
    for trial in 0..count as u64 {
        let units = rng.random_range(1..9);
        let net = LstmBaseline::new(BaselineConfig { units }).unwrap();
        let mut params = net.init_params(trial);
        for p in params.values_mut() {
            let (r, c) = p.dim();
            *p = random_matrix(&mut rng, r, c, 1.0);
        }
        let mut state = LstmState {
            h: random_matrix(&mut rng, 1, units, 1.0),
            c: random_matrix(&mut rng, 1, units, 1.0),
            prev: if trial % 4 == 0 {
                None
            } else {
                Some(rng.random_range(0..27))
            },
        };
        for _ in 0..3 {
            let target = rng.random_range(0..27);
            let (h, c, probs, loss) = oracle::lstm_lm_step(
                params.values(),
                &state.h.row(0).to_vec(),
                &state.c.row(0).to_vec(),
                state.prev,
                target,
            );
            let (next, got_probs, got_loss) = net.step(&params, &state, target).unwrap();
            out.record(max_abs_diff(&next.h.row(0).to_vec(), &h));
            out.record(max_abs_diff(&next.c.row(0).to_vec(), &c));
            out.record(max_abs_diff(&got_probs, &probs));
            out.record((got_loss - loss).abs());
            assert_eq!(next.prev, Some(target));
            state = next;
        }
        out.instances += 1;
    }
    out
}
