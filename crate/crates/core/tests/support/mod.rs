#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use l2r::network::{NetworkState, PlasticNetwork};

use oracle::{FlatNet, FlatState};

pub fn flat_net(net: &PlasticNetwork) -> FlatNet {
    let cfg = net.config();
    FlatNet {
        sizes: net.layer_sizes().to_vec(),
        h_op: cfg.h_op,
        w_op: cfg.w_op,
        d_h: cfg.neuron_dim,
    }
}

pub fn to_flat(net: &PlasticNetwork, state: &NetworkState) -> FlatState {
    let total: usize = net.layer_sizes().iter().sum();
    let mut h = Vec::new();
    let mut w = Vec::new();
    for (l, &n) in net.layer_sizes().iter().enumerate() {
        for i in 0..n {
            h.push(state.h[l].row(i).to_vec());
            w.push((0..total).map(|j| state.w[l].row(i * total + j).to_vec()).collect());
        }
    }
    FlatState { h, w }
}

/// Random activations in (-1, 1) on top of a fresh state.
pub fn random_state(net: &PlasticNetwork, seed: u64) -> NetworkState {
    let mut state = net.init_state(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for h in &mut state.h {
        h.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    state
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat_diff(a: &FlatState, b: &FlatState) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.h.iter().zip(&b.h) {
        worst = worst.max(max_abs_diff(x, y));
    }
    for (xs, ys) in a.w.iter().zip(&b.w) {
        for (x, y) in xs.iter().zip(ys) {
            worst = worst.max(max_abs_diff(x, y));
        }
    }
    worst
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}
