//! Scalar-loop reference implementations. Nothing here touches the tape;
//! every quantity is computed one neuron, one synapse and one component at
//! a time from the update equations.

use ndarray::Array2;

use l2r::kernels::OpKind;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x . w + b` for a row vector `x`.
pub fn dense(x: &[f64], w: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
    assert_eq!(x.len(), w.nrows());
    (0..w.ncols())
        .map(|c| {
            let mut acc = b[[0, c]];
            for (r, xr) in x.iter().enumerate() {
                acc += xr * w[[r, c]];
            }
            acc
        })
        .collect()
}

fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Neuron,
    Synapse,
    Readout,
}

/// One operator step on a single state vector. `p` holds the operator's
/// parameter matrices in slot order.
pub fn op_step(
    op: OpKind,
    role: Role,
    p: &[Array2<f64>],
    state: &[f64],
    input: &[f64],
    hebb: Option<&[f64]>,
) -> Vec<f64> {
    let s = state.len();
    match op {
        OpKind::Mlp | OpKind::MlpTanh => {
            let hidden: Vec<f64> = dense(&cat(state, input), &p[0], &p[1])
                .into_iter()
                .map(f64::tanh)
                .collect();
            let out = dense(&hidden, &p[2], &p[3]);
            out.into_iter()
                .map(|v| match (role, op) {
                    (Role::Readout, _) => v,
                    (_, OpKind::MlpTanh) => v.tanh(),
                    (Role::Neuron, _) => sigmoid(v),
                    (Role::Synapse, _) => v,
                })
                .collect()
        }
        OpKind::Gated => {
            let hidden: Vec<f64> = dense(&cat(state, input), &p[0], &p[1])
                .into_iter()
                .map(f64::tanh)
                .collect();
            let ab = dense(&hidden, &p[2], &p[3]);
            (0..s)
                .map(|c| {
                    let g = sigmoid(ab[c]);
                    let r = ab[s + c].tanh();
                    let hb = hebb.map_or(0.0, |h| h[c]);
                    (1.0 - g) * state[c] + g * (r + hb)
                })
                .collect()
        }
        OpKind::Lstm | OpKind::LstmSigmoid | OpKind::LstmId => {
            let k = s / 2;
            let (hid, cell) = state.split_at(k);
            let z = dense(&cat(hid, input), &p[0], &p[1]);
            let mut h_new = vec![0.0; k];
            let mut c_new = vec![0.0; k];
            for c in 0..k {
                let i = sigmoid(z[c]);
                let f = sigmoid(z[k + c]);
                let o = sigmoid(z[2 * k + c]);
                let cand = z[3 * k + c].tanh();
                c_new[c] = f * cell[c] + i * cand;
                let squashed = match op {
                    OpKind::Lstm => c_new[c].tanh(),
                    OpKind::LstmSigmoid => sigmoid(c_new[c]),
                    _ => c_new[c],
                };
                h_new[c] = o * squashed;
            }
            cat(&h_new, &c_new)
        }
    }
}

pub fn op_param_count(op: OpKind) -> usize {
    if op.is_lstm() {
        2
    } else {
        4
    }
}

/// Plain-vector network description.
#[derive(Clone, Debug)]
pub struct FlatNet {
    /// Layer sizes, input layer last.
    pub sizes: Vec<usize>,
    pub h_op: OpKind,
    pub w_op: OpKind,
    pub d_h: usize,
}

/// `h[neuron][component]` with neurons numbered globally; `w[post][pre]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatState {
    pub h: Vec<Vec<f64>>,
    pub w: Vec<Vec<Vec<f64>>>,
}

impl FlatNet {
    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    fn layer_of(&self, neuron: usize) -> usize {
        let mut start = 0;
        for (l, &n) in self.sizes.iter().enumerate() {
            if neuron < start + n {
                return l;
            }
            start += n;
        }
        panic!("neuron {neuron} out of range");
    }

    fn layer_start(&self, layer: usize) -> usize {
        self.sizes[..layer].iter().sum()
    }

    /// One full step. `meta` holds every parameter matrix in slot order:
    /// synapse operator, neuron operator, readout, embeddings.
    pub fn step(&self, meta: &[Array2<f64>], state: &FlatState, target: usize) -> (FlatState, Vec<f64>, f64) {
        let nw = op_param_count(self.w_op);
        let nh = op_param_count(self.h_op);
        let w_params = &meta[..nw];
        let h_params = &meta[nw..nw + nh];
        let r_params = &meta[nw + nh..nw + nh + 4];
        let emb = &meta[nw + nh + 4];
        let embedding = |l: usize| emb.row(l).to_vec();

        let total = self.total();
        let mut h = state.h.clone();
        let mut w = state.w.clone();
        let mut probs = Vec::new();
        let mut loss = 0.0;

        for l in 0..self.sizes.len() {
            let start = self.layer_start(l);
            let n = self.sizes[l];
            let old_h = h.clone();
            let mut new_h_layer = Vec::new();
            let mut u_all = Vec::new();
            for i in start..start + n {
                let mut u = vec![0.0; w[i][0].len()];
                for j in 0..total {
                    let w_ij = &state.w[i][j];
                    let effect: Vec<f64> = w_ij.iter().map(|x| x * old_h[j][0]).collect();
                    for (acc, e) in u.iter_mut().zip(&effect) {
                        *acc += e;
                    }
                    let hebb: Vec<f64> = old_h[i].iter().map(|x| x * old_h[j][1]).collect();
                    let mut x = Vec::new();
                    x.extend_from_slice(&old_h[i]);
                    x.extend_from_slice(&old_h[j]);
                    x.extend_from_slice(&effect);
                    x.extend_from_slice(&hebb);
                    x.extend(embedding(l));
                    x.extend(embedding(self.layer_of(j)));
                    let gated = self.w_op == OpKind::Gated;
                    w[i][j] = op_step(self.w_op, Role::Synapse, w_params, w_ij, &x, gated.then_some(&hebb[..]));
                }
                u_all.push(u.clone());
                let input = cat(&u, &embedding(l));
                if l + 1 < self.sizes.len() {
                    new_h_layer.push(op_step(self.h_op, Role::Neuron, h_params, &old_h[i], &input, None));
                } else {
                    new_h_layer.push(op_step(OpKind::Mlp, Role::Readout, r_params, &old_h[i], &input, None));
                }
            }
            if l + 1 < self.sizes.len() {
                for (k, v) in new_h_layer.into_iter().enumerate() {
                    h[start + k] = v;
                }
            } else {
                // per-component softmax across the input neurons
                let d = self.d_h;
                let mut soft = vec![vec![0.0; d]; n];
                for c in 0..d {
                    let max = new_h_layer.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = new_h_layer.iter().map(|v| (v[c] - max).exp()).sum();
                    for k in 0..n {
                        soft[k][c] = (new_h_layer[k][c] - max).exp() / denom;
                    }
                }
                probs = soft.iter().map(|v| v[0]).collect();
                loss = -probs[target].ln();
                for k in 0..n {
                    let y = if k == target { 1.0 } else { 0.0 };
                    let mut v = vec![y];
                    v.extend_from_slice(&soft[k][1..d - 1]);
                    v.push(y - probs[k]);
                    h[start + k] = v;
                }
            }
        }
        (FlatState { h, w }, probs, loss)
    }
}

/// Character LSTM baseline step with parameters `[w, b, w_out, b_out]`.
pub fn lstm_lm_step(
    p: &[Array2<f64>],
    h: &[f64],
    c: &[f64],
    prev: Option<usize>,
    target: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let u = h.len();
    let alphabet = p[3].ncols();
    let mut x = vec![0.0; alphabet];
    if let Some(s) = prev {
        x[s] = 1.0;
    }
    let z = dense(&cat(&x, h), &p[0], &p[1]);
    let mut h_new = vec![0.0; u];
    let mut c_new = vec![0.0; u];
    for k in 0..u {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[u + k]);
        let o = sigmoid(z[2 * u + k]);
        let cand = z[3 * u + k].tanh();
        c_new[k] = f * c[k] + i * cand;
        h_new[k] = o * c_new[k].tanh();
    }
    let logits = dense(&h_new, &p[2], &p[3]);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|v| (v - max).exp() / denom).collect();
    let loss = -probs[target].ln();
    (h_new, c_new, probs, loss)
}
