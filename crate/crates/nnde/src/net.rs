//! Fixed-architecture feedforward network: scalar time in, `D` outputs, two
//! hidden layers of equal width with `sin` activations.
//!
//! The forward pass propagates a tangent alongside the primal so one
//! evaluation yields both `N(t)` and the exact `dN/dt`. Because the
//! architecture is fixed, the reverse pass is hand-derived over that extended
//! graph instead of going through a general tape. A value-only path (no
//! tangent, no derivative adjoints) exists for losses that never touch
//! `dN/dt`; it does roughly half the work and is what makes the regression
//! corrector cheap per iteration.

#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Weights and biases of the 1 -> width -> width -> D network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    width: usize,
    out_dim: usize,
    /// First layer weights, one per hidden unit (fan-in 1).
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Second layer weights, row-major `width x width`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Output layer weights, row-major `out_dim x width`.
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

/// Network output at one time point: `N(t)` and its exact time derivative.
#[derive(Debug, Clone)]
pub struct NetEval {
    pub value: Vec<f64>,
    pub time_derivative: Vec<f64>,
}

/// Partials of a scalar loss with respect to one `NetEval`.
#[derive(Debug, Clone)]
pub struct EvalAdjoint {
    pub wrt_value: Vec<f64>,
    pub wrt_derivative: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every parameter.
#[derive(Debug, Clone)]
pub struct NetworkGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

/// Deterministic parameter initialization: uniform entries scaled by
/// `1/sqrt(fan_in)` (variance exactly `1/fan_in`), biases zero.
pub fn init_params(seed: u64, width: usize, out_dim: usize) -> NetworkParams {
    assert!(width >= 1, "hidden width must be >= 1");
    assert!(out_dim >= 1, "output dimension must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
        let limit = (3.0 / fan_in as f64).sqrt();
        (0..n).map(|_| rng.random_range(-limit..limit)).collect()
    };
    NetworkParams {
        width,
        out_dim,
        w1: draw(width, 1),
        b1: vec![0.0; width],
        w2: draw(width * width, width),
        b2: vec![0.0; width],
        w3: draw(out_dim * width, width),
        b3: vec![0.0; out_dim],
    }
}

impl NetworkParams {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// All-zero parameters (zero network: `N == 0`, `dN/dt == 0`).
    pub fn zeros(width: usize, out_dim: usize) -> Self {
        NetworkParams {
            width,
            out_dim,
            w1: vec![0.0; width],
            b1: vec![0.0; width],
            w2: vec![0.0; width * width],
            b2: vec![0.0; width],
            w3: vec![0.0; out_dim * width],
            b3: vec![0.0; out_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn tensors(&self) -> [&Vec<f64>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// Total parameter count (for flat indexing in gradient checks).
    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat_get(&self, idx: usize) -> f64 {
        let mut i = idx;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index {idx} out of range");
    }

    pub fn flat_add(&mut self, idx: usize, delta: f64) {
        let mut i = idx;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] += delta;
                return;
            }
            i -= t.len();
        }
        panic!("flat index {idx} out of range");
    }

    /// Full extended evaluation: `N(t)` together with its exact `dN/dt`.
    pub fn forward(&self, t: f64) -> NetEval {
        let trace = self.forward_trace(t);
        NetEval {
            value: trace.value,
            time_derivative: trace.d_value,
        }
    }

    /// Primal-only evaluation of `N(t)`; skips the tangent chain entirely.
    pub fn forward_value(&self, t: f64) -> Vec<f64> {
        let w = self.width;
        let mut h1 = vec![0.0; w];
        for i in 0..w {
            h1[i] = (self.w1[i] * t + self.b1[i]).sin();
        }
        let mut h2 = vec![0.0; w];
        linalg::mat_vec(&self.w2, w, w, &h1, &mut h2);
        for (h, b) in h2.iter_mut().zip(&self.b2) {
            *h = (*h + b).sin();
        }
        let mut value = vec![0.0; self.out_dim];
        linalg::mat_vec(&self.w3, self.out_dim, w, &h2, &mut value);
        for (v, b) in value.iter_mut().zip(&self.b3) {
            *v += b;
        }
        value
    }

    pub(crate) fn forward_trace(&self, t: f64) -> ExtendedTrace {
        let w = self.width;
        // Layer 1: a1 = w1*t + b1, da1/dt = w1.
        let mut s1 = vec![0.0; w];
        let mut c1 = vec![0.0; w];
        let mut dh1 = vec![0.0; w];
        for i in 0..w {
            let a = self.w1[i] * t + self.b1[i];
            s1[i] = a.sin();
            c1[i] = a.cos();
            dh1[i] = c1[i] * self.w1[i];
        }
        // Layer 2: a2 = W2*h1 + b2, da2/dt = W2*dh1.
        let mut a2 = vec![0.0; w];
        linalg::mat_vec(&self.w2, w, w, &s1, &mut a2);
        let mut da2 = vec![0.0; w];
        linalg::mat_vec(&self.w2, w, w, &dh1, &mut da2);
        let mut s2 = vec![0.0; w];
        let mut c2 = vec![0.0; w];
        let mut dh2 = vec![0.0; w];
        for i in 0..w {
            let a = a2[i] + self.b2[i];
            s2[i] = a.sin();
            c2[i] = a.cos();
            dh2[i] = c2[i] * da2[i];
        }
        // Output layer.
        let mut value = vec![0.0; self.out_dim];
        linalg::mat_vec(&self.w3, self.out_dim, w, &s2, &mut value);
        for (v, b) in value.iter_mut().zip(&self.b3) {
            *v += b;
        }
        let mut d_value = vec![0.0; self.out_dim];
        linalg::mat_vec(&self.w3, self.out_dim, w, &dh2, &mut d_value);
        ExtendedTrace {
            t,
            s1,
            c1,
            dh1,
            da2,
            s2,
            c2,
            dh2,
            value,
            d_value,
        }
    }

    pub(crate) fn forward_value_trace(&self, t: f64) -> ValueTrace {
        let w = self.width;
        let mut s1 = vec![0.0; w];
        let mut c1 = vec![0.0; w];
        for i in 0..w {
            let a = self.w1[i] * t + self.b1[i];
            s1[i] = a.sin();
            c1[i] = a.cos();
        }
        let mut a2 = vec![0.0; w];
        linalg::mat_vec(&self.w2, w, w, &s1, &mut a2);
        let mut s2 = vec![0.0; w];
        let mut c2 = vec![0.0; w];
        for i in 0..w {
            let a = a2[i] + self.b2[i];
            s2[i] = a.sin();
            c2[i] = a.cos();
        }
        let mut value = vec![0.0; self.out_dim];
        linalg::mat_vec(&self.w3, self.out_dim, w, &s2, &mut value);
        for (v, b) in value.iter_mut().zip(&self.b3) {
            *v += b;
        }
        ValueTrace { t, s1, c1, s2, c2, value }
    }

    /// Reverse accumulation through the extended graph for one time point.
    /// `adj` carries the loss partials with respect to value and derivative.
    pub(crate) fn backward_into(
        &self,
        trace: &ExtendedTrace,
        adj: &EvalAdjoint,
        grads: &mut NetworkGrads,
    ) {
        let w = self.width;
        let d = self.out_dim;
        let gv = &adj.wrt_value;
        let gd = &adj.wrt_derivative;
        debug_assert_eq!(gv.len(), d);
        debug_assert_eq!(gd.len(), d);

        // Output layer: value = W3*h2 + b3, d_value = W3*dh2.
        for i in 0..d {
            let row = &mut grads.w3[i * w..(i + 1) * w];
            for j in 0..w {
                row[j] += gv[i] * trace.s2[j] + gd[i] * trace.dh2[j];
            }
            grads.b3[i] += gv[i];
        }
        let mut adj_h2 = vec![0.0; w];
        linalg::mat_t_vec(&self.w3, d, w, gv, &mut adj_h2);
        let mut adj_dh2 = vec![0.0; w];
        linalg::mat_t_vec(&self.w3, d, w, gd, &mut adj_dh2);

        // h2 = sin(a2), dh2 = cos(a2)*da2.
        let mut adj_a2 = vec![0.0; w];
        let mut adj_da2 = vec![0.0; w];
        for i in 0..w {
            adj_a2[i] = trace.c2[i] * adj_h2[i] - trace.s2[i] * trace.da2[i] * adj_dh2[i];
            adj_da2[i] = trace.c2[i] * adj_dh2[i];
        }

        // a2 = W2*h1 + b2, da2 = W2*dh1.
        for i in 0..w {
            let row = &mut grads.w2[i * w..(i + 1) * w];
            for j in 0..w {
                row[j] += adj_a2[i] * trace.s1[j] + adj_da2[i] * trace.dh1[j];
            }
            grads.b2[i] += adj_a2[i];
        }
        let mut adj_h1 = vec![0.0; w];
        linalg::mat_t_vec(&self.w2, w, w, &adj_a2, &mut adj_h1);
        let mut adj_dh1 = vec![0.0; w];
        linalg::mat_t_vec(&self.w2, w, w, &adj_da2, &mut adj_dh1);

        // h1 = sin(a1), dh1 = cos(a1)*w1, a1 = w1*t + b1.
        for i in 0..w {
            let adj_a1 = trace.c1[i] * adj_h1[i] - trace.s1[i] * self.w1[i] * adj_dh1[i];
            let adj_da1 = trace.c1[i] * adj_dh1[i];
            grads.w1[i] += trace.t * adj_a1 + adj_da1;
            grads.b1[i] += adj_a1;
        }
    }

    /// Reverse pass over the value-only graph; no tangent adjoints at all.
    pub(crate) fn backward_value_into(
        &self,
        trace: &ValueTrace,
        wrt_value: &[f64],
        grads: &mut NetworkGrads,
    ) {
        let w = self.width;
        let d = self.out_dim;
        debug_assert_eq!(wrt_value.len(), d);

        for i in 0..d {
            let row = &mut grads.w3[i * w..(i + 1) * w];
            for j in 0..w {
                row[j] += wrt_value[i] * trace.s2[j];
            }
            grads.b3[i] += wrt_value[i];
        }
        let mut adj_h2 = vec![0.0; w];
        linalg::mat_t_vec(&self.w3, d, w, wrt_value, &mut adj_h2);

        let mut adj_a2 = vec![0.0; w];
        for i in 0..w {
            adj_a2[i] = trace.c2[i] * adj_h2[i];
        }
        for i in 0..w {
            let row = &mut grads.w2[i * w..(i + 1) * w];
            for j in 0..w {
                row[j] += adj_a2[i] * trace.s1[j];
            }
            grads.b2[i] += adj_a2[i];
        }
        let mut adj_h1 = vec![0.0; w];
        linalg::mat_t_vec(&self.w2, w, w, &adj_a2, &mut adj_h1);

        for i in 0..w {
            let adj_a1 = trace.c1[i] * adj_h1[i];
            grads.w1[i] += trace.t * adj_a1;
            grads.b1[i] += adj_a1;
        }
    }
}

pub(crate) struct ExtendedTrace {
    t: f64,
    s1: Vec<f64>,
    c1: Vec<f64>,
    dh1: Vec<f64>,
    da2: Vec<f64>,
    s2: Vec<f64>,
    c2: Vec<f64>,
    dh2: Vec<f64>,
    pub(crate) value: Vec<f64>,
    pub(crate) d_value: Vec<f64>,
}

pub(crate) struct ValueTrace {
    t: f64,
    s1: Vec<f64>,
    c1: Vec<f64>,
    s2: Vec<f64>,
    c2: Vec<f64>,
    pub(crate) value: Vec<f64>,
}

impl NetworkGrads {
    pub fn zeros(width: usize, out_dim: usize) -> Self {
        NetworkGrads {
            w1: vec![0.0; width],
            b1: vec![0.0; width],
            w2: vec![0.0; width * width],
            b2: vec![0.0; width],
            w3: vec![0.0; out_dim * width],
            b3: vec![0.0; out_dim],
        }
    }

    pub(crate) fn tensors(&self) -> [&Vec<f64>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn flat_get(&self, idx: usize) -> f64 {
        let mut i = idx;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index {idx} out of range");
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |acc: f64, x| acc.max(x.abs()))
    }
}

/// Gradient of an arbitrary scalar loss over a batch of extended evaluations.
///
/// The loss closure receives the batch of `NetEval`s and must return the loss
/// together with its partials with respect to each evaluation's value and
/// time derivative; reverse accumulation through the network does the rest.
pub fn loss_gradient<L>(
    params: &NetworkParams,
    times: &[f64],
    loss: L,
) -> Result<(f64, NetworkGrads)>
where
    L: FnOnce(&[NetEval]) -> (f64, Vec<EvalAdjoint>),
{
    let traces: Vec<_> = times.iter().map(|&t| params.forward_trace(t)).collect();
    let evals: Vec<NetEval> = traces
        .iter()
        .map(|tr| NetEval {
            value: tr.value.clone(),
            time_derivative: tr.d_value.clone(),
        })
        .collect();
    for (eval, &t) in evals.iter().zip(times) {
        let finite = eval.value.iter().all(|x| x.is_finite())
            && eval.time_derivative.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFiniteEval { t });
        }
    }
    let (loss_value, adjoints) = loss(&evals);
    assert_eq!(adjoints.len(), traces.len(), "one adjoint per batch point");
    let mut grads = NetworkGrads::zeros(params.width, params.out_dim);
    for (trace, adj) in traces.iter().zip(&adjoints) {
        params.backward_into(trace, adj, &mut grads);
    }
    Ok((loss_value, grads))
}

/// Value-only variant of [`loss_gradient`] for losses that never look at
/// `dN/dt`. The closure gets the batch of values and returns the loss plus
/// its partial with respect to each value vector.
pub fn loss_gradient_value_only<L>(
    params: &NetworkParams,
    times: &[f64],
    loss: L,
) -> Result<(f64, NetworkGrads)>
where
    L: FnOnce(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
{
    let traces: Vec<_> = times
        .iter()
        .map(|&t| params.forward_value_trace(t))
        .collect();
    for (trace, &t) in traces.iter().zip(times) {
        if !trace.value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteEval { t });
        }
    }
    let values: Vec<Vec<f64>> = traces.iter().map(|tr| tr.value.clone()).collect();
    let (loss_value, adjoints) = loss(&values);
    assert_eq!(adjoints.len(), traces.len(), "one adjoint per batch point");
    let mut grads = NetworkGrads::zeros(params.width, params.out_dim);
    for (trace, adj) in traces.iter().zip(&adjoints) {
        params.backward_value_into(trace, adj, &mut grads);
    }
    Ok((loss_value, grads))
}
