//! The baseline network DE solver: prediction through the
//! initial-condition-enforcing parametrization `zhat(t) = z0 + (1 - e^-t) N(t)`,
//! the residual loss over randomly sampled time batches, and the training loop.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::{self, EvalAdjoint, NetworkParams};
use crate::systems::DynamicalSystem;

/// Abort threshold: a residual loss beyond this signals a bad learning rate
/// rather than anything worth continuing.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// One residual evaluation: `ell(t) = dzhat/dt - F(zhat(t))` and the
/// prediction it was computed at.
#[derive(Debug, Clone)]
pub struct ResidualSample {
    pub t: f64,
    pub ell: Vec<f64>,
    pub zhat: Vec<f64>,
}

/// Network plus problem data plus optimizer state for one solver instance.
#[derive(Debug, Clone)]
pub struct SolverState {
    net: NetworkParams,
    z0: Vec<f64>,
    t_max: f64,
    batch_size: usize,
    iteration: u64,
    opt: AdamState,
}

impl SolverState {
    pub fn new(
        net: NetworkParams,
        z0: Vec<f64>,
        t_max: f64,
        batch_size: usize,
        adam: AdamConfig,
    ) -> Result<Self> {
        if net.out_dim() != z0.len() {
            return Err(Error::DimensionMismatch {
                expected: net.out_dim(),
                got: z0.len(),
            });
        }
        if t_max <= 0.0 || t_max.is_nan() {
            return Err(Error::InvalidConfig(format!("T must be positive, got {t_max}")));
        }
        if batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch size M must be at least 2, got {batch_size}"
            )));
        }
        if !z0.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidConfig("z0 must be finite".into()));
        }
        let opt = AdamState::new(adam, net.width(), net.out_dim());
        Ok(SolverState {
            net,
            z0,
            t_max,
            batch_size,
            iteration: 0,
            opt,
        })
    }

    pub fn net(&self) -> &NetworkParams {
        &self.net
    }

    pub fn z0(&self) -> &[f64] {
        &self.z0
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn dim(&self) -> usize {
        self.z0.len()
    }

    /// `zhat(t) = z0 + (1 - e^-t) N(t)`. At `t = 0` the gate is exactly zero,
    /// so the initial condition holds to the bit regardless of the network.
    pub fn predict(&self, t: f64) -> Vec<f64> {
        let gate = 1.0 - (-t).exp();
        let mut v = self.net.forward_value(t);
        for (vi, z0i) in v.iter_mut().zip(&self.z0) {
            *vi = z0i + gate * *vi;
        }
        v
    }

    /// Prediction together with `dzhat/dt = e^-t N(t) + (1 - e^-t) dN/dt`.
    pub fn predict_with_derivative(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let gate = 1.0 - (-t).exp();
        let gate_dot = (-t).exp();
        let eval = self.net.forward(t);
        let mut zhat = vec![0.0; self.dim()];
        let mut dzhat = vec![0.0; self.dim()];
        for i in 0..self.dim() {
            zhat[i] = self.z0[i] + gate * eval.value[i];
            dzhat[i] = gate_dot * eval.value[i] + gate * eval.time_derivative[i];
        }
        (zhat, dzhat)
    }

    /// Local residual `ell(t) = dzhat/dt - F(zhat(t))`.
    pub fn residual(&self, sys: &DynamicalSystem, t: f64) -> Result<ResidualSample> {
        if sys.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: sys.dim(),
            });
        }
        let (zhat, dzhat) = self.predict_with_derivative(t);
        let mut flow = vec![0.0; self.dim()];
        sys.flow_into(&zhat, &mut flow);
        let ell = dzhat.iter().zip(&flow).map(|(d, f)| d - f).collect();
        Ok(ResidualSample { t, ell, zhat })
    }

    /// One gradient step on `L = mean(ell . ell)` over a fresh time batch.
    /// Returns the pre-step loss. The mean runs over both the batch points
    /// and the `D` components so learning rates transfer across systems.
    pub fn train_step<R: Rng>(&mut self, sys: &DynamicalSystem, rng: &mut R) -> Result<f64> {
        if sys.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: sys.dim(),
            });
        }
        let times = sample_times(self.batch_size, self.t_max, rng);
        let d = self.dim();
        let z0 = self.z0.clone();
        let norm = 1.0 / (times.len() as f64 * d as f64);

        let result = net::loss_gradient(&self.net, &times, |evals| {
            let mut loss = 0.0;
            let mut zhat = vec![0.0; d];
            let mut flow = vec![0.0; d];
            let mut jac = vec![0.0; d * d];
            let mut ell = vec![0.0; d];
            let mut scaled = vec![0.0; d];
            let mut jt_c = vec![0.0; d];
            let adjoints = times
                .iter()
                .zip(evals)
                .map(|(&t, eval)| {
                    let gate = 1.0 - (-t).exp();
                    let gate_dot = (-t).exp();
                    for i in 0..d {
                        zhat[i] = z0[i] + gate * eval.value[i];
                    }
                    sys.flow_into(&zhat, &mut flow);
                    for i in 0..d {
                        let dzhat = gate_dot * eval.value[i] + gate * eval.time_derivative[i];
                        ell[i] = dzhat - flow[i];
                        loss += ell[i] * ell[i] * norm;
                        scaled[i] = 2.0 * norm * ell[i];
                    }
                    // d ell / d value = gate_dot I - gate F_z;
                    // d ell / d derivative = gate I.
                    sys.flow_jacobian_into(&zhat, &mut jac);
                    linalg::mat_t_vec(&jac, d, d, &scaled, &mut jt_c);
                    let mut wrt_value = vec![0.0; d];
                    let mut wrt_derivative = vec![0.0; d];
                    for i in 0..d {
                        wrt_value[i] = gate_dot * scaled[i] - gate * jt_c[i];
                        wrt_derivative[i] = gate * scaled[i];
                    }
                    EvalAdjoint {
                        wrt_value,
                        wrt_derivative,
                    }
                })
                .collect();
            (loss, adjoints)
        });

        let (loss, grads) = match result {
            Ok(ok) => ok,
            Err(Error::NonFiniteEval { .. }) => {
                return Err(Error::TrainingDiverged {
                    iteration: self.iteration,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::TrainingDiverged {
                iteration: self.iteration,
                loss,
            });
        }
        self.opt.step(&mut self.net, &grads);
        self.iteration += 1;
        Ok(loss)
    }

    /// Residual loss on a given batch without updating anything.
    pub fn loss_on(&self, sys: &DynamicalSystem, times: &[f64]) -> Result<f64> {
        let d = self.dim();
        let mut loss = 0.0;
        for &t in times {
            let sample = self.residual(sys, t)?;
            loss += linalg::dot(&sample.ell, &sample.ell);
        }
        Ok(loss / (times.len() as f64 * d as f64))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = SolverCheckpoint {
            net: self.net.clone(),
            z0: self.z0.clone(),
            t_max: self.t_max,
            batch_size: self.batch_size,
            iteration: self.iteration,
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &ck)?;
        Ok(())
    }

    /// Restore a solver from a checkpoint. Optimizer moments are not part of
    /// the format; a resumed run starts with fresh accumulators.
    pub fn load_checkpoint(path: &Path, adam: AdamConfig) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: SolverCheckpoint = serde_json::from_reader(file)?;
        let mut state = SolverState::new(ck.net, ck.z0, ck.t_max, ck.batch_size, adam)?;
        state.iteration = ck.iteration;
        Ok(state)
    }
}

/// Key -> array map of everything needed to reconstruct a prediction.
#[derive(Debug, Serialize, Deserialize)]
struct SolverCheckpoint {
    net: NetworkParams,
    z0: Vec<f64>,
    t_max: f64,
    batch_size: usize,
    iteration: u64,
}

/// `M + 1` time points: `t_0 = 0`, `t_M = T`, and `M - 1` interior points
/// drawn uniformly from `(0, T)`, sorted ascending.
pub fn sample_times<R: Rng>(m: usize, t_max: f64, rng: &mut R) -> Vec<f64> {
    assert!(m >= 2, "batch size M must be at least 2");
    let mut times = Vec::with_capacity(m + 1);
    times.push(0.0);
    for _ in 0..m - 1 {
        times.push(rng.random_range(0.0..t_max).max(f64::MIN_POSITIVE));
    }
    times.push(t_max);
    times.sort_by(f64::total_cmp);
    times
}
