//! Error correction by a second network.
//!
//! Two schemes share the state type so experiments can compare them under
//! identical budgets. The regression mode fits the duplicate network to the
//! integrated error dataset; its loss never evaluates a time derivative,
//! which is where the per-iteration speedup over residual training comes
//! from. The residual mode trains the duplicate as a second DE solver on the
//! Taylor-expanded residual identity, keeping the differential-term cost.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::errquant::{ErrorDataset, TruncationOrder};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::{self, EvalAdjoint, NetworkParams};
use crate::solver::{SolverState, DIVERGENCE_LIMIT};
use crate::systems::DynamicalSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    /// Fit the error dataset directly (no differential terms).
    Regression,
    /// Minimize the expanded residual of the error equation.
    Residual,
}

/// Duplicate network, its training data, and optimizer state.
#[derive(Debug, Clone)]
pub struct CorrectionState {
    net2: NetworkParams,
    dataset: ErrorDataset,
    batch_size: usize,
    iteration: u64,
    mode: CorrectionMode,
    opt: AdamState,
}

impl CorrectionState {
    /// Duplicate the primary solver's architecture with freshly initialized
    /// weights and attach the error dataset.
    ///
    /// The duplicate's output layer is rescaled to the dataset's error
    /// magnitude: the targets are typically orders of magnitude below the
    /// primary's outputs, and an O(1) initial correction buries them under
    /// fit noise for the whole training budget.
    pub fn new(
        primary: &NetworkParams,
        reinit_seed: u64,
        dataset: ErrorDataset,
        batch_size: usize,
        mode: CorrectionMode,
        adam: AdamConfig,
    ) -> Result<Self> {
        if dataset.dim != primary.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: primary.out_dim(),
                got: dataset.dim,
            });
        }
        if dataset.len() < batch_size + 1 {
            return Err(Error::DatasetTooSmall {
                rows: dataset.len(),
                needed: batch_size + 1,
            });
        }
        let mut net2 = net::init_params(reinit_seed, primary.width(), primary.out_dim());
        let target_scale = (0..dataset.len())
            .map(|i| linalg::norm(dataset.dz_ec_at(i)))
            .fold(0.0, f64::max);
        for w in net2.w3.iter_mut() {
            *w *= target_scale.max(1e-8);
        }
        let opt = AdamState::new(adam, net2.width(), net2.out_dim());
        Ok(CorrectionState {
            net2,
            dataset,
            batch_size,
            iteration: 0,
            mode,
            opt,
        })
    }

    pub fn net2(&self) -> &NetworkParams {
        &self.net2
    }

    /// Replace the duplicate network, e.g. with parameters restored from a
    /// saved model. The replacement must match the existing shape.
    pub fn set_duplicate(&mut self, net2: NetworkParams) -> Result<()> {
        if net2.width() != self.net2.width() || net2.out_dim() != self.net2.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.net2.out_dim(),
                got: net2.out_dim(),
            });
        }
        self.net2 = net2;
        Ok(())
    }

    pub fn dataset(&self) -> &ErrorDataset {
        &self.dataset
    }

    pub fn mode(&self) -> CorrectionMode {
        self.mode
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn dim(&self) -> usize {
        self.net2.out_dim()
    }

    /// `dzhat(t) = (1 - e^-t) N2(t)`; exactly zero at `t = 0`.
    pub fn predict_correction(&self, t: f64) -> Vec<f64> {
        let gate = 1.0 - (-t).exp();
        let mut v = self.net2.forward_value(t);
        for x in v.iter_mut() {
            *x *= gate;
        }
        v
    }

    /// Correction and its time derivative (needed by the residual mode).
    pub fn predict_correction_with_derivative(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let gate = 1.0 - (-t).exp();
        let gate_dot = (-t).exp();
        let eval = self.net2.forward(t);
        let d = self.dim();
        let mut value = vec![0.0; d];
        let mut derivative = vec![0.0; d];
        for i in 0..d {
            value[i] = gate * eval.value[i];
            derivative[i] = gate_dot * eval.value[i] + gate * eval.time_derivative[i];
        }
        (value, derivative)
    }

    /// One gradient step on `L2 = mean(|dz_ec - dzhat|^2)` over a pinned
    /// batch. Value-only forward and backward passes: no `dzhat/dt`
    /// evaluation anywhere in this step.
    pub fn regression_train_step<R: Rng>(&mut self, rng: &mut R) -> Result<f64> {
        if self.mode != CorrectionMode::Regression {
            return Err(Error::InvalidConfig(
                "regression_train_step requires regression mode".into(),
            ));
        }
        let indices = assemble_batch(&self.dataset, self.batch_size, rng)?;
        let times: Vec<f64> = indices.iter().map(|&i| self.dataset.times[i]).collect();
        let d = self.dim();
        let norm = 1.0 / (times.len() as f64 * d as f64);
        let dataset = &self.dataset;

        let result = net::loss_gradient_value_only(&self.net2, &times, |values| {
            let mut loss = 0.0;
            let adjoints = indices
                .iter()
                .zip(values)
                .zip(&times)
                .map(|((&idx, value), &t)| {
                    let gate = 1.0 - (-t).exp();
                    let target = dataset.dz_ec_at(idx);
                    let mut wrt_value = vec![0.0; d];
                    for i in 0..d {
                        let l2 = target[i] - gate * value[i];
                        loss += l2 * l2 * norm;
                        wrt_value[i] = -2.0 * norm * gate * l2;
                    }
                    wrt_value
                })
                .collect();
            (loss, adjoints)
        });
        self.finish_step(result)
    }

    /// Expanded residual of the error equation at a stored grid point:
    ///
    /// `l2(t) = ell(t) - [F_z dzhat + dzhat^T F_zz dzhat / 2] + d(dzhat)/dt`
    ///
    /// with `F` derivatives taken at the frozen primary prediction and the
    /// Taylor truncation matching the dataset's configured order.
    pub fn appendix_residual(&self, sys: &DynamicalSystem, t: f64) -> Result<Vec<f64>> {
        if self.mode != CorrectionMode::Residual {
            return Err(Error::InvalidConfig(
                "appendix_residual requires residual mode".into(),
            ));
        }
        let idx = self.dataset.index_of(t)?;
        let d = self.dim();
        let (dzhat, ddzhat) = self.predict_correction_with_derivative(t);
        let zhat = self.dataset.zhat_at(idx);
        let ell = self.dataset.ell_at(idx);

        let mut jac = vec![0.0; d * d];
        sys.flow_jacobian_into(zhat, &mut jac);
        let mut linear = vec![0.0; d];
        linalg::mat_vec(&jac, d, d, &dzhat, &mut linear);
        let mut quad = vec![0.0; d];
        if self.dataset.order == TruncationOrder::Second {
            let mut tensor = vec![0.0; d * d * d];
            sys.flow_second_derivative_into(zhat, &mut tensor);
            sys.contract_second(&tensor, &dzhat, &dzhat, &mut quad);
        }
        Ok((0..d)
            .map(|i| ell[i] - linear[i] - 0.5 * quad[i] + ddzhat[i])
            .collect())
    }

    /// One gradient step on `L2 = mean(l2 . l2)` over a pinned batch of
    /// stored grid points. Structurally the same work as a primary training
    /// iteration (the differential term is back).
    pub fn appendix_train_step<R: Rng>(
        &mut self,
        sys: &DynamicalSystem,
        rng: &mut R,
    ) -> Result<f64> {
        if self.mode != CorrectionMode::Residual {
            return Err(Error::InvalidConfig(
                "appendix_train_step requires residual mode".into(),
            ));
        }
        let indices = assemble_batch(&self.dataset, self.batch_size, rng)?;
        let times: Vec<f64> = indices.iter().map(|&i| self.dataset.times[i]).collect();
        let d = self.dim();
        let norm = 1.0 / (times.len() as f64 * d as f64);
        let order = self.dataset.order;
        let dataset = &self.dataset;

        let result = net::loss_gradient(&self.net2, &times, |evals| {
            let mut loss = 0.0;
            let mut jac = vec![0.0; d * d];
            let mut tensor = vec![0.0; d * d * d];
            let mut dzhat = vec![0.0; d];
            let mut linear = vec![0.0; d];
            let mut quad = vec![0.0; d];
            let mut quad_jac = vec![0.0; d * d];
            let mut scaled = vec![0.0; d];
            let mut jt_c = vec![0.0; d];
            let mut qt_c = vec![0.0; d];
            let adjoints = indices
                .iter()
                .zip(evals)
                .zip(&times)
                .map(|((&idx, eval), &t)| {
                    let gate = 1.0 - (-t).exp();
                    let gate_dot = (-t).exp();
                    let zhat = dataset.zhat_at(idx);
                    let ell = dataset.ell_at(idx);
                    for (dz, v) in dzhat.iter_mut().zip(&eval.value) {
                        *dz = gate * v;
                    }
                    sys.flow_jacobian_into(zhat, &mut jac);
                    linalg::mat_vec(&jac, d, d, &dzhat, &mut linear);
                    if order == TruncationOrder::Second {
                        sys.flow_second_derivative_into(zhat, &mut tensor);
                        sys.contract_second(&tensor, &dzhat, &dzhat, &mut quad);
                        // Q_ij = sum_k F_zz[i][j][k] dzhat_k.
                        for i in 0..d {
                            for j in 0..d {
                                let row = &tensor[i * d * d + j * d..i * d * d + (j + 1) * d];
                                quad_jac[i * d + j] = linalg::dot(row, &dzhat);
                            }
                        }
                    } else {
                        quad.fill(0.0);
                        quad_jac.fill(0.0);
                    }
                    for i in 0..d {
                        let ddzhat = gate_dot * eval.value[i] + gate * eval.time_derivative[i];
                        let l2 = ell[i] - linear[i] - 0.5 * quad[i] + ddzhat;
                        loss += l2 * l2 * norm;
                        scaled[i] = 2.0 * norm * l2;
                    }
                    linalg::mat_t_vec(&jac, d, d, &scaled, &mut jt_c);
                    linalg::mat_t_vec(&quad_jac, d, d, &scaled, &mut qt_c);
                    let mut wrt_value = vec![0.0; d];
                    let mut wrt_derivative = vec![0.0; d];
                    for i in 0..d {
                        wrt_value[i] = gate_dot * scaled[i] - gate * (jt_c[i] + qt_c[i]);
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
        self.finish_step(result)
    }

    fn finish_step(&mut self, result: Result<(f64, net::NetworkGrads)>) -> Result<f64> {
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
        self.opt.step(&mut self.net2, &grads);
        self.iteration += 1;
        Ok(loss)
    }
}

/// Batch of `M + 1` dataset row indices: always the `t = 0` and `t = T`
/// rows, plus `M - 1` interior rows drawn uniformly without replacement.
pub fn assemble_batch<R: Rng>(
    dataset: &ErrorDataset,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let rows = dataset.len();
    if rows < m + 1 {
        return Err(Error::DatasetTooSmall {
            rows,
            needed: m + 1,
        });
    }
    let interior = rows - 2;
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, interior, m - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    picked.sort_unstable();
    let mut batch = Vec::with_capacity(m + 1);
    batch.push(0);
    batch.extend(picked);
    batch.push(rows - 1);
    Ok(batch)
}

/// `z(0) + (1 - e^-t)(N(t) + N2(t))`, computed as the exact sum of the
/// primary prediction and the correction.
pub fn corrected_prediction(solver: &SolverState, correction: &CorrectionState, t: f64) -> Vec<f64> {
    let mut z = solver.predict(t);
    let c = correction.predict_correction(t);
    for (zi, ci) in z.iter_mut().zip(&c) {
        *zi += ci;
    }
    z
}

/// Final corrected model: both parameter sets plus the problem data needed
/// to evaluate the summed prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectedModel {
    pub primary: NetworkParams,
    pub secondary: NetworkParams,
    pub z0: Vec<f64>,
    pub t_max: f64,
    pub mode: CorrectionMode,
}

impl CorrectedModel {
    pub fn from_parts(solver: &SolverState, correction: &CorrectionState) -> Self {
        CorrectedModel {
            primary: solver.net().clone(),
            secondary: correction.net2().clone(),
            z0: solver.z0().to_vec(),
            t_max: solver.t_max(),
            mode: correction.mode(),
        }
    }

    /// Same association as [`corrected_prediction`] so a saved model
    /// reproduces the in-memory prediction bit for bit.
    pub fn predict(&self, t: f64) -> Vec<f64> {
        let gate = 1.0 - (-t).exp();
        let n1 = self.primary.forward_value(t);
        let n2 = self.secondary.forward_value(t);
        self.z0
            .iter()
            .zip(n1.iter().zip(&n2))
            .map(|(z0, (a, b))| (z0 + gate * a) + gate * b)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::AdamConfig;
    use crate::errquant::{generate_correction_dataset, integrate_error};
    use crate::net::init_params;
    use crate::solver::ResidualSample;
    use crate::systems::nonlinear_oscillator;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn flat_dataset(t_end: f64, n: usize, dim: usize) -> ErrorDataset {
        // Zero residuals on a trivial prediction; dz_ec == 0 throughout.
        let sys = nonlinear_oscillator();
        assert_eq!(dim, 2);
        let samples: Vec<ResidualSample> = (0..=n)
            .map(|i| ResidualSample {
                t: i as f64 * t_end / n as f64,
                ell: vec![0.0; dim],
                zhat: vec![1.0, 0.0],
            })
            .collect();
        integrate_error(&sys, &samples, TruncationOrder::Second).unwrap()
    }

    fn correction_with(
        dataset: ErrorDataset,
        seed: u64,
        m: usize,
        mode: CorrectionMode,
    ) -> CorrectionState {
        let primary = init_params(0, 8, 2);
        CorrectionState::new(&primary, seed, dataset, m, mode, AdamConfig::default()).unwrap()
    }

    /// Dataset with O(0.1) residuals and well-behaved dz_ec targets.
    fn small_error_dataset(t_end: f64, n: usize) -> ErrorDataset {
        let sys = nonlinear_oscillator();
        let samples: Vec<ResidualSample> = (0..=n)
            .map(|i| {
                let t = i as f64 * t_end / n as f64;
                ResidualSample {
                    t,
                    ell: vec![0.05 * t.sin(), -0.04 * t.cos()],
                    zhat: vec![t.cos(), t.sin()],
                }
            })
            .collect();
        integrate_error(&sys, &samples, TruncationOrder::Second).unwrap()
    }

    #[test]
    fn correction_vanishes_at_t_zero() {
        let c = correction_with(flat_dataset(5.0, 50, 2), 3, 10, CorrectionMode::Regression);
        assert_eq!(c.predict_correction(0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_duplicate_network_gives_zero_correction() {
        let mut c = correction_with(flat_dataset(5.0, 50, 2), 3, 10, CorrectionMode::Regression);
        c.net2 = NetworkParams::zeros(8, 2);
        for t in [0.0, 1.0, 4.9] {
            assert_eq!(c.predict_correction(t), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn constant_duplicate_output_is_gated() {
        let mut c = correction_with(flat_dataset(5.0, 50, 2), 3, 10, CorrectionMode::Regression);
        let mut net2 = NetworkParams::zeros(8, 2);
        net2.b3 = vec![0.7, -0.3];
        c.net2 = net2;
        for t in [0.5f64, 2.0] {
            let gate = 1.0 - (-t).exp();
            let v = c.predict_correction(t);
            assert!((v[0] - gate * 0.7).abs() < 1e-15);
            assert!((v[1] + gate * 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn batches_pin_both_endpoints_and_draw_distinct_interiors() {
        let ds = flat_dataset(5.0, 200, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let batch = assemble_batch(&ds, 20, &mut rng).unwrap();
            assert_eq!(batch.len(), 21);
            assert_eq!(batch[0], 0);
            assert_eq!(*batch.last().unwrap(), 200);
            let unique: HashSet<usize> = batch.iter().copied().collect();
            assert_eq!(unique.len(), batch.len());
        }
    }

    #[test]
    fn batch_needs_enough_rows() {
        let ds = flat_dataset(5.0, 10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(assemble_batch(&ds, 10, &mut rng).is_ok());
        assert!(matches!(
            assemble_batch(&ds, 11, &mut rng),
            Err(Error::DatasetTooSmall { rows: 11, needed: 12 })
        ));
    }

    /// With k = 50 the pool of interior rows is so much larger than the
    /// batch that repeated batches effectively never happen.
    #[test]
    fn large_grid_multiplier_avoids_repeated_batches() {
        let sys = nonlinear_oscillator();
        let net = NetworkParams::zeros(8, 2);
        let solver = SolverState::new(net, vec![0.0, 0.0], 5.0, 10, AdamConfig::default()).unwrap();
        let ds = generate_correction_dataset(&solver, &sys, 50, TruncationOrder::Second).unwrap();
        assert_eq!(ds.len(), 501);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = HashSet::new();
        for _ in 0..1000 {
            let batch = assemble_batch(&ds, 10, &mut rng).unwrap();
            seen.insert(batch);
        }
        assert_eq!(seen.len(), 1000, "expected all 1000 batches distinct");
    }

    #[test]
    fn exact_fit_is_a_fixed_point_of_regression() {
        // dz_ec == 0 and N2 == 0: the fit is exact, so the loss is zero and
        // the parameters do not move.
        let mut c = correction_with(flat_dataset(5.0, 60, 2), 3, 10, CorrectionMode::Regression);
        c.net2 = NetworkParams::zeros(8, 2);
        let before = c.net2.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let loss = c.regression_train_step(&mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(c.net2, before);
    }

    #[test]
    fn regression_toward_zero_targets_reduces_loss() {
        let mut c = correction_with(flat_dataset(5.0, 60, 2), 7, 10, CorrectionMode::Regression);
        // Start from an O(1) duplicate so descent toward the zero targets is
        // visible (the scale-matched constructor would start at the fit).
        c.net2 = init_params(7, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let initial = c.regression_train_step(&mut rng).unwrap();
        let mut last = initial;
        for _ in 0..300 {
            last = c.regression_train_step(&mut rng).unwrap();
        }
        assert!(last < initial, "loss {initial} -> {last}");
        assert_eq!(c.iteration(), 301);
    }

    #[test]
    fn regression_gradient_matches_finite_difference() {
        let sys = nonlinear_oscillator();
        // A dataset with nonzero targets.
        let samples: Vec<ResidualSample> = (0..=40)
            .map(|i| {
                let t = i as f64 * 3.0 / 40.0;
                ResidualSample {
                    t,
                    ell: vec![0.05 * t.sin(), -0.04 * t.cos()],
                    zhat: vec![t.cos(), t.sin()],
                }
            })
            .collect();
        let ds = integrate_error(&sys, &samples, TruncationOrder::Second).unwrap();
        let c = correction_with(ds.clone(), 11, 6, CorrectionMode::Regression);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let indices = assemble_batch(&ds, 6, &mut rng).unwrap();
        let times: Vec<f64> = indices.iter().map(|&i| ds.times[i]).collect();
        let d = 2;
        let norm = 1.0 / (times.len() as f64 * d as f64);

        let loss_of = |p: &NetworkParams| -> f64 {
            indices
                .iter()
                .map(|&idx| {
                    let t = ds.times[idx];
                    let gate = 1.0 - (-t).exp();
                    let v = p.forward_value(t);
                    let target = ds.dz_ec_at(idx);
                    (0..d)
                        .map(|i| {
                            let l2 = target[i] - gate * v[i];
                            l2 * l2 * norm
                        })
                        .sum::<f64>()
                })
                .sum()
        };
        let (_, grads) = net::loss_gradient_value_only(&c.net2, &times, |values| {
            let mut loss = 0.0;
            let adjoints = indices
                .iter()
                .zip(values)
                .zip(&times)
                .map(|((&idx, value), &t)| {
                    let gate = 1.0 - (-t).exp();
                    let target = ds.dz_ec_at(idx);
                    let mut wrt = vec![0.0; d];
                    for i in 0..d {
                        let l2 = target[i] - gate * value[i];
                        loss += l2 * l2 * norm;
                        wrt[i] = -2.0 * norm * gate * l2;
                    }
                    wrt
                })
                .collect();
            (loss, adjoints)
        })
        .unwrap();

        let h = 1e-6;
        for idx in 0..c.net2.n_params() {
            let mut plus = c.net2.clone();
            plus.flat_add(idx, h);
            let mut minus = c.net2.clone();
            minus.flat_add(idx, -h);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let analytic = grads.flat_get(idx);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom <= 1e-5,
                "param {idx}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn corrected_prediction_is_the_literal_sum() {
        let net = init_params(5, 8, 2);
        let solver = SolverState::new(net, vec![1.0, 0.2], 5.0, 10, AdamConfig::default()).unwrap();
        let c = CorrectionState::new(
            solver.net(),
            99,
            small_error_dataset(5.0, 40),
            10,
            CorrectionMode::Regression,
            AdamConfig::default(),
        )
        .unwrap();
        for t in [0.0, 0.7, 3.3, 5.0] {
            let sum = corrected_prediction(&solver, &c, t);
            let p = solver.predict(t);
            let q = c.predict_correction(t);
            for i in 0..2 {
                assert_eq!(sum[i], p[i] + q[i]);
            }
        }
        // t = 0 lands exactly on z0, and a zero duplicate reduces the sum to
        // the primary prediction.
        assert_eq!(corrected_prediction(&solver, &c, 0.0), vec![1.0, 0.2]);
        let mut czero = c.clone();
        czero.net2 = NetworkParams::zeros(8, 2);
        for t in [0.4, 2.0] {
            assert_eq!(corrected_prediction(&solver, &czero, t), solver.predict(t));
        }
    }

    #[test]
    fn appendix_residual_reduces_to_ell_for_zero_correction() {
        let sys = nonlinear_oscillator();
        let net = init_params(6, 8, 2);
        let solver = SolverState::new(net, vec![0.8, 0.1], 4.0, 10, AdamConfig::default()).unwrap();
        let ds = generate_correction_dataset(&solver, &sys, 4, TruncationOrder::Second).unwrap();
        let mut c = CorrectionState::new(
            solver.net(),
            12,
            ds,
            10,
            CorrectionMode::Residual,
            AdamConfig::default(),
        )
        .unwrap();
        c.net2 = NetworkParams::zeros(8, 2);
        for idx in [0, 7, 40] {
            let t = c.dataset.times[idx];
            let l2 = c.appendix_residual(&sys, t).unwrap();
            let ell = c.dataset.ell_at(idx);
            assert_eq!(l2.as_slice(), ell);
        }
    }

    #[test]
    fn appendix_residual_zero_when_both_vanish() {
        // ell == 0 (zero-residual dataset) and dzhat == 0.
        let mut c = correction_with(flat_dataset(4.0, 80, 2), 13, 10, CorrectionMode::Residual);
        let sys = nonlinear_oscillator();
        c.net2 = NetworkParams::zeros(8, 2);
        for idx in [0, 33, 80] {
            let t = c.dataset.times[idx];
            let l2 = c.appendix_residual(&sys, t).unwrap();
            assert!(l2.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn appendix_residual_rejects_off_grid_times() {
        let c = correction_with(flat_dataset(4.0, 80, 2), 13, 10, CorrectionMode::Residual);
        let sys = nonlinear_oscillator();
        assert!(matches!(
            c.appendix_residual(&sys, 1.234567),
            Err(Error::OffGrid { .. })
        ));
    }

    /// On a linear system the expanded residual identity is exact: l2 must
    /// equal the residual of the corrected prediction computed from scratch.
    #[test]
    fn appendix_residual_matches_corrected_residual_on_linear_flow() {
        let sys = DynamicalSystem::custom(
            "harmonic",
            2,
            |z| 0.5 * (z[0] * z[0] + z[1] * z[1]),
            |z, out| out.copy_from_slice(z),
            |_z, out| {
                out.fill(0.0);
                out[0] = 1.0;
                out[3] = 1.0;
            },
            |_z, out| out.fill(0.0),
        );
        let net = init_params(20, 8, 2);
        let solver = SolverState::new(net, vec![1.0, 0.0], 4.0, 10, AdamConfig::default()).unwrap();
        let ds = generate_correction_dataset(&solver, &sys, 4, TruncationOrder::Second).unwrap();
        let c = CorrectionState::new(
            solver.net(),
            21,
            ds,
            10,
            CorrectionMode::Residual,
            AdamConfig::default(),
        )
        .unwrap();
        for idx in [1, 11, 29, 40] {
            let t = c.dataset.times[idx];
            let l2 = c.appendix_residual(&sys, t).unwrap();
            // Residual of the corrected predictor, assembled independently.
            let (zhat, dzhat) = solver.predict_with_derivative(t);
            let (dz2, ddz2) = c.predict_correction_with_derivative(t);
            let corrected: Vec<f64> = zhat.iter().zip(&dz2).map(|(a, b)| a + b).collect();
            let flow = sys.flow(&corrected).unwrap();
            for i in 0..2 {
                let direct = dzhat[i] + ddz2[i] - flow[i];
                assert!(
                    (l2[i] - direct).abs() <= 1e-12 * (1.0 + direct.abs()),
                    "t={t} i={i}: {} vs {direct}",
                    l2[i]
                );
            }
        }
    }

    #[test]
    fn appendix_gradient_matches_finite_difference() {
        let sys = nonlinear_oscillator();
        let net = init_params(30, 5, 2);
        let solver = SolverState::new(net, vec![1.0, 0.3], 3.0, 6, AdamConfig::default()).unwrap();
        let ds = generate_correction_dataset(&solver, &sys, 4, TruncationOrder::Second).unwrap();
        let c = CorrectionState::new(
            solver.net(),
            31,
            ds.clone(),
            6,
            CorrectionMode::Residual,
            AdamConfig::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let indices = assemble_batch(&ds, 6, &mut rng).unwrap();
        let d = 2;
        let norm = 1.0 / (indices.len() as f64 * d as f64);

        let loss_of = |p: &NetworkParams| -> f64 {
            let mut probe = c.clone();
            probe.net2 = p.clone();
            indices
                .iter()
                .map(|&idx| {
                    let t = ds.times[idx];
                    let l2 = probe.appendix_residual(&sys, t).unwrap();
                    linalg::dot(&l2, &l2) * norm
                })
                .sum()
        };

        // Rebuild the appendix gradient on the pre-step parameters so the
        // finite-difference probe sees the same point.
        let times: Vec<f64> = indices.iter().map(|&i| ds.times[i]).collect();
        let (_, grads) = net::loss_gradient(&c.net2, &times, |evals| {
            let mut loss = 0.0;
            let mut adjoints = Vec::new();
            for ((&idx, eval), &t) in indices.iter().zip(evals).zip(&times) {
                let gate = 1.0 - (-t).exp();
                let gate_dot = (-t).exp();
                let zhat = ds.zhat_at(idx);
                let ell = ds.ell_at(idx);
                let dzhat: Vec<f64> = eval.value.iter().map(|v| gate * v).collect();
                let jac = sys.flow_jacobian(zhat).unwrap();
                let mut linear = vec![0.0; d];
                linalg::mat_vec(&jac, d, d, &dzhat, &mut linear);
                let tensor = sys.flow_second_derivative(zhat).unwrap();
                let mut quad = vec![0.0; d];
                sys.contract_second(&tensor, &dzhat, &dzhat, &mut quad);
                let mut quad_jac = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        let row = &tensor[i * d * d + j * d..i * d * d + (j + 1) * d];
                        quad_jac[i * d + j] = linalg::dot(row, &dzhat);
                    }
                }
                let mut scaled = vec![0.0; d];
                for i in 0..d {
                    let ddz = gate_dot * eval.value[i] + gate * eval.time_derivative[i];
                    let l2 = ell[i] - linear[i] - 0.5 * quad[i] + ddz;
                    loss += l2 * l2 * norm;
                    scaled[i] = 2.0 * norm * l2;
                }
                let mut jt_c = vec![0.0; d];
                linalg::mat_t_vec(&jac, d, d, &scaled, &mut jt_c);
                let mut qt_c = vec![0.0; d];
                linalg::mat_t_vec(&quad_jac, d, d, &scaled, &mut qt_c);
                let mut wrt_value = vec![0.0; d];
                let mut wrt_derivative = vec![0.0; d];
                for i in 0..d {
                    wrt_value[i] = gate_dot * scaled[i] - gate * (jt_c[i] + qt_c[i]);
                    wrt_derivative[i] = gate * scaled[i];
                }
                adjoints.push(EvalAdjoint {
                    wrt_value,
                    wrt_derivative,
                });
            }
            (loss, adjoints)
        })
        .unwrap();

        let h = 1e-6;
        for idx in 0..c.net2.n_params() {
            let mut plus = c.net2.clone();
            plus.flat_add(idx, h);
            let mut minus = c.net2.clone();
            minus.flat_add(idx, -h);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let analytic = grads.flat_get(idx);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom <= 1e-5,
                "param {idx}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn appendix_loss_is_nonnegative_and_trains() {
        let sys = nonlinear_oscillator();
        let net = init_params(40, 8, 2);
        let solver = SolverState::new(net, vec![1.0, 0.0], 4.0, 10, AdamConfig::default()).unwrap();
        let mut c = CorrectionState::new(
            solver.net(),
            41,
            small_error_dataset(4.0, 40),
            10,
            CorrectionMode::Residual,
            AdamConfig::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let initial = c.appendix_train_step(&sys, &mut rng).unwrap();
        assert!(initial >= 0.0);
        let mut last = initial;
        for _ in 0..200 {
            last = c.appendix_train_step(&sys, &mut rng).unwrap();
        }
        assert!(last < initial, "appendix loss {initial} -> {last}");
    }

    #[test]
    fn corrected_model_round_trips() {
        let net = init_params(50, 8, 2);
        let solver = SolverState::new(net, vec![1.0, 0.4], 6.0, 10, AdamConfig::default()).unwrap();
        let c = CorrectionState::new(
            solver.net(),
            51,
            flat_dataset(6.0, 60, 2),
            10,
            CorrectionMode::Regression,
            AdamConfig::default(),
        )
        .unwrap();
        let model = CorrectedModel::from_parts(&solver, &c);
        let dir = std::env::temp_dir().join("nnde-correction-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrected.json");
        model.save(&path).unwrap();
        let back = CorrectedModel::load(&path).unwrap();
        assert_eq!(back.primary, model.primary);
        assert_eq!(back.secondary, model.secondary);
        assert_eq!(back.z0, model.z0);
        assert_eq!(back.mode, model.mode);
        for t in [0.0, 1.1, 5.9] {
            assert_eq!(back.predict(t), corrected_prediction(&solver, &c, t));
        }
        std::fs::remove_file(&path).ok();
    }

    proptest! {
        #[test]
        fn every_batch_contains_both_endpoints(seed in 0u64..300, m in 2usize..30) {
            let ds = flat_dataset(5.0, 120, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = assemble_batch(&ds, m, &mut rng).unwrap();
            prop_assert_eq!(batch[0], 0);
            prop_assert_eq!(*batch.last().unwrap(), ds.len() - 1);
            prop_assert_eq!(batch.len(), m + 1);
        }
    }
}
