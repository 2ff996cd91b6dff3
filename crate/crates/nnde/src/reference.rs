//! Ground-truth oracle (fixed-step RK4) and the three comparison metrics:
//! per-iteration runtime tau, mean error dz_avg, and max error dz_max.

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::linalg;
use crate::systems::DynamicalSystem;

/// Number of RK4 steps per unit horizon at the default resolution.
pub const DEFAULT_STEPS: usize = 100_000;

/// Grid size for metric evaluation when no explicit grid is given.
pub const METRIC_SAMPLES: usize = 2_001;

/// Dense fixed-step trajectory; states are stored flat with stride `dim`.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    dim: usize,
    step: f64,
    times: Vec<f64>,
    states: Vec<f64>,
}

impl ReferenceTrajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// State at the grid point nearest to `t`; the default step keeps the
    /// lookup error far below the error scales being measured.
    pub fn state_at(&self, t: f64) -> &[f64] {
        let idx = ((t / self.step).round() as usize).min(self.times.len() - 1);
        self.state(idx)
    }

    /// Max relative energy drift along the trajectory.
    pub fn relative_energy_drift(&self, sys: &DynamicalSystem) -> f64 {
        let h0 = sys.hamiltonian(self.state(0));
        let scale = h0.abs().max(1.0);
        (0..self.len())
            .map(|i| (sys.hamiltonian(self.state(i)) - h0).abs() / scale)
            .fold(0.0, f64::max)
    }

    /// CSV export: `t, z_1..D`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "t")?;
        for i in 1..=self.dim {
            write!(out, ",z_{i}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(out, "{}", fmt_f64(self.times[i]))?;
            for x in self.state(i) {
                write!(out, ",{}", fmt_f64(*x))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// 17-significant-digit formatting; round-trips f64 bit-exactly.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Classical fixed-step RK4 on `dz/dt = F(z)` from 0 to `t_end`. The final
/// step is shortened so the trajectory lands exactly on `t_end`.
pub fn rk4_integrate(
    sys: &DynamicalSystem,
    z0: &[f64],
    t_end: f64,
    h: f64,
) -> Result<ReferenceTrajectory> {
    assert!(h > 0.0, "step size must be positive");
    assert!(t_end / h >= 1.0, "horizon must cover at least one step");
    if z0.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: z0.len(),
        });
    }

    let d = sys.dim();
    let mut n_steps = (t_end / h).ceil() as usize;
    // Rounding in t_end/h can overshoot by one step of zero (or negative)
    // length; drop it so the shortened final step stays positive.
    while n_steps > 1 && (n_steps - 1) as f64 * h >= t_end {
        n_steps -= 1;
    }
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity((n_steps + 1) * d);
    times.push(0.0);
    states.extend_from_slice(z0);

    let mut z = z0.to_vec();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];

    for i in 0..n_steps {
        let t = i as f64 * h;
        let hi = (t_end - t).min(h);
        sys.flow_into(&z, &mut k1);
        for j in 0..d {
            tmp[j] = z[j] + 0.5 * hi * k1[j];
        }
        sys.flow_into(&tmp, &mut k2);
        for j in 0..d {
            tmp[j] = z[j] + 0.5 * hi * k2[j];
        }
        sys.flow_into(&tmp, &mut k3);
        for j in 0..d {
            tmp[j] = z[j] + hi * k3[j];
        }
        sys.flow_into(&tmp, &mut k4);
        for j in 0..d {
            z[j] += hi / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let t_next = if i + 1 == n_steps { t_end } else { (i + 1) as f64 * h };
        if !z.iter().all(|x| x.is_finite()) {
            return Err(Error::IntegrationFailure { t: t_next });
        }
        times.push(t_next);
        states.extend_from_slice(&z);
    }

    Ok(ReferenceTrajectory {
        dim: d,
        step: h,
        times,
        states,
    })
}

/// Pointwise external error of a predictor against the reference.
#[derive(Debug, Clone)]
pub struct ExternalError {
    pub dz_avg: f64,
    pub dz_max: f64,
    pub times: Vec<f64>,
    /// Flat `len x dim` grid of `z_ref(t) - prediction(t)`.
    pub pointwise: Vec<f64>,
    pub dim: usize,
}

impl ExternalError {
    pub fn delta(&self, i: usize) -> &[f64] {
        &self.pointwise[i * self.dim..(i + 1) * self.dim]
    }
}

/// `dz(t) = z_ref(t) - predictor(t)` on a uniform subsample of the horizon.
pub fn external_error<P>(predictor: P, reference: &ReferenceTrajectory) -> ExternalError
where
    P: Fn(f64) -> Vec<f64>,
{
    let t_end = reference.t_end();
    let times: Vec<f64> = (0..METRIC_SAMPLES)
        .map(|j| j as f64 * t_end / (METRIC_SAMPLES - 1) as f64)
        .collect();
    external_error_on(predictor, reference, &times)
}

/// Same as [`external_error`] but on the caller's evaluation times.
pub fn external_error_on<P>(
    predictor: P,
    reference: &ReferenceTrajectory,
    times: &[f64],
) -> ExternalError
where
    P: Fn(f64) -> Vec<f64>,
{
    let d = reference.dim();
    let mut pointwise = Vec::with_capacity(times.len() * d);
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for &t in times {
        let zr = reference.state_at(t);
        let zp = predictor(t);
        debug_assert_eq!(zp.len(), d);
        let start = pointwise.len();
        for i in 0..d {
            pointwise.push(zr[i] - zp[i]);
        }
        let mag = linalg::norm(&pointwise[start..]);
        sum += mag;
        max = max.max(mag);
    }
    ExternalError {
        dz_avg: sum / times.len() as f64,
        dz_max: max,
        times: times.to_vec(),
        pointwise,
        dim: d,
    }
}

/// Amortized per-iteration cost: `(setup + training) / iterations`.
pub fn runtime_meter(setup: Duration, training: Duration, iterations: u64) -> f64 {
    assert!(iterations > 0, "tau needs at least one iteration of use");
    (setup.as_secs_f64() + training.as_secs_f64()) / iterations as f64
}

/// Per-run performance record.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub system: String,
    pub seed: u64,
    /// Primary training iterations shared by every arm.
    pub checkpoint_iters: u64,
    /// Post-checkpoint iterations of the method under test.
    pub extra_iters: u64,
    pub tau: f64,
    pub dz_avg: f64,
    pub dz_max: f64,
    /// Residual-based bound for the run's primary prediction; `None` when
    /// the flow Jacobian was singular somewhere on the grid.
    pub bound: Option<f64>,
}

impl MetricsReport {
    pub fn assert_invariants(&self) {
        assert!(self.dz_avg >= 0.0 && self.dz_avg <= self.dz_max + 1e-15);
        assert!(self.tau > 0.0);
    }
}
