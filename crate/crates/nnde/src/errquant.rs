//! Inherent error quantification: the residual-based global bound
//! `|dz| <= l_max / sigma_min` and the discrete recursion that integrates
//! residual samples into an estimated error trajectory `dz_ec(t)` with
//! `dz_ec(0) = 0`.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::linalg;
use crate::reference::fmt_f64;
use crate::solver::{ResidualSample, SolverState};
use crate::systems::{self, DynamicalSystem};

/// How many terms of the Taylor expansion of `F` the recursion keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationOrder {
    /// Linear term `F_z * dz` only.
    First,
    /// Linear plus the quadratic contraction `dz^T F_zz dz / 2`.
    Second,
}

impl TruncationOrder {
    pub fn from_int(v: u8) -> Result<Self> {
        match v {
            1 => Ok(TruncationOrder::First),
            2 => Ok(TruncationOrder::Second),
            other => Err(Error::InvalidConfig(format!(
                "truncation order must be 1 or 2, got {other}"
            ))),
        }
    }

    pub fn as_int(self) -> u8 {
        match self {
            TruncationOrder::First => 1,
            TruncationOrder::Second => 2,
        }
    }
}

/// Uniform grid of residuals, predictions, and integrated error estimates.
/// Row-major flat storage with stride `dim`.
#[derive(Debug, Clone)]
pub struct ErrorDataset {
    pub times: Vec<f64>,
    pub ell: Vec<f64>,
    pub zhat: Vec<f64>,
    pub dz_ec: Vec<f64>,
    pub dim: usize,
    /// Grid spacing `T / (k M)`.
    pub dt: f64,
    /// Grid multiplier when built through the dataset generator.
    pub k: Option<usize>,
    pub order: TruncationOrder,
    /// Max residual magnitude over the grid.
    pub l_max: f64,
    /// Min singular value of the flow Jacobian over the grid.
    pub sigma_min: f64,
    /// Wall-clock cost of building the dataset, for tau accounting.
    pub setup_seconds: f64,
}

impl ErrorDataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn ell_at(&self, i: usize) -> &[f64] {
        &self.ell[i * self.dim..(i + 1) * self.dim]
    }

    pub fn zhat_at(&self, i: usize) -> &[f64] {
        &self.zhat[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dz_ec_at(&self, i: usize) -> &[f64] {
        &self.dz_ec[i * self.dim..(i + 1) * self.dim]
    }

    /// Residual-based error bound for this grid.
    pub fn bound(&self) -> Result<f64> {
        error_bound(self.l_max, self.sigma_min)
    }

    /// Exact grid-point lookup; off-grid times are an error by contract.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        self.times
            .binary_search_by(|probe| probe.total_cmp(&t))
            .map_err(|_| Error::OffGrid { t })
    }

    /// CSV export: `t, ell_1..D, zhat_1..D, dzec_1..D` at 17 significant
    /// digits (bit-exact round trip).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "t")?;
        for name in ["ell", "zhat", "dzec"] {
            for i in 1..=self.dim {
                write!(out, ",{name}_{i}")?;
            }
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(out, "{}", fmt_f64(self.times[i]))?;
            for group in [&self.ell, &self.zhat, &self.dz_ec] {
                for x in &group[i * self.dim..(i + 1) * self.dim] {
                    write!(out, ",{}", fmt_f64(*x))?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Read a dataset back from its CSV form. Grid metadata not present in
    /// the file (grid multiplier, order, sigma_min, build cost) comes back
    /// as defaults; the grid columns round-trip bit-exactly.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header = lines.next().ok_or_else(|| Error::Csv {
            line: 1,
            reason: "empty file".into(),
        })??;
        let cols = header.split(',').count();
        if cols < 4 || (cols - 1) % 3 != 0 {
            return Err(Error::Csv {
                line: 1,
                reason: format!("expected 1 + 3*D columns, got {cols}"),
            });
        }
        let dim = (cols - 1) / 3;
        let mut times = Vec::new();
        let mut ell = Vec::new();
        let mut zhat = Vec::new();
        let mut dz_ec = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = |what: &str| -> Result<f64> {
                fields
                    .next()
                    .ok_or_else(|| Error::Csv {
                        line: lineno + 2,
                        reason: format!("missing {what}"),
                    })?
                    .parse::<f64>()
                    .map_err(|e| Error::Csv {
                        line: lineno + 2,
                        reason: format!("bad {what}: {e}"),
                    })
            };
            times.push(next("t")?);
            for _ in 0..dim {
                ell.push(next("ell")?);
            }
            for _ in 0..dim {
                zhat.push(next("zhat")?);
            }
            for _ in 0..dim {
                dz_ec.push(next("dzec")?);
            }
        }
        if times.len() < 2 {
            return Err(Error::Csv {
                line: 1,
                reason: "need at least two grid rows".into(),
            });
        }
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        let l_max = (0..times.len())
            .map(|i| linalg::norm(&ell[i * dim..(i + 1) * dim]))
            .fold(0.0, f64::max);
        Ok(ErrorDataset {
            times,
            ell,
            zhat,
            dz_ec,
            dim,
            dt,
            k: None,
            order: TruncationOrder::Second,
            l_max,
            sigma_min: f64::NAN,
            setup_seconds: 0.0,
        })
    }
}

/// `|dz| <= l_max / sigma_min`; undefined when the Jacobian is singular
/// somewhere on the trajectory.
pub fn error_bound(l_max: f64, sigma_min: f64) -> Result<f64> {
    if sigma_min <= 0.0 {
        return Err(Error::BoundUndefined { sigma_min });
    }
    Ok(l_max / sigma_min)
}

/// Integrate the error recursion over a uniform residual grid:
///
/// `dz(t_{n+1}) = dz(t_n) + dt * ( F_z|zhat * dz + dz^T F_zz|zhat dz / 2 - ell(t_n) )`
///
/// with `dz(0) = 0`, truncated at the requested order. Forward Euler exactly
/// as written; grid density is the accuracy knob.
pub fn integrate_error(
    sys: &DynamicalSystem,
    samples: &[ResidualSample],
    order: TruncationOrder,
) -> Result<ErrorDataset> {
    let d = sys.dim();
    if samples.len() < 2 {
        return Err(Error::InvalidConfig(
            "error integration needs at least two grid points".into(),
        ));
    }
    for s in samples {
        if s.ell.len() != d || s.zhat.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.ell.len().max(s.zhat.len()),
            });
        }
    }
    let n = samples.len();
    let t0 = samples[0].t;
    let t_end = samples[n - 1].t;
    if t0 != 0.0 {
        return Err(Error::InvalidConfig(format!(
            "residual grid must start at 0, got {t0}"
        )));
    }
    let dt = (t_end - t0) / (n - 1) as f64;
    let tol = 1e-9 * t_end.max(1.0);
    for w in samples.windows(2) {
        if ((w[1].t - w[0].t) - dt).abs() > tol {
            return Err(Error::InvalidConfig(format!(
                "residual grid must be uniform: spacing {} vs {}",
                w[1].t - w[0].t,
                dt
            )));
        }
    }

    let mut times = Vec::with_capacity(n);
    let mut ell = Vec::with_capacity(n * d);
    let mut zhat = Vec::with_capacity(n * d);
    for s in samples {
        times.push(s.t);
        ell.extend_from_slice(&s.ell);
        zhat.extend_from_slice(&s.zhat);
    }

    let mut dz_ec = vec![0.0; n * d];
    let mut dz = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut linear = vec![0.0; d];
    let mut quad = vec![0.0; d];
    let mut tensor = vec![0.0; d * d * d];
    let mut l_max = 0.0f64;
    let mut sigma_min = f64::INFINITY;

    for i in 0..n {
        let z = &zhat[i * d..(i + 1) * d];
        l_max = l_max.max(linalg::norm(&ell[i * d..(i + 1) * d]));
        sys.flow_jacobian_into(z, &mut jac);
        sigma_min = sigma_min.min(systems::min_singular_value(&jac, d)?);
        if i + 1 == n {
            break;
        }
        linalg::mat_vec(&jac, d, d, &dz, &mut linear);
        if order == TruncationOrder::Second {
            sys.flow_second_derivative_into(z, &mut tensor);
            sys.contract_second(&tensor, &dz, &dz, &mut quad);
        } else {
            quad.fill(0.0);
        }
        let l = &ell[i * d..(i + 1) * d];
        for j in 0..d {
            dz[j] += dt * (linear[j] + 0.5 * quad[j] - l[j]);
        }
        if !dz.iter().all(|x| x.is_finite()) {
            return Err(Error::EstimatorBlowUp { index: i + 1 });
        }
        dz_ec[(i + 1) * d..(i + 2) * d].copy_from_slice(&dz);
    }

    Ok(ErrorDataset {
        times,
        ell,
        zhat,
        dz_ec,
        dim: d,
        dt,
        k: None,
        order,
        l_max,
        sigma_min,
        setup_seconds: 0.0,
    })
}

/// Evaluate residuals on the `k M + 1` uniform grid over `[0, T]` (one pass,
/// no training) and integrate them into an error dataset. The build cost is
/// recorded for tau accounting; it is roughly `k` training iterations'
/// worth of forward passes.
pub fn generate_correction_dataset(
    solver: &SolverState,
    sys: &DynamicalSystem,
    k: usize,
    order: TruncationOrder,
) -> Result<ErrorDataset> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid multiplier k must be at least 2, got {k}"
        )));
    }
    let start = Instant::now();
    let n = k * solver.batch_size();
    let t_max = solver.t_max();
    let samples: Vec<ResidualSample> = (0..=n)
        .map(|i| solver.residual(sys, i as f64 * t_max / n as f64))
        .collect::<Result<_>>()?;
    let mut dataset = integrate_error(sys, &samples, order)?;
    dataset.k = Some(k);
    dataset.setup_seconds = start.elapsed().as_secs_f64();
    Ok(dataset)
}
