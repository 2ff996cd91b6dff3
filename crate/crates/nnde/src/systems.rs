//! Analytic dynamical operators: Hamiltonians with hand-coded derivatives up
//! to third order, the symplectic flow `F = J * grad(H)`, its Jacobian and
//! second derivative, and the minimum singular value used by the error bound.
//!
//! Derivatives are hand-coded rather than numeric: the error estimator
//! evaluates `F_z` and `F_zz` at thousands of grid points per dataset.

use crate::error::{Error, Result};
use crate::linalg;

/// Block symplectic matrix `[[0, I], [-I, 0]]` for an even dimension.
#[derive(Debug, Clone, Copy)]
pub struct SymplecticForm {
    dim: usize,
}

impl SymplecticForm {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2 && dim.is_multiple_of(2), "phase-space dimension must be even");
        SymplecticForm { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `J * v` without materializing the matrix: (q, p) -> (p, -q).
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        let half = self.dim / 2;
        for i in 0..half {
            out[i] = v[half + i];
            out[half + i] = -v[i];
        }
    }

    /// Dense row-major matrix, mostly for tests.
    pub fn matrix(&self) -> Vec<f64> {
        let d = self.dim;
        let half = d / 2;
        let mut m = vec![0.0; d * d];
        for i in 0..half {
            m[i * d + half + i] = 1.0;
            m[(half + i) * d + i] = -1.0;
        }
        m
    }
}

type ScalarFn = fn(&[f64]) -> f64;
type VectorFn = fn(&[f64], &mut [f64]);

/// A Hamiltonian system with analytic derivatives of `H` through third order.
///
/// `hess_h` fills a row-major `D x D` matrix; `third_h` fills a `D x D x D`
/// tensor indexed as `[m * D * D + j * D + k]` with entry
/// `d^3 H / dz_m dz_j dz_k`.
#[derive(Clone, Copy)]
pub struct DynamicalSystem {
    name: &'static str,
    dim: usize,
    hamiltonian: ScalarFn,
    grad_h: VectorFn,
    hess_h: VectorFn,
    third_h: VectorFn,
}

impl std::fmt::Debug for DynamicalSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DynamicalSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

/// Nonlinear oscillator: `H = (x^2 + p^2)/2 + x^4/4`.
pub fn nonlinear_oscillator() -> DynamicalSystem {
    DynamicalSystem {
        name: "nl-osc",
        dim: 2,
        hamiltonian: |z| 0.5 * (z[0] * z[0] + z[1] * z[1]) + 0.25 * z[0].powi(4),
        grad_h: |z, out| {
            out[0] = z[0] + z[0].powi(3);
            out[1] = z[1];
        },
        hess_h: |z, out| {
            out.fill(0.0);
            out[0] = 1.0 + 3.0 * z[0] * z[0];
            out[3] = 1.0;
        },
        third_h: |z, out| {
            out.fill(0.0);
            out[0] = 6.0 * z[0]; // d^3 H / dx^3
        },
    }
}

/// Henon-Heiles: `H = (x^2 + y^2 + px^2 + py^2)/2 + y(3x^2 - y^2)/3`.
pub fn henon_heiles() -> DynamicalSystem {
    DynamicalSystem {
        name: "henon-heiles",
        dim: 4,
        hamiltonian: |z| {
            let (x, y, px, py) = (z[0], z[1], z[2], z[3]);
            0.5 * (x * x + y * y + px * px + py * py) + y * (3.0 * x * x - y * y) / 3.0
        },
        grad_h: |z, out| {
            let (x, y) = (z[0], z[1]);
            out[0] = x + 2.0 * x * y;
            out[1] = y + x * x - y * y;
            out[2] = z[2];
            out[3] = z[3];
        },
        hess_h: |z, out| {
            let (x, y) = (z[0], z[1]);
            out.fill(0.0);
            out[0] = 1.0 + 2.0 * y; // xx
            out[1] = 2.0 * x; // xy
            out[4] = 2.0 * x; // yx
            out[5] = 1.0 - 2.0 * y; // yy
            out[10] = 1.0; // px px
            out[15] = 1.0; // py py
        },
        third_h: |_z, out| {
            out.fill(0.0);
            let d = 4;
            // d^3 H / dx dx dy = 2 (all index permutations), d^3 H / dy^3 = -2.
            out[1] = 2.0; // (0,0,1)
            out[d] = 2.0; // (0,1,0)
            out[d * d] = 2.0; // (1,0,0)
            out[d * d + d + 1] = -2.0; // (1,1,1)
        },
    }
}

/// Look up a shipped system by its CLI name.
pub fn by_name(name: &str) -> Result<DynamicalSystem> {
    match name {
        "nl-osc" => Ok(nonlinear_oscillator()),
        "henon-heiles" => Ok(henon_heiles()),
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

impl DynamicalSystem {
    /// Test-only escape hatch for manufactured problems with known closed
    /// forms; shipped systems go through the named constructors.
    #[cfg(test)]
    pub(crate) fn custom(
        name: &'static str,
        dim: usize,
        hamiltonian: ScalarFn,
        grad_h: VectorFn,
        hess_h: VectorFn,
        third_h: VectorFn,
    ) -> Self {
        DynamicalSystem {
            name,
            dim,
            hamiltonian,
            grad_h,
            hess_h,
            third_h,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn symplectic_form(&self) -> SymplecticForm {
        SymplecticForm::new(self.dim)
    }

    pub fn hamiltonian(&self, z: &[f64]) -> f64 {
        (self.hamiltonian)(z)
    }

    pub fn grad_h(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.grad_h)(z, &mut out);
        out
    }

    pub fn hess_h(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        (self.hess_h)(z, &mut out);
        out
    }

    pub fn third_h(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim * self.dim];
        (self.third_h)(z, &mut out);
        out
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// `F(z) = J * grad(H)(z)`.
    pub fn flow(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let mut out = vec![0.0; self.dim];
        self.flow_into(z, &mut out);
        Ok(out)
    }

    pub(crate) fn flow_into(&self, z: &[f64], out: &mut [f64]) {
        let mut grad = vec![0.0; self.dim];
        (self.grad_h)(z, &mut grad);
        let half = self.dim / 2;
        for i in 0..half {
            out[i] = grad[half + i];
            out[half + i] = -grad[i];
        }
    }

    /// `F_z(z) = J * Hess(H)(z)`, row-major `D x D`.
    pub fn flow_jacobian(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let mut out = vec![0.0; self.dim * self.dim];
        self.flow_jacobian_into(z, &mut out);
        Ok(out)
    }

    pub(crate) fn flow_jacobian_into(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let half = d / 2;
        let mut hess = vec![0.0; d * d];
        (self.hess_h)(z, &mut hess);
        // Row i of J*M is row (i + half) of M for i < half, else -row (i - half).
        for i in 0..half {
            for j in 0..d {
                out[i * d + j] = hess[(half + i) * d + j];
                out[(half + i) * d + j] = -hess[i * d + j];
            }
        }
    }

    /// `F_zz(z)`: tensor with `F_zz[i][j][k] = d^2 F_i / dz_j dz_k`,
    /// flattened as `[i * D * D + j * D + k]`.
    pub fn flow_second_derivative(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let mut out = vec![0.0; self.dim * self.dim * self.dim];
        self.flow_second_derivative_into(z, &mut out);
        Ok(out)
    }

    pub(crate) fn flow_second_derivative_into(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let half = d / 2;
        let dd = d * d;
        let mut third = vec![0.0; d * dd];
        (self.third_h)(z, &mut third);
        for i in 0..half {
            out[i * dd..(i + 1) * dd].copy_from_slice(&third[(half + i) * dd..(half + i + 1) * dd]);
            for (o, t) in out[(half + i) * dd..(half + i + 1) * dd]
                .iter_mut()
                .zip(&third[i * dd..(i + 1) * dd])
            {
                *o = -t;
            }
        }
    }

    /// `out_i = sum_jk F_zz[i][j][k] a_j b_k` — the quadratic contraction
    /// used by the second-order error recursion.
    pub(crate) fn contract_second(&self, tensor: &[f64], a: &[f64], b: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut acc = 0.0;
            let block = &tensor[i * d * d..(i + 1) * d * d];
            for j in 0..d {
                let row = &block[j * d..(j + 1) * d];
                acc += a[j] * linalg::dot(row, b);
            }
            out[i] = acc;
        }
    }
}

/// Smallest singular value of a square matrix: closed form for 2x2, cyclic
/// Jacobi on `m^T m` otherwise.
pub fn min_singular_value(m: &[f64], n: usize) -> Result<f64> {
    assert_eq!(m.len(), n * n, "matrix must be square");
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteMatrix);
    }
    if n == 1 {
        return Ok(m[0].abs());
    }
    if n == 2 {
        let frob2 = m.iter().map(|x| x * x).sum::<f64>();
        if frob2 == 0.0 {
            return Ok(0.0);
        }
        let det = m[0] * m[3] - m[1] * m[2];
        // sigma_min^2 = (frob2 - sqrt(frob2^2 - 4 det^2)) / 2, written in the
        // cancellation-free form 2 det^2 / (frob2 + sqrt(...)).
        let disc = (frob2 * frob2 - 4.0 * det * det).max(0.0).sqrt();
        return Ok((2.0 * det * det / (frob2 + disc)).sqrt());
    }
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += m[k * n + i] * m[k * n + j];
            }
            gram[i * n + j] = acc;
        }
    }
    let eigen = linalg::symmetric_eigenvalues(&gram, n);
    let min = eigen.into_iter().fold(f64::INFINITY, f64::min);
    Ok(min.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn finite_diff_grad(sys: &DynamicalSystem, z: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..sys.dim())
            .map(|i| {
                let mut zp = z.to_vec();
                zp[i] += h;
                let mut zm = z.to_vec();
                zm[i] -= h;
                (sys.hamiltonian(&zp) - sys.hamiltonian(&zm)) / (2.0 * h)
            })
            .collect()
    }

    fn finite_diff_jacobian(sys: &DynamicalSystem, z: &[f64]) -> Vec<f64> {
        let d = sys.dim();
        let h = 1e-6;
        let mut out = vec![0.0; d * d];
        for j in 0..d {
            let mut zp = z.to_vec();
            zp[j] += h;
            let mut zm = z.to_vec();
            zm[j] -= h;
            let fp = sys.flow(&zp).unwrap();
            let fm = sys.flow(&zm).unwrap();
            for i in 0..d {
                out[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        out
    }

    fn finite_diff_hess_of_grad(sys: &DynamicalSystem, z: &[f64]) -> Vec<f64> {
        // Third derivative of H as finite difference of the Hessian.
        let d = sys.dim();
        let h = 1e-4;
        let mut out = vec![0.0; d * d * d];
        for k in 0..d {
            let mut zp = z.to_vec();
            zp[k] += h;
            let mut zm = z.to_vec();
            zm[k] -= h;
            let hp = sys.hess_h(&zp);
            let hm = sys.hess_h(&zm);
            for m in 0..d {
                for j in 0..d {
                    out[m * d * d + j * d + k] = (hp[m * d + j] - hm[m * d + j]) / (2.0 * h);
                }
            }
        }
        out
    }

    fn random_state(seed: u64, dim: usize, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn symplectic_form_squares_to_minus_identity() {
        for dim in [2, 4] {
            let j = SymplecticForm::new(dim).matrix();
            // J^T = -J
            for r in 0..dim {
                for c in 0..dim {
                    assert_eq!(j[r * dim + c], -j[c * dim + r]);
                }
            }
            // J*J = -I
            for r in 0..dim {
                for c in 0..dim {
                    let mut acc = 0.0;
                    for k in 0..dim {
                        acc += j[r * dim + k] * j[k * dim + c];
                    }
                    let expected = if r == c { -1.0 } else { 0.0 };
                    assert_eq!(acc, expected);
                }
            }
        }
    }

    #[test]
    fn origin_is_an_equilibrium() {
        for sys in [nonlinear_oscillator(), henon_heiles()] {
            let z = vec![0.0; sys.dim()];
            let f = sys.flow(&z).unwrap();
            assert!(f.iter().all(|&x| x == 0.0), "{}", sys.name());
        }
    }

    #[test]
    fn oscillator_flow_by_direct_substitution() {
        let sys = nonlinear_oscillator();
        let f = sys.flow(&[1.0, 0.0]).unwrap();
        assert_eq!(f, vec![0.0, -2.0]);
    }

    #[test]
    fn henon_heiles_flow_by_direct_substitution() {
        let sys = henon_heiles();
        let f = sys.flow(&[0.0, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(f, vec![0.0, 0.0, 0.0, -0.25]);
    }

    #[test]
    fn oscillator_jacobian_closed_forms() {
        let sys = nonlinear_oscillator();
        assert_eq!(sys.flow_jacobian(&[0.0, 0.0]).unwrap(), vec![0.0, 1.0, -1.0, 0.0]);
        assert_eq!(sys.flow_jacobian(&[1.0, 0.0]).unwrap(), vec![0.0, 1.0, -4.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for sys in [nonlinear_oscillator(), henon_heiles()] {
            for seed in 0..5 {
                let z = random_state(seed, sys.dim(), 1.2);
                let grad = sys.grad_h(&z);
                let fd = finite_diff_grad(&sys, &z);
                for (a, b) in grad.iter().zip(&fd) {
                    let denom = a.abs().max(b.abs()).max(1e-6);
                    assert!((a - b).abs() / denom <= 1e-7, "{}: {a} vs {b}", sys.name());
                }
            }
        }
    }

    #[test]
    fn flow_jacobian_matches_finite_differences() {
        for sys in [nonlinear_oscillator(), henon_heiles()] {
            for seed in 10..14 {
                let z = random_state(seed, sys.dim(), 1.0);
                let jac = sys.flow_jacobian(&z).unwrap();
                let fd = finite_diff_jacobian(&sys, &z);
                for (a, b) in jac.iter().zip(&fd) {
                    let denom = a.abs().max(b.abs()).max(1.0);
                    assert!((a - b).abs() / denom <= 1e-6, "{}: {a} vs {b}", sys.name());
                }
            }
        }
    }

    #[test]
    fn third_derivative_matches_finite_difference_of_hessian() {
        for sys in [nonlinear_oscillator(), henon_heiles()] {
            for seed in 20..23 {
                let z = random_state(seed, sys.dim(), 1.0);
                let third = sys.third_h(&z);
                let fd = finite_diff_hess_of_grad(&sys, &z);
                for (a, b) in third.iter().zip(&fd) {
                    let denom = a.abs().max(b.abs()).max(1.0);
                    assert!((a - b).abs() / denom <= 1e-6, "{}: {a} vs {b}", sys.name());
                }
            }
        }
    }

    #[test]
    fn oscillator_second_derivative_substitution() {
        let sys = nonlinear_oscillator();
        // At x = 0 the tensor vanishes.
        let t0 = sys.flow_second_derivative(&[0.0, 0.3]).unwrap();
        assert!(t0.iter().all(|&x| x == 0.0));
        // At x = 1 the only nonzero slot is F_zz[1][0][0] = -6 (third
        // derivative 6 routed through the lower J block).
        let t1 = sys.flow_second_derivative(&[1.0, 0.0]).unwrap();
        let d = 2;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let v = t1[i * d * d + j * d + k];
                    if (i, j, k) == (1, 0, 0) {
                        assert_eq!(v, -6.0);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn henon_heiles_second_derivative_is_constant() {
        let sys = henon_heiles();
        let a = sys.flow_second_derivative(&[0.3, -0.2, 0.1, 0.4]).unwrap();
        let b = sys.flow_second_derivative(&[-1.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn energy_is_conserved_along_flow_directions() {
        // grad(H) . J grad(H) = 0 by antisymmetry; check to 1e-12.
        for sys in [nonlinear_oscillator(), henon_heiles()] {
            for seed in 30..40 {
                let z = random_state(seed, sys.dim(), 2.0);
                let grad = sys.grad_h(&z);
                let f = sys.flow(&z).unwrap();
                assert!(linalg::dot(&grad, &f).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn min_singular_value_closed_cases() {
        assert_eq!(min_singular_value(&[1.0, 0.0, 0.0, 1.0], 2).unwrap(), 1.0);
        assert_eq!(min_singular_value(&[0.0, 1.0, -1.0, 0.0], 2).unwrap(), 1.0);
        let s = min_singular_value(&[2.0, 0.0, 0.0, 0.5], 2).unwrap();
        assert!((s - 0.5).abs() < 1e-14);
        // Identity in 4 dimensions goes through the Jacobi path.
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        assert!((min_singular_value(&eye, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_singular_value_rejects_non_finite() {
        let m = [f64::NAN, 0.0, 0.0, 1.0];
        assert!(matches!(
            min_singular_value(&m, 2),
            Err(Error::NonFiniteMatrix)
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let sys = nonlinear_oscillator();
        assert!(matches!(
            sys.flow(&[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    proptest! {
        /// Variational characterization: sigma_min(m) <= |m v| / |v|.
        #[test]
        fn min_singular_value_is_a_lower_bound(
            entries in proptest::collection::vec(-5.0f64..5.0, 16),
            raw_v in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let vnorm = linalg::norm(&raw_v);
            prop_assume!(vnorm > 1e-3);
            let sigma = min_singular_value(&entries, 4).unwrap();
            let mut mv = vec![0.0; 4];
            linalg::mat_vec(&entries, 4, 4, &raw_v, &mut mv);
            let rayleigh = linalg::norm(&mv) / vnorm;
            prop_assert!(sigma <= rayleigh + 1e-9 * (1.0 + rayleigh));
        }

        /// The 2x2 closed form agrees with the Jacobi path embedded in 4x4.
        #[test]
        fn two_by_two_agrees_with_jacobi(entries in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let direct = min_singular_value(&entries, 2).unwrap();
            let mut embedded = vec![0.0; 16];
            embedded[0] = entries[0];
            embedded[1] = entries[1];
            embedded[4] = entries[2];
            embedded[5] = entries[3];
            // Pad the remaining block with a large diagonal so the small
            // singular values come from the embedded 2x2.
            embedded[10] = 100.0;
            embedded[15] = 100.0;
            let via_jacobi = min_singular_value(&embedded, 4).unwrap();
            prop_assert!((direct - via_jacobi).abs() <= 1e-8 * (1.0 + direct));
        }
    }
}
