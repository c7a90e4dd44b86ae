//! The weighted local mean force.
//!
//! For a coarse-graining map Π and a weight field W(x) with G_W = W·DΠᵗ
//! invertible, the local mean force is
//!
//! ```text
//! h_W(x) = G_W⁻¹(x) W(x) f(x) + (1/β) ∇_x · [G_W⁻¹(x) W(x)]
//! ```
//!
//! where f = -∇U is the microscopic force and the divergence acts row-wise
//! on the d×D matrix field. Its conditional average given z = Π(x) equals
//! the mean force -∇A(z) for every admissible W; different W choices give
//! different pointwise values with the same conditional expectation.
//!
//! For linear maps (Π(x) = Tx) with constant W the divergence term is
//! identically zero and `h_W = (WTᵗ)⁻¹ W f`. This module also solves the
//! existence problem for linear maps: given a target force-combination
//! matrix B, find W with `(WTᵗ)⁻¹ W = B`, which requires a nontrivial
//! solution of `W (I - TᵗB) = 0`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::cgmap::{self, CGMap};
use crate::error::{Error, Result};
use crate::microsys::{Beta, MicroSystem};

/// Reject G_W = W·DΠᵗ whose condition number exceeds this. Beyond it the
/// finite-difference divergence amplifies roundoff past usefulness.
pub const GW_CONDITION_LIMIT: f64 = 1e12;

/// Relative tolerance used by [`solve_w_for_target`] when deciding whether
/// a target matrix is realizable.
pub const NULLSPACE_TOL: f64 = 1e-10;

/// Configuration-dependent weight matrix: takes x, returns W(x) ∈ R^{d×D}.
pub type WFieldFn = Arc<dyn Fn(&[f64]) -> Result<DMatrix<f64>> + Send + Sync>;

/// Weight field W(x) ∈ R^{d×D} defining a member of the local-mean-force
/// family.
#[derive(Clone)]
pub enum WSpec {
    /// W(x) = DΠ(x), the canonical choice.
    EqualsJacobian,
    /// A fixed matrix, independent of configuration.
    Constant(DMatrix<f64>),
    /// An arbitrary smooth matrix field.
    Function(WFieldFn),
}

impl fmt::Debug for WSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WSpec::EqualsJacobian => write!(f, "WSpec::EqualsJacobian"),
            WSpec::Constant(m) => write!(f, "WSpec::Constant({}x{})", m.nrows(), m.ncols()),
            WSpec::Function(_) => write!(f, "WSpec::Function(..)"),
        }
    }
}

impl WSpec {
    /// Evaluate W at a configuration, checking its shape against the map.
    pub fn evaluate(&self, map: &CGMap, x: &[f64]) -> Result<DMatrix<f64>> {
        let w = match self {
            WSpec::EqualsJacobian => map.jacobian(x)?,
            WSpec::Constant(m) => m.clone(),
            WSpec::Function(func) => func(x)?,
        };
        if w.nrows() != map.d_out() || w.ncols() != map.d_in() {
            return Err(Error::DimensionMismatch {
                expected: map.d_out() * map.d_in(),
                got: w.nrows() * w.ncols(),
            });
        }
        Ok(w)
    }

    /// True when W is configuration-independent for this map, which makes
    /// the matrix field G_W⁻¹W constant whenever the map is linear.
    pub fn is_constant_for(&self, map: &CGMap) -> bool {
        match self {
            WSpec::EqualsJacobian => map.is_linear(),
            WSpec::Constant(_) => true,
            WSpec::Function(_) => false,
        }
    }
}

/// One evaluated configuration: coarse point, local mean force, and the
/// microscopic configuration it came from.
#[derive(Debug, Clone)]
pub struct LocalForceSample {
    pub z: Vec<f64>,
    pub h: Vec<f64>,
    pub x: Vec<f64>,
}

/// Output of [`evaluate_over_samples`]: retained samples plus a count of
/// configurations skipped by degeneracy / conditioning guards.
#[derive(Debug, Clone)]
pub struct MeanForceEvaluation {
    pub samples: Vec<LocalForceSample>,
    pub n_skipped: usize,
    pub warnings: Vec<String>,
}

/// Tunables for the local mean force evaluation.
#[derive(Debug, Clone)]
pub struct MeanForceOptions {
    /// Drop the divergence term even when it is nonzero. This is the
    /// low-temperature approximation; it is never applied implicitly.
    pub neglect_divergence: bool,
    /// Finite-difference step for the divergence term.
    pub divergence_step: f64,
}

impl Default for MeanForceOptions {
    fn default() -> Self {
        MeanForceOptions {
            neglect_divergence: false,
            divergence_step: cgmap::DIVERGENCE_STEP,
        }
    }
}

/// Solve G·X = W with a condition-number guard, returning X = G⁻¹W.
pub(crate) fn solve_gw(gw: DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = gw.svd(true, true);
    let mut smax = 0.0f64;
    let mut smin = f64::INFINITY;
    for &s in svd.singular_values.iter() {
        smax = smax.max(s);
        smin = smin.min(s);
    }
    if !(smin > 0.0) || smax / smin > GW_CONDITION_LIMIT {
        return Err(Error::IllConditioned(format!(
            "G_W condition number {:.3e} exceeds limit {:.1e}",
            if smin > 0.0 { smax / smin } else { f64::INFINITY },
            GW_CONDITION_LIMIT
        )));
    }
    svd.solve(w, 0.0)
        .map_err(|e| Error::IllConditioned(format!("G_W solve failed: {e}")))
}

/// The matrix field M(x) = G_W⁻¹(x) W(x) whose divergence enters h_W.
pub(crate) fn gw_inv_w(map: &CGMap, wspec: &WSpec, x: &[f64]) -> Result<DMatrix<f64>> {
    let w = wspec.evaluate(map, x)?;
    let dpi = map.jacobian(x)?;
    let gw = &w * dpi.transpose();
    solve_gw(gw, &w)
}

/// Local mean force h_W(x) with default options (divergence included
/// whenever it can be nonzero).
pub fn local_mean_force(
    system: &MicroSystem,
    map: &CGMap,
    wspec: &WSpec,
    beta: Beta,
    x: &[f64],
) -> Result<Vec<f64>> {
    local_mean_force_opt(system, map, wspec, beta, x, &MeanForceOptions::default())
}

/// Local mean force with explicit options.
pub fn local_mean_force_opt(
    system: &MicroSystem,
    map: &CGMap,
    wspec: &WSpec,
    beta: Beta,
    x: &[f64],
    opts: &MeanForceOptions,
) -> Result<Vec<f64>> {
    if map.d_in() != system.n_dof() {
        return Err(Error::DimensionMismatch {
            expected: system.n_dof(),
            got: map.d_in(),
        });
    }
    let f = system.force(x)?;
    let m = gw_inv_w(map, wspec, x)?;
    let mut h = &m * DVector::from_column_slice(&f);
    // The divergence of G_W⁻¹W vanishes identically only when the field is
    // constant: linear map together with configuration-independent W.
    let field_constant = map.is_linear() && wspec.is_constant_for(map);
    if !field_constant && !opts.neglect_divergence {
        let div = map.divergence_term(wspec, x, opts.divergence_step)?;
        h += div / beta.value();
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEnergy("non-finite local mean force".into()));
    }
    Ok(h.iter().copied().collect())
}

/// Exact linear-map evaluation h = (WTᵗ)⁻¹ W f for constant W; no
/// divergence term exists in this case.
pub fn local_mean_force_linear(
    t: &DMatrix<f64>,
    w: &DMatrix<f64>,
    f: &[f64],
) -> Result<Vec<f64>> {
    if w.shape() != t.shape() {
        return Err(Error::DimensionMismatch {
            expected: t.nrows() * t.ncols(),
            got: w.nrows() * w.ncols(),
        });
    }
    if f.len() != t.ncols() {
        return Err(Error::DimensionMismatch {
            expected: t.ncols(),
            got: f.len(),
        });
    }
    let m = solve_gw(w * t.transpose(), w)?;
    let h = m * DVector::from_column_slice(f);
    Ok(h.iter().copied().collect())
}

/// Find a weight matrix W reproducing a target force combination on a
/// linear map: given T and B (both d×D), a W with (WTᵗ)⁻¹W = B exists iff
/// W(I_D − TᵗB) = 0 has a solution of full row rank d with WTᵗ invertible.
///
/// Every admissible row satisfies w = (wTᵗ)B, so W = CB with C = WTᵗ
/// invertible, and W(I − TᵗB) = C(I_d − BTᵗ)B. An invertible C then forces
/// BTᵗ = I_d (any realizable target obeys BTᵗ = (WTᵗ)⁻¹WTᵗ = I_d), at
/// which point W = B itself is a solution. Checking the small d×d product
/// keeps the decision exact to machine precision — a singular-value scan
/// of the D×D formulation misclassifies clustered null spaces.
///
/// Returns `Some(B)` when BTᵗ = I_d within `tol`, otherwise `None`.
pub fn solve_w_for_target(
    t: &DMatrix<f64>,
    b: &DMatrix<f64>,
    tol: f64,
) -> Result<Option<DMatrix<f64>>> {
    if t.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            expected: t.nrows() * t.ncols(),
            got: b.nrows() * b.ncols(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    let (d, big_d) = t.shape();
    if d >= big_d {
        return Err(Error::InvalidParameter(format!(
            "need d < D, got {d}x{big_d}"
        )));
    }
    let s = DMatrix::<f64>::identity(d, d) - b * t.transpose();
    let scale = b.amax().max(t.amax()).max(1.0);
    if s.amax() <= tol * scale {
        Ok(Some(b.clone()))
    } else {
        Ok(None)
    }
}

/// Evaluate the local mean force over a sample set, skipping (and
/// counting) configurations rejected by degeneracy or conditioning
/// guards. A skip fraction above 1% surfaces a warning.
pub fn evaluate_over_samples(
    system: &MicroSystem,
    map: &CGMap,
    wspec: &WSpec,
    beta: Beta,
    samples: &[Vec<f64>],
) -> Result<MeanForceEvaluation> {
    evaluate_over_samples_opt(system, map, wspec, beta, samples, &MeanForceOptions::default())
}

/// [`evaluate_over_samples`] with explicit options.
pub fn evaluate_over_samples_opt(
    system: &MicroSystem,
    map: &CGMap,
    wspec: &WSpec,
    beta: Beta,
    samples: &[Vec<f64>],
    opts: &MeanForceOptions,
) -> Result<MeanForceEvaluation> {
    let mut out = Vec::with_capacity(samples.len());
    let mut n_skipped = 0usize;
    for x in samples {
        let hz = map.apply(x).and_then(|z| {
            local_mean_force_opt(system, map, wspec, beta, x, opts).map(|h| (z, h))
        });
        match hz {
            Ok((z, h)) => out.push(LocalForceSample {
                z,
                h,
                x: x.clone(),
            }),
            Err(Error::DegenerateGeometry(_))
            | Err(Error::IllConditioned(_))
            | Err(Error::NonFiniteEnergy(_)) => n_skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut warnings = Vec::new();
    if !samples.is_empty() {
        let frac = n_skipped as f64 / samples.len() as f64;
        if frac > 0.01 {
            warnings.push(format!(
                "skipped {} of {} samples ({:.2}%) due to degenerate geometry or ill-conditioned G_W",
                n_skipped,
                samples.len(),
                100.0 * frac
            ));
        }
    }
    Ok(MeanForceEvaluation {
        samples: out,
        n_skipped,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgmap::{center_of_mass, end_to_end_distance, end_to_end_vector, linear_map};
    use crate::microsys;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn beta(v: f64) -> Beta {
        Beta::new(v).unwrap()
    }

    #[test]
    fn dimer_midpoint_map_sums_forces() {
        // z = (x1+x2)/2, W = T: (T Tᵗ)⁻¹ = 2, h = 2·(f1+f2)/2 = f1+f2.
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let map = center_of_mass(&[vec![0, 1]], &[1.0, 1.0], 1).unwrap();
        let h = local_mean_force(&sys, &map, &WSpec::EqualsJacobian, beta(1.0), &[0.3, 0.7])
            .unwrap();
        assert_eq!(h.len(), 1);
        assert!((h[0] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn equal_mass_com_gives_total_force() {
        let sys = microsys::harmonic_chain(3, 1.0).unwrap();
        let map = center_of_mass(&[vec![0, 1, 2]], &[1.0; 3], 1).unwrap();
        let x = [0.4, -0.3, 1.1];
        let f = sys.force(&x).unwrap();
        let h = local_mean_force(&sys, &map, &WSpec::EqualsJacobian, beta(1.0), &x).unwrap();
        assert!((h[0] - f.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_vector_gives_half_force_difference() {
        let sys = microsys::three_atom_molecule(1.0, 1.0, 1.0, 1.9).unwrap();
        let map = end_to_end_vector(3, 0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = sys
            .initial_configuration()
            .iter()
            .map(|&c| c + 0.2 * (rng.gen::<f64>() - 0.5))
            .collect();
        let f = sys.force(&x).unwrap();
        let h = local_mean_force(&sys, &map, &WSpec::EqualsJacobian, beta(1.0), &x).unwrap();
        for d in 0..3 {
            assert!((h[d] - 0.5 * (f[6 + d] - f[d])).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_disjoint_groups_formula() {
        // Two CG sites, disjoint groups {0,1} and {2,3}:
        // h_i = Σ_j ζ_ij f_j / Σ_j ζ_ij².
        let zeta = [[0.3, 0.7], [0.45, 0.55]];
        let t = DMatrix::from_row_slice(
            2,
            4,
            &[zeta[0][0], zeta[0][1], 0.0, 0.0, 0.0, 0.0, zeta[1][0], zeta[1][1]],
        );
        let f = [0.5, -1.2, 2.0, 0.3];
        let h = local_mean_force_linear(&t, &t, &f).unwrap();
        for i in 0..2 {
            let num = zeta[i][0] * f[2 * i] + zeta[i][1] * f[2 * i + 1];
            let den = zeta[i][0] * zeta[i][0] + zeta[i][1] * zeta[i][1];
            assert!((h[i] - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_identity_returns_force() {
        let t = DMatrix::<f64>::identity(3, 3);
        let f = [0.1, -0.4, 2.5];
        let h = local_mean_force_linear(&t, &t, &f).unwrap();
        for i in 0..3 {
            assert!((h[i] - f[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_overlapping_groups_matches_dense_solve() {
        // Particle 0 contributes to both CG sites; compare against an
        // explicit 2x2 inverse.
        let t = DMatrix::from_row_slice(2, 3, &[0.2, 0.5, 0.3, 1.0, 0.0, 0.0]);
        let f = [1.3, -0.7, 0.4];
        let h = local_mean_force_linear(&t, &t, &f).unwrap();

        let g = &t * t.transpose();
        let (a, b2, c) = (g[(0, 0)], g[(1, 1)], g[(0, 1)]);
        let det = a * b2 - c * c;
        let tf = &t * DVector::from_column_slice(&f);
        let expected = [
            (b2 * tf[0] - c * tf[1]) / det,
            (-c * tf[0] + a * tf[1]) / det,
        ];
        for i in 0..2 {
            assert!((h[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_wt_rejected() {
        let t = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let w = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        assert!(matches!(
            local_mean_force_linear(&t, &w, &[1.0, 2.0]),
            Err(Error::IllConditioned(_))
        ));
    }

    fn com_t_unequal() -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 3, &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0])
    }

    #[test]
    fn w_exists_for_total_force_on_com() {
        let t = com_t_unequal();
        let b = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let w = solve_w_for_target(&t, &b, NULLSPACE_TOL).unwrap().unwrap();
        let resid = (&w * (DMatrix::identity(3, 3) - t.transpose() * &b)).amax();
        assert!(resid <= 1e-10, "residual {resid}");
    }

    #[test]
    fn no_w_when_particle_shared_by_all_groups() {
        // Site 0 weights all three particles; site 1 is particle 0 alone.
        let t = DMatrix::from_row_slice(2, 3, &[0.2, 0.5, 0.3, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(solve_w_for_target(&t, &b, NULLSPACE_TOL).unwrap().is_none());
    }

    #[test]
    fn pairwise_w_has_equal_weights_within_pairs() {
        let t = DMatrix::from_row_slice(
            2,
            4,
            &[0.3, 0.7, 0.0, 0.0, 0.0, 0.0, 0.45, 0.55],
        );
        let b = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let w = solve_w_for_target(&t, &b, NULLSPACE_TOL).unwrap().unwrap();
        for i in 0..2 {
            assert!((w[(i, 0)] - w[(i, 1)]).abs() < 1e-10);
            assert!((w[(i, 2)] - w[(i, 3)]).abs() < 1e-10);
        }
    }

    #[test]
    fn solved_w_reproduces_target_combination() {
        let cases = vec![
            (
                com_t_unequal(),
                DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]),
            ),
            (
                DMatrix::from_row_slice(2, 4, &[0.3, 0.7, 0.0, 0.0, 0.0, 0.0, 0.45, 0.55]),
                DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]),
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for (t, b) in cases {
            let w = solve_w_for_target(&t, &b, NULLSPACE_TOL).unwrap().unwrap();
            assert!((&w * (DMatrix::identity(t.ncols(), t.ncols()) - t.transpose() * &b)).amax() <= 1e-10);
            for _ in 0..100 {
                let f: Vec<f64> = (0..t.ncols()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                let h = local_mean_force_linear(&t, &w, &f).unwrap();
                let bf = &b * DVector::from_column_slice(&f);
                for i in 0..t.nrows() {
                    assert!((h[i] - bf[i]).abs() <= 1e-8, "h {} vs Bf {}", h[i], bf[i]);
                }
            }
        }
    }

    #[test]
    fn general_and_linear_paths_agree() {
        let sys = microsys::harmonic_chain(4, 0.9).unwrap();
        let map = center_of_mass(&[vec![0, 1], vec![2, 3]], &[1.0, 2.0, 1.0, 3.0], 1).unwrap();
        let t = map.linear_matrix().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let f = sys.force(&x).unwrap();
            let ha = local_mean_force(&sys, &map, &WSpec::EqualsJacobian, beta(1.0), &x).unwrap();
            let hb = local_mean_force_linear(&t, &t, &f).unwrap();
            for (a, b) in ha.iter().zip(&hb) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn end_to_end_distance_h_matches_hand_formula() {
        // Harmonic pair with rest length r0: f then points along the bond,
        // and h(x) = -k(r - r0) + 2/(β r); neglecting the divergence drops
        // the 2/(β r) term exactly.
        let k = 1.3;
        let r0 = 1.5;
        let sys = microsys::harmonic_pair(k, r0).unwrap();
        let map = end_to_end_distance(2, 0, 1).unwrap();
        let b = beta(2.0);
        let x = [0.1, -0.2, 0.3, 1.4, 0.9, -0.5];
        let r = {
            let dx: [f64; 3] = [x[0] - x[3], x[1] - x[4], x[2] - x[5]];
            (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt()
        };
        let expected = -k * (r - r0) + 2.0 / (b.value() * r);

        let h = local_mean_force(&sys, &map, &WSpec::EqualsJacobian, b, &x).unwrap();
        assert!((h[0] - expected).abs() < 1e-6, "h {} vs {}", h[0], expected);

        let opts = MeanForceOptions {
            neglect_divergence: true,
            ..Default::default()
        };
        let hn = local_mean_force_opt(&sys, &map, &WSpec::EqualsJacobian, b, &x, &opts).unwrap();
        assert!((hn[0] - (-k * (r - r0))).abs() < 1e-12);
    }

    #[test]
    fn function_wspec_evaluates() {
        // W(x) = (x_0 - x_1, 0): G_W = r, M = (u, 0), ∇·M = 2/r, so h is
        // the same hand formula as the canonical W on the harmonic pair.
        let k = 1.0;
        let r0 = 1.2;
        let sys = microsys::harmonic_pair(k, r0).unwrap();
        let map = end_to_end_distance(2, 0, 1).unwrap();
        let wspec = WSpec::Function(Arc::new(|x: &[f64]| {
            let mut w = DMatrix::zeros(1, 6);
            for d in 0..3 {
                w[(0, d)] = x[d] - x[3 + d];
            }
            Ok(w)
        }));
        let b = beta(1.0);
        let x = [0.0, 0.0, 0.0, 1.0, 0.7, -0.4];
        let r = (1.0f64 + 0.49 + 0.16).sqrt();
        let expected = -k * (r - r0) + 2.0 / r;
        let h = local_mean_force(&sys, &map, &wspec, b, &x).unwrap();
        assert!((h[0] - expected).abs() < 1e-5, "h {} vs {}", h[0], expected);
    }

    #[test]
    fn evaluate_over_samples_counts_skips() {
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let map = center_of_mass(&[vec![0, 1]], &[1.0, 1.0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Vec<f64>> = (0..1000)
            .map(|_| vec![rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5])
            .collect();
        let eval =
            evaluate_over_samples(&sys, &map, &WSpec::EqualsJacobian, beta(1.0), &samples)
                .unwrap();
        assert_eq!(eval.samples.len(), 1000);
        assert_eq!(eval.n_skipped, 0);
        assert!(eval.warnings.is_empty());
    }

    #[test]
    fn coincident_sample_is_skipped() {
        let sys = microsys::ideal_gas(2, 5.0).unwrap();
        let map = end_to_end_distance(2, 0, 1).unwrap();
        let good = vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0];
        let degenerate = vec![1.5, 1.5, 1.5, 1.5, 1.5, 1.5];
        let samples = vec![good.clone(), degenerate, good];
        let eval =
            evaluate_over_samples(&sys, &map, &WSpec::EqualsJacobian, beta(1.0), &samples)
                .unwrap();
        assert_eq!(eval.samples.len(), 2);
        assert_eq!(eval.n_skipped, 1);
        assert!(!eval.warnings.is_empty());
    }

    #[test]
    fn wspec_constant_linear_map_matches_solver_target() {
        // Putting the solved W back into the general evaluator reproduces
        // B f on actual system forces.
        let sys = microsys::harmonic_chain(3, 1.0).unwrap();
        let map = linear_map(com_t_unequal()).unwrap();
        let b_mat = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let w = solve_w_for_target(&com_t_unequal(), &b_mat, NULLSPACE_TOL)
            .unwrap()
            .unwrap();
        let x = [0.2, -0.6, 0.9];
        let f = sys.force(&x).unwrap();
        let h = local_mean_force(&sys, &map, &WSpec::Constant(w), beta(1.0), &x).unwrap();
        let total: f64 = f.iter().sum();
        assert!((h[0] - total).abs() < 1e-8);
    }
}
