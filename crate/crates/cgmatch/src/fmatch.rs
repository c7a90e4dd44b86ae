//! Force matching: least-squares projection of the local mean force onto
//! a span of coarse force fields G(z).
//!
//! The empirical objective is L̂(G) = (1/n) Σ_s ‖h_s − G(z_s)‖². Because
//! the conditional expectation F(z) = E[h|z] is the orthogonal projection
//! of h onto z-measurable functions, the loss decomposes as
//! L̂(G) ≈ L̂(F) + mean‖F − G‖²; [`residual_decomposition`] estimates all
//! three terms and their identity gap.
//!
//! Vector coarse spaces are handled component-wise with a shared scalar
//! basis (each force component depends on its own coarse component).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal matrices above this condition number are rejected as rank
/// deficient on the data.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Scalar basis sets for coarse force fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSet {
    /// G expanded in piecewise-linear hat functions on the knots; exactly
    /// integrable to a piecewise-quadratic potential.
    HatFunctions { knots: Vec<f64> },
    /// G expanded in monomials 1, z, …, z^max_degree on a declared
    /// support interval.
    Polynomials { max_degree: usize, support: [f64; 2] },
    /// The potential Ū is a piecewise-linear spline on the knots and
    /// G = −dŪ/dz is piecewise constant; one coefficient per interval,
    /// holding the force value there.
    PotentialGradient { knots: Vec<f64> },
}

fn check_knots(knots: &[f64]) -> Result<()> {
    if knots.len() < 2 {
        return Err(Error::InvalidParameter("need at least two knots".into()));
    }
    if knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "knots must be strictly increasing".into(),
        ));
    }
    Ok(())
}

impl BasisSet {
    /// Uniformly spaced hat-function knots.
    pub fn uniform_hats(lo: f64, hi: f64, n_knots: usize) -> Result<BasisSet> {
        if n_knots < 2 || !(hi > lo) {
            return Err(Error::InvalidParameter("need hi > lo and ≥ 2 knots".into()));
        }
        let w = (hi - lo) / (n_knots - 1) as f64;
        Ok(BasisSet::HatFunctions {
            knots: (0..n_knots).map(|i| lo + w * i as f64).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BasisSet::HatFunctions { knots } | BasisSet::PotentialGradient { knots } => {
                check_knots(knots)
            }
            BasisSet::Polynomials { support, .. } => {
                if !(support[1] > support[0]) {
                    return Err(Error::InvalidParameter("empty polynomial support".into()));
                }
                Ok(())
            }
        }
    }

    pub fn n_basis(&self) -> usize {
        match self {
            BasisSet::HatFunctions { knots } => knots.len(),
            BasisSet::Polynomials { max_degree, .. } => max_degree + 1,
            BasisSet::PotentialGradient { knots } => knots.len() - 1,
        }
    }

    /// Interval of coarse values the basis covers.
    pub fn support(&self) -> (f64, f64) {
        match self {
            BasisSet::HatFunctions { knots } | BasisSet::PotentialGradient { knots } => {
                (knots[0], *knots.last().unwrap())
            }
            BasisSet::Polynomials { support, .. } => (support[0], support[1]),
        }
    }

    /// Human-readable name of one basis element, for diagnostics.
    pub fn describe_element(&self, i: usize) -> String {
        match self {
            BasisSet::HatFunctions { knots } => format!("hat[{i}] at knot {}", knots[i]),
            BasisSet::Polynomials { .. } => format!("z^{i}"),
            BasisSet::PotentialGradient { knots } => {
                format!("interval[{i}] = [{}, {}]", knots[i], knots[i + 1])
            }
        }
    }

    /// Evaluate all basis functions at z into `buf`; out-of-support z is
    /// clamped to the nearest support endpoint, and the return value says
    /// whether clamping happened.
    pub fn eval_into(&self, z: f64, buf: &mut [f64]) -> bool {
        let (lo, hi) = self.support();
        let clamped = z < lo || z > hi;
        let z = z.clamp(lo, hi);
        buf.iter_mut().for_each(|v| *v = 0.0);
        match self {
            BasisSet::HatFunctions { knots } => {
                // z lies in [knots[j], knots[j+1]].
                let j = knots.partition_point(|&k| k <= z).min(knots.len() - 1) - 1;
                let w = knots[j + 1] - knots[j];
                buf[j] = (knots[j + 1] - z) / w;
                buf[j + 1] = (z - knots[j]) / w;
            }
            BasisSet::Polynomials { max_degree, .. } => {
                let mut p = 1.0;
                for b in buf.iter_mut().take(*max_degree + 1) {
                    *b = p;
                    p *= z;
                }
            }
            BasisSet::PotentialGradient { knots } => {
                let j = knots.partition_point(|&k| k <= z).min(knots.len() - 1) - 1;
                buf[j] = 1.0;
            }
        }
        clamped
    }
}

/// A fitted coarse force field: shared scalar basis, one coefficient
/// vector per coarse component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CGForceModel {
    pub basis: BasisSet,
    pub coeffs: Vec<Vec<f64>>,
}

impl CGForceModel {
    pub fn d_out(&self) -> usize {
        self.coeffs.len()
    }

    /// G(z), component-wise: G_c is a function of z_c alone. Out-of
    /// support components are clamped (counted in `n_clamped`).
    pub fn evaluate_counting(&self, z: &[f64], n_clamped: &mut usize) -> Result<Vec<f64>> {
        if z.len() != self.coeffs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coeffs.len(),
                got: z.len(),
            });
        }
        let p = self.basis.n_basis();
        let mut buf = vec![0.0; p];
        let mut out = Vec::with_capacity(z.len());
        for (c, &zc) in z.iter().enumerate() {
            if self.basis.eval_into(zc, &mut buf) {
                *n_clamped += 1;
            }
            out.push(buf.iter().zip(&self.coeffs[c]).map(|(b, w)| b * w).sum());
        }
        Ok(out)
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut ignored = 0;
        self.evaluate_counting(z, &mut ignored)
    }

    /// Scalar-coarse-space convenience.
    pub fn evaluate_scalar(&self, z: f64) -> Result<f64> {
        Ok(self.evaluate(&[z])?[0])
    }
}

/// Normal equations for one coarse component.
#[derive(Debug, Clone)]
pub struct ComponentDesign {
    /// (1/n) Σ φ(z_s) φᵗ(z_s); symmetric positive semidefinite.
    pub normal: DMatrix<f64>,
    /// (1/n) Σ h_s φ(z_s).
    pub rhs: DVector<f64>,
    /// (1/n) Σ h_s², completing the quadratic loss.
    pub mean_h_sq: f64,
    /// Condition number of the normal matrix.
    pub condition: f64,
}

/// Assembled least-squares problem over all coarse components.
#[derive(Debug, Clone)]
pub struct LeastSquaresDesign {
    pub basis: BasisSet,
    pub components: Vec<ComponentDesign>,
    pub n_samples: usize,
    /// Sample coordinates outside the basis support (clamped in).
    pub n_clamped: usize,
    pub warnings: Vec<String>,
}

impl LeastSquaresDesign {
    /// Empirical loss (1/n) Σ ‖h_s − G(z_s)‖² of a model with this
    /// design's basis, summed over components.
    pub fn empirical_loss(&self, model: &CGForceModel) -> Result<f64> {
        if model.basis != self.basis || model.coeffs.len() != self.components.len() {
            return Err(Error::InvalidParameter(
                "model basis does not match the design".into(),
            ));
        }
        let mut total = 0.0;
        for (comp, coeffs) in self.components.iter().zip(&model.coeffs) {
            let c = DVector::from_column_slice(coeffs);
            total += comp.mean_h_sq - 2.0 * c.dot(&comp.rhs) + (&comp.normal * &c).dot(&c);
        }
        Ok(total.max(0.0))
    }

    /// Ridge strength scaled to the problem: 1e−10 · trace(normal) / p,
    /// averaged over components.
    pub fn default_ridge(&self) -> f64 {
        let p = self.basis.n_basis() as f64;
        let mean_trace: f64 = self
            .components
            .iter()
            .map(|c| c.normal.trace())
            .sum::<f64>()
            / self.components.len() as f64;
        1e-10 * mean_trace / p
    }
}

fn condition_and_suspects(normal: &DMatrix<f64>, basis: &BasisSet) -> (f64, Vec<String>) {
    let svd = normal.clone().svd(true, false);
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let mut suspects = Vec::new();
    if cond > CONDITION_LIMIT {
        // The singular vector of the smallest singular value points at the
        // (near-)dependent basis elements.
        if let Some(u) = svd.u.as_ref() {
            let imin = (0..sv.len())
                .min_by(|&a, &b| sv[a].partial_cmp(&sv[b]).unwrap())
                .unwrap();
            let col = u.column(imin);
            let largest = col.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            for i in 0..col.len() {
                if col[i].abs() > 0.3 * largest {
                    suspects.push(basis.describe_element(i));
                }
            }
        }
    }
    (cond, suspects)
}

/// Build the normal equations of the empirical force-matching problem
/// from coarse samples z_s and local-mean-force samples h_s.
pub fn assemble_least_squares(
    samples_z: &[Vec<f64>],
    samples_h: &[Vec<f64>],
    basis: &BasisSet,
) -> Result<LeastSquaresDesign> {
    basis.validate()?;
    if samples_z.len() != samples_h.len() {
        return Err(Error::DimensionMismatch {
            expected: samples_z.len(),
            got: samples_h.len(),
        });
    }
    if samples_z.is_empty() {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let d = samples_z[0].len();
    if d == 0 || samples_h[0].len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: samples_h[0].len(),
        });
    }
    let p = basis.n_basis();
    let n = samples_z.len();
    if n < 10 * p {
        return Err(Error::InsufficientData(format!(
            "{n} samples for {p} coefficients; need at least {}",
            10 * p
        )));
    }

    let inv_n = 1.0 / n as f64;
    let mut components: Vec<ComponentDesign> = (0..d)
        .map(|_| ComponentDesign {
            normal: DMatrix::zeros(p, p),
            rhs: DVector::zeros(p),
            mean_h_sq: 0.0,
            condition: 0.0,
        })
        .collect();
    let mut n_clamped = 0usize;
    let mut buf = vec![0.0; p];
    for (z, h) in samples_z.iter().zip(samples_h) {
        if z.len() != d || h.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: z.len().min(h.len()),
            });
        }
        for c in 0..d {
            if basis.eval_into(z[c], &mut buf) {
                n_clamped += 1;
            }
            let comp = &mut components[c];
            for i in 0..p {
                if buf[i] == 0.0 {
                    continue;
                }
                comp.rhs[i] += inv_n * h[c] * buf[i];
                for j in 0..p {
                    comp.normal[(i, j)] += inv_n * buf[i] * buf[j];
                }
            }
            comp.mean_h_sq += inv_n * h[c] * h[c];
        }
    }

    let mut warnings = Vec::new();
    for (c, comp) in components.iter_mut().enumerate() {
        let (cond, suspects) = condition_and_suspects(&comp.normal, basis);
        comp.condition = cond;
        if cond > CONDITION_LIMIT {
            return Err(Error::RankDeficientBasis(format!(
                "normal matrix for component {c} has condition {cond:.3e} (limit {CONDITION_LIMIT:.0e}); \
                 suspect elements: {}",
                suspects.join(", ")
            )));
        }
    }
    if n_clamped > 0 {
        let frac = n_clamped as f64 / (n * d) as f64;
        warnings.push(format!(
            "{n_clamped} sample coordinates ({:.2}%) outside basis support were clamped",
            100.0 * frac
        ));
    }
    Ok(LeastSquaresDesign {
        basis: basis.clone(),
        components,
        n_samples: n,
        n_clamped,
        warnings,
    })
}

/// Minimize the empirical loss plus ridge·‖coeffs‖² per component.
/// Deterministic; ridge 0 requires a nonsingular normal matrix.
pub fn solve_force_match(design: &LeastSquaresDesign, ridge: f64) -> Result<CGForceModel> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidParameter("ridge must be non-negative".into()));
    }
    let p = design.basis.n_basis();
    let mut coeffs = Vec::with_capacity(design.components.len());
    for comp in &design.components {
        let mut m = comp.normal.clone();
        for i in 0..p {
            m[(i, i)] += ridge;
        }
        let chol = nalgebra::Cholesky::new(m).ok_or_else(|| {
            Error::IllConditioned(
                "singular normal system; use a positive ridge or a smaller basis".into(),
            )
        })?;
        let c = chol.solve(&comp.rhs);
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::IllConditioned("non-finite solution".into()));
        }
        coeffs.push(c.iter().copied().collect());
    }
    Ok(CGForceModel {
        basis: design.basis.clone(),
        coeffs,
    })
}

/// [`solve_force_match`] with the design's default ridge.
pub fn solve_force_match_default(design: &LeastSquaresDesign) -> Result<CGForceModel> {
    solve_force_match(design, design.default_ridge())
}

/// Empirical estimate of the loss decomposition around a reference mean
/// force F: loss over the fitted model, loss over F (a floor when F is
/// the conditional expectation), the projection distance mean‖F − G‖²,
/// and the gap in the identity L(G) = L(F) + mean‖F − G‖².
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FMReport {
    pub loss_total: f64,
    pub loss_floor_estimate: f64,
    pub projection_error: f64,
    pub residual_identity_gap: f64,
    /// Standard error of the per-sample identity residual mean.
    pub gap_stderr: f64,
    pub loss_total_stderr: f64,
    pub loss_floor_stderr: f64,
    pub projection_stderr: f64,
    pub n_samples: usize,
}

/// Estimate the loss decomposition from samples, a fitted model G, and a
/// reference mean-force function F (binned estimate or analytic).
pub fn residual_decomposition<F>(
    samples_z: &[Vec<f64>],
    samples_h: &[Vec<f64>],
    model: &CGForceModel,
    f_ref: F,
) -> Result<FMReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if samples_z.len() != samples_h.len() || samples_z.is_empty() {
        return Err(Error::InsufficientData(
            "need equally many z and h samples, at least one".into(),
        ));
    }
    let n = samples_z.len();
    let mut sums = [0.0f64; 4]; // a, b, c, gap
    let mut sq = [0.0f64; 4];
    let mut ignored = 0usize;
    for (z, h) in samples_z.iter().zip(samples_h) {
        let g = model.evaluate_counting(z, &mut ignored)?;
        let f = f_ref(z)?;
        if f.len() != h.len() || g.len() != h.len() {
            return Err(Error::DimensionMismatch {
                expected: h.len(),
                got: f.len().min(g.len()),
            });
        }
        let mut a = 0.0;
        let mut b = 0.0;
        let mut c = 0.0;
        for i in 0..h.len() {
            a += (h[i] - g[i]).powi(2);
            b += (h[i] - f[i]).powi(2);
            c += (f[i] - g[i]).powi(2);
        }
        let gap = a - b - c;
        for (k, v) in [a, b, c, gap].into_iter().enumerate() {
            sums[k] += v;
            sq[k] += v * v;
        }
    }
    let nf = n as f64;
    let mean = |k: usize| sums[k] / nf;
    let stderr = |k: usize| {
        if n < 2 {
            f64::INFINITY
        } else {
            let var = (sq[k] / nf - mean(k) * mean(k)).max(0.0) * nf / (nf - 1.0);
            (var / nf).sqrt()
        }
    };
    Ok(FMReport {
        loss_total: mean(0),
        loss_floor_estimate: mean(1),
        projection_error: mean(2),
        residual_identity_gap: mean(3).abs(),
        gap_stderr: stderr(3),
        loss_total_stderr: stderr(0),
        loss_floor_stderr: stderr(1),
        projection_stderr: stderr(2),
        n_samples: n,
    })
}

/// Tabulated coarse potential Ū(z) with Ū(z_ref) = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialTable {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

impl PotentialTable {
    /// Linear interpolation inside the table range, clamped outside.
    pub fn interpolate(&self, z: f64) -> f64 {
        if z <= self.z[0] {
            return self.u[0];
        }
        if z >= *self.z.last().unwrap() {
            return *self.u.last().unwrap();
        }
        let j = self.z.partition_point(|&v| v <= z) - 1;
        let t = (z - self.z[j]) / (self.z[j + 1] - self.z[j]);
        self.u[j] * (1.0 - t) + self.u[j + 1] * t
    }
}

/// Integrate a scalar force model into a potential table on the given
/// grid, normalized to Ū(z_ref) = 0. Hat and polynomial force models use
/// the cumulative trapezoid of −G (exact when the grid contains the
/// knots); gradient-of-spline models return their stored potential
/// directly, which is exact by construction.
pub fn integrate_model(model: &CGForceModel, z_grid: &[f64], z_ref: f64) -> Result<PotentialTable> {
    if model.coeffs.len() != 1 {
        return Err(Error::Unsupported(
            "potential integration is defined for scalar coarse spaces".into(),
        ));
    }
    if z_grid.len() < 2 || z_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "z grid must be strictly increasing with at least two points".into(),
        ));
    }
    if z_ref < z_grid[0] || z_ref > *z_grid.last().unwrap() {
        return Err(Error::InvalidParameter(format!(
            "z_ref {z_ref} outside the grid range"
        )));
    }
    let u: Vec<f64> = match &model.basis {
        BasisSet::PotentialGradient { knots } => {
            // Reconstruct the spline potential from its per-interval
            // forces: Ū(k_{j+1}) = Ū(k_j) − g_j·Δ_j, linear between knots.
            let g = &model.coeffs[0];
            let mut knot_u = vec![0.0; knots.len()];
            for j in 0..g.len() {
                knot_u[j + 1] = knot_u[j] - g[j] * (knots[j + 1] - knots[j]);
            }
            let spline = PotentialTable {
                z: knots.clone(),
                u: knot_u,
            };
            z_grid.iter().map(|&z| spline.interpolate(z)).collect()
        }
        _ => {
            let g: Vec<f64> = z_grid
                .iter()
                .map(|&z| model.evaluate_scalar(z))
                .collect::<Result<_>>()?;
            let mut u = vec![0.0; z_grid.len()];
            for i in 1..z_grid.len() {
                u[i] = u[i - 1] - 0.5 * (g[i - 1] + g[i]) * (z_grid[i] - z_grid[i - 1]);
            }
            u
        }
    };
    let mut table = PotentialTable {
        z: z_grid.to_vec(),
        u,
    };
    let offset = table.interpolate(z_ref);
    table.u.iter_mut().for_each(|v| *v -= offset);
    Ok(table)
}

/// Serialized model with fit provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub model: CGForceModel,
    pub ridge: f64,
    pub sample_hash: String,
    pub n_samples: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// z ~ N(0, 1/2) and h = −2z + noise_scale·ε, matching the coarse
    /// statistics of the harmonic dimer under its midpoint map.
    fn dimer_like_data(n: usize, seed: u64, noise: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = move || {
            let (u1, u2) = (rng.gen::<f64>(), rng.gen::<f64>());
            (-2.0 * u1.max(1e-300).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let mut zs = Vec::with_capacity(n);
        let mut hs = Vec::with_capacity(n);
        for _ in 0..n {
            let z = gauss() * (0.5f64).sqrt();
            let h = -2.0 * z + noise * gauss();
            zs.push(vec![z]);
            hs.push(vec![h]);
        }
        (zs, hs)
    }

    #[test]
    fn constant_basis_recovers_sample_mean() {
        let (zs, hs) = dimer_like_data(500, 1, 0.3);
        let basis = BasisSet::Polynomials {
            max_degree: 0,
            support: [-3.0, 3.0],
        };
        let design = assemble_least_squares(&zs, &hs, &basis).unwrap();
        let model = solve_force_match(&design, 0.0).unwrap();
        let mean: f64 = hs.iter().map(|h| h[0]).sum::<f64>() / hs.len() as f64;
        assert!((model.coeffs[0][0] - mean).abs() < 1e-12);
    }

    #[test]
    fn affine_basis_recovers_slope() {
        // h = −2z exactly: the straight-line fit is exact.
        let (zs, hs) = dimer_like_data(5_000, 2, 0.0);
        let basis = BasisSet::Polynomials {
            max_degree: 1,
            support: [-3.0, 3.0],
        };
        let design = assemble_least_squares(&zs, &hs, &basis).unwrap();
        let model = solve_force_match(&design, 0.0).unwrap();
        assert!(model.coeffs[0][0].abs() < 1e-10, "intercept {}", model.coeffs[0][0]);
        assert!((model.coeffs[0][1] + 2.0).abs() < 1e-10, "slope {}", model.coeffs[0][1]);
    }

    #[test]
    fn empty_hat_region_rejected_naming_elements() {
        let (zs, hs) = dimer_like_data(2_000, 3, 0.1);
        // No sample ever reaches the hats below −5.8, so their columns
        // vanish on the data and the normal matrix is singular.
        let basis = BasisSet::HatFunctions {
            knots: vec![-6.0, -5.9, -5.8, 0.0, 3.0],
        };
        let err = assemble_least_squares(&zs, &hs, &basis).unwrap_err();
        match err {
            Error::RankDeficientBasis(msg) => {
                assert!(msg.contains("hat["), "message should name elements: {msg}")
            }
            other => panic!("expected rank-deficiency error, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_data_rejected_for_polynomials() {
        // All samples at two z values cannot support a cubic.
        let mut zs = Vec::new();
        let mut hs = Vec::new();
        for i in 0..200 {
            let z = if i % 2 == 0 { -0.5 } else { 0.5 };
            zs.push(vec![z]);
            hs.push(vec![-2.0 * z]);
        }
        let basis = BasisSet::Polynomials {
            max_degree: 3,
            support: [-1.0, 1.0],
        };
        assert!(matches!(
            assemble_least_squares(&zs, &hs, &basis),
            Err(Error::RankDeficientBasis(_))
        ));
    }

    #[test]
    fn exact_basis_combination_recovered() {
        let basis = BasisSet::uniform_hats(-2.0, 2.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let true_coeffs: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let truth = CGForceModel {
            basis: basis.clone(),
            coeffs: vec![true_coeffs.clone()],
        };
        let zs: Vec<Vec<f64>> = (0..2_000)
            .map(|_| vec![rng.gen::<f64>() * 4.0 - 2.0])
            .collect();
        let hs: Vec<Vec<f64>> = zs.iter().map(|z| truth.evaluate(z).unwrap()).collect();
        let design = assemble_least_squares(&zs, &hs, &basis).unwrap();
        let model = solve_force_match(&design, 0.0).unwrap();
        for (a, b) in model.coeffs[0].iter().zip(&true_coeffs) {
            assert!((a - b).abs() <= 1e-10);
        }
        // The loss is a difference of O(1) quadratic forms, so it carries
        // a ~1e−16 cancellation floor even for an exact fit.
        assert!(design.empirical_loss(&model).unwrap() <= 1e-12);
    }

    #[test]
    fn hat_fit_tracks_line_on_populated_bins() {
        let (zs, hs) = dimer_like_data(20_000, 5, 0.0);
        let basis = BasisSet::uniform_hats(-2.0, 2.0, 21).unwrap();
        let design = assemble_least_squares(&zs, &hs, &basis).unwrap();
        let model = solve_force_match_default(&design).unwrap();
        // Count samples per inter-knot interval; compare on well-covered ones.
        let knots = match &model.basis {
            BasisSet::HatFunctions { knots } => knots.clone(),
            _ => unreachable!(),
        };
        for w in knots.windows(2) {
            let count = zs.iter().filter(|z| z[0] >= w[0] && z[0] < w[1]).count();
            if count < 100 {
                continue;
            }
            for t in [0.0, 0.5, 1.0] {
                let z = w[0] + t * (w[1] - w[0]);
                let g = model.evaluate_scalar(z).unwrap();
                assert!((g + 2.0 * z).abs() <= 0.1, "z {z}: G {g}");
            }
        }
    }

    #[test]
    fn huge_ridge_shrinks_coefficients() {
        let (zs, hs) = dimer_like_data(2_000, 6, 0.1);
        let basis = BasisSet::Polynomials {
            max_degree: 1,
            support: [-3.0, 3.0],
        };
        let design = assemble_least_squares(&zs, &hs, &basis).unwrap();
        let model = solve_force_match(&design, 1e9).unwrap();
        assert!(model.coeffs[0].iter().all(|c| c.abs() < 1e-6));
    }

    #[test]
    fn nested_models_do_not_increase_loss() {
        let (zs, hs) = dimer_like_data(3_000, 7, 0.2);
        let mut losses = Vec::new();
        for deg in 0..=2 {
            let basis = BasisSet::Polynomials {
                max_degree: deg,
                support: [-3.0, 3.0],
            };
            let design = assemble_least_squares(&zs, &hs, &basis).unwrap();
            let model = solve_force_match(&design, 0.0).unwrap();
            losses.push(design.empirical_loss(&model).unwrap());
        }
        assert!(losses[1] <= losses[0] + 1e-12);
        assert!(losses[2] <= losses[1] + 1e-12);
    }

    #[test]
    fn decomposition_identity_with_model_as_reference() {
        let (zs, hs) = dimer_like_data(5_000, 8, 0.4);
        let basis = BasisSet::Polynomials {
            max_degree: 1,
            support: [-3.0, 3.0],
        };
        let design = assemble_least_squares(&zs, &hs, &basis).unwrap();
        let model = solve_force_match(&design, 0.0).unwrap();
        let m2 = model.clone();
        let report =
            residual_decomposition(&zs, &hs, &model, move |z| m2.evaluate(z)).unwrap();
        assert!(report.projection_error == 0.0);
        assert_eq!(report.residual_identity_gap, 0.0);
    }

    #[test]
    fn coarse_basis_shows_positive_projection_error() {
        let (zs, hs) = dimer_like_data(20_000, 9, 0.3);
        let basis = BasisSet::uniform_hats(-2.0, 2.0, 3).unwrap();
        let design = assemble_least_squares(&zs, &hs, &basis).unwrap();
        let model = solve_force_match_default(&design).unwrap();
        // The true conditional mean of h given z.
        let report =
            residual_decomposition(&zs, &hs, &model, |z| Ok(vec![-2.0 * z[0]])).unwrap();
        assert!(report.projection_error > 0.0);
        assert!(
            report.residual_identity_gap <= 3.0 * report.gap_stderr,
            "gap {} stderr {}",
            report.residual_identity_gap,
            report.gap_stderr
        );
    }

    #[test]
    fn noise_raises_floor_not_projection() {
        let basis = BasisSet::uniform_hats(-2.0, 2.0, 5).unwrap();
        let mut reports = Vec::new();
        for noise in [0.0, 0.5] {
            let (zs, hs) = dimer_like_data(30_000, 10, noise);
            let design = assemble_least_squares(&zs, &hs, &basis).unwrap();
            let model = solve_force_match_default(&design).unwrap();
            reports
                .push(residual_decomposition(&zs, &hs, &model, |z| Ok(vec![-2.0 * z[0]])).unwrap());
        }
        assert!(reports[1].loss_floor_estimate > reports[0].loss_floor_estimate + 0.1);
        let diff = (reports[1].projection_error - reports[0].projection_error).abs();
        let tol = 3.0 * (reports[0].projection_stderr + reports[1].projection_stderr);
        assert!(diff <= tol, "projection moved by {diff} (tol {tol})");
    }

    #[test]
    fn integrate_line_gives_parabola() {
        let model = CGForceModel {
            basis: BasisSet::Polynomials {
                max_degree: 1,
                support: [-2.0, 2.0],
            },
            coeffs: vec![vec![0.0, -2.0]],
        };
        let grid: Vec<f64> = (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect();
        let table = integrate_model(&model, &grid, 0.0).unwrap();
        for (z, u) in table.z.iter().zip(&table.u) {
            assert!((u - z * z).abs() < 1e-12, "U({z}) = {u}");
        }
    }

    #[test]
    fn hat_model_integates_exactly_on_knot_grid() {
        // Hat coefficients sampling −2z represent the line exactly, so
        // the trapezoid on the knots is the exact antiderivative z².
        let basis = BasisSet::uniform_hats(-2.0, 2.0, 21).unwrap();
        let knots = match &basis {
            BasisSet::HatFunctions { knots } => knots.clone(),
            _ => unreachable!(),
        };
        let coeffs: Vec<f64> = knots.iter().map(|k| -2.0 * k).collect();
        let model = CGForceModel {
            basis,
            coeffs: vec![coeffs],
        };
        let table = integrate_model(&model, &knots, 0.0).unwrap();
        for (z, u) in table.z.iter().zip(&table.u) {
            assert!((u - z * z).abs() < 1e-12);
        }
    }

    #[test]
    fn potential_gradient_round_trips_its_spline() {
        let knots = vec![-1.0, -0.25, 0.5, 1.0];
        let forces = vec![1.5, -0.5, 2.0];
        let model = CGForceModel {
            basis: BasisSet::PotentialGradient {
                knots: knots.clone(),
            },
            coeffs: vec![forces.clone()],
        };
        let grid: Vec<f64> = (0..=80).map(|i| -1.0 + 0.025 * i as f64).collect();
        let table = integrate_model(&model, &grid, -1.0).unwrap();
        // Independent reconstruction of the spline potential.
        let expect_at = |z: f64| -> f64 {
            let mut u = 0.0;
            let mut prev = knots[0];
            for (j, &k) in knots.iter().enumerate().skip(1) {
                if z >= k {
                    u -= forces[j - 1] * (k - prev);
                    prev = k;
                } else {
                    u -= forces[j - 1] * (z - prev);
                    return u;
                }
            }
            u
        };
        for (z, u) in table.z.iter().zip(&table.u) {
            assert!((u - expect_at(*z)).abs() <= 1e-12, "z {z}");
        }
    }

    #[test]
    fn out_of_support_evaluation_clamps_and_counts() {
        let basis = BasisSet::uniform_hats(-1.0, 1.0, 5).unwrap();
        let model = CGForceModel {
            basis,
            coeffs: vec![vec![1.0, 2.0, 3.0, 2.0, 1.0]],
        };
        let mut clamped = 0usize;
        let inside = model.evaluate_counting(&[1.0], &mut clamped).unwrap();
        assert_eq!(clamped, 0);
        let outside = model.evaluate_counting(&[5.0], &mut clamped).unwrap();
        assert_eq!(clamped, 1);
        assert_eq!(inside, outside);
    }

    #[test]
    fn too_few_samples_rejected() {
        let (zs, hs) = dimer_like_data(50, 11, 0.0);
        let basis = BasisSet::uniform_hats(-2.0, 2.0, 21).unwrap();
        assert!(matches!(
            assemble_least_squares(&zs, &hs, &basis),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn model_json_round_trip() {
        let artifact = ModelArtifact {
            model: CGForceModel {
                basis: BasisSet::uniform_hats(-2.0, 2.0, 5).unwrap(),
                coeffs: vec![vec![0.1, 0.2, 0.3, 0.2, 0.1]],
            },
            ridge: 1e-10,
            sample_hash: "abc123".into(),
            n_samples: 1000,
        };
        let text = serde_json::to_string_pretty(&artifact).unwrap();
        let back: ModelArtifact = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model, artifact.model);
        assert_eq!(back.ridge, artifact.ridge);
    }
}
