//! Coarse-graining maps Π: R^D → R^d (d < D): application, Jacobians
//! DΠ(x), Gram matrices JΠ = DΠ DΠᵗ, rank diagnostics, and the
//! finite-difference divergence of the weighted matrix field G_W⁻¹W that
//! corrects the local mean force on curved (nonlinear) coordinates.
//!
//! Linear maps carry an explicit coefficient matrix T with apply(x) = T·x
//! and a constant Jacobian. The nonlinear reaction coordinates (bending
//! angle, end-to-end distance) have hand-coded analytic gradients; a
//! central finite-difference Jacobian is available as a fallback and as an
//! independent oracle.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geom;
use crate::meanforce::WSpec;

/// Absolute step for finite-difference Jacobians.
pub const FD_JACOBIAN_STEP: f64 = 1e-6;
/// Step for the divergence term. It differentiates a field that itself
/// contains derivatives, so a larger step is needed to control
/// cancellation.
pub const DIVERGENCE_STEP: f64 = 1e-4;
/// Default relative singular-value ratio below which DΠ counts as rank
/// deficient; separates genuine degeneracy from roundoff.
pub const RANK_TOL: f64 = 1e-10;

/// Tolerance on weight sums during construction.
const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
enum MapKind {
    Linear { t: DMatrix<f64>, overlapping: bool },
    /// Angle at vertex `j` between bonds j→i and j→k (3-dim particles).
    BendingAngle { i: usize, j: usize, k: usize },
    /// Euclidean distance ‖x_i − x_j‖ (3-dim particles).
    EndToEndDistance { i: usize, j: usize },
}

/// A coarse-graining map from microscopic configurations (length D) to
/// coarse coordinates (length d), with d < D. Immutable after
/// construction and freely shareable across threads.
#[derive(Debug, Clone)]
pub struct CGMap {
    d_in: usize,
    d_out: usize,
    kind: MapKind,
}

/// The d×d Gram matrix J = DΠ DΠᵗ of a map at a configuration; symmetric,
/// and positive definite exactly when DΠ has full row rank.
#[derive(Debug, Clone)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    pub fn from_jacobian(dpi: &DMatrix<f64>) -> Self {
        GramMatrix(dpi * dpi.transpose())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

fn block(x: &[f64], p: usize) -> &[f64] {
    &x[3 * p..3 * p + 3]
}

impl CGMap {
    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, MapKind::Linear { .. })
    }

    /// Coefficient matrix T for linear maps.
    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            MapKind::Linear { t, .. } => Some(t),
            _ => None,
        }
    }

    /// True when the map was built from groups that share a particle.
    /// Overlap is allowed but worth surfacing: it changes which force
    /// combinations are reachable by weight choices.
    pub fn overlapping_groups(&self) -> bool {
        match &self.kind {
            MapKind::Linear { overlapping, .. } => *overlapping,
            _ => false,
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// z = Π(x).
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        match &self.kind {
            MapKind::Linear { t, .. } => {
                let z = t * DVector::from_column_slice(x);
                Ok(z.iter().copied().collect())
            }
            MapKind::BendingAngle { i, j, k } => {
                let theta = geom::angle(block(x, *i), block(x, *j), block(x, *k)).ok_or_else(
                    || Error::DegenerateGeometry("coincident atoms in bending angle".into()),
                )?;
                Ok(vec![theta])
            }
            MapKind::EndToEndDistance { i, j } => {
                Ok(vec![geom::norm3(&geom::sub3(block(x, *i), block(x, *j)))])
            }
        }
    }

    /// DΠ(x), the d×D matrix of coarse-coordinate gradients; analytic for
    /// every constructor here.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(x)?;
        match &self.kind {
            MapKind::Linear { t, .. } => Ok(t.clone()),
            MapKind::BendingAngle { i, j, k } => {
                let (gi, gj, gk) =
                    geom::angle_gradient(block(x, *i), block(x, *j), block(x, *k), 1e-12)
                        .ok_or_else(|| {
                            Error::DegenerateGeometry(
                                "collinear or coincident bending-angle geometry".into(),
                            )
                        })?;
                let mut m = DMatrix::zeros(1, self.d_in);
                for d in 0..3 {
                    m[(0, 3 * i + d)] = gi[d];
                    m[(0, 3 * j + d)] = gj[d];
                    m[(0, 3 * k + d)] = gk[d];
                }
                Ok(m)
            }
            MapKind::EndToEndDistance { i, j } => {
                let a = geom::sub3(block(x, *i), block(x, *j));
                let r = geom::norm3(&a);
                if r == 0.0 {
                    return Err(Error::DegenerateGeometry(
                        "coincident end-to-end endpoints".into(),
                    ));
                }
                let mut m = DMatrix::zeros(1, self.d_in);
                for d in 0..3 {
                    m[(0, 3 * i + d)] = a[d] / r;
                    m[(0, 3 * j + d)] = -a[d] / r;
                }
                Ok(m)
            }
        }
    }

    /// Central finite-difference Jacobian, column by column.
    pub fn fd_jacobian(&self, x: &[f64], step: f64) -> Result<DMatrix<f64>> {
        self.check_len(x)?;
        if !(step > 0.0) {
            return Err(Error::InvalidParameter("step must be positive".into()));
        }
        let mut m = DMatrix::zeros(self.d_out, self.d_in);
        let mut xp = x.to_vec();
        for j in 0..self.d_in {
            xp[j] = x[j] + step;
            let zp = self.apply(&xp)?;
            xp[j] = x[j] - step;
            let zm = self.apply(&xp)?;
            xp[j] = x[j];
            for i in 0..self.d_out {
                m[(i, j)] = (zp[i] - zm[i]) / (2.0 * step);
            }
        }
        Ok(m)
    }

    /// JΠ(x) = DΠ DΠᵗ.
    pub fn gram(&self, x: &[f64]) -> Result<GramMatrix> {
        Ok(GramMatrix::from_jacobian(&self.jacobian(x)?))
    }

    /// True iff the smallest singular value of DΠ(x) exceeds
    /// `tol · (largest singular value)`. Degenerate geometries where the
    /// Jacobian is undefined report `false`.
    pub fn rank_check(&self, x: &[f64], tol: f64) -> Result<bool> {
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter("tol must be positive".into()));
        }
        let jac = match self.jacobian(x) {
            Ok(j) => j,
            Err(Error::DegenerateGeometry(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        let sv = jac.singular_values();
        let smax = sv.iter().cloned().fold(0.0f64, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(smax > 0.0 && smin > tol * smax)
    }

    /// Row-wise divergence of the matrix field M(x) = G_W⁻¹(x)W(x):
    /// component i of the result is Σ_j ∂M_ij/∂x_j, by central finite
    /// differences with the given step. Zero whenever the field is
    /// constant (linear map, constant W).
    pub fn divergence_term(&self, wspec: &WSpec, x: &[f64], step: f64) -> Result<DVector<f64>> {
        self.check_len(x)?;
        matrix_field_divergence(|y| crate::meanforce::gw_inv_w(self, wspec, y), x, step)
    }
}

/// Row-wise divergence (Σ_j ∂M_ij/∂x_j) of an arbitrary matrix field by
/// central finite differences.
pub fn matrix_field_divergence<F>(field: F, x: &[f64], step: f64) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("step must be positive".into()));
    }
    if x.is_empty() {
        return Err(Error::InvalidParameter("empty configuration".into()));
    }
    let mut xp = x.to_vec();
    let mut out: Option<DVector<f64>> = None;
    for j in 0..x.len() {
        xp[j] = x[j] + step;
        let mp = field(&xp)?;
        xp[j] = x[j] - step;
        let mm = field(&xp)?;
        xp[j] = x[j];
        let acc = out.get_or_insert_with(|| DVector::zeros(mp.nrows()));
        for i in 0..mp.nrows() {
            acc[i] += (mp[(i, j)] - mm[(i, j)]) / (2.0 * step);
        }
    }
    Ok(out.expect("x is non-empty"))
}

/// Linear map with explicit coefficient matrix T (d×D, d < D).
pub fn linear_map(t: DMatrix<f64>) -> Result<CGMap> {
    let (d, big_d) = t.shape();
    if d == 0 || big_d == 0 || d >= big_d {
        return Err(Error::InvalidParameter(format!(
            "linear map needs 0 < d < D, got {d}x{big_d}"
        )));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite entries in T".into()));
    }
    Ok(CGMap {
        d_in: big_d,
        d_out: d,
        kind: MapKind::Linear {
            t,
            overlapping: false,
        },
    })
}

/// Center-of-mass map: one coarse site per particle group, weights
/// ζ_gj = m_j / (Σ_{l∈g} m_l), applied blockwise in each of `dim`
/// coordinate directions. Groups may overlap; overlap is flagged on the
/// returned map, not rejected. A full singleton cover (every particle
/// its own site) is allowed: that identity coarse space is what
/// structure diagnostics such as radial distributions operate on.
pub fn center_of_mass(groups: &[Vec<usize>], masses: &[f64], dim: usize) -> Result<CGMap> {
    let n = masses.len();
    if groups.is_empty() || n == 0 {
        return Err(Error::InvalidParameter("empty groups or masses".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("dim must be positive".into()));
    }
    if masses.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
        return Err(Error::InvalidParameter("masses must be positive".into()));
    }
    let mut seen = vec![false; n];
    let mut overlapping = false;
    let d_out = groups.len() * dim;
    let d_in = n * dim;
    if d_out > d_in {
        return Err(Error::InvalidParameter(format!(
            "need d <= D, got {d_out}x{d_in}"
        )));
    }
    let mut t = DMatrix::zeros(d_out, d_in);
    for (g, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::InvalidParameter(format!("group {g} is empty")));
        }
        let mut in_group = vec![false; n];
        let mut total = 0.0;
        for &j in group {
            if j >= n {
                return Err(Error::InvalidParameter(format!(
                    "particle index {j} out of range (n = {n})"
                )));
            }
            if in_group[j] {
                return Err(Error::InvalidParameter(format!(
                    "particle {j} repeated within group {g}"
                )));
            }
            in_group[j] = true;
            if seen[j] {
                overlapping = true;
            }
            seen[j] = true;
            total += masses[j];
        }
        for &j in group {
            let zeta = masses[j] / total;
            for dd in 0..dim {
                t[(g * dim + dd, j * dim + dd)] = zeta;
            }
        }
    }
    Ok(CGMap {
        d_in,
        d_out,
        kind: MapKind::Linear { t, overlapping },
    })
}

/// One coarse site per particle pair; each pair's two weights must sum
/// to 1.
pub fn pairwise_average(
    pairs: &[(usize, usize)],
    weights: &[(f64, f64)],
    n_particles: usize,
    dim: usize,
) -> Result<CGMap> {
    if pairs.is_empty() || pairs.len() != weights.len() {
        return Err(Error::InvalidParameter(
            "pairs and weights must be non-empty and of equal length".into(),
        ));
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("dim must be positive".into()));
    }
    let d_out = pairs.len() * dim;
    let d_in = n_particles * dim;
    if d_out >= d_in {
        return Err(Error::InvalidParameter(format!(
            "need d < D, got {d_out}x{d_in}"
        )));
    }
    let mut seen = vec![false; n_particles];
    let mut overlapping = false;
    let mut t = DMatrix::zeros(d_out, d_in);
    for (p, (&(a, b), &(wa, wb))) in pairs.iter().zip(weights).enumerate() {
        if a >= n_particles || b >= n_particles || a == b {
            return Err(Error::InvalidParameter(format!(
                "invalid pair ({a}, {b}) for n = {n_particles}"
            )));
        }
        if (wa + wb - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "pair {p} weights sum to {}, expected 1",
                wa + wb
            )));
        }
        for &j in &[a, b] {
            if seen[j] {
                overlapping = true;
            }
            seen[j] = true;
        }
        for dd in 0..dim {
            t[(p * dim + dd, a * dim + dd)] = wa;
            t[(p * dim + dd, b * dim + dd)] = wb;
        }
    }
    Ok(CGMap {
        d_in,
        d_out,
        kind: MapKind::Linear { t, overlapping },
    })
}

fn check_particle_indices(n_particles: usize, idx: &[usize]) -> Result<()> {
    for &i in idx {
        if i >= n_particles {
            return Err(Error::InvalidParameter(format!(
                "particle index {i} out of range (n = {n_particles})"
            )));
        }
    }
    for (a, &i) in idx.iter().enumerate() {
        if idx[a + 1..].contains(&i) {
            return Err(Error::InvalidParameter(format!(
                "repeated particle index {i}"
            )));
        }
    }
    Ok(())
}

/// Bending angle at vertex particle `j`, between bonds j→i and j→k
/// (3-dim particles). Values lie in (0, π) away from degenerate
/// geometries.
pub fn bending_angle(n_particles: usize, i: usize, j: usize, k: usize) -> Result<CGMap> {
    check_particle_indices(n_particles, &[i, j, k])?;
    Ok(CGMap {
        d_in: 3 * n_particles,
        d_out: 1,
        kind: MapKind::BendingAngle { i, j, k },
    })
}

/// Euclidean distance between particles `i` and `j` (3-dim particles).
pub fn end_to_end_distance(n_particles: usize, i: usize, j: usize) -> Result<CGMap> {
    check_particle_indices(n_particles, &[i, j])?;
    Ok(CGMap {
        d_in: 3 * n_particles,
        d_out: 1,
        kind: MapKind::EndToEndDistance { i, j },
    })
}

/// Difference vector x_j − x_i as a linear map (3-dim particles).
pub fn end_to_end_vector(n_particles: usize, i: usize, j: usize) -> Result<CGMap> {
    check_particle_indices(n_particles, &[i, j])?;
    let mut t = DMatrix::zeros(3, 3 * n_particles);
    for d in 0..3 {
        t[(d, 3 * i + d)] = -1.0;
        t[(d, 3 * j + d)] = 1.0;
    }
    linear_map(t)
}
