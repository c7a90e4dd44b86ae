//! Small 3-vector geometry helpers shared by potentials and CG maps.

pub(crate) fn sub3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: &[f64]) -> f64 {
    dot3(a, a).sqrt()
}

/// Bending angle at vertex `xj` formed by `xi - xj` and `xk - xj`, in (0, pi).
///
/// Returns `None` when either bond vector vanishes.
pub(crate) fn angle(xi: &[f64], xj: &[f64], xk: &[f64]) -> Option<f64> {
    let a = sub3(xi, xj);
    let b = sub3(xk, xj);
    let na = norm3(&a);
    let nb = norm3(&b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c = (dot3(&a, &b) / (na * nb)).clamp(-1.0, 1.0);
    Some(c.acos())
}

/// Gradient of the bending angle with respect to (xi, xj, xk).
///
/// Returns `None` at degenerate geometries (zero bond length or
/// collinear atoms, where sin(theta) vanishes).
pub(crate) fn angle_gradient(
    xi: &[f64],
    xj: &[f64],
    xk: &[f64],
    sin_tol: f64,
) -> Option<([f64; 3], [f64; 3], [f64; 3])> {
    let a = sub3(xi, xj);
    let b = sub3(xk, xj);
    let na = norm3(&a);
    let nb = norm3(&b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let cos_t = (dot3(&a, &b) / (na * nb)).clamp(-1.0, 1.0);
    let sin_t = (1.0 - cos_t * cos_t).sqrt();
    if sin_t < sin_tol {
        return None;
    }
    // d(theta)/d(xi) = -1/sin * (b/(na*nb) - cos * a/na^2), analogous for xk.
    let mut gi = [0.0; 3];
    let mut gk = [0.0; 3];
    for d in 0..3 {
        gi[d] = -(b[d] / (na * nb) - cos_t * a[d] / (na * na)) / sin_t;
        gk[d] = -(a[d] / (na * nb) - cos_t * b[d] / (nb * nb)) / sin_t;
    }
    let gj = [-gi[0] - gk[0], -gi[1] - gk[1], -gi[2] - gk[2]];
    Some((gi, gj, gk))
}
