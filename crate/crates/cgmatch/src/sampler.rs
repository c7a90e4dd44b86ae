//! Sampling the Gibbs measure μ ∝ e^{−βU} and estimating expectations.
//!
//! Three estimators live here:
//!
//! - single-particle random-walk Metropolis Monte Carlo ([`metropolis_sample`]),
//!   fully deterministic given a seed;
//! - binned conditional expectations E[φ | Π(x) = z] over sample sets
//!   ([`conditional_average`]), in the normalized form that satisfies
//!   E[1|z] = 1;
//! - deterministic tensor-grid trapezoidal quadrature for low-dimensional
//!   systems ([`quadrature_expectation`], [`conditional_quadrature`]),
//!   used as an independent ground-truth oracle against Monte Carlo.

use std::io::Write as IoWrite;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::cgmap::CGMap;
use crate::error::{Error, Result};
use crate::microsys::{Beta, Domain, MicroSystem};

/// Default number of bins per coarse component.
pub const DEFAULT_N_BINS: usize = 50;
/// Acceptance rate the burn-in step-size tuner aims for.
pub const TARGET_ACCEPTANCE: f64 = 0.4;
/// Binning range, in percentiles of the sampled coarse values.
pub const BIN_RANGE_PERCENTILES: (f64, f64) = (0.5, 99.5);

/// A set of configurations drawn from the Gibbs measure, with the sampler
/// metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Vec<f64>>,
    pub beta: Beta,
    pub seed: u64,
    pub n_burn: usize,
    pub n_thin: usize,
    /// Step size at the end of burn-in tuning (mean across chains).
    pub step_size: f64,
    /// Fraction of accepted production moves.
    pub acceptance_rate: f64,
    pub warnings: Vec<String>,
}

impl SampleSet {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// One row per sample, comma-separated coordinates, full precision.
    pub fn write_csv<W: IoWrite>(&self, w: &mut W) -> Result<()> {
        for x in &self.samples {
            let row: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Metadata sidecar describing how the samples were produced.
    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_samples": self.samples.len(),
            "n_dof": self.samples.first().map_or(0, |x| x.len()),
            "beta": self.beta.value(),
            "seed": self.seed,
            "n_burn": self.n_burn,
            "n_thin": self.n_thin,
            "step_size": self.step_size,
            "acceptance_rate": self.acceptance_rate,
            "warnings": self.warnings,
        })
    }
}

/// Single-particle random-walk Metropolis: each step perturbs one
/// uniformly chosen particle by a uniform displacement and accepts with
/// probability min(1, e^{−βΔU}). The step size is tuned toward
/// [`TARGET_ACCEPTANCE`] during burn-in only; every `n_thin`-th post
/// burn-in state is retained.
pub fn metropolis_sample(
    system: &MicroSystem,
    beta: Beta,
    n_steps: usize,
    step_size: f64,
    seed: u64,
    n_burn: usize,
    n_thin: usize,
) -> Result<SampleSet> {
    if n_steps <= n_burn {
        return Err(Error::InvalidParameter(format!(
            "n_steps ({n_steps}) must exceed n_burn ({n_burn})"
        )));
    }
    if !(step_size > 0.0) {
        return Err(Error::InvalidParameter("step_size must be positive".into()));
    }
    if n_thin == 0 {
        return Err(Error::InvalidParameter("n_thin must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = system.dim_per_particle();
    let n_particles = system.n_particles();
    let mut x = system.initial_configuration();
    let mut u = system.potential_energy(&x)?;
    let mut step = step_size;

    let mut samples = Vec::with_capacity((n_steps - n_burn) / n_thin + 1);
    let mut window_total = 0usize;
    let mut window_accepted = 0usize;
    let mut prod_total = 0usize;
    let mut prod_accepted = 0usize;

    for s in 0..n_steps {
        let p = rng.gen_range(0..n_particles);
        let mut xn = x.clone();
        for d in 0..dim {
            xn[p * dim + d] += step * (rng.gen::<f64>() * 2.0 - 1.0);
        }
        let accepted = if !system.in_domain(&xn) {
            false
        } else {
            let un = system.potential_energy(&xn)?;
            let du = un - u;
            let take = du <= 0.0 || rng.gen::<f64>() < (-beta.value() * du).exp();
            if take {
                x = xn;
                u = un;
            }
            take
        };
        if s < n_burn {
            window_total += 1;
            if accepted {
                window_accepted += 1;
            }
            if window_total == 100 {
                let rate = window_accepted as f64 / window_total as f64;
                if rate > TARGET_ACCEPTANCE + 0.05 {
                    step *= 1.1;
                } else if rate < TARGET_ACCEPTANCE - 0.05 {
                    step /= 1.1;
                }
                window_total = 0;
                window_accepted = 0;
            }
        } else {
            prod_total += 1;
            if accepted {
                prod_accepted += 1;
            }
            if (s - n_burn) % n_thin == n_thin - 1 {
                samples.push(x.clone());
            }
        }
    }

    let acceptance_rate = prod_accepted as f64 / prod_total as f64;
    let mut warnings = Vec::new();
    if !(0.1..=0.9).contains(&acceptance_rate) {
        warnings.push(format!(
            "production acceptance rate {acceptance_rate:.3} outside [0.1, 0.9]; \
             consider adjusting step_size or burn-in"
        ));
    }
    Ok(SampleSet {
        samples,
        beta,
        seed,
        n_burn,
        n_thin,
        step_size: step,
        acceptance_rate,
        warnings,
    })
}

/// Run `n_chains` independent chains with seeds `seed + chain_index` and
/// concatenate their samples in chain order.
#[allow(clippy::too_many_arguments)]
pub fn metropolis_chains(
    system: &MicroSystem,
    beta: Beta,
    n_steps: usize,
    step_size: f64,
    seed: u64,
    n_burn: usize,
    n_thin: usize,
    n_chains: usize,
) -> Result<SampleSet> {
    if n_chains == 0 {
        return Err(Error::InvalidParameter("n_chains must be at least 1".into()));
    }
    let mut merged: Option<SampleSet> = None;
    let mut step_sum = 0.0;
    let mut acc_sum = 0.0;
    for c in 0..n_chains {
        let chain = metropolis_sample(
            system,
            beta,
            n_steps,
            step_size,
            seed.wrapping_add(c as u64),
            n_burn,
            n_thin,
        )?;
        step_sum += chain.step_size;
        acc_sum += chain.acceptance_rate;
        match &mut merged {
            None => merged = Some(chain),
            Some(m) => {
                m.samples.extend(chain.samples);
                for w in chain.warnings {
                    m.warnings.push(format!("chain {c}: {w}"));
                }
            }
        }
    }
    let mut out = merged.expect("n_chains >= 1");
    out.seed = seed;
    out.step_size = step_sum / n_chains as f64;
    out.acceptance_rate = acc_sum / n_chains as f64;
    Ok(out)
}

/// How to place bins over sampled coarse values.
#[derive(Debug, Clone)]
pub enum Binning {
    /// Uniform bins between the 0.5th and 99.5th percentile of the
    /// samples, per component.
    Auto { n_bins: usize },
    /// Explicit strictly increasing edge vectors, one per component.
    Explicit { edges: Vec<Vec<f64>> },
}

impl Default for Binning {
    fn default() -> Self {
        Binning::Auto {
            n_bins: DEFAULT_N_BINS,
        }
    }
}

/// Binned estimate of a conditional expectation E[φ|z] on a product grid
/// over the coarse space (one or two components). Bins are flattened
/// row-major; empty bins carry NaN means.
#[derive(Debug, Clone)]
pub struct BinnedConditional {
    pub bin_edges: Vec<Vec<f64>>,
    /// Per flattened bin: mean of each φ component.
    pub bin_means: Vec<Vec<f64>>,
    pub bin_counts: Vec<usize>,
    /// Standard error of the mean per bin and φ component; infinite for
    /// counts below 2.
    pub bin_stderr: Vec<Vec<f64>>,
    /// Samples where the map or observable hit a degeneracy guard.
    pub n_excluded: usize,
    /// Samples whose coarse value fell outside the binning range.
    pub n_out_of_range: usize,
}

impl BinnedConditional {
    pub fn n_bins(&self) -> usize {
        self.bin_counts.len()
    }

    /// Center of a flattened bin index.
    pub fn bin_center(&self, flat: usize) -> Vec<f64> {
        let mut idx = flat;
        let mut center = vec![0.0; self.bin_edges.len()];
        for c in (0..self.bin_edges.len()).rev() {
            let nb = self.bin_edges[c].len() - 1;
            let i = idx % nb;
            idx /= nb;
            center[c] = 0.5 * (self.bin_edges[c][i] + self.bin_edges[c][i + 1]);
        }
        center
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn find_bin(edges: &[f64], z: f64) -> Option<usize> {
    let last = edges.len() - 1;
    if z < edges[0] || z > edges[last] {
        return None;
    }
    if z == edges[last] {
        return Some(last - 1);
    }
    Some(edges.partition_point(|&e| e <= z) - 1)
}

/// Bin precomputed (z, φ) pairs. Core of [`conditional_average`]; usable
/// directly when z and φ were produced elsewhere.
pub fn bin_conditional(
    zs: &[Vec<f64>],
    phis: &[Vec<f64>],
    binning: &Binning,
) -> Result<BinnedConditional> {
    if zs.len() != phis.len() {
        return Err(Error::DimensionMismatch {
            expected: zs.len(),
            got: phis.len(),
        });
    }
    if zs.is_empty() {
        return Err(Error::EmptyBinning("no samples to bin".into()));
    }
    let d = zs[0].len();
    if d == 0 || d > 2 {
        return Err(Error::Unsupported(format!(
            "grid binning supports 1 or 2 coarse components, got {d}"
        )));
    }
    let k = phis[0].len();

    let edges: Vec<Vec<f64>> = match binning {
        Binning::Explicit { edges } => {
            if edges.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: edges.len(),
                });
            }
            for e in edges {
                if e.len() < 2 || e.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::EmptyBinning(
                        "edges must be strictly increasing with at least two entries".into(),
                    ));
                }
            }
            edges.clone()
        }
        Binning::Auto { n_bins } => {
            if *n_bins == 0 {
                return Err(Error::InvalidParameter("n_bins must be positive".into()));
            }
            let mut edges = Vec::with_capacity(d);
            for c in 0..d {
                let mut vals: Vec<f64> = zs.iter().map(|z| z[c]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let lo = percentile(&vals, BIN_RANGE_PERCENTILES.0);
                let hi = percentile(&vals, BIN_RANGE_PERCENTILES.1);
                if !(hi > lo) {
                    return Err(Error::EmptyBinning(format!(
                        "degenerate binning range [{lo}, {hi}] for component {c}"
                    )));
                }
                let w = (hi - lo) / *n_bins as f64;
                edges.push((0..=*n_bins).map(|i| lo + w * i as f64).collect());
            }
            edges
        }
    };

    let nb_per: Vec<usize> = edges.iter().map(|e| e.len() - 1).collect();
    let total_bins: usize = nb_per.iter().product();
    let mut counts = vec![0usize; total_bins];
    let mut means = vec![vec![0.0; k]; total_bins];
    let mut m2 = vec![vec![0.0; k]; total_bins];
    let mut out_of_range = 0usize;

    for (z, phi) in zs.iter().zip(phis) {
        let mut flat = 0usize;
        let mut ok = true;
        for c in 0..d {
            match find_bin(&edges[c], z[c]) {
                Some(i) => flat = flat * nb_per[c] + i,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            out_of_range += 1;
            continue;
        }
        counts[flat] += 1;
        let n = counts[flat] as f64;
        for j in 0..k {
            let delta = phi[j] - means[flat][j];
            means[flat][j] += delta / n;
            m2[flat][j] += delta * (phi[j] - means[flat][j]);
        }
    }

    let mut stderr = vec![vec![f64::INFINITY; k]; total_bins];
    for b in 0..total_bins {
        match counts[b] {
            0 => {
                means[b] = vec![f64::NAN; k];
                stderr[b] = vec![f64::NAN; k];
            }
            1 => {}
            c => {
                for j in 0..k {
                    let var = (m2[b][j] / (c as f64 - 1.0)).max(0.0);
                    stderr[b][j] = (var / c as f64).sqrt();
                }
            }
        }
    }

    Ok(BinnedConditional {
        bin_edges: edges,
        bin_means: means,
        bin_counts: counts,
        bin_stderr: stderr,
        n_excluded: 0,
        n_out_of_range: out_of_range,
    })
}

/// Binned conditional expectation of an observable given the coarse
/// value: per-bin sample mean and standard error of φ(x) over samples
/// whose z = Π(x) lands in the bin. Samples hitting degeneracy guards in
/// the map or observable are excluded and counted.
pub fn conditional_average<F>(
    samples: &[Vec<f64>],
    map: &CGMap,
    phi: F,
    binning: &Binning,
) -> Result<BinnedConditional>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut zs = Vec::with_capacity(samples.len());
    let mut phis = Vec::with_capacity(samples.len());
    let mut excluded = 0usize;
    for x in samples {
        match map.apply(x).and_then(|z| phi(x).map(|p| (z, p))) {
            Ok((z, p)) => {
                zs.push(z);
                phis.push(p);
            }
            Err(Error::DegenerateGeometry(_))
            | Err(Error::IllConditioned(_))
            | Err(Error::NonFiniteEnergy(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    let mut binned = bin_conditional(&zs, &phis, binning)?;
    binned.n_excluded = excluded;
    Ok(binned)
}

/// Tensor-product grid for quadrature: `n` points per axis (odd, ≥ 3 so
/// that a half-resolution pass shares the endpoints), bounds per axis,
/// and the acceptable integration error.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: usize,
    pub tol: f64,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n: usize, tol: f64) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidParameter("mismatched grid bounds".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
            return Err(Error::InvalidParameter("grid needs lo < hi per axis".into()));
        }
        if n < 3 || n.is_multiple_of(2) {
            return Err(Error::InvalidParameter(
                "grid points per axis must be odd and at least 3".into(),
            ));
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter("tol must be positive".into()));
        }
        Ok(GridSpec { lo, hi, n, tol })
    }
}

/// A quadrature value with its self-reported error estimate, obtained by
/// comparing against a half-resolution pass (second-order extrapolation).
#[derive(Debug, Clone)]
pub struct QuadratureResult {
    pub value: Vec<f64>,
    pub error_estimate: Vec<f64>,
}

/// Relative boundary-density threshold: with an unbounded domain the grid
/// must extend far enough that the Gibbs density at its boundary is
/// negligible.
const BOUNDARY_DENSITY_TOL: f64 = 1e-10;

struct GridPass {
    num: Vec<f64>,
    den: f64,
    max_density: f64,
    max_boundary_density: f64,
}

/// One trapezoid pass over the tensor grid; `point` maps grid indices to
/// a position, `density`/`phi` are evaluated there. The cell volume is
/// constant and omitted (it cancels in normalized ratios); callers that
/// need the raw integral multiply it back.
fn grid_pass<P, R, F>(dims: usize, n: usize, point: P, density: R, phi: F) -> Result<GridPass>
where
    P: Fn(&[usize]) -> Vec<f64>,
    R: Fn(&[f64]) -> Result<f64>,
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut idx = vec![0usize; dims];
    let mut num: Option<Vec<f64>> = None;
    let mut den = 0.0;
    let mut max_density = 0.0f64;
    let mut max_boundary = 0.0f64;
    loop {
        let x = point(&idx);
        let w: f64 = idx
            .iter()
            .map(|&i| if i == 0 || i == n - 1 { 0.5 } else { 1.0 })
            .product();
        let rho = density(&x)?;
        if !rho.is_finite() {
            return Err(Error::Quadrature(format!("non-finite density at {x:?}")));
        }
        max_density = max_density.max(rho);
        if idx.iter().any(|&i| i == 0 || i == n - 1) {
            max_boundary = max_boundary.max(rho);
        }
        let p = phi(&x)?;
        let acc = num.get_or_insert_with(|| vec![0.0; p.len()]);
        for (a, v) in acc.iter_mut().zip(&p) {
            *a += w * rho * v;
        }
        den += w * rho;
        // Odometer increment over the tensor grid.
        let mut c = 0;
        loop {
            idx[c] += 1;
            if idx[c] < n {
                break;
            }
            idx[c] = 0;
            c += 1;
            if c == dims {
                return Ok(GridPass {
                    num: num.unwrap_or_default(),
                    den,
                    max_density,
                    max_boundary_density: max_boundary,
                });
            }
        }
    }
}

fn ratio(pass: &GridPass) -> Result<Vec<f64>> {
    if !(pass.den > 0.0) {
        return Err(Error::Quadrature("density integrates to zero on grid".into()));
    }
    Ok(pass.num.iter().map(|v| v / pass.den).collect())
}

fn check_boundary(pass: &GridPass, unbounded: bool) -> Result<()> {
    if unbounded && pass.max_boundary_density > BOUNDARY_DENSITY_TOL * pass.max_density {
        return Err(Error::Quadrature(format!(
            "grid does not cover the support: boundary density {:.3e} exceeds {BOUNDARY_DENSITY_TOL:.0e} of max {:.3e}",
            pass.max_boundary_density, pass.max_density
        )));
    }
    Ok(())
}

fn richardson(fine: &[f64], coarse: &[f64]) -> Vec<f64> {
    fine.iter()
        .zip(coarse)
        .map(|(f, c)| (f - c).abs() / 3.0)
        .collect()
}

fn check_tol(est: &[f64], tol: f64) -> Result<()> {
    let worst = est.iter().cloned().fold(0.0f64, f64::max);
    if worst > tol {
        return Err(Error::Quadrature(format!(
            "grid too coarse: error estimate {worst:.3e} above tolerance {tol:.1e}"
        )));
    }
    Ok(())
}

/// E_μ[φ] by trapezoidal quadrature over the full configuration space
/// (small systems only). The estimate is normalized by the grid partition
/// function, and a half-resolution pass provides the error estimate.
pub fn quadrature_expectation<F>(
    system: &MicroSystem,
    beta: Beta,
    phi: F,
    grid: &GridSpec,
) -> Result<QuadratureResult>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let dims = system.n_dof();
    if dims > 4 {
        return Err(Error::Unsupported(format!(
            "full-space quadrature limited to 4 degrees of freedom, got {dims}"
        )));
    }
    if grid.lo.len() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: grid.lo.len(),
        });
    }
    if let Domain::Box { side } = system.domain() {
        if grid.lo.iter().any(|&v| v < 0.0) || grid.hi.iter().any(|&v| v > side) {
            return Err(Error::InvalidParameter(
                "grid exceeds the box domain".into(),
            ));
        }
    }
    let unbounded = matches!(system.domain(), Domain::Unbounded);
    let density = |x: &[f64]| -> Result<f64> {
        Ok((-beta.value() * system.potential_energy(x)?).exp())
    };
    let mut results = Vec::with_capacity(2);
    for n in [grid.n, grid.n.div_ceil(2)] {
        let steps: Vec<f64> = (0..dims)
            .map(|i| (grid.hi[i] - grid.lo[i]) / (n - 1) as f64)
            .collect();
        let point =
            |idx: &[usize]| -> Vec<f64> {
                idx.iter()
                    .enumerate()
                    .map(|(i, &j)| grid.lo[i] + steps[i] * j as f64)
                    .collect()
            };
        let pass = grid_pass(dims, n, point, density, &phi)?;
        if n == grid.n {
            check_boundary(&pass, unbounded)?;
        }
        results.push(ratio(&pass)?);
    }
    let est = richardson(&results[0], &results[1]);
    check_tol(&est, grid.tol)?;
    Ok(QuadratureResult {
        value: results.swap_remove(0),
        error_estimate: est,
    })
}

/// Orthonormal basis of the null space of T (columns), via the spectral
/// decomposition of the orthogonal projector I − Tᵗ(TTᵗ)⁻¹T.
fn null_space_basis(t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, big_d) = t.shape();
    let tt = t * t.transpose();
    let tt_inv_t = tt
        .lu()
        .solve(t)
        .ok_or_else(|| Error::IllConditioned("TTᵗ is singular".into()))?;
    let proj = DMatrix::identity(big_d, big_d) - t.transpose() * tt_inv_t;
    let svd = proj.svd(true, false);
    let u = svd.u.as_ref().expect("SVD with u requested");
    let mut cols = Vec::new();
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] > 0.5 {
            cols.push(u.column(i).into_owned());
        }
    }
    if cols.len() != big_d - d {
        return Err(Error::IllConditioned(format!(
            "null space dimension {} does not match D - d = {}",
            cols.len(),
            big_d - d
        )));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Minimum-norm solution of T x = z.
fn min_norm_solution(t: &DMatrix<f64>, z: &[f64]) -> Result<DVector<f64>> {
    let tt = t * t.transpose();
    let rhs = DVector::from_column_slice(z);
    let y = tt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::IllConditioned("TTᵗ is singular".into()))?;
    Ok(t.transpose() * y)
}

/// E[φ | Tx = z] for a linear map, by quadrature over the fiber
/// {x₀(z) + Q u}, where Q is an orthonormal null-space basis of T. The
/// constant fiber volume factor cancels in the normalized ratio.
pub fn conditional_quadrature<F>(
    system: &MicroSystem,
    beta: Beta,
    map: &CGMap,
    phi: F,
    z_values: &[Vec<f64>],
    grid: &GridSpec,
) -> Result<Vec<QuadratureResult>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let t = map
        .linear_matrix()
        .ok_or_else(|| Error::Unsupported("conditional quadrature needs a linear map".into()))?;
    if system.n_dof() > 4 {
        return Err(Error::Unsupported(
            "conditional quadrature limited to 4 degrees of freedom".into(),
        ));
    }
    if map.d_in() != system.n_dof() {
        return Err(Error::DimensionMismatch {
            expected: system.n_dof(),
            got: map.d_in(),
        });
    }
    let fiber_dims = map.d_in() - map.d_out();
    if grid.lo.len() != fiber_dims {
        return Err(Error::DimensionMismatch {
            expected: fiber_dims,
            got: grid.lo.len(),
        });
    }
    let q = null_space_basis(t)?;
    let unbounded = matches!(system.domain(), Domain::Unbounded);
    let mut out = Vec::with_capacity(z_values.len());
    for z in z_values {
        if z.len() != map.d_out() {
            return Err(Error::DimensionMismatch {
                expected: map.d_out(),
                got: z.len(),
            });
        }
        let x0 = min_norm_solution(t, z)?;
        let to_x = |u_coords: &[f64]| -> Vec<f64> {
            let uv = DVector::from_column_slice(u_coords);
            (&x0 + &q * uv).iter().copied().collect()
        };
        let density = |u_coords: &[f64]| -> Result<f64> {
            Ok((-beta.value() * system.potential_energy(&to_x(u_coords))?).exp())
        };
        let phi_u = |u_coords: &[f64]| -> Result<Vec<f64>> { phi(&to_x(u_coords)) };
        let mut results = Vec::with_capacity(2);
        for n in [grid.n, grid.n.div_ceil(2)] {
            let steps: Vec<f64> = (0..fiber_dims)
                .map(|i| (grid.hi[i] - grid.lo[i]) / (n - 1) as f64)
                .collect();
            let point = |idx: &[usize]| -> Vec<f64> {
                idx.iter()
                    .enumerate()
                    .map(|(i, &j)| grid.lo[i] + steps[i] * j as f64)
                    .collect()
            };
            let pass = grid_pass(fiber_dims, n, point, density, phi_u)?;
            if n == grid.n {
                check_boundary(&pass, unbounded)?;
            }
            results.push(ratio(&pass)?);
        }
        let est = richardson(&results[0], &results[1]);
        check_tol(&est, grid.tol)?;
        out.push(QuadratureResult {
            value: results.swap_remove(0),
            error_estimate: est,
        });
    }
    Ok(out)
}

/// Unnormalized fiber integral ∫ e^{−βU(x₀(z) + Qu)} du for a linear map,
/// proportional to the coarse marginal density at z (the proportionality
/// constant is z-independent, so differences of its logarithm are exact).
pub fn fiber_weight(
    system: &MicroSystem,
    beta: Beta,
    map: &CGMap,
    z: &[f64],
    grid: &GridSpec,
) -> Result<QuadratureResult> {
    let t = map
        .linear_matrix()
        .ok_or_else(|| Error::Unsupported("fiber weights need a linear map".into()))?;
    let fiber_dims = map.d_in() - map.d_out();
    if grid.lo.len() != fiber_dims {
        return Err(Error::DimensionMismatch {
            expected: fiber_dims,
            got: grid.lo.len(),
        });
    }
    let q = null_space_basis(t)?;
    let x0 = min_norm_solution(t, z)?;
    let to_x = |u_coords: &[f64]| -> Vec<f64> {
        let uv = DVector::from_column_slice(u_coords);
        (&x0 + &q * uv).iter().copied().collect()
    };
    let density =
        |u_coords: &[f64]| -> Result<f64> {
            Ok((-beta.value() * system.potential_energy(&to_x(u_coords))?).exp())
        };
    let unbounded = matches!(system.domain(), Domain::Unbounded);
    let mut vals = Vec::with_capacity(2);
    for n in [grid.n, grid.n.div_ceil(2)] {
        let steps: Vec<f64> = (0..fiber_dims)
            .map(|i| (grid.hi[i] - grid.lo[i]) / (n - 1) as f64)
            .collect();
        let point = |idx: &[usize]| -> Vec<f64> {
            idx.iter()
                .enumerate()
                .map(|(i, &j)| grid.lo[i] + steps[i] * j as f64)
                .collect()
        };
        let pass = grid_pass(fiber_dims, n, point, density, |_x: &[f64]| Ok(vec![]))?;
        if n == grid.n {
            check_boundary(&pass, unbounded)?;
        }
        let volume: f64 = steps.iter().product();
        vals.push(pass.den * volume);
    }
    let est = (vals[0] - vals[1]).abs() / 3.0;
    check_tol(&[est], grid.tol)?;
    Ok(QuadratureResult {
        value: vec![vals[0]],
        error_estimate: vec![est],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgmap::center_of_mass;
    use crate::meanforce::{local_mean_force, WSpec};
    use crate::microsys;

    fn beta(v: f64) -> Beta {
        Beta::new(v).unwrap()
    }

    fn dimer_samples(n_target: usize, seed: u64) -> SampleSet {
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let n_steps = n_target * 10 + n_target;
        metropolis_sample(&sys, beta(1.0), n_steps, 0.5, seed, n_target, 10).unwrap()
    }

    #[test]
    fn dimer_variance_matches_gaussian() {
        let set = dimer_samples(100_000, 123);
        assert_eq!(set.n_samples(), 100_000);
        assert!(set.warnings.is_empty(), "{:?}", set.warnings);
        let n = set.n_samples() as f64;
        let mean: f64 = set.samples.iter().map(|x| x[0]).sum::<f64>() / n;
        let var: f64 =
            set.samples.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Var of the sample variance of a Gaussian is 2σ⁴/(n−1).
        let stderr = (2.0 / (n - 1.0)).sqrt();
        assert!(
            (var - 1.0).abs() <= 3.0 * stderr,
            "variance {var} vs 1.0 (stderr {stderr})"
        );
    }

    #[test]
    fn ideal_gas_uniform_marginal() {
        let side = 5.0;
        let sys = microsys::ideal_gas(8, side).unwrap();
        let set = metropolis_sample(&sys, beta(1.0), 140_000, 1.0, 77, 40_000, 50).unwrap();
        let mut vals: Vec<f64> = set.samples.iter().map(|x| x[0]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len() as f64;
        let mut ks = 0.0f64;
        for (i, v) in vals.iter().enumerate() {
            let f = v / side;
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            ks = ks.max((f - lo).abs()).max((f - hi).abs());
        }
        let critical = 1.358 / n.sqrt(); // 5% level
        assert!(ks < critical, "KS {ks} vs critical {critical}");
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let a = dimer_samples(5_000, 42);
        let b = dimer_samples(5_000, 42);
        assert_eq!(a, b);
        let c = dimer_samples(5_000, 43);
        assert_ne!(a.samples, c.samples);

        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let m1 = metropolis_chains(&sys, beta(1.0), 20_000, 0.5, 7, 2_000, 10, 3).unwrap();
        let m2 = metropolis_chains(&sys, beta(1.0), 20_000, 0.5, 7, 2_000, 10, 3).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.n_samples(), 3 * 1_800);
    }

    #[test]
    fn acceptance_warning_when_step_absurd() {
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        // No burn-in, so no tuning: a giant step keeps acceptance tiny.
        let set = metropolis_sample(&sys, beta(1.0), 5_000, 500.0, 1, 0, 1).unwrap();
        assert!(set.acceptance_rate < 0.1);
        assert!(!set.warnings.is_empty());
    }

    #[test]
    fn conditional_average_recovers_linear_mean_force() {
        // On the harmonic dimer with the midpoint map, h = −2z holds
        // configuration-wise, so each bin must sit on the line through the
        // bin's own z-mean.
        let set = dimer_samples(20_000, 9);
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let map = center_of_mass(&[vec![0, 1]], &[1.0, 1.0], 1).unwrap();
        let phi = |x: &[f64]| -> Result<Vec<f64>> {
            let h = local_mean_force(&sys, &map, &WSpec::EqualsJacobian, beta(1.0), x)?;
            let z = map.apply(x)?;
            Ok(vec![h[0], z[0]])
        };
        let binned =
            conditional_average(&set.samples, &map, phi, &Binning::Auto { n_bins: 30 }).unwrap();
        let mut checked = 0;
        for b in 0..binned.n_bins() {
            if binned.bin_counts[b] < 100 {
                continue;
            }
            let h_mean = binned.bin_means[b][0];
            let z_mean = binned.bin_means[b][1];
            let tol = 3.0 * binned.bin_stderr[b][0] + 1e-12;
            assert!(
                (h_mean + 2.0 * z_mean).abs() <= tol,
                "bin {b}: {h_mean} vs {}",
                -2.0 * z_mean
            );
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn constant_observable_is_exact() {
        let set = dimer_samples(2_000, 11);
        let map = center_of_mass(&[vec![0, 1]], &[1.0, 1.0], 1).unwrap();
        let binned = conditional_average(
            &set.samples,
            &map,
            |_x| Ok(vec![2.5]),
            &Binning::default(),
        )
        .unwrap();
        for b in 0..binned.n_bins() {
            if binned.bin_counts[b] > 0 {
                assert_eq!(binned.bin_means[b][0], 2.5);
            }
        }
    }

    #[test]
    fn z_observable_stays_within_bin_edges() {
        let set = dimer_samples(2_000, 13);
        let map = center_of_mass(&[vec![0, 1]], &[1.0, 1.0], 1).unwrap();
        let map2 = map.clone();
        let binned = conditional_average(
            &set.samples,
            &map,
            move |x| map2.apply(x),
            &Binning::default(),
        )
        .unwrap();
        for b in 0..binned.n_bins() {
            if binned.bin_counts[b] == 0 {
                continue;
            }
            let lo = binned.bin_edges[0][b];
            let hi = binned.bin_edges[0][b + 1];
            let m = binned.bin_means[b][0];
            assert!(m >= lo && m <= hi, "bin [{lo}, {hi}] mean {m}");
        }
    }

    #[test]
    fn tower_property_is_exact() {
        let set = dimer_samples(10_000, 17);
        let map = center_of_mass(&[vec![0, 1]], &[1.0, 1.0], 1).unwrap();
        let phi = |x: &[f64]| -> Result<Vec<f64>> { Ok(vec![x[0] * x[0], x[1]]) };
        // Edges spanning every sample so nothing is out of range.
        let zs: Vec<f64> = set
            .samples
            .iter()
            .map(|x| map.apply(x).unwrap()[0])
            .collect();
        let lo = zs.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
        let hi = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
        let n_bins = 40;
        let w = (hi - lo) / n_bins as f64;
        let edges: Vec<f64> = (0..=n_bins).map(|i| lo + w * i as f64).collect();
        let binned = conditional_average(
            &set.samples,
            &map,
            phi,
            &Binning::Explicit { edges: vec![edges] },
        )
        .unwrap();
        let total: usize = binned.bin_counts.iter().sum();
        assert_eq!(total, set.n_samples());
        assert_eq!(binned.n_out_of_range, 0);

        for j in 0..2 {
            let reweighted: f64 = (0..binned.n_bins())
                .filter(|&b| binned.bin_counts[b] > 0)
                .map(|b| binned.bin_counts[b] as f64 / total as f64 * binned.bin_means[b][j])
                .sum();
            let plain: f64 = set
                .samples
                .iter()
                .map(|x| if j == 0 { x[0] * x[0] } else { x[1] })
                .sum::<f64>()
                / total as f64;
            assert!((reweighted - plain).abs() <= 1e-12);
        }
    }

    #[test]
    fn degenerate_binning_range_rejected() {
        let zs = vec![vec![1.0]; 100];
        let phis = vec![vec![0.0]; 100];
        assert!(matches!(
            bin_conditional(&zs, &phis, &Binning::default()),
            Err(Error::EmptyBinning(_))
        ));
    }

    fn dimer_grid() -> GridSpec {
        GridSpec::new(vec![-8.0, -8.0], vec![8.0, 8.0], 201, 1e-6).unwrap()
    }

    #[test]
    fn quadrature_moments_on_dimer() {
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let b = beta(1.0);
        let r = quadrature_expectation(&sys, b, |x| Ok(vec![x[0] * x[0]]), &dimer_grid()).unwrap();
        assert!((r.value[0] - 1.0).abs() < 1e-6, "E[x1^2] = {}", r.value[0]);

        let r = quadrature_expectation(&sys, b, |_x| Ok(vec![1.0]), &dimer_grid()).unwrap();
        assert!((r.value[0] - 1.0).abs() < 1e-10);

        // E[f1] = E[−x1] vanishes by symmetry.
        let sys2 = microsys::harmonic_dimer(1.0).unwrap();
        let r = quadrature_expectation(
            &sys,
            b,
            move |x| Ok(vec![sys2.force(x).unwrap()[0]]),
            &dimer_grid(),
        )
        .unwrap();
        assert!(r.value[0].abs() < 1e-8);
    }

    #[test]
    fn quadrature_needs_covering_grid() {
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let tight = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], 41, 1e-6).unwrap();
        assert!(matches!(
            quadrature_expectation(&sys, beta(1.0), |_x| Ok(vec![1.0]), &tight),
            Err(Error::Quadrature(_))
        ));
    }

    #[test]
    fn quadrature_agrees_with_monte_carlo() {
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let b = beta(1.0);
        let set = dimer_samples(100_000, 31);
        // Twenty monomials x1^p x2^q with 1 ≤ p+q ≤ 5.
        let mut powers = Vec::new();
        for total in 1..=5u32 {
            for p in 0..=total {
                powers.push((p, total - p));
            }
        }
        assert_eq!(powers.len(), 20);
        let powers2 = powers.clone();
        let quad = quadrature_expectation(
            &sys,
            b,
            move |x| Ok(powers2.iter().map(|&(p, q)| x[0].powi(p as i32) * x[1].powi(q as i32)).collect()),
            &dimer_grid(),
        )
        .unwrap();
        let n = set.n_samples() as f64;
        for (k, &(p, q)) in powers.iter().enumerate() {
            let vals: Vec<f64> = set
                .samples
                .iter()
                .map(|x| x[0].powi(p as i32) * x[1].powi(q as i32))
                .collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let stderr = (var / n).sqrt();
            assert!(
                (mean - quad.value[k]).abs() <= 3.0 * stderr + 1e-9,
                "monomial x1^{p} x2^{q}: mc {mean} vs quad {}",
                quad.value[k]
            );
        }
    }

    #[test]
    fn conditional_quadrature_on_dimer_com() {
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let b = beta(1.0);
        let map = center_of_mass(&[vec![0, 1]], &[1.0, 1.0], 1).unwrap();
        let grid = GridSpec::new(vec![-8.0], vec![8.0], 201, 1e-6).unwrap();

        let sys2 = sys.clone();
        let map2 = map.clone();
        let res = conditional_quadrature(
            &sys,
            b,
            &map,
            move |x| local_mean_force(&sys2, &map2, &WSpec::EqualsJacobian, b, x),
            &[vec![0.5]],
            &grid,
        )
        .unwrap();
        assert!((res[0].value[0] - (-1.0)).abs() < 1e-6, "E[h|0.5] = {}", res[0].value[0]);

        let res =
            conditional_quadrature(&sys, b, &map, |_x| Ok(vec![1.0]), &[vec![0.3]], &grid)
                .unwrap();
        assert!((res[0].value[0] - 1.0).abs() < 1e-10);

        let res = conditional_quadrature(
            &sys,
            b,
            &map,
            |x| Ok(vec![x[0] - x[1]]),
            &[vec![0.7]],
            &grid,
        )
        .unwrap();
        assert!(res[0].value[0].abs() < 1e-8);
    }

    #[test]
    fn fiber_weight_matches_gaussian_marginal_shape() {
        // For the dimer with the midpoint map the coarse marginal is
        // Gaussian with variance 1/2, so log-weight differences equal
        // −z²·β against the z = 0 reference.
        let sys = microsys::harmonic_dimer(1.0).unwrap();
        let b = beta(1.0);
        let map = center_of_mass(&[vec![0, 1]], &[1.0, 1.0], 1).unwrap();
        let grid = GridSpec::new(vec![-8.0], vec![8.0], 201, 1e-6).unwrap();
        let w0 = fiber_weight(&sys, b, &map, &[0.0], &grid).unwrap().value[0];
        for z in [0.3, 0.8, -0.5] {
            let wz = fiber_weight(&sys, b, &map, &[z], &grid).unwrap().value[0];
            let expected = -z * z; // log(μ̄(z)/μ̄(0)) at β=1
            assert!(
                ((wz / w0).ln() - expected).abs() < 1e-8,
                "z {z}: {} vs {expected}",
                (wz / w0).ln()
            );
        }
    }

    #[test]
    fn sample_set_round_trips_csv() {
        let set = dimer_samples(100, 3);
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(parsed, set.samples);
        let meta = set.metadata_json();
        assert_eq!(meta["n_samples"], 100);
        assert_eq!(meta["beta"], 1.0);
    }
}
