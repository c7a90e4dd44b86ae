//! Reference routes to coarse potentials, for validating force matching:
//! direct free-energy estimation (histogram and quadrature profiles),
//! relative-entropy minimization over parametric potential families with
//! a small-perturbation consistency check, structure-based diagnostics
//! (radial distributions and inverse Boltzmann inversion), and a common
//! weighted metric for comparing potentials up to their irrelevant
//! additive constant.

use std::io::Write as IoWrite;

use serde::{Deserialize, Serialize};

use crate::cgmap::CGMap;
use crate::error::{Error, Result};
use crate::fmatch::PotentialTable;
use crate::microsys::{Beta, MicroSystem};
use crate::sampler::{bin_conditional, fiber_weight, Binning, GridSpec};

/// Largest admissible sup of β·|ΔU| in [`expansion_check`]; beyond this
/// the quadratic expansion of the divergence is not meaningful.
pub const EXPANSION_REGIME_LIMIT: f64 = 0.5;

/// How a free-energy profile was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMFMethod {
    Histogram,
    Quadrature,
    Analytic,
}

/// Free-energy profile A(z) over a scalar coarse coordinate, shifted so
/// the smallest populated value is zero. Unpopulated bins carry `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PMFTable {
    /// Bin centers (histogram) or evaluation nodes (quadrature),
    /// strictly increasing.
    pub z_grid: Vec<f64>,
    pub a_values: Vec<Option<f64>>,
    pub a_stderr: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub beta: f64,
    pub method: PMFMethod,
}

impl PMFTable {
    /// Wrap an externally computed profile (every node populated).
    pub fn from_values(
        z_grid: Vec<f64>,
        a_values: Vec<f64>,
        beta: Beta,
        method: PMFMethod,
    ) -> Result<PMFTable> {
        if z_grid.len() != a_values.len() || z_grid.len() < 2 {
            return Err(Error::InvalidParameter(
                "grid and values must match, with at least two nodes".into(),
            ));
        }
        if z_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "z grid must be strictly increasing".into(),
            ));
        }
        if a_values.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter("non-finite profile value".into()));
        }
        let n = z_grid.len();
        let mut table = PMFTable {
            z_grid,
            a_values: a_values.into_iter().map(Some).collect(),
            a_stderr: vec![None; n],
            counts: vec![1; n],
            beta: beta.value(),
            method,
        };
        table.shift_min_to_zero();
        Ok(table)
    }

    /// Subtract the smallest populated value so min A = 0.
    pub fn shift_min_to_zero(&mut self) {
        let min = self
            .a_values
            .iter()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min.is_finite() {
            for a in self.a_values.iter_mut().flatten() {
                *a -= min;
            }
        }
    }

    /// Maximal runs of consecutive populated bins, as (start, length).
    pub fn populated_runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, a) in self.a_values.iter().enumerate() {
            match (a.is_some(), start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i - s));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, self.a_values.len() - s));
        }
        runs
    }

    /// Rows of `z,a,count,stderr`; unpopulated bins leave a and stderr
    /// empty.
    pub fn write_csv<W: IoWrite>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "z,a,count,stderr")?;
        for i in 0..self.z_grid.len() {
            let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
            writeln!(
                w,
                "{:.16e},{},{},{}",
                self.z_grid[i],
                fmt(&self.a_values[i]),
                self.counts[i],
                fmt(&self.a_stderr[i]),
            )?;
        }
        Ok(())
    }
}

/// Free-energy profile from binned coarse samples:
/// A_i = −(1/β)·ln(c_i / (n·w_i)) over bin counts c_i and widths w_i,
/// shifted so the smallest populated value is zero.
pub fn histogram_pmf(
    samples: &[Vec<f64>],
    map: &CGMap,
    binning: &Binning,
    beta: Beta,
) -> Result<PMFTable> {
    if map.d_out() != 1 {
        return Err(Error::Unsupported(format!(
            "scalar histogram profiles need a one-component coarse space, got {}",
            map.d_out()
        )));
    }
    let mut zs = Vec::with_capacity(samples.len());
    for x in samples {
        match map.apply(x) {
            Ok(z) => zs.push(z),
            Err(Error::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if zs.is_empty() {
        return Err(Error::EmptyBinning("no mappable samples".into()));
    }
    let ones: Vec<Vec<f64>> = vec![vec![1.0]; zs.len()];
    let binned = bin_conditional(&zs, &ones, binning)?;
    let edges = &binned.bin_edges[0];
    let n_valid = binned.bin_counts.iter().sum::<usize>() + binned.n_out_of_range;
    if n_valid == 0 || binned.bin_counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyBinning("all bins empty".into()));
    }
    let beta_v = beta.value();
    let mut table = PMFTable {
        z_grid: edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
        a_values: Vec::new(),
        a_stderr: Vec::new(),
        counts: binned.bin_counts.clone(),
        beta: beta_v,
        method: PMFMethod::Histogram,
    };
    for (i, &c) in binned.bin_counts.iter().enumerate() {
        if c == 0 {
            table.a_values.push(None);
            table.a_stderr.push(None);
        } else {
            let width = edges[i + 1] - edges[i];
            let density = c as f64 / (n_valid as f64 * width);
            table.a_values.push(Some(-density.ln() / beta_v));
            table.a_stderr.push(Some(1.0 / (beta_v * (c as f64).sqrt())));
        }
    }
    table.shift_min_to_zero();
    Ok(table)
}

/// Two-component free-energy surface on a product grid; values are
/// min-shifted, empty cells `None`. Cells are flattened row-major to
/// match the binning order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pmf2D {
    pub edges: Vec<Vec<f64>>,
    pub a_values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub beta: f64,
}

/// Histogram free-energy surface for a two-component coarse space.
pub fn histogram_pmf_2d(
    samples: &[Vec<f64>],
    map: &CGMap,
    binning: &Binning,
    beta: Beta,
) -> Result<Pmf2D> {
    if map.d_out() != 2 {
        return Err(Error::Unsupported(format!(
            "two-component surfaces need d = 2, got {}",
            map.d_out()
        )));
    }
    let mut zs = Vec::with_capacity(samples.len());
    for x in samples {
        match map.apply(x) {
            Ok(z) => zs.push(z),
            Err(Error::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if zs.is_empty() {
        return Err(Error::EmptyBinning("no mappable samples".into()));
    }
    let ones: Vec<Vec<f64>> = vec![vec![1.0]; zs.len()];
    let binned = bin_conditional(&zs, &ones, binning)?;
    let n_valid = binned.bin_counts.iter().sum::<usize>() + binned.n_out_of_range;
    let nx = binned.bin_edges[0].len() - 1;
    let ny = binned.bin_edges[1].len() - 1;
    let beta_v = beta.value();
    let mut a_values = Vec::with_capacity(nx * ny);
    for flat in 0..nx * ny {
        let c = binned.bin_counts[flat];
        if c == 0 {
            a_values.push(None);
            continue;
        }
        let (ix, iy) = (flat / ny, flat % ny);
        let area = (binned.bin_edges[0][ix + 1] - binned.bin_edges[0][ix])
            * (binned.bin_edges[1][iy + 1] - binned.bin_edges[1][iy]);
        let density = c as f64 / (n_valid as f64 * area);
        a_values.push(Some(-density.ln() / beta_v));
    }
    let min = a_values
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::EmptyBinning("all cells empty".into()));
    }
    for a in a_values.iter_mut().flatten() {
        *a -= min;
    }
    Ok(Pmf2D {
        edges: binned.bin_edges,
        a_values,
        counts: binned.bin_counts,
        beta: beta_v,
    })
}

/// Free-energy profile by direct integration over the fibers of a linear
/// map: A(z) = −(1/β)·ln ∫ exp(−βU) over the fiber at z, min-shifted.
/// The fiber parametrization contributes only a z-independent constant,
/// which the shift removes.
pub fn quadrature_pmf(
    system: &MicroSystem,
    beta: Beta,
    map: &CGMap,
    z_grid: &[f64],
    fiber_grid: &GridSpec,
) -> Result<PMFTable> {
    if map.d_out() != 1 {
        return Err(Error::Unsupported(
            "quadrature profiles are implemented for scalar coarse spaces".into(),
        ));
    }
    if z_grid.len() < 2 || z_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "z grid must be strictly increasing with at least two nodes".into(),
        ));
    }
    let beta_v = beta.value();
    let mut a_values = Vec::with_capacity(z_grid.len());
    let mut a_stderr = Vec::with_capacity(z_grid.len());
    for &z in z_grid {
        let res = fiber_weight(system, beta, map, &[z], fiber_grid)?;
        let w = res.value[0];
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::Quadrature(format!(
                "non-positive fiber weight {w} at z = {z}"
            )));
        }
        a_values.push(Some(-w.ln() / beta_v));
        a_stderr.push(Some(res.error_estimate[0] / (beta_v * w)));
    }
    let mut table = PMFTable {
        z_grid: z_grid.to_vec(),
        a_values,
        a_stderr,
        counts: vec![1; z_grid.len()],
        beta: beta_v,
        method: PMFMethod::Quadrature,
    };
    table.shift_min_to_zero();
    Ok(table)
}

/// Mean force −dA/dz tabulated on the profile's grid; `None` where the
/// profile is unpopulated or isolated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanForceTable {
    pub z_grid: Vec<f64>,
    pub f_values: Vec<Option<f64>>,
    pub f_stderr: Vec<Option<f64>>,
}

/// Differentiate a free-energy profile: central differences where both
/// neighbors are populated, one-sided differences at the edges of each
/// populated run. Requires at least one run of three consecutive
/// populated bins. Standard errors combine the neighbors' profile
/// errors.
pub fn mean_force_reference(pmf: &PMFTable) -> Result<MeanForceTable> {
    let runs = pmf.populated_runs();
    if !runs.iter().any(|&(_, len)| len >= 3) {
        return Err(Error::InsufficientData(
            "profile too sparse: need three consecutive populated bins".into(),
        ));
    }
    let n = pmf.z_grid.len();
    let mut f_values = vec![None; n];
    let mut f_stderr = vec![None; n];
    let a = |i: usize| pmf.a_values[i].unwrap();
    let combine = |i: usize, j: usize, dz: f64| -> Option<f64> {
        match (pmf.a_stderr[i], pmf.a_stderr[j]) {
            (Some(si), Some(sj)) => Some((si * si + sj * sj).sqrt() / dz),
            _ => None,
        }
    };
    for &(start, len) in &runs {
        if len < 3 {
            continue;
        }
        let end = start + len - 1;
        for i in start..=end {
            if i > start && i < end {
                let dz = pmf.z_grid[i + 1] - pmf.z_grid[i - 1];
                f_values[i] = Some(-(a(i + 1) - a(i - 1)) / dz);
                f_stderr[i] = combine(i - 1, i + 1, dz);
            } else if i == start {
                let dz = pmf.z_grid[i + 1] - pmf.z_grid[i];
                f_values[i] = Some(-(a(i + 1) - a(i)) / dz);
                f_stderr[i] = combine(i, i + 1, dz);
            } else {
                let dz = pmf.z_grid[i] - pmf.z_grid[i - 1];
                f_values[i] = Some(-(a(i) - a(i - 1)) / dz);
                f_stderr[i] = combine(i - 1, i, dz);
            }
        }
    }
    Ok(MeanForceTable {
        z_grid: pmf.z_grid.clone(),
        f_values,
        f_stderr,
    })
}

/// Parametric family of coarse potentials Ū(z; θ) for relative-entropy
/// fitting.
pub trait CGPotentialFamily {
    fn n_params(&self) -> usize;
    fn name(&self) -> String;
    fn evaluate(&self, z: f64, theta: &[f64]) -> f64;
    /// ∂Ū/∂θ at fixed z, written into `out` (length `n_params`).
    fn grad_theta(&self, z: f64, theta: &[f64], out: &mut [f64]);
}

/// Ū(z; θ) = θ·z²/2.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticWell;

impl CGPotentialFamily for QuadraticWell {
    fn n_params(&self) -> usize {
        1
    }
    fn name(&self) -> String {
        "quadratic well".into()
    }
    fn evaluate(&self, z: f64, theta: &[f64]) -> f64 {
        0.5 * theta[0] * z * z
    }
    fn grad_theta(&self, z: f64, _theta: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * z * z;
    }
}

/// Ū(z; θ) = θ·z.
#[derive(Debug, Clone, Copy)]
pub struct LinearTilt;

impl CGPotentialFamily for LinearTilt {
    fn n_params(&self) -> usize {
        1
    }
    fn name(&self) -> String {
        "linear tilt".into()
    }
    fn evaluate(&self, z: f64, theta: &[f64]) -> f64 {
        theta[0] * z
    }
    fn grad_theta(&self, z: f64, _theta: &[f64], out: &mut [f64]) {
        out[0] = z;
    }
}

/// Ū(z; θ) = base(z) + θ·shape(z) with tabulated base and shape;
/// evaluation interpolates linearly and clamps outside the tables.
#[derive(Debug, Clone)]
pub struct TabulatedPerturbation {
    pub base: PotentialTable,
    pub shape: PotentialTable,
}

impl CGPotentialFamily for TabulatedPerturbation {
    fn n_params(&self) -> usize {
        1
    }
    fn name(&self) -> String {
        "tabulated perturbation".into()
    }
    fn evaluate(&self, z: f64, theta: &[f64]) -> f64 {
        self.base.interpolate(z) + theta[0] * self.shape.interpolate(z)
    }
    fn grad_theta(&self, z: f64, _theta: &[f64], out: &mut [f64]) {
        out[0] = self.shape.interpolate(z);
    }
}

/// Settings for the relative-entropy objective and its minimizer.
#[derive(Debug, Clone)]
pub struct REOptions {
    /// Interval the coarse partition function is integrated over; must
    /// cover the region where exp(−βŪ) has its mass.
    pub support: (f64, f64),
    /// Trapezoid nodes for the partition-function integral (odd, ≥ 3).
    pub quad_points: usize,
    pub max_iters: usize,
    /// Initial line-search step.
    pub step0: f64,
    /// Convergence threshold on the gradient max-norm.
    pub grad_tol: f64,
    /// Convergence threshold on the relative objective decrease.
    pub obj_tol: f64,
}

impl Default for REOptions {
    fn default() -> Self {
        REOptions {
            support: (-8.0, 8.0),
            quad_points: 2001,
            max_iters: 200,
            step0: 0.25,
            grad_tol: 1e-9,
            obj_tol: 1e-13,
        }
    }
}

impl REOptions {
    pub fn with_support(lo: f64, hi: f64) -> Self {
        REOptions {
            support: (lo, hi),
            ..Default::default()
        }
    }

    fn validate(&self, n_params: usize, theta: &[f64]) -> Result<()> {
        if theta.len() != n_params {
            return Err(Error::DimensionMismatch {
                expected: n_params,
                got: theta.len(),
            });
        }
        if !(self.support.1 > self.support.0) {
            return Err(Error::InvalidParameter("empty support interval".into()));
        }
        if self.quad_points < 3 || self.quad_points.is_multiple_of(2) {
            return Err(Error::InvalidParameter(
                "quad_points must be odd and at least 3".into(),
            ));
        }
        Ok(())
    }
}

/// ln ∫ exp(−βŪ(z; θ)) dz over the support, by trapezoid quadrature with
/// overflow-safe shifting; also returns the quadrature expectation of an
/// accumulator over the tilted density when requested.
fn log_partition_and_expectation(
    family: &dyn CGPotentialFamily,
    theta: &[f64],
    beta: f64,
    opts: &REOptions,
    grad_out: Option<&mut [f64]>,
) -> Result<f64> {
    let n = opts.quad_points;
    let (lo, hi) = opts.support;
    let h = (hi - lo) / (n - 1) as f64;
    let mut us = Vec::with_capacity(n);
    for i in 0..n {
        let z = lo + h * i as f64;
        let u = family.evaluate(z, theta);
        if !u.is_finite() {
            return Err(Error::NonFiniteEnergy(format!(
                "coarse potential not finite at z = {z}"
            )));
        }
        us.push(u);
    }
    let umin = us.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut zsum = 0.0;
    let p = family.n_params();
    let mut gsum = vec![0.0; p];
    let mut gbuf = vec![0.0; p];
    for (i, &ui) in us.iter().enumerate() {
        let w = if i == 0 || i == n - 1 { 0.5 * h } else { h };
        let e = (-beta * (ui - umin)).exp();
        zsum += w * e;
        if grad_out.is_some() {
            let z = lo + h * i as f64;
            family.grad_theta(z, theta, &mut gbuf);
            for k in 0..p {
                gsum[k] += w * e * gbuf[k];
            }
        }
    }
    if !(zsum > 0.0) || !zsum.is_finite() {
        return Err(Error::Quadrature(
            "coarse partition function vanished or overflowed".into(),
        ));
    }
    if let Some(out) = grad_out {
        for k in 0..out.len() {
            out[k] = gsum[k] / zsum;
        }
    }
    Ok(-beta * umin + zsum.ln())
}

/// Relative-entropy objective J(θ) = β·mean_s Ū(z_s; θ) + ln Z̄(θ).
/// Up to a θ-independent constant this equals the divergence between the
/// sampled coarse distribution and the model's Gibbs distribution.
pub fn relative_entropy_objective(
    z_samples: &[f64],
    family: &dyn CGPotentialFamily,
    theta: &[f64],
    beta: Beta,
    opts: &REOptions,
) -> Result<f64> {
    opts.validate(family.n_params(), theta)?;
    if z_samples.is_empty() {
        return Err(Error::InsufficientData("no coarse samples".into()));
    }
    let beta_v = beta.value();
    let mut mean_u = 0.0;
    for &z in z_samples {
        let u = family.evaluate(z, theta);
        if !u.is_finite() {
            return Err(Error::NonFiniteEnergy(format!(
                "coarse potential not finite at sample z = {z}"
            )));
        }
        mean_u += u;
    }
    mean_u /= z_samples.len() as f64;
    let log_z = log_partition_and_expectation(family, theta, beta_v, opts, None)?;
    Ok(beta_v * mean_u + log_z)
}

/// ∇J(θ) = β·(mean_s ∂θŪ(z_s) − E_θ[∂θŪ]).
fn relative_entropy_gradient(
    z_samples: &[f64],
    family: &dyn CGPotentialFamily,
    theta: &[f64],
    beta: f64,
    opts: &REOptions,
) -> Result<Vec<f64>> {
    let p = family.n_params();
    let mut data_mean = vec![0.0; p];
    let mut buf = vec![0.0; p];
    for &z in z_samples {
        family.grad_theta(z, theta, &mut buf);
        for k in 0..p {
            data_mean[k] += buf[k];
        }
    }
    let nf = z_samples.len() as f64;
    data_mean.iter_mut().for_each(|v| *v /= nf);
    let mut model_mean = vec![0.0; p];
    log_partition_and_expectation(family, theta, beta, opts, Some(&mut model_mean))?;
    Ok((0..p)
        .map(|k| beta * (data_mean[k] - model_mean[k]))
        .collect())
}

/// Outcome of relative-entropy minimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct REReport {
    pub theta_star: Vec<f64>,
    /// Objective value after each accepted step, starting at θ₀;
    /// non-increasing.
    pub objective_trace: Vec<f64>,
    /// Final objective; equals the divergence up to an additive constant
    /// fixed by the data distribution.
    pub d_estimate: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Filled by [`expansion_check`] when run against this fit.
    pub expansion: Option<ExpansionCheck>,
}

/// Minimize J(θ) by steepest descent with a backtracking line search.
/// Deterministic; every accepted step decreases the objective.
pub fn minimize_relative_entropy(
    z_samples: &[f64],
    family: &dyn CGPotentialFamily,
    theta0: &[f64],
    beta: Beta,
    opts: &REOptions,
) -> Result<REReport> {
    opts.validate(family.n_params(), theta0)?;
    let beta_v = beta.value();
    let mut theta = theta0.to_vec();
    let mut j = relative_entropy_objective(z_samples, family, &theta, beta, opts)?;
    let mut trace = vec![j];
    let mut converged = false;
    let mut iters = 0;
    // The line search doubles its starting step after each success so it
    // adapts to the objective's curvature instead of crawling.
    let mut alpha_start = opts.step0;
    for _ in 0..opts.max_iters {
        let grad = relative_entropy_gradient(z_samples, family, &theta, beta_v, opts)?;
        let gnorm = grad.iter().map(|g| g.abs()).fold(0.0f64, f64::max);
        if gnorm <= opts.grad_tol {
            converged = true;
            break;
        }
        let gsq: f64 = grad.iter().map(|g| g * g).sum();
        let mut alpha = alpha_start;
        let mut accepted = false;
        while alpha > 1e-16 * opts.step0 {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .map(|(t, g)| t - alpha * g)
                .collect();
            match relative_entropy_objective(z_samples, family, &cand, beta, opts) {
                // Strict decrease guards against accepting a step whose
                // sufficient-decrease margin rounds away at machine
                // precision. The margin constant 1/4 also rejects steps
                // that overshoot past the minimum with only a sliver of
                // decrease — a looser constant lets the step adaptation
                // hover at the edge of rejection, where the contraction
                // rate degrades toward 1.
                Ok(jc) if jc.is_finite() && jc < j && jc <= j - 0.25 * alpha * gsq => {
                    theta = cand;
                    let decrease = j - jc;
                    j = jc;
                    trace.push(j);
                    accepted = true;
                    iters += 1;
                    alpha_start = (alpha * 2.0).min(1e6 * opts.step0);
                    if decrease <= opts.obj_tol * (1.0 + j.abs()) {
                        converged = true;
                    }
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        if !accepted {
            if gnorm > 1e3 * opts.grad_tol {
                return Err(Error::OptimizerDiverged(format!(
                    "line search failed with gradient norm {gnorm:.3e}; \
                     the objective does not decrease along its own descent direction"
                )));
            }
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    Ok(REReport {
        theta_star: theta,
        objective_trace: trace,
        d_estimate: j,
        n_iterations: iters,
        converged,
        expansion: None,
    })
}

/// Exact divergence versus its quadratic expansion for a small potential
/// perturbation ΔU = Ū(·; θ) − A.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionCheck {
    /// D(μ̄ ‖ μ̄_θ), computed by quadrature on the profile grid.
    pub d_value: f64,
    /// Leading centered form (β²/2)·Var_μ̄(ΔU); matches `d_value` to
    /// third order in ‖ΔU‖.
    pub half_beta2_variance: f64,
    /// Uncentered form β²·E_μ̄[ΔU²]; differs from the centered form by
    /// β²·E[ΔU]², which does not vanish in general.
    pub beta2_mean_square: f64,
    /// sup over the grid of β·|ΔU|; must not exceed
    /// [`EXPANSION_REGIME_LIMIT`].
    pub sup_beta_delta_u: f64,
}

/// Compare the exact divergence between exp(−βA) and exp(−βŪ(·; θ))
/// Gibbs densities on the profile's populated grid against the centered
/// and uncentered quadratic expansions. Errors when the perturbation
/// exceeds the expansion regime.
pub fn expansion_check(
    pmf: &PMFTable,
    family: &dyn CGPotentialFamily,
    theta: &[f64],
    beta: Beta,
) -> Result<ExpansionCheck> {
    if theta.len() != family.n_params() {
        return Err(Error::DimensionMismatch {
            expected: family.n_params(),
            got: theta.len(),
        });
    }
    let (start, len) = pmf
        .populated_runs()
        .into_iter()
        .max_by_key(|&(_, len)| len)
        .ok_or_else(|| Error::InsufficientData("empty profile".into()))?;
    if len < 3 {
        return Err(Error::InsufficientData(
            "profile too sparse for the expansion check".into(),
        ));
    }
    let beta_v = beta.value();
    let z: Vec<f64> = pmf.z_grid[start..start + len].to_vec();
    let a: Vec<f64> = pmf.a_values[start..start + len]
        .iter()
        .map(|v| v.unwrap())
        .collect();
    let du: Vec<f64> = z
        .iter()
        .zip(&a)
        .map(|(&zi, &ai)| family.evaluate(zi, theta) - ai)
        .collect();
    let sup = du.iter().map(|d| (beta_v * d).abs()).fold(0.0f64, f64::max);
    if sup > EXPANSION_REGIME_LIMIT + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "perturbation outside the expansion regime: sup β|ΔU| = {sup:.3} > {EXPANSION_REGIME_LIMIT}"
        )));
    }
    // Trapezoid weights on the (possibly nonuniform) node grid.
    let n = z.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = z[i + 1] - z[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    let amin = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = a
        .iter()
        .zip(&w)
        .map(|(&ai, &wi)| wi * (-beta_v * (ai - amin)).exp())
        .collect();
    let za: f64 = weights.iter().sum();
    let p: Vec<f64> = weights.iter().map(|v| v / za).collect();
    // Model normalizer over the same grid, stabilized by the same shift.
    let ztheta: f64 = z
        .iter()
        .zip(&w)
        .map(|(&zi, &wi)| wi * (-beta_v * (family.evaluate(zi, theta) - amin)).exp())
        .sum();
    if !(ztheta > 0.0) || !ztheta.is_finite() {
        return Err(Error::Quadrature(
            "model normalizer vanished or overflowed".into(),
        ));
    }
    let mean_du: f64 = p.iter().zip(&du).map(|(pi, di)| pi * di).sum();
    let mean_du_sq: f64 = p.iter().zip(&du).map(|(pi, di)| pi * di * di).sum();
    let d_value = beta_v * mean_du + ztheta.ln() - za.ln();
    Ok(ExpansionCheck {
        d_value,
        half_beta2_variance: 0.5 * beta_v * beta_v * (mean_du_sq - mean_du * mean_du).max(0.0),
        beta2_mean_square: beta_v * beta_v * mean_du_sq,
        sup_beta_delta_u: sup,
    })
}

/// Radial distribution of coarse point particles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GTable {
    pub bin_edges: Vec<f64>,
    pub r_centers: Vec<f64>,
    pub g: Vec<f64>,
    pub g_stderr: Vec<f64>,
    pub counts: Vec<usize>,
    /// Bins with zero pair counts (their g is recorded as 0).
    pub zero_count_bins: Vec<usize>,
}

/// Deterministic quadrature of the pair-distance density of two
/// independent uniform points in a cube of side `l`: each displacement
/// component is triangular, so the radial density is
/// f(r) = 8·r²/L⁶ · ∫_octant Π_i max(0, L − r·ω_i) dσ(ω).
struct BoxShellDensity {
    l: f64,
    nodes: Vec<(f64, f64, f64, f64)>, // (ω_x, ω_y, ω_z, weight)
}

impl BoxShellDensity {
    fn new(l: f64) -> BoxShellDensity {
        // Composite Simpson over θ, φ ∈ [0, π/2] with 64 intervals each.
        let n = 65;
        let h = std::f64::consts::FRAC_PI_2 / (n - 1) as f64;
        let simpson = |i: usize| -> f64 {
            if i == 0 || i == n - 1 {
                h / 3.0
            } else if i % 2 == 1 {
                4.0 * h / 3.0
            } else {
                2.0 * h / 3.0
            }
        };
        let mut nodes = Vec::with_capacity(n * n);
        for it in 0..n {
            let theta = h * it as f64;
            let (sin_t, cos_t) = theta.sin_cos();
            for ip in 0..n {
                let phi = h * ip as f64;
                let (sin_p, cos_p) = phi.sin_cos();
                let w = simpson(it) * simpson(ip) * sin_t;
                nodes.push((sin_t * cos_p, sin_t * sin_p, cos_t, w));
            }
        }
        BoxShellDensity { l, nodes }
    }

    fn density(&self, r: f64) -> f64 {
        if r <= 0.0 || r >= 3.0f64.sqrt() * self.l {
            return 0.0;
        }
        let l = self.l;
        let mut s = 0.0;
        for &(ox, oy, oz, w) in &self.nodes {
            let px = (l - r * ox).max(0.0);
            let py = (l - r * oy).max(0.0);
            let pz = (l - r * oz).max(0.0);
            s += w * px * py * pz;
        }
        8.0 * r * r * s / l.powi(6)
    }

    /// P(r ∈ [a, b]) by composite Simpson in r.
    fn bin_probability(&self, a: f64, b: f64) -> f64 {
        let n = 17;
        let h = (b - a) / (n - 1) as f64;
        let mut s = 0.0;
        for i in 0..n {
            let w = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += w * self.density(a + h * i as f64);
        }
        s * h / 3.0
    }
}

/// Pair-distance histogram of the coarse particles, normalized to a
/// radial distribution. The map must produce three-dimensional coarse
/// sites (d = 3M, M ≥ 2).
///
/// With `density = Some(ρ)` — ρ being the number density of the coarse
/// sites, M per box — the counts are divided by the expected counts of
/// an ideal gas of M uniform particles in the cube of volume M/ρ,
/// computed exactly (including boundary depletion), so an ideal coarse
/// gas gives g ≈ 1 at every r. With `density = None` (isolated molecules,
/// no meaningful bulk density) the counts are normalized to the raw
/// pair-distance probability density, which retains the r² shell
/// Jacobian; inverting it requires the (2/β)·ln r correction.
pub fn radial_distribution(
    samples: &[Vec<f64>],
    map: &CGMap,
    r_edges: &[f64],
    density: Option<f64>,
) -> Result<GTable> {
    if !map.d_out().is_multiple_of(3) || map.d_out() < 6 {
        return Err(Error::Unsupported(format!(
            "radial distributions need at least two three-dimensional coarse sites, got d = {}",
            map.d_out()
        )));
    }
    if r_edges.len() < 2 || r_edges.windows(2).any(|w| w[1] <= w[0]) || r_edges[0] < 0.0 {
        return Err(Error::InvalidParameter(
            "r edges must be non-negative and strictly increasing".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let m = map.d_out() / 3;
    let n_bins = r_edges.len() - 1;
    let mut counts = vec![0usize; n_bins];
    let mut n_configs = 0usize;
    for x in samples {
        let y = match map.apply(x) {
            Ok(y) => y,
            Err(Error::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(e),
        };
        n_configs += 1;
        for a in 0..m {
            for b in a + 1..m {
                let dx = y[3 * a] - y[3 * b];
                let dy = y[3 * a + 1] - y[3 * b + 1];
                let dz = y[3 * a + 2] - y[3 * b + 2];
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                if r < r_edges[0] || r > r_edges[n_bins] {
                    continue;
                }
                let mut i = r_edges.partition_point(|&e| e <= r);
                i = i.clamp(1, n_bins);
                counts[i - 1] += 1;
            }
        }
    }
    if n_configs == 0 {
        return Err(Error::InsufficientData("no mappable samples".into()));
    }
    let n_pairs = (m * (m - 1) / 2) as f64;
    let total = n_configs as f64 * n_pairs;
    let expected: Vec<f64> = match density {
        Some(rho) => {
            if !(rho > 0.0) || !rho.is_finite() {
                return Err(Error::InvalidParameter("density must be positive".into()));
            }
            let l = (m as f64 / rho).powf(1.0 / 3.0);
            let shell = BoxShellDensity::new(l);
            (0..n_bins)
                .map(|i| total * shell.bin_probability(r_edges[i], r_edges[i + 1]))
                .collect()
        }
        None => (0..n_bins)
            .map(|i| total * (r_edges[i + 1] - r_edges[i]))
            .collect(),
    };
    let mut g = vec![0.0; n_bins];
    let mut g_stderr = vec![0.0; n_bins];
    let mut zero_count_bins = Vec::new();
    for i in 0..n_bins {
        if counts[i] == 0 {
            zero_count_bins.push(i);
            continue;
        }
        if !(expected[i] > 0.0) {
            return Err(Error::Quadrature(format!(
                "vanishing ideal-reference weight in bin {i}"
            )));
        }
        g[i] = counts[i] as f64 / expected[i];
        g_stderr[i] = (counts[i] as f64).sqrt() / expected[i];
    }
    Ok(GTable {
        bin_edges: r_edges.to_vec(),
        r_centers: r_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
        g,
        g_stderr,
        counts,
        zero_count_bins,
    })
}

/// Pair potential candidates from inverting a radial distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VTable {
    pub r_centers: Vec<f64>,
    pub v: Vec<Option<f64>>,
    pub v_stderr: Vec<Option<f64>>,
}

/// v(r) = −(1/β)·ln g(r) where g > 0; empty bins carry `None`. Errors
/// propagate by the delta method: σ_v = σ_g / (β·g).
pub fn inverse_boltzmann(g_table: &GTable, beta: Beta) -> VTable {
    let beta_v = beta.value();
    let mut v = Vec::with_capacity(g_table.g.len());
    let mut v_stderr = Vec::with_capacity(g_table.g.len());
    for (&gi, &si) in g_table.g.iter().zip(&g_table.g_stderr) {
        if gi > 0.0 {
            v.push(Some(-gi.ln() / beta_v));
            v_stderr.push(Some(si / (beta_v * gi)));
        } else {
            v.push(None);
            v_stderr.push(None);
        }
    }
    VTable {
        r_centers: g_table.r_centers.clone(),
        v,
        v_stderr,
    }
}

/// Weighted distances between potentials obtained by different routes,
/// after removing the weighted mean of each difference (potentials are
/// only defined up to an additive constant).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub l2_fm_ref: f64,
    pub h1_fm_ref: f64,
    pub l2_re_ref: f64,
    pub h1_re_ref: f64,
    pub l2_fm_re: f64,
    pub h1_fm_re: f64,
}

/// Weighted (L², H¹-seminorm) distance between two potential tables on a
/// shared grid, after subtracting the weighted mean of their difference.
/// Adding any constant to either table leaves both numbers unchanged.
pub fn aligned_distance(a: &PotentialTable, b: &PotentialTable, weights: &[f64]) -> (f64, f64) {
    let wsum: f64 = weights.iter().sum();
    let diff: Vec<f64> = a.u.iter().zip(&b.u).map(|(x, y)| x - y).collect();
    let mean: f64 = diff
        .iter()
        .zip(weights)
        .map(|(d, w)| d * w)
        .sum::<f64>()
        / wsum;
    let l2 = (diff
        .iter()
        .zip(weights)
        .map(|(d, w)| w * (d - mean) * (d - mean))
        .sum::<f64>()
        / wsum)
        .sqrt();
    // Central differences inside, one-sided at the ends; constants drop
    // out of the derivative, making the seminorm shift-invariant.
    let n = diff.len();
    let z = &a.z;
    let mut dd = vec![0.0; n];
    for i in 0..n {
        dd[i] = if i == 0 {
            (diff[1] - diff[0]) / (z[1] - z[0])
        } else if i == n - 1 {
            (diff[n - 1] - diff[n - 2]) / (z[n - 1] - z[n - 2])
        } else {
            (diff[i + 1] - diff[i - 1]) / (z[i + 1] - z[i - 1])
        };
    }
    let h1 = (dd
        .iter()
        .zip(weights)
        .map(|(d, w)| w * d * d)
        .sum::<f64>()
        / wsum)
        .sqrt();
    (l2, h1)
}

/// Compare force-matched and relative-entropy potentials against a
/// reference profile on a shared grid, in the weighted L² norm and H¹
/// seminorm, each after constant alignment. `weights` is the coarse
/// density (or counts) on the grid.
pub fn compare_methods(
    u_fm: &PotentialTable,
    u_re: &PotentialTable,
    reference: &PotentialTable,
    weights: &[f64],
) -> Result<ComparisonRecord> {
    let n = reference.z.len();
    if n < 3 {
        return Err(Error::InsufficientData(
            "need at least three grid nodes".into(),
        ));
    }
    for table in [u_fm, u_re] {
        if table.z.len() != n
            || table
                .z
                .iter()
                .zip(&reference.z)
                .any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(Error::Config(
                "potential tables must share one evaluation grid".into(),
            ));
        }
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidParameter(
            "weights must be non-negative with positive sum".into(),
        ));
    }
    let (l2_fm_ref, h1_fm_ref) = aligned_distance(u_fm, reference, weights);
    let (l2_re_ref, h1_re_ref) = aligned_distance(u_re, reference, weights);
    let (l2_fm_re, h1_fm_re) = aligned_distance(u_fm, u_re, weights);
    Ok(ComparisonRecord {
        l2_fm_ref,
        h1_fm_ref,
        l2_re_ref,
        h1_re_ref,
        l2_fm_re,
        h1_fm_re,
    })
}
