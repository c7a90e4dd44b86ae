//! Microscopic particle systems: configurations, potential energies,
//! analytic forces, and a catalog of desk-scale toy systems.
//!
//! A configuration is a flat coordinate vector of length `n_dof`
//! (`n_particles * dim_per_particle`). Reduced units with k_B = 1
//! throughout; the only thermodynamic input is the inverse temperature.

use crate::error::{Error, Result};
use crate::geom;

/// Inverse temperature 1/(k_B T) in reduced units (k_B = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beta(f64);

impl Beta {
    pub fn new(beta: f64) -> Result<Self> {
        if beta.is_finite() && beta > 0.0 {
            Ok(Beta(beta))
        } else {
            Err(Error::InvalidParameter(format!(
                "beta must be positive and finite, got {beta}"
            )))
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Configuration-space domain. Box domains constrain every coordinate to
/// `[0, side]`; proposals outside are rejected by the sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    Unbounded,
    Box { side: f64 },
}

/// Potential energy functions of the toy catalog.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    /// Two independent 1-dim oscillators: U = k/2 (x1^2 + x2^2).
    HarmonicDimer { k: f64 },
    /// n 1-dim particles with on-site wells and nearest-neighbor springs:
    /// U = k/2 [sum x_i^2 + sum (x_{i+1} - x_i)^2].
    HarmonicChain { n: usize, k: f64 },
    /// Three 3-dim atoms: two harmonic bonds (1-2, 2-3) and a harmonic
    /// bending angle at atom 2.
    ThreeAtomMolecule {
        k_bond: f64,
        r0: f64,
        k_theta: f64,
        theta0: f64,
    },
    /// Two 3-dim particles joined by a harmonic spring of rest length r0.
    HarmonicPair { k: f64, r0: f64 },
    /// n non-interacting 3-dim particles in a cubic box; U = 0.
    IdealGas { n: usize },
}

/// A microscopic system: degrees of freedom, masses, potential and
/// (when available) its analytic force.
#[derive(Debug, Clone)]
pub struct MicroSystem {
    n_particles: usize,
    dim_per_particle: usize,
    masses: Vec<f64>,
    potential: Potential,
    domain: Domain,
    use_analytic_force: bool,
}

/// Relative step for the central-difference force fallback.
const FD_FORCE_STEP: f64 = 1e-5;

impl MicroSystem {
    fn new(
        n_particles: usize,
        dim_per_particle: usize,
        masses: Vec<f64>,
        potential: Potential,
        domain: Domain,
    ) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::InvalidParameter("n_particles must be positive".into()));
        }
        if dim_per_particle != 1 && dim_per_particle != 3 {
            return Err(Error::InvalidParameter(format!(
                "dim_per_particle must be 1 or 3, got {dim_per_particle}"
            )));
        }
        if masses.len() != n_particles || masses.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidParameter(
                "masses must be strictly positive, one per particle".into(),
            ));
        }
        Ok(MicroSystem {
            n_particles,
            dim_per_particle,
            masses,
            potential,
            domain,
            use_analytic_force: true,
        })
    }

    pub fn n_dof(&self) -> usize {
        self.n_particles * self.dim_per_particle
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn dim_per_particle(&self) -> usize {
        self.dim_per_particle
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    /// Same system with the analytic force dropped, forcing the
    /// finite-difference fallback.
    pub fn without_analytic_force(mut self) -> Self {
        self.use_analytic_force = false;
        self
    }

    pub fn has_analytic_force(&self) -> bool {
        self.use_analytic_force
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_dof() {
            return Err(Error::DimensionMismatch {
                expected: self.n_dof(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        match self.domain {
            Domain::Unbounded => true,
            Domain::Box { side } => x.iter().all(|&c| (0.0..=side).contains(&c)),
        }
    }

    /// Potential energy U(x).
    pub fn potential_energy(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        let u = match &self.potential {
            Potential::HarmonicDimer { k } => 0.5 * k * (x[0] * x[0] + x[1] * x[1]),
            Potential::HarmonicChain { n, k } => {
                let mut u = 0.0;
                for &xi in x.iter().take(*n) {
                    u += 0.5 * k * xi * xi;
                }
                for i in 0..n - 1 {
                    let d = x[i + 1] - x[i];
                    u += 0.5 * k * d * d;
                }
                u
            }
            Potential::ThreeAtomMolecule {
                k_bond,
                r0,
                k_theta,
                theta0,
            } => {
                let (x1, x2, x3) = (&x[0..3], &x[3..6], &x[6..9]);
                let r12 = geom::norm3(&geom::sub3(x1, x2));
                let r32 = geom::norm3(&geom::sub3(x3, x2));
                let theta = geom::angle(x1, x2, x3).ok_or_else(|| {
                    Error::DegenerateGeometry("coincident atoms in bending angle".into())
                })?;
                0.5 * k_bond * (r12 - r0).powi(2)
                    + 0.5 * k_bond * (r32 - r0).powi(2)
                    + 0.5 * k_theta * (theta - theta0).powi(2)
            }
            Potential::HarmonicPair { k, r0 } => {
                let r = geom::norm3(&geom::sub3(&x[0..3], &x[3..6]));
                0.5 * k * (r - r0).powi(2)
            }
            Potential::IdealGas { .. } => 0.0,
        };
        if !u.is_finite() {
            return Err(Error::NonFiniteEnergy(format!("U(x) = {u}")));
        }
        Ok(u)
    }

    fn analytic_force(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        let f = match &self.potential {
            Potential::HarmonicDimer { k } => Some(vec![-k * x[0], -k * x[1]]),
            Potential::HarmonicChain { n, k } => {
                let mut f = vec![0.0; *n];
                for i in 0..*n {
                    f[i] -= k * x[i];
                    if i > 0 {
                        f[i] -= k * (x[i] - x[i - 1]);
                    }
                    if i + 1 < *n {
                        f[i] -= k * (x[i] - x[i + 1]);
                    }
                }
                Some(f)
            }
            Potential::ThreeAtomMolecule {
                k_bond,
                r0,
                k_theta,
                theta0,
            } => {
                let (x1, x2, x3) = (&x[0..3], &x[3..6], &x[6..9]);
                let mut f = vec![0.0; 9];
                for (i, j) in [(0usize, 1usize), (2, 1)] {
                    let a = geom::sub3(&x[3 * i..3 * i + 3], &x[3 * j..3 * j + 3]);
                    let r = geom::norm3(&a);
                    if r == 0.0 {
                        return Err(Error::DegenerateGeometry("zero bond length".into()));
                    }
                    let c = k_bond * (r - r0) / r;
                    for d in 0..3 {
                        f[3 * i + d] -= c * a[d];
                        f[3 * j + d] += c * a[d];
                    }
                }
                let theta = geom::angle(x1, x2, x3).ok_or_else(|| {
                    Error::DegenerateGeometry("coincident atoms in bending angle".into())
                })?;
                let (g1, g2, g3) = geom::angle_gradient(x1, x2, x3, 1e-12).ok_or_else(|| {
                    Error::DegenerateGeometry("collinear geometry in bending angle".into())
                })?;
                let c = k_theta * (theta - theta0);
                for d in 0..3 {
                    f[d] -= c * g1[d];
                    f[3 + d] -= c * g2[d];
                    f[6 + d] -= c * g3[d];
                }
                Some(f)
            }
            Potential::HarmonicPair { k, r0 } => {
                let a = geom::sub3(&x[0..3], &x[3..6]);
                let r = geom::norm3(&a);
                if r == 0.0 {
                    return Err(Error::DegenerateGeometry("zero pair distance".into()));
                }
                let c = k * (r - r0) / r;
                let mut f = vec![0.0; 6];
                for d in 0..3 {
                    f[d] = -c * a[d];
                    f[3 + d] = c * a[d];
                }
                Some(f)
            }
            Potential::IdealGas { .. } => Some(vec![0.0; self.n_dof()]),
        };
        Ok(f)
    }

    /// Force -grad U(x): analytic when available, otherwise central finite
    /// differences with relative step `1e-5 * max(1, |x_i|)`.
    pub fn force(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        if self.use_analytic_force {
            if let Some(f) = self.analytic_force(x)? {
                return Ok(f);
            }
        }
        self.fd_force(x, FD_FORCE_STEP)
    }

    /// Central-difference force with the given base step.
    pub fn fd_force(&self, x: &[f64], step: f64) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let mut f = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let h = step * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let up = self.potential_energy(&xp)?;
            xp[i] = x[i] - h;
            let um = self.potential_energy(&xp)?;
            xp[i] = x[i];
            f[i] = -(up - um) / (2.0 * h);
        }
        Ok(f)
    }

    /// Max abs deviation between the analytic force and central finite
    /// differences of U. Exactly zero for systems without analytic force
    /// (the fallback would be compared against itself).
    pub fn check_force_consistency(&self, x: &[f64], step: f64) -> Result<f64> {
        if !(step > 0.0) {
            return Err(Error::InvalidParameter("step must be positive".into()));
        }
        self.check_len(x)?;
        if !self.use_analytic_force {
            return Ok(0.0);
        }
        let analytic = match self.analytic_force(x)? {
            Some(f) => f,
            None => return Ok(0.0),
        };
        let fd = self.fd_force(x, step)?;
        Ok(analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// A sensible non-degenerate starting configuration for sampling.
    pub fn initial_configuration(&self) -> Vec<f64> {
        match &self.potential {
            Potential::HarmonicDimer { .. } | Potential::HarmonicChain { .. } => {
                vec![0.0; self.n_dof()]
            }
            Potential::ThreeAtomMolecule { r0, theta0, .. } => {
                // Atom 2 at the origin, atoms 1 and 3 at the equilibrium
                // bond lengths and angle, in the xy-plane.
                let mut x = vec![0.0; 9];
                x[0] = *r0;
                x[6] = r0 * theta0.cos();
                x[7] = r0 * theta0.sin();
                x
            }
            Potential::HarmonicPair { r0, .. } => {
                let mut x = vec![0.0; 6];
                x[3] = *r0;
                x
            }
            Potential::IdealGas { n } => {
                // Regular grid inside the box; the sampler decorrelates it.
                let side = match self.domain {
                    Domain::Box { side } => side,
                    Domain::Unbounded => 1.0,
                };
                let per_axis = (*n as f64).cbrt().ceil() as usize;
                let spacing = side / (per_axis as f64 + 1.0);
                let mut x = Vec::with_capacity(3 * n);
                'outer: for i in 0..per_axis {
                    for j in 0..per_axis {
                        for k in 0..per_axis {
                            if x.len() >= 3 * n {
                                break 'outer;
                            }
                            x.push(spacing * (i as f64 + 1.0));
                            x.push(spacing * (j as f64 + 1.0));
                            x.push(spacing * (k as f64 + 1.0));
                        }
                    }
                }
                x
            }
        }
    }
}

/// U = k/2 (x1^2 + x2^2), two 1-dim particles.
pub fn harmonic_dimer(k: f64) -> Result<MicroSystem> {
    require_positive(k, "k")?;
    MicroSystem::new(2, 1, vec![1.0; 2], Potential::HarmonicDimer { k }, Domain::Unbounded)
}

/// n coupled 1-dim oscillators with on-site confinement.
pub fn harmonic_chain(n: usize, k: f64) -> Result<MicroSystem> {
    if n < 2 {
        return Err(Error::InvalidParameter("chain needs at least 2 particles".into()));
    }
    require_positive(k, "k")?;
    MicroSystem::new(n, 1, vec![1.0; n], Potential::HarmonicChain { n, k }, Domain::Unbounded)
}

/// Same chain with per-particle masses (masses enter CG maps, not U).
pub fn harmonic_chain_with_masses(n: usize, k: f64, masses: Vec<f64>) -> Result<MicroSystem> {
    if n < 2 {
        return Err(Error::InvalidParameter("chain needs at least 2 particles".into()));
    }
    require_positive(k, "k")?;
    MicroSystem::new(n, 1, masses, Potential::HarmonicChain { n, k }, Domain::Unbounded)
}

/// Three 3-dim atoms with two harmonic bonds and a harmonic bending angle.
pub fn three_atom_molecule(k_bond: f64, r0: f64, k_theta: f64, theta0: f64) -> Result<MicroSystem> {
    require_positive(k_bond, "k_bond")?;
    require_positive(r0, "r0")?;
    require_positive(k_theta, "k_theta")?;
    if !(theta0 > 0.0 && theta0 < std::f64::consts::PI) {
        return Err(Error::InvalidParameter(format!(
            "theta0 must lie in (0, pi), got {theta0}"
        )));
    }
    MicroSystem::new(
        3,
        3,
        vec![1.0; 3],
        Potential::ThreeAtomMolecule {
            k_bond,
            r0,
            k_theta,
            theta0,
        },
        Domain::Unbounded,
    )
}

/// Two 3-dim particles bound by a harmonic spring of rest length r0.
pub fn harmonic_pair(k: f64, r0: f64) -> Result<MicroSystem> {
    require_positive(k, "k")?;
    require_positive(r0, "r0")?;
    MicroSystem::new(2, 3, vec![1.0; 2], Potential::HarmonicPair { k, r0 }, Domain::Unbounded)
}

/// n non-interacting 3-dim particles in a cubic box of the given side.
pub fn ideal_gas(n: usize, box_side: f64) -> Result<MicroSystem> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be positive".into()));
    }
    require_positive(box_side, "box side")?;
    MicroSystem::new(
        n,
        3,
        vec![1.0; n],
        Potential::IdealGas { n },
        Domain::Box { side: box_side },
    )
}

fn require_positive(v: f64, name: &str) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent central-difference force oracle (test-only).
    fn fd_force_oracle(sys: &MicroSystem, x: &[f64], step: f64) -> Vec<f64> {
        let mut f = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + step;
            let up = sys.potential_energy(&xp).unwrap();
            xp[i] = x[i] - step;
            let um = sys.potential_energy(&xp).unwrap();
            xp[i] = x[i];
            f[i] = -(up - um) / (2.0 * step);
        }
        f
    }

    fn perturbed_config(sys: &MicroSystem, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        sys.initial_configuration()
            .iter()
            .map(|&c| c + scale * (rng.gen::<f64>() - 0.5))
            .collect()
    }

    #[test]
    fn dimer_energy_examples() {
        let sys = harmonic_dimer(1.0).unwrap();
        assert_eq!(sys.potential_energy(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(sys.potential_energy(&[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn three_atom_zero_at_equilibrium() {
        let sys = three_atom_molecule(1.0, 1.0, 1.0, std::f64::consts::FRAC_PI_2).unwrap();
        assert_eq!(sys.n_dof(), 9);
        let x = sys.initial_configuration();
        assert!(sys.potential_energy(&x).unwrap().abs() < 1e-14);
    }

    #[test]
    fn dimer_force_examples() {
        let sys = harmonic_dimer(1.0).unwrap();
        let f = sys.force(&[0.3, 0.7]).unwrap();
        assert!((f[0] + 0.3).abs() < 1e-15);
        assert!((f[1] + 0.7).abs() < 1e-15);
        // Stationary point.
        let f0 = sys.force(&[0.0, 0.0]).unwrap();
        assert!(f0.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn three_atom_force_matches_fd_oracle() {
        let sys = three_atom_molecule(1.0, 1.0, 1.0, std::f64::consts::FRAC_PI_2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = perturbed_config(&sys, &mut rng, 0.3);
        let f = sys.force(&x).unwrap();
        let fd = fd_force_oracle(&sys, &x, 1e-5);
        for (a, b) in f.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn force_consistency_examples() {
        let dimer = harmonic_dimer(1.0).unwrap();
        assert!(dimer.check_force_consistency(&[0.4, -1.2], 1e-5).unwrap() <= 1e-8);

        let mol = three_atom_molecule(1.0, 1.0, 1.0, std::f64::consts::FRAC_PI_2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = perturbed_config(&mol, &mut rng, 0.2);
        assert!(mol.check_force_consistency(&x, 1e-5).unwrap() <= 1e-6);

        let no_analytic = harmonic_dimer(1.0).unwrap().without_analytic_force();
        assert_eq!(no_analytic.check_force_consistency(&[0.3, 0.7], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn catalog_smoke() {
        assert_eq!(harmonic_dimer(1.0).unwrap().n_dof(), 2);
        assert_eq!(three_atom_molecule(1.0, 1.0, 1.0, 1.5).unwrap().n_dof(), 9);
        let gas = ideal_gas(10, 5.0).unwrap();
        assert_eq!(gas.n_dof(), 30);
        let x = gas.initial_configuration();
        assert!(gas.in_domain(&x));
        assert_eq!(gas.potential_energy(&x).unwrap(), 0.0);
        assert!(harmonic_dimer(-1.0).is_err());
        assert!(harmonic_chain(1, 1.0).is_err());
        assert!(ideal_gas(0, 5.0).is_err());
        assert!(three_atom_molecule(1.0, 1.0, 1.0, 4.0).is_err());
    }

    #[test]
    fn catalog_forces_match_fd_at_random_configs() {
        let systems = vec![
            harmonic_dimer(1.3).unwrap(),
            harmonic_chain(4, 0.8).unwrap(),
            three_atom_molecule(2.0, 1.0, 1.5, 1.9).unwrap(),
            harmonic_pair(1.0, 1.5).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for sys in &systems {
            for _ in 0..100 {
                let x = perturbed_config(sys, &mut rng, 0.4);
                let f = sys.force(&x).unwrap();
                let fd = fd_force_oracle(sys, &x, 1e-5);
                let dev = f
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(dev <= 1e-6, "{:?}: dev {dev}", sys.potential());
            }
        }
    }

    #[test]
    fn three_atom_translation_invariance() {
        let sys = three_atom_molecule(1.0, 1.0, 1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = perturbed_config(&sys, &mut rng, 0.3);
        let u0 = sys.potential_energy(&x).unwrap();
        for shift in [[0.7, -0.2, 1.4], [-3.0, 0.5, 0.1]] {
            let mut xs = x.clone();
            for p in 0..3 {
                for d in 0..3 {
                    xs[3 * p + d] += shift[d];
                }
            }
            let u1 = sys.potential_energy(&xs).unwrap();
            assert!((u0 - u1).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let sys = harmonic_dimer(1.0).unwrap();
        assert!(matches!(
            sys.potential_energy(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(sys.force(&[1.0, 2.0, 3.0]).is_err());
    }
}
