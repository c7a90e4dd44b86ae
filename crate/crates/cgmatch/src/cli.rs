//! Command-line front end: declares systems, maps, and experiments in a
//! TOML config, orchestrates sample → match → compare pipelines, and
//! persists artifacts with a run manifest.
//!
//! Exit codes: 0 success, 1 config error, 2 numerical failure,
//! 3 reproduction-check failure in `paper-suite`. Reruns with an
//! identical config and seed produce byte-identical numerical artifacts;
//! only the manifest's timings differ.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cgmap::{self, CGMap};
use crate::error::Error;
use crate::fmatch::{self, BasisSet, ModelArtifact, PotentialTable};
use crate::meanforce::{self, WSpec};
use crate::microsys::{Beta, MicroSystem};
use crate::refmethods::{
    self, CGPotentialFamily, LinearTilt, PMFTable, QuadraticWell, TabulatedPerturbation,
    REOptions,
};
use crate::sampler::{self, BinnedConditional, Binning, SampleSet};

#[derive(Parser, Debug)]
#[command(
    name = "cgmatch",
    version,
    about = "Coarse-grained force matching and free-energy toolkit"
)]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Sampler seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of sampling chains (overrides the config).
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    /// Suppress progress output (errors still print).
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse the config and run force-consistency, Jacobian, and rank
    /// checks.
    Validate,
    /// Draw Metropolis samples and write them as CSV.
    Sample,
    /// Sample, evaluate local mean forces, and fit a coarse force model.
    Match,
    /// Sample and fit a coarse potential by relative-entropy
    /// minimization.
    Relent,
    /// Run match and relative entropy, then compare both potentials
    /// against the histogram free-energy profile.
    Compare,
    /// Reproduce the worked examples and report the two known literature
    /// discrepancies as warnings.
    PaperSuite,
}

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_failure<E: std::fmt::Display>(e: E) -> Failure {
    Failure {
        code: 1,
        message: format!("config error: {e}"),
    }
}

fn numerical_failure<E: std::fmt::Display>(e: E) -> Failure {
    Failure {
        code: 2,
        message: format!("numerical failure: {e}"),
    }
}

/// Entry point: returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<i32> {
    match cli.command {
        Command::Validate => cmd_validate(cli).map(|_| 0),
        Command::Sample => cmd_sample(cli).map(|_| 0),
        Command::Match => cmd_match(cli).map(|_| 0),
        Command::Relent => cmd_relent(cli).map(|_| 0),
        Command::Compare => cmd_compare(cli).map(|_| 0),
        Command::PaperSuite => cmd_paper_suite(cli),
    }
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub system: SystemSpec,
    pub beta: f64,
    pub map: MapSpec,
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub binning: BinningSpec,
    /// Weight-field choices for the local mean force; defaults to the
    /// map Jacobian. With several entries, `match` additionally reports
    /// bin-by-bin agreement across them.
    #[serde(default)]
    pub wspec: Vec<WSpecConfig>,
    #[serde(rename = "fmatch", default)]
    pub fmatch: Option<FmatchSpec>,
    #[serde(rename = "relent", default)]
    pub relent: Option<RelentSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    HarmonicDimer {
        k: f64,
    },
    HarmonicChain {
        n: usize,
        k: f64,
        #[serde(default)]
        masses: Option<Vec<f64>>,
    },
    ThreeAtomMolecule {
        k_bond: f64,
        r0: f64,
        k_theta: f64,
        theta0: f64,
    },
    HarmonicPair {
        k: f64,
        r0: f64,
    },
    IdealGas {
        n: usize,
        box_side: f64,
    },
}

impl SystemSpec {
    fn build(&self) -> crate::Result<MicroSystem> {
        match self {
            SystemSpec::HarmonicDimer { k } => crate::microsys::harmonic_dimer(*k),
            SystemSpec::HarmonicChain { n, k, masses } => match masses {
                Some(m) => crate::microsys::harmonic_chain_with_masses(*n, *k, m.clone()),
                None => crate::microsys::harmonic_chain(*n, *k),
            },
            SystemSpec::ThreeAtomMolecule {
                k_bond,
                r0,
                k_theta,
                theta0,
            } => crate::microsys::three_atom_molecule(*k_bond, *r0, *k_theta, *theta0),
            SystemSpec::HarmonicPair { k, r0 } => crate::microsys::harmonic_pair(*k, *r0),
            SystemSpec::IdealGas { n, box_side } => crate::microsys::ideal_gas(*n, *box_side),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            SystemSpec::HarmonicDimer { .. } => "harmonic_dimer",
            SystemSpec::HarmonicChain { .. } => "harmonic_chain",
            SystemSpec::ThreeAtomMolecule { .. } => "three_atom_molecule",
            SystemSpec::HarmonicPair { .. } => "harmonic_pair",
            SystemSpec::IdealGas { .. } => "ideal_gas",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    Linear { rows: Vec<Vec<f64>> },
    CenterOfMass { groups: Vec<Vec<usize>> },
    PairwiseAverage { pairs: Vec<[usize; 2]>, weights: Vec<[f64; 2]> },
    BendingAngle { i: usize, j: usize, k: usize },
    EndToEndDistance { i: usize, j: usize },
    EndToEndVector { i: usize, j: usize },
}

impl MapSpec {
    fn build(&self, system: &MicroSystem) -> crate::Result<CGMap> {
        let n = system.masses().len();
        let dim = system.n_dof() / n;
        match self {
            MapSpec::Linear { rows } => {
                if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
                    return Err(Error::Config("linear map rows must be rectangular".into()));
                }
                let d = rows.len();
                let big_d = rows[0].len();
                let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
                cgmap::linear_map(DMatrix::from_row_slice(d, big_d, &flat))
            }
            MapSpec::CenterOfMass { groups } => {
                cgmap::center_of_mass(groups, system.masses(), dim)
            }
            MapSpec::PairwiseAverage { pairs, weights } => {
                let pairs: Vec<(usize, usize)> = pairs.iter().map(|p| (p[0], p[1])).collect();
                let weights: Vec<(f64, f64)> = weights.iter().map(|w| (w[0], w[1])).collect();
                cgmap::pairwise_average(&pairs, &weights, n, dim)
            }
            MapSpec::BendingAngle { i, j, k } => cgmap::bending_angle(n, *i, *j, *k),
            MapSpec::EndToEndDistance { i, j } => cgmap::end_to_end_distance(n, *i, *j),
            MapSpec::EndToEndVector { i, j } => cgmap::end_to_end_vector(n, *i, *j),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub n_steps: usize,
    pub step_size: f64,
    /// Mandatory: runs are never seeded from the clock.
    pub seed: u64,
    #[serde(default)]
    pub n_burn: Option<usize>,
    #[serde(default = "default_one")]
    pub n_thin: usize,
    #[serde(default = "default_one")]
    pub n_chains: usize,
}

fn default_one() -> usize {
    1
}

impl SamplerSpec {
    fn burn(&self) -> usize {
        self.n_burn.unwrap_or(self.n_steps / 10)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinningSpec {
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default)]
    pub edges: Option<Vec<Vec<f64>>>,
}

fn default_bins() -> usize {
    sampler::DEFAULT_N_BINS
}

impl Default for BinningSpec {
    fn default() -> Self {
        BinningSpec {
            n_bins: default_bins(),
            edges: None,
        }
    }
}

impl BinningSpec {
    fn build(&self) -> Binning {
        match &self.edges {
            Some(edges) => Binning::Explicit {
                edges: edges.clone(),
            },
            None => Binning::Auto {
                n_bins: self.n_bins,
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WSpecConfig {
    /// W(x) = DΠ(x).
    EqualsJacobian,
    /// A fixed matrix given row by row.
    Constant { rows: Vec<Vec<f64>> },
    /// Solve the admissibility equations for a constant W reproducing
    /// the given target matrix B on linear-map forces.
    SolveForTarget { b_rows: Vec<Vec<f64>> },
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> crate::Result<DMatrix<f64>> {
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::Config("matrix rows must be rectangular".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    Ok(DMatrix::from_row_slice(rows.len(), rows[0].len(), &flat))
}

impl WSpecConfig {
    fn label(&self) -> String {
        match self {
            WSpecConfig::EqualsJacobian => "jacobian".into(),
            WSpecConfig::Constant { .. } => "constant".into(),
            WSpecConfig::SolveForTarget { .. } => "solved_for_target".into(),
        }
    }

    fn build(&self, map: &CGMap) -> crate::Result<WSpec> {
        match self {
            WSpecConfig::EqualsJacobian => Ok(WSpec::EqualsJacobian),
            WSpecConfig::Constant { rows } => Ok(WSpec::Constant(rows_to_matrix(rows)?)),
            WSpecConfig::SolveForTarget { b_rows } => {
                let t = map.linear_matrix().ok_or_else(|| {
                    Error::Unsupported("solve_for_target needs a linear map".into())
                })?;
                let b = rows_to_matrix(b_rows)?;
                let w = meanforce::solve_w_for_target(t, &b, 1e-10)?.ok_or_else(|| {
                    Error::IllConditioned(
                        "no admissible constant W exists for the requested target".into(),
                    )
                })?;
                Ok(WSpec::Constant(w))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmatchSpec {
    pub basis: BasisSpec,
    /// Ridge strength; omitted means the scaled default.
    #[serde(default)]
    pub ridge: Option<f64>,
    /// Potential normalization point Ū(z_ref) = 0.
    #[serde(default)]
    pub z_ref: f64,
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
}

fn default_curve_points() -> usize {
    201
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisSpec {
    HatFunctions { lo: f64, hi: f64, n_knots: usize },
    HatKnots { knots: Vec<f64> },
    Polynomials { max_degree: usize, support: [f64; 2] },
    PotentialGradient { lo: f64, hi: f64, n_knots: usize },
}

impl BasisSpec {
    fn build(&self) -> crate::Result<BasisSet> {
        let set = match self {
            BasisSpec::HatFunctions { lo, hi, n_knots } => {
                BasisSet::uniform_hats(*lo, *hi, *n_knots)?
            }
            BasisSpec::HatKnots { knots } => BasisSet::HatFunctions {
                knots: knots.clone(),
            },
            BasisSpec::Polynomials {
                max_degree,
                support,
            } => BasisSet::Polynomials {
                max_degree: *max_degree,
                support: *support,
            },
            BasisSpec::PotentialGradient { lo, hi, n_knots } => {
                match BasisSet::uniform_hats(*lo, *hi, *n_knots)? {
                    BasisSet::HatFunctions { knots } => BasisSet::PotentialGradient { knots },
                    _ => unreachable!(),
                }
            }
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelentSpec {
    /// `quadratic_well` (Ū = θz²/2) or `linear_tilt` (Ū = θz).
    pub family: String,
    pub theta0: Vec<f64>,
    pub support: [f64; 2],
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_quad_points() -> usize {
    2001
}

fn default_max_iters() -> usize {
    200
}

impl RelentSpec {
    fn family(&self) -> crate::Result<Box<dyn CGPotentialFamily>> {
        match self.family.as_str() {
            "quadratic_well" => Ok(Box::new(QuadraticWell)),
            "linear_tilt" => Ok(Box::new(LinearTilt)),
            other => Err(Error::Config(format!(
                "relent.family: unknown family '{other}' (expected quadratic_well or linear_tilt)"
            ))),
        }
    }

    fn options(&self) -> REOptions {
        REOptions {
            support: (self.support[0], self.support[1]),
            quad_points: self.quad_points,
            max_iters: self.max_iters,
            ..REOptions::default()
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

fn default_out_dir() -> String {
    "out".into()
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: default_out_dir(),
        }
    }
}

// ---------------------------------------------------------------------------
// Artifacts and manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactRecord>,
    pub timings_ms: Vec<(String, u128)>,
    pub warnings: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Collects artifacts in an output directory, hashing each file.
struct ArtifactSink {
    dir: PathBuf,
    records: Vec<ArtifactRecord>,
}

impl ArtifactSink {
    fn new(dir: &Path) -> CliResult<ArtifactSink> {
        fs::create_dir_all(dir).map_err(config_failure)?;
        Ok(ArtifactSink {
            dir: dir.to_path_buf(),
            records: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, content: &[u8]) -> CliResult<String> {
        let path = self.dir.join(name);
        fs::write(&path, content).map_err(numerical_failure)?;
        let hash = sha256_hex(content);
        self.records.push(ArtifactRecord {
            name: name.to_string(),
            sha256: hash.clone(),
            bytes: content.len(),
        });
        Ok(hash)
    }

    fn finish(
        self,
        command: &str,
        config_sha256: &str,
        seed: u64,
        timings_ms: Vec<(String, u128)>,
        warnings: Vec<String>,
    ) -> CliResult<()> {
        let mut versions = BTreeMap::new();
        versions.insert("cgmatch".to_string(), env!("CARGO_PKG_VERSION").to_string());
        let manifest = RunManifest {
            command: command.to_string(),
            config_sha256: config_sha256.to_string(),
            seed,
            versions,
            artifacts: self.records,
            timings_ms,
            warnings,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(numerical_failure)?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text).map_err(numerical_failure)?;
        Ok(())
    }
}

/// Tracks wall-clock durations of pipeline stages.
struct Timings {
    start: Instant,
    entries: Vec<(String, u128)>,
}

impl Timings {
    fn new() -> Timings {
        Timings {
            start: Instant::now(),
            entries: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        self.entries
            .push((stage.to_string(), self.start.elapsed().as_millis()));
        self.start = Instant::now();
    }
}

// ---------------------------------------------------------------------------
// Shared pipeline state
// ---------------------------------------------------------------------------

struct Workbench {
    spec: ExperimentSpec,
    system: MicroSystem,
    map: CGMap,
    beta: Beta,
    seed: u64,
    n_chains: usize,
    out_dir: PathBuf,
    config_sha256: String,
    quiet: bool,
}

impl Workbench {
    fn say(&self, line: &str) {
        if !self.quiet {
            println!("{line}");
        }
    }
}

fn load_workbench(cli: &Cli) -> CliResult<Workbench> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| config_failure("--config is required for this command"))?;
    let raw = fs::read(config_path)
        .map_err(|e| config_failure(format!("{}: {e}", config_path.display())))?;
    let text = String::from_utf8(raw.clone())
        .map_err(|_| config_failure("config is not valid UTF-8"))?;
    let spec: ExperimentSpec = toml::from_str(&text).map_err(config_failure)?;
    let beta = Beta::new(spec.beta).map_err(|e| config_failure(format!("beta: {e}")))?;
    let system = spec
        .system
        .build()
        .map_err(|e| config_failure(format!("system: {e}")))?;
    let map = spec
        .map
        .build(&system)
        .map_err(|e| config_failure(format!("map: {e}")))?;
    let s = &spec.sampler;
    if s.n_steps <= s.burn() {
        return Err(config_failure(format!(
            "sampler: n_steps ({}) must exceed n_burn ({})",
            s.n_steps,
            s.burn()
        )));
    }
    if !(s.step_size > 0.0) {
        return Err(config_failure("sampler.step_size must be positive"));
    }
    if s.n_thin == 0 {
        return Err(config_failure("sampler.n_thin must be at least 1"));
    }
    if let Some(fm) = &spec.fmatch {
        fm.basis
            .build()
            .map_err(|e| config_failure(format!("fmatch.basis: {e}")))?;
    }
    if let Some(re) = &spec.relent {
        re.family().map_err(config_failure)?;
        if re.theta0.is_empty() {
            return Err(config_failure("relent.theta0 must not be empty"));
        }
        if !(re.support[1] > re.support[0]) {
            return Err(config_failure("relent.support must be a proper interval"));
        }
    }
    if spec.wspec.is_empty() {
        // Defaulting happens at resolution time; nothing to check here.
    }
    let seed = cli.seed.unwrap_or(spec.sampler.seed);
    let n_chains = cli.chains.unwrap_or(spec.sampler.n_chains).max(1);
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&spec.output.dir));
    Ok(Workbench {
        config_sha256: sha256_hex(&raw),
        spec,
        system,
        map,
        beta,
        seed,
        n_chains,
        out_dir,
        quiet: cli.quiet,
    })
}

fn resolve_wspecs(wb: &Workbench) -> CliResult<Vec<(String, WSpec)>> {
    let configs = if wb.spec.wspec.is_empty() {
        vec![WSpecConfig::EqualsJacobian]
    } else {
        wb.spec.wspec.clone()
    };
    configs
        .iter()
        .map(|c| Ok((c.label(), c.build(&wb.map).map_err(numerical_failure)?)))
        .collect()
}

fn draw_samples(wb: &Workbench) -> CliResult<SampleSet> {
    let s = &wb.spec.sampler;
    sampler::metropolis_chains(
        &wb.system,
        wb.beta,
        s.n_steps,
        s.step_size,
        wb.seed,
        s.burn(),
        s.n_thin,
        wb.n_chains,
    )
    .map_err(numerical_failure)
}

fn samples_csv(set: &SampleSet) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    set.write_csv(&mut buf).map_err(numerical_failure)?;
    Ok(buf)
}

fn pretty_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value).map_err(numerical_failure)?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// CSV for a one-component binned conditional: z, count, mean, stderr
/// per observable component.
fn binned_csv(binned: &BinnedConditional) -> String {
    let n_phi = binned
        .bin_means
        .iter()
        .map(|m| m.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("z,count");
    for c in 0..n_phi {
        let _ = write!(out, ",mean_{c},stderr_{c}");
    }
    out.push('\n');
    for flat in 0..binned.n_bins() {
        let center = binned.bin_center(flat);
        let _ = write!(out, "{:.16e},{}", center[0], binned.bin_counts[flat]);
        for c in 0..n_phi {
            if binned.bin_counts[flat] == 0 {
                out.push_str(",,");
            } else {
                let _ = write!(
                    out,
                    ",{:.16e},{:.16e}",
                    binned.bin_means[flat][c], binned.bin_stderr[flat][c]
                );
            }
        }
        out.push('\n');
    }
    out
}

fn potential_csv(table: &PotentialTable) -> String {
    let mut out = String::from("z,u\n");
    for (z, u) in table.z.iter().zip(&table.u) {
        let _ = writeln!(out, "{z:.16e},{u:.16e}");
    }
    out
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

fn cmd_validate(cli: &Cli) -> CliResult<()> {
    let wb = load_workbench(cli)?;
    wb.say(&format!(
        "config OK: system={} dof={} map={}x{} beta={}",
        wb.spec.system.name(),
        wb.system.n_dof(),
        wb.map.d_out(),
        wb.map.d_in(),
        wb.beta.value()
    ));
    let x0 = wb.system.initial_configuration();
    match wb.system.check_force_consistency(&x0, 1e-5) {
        Ok(dev) if dev > 1e-4 => {
            return Err(numerical_failure(format!(
                "analytic force disagrees with finite differences: max deviation {dev:.3e}"
            )));
        }
        Ok(dev) => wb.say(&format!("force consistency: max deviation {dev:.3e} PASS")),
        Err(Error::DegenerateGeometry(msg)) => {
            println!("WARN: degenerate initial geometry, force check skipped: {msg}")
        }
        Err(e) => return Err(numerical_failure(e)),
    }
    match wb.map.jacobian(&x0) {
        Ok(j) => {
            let fd = wb.map.fd_jacobian(&x0, 1e-6).map_err(numerical_failure)?;
            let jdev = (&j - &fd).amax();
            if jdev > 1e-4 {
                return Err(numerical_failure(format!(
                    "map Jacobian disagrees with finite differences: max deviation {jdev:.3e}"
                )));
            }
            wb.say(&format!("jacobian check: max deviation {jdev:.3e} PASS"));
            match wb.map.rank_check(&x0, 1e-10) {
                Ok(true) => wb.say("rank check: full rank PASS"),
                Ok(false) => {
                    println!("WARN: map is rank deficient at the initial configuration")
                }
                Err(e) => return Err(numerical_failure(e)),
            }
        }
        Err(Error::DegenerateGeometry(msg)) => {
            println!("WARN: degenerate map geometry at the initial configuration: {msg}");
        }
        Err(e) => return Err(numerical_failure(e)),
    }
    for wspec in resolve_wspecs(&wb)? {
        wb.say(&format!("wspec '{}' resolved", wspec.0));
    }
    wb.say("validate OK");
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

fn cmd_sample(cli: &Cli) -> CliResult<()> {
    let wb = load_workbench(cli)?;
    let mut timings = Timings::new();
    let set = draw_samples(&wb)?;
    timings.lap("sample");
    let mut sink = ArtifactSink::new(&wb.out_dir)?;
    sink.write("samples.csv", &samples_csv(&set)?)?;
    sink.write("sample_meta.json", &pretty_json(&set.metadata_json())?)?;
    timings.lap("write");
    wb.say(&format!(
        "wrote {} samples (acceptance {:.3}) to {}",
        set.n_samples(),
        set.acceptance_rate,
        wb.out_dir.display()
    ));
    sink.finish(
        "sample",
        &wb.config_sha256,
        wb.seed,
        timings.entries,
        set.warnings.clone(),
    )
}

// ---------------------------------------------------------------------------
// match
// ---------------------------------------------------------------------------

/// Samples and per-sample local mean forces for the first weight field,
/// shared by the match and compare pipelines.
struct MatchData {
    set: SampleSet,
    zs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    n_skipped: usize,
    warnings: Vec<String>,
}

fn evaluate_mean_forces(wb: &Workbench, wspec: &WSpec) -> CliResult<MatchData> {
    let set = draw_samples(wb)?;
    let eval = meanforce::evaluate_over_samples(&wb.system, &wb.map, wspec, wb.beta, &set.samples)
        .map_err(numerical_failure)?;
    let mut zs = Vec::with_capacity(eval.samples.len());
    let mut hs = Vec::with_capacity(eval.samples.len());
    for s in &eval.samples {
        zs.push(s.z.clone());
        hs.push(s.h.clone());
    }
    Ok(MatchData {
        set,
        zs,
        hs,
        n_skipped: eval.n_skipped,
        warnings: eval.warnings,
    })
}

/// Bins with fewer samples than this are left out of the interpolated
/// reference force: their means are noisy enough to overfit individual
/// samples.
const REF_MIN_COUNT: usize = 10;

/// Reference force built by piecewise-linear interpolation through
/// per-bin mean (z, h) pairs. Interpolating at the in-bin mean abscissa
/// (rather than the geometric bin center) makes the reference exact for
/// any affine mean-force profile, so the decomposition identity gap
/// measures conditional noise instead of binning bias.
struct InterpReference {
    nodes: Vec<(f64, f64)>,
}

impl InterpReference {
    fn from_binned(binned_h: &BinnedConditional, binned_z: &BinnedConditional) -> Option<Self> {
        let mut nodes = Vec::new();
        for flat in 0..binned_h.n_bins() {
            if binned_h.bin_counts[flat] >= REF_MIN_COUNT {
                nodes.push((binned_z.bin_means[flat][0], binned_h.bin_means[flat][0]));
            }
        }
        if nodes.len() < 2 {
            return None;
        }
        Some(InterpReference { nodes })
    }

    fn covers(&self, z: f64) -> bool {
        z >= self.nodes[0].0 && z <= self.nodes[self.nodes.len() - 1].0
    }

    fn eval(&self, z: f64) -> Option<f64> {
        if !self.covers(z) {
            return None;
        }
        let hi = self
            .nodes
            .partition_point(|&(zn, _)| zn < z)
            .clamp(1, self.nodes.len() - 1);
        let (z0, h0) = self.nodes[hi - 1];
        let (z1, h1) = self.nodes[hi];
        let t = if z1 > z0 { (z - z0) / (z1 - z0) } else { 0.0 };
        Some(h0 + t * (h1 - h0))
    }
}

fn cmd_match(cli: &Cli) -> CliResult<()> {
    let wb = load_workbench(cli)?;
    let fm_spec = wb
        .spec
        .fmatch
        .clone()
        .ok_or_else(|| config_failure("match requires a [fmatch] section"))?;
    if wb.map.d_out() != 1 {
        return Err(numerical_failure(
            "the match pipeline supports scalar coarse spaces",
        ));
    }
    let mut timings = Timings::new();
    let wspecs = resolve_wspecs(&wb)?;
    let data = evaluate_mean_forces(&wb, &wspecs[0].1)?;
    timings.lap("sample_and_forces");
    let mut warnings = data.warnings.clone();
    if data.n_skipped > 0 {
        warnings.push(format!(
            "{} samples skipped by degeneracy guards",
            data.n_skipped
        ));
    }

    let binning = wb.spec.binning.build();
    let binned =
        sampler::bin_conditional(&data.zs, &data.hs, &binning).map_err(numerical_failure)?;
    let basis = fm_spec.basis.build().map_err(numerical_failure)?;
    let design =
        fmatch::assemble_least_squares(&data.zs, &data.hs, &basis).map_err(numerical_failure)?;
    warnings.extend(design.warnings.clone());
    let ridge = fm_spec.ridge.unwrap_or_else(|| design.default_ridge());
    let model = fmatch::solve_force_match(&design, ridge).map_err(numerical_failure)?;
    timings.lap("fit");

    // Loss decomposition against the interpolated binned reference,
    // restricted to samples inside the reference's node hull.
    let binned_z =
        sampler::bin_conditional(&data.zs, &data.zs, &binning).map_err(numerical_failure)?;
    let reference = InterpReference::from_binned(&binned, &binned_z)
        .ok_or_else(|| numerical_failure("too few populated bins for a reference force"))?;
    let mut zs_in = Vec::new();
    let mut hs_in = Vec::new();
    for (z, h) in data.zs.iter().zip(&data.hs) {
        if reference.covers(z[0]) {
            zs_in.push(z.clone());
            hs_in.push(h.clone());
        }
    }
    let report = fmatch::residual_decomposition(&zs_in, &hs_in, &model, |z| {
        reference
            .eval(z[0])
            .map(|f| vec![f])
            .ok_or_else(|| Error::EmptyBinning("sample left the reference hull".into()))
    })
    .map_err(numerical_failure)?;

    // Model curve and integrated potential on a uniform support grid.
    let (lo, hi) = model.basis.support();
    let n_curve = fm_spec.curve_points.max(2);
    let curve: Vec<f64> = (0..n_curve)
        .map(|i| lo + (hi - lo) * i as f64 / (n_curve - 1) as f64)
        .collect();
    let mut curve_csv = String::from("z,g\n");
    for &z in &curve {
        let g = model.evaluate_scalar(z).map_err(numerical_failure)?;
        let _ = writeln!(curve_csv, "{z:.16e},{g:.16e}");
    }
    let z_ref = fm_spec.z_ref.clamp(lo, hi);
    let potential =
        fmatch::integrate_model(&model, &curve, z_ref).map_err(numerical_failure)?;

    // Histogram profile and its mean force, overlaid with the model.
    let pmf = refmethods::histogram_pmf(&data.set.samples, &wb.map, &binning, wb.beta)
        .map_err(numerical_failure)?;
    let overlay = match refmethods::mean_force_reference(&pmf) {
        Ok(mfr) => {
            let mut csv = String::from("z,f_profile,f_stderr,g_model\n");
            for i in 0..mfr.z_grid.len() {
                if let Some(f) = mfr.f_values[i] {
                    let g = model
                        .evaluate_scalar(mfr.z_grid[i])
                        .map_err(numerical_failure)?;
                    let s = mfr.f_stderr[i].unwrap_or(f64::NAN);
                    let _ = writeln!(
                        csv,
                        "{:.16e},{f:.16e},{s:.16e},{g:.16e}",
                        mfr.z_grid[i]
                    );
                }
            }
            Some(csv)
        }
        Err(Error::InsufficientData(msg)) => {
            warnings.push(format!("mean-force overlay skipped: {msg}"));
            None
        }
        Err(e) => return Err(numerical_failure(e)),
    };
    timings.lap("report");

    let mut sink = ArtifactSink::new(&wb.out_dir)?;
    let csv = samples_csv(&data.set)?;
    let sample_hash = sha256_hex(&csv);
    sink.write("samples.csv", &csv)?;
    sink.write("binned_mean_force.csv", binned_csv(&binned).as_bytes())?;
    let artifact = ModelArtifact {
        model: model.clone(),
        ridge,
        sample_hash,
        n_samples: design.n_samples,
    };
    sink.write("model.json", &pretty_json(&artifact)?)?;
    sink.write("model_curve.csv", curve_csv.as_bytes())?;
    sink.write("potential.csv", potential_csv(&potential).as_bytes())?;
    let mut pmf_csv = Vec::new();
    pmf.write_csv(&mut pmf_csv).map_err(numerical_failure)?;
    sink.write("pmf.csv", &pmf_csv)?;
    if let Some(csv) = overlay {
        sink.write("force_overlay.csv", csv.as_bytes())?;
    }
    sink.write("fmreport.json", &pretty_json(&report)?)?;

    // Cross-W invariance report when several weight fields were given.
    if wspecs.len() > 1 {
        let mut csv = String::from("z,count_0,mean_0,stderr_0");
        let mut extra_binned = Vec::new();
        for (idx, (label, wspec)) in wspecs.iter().enumerate().skip(1) {
            let other = evaluate_mean_forces(&wb, wspec)?;
            let ob = sampler::bin_conditional(&other.zs, &other.hs, &binning)
                .map_err(numerical_failure)?;
            let _ = write!(csv, ",count_{idx},mean_{idx},stderr_{idx}");
            extra_binned.push((label.clone(), ob));
        }
        csv.push('\n');
        let mut agree = 0usize;
        let mut disagree = 0usize;
        for flat in 0..binned.n_bins() {
            let center = binned.bin_center(flat)[0];
            let c0 = binned.bin_counts[flat];
            let _ = write!(csv, "{center:.16e},{c0}");
            if c0 == 0 {
                let _ = write!(csv, ",,");
            } else {
                let _ = write!(
                    csv,
                    ",{:.16e},{:.16e}",
                    binned.bin_means[flat][0], binned.bin_stderr[flat][0]
                );
            }
            for (_, ob) in &extra_binned {
                let c = ob.bin_counts[flat];
                if c == 0 {
                    let _ = write!(csv, ",{c},,");
                } else {
                    let _ = write!(
                        csv,
                        ",{c},{:.16e},{:.16e}",
                        ob.bin_means[flat][0], ob.bin_stderr[flat][0]
                    );
                }
                if c0 >= 100 && c >= 100 {
                    let tol = 3.0
                        * (binned.bin_stderr[flat][0].powi(2) + ob.bin_stderr[flat][0].powi(2))
                            .sqrt();
                    if (binned.bin_means[flat][0] - ob.bin_means[flat][0]).abs() <= tol {
                        agree += 1;
                    } else {
                        disagree += 1;
                    }
                }
            }
            csv.push('\n');
        }
        sink.write("winvariance.csv", csv.as_bytes())?;
        wb.say(&format!(
            "weight-field invariance: {agree} bins agree, {disagree} disagree (3x stderr, counts >= 100)"
        ));
        if disagree > 0 {
            warnings.push(format!(
                "{disagree} bins disagree across weight fields beyond 3x stderr"
            ));
        }
    }

    wb.say(&format!(
        "fit: {} coefficients, ridge {ridge:.3e}, loss {:.6e}",
        model.basis.n_basis(),
        report.loss_total
    ));
    if let BasisSet::Polynomials { max_degree, .. } = &model.basis {
        if *max_degree >= 1 {
            wb.say(&format!(
                "fitted linear coefficient (slope): {:.6}",
                model.coeffs[0][1]
            ));
        }
    }
    wb.say(&format!(
        "identity gap {:.3e} (3x stderr {:.3e})",
        report.residual_identity_gap,
        3.0 * report.gap_stderr
    ));
    sink.finish("match", &wb.config_sha256, wb.seed, timings.entries, warnings)
}

// ---------------------------------------------------------------------------
// relent
// ---------------------------------------------------------------------------

fn map_scalar_samples(wb: &Workbench, set: &SampleSet) -> CliResult<Vec<f64>> {
    if wb.map.d_out() != 1 {
        return Err(numerical_failure(
            "relative entropy fitting supports scalar coarse spaces",
        ));
    }
    let mut zs = Vec::with_capacity(set.samples.len());
    for x in &set.samples {
        match wb.map.apply(x) {
            Ok(z) => zs.push(z[0]),
            Err(Error::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(numerical_failure(e)),
        }
    }
    if zs.is_empty() {
        return Err(numerical_failure("no mappable samples"));
    }
    Ok(zs)
}

fn cmd_relent(cli: &Cli) -> CliResult<()> {
    let wb = load_workbench(cli)?;
    let re_spec = wb
        .spec
        .relent
        .clone()
        .ok_or_else(|| config_failure("relent requires a [relent] section"))?;
    let mut timings = Timings::new();
    let set = draw_samples(&wb)?;
    let zs = map_scalar_samples(&wb, &set)?;
    timings.lap("sample");
    let family = re_spec.family().map_err(config_failure)?;
    let report = refmethods::minimize_relative_entropy(
        &zs,
        family.as_ref(),
        &re_spec.theta0,
        wb.beta,
        &re_spec.options(),
    )
    .map_err(numerical_failure)?;
    timings.lap("minimize");
    let mut sink = ArtifactSink::new(&wb.out_dir)?;
    sink.write("samples.csv", &samples_csv(&set)?)?;
    sink.write("rereport.json", &pretty_json(&report)?)?;
    wb.say(&format!(
        "relative entropy: theta* = {:?} after {} iterations (converged: {})",
        report.theta_star, report.n_iterations, report.converged
    ));
    sink.finish(
        "relent",
        &wb.config_sha256,
        wb.seed,
        timings.entries,
        set.warnings.clone(),
    )
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct CompareSummary {
    l2_fm_ref: f64,
    h1_fm_ref: f64,
    l2_re_ref: Option<f64>,
    h1_re_ref: Option<f64>,
    l2_fm_re: Option<f64>,
    h1_fm_re: Option<f64>,
    theta_star: Option<Vec<f64>>,
    notice: Option<String>,
}

fn cmd_compare(cli: &Cli) -> CliResult<()> {
    let wb = load_workbench(cli)?;
    let fm_spec = wb
        .spec
        .fmatch
        .clone()
        .ok_or_else(|| config_failure("compare requires a [fmatch] section"))?;
    if wb.map.d_out() != 1 {
        return Err(numerical_failure(
            "the compare pipeline supports scalar coarse spaces",
        ));
    }
    let mut timings = Timings::new();
    let wspecs = resolve_wspecs(&wb)?;
    let data = evaluate_mean_forces(&wb, &wspecs[0].1)?;
    timings.lap("sample_and_forces");

    let basis = fm_spec.basis.build().map_err(numerical_failure)?;
    let design =
        fmatch::assemble_least_squares(&data.zs, &data.hs, &basis).map_err(numerical_failure)?;
    let ridge = fm_spec.ridge.unwrap_or_else(|| design.default_ridge());
    let model = fmatch::solve_force_match(&design, ridge).map_err(numerical_failure)?;

    let binning = wb.spec.binning.build();
    let pmf = refmethods::histogram_pmf(&data.set.samples, &wb.map, &binning, wb.beta)
        .map_err(numerical_failure)?;
    // Common grid: the longest populated run of the histogram profile.
    let (start, len) = pmf
        .populated_runs()
        .into_iter()
        .max_by_key(|&(_, len)| len)
        .ok_or_else(|| numerical_failure("empty free-energy profile"))?;
    if len < 3 {
        return Err(numerical_failure("free-energy profile too sparse"));
    }
    let grid: Vec<f64> = pmf.z_grid[start..start + len].to_vec();
    let weights: Vec<f64> = pmf.counts[start..start + len]
        .iter()
        .map(|&c| c as f64)
        .collect();
    let reference = PotentialTable {
        z: grid.clone(),
        u: pmf.a_values[start..start + len]
            .iter()
            .map(|a| a.unwrap())
            .collect(),
    };
    let u_fm =
        fmatch::integrate_model(&model, &grid, grid[0]).map_err(numerical_failure)?;

    let summary;
    let mut re_potential = None;
    match &wb.spec.relent {
        Some(re_spec) => {
            let zs: Vec<f64> = data.zs.iter().map(|z| z[0]).collect();
            let family = re_spec.family().map_err(config_failure)?;
            let report = refmethods::minimize_relative_entropy(
                &zs,
                family.as_ref(),
                &re_spec.theta0,
                wb.beta,
                &re_spec.options(),
            )
            .map_err(numerical_failure)?;
            let u_re = PotentialTable {
                z: grid.clone(),
                u: grid
                    .iter()
                    .map(|&z| family.evaluate(z, &report.theta_star))
                    .collect(),
            };
            let record = refmethods::compare_methods(&u_fm, &u_re, &reference, &weights)
                .map_err(numerical_failure)?;
            summary = CompareSummary {
                l2_fm_ref: record.l2_fm_ref,
                h1_fm_ref: record.h1_fm_ref,
                l2_re_ref: Some(record.l2_re_ref),
                h1_re_ref: Some(record.h1_re_ref),
                l2_fm_re: Some(record.l2_fm_re),
                h1_fm_re: Some(record.h1_fm_re),
                theta_star: Some(report.theta_star.clone()),
                notice: None,
            };
            re_potential = Some(u_re);
        }
        None => {
            let (l2, h1) = refmethods::aligned_distance(&u_fm, &reference, &weights);
            let notice =
                "no [relent] section: comparing force matching against the profile only";
            wb.say(notice);
            summary = CompareSummary {
                l2_fm_ref: l2,
                h1_fm_ref: h1,
                l2_re_ref: None,
                h1_re_ref: None,
                l2_fm_re: None,
                h1_fm_re: None,
                theta_star: None,
                notice: Some(notice.to_string()),
            };
        }
    }
    timings.lap("compare");

    let mut warnings = data.warnings.clone();
    if data.n_skipped > 0 {
        warnings.push(format!(
            "{} samples skipped by degeneracy guards",
            data.n_skipped
        ));
    }
    let mut sink = ArtifactSink::new(&wb.out_dir)?;
    let csv = samples_csv(&data.set)?;
    sink.write("samples.csv", &csv)?;
    let mut pmf_csv = Vec::new();
    pmf.write_csv(&mut pmf_csv).map_err(numerical_failure)?;
    sink.write("pmf.csv", &pmf_csv)?;
    sink.write("fm_potential.csv", potential_csv(&u_fm).as_bytes())?;
    if let Some(u_re) = &re_potential {
        sink.write("re_potential.csv", potential_csv(u_re).as_bytes())?;
    }
    sink.write("comparison.json", &pretty_json(&summary)?)?;
    wb.say(&format!(
        "aligned L2 (force matching vs profile): {:.6e}",
        summary.l2_fm_ref
    ));
    if let Some(l2) = summary.l2_fm_re {
        wb.say(&format!("aligned L2 (force matching vs relative entropy): {l2:.6e}"));
    }
    sink.finish(
        "compare",
        &wb.config_sha256,
        wb.seed,
        timings.entries,
        warnings,
    )
}

// ---------------------------------------------------------------------------
// paper-suite
// ---------------------------------------------------------------------------

struct SuiteReport {
    failures: usize,
    warnings: usize,
    quiet: bool,
}

impl SuiteReport {
    fn pass(&mut self, line: &str) {
        if !self.quiet {
            println!("PASS {line}");
        }
    }
    fn warn(&mut self, line: &str) {
        self.warnings += 1;
        println!("WARN {line}");
    }
    fn fail(&mut self, line: &str) {
        self.failures += 1;
        println!("FAIL {line}");
    }
}

/// Reproductions of the worked examples: equal-mass center-of-mass local
/// mean force, admissible-weight existence, the end-to-end divergence
/// constant, and the relative-entropy expansion order. The two known
/// literature discrepancies (the divergence constant and the uncentered
/// expansion form) are reported as warnings, never failures, because the
/// repository's finite-difference and quadrature oracles are the
/// acceptance authority for them.
fn cmd_paper_suite(cli: &Cli) -> CliResult<i32> {
    let mut rep = SuiteReport {
        failures: 0,
        warnings: 0,
        quiet: cli.quiet,
    };

    suite_equal_mass_com(&mut rep).map_err(numerical_failure)?;
    suite_w_existence(&mut rep).map_err(numerical_failure)?;
    suite_divergence_constant(&mut rep).map_err(numerical_failure)?;
    suite_expansion_order(&mut rep).map_err(numerical_failure)?;

    println!(
        "paper-suite: {} failures, {} warnings",
        rep.failures, rep.warnings
    );
    Ok(if rep.failures > 0 { 3 } else { 0 })
}

/// Equal-mass center of mass: h must equal the plain sum of forces.
fn suite_equal_mass_com(rep: &mut SuiteReport) -> crate::Result<()> {
    use rand::prelude::*;
    let sys = crate::microsys::harmonic_chain(3, 1.0)?;
    let map = cgmap::center_of_mass(&[vec![0, 1, 2]], sys.masses(), 1)?;
    let beta = Beta::new(1.0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut max_dev = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let h = meanforce::local_mean_force(&sys, &map, &WSpec::EqualsJacobian, beta, &x)?;
        let f = sys.force(&x)?;
        let sum: f64 = f.iter().sum();
        max_dev = max_dev.max((h[0] - sum).abs());
    }
    if max_dev <= 1e-10 {
        rep.pass(&format!(
            "equal-mass center of mass: max|h - sum(f)| = {max_dev:.3e}"
        ));
    } else {
        rep.fail(&format!(
            "equal-mass center of mass: max|h - sum(f)| = {max_dev:.3e}"
        ));
    }
    Ok(())
}

fn residual(w: &DMatrix<f64>, t: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let big_d = t.ncols();
    let eye = DMatrix::<f64>::identity(big_d, big_d);
    (w * (eye - t.transpose() * b)).amax()
}

/// Admissible-weight existence for the worked linear maps, plus the
/// shared-particle counterexample where no solution exists.
fn suite_w_existence(rep: &mut SuiteReport) -> crate::Result<()> {
    // Center of mass of three particles, unequal masses.
    let masses = [1.0, 2.0, 3.0];
    let total: f64 = masses.iter().sum();
    let t_com = DMatrix::from_row_slice(1, 3, &[
        masses[0] / total,
        masses[1] / total,
        masses[2] / total,
    ]);
    let b_com = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
    match meanforce::solve_w_for_target(&t_com, &b_com, 1e-10)? {
        Some(w) => {
            let r = residual(&w, &t_com, &b_com);
            if r <= 1e-10 {
                rep.pass(&format!("weight existence, center of mass: residual {r:.3e}"));
            } else {
                rep.fail(&format!("weight existence, center of mass: residual {r:.3e}"));
            }
        }
        None => rep.fail("weight existence, center of mass: no solution found"),
    }

    // Two disjoint groups of two particles each.
    let t_groups = DMatrix::from_row_slice(2, 4, &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    let b_groups = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    match meanforce::solve_w_for_target(&t_groups, &b_groups, 1e-10)? {
        Some(w) => {
            let r = residual(&w, &t_groups, &b_groups);
            if r <= 1e-10 {
                rep.pass(&format!("weight existence, disjoint groups: residual {r:.3e}"));
            } else {
                rep.fail(&format!("weight existence, disjoint groups: residual {r:.3e}"));
            }
        }
        None => rep.fail("weight existence, disjoint groups: no solution found"),
    }

    // Pairwise averages over two disjoint pairs.
    let t_pairs = DMatrix::from_row_slice(2, 4, &[0.3, 0.7, 0.0, 0.0, 0.0, 0.0, 0.6, 0.4]);
    let b_pairs = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    match meanforce::solve_w_for_target(&t_pairs, &b_pairs, 1e-10)? {
        Some(w) => {
            let r = residual(&w, &t_pairs, &b_pairs);
            if r <= 1e-10 {
                rep.pass(&format!("weight existence, pairwise map: residual {r:.3e}"));
            } else {
                rep.fail(&format!("weight existence, pairwise map: residual {r:.3e}"));
            }
        }
        None => rep.fail("weight existence, pairwise map: no solution found"),
    }

    // Counterexample: the two coarse sites share particle 0, and the
    // requested force aggregation is incompatible with any weights.
    let t_shared = DMatrix::from_row_slice(2, 3, &[0.2, 0.5, 0.3, 1.0, 0.0, 0.0]);
    let b_shared = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    match meanforce::solve_w_for_target(&t_shared, &b_shared, 1e-10)? {
        None => rep.pass("weight existence, shared-particle counterexample: correctly absent"),
        Some(_) => {
            rep.fail("weight existence, shared-particle counterexample: unexpected solution")
        }
    }
    Ok(())
}

/// Finite-difference divergence of the end-to-end distance Jacobian
/// versus the constant 6 quoted in the literature.
fn suite_divergence_constant(rep: &mut SuiteReport) -> crate::Result<()> {
    let map = cgmap::end_to_end_distance(2, 0, 1)?;
    // Separation r = 2.5 along a generic direction.
    let x = vec![0.1, -0.2, 0.3, 1.6, 1.8, 1.5];
    let r = {
        let dx: [f64; 3] = [x[3] - x[0], x[4] - x[1], x[5] - x[2]];
        (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt()
    };
    let jac_field = |y: &[f64]| map.jacobian(y);
    let div_h = cgmap::matrix_field_divergence(jac_field, &x, 1e-4)?[0];
    let div_h2 = cgmap::matrix_field_divergence(jac_field, &x, 5e-5)?[0];
    let richardson = (div_h - div_h2).abs() / 3.0;
    let expected = 4.0 / r;
    if (div_h - expected).abs() <= 1e-5 + 10.0 * richardson {
        rep.pass(&format!(
            "end-to-end distance divergence at r = {r:.4}: measured {div_h:.6} = 4/r (Richardson error {richardson:.1e})"
        ));
    } else {
        rep.fail(&format!(
            "end-to-end distance divergence at r = {r:.4}: measured {div_h:.6}, expected 4/r = {expected:.6}"
        ));
    }
    rep.warn(&format!(
        "the often-quoted constant divergence 6 does not match: measured {div_h:.6} vs 6 (and vs 6/r = {:.6}) at r = {r:.4}; the finite-difference oracle is authoritative here",
        6.0 / r
    ));
    Ok(())
}

/// Third-order remainder of the relative-entropy expansion, and the uncentered
/// second-moment form reported alongside.
fn suite_expansion_order(rep: &mut SuiteReport) -> crate::Result<()> {
    let grid: Vec<f64> = (0..=200).map(|i| -2.0 + 0.02 * i as f64).collect();
    let a: Vec<f64> = grid.iter().map(|z| z * z).collect();
    let beta = Beta::new(1.0)?;
    let pmf = PMFTable::from_values(grid.clone(), a, beta, refmethods::PMFMethod::Analytic)?;
    let base = PotentialTable {
        z: pmf.z_grid.clone(),
        u: pmf.a_values.iter().map(|v| v.unwrap()).collect(),
    };
    let shape = PotentialTable {
        z: pmf.z_grid.clone(),
        u: pmf.z_grid.iter().map(|z| (3.0 * z).cos()).collect(),
    };
    let family = TabulatedPerturbation { base, shape };
    let mut gaps = Vec::new();
    let mut last = None;
    let mut theta = 0.2;
    for _ in 0..4 {
        let check = refmethods::expansion_check(&pmf, &family, &[theta], beta)?;
        gaps.push((check.d_value - check.half_beta2_variance).abs());
        last = Some(check);
        theta *= 0.5;
    }
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
    if ratios.iter().all(|&r| r >= 6.0) {
        rep.pass(&format!(
            "relative-entropy expansion: |D - (beta^2/2)Var| contracts by {:?} under three halvings (third-order remainder)",
            ratios.iter().map(|r| (r * 10.0).round() / 10.0).collect::<Vec<_>>()
        ));
    } else {
        rep.fail(&format!(
            "relative-entropy expansion: contraction ratios {ratios:?} fall below 6"
        ));
    }
    let check = last.unwrap();
    rep.warn(&format!(
        "uncentered second-moment form beta^2 E[dU^2] = {:.6e} does not reproduce D = {:.6e}; the centered form (beta^2/2) Var = {:.6e} is the valid leading term",
        check.beta2_mean_square, check.d_value, check.half_beta2_variance
    ));
    Ok(())
}
