//! End-to-end library walkthrough on the harmonic dimer: sample the Gibbs
//! measure, evaluate the local mean force along the center-of-mass
//! coordinate, fit a hat-basis force model, and print the fit against the
//! exact mean force −2z.
//!
//! Run with: cargo run -p cgmatch --example dimer_pipeline

use cgmatch::meanforce::WSpec;
use cgmatch::sampler::Binning;
use cgmatch::{cgmap, fmatch, meanforce, microsys, sampler, Beta};

fn main() -> cgmatch::Result<()> {
    let sys = microsys::harmonic_dimer(1.0)?;
    let map = cgmap::center_of_mass(&[vec![0, 1]], sys.masses(), 1)?;
    let beta = Beta::new(1.0)?;

    let set = sampler::metropolis_sample(&sys, beta, 110_000, 1.0, 7, 10_000, 1)?;
    let eval = meanforce::evaluate_over_samples(&sys, &map, &WSpec::EqualsJacobian, beta, &set.samples)?;
    let (zs, hs): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
        eval.samples.into_iter().map(|s| (s.z, s.h)).unzip();

    let basis = fmatch::BasisSet::uniform_hats(-2.0, 2.0, 21)?;
    let design = fmatch::assemble_least_squares(&zs, &hs, &basis)?;
    let model = fmatch::solve_force_match_default(&design)?;

    let binned = sampler::bin_conditional(&zs, &hs, &Binning::Auto { n_bins: 11 })?;
    println!("{:>8}  {:>10}  {:>10}  {:>10}", "z", "binned h", "fit G*", "exact");
    for i in 0..binned.n_bins() {
        if binned.bin_counts[i] < 100 {
            continue;
        }
        let z = binned.bin_center(i)[0];
        let g = model.evaluate_scalar(z)?;
        println!(
            "{z:>8.3}  {:>10.4}  {g:>10.4}  {:>10.4}",
            binned.bin_means[i][0],
            -2.0 * z
        );
    }
    Ok(())
}
