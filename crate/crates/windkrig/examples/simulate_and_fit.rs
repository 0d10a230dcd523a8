//! Simulates a spatial field from known parameters, refits it with the
//! adaptive MCMC sampler, and prints posterior intervals next to the truth.
//!
//! Run with `cargo run --release --example simulate_and_fit`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use windkrig::geo::Site;
use windkrig::inference::{run_chain, ChainSetup, PosteriorSamples};
use windkrig::model::{ChainConfig, Delta, ModelKind, ObservationModel, ParameterState, PriorSpec};
use windkrig::sim::{simulate_field, SimulationRequest};

/// A 7x7 grid jittered so no distances coincide.
fn make_sites(rng: &mut ChaCha20Rng) -> Vec<Site> {
    let mut sites = Vec::with_capacity(49);
    for i in 0..7 {
        for j in 0..7 {
            let x = 1.5 * i as f64 + 0.6 * rng.gen::<f64>();
            let y = 1.5 * j as f64 + 0.6 * rng.gen::<f64>();
            sites.push(Site::new(x, y));
        }
    }
    sites
}

fn quantile(draws: &mut Vec<f64>, q: f64) -> f64 {
    draws.sort_by(|a, b| a.total_cmp(b));
    draws[((draws.len() - 1) as f64 * q).round() as usize]
}

fn report(samples: &PosteriorSamples, name: &str, truth: f64, pick: impl Fn(&ParameterState) -> f64) {
    let mut draws: Vec<f64> = samples.states.iter().map(&pick).collect();
    let lo = quantile(&mut draws, 0.025);
    let med = quantile(&mut draws, 0.5);
    let hi = quantile(&mut draws, 0.975);
    let hit = if lo <= truth && truth <= hi { "yes" } else { "NO" };
    println!("{name:>7}  {truth:>8.3}  {med:>8.3}  [{lo:>8.3}, {hi:>8.3}]  {hit}");
}

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let sites = make_sites(&mut rng);

    let truth = ParameterState {
        beta: DVector::from_element(1, 10.0),
        tau2: 0.4,
        eta: 0.2,
        delta: Delta::M1 { phi: 1.5 },
    };

    let mut req = SimulationRequest::new(&sites, &truth);
    req.seed = 4;
    let ctx = windkrig::covariance::CovContext::new(ModelKind::M1, 1.0);
    let field = simulate_field(&ctx, &req).expect("simulation");
    let z = DVector::from_vec(field.values[0].clone());

    let design = DMatrix::from_element(sites.len(), 1, 1.0);
    let data = ObservationModel::new(z, design, sites, None).expect("observation model");

    let mut config = ChainConfig::reference(ModelKind::M1);
    config.iterations = 6_000;
    config.burn_in = 2_000;
    config.thinning = 5;
    config.seed = 3;
    let priors = PriorSpec::reference(data.max_dist());
    let setup = ChainSetup {
        data: &data,
        kind: ModelKind::M1,
        nu: 1.0,
        conv_grid: None,
        priors: &priors,
        config: &config,
        init: None,
    };
    let samples = run_chain(&setup).expect("chain");

    println!("fitted {} draws on {} sites", samples.len(), data.sites.len());
    println!("{:>7}  {:>8}  {:>8}  {:>20}  covered", "param", "truth", "median", "central 95%");
    report(&samples, "beta0", 10.0, |s| s.beta[0]);
    report(&samples, "tau2", 0.4, |s| s.tau2);
    report(&samples, "sigma2", 0.4 / 0.2, |s| s.sigma2());
    report(&samples, "phi", 1.5, |s| match s.delta {
        Delta::M1 { phi } => phi,
        _ => unreachable!(),
    });

    println!("\nacceptance rates after burn-in:");
    for rate in &samples.acceptance {
        let post = rate.accepted_post as f64 / rate.proposed_post.max(1) as f64;
        println!("  {:>7}: {post:.2} (final step {:.3})", rate.name, rate.final_step);
    }
}
