//! Generates data from the wind-driven convolution model, fits both the
//! isotropic model and the convolution model, and scores them with the
//! deviance information criterion, the posterior predictive loss, and the
//! held-out predictive density.
//!
//! Run with `cargo run --release --example compare_models`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use windkrig::covariance::{build_covariance, CovContext, GridSpec};
use windkrig::geo::{Site, WindVector};
use windkrig::inference::{run_chain, ChainSetup, PosteriorSamples};
use windkrig::model::{ChainConfig, Delta, ModelKind, ObservationModel, ParameterState, PriorSpec};
use windkrig::predict::{predictive_log_likelihood, PredictionSpec};
use windkrig::selection::{evaluate_model, Criteria};

/// Wind that turns quickly enough to leave a detectable signature.
fn wind_at(s: Site) -> WindVector {
    WindVector::from_angle(1.4 * (0.9 * s.x).sin() + 0.9 * (0.7 * s.y).cos())
}

fn fit(data: &ObservationModel, kind: ModelKind, grid: Option<&GridSpec>, seed: u64) -> PosteriorSamples {
    let mut config = ChainConfig::reference(kind);
    config.iterations = 4_000;
    config.burn_in = 1_500;
    config.thinning = 3;
    config.seed = seed;
    let priors = PriorSpec::reference(data.max_dist());
    run_chain(&ChainSetup {
        data,
        kind,
        nu: 1.0,
        conv_grid: grid,
        priors: &priors,
        config: &config,
        init: None,
    })
    .unwrap()
}

fn row(label: &str, c: &Criteria, pred: f64) {
    println!(
        "{label:>12}  {:>8.2}  {:>6.2}  {:>7.2}  {:>7.2}  {:>7.2}  {pred:>9.3}",
        c.dic, c.p_d, c.g, c.p, c.d_k
    );
}

fn main() {
    // Sites on a jittered 9x6 lattice; every sixth one is held out.
    let mut rng = ChaCha20Rng::seed_from_u64(33);
    let mut all_sites = Vec::new();
    for i in 0..9 {
        for j in 0..6 {
            all_sites.push(Site::new(
                1.8 * i as f64 + 0.55 * rng.gen::<f64>(),
                1.8 * j as f64 + 0.55 * rng.gen::<f64>(),
            ));
        }
    }
    let all_winds: Vec<WindVector> = all_sites.iter().map(|s| wind_at(*s)).collect();

    let truth = ParameterState {
        beta: DVector::from_element(1, 5.0),
        tau2: 0.1,
        eta: 0.05,
        delta: Delta::M4 { phi1: 0.4, phi2: 3.0 },
    };
    let gen_grid = GridSpec::new(all_sites.clone(), all_winds.clone()).unwrap();
    let gen_ctx = CovContext::new(ModelKind::M4, 1.0).with_conv_grid(&gen_grid);
    let mut cov =
        build_covariance(&gen_ctx, &truth, &all_sites, Some(&all_winds)).unwrap().into_matrix();
    for i in 0..all_sites.len() {
        cov[(i, i)] += truth.tau2;
    }
    let chol = nalgebra::Cholesky::new(cov).unwrap();
    let eps = DVector::from_iterator(
        all_sites.len(),
        (0..all_sites.len()).map(|_| rng.sample(StandardNormal)),
    );
    let z_all = DVector::from_element(all_sites.len(), truth.beta[0]) + chol.l() * eps;

    let held: Vec<usize> = (0..9).map(|k| 2 + 6 * k).collect();
    let mut fit_sites = Vec::new();
    let mut fit_winds = Vec::new();
    let mut fit_z = Vec::new();
    let mut held_sites = Vec::new();
    let mut held_winds = Vec::new();
    let mut held_z = Vec::new();
    for i in 0..all_sites.len() {
        if held.contains(&i) {
            held_sites.push(all_sites[i]);
            held_winds.push(all_winds[i]);
            held_z.push(z_all[i]);
        } else {
            fit_sites.push(all_sites[i]);
            fit_winds.push(all_winds[i]);
            fit_z.push(z_all[i]);
        }
    }
    let design = DMatrix::from_element(fit_sites.len(), 1, 1.0);
    let data = ObservationModel::new(
        DVector::from_vec(fit_z),
        design,
        fit_sites.clone(),
        Some(fit_winds.clone()),
    )
    .unwrap();
    let held_vec = DVector::from_vec(held_z);

    println!(
        "data: {} fit sites, {} held out, generated from the convolution model\n",
        fit_sites.len(),
        held_sites.len()
    );
    println!(
        "{:>12}  {:>8}  {:>6}  {:>7}  {:>7}  {:>7}  {:>9}",
        "model", "DIC", "p_D", "G", "P", "D_1", "heldout"
    );

    let ctx_m1 = CovContext::new(ModelKind::M1, 1.0);
    let samples_m1 = fit(&data, ModelKind::M1, None, 1);
    let crit_m1 = evaluate_model(&data, &ctx_m1, &samples_m1, 1.0, 99).unwrap();
    let spec_m1 = PredictionSpec::observation(&held_sites).with_seed(5);
    let pred_m1 =
        predictive_log_likelihood(&data, &ctx_m1, &samples_m1.states, &spec_m1, &held_vec).unwrap();
    row("isotropic", &crit_m1, pred_m1);

    let fit_grid = GridSpec::new(fit_sites, fit_winds).unwrap();
    let ctx_m4 = CovContext::new(ModelKind::M4, 1.0).with_conv_grid(&fit_grid);
    let samples_m4 = fit(&data, ModelKind::M4, Some(&fit_grid), 1);
    let crit_m4 = evaluate_model(&data, &ctx_m4, &samples_m4, 1.0, 99).unwrap();
    let spec_m4 =
        PredictionSpec::observation(&held_sites).with_winds(&held_winds).with_seed(5);
    let pred_m4 =
        predictive_log_likelihood(&data, &ctx_m4, &samples_m4.states, &spec_m4, &held_vec).unwrap();
    row("convolution", &crit_m4, pred_m4);

    println!("\nlower DIC and D_1 are better; higher held-out log density is better");
}
