//! Fits the isotropic model to one simulated data set and krigs the latent
//! surface onto a grid, printing the posterior mean surface and showing how
//! the predictive uncertainty grows away from the stations.
//!
//! Run with `cargo run --release --example kriging_surface`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use windkrig::covariance::CovContext;
use windkrig::geo::Site;
use windkrig::inference::{run_chain, ChainSetup};
use windkrig::io::{make_grid, Bbox};
use windkrig::model::{ChainConfig, Delta, ModelKind, ObservationModel, ParameterState, PriorSpec};
use windkrig::predict::{predict, PredictionSpec};
use windkrig::sim::{simulate_field, SimulationRequest};

fn shade(v: f64, lo: f64, hi: f64) -> char {
    const RAMP: [char; 10] = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    RAMP[(((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 9.0).round() as usize]
}

fn main() {
    // Stations cluster in the left half so the right half must extrapolate.
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let stations: Vec<Site> = (0..30)
        .map(|_| Site::new(7.0 * rng.gen::<f64>(), 8.0 * rng.gen::<f64>()))
        .collect();

    let truth = ParameterState {
        beta: DVector::from_element(1, 5.0),
        tau2: 0.2,
        eta: 0.1,
        delta: Delta::M1 { phi: 2.2 },
    };
    let ctx = CovContext::new(ModelKind::M1, 1.0);
    let mut req = SimulationRequest::new(&stations, &truth);
    req.seed = 4;
    let z = DVector::from_vec(simulate_field(&ctx, &req).unwrap().values[0].clone());

    let design = DMatrix::from_element(stations.len(), 1, 1.0);
    let data = ObservationModel::new(z, design, stations, None).unwrap();

    let mut config = ChainConfig::reference(ModelKind::M1);
    config.iterations = 3_000;
    config.burn_in = 1_000;
    config.thinning = 4;
    config.seed = 12;
    let priors = PriorSpec::reference(data.max_dist());
    let samples = run_chain(&ChainSetup {
        data: &data,
        kind: ModelKind::M1,
        nu: 1.0,
        conv_grid: None,
        priors: &priors,
        config: &config,
        init: None,
    })
    .unwrap();

    let bbox = Bbox { x0: 0.0, y0: 0.0, x1: 14.0, y1: 8.0 };
    let (nx, ny) = (56, 20);
    let targets = make_grid(&bbox, nx, ny).unwrap();
    let spec = PredictionSpec::latent(&targets).with_seed(2);
    let summary = predict(&data, &ctx, &samples.states, &spec).unwrap();

    let lo = summary.mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = summary.mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("posterior mean of the latent surface ({lo:.2} to {hi:.2}):");
    for row in (0..ny).rev() {
        let line: String =
            (0..nx).map(|col| shade(summary.mean[row * nx + col], lo, hi)).collect();
        println!("  |{line}|");
    }

    // Predictive sd split by distance to the nearest station.
    let near = |s: &Site| {
        data.sites.iter().map(|t| s.dist(t)).fold(f64::INFINITY, f64::min)
    };
    let (mut sd_near, mut n_near, mut sd_far, mut n_far) = (0.0, 0usize, 0.0, 0usize);
    for (site, sd) in summary.sites.iter().zip(&summary.sd) {
        if near(site) < 1.5 {
            sd_near += sd;
            n_near += 1;
        } else {
            sd_far += sd;
            n_far += 1;
        }
    }
    println!(
        "\nmean predictive sd within 1.5 of a station: {:.3} ({} cells)",
        sd_near / n_near as f64,
        n_near
    );
    println!(
        "mean predictive sd farther out:             {:.3} ({} cells)",
        sd_far / n_far.max(1) as f64,
        n_far
    );
}
