//! Draws one realization from each correlation family on the same grid with
//! the same seed and renders them side by side, so the structural
//! differences are visible at a glance: isotropic blobs, tilted ridges,
//! wind-following streaks, and patchwork from latent kernels.
//!
//! Run with `cargo run --release --example field_gallery`.

use std::f64::consts::FRAC_PI_4;

use nalgebra::DVector;
use windkrig::covariance::{CovContext, GridSpec};
use windkrig::geo::WindVector;
use windkrig::io::{make_grid, Bbox};
use windkrig::model::{Delta, LatentFields, ModelKind, ParameterState};
use windkrig::sim::{simulate_field, SimulationRequest};

fn shade(v: f64, lo: f64, hi: f64) -> char {
    const RAMP: [char; 10] = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    RAMP[(((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 9.0).round() as usize]
}

fn render(label: &str, values: &[f64], nx: usize, ny: usize) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("{label}");
    for row in (0..ny).rev() {
        let line: String = (0..nx).map(|col| shade(values[row * nx + col], lo, hi)).collect();
        println!("  |{line}|");
    }
    println!();
}

fn state(delta: Delta) -> ParameterState {
    ParameterState {
        beta: DVector::from_element(1, 0.0),
        tau2: 0.01,
        eta: 0.01,
        delta,
    }
}

fn main() {
    let bbox = Bbox { x0: 0.0, y0: 0.0, x1: 16.0, y1: 8.0 };
    let (nx, ny) = (64, 20);
    let sites = make_grid(&bbox, nx, ny).unwrap();
    let winds: Vec<WindVector> = sites
        .iter()
        .map(|s| WindVector::from_angle(1.1 * (0.35 * s.x).sin() + 0.8 * (0.3 * s.y).cos()))
        .collect();

    let draw = |kind: ModelKind, delta: Delta, with_wind: bool, grid: Option<&GridSpec>| {
        let st = state(delta);
        let mut ctx = CovContext::new(kind, 1.0);
        if let Some(g) = grid {
            ctx = ctx.with_conv_grid(g);
        }
        let mut req = SimulationRequest::new(&sites, &st);
        req.winds = with_wind.then_some(&winds);
        req.seed = 9;
        req.include_nugget = false;
        req.draw_latent = matches!(kind, ModelKind::M5);
        if matches!(kind, ModelKind::M5) {
            ctx = ctx.with_latent_anchors(&sites);
        }
        simulate_field(&ctx, &req).unwrap().values.remove(0)
    };

    render("isotropic:", &draw(ModelKind::M1, Delta::M1 { phi: 1.5 }, false, None), nx, ny);
    render(
        "geometric anisotropy (tilted 45 degrees, 3:1 axes):",
        &draw(
            ModelKind::M2,
            Delta::M2 { phi: 1.5, theta: FRAC_PI_4, lambda1: 3.0, lambda2: 1.0 },
            false,
            None,
        ),
        nx,
        ny,
    );
    render(
        "wind-oriented kernels:",
        &draw(ModelKind::M3, Delta::M3 { lambda1_sq: 6.0, lambda2_sq: 0.3 }, true, None),
        nx,
        ny,
    );
    let anchors = make_grid(&bbox, 24, 10).unwrap();
    let anchor_winds: Vec<WindVector> = anchors
        .iter()
        .map(|s| WindVector::from_angle(1.1 * (0.35 * s.x).sin() + 0.8 * (0.3 * s.y).cos()))
        .collect();
    let grid = GridSpec::new(anchors, anchor_winds).unwrap();
    render(
        "projection convolution (streaks follow the wind):",
        &draw(ModelKind::M4, Delta::M4 { phi1: 0.7, phi2: 4.0 }, true, Some(&grid)),
        nx,
        ny,
    );
    let mut fields = LatentFields::constant(sites.len(), 0.3, -0.6, 0.0);
    fields.phi_lambda = 4.0;
    fields.phi_gamma = 4.0;
    render(
        "latent kernels (fields drawn from their own priors):",
        &draw(ModelKind::M5, Delta::M5(fields), false, None),
        nx,
        ny,
    );
}
