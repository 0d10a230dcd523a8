//! Summarizes local correlation kernels as ellipses. The wind-oriented
//! model aligns every ellipse with the flow; the latent-kernel model lets
//! shape and orientation drift as Gaussian processes.
//!
//! Run with `cargo run --example ellipse_field`.

use std::f64::consts::PI;

use windkrig::covariance::CovContext;
use windkrig::geo::WindVector;
use windkrig::io::{make_grid, Bbox};
use windkrig::model::{Delta, LatentFields, ModelKind};
use windkrig::sim::ellipse_field;

fn main() {
    let bbox = Bbox { x0: 0.0, y0: 0.0, x1: 8.0, y1: 4.0 };
    let sites = make_grid(&bbox, 4, 2).unwrap();
    let winds: Vec<WindVector> =
        sites.iter().map(|s| WindVector::from_angle(0.5 * s.x - 0.3 * s.y)).collect();

    let ctx3 = CovContext::new(ModelKind::M3, 1.0);
    let delta3 = Delta::M3 { lambda1_sq: 4.0, lambda2_sq: 0.25 };
    let rows = ellipse_field(&ctx3, &delta3, &sites, Some(&winds), 1.0).unwrap();
    println!("wind-oriented kernels (major axis locks onto the wind):");
    println!("  {:>12}  {:>5}  {:>5}  {:>9}  {:>9}", "site", "a1", "a2", "ellipse", "wind");
    for (row, wind) in rows.iter().zip(&winds) {
        println!(
            "  ({:>4.1}, {:>3.1})  {:>5.2}  {:>5.2}  {:>8.1}d  {:>8.1}d",
            row.site.x,
            row.site.y,
            row.a1,
            row.a2,
            row.orientation.to_degrees(),
            wind.angle().rem_euclid(PI).to_degrees()
        );
    }

    // Latent kernels: the axis lengths and the orientation field are free to
    // vary over space instead of following a covariate.
    let n = sites.len();
    let mut fields = LatentFields::constant(n, 0.0, 0.0, 0.0);
    for (i, s) in sites.iter().enumerate() {
        fields.log_lambda1[i] = 0.7 + 0.4 * (0.5 * s.x).sin();
        fields.log_lambda2[i] = -0.5;
        fields.gamma[i] = 1.5 * (0.4 * s.x + 0.3 * s.y).sin();
    }
    let ctx5 = CovContext::new(ModelKind::M5, 1.0).with_latent_anchors(&sites);
    let rows = ellipse_field(&ctx5, &Delta::M5(fields), &sites, None, 1.0).unwrap();
    println!("\nlatent kernels (shape and angle drift freely):");
    println!("  {:>12}  {:>5}  {:>5}  {:>9}", "site", "a1", "a2", "ellipse");
    for row in &rows {
        println!(
            "  ({:>4.1}, {:>3.1})  {:>5.2}  {:>5.2}  {:>8.1}d",
            row.site.x, row.site.y, row.a1, row.a2, row.orientation.to_degrees()
        );
    }

    // Stationary families carry one global kernel, so there is no per-site
    // ellipse field to draw.
    let err = ellipse_field(&CovContext::new(ModelKind::M1, 1.0), &Delta::M1 { phi: 1.0 }, &sites, None, 1.0)
        .unwrap_err();
    println!("\nasking the isotropic model for ellipses fails: {err}");
}
