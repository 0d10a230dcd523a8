//! Renders the correlation of every grid point with a central reference
//! site, first under the isotropic model and then under the projection
//! convolution in a turning wind, where the contours stretch along the
//! local flow.
//!
//! Run with `cargo run --example correlation_map`.

use windkrig::covariance::{CovContext, GridSpec};
use windkrig::geo::{Site, WindVector};
use windkrig::io::{make_grid, Bbox};
use windkrig::model::{Delta, ModelKind};
use windkrig::sim::correlation_map;

/// Wind that rotates smoothly across the domain.
fn wind_at(s: Site) -> WindVector {
    WindVector::from_angle(0.9 * (0.35 * s.x).sin() + 0.6 * (0.3 * s.y).cos())
}

/// One shaded character per correlation value.
fn shade(c: f64) -> char {
    const RAMP: [char; 10] = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    RAMP[(c.clamp(0.0, 1.0) * 9.0).round() as usize]
}

fn render(label: &str, values: &[f64], nx: usize, ny: usize) {
    println!("{label}");
    // make_grid walks x fastest within each y row; print the top row first.
    for row in (0..ny).rev() {
        let line: String = (0..nx).map(|col| shade(values[row * nx + col])).collect();
        println!("  |{line}|");
    }
    println!();
}

fn main() {
    let bbox = Bbox { x0: 0.0, y0: 0.0, x1: 18.0, y1: 9.0 };
    let (nx, ny) = (60, 24);
    let targets = make_grid(&bbox, nx, ny).unwrap();
    let target_winds: Vec<WindVector> = targets.iter().map(|s| wind_at(*s)).collect();
    let reference = Site::new(9.0, 4.5);
    let ref_wind = wind_at(reference);

    let ctx_iso = CovContext::new(ModelKind::M1, 1.0);
    let iso = correlation_map(&ctx_iso, &Delta::M1 { phi: 1.6 }, reference, None, &targets, None)
        .unwrap();
    render("isotropic Matern, phi = 1.6:", &iso, nx, ny);

    // Kernel support points for the convolution: a coarser grid with the
    // same wind field.
    let anchors = make_grid(&bbox, 19, 10).unwrap();
    let anchor_winds: Vec<WindVector> = anchors.iter().map(|s| wind_at(*s)).collect();
    let grid = GridSpec::new(anchors, anchor_winds).unwrap();
    let ctx_conv = CovContext::new(ModelKind::M4, 1.0).with_conv_grid(&grid);
    let conv = correlation_map(
        &ctx_conv,
        &Delta::M4 { phi1: 0.45, phi2: 3.0 },
        reference,
        Some(ref_wind),
        &targets,
        Some(&target_winds),
    )
    .unwrap();
    render(
        &format!(
            "projection convolution, phi1 = 0.45, phi2 = 3.0, reference wind {:.0} deg:",
            ref_wind.angle().to_degrees()
        ),
        &conv,
        nx,
        ny,
    );
    println!("the convolution contours follow the wind; the isotropic rings do not");
}
