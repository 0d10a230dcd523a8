//! Interpolates station winds onto a grid by kriging the velocity
//! components separately, then renders the field as arrows. Interpolated
//! directions turn smoothly between the stations.
//!
//! Run with `cargo run --example wind_interpolation`.

use windkrig::geo::{Site, WindVector};
use windkrig::io::{make_grid, Bbox};
use windkrig::predict::interp_wind;

/// Nearest arrow glyph for a direction.
fn arrow(w: WindVector) -> char {
    const GLYPHS: [char; 8] = ['\u{2192}', '\u{2197}', '\u{2191}', '\u{2196}',
                               '\u{2190}', '\u{2199}', '\u{2193}', '\u{2198}'];
    let sector = (w.angle().rem_euclid(std::f64::consts::TAU) / (std::f64::consts::TAU / 8.0))
        .round() as usize;
    GLYPHS[sector % 8]
}

fn main() {
    let stations = [
        Site::new(1.0, 1.0),
        Site::new(9.0, 1.5),
        Site::new(5.0, 4.0),
        Site::new(1.5, 7.0),
        Site::new(8.5, 7.5),
        Site::new(4.5, 0.5),
    ];
    let angles_deg = [0.0, 90.0, 45.0, 180.0, 135.0, 10.0];
    let winds: Vec<WindVector> =
        angles_deg.iter().map(|a: &f64| WindVector::from_angle(a.to_radians())).collect();

    println!("stations:");
    for (s, a) in stations.iter().zip(&angles_deg) {
        println!("  ({:>4.1}, {:>4.1}) blowing {:>5.1} deg", s.x, s.y, a);
    }

    let bbox = Bbox { x0: 0.0, y0: 0.0, x1: 10.0, y1: 8.0 };
    let (nx, ny) = (20, 8);
    let targets = make_grid(&bbox, nx, ny).unwrap();
    let field = interp_wind(&stations, &winds, &targets).unwrap();

    println!("\ninterpolated directions:");
    for row in (0..ny).rev() {
        let line: String = (0..nx)
            .map(|col| arrow(field[row * nx + col]))
            .flat_map(|c| [c, ' '])
            .collect();
        println!("  {line}");
    }

    // A target exactly on a station reproduces that station's direction.
    let echo = interp_wind(&stations, &winds, &stations[2..3]).unwrap();
    println!(
        "\nat station 3 the field returns {:.1} deg (observed {:.1})",
        echo[0].angle().to_degrees(),
        angles_deg[2]
    );
}
