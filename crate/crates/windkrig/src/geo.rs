//! Planar geometry primitives: sites, unit wind vectors, rotations, and the
//! 2x2 kernel matrices that encode direction-dependent correlation ranges.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

/// A site in the plane. Coordinates are planar (projected) units; longitude
/// and latitude inputs are rescaled before sites are built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub x: f64,
    pub y: f64,
}

impl Site {
    /// Creates a site.
    ///
    /// # Panics
    /// Panics if either coordinate is non-finite. File loaders reject such
    /// rows with a line-numbered error before reaching this constructor.
    pub fn new(x: f64, y: f64) -> Self {
        assert!(x.is_finite() && y.is_finite(), "site coordinates must be finite");
        Site { x, y }
    }

    /// Euclidean distance to another site.
    pub fn dist(&self, other: &Site) -> f64 {
        euclid_dist(*self, *other)
    }

    /// Position as a column vector.
    pub fn vector(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Euclidean distance between two sites.
pub fn euclid_dist(a: Site, b: Site) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// A wind direction, stored unit-normalized. Only direction enters the
/// covariance models, so magnitude is discarded at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindVector {
    u: f64,
    v: f64,
}

impl WindVector {
    /// Normalizes `(u, v)` to unit length.
    ///
    /// Errors with [`Error::ZeroWind`] if the magnitude is zero or too small
    /// to normalize, and [`Error::Domain`] if a component is non-finite.
    pub fn new(u: f64, v: f64) -> Result<Self> {
        if !u.is_finite() || !v.is_finite() {
            return Err(Error::Domain(format!("wind components must be finite, got ({u}, {v})")));
        }
        let mag = u.hypot(v);
        if mag < 1e-300 {
            return Err(Error::ZeroWind { context: None });
        }
        Ok(WindVector { u: u / mag, v: v / mag })
    }

    /// Unit wind at angle `theta` (radians, measured from the +x axis).
    pub fn from_angle(theta: f64) -> Self {
        WindVector { u: theta.cos(), v: theta.sin() }
    }

    /// Eastward component of the unit vector.
    pub fn u(&self) -> f64 {
        self.u
    }

    /// Northward component of the unit vector.
    pub fn v(&self) -> f64 {
        self.v
    }

    /// Direction angle in `(-pi, pi]`.
    pub fn angle(&self) -> f64 {
        wind_angle(*self)
    }

    /// The opposite direction.
    pub fn flipped(&self) -> Self {
        WindVector { u: -self.u, v: -self.v }
    }

    /// The representative of `{w, -w}` in the upper half plane (v > 0, or
    /// v == 0 and u > 0). Axis-valued uses go through this so that a wind
    /// and its flip produce bit-identical results.
    pub fn canonical_axis(&self) -> Self {
        if self.v < 0.0 || (self.v == 0.0 && self.u < 0.0) {
            self.flipped()
        } else {
            *self
        }
    }

    /// Unit vector as a column vector.
    pub fn vector(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// Angle of a wind vector in `(-pi, pi]`, measured counterclockwise from +x.
pub fn wind_angle(w: WindVector) -> f64 {
    w.v.atan2(w.u)
}

/// Counterclockwise rotation matrix `[[cos w, -sin w], [sin w, cos w]]`.
pub fn rotation(omega: f64) -> Matrix2<f64> {
    let (s, c) = omega.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Componentwise average of two unit winds. Not renormalized: opposing winds
/// average to zero and the magnitude (at most 1) carries real information.
pub fn mean_wind(a: WindVector, b: WindVector) -> Vector2<f64> {
    Vector2::new(0.5 * (a.u + b.u), 0.5 * (a.v + b.v))
}

/// A symmetric positive definite 2x2 kernel matrix. Entries carry squared
/// distance units; its ellipse axes are the square roots of its eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelMatrix {
    m: Matrix2<f64>,
}

impl KernelMatrix {
    /// Validates symmetry and positive definiteness.
    pub fn new(m: Matrix2<f64>) -> Result<Self> {
        let scale = m[(0, 0)].abs().max(m[(1, 1)].abs()).max(1.0);
        if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-10 * scale {
            return Err(Error::NotPositiveDefinite(format!(
                "kernel matrix is asymmetric: off-diagonals {} vs {}",
                m[(0, 1)],
                m[(1, 0)]
            )));
        }
        let sym = 0.5 * (m + m.transpose());
        let det = sym[(0, 0)] * sym[(1, 1)] - sym[(0, 1)] * sym[(1, 0)];
        if !(sym[(0, 0)] > 0.0 && det > 0.0 && det.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!(
                "leading entry {} and determinant {det} must both be positive",
                sym[(0, 0)]
            )));
        }
        Ok(KernelMatrix { m: sym })
    }

    /// Builds `R(angle) diag(e1, e2) R(angle)^T`, the SPD matrix whose
    /// eigenvector for eigenvalue `e1` points along `angle`.
    ///
    /// Errors if either eigenvalue is not strictly positive.
    pub fn from_axes(angle: f64, e1: f64, e2: f64) -> Result<Self> {
        if !(e1 > 0.0 && e2 > 0.0) || !e1.is_finite() || !e2.is_finite() {
            return Err(Error::Domain(format!(
                "kernel eigenvalues must be positive and finite, got ({e1}, {e2})"
            )));
        }
        let r = rotation(angle);
        let m = r * Matrix2::new(e1, 0.0, 0.0, e2) * r.transpose();
        // Symmetrize to remove rounding asymmetry from the triple product.
        Ok(KernelMatrix { m: 0.5 * (m + m.transpose()) })
    }

    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.m
    }

    pub fn det(&self) -> f64 {
        self.m[(0, 0)] * self.m[(1, 1)] - self.m[(0, 1)] * self.m[(1, 0)]
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_tr = 0.5 * (self.m[(0, 0)] + self.m[(1, 1)]);
        let half_diff = 0.5 * (self.m[(0, 0)] - self.m[(1, 1)]);
        let disc = half_diff.hypot(self.m[(0, 1)]);
        (half_tr + disc, half_tr - disc)
    }

    /// Ellipse summary `(a1, a2, orientation)`: semi-axes are the square
    /// roots of the eigenvalues with `a1 >= a2`, orientation is the major
    /// axis angle in `[0, pi)`. Circles report orientation 0.
    pub fn ellipse(&self) -> (f64, f64, f64) {
        let (e1, e2) = self.eigenvalues();
        let (a1, a2) = (e1.max(0.0).sqrt(), e2.max(0.0).sqrt());
        let b = self.m[(0, 1)];
        let scale = e1.abs().max(1e-300);
        if (e1 - e2).abs() <= 1e-12 * scale {
            return (a1, a2, 0.0);
        }
        // Eigenvector for e1: (b, e1 - a) unless that degenerates.
        let (vx, vy) = if b.abs() > 1e-14 * scale {
            (b, e1 - self.m[(0, 0)])
        } else if self.m[(0, 0)] >= self.m[(1, 1)] {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let mut angle = vy.atan2(vx);
        if angle < 0.0 {
            angle += std::f64::consts::PI;
        }
        if angle >= std::f64::consts::PI {
            angle -= std::f64::consts::PI;
        }
        (a1, a2, angle)
    }
}

/// Wind-oriented kernel matrix `R(w) diag(l1_sq, l2_sq) R(w)^T` where the
/// rotation angle is the wind direction. The eigenvalue `l1_sq` sits on the
/// axis along the wind. Only the wind axis matters, and the wind is folded
/// to a canonical half plane first, so flipping it leaves the result
/// bit-identical.
pub fn lga_kernel(w: WindVector, l1_sq: f64, l2_sq: f64) -> Result<KernelMatrix> {
    KernelMatrix::from_axes(w.canonical_axis().angle(), l1_sq, l2_sq)
}

/// Projects the mean wind at `s` and `t` onto the separation direction.
///
/// Returns the projection vector and its magnitude. The magnitude is largest
/// when both winds blow along the line joining the sites and zero when they
/// oppose or blow across it.
///
/// Errors with [`Error::CoincidentSites`] when `s == t` (no direction to
/// project onto).
pub fn wind_projection(s: Site, t: Site, ws: WindVector, wt: WindVector) -> Result<(Vector2<f64>, f64)> {
    let d = t.vector() - s.vector();
    let dd = d.dot(&d);
    if dd == 0.0 {
        return Err(Error::CoincidentSites {
            context: Some(format!("projection undefined at ({}, {})", s.x, s.y)),
        });
    }
    let r = mean_wind(ws, wt);
    let proj = (r.dot(&d) / dd) * d;
    Ok((proj, proj.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn distance_is_symmetric_and_euclidean() {
        let a = Site::new(0.0, 0.0);
        let b = Site::new(3.0, 4.0);
        assert_eq!(euclid_dist(a, b), 5.0);
        assert_eq!(euclid_dist(b, a), 5.0);
        assert_eq!(euclid_dist(a, a), 0.0);
    }

    #[test]
    fn wind_vector_normalizes_and_rejects_zero() {
        let w = WindVector::new(3.0, 4.0).unwrap();
        assert_relative_eq!(w.u(), 0.6);
        assert_relative_eq!(w.v(), 0.8);
        assert!(matches!(WindVector::new(0.0, 0.0), Err(Error::ZeroWind { .. })));
        assert!(WindVector::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn wind_angle_covers_all_quadrants() {
        assert_relative_eq!(WindVector::new(1.0, 1.0).unwrap().angle(), FRAC_PI_4);
        assert_relative_eq!(WindVector::new(-1.0, 0.0).unwrap().angle(), PI);
        assert_relative_eq!(WindVector::new(0.0, -1.0).unwrap().angle(), -FRAC_PI_2);
    }

    #[test]
    fn rotation_is_orthogonal_with_unit_determinant() {
        for &omega in &[0.0, 0.3, FRAC_PI_2, 2.5, -1.2] {
            let r = rotation(omega);
            let should_be_identity = r * r.transpose();
            assert_relative_eq!(should_be_identity, Matrix2::identity(), epsilon = 1e-14);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn lga_kernel_aligns_major_axis_with_wind() {
        // Wind along +x keeps the eigenvalues on the coordinate axes.
        let k = lga_kernel(WindVector::new(1.0, 0.0).unwrap(), 4.0, 1.0).unwrap();
        assert_relative_eq!(*k.matrix(), Matrix2::new(4.0, 0.0, 0.0, 1.0), epsilon = 1e-14);
        // Wind along +y swaps them.
        let k = lga_kernel(WindVector::new(0.0, 1.0).unwrap(), 4.0, 1.0).unwrap();
        assert_relative_eq!(*k.matrix(), Matrix2::new(1.0, 0.0, 0.0, 4.0), epsilon = 1e-14);
        // General wind: eigenvector for the larger eigenvalue is the wind.
        let w = WindVector::new(2.0, 1.0).unwrap();
        let k = lga_kernel(w, 4.0, 1.0).unwrap();
        let kw = k.matrix() * w.vector();
        assert_relative_eq!(kw, 4.0 * w.vector(), epsilon = 1e-12);
    }

    #[test]
    fn lga_kernel_is_invariant_under_wind_flip() {
        let w = WindVector::new(0.3, -0.7).unwrap();
        let k = lga_kernel(w, 5.0, 2.0).unwrap();
        let kf = lga_kernel(w.flipped(), 5.0, 2.0).unwrap();
        assert_relative_eq!(*k.matrix(), *kf.matrix(), epsilon = 1e-14);
    }

    #[test]
    fn lga_kernel_rejects_nonpositive_eigenvalues() {
        let w = WindVector::new(1.0, 0.0).unwrap();
        assert!(lga_kernel(w, 0.0, 1.0).is_err());
        assert!(lga_kernel(w, 1.0, -2.0).is_err());
    }

    #[test]
    fn mean_wind_averages_componentwise() {
        let a = WindVector::new(1.0, 0.0).unwrap();
        let b = WindVector::new(0.0, 1.0).unwrap();
        let m = mean_wind(a, b);
        assert_relative_eq!(m, Vector2::new(0.5, 0.5));
        assert!(m.norm() <= 1.0);
        // Opposing winds cancel.
        assert_relative_eq!(mean_wind(a, a.flipped()).norm(), 0.0);
    }

    #[test]
    fn wind_projection_tracks_alignment() {
        let s = Site::new(0.0, 0.0);
        let t = Site::new(2.0, 0.0);
        let along = WindVector::new(1.0, 0.0).unwrap();
        let across = WindVector::new(0.0, 1.0).unwrap();

        let (proj, norm) = wind_projection(s, t, along, along).unwrap();
        assert_relative_eq!(proj, Vector2::new(1.0, 0.0), epsilon = 1e-14);
        assert_relative_eq!(norm, 1.0, epsilon = 1e-14);

        // Winds across the separation line project to zero.
        let (_, norm) = wind_projection(s, t, across, across).unwrap();
        assert_relative_eq!(norm, 0.0, epsilon = 1e-14);

        // Opposing winds average to zero, so the projection vanishes too.
        let (_, norm) = wind_projection(s, t, along, along.flipped()).unwrap();
        assert_relative_eq!(norm, 0.0, epsilon = 1e-14);

        // Diagonal winds: magnitude cos(45 deg) times the mean wind norm (1).
        let diag = WindVector::new(1.0, 1.0).unwrap();
        let (_, norm) = wind_projection(s, t, diag, diag).unwrap();
        assert_relative_eq!(norm, FRAC_PI_4.cos(), epsilon = 1e-14);
    }

    #[test]
    fn wind_projection_requires_distinct_sites() {
        let s = Site::new(1.0, 1.0);
        let w = WindVector::new(1.0, 0.0).unwrap();
        assert!(matches!(
            wind_projection(s, s, w, w),
            Err(Error::CoincidentSites { .. })
        ));
    }

    #[test]
    fn ellipse_reports_sorted_axes_and_orientation_in_half_turn() {
        let k = KernelMatrix::from_axes(2.0, 9.0, 1.0).unwrap();
        let (a1, a2, angle) = k.ellipse();
        assert_relative_eq!(a1, 3.0, epsilon = 1e-12);
        assert_relative_eq!(a2, 1.0, epsilon = 1e-12);
        // 2.0 rad folds into [0, pi) unchanged.
        assert_relative_eq!(angle, 2.0, epsilon = 1e-12);

        // An angle past pi folds back.
        let k = KernelMatrix::from_axes(2.0 + PI, 9.0, 1.0).unwrap();
        let (_, _, angle) = k.ellipse();
        assert_relative_eq!(angle, 2.0, epsilon = 1e-10);

        // Circles have no direction; report 0 by convention.
        let k = KernelMatrix::from_axes(1.234, 4.0, 4.0).unwrap();
        let (a1, a2, angle) = k.ellipse();
        assert_relative_eq!(a1, 2.0, epsilon = 1e-12);
        assert_relative_eq!(a2, 2.0, epsilon = 1e-12);
        assert_eq!(angle, 0.0);
    }

    #[test]
    fn kernel_matrix_rejects_asymmetric_or_indefinite_input() {
        assert!(KernelMatrix::new(Matrix2::new(1.0, 0.5, -0.5, 1.0)).is_err());
        assert!(KernelMatrix::new(Matrix2::new(1.0, 2.0, 2.0, 1.0)).is_err());
        assert!(KernelMatrix::new(Matrix2::new(-1.0, 0.0, 0.0, -1.0)).is_err());
        assert!(KernelMatrix::new(Matrix2::new(2.0, 0.3, 0.3, 1.0)).is_ok());
    }
}
