//! Ground-truth 2D world model: walls as line segments, point mirroring,
//! single-bounce specular ray tracing and reflective-surface-point (RSP)
//! conversions.
//!
//! All geometry is planar and single-bounce: a specular reflector is fully
//! described by the virtual anchor (VA) obtained by mirroring a physical
//! anchor (PA) across the wall line.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::SPEED_OF_LIGHT;

pub type Point2 = nalgebra::Point2<f64>;

/// Walls shorter than this are rejected as degenerate.
pub const MIN_WALL_LENGTH: f64 = 1e-9;
/// Endpoint grazing within this distance counts as unblocked.
pub const GRAZE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct WallSegment {
    pub a: Point2,
    pub b: Point2,
    pub id: String,
}

impl WallSegment {
    pub fn new(id: impl Into<String>, a: Point2, b: Point2) -> Result<Self> {
        if (b - a).norm() <= MIN_WALL_LENGTH {
            return Err(Error::InvalidGeometry(format!(
                "wall segment shorter than {MIN_WALL_LENGTH} m"
            )));
        }
        Ok(Self { a, b, id: id.into() })
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    /// Unit direction a -> b.
    pub fn direction(&self) -> Vector2<f64> {
        (self.b - self.a).normalize()
    }

    /// Unit normal (direction rotated +90 degrees).
    pub fn normal(&self) -> Vector2<f64> {
        let d = self.direction();
        Vector2::new(-d.y, d.x)
    }

    /// Signed distance of `p` from the infinite wall line.
    pub fn signed_distance(&self, p: &Point2) -> f64 {
        self.normal().dot(&(p - self.a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AaRect {
    pub min: Point2,
    pub max: Point2,
}

impl AaRect {
    pub fn new(min: Point2, max: Point2) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }
}

#[derive(Debug, Clone)]
pub struct Environment {
    pub walls: Vec<WallSegment>,
    pub pas: Vec<(String, Point2)>,
    pub scatterers: Vec<(String, Point2)>,
    pub bounds: AaRect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualAnchor {
    pub position: Point2,
    pub pa_id: String,
    pub wall_id: String,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        for (id, p) in self.pas.iter().chain(self.scatterers.iter()) {
            if !self.bounds.contains(p) {
                violations.push(format!("feature {id} at ({}, {}) outside bounds", p.x, p.y));
            }
        }
        let mut ids: Vec<&str> = self.walls.iter().map(|w| w.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.walls.len() {
            violations.push("duplicate wall ids".into());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(violations))
        }
    }

    /// All virtual anchors of the environment (every PA mirrored across
    /// every wall line).
    pub fn virtual_anchors(&self) -> Vec<VirtualAnchor> {
        let mut vas = Vec::new();
        for (pa_id, pa) in &self.pas {
            for w in &self.walls {
                if let Ok(position) = mirror_point(pa, w) {
                    vas.push(VirtualAnchor {
                        position,
                        pa_id: pa_id.clone(),
                        wall_id: w.id.clone(),
                    });
                }
            }
        }
        vas
    }

    /// True if the open segment p–q strictly crosses any wall other than
    /// the excluded ones. Grazing a wall endpoint (within [`GRAZE_TOL`])
    /// does not block.
    pub fn blocked(&self, p: &Point2, q: &Point2, exclude: &[&str]) -> bool {
        self.walls
            .iter()
            .filter(|w| !exclude.contains(&w.id.as_str()))
            .any(|w| segments_strictly_cross(p, q, &w.a, &w.b))
    }
}

/// Strict interior crossing of segments p–q and a–b, with a metric grazing
/// tolerance at all four endpoints.
fn segments_strictly_cross(p: &Point2, q: &Point2, a: &Point2, b: &Point2) -> bool {
    let r = q - p;
    let s = b - a;
    let denom = r.x * s.y - r.y * s.x;
    if denom.abs() < 1e-15 {
        return false; // parallel: grazing along the line does not block
    }
    let ap = a - p;
    let t = (ap.x * s.y - ap.y * s.x) / denom;
    let u = (ap.x * r.y - ap.y * r.x) / denom;
    let eps_t = GRAZE_TOL / r.norm();
    let eps_u = GRAZE_TOL / s.norm();
    t > eps_t && t < 1.0 - eps_t && u > eps_u && u < 1.0 - eps_u
}

/// Reflect `p` across the infinite line through wall `w`.
pub fn mirror_point(p: &Point2, w: &WallSegment) -> Result<Point2> {
    if w.length() <= MIN_WALL_LENGTH {
        return Err(Error::InvalidGeometry("degenerate wall".into()));
    }
    let n = w.normal();
    let d = n.dot(&(p - w.a));
    Ok(p - 2.0 * d * n)
}

/// Specular single-bounce path UE -> wall -> PA.
///
/// Returns the bounce point and total path length when the bounce point
/// lies within the segment and both legs are unoccluded by `other_walls`.
/// The path length equals |ue - mirror(pa, w)|.
pub fn trace_specular_path(
    ue: &Point2,
    pa: &Point2,
    w: &WallSegment,
    env: Option<&Environment>,
) -> Option<(Point2, f64)> {
    let du = w.signed_distance(ue);
    let dp = w.signed_distance(pa);
    // Opposite sides (or on the line): no specular bounce.
    if du * dp <= 0.0 {
        return None;
    }
    let va = mirror_point(pa, w).ok()?;
    // Bounce point: intersection of ue–va with the wall line.
    let ray = va - ue;
    let denom = w.normal().dot(&ray);
    if denom.abs() < 1e-15 {
        return None;
    }
    // Solve n . (ue + t*ray - a) = 0 for t.
    let t = -w.signed_distance(ue) / denom;
    if !(0.0..=1.0).contains(&t) {
        return None;
    }
    let bounce = ue + t * ray;
    // Within the finite segment?
    let s = (bounce - w.a).dot(&w.direction());
    if s < -GRAZE_TOL || s > w.length() + GRAZE_TOL {
        return None;
    }
    if let Some(env) = env {
        let excl = [w.id.as_str()];
        if env.blocked(ue, &bounce, &excl) || env.blocked(&bounce, pa, &excl) {
            return None;
        }
    }
    Some((bounce, (va - ue).norm()))
}

/// Reflective surface point from an echo: UE position, beam azimuth and
/// round-trip time.
pub fn rsp_from_echo(ue: &Point2, beam_azimuth: f64, round_trip_time: f64) -> Result<Point2> {
    if round_trip_time <= 0.0 {
        return Err(Error::InvalidMeasurement(
            "round-trip time must be positive".into(),
        ));
    }
    let d = SPEED_OF_LIGHT * round_trip_time / 2.0;
    Ok(ue + d * Vector2::new(beam_azimuth.cos(), beam_azimuth.sin()))
}

/// A fitted infinite line in normal form n(phi) . p = offset, with the
/// clipped segment spanned by the input points and the covariance of
/// (phi, offset).
#[derive(Debug, Clone)]
pub struct LineFit {
    /// Angle of the line normal.
    pub normal_angle: f64,
    /// Signed offset along the normal.
    pub offset: f64,
    pub segment: WallSegment,
    /// Covariance of (normal_angle, offset).
    pub covariance: Matrix2<f64>,
}

impl LineFit {
    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(self.normal_angle.cos(), self.normal_angle.sin())
    }

    /// Orthogonal distance of `p` from the fitted line.
    pub fn distance(&self, p: &Point2) -> f64 {
        (self.normal().dot(&p.coords) - self.offset).abs()
    }
}

/// Total-least-squares line parameters (normal angle, offset) for a point
/// cloud. Returns None when the spread is degenerate.
fn tls_line(points: &[Point2]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    let c = points
        .iter()
        .fold(Vector2::zeros(), |acc, p| acc + p.coords)
        / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for p in points {
        let d = p.coords - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    // Principal direction of the scatter matrix; the normal is the minor
    // eigenvector, with angle from the analytic 2x2 eigendecomposition.
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy); // major axis angle
    let spread = {
        let tr = sxx + syy;
        let det = sxx * syy - sxy * sxy;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        (tr / 2.0 + disc).max(0.0)
    };
    if (spread / n).sqrt() < 1e-6 {
        return None;
    }
    let mut phi = crate::wrap_angle(theta + std::f64::consts::FRAC_PI_2);
    // Stable sign convention: keep the normal in the upper half plane.
    if phi <= -std::f64::consts::FRAC_PI_2 || phi > std::f64::consts::FRAC_PI_2 {
        phi = crate::wrap_angle(phi + std::f64::consts::PI);
    }
    let nvec = Vector2::new(phi.cos(), phi.sin());
    Some((phi, nvec.dot(&c)))
}

/// Total-least-squares wall fit from RSPs with covariances.
///
/// The segment extent is clipped to the span of the projected inputs; the
/// line covariance propagates the per-point covariances through the fit by
/// first-order (numeric) differentiation.
pub fn wall_from_rsps(rsps: &[(Point2, Matrix2<f64>)]) -> Result<LineFit> {
    if rsps.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "wall fit needs at least 2 RSPs, got {}",
            rsps.len()
        )));
    }
    let pts: Vec<Point2> = rsps.iter().map(|(p, _)| *p).collect();
    let (phi, offset) =
        tls_line(&pts).ok_or_else(|| Error::DegenerateFit("RSP spread below 1e-6 m".into()))?;
    let nvec = Vector2::new(phi.cos(), phi.sin());
    let dir = Vector2::new(-nvec.y, nvec.x);
    // Feet of perpendiculars, clipped to the projected span.
    let t: Vec<f64> = pts.iter().map(|p| dir.dot(&p.coords)).collect();
    let (tmin, tmax) = t
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let base = Point2::from(offset * nvec);
    let seg = WallSegment::new("fit", base + tmin * dir, base + tmax * dir)?;

    // Numeric Jacobian of (phi, offset) w.r.t. each input point.
    let h = 1e-6;
    let mut cov = Matrix2::zeros();
    let mut work = pts.clone();
    for (k, (_, pk_cov)) in rsps.iter().enumerate() {
        let mut jac = Matrix2::zeros(); // d(phi, offset)/d(x_k, y_k)
        for axis in 0..2 {
            let orig = work[k];
            work[k][axis] = orig[axis] + h;
            let (pp, dp) = tls_line(&work)
                .ok_or_else(|| Error::DegenerateFit("perturbed fit degenerate".into()))?;
            work[k][axis] = orig[axis] - h;
            let (pm, dm) = tls_line(&work)
                .ok_or_else(|| Error::DegenerateFit("perturbed fit degenerate".into()))?;
            work[k] = orig;
            jac[(0, axis)] = crate::wrap_angle(pp - pm) / (2.0 * h);
            jac[(1, axis)] = (dp - dm) / (2.0 * h);
        }
        cov += jac * pk_cov * jac.transpose();
    }
    Ok(LineFit {
        normal_angle: phi,
        offset,
        segment: seg,
        covariance: cov,
    })
}
