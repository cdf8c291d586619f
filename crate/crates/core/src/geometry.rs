//! Balls and axis-aligned ellipsoids: backward characteristics, boundary
//! distance, and sampled checks of the sphere-condition estimates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KsdError, Result};
use crate::quadrature::{line_quadrature_singular, SingularEnds};
use crate::report::{Check, Report};
use crate::sampling::{chunked, unit_vector};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Ball,
    Ellipsoid,
}

/// Convex domain with semiaxes `a >= b >= c` along the coordinate axes.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub center: Vec3,
    pub semiaxes: [f64; 3],
    /// Radius `R` of the uniform circumscribed sphere condition.
    pub circumscribed_radius: f64,
    /// Radius `r` of the uniform interior sphere condition.
    pub interior_radius: f64,
    pub diameter: f64,
}

/// Backward characteristic from `(x, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayTrace {
    pub tau: f64,
    pub q: Vec3,
    pub normal: Vec3,
    /// `N(x, v) = -n(q) · v/|v|`, clamped to `[0, 1]`.
    pub n_factor: f64,
}

/// Relative distance (in units of the diameter) within which a point is
/// treated as lying on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-12;

impl DomainSpec {
    pub fn ball(center: Vec3, radius: f64) -> Result<Self> {
        Self::new(DomainKind::Ball, center, [radius; 3])
    }

    pub fn ellipsoid(center: Vec3, semiaxes: [f64; 3]) -> Result<Self> {
        Self::new(DomainKind::Ellipsoid, center, semiaxes)
    }

    pub fn new(kind: DomainKind, center: Vec3, semiaxes: [f64; 3]) -> Result<Self> {
        let [a, b, c] = semiaxes;
        if !(semiaxes.iter().all(|s| s.is_finite() && *s > 0.0)) {
            return Err(KsdError::InvalidDomain(format!(
                "semiaxes must be positive, got {semiaxes:?}"
            )));
        }
        if !(a >= b && b >= c) {
            return Err(KsdError::InvalidDomain(format!(
                "semiaxes must satisfy a >= b >= c, got {semiaxes:?}"
            )));
        }
        if kind == DomainKind::Ball && !(a == b && b == c) {
            return Err(KsdError::InvalidDomain(
                "a ball needs three equal semiaxes".into(),
            ));
        }
        if !center.iter().all(|x| x.is_finite()) {
            return Err(KsdError::InvalidDomain("center must be finite".into()));
        }
        let dom = Self {
            kind,
            center,
            semiaxes,
            circumscribed_radius: a * a / c,
            interior_radius: c * c / a,
            diameter: 2.0 * a,
        };
        let violation = dom.sphere_condition_violation(64);
        if violation > 1e-10 * dom.circumscribed_radius {
            return Err(KsdError::InvalidDomain(format!(
                "sphere conditions fail by {violation:e} on sampled boundary points"
            )));
        }
        Ok(dom)
    }

    pub fn unit_ball() -> Self {
        Self::ball(Vec3::zeros(), 1.0).unwrap()
    }

    /// Largest sampled violation of the two sphere conditions: every
    /// boundary point lies in `B(z - R n(z), R)` and `B(z - r n(z), r)` lies
    /// in the closed domain.
    pub fn sphere_condition_violation(&self, n: usize) -> f64 {
        let dirs = fibonacci_sphere(n);
        let pts: Vec<Vec3> = dirs.iter().map(|d| self.boundary_point(d)).collect();
        let big = self.circumscribed_radius;
        let small = self.interior_radius;
        let mut worst: f64 = 0.0;
        for z in &pts {
            let nz = self.outward_normal(z);
            let outer_c = z - nz * big;
            let inner_c = z - nz * small;
            for w in &pts {
                worst = worst.max((w - outer_c).norm() - big);
            }
            for d in &dirs {
                let p = inner_c + d * small;
                // Distance-like excess of the level set along the semiaxes.
                let excess = (self.normalized(&p).norm() - 1.0) * self.semiaxes[2];
                worst = worst.max(excess);
            }
        }
        worst
    }

    /// `((x - c)_i / a_i)_i`: the domain is the unit ball in these coordinates.
    #[inline]
    pub fn normalized(&self, x: &Vec3) -> Vec3 {
        let p = x - self.center;
        Vec3::new(
            p.x / self.semiaxes[0],
            p.y / self.semiaxes[1],
            p.z / self.semiaxes[2],
        )
    }

    #[inline]
    fn scaled_dir(&self, v: &Vec3) -> Vec3 {
        Vec3::new(
            v.x / self.semiaxes[0],
            v.y / self.semiaxes[1],
            v.z / self.semiaxes[2],
        )
    }

    /// Tolerance on `|y| - 1` matching `BOUNDARY_TOL · diam` in distance.
    #[inline]
    fn level_tol(&self) -> f64 {
        BOUNDARY_TOL * self.diameter / self.semiaxes[2]
    }

    /// `|y| - 1` in normalized coordinates, after the outside check.
    fn checked_level(&self, x: &Vec3) -> Result<(Vec3, f64)> {
        let y = self.normalized(x);
        let s = y.norm() - 1.0;
        if !s.is_finite() || s > self.level_tol() {
            return Err(KsdError::OutsideDomain);
        }
        Ok((y, s))
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.normalized(x).norm() - 1.0 <= self.level_tol()
    }

    pub fn on_boundary(&self, x: &Vec3) -> bool {
        (self.normalized(x).norm() - 1.0).abs() <= self.level_tol()
    }

    /// Point `c + a ∘ dir` for a unit `dir`.
    pub fn boundary_point(&self, dir: &Vec3) -> Vec3 {
        let d = dir.normalize();
        self.center
            + Vec3::new(
                d.x * self.semiaxes[0],
                d.y * self.semiaxes[1],
                d.z * self.semiaxes[2],
            )
    }

    /// Outward unit normal of the level set through `z`.
    pub fn outward_normal(&self, z: &Vec3) -> Vec3 {
        let p = z - self.center;
        let [a, b, c] = self.semiaxes;
        Vec3::new(p.x / (a * a), p.y / (b * b), p.z / (c * c)).normalize()
    }

    /// Backward exit time `τ = inf{s >= 0 : x - s v ∉ Ω}`; zero for boundary
    /// points.
    pub fn exit_time(&self, x: &Vec3, v: &Vec3) -> Result<f64> {
        if v.norm_squared() == 0.0 {
            return Err(KsdError::ZeroVelocity);
        }
        let (y, s) = self.checked_level(x)?;
        if s >= -self.level_tol() {
            return Ok(0.0);
        }
        Ok(self.backward_root(&y, s, v))
    }

    /// Positive root of `|y - s w|² = 1` with `w = v/a`. Points within the
    /// boundary tolerance are put on the level set, otherwise rounding in
    /// `|y|² - 1` dominates the root for near-grazing directions.
    fn backward_root(&self, y: &Vec3, level: f64, v: &Vec3) -> f64 {
        let w = self.scaled_dir(v);
        let qa = w.norm_squared();
        let b = y.dot(&w);
        let c0 = if level >= -self.level_tol() {
            0.0
        } else {
            (y.norm_squared() - 1.0).min(0.0)
        };
        let disc = (b * b - qa * c0).max(0.0).sqrt();
        if b >= 0.0 {
            (b + disc) / qa
        } else if disc - b > 0.0 {
            -c0 / (disc - b)
        } else {
            0.0
        }
    }

    /// Length parameter of the whole chord behind `x` along `-v`, including
    /// the case of a boundary point whose backward ray enters the domain.
    pub fn backward_chord_time(&self, x: &Vec3, v: &Vec3) -> Result<f64> {
        if v.norm_squared() == 0.0 {
            return Err(KsdError::ZeroVelocity);
        }
        let (y, s) = self.checked_level(x)?;
        Ok(self.backward_root(&y, s, v))
    }

    /// Time parameter of the far end of the chord through `x` along `+v`.
    pub fn forward_chord_time(&self, x: &Vec3, v: &Vec3) -> Result<f64> {
        if v.norm_squared() == 0.0 {
            return Err(KsdError::ZeroVelocity);
        }
        let (y, s) = self.checked_level(x)?;
        Ok(self.backward_root(&y, s, &(-v)))
    }

    pub fn backward_exit_point(&self, x: &Vec3, v: &Vec3) -> Result<Vec3> {
        Ok(x - v * self.exit_time(x, v)?)
    }

    /// `q⁺(x, v)`: where the line through `x` leaves the domain along `+v`.
    /// For a boundary point on the incoming side this is the opposite end
    /// of the chord.
    pub fn forward_exit_point(&self, x: &Vec3, v: &Vec3) -> Result<Vec3> {
        Ok(x + v * self.forward_chord_time(x, v)?)
    }

    pub fn trace(&self, x: &Vec3, v: &Vec3) -> Result<RayTrace> {
        let tau = self.exit_time(x, v)?;
        let q = x - v * tau;
        let normal = self.outward_normal(&q);
        let n_factor = (-normal.dot(v) / v.norm()).clamp(0.0, 1.0);
        Ok(RayTrace {
            tau,
            q,
            normal,
            n_factor,
        })
    }

    /// `N(x, v)`.
    pub fn boundary_angle_factor(&self, x: &Vec3, v: &Vec3) -> Result<f64> {
        Ok(self.trace(x, v)?.n_factor)
    }

    /// Euclidean distance from `x` to the boundary.
    pub fn boundary_distance(&self, x: &Vec3) -> Result<f64> {
        let (_, s) = self.checked_level(x)?;
        if s >= -self.level_tol() {
            return Ok(0.0);
        }
        match self.kind {
            DomainKind::Ball => Ok((self.semiaxes[0] - (x - self.center).norm()).max(0.0)),
            DomainKind::Ellipsoid => Ok(ellipsoid_distance(self.semiaxes, &(x - self.center))),
        }
    }

    /// `∫_0^{|q - x|} d(x - s v/|v|)^{-1/2} ds` over the backward chord
    /// (the whole chord when `x` is a boundary point). Panels are doubled
    /// until successive estimates agree to `1e-9` relative.
    pub fn chord_inverse_sqrt_integral(&self, x: &Vec3, v: &Vec3) -> Result<f64> {
        let t = self.backward_chord_time(x, v)?;
        let speed = v.norm();
        let len = t * speed;
        if len <= 0.0 {
            return Ok(0.0);
        }
        let dir = v / speed;
        let integrand = |s: f64| {
            let p = x - dir * s;
            let d = match self.kind {
                DomainKind::Ball => (self.semiaxes[0] - (p - self.center).norm()).max(0.0),
                DomainKind::Ellipsoid => ellipsoid_distance(self.semiaxes, &(p - self.center)),
            };
            if d > 0.0 {
                d.powf(-0.5)
            } else {
                0.0
            }
        };
        let mut panels = 2;
        let mut prev = line_quadrature_singular(integrand, len, panels, SingularEnds::Both);
        loop {
            panels *= 2;
            let next = line_quadrature_singular(integrand, len, panels, SingularEnds::Both);
            if (next - prev).abs() <= 1e-9 * next.abs() || panels >= 4096 {
                return Ok(next);
            }
            prev = next;
        }
    }

    /// Uniform sample in the domain by rejection from the bounding box.
    pub fn sample_interior<R: Rng>(&self, rng: &mut R) -> Result<Vec3> {
        for _ in 0..10_000 {
            let y = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if y.norm_squared() < 1.0 {
                return Ok(self.center
                    + Vec3::new(
                        y.x * self.semiaxes[0],
                        y.y * self.semiaxes[1],
                        y.z * self.semiaxes[2],
                    ));
            }
        }
        Err(KsdError::Sampling(
            "rejection sampling of the domain failed".into(),
        ))
    }
}

/// Roughly uniform deterministic directions.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
        })
        .collect()
}

/// Distance from an interior point `p` (centered coordinates) to the
/// ellipsoid with semiaxes `ax`.
///
/// The foot point is `z_i = a_i² p_i / (t + a_i²)` where `t ∈ (-c², 0]`
/// solves `F(t) = Σ (a_i p_i / (t + a_i²))² - 1 = 0`. When `p` has no
/// component along the shortest axes and `F(-c²) <= 0` the foot point is
/// not unique and the distance follows from `t = -c²` directly.
fn ellipsoid_distance(ax: [f64; 3], p: &Vec3) -> f64 {
    let c2 = ax[2] * ax[2];
    let shortest: Vec<bool> = ax.iter().map(|a| (a - ax[2]) <= 1e-14 * ax[0]).collect();
    let on_short: f64 = (0..3).filter(|&i| shortest[i]).map(|i| p[i] * p[i]).sum();
    if on_short <= (1e-300f64).max(0.0) {
        let mut f_lim = -1.0;
        for i in 0..3 {
            if !shortest[i] {
                f_lim += (ax[i] * p[i] / (ax[i] * ax[i] - c2)).powi(2);
            }
        }
        if f_lim <= 0.0 {
            let mut d2 = 0.0;
            let mut used = 0.0;
            for i in 0..3 {
                if !shortest[i] {
                    let a2 = ax[i] * ax[i];
                    let z = a2 * p[i] / (a2 - c2);
                    d2 += (z - p[i]).powi(2);
                    used += z * z / a2;
                }
            }
            d2 += c2 * (1.0 - used).max(0.0);
            return d2.sqrt();
        }
    }
    let f_and_df = |t: f64| {
        let mut f = -1.0;
        let mut df = 0.0;
        for i in 0..3 {
            let a2 = ax[i] * ax[i];
            let q = ax[i] * p[i] / (t + a2);
            f += q * q;
            df -= 2.0 * q * q / (t + a2);
        }
        (f, df)
    };
    let mut lo = -c2;
    let mut hi = 0.0;
    let mut t = 0.0;
    for _ in 0..300 {
        let (f, df) = f_and_df(t);
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        if f.abs() < 1e-15 {
            break;
        }
        let mut next = t - f / df;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-17 * c2 || hi - lo <= 1e-16 * c2 {
            t = next;
            break;
        }
        t = next;
    }
    let mut d2 = 0.0;
    for i in 0..3 {
        let a2 = ax[i] * ax[i];
        let z = a2 * p[i] / (t + a2);
        d2 += (z - p[i]).powi(2);
    }
    d2.sqrt()
}

#[derive(Default, Clone, Copy)]
struct GeometryMaxima {
    distance_ratio: f64,
    chord_ratio_boundary: f64,
    chord_ratio_interior: f64,
    integral_ratio: f64,
    integral_samples: usize,
}

/// Speeds in verification suites are drawn from this range.
pub const SPEED_RANGE: (f64, f64) = (0.1, 5.0);

/// Samples kept for the chord-integral fit; each needs an adaptive
/// quadrature.
pub const INTEGRAL_SAMPLE_CAP: usize = 2000;

/// Sampled check of
/// * `d_x <= R N(x, v)²` (explicit constant 1),
/// * `|x - q⁺(x, v)| <= 2 R N(x, v)` on incoming boundary pairs and on
///   interior pairs (explicit constant 2),
/// * `∫_0^τ d(x - t v)^{-1/2} dt <= C (r^{1/2}/|v|)(1 + R/r)` with `C` fitted.
pub fn verify_geometry_estimates(
    domain: &DomainSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Report> {
    if n_samples == 0 {
        return Err(KsdError::Sampling("n_samples must be at least 1".into()));
    }
    let big_r = domain.circumscribed_radius;
    let small_r = domain.interior_radius;
    let per_chunk = chunked(
        n_samples,
        seed,
        |rng, count| -> Result<(GeometryMaxima, usize)> {
            let mut m = GeometryMaxima::default();
            for _ in 0..count {
                let x = domain.sample_interior(rng)?;
                let dir = unit_vector(rng);
                let speed = rng.random_range(SPEED_RANGE.0..SPEED_RANGE.1);
                let v = dir * speed;
                let tr = domain.trace(&x, &v)?;
                if tr.n_factor > 0.0 {
                    let d = domain.boundary_distance(&x)?;
                    m.distance_ratio = m
                        .distance_ratio
                        .max(d / (big_r * tr.n_factor * tr.n_factor));
                    let qp = domain.forward_exit_point(&x, &v)?;
                    m.chord_ratio_interior = m
                        .chord_ratio_interior
                        .max((x - qp).norm() / (2.0 * big_r * tr.n_factor));
                }
                // Incoming boundary pair.
                let z = domain.boundary_point(&unit_vector(rng));
                let nz = domain.outward_normal(&z);
                let mut u = unit_vector(rng);
                if nz.dot(&u) > 0.0 {
                    u = -u;
                }
                let n_in = -nz.dot(&u);
                if n_in > 0.0 {
                    let qp = domain.forward_exit_point(&z, &(u * speed))?;
                    m.chord_ratio_boundary = m
                        .chord_ratio_boundary
                        .max((z - qp).norm() / (2.0 * big_r * n_in));
                }
            }
            Ok((m, count))
        },
    );
    let mut total = GeometryMaxima::default();
    let mut seen = 0;
    for r in per_chunk {
        let (m, c) = r?;
        total.distance_ratio = total.distance_ratio.max(m.distance_ratio);
        total.chord_ratio_boundary = total.chord_ratio_boundary.max(m.chord_ratio_boundary);
        total.chord_ratio_interior = total.chord_ratio_interior.max(m.chord_ratio_interior);
        seen += c;
    }

    let n_int = n_samples.min(INTEGRAL_SAMPLE_CAP);
    let integral = chunked(
        n_int,
        seed ^ 0x9e37_79b9_7f4a_7c15,
        |rng, count| -> Result<f64> {
            let mut worst: f64 = 0.0;
            for _ in 0..count {
                let x = domain.sample_interior(rng)?;
                let v = unit_vector(rng) * rng.random_range(SPEED_RANGE.0..SPEED_RANGE.1);
                let lhs = domain.chord_inverse_sqrt_integral(&x, &v)? / v.norm();
                let rhs = small_r.sqrt() / v.norm() * (1.0 + big_r / small_r);
                worst = worst.max(lhs / rhs);
            }
            Ok(worst)
        },
    );
    for r in integral {
        total.integral_ratio = total.integral_ratio.max(r?);
    }
    total.integral_samples = n_int;

    let mut report = Report::new("geometry");
    report.push(Check::bound(
        "distance_vs_angle_factor",
        "d_x <= R N(x,v)^2",
        total.distance_ratio,
        1.0,
        1e-8,
    ));
    report.push(Check::bound(
        "forward_chord_boundary",
        "|x - q+(x,v)| <= 2 R N(x,v) for x on the incoming boundary",
        total.chord_ratio_boundary,
        1.0,
        1e-8,
    ));
    report.push(Check::bound(
        "forward_chord_interior",
        "|x - q+(x,v)| <= 2 R N(x,v) for interior x",
        total.chord_ratio_interior,
        1.0,
        1e-8,
    ));
    report.push(Check::fitted(
        "chord_inverse_sqrt_integral",
        "int_0^tau d_{x-tv}^{-1/2} dt <= C (r^{1/2}/|v|)(1 + R/r)",
        total.integral_ratio,
        1.0,
        true,
    ));
    report.note(format!(
        "{seen} interior and {seen} incoming-boundary samples; chord integral fitted on {} samples",
        total.integral_samples
    ));
    Ok(report)
}
