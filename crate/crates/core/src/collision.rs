//! Post-collision kinematics and the quadratic operator
//! `Γ = π^{-3/4}(Γ_gain - Γ_loss)`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KsdError, Result};
use crate::kernel::KernelParams;
use crate::quadrature::{
    frame_from_axis, gauss_legendre, standard_frame, SphereRule, VelocityRule,
};
use crate::report::{Check, Report};
use crate::sampling::{chunked, in_ball, unit_vector};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionPair {
    pub v: Vec3,
    pub v_star: Vec3,
    pub v_prime: Vec3,
    pub v_star_prime: Vec3,
}

impl CollisionPair {
    pub fn momentum_defect(&self) -> f64 {
        ((self.v + self.v_star) - (self.v_prime + self.v_star_prime)).amax()
    }

    pub fn energy_defect(&self) -> f64 {
        (self.v.norm_squared() + self.v_star.norm_squared()
            - self.v_prime.norm_squared()
            - self.v_star_prime.norm_squared())
        .abs()
    }
}

/// `v' = v + ((v* - v)·ω)ω`, `v*' = v* - ((v* - v)·ω)ω` with
/// `ω = cos θ û + sin θ (cos φ e₂ + sin φ e₃)`, `û = (v* - v)/|v* - v|`,
/// `e₂ = normalize(û × a)`, `e₃ = û × e₂`, `a = x̂` unless `|û·x̂| > 0.9`,
/// then `a = ŷ`.
pub(crate) fn omega_post(v: &Vec3, vs: &Vec3, theta: f64, phi: f64) -> (Vec3, Vec3) {
    let u = (vs - v).normalize();
    let helper = if u.x.abs() > 0.9 {
        Vec3::y()
    } else {
        Vec3::x()
    };
    let e2 = u.cross(&helper).normalize();
    let e3 = u.cross(&e2);
    let omega = u * theta.cos() + (e2 * phi.cos() + e3 * phi.sin()) * theta.sin();
    let t = (vs - v).dot(&omega);
    (v + omega * t, vs - omega * t)
}

pub fn post_collision_omega(v: &Vec3, vs: &Vec3, theta: f64, phi: f64) -> Result<CollisionPair> {
    if v == vs {
        return Err(KsdError::DegenerateCollision);
    }
    let (vp, vsp) = omega_post(v, vs, theta, phi);
    Ok(CollisionPair {
        v: *v,
        v_star: *vs,
        v_prime: vp,
        v_star_prime: vsp,
    })
}

/// `v' = (v + v*)/2 + |v* - v|/2 σ`, `v*' = (v + v*)/2 - |v* - v|/2 σ`.
pub fn post_collision_sigma(v: &Vec3, vs: &Vec3, sigma: &Vec3) -> CollisionPair {
    let (vp, vsp) = sigma_post(v, vs, sigma);
    CollisionPair {
        v: *v,
        v_star: *vs,
        v_prime: vp,
        v_star_prime: vsp,
    }
}

#[inline]
fn sigma_post(v: &Vec3, vs: &Vec3, sigma: &Vec3) -> (Vec3, Vec3) {
    let mid = (v + vs) * 0.5;
    let half = 0.5 * (vs - v).norm();
    (mid + sigma * half, mid - sigma * half)
}

/// `∫_{S²} |v'(σ)|^{-1} dΣ(σ) = 8π min{1/|v + v*|, 1/|v - v*|}`.
pub fn sphere_inverse_speed_integral(v: &Vec3, vs: &Vec3) -> Result<f64> {
    let s = (v + vs).norm();
    let d = (v - vs).norm();
    if s == 0.0 && d == 0.0 {
        return Err(KsdError::DegenerateCollision);
    }
    Ok(4.0 * PI / (0.5 * s.max(d)))
}

/// Product rule on S² with polar axis `axis` whose polar cosine is graded
/// as `t = -1 + 2 s²` (Gauss-Legendre in `s`), so integrands with an
/// inverse-square-root blow-up at the south pole `-axis` stay bounded.
pub fn graded_sphere_rule(n: usize, axis: &Vec3) -> SphereRule {
    let frame = if axis.norm() > 0.0 {
        frame_from_axis(axis)
    } else {
        standard_frame()
    };
    let g = gauss_legendre(n.max(1));
    let n_phi = 2 * n.max(1);
    let dphi = 2.0 * PI / n_phi as f64;
    let mut nodes = Vec::with_capacity(g.len() * n_phi);
    let mut weights = Vec::with_capacity(g.len() * n_phi);
    for (x, w) in g.nodes.iter().zip(&g.weights) {
        let s = 0.5 * (x + 1.0);
        let t = -1.0 + 2.0 * s * s;
        let wt = 0.5 * w * 4.0 * s;
        let st = (1.0 - t * t).max(0.0).sqrt();
        for k in 0..n_phi {
            let p = k as f64 * dphi;
            nodes.push(frame[0] * (st * p.cos()) + frame[1] * (st * p.sin()) + frame[2] * t);
            weights.push(wt * dphi);
        }
    }
    SphereRule { n, nodes, weights }
}

/// Quadrature value of `∫_{S²} |v'(σ)|^{-1} dΣ` (or of `|v*'(σ)|^{-1}` when
/// `star` is set) on a graded rule whose south pole is the zero of the
/// integrand's denominator on the switch locus.
pub fn sphere_inverse_speed_quadrature(v: &Vec3, vs: &Vec3, n: usize, star: bool) -> f64 {
    let a = (v + vs) * 0.5;
    let axis = if star { -a } else { a };
    let rule = graded_sphere_rule(n, &axis);
    rule.integrate(|s| {
        let (vp, vsp) = sigma_post(v, vs, s);
        let speed = if star { vsp.norm() } else { vp.norm() };
        1.0 / speed
    })
}

/// Velocity and sphere rules used by `Γ`.
#[derive(Debug, Clone)]
pub struct GammaQuadrature {
    pub v_star: VelocityRule,
    pub sphere: SphereRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaResolution {
    pub v_max: f64,
    pub n_r: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    pub sphere_n: usize,
}

impl Default for GammaResolution {
    fn default() -> Self {
        Self {
            v_max: 8.0,
            n_r: 24,
            n_theta: 16,
            n_phi: 32,
            sphere_n: 8,
        }
    }
}

impl GammaResolution {
    pub fn doubled(self) -> Self {
        Self {
            n_r: 2 * self.n_r,
            n_theta: 2 * self.n_theta,
            n_phi: 2 * self.n_phi,
            sphere_n: 2 * self.sphere_n,
            ..self
        }
    }
}

impl GammaQuadrature {
    pub fn new(res: GammaResolution) -> Result<Self> {
        Ok(Self {
            v_star: VelocityRule::new(Vec3::zeros(), res.v_max, res.n_r, res.n_theta, res.n_phi)?,
            sphere: SphereRule::new(res.sphere_n),
        })
    }
}

/// `Cπ h₁(v) ∫ e^{-|v*|²/2} h₂(v*) |v - v*| dv*`.
pub fn gamma_loss<H1, H2>(
    params: &KernelParams,
    h1: H1,
    h2: H2,
    v: &Vec3,
    quad: &GammaQuadrature,
) -> f64
where
    H1: Fn(&Vec3) -> f64,
    H2: Fn(&Vec3) -> f64,
{
    let a = h1(v);
    if a == 0.0 {
        return 0.0;
    }
    let inner = quad
        .v_star
        .integrate(|vs| (-0.5 * vs.norm_squared()).exp() * h2(vs) * (v - vs).norm());
    params.c() * PI * a * inner
}

/// `(C/4) ∫ e^{-|v*|²/2} |v - v*| ∫_{S²} h₁(v'(σ)) h₂(v*'(σ)) dΣ(σ) dv*`.
///
/// The σ-measure carries `C/4`: with `σ = 2 cos θ ω - û` the polar angle of
/// `σ` is `2θ`, so `dΣ = 4 sin θ cos θ dθ dφ` and
/// `B dθ dφ = (C |v - v*| / 4) dΣ`.
pub fn gamma_gain<H1, H2>(
    params: &KernelParams,
    h1: H1,
    h2: H2,
    v: &Vec3,
    quad: &GammaQuadrature,
) -> f64
where
    H1: Fn(&Vec3) -> f64,
    H2: Fn(&Vec3) -> f64,
{
    let inner = quad.v_star.integrate(|vs| {
        let un = (v - vs).norm();
        if un == 0.0 {
            return 0.0;
        }
        let sphere = quad.sphere.integrate(|s| {
            let (vp, vsp) = sigma_post(v, vs, s);
            h1(&vp) * h2(&vsp)
        });
        (-0.5 * vs.norm_squared()).exp() * un * sphere
    });
    0.25 * params.c() * inner
}

/// `Γ(h₁, h₂)(v) = π^{-3/4}(Γ_gain - Γ_loss)`.
pub fn gamma<H1, H2>(params: &KernelParams, h1: H1, h2: H2, v: &Vec3, quad: &GammaQuadrature) -> f64
where
    H1: Fn(&Vec3) -> f64,
    H2: Fn(&Vec3) -> f64,
{
    let gain = gamma_gain(params, &h1, &h2, v, quad);
    let loss = gamma_loss(params, &h1, &h2, v, quad);
    PI.powf(-0.75) * (gain - loss)
}

/// Momentum/energy conservation in both parameterizations, the exact
/// kinematic special cases, and the sphere identity against quadrature.
pub fn verify_collision_identities(
    n_kinematics: usize,
    n_sphere: usize,
    sphere_n: usize,
    seed: u64,
) -> Result<Report> {
    let kin = chunked(n_kinematics, seed, |rng, count| {
        let mut worst = [0.0f64; 4];
        for _ in 0..count {
            let v = in_ball(rng, 5.0);
            let vs = in_ball(rng, 5.0);
            if v == vs {
                continue;
            }
            let theta = rng.random_range(0.0..0.5 * PI);
            let phi = rng.random_range(0.0..2.0 * PI);
            let p = post_collision_omega(&v, &vs, theta, phi).expect("distinct velocities");
            worst[0] = worst[0].max(p.momentum_defect());
            worst[1] = worst[1].max(p.energy_defect());
            let s = post_collision_sigma(&v, &vs, &unit_vector(rng));
            worst[2] = worst[2].max(s.momentum_defect());
            worst[3] = worst[3].max(s.energy_defect());
        }
        worst
    });
    let mut w = [0.0f64; 4];
    for k in kin {
        for i in 0..4 {
            w[i] = w[i].max(k[i]);
        }
    }
    let mut report = Report::new("collision");
    report.push(Check::bound(
        "omega_momentum",
        "v + v* = v' + v*' (omega form)",
        w[0],
        1e-12,
        0.0,
    ));
    report.push(Check::bound(
        "omega_energy",
        "|v|^2 + |v*|^2 = |v'|^2 + |v*'|^2 (omega form)",
        w[1],
        1e-12,
        0.0,
    ));
    report.push(Check::bound(
        "sigma_momentum",
        "v + v* = v' + v*' (sigma form)",
        w[2],
        1e-12,
        0.0,
    ));
    report.push(Check::bound(
        "sigma_energy",
        "|v|^2 + |v*|^2 = |v'|^2 + |v*'|^2 (sigma form)",
        w[3],
        1e-12,
        0.0,
    ));

    // Exact special cases.
    let v = Vec3::new(1.0, 0.0, 0.0);
    let vs = Vec3::zeros();
    let head_on = post_collision_omega(&v, &vs, 0.0, 0.0)?;
    let swap_err = (head_on.v_prime - vs)
        .amax()
        .max((head_on.v_star_prime - v).amax());
    report.push(Check::bound(
        "head_on_swap",
        "theta = 0: v' = v*, v*' = v",
        swap_err,
        0.0,
        0.0,
    ));
    let mut graze_err: f64 = 0.0;
    for (a, b) in [
        (v, vs),
        (Vec3::new(0.3, -1.2, 0.5), Vec3::new(-0.7, 0.1, 2.0)),
    ] {
        let g = post_collision_omega(&a, &b, 0.5 * PI, 1.1)?;
        graze_err =
            graze_err.max((g.v_prime - a).amax().max((g.v_star_prime - b).amax()) / (a - b).norm());
    }
    report.push(Check::bound(
        "grazing_identity",
        "theta = pi/2: v' = v, v*' = v*",
        graze_err,
        1e-15,
        0.0,
    ));

    // Sphere identity.
    let sph = chunked(
        n_sphere,
        seed ^ 0x5bd1_e995,
        |rng, count| -> Result<[f64; 3]> {
            let mut worst = [0.0f64; 3];
            for _ in 0..count {
                let v = in_ball(rng, 5.0);
                let vs = in_ball(rng, 5.0);
                let exact = sphere_inverse_speed_integral(&v, &vs)?;
                let s = (v + vs).norm();
                let d = (v - vs).norm();
                let near = s.min(d) / s.max(d) > 0.9;
                for star in [false, true] {
                    let q = sphere_inverse_speed_quadrature(&v, &vs, sphere_n, star);
                    let rel = (q - exact).abs() / exact;
                    if near {
                        worst[1] = worst[1].max(rel);
                    } else {
                        worst[0] = worst[0].max(rel);
                    }
                }
                worst[2] += near as u8 as f64;
            }
            Ok(worst)
        },
    );
    let mut sw = [0.0f64; 3];
    for r in sph {
        let r = r?;
        sw[0] = sw[0].max(r[0]);
        sw[1] = sw[1].max(r[1]);
        sw[2] += r[2];
    }
    let anchor = "int_S2 |v'(sigma)|^-1 dSigma = 8 pi min{1/|v+v*|, 1/|v-v*|}";
    report.push(Check::bound("sphere_identity", anchor, sw[0], 1e-4, 0.0));
    report.push(Check::bound(
        "sphere_identity_near_switch",
        anchor,
        sw[1],
        1e-3,
        0.0,
    ));
    let head = sphere_inverse_speed_quadrature(&Vec3::x(), &(-Vec3::x()), sphere_n, false);
    report.push(Check::identity(
        "sphere_identity_head_on",
        "v = -v*: integral = 4 pi",
        head,
        4.0 * PI,
        1e-12,
    ));
    let rest = sphere_inverse_speed_quadrature(&Vec3::x(), &Vec3::zeros(), sphere_n, false);
    report.push(Check::identity(
        "sphere_identity_at_rest",
        "v* = 0, |v| = 1: integral = 8 pi",
        rest,
        8.0 * PI,
        1e-10,
    ));
    report.note(format!(
        "{n_kinematics} collisions per parameterization; {n_sphere} sphere pairs, {} within 10% of the switch locus",
        sw[2]
    ));
    Ok(report)
}

/// `sup_{|v|<=10} (1+|v|)^{-γ} ∫ (1 + 1/|v*|) e^{-β|v*|²} |v - v*|^γ dv*`.
pub fn nonlinear_weight_integral_sup(
    gamma_exp: f64,
    beta: f64,
    res: (usize, usize, usize),
) -> Result<f64> {
    let rule = VelocityRule::new(Vec3::zeros(), 12.0, res.0, res.1, res.2)?;
    let dir = Vec3::new(0.48, 0.6, 0.64);
    let mut sup: f64 = 0.0;
    for i in 0..=20 {
        let v = dir * (0.5 * i as f64);
        let val = rule.integrate(|w| {
            let r = w.norm();
            (1.0 + 1.0 / r) * (-beta * r * r).exp() * (v - w).norm().powf(gamma_exp)
        });
        sup = sup.max(val / (1.0 + v.norm()).powf(gamma_exp));
    }
    Ok(sup)
}

/// `sup_{|v|<=10} ∫ e^{-β|v*|²} |v - v*|^{γ-1} dv*`, polar rule centered at `v`.
pub fn nonlinear_singular_integral_sup(
    gamma_exp: f64,
    beta: f64,
    res: (usize, usize, usize),
) -> Result<f64> {
    let dir = Vec3::new(0.48, 0.6, 0.64);
    let mut sup: f64 = 0.0;
    for i in 0..=20 {
        let v = dir * (0.5 * i as f64);
        let rule = VelocityRule::new(v, 12.0 + v.norm(), res.0, res.1, res.2)?;
        let val = rule
            .integrate(|w| (-beta * w.norm_squared()).exp() * (v - w).norm().powf(gamma_exp - 1.0));
        sup = sup.max(val);
    }
    Ok(sup)
}

/// Fitted constants of the two weighted velocity integrals over
/// `|v| <= 10` (with a resolution-doubling comparison) and the exact
/// pointwise check of `(1+|v|)^γ min{1, diam/|v|} <= 1 + diam`.
pub fn verify_nonlinear_integral_lemmas(
    params: &KernelParams,
    beta: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Report> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(KsdError::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let g = params.cross_section.gamma;
    let base = (24, 16, 32);
    let fine = (48, 32, 64);
    let mut report = Report::new("nonlinear_integrals");
    let a = nonlinear_weight_integral_sup(g, beta, base)?;
    let a2 = nonlinear_weight_integral_sup(g, beta, fine)?;
    report.push(Check::fitted(
        "weighted_integral_constant",
        "int (1+1/|v*|) e^{-beta|v*|^2} |v-v*|^gamma dv* <~ (1+|v|)^gamma",
        a,
        a2,
        (a / a2 - 1.0).abs() <= 0.05,
    ));
    let b = nonlinear_singular_integral_sup(g, beta, base)?;
    let b2 = nonlinear_singular_integral_sup(g, beta, fine)?;
    report.push(Check::fitted(
        "singular_integral_constant",
        "int e^{-beta|v*|^2} |v-v*|^(gamma-1) dv* <~ 1",
        b,
        b2,
        (b / b2 - 1.0).abs() <= 0.05,
    ));
    let worst = chunked(n_samples, seed, |rng, count| {
        let mut worst: f64 = 0.0;
        for _ in 0..count {
            let speed: f64 = rng.random_range(0.0..20.0);
            let diam: f64 = rng.random_range(0.0..10.0);
            let lhs = (1.0 + speed).powf(g)
                * if speed > 0.0 {
                    (diam / speed).min(1.0)
                } else {
                    1.0
                };
            worst = worst.max(lhs / (1.0 + diam));
        }
        worst
    })
    .into_iter()
    .fold(0.0f64, f64::max);
    report.push(Check::bound(
        "speed_diameter_bound",
        "(1+|v|)^gamma min{1, diam/|v|} <= 1 + diam",
        worst,
        1.0,
        1e-15,
    ));
    Ok(report)
}
