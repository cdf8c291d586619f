//! Collision frequency, the hard-sphere Grad kernel `k = k₂ - k₁` and the
//! sampled checks of its decay bounds.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collision::omega_post;
use crate::error::{KsdError, Result};
use crate::quadrature::{frame_from_axis, gauss_legendre, VelocityRule};
use crate::report::{Check, Report};
use crate::sampling::{chunked, in_ball, unit_vector};
use crate::Vec3;

/// `B(|u|, θ) = C |u|^γ sin θ cos θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossSection {
    #[serde(rename = "C")]
    pub c: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub cross_section: CrossSection,
    /// Decay-bound parameter in the kernel envelope.
    pub rho: f64,
    /// Gaussian weight exponent of the norms.
    pub alpha: f64,
}

impl KernelParams {
    pub fn hard_sphere(c: f64) -> Self {
        Self {
            cross_section: CrossSection { c, gamma: 1.0 },
            rho: 0.0,
            alpha: 0.25,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let CrossSection { c, gamma } = self.cross_section;
        if !(c >= 0.0 && c.is_finite()) {
            return Err(KsdError::InvalidParameter(format!(
                "C must be non-negative, got {c}"
            )));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(KsdError::InvalidParameter(format!(
                "gamma must lie in [0, 1], got {gamma}"
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(KsdError::InvalidParameter(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha < 0.5 * (1.0 - self.rho)) {
            return Err(KsdError::InvalidParameter(format!(
                "alpha must lie in [0, (1 - rho)/2), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Closed forms exist only for hard spheres.
    pub fn require_exact(&self) -> Result<()> {
        if self.cross_section.gamma != 1.0 {
            return Err(KsdError::BoundsOnlyMode);
        }
        Ok(())
    }

    pub fn c(&self) -> f64 {
        self.cross_section.c
    }

    /// Coefficient of `k₁ = c₁ |u| exp(-(|v|² + |v*|²)/2)`.
    pub fn c1(&self) -> f64 {
        self.c() / PI.sqrt()
    }

    /// Coefficient of `k₂ = c₂ |u|^{-1} exp(-|u|²/4 - (D/|u|)²/4)`.
    pub fn c2(&self) -> f64 {
        2.0 * self.c() / PI.sqrt()
    }
}

/// `M(v) = π^{-3/2} e^{-|v|²}`.
pub fn maxwellian(v: &Vec3) -> f64 {
    PI.powf(-1.5) * (-v.norm_squared()).exp()
}

/// `M(v)^{1/2}`.
pub fn sqrt_maxwellian(v: &Vec3) -> f64 {
    PI.powf(-0.75) * (-0.5 * v.norm_squared()).exp()
}

/// Hard-sphere `ν` as a function of `a = |v|` with cross-section constant `c`.
pub fn nu_radial(c: f64, a: f64) -> f64 {
    if a < 1e-3 {
        let a2 = a * a;
        return c * PI.sqrt() * (2.0 + a2 * (2.0 / 3.0 - a2 / 15.0));
    }
    c * PI * ((a + 0.5 / a) * libm::erf(a) + (-a * a).exp() / PI.sqrt())
}

/// `dν/da` for the hard-sphere closed form.
pub fn nu_radial_derivative(c: f64, a: f64) -> f64 {
    if a < 1e-3 {
        let a2 = a * a;
        return c * PI.sqrt() * a * (4.0 / 3.0 - 4.0 * a2 / 15.0);
    }
    c * PI * ((1.0 - 0.5 / (a * a)) * libm::erf(a) + (-a * a).exp() / (a * PI.sqrt()))
}

/// `ν(v) = Cπ ∫ M(v*) |v - v*| dv*` in closed form.
pub fn collision_frequency(params: &KernelParams, v: &Vec3) -> Result<f64> {
    params.require_exact()?;
    Ok(nu_radial(params.c(), v.norm()))
}

pub fn collision_frequency_gradient(params: &KernelParams, v: &Vec3) -> Result<Vec3> {
    params.require_exact()?;
    let a = v.norm();
    if a == 0.0 {
        return Ok(Vec3::zeros());
    }
    Ok(v * (nu_radial_derivative(params.c(), a) / a))
}

/// `Cπ ∫ M(v*) |v - v*|^γ dv*` by a polar rule centered at `v`; valid for
/// every `γ` (the bounds-only path).
pub fn collision_frequency_quadrature(
    params: &KernelParams,
    v: &Vec3,
    n_r: usize,
    n_theta: usize,
    n_phi: usize,
) -> f64 {
    let gamma = params.cross_section.gamma;
    let radius = v.norm() + 9.0;
    let rule = VelocityRule::oriented(
        *v,
        radius,
        n_r,
        n_theta,
        n_phi,
        frame_from_axis(&nonzero_axis(v)),
        0.0,
    )
    .expect("valid rule");
    params.c() * PI * rule.integrate(|w| maxwellian(w) * (w - v).norm().powf(gamma))
}

fn nonzero_axis(v: &Vec3) -> Vec3 {
    if v.norm() > 0.0 {
        *v
    } else {
        Vec3::z()
    }
}

/// `(k₁, k₂)` at `(v, v*)`.
#[inline]
pub fn grad_kernel_parts(params: &KernelParams, v: &Vec3, vs: &Vec3) -> (f64, f64) {
    let u = v - vs;
    let un2 = u.norm_squared();
    let un = un2.sqrt();
    let vv = v.norm_squared();
    let ww = vs.norm_squared();
    let d = vv - ww;
    let k1 = params.c1() * un * (-0.5 * (vv + ww)).exp();
    let k2 = params.c2() / un * (-0.25 * un2 - 0.25 * d * d / un2).exp();
    (k1, k2)
}

/// Grad kernel `k(v, v*) = k₂ - k₁`.
pub fn grad_kernel(params: &KernelParams, v: &Vec3, vs: &Vec3) -> Result<f64> {
    params.require_exact()?;
    if v == vs {
        return Err(KsdError::KernelDiagonal);
    }
    let (k1, k2) = grad_kernel_parts(params, v, vs);
    Ok(k2 - k1)
}

/// Kernel value without argument checks, for hot loops that already
/// exclude the diagonal.
#[inline]
pub fn grad_kernel_unchecked(params: &KernelParams, v: &Vec3, vs: &Vec3) -> f64 {
    let (k1, k2) = grad_kernel_parts(params, v, vs);
    k2 - k1
}

/// Analytic `∇_v k(v, v*)`.
pub fn grad_kernel_gradient(params: &KernelParams, v: &Vec3, vs: &Vec3) -> Result<Vec3> {
    params.require_exact()?;
    if v == vs {
        return Err(KsdError::KernelDiagonal);
    }
    Ok(grad_kernel_gradient_unchecked(params, v, vs))
}

#[inline]
pub fn grad_kernel_gradient_unchecked(params: &KernelParams, v: &Vec3, vs: &Vec3) -> Vec3 {
    let (k1, k2) = grad_kernel_parts(params, v, vs);
    let u = v - vs;
    let un2 = u.norm_squared();
    let d = v.norm_squared() - vs.norm_squared();
    let g2 = -u / un2 - 0.5 * u - v * (d / un2) + u * (0.5 * d * d / (un2 * un2));
    let g1 = u / un2 - v;
    g2 * k2 - g1 * k1
}

/// Exponent shared by the decay envelopes:
/// `-(1-ρ)/4 (|u|² + ((|v|² - |v*|²)/|u|)²)`.
fn envelope_exponent(v: &Vec3, vs: &Vec3, rho: f64) -> f64 {
    let u = v - vs;
    let un2 = u.norm_squared();
    let d = v.norm_squared() - vs.norm_squared();
    -0.25 * (1.0 - rho) * (un2 + d * d / un2)
}

/// Right side of the pointwise kernel bound without its constant.
pub fn kernel_envelope(v: &Vec3, vs: &Vec3, rho: f64, gamma: f64) -> f64 {
    let un = (v - vs).norm();
    envelope_exponent(v, vs, rho).exp() / (un * (1.0 + v.norm() + vs.norm()).powf(1.0 - gamma))
}

/// Right side of the pointwise kernel-gradient bound without its constant.
pub fn kernel_gradient_envelope(v: &Vec3, vs: &Vec3, rho: f64, gamma: f64) -> f64 {
    let un2 = (v - vs).norm_squared();
    (1.0 + v.norm()) * envelope_exponent(v, vs, rho).exp()
        / (un2 * (1.0 + v.norm() + vs.norm()).powf(1.0 - gamma))
}

/// Both sides of the exact identity
/// `exp(-(1-ρ)/4 (|u|² + (D/|u|)²)) = e^{-α|v|²} e^{-(1-ρ+2α)(1-ρ-2α)/(4(1-ρ)) |u|²}
///   e^{-(1-ρ)(v·u/|u| - (1-ρ+2α)/(2(1-ρ)) |u|)²} e^{α|v*|²}`, `u = v - v*`.
pub fn key_identity_sides(v: &Vec3, vs: &Vec3, alpha: f64, rho: f64) -> (f64, f64) {
    let lhs = envelope_exponent(v, vs, rho).exp();
    let u = v - vs;
    let un = u.norm();
    let s = 1.0 - rho;
    let shift = v.dot(&u) / un - (s + 2.0 * alpha) / (2.0 * s) * un;
    let rhs = (-alpha * v.norm_squared()).exp()
        * (-(s + 2.0 * alpha) * (s - 2.0 * alpha) / (4.0 * s) * un * un).exp()
        * (-s * shift * shift).exp()
        * (alpha * vs.norm_squared()).exp();
    (lhs, rhs)
}

/// Resolution of the polar rules used for velocity integrals of `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentResolution {
    pub n_r: usize,
    pub n_theta: usize,
    pub n_phi: usize,
}

impl Default for MomentResolution {
    fn default() -> Self {
        Self {
            n_r: 24,
            n_theta: 16,
            n_phi: 32,
        }
    }
}

impl MomentResolution {
    pub fn doubled(self) -> Self {
        Self {
            n_r: 2 * self.n_r,
            n_theta: 2 * self.n_theta,
            n_phi: 2 * self.n_phi,
        }
    }
}

/// Radius beyond which `|k(v, ·)|` is below `e^{-36}` of its scale.
pub const KERNEL_REACH: f64 = 12.0;

/// C² step: 1 on `[0, 1/2]`, 0 on `[1, ∞)`.
fn bump(t: f64) -> f64 {
    if t <= 0.5 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        let s = 2.0 * (1.0 - t);
        s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

/// Integral of `f(v*)` whose only singularities are at `v* = v` (at most
/// `|v - v*|^{-2}`) and at `v* = 0` (at most `|v*|^{-1}`), split by a
/// partition of unity into an origin-centered and a `v`-centered polar
/// rule.
pub fn two_center_integral<F: Fn(&Vec3) -> f64>(v: &Vec3, res: MomentResolution, f: F) -> f64 {
    let a = v.norm();
    let MomentResolution {
        n_r,
        n_theta,
        n_phi,
    } = res;
    let axis = frame_from_axis(&nonzero_axis(v));
    let around_v = VelocityRule::oriented(*v, KERNEL_REACH, n_r, n_theta, n_phi, axis, 0.0)
        .expect("valid rule");
    if a == 0.0 {
        return around_v.integrate(&f);
    }
    if a >= 1.0 {
        let eps = (0.5 * a).min(1.0);
        let around_0 = VelocityRule::oriented(Vec3::zeros(), eps, n_r, n_theta, n_phi, axis, 0.0)
            .expect("valid rule");
        let inner = around_0.integrate(|w| bump(w.norm() / eps) * f(w));
        let outer = around_v.integrate(|w| (1.0 - bump(w.norm() / eps)) * f(w));
        inner + outer
    } else {
        let around_0 = VelocityRule::oriented(
            Vec3::zeros(),
            KERNEL_REACH + a,
            n_r,
            n_theta,
            n_phi,
            axis,
            0.0,
        )
        .expect("valid rule");
        let chi0 = |w: &Vec3| {
            let u2 = (v - w).norm_squared();
            u2 / (w.norm_squared() + u2)
        };
        let inner = around_0.integrate(|w| chi0(w) * f(w));
        let outer = around_v.integrate(|w| (1.0 - chi0(w)) * f(w));
        inner + outer
    }
}

/// `∫ (1 + |v*|)/|v*| |k(v, v*)| e^{-α|v*|²} dv*`.
pub fn kernel_moment_integral(
    params: &KernelParams,
    v: &Vec3,
    res: MomentResolution,
) -> Result<f64> {
    params.require_exact()?;
    let alpha = params.alpha;
    Ok(two_center_integral(v, res, |w| {
        let r = w.norm();
        if r == 0.0 || w == v {
            return 0.0;
        }
        (1.0 + r) / r * grad_kernel_unchecked(params, v, w).abs() * (-alpha * r * r).exp()
    }))
}

/// `∫ |∇_v k(v, v*)| e^{-α|v*|²} dv*`.
pub fn kernel_gradient_moment_integral(
    params: &KernelParams,
    v: &Vec3,
    res: MomentResolution,
) -> Result<f64> {
    params.require_exact()?;
    let alpha = params.alpha;
    let MomentResolution {
        n_r,
        n_theta,
        n_phi,
    } = res;
    let rule = VelocityRule::oriented(
        *v,
        KERNEL_REACH,
        n_r,
        n_theta,
        n_phi,
        frame_from_axis(&nonzero_axis(v)),
        0.0,
    )?;
    Ok(rule.integrate(|w| {
        if w == v {
            return 0.0;
        }
        grad_kernel_gradient_unchecked(params, v, w).norm() * (-alpha * w.norm_squared()).exp()
    }))
}

/// Linearized operator `L h(v) = M^{-1/2}(Q(M, M^{1/2} h) + Q(M^{1/2} h, M))`
/// evaluated by direct quadrature over `v*` (polar rule of radius 8) and
/// `(θ, φ) ∈ [0, π/2] × [0, 2π)` with `n_angle` nodes each.
pub fn linearized_operator_quadrature<H: Fn(&Vec3) -> f64>(
    params: &KernelParams,
    h: H,
    v: &Vec3,
    res: MomentResolution,
    n_angle: usize,
) -> f64 {
    let c = params.c();
    let vrule =
        VelocityRule::new(Vec3::zeros(), 8.0, res.n_r, res.n_theta, res.n_phi).expect("valid rule");
    let gt = gauss_legendre(n_angle);
    let thetas: Vec<(f64, f64)> = gt
        .nodes
        .iter()
        .zip(&gt.weights)
        .map(|(x, w)| (0.25 * PI * (x + 1.0), 0.25 * PI * w))
        .collect();
    let dphi = 2.0 * PI / n_angle as f64;
    let inv_sqrt_m = 1.0 / sqrt_maxwellian(v);
    let g = |w: &Vec3| sqrt_maxwellian(w) * h(w);
    vrule.integrate(|vs| {
        let un = (v - vs).norm();
        if un == 0.0 {
            return 0.0;
        }
        let loss = maxwellian(v) * g(vs) + g(v) * maxwellian(vs);
        let mut acc = 0.0;
        for (th, wt) in &thetas {
            let b = c * un * th.sin() * th.cos();
            let mut ring = 0.0;
            for k in 0..n_angle {
                let (vp, vsp) = omega_post(v, vs, *th, k as f64 * dphi);
                ring += maxwellian(&vp) * g(&vsp) + g(&vp) * maxwellian(&vsp) - loss;
            }
            acc += wt * dphi * b * ring;
        }
        inv_sqrt_m * acc
    })
}

/// Fits `(c₁, c₂)` so that `c₂ ∫ k₂⁰ h - c₁ ∫ k₁⁰ h = L h + ν h` for two
/// Gaussian test functions, where `kᵢ⁰` are the kernel shapes with unit
/// coefficients and `L h` comes from [`linearized_operator_quadrature`].
pub fn calibrate_kernel_constants(
    params: &KernelParams,
    res: MomentResolution,
    n_angle: usize,
) -> Result<(f64, f64)> {
    params.require_exact()?;
    let unit = KernelParams {
        cross_section: CrossSection { c: 1.0, gamma: 1.0 },
        ..*params
    };
    let point = Vec3::new(0.6, -0.3, 0.4);
    let cases = [0.3, 0.9];
    let mut rows = Vec::new();
    for beta in cases {
        let h = |w: &Vec3| (-beta * w.norm_squared()).exp();
        let target = linearized_operator_quadrature(params, h, &point, res, n_angle)
            + collision_frequency(params, &point)? * h(&point);
        let (mut i1, mut i2) = (0.0, 0.0);
        let fine = res.doubled();
        i1 += two_center_integral(&point, fine, |w| {
            if w == &point {
                return 0.0;
            }
            grad_kernel_parts(&unit, &point, w).0 / unit.c1() * h(w)
        });
        i2 += two_center_integral(&point, fine, |w| {
            if w == &point {
                return 0.0;
            }
            grad_kernel_parts(&unit, &point, w).1 / unit.c2() * h(w)
        });
        rows.push((i1, i2, target));
    }
    // target = c₂ i₂ - c₁ i₁, two equations.
    let (a1, b1, t1) = rows[0];
    let (a2, b2, t2) = rows[1];
    let det = -a1 * b2 + a2 * b1;
    let c1 = (t1 * b2 - t2 * b1) / det;
    let c2 = (-a1 * t2 + a2 * t1) / det;
    Ok((c1, c2))
}

/// Sampled checks of the kernel bounds and the exact exponent identity.
///
/// Velocities are drawn from the ball `|v| <= 8`; `ρ = 0` is the envelope
/// of record and `ρ = 0.1` is reported alongside because the `k₁` part
/// grows like `|v|²` relative to the `ρ = 0` envelope along `v* = -v`.
pub fn verify_property_a(params: &KernelParams, n_samples: usize, seed: u64) -> Result<Report> {
    params.require_exact()?;
    params.validate()?;
    let gamma = params.cross_section.gamma;
    let c = params.c();
    let mut report = Report::new("kernel");

    // ν and ∇ν against (1 + |v|)^γ, |v| <= 10.
    let n_radial = 2001;
    let (mut lo, mut hi, mut grad_hi, mut fd_err): (f64, f64, f64, f64) =
        (f64::INFINITY, 0.0, 0.0, 0.0);
    let mut nu_min = f64::INFINITY;
    for i in 0..n_radial {
        let a = 10.0 * i as f64 / (n_radial - 1) as f64;
        let nu = nu_radial(c, a);
        nu_min = nu_min.min(nu);
        let scale = (1.0 + a).powf(gamma);
        lo = lo.min(nu / scale);
        hi = hi.max(nu / scale);
        let h = 1e-5;
        // ν is even in a, so the stencil reflects at the origin.
        let fd = (nu_radial(c, a + h) - nu_radial(c, (a - h).abs())) / (2.0 * h);
        grad_hi = grad_hi.max(fd.abs() * (1.0 + a).powf(1.0 - gamma));
        fd_err = fd_err.max(
            (fd - nu_radial_derivative(c, a)).abs() / (1.0 + nu_radial_derivative(c, a).abs()),
        );
    }
    report.push(Check::fitted(
        "nu_lower_constant",
        "(1+|v|)^gamma <~ nu(v)",
        lo,
        hi,
        lo > 0.0,
    ));
    report.push(Check::fitted(
        "nu_upper_constant",
        "nu(v) <~ (1+|v|)^gamma",
        hi,
        lo,
        hi.is_finite(),
    ));
    report.push(Check::fitted(
        "nu_gradient_constant",
        "|grad nu(v)| <~ (1+|v|)^(gamma-1)",
        grad_hi,
        1.0,
        true,
    ));
    report.push(Check::bound(
        "nu_gradient_fd_agreement",
        "closed-form dnu/d|v| vs central differences",
        fd_err,
        1e-6,
        0.0,
    ));
    let nu0 = nu_radial(c, 0.0);
    report.push(Check::flag(
        "nu_uniformly_positive",
        "inf nu > 0",
        nu_min,
        nu0,
        nu0 > 0.0 && nu_min >= 0.5 * nu0,
    ));

    // Pointwise kernel bounds.
    let sampled = chunked(n_samples, seed, |rng, count| {
        let mut out = [0.0f64; 6];
        for _ in 0..count {
            let v = in_ball(rng, 8.0);
            let vs = in_ball(rng, 8.0);
            if v == vs {
                continue;
            }
            let k = grad_kernel_unchecked(params, &v, &vs).abs();
            let gk = grad_kernel_gradient_unchecked(params, &v, &vs).norm();
            out[0] = out[0].max(k / kernel_envelope(&v, &vs, 0.0, gamma));
            out[1] = out[1].max(gk / kernel_gradient_envelope(&v, &vs, 0.0, gamma));
            out[2] = out[2].max(k / kernel_envelope(&v, &vs, 0.1, gamma));
            out[3] = out[3].max(gk / kernel_gradient_envelope(&v, &vs, 0.1, gamma));
            let sym = (grad_kernel_unchecked(params, &vs, &v)
                - grad_kernel_unchecked(params, &v, &vs))
            .abs();
            out[4] = out[4].max(sym / k.max(1e-300));
            // Identity at random (α, ρ).
            let rho: f64 = rng.random_range(0.0..0.95);
            let alpha: f64 = rng.random_range(0.0..0.5 * (1.0 - rho));
            let v5 = unit_vector(rng) * rng.random_range(0.0..5.0);
            let w5 = unit_vector(rng) * rng.random_range(0.0..5.0);
            if v5 != w5 {
                let (l, r) = key_identity_sides(&v5, &w5, alpha, rho);
                out[5] = out[5].max((l - r).abs() / r.abs().max(1e-300));
            }
        }
        out
    });
    let mut m = [0.0f64; 6];
    for o in sampled {
        for i in 0..6 {
            m[i] = m[i].max(o[i]);
        }
    }
    report.push(Check::fitted(
        "kernel_decay_constant_rho0",
        "|k(v,v*)| <~ |v-v*|^-1 exp(-(1-rho)/4 (|v-v*|^2 + ((|v|^2-|v*|^2)/|v-v*|)^2)), rho = 0, |v|,|v*| <= 8",
        m[0],
        m[2],
        true,
    ));
    report.push(Check::fitted(
        "kernel_gradient_decay_constant_rho0",
        "|grad_v k(v,v*)| <~ (1+|v|) |v-v*|^-2 exp(-(1-rho)/4 (...)), rho = 0, |v|,|v*| <= 8",
        m[1],
        m[3],
        true,
    ));
    report.push(Check::fitted(
        "kernel_decay_constant_rho0.1",
        "|k(v,v*)| <~ |v-v*|^-1 exp(-(1-rho)/4 (...)), rho = 0.1",
        m[2],
        m[0],
        true,
    ));
    report.push(Check::fitted(
        "kernel_gradient_decay_constant_rho0.1",
        "|grad_v k(v,v*)| <~ (1+|v|) |v-v*|^-2 exp(-(1-rho)/4 (...)), rho = 0.1",
        m[3],
        m[1],
        true,
    ));
    report.push(Check::bound(
        "kernel_symmetry",
        "k(v,v*) = k(v*,v)",
        m[4],
        1e-13,
        0.0,
    ));
    report.push(Check::bound(
        "key_exponent_identity",
        "exp(-(1-rho)/4(|u|^2+(D/|u|)^2)) = e^{-a|v|^2} e^{-(1-rho+2a)(1-rho-2a)/(4(1-rho))|u|^2} e^{-(1-rho)(v.u/|u|-(1-rho+2a)/(2(1-rho))|u|)^2} e^{a|v*|^2}",
        m[5],
        1e-12,
        0.0,
    ));
    report.note(format!(
        "{n_samples} kernel pairs sampled from |v|, |v*| <= 8"
    ));
    Ok(report)
}

/// Suprema over `|v| <= 8` of `e^{α|v|²} ∫ (1+|v*|)/|v*| |k| e^{-α|v*|²}` and
/// `e^{α|v|²}(1+|v|)^{-γ} ∫ |∇_v k| e^{-α|v*|²}` over a radial sweep.
pub fn kernel_integral_suprema(
    params: &KernelParams,
    res: MomentResolution,
    speeds: &[f64],
) -> Result<(f64, f64)> {
    let gamma = params.cross_section.gamma;
    let dirs = [Vec3::new(0.36, 0.48, 0.8), Vec3::new(-0.6, 0.0, 0.8)];
    let mut sup1: f64 = 0.0;
    let mut sup3: f64 = 0.0;
    for &s in speeds {
        for d in &dirs {
            let v = d * s;
            let w = (params.alpha * s * s).exp();
            sup1 = sup1.max(w * kernel_moment_integral(params, &v, res)?);
            sup3 = sup3
                .max(w * kernel_gradient_moment_integral(params, &v, res)? / (1.0 + s).powf(gamma));
        }
    }
    Ok((sup1, sup3))
}
