//! Fitted constants of the Gaussian-envelope estimates, each computed at a
//! base and a doubled quadrature resolution.

use rand::Rng;

use crate::collision::{gamma, GammaQuadrature, GammaResolution};
use crate::error::Result;
use crate::geometry::DomainSpec;
use crate::kernel::{collision_frequency, kernel_integral_suprema, KernelParams, MomentResolution};
use crate::quadrature::line_quadrature;
use crate::report::{Check, Report};
use crate::sampling::{stream_rng, unit_vector};
use crate::Vec3;

/// Relative change allowed between the base and doubled fits.
pub const DOUBLING_TOLERANCE: f64 = 0.05;

/// Speeds at which velocity suprema are taken.
pub fn envelope_speeds() -> Vec<f64> {
    (0..=16).map(|i| 0.5 * i as f64).collect()
}

fn stable(name: &str, anchor: &str, base: f64, fine: f64) -> Check {
    let pass = base.is_finite()
        && fine.is_finite()
        && fine > 0.0
        && (base / fine - 1.0).abs() <= DOUBLING_TOLERANCE;
    Check::fitted(name, anchor, base, fine, pass)
}

/// `e^{α|v|²}(1+|v|)^{-γ}|Γ(h₁,h₂)(v)| / (|h₁|_{∞,α}|h₂|_{∞,α})` maximized over
/// the speed sweep, for `h₁ = e^{-α|v|²}` and an anisotropic `h₂`.
pub fn gamma_envelope_constant(params: &KernelParams, res: GammaResolution) -> Result<f64> {
    let alpha = params.alpha;
    let g = params.cross_section.gamma;
    let quad = GammaQuadrature::new(res)?;
    let h1 = |w: &Vec3| (-alpha * w.norm_squared()).exp();
    let h2 = |w: &Vec3| (1.0 + 0.5 * w.x / (1.0 + w.norm())) * (-alpha * w.norm_squared()).exp();
    let dir = Vec3::new(0.36, 0.48, 0.8);
    let mut worst: f64 = 0.0;
    for s in envelope_speeds() {
        let v = dir * s;
        let val = gamma(params, h1, h2, &v, &quad).abs();
        worst = worst.max(val * (alpha * s * s).exp() / (1.0 + s).powf(g));
    }
    Ok(worst / 1.5)
}

/// `|S_Ω h| max{1, |v|/diam} / sup|h|` maximized over sampled `(x, v)`,
/// `|v| <= 8`, for a bounded oscillating `h`; each ray integral uses
/// `panels` Gauss panels.
pub fn transport_sup_constant(
    domain: &DomainSpec,
    params: &KernelParams,
    n_samples: usize,
    panels: usize,
    seed: u64,
) -> Result<f64> {
    let h = |x: &Vec3, v: &Vec3| 1.0 + 0.5 * (3.0 * x.x / domain.diameter + v.y).cos();
    let mut rng = stream_rng(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..n_samples {
        let x = domain.sample_interior(&mut rng)?;
        let v = unit_vector(&mut rng) * rng.random_range(0.1..8.0);
        let nu = collision_frequency(params, &v)?;
        let tau = domain.exit_time(&x, &v)?;
        let s = line_quadrature(|t| (-nu * t).exp() * h(&(x - t * v), &v), tau, panels);
        worst = worst.max(s.abs() * (v.norm() / domain.diameter).max(1.0));
    }
    Ok(worst / 1.5)
}

/// Base and doubled fits of the kernel integral, kernel-gradient integral,
/// `Γ` envelope, and transport sup constants over `|v| <= 8`.
pub fn verify_uniform_envelopes(
    domain: &DomainSpec,
    params: &KernelParams,
    seed: u64,
) -> Result<Report> {
    params.require_exact()?;
    params.validate()?;
    let mut report = Report::new("envelopes");
    let speeds = envelope_speeds();
    let base = MomentResolution::default();
    let (k1, k3) = kernel_integral_suprema(params, base, &speeds)?;
    let (f1, f3) = kernel_integral_suprema(params, base.doubled(), &speeds)?;
    report.push(stable(
        "kernel_integral_constant",
        "int (1+|v*|)/|v*| |k(v,v*)| e^{-alpha|v*|^2} dv* <~ e^{-alpha|v|^2}",
        k1,
        f1,
    ));
    report.push(stable(
        "kernel_gradient_integral_constant",
        "int |grad_v k(v,v*)| e^{-alpha|v*|^2} dv* <~ (1+|v|)^gamma e^{-alpha|v|^2}",
        k3,
        f3,
    ));
    let gres = GammaResolution {
        v_max: 8.0,
        n_r: 16,
        n_theta: 8,
        n_phi: 16,
        sphere_n: 6,
    };
    report.push(stable(
        "gamma_envelope_constant",
        "|Gamma(h1,h2)(v)| e^{alpha|v|^2} <~ (1+|v|)^gamma |h1|_{inf,alpha} |h2|_{inf,alpha}",
        gamma_envelope_constant(params, gres)?,
        gamma_envelope_constant(params, gres.doubled())?,
    ));
    let n = 2000;
    report.push(stable(
        "transport_sup_constant",
        "|S h| <~ sup|h| min{1, diam/|v|}",
        transport_sup_constant(domain, params, n, 2, seed)?,
        transport_sup_constant(domain, params, n, 4, seed)?,
    ));
    report.note(format!(
        "velocity suprema over |v| in [0, 8] step 0.5; {n} transport rays"
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelopes_are_stable() {
        let d = DomainSpec::ball(Vec3::zeros(), 0.05).unwrap();
        let r = verify_uniform_envelopes(&d, &KernelParams::hard_sphere(1.0), 7).unwrap();
        assert!(r.all_pass(), "{:#?}", r.failures());
        assert!(r.checks.iter().all(|c| c.lhs > 0.0));
    }
}
