use std::sync::{Arc, OnceLock};

use ksd_core::collision::{post_collision_omega, post_collision_sigma};
use ksd_core::kernel::{grad_kernel, key_identity_sides, MomentResolution};
use ksd_core::norms::sup_norm_alpha;
use ksd_core::transport::{apply_gamma_values, apply_s_fn, TransportContext};
use ksd_core::{DomainSpec, Field, GridConfig, KernelParams, Vec3};
use proptest::prelude::*;

fn ctx() -> Arc<TransportContext> {
    static CTX: OnceLock<Arc<TransportContext>> = OnceLock::new();
    CTX.get_or_init(|| {
        let grid = GridConfig {
            n_x: 40,
            n_r: 6,
            n_theta: 4,
            n_phi: 8,
            fit_degree: 2,
            kernel_rule: MomentResolution {
                n_r: 12,
                n_theta: 8,
                n_phi: 8,
            },
            ..GridConfig::default()
        };
        let d = DomainSpec::ellipsoid(Vec3::new(0.1, 0.0, -0.2), [0.05, 0.045, 0.04]).unwrap();
        TransportContext::new(&d, KernelParams::hard_sphere(1.0), grid).unwrap()
    })
    .clone()
}

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

fn gaussian_field(a: f64, b: Vec3, c: f64) -> Field {
    let ctx = ctx();
    let center = ctx.domain().center;
    Field::from_fn(&ctx, move |x, v| {
        a * (1.0 + c * (x - center).x / 0.05) * (-0.4 * (v - b).norm_squared()).exp()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn exit_time_scales_inversely_with_speed(x in vec3(0.5), v in vec3(3.0), lambda in 0.1f64..10.0) {
        let d = DomainSpec::ellipsoid(Vec3::zeros(), [1.0, 0.8, 0.6]).unwrap();
        prop_assume!(d.contains(&x) && v.norm() > 1e-3);
        let t = d.exit_time(&x, &v).unwrap();
        let s = d.exit_time(&x, &(v * lambda)).unwrap();
        prop_assert!((s * lambda - t).abs() <= 1e-12 * t.max(1e-300));
    }

    #[test]
    fn collisions_conserve_momentum_and_energy(v in vec3(5.0), vs in vec3(5.0), theta in 0.0f64..std::f64::consts::FRAC_PI_2, phi in 0.0f64..std::f64::consts::TAU, s in vec3(1.0)) {
        prop_assume!((v - vs).norm() > 1e-6 && s.norm() > 1e-3);
        let e0 = v.norm_squared() + vs.norm_squared();
        let p = post_collision_omega(&v, &vs, theta, phi).unwrap();
        prop_assert!(p.momentum_defect() <= 1e-12 * (1.0 + (v + vs).norm()));
        prop_assert!(p.energy_defect() <= 1e-12 * (1.0 + e0));
        let q = post_collision_sigma(&v, &vs, &s.normalize());
        prop_assert!(q.momentum_defect() <= 1e-12 * (1.0 + (v + vs).norm()));
        prop_assert!(q.energy_defect() <= 1e-12 * (1.0 + e0));
    }

    #[test]
    fn kernel_is_symmetric(v in vec3(6.0), vs in vec3(6.0)) {
        prop_assume!((v - vs).norm() > 1e-6);
        let p = KernelParams::hard_sphere(1.3);
        let a = grad_kernel(&p, &v, &vs).unwrap();
        let b = grad_kernel(&p, &vs, &v).unwrap();
        prop_assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-300));
    }

    #[test]
    fn key_identity_holds(v in vec3(5.0), vs in vec3(5.0), rho in 0.0f64..0.9, t in 0.0f64..1.0) {
        prop_assume!((v - vs).norm() > 1e-6);
        let alpha = t * 0.5 * (1.0 - rho) * 0.999;
        let (l, r) = key_identity_sides(&v, &vs, alpha, rho);
        prop_assert!((l - r).abs() <= 1e-12 * r.abs().max(1e-300));
    }

    #[test]
    fn speed_diameter_bound(speed in 0.0f64..50.0, diam in 0.0f64..20.0, gamma in 0.0f64..1.0) {
        let lhs = (1.0 + speed).powf(gamma) * if speed > 0.0 { (diam / speed).min(1.0) } else { 1.0 };
        prop_assert!(lhs <= (1.0 + diam) * (1.0 + 1e-15));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn weighted_sup_norm_is_a_norm(a in -3.0f64..3.0, b in vec3(1.0), c in -0.5f64..0.5) {
        let f = gaussian_field(1.0, b, c);
        let g = gaussian_field(0.5, -b, -c);
        let nf = sup_norm_alpha(&f, 0.25).unwrap();
        let ng = sup_norm_alpha(&g, 0.25).unwrap();
        let scaled = sup_norm_alpha(&f.scale(a), 0.25).unwrap();
        prop_assert!((scaled - a.abs() * nf).abs() <= 1e-12 * nf);
        let sum = sup_norm_alpha(&Field::combine(1.0, &f, 1.0, &g), 0.25).unwrap();
        prop_assert!(sum <= (nf + ng) * (1.0 + 1e-12));
    }

    #[test]
    fn transport_preserves_order(a in 0.1f64..2.0, b in vec3(1.0)) {
        // 0 <= h1 <= h2 implies 0 <= S h1 <= S h2.
        let ctx = ctx();
        let h1 = move |_: &Vec3, v: &Vec3| a * (-0.4 * (v - b).norm_squared()).exp();
        let s1 = apply_s_fn(&ctx, h1).unwrap();
        let s2 = apply_s_fn(&ctx, move |x: &Vec3, v: &Vec3| h1(x, v) + 0.1).unwrap();
        prop_assert!(s1.values.iter().all(|y| *y >= 0.0));
        prop_assert!(s1.values.iter().zip(s2.values.iter()).all(|(p, q)| p <= q));
    }

    #[test]
    fn grid_collision_operator_is_bilinear(a in -2.0f64..2.0, b1 in vec3(1.0), b2 in vec3(1.0)) {
        let ctx = ctx();
        let (f, g, h) = (gaussian_field(1.0, b1, 0.2), gaussian_field(1.0, b2, -0.1), gaussian_field(0.3, Vec3::zeros(), 0.0));
        let mix = &f.values * a + &g.values;
        let lhs = apply_gamma_values(&ctx, &mix, &h.values);
        let rhs = apply_gamma_values(&ctx, &f.values, &h.values) * a + apply_gamma_values(&ctx, &g.values, &h.values);
        let scale = lhs.amax().max(rhs.amax()).max(1e-300);
        prop_assert!((lhs - rhs).amax() <= 1e-12 * scale);
    }
}
