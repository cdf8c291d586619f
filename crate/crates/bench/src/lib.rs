//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use ksd_core::kernel::MomentResolution;
use ksd_core::transport::TransportContext;
use ksd_core::{DomainSpec, GridConfig, KernelParams, Vec3};

/// A reduced grid on a ball of radius 0.05 that builds in well under a second.
pub fn small_context() -> Arc<TransportContext> {
    let grid = GridConfig {
        n_x: 60,
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
    let d = DomainSpec::ball(Vec3::zeros(), 0.05).expect("valid ball");
    TransportContext::new(&d, KernelParams::hard_sphere(1.0), grid).expect("valid grid")
}
