//! Run configuration: one JSON file per run, unknown keys rejected.

use std::path::PathBuf;

use ksd_core::collision::GammaResolution;
use ksd_core::kernel::CrossSection;
use ksd_core::{
    BoundaryData, BoundaryFamily, DomainKind, DomainSpec, GridConfig, KernelParams, NormConfig,
    SolverConfig, Vec3,
};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    VerifyGeometry,
    VerifyKernel,
    VerifyCollision,
    VerifyNorms,
    Contraction,
    SolveLinear,
    SolveNonlinear,
    FullSuite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Ball,
    Ellipsoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub kind: Kind,
    #[serde(default)]
    pub center: [f64; 3],
    /// Decreasing semiaxes; all equal for a ball.
    pub semiaxes: [f64; 3],
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            kind: Kind::Ball,
            center: [0.0; 3],
            semiaxes: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ScaledMaxwellian,
    TangentialBump,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    pub family: Family,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_amplitude() -> f64 {
    0.01
}
fn default_beta() -> f64 {
    0.25
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            family: Family::ScaledMaxwellian,
            amplitude: default_amplitude(),
            beta: default_beta(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(rename = "C")]
    pub c: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub alpha: Option<f64>,
    /// Radius of the master velocity rule.
    pub v_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub n_r: Option<usize>,
    pub n_theta: Option<usize>,
    pub n_phi: Option<usize>,
    /// Gauss order of the sphere rule inside `Γ`.
    pub sphere_n: Option<usize>,
    pub line_panels: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n_x: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NormsConfig {
    /// Defaults to `kernel.alpha`.
    pub alpha: Option<f64>,
    pub p_list: Option<Vec<f64>>,
    pub fd_step_x: Option<f64>,
    pub fd_step_v: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub series_tol: Option<f64>,
    pub max_terms: Option<usize>,
    pub max_outer: Option<usize>,
    pub outer_tol: Option<f64>,
    pub smallness_threshold: Option<f64>,
    pub residual_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ContractionConfig {
    /// Ball radii, centered at `domain.center`.
    pub radii: Vec<f64>,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self {
            radii: vec![0.025, 0.05, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub norms: NormsConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub contraction: ContractionConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Core-library settings resolved from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub domain: DomainSpec,
    pub boundary: BoundaryData,
    pub params: KernelParams,
    pub grid: GridConfig,
    pub norm: NormConfig,
    pub solver: SolverConfig,
    pub contraction_domains: Vec<DomainSpec>,
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("invalid config: {e}"))
    }

    pub fn schema() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
    }

    pub fn resolve(&self) -> Result<Resolved, String> {
        let err = |section: &str, e: ksd_core::KsdError| format!("invalid config: {section}: {e}");
        let kind = match self.domain.kind {
            Kind::Ball => DomainKind::Ball,
            Kind::Ellipsoid => DomainKind::Ellipsoid,
        };
        let center = Vec3::from(self.domain.center);
        let domain =
            DomainSpec::new(kind, center, self.domain.semiaxes).map_err(|e| err("domain", e))?;

        let mut params = KernelParams::hard_sphere(1.0);
        let k = &self.kernel;
        params.cross_section = CrossSection {
            c: k.c.unwrap_or(params.cross_section.c),
            gamma: k.gamma.unwrap_or(params.cross_section.gamma),
        };
        set(&mut params.rho, k.rho);
        set(&mut params.alpha, k.alpha);
        params.validate().map_err(|e| err("kernel", e))?;

        let mut grid = GridConfig::default();
        let q = &self.quadrature;
        set(&mut grid.n_r, q.n_r);
        set(&mut grid.n_theta, q.n_theta);
        set(&mut grid.n_phi, q.n_phi);
        set(&mut grid.line_panels, q.line_panels);
        set(&mut grid.gamma_rule.sphere_n, q.sphere_n);
        if let Some(v) = k.v_max {
            grid.v_max = v;
            grid.gamma_rule = GammaResolution {
                v_max: v,
                ..grid.gamma_rule
            };
        }
        set(&mut grid.n_x, self.grid.n_x);
        set(&mut grid.seed, self.grid.seed);
        let positive = [
            grid.n_x,
            grid.n_r,
            grid.n_theta,
            grid.n_phi,
            grid.line_panels,
            grid.gamma_rule.sphere_n,
        ];
        if positive.contains(&0) || !(grid.v_max.is_finite() && grid.v_max > 0.0) {
            return Err("invalid config: quadrature and grid sizes must be positive".into());
        }

        let mut norm = NormConfig::with_alpha(self.norms.alpha.unwrap_or(params.alpha));
        if let Some(p) = &self.norms.p_list {
            norm.p_list = p.clone();
        }
        set(&mut norm.fd_step_x, self.norms.fd_step_x);
        set(&mut norm.fd_step_v, self.norms.fd_step_v);
        norm.validate(params.rho).map_err(|e| err("norms", e))?;

        let mut solver = SolverConfig {
            norm: norm.clone(),
            ..SolverConfig::default()
        };
        let s = &self.solver;
        set(&mut solver.series_tol, s.series_tol);
        set(&mut solver.max_terms, s.max_terms);
        set(&mut solver.max_outer, s.max_outer);
        set(&mut solver.outer_tol, s.outer_tol);
        set(&mut solver.smallness_threshold, s.smallness_threshold);
        set(&mut solver.residual_samples, s.residual_samples);
        solver.validate().map_err(|e| err("solver", e))?;

        let family = match self.boundary.family {
            Family::ScaledMaxwellian => BoundaryFamily::ScaledMaxwellian,
            Family::TangentialBump => BoundaryFamily::TangentialBump,
            Family::Zero => BoundaryFamily::Zero,
        };
        let boundary = BoundaryData {
            family,
            amplitude: self.boundary.amplitude,
            beta: self.boundary.beta,
        };
        boundary
            .validate(norm.alpha)
            .map_err(|e| err("boundary", e))?;

        let contraction_domains = self
            .contraction
            .radii
            .iter()
            .map(|r| DomainSpec::ball(center, *r))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err("contraction", e))?;
        Ok(Resolved {
            domain,
            boundary,
            params,
            grid,
            norm,
            solver,
            contraction_domains,
        })
    }
}
