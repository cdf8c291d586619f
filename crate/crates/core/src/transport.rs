//! Boundary lift `J`, damped transport `S`, the kernel operator `K` and the
//! grid form of `Γ` on a phase-space collocation grid.
//!
//! A [`Field`] carries its values on the grid together with a [`Source`]
//! that can be evaluated at any `(x, v)`. Transport integrals of a field are
//! taken along the exact characteristic by evaluating the source, never by
//! interpolating grid values in `x`. Kernel images `K h` are represented by
//! a least-squares polynomial in `x` per velocity node, which makes their
//! transport integrals cheap and exact along each ray.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::GammaResolution;
use crate::error::{KsdError, Result};
use crate::geometry::{fibonacci_sphere, DomainSpec};
use crate::kernel::{
    grad_kernel_unchecked, nu_radial, KernelParams, MomentResolution, KERNEL_REACH,
};
use crate::quadrature::{frame_from_axis, visit_line_nodes, SphereRule, VelocityRule};
use crate::sampling::{halton3, stream_rng};
use crate::Vec3;

/// Nodes with `N(x, v)` below this contribute zero to `J`.
pub const GRAZING_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryFamily {
    /// `A e^{-β|v|²}`.
    ScaledMaxwellian,
    /// `A e^{-β|v|²} (1 - (n(z)·v̂)²)`.
    TangentialBump,
    Zero,
}

/// Incoming boundary data `g(z, v)` for `z ∈ ∂Ω`, `n(z)·v < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryData {
    pub family: BoundaryFamily,
    pub amplitude: f64,
    pub beta: f64,
}

impl BoundaryData {
    pub fn zero() -> Self {
        Self {
            family: BoundaryFamily::Zero,
            amplitude: 0.0,
            beta: 1.0,
        }
    }

    pub fn scaled_maxwellian(amplitude: f64, beta: f64) -> Self {
        Self {
            family: BoundaryFamily::ScaledMaxwellian,
            amplitude,
            beta,
        }
    }

    pub fn tangential_bump(amplitude: f64, beta: f64) -> Self {
        Self {
            family: BoundaryFamily::TangentialBump,
            amplitude,
            beta,
        }
    }

    /// `|g| <= A e^{-α|v|²}` needs `β >= α`.
    pub fn validate(&self, alpha: f64) -> Result<()> {
        if !self.amplitude.is_finite() {
            return Err(KsdError::InvalidParameter(
                "boundary amplitude must be finite".into(),
            ));
        }
        if self.family != BoundaryFamily::Zero && self.beta < alpha {
            return Err(KsdError::InvalidParameter(format!(
                "boundary decay beta = {} must be at least alpha = {alpha}",
                self.beta
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            amplitude: self.amplitude * a,
            ..*self
        }
    }

    /// `g(z, v)` with outward normal `normal` at `z`.
    #[inline]
    pub fn eval(&self, normal: &Vec3, v: &Vec3) -> f64 {
        match self.family {
            BoundaryFamily::Zero => 0.0,
            BoundaryFamily::ScaledMaxwellian => {
                self.amplitude * (-self.beta * v.norm_squared()).exp()
            }
            BoundaryFamily::TangentialBump => {
                let v2 = v.norm_squared();
                let c = if v2 > 0.0 {
                    normal.dot(v) / v2.sqrt()
                } else {
                    0.0
                };
                self.amplitude * (-self.beta * v2).exp() * (1.0 - c * c)
            }
        }
    }
}

/// Resolution of the collocation grid and of the operators built on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub n_x: usize,
    pub seed: u64,
    /// Master velocity rule (the velocity collocation set).
    pub n_r: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    pub v_max: f64,
    /// Shells sit at `v_max s^p` for Gauss nodes `s`; `p > 1` refines low speeds.
    pub radial_power: f64,
    /// Share of `x` nodes placed on shells just inside the boundary.
    pub shell_fraction: f64,
    /// Total degree of the `x`-polynomials representing `K h`.
    pub fit_degree: usize,
    /// Minimum panels per characteristic.
    pub line_panels: usize,
    /// Polar rule of `K`, centered at each velocity node.
    pub kernel_rule: MomentResolution,
    /// Rules of the grid form of `Γ`.
    pub gamma_rule: GammaResolution,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_x: 200,
            seed: 1,
            n_r: 12,
            n_theta: 8,
            n_phi: 16,
            v_max: 6.0,
            radial_power: 2.0,
            shell_fraction: 0.25,
            fit_degree: 4,
            line_panels: 2,
            kernel_rule: MomentResolution::default(),
            gamma_rule: GammaResolution {
                v_max: 6.0,
                n_r: 6,
                n_theta: 4,
                n_phi: 8,
                sphere_n: 2,
            },
        }
    }
}

/// Collocation points in `Ω × ℝ³`.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    pub domain: DomainSpec,
    pub x_nodes: Vec<Vec3>,
    pub v_rule: VelocityRule,
    pub config: GridConfig,
}

/// Normalized depths of the near-boundary shells.
const SHELL_DEPTHS: [f64; 3] = [1e-3, 1e-2, 5e-2];

impl PhaseGrid {
    pub fn new(domain: &DomainSpec, config: GridConfig) -> Result<Self> {
        if config.n_x < 1 {
            return Err(KsdError::InvalidParameter("n_x must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.shell_fraction) {
            return Err(KsdError::InvalidParameter(
                "shell_fraction must lie in [0, 1)".into(),
            ));
        }
        let n_shell = ((config.n_x as f64) * config.shell_fraction).round() as usize;
        let n_bulk = config.n_x - n_shell;
        let mut rng = stream_rng(config.seed, 0);
        let shift = [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ];
        let [a, b, c] = domain.semiaxes;
        let min_depth = 1e-8 * domain.diameter;
        let mut x_nodes = Vec::with_capacity(config.n_x);
        let mut i = 1u64;
        while x_nodes.len() < n_bulk {
            if i > 1_000_000 {
                return Err(KsdError::Sampling(
                    "Halton filtering produced too few interior points".into(),
                ));
            }
            let p = halton3(i, shift);
            i += 1;
            let y = Vec3::new(2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0, 2.0 * p[2] - 1.0);
            if y.norm() < 1.0 {
                let x = domain.center + Vec3::new(y.x * a, y.y * b, y.z * c);
                if domain.boundary_distance(&x)? > min_depth {
                    x_nodes.push(x);
                }
            }
        }
        let dirs = fibonacci_sphere(n_shell.max(1));
        for (k, d) in dirs.iter().take(n_shell).enumerate() {
            let depth = SHELL_DEPTHS[k % SHELL_DEPTHS.len()];
            let x = domain.center + Vec3::new(d.x * a, d.y * b, d.z * c) * (1.0 - depth);
            x_nodes.push(x);
        }
        let dphi = 2.0 * PI / config.n_phi as f64;
        let v_rule = VelocityRule::graded(
            Vec3::zeros(),
            config.v_max,
            config.n_r,
            config.n_theta,
            config.n_phi,
            crate::quadrature::standard_frame(),
            0.5 * dphi,
            config.radial_power,
        )?;
        Ok(Self {
            domain: domain.clone(),
            x_nodes,
            v_rule,
            config,
        })
    }

    pub fn n_x(&self) -> usize {
        self.x_nodes.len()
    }

    pub fn n_v(&self) -> usize {
        self.v_rule.len()
    }

    pub fn velocity(&self, n: usize) -> Vec3 {
        self.v_rule.nodes[n]
    }
}

/// Interpolation weights on the master velocity rule: at most 8 nodes.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stencil {
    pub idx: [u32; 8],
    pub w: [f64; 8],
    pub len: u8,
}

impl Stencil {
    #[inline]
    fn push(&mut self, i: usize, w: f64) {
        if w != 0.0 {
            self.idx[self.len as usize] = i as u32;
            self.w[self.len as usize] = w;
            self.len += 1;
        }
    }

    #[inline]
    pub fn apply(&self, values: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.len as usize {
            s += self.w[k] * values[self.idx[k] as usize];
        }
        s
    }
}

/// Radial-linear × angular-bilinear interpolation on the master rule.
///
/// Below the innermost shell the innermost shell's angular interpolant is
/// used; between the outermost shell and `v_max` the value tapers linearly
/// to zero; beyond `v_max` it is zero. In `cos θ` the two extreme rings are
/// extended to the poles, and `φ` is periodic.
#[derive(Debug, Clone)]
pub struct VelocityInterpolator {
    radii: Vec<f64>,
    cos_theta: Vec<f64>,
    n_theta: usize,
    n_phi: usize,
    phi_offset: f64,
    v_max: f64,
}

impl VelocityInterpolator {
    pub fn new(rule: &VelocityRule) -> Self {
        Self {
            radii: rule.radii.clone(),
            cos_theta: rule.cos_theta.clone(),
            n_theta: rule.n_theta,
            n_phi: rule.n_phi,
            phi_offset: rule.phi_offset,
            v_max: rule.v_max,
        }
    }

    fn bracket(nodes: &[f64], x: f64) -> [(usize, f64); 2] {
        let last = nodes.len() - 1;
        if x <= nodes[0] {
            return [(0, 1.0), (0, 0.0)];
        }
        if x >= nodes[last] {
            return [(last, 1.0), (last, 0.0)];
        }
        let j = nodes.partition_point(|&r| r <= x) - 1;
        let t = (x - nodes[j]) / (nodes[j + 1] - nodes[j]);
        [(j, 1.0 - t), (j + 1, t)]
    }

    pub fn stencil(&self, w: &Vec3) -> Stencil {
        let mut st = Stencil::default();
        let r = w.norm();
        if r >= self.v_max {
            return st;
        }
        let last = self.radii.len() - 1;
        let radial: [(usize, f64); 2] = if r >= self.radii[last] {
            [
                (last, (self.v_max - r) / (self.v_max - self.radii[last])),
                (last, 0.0),
            ]
        } else {
            Self::bracket(&self.radii, r)
        };
        let (ct, phi) = if r > 0.0 {
            (w.z / r, w.y.atan2(w.x))
        } else {
            (1.0, 0.0)
        };
        let polar = Self::bracket(&self.cos_theta, ct);
        let dphi = 2.0 * PI / self.n_phi as f64;
        let mut p = (phi - self.phi_offset) / dphi;
        p = p.rem_euclid(self.n_phi as f64);
        let k0 = (p.floor() as usize) % self.n_phi;
        let t = p - p.floor();
        let k1 = (k0 + 1) % self.n_phi;
        for (ir, wr) in radial {
            if wr == 0.0 {
                continue;
            }
            for (it, wt) in polar {
                if wt == 0.0 {
                    continue;
                }
                let base = (ir * self.n_theta + it) * self.n_phi;
                st.push(base + k0, wr * wt * (1.0 - t));
                st.push(base + k1, wr * wt * t);
            }
        }
        st
    }

    /// Index of node `idx` after rotating by `shift` azimuthal steps.
    #[inline]
    pub fn rotate(&self, idx: usize, shift: usize) -> usize {
        let jp = idx % self.n_phi;
        idx - jp + (jp + shift) % self.n_phi
    }

    pub fn n_phi(&self) -> usize {
        self.n_phi
    }
}

/// Monomials of total degree `<= degree` in `(x - center)/scale`.
#[derive(Debug, Clone)]
pub struct PolyBasis {
    pub degree: usize,
    pub exps: Vec<[usize; 3]>,
    pub center: Vec3,
    pub scale: f64,
    /// Interpolation points on `[0, 1]` for polynomials along a ray.
    pub ray_nodes: [f64; MAX_FIT_DEGREE + 1],
    /// `lagrange[j][k]`: coefficient of `u^k` in the `j`-th Lagrange basis
    /// polynomial on `ray_nodes`.
    pub lagrange: [[f64; MAX_FIT_DEGREE + 1]; MAX_FIT_DEGREE + 1],
}

pub const MAX_FIT_DEGREE: usize = 5;
const MAX_MONOMIALS: usize = 56;

impl PolyBasis {
    pub fn new(degree: usize, center: Vec3, scale: f64) -> Result<Self> {
        if degree > MAX_FIT_DEGREE {
            return Err(KsdError::InvalidParameter(format!(
                "fit degree must be at most {MAX_FIT_DEGREE}"
            )));
        }
        let mut exps = Vec::new();
        for total in 0..=degree {
            for i in (0..=total).rev() {
                for j in (0..=total - i).rev() {
                    exps.push([i, j, total - i - j]);
                }
            }
        }
        let mut ray_nodes = [0.0; MAX_FIT_DEGREE + 1];
        let mut lagrange = [[0.0; MAX_FIT_DEGREE + 1]; MAX_FIT_DEGREE + 1];
        if degree == 0 {
            ray_nodes[0] = 0.5;
            lagrange[0][0] = 1.0;
        } else {
            for (j, t) in ray_nodes.iter_mut().enumerate().take(degree + 1) {
                *t = 0.5 * (1.0 - (PI * j as f64 / degree as f64).cos());
            }
            let vander =
                DMatrix::from_fn(degree + 1, degree + 1, |j, k| ray_nodes[j].powi(k as i32));
            let inv = vander
                .try_inverse()
                .ok_or_else(|| KsdError::InvalidParameter("singular ray interpolation".into()))?;
            for j in 0..=degree {
                for k in 0..=degree {
                    lagrange[j][k] = inv[(k, j)];
                }
            }
        }
        Ok(Self {
            degree,
            exps,
            center,
            scale,
            ray_nodes,
            lagrange,
        })
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }

    #[inline]
    pub fn eval_into(&self, x: &Vec3, out: &mut [f64]) {
        let y = (x - self.center) / self.scale;
        let mut px = [1.0; MAX_FIT_DEGREE + 1];
        let mut py = [1.0; MAX_FIT_DEGREE + 1];
        let mut pz = [1.0; MAX_FIT_DEGREE + 1];
        for k in 1..=self.degree {
            px[k] = px[k - 1] * y.x;
            py[k] = py[k - 1] * y.y;
            pz[k] = pz[k - 1] * y.z;
        }
        for (o, e) in out.iter_mut().zip(&self.exps) {
            *o = px[e[0]] * py[e[1]] * pz[e[2]];
        }
    }

    #[inline]
    pub fn dot(&self, x: &Vec3, coef: &[f64]) -> f64 {
        let y = (x - self.center) / self.scale;
        let mut px = [1.0; MAX_FIT_DEGREE + 1];
        let mut py = [1.0; MAX_FIT_DEGREE + 1];
        let mut pz = [1.0; MAX_FIT_DEGREE + 1];
        for k in 1..=self.degree {
            px[k] = px[k - 1] * y.x;
            py[k] = py[k - 1] * y.y;
            pz[k] = pz[k - 1] * y.z;
        }
        let mut total = 0.0;
        for (c, e) in coef.iter().zip(&self.exps) {
            total += c * px[e[0]] * py[e[1]] * pz[e[2]];
        }
        total
    }
}

/// `M_k = ∫_0^τ e^{-ν s} s^k ds` for `k < out.len()`: upward recursion when
/// `ντ` is large, otherwise the positive series of the lower incomplete gamma
/// function.
pub fn exp_moments(nu: f64, tau: f64, out: &mut [f64]) {
    let x = nu * tau;
    if tau <= 0.0 {
        out.fill(0.0);
    } else if nu == 0.0 {
        let mut t = tau;
        for (k, o) in out.iter_mut().enumerate() {
            *o = t / (k + 1) as f64;
            t *= tau;
        }
    } else if x > 10.0 {
        let e = (-x).exp();
        out[0] = -(-x).exp_m1() / nu;
        let mut tk = 1.0;
        for k in 1..out.len() {
            tk *= tau;
            out[k] = (k as f64 * out[k - 1] - tk * e) / nu;
        }
    } else {
        // series for the highest moment, then the stable downward recursion
        // M_{k-1} = (ν M_k + τ^k e^{-ντ})/k
        let e = (-x).exp();
        let top = out.len() - 1;
        let a = (top + 1) as f64;
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut j = 1.0;
        while term > 1e-17 * sum {
            term *= x / (a + j);
            sum += term;
            j += 1.0;
        }
        let mut tk = tau.powi(top as i32 + 1);
        out[top] = tk * e * sum;
        for k in (1..=top).rev() {
            tk /= tau;
            out[k - 1] = (nu * out[k] + tk * e) / k as f64;
        }
    }
}

/// Least-squares fit on the `x` nodes with leave-one-out error estimates.
#[derive(Debug, Clone)]
pub struct Fitter {
    pub design: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
    pub hat_diag: Vec<f64>,
}

impl Fitter {
    pub fn new(basis: &PolyBasis, x_nodes: &[Vec3]) -> Result<Self> {
        let m = basis.len();
        if x_nodes.len() < m {
            return Err(KsdError::InvalidParameter(format!(
                "{} x nodes cannot determine {m} polynomial coefficients",
                x_nodes.len()
            )));
        }
        let mut design = DMatrix::zeros(x_nodes.len(), m);
        let mut buf = vec![0.0; m];
        for (i, x) in x_nodes.iter().enumerate() {
            basis.eval_into(x, &mut buf);
            for j in 0..m {
                design[(i, j)] = buf[j];
            }
        }
        let svd = design.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let pinv = svd
            .pseudo_inverse(1e-12 * smax)
            .map_err(|e| KsdError::InvalidParameter(format!("pseudo-inverse failed: {e}")))?;
        let hat = &design * &pinv;
        let hat_diag = (0..x_nodes.len()).map(|i| hat[(i, i)]).collect();
        Ok(Self {
            design,
            pinv,
            hat_diag,
        })
    }

    /// Coefficients (`m × n_v`) for grid values (`n_x × n_v`).
    pub fn fit(&self, values: &DMatrix<f64>) -> DMatrix<f64> {
        &self.pinv * values
    }

    /// Per velocity column: `max_i |residual_i| / (1 - h_ii)`.
    pub fn loo_errors(&self, values: &DMatrix<f64>, coef: &DMatrix<f64>) -> Vec<f64> {
        let fitted = &self.design * coef;
        (0..values.ncols())
            .map(|n| {
                let mut worst: f64 = 0.0;
                for i in 0..values.nrows() {
                    let denom = (1.0 - self.hat_diag[i]).max(1e-3);
                    worst = worst.max((values[(i, n)] - fitted[(i, n)]).abs() / denom);
                }
                worst
            })
            .collect()
    }
}

/// Velocity argument of a source: a master-rule node or a free velocity.
#[derive(Debug, Clone, Copy)]
pub struct VelPoint {
    pub v: Vec3,
    pub node: Option<usize>,
}

impl VelPoint {
    pub fn free(v: Vec3) -> Self {
        Self { v, node: None }
    }
}

pub type AnalyticFn = dyn Fn(&Vec3, &Vec3) -> f64 + Send + Sync;

/// How a field can be evaluated away from the grid.
pub enum Source {
    Zero,
    /// `Jg(x, v) = e^{-ν(v) τ} g(q(x, v), v)`.
    Lift {
        ctx: Arc<TransportContext>,
        g: BoundaryData,
    },
    /// `∫_0^τ e^{-ν s} w(s) h(x - s v, v) ds` with `w = 1` or `w = s`.
    Transport {
        ctx: Arc<TransportContext>,
        inner: Arc<Source>,
        s_weighted: bool,
    },
    /// `x`-polynomial per velocity node (`m × n_v` coefficients).
    Poly {
        ctx: Arc<TransportContext>,
        coef: Arc<DMatrix<f64>>,
    },
    Analytic(Arc<AnalyticFn>),
    Combination(Vec<(f64, Arc<Source>)>),
}

impl std::fmt::Debug for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Zero => write!(f, "Zero"),
            Source::Lift { g, .. } => write!(f, "Lift({g:?})"),
            Source::Transport {
                inner, s_weighted, ..
            } => write!(f, "Transport(s_weighted={s_weighted}, {inner:?})"),
            Source::Poly { coef, .. } => write!(f, "Poly({}x{})", coef.nrows(), coef.ncols()),
            Source::Analytic(_) => write!(f, "Analytic"),
            Source::Combination(list) => f
                .debug_list()
                .entries(list.iter().map(|(a, s)| (a, s)))
                .finish(),
        }
    }
}

impl Source {
    pub fn eval(&self, x: &Vec3, v: &VelPoint) -> f64 {
        match self {
            Source::Zero => 0.0,
            Source::Lift { ctx, g } => ctx.lift(g, x, v),
            Source::Transport {
                ctx,
                inner,
                s_weighted,
            } => {
                let tau = ctx.grid.domain.exit_time(x, &v.v).unwrap_or(0.0);
                ctx.transport_along(inner, x, v, tau, *s_weighted)
            }
            Source::Poly { ctx, coef } => ctx.poly_value(coef, x, v),
            Source::Analytic(f) => f(x, &v.v),
            Source::Combination(list) => list.iter().map(|(a, s)| a * s.eval(x, v)).sum(),
        }
    }

    /// Evaluation at grid node `(i, n)` reusing cached exit times.
    pub fn eval_node(&self, ctx: &TransportContext, i: usize, n: usize) -> f64 {
        let x = ctx.grid.x_nodes[i];
        let v = VelPoint {
            v: ctx.grid.velocity(n),
            node: Some(n),
        };
        match self {
            Source::Transport {
                ctx: c,
                inner,
                s_weighted,
            } => c.transport_along(inner, &x, &v, ctx.tau[(i, n)], *s_weighted),
            Source::Combination(list) => list.iter().map(|(a, s)| a * s.eval_node(ctx, i, n)).sum(),
            _ => self.eval(&x, &v),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Source::Zero => true,
            Source::Lift { g, .. } => g.family == BoundaryFamily::Zero || g.amplitude == 0.0,
            Source::Combination(list) => list.iter().all(|(a, s)| *a == 0.0 || s.is_zero()),
            Source::Transport { inner, .. } => inner.is_zero(),
            _ => false,
        }
    }
}

/// Samples of `f(x, v)` on a [`PhaseGrid`] (`n_x × n_v`) with their source.
#[derive(Debug, Clone)]
pub struct Field {
    pub grid: Arc<PhaseGrid>,
    pub values: DMatrix<f64>,
    pub source: Arc<Source>,
}

impl Field {
    pub fn zeros(ctx: &Arc<TransportContext>) -> Self {
        Self {
            grid: ctx.grid.clone(),
            values: DMatrix::zeros(ctx.grid.n_x(), ctx.grid.n_v()),
            source: Arc::new(Source::Zero),
        }
    }

    /// Evaluates `source` on every grid node.
    pub fn from_source(ctx: &Arc<TransportContext>, source: Arc<Source>) -> Result<Self> {
        let values = ctx.evaluate_on_grid(&source)?;
        Ok(Self {
            grid: ctx.grid.clone(),
            values,
            source,
        })
    }

    pub fn from_fn<F>(ctx: &Arc<TransportContext>, f: F) -> Result<Self>
    where
        F: Fn(&Vec3, &Vec3) -> f64 + Send + Sync + 'static,
    {
        Self::from_source(ctx, Arc::new(Source::Analytic(Arc::new(f))))
    }

    pub fn eval(&self, x: &Vec3, v: &Vec3) -> f64 {
        self.source.eval(x, &VelPoint::free(*v))
    }

    /// `a f + b g`.
    pub fn combine(a: f64, f: &Field, b: f64, g: &Field) -> Field {
        Field {
            grid: f.grid.clone(),
            values: &f.values * a + &g.values * b,
            source: Arc::new(Source::Combination(vec![
                (a, f.source.clone()),
                (b, g.source.clone()),
            ])),
        }
    }

    pub fn scale(&self, a: f64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: &self.values * a,
            source: Arc::new(Source::Combination(vec![(a, self.source.clone())])),
        }
    }
}

/// Grid, kernel parameters and the caches shared by every operator.
pub struct TransportContext {
    pub grid: Arc<PhaseGrid>,
    pub params: KernelParams,
    pub nu: Vec<f64>,
    /// Exit times at grid nodes, `n_x × n_v`.
    pub tau: DMatrix<f64>,
    pub basis: PolyBasis,
    pub fitter: Fitter,
    pub interp: VelocityInterpolator,
    k_matrix: OnceLock<DMatrix<f64>>,
    gamma_op: OnceLock<GammaGrid>,
}

impl std::fmt::Debug for TransportContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransportContext")
            .field("n_x", &self.grid.n_x())
            .field("n_v", &self.grid.n_v())
            .field("params", &self.params)
            .finish()
    }
}

/// A fitted kernel image: polynomial coefficients plus leave-one-out error
/// per velocity node.
#[derive(Debug, Clone)]
pub struct PolyFit {
    pub coef: DMatrix<f64>,
    pub loo: Vec<f64>,
}

impl TransportContext {
    pub fn new(domain: &DomainSpec, params: KernelParams, config: GridConfig) -> Result<Arc<Self>> {
        params.validate()?;
        params.require_exact()?;
        let grid = Arc::new(PhaseGrid::new(domain, config)?);
        let nu: Vec<f64> = grid
            .v_rule
            .nodes
            .iter()
            .map(|v| nu_radial(params.c(), v.norm()))
            .collect();
        let (n_x, n_v) = (grid.n_x(), grid.n_v());
        let rows: Vec<Vec<f64>> = (0..n_x)
            .into_par_iter()
            .map(|i| {
                let x = grid.x_nodes[i];
                grid.v_rule
                    .nodes
                    .iter()
                    .map(|v| domain.exit_time(&x, v).unwrap_or(0.0))
                    .collect()
            })
            .collect();
        let tau = DMatrix::from_fn(n_x, n_v, |i, n| rows[i][n]);
        let basis = PolyBasis::new(config.fit_degree, domain.center, domain.semiaxes[0])?;
        let fitter = Fitter::new(&basis, &grid.x_nodes)?;
        let interp = VelocityInterpolator::new(&grid.v_rule);
        Ok(Arc::new(Self {
            grid,
            params,
            nu,
            tau,
            basis,
            fitter,
            interp,
            k_matrix: OnceLock::new(),
            gamma_op: OnceLock::new(),
        }))
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.grid.domain
    }

    #[inline]
    pub fn nu_at(&self, v: &VelPoint) -> f64 {
        match v.node {
            Some(n) => self.nu[n],
            None => nu_radial(self.params.c(), v.v.norm()),
        }
    }

    #[inline]
    fn panels(&self, nu: f64, tau: f64) -> usize {
        self.grid
            .config
            .line_panels
            .max((nu * tau / 4.0).ceil() as usize)
    }

    /// `Jg(x, v)`; zero on the grazing set `N < GRAZING_TOL`.
    pub fn lift(&self, g: &BoundaryData, x: &Vec3, v: &VelPoint) -> f64 {
        if g.family == BoundaryFamily::Zero || v.v.norm_squared() == 0.0 {
            return 0.0;
        }
        let Ok(tr) = self.domain().trace(x, &v.v) else {
            return 0.0;
        };
        if tr.n_factor < GRAZING_TOL {
            return 0.0;
        }
        (-self.nu_at(v) * tr.tau).exp() * g.eval(&tr.normal, &v.v)
    }

    /// Polynomial coefficients at a node, or interpolated in velocity.
    pub fn coefficients_at(&self, coef: &DMatrix<f64>, v: &VelPoint) -> Vec<f64> {
        let mut out = vec![0.0; coef.nrows()];
        self.coefficients_into(coef, v, &mut out);
        out
    }

    pub fn coefficients_into(&self, coef: &DMatrix<f64>, v: &VelPoint, out: &mut [f64]) {
        let m = coef.nrows();
        let data = coef.as_slice();
        match v.node {
            Some(n) => out.copy_from_slice(&data[n * m..(n + 1) * m]),
            None => {
                out.fill(0.0);
                let st = self.interp.stencil(&v.v);
                for k in 0..st.len as usize {
                    let n = st.idx[k] as usize;
                    let w = st.w[k];
                    for (o, c) in out.iter_mut().zip(&data[n * m..(n + 1) * m]) {
                        *o += w * c;
                    }
                }
            }
        }
    }

    /// Polynomial source value at `(x, v)`.
    pub fn poly_value(&self, coef: &DMatrix<f64>, x: &Vec3, v: &VelPoint) -> f64 {
        let mut c = [0.0; MAX_MONOMIALS];
        let m = coef.nrows();
        self.coefficients_into(coef, v, &mut c[..m]);
        self.basis.dot(x, &c[..m])
    }

    /// Exact `∫_0^τ e^{-ν s} w(s) P(x - s v) ds` for a polynomial source:
    /// `P` restricted to the ray is a polynomial in `s`, integrated through
    /// its values at `degree + 1` points against exponential moments.
    pub fn poly_transport(
        &self,
        coef: &DMatrix<f64>,
        x: &Vec3,
        v: &VelPoint,
        tau: f64,
        s_weighted: bool,
    ) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let mut c = [0.0; MAX_MONOMIALS];
        let m = coef.nrows();
        self.coefficients_into(coef, v, &mut c[..m]);
        let d = self.basis.degree;
        let shift = usize::from(s_weighted);
        let mut moments = [0.0; MAX_FIT_DEGREE + 2];
        exp_moments(self.nu_at(v) * tau, 1.0, &mut moments[..=d + shift]);
        let scale = if s_weighted { tau * tau } else { tau };
        let mut total = 0.0;
        for j in 0..=d {
            let s = tau * self.basis.ray_nodes[j];
            let w: f64 = (0..=d)
                .map(|k| self.basis.lagrange[j][k] * moments[k + shift])
                .sum();
            total += w * self.basis.dot(&(x - v.v * s), &c[..m]);
        }
        scale * total
    }

    /// `∫_0^τ e^{-ν s} w(s) h(x - s v, v) ds`.
    pub fn transport_along(
        &self,
        inner: &Source,
        x: &Vec3,
        v: &VelPoint,
        tau: f64,
        s_weighted: bool,
    ) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let nu = self.nu_at(v);
        let panels = self.panels(nu, tau);
        let mut total = 0.0;
        match inner {
            Source::Zero => {}
            Source::Poly { coef, .. } => total = self.poly_transport(coef, x, v, tau, s_weighted),
            _ => {
                visit_line_nodes(tau, panels, |s, w| {
                    let weight = if s_weighted { s } else { 1.0 };
                    total += w * weight * (-nu * s).exp() * inner.eval(&(x - v.v * s), v);
                });
            }
        }
        total
    }

    pub fn evaluate_on_grid(&self, source: &Source) -> Result<DMatrix<f64>> {
        let (n_x, n_v) = (self.grid.n_x(), self.grid.n_v());
        if source.is_zero() {
            return Ok(DMatrix::zeros(n_x, n_v));
        }
        let rows: Vec<Vec<f64>> = (0..n_x)
            .into_par_iter()
            .map(|i| (0..n_v).map(|n| source.eval_node(self, i, n)).collect())
            .collect();
        for (i, row) in rows.iter().enumerate() {
            if let Some(n) = row.iter().position(|y| !y.is_finite()) {
                return Err(KsdError::NonFinite {
                    index: i * n_v + n,
                    location: format!("ray from x node {i} along velocity node {n}"),
                });
            }
        }
        Ok(DMatrix::from_fn(n_x, n_v, |i, n| rows[i][n]))
    }

    /// `K` as an `n_v × n_v` matrix on the master rule. Rows are computed
    /// for the nodes of one azimuth and rotated to the others.
    pub fn k_matrix(&self) -> &DMatrix<f64> {
        self.k_matrix.get_or_init(|| self.build_k_matrix())
    }

    fn build_k_matrix(&self) -> DMatrix<f64> {
        let rule = &self.grid.v_rule;
        let n_v = rule.len();
        let n_phi = rule.n_phi;
        let mut k = DMatrix::zeros(n_v, n_v);
        if self.params.c() == 0.0 {
            return k;
        }
        let res = self.grid.config.kernel_rule;
        let reps: Vec<usize> = (0..rule.n_r)
            .flat_map(|ir| (0..rule.n_theta).map(move |it| rule.index(ir, it, 0)))
            .collect();
        let rows: Vec<Vec<f64>> = reps
            .par_iter()
            .map(|&n| {
                let v = rule.nodes[n];
                let radius = (v.norm() + rule.v_max).min(KERNEL_REACH);
                let local = VelocityRule::oriented(
                    v,
                    radius,
                    res.n_r,
                    res.n_theta,
                    res.n_phi,
                    frame_from_axis(&v),
                    0.0,
                )
                .expect("valid rule");
                let mut row = vec![0.0; n_v];
                for (vs, w) in local.nodes.iter().zip(&local.weights) {
                    if vs == &v {
                        continue;
                    }
                    let st = self.interp.stencil(vs);
                    if st.len == 0 {
                        continue;
                    }
                    let kw = w * grad_kernel_unchecked(&self.params, &v, vs);
                    for j in 0..st.len as usize {
                        row[st.idx[j] as usize] += kw * st.w[j];
                    }
                }
                row
            })
            .collect();
        for (rep, row) in reps.iter().zip(&rows) {
            for shift in 0..n_phi {
                let n = self.interp.rotate(*rep, shift);
                for (m, val) in row.iter().enumerate() {
                    if *val != 0.0 {
                        k[(n, self.interp.rotate(m, shift))] = *val;
                    }
                }
            }
        }
        k
    }

    /// Grid values of `K h`.
    pub fn apply_k_values(&self, values: &DMatrix<f64>) -> DMatrix<f64> {
        if self.params.c() == 0.0 {
            return DMatrix::zeros(values.nrows(), values.ncols());
        }
        values * self.k_matrix().transpose()
    }

    pub fn fit(&self, values: &DMatrix<f64>) -> PolyFit {
        let coef = self.fitter.fit(values);
        let loo = self.fitter.loo_errors(values, &coef);
        PolyFit { coef, loo }
    }

    /// The grid form of `Γ`, built on first use.
    pub fn gamma_grid(&self) -> &GammaGrid {
        self.gamma_op.get_or_init(|| GammaGrid::new(self))
    }

    /// `S_Ω 1 = (1 - e^{-ν τ})/ν` at node `(i, n)`.
    pub fn s_of_one(&self, i: usize, n: usize) -> f64 {
        let nu = self.nu[n];
        let tau = self.tau[(i, n)];
        if nu == 0.0 {
            tau
        } else {
            -(-nu * tau).exp_m1() / nu
        }
    }
}

/// `Jg` on the grid.
pub fn apply_j(ctx: &Arc<TransportContext>, g: &BoundaryData) -> Result<Field> {
    let source = if g.family == BoundaryFamily::Zero || g.amplitude == 0.0 {
        Arc::new(Source::Zero)
    } else {
        Arc::new(Source::Lift {
            ctx: ctx.clone(),
            g: *g,
        })
    };
    Field::from_source(ctx, source)
}

/// Number of grid nodes of `Jg` on the grazing set.
pub fn grazing_count(ctx: &TransportContext) -> usize {
    let grid = &ctx.grid;
    let mut count = 0;
    for x in &grid.x_nodes {
        for v in &grid.v_rule.nodes {
            if let Ok(tr) = grid.domain.trace(x, v) {
                if tr.n_factor < GRAZING_TOL {
                    count += 1;
                }
            }
        }
    }
    count
}

fn transport_source(
    ctx: &Arc<TransportContext>,
    inner: Arc<Source>,
    s_weighted: bool,
) -> Arc<Source> {
    if inner.is_zero() {
        Arc::new(Source::Zero)
    } else {
        Arc::new(Source::Transport {
            ctx: ctx.clone(),
            inner,
            s_weighted,
        })
    }
}

/// `S_Ω h` evaluated along exact characteristics of `h`'s source.
pub fn apply_s(ctx: &Arc<TransportContext>, h: &Field) -> Result<Field> {
    Field::from_source(ctx, transport_source(ctx, h.source.clone(), false))
}

/// `S_Ω` applied to a closure `h(x, v)`.
pub fn apply_s_fn<F>(ctx: &Arc<TransportContext>, h: F) -> Result<Field>
where
    F: Fn(&Vec3, &Vec3) -> f64 + Send + Sync + 'static,
{
    let inner = Arc::new(Source::Analytic(Arc::new(h)));
    Field::from_source(ctx, transport_source(ctx, inner, false))
}

/// `S_{Ω,s} h = ∫_0^τ e^{-ν s} s h(x - s v, v) ds`.
pub fn apply_s_weighted_s(ctx: &Arc<TransportContext>, h: &Field) -> Result<Field> {
    Field::from_source(ctx, transport_source(ctx, h.source.clone(), true))
}

/// `K h` on the grid; its source is the `x`-polynomial fit of the values.
pub fn apply_k(ctx: &Arc<TransportContext>, h: &Field) -> Result<(Field, PolyFit)> {
    let values = ctx.apply_k_values(&h.values);
    let fit = ctx.fit(&values);
    let source = Arc::new(Source::Poly {
        ctx: ctx.clone(),
        coef: Arc::new(fit.coef.clone()),
    });
    Ok((
        Field {
            grid: ctx.grid.clone(),
            values,
            source,
        },
        fit,
    ))
}

/// `S_Ω K h`.
pub fn apply_sk(ctx: &Arc<TransportContext>, h: &Field) -> Result<Field> {
    let (kh, _) = apply_k(ctx, h)?;
    apply_s(ctx, &kh)
}

/// Field whose source is the `x`-polynomial with coefficients `coef`.
pub fn poly_field(ctx: &Arc<TransportContext>, coef: DMatrix<f64>) -> Result<Field> {
    let source = Arc::new(Source::Poly {
        ctx: ctx.clone(),
        coef: Arc::new(coef),
    });
    Field::from_source(ctx, source)
}

/// `∇_x τ(x, v) = -n(q)/(|v| N(x, v))`.
pub fn exit_time_gradient(domain: &DomainSpec, x: &Vec3, v: &Vec3) -> Result<Vec3> {
    let tr = domain.trace(x, v)?;
    Ok(-tr.normal / (v.norm() * tr.n_factor))
}

/// Boundary factor of `∇_x Jg`: `-n(q)/(|v| N) e^{-ν τ}`.
pub fn lift_xderiv_factor(
    domain: &DomainSpec,
    params: &KernelParams,
    x: &Vec3,
    v: &Vec3,
) -> Result<Vec3> {
    let tr = domain.trace(x, v)?;
    let nu = nu_radial(params.c(), v.norm());
    Ok(-tr.normal / (v.norm() * tr.n_factor) * (-nu * tr.tau).exp())
}

/// Sparse loss weights and gain samples for one representative node.
type NodeTables = (Vec<(u32, f64)>, Vec<GainSample>);

#[derive(Debug, Clone, Copy)]
struct GainSample {
    weight: f64,
    a: Stencil,
    b: Stencil,
}

/// `Γ(h₁, h₂)` on the grid: products of interpolated grid values at the
/// post-collision velocities. Samples are built for one azimuth and rotated.
#[derive(Debug, Clone)]
pub struct GammaGrid {
    reps: Vec<usize>,
    /// Loss weights per representative row: `Σ w e^{-|v*|²/2}|v - v*|` spread
    /// over master nodes.
    loss_rows: Vec<Vec<(u32, f64)>>,
    gain_rows: Vec<Vec<GainSample>>,
}

impl GammaGrid {
    fn new(ctx: &TransportContext) -> Self {
        let rule = &ctx.grid.v_rule;
        let res = ctx.grid.config.gamma_rule;
        let vstar = VelocityRule::new(Vec3::zeros(), res.v_max, res.n_r, res.n_theta, res.n_phi)
            .expect("valid rule");
        let sphere = SphereRule::new(res.sphere_n);
        let c = ctx.params.c();
        let reps: Vec<usize> = (0..rule.n_r)
            .flat_map(|ir| (0..rule.n_theta).map(move |it| rule.index(ir, it, 0)))
            .collect();
        let built: Vec<NodeTables> = reps
            .par_iter()
            .map(|&n| {
                let v = rule.nodes[n];
                let mut loss = vec![0.0; rule.len()];
                let mut gain = Vec::new();
                for (vs, w) in vstar.nodes.iter().zip(&vstar.weights) {
                    let un = (v - vs).norm();
                    let base = w * (-0.5 * vs.norm_squared()).exp() * un;
                    let st = ctx.interp.stencil(vs);
                    for k in 0..st.len as usize {
                        loss[st.idx[k] as usize] += base * st.w[k];
                    }
                    if un == 0.0 {
                        continue;
                    }
                    let mid = (v + vs) * 0.5;
                    for (s, ws) in sphere.nodes.iter().zip(&sphere.weights) {
                        let vp = mid + s * (0.5 * un);
                        let vsp = mid - s * (0.5 * un);
                        let a = ctx.interp.stencil(&vp);
                        let b = ctx.interp.stencil(&vsp);
                        if a.len == 0 || b.len == 0 {
                            continue;
                        }
                        gain.push(GainSample {
                            weight: 0.25 * c * base * ws,
                            a,
                            b,
                        });
                    }
                }
                let loss: Vec<(u32, f64)> = loss
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(m, w)| (m as u32, c * PI * w))
                    .collect();
                (loss, gain)
            })
            .collect();
        let (loss_rows, gain_rows) = built.into_iter().unzip();
        Self {
            reps,
            loss_rows,
            gain_rows,
        }
    }

    /// `Γ(h₁, h₂)` at representative row `r` for velocity rows already
    /// rotated to that row's azimuth.
    fn eval_rep(&self, r: usize, h1: &[f64], h2: &[f64]) -> f64 {
        let n = self.reps[r];
        let mut loss = 0.0;
        if h1[n] != 0.0 {
            for (m, w) in &self.loss_rows[r] {
                loss += w * h2[*m as usize];
            }
            loss *= h1[n];
        }
        let mut gain = 0.0;
        for s in &self.gain_rows[r] {
            let a = s.a.apply(h1);
            if a == 0.0 {
                continue;
            }
            gain += s.weight * a * s.b.apply(h2);
        }
        PI.powf(-0.75) * (gain - loss)
    }

    /// `Γ(h₁, h₂)` at every velocity node for a block of `x` rows. Each
    /// representative's samples are reused across the block and all azimuths.
    pub fn eval_block(
        &self,
        ctx: &TransportContext,
        h1: &[Vec<f64>],
        h2: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let n_phi = ctx.interp.n_phi();
        let rotated = |rows: &[Vec<f64>]| -> Vec<Vec<Vec<f64>>> {
            rows.iter()
                .map(|h| {
                    (0..n_phi)
                        .map(|shift| {
                            (0..h.len())
                                .map(|m| h[ctx.interp.rotate(m, shift)])
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let r1 = rotated(h1);
        let r2 = rotated(h2);
        let mut out: Vec<Vec<f64>> = h1.iter().map(|h| vec![0.0; h.len()]).collect();
        for r in 0..self.reps.len() {
            for (k, row) in out.iter_mut().enumerate() {
                for shift in 0..n_phi {
                    row[ctx.interp.rotate(self.reps[r], shift)] =
                        self.eval_rep(r, &r1[k][shift], &r2[k][shift]);
                }
            }
        }
        out
    }

    pub fn representatives(&self) -> usize {
        self.reps.len()
    }
}

/// Grid values of `Γ(h₁, h₂)`.
pub fn apply_gamma_values(
    ctx: &Arc<TransportContext>,
    h1: &DMatrix<f64>,
    h2: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (n_x, n_v) = (h1.nrows(), h1.ncols());
    if ctx.params.c() == 0.0 {
        return DMatrix::zeros(n_x, n_v);
    }
    let op = ctx.gamma_grid();
    let active: Vec<usize> = (0..n_x)
        .filter(|&i| h1.row(i).iter().any(|y| *y != 0.0) && h2.row(i).iter().any(|y| *y != 0.0))
        .collect();
    let blocks: Vec<(Vec<usize>, Vec<Vec<f64>>)> = active
        .par_chunks(GAMMA_BLOCK)
        .map(|idx| {
            let rows1: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| h1.row(i).iter().copied().collect())
                .collect();
            let rows2: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| h2.row(i).iter().copied().collect())
                .collect();
            (idx.to_vec(), op.eval_block(ctx, &rows1, &rows2))
        })
        .collect();
    let mut out = DMatrix::zeros(n_x, n_v);
    for (idx, rows) in blocks {
        for (i, row) in idx.into_iter().zip(rows) {
            for (n, y) in row.into_iter().enumerate() {
                out[(i, n)] = y;
            }
        }
    }
    out
}

const GAMMA_BLOCK: usize = 8;

/// `Γ(h₁, h₂)` on the grid, with its `x`-polynomial fit as source.
pub fn apply_gamma(
    ctx: &Arc<TransportContext>,
    h1: &Field,
    h2: &Field,
) -> Result<(Field, PolyFit)> {
    let values = apply_gamma_values(ctx, &h1.values, &h2.values);
    let fit = ctx.fit(&values);
    let source = Arc::new(Source::Poly {
        ctx: ctx.clone(),
        coef: Arc::new(fit.coef.clone()),
    });
    Ok((
        Field {
            grid: ctx.grid.clone(),
            values,
            source,
        },
        fit,
    ))
}

/// Residual of `f = Jg + S K f + S φ` in `|·|_{∞,α}` on a deterministic
/// subsample of grid nodes. `K f` along each characteristic is computed from
/// `f`'s source at the ray points, independently of any fitted image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    pub value: f64,
    pub nodes: usize,
}

pub fn transport_residual(
    ctx: &Arc<TransportContext>,
    f: &Field,
    g: &BoundaryData,
    phi: Option<&Field>,
    samples: usize,
    seed: u64,
) -> Result<Residual> {
    let (n_x, n_v) = (ctx.grid.n_x(), ctx.grid.n_v());
    let picks = residual_nodes(n_x, n_v, samples, seed);
    let alpha = ctx.params.alpha;
    let lift = Source::Lift {
        ctx: ctx.clone(),
        g: *g,
    };
    let with_k = ctx.params.c() != 0.0;
    let k = if with_k { Some(ctx.k_matrix()) } else { None };
    let values: Vec<f64> = picks
        .par_iter()
        .map(|&(i, n)| {
            let x = ctx.grid.x_nodes[i];
            let v = ctx.grid.velocity(n);
            let vp = VelPoint { v, node: Some(n) };
            let mut r = f.source.eval_node(ctx, i, n) - lift.eval(&x, &vp);
            if let Some(phi) = phi {
                r -= ctx.transport_along(&phi.source, &x, &vp, ctx.tau[(i, n)], false);
            }
            if let Some(k) = k {
                let tau = ctx.tau[(i, n)];
                let nu = ctx.nu[n];
                let panels = ctx.panels(nu, tau);
                let mut skf = 0.0;
                let mut fy = vec![0.0; n_v];
                visit_line_nodes(tau, panels, |s, w| {
                    let y = x - v * s;
                    for (m, slot) in fy.iter_mut().enumerate() {
                        *slot = f.source.eval(
                            &y,
                            &VelPoint {
                                v: ctx.grid.velocity(m),
                                node: Some(m),
                            },
                        );
                    }
                    let kf: f64 = k.row(n).iter().zip(&fy).map(|(a, b)| a * b).sum();
                    skf += w * (-nu * s).exp() * kf;
                });
                r -= skf;
            }
            (alpha * v.norm_squared()).exp() * r.abs()
        })
        .collect();
    Ok(Residual {
        value: values.iter().fold(0.0, |a: f64, b| a.max(*b)),
        nodes: picks.len(),
    })
}

/// Deterministic subsample of grid nodes: every velocity shell and every
/// `x` node is hit when `samples` allows.
pub fn residual_nodes(n_x: usize, n_v: usize, samples: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n_x * n_v;
    if samples >= total {
        return (0..n_x)
            .flat_map(|i| (0..n_v).map(move |n| (i, n)))
            .collect();
    }
    let mut rng = stream_rng(seed, 0x7e5);
    (0..samples)
        .map(|k| {
            (
                (k * 7919 + rng.random_range(0..n_x)) % n_x,
                rng.random_range(0..n_v),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_config() -> GridConfig {
        GridConfig {
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
        }
    }

    fn ctx(c: f64) -> Arc<TransportContext> {
        let d = DomainSpec::ball(Vec3::zeros(), 0.05).unwrap();
        TransportContext::new(&d, KernelParams::hard_sphere(c), small_config()).unwrap()
    }

    #[test]
    fn grid_nodes_are_interior() {
        let c = ctx(1.0);
        let g = &c.grid;
        assert_eq!(g.n_x(), 60);
        for x in &g.x_nodes {
            assert!(g.domain.boundary_distance(x).unwrap() > 1e-8 * g.domain.diameter);
        }
        assert!(g.v_rule.nodes.iter().all(|v| v.norm() > 0.0));
    }

    #[test]
    fn interpolation_reproduces_nodes_and_partitions_unity() {
        let c = ctx(1.0);
        let rule = &c.grid.v_rule;
        for (n, v) in rule.nodes.iter().enumerate() {
            let st = c.interp.stencil(v);
            let mut vals = vec![0.0; rule.len()];
            vals[n] = 1.0;
            assert_relative_eq!(st.apply(&vals), 1.0, epsilon = 1e-12);
        }
        let ones = vec![1.0; rule.len()];
        let st = c.interp.stencil(&Vec3::new(0.7, -1.1, 0.3));
        assert_relative_eq!(st.apply(&ones), 1.0, epsilon = 1e-12);
        assert_eq!(c.interp.stencil(&Vec3::new(7.0, 0.0, 0.0)).len, 0);
    }

    #[test]
    fn lift_examples() {
        let d = DomainSpec::unit_ball();
        let cfg = small_config();
        let c = TransportContext::new(&d, KernelParams::hard_sphere(1.0), cfg).unwrap();
        let g = BoundaryData::scaled_maxwellian(1.0, 0.0);
        let v = Vec3::x();
        let j = c.lift(&g, &Vec3::zeros(), &VelPoint::free(v));
        assert_relative_eq!(j, (-nu_radial(1.0, 1.0)).exp(), max_relative = 1e-14);
        let zero = apply_j(&c, &BoundaryData::zero()).unwrap();
        assert!(zero.values.iter().all(|y| *y == 0.0));
        let gm = BoundaryData::scaled_maxwellian(1.0, 1.0);
        let jf = apply_j(&c, &gm).unwrap();
        for i in 0..c.grid.n_x() {
            for n in 0..c.grid.n_v() {
                let v = c.grid.velocity(n);
                assert!(jf.values[(i, n)] <= (-v.norm_squared()).exp() + 1e-15);
            }
        }
    }

    #[test]
    fn transport_of_constants() {
        let c = ctx(1.0);
        let one = apply_s_fn(&c, |_, _| 1.0).unwrap();
        let sw = apply_s_weighted_s(&c, &Field::from_fn(&c, |_, _| 1.0).unwrap()).unwrap();
        for i in 0..c.grid.n_x() {
            for n in 0..c.grid.n_v() {
                let nu = c.nu[n];
                let tau = c.tau[(i, n)];
                assert_relative_eq!(
                    one.values[(i, n)],
                    (1.0 - (-nu * tau).exp()) / nu,
                    max_relative = 1e-12
                );
                let expect = (1.0 - (-nu * tau).exp() * (1.0 + nu * tau)) / (nu * nu);
                assert_relative_eq!(
                    sw.values[(i, n)],
                    expect,
                    max_relative = 1e-9,
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn exit_time_gradient_matches_differences() {
        let d = DomainSpec::ellipsoid(Vec3::zeros(), [1.0, 0.8, 0.6]).unwrap();
        let x = Vec3::new(0.2, -0.1, 0.15);
        let v = Vec3::new(0.3, 0.9, -0.4);
        let g = exit_time_gradient(&d, &x, &v).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let fd = (d.exit_time(&(x + e), &v).unwrap() - d.exit_time(&(x - e), &v).unwrap())
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * g.norm().max(1.0));
        }
    }

    #[test]
    fn k_of_x_independent_field_is_x_independent() {
        let c = ctx(1.0);
        let h = Field::from_fn(&c, |_, v| (-0.5 * v.norm_squared()).exp()).unwrap();
        let (kh, _) = apply_k(&c, &h).unwrap();
        for n in 0..c.grid.n_v() {
            let first = kh.values[(0, n)];
            for i in 1..c.grid.n_x() {
                assert_relative_eq!(
                    kh.values[(i, n)],
                    first,
                    max_relative = 1e-12,
                    epsilon = 1e-300
                );
            }
        }
    }

    #[test]
    fn k_matrix_rotation_matches_direct_row() {
        let c = ctx(1.0);
        let rule = &c.grid.v_rule;
        let res = c.grid.config.kernel_rule;
        let n = rule.index(2, 1, 3);
        let v = rule.nodes[n];
        let radius = (v.norm() + rule.v_max).min(KERNEL_REACH);
        // Rotated frame of the representative row.
        let rep = rule.nodes[rule.index(2, 1, 0)];
        let rot = nalgebra::Rotation3::from_axis_angle(
            &Vec3::z_axis(),
            3.0 * 2.0 * PI / rule.n_phi as f64,
        );
        let f = frame_from_axis(&rep);
        let frame = [rot * f[0], rot * f[1], rot * f[2]];
        let local =
            VelocityRule::oriented(v, radius, res.n_r, res.n_theta, res.n_phi, frame, 0.0).unwrap();
        let mut row = vec![0.0; rule.len()];
        for (vs, w) in local.nodes.iter().zip(&local.weights) {
            let st = c.interp.stencil(vs);
            for j in 0..st.len as usize {
                row[st.idx[j] as usize] += w * grad_kernel_unchecked(&c.params, &v, vs) * st.w[j];
            }
        }
        let k = c.k_matrix();
        for m in 0..rule.len() {
            assert!(
                (k[(n, m)] - row[m]).abs() < 1e-10 * (1.0 + row[m].abs()),
                "{m}: {} vs {}",
                k[(n, m)],
                row[m]
            );
        }
    }

    #[test]
    fn fitter_reproduces_polynomials() {
        let c = ctx(1.0);
        let h = Field::from_fn(&c, |x, v| {
            (1.0 + 3.0 * x.x - 2.0 * x.y * x.z * 100.0) * v.norm()
        })
        .unwrap();
        let fit = c.fit(&h.values);
        assert!(fit.loo.iter().all(|e| *e < 1e-9));
    }

    #[test]
    fn gamma_grid_difference_identity() {
        let c = ctx(1.0);
        let a = Field::from_fn(&c, |x, v| {
            (1.0 + x.x * 10.0) * (-0.5 * v.norm_squared()).exp()
        })
        .unwrap();
        let b = Field::from_fn(&c, |_, v| (-0.3 * (v - Vec3::x()).norm_squared()).exp()).unwrap();
        let d = &a.values - &b.values;
        let lhs = apply_gamma_values(&c, &a.values, &a.values)
            - apply_gamma_values(&c, &b.values, &b.values);
        let rhs = apply_gamma_values(&c, &a.values, &d) + apply_gamma_values(&c, &d, &b.values);
        let scale = lhs.amax();
        assert!(scale > 0.0);
        assert!((lhs - rhs).amax() <= 1e-12 * scale);
    }

    #[test]
    fn gamma_grid_matches_direct_quadrature() {
        let d = DomainSpec::ball(Vec3::zeros(), 0.05).unwrap();
        let cfg = GridConfig {
            n_x: 40,
            fit_degree: 1,
            ..GridConfig::default()
        };
        let c = TransportContext::new(&d, KernelParams::hard_sphere(1.0), cfg).unwrap();
        let h = |v: &Vec3| (-0.6 * v.x * v.x - 0.3 * (v.y * v.y + v.z * v.z)).exp();
        let f = Field::from_fn(&c, move |_, v| h(v)).unwrap();
        let grid = apply_gamma_values(&c, &f.values, &f.values);
        let q =
            crate::collision::GammaQuadrature::new(crate::collision::GammaResolution::default())
                .unwrap();
        let rule = &c.grid.v_rule;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for it in 0..rule.n_theta {
            let n = rule.index(4, it, 5);
            let v = rule.nodes[n];
            let direct = crate::collision::gamma(&c.params, h, h, &v, &q);
            let loss = crate::collision::gamma_loss(&c.params, h, h, &v, &q);
            worst = worst.max((grid[(0, n)] - direct).abs());
            scale = scale.max(loss.abs());
        }
        // Gain and loss nearly cancel; the grid error is set by velocity
        // interpolation and is measured against the loss term.
        assert!(worst < 0.03 * scale, "worst {worst} scale {scale}");
    }

    #[test]
    fn exp_moments_match_quadrature() {
        for (nu, tau) in [
            (0.0, 0.7),
            (1e-3, 2.0),
            (1.1, 0.05),
            (1.3, 7.0),
            (2.0, 40.0),
            (0.9, 9.0),
        ] {
            let mut m = [0.0; 7];
            exp_moments(nu, tau, &mut m);
            for (k, mk) in m.iter().enumerate() {
                let q = crate::quadrature::line_quadrature(
                    |s| (-nu * s).exp() * s.powi(k as i32),
                    tau,
                    64,
                );
                assert_relative_eq!(*mk, q, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn poly_transport_matches_line_quadrature() {
        let c = ctx(1.0);
        let m = c.basis.len();
        let coef = DMatrix::from_fn(m, c.grid.n_v(), |j, n| ((j * 7 + n * 3) % 11) as f64 - 5.0);
        let x = Vec3::new(0.01, -0.02, 0.015);
        for v in [
            Vec3::new(0.3, 0.1, -0.2),
            Vec3::new(1e-3, 0.0, 2e-3),
            Vec3::new(2.0, -1.0, 0.5),
        ] {
            let vp = VelPoint::free(v);
            let tau = c.domain().exit_time(&x, &v).unwrap();
            let nu = c.nu_at(&vp);
            let coefs = c.coefficients_at(&coef, &vp);
            for weighted in [false, true] {
                let q = crate::quadrature::line_quadrature(
                    |s| {
                        (-nu * s).exp()
                            * if weighted { s } else { 1.0 }
                            * c.basis.dot(&(x - v * s), &coefs)
                    },
                    tau,
                    64,
                );
                let exact = c.poly_transport(&coef, &x, &vp, tau, weighted);
                assert_relative_eq!(exact, q, max_relative = 1e-10, epsilon = 1e-14);
            }
        }
    }
}
