//! Quadrature rules: composite Gauss-Legendre on segments, polar rules on a
//! truncated velocity ball with a movable center, and product rules on S².

use std::collections::HashMap;
use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::legendre::GaussLegendre;

use crate::error::{KsdError, Result};
use crate::Vec3;

/// Gauss-Legendre nodes and weights on [-1, 1], nodes ascending.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    fn build(n: usize) -> Self {
        let n = NonZeroUsize::new(n.max(1)).unwrap();
        let mut pairs: Vec<(f64, f64)> = GaussLegendre::new(n).as_node_weight_pairs().to_vec();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Cached Gauss-Legendre rule with `n` nodes.
pub fn gauss_legendre(n: usize) -> Arc<GaussRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(GaussRule::build(n)))
        .clone()
}

/// Panel order used by all line quadratures.
pub const LINE_ORDER: usize = 8;

fn gl8() -> &'static GaussRule {
    static GL8: OnceLock<GaussRule> = OnceLock::new();
    GL8.get_or_init(|| GaussRule::build(LINE_ORDER))
}

/// Nodes and weights of the composite order-8 rule on `[0, l]`.
pub fn line_nodes(l: f64, n_panels: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = gl8();
    let n_panels = n_panels.max(1);
    let mut s = Vec::with_capacity(n_panels * LINE_ORDER);
    let mut w = Vec::with_capacity(n_panels * LINE_ORDER);
    if l <= 0.0 {
        return (s, w);
    }
    let h = l / n_panels as f64;
    for p in 0..n_panels {
        let a = p as f64 * h;
        for (x, wt) in rule.nodes.iter().zip(&rule.weights) {
            s.push(a + 0.5 * h * (x + 1.0));
            w.push(0.5 * h * wt);
        }
    }
    (s, w)
}

/// Calls `visit(s, w)` for every node of the composite order-8 rule on
/// `[0, l]`.
#[inline]
pub fn visit_line_nodes<F: FnMut(f64, f64)>(l: f64, n_panels: usize, mut visit: F) {
    if l <= 0.0 {
        return;
    }
    let rule = gl8();
    let n_panels = n_panels.max(1);
    let h = l / n_panels as f64;
    for p in 0..n_panels {
        let a = p as f64 * h;
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            visit(a + 0.5 * h * (x + 1.0), 0.5 * h * w);
        }
    }
}

/// Composite Gauss-Legendre (order 8 per panel) of `f` on `[0, l]`.
pub fn line_quadrature<F: FnMut(f64) -> f64>(mut f: F, l: f64, n_panels: usize) -> f64 {
    if l <= 0.0 {
        return 0.0;
    }
    let rule = gl8();
    let n_panels = n_panels.max(1);
    let h = l / n_panels as f64;
    let mut total = 0.0;
    for p in 0..n_panels {
        let a = p as f64 * h;
        let mut panel = 0.0;
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            panel += w * f(a + 0.5 * h * (x + 1.0));
        }
        total += 0.5 * h * panel;
    }
    total
}

/// Which ends of the segment carry an inverse-square-root singularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingularEnds {
    Start,
    End,
    Both,
}

/// Line quadrature for integrands that blow up like `s^{-1/2}` at one or
/// both ends. The singular half is mapped by `s = u²` so the transformed
/// integrand stays bounded.
pub fn line_quadrature_singular<F: FnMut(f64) -> f64>(
    mut f: F,
    l: f64,
    n_panels: usize,
    ends: SingularEnds,
) -> f64 {
    if l <= 0.0 {
        return 0.0;
    }
    match ends {
        SingularEnds::Start => {
            let sl = l.sqrt();
            line_quadrature(|u| 2.0 * u * f(u * u), sl, n_panels)
        }
        SingularEnds::End => {
            let sl = l.sqrt();
            line_quadrature(|u| 2.0 * u * f(l - u * u), sl, n_panels)
        }
        SingularEnds::Both => {
            let half = 0.5 * l;
            let sh = half.sqrt();
            let a = line_quadrature(|u| 2.0 * u * f(u * u), sh, n_panels);
            let b = line_quadrature(|u| 2.0 * u * f(l - u * u), sh, n_panels);
            a + b
        }
    }
}

/// Orthonormal frame `[e1, e2, e3]` with `e3` along `axis`. The helper
/// vector is `x̂` unless the axis is within ~25° of it, then `ŷ`.
pub fn frame_from_axis(axis: &Vec3) -> [Vec3; 3] {
    let e3 = axis.normalize();
    let helper = if e3.x.abs() > 0.9 {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(1.0, 0.0, 0.0)
    };
    let e1 = helper.cross(&e3).normalize();
    let e2 = e3.cross(&e1);
    [e1, e2, e3]
}

pub fn standard_frame() -> [Vec3; 3] {
    [Vec3::x(), Vec3::y(), Vec3::z()]
}

/// Polar product rule on the ball `|v - center| <= v_max`.
///
/// Node `(ir, it, ip)` sits at radius `radii[ir]`, polar cosine
/// `cos_theta[it]` and azimuth `phis[ip]` in `frame`; the flat index is
/// `(ir * n_theta + it) * n_phi + ip`.
#[derive(Debug, Clone)]
pub struct VelocityRule {
    pub center: Vec3,
    pub v_max: f64,
    pub n_r: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    pub phi_offset: f64,
    pub frame: [Vec3; 3],
    pub radii: Vec<f64>,
    pub cos_theta: Vec<f64>,
    pub phis: Vec<f64>,
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl VelocityRule {
    pub fn new(center: Vec3, v_max: f64, n_r: usize, n_theta: usize, n_phi: usize) -> Result<Self> {
        Self::oriented(center, v_max, n_r, n_theta, n_phi, standard_frame(), 0.0)
    }

    pub fn oriented(
        center: Vec3,
        v_max: f64,
        n_r: usize,
        n_theta: usize,
        n_phi: usize,
        frame: [Vec3; 3],
        phi_offset: f64,
    ) -> Result<Self> {
        Self::graded(center, v_max, n_r, n_theta, n_phi, frame, phi_offset, 1.0)
    }

    /// Radial nodes `r = v_max s^p` for Gauss nodes `s` on `[0, 1]`; `p > 1`
    /// clusters shells near the center.
    #[allow(clippy::too_many_arguments)]
    pub fn graded(
        center: Vec3,
        v_max: f64,
        n_r: usize,
        n_theta: usize,
        n_phi: usize,
        frame: [Vec3; 3],
        phi_offset: f64,
        power: f64,
    ) -> Result<Self> {
        if !(power >= 1.0 && power.is_finite()) {
            return Err(KsdError::InvalidParameter(format!(
                "radial grading power must be at least 1, got {power}"
            )));
        }
        if !(v_max > 0.0 && v_max.is_finite()) {
            return Err(KsdError::InvalidParameter(format!(
                "v_max must be positive, got {v_max}"
            )));
        }
        if n_r == 0 || n_theta == 0 || n_phi == 0 {
            return Err(KsdError::InvalidParameter(
                "velocity rule sizes must be positive".into(),
            ));
        }
        let gr = gauss_legendre(n_r);
        let gt = gauss_legendre(n_theta);
        let unit: Vec<f64> = gr.nodes.iter().map(|x| 0.5 * (x + 1.0)).collect();
        let radii: Vec<f64> = unit.iter().map(|s| v_max * s.powf(power)).collect();
        let r_weights: Vec<f64> = gr
            .weights
            .iter()
            .zip(&unit)
            .zip(&radii)
            .map(|((w, s), r)| 0.5 * w * v_max * power * s.powf(power - 1.0) * r * r)
            .collect();
        let dphi = 2.0 * PI / n_phi as f64;
        let phis: Vec<f64> = (0..n_phi).map(|k| phi_offset + k as f64 * dphi).collect();
        let trig: Vec<(f64, f64)> = phis.iter().map(|p| (p.cos(), p.sin())).collect();
        let mut nodes = Vec::with_capacity(n_r * n_theta * n_phi);
        let mut weights = Vec::with_capacity(n_r * n_theta * n_phi);
        for (r, wr) in radii.iter().zip(&r_weights) {
            for (ct, wt) in gt.nodes.iter().zip(&gt.weights) {
                let st = (1.0 - ct * ct).max(0.0).sqrt();
                for (c, s) in &trig {
                    let dir = frame[0] * (st * c) + frame[1] * (st * s) + frame[2] * *ct;
                    nodes.push(center + dir * *r);
                    weights.push(wr * wt * dphi);
                }
            }
        }
        Ok(Self {
            center,
            v_max,
            n_r,
            n_theta,
            n_phi,
            phi_offset,
            frame,
            radii,
            cos_theta: gt.nodes.clone(),
            phis,
            nodes,
            weights,
        })
    }

    #[inline]
    pub fn index(&self, ir: usize, it: usize, ip: usize) -> usize {
        (ir * self.n_theta + it) * self.n_phi + ip
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Weighted sum without finiteness checks.
    pub fn integrate<F: FnMut(&Vec3) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| w * f(v))
            .sum()
    }
}

/// `Σ w_i f(v_i)` over the rule; a non-finite integrand value is an error
/// naming the node.
pub fn velocity_quadrature<F: FnMut(&Vec3) -> f64>(mut f: F, rule: &VelocityRule) -> Result<f64> {
    let mut total = 0.0;
    for (i, (v, w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
        let y = f(v);
        if !y.is_finite() {
            return Err(KsdError::NonFinite {
                index: i,
                location: format!("v = ({:.6e}, {:.6e}, {:.6e})", v.x, v.y, v.z),
            });
        }
        total += w * y;
    }
    Ok(total)
}

/// Product rule on the unit sphere: `n` Gauss-Legendre nodes in `cos ψ`
/// times `2n` equispaced azimuths, polar axis `frame[2]`.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub n: usize,
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    pub fn new(n: usize) -> Self {
        Self::oriented(n, standard_frame())
    }

    pub fn oriented(n: usize, frame: [Vec3; 3]) -> Self {
        let n = n.max(1);
        let g = gauss_legendre(n);
        let n_phi = 2 * n;
        let dphi = 2.0 * PI / n_phi as f64;
        let mut nodes = Vec::with_capacity(n * n_phi);
        let mut weights = Vec::with_capacity(n * n_phi);
        for (ct, wt) in g.nodes.iter().zip(&g.weights) {
            let st = (1.0 - ct * ct).max(0.0).sqrt();
            for k in 0..n_phi {
                let p = k as f64 * dphi;
                nodes.push(frame[0] * (st * p.cos()) + frame[1] * (st * p.sin()) + frame[2] * *ct);
                weights.push(wt * dphi);
            }
        }
        Self { n, nodes, weights }
    }

    pub fn integrate<F: FnMut(&Vec3) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * f(s))
            .sum()
    }
}

/// Integral of `f` over S² with the `n × 2n` product rule.
pub fn sphere_quadrature<F: FnMut(&Vec3) -> f64>(f: F, n: usize) -> f64 {
    SphereRule::new(n).integrate(f)
}
