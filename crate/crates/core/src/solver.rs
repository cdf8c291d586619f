//! Picard series for the linear problem, the outer iteration for the
//! nonlinear one, and the smallness and contraction diagnostics.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KsdError, Result};
use crate::geometry::DomainSpec;
use crate::kernel::KernelParams;
use crate::norms::{full_norm, sup_norm_alpha, NormConfig};
use crate::report::{Check, Report};
use crate::transport::{
    apply_gamma, apply_gamma_values, apply_j, apply_s, transport_residual, BoundaryData, Field,
    GridConfig, Source, TransportContext,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_series_tol")]
    pub series_tol: f64,
    #[serde(default = "default_max_terms")]
    pub max_terms: usize,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_outer_tol")]
    pub outer_tol: f64,
    #[serde(default = "default_smallness_threshold")]
    pub smallness_threshold: f64,
    /// Grid nodes sampled by the residual check.
    #[serde(default = "default_residual_samples")]
    pub residual_samples: usize,
    #[serde(skip)]
    pub norm: NormConfig,
}

fn default_series_tol() -> f64 {
    1e-8
}
fn default_max_terms() -> usize {
    20
}
fn default_max_outer() -> usize {
    12
}
fn default_outer_tol() -> f64 {
    1e-8
}
fn default_smallness_threshold() -> f64 {
    0.15
}
fn default_residual_samples() -> usize {
    128
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            series_tol: default_series_tol(),
            max_terms: default_max_terms(),
            max_outer: default_max_outer(),
            outer_tol: default_outer_tol(),
            smallness_threshold: default_smallness_threshold(),
            residual_samples: default_residual_samples(),
            norm: NormConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.series_tol >= 0.0 && self.outer_tol >= 0.0) {
            return Err(KsdError::InvalidParameter(
                "series_tol and outer_tol must be nonnegative".into(),
            ));
        }
        if self.max_terms < 1 || self.max_outer < 1 {
            return Err(KsdError::InvalidParameter(
                "max_terms and max_outer must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TermRecord {
    pub index: usize,
    pub sup: f64,
    pub full: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuterRecord {
    pub index: usize,
    pub sup: f64,
    pub full: f64,
    /// `‖f_index - f_{index-1}‖`.
    pub diff: f64,
}

/// One line of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub index: usize,
    pub term_norm_sup: f64,
    pub term_norm_full: f64,
    pub diff_norm: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationHistory {
    pub terms: Vec<TermRecord>,
    pub outer: Vec<OuterRecord>,
    pub residual: Option<f64>,
    pub error_estimate: Option<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl IterationHistory {
    /// Series terms with the even-step ratio `|T_i|/|T_{i-2}|`, or outer steps
    /// with the difference ratio when the history has any.
    pub fn convergence_rows(&self) -> Vec<ConvergenceRow> {
        if self.outer.is_empty() {
            self.terms
                .iter()
                .enumerate()
                .map(|(k, t)| ConvergenceRow {
                    index: t.index,
                    term_norm_sup: t.sup,
                    term_norm_full: t.full,
                    diff_norm: t.full,
                    ratio: (k >= 2 && self.terms[k - 2].sup > 0.0)
                        .then(|| t.sup / self.terms[k - 2].sup),
                })
                .collect()
        } else {
            self.outer
                .iter()
                .enumerate()
                .map(|(k, o)| ConvergenceRow {
                    index: o.index,
                    term_norm_sup: o.sup,
                    term_norm_full: o.full,
                    diff_norm: o.diff,
                    ratio: (k >= 1 && self.outer[k - 1].diff > 0.0)
                        .then(|| o.diff / self.outer[k - 1].diff),
                })
                .collect()
        }
    }

    /// `|T_{i+2}|/|T_i|` over the recorded terms with `T_i != 0`.
    pub fn even_step_ratios(&self) -> Vec<f64> {
        self.terms
            .windows(3)
            .filter(|w| w[0].sup > 0.0)
            .map(|w| w[2].sup / w[0].sup)
            .collect()
    }

    pub fn outer_diff_ratios(&self) -> Vec<f64> {
        self.outer
            .windows(2)
            .filter(|w| w[0].diff > 0.0)
            .map(|w| w[1].diff / w[0].diff)
            .collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        let mut all = self
            .terms
            .iter()
            .flat_map(|t| [t.sup, t.full])
            .chain(self.outer.iter().flat_map(|o| [o.sup, o.full, o.diff]));
        if let Some(k) = all.position(|y| !(y.is_finite() && y >= 0.0)) {
            return Err(KsdError::NonFinite {
                index: k,
                location: "iteration history".into(),
            });
        }
        Ok(())
    }
}

/// The three quantities whose maximum must be small, and that maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Smallness {
    pub diam: f64,
    /// `√(R r) (1 + R/r)`.
    pub geom: f64,
    /// `‖Jg‖_{∞,α}`.
    pub jg_norm: f64,
    pub max: f64,
}

pub fn geometric_smallness(domain: &DomainSpec) -> f64 {
    let (big, small) = (domain.circumscribed_radius, domain.interior_radius);
    (big * small).sqrt() * (1.0 + big / small)
}

pub fn smallness_report(
    ctx: &Arc<TransportContext>,
    g: &BoundaryData,
    norm: &NormConfig,
) -> Result<Smallness> {
    let domain = ctx.domain();
    let diam = domain.diameter;
    let geom = geometric_smallness(domain);
    let jg = apply_j(ctx, g)?;
    let jg_norm = full_norm(&jg, norm)?.total;
    Ok(Smallness {
        diam,
        geom,
        jg_norm,
        max: diam.max(geom).max(jg_norm),
    })
}

/// A solved field with the data needed to judge its accuracy.
#[derive(Debug, Clone)]
pub struct Solution {
    pub field: Field,
    pub history: IterationHistory,
}

fn lift_source(ctx: &Arc<TransportContext>, g: &BoundaryData) -> Arc<Source> {
    if g.amplitude == 0.0 || g.family == crate::transport::BoundaryFamily::Zero {
        Arc::new(Source::Zero)
    } else {
        Arc::new(Source::Lift {
            ctx: ctx.clone(),
            g: *g,
        })
    }
}

fn first_term_source(
    ctx: &Arc<TransportContext>,
    g: &BoundaryData,
    phi: Option<&Field>,
) -> Arc<Source> {
    let lift = lift_source(ctx, g);
    match phi {
        Some(p) if !p.source.is_zero() => {
            let sphi = Arc::new(Source::Transport {
                ctx: ctx.clone(),
                inner: p.source.clone(),
                s_weighted: false,
            });
            if lift.is_zero() {
                sphi
            } else {
                Arc::new(Source::Combination(vec![(1.0, lift), (1.0, sphi)]))
            }
        }
        _ => lift,
    }
}

fn poly_transport_source(ctx: &Arc<TransportContext>, coef: DMatrix<f64>) -> Arc<Source> {
    if coef.iter().all(|c| *c == 0.0) {
        return Arc::new(Source::Zero);
    }
    Arc::new(Source::Transport {
        ctx: ctx.clone(),
        inner: Arc::new(Source::Poly {
            ctx: ctx.clone(),
            coef: Arc::new(coef),
        }),
        s_weighted: false,
    })
}

/// `max e^{α|v|²} S_Ω1(x, v) err(v)` over the grid.
fn transported_bound(ctx: &TransportContext, alpha: f64, per_velocity: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (n, e) in per_velocity.iter().enumerate() {
        if *e == 0.0 {
            continue;
        }
        let w = (alpha * ctx.grid.velocity(n).norm_squared()).exp();
        for i in 0..ctx.grid.n_x() {
            worst = worst.max(w * ctx.s_of_one(i, n) * e);
        }
    }
    worst
}

fn column_max_abs(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter()
        .map(|c| c.iter().fold(0.0f64, |a, y| a.max(y.abs())))
        .collect()
}

/// Consecutive non-decreasing even-index term norms that abort the series.
const STALL_STREAK: usize = 4;

/// True when the even-index sup norms fail to decrease `STALL_STREAK` times
/// in a row.
pub fn even_index_stalled(sups: &[f64]) -> bool {
    let mut streak = 0;
    for k in (2..sups.len()).step_by(2) {
        streak = if sups[k] >= sups[k - 2] {
            streak + 1
        } else {
            0
        };
        if streak >= STALL_STREAK {
            return true;
        }
    }
    false
}

/// `f = Σ_i (S K)^i (Jg + S φ)`, truncated once a term's full norm drops
/// below `series_tol` or after `max_terms` terms.
///
/// The error estimate bounds the transported fit error of every `K T_i` plus
/// the omitted `K T_last`.
pub fn solve_linear(
    ctx: &Arc<TransportContext>,
    g: &BoundaryData,
    phi: Option<&Field>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    cfg.validate()?;
    g.validate(cfg.norm.alpha)?;
    let alpha = cfg.norm.alpha;
    let mut history = IterationHistory::default();
    let smallness = smallness_report(ctx, g, &cfg.norm)?;
    if smallness.max > cfg.smallness_threshold {
        history.warnings.push(format!(
            "smallness max {:.4e} exceeds threshold {:.4e}; contraction is not certified",
            smallness.max, cfg.smallness_threshold
        ));
    }
    let t0_source = first_term_source(ctx, g, phi);
    let mut term = Field::from_source(ctx, t0_source.clone())?;
    let mut sum = term.values.clone();
    let (m, n_v) = (ctx.basis.len(), ctx.grid.n_v());
    let mut coef_sum = DMatrix::zeros(m, n_v);
    let mut fit_error = vec![0.0; n_v];
    let mut streak = 0;
    let mut index = 0;
    loop {
        let sup = sup_norm_alpha(&term, alpha)?;
        let full = if term.source.is_zero() {
            sup
        } else {
            full_norm(&term, &cfg.norm)?.total
        };
        history.terms.push(TermRecord { index, sup, full });
        if full < cfg.series_tol || term.source.is_zero() {
            history.converged = true;
            break;
        }
        if index >= 2 && index % 2 == 0 {
            streak = if sup >= history.terms[index - 2].sup {
                streak + 1
            } else {
                0
            };
            if streak >= STALL_STREAK {
                return Err(KsdError::NoContraction);
            }
        }
        if index + 1 >= cfg.max_terms {
            history.warnings.push(format!(
                "series stopped at max_terms = {} with term norm {full:.3e}",
                cfg.max_terms
            ));
            break;
        }
        let kvals = ctx.apply_k_values(&term.values);
        let fit = ctx.fit(&kvals);
        for (e, l) in fit_error.iter_mut().zip(&fit.loo) {
            *e += l;
        }
        coef_sum += &fit.coef;
        term = Field::from_source(ctx, poly_transport_source(ctx, fit.coef))?;
        sum += &term.values;
        index += 1;
    }
    // K of the last term is not part of the sum.
    let tail = column_max_abs(&ctx.apply_k_values(&term.values));
    let per_velocity: Vec<f64> = fit_error.iter().zip(&tail).map(|(a, b)| a + b).collect();
    let estimate = transported_bound(ctx, alpha, &per_velocity);
    let tail_source = poly_transport_source(ctx, coef_sum);
    let source = if tail_source.is_zero() {
        t0_source
    } else if t0_source.is_zero() {
        tail_source
    } else {
        Arc::new(Source::Combination(vec![
            (1.0, t0_source),
            (1.0, tail_source),
        ]))
    };
    let field = Field {
        grid: ctx.grid.clone(),
        values: sum,
        source,
    };
    let residual = transport_residual(
        ctx,
        &field,
        g,
        phi,
        cfg.residual_samples,
        ctx.grid.config.seed,
    )?;
    history.residual = Some(residual.value);
    history.error_estimate = Some(estimate);
    history.check_finite()?;
    Ok(Solution { field, history })
}

/// Outer iteration `f_0 = 0`, `f_{i+1} = L(g, Γ(f_i, f_i))` with `L` the
/// linear series solve; stops when `‖f_{i+1} - f_i‖ < outer_tol`.
pub fn solve_nonlinear(
    ctx: &Arc<TransportContext>,
    g: &BoundaryData,
    cfg: &SolverConfig,
) -> Result<Solution> {
    cfg.validate()?;
    let mut history = IterationHistory::default();
    let mut current = Field::zeros(ctx);
    let mut phi: Option<Field> = None;
    let mut last_linear = IterationHistory::default();
    let mut converged = false;
    for step in 1..=cfg.max_outer {
        let sol = solve_linear(ctx, g, phi.as_ref(), cfg)?;
        let diff_field = Field::combine(1.0, &sol.field, -1.0, &current);
        let diff = if current.source.is_zero() {
            full_norm(&sol.field, &cfg.norm)?.total
        } else {
            full_norm(&diff_field, &cfg.norm)?.total
        };
        let norm = full_norm(&sol.field, &cfg.norm)?;
        history.outer.push(OuterRecord {
            index: step,
            sup: norm.sup,
            full: norm.total,
            diff,
        });
        history.terms = sol.history.terms.clone();
        for w in &sol.history.warnings {
            if !history.warnings.contains(w) {
                history.warnings.push(w.clone());
            }
        }
        last_linear = sol.history;
        current = sol.field;
        let k = history.outer.len();
        if k >= 4 {
            let grew = |a: f64, b: f64| b > 0.0 && a >= 2.0 * b;
            let (now, before) = (&history.outer[k - 1], &history.outer[k - 4]);
            if grew(now.diff, before.diff) || grew(now.full, before.full) {
                return Err(KsdError::OutsideContractionRegime);
            }
        }
        if diff < cfg.outer_tol {
            converged = true;
            break;
        }
        if step < cfg.max_outer {
            let (gamma, _) = apply_gamma(ctx, &current, &current)?;
            phi = Some(gamma);
        }
    }
    if !converged {
        history.warnings.push(format!(
            "outer iteration stopped at max_outer = {}",
            cfg.max_outer
        ));
    }
    // Residual against Γ of the final iterate; the estimate adds the change
    // in the transported source since the last linear solve.
    let (gamma_final, fit_final) = apply_gamma(ctx, &current, &current)?;
    let residual = transport_residual(
        ctx,
        &current,
        g,
        Some(&gamma_final),
        cfg.residual_samples,
        ctx.grid.config.seed,
    )?;
    let change = match &phi {
        Some(p) => column_max_abs(&(&gamma_final.values - &p.values)),
        None => column_max_abs(&gamma_final.values),
    };
    let per_velocity: Vec<f64> = change
        .iter()
        .zip(&fit_final.loo)
        .map(|(a, b)| a + b)
        .collect();
    let estimate = last_linear.error_estimate.unwrap_or(0.0)
        + transported_bound(ctx, cfg.norm.alpha, &per_velocity);
    history.residual = Some(residual.value);
    history.error_estimate = Some(estimate);
    history.converged = converged;
    history.check_finite()?;
    Ok(Solution {
        field: current,
        history,
    })
}

/// `|(S K)² h|_{∞,α}/|h|_{∞,α}` for `h = Jg`.
pub fn contraction_ratio(ctx: &Arc<TransportContext>, g: &BoundaryData, alpha: f64) -> Result<f64> {
    let h = apply_j(ctx, g)?;
    let base = sup_norm_alpha(&h, alpha)?;
    if base == 0.0 || ctx.params.c() == 0.0 {
        return Ok(0.0);
    }
    let mut t = h;
    for _ in 0..2 {
        let fit = ctx.fit(&ctx.apply_k_values(&t.values));
        t = Field::from_source(ctx, poly_transport_source(ctx, fit.coef))?;
    }
    Ok(sup_norm_alpha(&t, alpha)? / base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionEntry {
    pub diam: f64,
    pub ratio: f64,
    /// `ratio / diam`.
    pub constant: f64,
}

/// Contraction ratios per domain with the linear-in-diameter and
/// smallest-domain checks.
pub fn contraction_report(
    domains: &[DomainSpec],
    params: &KernelParams,
    grid: GridConfig,
    g: &BoundaryData,
    alpha: f64,
) -> Result<(Report, Vec<ContractionEntry>)> {
    if domains.len() < 2 {
        return Err(KsdError::InvalidParameter(
            "contraction needs at least two domains".into(),
        ));
    }
    let mut entries = Vec::with_capacity(domains.len());
    for d in domains {
        let ctx = TransportContext::new(d, *params, grid)?;
        let ratio = contraction_ratio(&ctx, g, alpha)?;
        entries.push(ContractionEntry {
            diam: d.diameter,
            ratio,
            constant: ratio / d.diameter,
        });
    }
    entries.sort_by(|a, b| a.diam.total_cmp(&b.diam));
    let mut report = Report::new("contraction");
    for e in &entries {
        report.push(Check::diagnostic(
            &format!("ratio_diam_{}", e.diam),
            "|(S K)^2 h|_{inf,alpha} <= c diam |h|_{inf,alpha}",
            e.ratio,
            e.diam,
        ));
    }
    let smallest = entries[0];
    report.push(Check::bound(
        "ratio_smallest_below_half",
        "|(S K)^2 h| <= 1/2 |h|",
        smallest.ratio,
        0.5,
        0.0,
    ));
    if params.c() == 0.0 {
        report.push(Check::identity(
            "ratio_zero_without_collisions",
            "C = 0 => (S K)^2 h = 0",
            smallest.ratio,
            0.0,
            1e-300,
        ));
        return Ok((report, entries));
    }
    for pair in entries.windows(2) {
        let scale = pair[1].diam / pair[0].diam;
        let observed = pair[1].ratio / pair[0].ratio;
        report.push(Check::fitted(
            &format!("linear_scaling_{}_{}", pair[0].diam, pair[1].diam),
            "ratio(diam) proportional to diam, within 30%",
            observed,
            scale,
            (observed / scale - 1.0).abs() <= 0.3,
        ));
    }
    let largest = entries[entries.len() - 1];
    let scale = largest.diam / smallest.diam;
    if scale >= 4.0 - 1e-12 {
        let observed = largest.ratio / smallest.ratio;
        report.push(Check::fitted(
            "linear_scaling_full_range",
            "ratio(diam) proportional to diam, within 30%",
            observed,
            scale,
            (observed / scale - 1.0).abs() <= 0.3,
        ));
    }
    Ok((report, entries))
}

/// Largest deviation of `Γ(a,a) - Γ(b,b) = Γ(a, a-b) + Γ(a-b, b)` on the
/// grid, relative to the largest value of the left side.
pub fn gamma_difference_identity(ctx: &Arc<TransportContext>, a: &Field, b: &Field) -> f64 {
    let d = &a.values - &b.values;
    let lhs = apply_gamma_values(ctx, &a.values, &a.values)
        - apply_gamma_values(ctx, &b.values, &b.values);
    let rhs = apply_gamma_values(ctx, &a.values, &d) + apply_gamma_values(ctx, &d, &b.values);
    let scale = lhs.amax();
    if scale == 0.0 {
        return (lhs - rhs).amax();
    }
    (lhs - rhs).amax() / scale
}

/// `‖S Γ(h₁, h₂)‖ / ((1 + diam + √(Rr)(1 + R/r)) ‖h₁‖ ‖h₂‖)`.
pub fn bilinear_bound_constant(
    ctx: &Arc<TransportContext>,
    h1: &Field,
    h2: &Field,
    norm: &NormConfig,
) -> Result<f64> {
    let (gamma, _) = apply_gamma(ctx, h1, h2)?;
    let sg = apply_s(ctx, &gamma)?;
    let lhs = full_norm(&sg, norm)?.total;
    let d = ctx.domain();
    let scale = 1.0 + d.diameter + geometric_smallness(d);
    let rhs = scale * full_norm(h1, norm)?.total * full_norm(h2, norm)?.total;
    Ok(lhs / rhs)
}

/// Largest deviation between the `(n+1)`-term partial sum and
/// `Jg + S φ + S K F_n` built from the `n`-term partial sum `F_n`,
/// relative to the largest value.
pub fn series_consistency(
    ctx: &Arc<TransportContext>,
    g: &BoundaryData,
    phi: Option<&Field>,
    cfg: &SolverConfig,
    n: usize,
) -> Result<f64> {
    let fixed = |terms: usize| SolverConfig {
        series_tol: 0.0,
        max_terms: terms,
        residual_samples: 1,
        ..cfg.clone()
    };
    let short = solve_linear(ctx, g, phi, &fixed(n))?;
    let long = solve_linear(ctx, g, phi, &fixed(n + 1))?;
    let first = Field::from_source(ctx, first_term_source(ctx, g, phi))?;
    let fit = ctx.fit(&ctx.apply_k_values(&short.field.values));
    let next = Field::from_source(ctx, poly_transport_source(ctx, fit.coef))?;
    let rebuilt = &first.values + &next.values;
    let scale = long.field.values.amax().max(f64::MIN_POSITIVE);
    Ok((rebuilt - &long.field.values).amax() / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::MAX_FIT_DEGREE;
    use crate::Vec3;
    use approx::assert_relative_eq;

    fn small_grid() -> GridConfig {
        GridConfig {
            n_x: 40,
            n_r: 6,
            n_theta: 4,
            n_phi: 8,
            fit_degree: 2,
            kernel_rule: crate::kernel::MomentResolution {
                n_r: 12,
                n_theta: 8,
                n_phi: 8,
            },
            ..GridConfig::default()
        }
    }

    fn ctx(r0: f64, c: f64) -> Arc<TransportContext> {
        let d = DomainSpec::ball(Vec3::zeros(), r0).unwrap();
        TransportContext::new(&d, KernelParams::hard_sphere(c), small_grid()).unwrap()
    }

    fn cfg() -> SolverConfig {
        SolverConfig {
            residual_samples: 16,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn smallness_examples() {
        let c = ctx(0.05, 1.0);
        let s = smallness_report(&c, &BoundaryData::zero(), &NormConfig::default()).unwrap();
        assert_relative_eq!(s.diam, 0.1, max_relative = 1e-15);
        assert_relative_eq!(s.geom, 0.1, max_relative = 1e-15);
        assert_eq!(s.jg_norm, 0.0);
        assert_relative_eq!(s.max, 0.1, max_relative = 1e-15);
        assert_relative_eq!(geometric_smallness(&DomainSpec::unit_ball()).max(2.0), 2.0);
    }

    #[test]
    fn trivial_solves() {
        let c = ctx(0.05, 1.0);
        let zero = solve_linear(&c, &BoundaryData::zero(), None, &cfg()).unwrap();
        assert_eq!(zero.history.terms.len(), 1);
        assert!(zero.field.values.iter().all(|y| *y == 0.0));
        assert_eq!(zero.history.residual, Some(0.0));

        let free = ctx(0.05, 0.0);
        let g = BoundaryData::scaled_maxwellian(0.01, 0.25);
        let sol = solve_linear(&free, &g, None, &cfg()).unwrap();
        let jg = apply_j(&free, &g).unwrap();
        assert_eq!(sol.field.values, jg.values);
        assert!(sol.history.residual.unwrap() <= 1e-10);
        assert!(sol.history.terms[1..].iter().all(|t| t.full == 0.0));
    }

    #[test]
    fn series_converges_with_residual_within_estimate() {
        let c = ctx(0.025, 1.0);
        let g = BoundaryData::scaled_maxwellian(0.01, 0.25);
        let sol = solve_linear(&c, &g, None, &cfg()).unwrap();
        let h = &sol.history;
        assert!(h.converged);
        assert!(h.terms.len() <= 20);
        assert!(
            h.even_step_ratios().iter().all(|r| *r < 0.5),
            "{:?}",
            h.even_step_ratios()
        );
        let (res, est) = (h.residual.unwrap(), h.error_estimate.unwrap());
        assert!(res <= 10.0 * est, "residual {res} estimate {est}");
    }

    #[test]
    fn linearity_and_consistency() {
        let c = ctx(0.025, 1.0);
        let g = BoundaryData::tangential_bump(0.01, 0.3);
        let phi = Field::from_fn(&c, |x, v| {
            (1.0 + 10.0 * x.y) * 1e-3 * (-0.5 * v.norm_squared()).exp()
        })
        .unwrap();
        let fixed = SolverConfig {
            series_tol: 0.0,
            max_terms: 4,
            residual_samples: 1,
            ..SolverConfig::default()
        };
        let a = solve_linear(&c, &g, Some(&phi), &fixed).unwrap();
        let b = solve_linear(&c, &g.scaled(2.5), Some(&phi.scale(2.5)), &fixed).unwrap();
        let dev = (&b.field.values - &a.field.values * 2.5).amax() / b.field.values.amax();
        assert!(dev < 1e-8, "{dev}");
        assert!(series_consistency(&c, &g, Some(&phi), &fixed, 3).unwrap() < 1e-12);
    }

    #[test]
    fn stall_detection() {
        assert!(!even_index_stalled(&[1.0, 0.9, 0.5, 0.4, 0.3, 0.2, 0.1]));
        assert!(!even_index_stalled(&[
            1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0
        ]));
        assert!(even_index_stalled(&[
            1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0
        ]));
        assert!(!even_index_stalled(&[
            1.0, 0.0, 1.0, 0.0, 0.5, 0.0, 1.0, 0.0, 1.0
        ]));
    }

    #[test]
    fn contraction_report_without_collisions() {
        let domains: Vec<DomainSpec> = [0.025, 0.05]
            .iter()
            .map(|r| DomainSpec::ball(Vec3::zeros(), *r).unwrap())
            .collect();
        let (report, entries) = contraction_report(
            &domains,
            &KernelParams::hard_sphere(0.0),
            small_grid(),
            &BoundaryData::scaled_maxwellian(0.01, 0.25),
            0.25,
        )
        .unwrap();
        assert!(entries.iter().all(|e| e.ratio == 0.0));
        assert!(report.all_pass());
        assert!(MAX_FIT_DEGREE >= small_grid().fit_degree);
    }

    #[test]
    fn nonlinear_zero_data() {
        let c = ctx(0.025, 1.0);
        let sol = solve_nonlinear(&c, &BoundaryData::zero(), &cfg()).unwrap();
        assert_eq!(sol.history.outer.len(), 1);
        assert!(sol.field.values.iter().all(|y| *y == 0.0));
    }

    #[test]
    fn nonlinear_converges_on_small_ball() {
        let c = ctx(0.025, 1.0);
        let g = BoundaryData::scaled_maxwellian(0.01, 0.25);
        let sol = solve_nonlinear(&c, &g, &cfg()).unwrap();
        let h = &sol.history;
        assert!(h.converged, "{:?}", h.outer);
        let ratios = h.outer_diff_ratios();
        assert!(ratios.iter().all(|r| *r <= 0.6), "{ratios:?}");
        let (res, est) = (h.residual.unwrap(), h.error_estimate.unwrap());
        assert!(res <= 10.0 * est, "residual {res} estimate {est}");
        assert!(gamma_difference_identity(&c, &sol.field, &apply_j(&c, &g).unwrap()) < 1e-10);
    }
}
