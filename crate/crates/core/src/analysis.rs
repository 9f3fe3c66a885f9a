//! Convergence-bound machinery for layer-wise selective aggregation.
//!
//! With `c = 1 - n/K` (the fraction of participants left out of each layer):
//!
//! ```text
//! A = 2 xi2 eta^2 L^2 c (1 + beta c)
//! B = (xi1 / xi2) A + c G^2 / 2
//! gap(t) <= A^t gap(0) + B (1 - A^t) / (1 - A)
//! ```
//!
//! The constants come from smoothness (`beta`), the layer gradient
//! divergence relation `|grad F_{k,l}|^2 <= xi1 + xi2 |grad F|^2`, and the
//! gradient bound `|grad F|^2 <= G^2`. `estimate_constants` fits them to a
//! simulation trace so that every observation is dominated, and
//! `lemma1_check` compares the measured per-layer gap against the FedAvg
//! shadow model with `4 eta^2 c^2 (xi1 + xi2 |grad F|^2)`.

use serde::Serialize;
use thiserror::Error;

use crate::trace::TraceRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("xi2 must be > 0 under the gradient divergence assumption, got {0}")]
    Xi2NotPositive(f64),
    #[error("invalid bound parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("contraction factor A = {0} is not below 1; the gap has no finite limit")]
    NoContraction(f64),
    #[error("trace needs at least {needed} records, got {found}")]
    TraceTooShort { needed: usize, found: usize },
    #[error("round {0} has no shadow gap measurements")]
    MissingShadow(usize),
    #[error("trace records disagree on {0}")]
    InconsistentTrace(&'static str),
}

/// Inputs to the bound formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundParams {
    pub beta: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub g: f64,
    pub eta: f64,
    pub layers: usize,
    pub n: usize,
    pub k: usize,
}

impl BoundParams {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(AnalysisError::InvalidParam {
                    name,
                    reason: format!("must be finite and non-negative, got {v}"),
                })
            }
        };
        if !(self.xi2.is_finite() && self.xi2 > 0.0) {
            return Err(AnalysisError::Xi2NotPositive(self.xi2));
        }
        nonneg("beta", self.beta)?;
        nonneg("xi1", self.xi1)?;
        nonneg("G", self.g)?;
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(AnalysisError::InvalidParam {
                name: "eta",
                reason: format!("must be positive, got {}", self.eta),
            });
        }
        if self.layers == 0 {
            return Err(AnalysisError::InvalidParam {
                name: "L",
                reason: "must be at least 1".into(),
            });
        }
        if self.n == 0 || self.n > self.k {
            return Err(AnalysisError::InvalidParam {
                name: "n",
                reason: format!("must lie in [1, K={}], got {}", self.k, self.n),
            });
        }
        Ok(())
    }

    /// `1 - n/K`.
    pub fn excluded_fraction(&self) -> f64 {
        1.0 - self.n as f64 / self.k as f64
    }

    pub fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }
}

pub fn bound_a(p: &BoundParams) -> f64 {
    let c = p.excluded_fraction();
    let l = p.layers as f64;
    2.0 * p.xi2 * p.eta * p.eta * l * l * c * (1.0 + p.beta * c)
}

pub fn bound_b(p: &BoundParams) -> f64 {
    let c = p.excluded_fraction();
    (p.xi1 / p.xi2) * bound_a(p) + c * p.g * p.g / 2.0
}

/// `1 / (2 (1 + beta) eta^2 L^2)`.
pub fn convergence_threshold(p: &BoundParams) -> f64 {
    let l = p.layers as f64;
    1.0 / (2.0 * (1.0 + p.beta) * p.eta * p.eta * l * l)
}

/// `0 < xi2 < 1 / (2 (1 + beta) eta^2 L^2)`, strict on both sides.
pub fn convergence_condition(p: &BoundParams) -> bool {
    p.xi2 > 0.0 && p.xi2 < convergence_threshold(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapBound {
    pub value: f64,
    /// `A == 1`: the geometric sum degenerates to `t * B`.
    pub unit_contraction: bool,
}

/// `A^t * initial_gap + B (1 - A^t) / (1 - A)`, or `initial_gap + t B` when
/// `A == 1`.
pub fn bound_gap(p: &BoundParams, t: u32, initial_gap: f64) -> GapBound {
    let a = bound_a(p);
    let b = bound_b(p);
    if a == 1.0 {
        return GapBound {
            value: initial_gap + f64::from(t) * b,
            unit_contraction: true,
        };
    }
    let at = a.powi(t as i32);
    GapBound {
        value: at * initial_gap + b * (1.0 - at) / (1.0 - a),
        unit_contraction: false,
    }
}

/// Limit gap written as `(c G^2 / 2 + xi1/xi2) / (1 - A) - xi1/xi2`.
pub fn asymptotic_gap_closed_form(p: &BoundParams) -> Result<f64, AnalysisError> {
    let a = bound_a(p);
    if a.is_nan() || a >= 1.0 {
        return Err(AnalysisError::NoContraction(a));
    }
    let ratio = p.xi1 / p.xi2;
    let c = p.excluded_fraction();
    Ok((c * p.g * p.g / 2.0 + ratio) / (1.0 - a) - ratio)
}

/// Limit of the recursion, `B / (1 - A)`.
pub fn asymptotic_gap_recursion_form(p: &BoundParams) -> Result<f64, AnalysisError> {
    let a = bound_a(p);
    if a.is_nan() || a >= 1.0 {
        return Err(AnalysisError::NoContraction(a));
    }
    Ok(bound_b(p) / (1.0 - a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateWarning {
    /// Every consecutive pair of global models was identical.
    BetaUndefined,
    /// The fitted xi2 was zero and was raised to machine epsilon.
    Xi2Floored,
}

/// Constants fitted to a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantEstimate {
    pub beta: Option<f64>,
    pub xi1: f64,
    pub xi2: f64,
    pub g: f64,
    pub warnings: Vec<EstimateWarning>,
}

impl ConstantEstimate {
    /// Completes the estimate into bound parameters; an undefined beta is
    /// taken as 0.
    pub fn to_params(&self, eta: f64, layers: usize, n: usize, k: usize) -> BoundParams {
        BoundParams {
            beta: self.beta.unwrap_or(0.0),
            xi1: self.xi1,
            xi2: self.xi2,
            g: self.g,
            eta,
            layers,
            n,
            k,
        }
    }
}

/// Upper concave hull (Andrew's monotone chain) of points sorted by x.
fn upper_hull(sorted: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in sorted {
        while hull.len() >= 2 {
            let (o, a) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

/// Line `y = xi1 + xi2 x` with `xi1, xi2 >= 0` dominating every point and
/// tightest at the mean abscissa: the upper-hull edge (of the points plus the
/// origin) that spans the mean x, or the horizontal line through the highest
/// point once the hull turns downward. On a vertex the flatter edge wins.
///
/// Returns `(xi1, xi2)`; inputs must be finite and non-negative.
pub fn fit_upper_line(points: &[(f64, f64)]) -> (f64, f64) {
    if points.is_empty() {
        return (0.0, 0.0);
    }
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.push((0.0, 0.0));
    // equal x: keep only the highest point
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|later, earlier| later.0 == earlier.0);
    let hull = upper_hull(&pts);
    let peak = hull
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if p.1 > hull[best].1 { i } else { best });

    let (mut xi1, mut xi2) = if mean_x >= hull[peak].0 {
        (hull[peak].1, 0.0)
    } else {
        let i = (0..peak)
            .rev()
            .find(|&i| hull[i].0 <= mean_x)
            .unwrap_or(0);
        let (p, q) = (hull[i], hull[i + 1]);
        let slope = (q.1 - p.1) / (q.0 - p.0);
        ((p.1 - slope * p.0).max(0.0), slope.max(0.0))
    };
    // absorb rounding so that no point sits above the line
    let excess = points
        .iter()
        .map(|&(x, y)| y - (xi1 + xi2 * x))
        .fold(0.0, f64::max);
    xi1 += excess;
    let worst = points
        .iter()
        .map(|&(x, y)| y - (xi1 + xi2 * x))
        .fold(f64::NEG_INFINITY, f64::max);
    if worst > 0.0 {
        xi1 += worst;
    }
    if xi1 > 0.0 {
        xi1 = f64::from_bits(xi1.to_bits() + 4);
    }
    if !xi2.is_finite() {
        xi2 = 0.0;
    }
    (xi1, xi2)
}

/// Fits `(beta, xi1, xi2, G)` so that every observation in the trace obeys
/// the smoothness, layer-divergence and gradient-bound relations.
///
/// * `G^2` is the largest squared global gradient norm.
/// * `(xi1, xi2)` come from [`fit_upper_line`] over the points
///   `(|grad F|^2, |grad F_{k,l}|^2)`.
/// * `beta` is the largest `|grad F(x) - grad F(y)| / |x - y|` over
///   consecutive broadcast models.
pub fn estimate_constants(trace: &[TraceRecord]) -> Result<ConstantEstimate, AnalysisError> {
    if trace.len() < 2 {
        return Err(AnalysisError::TraceTooShort {
            needed: 2,
            found: trace.len(),
        });
    }
    let mut warnings = Vec::new();
    let g_sq = trace
        .iter()
        .map(|r| r.global_grad_norm * r.global_grad_norm)
        .fold(0.0, f64::max);
    let g = g_sq.sqrt();
    // sqrt rounding may land below the observed maximum
    let g = if g * g < g_sq { f64::from_bits(g.to_bits() + 1) } else { g };

    let points: Vec<(f64, f64)> = trace
        .iter()
        .flat_map(|r| {
            let x = r.global_grad_norm * r.global_grad_norm;
            r.client_layer_grad_norms
                .iter()
                .flatten()
                .map(move |&v| (x, v * v))
        })
        .collect();
    let (xi1, mut xi2) = fit_upper_line(&points);
    if xi2 <= 0.0 {
        warnings.push(EstimateWarning::Xi2Floored);
        xi2 = f64::EPSILON;
    }

    let mut beta: Option<f64> = None;
    for r in trace {
        if let (Some(step), Some(diff)) = (r.step_norm, r.grad_diff_norm) {
            if step > 0.0 {
                let ratio = diff / step;
                beta = Some(beta.map_or(ratio, |b| b.max(ratio)));
            }
        }
    }
    if beta.is_none() {
        warnings.push(EstimateWarning::BetaUndefined);
    }
    Ok(ConstantEstimate {
        beta,
        xi1,
        xi2,
        g,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundCheck {
    pub round: usize,
    pub holds: bool,
    /// Measured squared gap over the bound, per layer (0 when both are 0).
    pub layer_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub rounds: Vec<RoundCheck>,
    /// Fraction of rounds with at least one violating layer.
    pub violation_rate: f64,
    pub max_violation_ratio: f64,
    /// Every client took exactly one SGD step, as the bound assumes.
    pub single_step_regime: bool,
    /// Every round's participants had equal dataset sizes.
    pub equal_sizes: bool,
}

/// Squared-gap bound for one round: `4 eta^2 c^2 (xi1 + xi2 |grad F|^2)`.
pub fn lemma1_bound(p: &BoundParams, global_grad_norm: f64) -> f64 {
    let c = p.excluded_fraction();
    4.0 * p.eta * p.eta * c * c * (p.xi1 + p.xi2 * global_grad_norm * global_grad_norm)
}

/// Checks every round and layer of the trace against [`lemma1_bound`].
pub fn lemma1_check(trace: &[TraceRecord], p: &BoundParams) -> Result<Lemma1Report, AnalysisError> {
    let mut rounds = Vec::with_capacity(trace.len());
    let mut violated = 0usize;
    let mut max_ratio: f64 = 0.0;
    for r in trace {
        let gaps = r
            .shadow_gaps
            .as_ref()
            .ok_or(AnalysisError::MissingShadow(r.round))?;
        let bound = lemma1_bound(p, r.global_grad_norm);
        let layer_ratios: Vec<f64> = gaps
            .iter()
            .map(|g| {
                let sq = g * g;
                match (sq == 0.0, bound == 0.0) {
                    (true, _) => 0.0,
                    (false, true) => f64::INFINITY,
                    (false, false) => sq / bound,
                }
            })
            .collect();
        let holds = layer_ratios.iter().all(|&q| q <= 1.0);
        violated += usize::from(!holds);
        max_ratio = layer_ratios.iter().copied().fold(max_ratio, f64::max);
        rounds.push(RoundCheck {
            round: r.round,
            holds,
            layer_ratios,
        });
    }
    Ok(Lemma1Report {
        violation_rate: if trace.is_empty() {
            0.0
        } else {
            violated as f64 / trace.len() as f64
        },
        max_violation_ratio: max_ratio,
        single_step_regime: trace.iter().all(|r| r.local_steps == 1),
        equal_sizes: trace
            .iter()
            .all(|r| r.client_sizes.windows(2).all(|w| w[0] == w[1])),
        rounds,
    })
}

/// Summary of the bound evaluated with constants fitted to a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub params: BoundParams,
    pub estimate: ConstantEstimate,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub condition_satisfied: bool,
    pub condition_threshold: f64,
    pub asymptotic_gap_closed_form: Option<f64>,
    pub asymptotic_gap_recursion_form: Option<f64>,
    pub lemma1_violation_rate: Option<f64>,
    pub lemma1_max_ratio: Option<f64>,
    /// Largest measured training-loss gap between the aggregated and the
    /// shadow FedAvg model. Diagnostic only: the loss is not convex.
    pub max_measured_loss_gap: Option<f64>,
}

/// Fits constants to the trace and evaluates the bound and the layer-gap
/// check with them.
pub fn bound_report(trace: &[TraceRecord]) -> Result<BoundReport, AnalysisError> {
    let estimate = estimate_constants(trace)?;
    let first = &trace[0];
    if trace.iter().any(|r| {
        r.eta != first.eta
            || r.layer_count != first.layer_count
            || r.top_n != first.top_n
            || r.clients_per_round != first.clients_per_round
    }) {
        return Err(AnalysisError::InconsistentTrace("eta, L, n or K"));
    }
    let params = estimate.to_params(
        first.eta,
        first.layer_count,
        first.top_n,
        first.clients_per_round,
    );
    let lemma = if trace.iter().all(|r| r.shadow_gaps.is_some()) {
        Some(lemma1_check(trace, &params)?)
    } else {
        None
    };
    let max_gap = trace
        .iter()
        .filter_map(|r| r.shadow_loss.map(|s| r.global_loss - s))
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    Ok(BoundReport {
        a: bound_a(&params),
        b: bound_b(&params),
        condition_satisfied: convergence_condition(&params),
        condition_threshold: convergence_threshold(&params),
        asymptotic_gap_closed_form: asymptotic_gap_closed_form(&params).ok(),
        asymptotic_gap_recursion_form: asymptotic_gap_recursion_form(&params).ok(),
        lemma1_violation_rate: lemma.as_ref().map(|l| l.violation_rate),
        lemma1_max_ratio: lemma.as_ref().map(|l| l.max_violation_ratio),
        max_measured_loss_gap: max_gap,
        params,
        estimate,
    })
}
