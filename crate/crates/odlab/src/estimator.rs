//! Bi-level origin-destination sequence estimator.
//!
//! The upper level minimizes `R(T) = alpha * N(T) + (1 - alpha) * S(T)` over
//! element-wise non-negative demand sequences, where `N` is the
//! half-sum-of-squares residual of predicted section counts under a frozen
//! assignment tensor and `S` is the KL divergence of the iterate's
//! production/attraction distributions from externally supplied target
//! distributions. The lower level re-simulates the current iterate to refresh
//! the assignment tensor. The upper-level solver is a gradient-projection
//! method specialized to non-negativity constraints, with a multiplicative
//! update that preserves feasibility by construction.

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{FlowKind, GlobalDistribution, Network, OdSequence, TimeGrid, TrafficCounts};
use crate::sim::{back_calculate, simulate, AssignmentTensor};
use serde::{Deserialize, Serialize};

/// Smoothing constant shared with the metric divergences.
const EPS: f64 = 1e-12;
/// Tolerance of the sign test on active-coordinate gradients.
pub const KKT_TOL: f64 = 1e-8;
/// Step bound when the direction has no negative component.
pub const LAMBDA_CAP: f64 = 1e3;
/// Objective evaluations spent per line search.
pub const LINE_SEARCH_EVALS: usize = 32;

/// Target production/attraction distributions guiding the estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Targets {
    production: GlobalDistribution,
    attraction: GlobalDistribution,
}

impl Targets {
    pub fn new(production: GlobalDistribution, attraction: GlobalDistribution) -> Result<Self> {
        if production.kind != FlowKind::Production {
            return Err(Error::InvalidDistribution(
                "production target must have production kind".into(),
            ));
        }
        if attraction.kind != FlowKind::Attraction {
            return Err(Error::InvalidDistribution(
                "attraction target must have attraction kind".into(),
            ));
        }
        if production.len() != attraction.len() {
            return Err(Error::InvalidDistribution(format!(
                "target lengths differ: {} vs {}",
                production.len(),
                attraction.len()
            )));
        }
        Ok(Self { production, attraction })
    }

    pub fn production(&self) -> &GlobalDistribution {
        &self.production
    }

    pub fn attraction(&self) -> &GlobalDistribution {
        &self.attraction
    }
}

/// The frozen-assignment objective of one outer iteration.
#[derive(Debug, Clone)]
pub struct Objective {
    alpha: f64,
    observed: Vec<f64>,
    tensor: AssignmentTensor,
    targets: Option<Targets>,
    intervals: usize,
    n_od: usize,
}

impl Objective {
    /// `alpha` weighs the counts residual against the structure divergence;
    /// without targets the objective is purely numeric and `alpha` must be 1.
    pub fn new(
        alpha: f64,
        observed: &TrafficCounts,
        tensor: AssignmentTensor,
        targets: Option<Targets>,
        n_od: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("alpha must be in [0, 1], got {alpha}")));
        }
        if observed.observation_intervals() != tensor.observation_intervals()
            || observed.n_sec() != tensor.n_sec()
        {
            return Err(Error::ShapeMismatch(format!(
                "counts are {}x{} but the tensor expects {}x{}",
                observed.observation_intervals(),
                observed.n_sec(),
                tensor.observation_intervals(),
                tensor.n_sec()
            )));
        }
        if n_od * n_od != tensor.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "tensor holds {} cells which is not {n_od}^2",
                tensor.n_cells()
            )));
        }
        if let Some(t) = &targets {
            let want = tensor.estimation_intervals() * n_od;
            if t.production.len() != want {
                return Err(Error::InvalidDistribution(format!(
                    "targets have length {}, expected {want}",
                    t.production.len()
                )));
            }
        } else if alpha != 1.0 {
            return Err(Error::InvalidConfig(
                "alpha < 1 requires target distributions".into(),
            ));
        }
        let intervals = tensor.estimation_intervals();
        Ok(Self { alpha, observed: observed.flat().to_vec(), tensor, targets, intervals, n_od })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("alpha must be in [0, 1], got {alpha}")));
        }
        self.alpha = alpha;
        Ok(())
    }

    pub fn tensor(&self) -> &AssignmentTensor {
        &self.tensor
    }

    fn len(&self) -> usize {
        self.intervals * self.n_od * self.n_od
    }

    /// Half-sum-of-squares residual of predicted against observed counts.
    pub fn numeric(&self, demand: &[f64]) -> f64 {
        let predicted = self.tensor.predict_counts_flat(demand);
        predicted
            .iter()
            .zip(&self.observed)
            .map(|(p, o)| 0.5 * (p - o) * (p - o))
            .sum()
    }

    /// Production and attraction flows of a flattened demand vector, plus the
    /// shared total.
    fn flows(&self, demand: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let n = self.n_od;
        let mut p = vec![0.0; self.intervals * n];
        let mut a = vec![0.0; self.intervals * n];
        let mut total = 0.0;
        for t in 0..self.intervals {
            for i in 0..n {
                for j in 0..n {
                    let v = demand[t * n * n + i * n + j];
                    p[t * n + i] += v;
                    a[t * n + j] += v;
                    total += v;
                }
            }
        }
        (p, a, total)
    }

    /// KL divergence of the iterate's global distributions from the targets.
    pub fn structure(&self, demand: &[f64]) -> Result<f64> {
        let Some(targets) = &self.targets else {
            return Ok(0.0);
        };
        let (mut p, mut a, total) = self.flows(demand);
        if total <= 0.0 {
            return Err(Error::DegenerateIterate);
        }
        for v in p.iter_mut().chain(a.iter_mut()) {
            *v /= total;
        }
        Ok(metrics::kl(&p, targets.production.values())?
            + metrics::kl(&a, targets.attraction.values())?)
    }

    /// Combined objective value.
    pub fn value(&self, demand: &[f64]) -> Result<f64> {
        let numeric = if self.alpha > 0.0 { self.numeric(demand) } else { 0.0 };
        let structure = if self.alpha < 1.0 { self.structure(demand)? } else { 0.0 };
        Ok(self.alpha * numeric + (1.0 - self.alpha) * structure)
    }

    /// Gradient of the combined objective at `demand`.
    pub fn gradient(&self, demand: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(demand.len(), self.len());
        let mut grad = vec![0.0; demand.len()];
        if self.alpha > 0.0 {
            let predicted = self.tensor.predict_counts_flat(demand);
            let residual: Vec<f64> =
                predicted.iter().zip(&self.observed).map(|(p, o)| p - o).collect();
            for (g, dn) in grad.iter_mut().zip(self.tensor.transpose_apply(&residual)) {
                *g += self.alpha * dn;
            }
        }
        if self.alpha < 1.0 {
            if let Some(targets) = &self.targets {
                let n = self.n_od;
                let (p, a, total) = self.flows(demand);
                if total <= 0.0 {
                    return Err(Error::DegenerateIterate);
                }
                // d/dx of x ln((x + eps) / (q + eps)) at x = flow / total,
                // then the chain through both the per-node flow map and the
                // shared normalization by the demand total.
                let node_grad = |flow: &[f64], target: &GlobalDistribution| -> (Vec<f64>, f64) {
                    let mut g = Vec::with_capacity(flow.len());
                    let mut inner = 0.0;
                    for (f, q) in flow.iter().zip(target.values()) {
                        let d = f / total;
                        let gd = ((d + EPS) / (q + EPS)).ln() + d / (d + EPS);
                        inner += gd * d;
                        g.push(gd);
                    }
                    (g, inner)
                };
                let (gp, inner_p) = node_grad(&p, &targets.production);
                let (ga, inner_a) = node_grad(&a, &targets.attraction);
                let w = (1.0 - self.alpha) / total;
                for t in 0..self.intervals {
                    for i in 0..n {
                        for j in 0..n {
                            grad[t * n * n + i * n + j] +=
                                w * (gp[t * n + i] - inner_p + ga[t * n + j] - inner_a);
                        }
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// One iterate of the gradient-projection solver.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub iterate: Vec<f64>,
    pub iteration: usize,
    pub direction: Vec<f64>,
    pub step: f64,
    pub objective_value: f64,
    /// Set when the sign test on active-coordinate gradients passed with a
    /// zero direction: the iterate satisfies first-order optimality.
    pub kkt: bool,
}

impl SolverState {
    pub fn active_set(&self) -> Vec<usize> {
        self.iterate
            .iter()
            .enumerate()
            .filter_map(|(i, v)| (*v == 0.0).then_some(i))
            .collect()
    }
}

/// Projected descent direction: the negative gradient with active (zero)
/// coordinates masked out. The second value reports first-order optimality:
/// the direction vanished and no active coordinate has a gradient below
/// `-KKT_TOL` pushing into the feasible side.
pub fn project_direction(iterate: &[f64], gradient: &[f64]) -> (Vec<f64>, bool) {
    assert_eq!(iterate.len(), gradient.len());
    let direction: Vec<f64> = iterate
        .iter()
        .zip(gradient)
        .map(|(x, g)| if *x == 0.0 { 0.0 } else { -g })
        .collect();
    let zero = direction.iter().all(|d| *d == 0.0);
    let active_ok = iterate
        .iter()
        .zip(gradient)
        .all(|(x, g)| *x != 0.0 || *g >= -KKT_TOL);
    (direction, zero && active_ok)
}

/// Longest multiplicatively feasible step: `min { -1/d_i | d_i < 0 }`, capped
/// at `LAMBDA_CAP` when no component is negative.
pub fn max_step(direction: &[f64]) -> f64 {
    direction
        .iter()
        .filter(|d| **d < 0.0)
        .map(|d| -1.0 / d)
        .fold(f64::INFINITY, f64::min)
        .min(LAMBDA_CAP)
}

/// The multiplicative update `T ⊙ (1 + lambda d)`. Zero entries stay exactly
/// zero, and the coordinate whose bound equals `lambda` lands exactly on zero.
pub fn update(iterate: &[f64], lambda: f64, direction: &[f64]) -> Vec<f64> {
    assert_eq!(iterate.len(), direction.len());
    iterate
        .iter()
        .zip(direction)
        .map(|(x, d)| {
            if *x == 0.0 {
                return 0.0;
            }
            let factor = if *d < 0.0 && -1.0 / d <= lambda {
                0.0
            } else {
                (1.0 + lambda * d).max(0.0)
            };
            let v = x * factor;
            assert!(v >= 0.0, "update produced a negative entry");
            v
        })
        .collect()
}

/// Golden-section search of the objective along the multiplicative update,
/// over `[0, lambda_max]`, spending `LINE_SEARCH_EVALS` objective
/// evaluations (one of them on the right endpoint so a boundary optimum is
/// returned exactly). Returns zero when no evaluated step improves on
/// `value_at_zero`.
pub fn line_search(
    objective: &Objective,
    iterate: &[f64],
    direction: &[f64],
    lambda_max: f64,
    value_at_zero: f64,
) -> Result<f64> {
    if lambda_max <= 0.0 {
        return Ok(0.0);
    }
    let mut best = (0.0, value_at_zero);
    let probe = |lambda: f64, best: &mut (f64, f64)| -> Result<f64> {
        let value = objective.value(&update(iterate, lambda, direction))?;
        if value < best.1 {
            *best = (lambda, value);
        }
        Ok(value)
    };
    probe(lambda_max, &mut best)?;

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let inv_phi2 = 1.0 - inv_phi;
    let (mut lo, mut hi) = (0.0, lambda_max);
    let mut x1 = lo + inv_phi2 * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = probe(x1, &mut best)?;
    let mut f2 = probe(x2, &mut best)?;
    for _ in 3..LINE_SEARCH_EVALS {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = lo + inv_phi2 * (hi - lo);
            f1 = probe(x1, &mut best)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = probe(x2, &mut best)?;
        }
    }
    Ok(if best.1 < value_at_zero { best.0 } else { 0.0 })
}

/// Trace of one frozen-assignment inner run.
#[derive(Debug, Clone)]
pub struct InnerRun {
    pub state: SolverState,
    /// Objective value before the first step and after each accepted step.
    pub values: Vec<f64>,
}

/// Run up to `n_inner` gradient-projection iterations on a frozen objective.
pub fn solve_inner(objective: &Objective, start: Vec<f64>, n_inner: usize) -> Result<InnerRun> {
    let mut state = SolverState {
        objective_value: objective.value(&start)?,
        iterate: start,
        iteration: 0,
        direction: Vec::new(),
        step: 0.0,
        kkt: false,
    };
    let mut values = vec![state.objective_value];
    for _ in 0..n_inner {
        let gradient = objective.gradient(&state.iterate)?;
        let (direction, kkt) = project_direction(&state.iterate, &gradient);
        state.kkt = kkt;
        if direction.iter().all(|d| *d == 0.0) {
            state.direction = direction;
            break;
        }
        let lambda_max = max_step(&direction);
        let lambda =
            line_search(objective, &state.iterate, &direction, lambda_max, state.objective_value)?;
        state.direction = direction;
        state.step = lambda;
        if lambda == 0.0 {
            break;
        }
        state.iterate = update(&state.iterate, lambda, &state.direction);
        state.objective_value = objective.value(&state.iterate)?;
        state.iteration += 1;
        values.push(state.objective_value);
    }
    Ok(InnerRun { state, values })
}

/// Knobs of the bi-level loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Initial structure weight when targets are present.
    pub alpha: f64,
    /// Gradient-projection iterations per frozen assignment.
    pub n_inner: usize,
    /// Maximum number of simulate-then-optimize rounds.
    pub outer_cap: usize,
    /// Relative-change tolerance that relaxes the structure term.
    pub structure_tol: f64,
    /// Relative-change tolerance on the objective that stops the outer loop.
    pub objective_tol: f64,
    /// Consecutive small changes required by both tolerances.
    pub window: usize,
    /// Evaluate residuals on estimation-interval count sums instead of raw
    /// observation intervals.
    pub aggregate_counts: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            n_inner: 10,
            outer_cap: 40,
            structure_tol: 1e-3,
            objective_tol: 1e-4,
            window: 3,
            aggregate_counts: false,
        }
    }
}

/// One outer iteration of the bi-level loop, as written to the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer: usize,
    pub alpha: f64,
    pub objective: f64,
    pub numeric: f64,
    pub structure: f64,
    pub inner_iterations: usize,
    pub kkt: bool,
    /// Frozen-assignment objective before the first inner step and after each
    /// accepted step; non-increasing by construction.
    pub inner_values: Vec<f64>,
    /// Per-estimation-interval scores against the truth, when provided.
    pub rmsn: Vec<f64>,
    pub correlation: Vec<f64>,
}

/// Result of a bi-level estimation run.
#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub estimate: OdSequence,
    pub trace: Vec<OuterRecord>,
}

/// True when the last `window` consecutive relative changes of `history` are
/// all below `tol`.
fn window_converged(history: &[f64], tol: f64, window: usize) -> bool {
    if history.len() < window + 1 {
        return false;
    }
    history
        .windows(2)
        .rev()
        .take(window)
        .all(|w| (w[1] - w[0]).abs() / w[0].abs().max(EPS) < tol)
}

/// Uniform off-diagonal demand whose simulated total counts match the
/// observed total, fitted with one proportional step plus one secant step on
/// the scale factor.
fn init_iterate(
    network: &Network,
    observed: &TrafficCounts,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let n = network.n_od();
    let intervals = grid.estimation_intervals;
    let observed_total = observed.total();
    if observed_total <= 0.0 {
        return Err(Error::DegenerateFlows);
    }
    let uniform = |scale: f64| -> Result<OdSequence> {
        let mut seq = OdSequence::zeros(intervals, n);
        for t in 0..intervals {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        seq.set(t, i, j, scale);
                    }
                }
            }
        }
        Ok(seq)
    };
    let counts_total = |scale: f64| -> Result<f64> {
        let (counts, _) = simulate(network, &uniform(scale)?, grid)?;
        Ok(counts.total())
    };
    let s0 = observed_total / (intervals * n * (n - 1)) as f64;
    let c0 = counts_total(s0)?;
    if c0 <= 0.0 {
        return Ok(uniform(s0)?.flat().to_vec());
    }
    let s1 = s0 * observed_total / c0;
    let c1 = counts_total(s1)?;
    let mut scale = s1;
    if (c1 - c0).abs() > EPS && (s1 - s0).abs() > EPS {
        let s2 = s1 + (observed_total - c1) * (s1 - s0) / (c1 - c0);
        if s2.is_finite() && s2 > 0.0 {
            scale = s2;
        }
    }
    Ok(uniform(scale)?.flat().to_vec())
}

/// Full bi-level estimation: repeatedly simulate the iterate, back-calculate
/// the assignment tensor, and descend the frozen objective; when the
/// structure term plateaus its weight is dropped (`alpha` set to 1)
/// permanently, and the loop stops once the objective plateaus or the outer
/// cap is reached.
pub fn bilevel_estimate(
    network: &Network,
    observed: &TrafficCounts,
    grid: &TimeGrid,
    targets: Option<Targets>,
    config: &EstimatorConfig,
    truth: Option<&OdSequence>,
) -> Result<EstimateResult> {
    let n = network.n_od();
    if observed.observation_intervals() != grid.observation_intervals
        || observed.n_sec() != network.n_sec()
    {
        return Err(Error::ShapeMismatch(format!(
            "observed counts are {}x{}, expected {}x{}",
            observed.observation_intervals(),
            observed.n_sec(),
            grid.observation_intervals,
            network.n_sec()
        )));
    }
    if config.n_inner == 0 || config.outer_cap == 0 || config.window == 0 {
        return Err(Error::InvalidConfig(
            "n_inner, outer_cap and window must be positive".into(),
        ));
    }
    let mut alpha = if targets.is_some() { config.alpha } else { 1.0 };
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must be in [0, 1], got {alpha}")));
    }

    let mut iterate = init_iterate(network, observed, grid)?;
    let observed_eval = if config.aggregate_counts {
        observed.aggregate_to_estimation_intervals(grid.k())
    } else {
        observed.clone()
    };

    let mut trace: Vec<OuterRecord> = Vec::new();
    let mut structure_history: Vec<f64> = Vec::new();
    let mut objective_history: Vec<f64> = Vec::new();
    let mut slack_applied = targets.is_none();

    for outer in 0..config.outer_cap {
        let seq = OdSequence::from_flat(grid.estimation_intervals, n, iterate.clone())?;
        let (_, log) = simulate(network, &seq, grid)?;
        let tensor = back_calculate(&seq, &log)?;
        let tensor = if config.aggregate_counts {
            tensor.aggregate_observations(grid.k())
        } else {
            tensor
        };
        let objective = Objective::new(alpha, &observed_eval, tensor, targets.clone(), n)?;
        let run = solve_inner(&objective, iterate, config.n_inner)?;
        iterate = run.state.iterate.clone();

        let numeric = objective.numeric(&iterate);
        let structure = if targets.is_some() { objective.structure(&iterate)? } else { 0.0 };
        let value = alpha * numeric + (1.0 - alpha) * structure;
        let (rmsn, correlation) = match truth {
            Some(truth_seq) => {
                let est = OdSequence::from_flat(grid.estimation_intervals, n, iterate.clone())?;
                match metrics::summary(truth_seq, &est) {
                    Ok(s) => (
                        s.per_interval.iter().map(|r| r.rmsn).collect(),
                        s.per_interval.iter().map(|r| r.correlation).collect(),
                    ),
                    Err(_) => (vec![f64::NAN; grid.estimation_intervals], vec![
                        f64::NAN;
                        grid.estimation_intervals
                    ]),
                }
            }
            None => (Vec::new(), Vec::new()),
        };
        trace.push(OuterRecord {
            outer,
            alpha,
            objective: value,
            numeric,
            structure,
            inner_iterations: run.state.iteration,
            kkt: run.state.kkt,
            inner_values: run.values,
            rmsn,
            correlation,
        });

        if !slack_applied {
            structure_history.push(structure);
            if window_converged(&structure_history, config.structure_tol, config.window) {
                alpha = 1.0;
                slack_applied = true;
                // the objective changes definition with alpha, so its
                // convergence window starts over
                objective_history.clear();
            }
        }
        objective_history.push(value);
        if window_converged(&objective_history, config.objective_tol, config.window) {
            break;
        }
    }

    let estimate = OdSequence::from_flat(grid.estimation_intervals, n, iterate)?;
    Ok(EstimateResult { estimate, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{to_distribution, DistributionSource, OdNode, Section};
    use approx::assert_abs_diff_eq;

    fn two_node_network() -> Network {
        Network::new(
            vec![OdNode { id: 0, x: 0.0, y: 0.0 }, OdNode { id: 1, x: 800.0, y: 0.0 }],
            vec![
                Section { id: 0, from_node: 0, to_node: 1, length: 800.0, free_flow_speed: 10.0, capacity: 50.0 },
                Section { id: 1, from_node: 1, to_node: 0, length: 800.0, free_flow_speed: 10.0, capacity: 50.0 },
            ],
        )
        .unwrap()
    }

    /// Simulated ground: a small two-node instance with its exact counts and
    /// assignment tensor.
    fn ground(demand: &[f64]) -> (Network, TimeGrid, OdSequence, TrafficCounts, AssignmentTensor) {
        let network = two_node_network();
        let grid = TimeGrid::new(2, 4, 1, 200.0).unwrap();
        let seq = OdSequence::from_flat(2, 2, demand.to_vec()).unwrap();
        let (counts, log) = simulate(&network, &seq, &grid).unwrap();
        let tensor = back_calculate(&seq, &log).unwrap();
        (network, grid, seq, counts, tensor)
    }

    fn demand_targets(seq: &OdSequence) -> Targets {
        let (p, a) = crate::model::production_attraction(seq);
        Targets::new(
            to_distribution(&p, FlowKind::Production, DistributionSource::True).unwrap(),
            to_distribution(&a, FlowKind::Attraction, DistributionSource::True).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn numeric_zero_at_reconstruction_point() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, seq, counts, tensor) = ground(&demand);
        let objective = Objective::new(1.0, &counts, tensor, None, 2).unwrap();
        assert_abs_diff_eq!(objective.numeric(seq.flat()), 0.0, epsilon = 1e-18);
    }

    #[test]
    fn numeric_against_zero_counts_is_half_sum_of_squares() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, seq, counts, tensor) = ground(&demand);
        let zeros = TrafficCounts::zeros(4, 2);
        let objective = Objective::new(1.0, &zeros, tensor, None, 2).unwrap();
        let expect: f64 = counts.flat().iter().map(|c| 0.5 * c * c).sum();
        assert_abs_diff_eq!(objective.numeric(seq.flat()), expect, epsilon = 1e-9);
    }

    #[test]
    fn numeric_matches_naive_double_loop() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, _, counts, tensor) = ground(&demand);
        let probe = [0.0, 3.0, 7.0, 0.0, 0.0, 5.0, 1.0, 0.0];
        let objective = Objective::new(1.0, &counts, tensor.clone(), None, 2).unwrap();
        let mut naive = 0.0;
        for tau in 0..4 {
            for e in 0..2 {
                let mut predicted = 0.0;
                for t in 0..2 {
                    for ij in 0..4 {
                        predicted += tensor.get(tau, t, e, ij) * probe[t * 4 + ij];
                    }
                }
                let r = predicted - counts.get(tau, e);
                naive += 0.5 * r * r;
            }
        }
        assert_abs_diff_eq!(objective.numeric(&probe), naive, epsilon = 1e-12);
    }

    #[test]
    fn structure_zero_when_targets_match() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, seq, counts, tensor) = ground(&demand);
        let targets = demand_targets(&seq);
        let objective = Objective::new(0.5, &counts, tensor, Some(targets), 2).unwrap();
        assert_eq!(objective.structure(seq.flat()).unwrap(), 0.0);
    }

    #[test]
    fn structure_hand_value() {
        // iterate [0, x, y, 0] with x = y: production (0.5, 0.5) against
        // target (0.25, 0.75), attraction matching exactly
        let demand = [0.0, 3.0, 3.0, 0.0];
        let (_, _, _, counts, tensor) = ground(&[0.0, 3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let _ = demand;
        let targets = Targets::new(
            GlobalDistribution::new(
                FlowKind::Production,
                DistributionSource::True,
                vec![0.25, 0.75],
            )
            .unwrap(),
            GlobalDistribution::new(
                FlowKind::Attraction,
                DistributionSource::True,
                vec![0.5, 0.5],
            )
            .unwrap(),
        )
        .unwrap();
        let grid_one = TimeGrid::new(1, 2, 1, 200.0).unwrap();
        let seq = OdSequence::from_flat(1, 2, vec![0.0, 3.0, 3.0, 0.0]).unwrap();
        let (counts1, log1) = simulate(&two_node_network(), &seq, &grid_one).unwrap();
        let tensor1 = back_calculate(&seq, &log1).unwrap();
        let _ = (counts, tensor);
        let objective = Objective::new(0.5, &counts1, tensor1, Some(targets), 2).unwrap();
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(
            objective.structure(seq.flat()).unwrap(),
            expect,
            epsilon = 1e-9
        );
    }

    #[test]
    fn structure_nonnegative_and_degenerate_iterate_rejected() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, seq, counts, tensor) = ground(&demand);
        let targets = demand_targets(&OdSequence::from_flat(
            2,
            2,
            vec![0.0, 1.0, 9.0, 0.0, 0.0, 7.0, 3.0, 0.0],
        )
        .unwrap());
        let objective = Objective::new(0.5, &counts, tensor, Some(targets), 2).unwrap();
        assert!(objective.structure(seq.flat()).unwrap() > 0.0);
        match objective.structure(&[0.0; 8]) {
            Err(Error::DegenerateIterate) => {}
            other => panic!("expected degenerate iterate, got {other:?}"),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, _, counts, tensor) = ground(&demand);
        let targets = demand_targets(
            &OdSequence::from_flat(2, 2, vec![0.0, 2.0, 5.0, 0.0, 0.0, 6.0, 1.0, 0.0]).unwrap(),
        );
        for alpha in [1.0, 0.5, 0.0] {
            let objective =
                Objective::new(alpha, &counts, tensor.clone(), Some(targets.clone()), 2).unwrap();
            let point = [0.0, 3.5, 6.5, 0.0, 0.0, 4.5, 2.5, 0.0];
            let grad = objective.gradient(&point).unwrap();
            for idx in [1usize, 2, 5, 6] {
                let h = 1e-6 * point[idx].abs().max(1.0);
                let mut plus = point;
                plus[idx] += h;
                let mut minus = point;
                minus[idx] -= h;
                let fd =
                    (objective.value(&plus).unwrap() - objective.value(&minus).unwrap()) / (2.0 * h);
                let denom = grad[idx].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (grad[idx] - fd).abs() / denom <= 1e-5,
                    "alpha {alpha} idx {idx}: {} vs {fd}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn gradient_near_zero_at_perfect_point() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, seq, counts, tensor) = ground(&demand);
        let targets = demand_targets(&seq);
        let objective = Objective::new(0.5, &counts, tensor, Some(targets), 2).unwrap();
        for g in objective.gradient(seq.flat()).unwrap() {
            assert!(g.abs() < 1e-8, "gradient entry {g}");
        }
    }

    #[test]
    fn gradient_with_full_alpha_ignores_targets() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, _, counts, tensor) = ground(&demand);
        let t1 = demand_targets(
            &OdSequence::from_flat(2, 2, vec![0.0, 2.0, 5.0, 0.0, 0.0, 6.0, 1.0, 0.0]).unwrap(),
        );
        let t2 = demand_targets(
            &OdSequence::from_flat(2, 2, vec![0.0, 9.0, 1.0, 0.0, 0.0, 3.0, 4.0, 0.0]).unwrap(),
        );
        let point = [0.0, 3.5, 6.5, 0.0, 0.0, 4.5, 2.5, 0.0];
        let g1 = Objective::new(1.0, &counts, tensor.clone(), Some(t1), 2)
            .unwrap()
            .gradient(&point)
            .unwrap();
        let g2 = Objective::new(1.0, &counts, tensor, Some(t2), 2)
            .unwrap()
            .gradient(&point)
            .unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn direction_is_negative_gradient_without_active_coordinates() {
        let iterate = [1.0, 2.0, 3.0];
        let gradient = [0.5, -1.5, 0.0];
        let (d, kkt) = project_direction(&iterate, &gradient);
        assert_eq!(d, vec![-0.5, 1.5, 0.0]);
        assert!(!kkt);
    }

    #[test]
    fn all_active_nonnegative_gradients_signal_optimality() {
        let iterate = [0.0, 0.0];
        let (d, kkt) = project_direction(&iterate, &[0.3, 0.0]);
        assert_eq!(d, vec![0.0, 0.0]);
        assert!(kkt);
        // a negative active gradient blocks the signal even though the
        // direction is still zero
        let (d, kkt) = project_direction(&iterate, &[0.3, -1.0]);
        assert_eq!(d, vec![0.0, 0.0]);
        assert!(!kkt);
    }

    /// Dense oracle: the projection matrix `I - M^T (M M^T)^{-1} M` built
    /// from the active-constraint rows, applied to the negative gradient.
    fn dense_projected_direction(iterate: &[f64], gradient: &[f64]) -> Vec<f64> {
        let n = iterate.len();
        let active: Vec<usize> =
            iterate.iter().enumerate().filter_map(|(i, v)| (*v == 0.0).then_some(i)).collect();
        let m = active.len();
        let mut projection = vec![vec![0.0; n]; n];
        for (i, row) in projection.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        if m > 0 {
            // constraint rows are unit vectors; build M M^T and invert it by
            // Gauss-Jordan elimination without exploiting its structure
            let mut mmt: Vec<Vec<f64>> = vec![vec![0.0; m]; m];
            for (r, &ar) in active.iter().enumerate() {
                for (c, &ac) in active.iter().enumerate() {
                    mmt[r][c] = if ar == ac { 1.0 } else { 0.0 };
                }
            }
            let mut inv = vec![vec![0.0; m]; m];
            for (i, row) in inv.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            for col in 0..m {
                let pivot = mmt[col][col];
                assert!(pivot.abs() > 1e-14);
                for c in 0..m {
                    mmt[col][c] /= pivot;
                    inv[col][c] /= pivot;
                }
                for r in 0..m {
                    if r != col {
                        let f = mmt[r][col];
                        for c in 0..m {
                            mmt[r][c] -= f * mmt[col][c];
                            inv[r][c] -= f * inv[col][c];
                        }
                    }
                }
            }
            // P = I - M^T inv M; M[r][active[r]] = 1
            for (r, &ar) in active.iter().enumerate() {
                for (c, &ac) in active.iter().enumerate() {
                    projection[ar][ac] -= inv[r][c];
                }
            }
        }
        (0..n)
            .map(|r| -(0..n).map(|c| projection[r][c] * gradient[c]).sum::<f64>())
            .collect()
    }

    #[test]
    fn direction_matches_dense_projection_over_all_patterns() {
        let n = 10;
        let gradient: Vec<f64> =
            (0..n).map(|i| ((i as f64 + 1.0) * 0.7).sin() * 2.0 - 0.3).collect();
        for pattern in 0u32..(1 << n) {
            let iterate: Vec<f64> = (0..n)
                .map(|i| if pattern & (1 << i) != 0 { 0.0 } else { 0.5 + i as f64 })
                .collect();
            let (fast, _) = project_direction(&iterate, &gradient);
            let dense = dense_projected_direction(&iterate, &gradient);
            for (a, b) in fast.iter().zip(&dense) {
                assert!((a - b).abs() <= 1e-10, "pattern {pattern:b}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn max_step_examples() {
        assert_eq!(max_step(&[-0.5, 0.2, -2.0]), 0.5);
        assert_eq!(max_step(&[0.1, 0.2]), LAMBDA_CAP);
        assert_eq!(max_step(&[-1.0]), 1.0);
    }

    #[test]
    fn update_preserves_zeros_and_identity_at_zero_step() {
        let iterate = [0.0, 2.0, 3.0];
        let direction = [5.0, -0.1, 0.2];
        assert_eq!(update(&iterate, 0.0, &direction), vec![0.0, 2.0, 3.0]);
        let moved = update(&iterate, 1.0, &direction);
        assert_eq!(moved[0], 0.0);
        assert_abs_diff_eq!(moved[1], 2.0 * 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(moved[2], 3.0 * 1.2, epsilon = 1e-15);
    }

    #[test]
    fn update_at_max_step_zeroes_binding_coordinate_exactly() {
        let direction = [-0.5, 0.2, -2.0];
        let iterate = [1.0, 1.0, 3.0];
        let lambda = max_step(&direction);
        assert_eq!(lambda, 0.5);
        let next = update(&iterate, lambda, &direction);
        assert_eq!(next[2], 0.0);
        assert!(next[0] > 0.0 && next[1] > 0.0);
        // once zero, always zero
        let again = update(&next, 0.3, &[1.0, 1.0, 1.0]);
        assert_eq!(again[2], 0.0);
    }

    #[test]
    fn line_search_matches_quadratic_minimizer() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, _, counts, tensor) = ground(&demand);
        let objective = Objective::new(1.0, &counts, tensor, None, 2).unwrap();
        // start below the reconstruction point so the residual is negative
        let iterate = [0.0, 3.0, 2.0, 0.0, 0.0, 1.0, 4.0, 0.0];
        let direction = vec![0.0, 0.06, 0.04, 0.0, 0.0, 0.02, 0.08, 0.0];
        // R(lambda) = 0.5 || r0 + lambda u ||^2 with u the image of the
        // direction-scaled iterate; minimizer in closed form
        let image = |v: &[f64]| objective.tensor().predict_counts_flat(v);
        let r0: Vec<f64> =
            image(&iterate).iter().zip(counts.flat()).map(|(p, o)| p - o).collect();
        let scaled: Vec<f64> = iterate.iter().zip(&direction).map(|(x, d)| x * d).collect();
        let u = image(&scaled);
        let num: f64 = r0.iter().zip(&u).map(|(a, b)| a * b).sum();
        let den: f64 = u.iter().map(|b| b * b).sum();
        let closed_form = -num / den;
        assert!(closed_form > 0.0);
        let lambda_max = max_step(&direction);
        assert!(closed_form < lambda_max);
        let f0 = objective.value(&iterate).unwrap();
        let found = line_search(&objective, &iterate, &direction, lambda_max, f0).unwrap();
        assert!(
            (found - closed_form).abs() / closed_form <= 1e-3,
            "golden section {found} vs closed form {closed_form}"
        );
        assert!(found > 0.0 && found < lambda_max);
    }

    #[test]
    fn line_search_returns_zero_on_ascent_direction() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, seq, counts, tensor) = ground(&demand);
        let objective = Objective::new(1.0, &counts, tensor, None, 2).unwrap();
        // at the global minimum every direction is non-improving
        let direction = vec![0.0, 0.3, -0.2, 0.0, 0.0, 0.1, 0.4, 0.0];
        let f0 = objective.value(seq.flat()).unwrap();
        let lambda =
            line_search(&objective, seq.flat(), &direction, max_step(&direction), f0).unwrap();
        assert_eq!(lambda, 0.0);
    }

    #[test]
    fn solver_stops_at_constructed_stationary_point() {
        // one section, two observation intervals, demand cells x = (0 -> 1)
        // and y = (1 -> 0) with predictions (x + y, y) and observations
        // (0.5, 2): at (x, y) = (0, 1.25) the interior gradient vanishes and
        // the active coordinate has a positive gradient
        let mut data = vec![0.0; 2 * 4];
        data[1] = 1.0; // tau 0: x enters
        data[2] = 1.0; // tau 0: y enters
        data[4 + 2] = 1.0; // tau 1: y enters again
        let tensor = AssignmentTensor::from_flat(2, 1, 1, 4, data).unwrap();
        let counts = TrafficCounts::from_flat(2, 1, vec![0.5, 2.0]).unwrap();
        let objective = Objective::new(1.0, &counts, tensor, None, 2).unwrap();
        let start = vec![0.0, 0.0, 1.25, 0.0];
        let grad = objective.gradient(&start).unwrap();
        assert_abs_diff_eq!(grad[1], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[2], 0.0, epsilon = 1e-12);
        let run = solve_inner(&objective, start.clone(), 10).unwrap();
        assert!(run.state.kkt);
        assert_eq!(run.state.iteration, 0);
        assert_eq!(run.state.iterate, start);
    }

    #[test]
    fn inner_solver_descends_monotonically() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (_, _, _, counts, tensor) = ground(&demand);
        let objective = Objective::new(1.0, &counts, tensor, None, 2).unwrap();
        let start = vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let run = solve_inner(&objective, start, 10).unwrap();
        assert!(run.values.len() >= 2, "no accepted step");
        for w in run.values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective increased: {w:?}");
        }
        assert!(run.state.iterate.iter().all(|v| *v >= 0.0));
        assert_eq!(run.state.iterate[0], 0.0);
        assert_eq!(run.state.iterate[3], 0.0);
    }

    #[test]
    fn window_convergence_detects_plateaus() {
        assert!(!window_converged(&[1.0, 1.0], 1e-3, 3));
        assert!(window_converged(&[5.0, 1.0, 1.0, 1.0, 1.0], 1e-3, 3));
        assert!(!window_converged(&[1.0, 1.0, 1.0, 1.0, 2.0], 1e-3, 3));
        assert!(window_converged(&[2.0, 1.0, 1.0001, 1.0002, 1.0001], 1e-3, 3));
    }

    #[test]
    fn bilevel_recovers_small_instance_and_is_deterministic() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (network, grid, truth, counts, _) = ground(&demand);
        let config = EstimatorConfig { outer_cap: 12, ..EstimatorConfig::default() };
        let a = bilevel_estimate(&network, &counts, &grid, None, &config, Some(&truth)).unwrap();
        let b = bilevel_estimate(&network, &counts, &grid, None, &config, Some(&truth)).unwrap();
        assert_eq!(a.estimate.flat(), b.estimate.flat());
        assert!(!a.trace.is_empty());
        for record in &a.trace {
            assert_eq!(record.alpha, 1.0);
            for w in record.inner_values.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            assert_eq!(record.rmsn.len(), 2);
        }
        // the run improves on the initial uniform iterate
        let first = a.trace.first().unwrap();
        let last = a.trace.last().unwrap();
        assert!(last.objective <= first.objective);
        // feasibility and diagonal persistence
        for t in 0..2 {
            for i in 0..2 {
                assert_eq!(a.estimate.get(t, i, i), 0.0);
            }
        }
        assert!(a.estimate.flat().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn bilevel_guided_run_tracks_structure_targets() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (network, grid, truth, counts, _) = ground(&demand);
        let targets = demand_targets(&truth);
        let config = EstimatorConfig { outer_cap: 12, ..EstimatorConfig::default() };
        let run =
            bilevel_estimate(&network, &counts, &grid, Some(targets.clone()), &config, None)
                .unwrap();
        assert!(run.trace[0].alpha == 0.5);
        // the smoothing constant inside the divergence logs lets the
        // structure term dip a hair below zero once the iterate's
        // distributions coincide with the targets
        for r in &run.trace {
            assert!(r.structure >= -1e-9, "structure {}", r.structure);
        }
        // the guided estimate's distributions approach the targets
        let (p, a) = crate::model::production_attraction(&run.estimate);
        let dp = to_distribution(&p, FlowKind::Production, DistributionSource::Optimized).unwrap();
        let da = to_distribution(&a, FlowKind::Attraction, DistributionSource::Optimized).unwrap();
        let uniform = GlobalDistribution::uniform(FlowKind::Production, dp.len());
        let kl_p = metrics::kl(dp.values(), targets.production().values()).unwrap();
        let kl_u = metrics::kl(uniform.values(), targets.production().values()).unwrap();
        assert!(kl_p < kl_u, "guided production {kl_p} not better than uniform {kl_u}");
        let kl_a = metrics::kl(da.values(), targets.attraction().values()).unwrap();
        assert!(kl_a.is_finite());
    }

    #[test]
    fn aggregated_mode_evaluates_interval_sums() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (network, grid, truth, counts, _) = ground(&demand);
        let config = EstimatorConfig {
            outer_cap: 6,
            aggregate_counts: true,
            ..EstimatorConfig::default()
        };
        let run = bilevel_estimate(&network, &counts, &grid, None, &config, Some(&truth)).unwrap();
        assert!(!run.trace.is_empty());
        assert!(run.estimate.flat().iter().all(|v| *v >= 0.0));
        // aggregation changes the residual and therefore the trajectory
        let plain =
            bilevel_estimate(&network, &counts, &grid, None, &EstimatorConfig { outer_cap: 6, ..EstimatorConfig::default() }, Some(&truth))
                .unwrap();
        assert_ne!(run.trace[0].objective, plain.trace[0].objective);
    }

    #[test]
    fn initial_iterate_matches_observed_total_counts() {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (network, grid, _, counts, _) = ground(&demand);
        let init = init_iterate(&network, &counts, &grid).unwrap();
        let seq = OdSequence::from_flat(2, 2, init).unwrap();
        let (sim_counts, _) = simulate(&network, &seq, &grid).unwrap();
        let rel = (sim_counts.total() - counts.total()).abs() / counts.total();
        assert!(rel <= 0.05, "initial counts off by {rel}");
    }

    #[test]
    fn invalid_configurations_are_rejected()  {
        let demand = [0.0, 6.0, 4.0, 0.0, 0.0, 2.0, 8.0, 0.0];
        let (network, grid, _, counts, tensor) = ground(&demand);
        assert!(Objective::new(1.5, &counts, tensor.clone(), None, 2).is_err());
        assert!(Objective::new(0.5, &counts, tensor.clone(), None, 2).is_err());
        let bad_counts = TrafficCounts::zeros(3, 2);
        assert!(Objective::new(1.0, &bad_counts, tensor, None, 2).is_err());
        let config = EstimatorConfig { n_inner: 0, ..EstimatorConfig::default() };
        assert!(bilevel_estimate(&network, &counts, &grid, None, &config, None).is_err());
    }
}
