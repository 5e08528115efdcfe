//! Batch Gauss-Newton over a [`FactorSet`]. Each step solves the whitened
//! linear least-squares problem `min |L dx - y|` through a sparse orthogonal
//! factorization `L = Q R`, so `R^T R` is the Cholesky factorization of the
//! normal equations without ever forming `L^T L`.

use crate::geometry::dcm_from_euler;
use crate::graph::{build_graph, FactorSet, GraphError, Layout, StateVector, WeightConfig};
use crate::magmodel::CalParams;
use crate::measurement::MeasurementSet;
use crate::sparse::{BandedQr, CsrMatrix, FactorError, Ordering, TriangularFactor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const POWER_ITERATIONS: usize = 50;
const LAMBDA_MAX: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("normal equations are singular at state column {pivot} (pivot/column-norm {condition:e})")]
    NormalEquationsSingular { pivot: usize, condition: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Threshold on `max_i |dx_i| / (1 + |x_i|)`.
    pub step_tolerance: f64,
    /// Threshold on `(cost_prev - cost) / cost_prev`.
    pub cost_tolerance: f64,
    /// Initial diagonal damping; zero is pure Gauss-Newton.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 100,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-12,
            damping: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.into()));
        if self.max_iterations == 0 {
            return bad("max-iterations must be at least 1");
        }
        if !(self.step_tolerance > 0.0) || !(self.cost_tolerance > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.damping >= 0.0) || !self.damping.is_finite() {
            return bad("damping must be finite and nonnegative");
        }
        Ok(())
    }

    /// Levenberg-style damping enabled with the given starting value.
    pub fn damped(lambda: f64) -> Self {
        SolverConfig {
            damping: lambda,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    StepTolerance,
    CostTolerance,
    MaxIterations,
}

/// Extreme singular values of the whitened Jacobian at the final state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionEstimate {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl ConditionEstimate {
    pub fn condition_number(&self) -> f64 {
        self.sigma_max / self.sigma_min
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub termination: Termination,
    /// Linear solves performed.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// `|L^T y|_inf` at the final state.
    pub gradient_norm: f64,
    /// `max_j |(L^T y)_j| / |L_j|`: the gradient with unit-norm Jacobian columns.
    pub scaled_gradient_norm: f64,
    /// Last step in weighted max-norm.
    pub last_step: f64,
    pub condition: ConditionEstimate,
    /// Marginal covariance of `[h_hi, h_vec, T^v]` from `(L^T L)^-1`.
    pub param_covariance: DMatrix<f64>,
    pub state: StateVector,
}

/// Initial state from the measurements alone.
pub fn initialize(meas: &MeasurementSet) -> StateVector {
    let attitudes: Vec<_> = meas.epochs.iter().map(|e| dcm_from_euler(&e.rpy)).collect();
    let fields = meas
        .epochs
        .iter()
        .zip(&attitudes)
        .map(|(e, c)| c.matrix().transpose() * e.mag.m_vec)
        .collect();
    StateVector::new(CalParams::identity(), fields, attitudes).expect("equal lengths by construction")
}

/// Builds the graph, initializes and solves.
pub fn calibrate(
    meas: &MeasurementSet,
    weights: &WeightConfig,
    cfg: &SolverConfig,
) -> Result<SolveReport, SolverError> {
    let graph = build_graph(meas, weights)?;
    gauss_newton(&graph, initialize(meas), cfg)
}

/// Orthogonal factorization of the (optionally damped) whitened system in
/// elimination order.
fn factorize(
    l: &CsrMatrix,
    y: &DVector<f64>,
    ordering: &Ordering,
    damping: Option<&DVector<f64>>,
) -> Result<TriangularFactor, SolverError> {
    let n = l.ncols();
    let tail = Layout::PARAMS.min(n);
    let nb = n - tail;
    let mut rows: Vec<(Vec<usize>, &[f64])> = (0..l.nrows())
        .map(|i| {
            let (cols, vals) = l.row(i);
            (cols.iter().map(|&c| ordering.new_index(c)).collect(), vals)
        })
        .collect();
    let width = BandedQr::required_width(nb, rows.iter().map(|(c, _)| c.as_slice()));
    // rows sorted by leading column keep the working row short
    let lead = |c: &[usize]| c.iter().copied().min().unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| lead(&rows[i].0));
    let mut qr = BandedQr::new(n, tail, width);
    let overflow = |e| match e {
        FactorError::BandOverflow { .. } => unreachable!("width computed from the rows"),
        FactorError::RankDeficient { column, ratio } => SolverError::NormalEquationsSingular {
            pivot: ordering.old_index(column),
            condition: ratio,
        },
    };
    for i in order {
        let (cols, vals) = &mut rows[i];
        qr.add_row(cols, vals, y[i]).map_err(overflow)?;
        cols.clear();
    }
    if let Some(d) = damping {
        for j in 0..n {
            let v = d[ordering.old_index(j)];
            if v > 0.0 {
                qr.add_row(&[j], &[v], 0.0).map_err(overflow)?;
            }
        }
    }
    qr.finish().map_err(overflow)
}

fn column_norms(l: &CsrMatrix) -> DVector<f64> {
    let mut out = DVector::zeros(l.ncols());
    for i in 0..l.nrows() {
        let (cols, vals) = l.row(i);
        for (c, v) in cols.iter().zip(vals) {
            out[*c] += v * v;
        }
    }
    out.map(f64::sqrt)
}

fn step_metric(state: &StateVector, delta: &DVector<f64>) -> f64 {
    let x = state.to_flat();
    delta
        .iter()
        .zip(x.iter())
        .map(|(d, x)| d.abs() / (1.0 + x.abs()))
        .fold(0.0, f64::max)
}

fn unit_start(n: usize) -> DVector<f64> {
    // deterministic, not aligned with any coordinate axis
    DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 101) as f64 / 101.0).normalize()
}

/// Power and inverse iteration on `R^T R = L^T L`.
fn condition_estimate(r: &TriangularFactor) -> ConditionEstimate {
    let n = r.dim();
    let mut v = unit_start(n);
    let mut lmax = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = r.mul_rt(&r.mul_r(&v));
        lmax = v.dot(&w);
        let norm = w.norm();
        if !(norm > 0.0) {
            break;
        }
        v = w / norm;
    }
    let mut v = unit_start(n);
    let mut inv = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = r.solve_r(&r.solve_rt(&v));
        inv = v.dot(&w);
        let norm = w.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        v = w / norm;
    }
    ConditionEstimate {
        sigma_min: if inv > 0.0 { (1.0 / inv).sqrt() } else { 0.0 },
        sigma_max: lmax.max(0.0).sqrt(),
    }
}

fn param_covariance(r: &TriangularFactor, ordering: &Ordering) -> DMatrix<f64> {
    let n = r.dim();
    let p = Layout::PARAMS;
    let tail = r.tail_covariance();
    let mut cov = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            let (i, j) = (ordering.old_index(n - p + a), ordering.old_index(n - p + b));
            cov[(i, j)] = tail[(a, b)];
        }
    }
    cov
}

/// Iterates `dx = (L^T L)^-1 L^T y`, `x <- x [+] dx` until convergence.
pub fn gauss_newton(graph: &FactorSet, init: StateVector, cfg: &SolverConfig) -> Result<SolveReport, SolverError> {
    cfg.validate()?;
    let ordering = graph.elimination_ordering();
    let mut state = init;
    let mut cost = graph.cost(&state)?;
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = cfg.damping;
    let damping_on = cfg.damping > 0.0;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < cfg.max_iterations {
        let sys = graph.linearize(&state)?;
        let damping_scale = column_norms(&sys.l);
        loop {
            iterations += 1;
            let scaled = damping_on.then(|| &damping_scale * lambda.sqrt());
            let factor = match factorize(&sys.l, &sys.y, &ordering, scaled.as_ref()) {
                Ok(f) => f,
                Err(_) if damping_on && lambda < LAMBDA_MAX => {
                    lambda *= 10.0;
                    if iterations >= cfg.max_iterations {
                        break 'outer;
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let delta = ordering.unpermute(&factor.solution());
            let candidate = state.retract(&delta);
            let new_cost = match graph.cost(&candidate) {
                Ok(c) if c.is_finite() => Some(c),
                Ok(_) | Err(GraphError::DegenerateField { .. }) if damping_on => None,
                Ok(c) => Some(c),
                Err(e) => return Err(e.into()),
            };
            if damping_on && new_cost.is_none_or(|c| c > cost) {
                lambda = (lambda * 10.0).min(LAMBDA_MAX);
                if iterations >= cfg.max_iterations || lambda >= LAMBDA_MAX {
                    break 'outer;
                }
                continue;
            }
            let new_cost = new_cost.expect("checked above");
            if damping_on {
                lambda = (lambda / 10.0).max(1e-12);
            }
            last_step = step_metric(&state, &delta);
            let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            state = candidate;
            cost = new_cost;
            history.push(cost);
            if last_step < cfg.step_tolerance {
                termination = Termination::StepTolerance;
                break 'outer;
            }
            if decrease >= 0.0 && decrease < cfg.cost_tolerance {
                termination = Termination::CostTolerance;
                break 'outer;
            }
            break;
        }
    }

    let sys = graph.linearize(&state)?;
    let factor = factorize(&sys.l, &sys.y, &ordering, None)?;
    let gradient = sys.gradient();
    let norms = column_norms(&sys.l);
    let scaled_gradient_norm = gradient
        .iter()
        .zip(norms.iter())
        .map(|(g, n)| if *n > 0.0 { g.abs() / n } else { 0.0 })
        .fold(0.0, f64::max);
    Ok(SolveReport {
        converged: termination != Termination::MaxIterations,
        termination,
        iterations,
        initial_cost,
        final_cost: cost,
        cost_history: history,
        gradient_norm: gradient.amax(),
        scaled_gradient_norm,
        last_step,
        condition: condition_estimate(&factor),
        param_covariance: param_covariance(&factor, &ordering),
        state,
    })
}
