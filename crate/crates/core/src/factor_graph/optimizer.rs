//! Gauss-Newton with a step-halving line search.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::factors::{self, Linearization};
use super::sparse::BlockStructure;
use super::{Factor, FactorGraph, OptimizeError, Variable, VariableId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop when the largest update component falls below this.
    pub step_tolerance: f64,
    /// Stop when the cost decreases by less than this fraction.
    pub relative_tolerance: f64,
    pub max_step_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-8,
            relative_tolerance: 1e-9,
            max_step_halvings: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvergenceReason {
    /// No free variables or no factors.
    NothingToOptimize,
    ZeroResidual,
    StepTolerance,
    RelativeDecrease,
    /// Every halved step increased the cost; the current point is a minimum
    /// to numerical precision.
    NoFurtherDecrease,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub reason: ConvergenceReason,
    pub converged: bool,
    /// Cost before the first iteration followed by the cost after each one.
    pub cost_trace: Vec<f64>,
    /// Factor evaluations skipped during linearization because a landmark
    /// projected behind a camera.
    pub skipped_evaluations: usize,
    /// Factors still not evaluable at the final estimate.
    pub outlier_factors: Vec<usize>,
}

pub(super) fn total_cost(factors: &[Factor], values: &[Variable]) -> (f64, usize) {
    let terms: Vec<Option<f64>> = factors
        .par_iter()
        .map(|f| {
            let r = factors::residual(f, values).ok()?;
            let w = f.information();
            Some((r.transpose() * w * &r)[0])
        })
        .collect();
    let mut cost = 0.0;
    let mut invalid = 0;
    for t in terms {
        match t {
            Some(c) => cost += c,
            None => invalid += 1,
        }
    }
    (cost, invalid)
}

fn outliers(factors: &[Factor], values: &[Variable]) -> Vec<usize> {
    factors
        .iter()
        .enumerate()
        .filter(|(_, f)| factors::residual(f, values).is_err())
        .map(|(i, _)| i)
        .collect()
}

/// Minimizes the weighted squared residual over the free variables.
///
/// Reaching `max_iterations` is not an error: the report is returned with
/// `converged == false`.
pub fn optimize(graph: &mut FactorGraph, config: &OptimizerConfig) -> Result<OptimizeReport, OptimizeError> {
    let fixed = graph.fixed_mask().to_vec();
    let mut local = vec![usize::MAX; fixed.len()];
    let mut free_ids: Vec<VariableId> = Vec::new();
    for id in graph.variable_ids() {
        if !fixed[id.index()] {
            local[id.index()] = free_ids.len();
            free_ids.push(id);
        }
    }

    let factor_list = graph.factors().to_vec();
    let (mut cost, mut invalid) = total_cost(&factor_list, graph.values());
    let mut report = OptimizeReport {
        iterations: 0,
        initial_cost: cost,
        final_cost: cost,
        reason: ConvergenceReason::NothingToOptimize,
        converged: true,
        cost_trace: vec![cost],
        skipped_evaluations: 0,
        outlier_factors: Vec::new(),
    };
    if free_ids.is_empty() || factor_list.is_empty() {
        report.outlier_factors = outliers(&factor_list, graph.values());
        return Ok(report);
    }

    let mut edges = BTreeSet::new();
    for f in &factor_list {
        let vars: Vec<usize> = f
            .variables()
            .into_iter()
            .filter(|v| !fixed[v.index()])
            .map(|v| local[v.index()])
            .collect();
        for &a in &vars {
            for &b in &vars {
                if a < b {
                    edges.insert((a, b));
                }
            }
        }
    }
    let structure = BlockStructure::new(free_ids.iter().map(|v| v.kind().dim()).collect(), &edges);
    let infos: Vec<DMatrix<f64>> = factor_list.iter().map(Factor::information).collect();

    let mut reason = ConvergenceReason::MaxIterations;
    while report.iterations < config.max_iterations {
        if cost == 0.0 {
            reason = ConvergenceReason::ZeroResidual;
            break;
        }
        let values = graph.values();
        let lins: Vec<Option<Linearization>> = factor_list
            .par_iter()
            .map(|f| factors::linearize(f, values).ok())
            .collect();

        let mut sys = structure.system();
        for (lin, w) in lins.iter().zip(&infos) {
            let Some(lin) = lin else {
                report.skipped_evaluations += 1;
                continue;
            };
            let wr = w * &lin.residual;
            for (a, ja) in lin.variables.iter().zip(&lin.jacobians) {
                if fixed[a.index()] {
                    continue;
                }
                let la = local[a.index()];
                let jat_w = ja.transpose() * w;
                structure.add_rhs(&mut sys, la, &(-(ja.transpose() * &wr)));
                for (b, jb) in lin.variables.iter().zip(&lin.jacobians) {
                    if fixed[b.index()] {
                        continue;
                    }
                    let lb = local[b.index()];
                    if la <= lb {
                        structure.add_hessian(&mut sys, la, lb, &(&jat_w * jb));
                    }
                }
            }
        }
        let delta = structure
            .solve(sys)
            .map_err(|b| OptimizeError::SingularHessian(free_ids[b]))?;
        report.iterations += 1;

        let step_norm = delta.iter().map(|d| d.amax()).fold(0.0, f64::max);
        if step_norm < config.step_tolerance {
            reason = ConvergenceReason::StepTolerance;
            break;
        }

        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=config.max_step_halvings {
            let mut candidate = values.to_vec();
            let mut valid = true;
            for (id, d) in free_ids.iter().zip(&delta) {
                let scaled: Vec<f64> = d.iter().map(|x| x * alpha).collect();
                let v = values[id.index()].boxplus(&scaled);
                valid &= v.is_valid();
                candidate[id.index()] = v;
            }
            if valid {
                let (c, inv) = total_cost(&factor_list, &candidate);
                if c <= cost && inv <= invalid {
                    accepted = Some((candidate, c, inv));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((candidate, new_cost, new_invalid)) = accepted else {
            reason = ConvergenceReason::NoFurtherDecrease;
            break;
        };
        let decrease = (cost - new_cost) / cost;
        graph.replace_values(candidate);
        cost = new_cost;
        invalid = new_invalid;
        report.cost_trace.push(cost);
        if decrease < config.relative_tolerance {
            reason = ConvergenceReason::RelativeDecrease;
            break;
        }
    }
    report.final_cost = cost;
    report.reason = reason;
    report.converged = reason != ConvergenceReason::MaxIterations;
    report.outlier_factors = outliers(&factor_list, graph.values());
    Ok(report)
}
