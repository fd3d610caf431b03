//! Allocation search: grouping schemes, budget-feasible per-group ratios,
//! validation selection, the objective, and the Bayesian-optimization loop.

mod allocation;
mod bo;
mod evaluate;
mod scheme;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use allocation::{
    format_rank_vector, parse_rank_vector, project_budget, repair_allocation, representative_lambda,
    sample_allocation, Allocation, AllocationFile, AllocationSpace, BUDGET_TOLERANCE, MAX_LAMBDA,
};
pub use bo::{
    bo_minimize, bo_search, transfer, warm_start, BudgetSimplex, ObservationLog, ObservationRecord, SearchSpace,
    Trial, PERTURB_SIGMA, WARM_START_EPOCHS,
};
pub use evaluate::{
    build_bases, objective, select_validation, select_validation_with, sensitivity_sweep, sweep_csv, Bases,
    Evaluation, Evaluator, ValidationSet,
};
pub use scheme::{Group, GroupKind, GroupingScheme, SchemeName};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Total objective evaluations, initial design included.
    pub epochs: usize,
    pub init_points: usize,
    pub candidates_per_step: usize,
    pub beta_rkl: f64,
    pub seed: u64,
    /// Probe allocations for validation selection.
    pub n_probe: usize,
    pub top_k: usize,
    /// Evaluated before the initial design when set.
    #[serde(skip)]
    pub prior: Option<Allocation>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            init_points: 10,
            candidates_per_step: 1024,
            beta_rkl: 1.0,
            seed: 0,
            n_probe: 20,
            top_k: 16,
            prior: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.init_points == 0 || self.candidates_per_step == 0 {
            return fail("epochs, init_points and candidates_per_step must be positive".into());
        }
        if self.epochs < self.init_points {
            return fail(format!("epochs {} < init_points {}", self.epochs, self.init_points));
        }
        if !(self.beta_rkl >= 0.0 && self.beta_rkl.is_finite()) {
            return fail(format!("beta_rkl {} must be non-negative", self.beta_rkl));
        }
        Ok(())
    }
}
