//! Replayable record of every mechanism invocation in a run.

use serde::{Deserialize, Serialize};

use crate::accountant::{
    account_plan, AccountingError, AlphaGrid, CompositionPlan, Mechanism, PlanEntry, PrivacyReport,
    SubsampleSpec,
};

/// One mechanism release, possibly applied to several disjoint partitions at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismEvent {
    /// Emitting component, e.g. `"dpm"` or `"ksa"`.
    pub component: String,
    /// Step inside the component, e.g. `"split"` or `"child_counts"`.
    pub step: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u32>,
    pub mechanism: Mechanism,
    /// Sequential repetitions on the same data.
    pub repetitions: u32,
    /// Number of disjoint partitions the release was applied to. Parallel
    /// composition means this does not change the privacy cost.
    pub parallel: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<SubsampleSpec>,
}

impl MechanismEvent {
    pub fn new(component: &str, step: &str, mechanism: Mechanism) -> Self {
        Self {
            component: component.to_string(),
            step: step.to_string(),
            level: None,
            mechanism,
            repetitions: 1,
            parallel: 1,
            subsample: None,
        }
    }

    pub fn at_level(mut self, level: u32) -> Self {
        self.level = Some(level);
        self
    }

    pub fn repeated(mut self, times: u32) -> Self {
        self.repetitions = times;
        self
    }

    pub fn parallel(mut self, partitions: u32) -> Self {
        self.parallel = partitions;
        self
    }

    fn plan_entry(&self) -> PlanEntry {
        PlanEntry {
            mechanism: self.mechanism.clone(),
            count: self.repetitions,
            subsample: self.subsample,
        }
    }
}

/// Composition plan that sequentially composes all events.
pub fn events_to_plan(events: &[MechanismEvent], delta: f64, grid: &AlphaGrid) -> CompositionPlan {
    CompositionPlan {
        entries: events.iter().map(MechanismEvent::plan_entry).collect(),
        target_delta: delta,
        grid: grid.clone(),
    }
}

/// Accounted `(epsilon, delta)` of a mechanism log.
pub fn replay(
    events: &[MechanismEvent],
    delta: f64,
    grid: &AlphaGrid,
) -> Result<PrivacyReport, AccountingError> {
    account_plan(&events_to_plan(events, delta, grid))
}
