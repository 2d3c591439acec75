//! Per-epoch records and the mission log shared by both mission loops.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{BudgetLedger, CandidateRecord, Method};
use crate::models::{TrajTag, Trajectory};
use crate::smid::ParameterBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub k: usize,
    pub t: f64,
    pub committed: TrajTag,
    /// 1-based candidate index, absent for fallback or backup-only epochs.
    pub index: Option<usize>,
    pub horizon: f64,
    pub delta_xi: f64,
    pub score: f64,
    pub charge: f64,
    pub spent: f64,
    pub n_candidates: usize,
    pub n_valid: usize,
    /// Box after this epoch's update.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Free-form diagnostics (reused plan, inconsistent data, ...).
    pub note: String,
    #[serde(skip)]
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsSample {
    pub t: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundsSample {
    pub fn of(t: f64, bx: &ParameterBox) -> Self {
        Self {
            t,
            lo: bx.lo().iter().copied().collect(),
            hi: bx.hi().iter().copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionOutcome {
    pub total_cost: f64,
    /// No state-constraint violation over the executed trajectory.
    pub safe: bool,
    pub first_violation: Option<f64>,
    pub goal_reached: bool,
    pub laps: usize,
    pub lap_times: Vec<f64>,
    pub spent: Option<f64>,
    pub budget: Option<f64>,
    pub informative_commits: usize,
    pub fallback_epochs: usize,
    pub initial_lo: Vec<f64>,
    pub initial_hi: Vec<f64>,
    pub final_lo: Vec<f64>,
    pub final_hi: Vec<f64>,
    /// Set when the mission stopped before its natural end.
    pub aborted: Option<String>,
    pub duration: f64,
}

#[derive(Clone, Debug)]
pub struct MissionLog {
    pub method: Method,
    pub epochs: Vec<EpochRecord>,
    pub executed: Trajectory,
    /// Segment tag of every executed interval.
    pub tags: Vec<TrajTag>,
    pub bounds: Vec<BoundsSample>,
    pub outcome: MissionOutcome,
}

/// Mutable state accumulated by a mission loop.
pub(crate) struct Recorder {
    pub epochs: Vec<EpochRecord>,
    pub executed: Trajectory,
    pub tags: Vec<TrajTag>,
    pub bounds: Vec<BoundsSample>,
    pub cost: f64,
    pub first_violation: Option<f64>,
}

impl Recorder {
    pub fn new(x0: &[f64], t0: f64, bx: &ParameterBox) -> Self {
        Self {
            epochs: Vec::new(),
            executed: Trajectory::new(DVector::from_column_slice(x0), t0, TrajTag::Executed),
            tags: Vec::new(),
            bounds: vec![BoundsSample::of(t0, bx)],
            cost: 0.0,
            first_violation: None,
        }
    }

    pub fn append(&mut self, segment: &Trajectory, tag: TrajTag) {
        self.executed.extend(segment);
        self.tags.extend(std::iter::repeat_n(tag, segment.inputs.len()));
    }

    pub fn finish(
        self,
        method: Method,
        ledger: Option<&BudgetLedger>,
        initial: &ParameterBox,
        last: &ParameterBox,
        extra: OutcomeExtra,
    ) -> MissionLog {
        let informative_commits = self.epochs.iter().filter(|e| e.committed == TrajTag::Informative).count();
        let fallback_epochs = self.epochs.iter().filter(|e| e.committed == TrajTag::Fallback).count();
        let outcome = MissionOutcome {
            total_cost: self.cost,
            safe: self.first_violation.is_none(),
            first_violation: self.first_violation,
            goal_reached: extra.goal_reached,
            laps: extra.lap_times.len(),
            lap_times: extra.lap_times,
            spent: ledger.map(|l| l.spent()),
            budget: ledger.map(|l| l.budget()),
            informative_commits,
            fallback_epochs,
            initial_lo: initial.lo().iter().copied().collect(),
            initial_hi: initial.hi().iter().copied().collect(),
            final_lo: last.lo().iter().copied().collect(),
            final_hi: last.hi().iter().copied().collect(),
            aborted: extra.aborted,
            duration: self.executed.duration(),
        };
        MissionLog {
            method,
            epochs: self.epochs,
            executed: self.executed,
            tags: self.tags,
            bounds: self.bounds,
            outcome,
        }
    }
}

#[derive(Default)]
pub(crate) struct OutcomeExtra {
    pub goal_reached: bool,
    pub lap_times: Vec<f64>,
    pub aborted: Option<String>,
}
