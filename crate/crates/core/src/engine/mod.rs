//! Candidate horizons, scoring, exploration-cost accounting and the commit
//! rule, plus the two mission loops built on them.

pub mod log;
pub mod quad;
pub mod race;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{regression_tuples, ModelSpec, Trajectory};
use crate::shrinkage::{Aggregate, PredictorKind};
use crate::smid::{calibrate_eps, smid_update, ParameterBox};

/// Which components a mission run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Robust backup only: no exploration and no bound updates.
    Baseline,
    /// Nominal planner on the configured parameter guess, no safety layer.
    Nominal,
    /// Nominal objective plus information reward, no safety layer.
    Weighted,
    /// Fallback controller only.
    Fallback,
    /// Nominal planner behind the rollout gatekeeper.
    NominalGk,
    /// Information-weighted planner behind the rollout gatekeeper.
    WeightedGk,
    /// Paired informative/conservative candidates, budget ledger and commit rule.
    DualGatekeeper,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::Nominal,
        Method::Weighted,
        Method::Fallback,
        Method::NominalGk,
        Method::WeightedGk,
        Method::DualGatekeeper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Nominal => "nominal",
            Method::Weighted => "weighted",
            Method::Fallback => "fallback",
            Method::NominalGk => "nominal_gk",
            Method::WeightedGk => "weighted_gk",
            Method::DualGatekeeper => "dual_gatekeeper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }

    pub fn uses_ledger(self) -> bool {
        self == Method::DualGatekeeper
    }

    /// Whether executed data feeds the bound update.
    pub fn learns(self) -> bool {
        self != Method::Baseline
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Candidate horizon increment (s).
    pub t_c: f64,
    /// Horizon discount rate in the score (1/s).
    pub lambda: f64,
    pub predictor: PredictorKind,
    pub n_shrinkage_rollouts: usize,
    pub aggregate: Aggregate,
    /// Aggregation of rollout costs into predicted costs.
    pub cost_aggregate: Aggregate,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            t_c: 2.0,
            lambda: 0.1,
            predictor: PredictorKind::Rollout,
            n_shrinkage_rollouts: 20,
            aggregate: Aggregate::Mean,
            cost_aggregate: Aggregate::Mean,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_c > 0.0) || !(self.lambda >= 0.0) || self.n_shrinkage_rollouts == 0 {
            return Err(Error::Config("engine needs t_c > 0, lambda >= 0 and at least one rollout".into()));
        }
        Ok(())
    }
}

/// How executed data becomes bound updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    /// Integral regression window (s), a multiple of the step.
    pub window: f64,
    /// Fixed slack; `None` calibrates it from probe trajectories.
    pub eps: Option<f64>,
    /// Multiplier on the measured quadrature error during calibration.
    pub eps_safety: f64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            window: 0.2,
            eps: None,
            eps_safety: 2.0,
        }
    }
}

impl LearningConfig {
    /// Slack for the bound update: the fixed value or a calibration on `probes`.
    pub fn resolve_eps(&self, model: &ModelSpec, probes: &[Trajectory], bx: &ParameterBox) -> Result<f64> {
        match self.eps {
            Some(e) if e > 0.0 => Ok(e),
            Some(_) => Err(Error::Config("eps must be positive".into())),
            None => Ok(calibrate_eps(model, probes, self.window, bx, self.eps_safety)?.eps),
        }
    }
}

/// Bound update from one executed segment; the box is unchanged when the
/// segment is too short or the data contradicts it.
pub(crate) fn learn_from(
    model: &ModelSpec,
    bx: &ParameterBox,
    segment: &Trajectory,
    window: f64,
    eps: f64,
) -> Result<(ParameterBox, bool)> {
    let tuples = regression_tuples(model, segment, window)?;
    if tuples.is_empty() {
        return Ok((bx.clone(), true));
    }
    let up = smid_update(bx, &tuples, eps)?;
    Ok((up.bounds, up.consistent))
}

/// `{min(i t_c, t_b)}` for `i = 1..=ceil(t_b / t_c)`, ascending and distinct.
pub fn candidate_horizons(t_b: f64, t_c: f64) -> Result<Vec<f64>> {
    if !(t_b > 0.0 && t_c > 0.0) || !t_b.is_finite() {
        return Err(Error::Contract("horizons need positive finite t_b and t_c".into()));
    }
    let count = ((t_b / t_c) - 1e-9).ceil().max(1.0) as usize;
    let mut out: Vec<f64> = Vec::with_capacity(count);
    for i in 1..=count {
        let h = (i as f64 * t_c).min(t_b);
        if out.last().is_none_or(|&l| h > l + 1e-12) {
            out.push(h);
        }
    }
    Ok(out)
}

/// `exp(-lambda T) * delta_xi`.
pub fn score_candidate(delta_xi: f64, horizon: f64, lambda: f64) -> f64 {
    (-lambda * horizon).exp() * delta_xi
}

/// Excess predicted cost of exploring, `max(0, info - cons)`.
pub fn exploration_cost(cost_info: f64, cost_cons: f64) -> f64 {
    (cost_info - cost_cons).max(0.0)
}

/// One informative/conservative pair at a candidate horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    /// 1-based horizon index.
    pub index: usize,
    pub horizon: f64,
    /// `None` when the pair was never checked (see [`commit_lazy`]).
    pub valid: Option<bool>,
    pub p_safe: f64,
    pub cost_info: f64,
    pub cost_cons: f64,
    pub delta_xi: f64,
    pub score: f64,
    pub exploration_cost: f64,
    pub budget_feasible: bool,
}

impl CandidateRecord {
    pub fn new(index: usize, horizon: f64, delta_xi: f64, lambda: f64) -> Self {
        Self {
            index,
            horizon,
            valid: None,
            p_safe: f64::NAN,
            cost_info: f64::NAN,
            cost_cons: f64::NAN,
            delta_xi,
            score: score_candidate(delta_xi, horizon, lambda),
            exploration_cost: f64::NAN,
            budget_feasible: false,
        }
    }

    /// Fills validity and costs and derives the exploration cost.
    pub fn evaluate(&mut self, valid: bool, p_safe: f64, cost_info: f64, cost_cons: f64) {
        self.valid = Some(valid);
        self.p_safe = p_safe;
        self.cost_info = cost_info;
        self.cost_cons = cost_cons;
        self.exploration_cost = exploration_cost(cost_info, cost_cons);
    }
}

/// Cumulative exploration spending against a fixed allowance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    budget: f64,
    spent: f64,
    entries: Vec<(f64, f64)>,
}

impl BudgetLedger {
    pub fn new(budget: f64) -> Result<Self> {
        if !(budget >= 0.0) || !budget.is_finite() {
            return Err(Error::Config("exploration budget must be finite and non-negative".into()));
        }
        Ok(Self {
            budget,
            spent: 0.0,
            entries: Vec::new(),
        })
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    /// `(t_k, charge)` per epoch, including zero charges.
    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn can_afford(&self, amount: f64) -> bool {
        amount.is_finite() && self.spent + amount <= self.budget
    }

    pub fn charge(&mut self, t_k: f64, amount: f64) -> Result<()> {
        if !(amount >= 0.0) {
            return Err(Error::Contract(format!("negative or undefined charge {amount}")));
        }
        if !self.can_afford(amount) {
            return Err(Error::Contract(format!(
                "charge {amount} would exceed the budget ({} of {} spent)",
                self.spent, self.budget
            )));
        }
        self.spent += amount;
        self.entries.push((t_k, amount));
        Ok(())
    }
}

/// Indices (into `records`) of valid candidates the ledger can afford.
pub fn feasible_set(records: &[CandidateRecord], ledger: &BudgetLedger) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.valid == Some(true) && ledger.can_afford(r.exploration_cost))
        .map(|(j, _)| j)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    /// Informative segment at this position in the candidate list.
    Informative(usize),
    /// The shortest conservative segment.
    Conservative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub choice: Choice,
    /// Committed horizon: time until the next replanning epoch.
    pub horizon: f64,
    pub charge: f64,
}

fn better(records: &[CandidateRecord], a: usize, b: usize) -> bool {
    let (ra, rb) = (&records[a], &records[b]);
    ra.score > rb.score || (ra.score == rb.score && ra.index < rb.index)
}

/// Highest score over the feasible set, ties to the smallest index; the
/// conservative segment with no charge when nothing is feasible. Charges the
/// ledger and marks `budget_feasible` on every record. A zero budget
/// disables exploration outright, even for candidates that cost nothing.
pub fn commit(records: &mut [CandidateRecord], ledger: &mut BudgetLedger, t_k: f64) -> Result<Decision> {
    if records.is_empty() {
        return Err(Error::Contract("commit needs at least one candidate".into()));
    }
    let feasible = if ledger.budget() > 0.0 {
        feasible_set(records, ledger)
    } else {
        Vec::new()
    };
    for &j in &feasible {
        records[j].budget_feasible = true;
    }
    let best = feasible.iter().copied().fold(None, |acc: Option<usize>, j| match acc {
        Some(b) if !better(records, j, b) => Some(b),
        _ => Some(j),
    });
    let decision = match best {
        Some(j) => Decision {
            choice: Choice::Informative(j),
            horizon: records[j].horizon,
            charge: records[j].exploration_cost,
        },
        None => Decision {
            choice: Choice::Conservative,
            horizon: records[0].horizon,
            charge: 0.0,
        },
    };
    ledger.charge(t_k, decision.charge)?;
    Ok(decision)
}

/// Same decision as [`commit`] but evaluates candidates on demand, in
/// descending score order, stopping at the first one that is valid and
/// affordable. Records never reached keep `valid = None`.
pub fn commit_lazy(
    records: &mut [CandidateRecord],
    ledger: &mut BudgetLedger,
    t_k: f64,
    mut evaluate: impl FnMut(&mut CandidateRecord) -> Result<()>,
) -> Result<Decision> {
    if records.is_empty() {
        return Err(Error::Contract("commit needs at least one candidate".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .score
            .total_cmp(&records[a].score)
            .then(records[a].index.cmp(&records[b].index))
    });
    if ledger.budget() == 0.0 {
        order.clear();
    }
    for j in order {
        evaluate(&mut records[j])?;
        if records[j].valid == Some(true) && ledger.can_afford(records[j].exploration_cost) {
            records[j].budget_feasible = true;
            let decision = Decision {
                choice: Choice::Informative(j),
                horizon: records[j].horizon,
                charge: records[j].exploration_cost,
            };
            ledger.charge(t_k, decision.charge)?;
            return Ok(decision);
        }
    }
    let decision = Decision {
        choice: Choice::Conservative,
        horizon: records[0].horizon,
        charge: 0.0,
    };
    ledger.charge(t_k, 0.0)?;
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rec(index: usize, horizon: f64, delta_xi: f64, valid: bool, cost: f64) -> CandidateRecord {
        let mut r = CandidateRecord::new(index, horizon, delta_xi, 0.1);
        r.evaluate(valid, 1.0, 10.0 + cost, 10.0);
        r
    }

    #[test]
    fn horizons() {
        assert_eq!(candidate_horizons(10.0, 2.0).unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(candidate_horizons(5.0, 2.0).unwrap(), vec![2.0, 4.0, 5.0]);
        assert_eq!(candidate_horizons(1.5, 2.0).unwrap(), vec![1.5]);
        assert!(candidate_horizons(0.0, 2.0).is_err());
        assert!(candidate_horizons(3.0, 0.0).is_err());
    }

    #[test]
    fn scores() {
        assert_relative_eq!(score_candidate(1.0, 2.0, 0.1), 0.818730753, epsilon = 1e-9);
        assert_eq!(score_candidate(0.0, 7.0, 0.1), 0.0);
        assert!(score_candidate(0.3, 2.0, 0.1) > score_candidate(0.3, 4.0, 0.1));
    }

    #[test]
    fn exploration_costs() {
        assert_eq!(exploration_cost(12.0, 10.0), 2.0);
        assert_eq!(exploration_cost(9.0, 10.0), 0.0);
        assert_eq!(exploration_cost(10.0, 10.0), 0.0);
    }

    #[test]
    fn feasibility() {
        let ledger = BudgetLedger::new(1.0).unwrap();
        let all_invalid = vec![rec(1, 2.0, 1.0, false, 0.0), rec(2, 4.0, 1.0, false, 0.0)];
        assert!(feasible_set(&all_invalid, &ledger).is_empty());

        let mut full = BudgetLedger::new(1.0).unwrap();
        full.charge(0.0, 1.0).unwrap();
        assert_eq!(feasible_set(&[rec(1, 2.0, 1.0, true, 0.0)], &full), vec![0]);

        let mut ninety = BudgetLedger::new(1.0).unwrap();
        ninety.charge(0.0, 0.9).unwrap();
        let recs = vec![rec(1, 2.0, 1.0, true, 0.05), rec(2, 4.0, 1.0, true, 0.2)];
        assert_eq!(feasible_set(&recs, &ninety), vec![0]);
    }

    #[test]
    fn commit_branches() {
        let mut ledger = BudgetLedger::new(1.0).unwrap();
        let mut none = vec![rec(1, 2.0, 1.0, false, 0.0), rec(2, 4.0, 3.0, false, 0.0)];
        let d = commit(&mut none, &mut ledger, 0.0).unwrap();
        assert_eq!(d.choice, Choice::Conservative);
        assert_eq!((d.horizon, d.charge), (2.0, 0.0));
        assert_eq!(ledger.spent(), 0.0);

        let mut one = vec![rec(1, 2.0, 1.0, false, 0.0), rec(2, 4.0, 1.0, true, 0.3)];
        let d = commit(&mut one, &mut ledger, 2.0).unwrap();
        assert_eq!(d.choice, Choice::Informative(1));
        assert_eq!(d.horizon, 4.0);
        assert_relative_eq!(ledger.spent(), 0.3, epsilon = 1e-12);

        // Equal scores at i = 2, 3: the smaller index wins.
        let mut tie = vec![rec(1, 2.0, 0.0, true, 0.0), rec(2, 4.0, 0.0, true, 0.0), rec(3, 6.0, 0.0, true, 0.0)];
        tie[1].score = 0.5;
        tie[2].score = 0.5;
        let d = commit(&mut tie, &mut ledger, 6.0).unwrap();
        assert_eq!(d.choice, Choice::Informative(1));
        assert_eq!(ledger.entries().len(), 3);
    }

    #[test]
    fn zero_budget_never_explores() {
        let mut ledger = BudgetLedger::new(0.0).unwrap();
        let mut recs = vec![rec(1, 2.0, 1.0, true, 0.0), rec(2, 4.0, 2.0, true, 0.5)];
        let d = commit(&mut recs, &mut ledger, 0.0).unwrap();
        assert_eq!(d.choice, Choice::Conservative);
        assert_eq!(ledger.spent(), 0.0);
        let d = commit_lazy(&mut recs, &mut ledger, 0.0, |_| panic!("nothing to evaluate")).unwrap();
        assert_eq!(d.choice, Choice::Conservative);
    }

    #[test]
    fn overcharge_is_a_contract_violation() {
        let mut ledger = BudgetLedger::new(1.0).unwrap();
        assert!(ledger.charge(0.0, 1.5).is_err());
        assert!(ledger.charge(0.0, -0.1).is_err());
        assert!(BudgetLedger::new(-1.0).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("greedy").is_err());
    }

    fn arb_records() -> impl Strategy<Value = Vec<(f64, bool, f64)>> {
        prop::collection::vec((0.0..1.0f64, any::<bool>(), 0.0..0.6f64), 1..6)
    }

    fn build(spec: &[(f64, bool, f64)], scale: f64) -> Vec<CandidateRecord> {
        spec.iter()
            .enumerate()
            .map(|(j, &(xi, valid, cost))| rec(j + 1, 2.0 * (j + 1) as f64, scale * xi, valid, cost))
            .collect()
    }

    proptest! {
        #[test]
        fn ledger_never_overspends(epochs in prop::collection::vec(arb_records(), 1..12), budget in 0.0..2.0f64) {
            let mut ledger = BudgetLedger::new(budget).unwrap();
            for (k, spec) in epochs.iter().enumerate() {
                let mut recs = build(spec, 1.0);
                let before = ledger.spent();
                let d = commit(&mut recs, &mut ledger, k as f64).unwrap();
                prop_assert!(ledger.spent() <= ledger.budget());
                if d.choice == Choice::Conservative {
                    prop_assert_eq!(ledger.spent(), before);
                }
                let total: f64 = ledger.entries().iter().map(|e| e.1).sum();
                prop_assert!((total - ledger.spent()).abs() < 1e-12);
            }
        }

        #[test]
        fn positive_rescaling_keeps_the_choice(spec in arb_records(), scale in 0.01..100.0f64, budget in 0.0..1.0f64) {
            let mut a = build(&spec, 1.0);
            let mut b = build(&spec, scale);
            let da = commit(&mut a, &mut BudgetLedger::new(budget).unwrap(), 0.0).unwrap();
            let db = commit(&mut b, &mut BudgetLedger::new(budget).unwrap(), 0.0).unwrap();
            prop_assert_eq!(da.choice, db.choice);
        }

        #[test]
        fn lazy_commit_matches_full_commit(spec in arb_records(), budget in 0.0..1.0f64) {
            let mut full = build(&spec, 1.0);
            let d_full = commit(&mut full, &mut BudgetLedger::new(budget).unwrap(), 0.0).unwrap();
            let mut lazy: Vec<CandidateRecord> = full
                .iter()
                .map(|r| CandidateRecord::new(r.index, r.horizon, r.delta_xi, 0.1))
                .collect();
            let truth = full.clone();
            let d_lazy = commit_lazy(&mut lazy, &mut BudgetLedger::new(budget).unwrap(), 0.0, |r| {
                let t = &truth[r.index - 1];
                r.evaluate(t.valid.unwrap(), t.p_safe, t.cost_info, t.cost_cons);
                Ok(())
            })
            .unwrap();
            prop_assert_eq!(d_full, d_lazy);
        }
    }
}
