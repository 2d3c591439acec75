//! End-to-end checks through the public API only.

use std::sync::Arc;

use dgk::engine::{commit, exploration_cost, BudgetLedger, CandidateRecord, Choice};
use dgk::models::{regression_tuples, Bounds, DragQuad, ModelSpec, Simulator, TrajTag, VectorDragQuad};
use dgk::seeding::rng;
use dgk::smid::{calibrate_eps, smid_update, ParameterBox};
use nalgebra::DVector;
use rand::Rng;

fn spec(dynamics: Arc<dyn dgk::models::ControlAffine>, theta: &[f64], wbar: f64) -> ModelSpec {
    ModelSpec::new(
        dynamics,
        DVector::from_column_slice(theta),
        wbar,
        Bounds::unbounded(6),
        Bounds::new(vec![-20.0; 3], vec![20.0; 3]).unwrap(),
        0.02,
    )
    .unwrap()
}

fn weave(t: f64, _x: &[f64], u: &mut [f64]) {
    u[0] = 6.0 * (1.3 * t).sin();
    u[1] = 4.0 * (0.7 * t).cos();
    u[2] = 9.81 + 2.0 * (2.1 * t).sin();
}

#[test]
fn identification_pipeline_keeps_truth_and_nests() {
    for (model, prior) in [
        (spec(Arc::new(DragQuad::default()), &[0.2], 0.05), ParameterBox::from_slices(&[0.0], &[0.5]).unwrap()),
        (
            spec(Arc::new(VectorDragQuad::default()), &[0.1, 0.3], 0.05),
            ParameterBox::from_slices(&[0.0, 0.0], &[0.5, 0.8]).unwrap(),
        ),
    ] {
        let truth = model.true_theta.clone();
        let probe = Simulator::new(&model, truth.as_slice())
            .record(&weave, &[0.0; 6], 0.0, 100, &mut rng(99), TrajTag::Executed)
            .unwrap();
        let eps = calibrate_eps(&model, &[probe], 0.2, &prior, 2.0).unwrap().eps;
        let mut bx = prior.clone();
        for seed in 0..5 {
            let traj = Simulator::new(&model, truth.as_slice())
                .record(&weave, &[0.0; 6], 2.0 * seed as f64, 100, &mut rng(seed), TrajTag::Executed)
                .unwrap();
            let tuples = regression_tuples(&model, &traj, 0.2).unwrap();
            let next = smid_update(&bx, &tuples, eps).unwrap();
            assert!(next.consistent);
            assert!(next.bounds.contains(&truth), "seed {seed}: {:?}", next.bounds);
            assert!(next.bounds.is_subset_of(&bx, 1e-12));
            bx = next.bounds;
        }
        let w0 = prior.axis_widths();
        let w = bx.axis_widths();
        assert!(w.iter().zip(w0.iter()).all(|(a, b)| a < b), "{w:?}");
    }
}

#[test]
fn ledger_is_never_overdrawn_by_the_commit_rule() {
    let mut r = rng(7);
    let mut ledger = BudgetLedger::new(3.0).unwrap();
    for k in 0..200 {
        let mut records: Vec<CandidateRecord> = (1..=4)
            .map(|i| {
                let mut c = CandidateRecord::new(i, i as f64, r.gen_range(0.0..1.0), 0.1);
                let cons = r.gen_range(1.0..2.0);
                let info = cons + r.gen_range(-0.3..0.6);
                c.evaluate(r.gen_bool(0.7), 1.0, info, cons);
                c
            })
            .collect();
        let before = ledger.spent();
        let d = commit(&mut records, &mut ledger, k as f64).unwrap();
        assert!(ledger.spent() <= ledger.budget());
        match d.choice {
            Choice::Informative(j) => {
                let rec = &records[j];
                assert_eq!(d.charge, exploration_cost(rec.cost_info, rec.cost_cons));
                assert_eq!(ledger.spent(), before + d.charge);
            }
            Choice::Conservative => assert_eq!(ledger.spent(), before),
        }
    }
}

#[test]
fn zero_budget_commits_conservatively() {
    let mut ledger = BudgetLedger::new(0.0).unwrap();
    let mut records = vec![CandidateRecord::new(1, 1.0, 1.0, 0.1)];
    records[0].evaluate(true, 1.0, 0.5, 1.0);
    let d = commit(&mut records, &mut ledger, 0.0).unwrap();
    assert_eq!(d.choice, Choice::Conservative);
    assert_eq!(ledger.spent(), 0.0);
}
