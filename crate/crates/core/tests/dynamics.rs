use sco_adversary::codebook::generate_codebook;
use sco_adversary::instance_gd::{sample_gd_dataset_in_event, GdInstance, GdParams};
use sco_adversary::instance_sgd::{force_good_event_sgd, SgdInstance, SgdParams};
use sco_adversary::optim::{run_gd, run_sgd, Record};
use sco_adversary::verify::*;

fn gd_setup(
    n: usize,
    t: usize,
    universe: usize,
    seed: u64,
) -> (GdInstance, sco_adversary::instance_gd::GdDataset) {
    let p = GdParams::theorem(n, t, universe, 256).unwrap();
    let cb = generate_codebook(universe, 256, seed, 100_000).unwrap();
    let inst = GdInstance::new(p, cb).unwrap();
    let (ds, _) = sample_gd_dataset_in_event(&inst.params, seed, 1000).unwrap();
    (inst, ds)
}

#[test]
fn gd_follows_closed_form() {
    let (inst, ds) = gd_setup(4, 12, 8, 3);
    let traj = run_gd(
        &inst,
        &ds.samples,
        inst.params.eta,
        inst.params.t,
        false,
        Record::All,
    )
    .unwrap();
    let rep = check_trajectory(&traj, 1..=inst.params.t, 1e-9, |t| {
        expected_gd_iterate(t, &inst, &ds)
    })
    .unwrap();
    assert!(rep.pass, "{rep:?}");
    let corr = check_gd_corrections(&traj, &inst, &ds, 1e-15).unwrap();
    assert!(corr.pass, "{corr:?}");
    let margins = check_margins_gd(&traj, &inst).unwrap();
    assert!(margins.pass, "{margins:?}");
    assert!(check_norm_bound(&traj).pass);
}

#[test]
fn sgd_follows_closed_form() {
    let p = SgdParams::theorem(6, 10, 256).unwrap();
    let cb = generate_codebook(10, 256, 5, 100_000).unwrap();
    let inst = SgdInstance::new(p, cb).unwrap();
    let ds = force_good_event_sgd(&inst.params, 5).unwrap();
    let traj = run_sgd(&inst, &ds.masks, inst.params.eta, false, Record::All).unwrap();
    let rep = check_trajectory(&traj, 1..=inst.params.n, 1e-9, |t| {
        expected_sgd_iterate(t, &inst, &ds.masks)
    })
    .unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!(check_sgd_corrections(&traj, &inst, 1e-15).pass);
    let margins = check_margins_sgd(&traj, &inst, &ds.masks).unwrap();
    assert!(margins.pass, "{margins:?}");
}

#[test]
fn seeded_pipeline_is_reproducible() {
    use sco_adversary::risk::population_risk_mc_gd;
    let (inst, ds) = gd_setup(4, 12, 8, 9);
    let (_, again) = gd_setup(4, 12, 8, 9);
    assert_eq!(ds.to_json().unwrap(), again.to_json().unwrap());
    let traj = run_gd(
        &inst,
        &ds.samples,
        inst.params.eta,
        inst.params.t,
        false,
        Record::All,
    )
    .unwrap();
    let w = traj.iterate(inst.params.t).unwrap();
    let a = population_risk_mc_gd(&inst, w, 3000, 11).unwrap();
    let b = population_risk_mc_gd(&inst, w, 3000, 11).unwrap();
    assert_eq!(a.total.mean.to_bits(), b.total.mean.to_bits());
    assert_eq!(a.total.stderr.to_bits(), b.total.stderr.to_bits());
}
