use kpplab::barrier_check::{BarrierDraft, BarrierKind, SamplingPlan};
use kpplab::kpp_core::{KppNonlinearity, SpeedPair};
use kpplab::rd_solver::FrontInitialData;

/// Certified upper and lower barriers enclose the leading-edge solution where both are defined.
#[test]
fn barriers_enclose_the_solution() {
    let f = KppNonlinearity::fisher();
    let data = FrontInitialData::h1(0.0, 1.0, &SpeedPair::critical(1.0)).with_junction(1.0);
    let upper = BarrierDraft::new(BarrierKind::H1Upper, &f, &data).unwrap();
    let lower = BarrierDraft::new(BarrierKind::H1Lower, &f, &data).unwrap();
    let plan = SamplingPlan::coarse();
    let reference = upper.reference(2.0, &plan).unwrap();
    let up = upper.spec(2.0, 0.25, None).unwrap();
    let lo = lower.spec(2f64.powi(22), 1.0, None).unwrap();
    let mut checked = 0;
    for snap in &reference.snapshots {
        let t = snap.t;
        let floor = up.floor(t).max(lo.floor(t));
        for i in 0..snap.len() {
            let y = snap.y(i);
            if y < floor {
                continue;
            }
            let v = snap.q[i];
            let above = up.value_comoving(t, y).unwrap();
            let below = lo.value_comoving(t, y).unwrap();
            let slack = 1e-6 * v.abs() + 1e-12;
            assert!(
                below <= v + slack,
                "lower barrier {below} above v = {v} at (t, y) = ({t}, {y})"
            );
            assert!(
                v <= above + slack,
                "v = {v} above upper barrier {above} at (t, y) = ({t}, {y})"
            );
            checked += 1;
        }
    }
    assert!(checked > 1000, "only {checked} points in the overlap");
}
