mod support;

use hsfl_core::bcd::{plan_objective, run_bcd, BcdOptions};
use hsfl_core::convergence::ConvergenceParams;
use hsfl_core::ma::solve_ma_for_cut;
use hsfl_core::ms::solve_ms;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::reference::{joint_brute_force, random_profile, random_three_tier};

#[test]
fn descends_beats_single_blocks_and_tracks_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let params = ConvergenceParams { beta: 1.0, gamma: 5e-4, epsilon: 0.01, vartheta: 2.3, num_clients: 8 };
    let opts = BcdOptions::default();
    let mut within = 0;
    for case in 0..20 {
        let p = random_profile(&mut rng, 8);
        let t = random_three_tier(&mut rng, 8, 2);
        let trace = run_bcd(&params, &p, &t, 16, None, &opts).unwrap();
        let mut last = trace.initial_objective;
        for r in &trace.records {
            assert!(r.objective <= last + 1e-12 * last.abs(), "case {case}: objective rose");
            last = r.objective;
        }
        let ma_only = solve_ma_for_cut(&params, &p, &t, &trace.initial.cut, 16, &opts.ma).unwrap();
        let ms_only = solve_ms(&params, &p, &t, &trace.initial.intervals, 16, opts.ms_method).unwrap();
        assert!(trace.objective <= ma_only.objective * (1.0 + 1e-12));
        assert!(trace.objective <= ms_only.objective * (1.0 + 1e-12));
        assert_eq!(plan_objective(&params, &p, &t, &trace.plan, 16).unwrap(), trace.objective);

        let (_, _, brute) = joint_brute_force(&params, &p, &t, 16, 32).unwrap();
        if (trace.objective - brute) / brute <= 0.05 {
            within += 1;
        }
    }
    assert!(within >= 15, "only {within}/20 within 5% of brute force");
}
