//! SQL optimum against a derivative-free minimizer of the same objective.

mod common;

#[test]
fn sql_matches_restarted_nelder_mead() {
    for seed in 0..10 {
        let (newton, nm) = common::compare(seed);
        assert!((newton - nm).abs() < 1e-4, "seed {seed}: newton {newton} vs nelder-mead {nm}");
        assert!(newton <= nm + 1e-9, "seed {seed}: nelder-mead beat newton");
    }
}
