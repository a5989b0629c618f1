use cfsurv::likelihood::sample_loglik;
use cfsurv::simkit::{default_truth, generate, DgpSpec};

#[test]
fn truth_beats_shifted_treatment_effect() {
    let truth = default_truth();
    let shifted = cfsurv::likelihood::EtaParams {
        alpha_t: truth.alpha_t + 0.5,
        ..truth.clone()
    };
    let wins = (0..50u64)
        .filter(|&seed| {
            let sim = generate(&DgpSpec::baseline(2000, 100 + seed)).unwrap();
            let at = sample_loglik(&truth, &sim.data, &sim.latent.v).unwrap();
            let off = sample_loglik(&shifted, &sim.data, &sim.latent.v).unwrap();
            at > off
        })
        .count();
    assert!(wins >= 48, "truth won {wins} of 50");
}
