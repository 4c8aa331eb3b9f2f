use std::f64::consts::LN_2;

use cascade_core::fragmentation::{tagged_fragment, Fragmentation, SimConfig};
use cascade_core::levy;
use cascade_core::rng::par_replicas;
use cascade_core::stats::two_sample_ks_weighted;
use cascade_core::DislocationSpec;

// Under the W-size-biased measure the tagged line is the tilted subordinator.
#[test]
fn tagged_path_matches_tilted_subordinator() {
    let spec = DislocationSpec::binary();
    let c = spec.critical_p(1e-12).unwrap();
    let model = Fragmentation::new(spec.clone(), c);
    let times = [1.0, 2.0, 4.0];
    let mut sim = SimConfig::new(vec![4.0]);
    sim.path_times = vec![1.0, 2.0];
    let tagged = par_replicas(7, 20_000, |rng, _| {
        let (r, state) = model.simulate_state(&sim, rng).unwrap();
        (tagged_fragment(&state, rng).unwrap().path, r[0].w)
    });
    let walk = levy::tilt(&spec, c.p_bar).unwrap().sample_marginals(&times, 20_000, 8);
    for (k, t) in times.into_iter().enumerate() {
        let index = |z: f64| ((z + c.speed * t) / LN_2).round();
        assert!(tagged.iter().all(|(p, _)| (index(p[k]) * LN_2 - c.speed * t - p[k]).abs() < 1e-9));
        let a: Vec<(f64, f64)> = tagged.iter().map(|(p, w)| (index(p[k]), *w)).collect();
        let b: Vec<(f64, f64)> = walk.iter().map(|p| (index(p[k]), 1.0)).collect();
        let ks = two_sample_ks_weighted(&a, &b).unwrap();
        assert!(ks.p_value > 0.01, "t = {t}: {ks:?}");
    }
}

#[test]
fn unweighted_tagging_is_not_the_tilted_law() {
    // Without the size bias the tagged line jumps more often than the tilt predicts.
    let spec = DislocationSpec::binary();
    let c = spec.critical_p(1e-12).unwrap();
    let model = Fragmentation::new(spec.clone(), c);
    let sim = SimConfig::new(vec![5.0]);
    let jumps = par_replicas(9, 4000, |rng, _| {
        let (_, state) = model.simulate_state(&sim, rng).unwrap();
        (tagged_fragment(&state, rng).unwrap().path[0] + 5.0 * c.speed) / LN_2
    });
    let mean = jumps.iter().sum::<f64>() / jumps.len() as f64;
    assert!(mean > 5.0 * 2f64.powf(-c.p_bar) + 0.5, "{mean}");
}
