//! Aggregation strategies: temperature, weighting and server-state properties.

use std::sync::Arc;

use fedpsa::data::{make_calibration_batch, CalibrationSource};
use fedpsa::model::{init_params, ModelSpec};
use fedpsa::seeds;
use fedpsa::sensitivity::{ProjectionMatrix, SensitivitySketch, Signal, Sketcher, UnlabeledLoss};
use fedpsa::strategy::{
    current_temperature, fedasync_weight, softmax_weights, PsaParams, PsaVariant, ServerState, Strategy,
    ThermometerQueue, UpdateEnvelope,
};
use fedpsa::ParamVector;
use proptest::prelude::*;
use rand::Rng;

fn sketcher(spec: ModelSpec, k: usize) -> Arc<Sketcher> {
    Arc::new(Sketcher {
        spec,
        calibration: make_calibration_batch(CalibrationSource::Gaussian, spec.in_dim(), 32, 4, None).unwrap(),
        projection: ProjectionMatrix::gaussian(9, k, spec.param_count()).unwrap(),
        unlabeled: UnlabeledLoss::SelfLabel,
        signal: Signal::Sensitivity,
    })
}

fn psa(variant: PsaVariant, thermometer: bool, queue: usize) -> Strategy {
    Strategy::FedPsa(PsaParams {
        buffer: 5,
        queue,
        gamma: 5.0,
        delta: 0.5,
        variant,
        thermometer,
    })
}

/// Envelope whose delta is random and whose sketch is taken at `global + delta`.
fn envelope(server: &ServerState, client: usize, origin: u64, rng: &mut impl Rng, scale: f64) -> UpdateEnvelope {
    let d = server.global().dim();
    let delta = ParamVector::new((0..d).map(|_| rng.random_range(-scale..scale)).collect());
    let sketch = server.sketcher().map(|s| {
        let mut trained = server.global().clone();
        trained.add_scaled(1.0, &delta).unwrap();
        s.sketch_params(&trained).unwrap()
    });
    UpdateEnvelope::new(client, delta, sketch, origin, 0, 10)
}

#[test]
fn temperature_at_reference_magnitude_is_gamma_plus_delta() {
    let mut q = ThermometerQueue::new(4, 5.0, 0.5).unwrap();
    for m in [0.3, 0.7, 1.1, 2.9] {
        assert_eq!(current_temperature(&q), None);
        q.push(m);
    }
    assert_eq!(current_temperature(&q), Some(5.5));
}

#[test]
fn zero_reference_magnitude_is_clamped() {
    let mut q = ThermometerQueue::new(2, 5.0, 0.5).unwrap();
    q.push(0.0);
    q.push(0.0);
    assert!(q.m0_clamped());
    assert_eq!(current_temperature(&q), Some(0.5));
    q.push(1.0);
    assert!(current_temperature(&q).unwrap().is_finite());
}

#[test]
fn thermometer_rejects_bad_hyperparameters() {
    assert!(ThermometerQueue::new(0, 5.0, 0.5).is_err());
    assert!(ThermometerQueue::new(3, 5.0, 0.0).is_err());
    assert!(ThermometerQueue::new(3, -1.0, 0.5).is_err());
}

#[test]
fn fedasync_weight_decays_with_staleness() {
    assert_eq!(fedasync_weight(0.6, 0), 0.6);
    assert!((fedasync_weight(0.6, 3) - 0.3).abs() < 1e-15);
}

#[test]
fn fedbuff_applies_mean_delta_and_clears() {
    let spec = ModelSpec::linear(3, 2);
    let init = init_params(&spec, 1);
    let mut server = ServerState::new(init.clone(), Strategy::FedBuff { buffer: 5 }, None).unwrap();
    let mut rng = seeds::rng(3);
    let mut expected = init.clone();
    let mut sum = ParamVector::zeros(init.dim());
    for i in 0..5 {
        let env = envelope(&server, i, 0, &mut rng, 0.1);
        sum.add_scaled(1.0, &env.delta).unwrap();
        let receipt = server.receive_update(env, 10).unwrap();
        assert_eq!(receipt.events.is_empty(), i < 4);
    }
    expected.add_scaled(0.2, &sum).unwrap();
    for (a, b) in server.global().iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-14);
    }
    assert_eq!(server.version(), 1);
    assert!(server.buffer().is_empty());
}

#[test]
fn stale_and_future_updates() {
    let spec = ModelSpec::linear(3, 2);
    let mut server = ServerState::new(init_params(&spec, 1), Strategy::FedAsync { a0: 0.6 }, None).unwrap();
    let mut rng = seeds::rng(4);
    let env = envelope(&server, 0, 0, &mut rng, 0.1);
    assert_eq!(server.receive_update(env, 1).unwrap().tau, 0);
    let env = envelope(&server, 1, 0, &mut rng, 0.1);
    let r = server.receive_update(env, 2).unwrap();
    assert_eq!(r.tau, 1);
    assert!((r.events[0].weights[0] - 0.6 / 2f64.sqrt()).abs() < 1e-15);
    let future = envelope(&server, 2, 9, &mut rng, 0.1);
    assert!(server.receive_update(future, 3).is_err());
}

#[test]
fn fedpsa_requires_sketches() {
    let spec = ModelSpec::linear(3, 2);
    assert!(ServerState::new(init_params(&spec, 1), psa(PsaVariant::Full, true, 3), None).is_err());
    let mut server =
        ServerState::new(init_params(&spec, 1), psa(PsaVariant::Full, true, 3), Some(sketcher(spec, 4))).unwrap();
    let mut env = envelope(&server, 0, 0, &mut seeds::rng(1), 0.1);
    env.sketch = None;
    assert!(server.receive_update(env.clone(), 0).is_err());
    env.sketch = Some(SensitivitySketch(vec![1.0; 3]));
    assert!(server.receive_update(env, 0).is_err());
}

#[test]
fn fedpsa_phases() {
    // queue 7 fills on the 7th upload: first aggregation (uploads 1..5) is
    // uniform, the second (6..10) is tempered.
    let spec = ModelSpec::mlp(3, 4, 2);
    let mut server =
        ServerState::new(init_params(&spec, 2), psa(PsaVariant::Full, true, 7), Some(sketcher(spec, 6))).unwrap();
    let mut rng = seeds::rng(8);
    let mut events = Vec::new();
    for i in 0..10 {
        let env = envelope(&server, i, server.version(), &mut rng, 0.05 / (i + 1) as f64);
        let receipt = server.receive_update(env, i as u64).unwrap();
        assert!(receipt.kappa.unwrap().abs() <= 1.0);
        events.extend(receipt.events);
        assert!(server.buffer().len() < 5);
    }
    assert_eq!(events.len(), 2);
    assert_eq!(events[0].temperature, None);
    assert!(events[0].weights.iter().all(|w| *w == 0.2));
    let t = events[1].temperature.unwrap();
    assert!(t > 0.5);
    let want = softmax_weights(&events[1].kappas, t).unwrap();
    for (a, b) in events[1].weights.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn no_temperature_variant_freezes_temperature() {
    let spec = ModelSpec::linear(3, 2);
    let mut server = ServerState::new(
        init_params(&spec, 2),
        psa(PsaVariant::NoTemperature, true, 2),
        Some(sketcher(spec, 4)),
    )
    .unwrap();
    let mut rng = seeds::rng(2);
    assert_eq!(server.psa_temperature(), None);
    for i in 0..3 {
        let env = envelope(&server, i, 0, &mut rng, 0.5 / (i + 1) as f64);
        server.receive_update(env, 0).unwrap();
    }
    assert_eq!(server.psa_temperature(), Some(5.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn temperature_strictly_decreases_with_magnitude(
        start in 0.1f64..10.0,
        ratios in prop::collection::vec(0.5f64..0.99, 1..30),
        cap in 1usize..8,
    ) {
        let mut q = ThermometerQueue::new(cap, 5.0, 0.5).unwrap();
        let mut m = start;
        for _ in 0..cap {
            q.push(m);
            m *= 0.99;
        }
        let mut last = current_temperature(&q).unwrap();
        for r in ratios {
            m *= r;
            q.push(m);
            let t = current_temperature(&q).unwrap();
            prop_assert!(t < last);
            prop_assert!(t > 0.5);
            last = t;
        }
    }

    #[test]
    fn softmax_is_a_distribution(
        kappas in prop::collection::vec(-1.0f64..=1.0, 1..12),
        temp in 1e-4f64..100.0,
    ) {
        let w = softmax_weights(&kappas, temp).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));
        for i in 0..kappas.len() {
            for j in 0..kappas.len() {
                if kappas[i] > kappas[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(kappas in prop::collection::vec(-1.0f64..=1.0, 2..8), shift in -0.5f64..0.5) {
        let a = softmax_weights(&kappas, 0.7).unwrap();
        let shifted: Vec<f64> = kappas.iter().map(|k| k + shift).collect();
        let b = softmax_weights(&shifted, 0.7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn envelope_round_trips(
        delta in prop::collection::vec(-1e3f64..1e3, 0..40),
        sketch in prop::option::of(prop::collection::vec(-1.0f64..1.0, 1..10)),
        client in any::<u32>(),
        origin in any::<u32>(),
        time in any::<u64>(),
    ) {
        let env = UpdateEnvelope::new(
            client as usize,
            ParamVector::new(delta),
            sketch.map(SensitivitySketch),
            origin as u64,
            time,
            7,
        );
        let bytes = env.encode();
        prop_assert_eq!(UpdateEnvelope::decode(&bytes).unwrap(), env);
        prop_assert!(UpdateEnvelope::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        prop_assert!(UpdateEnvelope::decode(&extended).is_err());
    }

    /// FedPSA with the thermometer switched off follows FedBuff bit for bit.
    #[test]
    fn disabled_thermometer_matches_fedbuff(seed in any::<u64>(), uploads in 1usize..23) {
        let spec = ModelSpec::linear(4, 3);
        let init = init_params(&spec, seed);
        let mut buff = ServerState::new(init.clone(), Strategy::FedBuff { buffer: 5 }, None).unwrap();
        let mut psa_server =
            ServerState::new(init, psa(PsaVariant::Full, false, 3), Some(sketcher(spec, 5))).unwrap();
        let mut rng = seeds::rng(seed);
        for i in 0..uploads {
            let env = envelope(&psa_server, i, psa_server.version(), &mut rng, 0.1);
            let mut plain = env.clone();
            plain.sketch = None;
            let a = buff.receive_update(plain, i as u64).unwrap();
            let b = psa_server.receive_update(env, i as u64).unwrap();
            prop_assert_eq!(a.events.len(), b.events.len());
            prop_assert_eq!(buff.global().as_slice(), psa_server.global().as_slice());
        }
    }
}
