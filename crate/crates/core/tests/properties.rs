use detrend::cell::{run_sequence, CellKind, NormMethod, Placement};
use detrend::checks::{case_params, CellCase};
use detrend::config::ExperimentConfig;
use detrend::diagnostics::{shift_metric, Histogram, NormTrace, BINS};
use detrend::norm::{ema, ln_forward, AffineParams, NormMode};
use detrend::params::{BnStore, ParamStore};
use detrend::train::{clip_gradient, global_norm, length_weight};
use detrend::{Precision, Prng, Tensor};
use proptest::prelude::*;

fn method() -> impl Strategy<Value = NormMethod> {
    prop::sample::select(NormMethod::ALL.to_vec())
}

fn placement() -> impl Strategy<Value = Placement> {
    prop::sample::select(Placement::ALL.to_vec())
}

fn histogram() -> impl Strategy<Value = Histogram> {
    prop::collection::vec(-1.5f64..1.5, 1..200).prop_map(|vs| {
        let mut h = Histogram::new();
        h.extend(vs);
        h
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gates_and_state_stay_in_range(
        m in method(),
        p in placement(),
        conv in any::<bool>(),
        seed in 0u64..1000,
        scale in 0.1f64..5.0,
    ) {
        let case = CellCase {
            kind: if conv { CellKind::ConvGru } else { CellKind::Gru },
            method: m,
            placement: p,
            steps: 6,
        };
        let cell = case.cell().unwrap();
        let params = case_params(&case, seed).unwrap();
        let mut prng = Prng::new(seed + 1);
        let shape: &[usize] = if conv { &[3, 1, 3, 3] } else { &[3, 2] };
        let n: usize = shape.iter().product();
        let xs: Vec<Tensor> = (0..6)
            .map(|_| Tensor::new(shape.to_vec(), (0..n).map(|_| scale * prng.normal()).collect()).unwrap())
            .collect();
        let (_, _, steps) = run_sequence(&cell, &params, &xs, NormMode::Train, &mut BnStore::new()).unwrap();
        for s in steps {
            for g in [s.z.as_ref().unwrap(), s.r.as_ref().unwrap()] {
                prop_assert!(g.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert!(s.h_tilde.as_ref().unwrap().data().iter().all(|v| v.abs() <= 1.0));
            // A convex mix of candidates starting from zero never leaves [-1, 1].
            prop_assert!(s.h.data().iter().all(|v| v.abs() <= 1.0));
            if let Some(y) = &s.y {
                prop_assert!(y.data().iter().all(|v| v.abs() <= 2.0));
            }
        }
    }

    #[test]
    fn tv_is_a_bounded_metric(a in histogram(), b in histogram(), c in histogram()) {
        let ab = shift_metric(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - shift_metric(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(shift_metric(&a, &a).unwrap() == 0.0);
        let via = shift_metric(&a, &c).unwrap() + shift_metric(&c, &b).unwrap();
        prop_assert!(ab <= via + 1e-12);
    }

    #[test]
    fn histogram_conserves_mass(vs in prop::collection::vec(prop::num::f64::ANY, 1..300)) {
        let mut h = Histogram::new();
        h.extend(vs.iter().copied());
        prop_assert_eq!(h.total(), vs.len() as u64);
        prop_assert_eq!(h.counts.len(), BINS);
        let p = h.normalized().unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm(
        values in prop::collection::vec(-100.0f64..100.0, 2..40),
        threshold in 0.1f64..20.0,
    ) {
        let half = values.len() / 2;
        let mut g = ParamStore::new();
        g.insert("a.W", Tensor::new(vec![half], values[..half].to_vec()).unwrap());
        g.insert("a.b", Tensor::new(vec![values.len() - half], values[half..].to_vec()).unwrap());
        let before = g.clone();
        let norm = clip_gradient(&mut g, threshold).unwrap();
        prop_assert!((norm - global_norm(&before)).abs() <= 1e-12 * norm.max(1.0));
        prop_assert!(global_norm(&g) <= threshold * (1.0 + 1e-12) || norm <= threshold);
        if norm <= threshold {
            prop_assert_eq!(g, before);
        } else {
            // Direction is kept.
            let k = threshold / norm;
            for ((_, a), (_, b)) in g.iter().zip(before.iter()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - k * y).abs() <= 1e-12 * y.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn layer_norm_ignores_affine_input_changes(
        values in prop::collection::vec(-3.0f64..3.0, 8),
        shift in -10.0f64..10.0,
        gain in 0.5f64..4.0,
    ) {
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 0.5);
        let x = Tensor::new(vec![2, 4], values.clone()).unwrap();
        let moved = Tensor::new(vec![2, 4], values.iter().map(|v| gain * v + shift).collect()).unwrap();
        let affine = AffineParams::new(4, Some(0.0), Precision::F64);
        let (a, b) = (ln_forward(&x, &affine).unwrap(), ln_forward(&moved, &affine).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            // Only the epsilon inside the root depends on the gain.
            prop_assert!((p - q).abs() < 1e-3);
        }
    }

    #[test]
    fn ema_fixed_points(c in -5.0f64..5.0, alpha in 0.0f64..=1.0, n in 1usize..50) {
        let flat = ema(&vec![c; n], alpha, c).unwrap();
        prop_assert!(flat.iter().all(|v| (v - c).abs() < 1e-12));
        let xs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        prop_assert_eq!(ema(&xs, 1.0, 0.0).unwrap(), xs.clone());
        prop_assert!(ema(&xs, 0.0, 3.0).unwrap().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn smoothed_trace_stays_within_raw_range(raw in prop::collection::vec(0.0f64..1e3, 1..300)) {
        let tr = NormTrace::from_raw(&raw);
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(tr.smoothed[0], raw[0]);
        prop_assert!(tr.smoothed.iter().all(|&s| s >= lo - 1e-9 && s <= hi + 1e-9));
    }

    #[test]
    fn length_weights_favor_short_sequences(t in 1usize..100, extra in 0usize..100) {
        let t_max = t + extra;
        prop_assert!((length_weight(t_max, t_max) - 1.0).abs() < 1e-15);
        prop_assert!(length_weight(t, t_max) >= 1.0);
        prop_assert!((length_weight(t, t_max) * t as f64 - t_max as f64).abs() < 1e-9);
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u32>(),
        lr in 1e-4f64..1.0,
        bias in -5.0f64..0.0,
        epochs in 1usize..200,
        ms in prop::collection::vec(method(), 1..4),
        p in placement(),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.train.learning_rate = lr;
        cfg.update_bias = bias;
        cfg.train.epochs = epochs;
        cfg.methods = ms;
        cfg.placement = p;
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
