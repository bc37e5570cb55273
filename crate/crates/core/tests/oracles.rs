use detrend::cell::{run_sequence, Cell, CellConfig, CellKind, NormMethod, Placement};
use detrend::checks::{case_params, placements_for, CellCase};
use detrend::grad::{BnSource, Tape};
use detrend::network::{Model, NetworkConfig};
use detrend::norm::{bn_forward, ema, AffineParams, BnRunningStats, NormMode};
use detrend::params::{BnStore, ParamStore};
use detrend::{Precision, Prng, Tensor};

fn randn(shape: &[usize], prng: &mut Prng, precision: Precision) -> Tensor {
    let n = shape.iter().product();
    Tensor::with_precision(shape.to_vec(), (0..n).map(|_| prng.normal()).collect(), precision).unwrap()
}

/// A cell whose update gate is the constant `alpha` at every unit and step.
fn pinned_gate(kind: CellKind, alpha: f64, seed: u64) -> (Cell, ParamStore) {
    let config = match kind {
        CellKind::ConvGru => CellConfig::conv_gru(2, 3),
        _ => CellConfig::gru(2, 3),
    };
    let cell = Cell::new("layer1", config).unwrap();
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut Prng::new(seed), 0.7, Precision::F64).unwrap();
    for name in ["W_z", "U_z"] {
        let t = store.get_mut(&format!("layer1.{name}")).unwrap();
        *t = Tensor::zeros(t.shape().to_vec(), Precision::F64);
    }
    let logit = (alpha / (1.0 - alpha)).ln();
    let bz = store.get_mut("layer1.b_z").unwrap();
    *bz = Tensor::full(bz.shape().to_vec(), logit, Precision::F64);
    (cell, store)
}

#[test]
fn pinned_update_gate_is_an_ema_of_the_candidate() {
    for kind in [CellKind::Gru, CellKind::ConvGru] {
        for (i, alpha) in [0.1, 0.5, 0.9].into_iter().enumerate() {
            let (cell, params) = pinned_gate(kind, alpha, 40 + i as u64);
            let mut prng = Prng::new(7);
            let shape: &[usize] = if kind == CellKind::ConvGru { &[2, 2, 3, 3] } else { &[2, 2] };
            let xs: Vec<Tensor> = (0..100).map(|_| randn(shape, &mut prng, Precision::F64)).collect();
            let (_, _, steps) = run_sequence(&cell, &params, &xs, NormMode::Train, &mut BnStore::new()).unwrap();
            assert_eq!(steps.len(), 100);
            let units = steps[0].h.len();
            for u in 0..units {
                let cand: Vec<f64> = steps.iter().map(|s| s.h_tilde.as_ref().unwrap().data()[u]).collect();
                let want = ema(&cand, alpha, 0.0).unwrap();
                for (s, w) in steps.iter().zip(&want) {
                    let got = s.h.data()[u];
                    assert!((got - w).abs() <= 1e-12, "{kind:?} alpha {alpha} unit {u}: {got} vs {w}");
                }
            }
        }
    }
}

fn detrending_cases(steps: usize) -> Vec<CellCase> {
    let mut out = Vec::new();
    for kind in [CellKind::Gru, CellKind::ConvGru] {
        for method in [NormMethod::AD, NormMethod::BN_AD, NormMethod::LN_AD] {
            for &placement in placements_for(method) {
                out.push(CellCase {
                    kind,
                    method,
                    placement,
                    steps,
                });
            }
        }
    }
    out
}

fn case_inputs(case: &CellCase, prng: &mut Prng, precision: Precision) -> Vec<Tensor> {
    let shape: &[usize] = if case.kind == CellKind::ConvGru { &[4, 1, 3, 3] } else { &[4, 2] };
    (0..case.steps).map(|_| randn(shape, prng, precision)).collect()
}

#[test]
fn detrended_output_is_candidate_minus_state() {
    let mut checked = 0;
    for precision in [Precision::F64, Precision::F32] {
        for (i, case) in detrending_cases(40).iter().enumerate() {
            let cell = case.cell().unwrap();
            let params = case_params(case, 100 + i as u64).unwrap().to_precision(precision);
            let xs = case_inputs(case, &mut Prng::new(200 + i as u64), precision);
            let (_, outputs, steps) = run_sequence(&cell, &params, &xs, NormMode::Train, &mut BnStore::new()).unwrap();
            for (s, out) in steps.iter().zip(&outputs) {
                let y = s.y.as_ref().unwrap();
                let want = s.h_tilde.as_ref().unwrap().sub(&s.h).unwrap();
                let same = y.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "{} {}", case.label(), precision.name());
                assert_eq!(out, y);
                checked += 1;
            }
        }
    }
    assert!(checked >= 1000, "{checked}");
}

#[test]
fn detrended_output_equals_gated_innovation_in_f32() {
    for (i, case) in detrending_cases(30).iter().enumerate() {
        let cell = case.cell().unwrap();
        let params = case_params(case, 300 + i as u64).unwrap().to_precision(Precision::F32);
        let xs = case_inputs(case, &mut Prng::new(400 + i as u64), Precision::F32);
        let (_, _, steps) = run_sequence(&cell, &params, &xs, NormMode::Train, &mut BnStore::new()).unwrap();
        let mut prev = vec![0.0; steps[0].h.len()];
        for s in &steps {
            let (y, z, ht) = (s.y.as_ref().unwrap(), s.z.as_ref().unwrap(), s.h_tilde.as_ref().unwrap());
            for j in 0..prev.len() {
                let want = (1.0 - z.data()[j]) * (ht.data()[j] - prev[j]);
                assert!((y.data()[j] - want).abs() <= 1e-6, "{}: {} vs {want}", case.label(), y.data()[j]);
            }
            prev = s.h.data().to_vec();
        }
    }
}

fn assert_unit_moments(values: &[Vec<f64>]) {
    for (f, col) in values.iter().enumerate() {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-6, "feature {f}: mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "feature {f}: var {var}");
    }
}

/// Values of each feature over valid samples (and positions, for maps).
fn per_feature(x: &Tensor, valid: &[bool]) -> Vec<Vec<f64>> {
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let plane: usize = x.shape()[2..].iter().product();
    let mut out = vec![Vec::new(); f];
    for s in (0..b).filter(|&s| valid[s]) {
        for (c, col) in out.iter_mut().enumerate() {
            let base = (s * f + c) * plane;
            col.extend_from_slice(&x.data()[base..base + plane]);
        }
    }
    out
}

/// Batch of `[B, ...]` features with spread ~3 and offset ~5; padded slots
/// hold huge values that would wreck the moments if counted.
fn padded_batch(shape: &[usize], valid: &[bool], prng: &mut Prng) -> Tensor {
    let per: usize = shape[1..].iter().product();
    let mut data = Vec::new();
    for &v in valid {
        for _ in 0..per {
            data.push(if v { 5.0 + 3.0 * prng.normal() } else { 1e4 });
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn batch_norm_moments_per_step_with_padding() {
    let mut prng = Prng::new(17);
    for shape in [vec![12usize, 5], vec![6, 3, 4, 4]] {
        let b = shape[0];
        let f = shape[1];
        let affine = AffineParams::new(f, Some(0.0), Precision::F64);
        let mut stats = BnRunningStats::new(f);
        for t in 0..6 {
            // Later steps have fewer live sequences, as in a length-sorted batch.
            let valid: Vec<bool> = (0..b).map(|s| s + t / 2 < b).collect();
            let x = padded_batch(&shape, &valid, &mut prng);

            let out = bn_forward(&x, &affine, &mut stats, t, NormMode::Train, &valid).unwrap();
            assert_unit_moments(&per_feature(&out, &valid));

            let mut tape = Tape::new(Precision::F64);
            let xv = tape.constant(x.clone());
            let g = tape.constant(Tensor::full(vec![f], 1.0, Precision::F64));
            let be = tape.constant(Tensor::zeros(vec![f], Precision::F64));
            let (y, st) = tape.batch_norm(xv, g, Some(be), BnSource::Batch { valid: &valid }).unwrap();
            assert!(st.is_some());
            assert_unit_moments(&per_feature(tape.value(y), &valid));
        }
        assert_eq!(stats.t_max(), Some(5));
    }
}

#[test]
fn reference_network_spatial_chain() {
    let cfg = NetworkConfig::table_one(vec![6, 9, 3]);
    let chain = cfg.validate().unwrap();
    let spatial: Vec<(usize, usize)> = chain.iter().map(|s| (s.1, s.2)).collect();
    assert_eq!(spatial, vec![(36, 36), (12, 12), (12, 12), (6, 6), (6, 6), (1, 1)]);
    let channels: Vec<usize> = chain.iter().map(|s| s.0).collect();
    assert_eq!(channels, vec![32, 32, 64, 64, 128, 128]);
    assert_eq!(cfg.global_avg_window().unwrap(), (6, 6));

    // The shapes must also come out of an actual pass over one frame.
    let mut cfg = cfg;
    cfg.method = NormMethod::AD;
    let model = Model::build(cfg, 1, Precision::F32).unwrap();
    let frame = randn(&[3, 112, 112], &mut Prng::new(2), Precision::F32);
    let video = [frame];
    let mut tape = Tape::new(Precision::F32);
    let bound = model.params.bind(&mut tape);
    let mut bn = BnStore::new();
    let fw = model.forward(&mut tape, &bound, &[&video[..]], NormMode::Train, &mut bn).unwrap();
    let states: Vec<Vec<usize>> = fw.recurrent.iter().map(|(_, s)| tape.value(s.h).shape().to_vec()).collect();
    assert_eq!(states, vec![vec![1, 64, 12, 12], vec![1, 128, 6, 6]]);
    let heads: Vec<Vec<usize>> = fw.logits.iter().map(|&l| tape.value(l).shape().to_vec()).collect();
    assert_eq!(heads, vec![vec![1, 6], vec![1, 9], vec![1, 3]]);
}

#[test]
fn placement_selects_normalized_terms() {
    use detrend::cell::Term;
    let names = |p: Placement| -> Vec<&str> {
        Term::ALL.iter().filter(|t| p.covers(**t)).map(|t| t.name()).collect()
    };
    assert_eq!(names(Placement::Hidden), vec!["Wh", "Uh"]);
    assert_eq!(names(Placement::Gates), vec!["Wz", "Uz", "Wr", "Ur"]);
    assert_eq!(names(Placement::All).len(), 6);
}
