use std::collections::HashMap;

use detrend::cell::{Cell, CellConfig, CellKind, ModelError, NormMethod, Placement};
use detrend::checks::{cell_gradcheck, full_matrix, CellCase};
use detrend::grad::{gradcheck, gradcheck_with, AdjointFault, GradCheckOptions, Tape};
use detrend::norm::NormMode;
use detrend::params::{BnStore, Bound, ParamStore};
use detrend::{Precision, Prng, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(shape: &[usize], prng: &mut Prng) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| prng.normal()).collect::<Vec<_>>())
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new(Precision::F64);
    let x = tape.param("x", t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, -4.0, 0.0]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s, &Tensor::scalar(1.0, Precision::F64)).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut tape = Tape::new(Precision::F64);
    let x = tape.param("x", t(&[1], &[0.0]));
    let w = tape.param("w", t(&[1], &[3.0]));
    let wx = tape.mul(w, x).unwrap();
    let s = tape.sigmoid(wx).unwrap();
    let g = tape.backward(s, &Tensor::scalar(1.0, Precision::F64)).unwrap();
    // d/dw = σ'(0) · x = 0, d/dx = σ'(0) · w = 0.75
    assert_eq!(g.get(x).unwrap().data(), &[0.75]);
    assert_eq!(g.get(w).unwrap().data(), &[0.0]);
}

#[test]
fn seed_shape_is_checked() {
    let mut tape = Tape::new(Precision::F64);
    let x = tape.param("x", t(&[2], &[1.0, 2.0]));
    let y = tape.tanh(x).unwrap();
    assert!(tape.backward(y, &Tensor::scalar(1.0, Precision::F64)).is_err());
}

#[test]
fn quadratic_dense_matches_differences() {
    let mut prng = Prng::new(3);
    let x = randn(&[4, 3], &mut prng);
    let params = vec![("W".to_string(), randn(&[3, 2], &mut prng)), ("b".to_string(), randn(&[2], &mut prng))];
    let rep = gradcheck(&params, GradCheckOptions::default(), |tape, v| {
        let xv = tape.constant(x.clone());
        let y = tape.dense(xv, v[0], Some(v[1]))?;
        let sq = tape.mul(y, y)?;
        tape.sum(sq)
    })
    .unwrap();
    assert_eq!(rep.param_count(), 8);
    assert!(rep.max_rel_err() < 1e-9, "{}", rep.max_rel_err());
}

#[test]
fn linearity_of_backward() {
    let mut prng = Prng::new(5);
    let x0 = randn(&[3, 4], &mut prng);
    let grad_of = |a: f64, b: f64| {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.param("x", x0.clone());
        let l1 = {
            let s = tape.sigmoid(x).unwrap();
            tape.sum(s).unwrap()
        };
        let l2 = {
            let th = tape.tanh(x).unwrap();
            let sq = tape.mul(th, x).unwrap();
            tape.sum(sq).unwrap()
        };
        let (s1, s2) = (tape.scale(l1, a).unwrap(), tape.scale(l2, b).unwrap());
        let l = tape.add(s1, s2).unwrap();
        tape.backward(l, &Tensor::scalar(1.0, Precision::F64)).unwrap().get(x).unwrap().clone()
    };
    let (g1, g2, g) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.0, -3.0));
    for i in 0..g.len() {
        let want = 2.0 * g1.data()[i] - 3.0 * g2.data()[i];
        assert!((g.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn maxpool_routes_to_argmax_only() {
    let data: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
    let mut tape = Tape::new(Precision::F64);
    let x = tape.param("x", t(&[1, 1, 4, 4], &data));
    let p = tape.maxpool2d(x, (2, 2), (2, 2)).unwrap();
    let s = tape.dot(p, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let g = tape.backward(s, &Tensor::scalar(1.0, Precision::F64)).unwrap();
    let g = g.get(x).unwrap().data().to_vec();
    for (w, coeff) in [(0usize, 1.0), (1, 2.0), (2, 3.0), (3, 4.0)] {
        let (r0, c0) = (2 * (w / 2), 2 * (w % 2));
        let cells: Vec<usize> = (0..4).map(|k| (r0 + k / 2) * 4 + c0 + k % 2).collect();
        let best = *cells.iter().max_by(|a, b| data[**a].total_cmp(&data[**b])).unwrap();
        for c in cells {
            assert_eq!(g[c], if c == best { coeff } else { 0.0 });
        }
    }
}

fn scalar_gru_params(prng: &mut Prng) -> Vec<(String, Tensor)> {
    ["W_h", "U_h", "b_h", "W_z", "U_z", "b_z", "W_r", "U_r", "b_r"]
        .iter()
        .map(|n| {
            let shape: &[usize] = if n.starts_with('b') { &[1] } else { &[1, 1] };
            (format!("layer1.{n}"), randn(shape, prng))
        })
        .collect()
}

#[test]
fn scalar_gru_chain_matches_differences() {
    let cell = Cell::new("layer1", CellConfig::gru(1, 1)).unwrap();
    let mut prng = Prng::new(9);
    let params = scalar_gru_params(&mut prng);
    let xs: Vec<Tensor> = (0..3).map(|_| randn(&[1, 1], &mut prng)).collect();
    let masks = vec![vec![true]; 3];
    let rep = gradcheck_with(&params, GradCheckOptions::default(), |tape, vars| {
        let bound = Bound::from_map(params.iter().map(|(n, _)| n.clone()).zip(vars.iter().copied()).collect());
        let x: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let seq = cell.run(tape, &bound, &x, &masks, NormMode::Train, &mut BnStore::new())?;
        Ok::<_, ModelError>(tape.sum(seq.h)?)
    })
    .unwrap();
    assert!(rep.max_rel_err() < 1e-6, "{:?}", rep.per_param());
}

#[test]
fn two_layer_detrended_stack_passes() {
    let l1 = Cell::new("layer1", CellConfig::gru(2, 4).with_method(NormMethod::AD)).unwrap();
    let l2 = Cell::new("layer2", CellConfig::gru(4, 3).with_method(NormMethod::AD)).unwrap();
    let mut prng = Prng::new(21);
    let mut store = ParamStore::new();
    l1.init(&mut store, &mut prng, 0.5, Precision::F64).unwrap();
    l2.init(&mut store, &mut prng, 0.5, Precision::F64).unwrap();
    let params: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let xs: Vec<Tensor> = (0..5).map(|_| randn(&[3, 2], &mut prng)).collect();
    let masks = vec![vec![true; 3]; 5];
    let coeffs: Vec<f64> = (0..9).map(|_| prng.normal()).collect();
    let rep = gradcheck_with(&params, GradCheckOptions::default(), |tape, vars| {
        let map: HashMap<_, _> = params.iter().map(|(n, _)| n.clone()).zip(vars.iter().copied()).collect();
        let bound = Bound::from_map(map);
        let x: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let mut bn = BnStore::new();
        let s1 = l1.run(tape, &bound, &x, &masks, NormMode::Train, &mut bn)?;
        let s2 = l2.run(tape, &bound, &s1.outputs, &masks, NormMode::Train, &mut bn)?;
        let last = *s2.outputs.last().unwrap();
        Ok::<_, ModelError>(tape.dot(last, &coeffs)?)
    })
    .unwrap();
    assert!(rep.passed(), "{:?}", rep.per_param());
}

#[test]
fn corrupted_adjoint_is_caught() {
    for kind in [CellKind::Gru, CellKind::ConvGru] {
        let case = CellCase {
            kind,
            method: NormMethod::AD,
            placement: Placement::Hidden,
            steps: 3,
        };
        let opts = GradCheckOptions {
            fault: Some(AdjointFault::default()),
            ..Default::default()
        };
        let rep = cell_gradcheck(&case, opts, 11).unwrap();
        assert!(!rep.passed());
        assert!(rep.max_rel_err() > 1e-2);
    }
}

// The fixed instance passes at the default step; other instances are shown
// correct at a finer step, where the O(step²) truncation term cannot mask a
// wrong adjoint but also cannot exceed the tolerance.
#[test]
fn matrix_passes_on_fresh_instances_at_fine_step() {
    let opts = GradCheckOptions {
        step: 1e-5,
        ..Default::default()
    };
    for seed in [12, 14, 16] {
        for case in full_matrix(&[3]) {
            let rep = cell_gradcheck(&case, opts, seed).unwrap();
            assert!(rep.passed(), "seed {seed} {}: {:.3e}", case.label(), rep.max_rel_err());
        }
    }
}

#[test]
fn check_instances_are_small() {
    for case in full_matrix(&[1]) {
        let n = case.cell().unwrap().param_count();
        assert!(n <= 200, "{} has {n}", case.label());
    }
}
