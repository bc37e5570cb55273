//! Gradient checks on miniature recurrent cells.

use std::collections::HashMap;

use crate::cell::{Cell, CellConfig, CellKind, ModelError, NormKind, NormMethod, Placement};
use crate::grad::{gradcheck_with, GradCheckOptions, GradReport, Tape};
use crate::norm::NormMode;
use crate::params::{BnStore, Bound, ParamStore};
use crate::prng::Prng;
use crate::tensor::{Precision, Tensor};

/// A small cell instance unrolled over `steps` timesteps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellCase {
    pub kind: CellKind,
    pub method: NormMethod,
    pub placement: Placement,
    pub steps: usize,
}

impl CellCase {
    /// Dense GRU 2→5 or ConvGRU 1→2 channels on a 3×3 map.
    pub fn cell(&self) -> Result<Cell, ModelError> {
        let config = match self.kind {
            CellKind::Gru => CellConfig::gru(2, 5),
            CellKind::ConvGru => CellConfig::conv_gru(1, 2),
            CellKind::Rnn => CellConfig::rnn(2, 5),
        };
        // A zero update bias lets the state grow quickly, which keeps the
        // normalized recurrent terms away from their near-zero-variance regime.
        Cell::new(
            "layer1",
            config
                .with_method(self.method)
                .with_placement(self.placement)
                .with_update_bias(0.0),
        )
    }

    fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            CellKind::ConvGru => vec![BATCH, 1, 3, 3],
            _ => vec![BATCH, 2],
        }
    }

    pub fn label(&self) -> String {
        let kind = match self.kind {
            CellKind::Rnn => "rnn",
            CellKind::Gru => "gru",
            CellKind::ConvGru => "convgru",
        };
        format!("{kind}/{}/{}/T={}", self.method, self.placement.name(), self.steps)
    }
}

/// Batch-norm needs at least two samples per statistic.
const BATCH: usize = 8;

/// Placements that change a method's computation; unnormalized methods have one.
pub fn placements_for(method: NormMethod) -> &'static [Placement] {
    if method.kind == NormKind::None {
        &[Placement::Hidden]
    } else {
        &Placement::ALL
    }
}

/// Parameters of `case`, perturbed away from their structured init so every
/// gain and shift carries a generic gradient.
pub fn case_params(case: &CellCase, seed: u64) -> Result<ParamStore, ModelError> {
    let cell = case.cell()?;
    let mut prng = Prng::new(seed);
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut prng, 0.8, Precision::F64)?;
    for (_, t) in store.iter_mut() {
        let data: Vec<f64> = t.data().iter().map(|v| v + 0.2 * prng.normal()).collect();
        *t = Tensor::new(t.shape().to_vec(), data)?;
    }
    Ok(store)
}

/// Central-difference check of `case` on a loss that weights every upward
/// output and the final state with fixed random coefficients. Batch-norm runs
/// in training mode on fresh statistics for each evaluation.
pub fn cell_gradcheck(case: &CellCase, opts: GradCheckOptions, seed: u64) -> Result<GradReport, ModelError> {
    if case.steps == 0 {
        return Err(ModelError::EmptySequence);
    }
    let cell = case.cell()?;
    let store = case_params(case, seed)?;
    let params: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();

    let mut prng = Prng::derive(seed, 1);
    let shape = case.input_shape();
    let len: usize = shape.iter().product();
    // Entries of magnitude in [0.5, 1.5]: a near-zero input vector would make
    // its normalized projection arbitrarily curved.
    let mut entry = || {
        let m = prng.range(0.5, 1.5);
        if prng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    };
    let inputs: Vec<Tensor> = (0..case.steps)
        .map(|_| Tensor::new(shape.clone(), (0..len).map(|_| entry()).collect()))
        .collect::<Result<_, _>>()?;
    let state_len = cell.state_shape(&shape)?.iter().product::<usize>();
    let coeffs: Vec<Vec<f64>> = (0..=case.steps)
        .map(|_| (0..state_len).map(|_| prng.normal() * 0.5).collect())
        .collect();
    let masks = vec![vec![true; BATCH]; case.steps];

    gradcheck_with(&params, opts, |tape: &mut Tape, vars| {
        let bound = Bound::from_map(params.iter().map(|(n, _)| n.clone()).zip(vars.iter().copied()).collect::<HashMap<_, _>>());
        let xs: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let mut bn = BnStore::new();
        let seq = cell.run(tape, &bound, &xs, &masks, NormMode::Train, &mut bn)?;
        let mut terms = Vec::with_capacity(case.steps + 1);
        for (out, c) in seq.outputs.iter().zip(&coeffs) {
            terms.push(tape.dot(*out, c)?);
        }
        terms.push(tape.dot(seq.h, &coeffs[case.steps])?);
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        Ok(loss)
    })
}

/// Every (cell, method, placement) combination at the given lengths.
pub fn full_matrix(lengths: &[usize]) -> Vec<CellCase> {
    let mut out = Vec::new();
    for kind in [CellKind::Gru, CellKind::ConvGru] {
        for method in NormMethod::ALL {
            for &placement in placements_for(method) {
                for &steps in lengths {
                    out.push(CellCase {
                        kind,
                        method,
                        placement,
                        steps,
                    });
                }
            }
        }
    }
    out
}
