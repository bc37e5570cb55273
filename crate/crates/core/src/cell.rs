//! Recurrent cells: plain RNN, GRU and convolutional GRU, with optional
//! step-wise normalization of their linear terms and the detrended output path.

use std::fmt;

use crate::grad::{BnSource, GradError, Tape, Var};
use crate::kernels::ConvSpec;
use crate::norm::{BnRunningStats, NormError, NormMode};
use crate::params::{BnStore, Bound, ParamStore};
use crate::prng::{gaussian_init, Prng};
use crate::tensor::{Precision, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty sequence")]
    EmptySequence,
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Grad(e.into())
    }
}

impl From<NormError> for ModelError {
    fn from(e: NormError) -> Self {
        ModelError::Grad(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Rnn,
    Gru,
    ConvGru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    None,
    Batch,
    Layer,
}

/// A normalizer choice plus whether the detrended output is emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormMethod {
    pub kind: NormKind,
    pub detrend: bool,
}

impl NormMethod {
    pub const NONE: NormMethod = NormMethod::new(NormKind::None, false);
    pub const AD: NormMethod = NormMethod::new(NormKind::None, true);
    pub const BN: NormMethod = NormMethod::new(NormKind::Batch, false);
    pub const LN: NormMethod = NormMethod::new(NormKind::Layer, false);
    pub const BN_AD: NormMethod = NormMethod::new(NormKind::Batch, true);
    pub const LN_AD: NormMethod = NormMethod::new(NormKind::Layer, true);
    pub const ALL: [NormMethod; 6] = [Self::NONE, Self::AD, Self::BN, Self::LN, Self::BN_AD, Self::LN_AD];

    pub const fn new(kind: NormKind, detrend: bool) -> Self {
        NormMethod { kind, detrend }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn name(self) -> &'static str {
        match (self.kind, self.detrend) {
            (NormKind::None, false) => "none",
            (NormKind::None, true) => "ad",
            (NormKind::Batch, false) => "bn",
            (NormKind::Layer, false) => "ln",
            (NormKind::Batch, true) => "bn_ad",
            (NormKind::Layer, true) => "ln_ad",
        }
    }
}

impl fmt::Display for NormMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which linear terms a spatial normalizer acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Placement {
    All,
    #[default]
    Hidden,
    Gates,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::All, Placement::Hidden, Placement::Gates];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::All => "all",
            Placement::Hidden => "hidden",
            Placement::Gates => "gates",
        }
    }

    pub fn covers(self, term: Term) -> bool {
        match self {
            Placement::All => true,
            Placement::Hidden => matches!(term, Term::Wh | Term::Uh),
            Placement::Gates => !matches!(term, Term::Wh | Term::Uh),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One linear term of the GRU equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Wh,
    Uh,
    Wz,
    Uz,
    Wr,
    Ur,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Wh, Term::Uh, Term::Wz, Term::Uz, Term::Wr, Term::Ur];

    pub fn name(self) -> &'static str {
        match self {
            Term::Wh => "Wh",
            Term::Uh => "Uh",
            Term::Wz => "Wz",
            Term::Uz => "Uz",
            Term::Wr => "Wr",
            Term::Ur => "Ur",
        }
    }

    fn weight(self) -> &'static str {
        match self {
            Term::Wh => "W_h",
            Term::Uh => "U_h",
            Term::Wz => "W_z",
            Term::Uz => "U_z",
            Term::Wr => "W_r",
            Term::Ur => "U_r",
        }
    }

    /// Input-to-hidden terms get a shift after normalization; recurrent ones only a gain.
    pub fn is_input(self) -> bool {
        matches!(self, Term::Wh | Term::Wz | Term::Wr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellConfig {
    pub kind: CellKind,
    /// Input features (dense) or channels (convolutional).
    pub input: usize,
    /// Hidden units or channels.
    pub hidden: usize,
    pub method: NormMethod,
    pub placement: Placement,
    /// Initial update-gate bias (or its normalizer shift).
    pub update_bias: f64,
    /// Square kernel size of both convolutions; padding keeps the extent.
    pub kernel: usize,
}

impl CellConfig {
    pub fn gru(input: usize, hidden: usize) -> Self {
        CellConfig {
            kind: CellKind::Gru,
            input,
            hidden,
            method: NormMethod::NONE,
            placement: Placement::Hidden,
            update_bias: -2.0,
            kernel: 3,
        }
    }

    pub fn conv_gru(input: usize, hidden: usize) -> Self {
        CellConfig {
            kind: CellKind::ConvGru,
            ..Self::gru(input, hidden)
        }
    }

    pub fn rnn(input: usize, hidden: usize) -> Self {
        CellConfig {
            kind: CellKind::Rnn,
            update_bias: 0.0,
            ..Self::gru(input, hidden)
        }
    }

    pub fn with_method(mut self, method: NormMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn with_update_bias(mut self, b: f64) -> Self {
        self.update_bias = b;
        self
    }
}

/// Per-step values of one cell, read back from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub h_tilde: Option<Tensor>,
    pub h: Tensor,
    pub z: Option<Tensor>,
    pub r: Option<Tensor>,
    /// Detrended output `h̃ − h`; present only when detrending is active.
    pub y: Option<Tensor>,
}

/// Tape handles of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepVars {
    pub h_tilde: Option<Var>,
    pub h: Var,
    pub z: Option<Var>,
    pub r: Option<Var>,
    pub y: Option<Var>,
}

impl StepVars {
    /// What the next layer receives.
    pub fn upward(&self) -> Var {
        self.y.unwrap_or(self.h)
    }

    pub fn record(&self, tape: &Tape) -> StepRecord {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        StepRecord {
            h_tilde: get(self.h_tilde),
            h: tape.value(self.h).clone(),
            z: get(self.z),
            r: get(self.r),
            y: get(self.y),
        }
    }
}

/// Mutable context of one timestep.
#[derive(Debug)]
pub struct StepCtx<'a> {
    /// Zero-based timestep; selects the batch-norm statistics slot.
    pub t: usize,
    pub mode: NormMode,
    /// Which batch members have a real frame at this step.
    pub valid: &'a [bool],
    pub bn: &'a mut BnStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub prefix: String,
    pub config: CellConfig,
}

impl Cell {
    pub fn new(prefix: impl Into<String>, config: CellConfig) -> Result<Self, ModelError> {
        if config.input == 0 || config.hidden == 0 {
            return Err(ModelError::Config("cell widths must be positive".into()));
        }
        if config.kind == CellKind::Rnn && config.method != NormMethod::NONE {
            return Err(ModelError::Config(format!(
                "the plain RNN cell supports only `none`, got `{}`",
                config.method
            )));
        }
        if config.kind == CellKind::ConvGru && config.kernel % 2 == 0 {
            return Err(ModelError::Config(format!(
                "recurrent kernel {} cannot preserve the spatial extent",
                config.kernel
            )));
        }
        Ok(Cell {
            prefix: prefix.into(),
            config,
        })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    pub fn is_convolutional(&self) -> bool {
        self.config.kind == CellKind::ConvGru
    }

    pub fn detrends(&self) -> bool {
        self.config.method.detrend
    }

    pub fn normalized(&self, term: Term) -> bool {
        self.config.kind != CellKind::Rnn
            && self.config.method.kind != NormKind::None
            && self.config.placement.covers(term)
    }

    fn terms(&self) -> &'static [Term] {
        match self.config.kind {
            CellKind::Rnn => &[Term::Wh, Term::Uh],
            _ => &Term::ALL,
        }
    }

    pub fn forward_spec(&self) -> ConvSpec {
        let k = self.config.kernel;
        ConvSpec::new(k, k, self.config.input, self.config.hidden).pad(k / 2, k / 2)
    }

    pub fn recurrent_spec(&self) -> ConvSpec {
        let k = self.config.kernel;
        ConvSpec::new(k, k, self.config.hidden, self.config.hidden).pad(k / 2, k / 2)
    }

    fn weight_shape(&self, term: Term) -> Vec<usize> {
        let c = &self.config;
        match (c.kind, term.is_input()) {
            (CellKind::ConvGru, true) => self.forward_spec().weight_shape().to_vec(),
            (CellKind::ConvGru, false) => self.recurrent_spec().weight_shape().to_vec(),
            (_, true) => vec![c.input, c.hidden],
            (_, false) => vec![c.hidden, c.hidden],
        }
    }

    fn bias_of(term: Term) -> &'static str {
        match term {
            Term::Wh | Term::Uh => "b_h",
            Term::Wz | Term::Uz => "b_z",
            Term::Wr | Term::Ur => "b_r",
        }
    }

    /// Parameter names and shapes, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.config.hidden;
        let mut out = Vec::new();
        for pair in self.terms().chunks(2) {
            let (w, u) = (pair[0], pair[1]);
            out.push((self.name(w.weight()), self.weight_shape(w)));
            out.push((self.name(u.weight()), self.weight_shape(u)));
            if !self.normalized(w) {
                out.push((self.name(Self::bias_of(w)), vec![h]));
            }
        }
        for &term in self.terms() {
            if self.normalized(term) {
                out.push((self.name(&format!("gamma_{}", term.name())), vec![h]));
                if term.is_input() {
                    out.push((self.name(&format!("beta_{}", term.name())), vec![h]));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Gaussian weights, zero biases except the update gate, unit gains.
    pub fn init(&self, store: &mut ParamStore, prng: &mut Prng, sigma: f64, precision: Precision) -> Result<(), ModelError> {
        for (name, shape) in self.param_shapes() {
            let suffix = &name[self.prefix.len() + 1..];
            let value = if suffix.starts_with("W_") || suffix.starts_with("U_") {
                gaussian_init(prng, &shape, sigma, precision)?
            } else if suffix.starts_with("gamma_") {
                Tensor::full(shape, 1.0, precision)
            } else if suffix == "b_z" || suffix == "beta_Wz" {
                Tensor::full(shape, self.config.update_bias, precision)
            } else {
                Tensor::zeros(shape, precision)
            };
            store.insert(name, value);
        }
        Ok(())
    }

    /// Shape of the hidden state for a batch whose input has the given shape.
    pub fn state_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>, ModelError> {
        let c = &self.config;
        match (c.kind, input_shape) {
            (CellKind::ConvGru, [b, ch, h, w]) if *ch == c.input => Ok(vec![*b, c.hidden, *h, *w]),
            (CellKind::Gru | CellKind::Rnn, [b, n]) if *n == c.input => Ok(vec![*b, c.hidden]),
            _ => Err(TensorError::Invalid {
                op: "cell input",
                msg: format!("{:?} cell with {} inputs cannot take shape {input_shape:?}", c.kind, c.input),
            }
            .into()),
        }
    }

    fn var(&self, bound: &Bound, suffix: &str) -> Result<Var, ModelError> {
        let name = self.name(suffix);
        bound.get(&name).ok_or(ModelError::MissingParam(name))
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, src: Var, term: Term, bias: Option<Var>) -> Result<Var, ModelError> {
        let w = self.var(bound, term.weight())?;
        let out = if self.is_convolutional() {
            let spec = if term.is_input() {
                self.forward_spec()
            } else {
                self.recurrent_spec()
            };
            tape.conv2d(src, w, bias, &spec)?
        } else {
            tape.dense(src, w, bias)?
        };
        Ok(out)
    }

    /// One linear term, normalized if the configuration says so; the equation's
    /// bias rides on the input term when the equation is left unnormalized.
    fn term(&self, tape: &mut Tape, bound: &Bound, src: Var, term: Term, ctx: &mut StepCtx<'_>) -> Result<Var, ModelError> {
        if !self.normalized(term) {
            let bias = if term.is_input() {
                Some(self.var(bound, Self::bias_of(term))?)
            } else {
                None
            };
            return self.linear(tape, bound, src, term, bias);
        }
        let raw = self.linear(tape, bound, src, term, None)?;
        let gamma = self.var(bound, &format!("gamma_{}", term.name()))?;
        let beta = if term.is_input() {
            Some(self.var(bound, &format!("beta_{}", term.name()))?)
        } else {
            None
        };
        match self.config.method.kind {
            NormKind::Layer => Ok(tape.layer_norm(raw, gamma, beta)?),
            NormKind::Batch => self.batch_norm(tape, raw, gamma, beta, term, ctx),
            NormKind::None => unreachable!("normalized() is false without a normalizer"),
        }
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        raw: Var,
        gamma: Var,
        beta: Option<Var>,
        term: Term,
        ctx: &mut StepCtx<'_>,
    ) -> Result<Var, ModelError> {
        let key = self.name(term.name());
        let features = self.config.hidden;
        if ctx.mode == NormMode::Train {
            match tape.batch_norm(raw, gamma, beta, BnSource::Batch { valid: ctx.valid }) {
                Ok((v, Some(st))) => {
                    ctx.bn
                        .entry(key)
                        .or_insert_with(|| BnRunningStats::new(features))
                        .update(ctx.t, &st.mean, &st.var, st.valid_samples);
                    return Ok(v);
                }
                Ok((v, None)) => return Ok(v),
                // A lone valid sample carries no batch statistics; use the running ones.
                Err(GradError::Norm(NormError::TooFewSamples(_))) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let stats = ctx.bn.get(&key).ok_or(NormError::Uninitialized(ctx.t))?.get(ctx.t)?;
        let (v, _) = tape.batch_norm(
            raw,
            gamma,
            beta,
            BnSource::Fixed {
                mean: &stats.mean,
                var: &stats.var,
            },
        )?;
        Ok(v)
    }

    /// Records one step on the tape. Masking of padded samples is left to the caller.
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h_prev: Var, ctx: &mut StepCtx<'_>) -> Result<StepVars, ModelError> {
        if self.config.kind == CellKind::Rnn {
            let wx = self.term(tape, bound, x, Term::Wh, ctx)?;
            let uh = self.term(tape, bound, h_prev, Term::Uh, ctx)?;
            let pre = tape.add(wx, uh)?;
            let h = tape.tanh(pre)?;
            return Ok(StepVars {
                h_tilde: None,
                h,
                z: None,
                r: None,
                y: None,
            });
        }

        let wr = self.term(tape, bound, x, Term::Wr, ctx)?;
        let ur = self.term(tape, bound, h_prev, Term::Ur, ctx)?;
        let pre_r = tape.add(wr, ur)?;
        let r = tape.sigmoid(pre_r)?;

        let wz = self.term(tape, bound, x, Term::Wz, ctx)?;
        let uz = self.term(tape, bound, h_prev, Term::Uz, ctx)?;
        let pre_z = tape.add(wz, uz)?;
        let z = tape.sigmoid(pre_z)?;

        let wh = self.term(tape, bound, x, Term::Wh, ctx)?;
        let uh = self.term(tape, bound, h_prev, Term::Uh, ctx)?;
        let gated = tape.mul(r, uh)?;
        let pre_h = tape.add(wh, gated)?;
        let h_tilde = tape.tanh(pre_h)?;

        let h = tape.lerp(z, h_tilde, h_prev)?;
        let y = if self.detrends() {
            Some(tape.sub(h_tilde, h)?)
        } else {
            None
        };
        Ok(StepVars {
            h_tilde: Some(h_tilde),
            h,
            z: Some(z),
            r: Some(r),
            y,
        })
    }

    /// Runs the cell over `inputs` from a zero state. `masks[t][b]` marks real
    /// frames; on padded steps the state is carried unchanged and the upward
    /// output is zero.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[Var],
        masks: &[Vec<bool>],
        mode: NormMode,
        bn: &mut BnStore,
    ) -> Result<SequenceVars, ModelError> {
        let first = inputs.first().ok_or(ModelError::EmptySequence)?;
        if masks.len() != inputs.len() {
            return Err(ModelError::Config(format!(
                "{} masks for {} steps",
                masks.len(),
                inputs.len()
            )));
        }
        let shape = self.state_shape(tape.value(*first).shape())?;
        let zero = tape.constant(Tensor::zeros(shape, tape.precision()));
        let mut h = zero;
        let mut steps = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());
        for (t, (&x, mask)) in inputs.iter().zip(masks).enumerate() {
            let mut ctx = StepCtx {
                t,
                mode,
                valid: mask,
                bn,
            };
            let sv = self.step(tape, bound, x, h, &mut ctx)?;
            let (next, up) = if mask.iter().all(|&m| m) {
                (sv.h, sv.upward())
            } else {
                (tape.select(mask, sv.h, h)?, tape.select(mask, sv.upward(), zero)?)
            };
            h = next;
            outputs.push(up);
            steps.push(sv);
        }
        Ok(SequenceVars { h, outputs, steps })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceVars {
    /// State after the last step (frozen at each sample's last valid step).
    pub h: Var,
    /// Upward output per step.
    pub outputs: Vec<Var>,
    pub steps: Vec<StepVars>,
}

fn single_step(
    cell: &Cell,
    x: &Tensor,
    h_prev: &Tensor,
    params: &ParamStore,
    t: usize,
    mode: NormMode,
    bn: &mut BnStore,
) -> Result<StepRecord, ModelError> {
    let mut tape = Tape::new(x.precision());
    let bound = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h_prev.clone());
    let batch = x.shape()[0];
    let valid = vec![true; batch];
    let mut ctx = StepCtx {
        t,
        mode,
        valid: &valid,
        bn,
    };
    Ok(cell.step(&mut tape, &bound, xv, hv, &mut ctx)?.record(&tape))
}

/// `tanh(W x + U h + b)` for a batch `[B, N]`.
pub fn rnn_step(x: &Tensor, h_prev: &Tensor, params: &ParamStore, cell: &Cell) -> Result<Tensor, ModelError> {
    if cell.config.kind != CellKind::Rnn {
        return Err(ModelError::Config("rnn_step needs an RNN cell".into()));
    }
    Ok(single_step(cell, x, h_prev, params, 0, NormMode::Eval, &mut BnStore::new())?.h)
}

/// One unnormalized GRU (or ConvGRU) step.
pub fn gru_step(x: &Tensor, h_prev: &Tensor, params: &ParamStore, cell: &Cell) -> Result<StepRecord, ModelError> {
    if cell.config.kind == CellKind::Rnn || cell.config.method.kind != NormKind::None {
        return Err(ModelError::Config("gru_step needs an unnormalized gated cell".into()));
    }
    single_step(cell, x, h_prev, params, 0, NormMode::Eval, &mut BnStore::new())
}

/// One normalized GRU step at timestep `t`; train mode updates `bn`.
pub fn gru_step_normalized(
    x: &Tensor,
    h_prev: &Tensor,
    params: &ParamStore,
    cell: &Cell,
    t: usize,
    mode: NormMode,
    bn: &mut BnStore,
) -> Result<StepRecord, ModelError> {
    if cell.config.method.kind == NormKind::None {
        return Err(ModelError::Config("gru_step_normalized needs bn or ln".into()));
    }
    single_step(cell, x, h_prev, params, t, mode, bn)
}

/// Final state, upward outputs and per-step records of a whole sequence of
/// `[B, ...]` inputs with no padding.
pub fn run_sequence(
    cell: &Cell,
    params: &ParamStore,
    inputs: &[Tensor],
    mode: NormMode,
    bn: &mut BnStore,
) -> Result<(Tensor, Vec<Tensor>, Vec<StepRecord>), ModelError> {
    let first = inputs.first().ok_or(ModelError::EmptySequence)?;
    let mut tape = Tape::new(first.precision());
    let bound = params.bind(&mut tape);
    let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let masks = vec![vec![true; first.shape()[0]]; inputs.len()];
    let seq = cell.run(&mut tape, &bound, &xs, &masks, mode, bn)?;
    let outputs = seq.outputs.iter().map(|&v| tape.value(v).clone()).collect();
    let records = seq.steps.iter().map(|s| s.record(&tape)).collect();
    Ok((tape.value(seq.h).clone(), outputs, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn scalar_gru(method: NormMethod, wh: f64, uh: f64, bz: f64) -> (Cell, ParamStore) {
        let cell = Cell::new("layer1", CellConfig::gru(1, 1).with_method(method)).unwrap();
        let mut p = ParamStore::new();
        for (n, v) in [
            ("W_h", wh),
            ("U_h", uh),
            ("b_h", 0.0),
            ("W_z", 0.0),
            ("U_z", 0.0),
            ("b_z", bz),
            ("W_r", 0.0),
            ("U_r", 0.0),
            ("b_r", 0.0),
        ] {
            let shape = if n.starts_with('b') { vec![1] } else { vec![1, 1] };
            p.insert(format!("layer1.{n}"), Tensor::full(shape, v, Precision::F64));
        }
        (cell, p)
    }

    #[test]
    fn rnn_closed_form() {
        let cell = Cell::new("layer1", CellConfig::rnn(1, 1)).unwrap();
        let mut p = ParamStore::new();
        p.insert("layer1.W_h", t(&[1, 1], &[1.0]));
        p.insert("layer1.U_h", t(&[1, 1], &[0.0]));
        p.insert("layer1.b_h", t(&[1], &[0.0]));
        let h = rnn_step(&t(&[1, 1], &[0.5]), &t(&[1, 1], &[0.0]), &p, &cell).unwrap();
        assert!((h.data()[0] - 0.46212).abs() < 1e-5);
        assert!(Cell::new("l", CellConfig::rnn(1, 1).with_method(NormMethod::AD)).is_err());
    }

    #[test]
    fn update_gate_extremes() {
        let x = t(&[1, 1], &[0.3]);
        let hp = t(&[1, 1], &[0.2]);
        let (cell, p) = scalar_gru(NormMethod::AD, 1.0, 0.5, 60.0);
        let r = gru_step(&x, &hp, &p, &cell).unwrap();
        assert_eq!(r.h.data(), r.h_tilde.as_ref().unwrap().data());
        assert_eq!(r.y.unwrap().data(), &[0.0]);

        let (cell, p) = scalar_gru(NormMethod::AD, 1.0, 0.5, -60.0);
        let r = gru_step(&x, &hp, &p, &cell).unwrap();
        assert!((r.h.data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn scalar_detrend_by_hand() {
        // h̃ = tanh(W_h x) = 0.8 with x = atanh(0.8), z = 0.5, h_prev = 0.2
        let (cell, p) = scalar_gru(NormMethod::AD, 1.0, 0.0, 0.0);
        let r = gru_step(&t(&[1, 1], &[0.8f64.atanh()]), &t(&[1, 1], &[0.2]), &p, &cell).unwrap();
        assert!((r.h_tilde.unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert!((r.h.data()[0] - 0.5).abs() < 1e-15);
        assert!((r.y.unwrap().data()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn no_detrend_means_no_y() {
        let (cell, p) = scalar_gru(NormMethod::NONE, 1.0, 0.0, 0.0);
        let r = gru_step(&t(&[1, 1], &[0.1]), &t(&[1, 1], &[0.0]), &p, &cell).unwrap();
        assert!(r.y.is_none());
    }

    #[test]
    fn normalized_terms_drop_their_bias() {
        let cfg = CellConfig::gru(2, 3).with_method(NormMethod::BN);
        let names = |p: Placement| {
            Cell::new("layer3", cfg.with_placement(p))
                .unwrap()
                .param_shapes()
                .into_iter()
                .map(|(n, _)| n)
                .collect::<Vec<_>>()
        };
        let hidden = names(Placement::Hidden);
        assert!(!hidden.contains(&"layer3.b_h".to_string()));
        assert!(hidden.contains(&"layer3.b_z".to_string()));
        assert!(hidden.contains(&"layer3.beta_Wh".to_string()));
        assert!(!hidden.contains(&"layer3.beta_Uh".to_string()));
        let all = names(Placement::All);
        assert!(all.iter().all(|n| !n.contains(".b_")));
        assert_eq!(all.iter().filter(|n| n.contains("gamma_")).count(), 6);
    }

    #[test]
    fn update_shift_initialized_from_update_bias() {
        let cell = Cell::new(
            "layer1",
            CellConfig::gru(2, 3).with_method(NormMethod::LN).with_placement(Placement::Gates),
        )
        .unwrap();
        let mut p = ParamStore::new();
        cell.init(&mut p, &mut Prng::new(0), 0.05, Precision::F64).unwrap();
        assert!(p.get("layer1.b_z").is_none());
        assert_eq!(p.get("layer1.beta_Wz").unwrap().data(), &[-2.0; 3]);
        assert_eq!(p.get("layer1.beta_Wr").unwrap().data(), &[0.0; 3]);
        assert_eq!(p.get("layer1.gamma_Uz").unwrap().data(), &[1.0; 3]);
        assert_eq!(p.get("layer1.b_h").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn table_one_convgru_weight_count() {
        let cell = Cell::new("layer3", CellConfig::conv_gru(32, 64)).unwrap();
        let shapes = cell.param_shapes();
        let weights: usize = shapes
            .iter()
            .filter(|(n, _)| !n.contains(".b_"))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        let biases: usize = shapes
            .iter()
            .filter(|(n, _)| n.contains(".b_"))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(weights, 165_888);
        assert_eq!(biases, 192);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let (cell, p) = scalar_gru(NormMethod::NONE, 1.0, 0.0, 0.0);
        assert_eq!(
            run_sequence(&cell, &p, &[], NormMode::Eval, &mut BnStore::new()),
            Err(ModelError::EmptySequence)
        );
    }
}
