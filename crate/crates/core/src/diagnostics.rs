//! Analysis instruments: activation histograms and their drift between epochs,
//! smoothed norm traces, and per-neuron time series of a recurrent layer.

use std::io::Write;

use crate::cell::ModelError;
use crate::grad::Tape;
use crate::network::Model;
use crate::norm::NormMode;
use crate::tasks::{center_crop, Sample, TaskError};
use crate::tensor::Tensor;

pub const BINS: usize = 200;
pub const BIN_WIDTH: f64 = 2.0 / BINS as f64;
/// Decay of the smoothed companion series of a [`NormTrace`].
pub const TRACE_DECAY: f64 = 0.99;

#[derive(Debug, thiserror::Error)]
pub enum DiagError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("invalid neuron selector {0}")]
    Selector(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// 200 equal bins on `[-1, 1]`; values outside clamp to the edge bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram { counts: vec![0; BINS] }
    }
}

impl Histogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bin(v: f64) -> usize {
        let i = ((v + 1.0) / BIN_WIDTH).floor();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(BINS - 1)
        }
    }

    pub fn bin_lo(i: usize) -> f64 {
        -1.0 + i as f64 * BIN_WIDTH
    }

    pub fn add(&mut self, v: f64) {
        self.counts[Self::bin(v)] += 1;
    }

    pub fn extend(&mut self, vs: impl IntoIterator<Item = f64>) {
        for v in vs {
            self.add(v);
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn normalized(&self) -> Result<Vec<f64>, DiagError> {
        let n = self.total();
        if n == 0 {
            return Err(DiagError::EmptyHistogram);
        }
        Ok(self.counts.iter().map(|&c| c as f64 / n as f64).collect())
    }
}

/// Total-variation distance `½ Σ |p_a − p_b|` of two normalized histograms.
pub fn shift_metric(a: &Histogram, b: &Histogram) -> Result<f64, DiagError> {
    let (pa, pb) = (a.normalized()?, b.normalized()?);
    Ok(0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Raw per-iteration values and their exponentially smoothed companion,
/// initialized at the first raw value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormTrace {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl NormTrace {
    pub fn push(&mut self, raw: f64) {
        let s = match self.smoothed.last() {
            None => raw,
            Some(&prev) => TRACE_DECAY * prev + (1.0 - TRACE_DECAY) * raw,
        };
        self.raw.push(raw);
        self.smoothed.push(s);
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Recomputes the smoothed series from `raw` alone.
    pub fn from_raw(raw: &[f64]) -> Self {
        let mut t = NormTrace::default();
        for &r in raw {
            t.push(r);
        }
        t
    }

    /// Columns `iter, raw, smoothed`, iterations counted from 1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DiagError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iter", "raw", "smoothed"])?;
        for (i, (r, s)) in self.raw.iter().zip(&self.smoothed).enumerate() {
            out.write_record([(i + 1).to_string(), r.to_string(), s.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// One unit of a recurrent layer: `layer` is the 1-based layer index, `channel`
/// the feature index, and `(row, col)` the spatial position of a convolutional
/// state (ignored for dense states).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NeuronSelector {
    pub layer: usize,
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

impl NeuronSelector {
    pub fn name(&self) -> String {
        format!("layer{}.c{}.{}x{}", self.layer, self.channel, self.row, self.col)
    }

    /// Flat offset of this unit inside one sample of a `[B, ...]` state.
    fn offset(&self, shape: &[usize]) -> Result<usize, DiagError> {
        let bad = || DiagError::Selector(self.name());
        match shape.len() {
            2 if self.channel < shape[1] => Ok(self.channel),
            4 if self.channel < shape[1] && self.row < shape[2] && self.col < shape[3] => {
                Ok((self.channel * shape[2] + self.row) * shape[3] + self.col)
            }
            _ => Err(bad()),
        }
    }
}

/// `count` units of recurrent layer `layer`, evenly spread over its channels at
/// the center of its feature map.
pub fn default_selectors(model: &Model, layer: usize, count: usize) -> Result<Vec<NeuronSelector>, DiagError> {
    let chain = model.config.shape_chain()?;
    let is_cell = model.cells()?.iter().any(|(i, _)| *i == layer);
    if !is_cell || count == 0 {
        return Err(DiagError::Selector(format!("layer{layer}")));
    }
    let (c, h, w) = chain[layer - 1];
    let count = count.min(c);
    Ok((0..count)
        .map(|k| NeuronSelector {
            layer,
            channel: k * c / count,
            row: h / 2,
            col: w / 2,
        })
        .collect())
}

/// Histograms of one unit's hidden state and (under detrending) its
/// detrended output.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronHistograms {
    pub selector: NeuronSelector,
    pub hidden: Histogram,
    pub detrended: Option<Histogram>,
}

/// Activation histograms of the selected units over every valid step of
/// `data`, evaluated on center crops with running statistics.
pub fn record_histograms(
    model: &Model,
    data: &[&Sample],
    crop: usize,
    batch_size: usize,
    selectors: &[NeuronSelector],
) -> Result<Vec<NeuronHistograms>, DiagError> {
    let mut out: Vec<NeuronHistograms> = selectors
        .iter()
        .map(|&selector| NeuronHistograms {
            selector,
            hidden: Histogram::new(),
            detrended: None,
        })
        .collect();
    let precision = model.precision();
    for chunk in data.chunks(batch_size.max(1)) {
        let videos: Vec<Vec<Tensor>> = chunk
            .iter()
            .map(|s| center_crop(&s.frames, crop).map(|fs| fs.into_iter().map(|f| f.to_precision(precision)).collect()))
            .collect::<Result<_, _>>()?;
        let views: Vec<&[Tensor]> = videos.iter().map(|v| v.as_slice()).collect();
        let mut tape = Tape::new(precision);
        let bound = model.params.bind(&mut tape);
        let mut bn = model.bn.clone();
        let fw = model.forward(&mut tape, &bound, &views, NormMode::Eval, &mut bn)?;
        for nh in out.iter_mut() {
            let seq = &fw
                .recurrent
                .iter()
                .find(|(i, _)| *i == nh.selector.layer)
                .ok_or_else(|| DiagError::Selector(nh.selector.name()))?
                .1;
            for (t, step) in seq.steps.iter().enumerate() {
                let h = tape.value(step.h);
                let off = nh.selector.offset(h.shape())?;
                let per = h.len() / h.shape()[0];
                for (b, &valid) in fw.masks[t].iter().enumerate() {
                    if !valid {
                        continue;
                    }
                    nh.hidden.add(h.data()[b * per + off]);
                    if let Some(y) = step.y {
                        nh.detrended.get_or_insert_with(Histogram::new).add(tape.value(y).data()[b * per + off]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Long-format rows `epoch, neuron, stream, bin_lo, count`; 200 rows per
/// histogram.
pub fn write_histograms_csv<W: Write>(w: W, epochs: &[(usize, Vec<NeuronHistograms>)]) -> Result<(), DiagError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "neuron", "stream", "bin_lo", "count"])?;
    for (epoch, hists) in epochs {
        for nh in hists {
            let streams = std::iter::once(("h", &nh.hidden)).chain(nh.detrended.iter().map(|d| ("y", d)));
            for (stream, hist) in streams {
                for (i, c) in hist.counts.iter().enumerate() {
                    out.write_record([
                        epoch.to_string(),
                        nh.selector.name(),
                        stream.to_string(),
                        format!("{:.2}", Histogram::bin_lo(i)),
                        c.to_string(),
                    ])?;
                }
            }
        }
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Per-step values of one unit for one sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeuronTrace {
    pub h_tilde: Vec<f64>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

impl NeuronTrace {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Columns `t, h_tilde, h, z, y`, steps counted from 1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DiagError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "h_tilde", "h", "z", "y"])?;
        for t in 0..self.len() {
            out.write_record([
                (t + 1).to_string(),
                self.h_tilde[t].to_string(),
                self.h[t].to_string(),
                self.z[t].to_string(),
                self.y[t].to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Time series of one unit over a single sample. `y` is read from the
/// detrended output when present, otherwise computed as `h̃ − h`.
pub fn record_neuron_trace(
    model: &Model,
    sample: &Sample,
    crop: usize,
    selector: NeuronSelector,
) -> Result<NeuronTrace, DiagError> {
    let precision = model.precision();
    let frames: Vec<Tensor> = center_crop(&sample.frames, crop)?
        .into_iter()
        .map(|f| f.to_precision(precision))
        .collect();
    let mut tape = Tape::new(precision);
    let bound = model.params.bind(&mut tape);
    let mut bn = model.bn.clone();
    let fw = model.forward(&mut tape, &bound, &[frames.as_slice()], NormMode::Eval, &mut bn)?;
    let seq = &fw
        .recurrent
        .iter()
        .find(|(i, _)| *i == selector.layer)
        .ok_or_else(|| DiagError::Selector(selector.name()))?
        .1;
    let mut trace = NeuronTrace::default();
    for step in &seq.steps {
        let h = tape.value(step.h);
        let off = selector.offset(h.shape())?;
        let at = |v: Option<crate::grad::Var>| v.map(|v| tape.value(v).data()[off]);
        let (Some(ht), Some(z)) = (at(step.h_tilde), at(step.z)) else {
            return Err(DiagError::Selector(format!("{} is not a gated unit", selector.name())));
        };
        let hv = h.data()[off];
        trace.h_tilde.push(ht);
        trace.h.push(hv);
        trace.z.push(z);
        trace.y.push(at(step.y).unwrap_or(ht - hv));
    }
    Ok(trace)
}
