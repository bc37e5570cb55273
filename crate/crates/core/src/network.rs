//! Layer stacks: the convolutional-recurrent recognizer, its multi-head
//! softmax readout, and a memoryless per-frame CNN baseline.

use crate::cell::{Cell, CellConfig, ModelError, NormMethod, Placement, SequenceVars};
use crate::grad::{softmax, Tape, Var};
use crate::kernels::{out_extent, ConvSpec};
use crate::norm::NormMode;
use crate::params::{BnStore, Bound, ParamStore};
use crate::prng::{gaussian_init, Prng};
use crate::tensor::{Precision, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    ConvGru {
        hidden: usize,
    },
    GlobalAvg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// `(channels, height, width)` of one frame.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Class count of every softmax head.
    pub heads: Vec<usize>,
    pub method: NormMethod,
    pub placement: Placement,
    pub update_bias: f64,
    pub init_sigma: f64,
    /// Multiplies every channel count in `layers`.
    pub width_scale: f64,
    /// Frames sampled per video by a network without recurrent layers.
    pub sampled_frames: usize,
}

/// Output shape of each layer, `(channels, height, width)`.
pub type ShapeChain = Vec<(usize, usize, usize)>;

impl NetworkConfig {
    /// The reference recognizer at full width: conv 7×7/3, max 3/3, ConvGRU 64,
    /// max 2/2, ConvGRU 128, global average, one FC head per category.
    pub fn table_one(heads: Vec<usize>) -> Self {
        NetworkConfig {
            input: (3, 112, 112),
            layers: vec![
                LayerSpec::Conv {
                    out: 32,
                    kernel: 7,
                    stride: 3,
                    pad: 0,
                    relu: true,
                },
                LayerSpec::MaxPool { window: 3, stride: 3 },
                LayerSpec::ConvGru { hidden: 64 },
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::ConvGru { hidden: 128 },
                LayerSpec::GlobalAvg,
            ],
            heads,
            method: NormMethod::NONE,
            placement: Placement::Hidden,
            update_bias: -2.0,
            init_sigma: 0.05,
            width_scale: 1.0,
            sampled_frames: 25,
        }
    }

    /// Same topology sized for 28×28 grayscale crops at a quarter of the width.
    pub fn desk(heads: Vec<usize>) -> Self {
        let mut c = Self::table_one(heads);
        c.input = (1, 28, 28);
        c.layers[0] = LayerSpec::Conv {
            out: 32,
            kernel: 5,
            stride: 2,
            pad: 0,
            relu: true,
        };
        c.width_scale = 0.25;
        c
    }

    /// Per-frame CNN for 28×28 crops, evaluated on equally spaced frames and averaged.
    pub fn desk_frame_baseline(heads: Vec<usize>) -> Self {
        let mut c = Self::desk(heads);
        c.layers = vec![
            LayerSpec::Conv {
                out: 32,
                kernel: 5,
                stride: 2,
                pad: 0,
                relu: true,
            },
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv {
                out: 64,
                kernel: 3,
                stride: 1,
                pad: 1,
                relu: true,
            },
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv {
                out: 128,
                kernel: 3,
                stride: 1,
                pad: 1,
                relu: true,
            },
            LayerSpec::GlobalAvg,
        ];
        c
    }

    pub fn channels(&self, c: usize) -> usize {
        ((c as f64 * self.width_scale).round() as usize).max(1)
    }

    pub fn is_recurrent(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::ConvGru { .. }))
    }

    pub fn validate(&self) -> Result<ShapeChain, ModelError> {
        if self.heads.is_empty() || self.heads.iter().any(|&c| c < 2) {
            return Err(ModelError::Config(format!(
                "every head needs at least 2 classes, got {:?}",
                self.heads
            )));
        }
        if !(self.init_sigma > 0.0) || !(self.width_scale > 0.0) {
            return Err(ModelError::Config("init_sigma and width_scale must be positive".into()));
        }
        if !self.is_recurrent() && self.sampled_frames == 0 {
            return Err(ModelError::Config("a feed-forward network needs sampled_frames > 0".into()));
        }
        self.shape_chain()
    }

    /// Output shape after every layer.
    pub fn shape_chain(&self) -> Result<ShapeChain, ModelError> {
        let (mut c, mut h, mut w) = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv {
                    out: oc,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    h = out_extent("conv", h, kernel, stride, pad)?;
                    w = out_extent("conv", w, kernel, stride, pad)?;
                    c = self.channels(oc);
                }
                LayerSpec::MaxPool { window, stride } => {
                    h = out_extent("maxpool", h, window, stride, 0)?;
                    w = out_extent("maxpool", w, window, stride, 0)?;
                }
                LayerSpec::ConvGru { hidden } => c = self.channels(hidden),
                LayerSpec::GlobalAvg => {
                    h = 1;
                    w = 1;
                }
            }
            out.push((c, h, w));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::GlobalAvg)) {
            return Err(ModelError::Config("the layer stack must end with global average pooling".into()));
        }
        Ok(out)
    }

    /// Window of the global-average layer (the spatial extent entering it).
    pub fn global_avg_window(&self) -> Result<(usize, usize), ModelError> {
        let chain = self.shape_chain()?;
        let i = chain.len() - 1;
        let (_, h, w) = if i == 0 {
            self.input
        } else {
            chain[i - 1]
        };
        Ok((h, w))
    }

    fn cell(&self, index: usize, input: usize, hidden: usize) -> Result<Cell, ModelError> {
        Cell::new(
            format!("layer{index}"),
            CellConfig::conv_gru(input, hidden)
                .with_method(self.method)
                .with_placement(self.placement)
                .with_update_bias(self.update_bias),
        )
    }

    fn head_prefix(&self, k: usize) -> String {
        format!("layer{}.head{}", self.layers.len() + 1, k + 1)
    }
}

/// Parameters, running statistics and construction seed of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub bn: BnStore,
    pub seed: u64,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[B, C_k]` logits per head at each sample's final valid step.
    pub logits: Vec<Var>,
    /// Recurrent layers in stack order, with their layer index.
    pub recurrent: Vec<(usize, SequenceVars)>,
    /// `masks[t][b]`: sample `b` has a frame at step `t`.
    pub masks: Vec<Vec<bool>>,
}

impl Model {
    pub fn build(config: NetworkConfig, seed: u64, precision: Precision) -> Result<Self, ModelError> {
        let chain = config.validate()?;
        let mut prng = Prng::new(seed);
        let mut params = ParamStore::new();
        let sigma = config.init_sigma;
        let mut c_in = config.input.0;
        for (i, layer) in config.layers.iter().enumerate() {
            let index = i + 1;
            match *layer {
                LayerSpec::Conv { kernel, .. } => {
                    let spec = ConvSpec::new(kernel, kernel, c_in, chain[i].0);
                    params.insert(
                        format!("layer{index}.W"),
                        gaussian_init(&mut prng, &spec.weight_shape(), sigma, precision)?,
                    );
                    params.insert(format!("layer{index}.b"), Tensor::zeros(vec![chain[i].0], precision));
                }
                LayerSpec::ConvGru { .. } => {
                    config.cell(index, c_in, chain[i].0)?.init(&mut params, &mut prng, sigma, precision)?;
                }
                LayerSpec::MaxPool { .. } | LayerSpec::GlobalAvg => {}
            }
            c_in = chain[i].0;
        }
        for (k, &classes) in config.heads.iter().enumerate() {
            let prefix = config.head_prefix(k);
            params.insert(
                format!("{prefix}.W"),
                gaussian_init(&mut prng, &[c_in, classes], sigma, precision)?,
            );
            params.insert(format!("{prefix}.b"), Tensor::zeros(vec![classes], precision));
        }
        Ok(Model {
            config,
            params,
            bn: BnStore::new(),
            seed,
        })
    }

    pub fn precision(&self) -> Precision {
        self.params.iter().next().map_or(Precision::F64, |(_, t)| t.precision())
    }

    /// Recurrent cells keyed by layer index.
    pub fn cells(&self) -> Result<Vec<(usize, Cell)>, ModelError> {
        let chain = self.config.shape_chain()?;
        let mut c_in = self.config.input.0;
        let mut out = Vec::new();
        for (i, layer) in self.config.layers.iter().enumerate() {
            if let LayerSpec::ConvGru { .. } = layer {
                out.push((i + 1, self.config.cell(i + 1, c_in, chain[i].0)?));
            }
            c_in = chain[i].0;
        }
        Ok(out)
    }

    /// Records a forward pass over a batch of videos (each a list of `[C,H,W]` frames).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        videos: &[&[Tensor]],
        mode: NormMode,
        bn: &mut BnStore,
    ) -> Result<ForwardVars, ModelError> {
        if videos.is_empty() || videos.iter().any(|v| v.is_empty()) {
            return Err(ModelError::EmptySequence);
        }
        let (c, h, w) = self.config.input;
        for v in videos {
            if let Some(f) = v.iter().find(|f| f.shape() != [c, h, w]) {
                return Err(TensorError::ShapeMismatch {
                    op: "forward",
                    expected: vec![c, h, w],
                    actual: f.shape().to_vec(),
                }
                .into());
            }
        }
        if self.config.is_recurrent() {
            self.forward_video(tape, bound, videos, mode, bn)
        } else {
            self.forward_frame_baseline(tape, bound, videos)
        }
    }

    fn forward_video(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        videos: &[&[Tensor]],
        mode: NormMode,
        bn: &mut BnStore,
    ) -> Result<ForwardVars, ModelError> {
        let t_max = videos.iter().map(|v| v.len()).max().unwrap_or(0);
        let masks: Vec<Vec<bool>> = (0..t_max).map(|t| videos.iter().map(|v| t < v.len()).collect()).collect();
        let mut seq: Vec<Var> = (0..t_max)
            .map(|t| {
                let frames: Vec<Option<&Tensor>> = videos.iter().map(|v| v.get(t)).collect();
                let x = stack(&frames, self.config.input, tape.precision());
                tape.constant(x)
            })
            .collect();

        let cells = self.cells()?;
        let mut recurrent = Vec::new();
        for (i, layer) in self.config.layers.iter().enumerate() {
            let index = i + 1;
            if let LayerSpec::ConvGru { .. } = layer {
                let cell = &cells.iter().find(|(j, _)| *j == index).expect("cell for every recurrent layer").1;
                let run = cell.run(tape, bound, &seq, &masks, mode, bn)?;
                seq = run.outputs.clone();
                recurrent.push((index, run));
            } else {
                seq = seq
                    .iter()
                    .map(|&x| self.feed_forward(tape, bound, index, layer, x))
                    .collect::<Result<_, _>>()?;
            }
        }

        // Track each sample's output at its last valid step.
        let mut last = seq[0];
        for (t, &out) in seq.iter().enumerate().skip(1) {
            last = if masks[t].iter().all(|&m| m) {
                out
            } else if masks[t].iter().any(|&m| m) {
                tape.select(&masks[t], out, last)?
            } else {
                last
            };
        }
        let logits = self.heads(tape, bound, last)?;
        Ok(ForwardVars {
            logits,
            recurrent,
            masks,
        })
    }

    fn forward_frame_baseline(&self, tape: &mut Tape, bound: &Bound, videos: &[&[Tensor]]) -> Result<ForwardVars, ModelError> {
        let k = self.config.sampled_frames;
        let mut per_frame: Vec<Vec<Var>> = vec![Vec::with_capacity(k); self.config.heads.len()];
        for j in 0..k {
            let frames: Vec<Option<&Tensor>> = videos.iter().map(|v| Some(&v[sample_index(j, k, v.len())])).collect();
            let mut x = tape.constant(stack(&frames, self.config.input, tape.precision()));
            for (i, layer) in self.config.layers.iter().enumerate() {
                x = self.feed_forward(tape, bound, i + 1, layer, x)?;
            }
            for (head, logits) in self.heads(tape, bound, x)?.into_iter().enumerate() {
                per_frame[head].push(logits);
            }
        }
        let logits = per_frame.iter().map(|ls| tape.mean(ls)).collect::<Result<_, _>>()?;
        Ok(ForwardVars {
            logits,
            recurrent: Vec::new(),
            masks: Vec::new(),
        })
    }

    fn feed_forward(&self, tape: &mut Tape, bound: &Bound, index: usize, layer: &LayerSpec, x: Var) -> Result<Var, ModelError> {
        let get = |suffix: &str| {
            let name = format!("layer{index}.{suffix}");
            bound.get(&name).ok_or(ModelError::MissingParam(name))
        };
        Ok(match *layer {
            LayerSpec::Conv {
                kernel,
                stride,
                pad,
                relu,
                ..
            } => {
                let w = get("W")?;
                let shape = tape.value(w).shape().to_vec();
                let spec = ConvSpec::new(kernel, kernel, shape[1], shape[0]).stride(stride, stride).pad(pad, pad);
                let y = tape.conv2d(x, w, Some(get("b")?), &spec)?;
                if relu {
                    tape.relu(y)?
                } else {
                    y
                }
            }
            LayerSpec::MaxPool { window, stride } => tape.maxpool2d(x, (window, window), (stride, stride))?,
            LayerSpec::GlobalAvg => tape.global_avg_pool(x)?,
            LayerSpec::ConvGru { .. } => unreachable!("recurrent layers run as sequences"),
        })
    }

    fn heads(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Vec<Var>, ModelError> {
        (0..self.config.heads.len())
            .map(|k| {
                let prefix = self.config.head_prefix(k);
                let w = bound.get(&format!("{prefix}.W")).ok_or_else(|| ModelError::MissingParam(format!("{prefix}.W")))?;
                let b = bound.get(&format!("{prefix}.b")).ok_or_else(|| ModelError::MissingParam(format!("{prefix}.b")))?;
                Ok(tape.dense(features, w, Some(b))?)
            })
            .collect()
    }

    /// Evaluation-mode class probabilities: `[head][sample][class]`.
    pub fn predict(&self, videos: &[&[Tensor]]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        let mut tape = Tape::new(self.precision());
        let bound = self.params.bind(&mut tape);
        let mut bn = self.bn.clone();
        let fw = self.forward(&mut tape, &bound, videos, NormMode::Eval, &mut bn)?;
        Ok(fw.logits.iter().map(|&l| probabilities(tape.value(l))).collect())
    }
}

/// Row-wise softmax of a `[B, C]` logit tensor.
pub fn probabilities(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = *logits.shape().last().expect("non-empty shape");
    logits.data().chunks(c).map(softmax).collect()
}

/// Index of the `j`-th of `k` equally spaced frames in a video of `len` frames.
pub fn sample_index(j: usize, k: usize, len: usize) -> usize {
    if k <= 1 || len <= 1 {
        0
    } else {
        j * (len - 1) / (k - 1)
    }
}

/// Stacks `[C,H,W]` frames into `[B,C,H,W]`; missing frames are zeros.
fn stack(frames: &[Option<&Tensor>], (c, h, w): (usize, usize, usize), precision: Precision) -> Tensor {
    let per = c * h * w;
    let mut data = vec![0.0; frames.len() * per];
    for (b, f) in frames.iter().enumerate() {
        if let Some(f) = f {
            data[b * per..(b + 1) * per].copy_from_slice(f.data());
        }
    }
    Tensor::with_precision(vec![frames.len(), c, h, w], data, precision).expect("frames were validated")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_chain() {
        let cfg = NetworkConfig::table_one(vec![15]);
        let chain = cfg.validate().unwrap();
        let spatial: Vec<usize> = chain.iter().map(|s| s.1).collect();
        assert_eq!(spatial, vec![36, 12, 12, 6, 6, 1]);
        assert_eq!(cfg.global_avg_window().unwrap(), (6, 6));
        assert_eq!(chain.last().unwrap().0, 128);
    }

    #[test]
    fn desk_chain() {
        let cfg = NetworkConfig::desk(vec![2, 2, 3]);
        let chain = cfg.validate().unwrap();
        assert_eq!(chain, vec![(8, 12, 12), (8, 4, 4), (16, 4, 4), (16, 2, 2), (32, 2, 2), (32, 1, 1)]);
        let base = NetworkConfig::desk_frame_baseline(vec![2, 2, 3]);
        assert_eq!(base.validate().unwrap().last().unwrap(), &(32, 1, 1));
    }

    #[test]
    fn head_blocks_follow_categories() {
        let one = Model::build(NetworkConfig::desk(vec![15]), 0, Precision::F64).unwrap();
        let two = Model::build(NetworkConfig::desk(vec![4, 9]), 0, Precision::F64).unwrap();
        let heads = |m: &Model| m.params.names().filter(|n| n.contains(".head") && n.ends_with(".W")).count();
        assert_eq!(heads(&one), 1);
        assert_eq!(heads(&two), 2);
        assert!(two.params.contains("layer7.head2.W"));
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(NetworkConfig::desk(vec![1]).validate().is_err());
        let mut c = NetworkConfig::desk(vec![3]);
        c.input = (1, 4, 4);
        assert!(c.validate().is_err());
    }

    #[test]
    fn equally_spaced_indices() {
        let idx: Vec<usize> = (0..25).map(|j| sample_index(j, 25, 49)).collect();
        assert_eq!(idx[0], 0);
        assert_eq!(idx[24], 48);
        assert_eq!(idx[1], 2);
        assert_eq!(sample_index(3, 25, 1), 0);
    }
}
