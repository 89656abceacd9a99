//! The classification-and-localization network.
//!
//! One shared hourglass body serves two heads. A down-sampling encoder of
//! six residual modules and three 2× max-pools extracts features at four
//! scales. The localization branch walks back up — three upsample + residual
//! stages, each summed elementwise with a 1×1×1-convolved skip from the
//! matching encoder scale — and two final convolutions emit one raw heatmap
//! channel per vertebra class, which the integral head turns into continuous
//! crop-local coordinates. The classification branch reads the deepest
//! feature map through two small convolutions and a pool, averages each
//! axial slice into a per-slice feature vector, and runs the resulting
//! z-ordered sequence through stacked bidirectional LSTMs into per-class
//! logits.
//!
//! Two ablation switches mirror that structure: localization may instead
//! directly regress coordinates from a pooled deep feature
//! ([`LocMode::DirectFc`]) or emit heatmaps whose peak voxel is read off
//! non-differentiably at inference ([`LocMode::HeatmapArgmax`]); the
//! classification readout may swap its LSTMs for a global average pool
//! ([`ClsMode::GlobalPool`]).

pub mod layers;
pub mod lstm;
pub mod params;

use thiserror::Error;

use crate::integral::{integrate_coordinates, CoordinateGrid, HeatmapStack};
use crate::tensor::{TensorError, TensorId};

use layers::{Conv3, Norm, Residual};
use lstm::BiLstm;
use params::{Forward, Init, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
}

fn config_err(msg: impl Into<String>) -> NnError {
    NnError::Config(msg.into())
}

/// How the localization head produces coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocMode {
    /// Heatmaps → softmax normalization → expected coordinate (default).
    Integral,
    /// Global pool of the deepest feature → linear layer → coordinates.
    DirectFc,
    /// Heatmaps read out by their peak voxel, non-differentiably.
    HeatmapArgmax,
}

impl LocMode {
    pub const ALL: [LocMode; 3] = [LocMode::Integral, LocMode::DirectFc, LocMode::HeatmapArgmax];

    pub fn tag(self) -> &'static str {
        match self {
            LocMode::Integral => "integral",
            LocMode::DirectFc => "direct_fc",
            LocMode::HeatmapArgmax => "heatmap_argmax",
        }
    }

    pub fn parse(s: &str) -> Result<LocMode, NnError> {
        LocMode::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| config_err(format!("unknown localization mode {s:?}")))
    }
}

/// How the classification branch reduces its features to logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsMode {
    /// Axial-slice sequence through stacked Bi-LSTMs (default).
    BiLstm,
    /// Global average pool straight into the final linear layer.
    GlobalPool,
}

impl ClsMode {
    pub fn tag(self) -> &'static str {
        match self {
            ClsMode::BiLstm => "bilstm",
            ClsMode::GlobalPool => "global_pool",
        }
    }
}

/// Architecture hyperparameters. The crop must survive three 2× poolings,
/// so every axis has to divide by 8.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input crop extents `[D, H, W]` in voxels.
    pub crop: [usize; 3],
    /// Number of vertebra classes `N`.
    pub classes: usize,
    /// Channels at full resolution; deeper scales multiply this.
    pub base_channels: usize,
    /// Channel multipliers for the four scales (full, 1/2, 1/4, 1/8).
    pub multipliers: [usize; 4],
    /// Hidden width per LSTM direction.
    pub lstm_hidden: usize,
    /// Stacked bidirectional LSTM layers.
    pub lstm_layers: usize,
    /// Group-norm group cap; layers with fewer channels round down to a
    /// divisor.
    pub groups: usize,
    pub loc_mode: LocMode,
    pub cls_mode: ClsMode,
}

/// Kernel count of both classification-branch convolutions.
const CLS_CHANNELS: usize = 32;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            crop: [32, 24, 24],
            classes: 26,
            base_channels: 16,
            multipliers: [1, 2, 4, 8],
            lstm_hidden: 128,
            lstm_layers: 3,
            groups: 4,
            loc_mode: LocMode::Integral,
            cls_mode: ClsMode::BiLstm,
        }
    }
}

impl ModelConfig {
    /// Configuration sized for the synthetic-phantom training runs: small
    /// enough to train on a CPU in minutes, structurally identical to the
    /// default.
    pub fn desk() -> Self {
        ModelConfig {
            crop: [32, 24, 24],
            classes: 6,
            base_channels: 12,
            lstm_hidden: 48,
            lstm_layers: 2,
            ..ModelConfig::default()
        }
    }

    /// Smallest viable configuration, used for exhaustive gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            crop: [8, 8, 8],
            classes: 3,
            base_channels: 4,
            lstm_hidden: 6,
            lstm_layers: 1,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.crop.iter().any(|&e| e == 0 || e % 8 != 0) {
            return Err(config_err(format!(
                "crop {:?} axes must be positive multiples of 8",
                self.crop
            )));
        }
        if self.classes == 0 {
            return Err(config_err("the model needs at least one class"));
        }
        if self.base_channels == 0 || self.groups == 0 || self.base_channels % self.groups != 0 {
            return Err(config_err(format!(
                "base channels {} must be a positive multiple of the group cap {}",
                self.base_channels, self.groups
            )));
        }
        if self.multipliers.iter().any(|&m| m == 0) {
            return Err(config_err("channel multipliers must be positive"));
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(config_err("the LSTM needs nonzero width and depth"));
        }
        Ok(())
    }

    /// Channel counts at the four scales.
    pub fn channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b * self.multipliers[0], b * self.multipliers[1], b * self.multipliers[2], b * self.multipliers[3]]
    }
}

/// The localization decoder: skip convolutions, upsample-and-refine stages,
/// and the two-convolution heatmap head.
#[derive(Debug, Clone)]
struct Decoder {
    skips: Vec<Conv3>,
    rms: Vec<Residual>,
    head_a: Conv3,
    head_norm: Norm,
    head_b: Conv3,
}

/// Classification readout after the branch's convolutions.
#[derive(Debug, Clone)]
enum ClsReadout {
    BiLstm { layers: Vec<BiLstm>, fc_w: ParamId, fc_b: ParamId },
    GlobalPool { fc_w: ParamId, fc_b: ParamId },
}

/// Direct coordinate-regression head for the ablation.
#[derive(Debug, Clone)]
struct DirectHead {
    w: ParamId,
    b: ParamId,
}

/// All outputs of one forward pass, as tape ids.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// Per-class logits `[N]`.
    pub logits: TensorId,
    /// Per-class presence probabilities `sigmoid(logits)`, `[N]`.
    pub probs: TensorId,
    /// Raw and normalized heatmaps (heatmap-producing modes only).
    pub heatmaps: Option<HeatmapStack>,
    /// Coordinates `[N, 3]` in crop-local `(x, y, z)` voxels
    /// (integral and direct regression modes).
    pub coords: Option<TensorId>,
}

/// The network: configuration, parameters, and layer wiring.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: Vec<Residual>,
    decoder: Option<Decoder>,
    cls_conv1: Conv3,
    cls_norm1: Norm,
    cls_conv2: Conv3,
    cls_norm2: Norm,
    cls_readout: ClsReadout,
    direct: Option<DirectHead>,
}

impl Model {
    /// Builds and initializes a model. Each network branch draws from its
    /// own seeded stream, so the encoder's initial weights are identical
    /// across localization modes for a fixed seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model, NnError> {
        config.validate()?;
        let [c0, c1, c2, c3] = config.channels();
        let g = config.groups;
        let mut store = ParamStore::new();

        // Shared encoder: two residual modules at full resolution, one per
        // pooled scale, two at the deepest.
        let mut init = Init::branch(seed, 0);
        let encoder = vec![
            Residual::build(&mut init, &mut store, "enc.rm0", 1, c0, g),
            Residual::build(&mut init, &mut store, "enc.rm1", c0, c0, g),
            Residual::build(&mut init, &mut store, "enc.rm2", c0, c1, g),
            Residual::build(&mut init, &mut store, "enc.rm3", c1, c2, g),
            Residual::build(&mut init, &mut store, "enc.rm4", c2, c3, g),
            Residual::build(&mut init, &mut store, "enc.rm5", c3, c3, g),
        ];

        let decoder = match config.loc_mode {
            LocMode::Integral | LocMode::HeatmapArgmax => {
                let mut init = Init::branch(seed, 1);
                let skips = vec![
                    Conv3::build(&mut init, &mut store, "dec.skip0", c0, c0, [1; 3], true),
                    Conv3::build(&mut init, &mut store, "dec.skip1", c1, c1, [1; 3], true),
                    Conv3::build(&mut init, &mut store, "dec.skip2", c2, c2, [1; 3], true),
                    Conv3::build(&mut init, &mut store, "dec.skip3", c3, c3, [1; 3], true),
                ];
                let rms = vec![
                    Residual::build(&mut init, &mut store, "dec.rm2", c3, c2, g),
                    Residual::build(&mut init, &mut store, "dec.rm1", c2, c1, g),
                    Residual::build(&mut init, &mut store, "dec.rm0", c1, c0, g),
                ];
                let head_a =
                    Conv3::build(&mut init, &mut store, "dec.head_a", c0, c0, [3; 3], false);
                let head_norm = Norm::build(&mut store, "dec.head_a_norm", c0, g);
                let head_b = Conv3::build(
                    &mut init,
                    &mut store,
                    "dec.head_b",
                    c0,
                    config.classes,
                    [1; 3],
                    true,
                );
                Some(Decoder { skips, rms, head_a, head_norm, head_b })
            }
            LocMode::DirectFc => None,
        };

        let mut init = Init::branch(seed, 2);
        let cls_conv1 =
            Conv3::build(&mut init, &mut store, "cls.conv1", c3, CLS_CHANNELS, [5, 3, 3], false);
        let cls_norm1 = Norm::build(&mut store, "cls.norm1", CLS_CHANNELS, g);
        let cls_conv2 =
            Conv3::build(&mut init, &mut store, "cls.conv2", CLS_CHANNELS, CLS_CHANNELS, [1; 3], false);
        let cls_norm2 = Norm::build(&mut store, "cls.norm2", CLS_CHANNELS, g);
        let cls_readout = match config.cls_mode {
            ClsMode::BiLstm => {
                let mut layers = Vec::new();
                let mut width = CLS_CHANNELS;
                for l in 0..config.lstm_layers {
                    layers.push(BiLstm::build(
                        &mut init,
                        &mut store,
                        &format!("cls.lstm{l}"),
                        width,
                        config.lstm_hidden,
                    ));
                    width = 2 * config.lstm_hidden;
                }
                let fc_w =
                    init.fan_in_uniform(&mut store, "cls.fc.w", vec![config.classes, width], width);
                let fc_b = Init::constant(&mut store, "cls.fc.b", vec![config.classes], 0.0);
                ClsReadout::BiLstm { layers, fc_w, fc_b }
            }
            ClsMode::GlobalPool => {
                let fc_w = init.fan_in_uniform(
                    &mut store,
                    "cls.fc.w",
                    vec![config.classes, CLS_CHANNELS],
                    CLS_CHANNELS,
                );
                let fc_b = Init::constant(&mut store, "cls.fc.b", vec![config.classes], 0.0);
                ClsReadout::GlobalPool { fc_w, fc_b }
            }
        };

        let direct = match config.loc_mode {
            LocMode::DirectFc => {
                let mut init = Init::branch(seed, 3);
                let w = init.fan_in_uniform(
                    &mut store,
                    "loc.fc.w",
                    vec![3 * config.classes, c3],
                    c3,
                );
                let b = Init::constant(&mut store, "loc.fc.b", vec![3 * config.classes], 0.0);
                Some(DirectHead { w, b })
            }
            _ => None,
        };

        Ok(Model {
            config,
            store,
            encoder,
            decoder,
            cls_conv1,
            cls_norm1,
            cls_conv2,
            cls_norm2,
            cls_readout,
            direct,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Starts a forward pass bound to this model's parameters.
    pub fn begin(&self) -> Forward<'_> {
        Forward::new(&self.store)
    }

    /// Encoder features at the four scales (full, 1/2, 1/4, 1/8), before
    /// the skip convolutions.
    pub fn encoder_forward(
        &self,
        fwd: &mut Forward,
        input: TensorId,
    ) -> Result<[TensorId; 4], NnError> {
        let [d, h, w] = self.config.crop;
        if fwd.tape.shape(input) != [1, d, h, w] {
            return Err(NnError::Shape(format!(
                "input {:?} does not match the configured crop [1, {d}, {h}, {w}]",
                fwd.tape.shape(input)
            )));
        }
        let e0 = self.encoder[0].forward(fwd, input)?;
        let e0 = self.encoder[1].forward(fwd, e0)?;
        let p1 = fwd.tape.maxpool3d(e0, [2; 3], [2; 3])?;
        let e1 = self.encoder[2].forward(fwd, p1)?;
        let p2 = fwd.tape.maxpool3d(e1, [2; 3], [2; 3])?;
        let e2 = self.encoder[3].forward(fwd, p2)?;
        let p3 = fwd.tape.maxpool3d(e2, [2; 3], [2; 3])?;
        let e3 = self.encoder[4].forward(fwd, p3)?;
        let e3 = self.encoder[5].forward(fwd, e3)?;
        Ok([e0, e1, e2, e3])
    }

    /// Raw (pre-softmax) heatmaps `[N, D, H, W]` from the four encoder
    /// scales. Only valid for heatmap-producing localization modes.
    pub fn localization_forward(
        &self,
        fwd: &mut Forward,
        scales: &[TensorId; 4],
    ) -> Result<TensorId, NnError> {
        let dec = self.decoder.as_ref().ok_or_else(|| {
            config_err(format!(
                "localization mode {} has no heatmap decoder",
                self.config.loc_mode.tag()
            ))
        })?;
        let mut x = dec.skips[3].forward(fwd, scales[3])?;
        for (i, rm) in dec.rms.iter().enumerate() {
            let scale = 2 - i; // decoder stage i lands on encoder scale 2-i
            let up = fwd.tape.upsample_nearest3d(x, [2; 3])?;
            let refined = rm.forward(fwd, up)?;
            let skip = dec.skips[scale].forward(fwd, scales[scale])?;
            x = fwd.tape.add(refined, skip)?;
        }
        let y = dec.head_a.forward(fwd, x)?;
        let y = dec.head_norm.forward(fwd, y)?;
        let y = fwd.tape.relu(y);
        Ok(dec.head_b.forward(fwd, y)?)
    }

    /// Class logits `[N]` from the deepest encoder feature.
    pub fn classification_forward(
        &self,
        fwd: &mut Forward,
        deepest: TensorId,
    ) -> Result<TensorId, NnError> {
        let q = self.cls_conv1.forward(fwd, deepest)?;
        let q = self.cls_norm1.forward(fwd, q)?;
        let q = fwd.tape.relu(q);
        let q = self.cls_conv2.forward(fwd, q)?;
        let q = self.cls_norm2.forward(fwd, q)?;
        let q = fwd.tape.relu(q);
        // 2× pool, clamped to the available extent so very deep (small)
        // feature maps stay valid.
        let s = fwd.tape.shape(q);
        let window = [s[1].min(2), s[2].min(2), s[3].min(2)];
        let q = fwd.tape.maxpool3d(q, window, window)?;
        if fwd.tape.shape(q)[1] < 1 {
            return Err(NnError::Shape("no axial extent left after pooling".into()));
        }
        match &self.cls_readout {
            ClsReadout::BiLstm { layers, fc_w, fc_b } => {
                let mut seq = fwd.tape.depth_sequence_mean(q)?;
                for layer in layers {
                    seq = layer.forward(fwd, seq)?;
                }
                let steps = fwd.tape.shape(seq)[0];
                let last = fwd.tape.row(seq, steps - 1)?;
                let w = fwd.param(*fc_w)?;
                let b = fwd.param(*fc_b)?;
                Ok(fwd.tape.linear(last, w, Some(b))?)
            }
            ClsReadout::GlobalPool { fc_w, fc_b } => {
                let g = fwd.tape.global_avg_pool(q)?;
                let w = fwd.param(*fc_w)?;
                let b = fwd.param(*fc_b)?;
                Ok(fwd.tape.linear(g, w, Some(b))?)
            }
        }
    }

    /// Full forward pass on a `[1, D, H, W]` crop.
    pub fn forward(&self, fwd: &mut Forward, input: TensorId) -> Result<ModelOutput, NnError> {
        let scales = self.encoder_forward(fwd, input)?;
        let logits = self.classification_forward(fwd, scales[3])?;
        let probs = fwd.tape.sigmoid(logits);

        let (heatmaps, coords) = match self.config.loc_mode {
            LocMode::Integral => {
                let raw = self.localization_forward(fwd, &scales)?;
                let stack = HeatmapStack::from_logits(&mut fwd.tape, raw)?;
                let [d, h, w] = self.config.crop;
                let grid = CoordinateGrid::shared(d, h, w);
                let coords = integrate_coordinates(&mut fwd.tape, stack.probs, &grid)?;
                (Some(stack), Some(coords))
            }
            LocMode::HeatmapArgmax => {
                let raw = self.localization_forward(fwd, &scales)?;
                let stack = HeatmapStack::from_logits(&mut fwd.tape, raw)?;
                (Some(stack), None)
            }
            LocMode::DirectFc => {
                let head = self.direct.as_ref().expect("direct mode builds its head");
                let g = fwd.tape.global_avg_pool(scales[3])?;
                let w = fwd.param(head.w)?;
                let b = fwd.param(head.b)?;
                let flat = fwd.tape.linear(g, w, Some(b))?;
                let coords = fwd.tape.reshape(flat, vec![self.config.classes, 3])?;
                (None, Some(coords))
            }
        };
        Ok(ModelOutput { logits, probs, heatmaps, coords })
    }
}
