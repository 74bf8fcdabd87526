//! Network-in-network encoders, the siamese transformation-regression head,
//! and the probe classifiers trained on top of frozen features.
//!
//! The encoder is a stack of convolutional blocks; each block is one spatial
//! convolution followed by 1x1 convolutions, every convolution with batch
//! norm and ReLU. Blocks listed in `downsample_after` are followed by 2x2
//! average pooling. The regression head consumes the concatenated pooled
//! features of the two branches, which share one set of parameters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Graph, Mode, NnError, ParamSet, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("bad tap {tap}: encoder has {blocks} blocks")]
    BadTap { tap: usize, blocks: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// Architecture of a network-in-network encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NinConfig {
    pub num_blocks: usize,
    pub convs_per_block: usize,
    /// Output channels per block.
    pub widths: Vec<usize>,
    /// Kernel size of each block's leading convolution; the rest are 1x1.
    pub lead_kernels: Vec<usize>,
    /// 1-based block indices followed by 2x2 average downsampling.
    pub downsample_after: Vec<usize>,
    pub in_channels: usize,
    pub input_size: usize,
}

impl Default for NinConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            convs_per_block: 3,
            widths: vec![192, 192, 192, 192],
            lead_kernels: vec![5, 5, 3, 3],
            downsample_after: vec![1, 2],
            in_channels: 3,
            input_size: 32,
        }
    }
}

impl NinConfig {
    /// A small two-block encoder for desk-scale runs.
    pub fn tiny(in_channels: usize, input_size: usize, widths: [usize; 2]) -> Self {
        Self {
            num_blocks: 2,
            convs_per_block: 3,
            widths: widths.to_vec(),
            lead_kernels: vec![3, 3],
            downsample_after: vec![1],
            in_channels,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_blocks < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "need at least 2 blocks (block 2 is the probe tap), got {}",
                self.num_blocks
            )));
        }
        if self.convs_per_block < 1 {
            return Err(ModelError::InvalidConfig(
                "convs_per_block must be >= 1".into(),
            ));
        }
        if self.widths.len() != self.num_blocks || self.lead_kernels.len() != self.num_blocks {
            return Err(ModelError::InvalidConfig(format!(
                "widths ({}) and lead_kernels ({}) must list one entry per block ({})",
                self.widths.len(),
                self.lead_kernels.len(),
                self.num_blocks
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(ModelError::InvalidConfig(
                "block widths must be positive".into(),
            ));
        }
        if self.lead_kernels.iter().any(|&k| k % 2 == 0) {
            return Err(ModelError::InvalidConfig(
                "lead kernels must be odd so padding preserves the extent".into(),
            ));
        }
        if self.in_channels == 0 || self.input_size == 0 {
            return Err(ModelError::InvalidConfig(
                "input dims must be positive".into(),
            ));
        }
        let mut size = self.input_size;
        for b in 1..=self.num_blocks {
            if self.downsample_after.contains(&b) {
                if size % 2 != 0 {
                    return Err(ModelError::InvalidConfig(format!(
                        "downsampling after block {b} needs an even extent, got {size}"
                    )));
                }
                size /= 2;
            }
        }
        Ok(())
    }

    /// Width of the pooled feature vector of the final block.
    pub fn pooled_width(&self) -> usize {
        *self.widths.last().expect("validated config has blocks")
    }

    /// Spatial extent of the feature map after block `tap` (1-based).
    pub fn extent_after(&self, tap: usize) -> usize {
        let mut size = self.input_size;
        for b in 1..=tap {
            if self.downsample_after.contains(&b) {
                size /= 2;
            }
        }
        size
    }
}

/// One convolution with its batch norm: parameter and buffer slots.
#[derive(Debug, Clone)]
struct ConvBn {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    rm: usize,
    rv: usize,
    kernel: usize,
}

fn build_conv_bn<R: Rng>(
    params: &mut ParamSet,
    rng: &mut R,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    bn_decay: bool,
) -> Result<ConvBn, NnError> {
    let fan_in = in_ch * kernel * kernel;
    let w = params.add_param(
        &format!("{name}.w"),
        Tensor::he_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
    )?;
    let b = params.add_param(&format!("{name}.b"), Tensor::zeros(&[out_ch]))?;
    let gamma = params.add_param_with_decay(
        &format!("{name}.bn.gamma"),
        Tensor::filled(&[out_ch], 1.0),
        bn_decay,
    )?;
    let beta = params.add_param_with_decay(
        &format!("{name}.bn.beta"),
        Tensor::zeros(&[out_ch]),
        bn_decay,
    )?;
    let rm = params.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[out_ch]))?;
    let rv = params.add_buffer(
        &format!("{name}.bn.running_var"),
        Tensor::filled(&[out_ch], 1.0),
    )?;
    Ok(ConvBn {
        w,
        b,
        gamma,
        beta,
        rm,
        rv,
        kernel,
    })
}

fn forward_conv_bn(
    layer: &ConvBn,
    g: &mut Graph,
    params: &mut ParamSet,
    x: Var,
    mode: Mode,
) -> Result<Var, NnError> {
    let w = g.param_var(params, layer.w)?;
    let b = g.param_var(params, layer.b)?;
    let conv = g.conv2d(x, w, b, 1, layer.kernel / 2)?;
    let gamma = g.param_var(params, layer.gamma)?;
    let beta = g.param_var(params, layer.beta)?;
    let (rm, rv) = params.buffer_pair_mut(layer.rm, layer.rv);
    let bn = g.batch_norm(conv, gamma, beta, rm, rv, mode)?;
    g.relu(bn)
}

#[allow(clippy::too_many_arguments)]
fn build_block<R: Rng>(
    params: &mut ParamSet,
    rng: &mut R,
    prefix: &str,
    in_ch: usize,
    width: usize,
    lead_kernel: usize,
    convs: usize,
    bn_decay: bool,
) -> Result<Vec<ConvBn>, NnError> {
    let mut layers = Vec::with_capacity(convs);
    for i in 0..convs {
        let (cin, kernel) = if i == 0 {
            (in_ch, lead_kernel)
        } else {
            (width, 1)
        };
        layers.push(build_conv_bn(
            params,
            rng,
            &format!("{prefix}.conv{i}"),
            cin,
            width,
            kernel,
            bn_decay,
        )?);
    }
    Ok(layers)
}

/// The feature encoder: parameter slots plus the layer plan of a
/// [`NinConfig`].
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: NinConfig,
    blocks: Vec<Vec<ConvBn>>,
}

impl Encoder {
    /// Builds encoder parameters into `params` under `prefix`.
    pub fn build<R: Rng>(
        cfg: &NinConfig,
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        bn_decay: bool,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut in_ch = cfg.in_channels;
        for b in 0..cfg.num_blocks {
            blocks.push(build_block(
                params,
                rng,
                &format!("{prefix}.block{}", b + 1),
                in_ch,
                cfg.widths[b],
                cfg.lead_kernels[b],
                cfg.convs_per_block,
                bn_decay,
            )?);
            in_ch = cfg.widths[b];
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
        })
    }

    pub fn config(&self) -> &NinConfig {
        &self.cfg
    }

    /// Records the forward pass, returning each block's output (after its
    /// downsampling, when configured).
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut ParamSet,
        x: Var,
        mode: Mode,
    ) -> Result<Vec<Var>, ModelError> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut cur = x;
        for (b, block) in self.blocks.iter().enumerate() {
            for layer in block {
                cur = forward_conv_bn(layer, g, params, cur, mode)?;
            }
            if self.cfg.downsample_after.contains(&(b + 1)) {
                cur = g.avg_pool_2x2(cur)?;
            }
            outs.push(cur);
        }
        Ok(outs)
    }
}

/// Feature map (and its global average pool) after one encoder block.
#[derive(Debug, Clone)]
pub struct EncodeOut {
    pub map: Tensor,
    pub pooled: Tensor,
}

/// Runs the encoder on an image batch `[N,C,H,W]` up to block `tap`
/// (1-based) and returns that block's feature map with its pooled vector.
pub fn encode(
    enc: &Encoder,
    params: &mut ParamSet,
    x: &Tensor,
    tap: usize,
    mode: Mode,
) -> Result<EncodeOut, ModelError> {
    if tap == 0 || tap > enc.cfg.num_blocks {
        return Err(ModelError::BadTap {
            tap,
            blocks: enc.cfg.num_blocks,
        });
    }
    let mut g = Graph::new();
    let input = g.leaf(x.clone())?;
    let outs = enc.forward(&mut g, params, input, mode)?;
    let map_var = outs[tap - 1];
    let pooled_var = g.avg_pool_global(map_var)?;
    Ok(EncodeOut {
        map: g.value(map_var).clone(),
        pooled: g.value(pooled_var).clone(),
    })
}

pub const TARGET_WIDTH: usize = 8;

/// The transformation decoder: one linear layer from the concatenated pooled
/// pair features to the 8 regression outputs.
#[derive(Debug, Clone)]
pub struct AetHead {
    w: usize,
    b: usize,
}

impl AetHead {
    pub fn build<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        pooled_width: usize,
    ) -> Result<Self, ModelError> {
        let in_width = 2 * pooled_width;
        let w = params.add_param(
            &format!("{prefix}.w"),
            Tensor::he_uniform(&[TARGET_WIDTH, in_width], in_width, rng),
        )?;
        let b = params.add_param(&format!("{prefix}.b"), Tensor::zeros(&[TARGET_WIDTH]))?;
        Ok(Self { w, b })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut ParamSet,
        zcat: Var,
    ) -> Result<Var, ModelError> {
        let w = g.param_var(params, self.w)?;
        let b = g.param_var(params, self.b)?;
        Ok(g.linear(zcat, w, b)?)
    }
}

/// Records the siamese forward pass: both branches run the same encoder
/// parameters, their pooled final features are concatenated, and the head
/// predicts the 8 transformation parameters.
pub fn aet_forward(
    enc: &Encoder,
    head: &AetHead,
    params: &mut ParamSet,
    g: &mut Graph,
    x: &Tensor,
    tx: &Tensor,
    mode: Mode,
) -> Result<Var, ModelError> {
    if x.shape() != tx.shape() {
        return Err(ModelError::Nn(NnError::ShapeMismatch(format!(
            "original batch {:?} vs transformed batch {:?}",
            x.shape(),
            tx.shape()
        ))));
    }
    let xin = g.leaf(x.clone())?;
    let txin = g.leaf(tx.clone())?;
    let x_outs = enc.forward(g, params, xin, mode)?;
    let tx_outs = enc.forward(g, params, txin, mode)?;
    let zx = g.avg_pool_global(*x_outs.last().expect("validated config has blocks"))?;
    let ztx = g.avg_pool_global(*tx_outs.last().expect("validated config has blocks"))?;
    let zcat = g.concat(zx, ztx, 1)?;
    head.forward(g, params, zcat)
}

/// Encoder, regression head, and their shared parameter set.
#[derive(Debug, Clone)]
pub struct AetModel {
    pub encoder: Encoder,
    pub head: AetHead,
    pub params: ParamSet,
}

impl AetModel {
    /// Deterministic construction from a seed.
    pub fn new(cfg: &NinConfig, seed: u64, bn_decay: bool) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::build(cfg, &mut params, &mut rng, "enc", bn_decay)?;
        let head = AetHead::build(&mut params, &mut rng, "head", cfg.pooled_width())?;
        Ok(Self {
            encoder,
            head,
            params,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        tx: &Tensor,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        aet_forward(&self.encoder, &self.head, &mut self.params, g, x, tx, mode)
    }
}

/// Block index probes are built on.
pub const PROBE_TAP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    /// `Fc(n)`: n fully connected layers; the n-1 hidden layers use batch
    /// norm and ReLU.
    Fc(u8),
    /// One more NIN block, global pooling, and a linear classifier.
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub hidden: usize,
    pub classes: usize,
}

impl ProbeSpec {
    pub fn fc(layers: u8, classes: usize) -> Self {
        Self {
            kind: ProbeKind::Fc(layers),
            hidden: 200,
            classes,
        }
    }

    pub fn conv(classes: usize) -> Self {
        Self {
            kind: ProbeKind::Conv,
            hidden: 200,
            classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if let ProbeKind::Fc(n) = self.kind {
            if !(1..=3).contains(&n) {
                return Err(ModelError::InvalidConfig(format!(
                    "fc probe depth must be 1..=3, got {n}"
                )));
            }
        }
        if self.hidden == 0 || self.classes == 0 {
            return Err(ModelError::InvalidConfig(
                "probe hidden width and class count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn kind_name(&self) -> String {
        match self.kind {
            ProbeKind::Fc(n) => format!("fc_{n}"),
            ProbeKind::Conv => "conv".to_string(),
        }
    }
}

impl std::str::FromStr for ProbeSpec {
    type Err = String;

    /// Parses `fc_1`, `fc_2`, `fc_3`, or `conv`; the class count is filled
    /// in by the caller.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fc_1" => Ok(Self::fc(1, 0)),
            "fc_2" => Ok(Self::fc(2, 0)),
            "fc_3" => Ok(Self::fc(3, 0)),
            "conv" => Ok(Self::conv(0)),
            other => Err(format!(
                "unknown probe kind {other:?} (expected fc_1, fc_2, fc_3, or conv)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
struct FcLayer {
    w: usize,
    b: usize,
    bn: Option<(usize, usize, usize, usize)>, // gamma, beta, rm, rv
}

#[derive(Debug, Clone)]
enum ProbeLayers {
    Fc(Vec<FcLayer>),
    Conv {
        block: Vec<ConvBn>,
        w: usize,
        b: usize,
    },
}

/// A probe classifier head with its own parameter set.
#[derive(Debug, Clone)]
pub struct ProbeHead {
    pub spec: ProbeSpec,
    pub params: ParamSet,
    layers: ProbeLayers,
}

impl ProbeHead {
    /// `feature_shape` is the per-sample feature shape the probe consumes:
    /// `[F]` for fc probes, `[C,H,W]` for the conv probe.
    pub fn new(spec: ProbeSpec, feature_shape: &[usize], seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layers = match spec.kind {
            ProbeKind::Fc(n) => {
                let [in_features] = feature_shape else {
                    return Err(ModelError::InvalidConfig(format!(
                        "fc probe expects flat [F] features, got {feature_shape:?}"
                    )));
                };
                let mut layers = Vec::new();
                let mut cur = *in_features;
                for i in 0..n as usize {
                    let last = i + 1 == n as usize;
                    let out = if last { spec.classes } else { spec.hidden };
                    let w = params.add_param(
                        &format!("probe.fc{i}.w"),
                        Tensor::he_uniform(&[out, cur], cur, &mut rng),
                    )?;
                    let b = params.add_param(&format!("probe.fc{i}.b"), Tensor::zeros(&[out]))?;
                    let bn = if last {
                        None
                    } else {
                        let gamma = params.add_param(
                            &format!("probe.fc{i}.bn.gamma"),
                            Tensor::filled(&[out], 1.0),
                        )?;
                        let beta = params
                            .add_param(&format!("probe.fc{i}.bn.beta"), Tensor::zeros(&[out]))?;
                        let rm = params.add_buffer(
                            &format!("probe.fc{i}.bn.running_mean"),
                            Tensor::zeros(&[out]),
                        )?;
                        let rv = params.add_buffer(
                            &format!("probe.fc{i}.bn.running_var"),
                            Tensor::filled(&[out], 1.0),
                        )?;
                        Some((gamma, beta, rm, rv))
                    };
                    layers.push(FcLayer { w, b, bn });
                    cur = out;
                }
                ProbeLayers::Fc(layers)
            }
            ProbeKind::Conv => {
                let [in_ch, _, _] = feature_shape else {
                    return Err(ModelError::InvalidConfig(format!(
                        "conv probe expects [C,H,W] features, got {feature_shape:?}"
                    )));
                };
                // The extra block keeps the incoming width, kernel 3.
                let block = build_block(
                    &mut params,
                    &mut rng,
                    "probe.block",
                    *in_ch,
                    *in_ch,
                    3,
                    3,
                    true,
                )?;
                let w = params.add_param(
                    "probe.fc.w",
                    Tensor::he_uniform(&[spec.classes, *in_ch], *in_ch, &mut rng),
                )?;
                let b = params.add_param("probe.fc.b", Tensor::zeros(&[spec.classes]))?;
                ProbeLayers::Conv { block, w, b }
            }
        };
        Ok(Self {
            spec,
            params,
            layers,
        })
    }

    /// Records the head forward pass over features already in the graph.
    pub fn forward(&mut self, g: &mut Graph, feat: Var, mode: Mode) -> Result<Var, ModelError> {
        match self.layers.clone() {
            ProbeLayers::Fc(layers) => {
                let mut cur = feat;
                for layer in layers {
                    let w = g.param_var(&self.params, layer.w)?;
                    let b = g.param_var(&self.params, layer.b)?;
                    cur = g.linear(cur, w, b)?;
                    if let Some((gamma, beta, rm, rv)) = layer.bn {
                        let gv = g.param_var(&self.params, gamma)?;
                        let bv = g.param_var(&self.params, beta)?;
                        let (rm_t, rv_t) = self.params.buffer_pair_mut(rm, rv);
                        cur = g.batch_norm(cur, gv, bv, rm_t, rv_t, mode)?;
                        cur = g.relu(cur)?;
                    }
                }
                Ok(cur)
            }
            ProbeLayers::Conv { block, w, b } => {
                let mut cur = feat;
                for layer in &block {
                    cur = forward_conv_bn(layer, g, &mut self.params, cur, mode)?;
                }
                let pooled = g.avg_pool_global(cur)?;
                let wv = g.param_var(&self.params, w)?;
                let bv = g.param_var(&self.params, b)?;
                Ok(g.linear(pooled, wv, bv)?)
            }
        }
    }

    /// Per-sample feature shape this probe expects from an encoder config.
    pub fn feature_shape(spec: &ProbeSpec, cfg: &NinConfig, tap: usize) -> Vec<usize> {
        let extent = cfg.extent_after(tap);
        match spec.kind {
            ProbeKind::Fc(_) => vec![cfg.widths[tap - 1]],
            ProbeKind::Conv => vec![cfg.widths[tap - 1], extent, extent],
        }
    }
}

/// Logits of a probe over a frozen encoder: the encoder runs in eval mode at
/// the probe tap with no gradient bookkeeping, then the head classifies.
pub fn probe_forward(
    enc: &Encoder,
    enc_params: &mut ParamSet,
    head: &mut ProbeHead,
    x: &Tensor,
) -> Result<Tensor, ModelError> {
    let out = encode(enc, enc_params, x, PROBE_TAP, Mode::Eval)?;
    let feat = match head.spec.kind {
        ProbeKind::Fc(_) => out.pooled,
        ProbeKind::Conv => out.map,
    };
    let mut g = Graph::new();
    let fv = g.leaf(feat)?;
    let logits = head.forward(&mut g, fv, Mode::Eval)?;
    Ok(g.value(logits).clone())
}
