//! The DST network: slice-wise 3D conv encoder with stride (2,2,1),
//! sequence preparation ([CLS] + left padding + boolean mask), a stack of
//! depth attention blocks, dual output heads, a FLOP estimator, and
//! checkpoint serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, AttentionParams};
use crate::tensor::{AttentionMask, Tensor};
use crate::volume::Volume;

pub const HU_CLIP_MIN: f64 = -100.0;
pub const HU_CLIP_MAX: f64 = 1500.0;
const LN_EPS: f64 = 1e-5;

/// Side of the token sequence that receives the padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingSide {
    /// Pads before the slices; the last slice keeps a fixed absolute
    /// position regardless of sequence length.
    #[default]
    Left,
    /// Pads after the slices (the ablation arm): [CLS, slice.., pad..].
    Right,
}

/// Placement of the [CLS] token relative to the padding block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClsPosition {
    /// [pad.., CLS, slice..] — keeps the last slice at a fixed absolute
    /// position while the CLS immediately precedes the real sequence.
    #[default]
    AfterPads,
    /// [CLS, pad.., slice..]
    Front,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub conv_kernel_depth: usize,
    pub d_max: usize,
    pub n_landmarks: usize,
    pub n_classes: usize,
    pub dropout: f64,
    #[serde(default)]
    pub cls_position: ClsPosition,
    #[serde(default)]
    pub padding_side: PaddingSide,
    /// When false, the attention sublayer is replaced by a depthwise
    /// conv + pointwise mix (the w/o-attention ablation arm).
    #[serde(default = "default_true")]
    pub attention_enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            encoder_channels: vec![8, 32],
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            conv_kernel_depth: 3,
            d_max: 32,
            n_landmarks: 6,
            n_classes: 3,
            dropout: 0.0,
            cls_position: ClsPosition::AfterPads,
            padding_side: PaddingSide::Left,
            attention_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::Config("encoder_channels must be non-empty".into()));
        }
        if *self.encoder_channels.last().unwrap() != self.d_model {
            return Err(Error::Config(
                "last encoder channel count must equal d_model".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_max < 1 || self.n_landmarks < 1 {
            return Err(Error::Config("d_max and n_landmarks must be >= 1".into()));
        }
        if self.conv_kernel_depth % 2 == 0 {
            return Err(Error::Config("conv_kernel_depth must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Token sequence length including the [CLS] slot.
    pub fn seq_len(&self) -> usize {
        self.d_max + 1
    }
}

pub struct ConvBlockParams {
    pub w: Tensor,
    pub b: Tensor,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
}

/// Sequence mixer of one block: global attention, or its local-conv
/// replacement for the ablation arm.
pub enum Mixer {
    Attention(AttentionParams),
    Conv { dw: Tensor, w: Tensor, b: Tensor },
}

pub struct BlockParams {
    pub dw_conv: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub mixer: Mixer,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

pub struct DstParams {
    pub encoder: Vec<ConvBlockParams>,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub loc_w: Tensor,
    pub loc_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let vals = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(shape, vals)
}

fn ones(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![1.0; shape.iter().product()])
}

fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()])
}

impl DstParams {
    /// Fresh parameters: conv/linear uniform in ±sqrt(1/fan_in),
    /// embeddings uniform in ±0.02, norms at identity.
    pub fn init(cfg: &ModelConfig, seed: u64) -> DstParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.d_model;
        let mut encoder = Vec::new();
        let mut cin = cfg.in_channels;
        for &cout in &cfg.encoder_channels {
            encoder.push(ConvBlockParams {
                w: uniform_fan_in(&mut rng, &[cout, cin, 3, 3, 3], cin * 27),
                b: zeros_param(&[cout]),
                ln_g: ones(&[cout]),
                ln_b: zeros_param(&[cout]),
            });
            cin = cout;
        }
        let emb = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::param(shape, (0..n).map(|_| rng.gen_range(-0.02..0.02)).collect())
        };
        let cls = emb(&mut rng, &[c]);
        let pos = emb(&mut rng, &[cfg.seq_len(), c]);
        let mut blocks = Vec::new();
        for _ in 0..cfg.n_layers {
            let mixer = if cfg.attention_enabled {
                Mixer::Attention(AttentionParams {
                    wq: uniform_fan_in(&mut rng, &[c, c], c),
                    bq: zeros_param(&[c]),
                    wk: uniform_fan_in(&mut rng, &[c, c], c),
                    bk: zeros_param(&[c]),
                    wv: uniform_fan_in(&mut rng, &[c, c], c),
                    bv: zeros_param(&[c]),
                    wo: uniform_fan_in(&mut rng, &[c, c], c),
                    bo: zeros_param(&[c]),
                })
            } else {
                Mixer::Conv {
                    dw: uniform_fan_in(&mut rng, &[c, cfg.conv_kernel_depth], cfg.conv_kernel_depth),
                    w: uniform_fan_in(&mut rng, &[c, c], c),
                    b: zeros_param(&[c]),
                }
            };
            blocks.push(BlockParams {
                dw_conv: uniform_fan_in(&mut rng, &[c, cfg.conv_kernel_depth], cfg.conv_kernel_depth),
                ln1_g: ones(&[c]),
                ln1_b: zeros_param(&[c]),
                mixer,
                ln2_g: ones(&[c]),
                ln2_b: zeros_param(&[c]),
                mlp_w1: uniform_fan_in(&mut rng, &[4 * c, c], c),
                mlp_b1: zeros_param(&[4 * c]),
                mlp_w2: uniform_fan_in(&mut rng, &[c, 4 * c], 4 * c),
                mlp_b2: zeros_param(&[c]),
            });
        }
        DstParams {
            encoder,
            cls,
            pos,
            blocks,
            loc_w: uniform_fan_in(&mut rng, &[cfg.n_landmarks, c], c),
            loc_b: zeros_param(&[cfg.n_landmarks]),
            cls_w: uniform_fan_in(&mut rng, &[cfg.n_classes, c], c),
            cls_b: zeros_param(&[cfg.n_classes]),
        }
    }

    /// Deterministically ordered (name, tensor) pairs.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.w"), b.w.clone()));
            out.push((format!("encoder.{i}.b"), b.b.clone()));
            out.push((format!("encoder.{i}.ln_g"), b.ln_g.clone()));
            out.push((format!("encoder.{i}.ln_b"), b.ln_b.clone()));
        }
        out.push(("cls".into(), self.cls.clone()));
        out.push(("pos".into(), self.pos.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.dw_conv"), b.dw_conv.clone()));
            out.push((format!("blocks.{i}.ln1_g"), b.ln1_g.clone()));
            out.push((format!("blocks.{i}.ln1_b"), b.ln1_b.clone()));
            match &b.mixer {
                Mixer::Attention(a) => {
                    out.push((format!("blocks.{i}.attn.wq"), a.wq.clone()));
                    out.push((format!("blocks.{i}.attn.bq"), a.bq.clone()));
                    out.push((format!("blocks.{i}.attn.wk"), a.wk.clone()));
                    out.push((format!("blocks.{i}.attn.bk"), a.bk.clone()));
                    out.push((format!("blocks.{i}.attn.wv"), a.wv.clone()));
                    out.push((format!("blocks.{i}.attn.bv"), a.bv.clone()));
                    out.push((format!("blocks.{i}.attn.wo"), a.wo.clone()));
                    out.push((format!("blocks.{i}.attn.bo"), a.bo.clone()));
                }
                Mixer::Conv { dw, w, b: bias } => {
                    out.push((format!("blocks.{i}.conv.dw"), dw.clone()));
                    out.push((format!("blocks.{i}.conv.w"), w.clone()));
                    out.push((format!("blocks.{i}.conv.b"), bias.clone()));
                }
            }
            out.push((format!("blocks.{i}.ln2_g"), b.ln2_g.clone()));
            out.push((format!("blocks.{i}.ln2_b"), b.ln2_b.clone()));
            out.push((format!("blocks.{i}.mlp_w1"), b.mlp_w1.clone()));
            out.push((format!("blocks.{i}.mlp_b1"), b.mlp_b1.clone()));
            out.push((format!("blocks.{i}.mlp_w2"), b.mlp_w2.clone()));
            out.push((format!("blocks.{i}.mlp_b2"), b.mlp_b2.clone()));
        }
        out.push(("loc_w".into(), self.loc_w.clone()));
        out.push(("loc_b".into(), self.loc_b.clone()));
        out.push(("cls_w".into(), self.cls_w.clone()));
        out.push(("cls_b".into(), self.cls_b.clone()));
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }
}

/// Tokens plus validity mask produced by sequence preparation.
pub struct PreparedSequence {
    pub tokens: Tensor,
    pub mask: AttentionMask,
    pub cls_index: usize,
    pub first_valid: usize,
    pub d_valid: usize,
}

pub struct ModelOutput {
    /// [B, D_valid, N] slice-token logits per landmark channel.
    pub landmark_logits: Tensor,
    /// [B][N][D_valid] probabilities over valid slices, each row summing
    /// to 1 with zero mass on padding.
    pub landmark_probs: Vec<Vec<Vec<f64>>>,
    /// [B, n_classes] from the [CLS] embedding.
    pub cls_logits: Tensor,
    /// [B, N, L] full-sequence logits used by the localization loss.
    pub loc_logits_full: Tensor,
    /// Token validity over slice positions only (CLS excluded), length L.
    pub slice_valid: Vec<bool>,
    pub first_valid: usize,
    pub d_valid: usize,
}

pub struct DstModel {
    pub cfg: ModelConfig,
    pub params: DstParams,
}

impl DstModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<DstModel> {
        cfg.validate()?;
        let params = DstParams::init(&cfg, seed);
        Ok(DstModel { cfg, params })
    }

    /// HU volume batch -> input tensor [B,1,H,W,D], clipped to
    /// [-100, 1500] HU and scaled to [0,1].
    pub fn volumes_to_input(volumes: &[&Volume]) -> Result<Tensor> {
        let dims = volumes
            .first()
            .ok_or_else(|| Error::Argument("empty volume batch".into()))?
            .dims;
        let (h, w, d) = dims;
        let mut vals = Vec::with_capacity(volumes.len() * h * w * d);
        for v in volumes {
            if v.dims != dims {
                return Err(Error::Shape("batch volumes must share dims".into()));
            }
            // volume storage is x-fastest; tensor layout is [H,W,D] row-major
            for x in 0..h {
                for y in 0..w {
                    for z in 0..d {
                        let hu = v.get(x, y, z) as f64;
                        let clipped = hu.clamp(HU_CLIP_MIN, HU_CLIP_MAX);
                        vals.push((clipped - HU_CLIP_MIN) / (HU_CLIP_MAX - HU_CLIP_MIN));
                    }
                }
            }
        }
        Ok(Tensor::constant(&[volumes.len(), 1, h, w, d], vals))
    }

    /// Conv blocks with stride (2,2,1) then in-plane mean pooling.
    /// Output [B, d_model, D]; depth length is preserved for every D >= 1.
    pub fn encode_slices(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape().to_vec();
        if xs.len() != 5 {
            return Err(Error::Shape("encoder expects [B,C,H,W,D]".into()));
        }
        let (h, w) = (xs[2], xs[3]);
        let div = 1usize << self.cfg.encoder_channels.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "indivisible spatial dims: {h}x{w} with {} encoder blocks",
                self.cfg.encoder_channels.len()
            )));
        }
        let mut cur = x.clone();
        for block in &self.params.encoder {
            let conv = ops::conv3d(&cur, &block.w, &block.b, (2, 2, 1), (1, 1, 1))?;
            // channels-last for the norm, then back
            let nhwdc = ops::permute(&conv, &[0, 2, 3, 4, 1]);
            let normed = ops::layer_norm(&nhwdc, &block.ln_g, &block.ln_b, LN_EPS);
            let act = ops::gelu(&normed);
            cur = ops::permute(&act, &[0, 4, 1, 2, 3]);
        }
        Ok(ops::mean_pool_hw(&cur))
    }

    /// Left-pads to d_max, inserts the [CLS] token, adds positional
    /// embeddings after placement, and builds the boolean mask.
    pub fn prepare_sequence(&self, features: &Tensor) -> Result<PreparedSequence> {
        let fs = features.shape().to_vec();
        if fs.len() != 3 || fs[1] != self.cfg.d_model {
            return Err(Error::Shape("prepare_sequence expects [B,d_model,D]".into()));
        }
        let (b, c, d) = (fs[0], fs[1], fs[2]);
        if d > self.cfg.d_max {
            return Err(Error::Argument(format!(
                "sequence length {d} exceeds d_max {}",
                self.cfg.d_max
            )));
        }
        let pad = self.cfg.d_max - d;
        let l = self.cfg.seq_len();
        let slices = ops::permute(features, &[0, 2, 1]); // [B,D,C]
        let cls_tok = ops::broadcast_leading(&ops::reshape(&self.params.cls, &[1, c]), b);
        let mut parts = Vec::new();
        let (cls_index, first_valid) = match (self.cfg.padding_side, self.cfg.cls_position) {
            (PaddingSide::Right, _) => {
                parts.push(cls_tok);
                parts.push(slices);
                if pad > 0 {
                    parts.push(Tensor::zeros(&[b, pad, c]));
                }
                (0, 1)
            }
            (PaddingSide::Left, ClsPosition::AfterPads) => {
                if pad > 0 {
                    parts.push(Tensor::zeros(&[b, pad, c]));
                }
                parts.push(cls_tok);
                parts.push(slices);
                (pad, pad + 1)
            }
            (PaddingSide::Left, ClsPosition::Front) => {
                parts.push(cls_tok);
                if pad > 0 {
                    parts.push(Tensor::zeros(&[b, pad, c]));
                }
                parts.push(slices);
                (0, pad + 1)
            }
        };
        let placed = ops::concat(1, &parts);
        let pos = ops::broadcast_leading(&self.params.pos, b);
        let tokens = ops::add(&placed, &pos);
        let mut mask = AttentionMask {
            valid: vec![vec![false; l]; b],
        };
        for row in mask.valid.iter_mut() {
            row[cls_index] = true;
            for t in first_valid..first_valid + d {
                row[t] = true;
            }
        }
        Ok(PreparedSequence {
            tokens,
            mask,
            cls_index,
            first_valid,
            d_valid: d,
        })
    }

    fn dropout(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Tensor {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 - p;
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                ops::mul(x, &Tensor::constant(x.shape(), mask))
            }
            _ => x.clone(),
        }
    }

    /// One residual block: depthwise conv over the token axis (padded
    /// positions zeroed before and after), pre-norm sequence mixing, and
    /// a pre-norm 2-layer MLP with expansion 4.
    pub fn depth_attention_block(
        &self,
        seq: &PreparedSequence,
        block: &BlockParams,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<PreparedSequence> {
        let sh = seq.tokens.shape().to_vec();
        let (b, l, c) = (sh[0], sh[1], sh[2]);
        let valid_f: Vec<f64> = (0..b * l * c)
            .map(|i| {
                let bi = i / (l * c);
                let t = (i / c) % l;
                if seq.mask.valid[bi][t] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let valid_t = Tensor::constant(&[b, l, c], valid_f);

        // (i) depthwise conv over tokens
        let masked = ops::mul(&seq.tokens, &valid_t);
        let as_cl = ops::permute(&masked, &[0, 2, 1]); // [B,C,L]
        let conv = ops::conv1d_depthwise(&as_cl, &block.dw_conv)?;
        let conv_tokens = ops::mul(&ops::permute(&conv, &[0, 2, 1]), &valid_t);
        let x = ops::add(&seq.tokens, &conv_tokens);

        // (ii) pre-norm sequence mixing
        let normed1 = ops::layer_norm(&x, &block.ln1_g, &block.ln1_b, LN_EPS);
        let mixed = match &block.mixer {
            Mixer::Attention(p) => {
                ops::multihead_attention(&normed1, &seq.mask, self.cfg.n_heads, p)?
            }
            Mixer::Conv { dw, w, b: bias } => {
                let zeroed = ops::mul(&normed1, &valid_t);
                let cl = ops::permute(&zeroed, &[0, 2, 1]);
                let dwc = ops::conv1d_depthwise(&cl, dw)?;
                let back = ops::permute(&dwc, &[0, 2, 1]);
                let mixed = ops::linear(&ops::gelu(&back), w, bias);
                ops::mul(&mixed, &valid_t)
            }
        };
        let mixed = self.dropout(&mixed, rng.as_mut().map(|r| &mut **r));
        let x = ops::add(&x, &mixed);

        // (iii) pre-norm MLP
        let normed2 = ops::layer_norm(&x, &block.ln2_g, &block.ln2_b, LN_EPS);
        let h = ops::gelu(&ops::linear(&normed2, &block.mlp_w1, &block.mlp_b1));
        let mlp = ops::linear(&h, &block.mlp_w2, &block.mlp_b2);
        let mlp = self.dropout(&mlp, rng);
        let x = ops::add(&x, &mlp);

        Ok(PreparedSequence {
            tokens: x,
            mask: seq.mask.clone(),
            cls_index: seq.cls_index,
            first_valid: seq.first_valid,
            d_valid: seq.d_valid,
        })
    }

    pub fn forward(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<ModelOutput> {
        let features = self.encode_slices(x)?;
        let mut seq = self.prepare_sequence(&features)?;
        for block in &self.params.blocks {
            seq = self.depth_attention_block(&seq, block, rng.as_mut().map(|r| &mut **r))?;
        }
        let sh = seq.tokens.shape().to_vec();
        let (b, l, _c) = (sh[0], sh[1], sh[2]);
        let n = self.cfg.n_landmarks;

        // localization head: shared linear at every token, softmax along
        // depth per landmark channel over valid slice positions
        let logits_bln = ops::linear(&seq.tokens, &self.params.loc_w, &self.params.loc_b);
        let logits_bnl = ops::permute(&logits_bln, &[0, 2, 1]); // [B,N,L]
        let mut slice_valid_row = vec![false; l];
        for (t, s) in slice_valid_row.iter_mut().enumerate() {
            *s = t >= seq.first_valid && t < seq.first_valid + seq.d_valid;
        }
        let mut slice_valid = vec![false; b * n * l];
        for bi in 0..b {
            for j in 0..n {
                let o = (bi * n + j) * l;
                slice_valid[o..o + l].copy_from_slice(&slice_valid_row);
            }
        }
        let probs_bnl = ops::masked_softmax(&logits_bnl, &slice_valid)?;
        let d = seq.d_valid;
        let probs_vals = probs_bnl.values();
        let mut landmark_probs = vec![vec![vec![0.0; d]; n]; b];
        for bi in 0..b {
            for j in 0..n {
                for t in 0..d {
                    landmark_probs[bi][j][t] = probs_vals[(bi * n + j) * l + seq.first_valid + t];
                }
            }
        }
        let landmark_logits = ops::permute(&ops::narrow(&logits_bnl, 2, seq.first_valid, d), &[0, 2, 1]);

        // classification head on the [CLS] embedding
        let cls_tok = ops::reshape(
            &ops::narrow(&seq.tokens, 1, seq.cls_index, 1),
            &[b, self.cfg.d_model],
        );
        let cls_logits = ops::linear(&cls_tok, &self.params.cls_w, &self.params.cls_b);

        Ok(ModelOutput {
            landmark_logits,
            landmark_probs,
            cls_logits,
            loc_logits_full: logits_bnl,
            slice_valid,
            first_valid: seq.first_valid,
            d_valid: d,
        })
    }
}

// ---------------------------------------------------------------- FLOPs

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub encoder_flops: f64,
    pub attention_flops: f64,
    pub head_flops: f64,
    pub other_flops: f64,
    pub total: f64,
}

/// Multiply-accumulates counted x2. The attention term carries the L^2
/// scaling (scores + context); projections, MLPs and depthwise convs are
/// reported under `other_flops`.
pub fn estimate_flops(cfg: &ModelConfig, dims: (usize, usize, usize)) -> FlopBreakdown {
    let (mut h, mut w, d) = dims;
    let mut cin = cfg.in_channels;
    let mut encoder = 0.0;
    for &cout in &cfg.encoder_channels {
        let (oh, ow, od) = (h.div_ceil(2), w.div_ceil(2), d);
        encoder += 2.0 * (oh * ow * od * cout * cin * 27) as f64;
        h = oh;
        w = ow;
        cin = cout;
    }
    let l = cfg.seq_len() as f64;
    let c = cfg.d_model as f64;
    let layers = cfg.n_layers as f64;
    let attention = if cfg.attention_enabled {
        layers * (2.0 * l * l * c + 2.0 * l * l * c)
    } else {
        0.0
    };
    let proj = if cfg.attention_enabled {
        layers * 4.0 * 2.0 * l * c * c
    } else {
        layers * (2.0 * l * c * cfg.conv_kernel_depth as f64 + 2.0 * l * c * c)
    };
    let dwconv = layers * 2.0 * l * c * cfg.conv_kernel_depth as f64;
    let mlp = layers * 2.0 * 2.0 * l * c * 4.0 * c;
    let other = proj + dwconv + mlp;
    let heads = 2.0 * l * c * cfg.n_landmarks as f64 + 2.0 * c * cfg.n_classes as f64;
    FlopBreakdown {
        encoder_flops: encoder,
        attention_flops: attention,
        head_flops: heads,
        other_flops: other,
        total: encoder + attention + heads + other,
    }
}

// ---------------------------------------------------------------- checkpoint

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    config: ModelConfig,
    seed: u64,
    epoch: usize,
    val_metric: f64,
    tensors: Vec<TensorEntry>,
}

const CKPT_MAGIC: &str = "DSTCKPT";

/// Model state plus the training provenance needed to reproduce it.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub val_metric: f64,
    pub model: DstModel,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let named = ckpt.model.params.named();
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &named {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 8;
    }
    let manifest = Manifest {
        magic: CKPT_MAGIC.to_string(),
        version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        seed: ckpt.seed,
        epoch: ckpt.epoch,
        val_metric: ckpt.val_metric,
        tensors: entries,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for (_, t) in &named {
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&line)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: {}",
            manifest.version
        )));
    }
    manifest.config.validate()?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let model = DstModel::new(manifest.config.clone(), manifest.seed)?;
    let named = model.params.named();
    if named.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint("tensor count mismatch".into()));
    }
    let total: usize = manifest.tensors.len();
    for (i, (name, t)) in named.iter().enumerate() {
        let entry = &manifest.tensors[i];
        if &entry.name != name {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor {} (wanted {})",
                entry.name, name
            )));
        }
        if entry.shape != t.shape() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {} has shape {:?}, expected {:?}",
                name,
                entry.shape,
                t.shape()
            )));
        }
        let n = t.len();
        let end = entry.offset + n * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint("corrupt checkpoint: payload too short".into()));
        }
        let vals: Vec<f64> = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        t.set_values(&vals);
        if i + 1 == total && end != payload.len() {
            return Err(Error::Checkpoint("corrupt checkpoint: trailing bytes".into()));
        }
    }
    Ok(Checkpoint {
        config: manifest.config,
        seed: manifest.seed,
        epoch: manifest.epoch,
        val_metric: manifest.val_metric,
        model,
    })
}
