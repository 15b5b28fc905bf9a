//! Small diffusion-transformer denoiser over assembled latent tokens.
//!
//! Video tokens come from the channel-concatenated condition assembly,
//! reference tokens (when enabled) from the encoded reference image. Each
//! block runs the gated attention and a per-token MLP, both residual and
//! both modulated by a timestep embedding. Reference-token outputs are
//! dropped at the head; the output projection predicts the velocity of
//! the noisy video latent.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::attention::{
    gated_block_attention_on_tape, AttentionConfig, AttentionVars, GateVars, HeadRotations,
};
use crate::error::{Error, Result};
use crate::hcu::{
    assemble_latent, encode_stub, layout_from_mask, make_reference_video, pool_mask, ref_in_bbox,
    ChannelManifest, ConditionMode, LatentVideo, MaskVideo, VideoTensor,
};
use crate::mask::TokenLayout;
use crate::rng::Key;
use crate::rope::{build_freqs, build_head_rotations, RopeMode};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

/// LayerNorm epsilon inside transformer blocks.
pub const BLOCK_LN_EPS: f64 = 1e-5;
/// Timestep values are embedded on a 0..1000 scale.
pub const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentExtents {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentExtents {
    pub fn cells(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }
}

/// How reference-object information enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefInjection {
    /// No reference image anywhere; the first frame is the only identity cue.
    None,
    /// Reference pasted into the mask bounding box of the condition video.
    PasteBbox,
    /// Reference encoded as extra attention tokens.
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_head: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub rope_mode: RopeMode,
    pub hard_mask_enabled: bool,
    pub gate_enabled: bool,
    pub ref_injection: RefInjection,
    pub condition_mode: ConditionMode,
    pub latent: LatentExtents,
    pub codec_stride: usize,
    pub rope_base: f64,
    pub hoi_threshold: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// CPU-trainable defaults: 4 blocks of width 64 on an 8x8x8 latent
    /// grid (16x16 pixels at stride 2).
    pub fn toy_default() -> Self {
        ModelConfig {
            n_blocks: 4,
            d_model: 64,
            n_head: 4,
            head_dim: 16,
            mlp_ratio: 4,
            rope_mode: RopeMode::HeadSliding { n_head: 4 },
            hard_mask_enabled: true,
            gate_enabled: true,
            ref_injection: RefInjection::Tokens,
            condition_mode: ConditionMode::FirstFrame,
            latent: LatentExtents {
                frames: 8,
                height: 8,
                width: 8,
            },
            codec_stride: 2,
            rope_base: 10000.0,
            hoi_threshold: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_head * self.head_dim {
            return Err(Error::invalid(
                "model_config",
                format!(
                    "d_model {} != n_head {} * head_dim {}",
                    self.d_model, self.n_head, self.head_dim
                ),
            ));
        }
        if self.n_blocks == 0 || self.mlp_ratio == 0 || self.codec_stride == 0 {
            return Err(Error::invalid("model_config", "counts must be >= 1"));
        }
        if let RopeMode::HeadSliding { n_head } = self.rope_mode {
            if n_head != self.n_head {
                return Err(Error::invalid(
                    "model_config",
                    format!("head-sliding over {} heads but model has {}", n_head, self.n_head),
                ));
            }
        }
        build_freqs(self.head_dim, self.rope_base)?;
        Ok(())
    }

    /// Channels of the noisy latent (and of the reference-video latent).
    pub fn c_noise(&self) -> usize {
        3 * self.codec_stride * self.codec_stride
    }

    /// Channels of the assembled input.
    pub fn c_assembly(&self) -> usize {
        2 * self.c_noise() + 1
    }

    pub fn channel_manifest(&self) -> ChannelManifest {
        ChannelManifest::new(self.c_noise(), self.c_noise())
    }

    pub fn uses_ref_tokens(&self) -> bool {
        self.ref_injection == RefInjection::Tokens
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            n_head: self.n_head,
            head_dim: self.head_dim,
            rope_mode: self.rope_mode,
            hard_mask_enabled: self.hard_mask_enabled,
            gate_enabled: self.gate_enabled,
        }
    }
}

/// Ordered name -> tensor map; iteration order is insertion order, fixed
/// across runs.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        debug_assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast::<U>());
        }
        out
    }
}

/// The denoiser: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct ToyDiTModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn init_weight<T: Scalar>(key: Key, name: &str, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    Tensor::randn(vec![rows, cols], std, key.stream(name))
}

impl<T: Scalar> ToyDiTModel<T> {
    /// Deterministic initialization keyed by (seed, parameter name), so
    /// two configs sharing a parameter start it with identical values.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let key = Key::new(config.seed).stream("init");
        let d = config.d_model;
        let mut p = ParamStore::new();

        let c_in = config.c_assembly();
        p.insert("input_proj.w", init_weight(key, "input_proj.w", c_in, d, 1.0 / (c_in as f64).sqrt()));
        p.insert("input_proj.b", Tensor::zeros(vec![d]));
        if config.uses_ref_tokens() {
            let c_ref = config.c_noise();
            p.insert("ref_proj.w", init_weight(key, "ref_proj.w", c_ref, d, 1.0 / (c_ref as f64).sqrt()));
            p.insert("ref_proj.b", Tensor::zeros(vec![d]));
        }
        let dstd = 1.0 / (d as f64).sqrt();
        p.insert("time.mlp1.w", init_weight(key, "time.mlp1.w", d, d, dstd));
        p.insert("time.mlp1.b", Tensor::zeros(vec![d]));
        p.insert("time.mlp2.w", init_weight(key, "time.mlp2.w", d, d, dstd));
        p.insert("time.mlp2.b", Tensor::zeros(vec![d]));

        for i in 0..config.n_blocks {
            let b = |s: &str| format!("block{i}.{s}");
            // timestep modulation starts at identity (zero scale/shift)
            p.insert(&b("mod.w"), Tensor::zeros(vec![d, 4 * d]));
            p.insert(&b("mod.b"), Tensor::zeros(vec![4 * d]));
            p.insert(&b("ln1.gamma"), Tensor::full(vec![d], T::ONE));
            p.insert(&b("ln1.beta"), Tensor::zeros(vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                let name = b(&format!("attn.{w}"));
                p.insert(&name, init_weight(key, &name, d, d, dstd));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                p.insert(&b(&format!("attn.{bias}")), Tensor::zeros(vec![d]));
            }
            if config.gate_enabled {
                p.insert(&b("attn.gate.ln_gamma"), Tensor::full(vec![d], T::ONE));
                p.insert(&b("attn.gate.ln_beta"), Tensor::zeros(vec![d]));
                p.insert(&b("attn.gate.fcn_weight"), Tensor::zeros(vec![d, 1]));
                p.insert(&b("attn.gate.fcn_bias"), Tensor::full(vec![1], T::from_f64(2.0)));
            }
            p.insert(&b("ln2.gamma"), Tensor::full(vec![d], T::ONE));
            p.insert(&b("ln2.beta"), Tensor::zeros(vec![d]));
            let hidden = config.mlp_ratio * d;
            let w1 = b("mlp.w1");
            p.insert(&w1, init_weight(key, &w1, d, hidden, dstd));
            p.insert(&b("mlp.b1"), Tensor::zeros(vec![hidden]));
            let w2 = b("mlp.w2");
            p.insert(&w2, init_weight(key, &w2, hidden, d, 1.0 / (hidden as f64).sqrt()));
            p.insert(&b("mlp.b2"), Tensor::zeros(vec![d]));
        }

        p.insert("final.ln.gamma", Tensor::full(vec![d], T::ONE));
        p.insert("final.ln.beta", Tensor::zeros(vec![d]));
        // zero-init head: the untrained model predicts zero velocity
        p.insert("final.proj.w", Tensor::zeros(vec![d, config.c_noise()]));
        p.insert("final.proj.b", Tensor::zeros(vec![config.c_noise()]));

        Ok(ToyDiTModel { config, params: p })
    }

    pub fn cast<U: Scalar>(&self) -> ToyDiTModel<U> {
        ToyDiTModel {
            config: self.config.clone(),
            params: self.params.cast::<U>(),
        }
    }

    /// Register every parameter on a tape; returns name -> node handles.
    pub fn register_params(&self, tape: &mut Tape<T>) -> HashMap<String, VarId> {
        let mut vars = HashMap::new();
        for (name, tensor) in self.params.iter() {
            vars.insert(name.to_string(), tape.param(name, tensor));
        }
        vars
    }

    /// Rotation tables for the current latent grid and reference grid.
    pub fn head_rotations(&self, ref_grid: Option<(usize, usize)>) -> Result<HeadRotations<T>> {
        let freqs = build_freqs(self.config.head_dim, self.config.rope_base)?;
        build_head_rotations::<T>(
            &freqs,
            self.config.latent.as_tuple(),
            ref_grid,
            self.config.rope_mode,
            self.config.n_head,
        )
    }

    /// Forward pass on an existing tape. `assembly_tokens` is
    /// [n_video, c_assembly]; `ref_tokens` is [n_ref, c_noise] when the
    /// model uses reference tokens. Returns [n_video, c_noise].
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &HashMap<String, VarId>,
        assembly_tokens: VarId,
        ref_tokens: Option<VarId>,
        layout: &TokenLayout,
        rotations: &HeadRotations<T>,
        t: f64,
        mut capture: Option<(usize, &mut Vec<Tensor<T>>)>,
    ) -> Result<VarId> {
        let cfg = &self.config;
        let v = |name: &str| -> VarId { vars[name] };
        let n_video = layout.n_video();
        if n_video != cfg.latent.cells() {
            return Err(Error::invalid(
                "forward",
                format!("{} video tokens but latent grid has {} cells", n_video, cfg.latent.cells()),
            ));
        }

        let x_video = tape.linear(assembly_tokens, v("input_proj.w"), v("input_proj.b"))?;
        let mut x = match ref_tokens {
            Some(r) => {
                if !cfg.uses_ref_tokens() {
                    return Err(Error::invalid("forward", "this config takes no reference tokens"));
                }
                let r_emb = tape.linear(r, v("ref_proj.w"), v("ref_proj.b"))?;
                tape.concat_rows(&[x_video, r_emb])?
            }
            None => {
                if cfg.uses_ref_tokens() {
                    return Err(Error::invalid("forward", "reference tokens required"));
                }
                x_video
            }
        };

        let t_in = tape.input(&timestep_embedding::<T>(t, cfg.d_model));
        let t_h = tape.linear(t_in, v("time.mlp1.w"), v("time.mlp1.b"))?;
        let t_h = tape.silu(t_h);
        let t_emb = tape.linear(t_h, v("time.mlp2.w"), v("time.mlp2.b"))?;

        let eps = T::from_f64(BLOCK_LN_EPS);
        let attn_cfg = cfg.attention_config();
        let d = cfg.d_model;
        for i in 0..cfg.n_blocks {
            let b = |s: &str| format!("block{i}.{s}");
            let modv = tape.linear(t_emb, v(&b("mod.w")), v(&b("mod.b")))?;
            let sc1 = tape.slice_cols(modv, 0, d)?;
            let sh1 = tape.slice_cols(modv, d, d)?;
            let sc2 = tape.slice_cols(modv, 2 * d, d)?;
            let sh2 = tape.slice_cols(modv, 3 * d, d)?;

            let h = tape.layer_norm(x, v(&b("ln1.gamma")), v(&b("ln1.beta")), eps)?;
            let h = tape.modulate(h, sc1, sh1)?;
            let attn_vars = AttentionVars {
                wq: v(&b("attn.wq")),
                bq: v(&b("attn.bq")),
                wk: v(&b("attn.wk")),
                bk: v(&b("attn.bk")),
                wv: v(&b("attn.wv")),
                bv: v(&b("attn.bv")),
                wo: v(&b("attn.wo")),
                bo: v(&b("attn.bo")),
                gate: cfg.gate_enabled.then(|| GateVars {
                    ln_gamma: v(&b("attn.gate.ln_gamma")),
                    ln_beta: v(&b("attn.gate.ln_beta")),
                    fcn_weight: v(&b("attn.gate.fcn_weight")),
                    fcn_bias: v(&b("attn.gate.fcn_bias")),
                }),
            };
            let block_capture = match &mut capture {
                Some((want, sink)) if *want == i => Some(&mut **sink),
                _ => None,
            };
            let attn = gated_block_attention_on_tape(
                tape,
                h,
                layout,
                &attn_cfg,
                &attn_vars,
                rotations,
                block_capture,
            )?;
            x = tape.add(x, attn)?;

            let h2 = tape.layer_norm(x, v(&b("ln2.gamma")), v(&b("ln2.beta")), eps)?;
            let h2 = tape.modulate(h2, sc2, sh2)?;
            let m = tape.linear(h2, v(&b("mlp.w1")), v(&b("mlp.b1")))?;
            let m = tape.silu(m);
            let m = tape.linear(m, v(&b("mlp.w2")), v(&b("mlp.b2")))?;
            x = tape.add(x, m)?;
        }

        let video_rows = if layout.n_ref() > 0 {
            tape.slice_rows(x, 0, n_video)?
        } else {
            x
        };
        let out = tape.layer_norm(video_rows, v("final.ln.gamma"), v("final.ln.beta"), eps)?;
        tape.linear(out, v("final.proj.w"), v("final.proj.b"))
    }

    /// Forward evaluation without keeping gradients: same code path as the
    /// traced forward (it is the traced forward, on a throwaway tape).
    pub fn forward(
        &self,
        assembly: &crate::hcu::LatentAssembly<T>,
        ref_latent: Option<&LatentVideo<T>>,
        layout: &TokenLayout,
        rotations: &HeadRotations<T>,
        t: f64,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register_params(&mut tape);
        let a = tape.input(&assembly.tokens_2d());
        let r = ref_latent.map(|l| tape.input(&l.tokens_2d()));
        let out = self.forward_on_tape(&mut tape, &vars, a, r, layout, rotations, t, None)?;
        Ok(tape.value(out))
    }

    /// Per-component parameter counts and the conditioning overhead share.
    pub fn param_report(&self) -> ParamReport {
        let mut components: Vec<(String, usize)> = Vec::new();
        let mut add = |bucket: &str, n: usize| {
            if let Some(e) = components.iter_mut().find(|(b, _)| b == bucket) {
                e.1 += n;
            } else {
                components.push((bucket.to_string(), n));
            }
        };
        let mut gate_params = 0usize;
        let mut ref_proj_params = 0usize;
        for (name, t) in self.params.iter() {
            let n = t.len();
            let bucket = if name.starts_with("input_proj") {
                "input_proj"
            } else if name.starts_with("ref_proj") {
                ref_proj_params += n;
                "ref_proj"
            } else if name.starts_with("time.") {
                "time_mlp"
            } else if name.contains(".attn.gate.") {
                gate_params += n;
                "blocks.gate"
            } else if name.contains(".attn.") {
                "blocks.attention"
            } else if name.contains(".mod.") {
                "blocks.modulation"
            } else if name.contains(".mlp.") {
                "blocks.mlp"
            } else if name.contains(".ln") {
                "blocks.norms"
            } else {
                "head"
            };
            add(bucket, n);
        }
        let total = self.params.total_values();
        ParamReport {
            components,
            total,
            gate_params,
            ref_proj_params,
            gate_params_per_block: if self.config.gate_enabled {
                3 * self.config.d_model + 1
            } else {
                0
            },
            n_blocks: self.config.n_blocks,
            overhead_fraction: (gate_params + ref_proj_params) as f64 / total as f64,
        }
    }
}

/// Sinusoidal embedding of the timestep on the 0..1000 scale.
pub fn timestep_embedding<T: Scalar>(t: f64, dim: usize) -> Tensor<T> {
    let tau = t * TIME_SCALE;
    let half = dim / 2;
    let mut data = vec![T::ZERO; dim];
    for i in 0..half {
        let omega = (10000.0f64).powf(-(i as f64) / half as f64);
        data[2 * i] = T::from_f64((tau * omega).sin());
        data[2 * i + 1] = T::from_f64((tau * omega).cos());
    }
    Tensor::from_vec_unchecked(vec![1, dim], data)
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub components: Vec<(String, usize)>,
    pub total: usize,
    pub gate_params: usize,
    pub ref_proj_params: usize,
    pub gate_params_per_block: usize,
    pub n_blocks: usize,
    /// (gate + reference-projection parameters) / total.
    pub overhead_fraction: f64,
}

impl ParamReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,value\n");
        for (name, n) in &self.components {
            out.push_str(&format!("{name},{n}\n"));
        }
        out.push_str(&format!("total,{}\n", self.total));
        out.push_str(&format!("gate_params_per_block,{}\n", self.gate_params_per_block));
        out.push_str(&format!("overhead_fraction,{}\n", self.overhead_fraction));
        out
    }
}

/// Linear interpolation state between data and noise.
#[derive(Debug, Clone)]
pub struct FlowState<T> {
    pub t: f64,
    pub x_t: LatentVideo<T>,
}

impl<T: Scalar> FlowState<T> {
    /// x_t = (1 - t) x0 + t eps, with t in [0, 1].
    pub fn interpolate(x0: &LatentVideo<T>, eps: &LatentVideo<T>, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("flow_state", format!("t must lie in [0, 1], got {t}")));
        }
        if x0.data.len() != eps.data.len() {
            return Err(Error::ShapeMismatch {
                op: "flow_state",
                lhs: vec![x0.frames, x0.height, x0.width, x0.channels],
                rhs: vec![eps.frames, eps.height, eps.width, eps.channels],
            });
        }
        let tt = T::from_f64(t);
        let one_minus = T::from_f64(1.0 - t);
        let data = x0
            .data
            .iter()
            .zip(&eps.data)
            .map(|(&a, &b)| one_minus * a + tt * b)
            .collect();
        Ok(FlowState {
            t,
            x_t: LatentVideo {
                frames: x0.frames,
                height: x0.height,
                width: x0.width,
                channels: x0.channels,
                data,
            },
        })
    }
}

/// Velocity target of the linear path: eps - x0.
pub fn velocity_target<T: Scalar>(x0: &LatentVideo<T>, eps: &LatentVideo<T>) -> LatentVideo<T> {
    LatentVideo {
        frames: x0.frames,
        height: x0.height,
        width: x0.width,
        channels: x0.channels,
        data: x0.data.iter().zip(&eps.data).map(|(&a, &b)| b - a).collect(),
    }
}

/// Everything the model needs besides the noisy latent.
#[derive(Debug, Clone)]
pub struct Conditioning<T> {
    pub ref_video_latent: LatentVideo<T>,
    pub pooled_mask: Tensor<T>,
    pub ref_image_latent: Option<LatentVideo<T>>,
    pub layout: TokenLayout,
    pub ref_grid: Option<(usize, usize)>,
}

impl<T: Scalar> Conditioning<T> {
    pub fn cast<U: Scalar>(&self) -> Conditioning<U> {
        Conditioning {
            ref_video_latent: self.ref_video_latent.cast::<U>(),
            pooled_mask: self.pooled_mask.cast::<U>(),
            ref_image_latent: self.ref_image_latent.as_ref().map(|l| l.cast::<U>()),
            layout: self.layout.clone(),
            ref_grid: self.ref_grid,
        }
    }
}

/// Build the conditioning for one (video, mask, reference image) triple
/// according to the model's injection mode.
pub fn build_conditioning(
    config: &ModelConfig,
    video: &VideoTensor,
    mask: &MaskVideo,
    ref_image: &VideoTensor,
) -> Result<Conditioning<f32>> {
    let s = config.codec_stride;
    let ref_video = match config.ref_injection {
        RefInjection::PasteBbox => ref_in_bbox(video, mask, ref_image)?,
        _ => make_reference_video(video, mask, config.condition_mode)?,
    };
    let ref_video_latent = encode_stub(&ref_video, s)?;
    if (ref_video_latent.frames, ref_video_latent.height, ref_video_latent.width)
        != config.latent.as_tuple()
    {
        return Err(Error::invalid(
            "conditioning",
            format!(
                "video encodes to {}x{}x{} but the model expects {:?}",
                ref_video_latent.frames, ref_video_latent.height, ref_video_latent.width, config.latent
            ),
        ));
    }
    let pooled_mask = pool_mask::<f32>(mask, s)?;
    let (ref_image_latent, ref_grid, n_ref) = if config.uses_ref_tokens() {
        let l = encode_stub(ref_image, s)?;
        let grid = (l.height, l.width);
        let n = l.cells();
        (Some(l), Some(grid), n)
    } else {
        (None, None, 0)
    };
    let layout = layout_from_mask(&pooled_mask, config.hoi_threshold, n_ref)?;
    Ok(Conditioning {
        ref_video_latent,
        pooled_mask,
        ref_image_latent,
        layout,
        ref_grid,
    })
}

/// Rectified-flow loss on the tape: MSE between the predicted velocity and
/// `eps - x0` over all latent cells.
#[allow(clippy::too_many_arguments)]
pub fn rf_loss_on_tape<T: Scalar>(
    model: &ToyDiTModel<T>,
    tape: &mut Tape<T>,
    vars: &HashMap<String, VarId>,
    x0: &LatentVideo<T>,
    cond: &Conditioning<T>,
    eps_noise: &LatentVideo<T>,
    t: f64,
    rotations: &HeadRotations<T>,
) -> Result<VarId> {
    let flow = FlowState::interpolate(x0, eps_noise, t)?;
    let assembly = assemble_latent(&flow.x_t, &cond.ref_video_latent, &cond.pooled_mask)?;
    let a = tape.input(&assembly.tokens_2d());
    let r = cond.ref_image_latent.as_ref().map(|l| tape.input(&l.tokens_2d()));
    let pred = model.forward_on_tape(tape, vars, a, r, &cond.layout, rotations, t, None)?;
    let target = velocity_target(x0, eps_noise);
    tape.mse_const(pred, &target.tokens_2d())
}

/// Euler integration of the learned velocity field from t=1 to t=0,
/// decoded to pixels and clamped into [-1, 1]. Deterministic given
/// (seed, weights, steps).
pub fn sample(
    model: &ToyDiTModel<f32>,
    cond: &Conditioning<f32>,
    n_steps: usize,
    seed: u64,
) -> Result<VideoTensor> {
    if n_steps == 0 {
        return Err(Error::invalid("sample", "n_steps must be >= 1"));
    }
    let cfg = &model.config;
    let cells = cfg.latent.cells();
    let c = cfg.c_noise();
    let key = Key::new(seed).stream("init_noise");
    let mut x = LatentVideo::<f32> {
        frames: cfg.latent.frames,
        height: cfg.latent.height,
        width: cfg.latent.width,
        channels: c,
        data: (0..cells * c).map(|i| key.gauss_at(i as u64) as f32).collect(),
    };
    let rotations = model.head_rotations(cond.ref_grid)?;
    let dt = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let t = 1.0 - k as f64 * dt;
        let assembly = assemble_latent(&x, &cond.ref_video_latent, &cond.pooled_mask)?;
        let vel = model.forward(
            &assembly,
            cond.ref_image_latent.as_ref(),
            &cond.layout,
            &rotations,
            t,
        )?;
        for (xi, vi) in x.data.iter_mut().zip(vel.data()) {
            *xi -= (dt as f32) * vi;
        }
    }
    let decoded = crate::hcu::decode_stub(&x, cfg.codec_stride)?;
    let clamped: Vec<f32> = decoded.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    VideoTensor::new(decoded.frames(), decoded.height(), decoded.width(), clamped)
}

/// Post-softmax attention mass flowing from each frame's video queries to
/// the reference keys at one block, averaged over heads; split into
/// HOI-query and background-query curves.
pub fn ref_attention_mass(
    probs_per_head: &[Tensor<f32>],
    layout: &TokenLayout,
    latent: &LatentExtents,
) -> (Vec<f64>, Vec<f64>) {
    let frames = latent.frames;
    let per_frame = latent.height * latent.width;
    let n = layout.total();
    let n_video = layout.n_video();
    let mut hoi = vec![0.0f64; frames];
    let mut bg = vec![0.0f64; frames];
    let mut hoi_count = vec![0usize; frames];
    let mut bg_count = vec![0usize; frames];
    for probs in probs_per_head {
        for q in 0..n_video {
            let f = q / per_frame;
            let mass: f64 = (n_video..n).map(|k| probs.data()[q * n + k] as f64).sum();
            if layout.hoi_flags()[q] {
                hoi[f] += mass;
                hoi_count[f] += 1;
            } else {
                bg[f] += mass;
                bg_count[f] += 1;
            }
        }
    }
    for f in 0..frames {
        if hoi_count[f] > 0 {
            hoi[f] /= hoi_count[f] as f64;
        }
        if bg_count[f] > 0 {
            bg[f] /= bg_count[f] as f64;
        }
    }
    (hoi, bg)
}
