//! Multi-head self-attention over [video ∥ reference] tokens with the
//! two-level spatial gate.
//!
//! The hard mask gate (see [`crate::mask`]) decides *where* information
//! may flow: background queries never read reference keys, reference
//! queries only read reference keys. Blocked positions get a post-softmax
//! weight of exactly zero and are skipped in the value sum, so blocked
//! keys cannot influence an output row even at the bit level. The soft
//! flow gate then decides *how strongly* each updated video token passes:
//! one sigmoid scalar per token, from a LayerNorm + single linear layer.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Key;
use crate::rope::RopeMode;
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

pub use crate::mask::{build_flow_mask, FlowMask, TokenGroup, TokenLayout};

/// LayerNorm epsilon inside the soft flow gate.
pub const GATE_LN_EPS: f64 = 1e-5;

/// Soft-flow-gate parameters: LayerNorm affine plus a d_model -> 1 head.
#[derive(Debug, Clone)]
pub struct GateParams<T> {
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    pub fcn_weight: Tensor<T>,
    pub fcn_bias: Tensor<T>,
}

impl<T: Scalar> GateParams<T> {
    /// Near-pass-through start: zero weight, bias +2 (gate ~ 0.881), so the
    /// gated block initially behaves like the ungated one.
    pub fn init(d_model: usize) -> Self {
        GateParams {
            ln_gamma: Tensor::full(vec![d_model], T::ONE),
            ln_beta: Tensor::zeros(vec![d_model]),
            fcn_weight: Tensor::zeros(vec![d_model, 1]),
            fcn_bias: Tensor::full(vec![1], T::from_f64(2.0)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.ln_gamma.len() + self.ln_beta.len() + self.fcn_weight.len() + self.fcn_bias.len()
    }
}

#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub n_head: usize,
    pub head_dim: usize,
    pub rope_mode: RopeMode,
    pub hard_mask_enabled: bool,
    pub gate_enabled: bool,
}

impl AttentionConfig {
    pub fn d_model(&self) -> usize {
        self.n_head * self.head_dim
    }

    pub fn scale_f64(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Projection weights for one attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub gate: Option<GateParams<T>>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init(d_model: usize, gate_enabled: bool, key: Key) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        let w = |tag: &str| Tensor::randn(vec![d_model, d_model], std, key.stream(tag));
        AttentionParams {
            wq: w("wq"),
            bq: Tensor::zeros(vec![d_model]),
            wk: w("wk"),
            bk: Tensor::zeros(vec![d_model]),
            wv: w("wv"),
            bv: Tensor::zeros(vec![d_model]),
            wo: w("wo"),
            bo: Tensor::zeros(vec![d_model]),
            gate: gate_enabled.then(|| GateParams::init(d_model)),
        }
    }
}

/// Tape handles for [`AttentionParams`] registered as named parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: VarId,
    pub bq: VarId,
    pub wk: VarId,
    pub bk: VarId,
    pub wv: VarId,
    pub bv: VarId,
    pub wo: VarId,
    pub bo: VarId,
    pub gate: Option<GateVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub ln_gamma: VarId,
    pub ln_beta: VarId,
    pub fcn_weight: VarId,
    pub fcn_bias: VarId,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn register(&self, tape: &mut Tape<T>, prefix: &str) -> AttentionVars {
        AttentionVars {
            wq: tape.param(&format!("{prefix}.wq"), &self.wq),
            bq: tape.param(&format!("{prefix}.bq"), &self.bq),
            wk: tape.param(&format!("{prefix}.wk"), &self.wk),
            bk: tape.param(&format!("{prefix}.bk"), &self.bk),
            wv: tape.param(&format!("{prefix}.wv"), &self.wv),
            bv: tape.param(&format!("{prefix}.bv"), &self.bv),
            wo: tape.param(&format!("{prefix}.wo"), &self.wo),
            bo: tape.param(&format!("{prefix}.bo"), &self.bo),
            gate: self.gate.as_ref().map(|g| GateVars {
                ln_gamma: tape.param(&format!("{prefix}.gate.ln_gamma"), &g.ln_gamma),
                ln_beta: tape.param(&format!("{prefix}.gate.ln_beta"), &g.ln_beta),
                fcn_weight: tape.param(&format!("{prefix}.gate.fcn_weight"), &g.fcn_weight),
                fcn_bias: tape.param(&format!("{prefix}.gate.fcn_bias"), &g.fcn_bias),
            }),
        }
    }
}

/// Rotation tables per head for the joint token sequence.
pub type HeadRotations<T> = Vec<(Arc<Vec<T>>, Arc<Vec<T>>)>;

/// Per-head masked attention on the tape. `q`/`k`/`v` hold the heads
/// stacked along rows: [n_head * tokens, head_dim]. Queries and keys are
/// rotated with each head's table before the logits.
pub fn masked_attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q: VarId,
    k: VarId,
    v: VarId,
    n_head: usize,
    tokens: usize,
    mask: &FlowMask,
    scale: T,
    rotations: Option<&HeadRotations<T>>,
    mut capture: Option<&mut Vec<Tensor<T>>>,
) -> Result<Vec<VarId>> {
    let mut per_head = Vec::with_capacity(n_head);
    for h in 0..n_head {
        let mut q_h = tape.slice_rows(q, h * tokens, tokens)?;
        let mut k_h = tape.slice_rows(k, h * tokens, tokens)?;
        let v_h = tape.slice_rows(v, h * tokens, tokens)?;
        if let Some(tables) = rotations {
            let (cos, sin) = &tables[h];
            q_h = tape.rotary(q_h, Arc::clone(cos), Arc::clone(sin))?;
            k_h = tape.rotary(k_h, Arc::clone(cos), Arc::clone(sin))?;
        }
        // q @ k^T via an explicit transpose keeps the inner loops
        // element-wise (head_dim is short, token count is not)
        let k_t = tape.transpose(k_h);
        let logits = tape.matmul(q_h, k_t)?;
        let scaled = tape.scale(logits, scale);
        let probs = tape.masked_softmax(scaled, mask.clone())?;
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(tape.value(probs));
        }
        let out_h = tape.masked_value_sum(probs, v_h, mask.clone())?;
        per_head.push(out_h);
    }
    Ok(per_head)
}

/// Soft flow gate on the tape: per-token sigmoid scalar times the row.
pub fn soft_flow_gate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    video: VarId,
    gate: &GateVars,
) -> Result<VarId> {
    let normed = tape.layer_norm(video, gate.ln_gamma, gate.ln_beta, T::from_f64(GATE_LN_EPS))?;
    let z = tape.linear(normed, gate.fcn_weight, gate.fcn_bias)?;
    let g = tape.sigmoid(z);
    tape.row_scale(video, g)
}

/// Full gated attention block on the tape: project, rotate, mask, attend,
/// merge, output-project, then gate the video rows (reference rows pass
/// through untouched).
pub fn gated_block_attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    tokens_var: VarId,
    layout: &TokenLayout,
    config: &AttentionConfig,
    vars: &AttentionVars,
    rotations: &HeadRotations<T>,
    capture: Option<&mut Vec<Tensor<T>>>,
) -> Result<VarId> {
    let n_tokens = layout.total();
    let (rows, d_model) = {
        let s = tape.shape(tokens_var);
        (s[0], s[1])
    };
    if rows != n_tokens || d_model != config.d_model() {
        return Err(Error::invalid(
            "gated_block_attention",
            format!(
                "tokens {rows}x{d_model} inconsistent with layout {} and d_model {}",
                n_tokens,
                config.d_model()
            ),
        ));
    }
    if rotations.len() != config.n_head {
        return Err(Error::invalid(
            "gated_block_attention",
            format!("{} rotation tables for {} heads", rotations.len(), config.n_head),
        ));
    }

    let q = tape.linear(tokens_var, vars.wq, vars.bq)?;
    let k = tape.linear(tokens_var, vars.wk, vars.bk)?;
    let v = tape.linear(tokens_var, vars.wv, vars.bv)?;

    let mask = if config.hard_mask_enabled {
        build_flow_mask(layout)
    } else {
        FlowMask::all(n_tokens)
    };
    let scale = T::from_f64(config.scale_f64());
    let hd = config.head_dim;

    // per-head column slices, stacked over rows for the shared attention body
    let mut q_heads = Vec::with_capacity(config.n_head);
    let mut k_heads = Vec::with_capacity(config.n_head);
    let mut v_heads = Vec::with_capacity(config.n_head);
    for h in 0..config.n_head {
        q_heads.push(tape.slice_cols(q, h * hd, hd)?);
        k_heads.push(tape.slice_cols(k, h * hd, hd)?);
        v_heads.push(tape.slice_cols(v, h * hd, hd)?);
    }
    let q_stack = tape.concat_rows(&q_heads)?;
    let k_stack = tape.concat_rows(&k_heads)?;
    let v_stack = tape.concat_rows(&v_heads)?;

    let per_head = masked_attention_on_tape(
        tape,
        q_stack,
        k_stack,
        v_stack,
        config.n_head,
        n_tokens,
        &mask,
        scale,
        Some(rotations),
        capture,
    )?;

    let merged = tape.concat_cols(&per_head)?;
    let projected = tape.linear(merged, vars.wo, vars.bo)?;

    match (&vars.gate, layout.n_ref()) {
        (Some(gate), 0) => soft_flow_gate_on_tape(tape, projected, gate),
        (Some(gate), n_ref) => {
            let video = tape.slice_rows(projected, 0, layout.n_video())?;
            let reference = tape.slice_rows(projected, layout.n_video(), n_ref)?;
            let gated = soft_flow_gate_on_tape(tape, video, gate)?;
            tape.concat_rows(&[gated, reference])
        }
        (None, _) => Ok(projected),
    }
}

/// Evaluate masked attention without gradient tracking. `q`/`k`/`v` are
/// [n_head, tokens, head_dim]; rotation is the caller's business here
/// (pass pre-rotated embeddings), matching the tape path with
/// `rotations: None`.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &FlowMask,
    scale: T,
) -> Result<Tensor<T>> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.shape().len() != 3 {
            return Err(Error::invalid(
                "masked_attention",
                format!("{name} must be [heads, tokens, head_dim], got {:?}", t.shape()),
            ));
        }
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_attention",
            lhs: q.shape().to_vec(),
            rhs: if q.shape() != k.shape() {
                k.shape().to_vec()
            } else {
                v.shape().to_vec()
            },
        });
    }
    let (n_head, tokens, head_dim) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut tape = Tape::new();
    let q2 = tape.input(&Tensor::from_vec_unchecked(vec![n_head * tokens, head_dim], q.data().to_vec()));
    let k2 = tape.input(&Tensor::from_vec_unchecked(vec![n_head * tokens, head_dim], k.data().to_vec()));
    let v2 = tape.input(&Tensor::from_vec_unchecked(vec![n_head * tokens, head_dim], v.data().to_vec()));
    let per_head = masked_attention_on_tape(&mut tape, q2, k2, v2, n_head, tokens, mask, scale, None, None)?;
    let mut data = Vec::with_capacity(n_head * tokens * head_dim);
    for h in per_head {
        data.extend_from_slice(tape.data(h));
    }
    Ok(Tensor::from_vec_unchecked(vec![n_head, tokens, head_dim], data))
}

/// Evaluate the soft flow gate without gradient tracking.
pub fn soft_flow_gate<T: Scalar>(video_out: &Tensor<T>, params: &GateParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.input(video_out);
    let gate = GateVars {
        ln_gamma: tape.input(&params.ln_gamma),
        ln_beta: tape.input(&params.ln_beta),
        fcn_weight: tape.input(&params.fcn_weight),
        fcn_bias: tape.input(&params.fcn_bias),
    };
    let out = soft_flow_gate_on_tape(&mut tape, x, &gate)?;
    Ok(tape.value(out))
}

/// Evaluate a full gated attention block without gradient tracking.
pub fn gated_block_attention<T: Scalar>(
    tokens: &Tensor<T>,
    layout: &TokenLayout,
    config: &AttentionConfig,
    params: &AttentionParams<T>,
    rotations: &HeadRotations<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.input(tokens);
    let vars = params.register(&mut tape, "attn");
    let out = gated_block_attention_on_tape(&mut tape, x, layout, config, &vars, rotations, None)?;
    Ok(tape.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, TapeFn};
    use crate::rope::{build_freqs, build_head_rotations};

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn single_allowed_key_returns_its_value_row() {
        // one query token, one key: degenerate softmax
        let q = t64(vec![1, 1, 2], vec![0.3, -0.7]);
        let k = t64(vec![1, 1, 2], vec![1.0, 2.0]);
        let v = t64(vec![1, 1, 2], vec![5.0, -3.0]);
        let out = masked_attention(&q, &k, &v, &FlowMask::all(1), 1.0).unwrap();
        assert_eq!(out.data(), &[5.0, -3.0]);
    }

    #[test]
    fn three_token_weights_match_brute_force() {
        // q = k = v = scaled basis vectors; oracle computed directly
        let data = vec![2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 4.0];
        let q = t64(vec![1, 3, 3], data.clone());
        let k = t64(vec![1, 3, 3], data.clone());
        let v = t64(vec![1, 3, 3], data);
        let scale = 1.0 / 3.0f64.sqrt();
        let layout = TokenLayout::new(2, 1, vec![true, false]).unwrap();
        let mask = build_flow_mask(&layout);
        let out = masked_attention(&q, &k, &v, &mask, scale).unwrap();

        // brute force, extended precision: logits row q0 = [4/sqrt3, 0, 0]
        let brute_row = |logits: [f64; 3], blocked: [bool; 3], values: [[f64; 3]; 3]| -> [f64; 3] {
            let mx = logits
                .iter()
                .zip(blocked)
                .filter(|(_, b)| !b)
                .map(|(l, _)| *l)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits
                .iter()
                .zip(blocked)
                .map(|(l, b)| if b { 0.0 } else { (l - mx).exp() })
                .collect();
            let s: f64 = e.iter().sum();
            let mut out = [0.0; 3];
            for j in 0..3 {
                for c in 0..3 {
                    out[c] += e[j] / s * values[j][c];
                }
            }
            out
        };
        let vals = [[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 4.0]];
        let expect0 = brute_row([4.0 * scale, 0.0, 0.0], [false, false, false], vals);
        let expect1 = brute_row([0.0, 9.0 * scale, 0.0], [false, false, true], vals);
        let expect2 = brute_row([0.0, 0.0, 16.0 * scale], [true, true, false], vals);
        for (row, expect) in [expect0, expect1, expect2].iter().enumerate() {
            for c in 0..3 {
                assert!(
                    (out.data()[row * 3 + c] - expect[c]).abs() < 1e-6,
                    "row {row} ch {c}: {} vs {}",
                    out.data()[row * 3 + c],
                    expect[c]
                );
            }
        }
    }

    #[test]
    fn all_ones_mask_bitwise_equals_unrestricted() {
        let key = Key::new(3);
        let q = Tensor::<f64>::randn(vec![2, 4, 6], 1.0, key.stream("q"));
        let k = Tensor::<f64>::randn(vec![2, 4, 6], 1.0, key.stream("k"));
        let v = Tensor::<f64>::randn(vec![2, 4, 6], 1.0, key.stream("v"));
        // a layout with no reference tokens imposes no restrictions
        let layout = TokenLayout::new(4, 0, vec![true, false, true, false]).unwrap();
        let a = masked_attention(&q, &k, &v, &build_flow_mask(&layout), 0.5).unwrap();
        let b = masked_attention(&q, &k, &v, &FlowMask::all(4), 0.5).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn blocked_weights_exactly_zero_and_rows_sum_to_one() {
        let key = Key::new(9);
        let layout = TokenLayout::new(3, 2, vec![true, false, false]).unwrap();
        let mask = build_flow_mask(&layout);
        let mut tape = Tape::<f64>::new();
        let q = tape.input(&Tensor::randn(vec![5, 4], 1.0, key.stream("q")));
        let k = tape.input(&Tensor::randn(vec![5, 4], 1.0, key.stream("k")));
        let logits = tape.matmul_nt(q, k).unwrap();
        let probs = tape.masked_softmax(logits, mask.clone()).unwrap();
        let p = tape.data(probs);
        for row in 0..5 {
            let mut sum = 0.0;
            for col in 0..5 {
                let w = p[row * 5 + col];
                if !mask.allowed(row, col) {
                    assert_eq!(w, 0.0, "blocked weight must be exactly zero");
                } else {
                    assert!(w >= 0.0);
                }
                sum += w;
            }
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gate_examples() {
        let d = 4;
        let rows = t64(vec![3, 4], vec![0.5, -1.0, 2.0, 0.1, 1.0, 1.5, -0.5, 0.2, -2.0, 0.3, 0.4, 0.9]);
        // fcn_weight = 0, bias = 0 -> every row scaled by exactly 0.5
        let mut p = GateParams::<f64>::init(d);
        p.fcn_bias = t64(vec![1], vec![0.0]);
        let out = soft_flow_gate(&rows, &p).unwrap();
        for (a, b) in out.data().iter().zip(rows.data()) {
            assert_eq!(*a, b * 0.5);
        }

        // bias = 2 -> sigmoid(2) = 0.880797
        p.fcn_bias = t64(vec![1], vec![2.0]);
        let out = soft_flow_gate(&rows, &p).unwrap();
        for (a, b) in out.data().iter().zip(rows.data()) {
            assert!((a - b * 0.8807970779778823).abs() < 1e-6);
        }

        // bias = -20 -> gate saturates toward zero
        p.fcn_bias = t64(vec![1], vec![-20.0]);
        let out = soft_flow_gate(&rows, &p).unwrap();
        let norm_in: f64 = rows.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_out: f64 = out.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm_out < 1e-7 * norm_in);
    }

    #[test]
    fn gate_strictly_shrinks_rows() {
        let key = Key::new(21);
        let rows = Tensor::<f64>::randn(vec![6, 8], 1.0, key);
        let mut p = GateParams::<f64>::init(8);
        p.fcn_weight = Tensor::randn(vec![8, 1], 0.5, key.stream("w"));
        let out = soft_flow_gate(&rows, &p).unwrap();
        for t in 0..6 {
            let ni: f64 = rows.data()[t * 8..(t + 1) * 8].iter().map(|v| v * v).sum::<f64>().sqrt();
            let no: f64 = out.data()[t * 8..(t + 1) * 8].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(no < ni, "gate must strictly shrink every row");
        }
    }

    fn block_setup(
        n_video: usize,
        n_ref: usize,
        hoi: Vec<bool>,
        mode: RopeMode,
        hard_mask: bool,
        gate: bool,
        seed: u64,
    ) -> (
        Tensor<f64>,
        TokenLayout,
        AttentionConfig,
        AttentionParams<f64>,
        HeadRotations<f64>,
    ) {
        let n_head = 2;
        let head_dim = 6;
        let config = AttentionConfig {
            n_head,
            head_dim,
            rope_mode: mode,
            hard_mask_enabled: hard_mask,
            gate_enabled: gate,
        };
        let layout = TokenLayout::new(n_video, n_ref, hoi).unwrap();
        let key = Key::new(seed);
        let tokens = Tensor::randn(vec![layout.total(), config.d_model()], 1.0, key.stream("tokens"));
        let params = AttentionParams::init(config.d_model(), gate, key.stream("params"));
        let freqs = build_freqs(head_dim, 10000.0).unwrap();
        // video grid: 1 frame tall enough to hold n_video tokens in a row
        let rotations = build_head_rotations(
            &freqs,
            (1, 1, n_video),
            (n_ref > 0).then_some((1, n_ref)),
            mode,
            n_head,
        )
        .unwrap();
        (tokens, layout, config, params, rotations)
    }

    #[test]
    fn background_rows_unchanged_when_reference_removed() {
        for mode in [
            RopeMode::VideoOnly,
            RopeMode::SeparateRef,
            RopeMode::HeadSliding { n_head: 2 },
        ] {
            let (tokens, layout, config, params, rotations) =
                block_setup(4, 2, vec![true, false, true, false], mode, true, true, 42);
            let with_ref = gated_block_attention(&tokens, &layout, &config, &params, &rotations).unwrap();

            let video_tokens = Tensor::from_vec_unchecked(
                vec![4, config.d_model()],
                tokens.data()[..4 * config.d_model()].to_vec(),
            );
            let freqs = build_freqs(config.head_dim, 10000.0).unwrap();
            let rot_no_ref =
                build_head_rotations(&freqs, (1, 1, 4), None, mode, config.n_head).unwrap();
            let without_ref = gated_block_attention(
                &video_tokens,
                &layout.without_ref(),
                &config,
                &params,
                &rot_no_ref,
            )
            .unwrap();

            for t in 0..4 {
                if layout.hoi_flags()[t] {
                    continue; // HOI rows legitimately differ
                }
                for c in 0..config.d_model() {
                    let a = with_ref.data()[t * config.d_model() + c];
                    let b = without_ref.data()[t * config.d_model() + c];
                    assert!(
                        (a - b).abs() <= 1e-12,
                        "{mode:?} background token {t} ch {c}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn disabling_hard_mask_breaks_background_equivalence() {
        let (tokens, layout, config, params, rotations) = block_setup(
            4,
            2,
            vec![true, false, true, false],
            RopeMode::SeparateRef,
            false,
            false,
            42,
        );
        let with_ref = gated_block_attention(&tokens, &layout, &config, &params, &rotations).unwrap();
        let video_tokens = Tensor::from_vec_unchecked(
            vec![4, config.d_model()],
            tokens.data()[..4 * config.d_model()].to_vec(),
        );
        let freqs = build_freqs(config.head_dim, 10000.0).unwrap();
        let rot_no_ref =
            build_head_rotations(&freqs, (1, 1, 4), None, RopeMode::SeparateRef, config.n_head).unwrap();
        let without_ref = gated_block_attention(
            &video_tokens,
            &layout.without_ref(),
            &config,
            &params,
            &rot_no_ref,
        )
        .unwrap();
        let mut max_diff = 0.0f64;
        for t in 0..4 {
            if layout.hoi_flags()[t] {
                continue;
            }
            for c in 0..config.d_model() {
                let d = (with_ref.data()[t * config.d_model() + c]
                    - without_ref.data()[t * config.d_model() + c])
                    .abs();
                max_diff = max_diff.max(d);
            }
        }
        assert!(max_diff > 1e-6, "without the mask the reference must leak into background rows");
    }

    #[test]
    fn perturbing_reference_changes_some_hoi_row() {
        let (tokens, layout, config, params, rotations) = block_setup(
            4,
            2,
            vec![true, false, true, false],
            RopeMode::HeadSliding { n_head: 2 },
            true,
            true,
            7,
        );
        let base = gated_block_attention(&tokens, &layout, &config, &params, &rotations).unwrap();
        let mut perturbed = tokens.clone();
        let ref_start = 4 * config.d_model();
        perturbed.data_mut()[ref_start] += 0.25;
        let out = gated_block_attention(&perturbed, &layout, &config, &params, &rotations).unwrap();
        let mut hoi_changed = false;
        for t in 0..4 {
            if !layout.hoi_flags()[t] {
                continue;
            }
            for c in 0..config.d_model() {
                if base.data()[t * config.d_model() + c] != out.data()[t * config.d_model() + c] {
                    hoi_changed = true;
                }
            }
        }
        assert!(hoi_changed);
    }

    #[test]
    fn reference_rows_bitwise_immune_to_video_perturbation() {
        let (tokens, layout, config, params, rotations) = block_setup(
            4,
            2,
            vec![true, false, true, false],
            RopeMode::SeparateRef,
            true,
            true,
            13,
        );
        let base = gated_block_attention(&tokens, &layout, &config, &params, &rotations).unwrap();
        let mut perturbed = tokens.clone();
        perturbed.data_mut()[0] += 1.5; // first video token
        let out = gated_block_attention(&perturbed, &layout, &config, &params, &rotations).unwrap();
        let d = config.d_model();
        for t in 4..6 {
            for c in 0..d {
                assert_eq!(
                    base.data()[t * d + c].to_bits(),
                    out.data()[t * d + c].to_bits(),
                    "reference row {t} must be bitwise unchanged"
                );
            }
        }
    }

    #[test]
    fn no_ref_tokens_mask_toggle_is_bitwise_noop() {
        let (tokens, layout, config, params, rotations) =
            block_setup(4, 0, vec![true, false, true, false], RopeMode::VideoOnly, true, false, 5);
        let masked = gated_block_attention(&tokens, &layout, &config, &params, &rotations).unwrap();
        let mut config_off = config.clone();
        config_off.hard_mask_enabled = false;
        let open = gated_block_attention(&tokens, &layout, &config_off, &params, &rotations).unwrap();
        assert_eq!(masked.data(), open.data());
    }

    #[test]
    fn gated_block_gradients_match_finite_differences() {
        // differentiate w.r.t. the input tokens through the whole block
        let (tokens, layout, config, params, rotations) = block_setup(
            3,
            2,
            vec![true, false, true],
            RopeMode::HeadSliding { n_head: 2 },
            true,
            true,
            99,
        );
        let f = TapeFn(move |tape: &mut Tape<f64>, x: VarId| {
            let vars = params.register(tape, "attn");
            let out = gated_block_attention_on_tape(tape, x, &layout, &config, &vars, &rotations, None)?;
            Ok(tape.sum(out))
        });
        let report = grad_check(&f, &tokens, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn masked_attention_gradcheck() {
        // pack q,k,v into one flat input
        let layout = TokenLayout::new(2, 1, vec![true, false]).unwrap();
        let mask = build_flow_mask(&layout);
        let tokens = 3;
        let hd = 4;
        let f = TapeFn(move |tape: &mut Tape<f64>, x: VarId| {
            let q = tape.slice_rows(x, 0, tokens)?;
            let k = tape.slice_rows(x, tokens, tokens)?;
            let v = tape.slice_rows(x, 2 * tokens, tokens)?;
            let heads = masked_attention_on_tape(
                tape,
                q,
                k,
                v,
                1,
                tokens,
                &mask,
                0.5,
                None,
                None,
            )?;
            Ok(tape.sum(heads[0]))
        });
        let x = Tensor::<f64>::randn(vec![3 * tokens, hd], 1.0, Key::new(31));
        let report = grad_check(&f, &x, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn soft_gate_gradcheck() {
        let d = 5;
        let rows = 3;
        // input packs [tokens, gamma, beta, weight, bias] flat
        let f = TapeFn(move |tape: &mut Tape<f64>, x: VarId| {
            let flat = tape.reshape(x, vec![rows * d + 3 * d + 1])?;
            let tok = tape.slice_cols(flat, 0, rows * d)?;
            let tokens = tape.reshape(tok, vec![rows, d])?;
            let gamma = tape.slice_cols(flat, rows * d, d)?;
            let gamma = tape.reshape(gamma, vec![d])?;
            let beta = tape.slice_cols(flat, rows * d + d, d)?;
            let beta = tape.reshape(beta, vec![d])?;
            let w = tape.slice_cols(flat, rows * d + 2 * d, d)?;
            let w = tape.reshape(w, vec![d, 1])?;
            let b = tape.slice_cols(flat, rows * d + 3 * d, 1)?;
            let b = tape.reshape(b, vec![1])?;
            let gate = GateVars {
                ln_gamma: gamma,
                ln_beta: beta,
                fcn_weight: w,
                fcn_bias: b,
            };
            let out = soft_flow_gate_on_tape(tape, tokens, &gate)?;
            Ok(tape.sum(out))
        });
        let x = Tensor::<f64>::randn(vec![3 * d + 3 * d + 1], 0.8, Key::new(17));
        let report = grad_check(&f, &x, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
