//! 3D rotary position encoding for video and reference tokens.
//!
//! Channel pairs of each attention head are split into frame / height /
//! width blocks, each rotated by `position * theta`. Video tokens carry
//! their natural (f, h, w) grid coordinates. Reference-image tokens are
//! pushed out of the video's spatial range (`h + H_V`, `w + W_V`) and get
//! a frame coordinate that depends on the mode:
//!
//! * `VideoOnly` - frame 0, unshifted spatial coordinates: the reference
//!   behaves like a first-frame token (control setting).
//! * `SeparateRef` - fixed frame -1, a coordinate no video token occupies.
//! * `HeadSliding` - head `n` of `N` places the reference at frame
//!   `ceil(N_f * n / N)`, so across heads the reference slides over the
//!   whole temporal span and its attention response evens out.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels as kn;
use crate::rng::Key;
use crate::tensor::{Scalar, Tensor};

/// Which coordinate scheme reference tokens get.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RopeMode {
    VideoOnly,
    SeparateRef,
    HeadSliding { n_head: usize },
}

impl RopeMode {
    pub fn label(&self) -> &'static str {
        match self {
            RopeMode::VideoOnly => "video_only",
            RopeMode::SeparateRef => "separate_ref",
            RopeMode::HeadSliding { .. } => "head_sliding",
        }
    }

    pub fn head_count(&self) -> usize {
        match self {
            RopeMode::HeadSliding { n_head } => *n_head,
            _ => 1,
        }
    }
}

/// Per-axis rotary frequencies for one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySchedule {
    head_dim: usize,
    pair_split: (usize, usize, usize),
    base: f64,
    theta_f: Vec<f64>,
    theta_h: Vec<f64>,
    theta_w: Vec<f64>,
}

fn axis_theta(pairs: usize, base: f64) -> Vec<f64> {
    // theta_i = base^(-2i / (2 * pairs))
    (0..pairs)
        .map(|i| base.powf(-(2.0 * i as f64) / (2.0 * pairs as f64)))
        .collect()
}

/// Split `head_dim/2` channel pairs into frame/height/width blocks and
/// compute the per-axis frequency ladders.
pub fn build_freqs(head_dim: usize, base: f64) -> Result<FrequencySchedule> {
    if head_dim < 6 || head_dim % 2 != 0 {
        return Err(Error::invalid(
            "build_freqs",
            format!("head_dim must be even and >= 6, got {head_dim}"),
        ));
    }
    if base <= 0.0 {
        return Err(Error::invalid("build_freqs", format!("base must be > 0, got {base}")));
    }
    let pairs = head_dim / 2;
    let p_hw = pairs / 3;
    let p_f = pairs - 2 * p_hw;
    Ok(FrequencySchedule {
        head_dim,
        pair_split: (p_f, p_hw, p_hw),
        base,
        theta_f: axis_theta(p_f, base),
        theta_h: axis_theta(p_hw, base),
        theta_w: axis_theta(p_hw, base),
    })
}

impl FrequencySchedule {
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn pair_split(&self) -> (usize, usize, usize) {
        self.pair_split
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Angle of channel pair `p` for a token at `(f, h, w)`.
    fn pair_angle(&self, pos: [i64; 3], p: usize) -> f64 {
        let (pf, ph, _) = self.pair_split;
        if p < pf {
            pos[0] as f64 * self.theta_f[p]
        } else if p < pf + ph {
            pos[1] as f64 * self.theta_h[p - pf]
        } else {
            pos[2] as f64 * self.theta_w[p - pf - ph]
        }
    }

    pub fn theta_f(&self) -> &[f64] {
        &self.theta_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Video,
    Reference,
}

/// Integer (frame, height, width) coordinates for a block of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    kind: TokenKind,
    positions: Vec<[i64; 3]>,
}

impl PositionGrid {
    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn positions(&self) -> &[[i64; 3]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Video positions followed by reference positions.
    pub fn joined(&self, other: &PositionGrid) -> Vec<[i64; 3]> {
        let mut all = self.positions.clone();
        all.extend_from_slice(&other.positions);
        all
    }
}

/// Frame-major, then row-major enumeration of the video token grid.
pub fn video_positions(n_f: usize, h_v: usize, w_v: usize) -> Result<PositionGrid> {
    if n_f == 0 || h_v == 0 || w_v == 0 {
        return Err(Error::invalid(
            "video_positions",
            format!("extents must be >= 1, got ({n_f}, {h_v}, {w_v})"),
        ));
    }
    let mut positions = Vec::with_capacity(n_f * h_v * w_v);
    for f in 0..n_f {
        for h in 0..h_v {
            for w in 0..w_v {
                positions.push([f as i64, h as i64, w as i64]);
            }
        }
    }
    Ok(PositionGrid {
        kind: TokenKind::Video,
        positions,
    })
}

/// Temporal offset of reference tokens for head `head` of `n_head`:
/// `ceil(n_f * head / n_head)` in exact integer arithmetic (0-based head).
pub fn head_frame_offset(n_f: usize, n_head: usize, head: usize) -> i64 {
    debug_assert!(n_head >= 1 && head < n_head);
    ((n_f * head + n_head - 1) / n_head) as i64
}

/// Coordinates for the reference-image token grid under the given mode.
/// `head_index` is required (and checked against `n_head`) in
/// `HeadSliding` mode and ignored otherwise.
pub fn reference_positions(
    ref_grid: (usize, usize),
    video_extents: (usize, usize, usize),
    mode: RopeMode,
    head_index: Option<usize>,
) -> Result<PositionGrid> {
    let (h_i_extent, w_i_extent) = ref_grid;
    let (n_f, h_v, w_v) = video_extents;
    let (frame, shift) = match mode {
        RopeMode::VideoOnly => (0i64, false),
        RopeMode::SeparateRef => (-1i64, true),
        RopeMode::HeadSliding { n_head } => {
            if n_head < 1 {
                return Err(Error::invalid("reference_positions", "n_head must be >= 1"));
            }
            let head = head_index.ok_or_else(|| {
                Error::invalid("reference_positions", "head_index required in head-sliding mode")
            })?;
            if head >= n_head {
                return Err(Error::invalid(
                    "reference_positions",
                    format!("head_index {head} out of range for {n_head} heads"),
                ));
            }
            (head_frame_offset(n_f, n_head, head), true)
        }
    };
    let (dh, dw) = if shift { (h_v as i64, w_v as i64) } else { (0, 0) };
    let mut positions = Vec::with_capacity(h_i_extent * w_i_extent);
    for h in 0..h_i_extent {
        for w in 0..w_i_extent {
            positions.push([frame, h as i64 + dh, w as i64 + dw]);
        }
    }
    Ok(PositionGrid {
        kind: TokenKind::Reference,
        positions,
    })
}

/// Cos/sin tables [tokens, head_dim/2] for one head's token positions.
/// Angles are evaluated in double precision and cast to the target type.
pub fn rotation_table<T: Scalar>(
    positions: &[[i64; 3]],
    freqs: &FrequencySchedule,
) -> (Arc<Vec<T>>, Arc<Vec<T>>) {
    let pairs = freqs.head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for &pos in positions {
        for p in 0..pairs {
            let angle = freqs.pair_angle(pos, p);
            cos.push(T::from_f64(angle.cos()));
            sin.push(T::from_f64(angle.sin()));
        }
    }
    (Arc::new(cos), Arc::new(sin))
}

/// Per-head rotation tables for the joint [video ∥ reference] sequence.
/// Video coordinates are identical across heads; only the reference frame
/// coordinate varies (and only in head-sliding mode).
pub fn build_head_rotations<T: Scalar>(
    freqs: &FrequencySchedule,
    video_extents: (usize, usize, usize),
    ref_grid: Option<(usize, usize)>,
    mode: RopeMode,
    n_head: usize,
) -> Result<Vec<(Arc<Vec<T>>, Arc<Vec<T>>)>> {
    let video = video_positions(video_extents.0, video_extents.1, video_extents.2)?;
    let per_head_ref = matches!(mode, RopeMode::HeadSliding { .. }) && ref_grid.is_some();
    let mut tables = Vec::with_capacity(n_head);
    if per_head_ref {
        for head in 0..n_head {
            let refs = reference_positions(ref_grid.unwrap(), video_extents, mode, Some(head))?;
            let joint = video.joined(&refs);
            tables.push(rotation_table::<T>(&joint, freqs));
        }
    } else {
        let joint = match ref_grid {
            Some(grid) => {
                let refs = reference_positions(grid, video_extents, mode, None)?;
                video.joined(&refs)
            }
            None => video.positions().to_vec(),
        };
        let table = rotation_table::<T>(&joint, freqs);
        for _ in 0..n_head {
            tables.push(table.clone());
        }
    }
    Ok(tables)
}

/// Rotate `x` of shape [heads, tokens, head_dim] with one position grid
/// per head. Each channel pair keeps its 2-norm exactly (orthogonal map).
pub fn apply_rotary<T: Scalar>(
    x: &Tensor<T>,
    positions: &[Vec<[i64; 3]>],
    freqs: &FrequencySchedule,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != freqs.head_dim {
        return Err(Error::invalid(
            "apply_rotary",
            format!("expected [heads, tokens, {}], got {:?}", freqs.head_dim, shape),
        ));
    }
    let (heads, tokens, head_dim) = (shape[0], shape[1], shape[2]);
    if positions.len() != heads {
        return Err(Error::invalid(
            "apply_rotary",
            format!("{} position grids for {} heads", positions.len(), heads),
        ));
    }
    let mut out = vec![T::ZERO; x.len()];
    for h in 0..heads {
        if positions[h].len() != tokens {
            return Err(Error::invalid(
                "apply_rotary",
                format!("head {h}: {} positions for {} tokens", positions[h].len(), tokens),
            ));
        }
        let (cos, sin) = rotation_table::<T>(&positions[h], freqs);
        let lo = h * tokens * head_dim;
        let hi = lo + tokens * head_dim;
        kn::rotate_pairs(&x.data()[lo..hi], &cos, &sin, &mut out[lo..hi], tokens, head_dim);
    }
    Ok(Tensor::from_vec_unchecked(shape.to_vec(), out))
}

/// Monte-Carlo estimate of how strongly a reference key answers video
/// queries at each frame.
#[derive(Debug, Clone)]
pub struct ResponseCurve {
    pub mode: RopeMode,
    pub head_count: usize,
    pub mean_logit: Vec<f64>,
    /// Coefficient of variation of `mean_logit` across frames.
    pub cv: f64,
}

/// Sample a base vector, place a correlated copy at the reference
/// position, probe with the base vector at video positions (f, 0, 0), and
/// average the scaled logit `q·k/sqrt(d)` over trials (and over heads in
/// head-sliding mode). Deterministic given (seed, trials, extents, mode).
pub fn measure_ref_response(
    mode: RopeMode,
    video_extents: (usize, usize, usize),
    freqs: &FrequencySchedule,
    trials: usize,
    seed: u64,
) -> Result<ResponseCurve> {
    if trials < 100 {
        return Err(Error::invalid("measure_ref_response", "trials must be >= 100"));
    }
    let (n_f, _, _) = video_extents;
    let hd = freqs.head_dim;
    let heads = mode.head_count();

    // one reference token at grid (0, 0)
    let mut ref_pos = Vec::with_capacity(heads);
    for head in 0..heads {
        let head_index = match mode {
            RopeMode::HeadSliding { .. } => Some(head),
            _ => None,
        };
        let grid = reference_positions((1, 1), video_extents, mode, head_index)?;
        ref_pos.push(grid.positions()[0]);
    }

    let key = Key::new(seed).stream("ref_response");
    let scale = 1.0 / (hd as f64).sqrt();
    // correlation coefficient ~0.894: v = (u + 0.5 n) / sqrt(1.25)
    let corr_norm = 1.25f64.sqrt();

    let ref_tables: Vec<_> = (0..heads)
        .map(|h| rotation_table::<f64>(&[ref_pos[h]], freqs))
        .collect();
    let probe_tables: Vec<_> = (0..n_f)
        .map(|f| rotation_table::<f64>(&[[f as i64, 0, 0]], freqs))
        .collect();

    let mut sums = vec![0.0f64; n_f];
    let mut q = vec![0.0f64; hd];
    let mut k = vec![0.0f64; hd];
    for trial in 0..trials {
        let tkey = key.index(trial as u64);
        let u = tkey.stream("base").gauss_vec(hd);
        let noise = tkey.stream("noise").gauss_vec(hd);
        let v: Vec<f64> = u
            .iter()
            .zip(&noise)
            .map(|(&a, &b)| (a + 0.5 * b) / corr_norm)
            .collect();
        for head in 0..heads {
            let (kc, ks) = &ref_tables[head];
            kn::rotate_pairs(&v, kc, ks, &mut k, 1, hd);
            for f in 0..n_f {
                let (qc, qs) = &probe_tables[f];
                kn::rotate_pairs(&u, qc, qs, &mut q, 1, hd);
                let dot: f64 = q.iter().zip(&k).map(|(&a, &b)| a * b).sum();
                sums[f] += dot * scale;
            }
        }
    }

    let denom = (trials * heads) as f64;
    let mean_logit: Vec<f64> = sums.iter().map(|s| s / denom).collect();
    let m = mean_logit.iter().sum::<f64>() / n_f as f64;
    let var = mean_logit.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n_f as f64;
    let cv = var.sqrt() / m.abs().max(1e-12);

    Ok(ResponseCurve {
        mode,
        head_count: heads,
        mean_logit,
        cv,
    })
}

/// CSV rows for response curves: `mode,head_count,frame,mean_logit` plus
/// one `cv` summary row per curve.
pub fn curves_to_csv(curves: &[ResponseCurve]) -> String {
    let mut out = String::from("mode,head_count,frame,mean_logit\n");
    for c in curves {
        for (f, v) in c.mean_logit.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", c.mode.label(), c.head_count, f, v));
        }
        out.push_str(&format!("{},{},cv,{}\n", c.mode.label(), c.head_count, c.cv));
    }
    out
}

/// Moving-average smoothing with a centered window (clamped at the ends).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
