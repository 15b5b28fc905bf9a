//! Evaluation measures: PSNR, uniform-window SSIM, a pixel-space
//! object-consistency proxy, and the attention-decay CSV export.
//!
//! All accumulation runs in double precision and fixed order, so a report
//! regenerates bit for bit from the same inputs.

use crate::error::{Error, Result};
use crate::hcu::{MaskVideo, VideoTensor};
use crate::rope::ResponseCurve;

/// Peak-to-peak signal range of normalized video ([-1, 1]).
pub const PEAK: f64 = 2.0;
/// PSNR reported for identical inputs (and cap for near-identical ones).
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_extents(op: &'static str, a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    if !a.same_extents(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.frames(), a.height(), a.width()],
            rhs: vec![b.frames(), b.height(), b.width()],
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all frames and channels,
/// capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    check_extents("psnr", a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
const SSIM_C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);
const SSIM_WINDOW: usize = 7;

/// Mean structural similarity with a uniform sliding window (7x7, shrunk
/// to the frame when smaller), per frame and channel, biased variances.
pub fn ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    check_extents("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    let win_h = SSIM_WINDOW.min(h);
    let win_w = SSIM_WINDOW.min(w);
    let n = (win_h * win_w) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for f in 0..a.frames() {
        for c in 0..3 {
            for y0 in 0..=(h - win_h) {
                for x0 in 0..=(w - win_w) {
                    let mut sa = 0.0;
                    let mut sb = 0.0;
                    let mut saa = 0.0;
                    let mut sbb = 0.0;
                    let mut sab = 0.0;
                    for y in y0..y0 + win_h {
                        for x in x0..x0 + win_w {
                            let pa = a.pixel(f, y, x)[c] as f64;
                            let pb = b.pixel(f, y, x)[c] as f64;
                            sa += pa;
                            sb += pb;
                            saa += pa * pa;
                            sbb += pb * pb;
                            sab += pa * pb;
                        }
                    }
                    let (ma, mb) = (sa / n, sb / n);
                    let va = saa / n - ma * ma;
                    let vb = sbb / n - mb * mb;
                    let cov = sab / n - ma * mb;
                    let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                    let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                    total += num / den;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Reference fidelity inside the mask bounding box: per frame, crop the
/// bbox, resize (nearest) to the reference extents, mean-center both and
/// take their cosine; average over frames. Degenerate (zero-variance)
/// crops contribute 0.
pub fn object_consistency(video: &VideoTensor, mask: &MaskVideo, ref_image: &VideoTensor) -> Result<f64> {
    if video.frames() != mask.frames() || video.height() != mask.height() || video.width() != mask.width() {
        return Err(Error::ShapeMismatch {
            op: "object_consistency",
            lhs: vec![video.frames(), video.height(), video.width()],
            rhs: vec![mask.frames(), mask.height(), mask.width()],
        });
    }
    let (rh, rw) = (ref_image.height(), ref_image.width());
    let ref_flat: Vec<f64> = (0..rh)
        .flat_map(|u| (0..rw).flat_map(move |v| (0..3).map(move |c| (u, v, c))))
        .map(|(u, v, c)| ref_image.pixel(0, u, v)[c] as f64)
        .collect();
    let rmean = ref_flat.iter().sum::<f64>() / ref_flat.len() as f64;
    let rcent: Vec<f64> = ref_flat.iter().map(|v| v - rmean).collect();
    let rnorm = rcent.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut total = 0.0f64;
    for f in 0..video.frames() {
        let (h0, h1, w0, w1) = mask
            .frame_bbox(f)
            .ok_or_else(|| Error::invalid("object_consistency", format!("empty mask on frame {f}")))?;
        let (bh, bw) = (h1 - h0, w1 - w0);
        let mut crop = Vec::with_capacity(rh * rw * 3);
        for u in 0..rh {
            for v in 0..rw {
                let y = h0 + u * bh / rh;
                let x = w0 + v * bw / rw;
                let px = video.pixel(f, y, x);
                crop.extend(px.iter().map(|&p| p as f64));
            }
        }
        let cmean = crop.iter().sum::<f64>() / crop.len() as f64;
        let ccent: Vec<f64> = crop.iter().map(|v| v - cmean).collect();
        let cnorm = ccent.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm > 0.0 && cnorm > 0.0 {
            let dot: f64 = ccent.iter().zip(&rcent).map(|(a, b)| a * b).sum();
            total += dot / (cnorm * rnorm);
        }
    }
    Ok(total / video.frames() as f64)
}

/// One decay curve for the CSV export: Monte-Carlo positional estimates or
/// measured attention mass from a trained model's first block.
#[derive(Debug, Clone)]
pub struct DecayCurve {
    /// "mc", "model_hoi_to_ref" or "model_bg_to_ref".
    pub source: String,
    pub mode: String,
    pub mass: Vec<f64>,
    pub cv: f64,
}

impl DecayCurve {
    pub fn from_response(curve: &ResponseCurve) -> Self {
        DecayCurve {
            source: "mc".into(),
            mode: curve.mode.label().into(),
            mass: curve.mean_logit.clone(),
            cv: curve.cv,
        }
    }

    pub fn from_mass(source: &str, mode: &str, mass: Vec<f64>) -> Self {
        let m = mass.iter().sum::<f64>() / mass.len().max(1) as f64;
        let var = mass.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / mass.len().max(1) as f64;
        let cv = var.sqrt() / m.abs().max(1e-12);
        DecayCurve {
            source: source.into(),
            mode: mode.into(),
            mass,
            cv,
        }
    }
}

/// CSV body with columns `source,mode,frame,mean_mass,cv` (the curve's cv
/// repeated on each of its rows).
pub fn export_decay_csv(curves: &[DecayCurve]) -> String {
    let mut out = String::from("source,mode,frame,mean_mass,cv\n");
    for c in curves {
        for (f, v) in c.mass.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", c.source, c.mode, f, v, c.cv));
        }
    }
    out
}

/// Per-sample metric rows plus aggregates, regenerable bit for bit.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub metric: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub split: String,
    pub sample: usize,
    pub value: f64,
}

impl MetricReport {
    pub fn new(metric: &str, config_hash: &str, seed: u64) -> Self {
        MetricReport {
            metric: metric.into(),
            config_hash: config_hash.into(),
            seed,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, split: &str, sample: usize, value: f64) {
        self.rows.push(MetricRow {
            split: split.into(),
            sample,
            value,
        });
    }

    /// Arithmetic mean over the rows of one split.
    pub fn aggregate(&self, split: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn splits(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.split) {
                seen.push(r.split.clone());
            }
        }
        seen
    }

    /// CSV body: per-sample rows then one `mean` row per split.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,sample,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.split, r.sample, r.value));
        }
        for split in self.splits() {
            if let Some(m) = self.aggregate(&split) {
                out.push_str(&format!("{split},mean,{m}\n"));
            }
        }
        out
    }
}
