//! Condition assembly: masked reference video, pooled mask, exact stub
//! codec and the channel-concatenated denoiser input.
//!
//! The reference video keeps clean boundary frames (frame 0, plus the last
//! frame in first-last-frame mode) and fills interaction regions of the
//! remaining frames with the neutral value 0 (the fill constant in
//! normalized pixel space). The stub codec is a lossless space-to-channel
//! rearrangement standing in for a learned autoencoder, so reconstruction
//! error is attributable to the model alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::TokenLayout;
use crate::tensor::{Scalar, Tensor};

/// Fill value for masked pixels, already in normalized [-1, 1] space.
pub const MASK_FILL: f32 = 0.0;

/// Pixel-space clip, values in [-1, 1], three channels, layout [f][h][w][c].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("video", "need at least one frame"));
        }
        if data.len() != frames * height * width * 3 {
            return Err(Error::invalid(
                "video",
                format!(
                    "{}x{}x{}x3 wants {} values, got {}",
                    frames,
                    height,
                    width,
                    frames * height * width * 3,
                    data.len()
                ),
            ));
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(Error::invalid(
                    "video",
                    format!("value {v} at index {i} outside [-1, 1]"),
                ));
            }
        }
        Ok(VideoTensor {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        VideoTensor {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * 3],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, f: usize, h: usize, w: usize) -> usize {
        ((f * self.height + h) * self.width + w) * 3
    }

    pub fn pixel(&self, f: usize, h: usize, w: usize) -> [f32; 3] {
        let i = self.idx(f, h, w);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, f: usize, h: usize, w: usize, rgb: [f32; 3]) {
        let i = self.idx(f, h, w);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Single frame as its own clip.
    pub fn frame(&self, f: usize) -> VideoTensor {
        let n = self.height * self.width * 3;
        VideoTensor {
            frames: 1,
            height: self.height,
            width: self.width,
            data: self.data[f * n..(f + 1) * n].to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec_unchecked(
            vec![self.frames, self.height, self.width, 3],
            self.data.clone(),
        )
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::invalid(
                "video",
                format!("expected shape [F, H, W, 3], got {s:?}"),
            ));
        }
        VideoTensor::new(s[0], s[1], s[2], t.data().to_vec())
    }

    pub fn same_extents(&self, other: &VideoTensor) -> bool {
        self.frames == other.frames && self.height == other.height && self.width == other.width
    }
}

/// Binary mask per pixel, layout [f][h][w].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVideo {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskVideo {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::invalid(
                "mask",
                format!(
                    "{}x{}x{} wants {} values, got {}",
                    frames,
                    height,
                    width,
                    frames * height * width,
                    data.len()
                ),
            ));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::invalid("mask", format!("non-binary value at index {i}")));
        }
        Ok(MaskVideo {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        MaskVideo {
            frames,
            height,
            width,
            data: vec![0; frames * height * width],
        }
    }

    pub fn ones(frames: usize, height: usize, width: usize) -> Self {
        MaskVideo {
            frames,
            height,
            width,
            data: vec![1; frames * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, f: usize, h: usize, w: usize) -> bool {
        self.data[(f * self.height + h) * self.width + w] == 1
    }

    pub fn set(&mut self, f: usize, h: usize, w: usize, v: bool) {
        self.data[(f * self.height + h) * self.width + w] = v as u8;
    }

    /// Tight bounding box (h0, h1, w0, w1), inclusive-exclusive, of the
    /// masked pixels of one frame, if any.
    pub fn frame_bbox(&self, f: usize) -> Option<(usize, usize, usize, usize)> {
        let (mut h0, mut h1, mut w0, mut w1) = (usize::MAX, 0usize, usize::MAX, 0usize);
        let mut any = false;
        for h in 0..self.height {
            for w in 0..self.width {
                if self.get(f, h, w) {
                    any = true;
                    h0 = h0.min(h);
                    h1 = h1.max(h + 1);
                    w0 = w0.min(w);
                    w1 = w1.max(w + 1);
                }
            }
        }
        any.then_some((h0, h1, w0, w1))
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec_unchecked(
            vec![self.frames, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::invalid("mask", format!("expected shape [F, H, W], got {s:?}")));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(0u8)
                } else if v == 1.0 {
                    Ok(1u8)
                } else {
                    Err(Error::invalid("mask", format!("non-binary value {v}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        MaskVideo::new(s[0], s[1], s[2], data)
    }
}

/// Encoded clip, layout [f][h][w][c]; temporal stride is always 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo<T> {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> LatentVideo<T> {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(Error::invalid(
                "latent",
                format!(
                    "{}x{}x{}x{} wants {} values, got {}",
                    frames,
                    height,
                    width,
                    channels,
                    frames * height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(LatentVideo {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        LatentVideo {
            frames,
            height,
            width,
            channels,
            data: vec![T::ZERO; frames * height * width * channels],
        }
    }

    pub fn cells(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec_unchecked(
            vec![self.frames, self.height, self.width, self.channels],
            self.data.clone(),
        )
    }

    /// Cells as rows: [cells, channels], frame-major order.
    pub fn tokens_2d(&self) -> Tensor<T> {
        Tensor::from_vec_unchecked(vec![self.cells(), self.channels], self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> LatentVideo<U> {
        LatentVideo {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn same_extents(&self, other: &LatentVideo<T>) -> bool {
        self.frames == other.frames && self.height == other.height && self.width == other.width
    }
}

/// Channel layout of the assembled denoiser input, recorded with every
/// checkpoint. Order is fixed: noisy latent, reference-video latent, then
/// one pooled-mask channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelManifest {
    pub c_noise: usize,
    pub c_ref: usize,
    pub c_mask: usize,
    pub order: Vec<String>,
}

impl ChannelManifest {
    pub fn new(c_noise: usize, c_ref: usize) -> Self {
        ChannelManifest {
            c_noise,
            c_ref,
            c_mask: 1,
            order: vec!["noise".into(), "reference".into(), "mask".into()],
        }
    }

    pub fn total(&self) -> usize {
        self.c_noise + self.c_ref + self.c_mask
    }
}

/// Channel-concatenated denoiser input [f][h][w][c_noise + c_ref + 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentAssembly<T> {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub manifest: ChannelManifest,
    pub data: Vec<T>,
}

impl<T: Scalar> LatentAssembly<T> {
    pub fn cells(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Cells as rows: [cells, c_total], frame-major order.
    pub fn tokens_2d(&self) -> Tensor<T> {
        Tensor::from_vec_unchecked(vec![self.cells(), self.manifest.total()], self.data.clone())
    }

    /// Recover the three inputs exactly, by manifest.
    pub fn split(&self) -> (LatentVideo<T>, LatentVideo<T>, Tensor<T>) {
        let c_total = self.manifest.total();
        let (cn, cr) = (self.manifest.c_noise, self.manifest.c_ref);
        let cells = self.cells();
        let mut noise = Vec::with_capacity(cells * cn);
        let mut reference = Vec::with_capacity(cells * cr);
        let mut mask = Vec::with_capacity(cells);
        for cell in 0..cells {
            let base = cell * c_total;
            noise.extend_from_slice(&self.data[base..base + cn]);
            reference.extend_from_slice(&self.data[base + cn..base + cn + cr]);
            mask.push(self.data[base + cn + cr]);
        }
        (
            LatentVideo {
                frames: self.frames,
                height: self.height,
                width: self.width,
                channels: cn,
                data: noise,
            },
            LatentVideo {
                frames: self.frames,
                height: self.height,
                width: self.width,
                channels: cr,
                data: reference,
            },
            Tensor::from_vec_unchecked(vec![self.frames, self.height, self.width, 1], mask),
        )
    }
}

/// Which boundary frames stay clean in the reference video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    FirstFrame,
    FirstLastFrame,
}

impl ConditionMode {
    pub fn is_clean_frame(&self, f: usize, total_frames: usize) -> bool {
        match self {
            ConditionMode::FirstFrame => f == 0,
            ConditionMode::FirstLastFrame => f == 0 || f + 1 == total_frames,
        }
    }
}

/// Build the reference video: clean boundary frames, interaction regions
/// of the other frames filled with the neutral value. Background pixels
/// are copied, not recomputed, so they match the source bit for bit.
pub fn make_reference_video(v: &VideoTensor, mask: &MaskVideo, mode: ConditionMode) -> Result<VideoTensor> {
    if v.frames != mask.frames() || v.height != mask.height() || v.width != mask.width() {
        return Err(Error::ShapeMismatch {
            op: "make_reference_video",
            lhs: vec![v.frames, v.height, v.width],
            rhs: vec![mask.frames(), mask.height(), mask.width()],
        });
    }
    let mut out = v.clone();
    for f in 0..v.frames {
        if mode.is_clean_frame(f, v.frames) {
            continue;
        }
        for h in 0..v.height {
            for w in 0..v.width {
                if mask.get(f, h, w) {
                    out.set_pixel(f, h, w, [MASK_FILL; 3]);
                }
            }
        }
    }
    Ok(out)
}

/// Paste-the-reference baseline: like [`make_reference_video`] with
/// FirstFrame cleanliness, but masked pixels take the reference image
/// resized (nearest-neighbor) to each frame's mask bounding box.
pub fn ref_in_bbox(v: &VideoTensor, mask: &MaskVideo, reference: &VideoTensor) -> Result<VideoTensor> {
    if v.frames != mask.frames() || v.height != mask.height() || v.width != mask.width() {
        return Err(Error::ShapeMismatch {
            op: "ref_in_bbox",
            lhs: vec![v.frames, v.height, v.width],
            rhs: vec![mask.frames(), mask.height(), mask.width()],
        });
    }
    if reference.frames() != 1 {
        return Err(Error::invalid("ref_in_bbox", "reference image must be a single frame"));
    }
    let mut out = v.clone();
    for f in 1..v.frames {
        let (h0, h1, w0, w1) = mask.frame_bbox(f).ok_or_else(|| {
            Error::invalid("ref_in_bbox", format!("empty mask on frame {f}"))
        })?;
        let (bh, bw) = (h1 - h0, w1 - w0);
        for h in h0..h1 {
            for w in w0..w1 {
                if !mask.get(f, h, w) {
                    continue;
                }
                let rh = (h - h0) * reference.height() / bh;
                let rw = (w - w0) * reference.width() / bw;
                out.set_pixel(f, h, w, reference.pixel(0, rh, rw));
            }
        }
    }
    Ok(out)
}

/// Average-pool the mask over s x s pixel blocks: [F, H/s, W/s, 1].
pub fn pool_mask<T: Scalar>(mask: &MaskVideo, stride: usize) -> Result<Tensor<T>> {
    if stride == 0 || mask.height() % stride != 0 || mask.width() % stride != 0 {
        return Err(Error::invalid(
            "pool_mask",
            format!(
                "extents {}x{} not divisible by stride {stride}",
                mask.height(),
                mask.width()
            ),
        ));
    }
    let (hl, wl) = (mask.height() / stride, mask.width() / stride);
    let denom = T::from_f64((stride * stride) as f64);
    let mut out = Vec::with_capacity(mask.frames() * hl * wl);
    for f in 0..mask.frames() {
        for bh in 0..hl {
            for bw in 0..wl {
                let mut sum = T::ZERO;
                for dy in 0..stride {
                    for dx in 0..stride {
                        if mask.get(f, bh * stride + dy, bw * stride + dx) {
                            sum += T::ONE;
                        }
                    }
                }
                out.push(sum / denom);
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![mask.frames(), hl, wl, 1], out))
}

/// Space-to-channel rearrangement: every s x s x 3 pixel block becomes one
/// latent cell with 3*s*s channels, raster order (dy, dx, rgb).
pub fn encode_stub(v: &VideoTensor, stride: usize) -> Result<LatentVideo<f32>> {
    if stride == 0 || v.height % stride != 0 || v.width % stride != 0 {
        return Err(Error::invalid(
            "encode_stub",
            format!("extents {}x{} not divisible by stride {stride}", v.height, v.width),
        ));
    }
    let (hl, wl) = (v.height / stride, v.width / stride);
    let channels = 3 * stride * stride;
    let mut data = Vec::with_capacity(v.frames * hl * wl * channels);
    for f in 0..v.frames {
        for bh in 0..hl {
            for bw in 0..wl {
                for dy in 0..stride {
                    for dx in 0..stride {
                        let px = v.pixel(f, bh * stride + dy, bw * stride + dx);
                        data.extend_from_slice(&px);
                    }
                }
            }
        }
    }
    LatentVideo::new(v.frames, hl, wl, channels, data)
}

/// Exact inverse of [`encode_stub`].
pub fn decode_stub(l: &LatentVideo<f32>, stride: usize) -> Result<VideoTensor> {
    if l.channels != 3 * stride * stride {
        return Err(Error::invalid(
            "decode_stub",
            format!("latent has {} channels, stride {stride} wants {}", l.channels, 3 * stride * stride),
        ));
    }
    let (h, w) = (l.height * stride, l.width * stride);
    let mut out = VideoTensor::zeros(l.frames, h, w);
    for f in 0..l.frames {
        for bh in 0..l.height {
            for bw in 0..l.width {
                let cell = ((f * l.height + bh) * l.width + bw) * l.channels;
                for dy in 0..stride {
                    for dx in 0..stride {
                        let c = (dy * stride + dx) * 3;
                        out.set_pixel(
                            f,
                            bh * stride + dy,
                            bw * stride + dx,
                            [
                                l.data[cell + c],
                                l.data[cell + c + 1],
                                l.data[cell + c + 2],
                            ],
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Concatenate noisy latent, reference-video latent and pooled mask along
/// channels, in that fixed order.
pub fn assemble_latent<T: Scalar>(
    x_t: &LatentVideo<T>,
    ref_latent: &LatentVideo<T>,
    pooled_mask: &Tensor<T>,
) -> Result<LatentAssembly<T>> {
    if !x_t.same_extents(ref_latent) {
        return Err(Error::ShapeMismatch {
            op: "assemble_latent",
            lhs: vec![x_t.frames, x_t.height, x_t.width],
            rhs: vec![ref_latent.frames, ref_latent.height, ref_latent.width],
        });
    }
    let want = vec![x_t.frames, x_t.height, x_t.width, 1];
    if pooled_mask.shape() != want.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "assemble_latent",
            lhs: want,
            rhs: pooled_mask.shape().to_vec(),
        });
    }
    let manifest = ChannelManifest::new(x_t.channels, ref_latent.channels);
    let cells = x_t.cells();
    let mut data = Vec::with_capacity(cells * manifest.total());
    for cell in 0..cells {
        data.extend_from_slice(&x_t.data[cell * x_t.channels..(cell + 1) * x_t.channels]);
        data.extend_from_slice(&ref_latent.data[cell * ref_latent.channels..(cell + 1) * ref_latent.channels]);
        data.push(pooled_mask.data()[cell]);
    }
    Ok(LatentAssembly {
        frames: x_t.frames,
        height: x_t.height,
        width: x_t.width,
        manifest,
        data,
    })
}

/// A latent cell is an interaction (HOI) token iff its pooled mask value
/// exceeds the threshold; the default threshold 0 marks any overlap.
pub fn classify_tokens<T: Scalar>(pooled_mask: &Tensor<T>, threshold: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid(
            "classify_tokens",
            format!("threshold must lie in [0, 1), got {threshold}"),
        ));
    }
    Ok(pooled_mask
        .data()
        .iter()
        .map(|v| v.to_f64() > threshold)
        .collect())
}

/// Token layout for the joint sequence given pooled mask and reference
/// token count.
pub fn layout_from_mask<T: Scalar>(
    pooled_mask: &Tensor<T>,
    threshold: f64,
    n_ref: usize,
) -> Result<TokenLayout> {
    let flags = classify_tokens(pooled_mask, threshold)?;
    TokenLayout::new(flags.len(), n_ref, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::build_flow_mask;
    use crate::rng::Key;
    use proptest::prelude::*;

    fn random_video(f: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let key = Key::new(seed);
        let data = (0..f * h * w * 3)
            .map(|i| (key.f64_at(i as u64) * 2.0 - 1.0) as f32)
            .collect();
        VideoTensor::new(f, h, w, data).unwrap()
    }

    fn random_mask(f: usize, h: usize, w: usize, seed: u64) -> MaskVideo {
        let key = Key::new(seed).stream("mask");
        let data = (0..f * h * w).map(|i| (key.u64_at(i as u64) & 1) as u8).collect();
        MaskVideo::new(f, h, w, data).unwrap()
    }

    #[test]
    fn zero_mask_is_identity_bitwise() {
        let v = random_video(3, 4, 4, 1);
        let m = MaskVideo::zeros(3, 4, 4);
        let out = make_reference_video(&v, &m, ConditionMode::FirstFrame).unwrap();
        assert_eq!(v.data(), out.data());
    }

    #[test]
    fn full_mask_first_frame() {
        let v = random_video(3, 2, 2, 2);
        let m = MaskVideo::ones(3, 2, 2);
        let out = make_reference_video(&v, &m, ConditionMode::FirstFrame).unwrap();
        assert_eq!(out.frame(0).data(), v.frame(0).data());
        for f in 1..3 {
            assert!(out.frame(f).data().iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn full_mask_first_last_frame() {
        let v = random_video(4, 2, 2, 3);
        let m = MaskVideo::ones(4, 2, 2);
        let out = make_reference_video(&v, &m, ConditionMode::FirstLastFrame).unwrap();
        assert_eq!(out.frame(0).data(), v.frame(0).data());
        assert_eq!(out.frame(3).data(), v.frame(3).data());
        for f in 1..3 {
            assert!(out.frame(f).data().iter().all(|&p| p == 0.0));
        }
    }

    proptest! {
        // background pixels equal the source bitwise, any mask, any mode
        #[test]
        fn background_preserved(seed in 0u64..500, flf in proptest::bool::ANY) {
            let v = random_video(3, 4, 4, seed);
            let m = random_mask(3, 4, 4, seed.wrapping_add(1));
            let mode = if flf { ConditionMode::FirstLastFrame } else { ConditionMode::FirstFrame };
            let out = make_reference_video(&v, &m, mode).unwrap();
            for f in 0..3 {
                for h in 0..4 {
                    for w in 0..4 {
                        if !m.get(f, h, w) || mode.is_clean_frame(f, 3) {
                            prop_assert_eq!(v.pixel(f, h, w), out.pixel(f, h, w));
                        } else {
                            prop_assert_eq!(out.pixel(f, h, w), [0.0f32; 3]);
                        }
                    }
                }
            }
        }

        // lossless codec round trip, several strides
        #[test]
        fn codec_roundtrip_bitwise(seed in 0u64..500, stride in 1usize..4) {
            let v = random_video(2, 12, 12, seed);
            let l = encode_stub(&v, stride).unwrap();
            let back = decode_stub(&l, stride).unwrap();
            prop_assert_eq!(v.data(), back.data());
        }
    }

    #[test]
    fn codec_shapes() {
        let v = random_video(2, 4, 4, 9);
        let l = encode_stub(&v, 2).unwrap();
        assert_eq!((l.frames, l.height, l.width, l.channels), (2, 2, 2, 12));
        // stride 1 is the identity layout
        let l1 = encode_stub(&v, 1).unwrap();
        assert_eq!(l1.data, v.data().to_vec());
        assert!(encode_stub(&random_video(1, 3, 3, 0), 2).is_err());
    }

    #[test]
    fn pool_mask_examples() {
        // constant masks pool to their constant
        let ones = MaskVideo::ones(1, 4, 4);
        let p = pool_mask::<f64>(&ones, 2).unwrap();
        assert!(p.data().iter().all(|&v| v == 1.0));

        // 2x2 block [1,1,0,0] -> 0.5
        let m = MaskVideo::new(1, 2, 2, vec![1, 1, 0, 0]).unwrap();
        let p = pool_mask::<f64>(&m, 2).unwrap();
        assert_eq!(p.data(), &[0.5]);

        // checkerboard -> uniform 0.5
        let data: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
        let m = MaskVideo::new(1, 4, 4, data).unwrap();
        let p = pool_mask::<f64>(&m, 2).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));

        assert!(pool_mask::<f64>(&MaskVideo::zeros(1, 5, 4), 2).is_err());
    }

    #[test]
    fn pool_fraction_exact_dyadic() {
        let m = random_mask(2, 8, 8, 5);
        let p = pool_mask::<f32>(&m, 2).unwrap();
        for (cell, &v) in p.data().iter().enumerate() {
            let f = cell / 16;
            let bh = (cell % 16) / 4;
            let bw = cell % 4;
            let mut count = 0;
            for dy in 0..2 {
                for dx in 0..2 {
                    count += m.get(f, bh * 2 + dy, bw * 2 + dx) as u32;
                }
            }
            assert_eq!(v, count as f32 / 4.0);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn assembly_channel_count_and_roundtrip() {
        let v = random_video(2, 4, 4, 11);
        let m = random_mask(2, 4, 4, 12);
        let x_t = encode_stub(&v, 2).unwrap();
        let r = encode_stub(&make_reference_video(&v, &m, ConditionMode::FirstFrame).unwrap(), 2).unwrap();
        let pooled = pool_mask::<f32>(&m, 2).unwrap();
        let asm = assemble_latent(&x_t, &r, &pooled).unwrap();
        assert_eq!(asm.manifest.total(), 25);
        let (n2, r2, p2) = asm.split();
        assert_eq!(n2.data, x_t.data);
        assert_eq!(r2.data, r.data);
        assert_eq!(p2.data(), pooled.data());
    }

    #[test]
    fn zero_mask_assembly_mask_channel_zero() {
        let v = random_video(1, 4, 4, 13);
        let x_t = encode_stub(&v, 2).unwrap();
        let r = x_t.clone();
        let pooled = pool_mask::<f32>(&MaskVideo::zeros(1, 4, 4), 2).unwrap();
        let asm = assemble_latent(&x_t, &r, &pooled).unwrap();
        let c = asm.manifest.total();
        for cell in 0..asm.cells() {
            assert_eq!(asm.data[cell * c + c - 1], 0.0);
        }
    }

    #[test]
    fn classify_examples() {
        let pooled = Tensor::<f64>::from_vec(vec![1, 2, 2, 1], vec![0.0, 0.25, 1.0, 0.5]).unwrap();
        let flags = classify_tokens(&pooled, 0.0).unwrap();
        assert_eq!(flags, vec![false, true, true, true]);
        assert!(classify_tokens(&pooled, 1.0).is_err());

        // all-zero mask -> no HOI tokens -> flow mask has no restrictions
        let zeros = Tensor::<f64>::zeros(vec![1, 2, 2, 1]);
        let layout = layout_from_mask(&zeros, 0.0, 0).unwrap();
        assert!(layout.hoi_flags().iter().all(|&f| !f));
        let mask = build_flow_mask(&layout);
        for q in 0..4 {
            for k in 0..4 {
                assert!(mask.allowed(q, k));
            }
        }
    }

    fn const_ref(h: usize, w: usize, rgb: [f32; 3]) -> VideoTensor {
        let mut r = VideoTensor::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                r.set_pixel(0, y, x, rgb);
            }
        }
        r
    }

    #[test]
    fn ref_in_bbox_constant_color() {
        let v = random_video(3, 6, 6, 21);
        let mut m = MaskVideo::zeros(3, 6, 6);
        for f in 1..3 {
            for h in 2..5 {
                for w in 1..4 {
                    m.set(f, h, w, true);
                }
            }
        }
        let r = const_ref(2, 2, [0.25, -0.5, 1.0]);
        let out = ref_in_bbox(&v, &m, &r).unwrap();
        assert_eq!(out.frame(0).data(), v.frame(0).data());
        for f in 1..3 {
            for h in 0..6 {
                for w in 0..6 {
                    if m.get(f, h, w) {
                        assert_eq!(out.pixel(f, h, w), [0.25, -0.5, 1.0]);
                    } else {
                        assert_eq!(out.pixel(f, h, w), v.pixel(f, h, w));
                    }
                }
            }
        }
    }

    #[test]
    fn ref_in_bbox_same_size_is_copy() {
        let v = random_video(2, 5, 5, 22);
        let mut m = MaskVideo::zeros(2, 5, 5);
        for h in 1..4 {
            for w in 2..5 {
                m.set(1, h, w, true);
            }
        }
        let r = random_video(1, 3, 3, 23); // exactly the bbox size
        let out = ref_in_bbox(&v, &m, &r).unwrap();
        for h in 1..4 {
            for w in 2..5 {
                assert_eq!(out.pixel(1, h, w), r.pixel(0, h - 1, w - 2));
            }
        }
    }

    #[test]
    fn ref_in_bbox_nearest_neighbor_replication() {
        // 2x2 reference into a 4x4 box: each texel covers a 2x2 area
        let v = random_video(2, 4, 4, 24);
        let m = {
            let mut m = MaskVideo::zeros(2, 4, 4);
            for h in 0..4 {
                for w in 0..4 {
                    m.set(1, h, w, true);
                }
            }
            m
        };
        let r = random_video(1, 2, 2, 25);
        let out = ref_in_bbox(&v, &m, &r).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                assert_eq!(out.pixel(1, h, w), r.pixel(0, h / 2, w / 2));
            }
        }
    }

    #[test]
    fn ref_in_bbox_empty_frame_rejected() {
        let v = random_video(3, 4, 4, 26);
        let mut m = MaskVideo::zeros(3, 4, 4);
        m.set(1, 0, 0, true); // frame 2 stays empty
        let r = const_ref(1, 1, [0.0; 3]);
        let err = ref_in_bbox(&v, &m, &r).unwrap_err();
        assert!(err.to_string().contains("frame 2"));
    }

    #[test]
    fn video_range_validated() {
        assert!(VideoTensor::new(1, 1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(MaskVideo::new(1, 1, 2, vec![0, 2]).is_err());
    }
}
