//! On-disk formats: datasets, checkpoints, CSV files and config hashes.
//!
//! Tensor payloads use the shared serialization (one JSON header line,
//! then little-endian values). Videos and masks get a JSON sidecar naming
//! their kind and extents. Every run CSV starts with a
//! `# config_hash=...` comment so tables stay traceable to the resolved
//! configuration that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hcu::{ChannelManifest, MaskVideo, VideoTensor};
use crate::model::{ModelConfig, ParamStore, ToyDiTModel};
use crate::synthdata::{Sample, SceneSpec};
use crate::tensor::Tensor;

/// First 12 hex chars of the SHA-256 of a config's canonical JSON.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_string(config)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(hex_prefix(&digest, 12))
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Write a CSV body prefixed with the config-hash comment line.
pub fn write_csv(path: impl AsRef<Path>, hash: &str, body: &str) -> Result<()> {
    let content = format!("# config_hash={hash}\n{body}");
    std::fs::write(path, content)?;
    Ok(())
}

/// Read a CSV written by [`write_csv`]; returns (hash, body lines).
pub fn read_csv(path: impl AsRef<Path>) -> Result<(String, Vec<String>)> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let first = lines.next().ok_or_else(|| Error::format("empty csv"))?;
    let hash = first
        .strip_prefix("# config_hash=")
        .ok_or_else(|| Error::format("missing config_hash comment"))?
        .to_string();
    Ok((hash, lines.map(str::to_string).collect()))
}

#[derive(Serialize, Deserialize)]
struct MediaSidecar {
    kind: String,
    extents: [usize; 3],
}

pub fn save_video(path: impl AsRef<Path>, v: &VideoTensor) -> Result<()> {
    let path = path.as_ref();
    v.to_tensor().save(path)?;
    let sidecar = MediaSidecar {
        kind: "video".into(),
        extents: [v.frames(), v.height(), v.width()],
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn load_video(path: impl AsRef<Path>) -> Result<VideoTensor> {
    let path = path.as_ref();
    let sidecar: MediaSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.kind != "video" {
        return Err(Error::format(format!("expected video, sidecar says {}", sidecar.kind)));
    }
    let t = Tensor::<f32>::load(path)?;
    let v = VideoTensor::from_tensor(&t)?;
    if [v.frames(), v.height(), v.width()] != sidecar.extents {
        return Err(Error::format("sidecar extents disagree with payload"));
    }
    Ok(v)
}

pub fn save_mask(path: impl AsRef<Path>, m: &MaskVideo) -> Result<()> {
    let path = path.as_ref();
    m.to_tensor().save(path)?;
    let sidecar = MediaSidecar {
        kind: "mask".into(),
        extents: [m.frames(), m.height(), m.width()],
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVideo> {
    let path = path.as_ref();
    let sidecar: MediaSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.kind != "mask" {
        return Err(Error::format(format!("expected mask, sidecar says {}", sidecar.kind)));
    }
    let t = Tensor::<f32>::load(path)?;
    MaskVideo::from_tensor(&t)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub template: SceneSpec,
    pub master_seed: u64,
    pub n: usize,
    pub samples: Vec<DatasetSampleEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSampleEntry {
    pub seed: u64,
    pub texture_seed: u64,
}

/// Write `sample_{i}/{video,mask,ref,trajectory.csv}` plus a manifest.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample], template: &SceneSpec, master_seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let sdir = dir.join(format!("sample_{i}"));
        std::fs::create_dir_all(&sdir)?;
        save_video(sdir.join("video"), &s.video)?;
        save_mask(sdir.join("mask"), &s.mask)?;
        save_video(sdir.join("ref"), &s.ref_image)?;
        let mut csv = String::from("frame,cy,cx\n");
        for (f, c) in s.trajectory.iter().enumerate() {
            csv.push_str(&format!("{f},{},{}\n", c[0], c[1]));
        }
        std::fs::write(sdir.join("trajectory.csv"), csv)?;
    }
    let manifest = DatasetManifest {
        schema: "1".into(),
        template: template.clone(),
        master_seed,
        n: samples.len(),
        samples: samples
            .iter()
            .map(|s| DatasetSampleEntry {
                seed: s.sample_seed,
                texture_seed: s.texture_seed,
            })
            .collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.as_ref().join("manifest.json"))?)?;
    if manifest.schema != "1" {
        return Err(Error::format(format!("unsupported dataset schema {}", manifest.schema)));
    }
    Ok(manifest)
}

/// Load samples back from disk (media from files, provenance from the
/// manifest).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let manifest = load_dataset_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.n);
    for (i, entry) in manifest.samples.iter().enumerate() {
        let sdir = dir.join(format!("sample_{i}"));
        let video = load_video(sdir.join("video"))?;
        let mask = load_mask(sdir.join("mask"))?;
        let ref_image = load_video(sdir.join("ref"))?;
        let mut trajectory = Vec::new();
        for line in std::fs::read_to_string(sdir.join("trajectory.csv"))?.lines().skip(1) {
            let mut cols = line.split(',');
            let _f = cols.next();
            let cy: i64 = cols
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("bad trajectory row"))?;
            let cx: i64 = cols
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("bad trajectory row"))?;
            trajectory.push([cy, cx]);
        }
        out.push(Sample {
            video,
            mask,
            ref_image,
            trajectory,
            spec: manifest.template.clone(),
            sample_seed: entry.seed,
            texture_seed: entry.texture_seed,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: usize,
    pub model: ModelConfig,
    pub channel_manifest: ChannelManifest,
}

/// Write manifest.json, params/*.ra and (when given) optim/*.{m,v}.ra.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &ToyDiTModel<f32>,
    optim: Option<(&ParamStore<f32>, &ParamStore<f32>)>,
    step: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("params"))?;
    let manifest = CheckpointManifest {
        format: "1".into(),
        step,
        model: model.config.clone(),
        channel_manifest: model.config.channel_manifest(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for (name, t) in model.params.iter() {
        t.save(dir.join("params").join(format!("{name}.ra")))?;
    }
    if let Some((m1, m2)) = optim {
        std::fs::create_dir_all(dir.join("optim"))?;
        for (name, t) in m1.iter() {
            t.save(dir.join("optim").join(format!("{name}.m.ra")))?;
        }
        for (name, t) in m2.iter() {
            t.save(dir.join("optim").join(format!("{name}.v.ra")))?;
        }
    }
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: ToyDiTModel<f32>,
    pub optim: Option<(ParamStore<f32>, ParamStore<f32>)>,
    pub step: usize,
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != "1" {
        return Err(Error::format(format!("unsupported checkpoint format {}", manifest.format)));
    }
    let mut model = ToyDiTModel::<f32>::init(manifest.model.clone())?;
    for name in model.params.names() {
        let path = dir.join("params").join(format!("{name}.ra"));
        let t = Tensor::<f32>::load(&path).map_err(|e| {
            Error::format(format!("checkpoint missing parameter {name}: {e}"))
        })?;
        let slot = model.params.get_mut(&name).unwrap();
        if t.shape() != slot.shape() {
            return Err(Error::format(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    let optim_dir = dir.join("optim");
    let optim = if optim_dir.is_dir() {
        let mut m1 = ParamStore::new();
        let mut m2 = ParamStore::new();
        for name in model.params.names() {
            m1.insert(&name, Tensor::<f32>::load(optim_dir.join(format!("{name}.m.ra")))?);
            m2.insert(&name, Tensor::<f32>::load(optim_dir.join(format!("{name}.v.ra")))?);
        }
        Some((m1, m2))
    } else {
        None
    };
    Ok(LoadedCheckpoint {
        model,
        optim,
        step: manifest.step,
    })
}

/// True when a directory exists and has any entry.
pub fn dir_non_empty(dir: impl AsRef<Path>) -> bool {
    std::fs::read_dir(dir.as_ref())
        .map(|mut it| it.next().is_some())
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::gen_dataset;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            canvas_h: 12,
            canvas_w: 12,
            frames: 4,
            object_h: 4,
            object_w: 4,
            texture_seed: 3,
            amplitude: 1.0,
            frequency: 1.0,
            phase: 0.0,
            hand_radius: 1,
            dilation: 1,
            background_id: 1,
        }
    }

    #[test]
    fn dataset_roundtrip_bitwise() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let samples = gen_dataset(3, &spec, 7).unwrap();
        save_dataset(tmp.path(), &samples, &spec, 7).unwrap();
        let back = load_dataset(tmp.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.video.data(), b.video.data());
            assert_eq!(a.mask.data(), b.mask.data());
            assert_eq!(a.ref_image.data(), b.ref_image.data());
            assert_eq!(a.trajectory, b.trajectory);
            assert_eq!(a.texture_seed, b.texture_seed);
        }
    }

    #[test]
    fn sidecar_kind_enforced() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let s = gen_dataset(1, &spec, 1).unwrap().remove(0);
        save_video(tmp.path().join("video"), &s.video).unwrap();
        assert!(load_mask(tmp.path().join("video")).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        use crate::model::{LatentExtents, ModelConfig, RefInjection, ToyDiTModel};
        use crate::rope::RopeMode;
        let cfg = ModelConfig {
            n_blocks: 1,
            d_model: 12,
            n_head: 2,
            head_dim: 6,
            mlp_ratio: 2,
            rope_mode: RopeMode::SeparateRef,
            hard_mask_enabled: false,
            gate_enabled: true,
            ref_injection: RefInjection::Tokens,
            condition_mode: crate::hcu::ConditionMode::FirstFrame,
            latent: LatentExtents {
                frames: 2,
                height: 2,
                width: 2,
            },
            codec_stride: 1,
            rope_base: 10000.0,
            hoi_threshold: 0.0,
            seed: 9,
        };
        let model = ToyDiTModel::<f32>::init(cfg).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_checkpoint(tmp.path(), &model, None, 42).unwrap();
        let loaded = load_checkpoint(tmp.path()).unwrap();
        assert_eq!(loaded.step, 42);
        assert!(loaded.optim.is_none());
        for (name, t) in model.params.iter() {
            assert_eq!(loaded.model.params.get(name).unwrap().data(), t.data());
        }
    }

    #[test]
    fn config_hash_stable_and_sensitive() {
        let a = serde_json::json!({"x": 1, "y": "z"});
        let b = serde_json::json!({"x": 2, "y": "z"});
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 12);
    }

    #[test]
    fn csv_comment_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("t.csv");
        write_csv(&p, "abc", "h1,h2\n1,2\n").unwrap();
        let (hash, lines) = read_csv(&p).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(lines, vec!["h1,h2", "1,2"]);
    }
}
