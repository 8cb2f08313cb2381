//! Dataset generation and loading: PNG frames plus a JSON manifest, byte
//! reproducible from the seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::puppet::{
    render, sample_pose, sample_spec, AngleLimits, PuppetPose, PuppetSpec, KEYPOINT_NAMES,
};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct FrameRecord {
    pub rgb_path: String,
    pub mask_path: String,
    /// `[u, v, visible]` per keypoint.
    pub keypoints: Vec<[f64; 3]>,
    pub angles: Vec<f64>,
    pub azimuth: f64,
    pub root: [f64; 2],
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct IdentityRecord {
    pub spec: PuppetSpec,
    pub background_path: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub resolution: usize,
    pub keypoint_names: Vec<String>,
    pub identities: Vec<IdentityRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// PNG round trip
// ---------------------------------------------------------------------------

fn to_u8(v: f32) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

fn from_u8(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Save a `[3, H, W]` tensor in [-1, 1] as 8-bit RGB.
pub fn save_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut buf = vec![0u8; h * w * 3];
    for i in 0..h * w {
        for ch in 0..3 {
            buf[i * 3 + ch] = to_u8(t.data()[ch * h * w + i]);
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

/// Save a binary `[H, W]` mask as 8-bit grayscale.
pub fn save_mask(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let buf: Vec<u8> = t.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::<f32>::zeros(&[3, h, w]);
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            t.data_mut()[ch * h * w + i] = from_u8(px.0[ch]);
        }
    }
    Ok(t)
}

pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[h, w], data)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Generate `n_identities x frames_per_identity` frames at `resolution`,
/// writing PNGs and the manifest under `out_dir`. Rejects an existing
/// manifest.
pub fn make_dataset(
    n_identities: usize,
    frames_per_identity: usize,
    resolution: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<Manifest> {
    if n_identities == 0 || frames_per_identity == 0 {
        return Err(Error::invalid("need at least one identity and one frame"));
    }
    if resolution < 16 {
        return Err(Error::invalid("resolution must be >= 16"));
    }
    let manifest_path = out_dir.join("manifest.json");
    if manifest_path.exists() {
        return Err(Error::Manifest(format!(
            "refusing to overwrite existing manifest {}",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    fs::create_dir_all(out_dir.join("backgrounds"))?;

    let limits = AngleLimits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identities = Vec::with_capacity(n_identities);
    for id in 0..n_identities {
        let spec = sample_spec(&mut rng);
        let mut frames = Vec::with_capacity(frames_per_identity);
        let mut bg_path = String::new();
        for fr in 0..frames_per_identity {
            let pose = sample_pose(&mut rng, &limits);
            let sample = render(&spec, &pose, resolution);
            let rgb_rel = format!("images/id{id:03}_f{fr:04}.png");
            let mask_rel = format!("masks/id{id:03}_f{fr:04}.png");
            save_rgb(&out_dir.join(&rgb_rel), &sample.rgb)?;
            save_mask(&out_dir.join(&mask_rel), &sample.mask)?;
            if fr == 0 {
                bg_path = format!("backgrounds/id{id:03}.png");
                save_rgb(&out_dir.join(&bg_path), &sample.background)?;
            }
            frames.push(FrameRecord {
                rgb_path: rgb_rel,
                mask_path: mask_rel,
                keypoints: sample
                    .keypoints
                    .keypoints
                    .iter()
                    .map(|k| [k[0], k[1], 1.0])
                    .collect(),
                angles: sample.pose.angles.to_vec(),
                azimuth: sample.pose.azimuth_deg,
                root: sample.pose.root_offset,
            });
        }
        identities.push(IdentityRecord {
            spec,
            background_path: bg_path,
            frames,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        resolution,
        keypoint_names: KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        identities,
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// In-memory dataset for training and evaluation
// ---------------------------------------------------------------------------

/// One frame held in RAM (images stay 8-bit until use).
pub struct LoadedFrame {
    pub rgb: Vec<u8>,
    pub mask: Vec<u8>,
    pub pose: Pose,
    pub puppet_pose: PuppetPose,
}

pub struct LoadedIdentity {
    pub background: Vec<u8>,
    pub frames: Vec<LoadedFrame>,
    pub spec: PuppetSpec,
}

pub struct LoadedDataset {
    pub resolution: usize,
    pub identities: Vec<LoadedIdentity>,
}

impl LoadedDataset {
    pub fn load(manifest_path: &Path) -> Result<LoadedDataset> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let n = manifest.resolution;
        let mut identities = Vec::with_capacity(manifest.identities.len());
        for id in &manifest.identities {
            let background = read_rgb_bytes(&root.join(&id.background_path), n)?;
            let mut frames = Vec::with_capacity(id.frames.len());
            for fr in &id.frames {
                let rgb = read_rgb_bytes(&root.join(&fr.rgb_path), n)?;
                let mask = read_mask_bytes(&root.join(&fr.mask_path), n)?;
                if fr.keypoints.is_empty() {
                    return Err(Error::Manifest("frame without keypoints".into()));
                }
                let mut pose = Pose::new(fr.keypoints.iter().map(|k| [k[0], k[1]]).collect());
                for (v, k) in pose.visibility.iter_mut().zip(&fr.keypoints) {
                    *v = k[2] != 0.0;
                }
                let mut angles = [0.0; 10];
                for (a, &v) in angles.iter_mut().zip(fr.angles.iter()) {
                    *a = v;
                }
                frames.push(LoadedFrame {
                    rgb,
                    mask,
                    pose,
                    puppet_pose: PuppetPose {
                        angles,
                        azimuth_deg: fr.azimuth,
                        root_offset: fr.root,
                    },
                });
            }
            identities.push(LoadedIdentity {
                background,
                frames,
                spec: id.spec.clone(),
            });
        }
        Ok(LoadedDataset {
            resolution: n,
            identities,
        })
    }

    pub fn frame_rgb(&self, identity: usize, frame: usize) -> Tensor<f32> {
        bytes_to_rgb(&self.identities[identity].frames[frame].rgb, self.resolution)
    }

    pub fn frame_mask(&self, identity: usize, frame: usize) -> Tensor<f32> {
        bytes_to_mask(&self.identities[identity].frames[frame].mask, self.resolution)
    }

    pub fn background(&self, identity: usize) -> Tensor<f32> {
        bytes_to_rgb(&self.identities[identity].background, self.resolution)
    }
}

fn read_rgb_bytes(path: &Path, n: usize) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Manifest(format!("missing frame {}: {e}", path.display())))?
        .into_rgb8();
    if img.width() as usize != n || img.height() as usize != n {
        return Err(Error::Manifest(format!(
            "frame {} is {}x{}, expected {n}x{n}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img.into_raw())
}

fn read_mask_bytes(path: &Path, n: usize) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Manifest(format!("missing mask {}: {e}", path.display())))?
        .into_luma8();
    if img.width() as usize != n || img.height() as usize != n {
        return Err(Error::Manifest(format!(
            "mask {} is {}x{}, expected {n}x{n}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img.into_raw())
}

pub fn bytes_to_rgb(buf: &[u8], n: usize) -> Tensor<f32> {
    let mut t = Tensor::<f32>::zeros(&[3, n, n]);
    for i in 0..n * n {
        for ch in 0..3 {
            t.data_mut()[ch * n * n + i] = from_u8(buf[i * 3 + ch]);
        }
    }
    t
}

pub fn bytes_to_mask(buf: &[u8], n: usize) -> Tensor<f32> {
    Tensor::from_vec(
        &[n, n],
        buf.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask size")
}
