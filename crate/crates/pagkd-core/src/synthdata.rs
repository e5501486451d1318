//! Synthetic two-modality lesion-classification benchmark. The class
//! signal lives in class-conditional latents: a texture frequency band
//! (disjoint per class) confined to blob-shaped lesion regions, plus the
//! lesion count itself. The NBI render keeps full lesion contrast; the
//! WLI render attenuates it, adds a color cast and illumination noise —
//! every degradation scales with the gap parameter, so gap 0 makes the
//! modalities identical and gap 1 removes the class signal from WLI
//! entirely.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::grouping::{ManifestRow, Modality};
use crate::rng;
use crate::tensor::{self, Tensor};

pub const NUM_FOLDS: usize = 5;

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub classes: usize,
    pub per_class: usize,
    pub pairing: f64,
    pub gap: f64,
    pub image_side: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 3,
            per_class: 120,
            pairing: 0.4,
            gap: 0.5,
            image_side: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LesionInstance {
    pub instance_id: usize,
    pub class: usize,
    pub blobs: Vec<(f64, f64, f64)>, // (cx, cy, radius) in unit coordinates
    pub texture_freq: f64,
    pub texture_angle: f64,
    pub texture_phase: f64,
}

/// Latents are class-conditional on two axes: texture frequency bands
/// [3+3c, 4.5+3c] cycles per image (disjoint, separated by 1.5 cycles)
/// and blob count 1+c..2+c (overlapping between adjacent classes). The
/// frequency signal is spatially local to the lesions; the blob-extent
/// signal shows up in global image statistics.
fn sample_instance(cfg: &GenConfig, instance_id: usize, class: usize) -> LesionInstance {
    let mut r = rng::stream(cfg.seed, &format!("instance-{instance_id}"));
    let texture_freq = 3.0 + 3.0 * class as f64 + r.gen::<f64>() * 1.5;
    let texture_angle = r.gen::<f64>() * std::f64::consts::PI;
    let texture_phase = r.gen::<f64>() * std::f64::consts::TAU;
    let blob_count = 1 + class + (r.gen::<u32>() % 2) as usize;
    let blobs = (0..blob_count)
        .map(|_| {
            let cx = 0.25 + r.gen::<f64>() * 0.5;
            let cy = 0.25 + r.gen::<f64>() * 0.5;
            let rad = 0.15 + r.gen::<f64>() * 0.15;
            (cx, cy, rad)
        })
        .collect();
    LesionInstance {
        instance_id,
        class,
        blobs,
        texture_freq,
        texture_angle,
        texture_phase,
    }
}

/// Renders one modality of an instance as a [3, side, side] tensor in
/// [0, 1]. Paired images share latents exactly; only rendering differs.
pub fn render(inst: &LesionInstance, modality: Modality, gap: f64, side: usize, seed: u64) -> Tensor {
    let s = side as f64;
    let amp = match modality {
        Modality::Nbi => 0.35,
        Modality::Wli => 0.35 * (1.0 - gap),
    };
    let (cast, noise_std) = match modality {
        Modality::Nbi => (0.0, 0.0),
        Modality::Wli => (0.15 * gap, 0.25 * gap),
    };
    // lesion-extent contrast in the outer channels attenuates with the
    // gap just like the texture: NBI sees it cleanly, WLI sees it weakly
    // under the illumination noise
    let vis = match modality {
        Modality::Nbi => 0.10,
        Modality::Wli => 0.10 * (1.0 - 0.8 * gap),
    };
    let mut noise_rng = rng::stream(seed, &format!("wli-noise-{}", inst.instance_id));
    let mut data = vec![0.0; 3 * side * side];
    let (ca, sa) = (inst.texture_angle.cos(), inst.texture_angle.sin());
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let mut mask: f64 = 0.0;
            for &(cx, cy, rad) in &inst.blobs {
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                mask = mask.max((-d2 / (2.0 * rad * rad)).exp());
            }
            let t = (std::f64::consts::TAU * inst.texture_freq * (u * ca + v * sa)
                + inst.texture_phase)
                .sin();
            let p = y * side + x;
            let noise = if noise_std > 0.0 {
                // Box-Muller; one draw per pixel keeps the stream layout-stable
                let (u1, u2): (f64, f64) = (noise_rng.gen::<f64>().max(1e-12), noise_rng.gen());
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * noise_std
            } else {
                0.0
            };
            data[p] = (0.55 + vis * mask + cast + noise).clamp(0.0, 1.0);
            data[side * side + p] = (0.50 + amp * mask * t + noise).clamp(0.0, 1.0);
            data[2 * side * side + p] = (0.45 + vis * mask - cast + noise).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, side, side], data)
}

pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// Writes one archive file per image plus a manifest CSV. The first
/// `pairing * per_class` instances of every class are rendered in both
/// modalities and assigned a stratified fold; the rest alternate between
/// single-modality NBI and WLI renders with no fold.
pub fn generate(cfg: &GenConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    if cfg.per_class < 10 {
        return Err(Error::Config(format!(
            "need at least 10 instances per class, got {}",
            cfg.per_class
        )));
    }
    if !(0.0..=1.0).contains(&cfg.pairing) {
        return Err(Error::Config(format!(
            "pairing fraction must lie in [0, 1], got {}",
            cfg.pairing
        )));
    }
    let paired_per_class = (cfg.pairing * cfg.per_class as f64).round() as usize;
    if paired_per_class == 0 {
        return Err(Error::Config(
            "pairing fraction produces zero paired instances; evaluation requires paired data"
                .into(),
        ));
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir)?;

    let mut rows = Vec::new();
    let mut next_image_id = 0usize;
    let mut unpaired_toggle = Modality::Nbi;
    for class in 0..cfg.classes {
        for i in 0..cfg.per_class {
            let instance_id = class * cfg.per_class + i;
            let inst = sample_instance(cfg, instance_id, class);
            let paired = i < paired_per_class;
            let modalities: Vec<Modality> = if paired {
                vec![Modality::Nbi, Modality::Wli]
            } else {
                let m = unpaired_toggle;
                unpaired_toggle = unpaired_toggle.other();
                vec![m]
            };
            // stratified by construction: within a class, paired instances
            // are dealt to folds round-robin
            let fold = paired.then_some(i % NUM_FOLDS);
            for modality in modalities {
                let img = render(&inst, modality, cfg.gap, cfg.image_side, cfg.seed);
                let file = format!("images/img_{next_image_id:05}.pgkd");
                tensor::save_archive(out_dir.join(&file), &[("image".to_string(), &img)])?;
                rows.push(ManifestRow {
                    id: next_image_id.to_string(),
                    path: file,
                    class,
                    modality,
                    pair_id: paired.then(|| instance_id.to_string()),
                    split: if paired { "paired" } else { "unpaired" }.to_string(),
                    fold,
                });
                next_image_id += 1;
            }
        }
    }
    let manifest_path = out_dir.join("manifest.csv");
    crate::grouping::save_manifest(&manifest_path, &rows)?;
    Ok(GeneratedDataset {
        manifest_path,
        rows,
    })
}
