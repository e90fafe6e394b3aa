//! Deterministic synthetic multi-spectral dataset generator.
//!
//! Every sample is rendered from a per-class spectral profile: a mean
//! reflectance per band (7 F_M + 4 F_S + 1 F_L + 1 B_N), a band-limited
//! texture (three seeded sinusoidal gratings with class-specific
//! frequencies) and white Gaussian noise, quantized to the modality's bit
//! depth on top of a constant dark level. Bona-fide skin carries a strong
//! reflectance dip in the 1450 nm band; speckle (F_L) frames get
//! per-frame-decorrelated noise for bona-fides and a static noise field
//! for attacks.
//!
//! Per-sample RNG streams are derived from (seed, sample_id), so rendering
//! order and parallelism cannot change the output.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    save_manifest, CollectionSite, DatasetManifest, ManifestError, Modality, PaiAttributes,
    SampleRecord, Transparency, BONA_FIDE_SENTINEL,
};
use crate::tensorio::{write_blob, TensorBlob, TensorData, TensorIoError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
}

/// Number of spectral bands a profile describes: the 7 F_M channels, the 4
/// F_S channels, one F_L band and one B_N band.
pub const PROFILE_BANDS: usize = 13;

/// Index of the 1450 nm band inside the profile vector.
pub const BAND_1450NM: usize = 9;

/// Spectral and textural description of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryProfile {
    /// Grouping key (doubles as the leave-one-attack-out category).
    pub name: String,
    pub pai_code: String,
    pub material: String,
    pub species: String,
    pub transparency: Transparency,
    pub attack_type: String,
    /// Mean reflectance per band, each in [0, 1].
    pub band_means: Vec<f64>,
    pub texture_amplitude: f64,
    /// (cycles/px along x, cycles/px along y) of the three gratings.
    pub texture_freqs: [(f64, f64); 3],
}

impl CategoryProfile {
    fn pai_attributes(&self) -> PaiAttributes {
        PaiAttributes {
            pai_code: self.pai_code.clone(),
            material: self.material.clone(),
            species: self.species.clone(),
            transparency: self.transparency,
            attack_type: self.attack_type.clone(),
            category_for_loo: self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_participants: usize,
    pub fingers_per_participant: usize,
    /// Fraction of each participant's fingers presented as attacks.
    pub pa_fraction: f64,
    pub bona_fide: CategoryProfile,
    pub categories: Vec<CategoryProfile>,
    pub noise_sigma: f64,
    /// Synthetic capture size shared by all modalities (desk scale).
    pub frame_width: usize,
    pub frame_height: usize,
    /// Constant non-illuminated level, fraction of full scale.
    pub dark_level: f64,
    pub seed: u64,
}

fn bona_fide_profile() -> CategoryProfile {
    CategoryProfile {
        name: BONA_FIDE_SENTINEL.into(),
        pai_code: BONA_FIDE_SENTINEL.into(),
        material: BONA_FIDE_SENTINEL.into(),
        species: BONA_FIDE_SENTINEL.into(),
        transparency: Transparency::BonaFide,
        attack_type: BONA_FIDE_SENTINEL.into(),
        band_means: vec![
            0.55, 0.50, 0.48, 0.52, 0.55, 0.53, 0.50, // F_M
            0.45, 0.40, 0.08, 0.35, // F_S (water dip at 1450 nm)
            0.50, // F_L
            0.45, // B_N
        ],
        texture_amplitude: 0.08,
        texture_freqs: [(0.11, 0.02), (0.02, 0.11), (0.08, 0.08)],
    }
}

const MATERIALS: [(&str, Transparency, &str); 11] = [
    ("gelatin", Transparency::Semi, "overlay"),
    ("silicone", Transparency::Opaque, "overlay"),
    ("latex", Transparency::Opaque, "overlay"),
    ("ecoflex", Transparency::Semi, "overlay"),
    ("playdoh", Transparency::Opaque, "mold"),
    ("woodglue", Transparency::Semi, "overlay"),
    ("gummy", Transparency::Semi, "mold"),
    ("resin", Transparency::Opaque, "mold"),
    ("paper", Transparency::Opaque, "printout"),
    ("conductive_ink", Transparency::Opaque, "printout"),
    ("transparent_film", Transparency::Transparent, "overlay"),
];

fn default_categories() -> Vec<CategoryProfile> {
    MATERIALS
        .iter()
        .enumerate()
        .map(|(k, (material, transparency, attack_type))| {
            let kf = k as f64;
            let base = 0.35 + 0.03 * kf;
            CategoryProfile {
                name: (*material).to_string(),
                pai_code: format!("P{k:02}"),
                material: (*material).to_string(),
                species: format!("{material}_a"),
                transparency: *transparency,
                attack_type: (*attack_type).to_string(),
                band_means: vec![
                    base,
                    base + 0.05,
                    base - 0.04,
                    base + 0.02,
                    base - 0.02,
                    base + 0.04,
                    base,
                    // F_S: no water dip; 1450 nm stays bright.
                    0.50 - 0.02 * kf,
                    0.45 + 0.02 * kf,
                    0.33 + 0.03 * kf,
                    0.40 + 0.01 * kf,
                    0.35 + 0.03 * kf, // F_L
                    0.30 + 0.04 * kf, // B_N
                ],
                texture_amplitude: 0.08,
                texture_freqs: [
                    (0.020 + 0.006 * kf, 0.050),
                    (0.050, 0.020 + 0.006 * kf),
                    (0.130 + 0.004 * kf, 0.125 - 0.004 * kf),
                ],
            }
        })
        .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_participants: 30,
            fingers_per_participant: 8,
            pa_fraction: 0.5,
            bona_fide: bona_fide_profile(),
            categories: default_categories(),
            noise_sigma: 0.02,
            frame_width: 176,
            frame_height: 88,
            dark_level: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_participants == 0 || self.fingers_per_participant == 0 {
            return bad("need at least one participant and one finger".into());
        }
        if !(0.0..=1.0).contains(&self.pa_fraction) {
            return bad(format!("pa_fraction {} outside [0, 1]", self.pa_fraction));
        }
        if self.categories.len() < 2 {
            return bad(format!(
                "need >= 2 attack categories, got {}",
                self.categories.len()
            ));
        }
        if self.frame_width < 8 || self.frame_height < 8 {
            return bad("frames must be at least 8x8".into());
        }
        if self.noise_sigma < 0.0 || !(0.0..0.5).contains(&self.dark_level) {
            return bad("noise_sigma must be >= 0 and dark_level in [0, 0.5)".into());
        }
        for profile in std::iter::once(&self.bona_fide).chain(&self.categories) {
            if profile.band_means.len() != PROFILE_BANDS {
                return bad(format!(
                    "profile `{}` has {} band means, expected {PROFILE_BANDS}",
                    profile.name,
                    profile.band_means.len()
                ));
            }
            if profile.band_means.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return bad(format!("profile `{}` has band means outside [0, 1]", profile.name));
            }
            if profile.texture_amplitude < 0.0 {
                return bad(format!("profile `{}` has negative texture amplitude", profile.name));
            }
        }
        Ok(())
    }
}

/// Interpolates every attack profile's band means toward the bona-fide
/// means by `overlap`; 1.0 makes mean-intensity features uninformative and
/// leaves texture as the only class signal.
pub fn hardness_dial(cfg: &SynthConfig, overlap: f64) -> Result<SynthConfig, SynthError> {
    if !(0.0..=1.0).contains(&overlap) {
        return Err(SynthError::InvalidConfig(format!(
            "overlap {overlap} outside [0, 1]"
        )));
    }
    let mut out = cfg.clone();
    for profile in &mut out.categories {
        for (m, &bf) in profile.band_means.iter_mut().zip(&cfg.bona_fide.band_means) {
            *m = (1.0 - overlap) * *m + overlap * bf;
        }
    }
    Ok(out)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(sample_id.as_bytes()));
    rng
}

fn texture_field(
    width: usize,
    height: usize,
    profile: &CategoryProfile,
    phases: &[f64; 3],
) -> Array2<f64> {
    let amp = profile.texture_amplitude / 3.0;
    Array2::from_shape_fn((height, width), |(y, x)| {
        profile
            .texture_freqs
            .iter()
            .zip(phases)
            .map(|(&(fx, fy), &phase)| {
                (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin()
            })
            .sum::<f64>()
            * amp
    })
}

fn quantize(v: f64, full_scale: f64) -> u16 {
    (v.clamp(0.0, 1.0) * full_scale).round() as u16
}

/// Renders one modality's raw stack (illuminated frames first, dark frames
/// after) for one sample.
fn render_modality(
    cfg: &SynthConfig,
    profile: &CategoryProfile,
    is_bona_fide: bool,
    modality: Modality,
    rng: &mut ChaCha8Rng,
    phases: &[f64; 3],
) -> TensorBlob {
    let (w, h) = (cfg.frame_width, cfg.frame_height);
    let full_scale = ((1u32 << modality.bit_depth()) - 1) as f64;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let texture = texture_field(w, h, profile, phases);

    let band_mean = |frame: usize| -> f64 {
        match modality {
            Modality::Fm => profile.band_means[frame],
            Modality::Fs => profile.band_means[7 + frame],
            Modality::Fl => profile.band_means[11],
            Modality::Bn => profile.band_means[12],
            Modality::Legacy => profile.band_means[0],
        }
    };

    let n_illum = modality.illuminated_frames();
    let n_dark = modality.dark_frames();
    let mut data = Vec::with_capacity((n_illum + n_dark) * h * w);

    // Attacks show a frozen speckle pattern; live fingers decorrelate
    // between frames.
    let static_speckle: Option<Array2<f64>> = if modality == Modality::Fl && !is_bona_fide {
        Some(Array2::from_shape_fn((h, w), |_| {
            if cfg.noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            }
        }))
    } else {
        None
    };

    for frame in 0..n_illum {
        let mean = cfg.dark_level + band_mean(frame);
        for y in 0..h {
            for x in 0..w {
                let eps = match &static_speckle {
                    Some(field) => field[(y, x)],
                    None if cfg.noise_sigma > 0.0 => noise.sample(rng),
                    None => 0.0,
                };
                data.push(quantize(mean + texture[(y, x)] + eps, full_scale));
            }
        }
    }
    for _ in 0..n_dark {
        for _y in 0..h {
            for _x in 0..w {
                let eps = if cfg.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                data.push(quantize(cfg.dark_level + eps, full_scale));
            }
        }
    }
    TensorBlob::new(vec![n_illum + n_dark, h, w], TensorData::U16(data))
        .expect("synth stack shape")
}

struct SamplePlan {
    sample_id: String,
    participant_id: String,
    finger_id: String,
    category: Option<usize>,
}

fn plan_samples(cfg: &SynthConfig) -> Vec<SamplePlan> {
    let mut plans = Vec::new();
    let n_cats = cfg.categories.len();
    for p in 0..cfg.n_participants {
        let participant_id = format!("p{p:03}");
        let n_pa = (cfg.pa_fraction * cfg.fingers_per_participant as f64).round() as usize;
        // Each participant presents one or two attack categories,
        // round-robin over the taxonomy so every category is covered.
        let palette = [p % n_cats, (p * 7 + 3) % n_cats];
        let mut fingers: Vec<String> = (0..cfg.fingers_per_participant)
            .map(|f| {
                let hand = if f % 2 == 0 { 'L' } else { 'R' };
                format!("{hand}{}", f / 2 + 1)
            })
            .collect();
        // Which fingers carry attacks is a seeded per-participant draw.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(fnv1a(format!("fingers:{participant_id}").as_bytes()));
        use rand::seq::SliceRandom;
        fingers.shuffle(&mut rng);
        for (f, finger_id) in fingers.into_iter().enumerate() {
            let category = if f < n_pa {
                Some(palette[f % 2])
            } else {
                None
            };
            plans.push(SamplePlan {
                sample_id: format!("{participant_id}_{finger_id}"),
                participant_id: participant_id.clone(),
                finger_id,
                category,
            });
        }
    }
    plans
}

/// Generates the dataset under `out_dir`: tensor containers in
/// `tensors/`, the manifest as `manifest.jsonl`, and a `profiles.txt`
/// summary of the configured class profiles. Returns the loaded-back,
/// fully validated manifest.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source: io::Error| SynthError::Io {
            path: p.clone(),
            source,
        }
    };
    let tensor_dir = out_dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(io_err(&tensor_dir))?;

    let plans = plan_samples(cfg);
    let records: Vec<Result<SampleRecord, SynthError>> = plans
        .par_iter()
        .map(|plan| {
            let profile = match plan.category {
                Some(k) => &cfg.categories[k],
                None => &cfg.bona_fide,
            };
            let mut rng = sample_rng(cfg.seed, &plan.sample_id);
            let phases = [
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ];
            let mut tensor_refs = BTreeMap::new();
            for modality in Modality::CUBE_ORDER {
                let blob = render_modality(
                    cfg,
                    profile,
                    plan.category.is_none(),
                    modality,
                    &mut rng,
                    &phases,
                );
                let rel = format!("tensors/{}_{}.tns", plan.sample_id, modality.tag());
                write_blob(&out_dir.join(&rel), &blob)?;
                tensor_refs.insert(modality, rel);
            }
            Ok(SampleRecord {
                sample_id: plan.sample_id.clone(),
                participant_id: plan.participant_id.clone(),
                finger_id: plan.finger_id.clone(),
                collection_site: CollectionSite::Synth,
                ground_truth: plan.category.is_some() as u8,
                pai: match plan.category {
                    Some(k) => cfg.categories[k].pai_attributes(),
                    None => PaiAttributes::bona_fide(),
                },
                tensor_refs,
                extensions: BTreeMap::new(),
            })
        })
        .collect();
    let records: Vec<SampleRecord> = records.into_iter().collect::<Result<_, _>>()?;

    let manifest = DatasetManifest::from_records(records, out_dir.to_path_buf())?;
    save_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;

    let mut summary = String::new();
    for profile in std::iter::once(&cfg.bona_fide).chain(&cfg.categories) {
        summary.push_str(&format!(
            "{}: means={:?} amplitude={} freqs={:?}\n",
            profile.name, profile.band_means, profile.texture_amplitude, profile.texture_freqs
        ));
    }
    let profile_path = out_dir.join("profiles.txt");
    fs::write(&profile_path, summary).map_err(io_err(&profile_path))?;

    Ok(manifest)
}
