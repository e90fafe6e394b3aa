//! Raw frame stacks to model-ready data cubes.
//!
//! The prototype pipeline per modality is: dark-frame subtraction,
//! normalization by bit depth, frame selection, fixed-ROI crop, bicubic
//! resize to 160x80 pixels. Channels of the selected modalities are stacked
//! in the fixed order F_M, F_S, F_L, B_N.
//!
//! Legacy (single grayscale image) data instead gets an ROI of preset size
//! centered on the detected finger area.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DatasetManifest, Modality, ModalitySelection, SampleRecord};
use crate::tensorio::{self, TensorData, TensorIoError};

/// Model input width/height every cube channel is resized to.
pub const CUBE_WIDTH: usize = 160;
pub const CUBE_HEIGHT: usize = 80;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dark stack is empty")]
    EmptyDark,
    #[error("unsupported bit depth {0} (expected 8, 12 or 16)")]
    BadBitDepth(u8),
    #[error("value {value} exceeds {bit_depth}-bit range (mislabeled depth?)")]
    ValueExceedsDepth { value: f32, bit_depth: u8 },
    #[error("{modality}: stack has {found} frames, need at least {needed}")]
    InsufficientFrames {
        modality: Modality,
        needed: usize,
        found: usize,
    },
    #[error("roi {x0},{y0} {width}x{height} exceeds frame bounds {frame_width}x{frame_height}")]
    RoiOutOfBounds {
        x0: usize,
        y0: usize,
        width: usize,
        height: usize,
        frame_width: usize,
        frame_height: usize,
    },
    #[error("no foreground pixels found (no finger in image)")]
    NoFinger,
    #[error("input {width}x{height} too small (need at least 4x4)")]
    DegenerateInput { width: usize, height: usize },
    #[error("record `{sample_id}` has no tensor for {modality}")]
    MissingModality {
        sample_id: String,
        modality: Modality,
    },
    #[error("{modality} tensor: expected {expected}, found {found}")]
    BadTensor {
        modality: Modality,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
}

/// A rectangular window in pixel coordinates; `x` is column, `y` is row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl RoiSpec {
    pub fn full_frame(width: usize, height: usize) -> Self {
        RoiSpec {
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }

    fn check_bounds(&self, frame_width: usize, frame_height: usize) -> Result<(), PreprocessError> {
        let fits = self.width > 0
            && self.height > 0
            && self.x0 + self.width <= frame_width
            && self.y0 + self.height <= frame_height;
        if fits {
            Ok(())
        } else {
            Err(PreprocessError::RoiOutOfBounds {
                x0: self.x0,
                y0: self.y0,
                width: self.width,
                height: self.height,
                frame_width,
                frame_height,
            })
        }
    }
}

/// Legacy sensor ROI presets (width, height).
pub fn legacy_preset(name: &str) -> Option<(usize, usize)> {
    match name.to_ascii_lowercase().as_str() {
        "greenbit" => Some((320, 256)),
        "hiscan" => Some((600, 480)),
        "persona" => Some((260, 200)),
        "crossmatch" => Some((320, 256)),
        _ => None,
    }
}

/// The stacked multi-spectral tensor fed to the model: (channels, height,
/// width) with every value in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DataCube {
    data: Array3<f32>,
}

impl DataCube {
    pub fn new(data: Array3<f32>) -> Result<Self, PreprocessError> {
        if data
            .iter()
            .any(|&v| !(0.0..=1.0).contains(&v) || !v.is_finite())
        {
            return Err(PreprocessError::ShapeMismatch(
                "cube values must lie in [0, 1]".into(),
            ));
        }
        Ok(DataCube { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// Splits a raw stack into (illuminated, dark) per the modality's layout:
/// illuminated frames first, dark frames after.
pub fn split_raw_stack(
    modality: Modality,
    stack: &Array3<f32>,
) -> Result<(Array3<f32>, Option<Array3<f32>>), PreprocessError> {
    let frames = stack.shape()[0];
    let min_illum = match modality {
        Modality::Fl => 20,
        Modality::Bn => 13,
        m => m.illuminated_frames(),
    };
    let dark = modality.dark_frames();
    if frames < min_illum + dark {
        return Err(PreprocessError::InsufficientFrames {
            modality,
            needed: min_illum + dark,
            found: frames,
        });
    }
    if dark == 0 {
        return Ok((stack.clone(), None));
    }
    // Fixed-count modalities carry exactly illuminated + dark frames.
    let illum_count = modality.illuminated_frames();
    if frames != illum_count + dark {
        return Err(PreprocessError::InsufficientFrames {
            modality,
            needed: illum_count + dark,
            found: frames,
        });
    }
    let illum = stack.slice(s![..illum_count, .., ..]).to_owned();
    let dark = stack.slice(s![illum_count.., .., ..]).to_owned();
    Ok((illum, Some(dark)))
}

/// Subtracts the time-averaged dark frame from every illuminated frame,
/// clamping at zero.
pub fn subtract_dark(
    illuminated: &Array3<f32>,
    dark: &Array3<f32>,
) -> Result<Array3<f32>, PreprocessError> {
    if dark.shape()[0] == 0 {
        return Err(PreprocessError::EmptyDark);
    }
    if illuminated.shape()[1..] != dark.shape()[1..] {
        return Err(PreprocessError::ShapeMismatch(format!(
            "illuminated {:?} vs dark {:?}",
            illuminated.shape(),
            dark.shape()
        )));
    }
    let mean_dark = dark.mean_axis(Axis(0)).expect("nonempty dark stack");
    let mut out = illuminated.clone();
    for mut frame in out.axis_iter_mut(Axis(0)) {
        frame.zip_mut_with(&mean_dark, |v, &d| *v = (*v - d).max(0.0));
    }
    Ok(out)
}

/// Subtracts each illuminated frame's own paired dark frame (frame i gets
/// dark frame i), clamping at zero.
pub fn subtract_dark_paired(
    illuminated: &Array3<f32>,
    dark: &Array3<f32>,
) -> Result<Array3<f32>, PreprocessError> {
    if illuminated.shape() != dark.shape() {
        return Err(PreprocessError::ShapeMismatch(format!(
            "paired subtraction needs equal stacks, got {:?} vs {:?}",
            illuminated.shape(),
            dark.shape()
        )));
    }
    if dark.shape()[0] == 0 {
        return Err(PreprocessError::EmptyDark);
    }
    let mut out = illuminated.clone();
    out.zip_mut_with(dark, |v, &d| *v = (*v - d).max(0.0));
    Ok(out)
}

/// Dark-corrects a full raw stack: F_M uses per-channel paired frames, F_S
/// the pooled time average; modalities without dark frames pass through.
pub fn apply_dark_correction(
    modality: Modality,
    stack: &Array3<f32>,
) -> Result<Array3<f32>, PreprocessError> {
    let (illuminated, dark) = split_raw_stack(modality, stack)?;
    match (modality, dark) {
        (_, None) => Ok(illuminated),
        (Modality::Fm, Some(dark)) => subtract_dark_paired(&illuminated, &dark),
        (_, Some(dark)) => subtract_dark(&illuminated, &dark),
    }
}

/// Scales raw counts into [0, 1] by the full-scale value of `bit_depth`.
pub fn normalize_bit_depth(
    frames: &Array3<f32>,
    bit_depth: u8,
) -> Result<Array3<f32>, PreprocessError> {
    if ![8, 12, 16].contains(&bit_depth) {
        return Err(PreprocessError::BadBitDepth(bit_depth));
    }
    let full_scale = ((1u32 << bit_depth) - 1) as f32;
    if let Some(&v) = frames.iter().find(|&&v| v > full_scale) {
        return Err(PreprocessError::ValueExceedsDepth {
            value: v,
            bit_depth,
        });
    }
    Ok(frames.mapv(|v| v / full_scale))
}

/// Keeps the frames the pipeline uses: all of F_M and F_S, frames 10-19 of
/// F_L, frames 10-12 of B_N.
pub fn select_frames(
    modality: Modality,
    stack: &Array3<f32>,
) -> Result<Array3<f32>, PreprocessError> {
    let frames = stack.shape()[0];
    let range = match modality {
        Modality::Fm => 0..7,
        Modality::Fs => 0..4,
        Modality::Fl => 10..20,
        Modality::Bn => 10..13,
        Modality::Legacy => 0..1,
    };
    if frames < range.end {
        return Err(PreprocessError::InsufficientFrames {
            modality,
            needed: range.end,
            found: frames,
        });
    }
    Ok(stack.slice(s![range, .., ..]).to_owned())
}

/// Exact pixel copy of the ROI window from every frame.
pub fn crop_fixed_roi(
    stack: &Array3<f32>,
    roi: &RoiSpec,
) -> Result<Array3<f32>, PreprocessError> {
    let (h, w) = (stack.shape()[1], stack.shape()[2]);
    roi.check_bounds(w, h)?;
    Ok(stack
        .slice(s![
            ..,
            roi.y0..roi.y0 + roi.height,
            roi.x0..roi.x0 + roi.width
        ])
        .to_owned())
}

pub fn crop_frame(frame: &ArrayView2<f32>, roi: &RoiSpec) -> Result<Array2<f32>, PreprocessError> {
    let (h, w) = frame.dim();
    roi.check_bounds(w, h)?;
    Ok(frame
        .slice(s![
            roi.y0..roi.y0 + roi.height,
            roi.x0..roi.x0 + roi.width
        ])
        .to_owned())
}

// Catmull-Rom cubic kernel (a = -0.5).
fn cubic_kernel(d: f64) -> f64 {
    let d = d.abs();
    if d <= 1.0 {
        (1.5 * d - 2.5) * d * d + 1.0
    } else if d < 2.0 {
        ((-0.5 * d + 2.5) * d - 4.0) * d + 2.0
    } else {
        0.0
    }
}

fn resample_axis(src_len: usize, dst_len: usize) -> Vec<(isize, [f64; 4])> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|dst| {
            let center = (dst as f64 + 0.5) * scale - 0.5;
            let base = center.floor();
            let frac = center - base;
            let weights = [
                cubic_kernel(frac + 1.0),
                cubic_kernel(frac),
                cubic_kernel(1.0 - frac),
                cubic_kernel(2.0 - frac),
            ];
            (base as isize - 1, weights)
        })
        .collect()
}

/// Bicubic resize (Catmull-Rom kernel, half-pixel-centered sampling,
/// edge-clamped), output clamped to [0, 1].
pub fn resize_bicubic(
    image: &ArrayView2<f32>,
    out_w: usize,
    out_h: usize,
) -> Result<Array2<f32>, PreprocessError> {
    let (in_h, in_w) = image.dim();
    if in_h < 4 || in_w < 4 || out_w == 0 || out_h == 0 {
        return Err(PreprocessError::DegenerateInput {
            width: in_w,
            height: in_h,
        });
    }
    let xs = resample_axis(in_w, out_w);
    let ys = resample_axis(in_h, out_h);

    // Horizontal pass, then vertical, accumulating in f64.
    let mut rows = Array2::<f64>::zeros((in_h, out_w));
    for y in 0..in_h {
        for (xo, (base, weights)) in xs.iter().enumerate() {
            let mut acc = 0.0;
            for (k, &w) in weights.iter().enumerate() {
                let xi = (base + k as isize).clamp(0, in_w as isize - 1) as usize;
                acc += w * image[(y, xi)] as f64;
            }
            rows[(y, xo)] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for (yo, (base, weights)) in ys.iter().enumerate() {
        for xo in 0..out_w {
            let mut acc = 0.0;
            for (k, &w) in weights.iter().enumerate() {
                let yi = (base + k as isize).clamp(0, in_h as isize - 1) as usize;
                acc += w * rows[(yi, xo)];
            }
            out[(yo, xo)] = acc.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Otsu threshold of an image with values in [0, 1], computed on a 256-bin
/// histogram. Returns the upper edge of the split bin, so `v < t` selects
/// the low class.
pub fn otsu_threshold(image: &ArrayView2<f32>) -> f32 {
    let mut hist = [0u64; 256];
    for &v in image.iter() {
        let bin = ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255);
        hist[bin] += 1;
    }
    let total: u64 = hist.iter().sum();
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut best_k = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    for k in 0..255 {
        w0 += hist[k];
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (total_sum - sum0) / w1 as f64;
        let var = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    (best_k + 1) as f32 / 256.0
}

fn dilate_disk(mask: &Array2<bool>, radius: f64) -> Array2<bool> {
    let r = radius.floor() as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx * dx + dy * dy) as f64 <= radius * radius {
                offsets.push((dy, dx));
            }
        }
    }
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                for &(dy, dx) in &offsets {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        out[(ny as usize, nx as usize)] = true;
                    }
                }
            }
        }
    }
    out
}

fn largest_component_centroid(mask: &Array2<bool>) -> Option<(f64, f64)> {
    let (h, w) = mask.dim();
    let mut visited = Array2::from_elem((h, w), false);
    let mut best: Option<(usize, f64, f64)> = None;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[(y, x)] || visited[(y, x)] {
                continue;
            }
            let mut count = 0usize;
            let (mut sx, mut sy) = (0f64, 0f64);
            visited[(y, x)] = true;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                count += 1;
                sx += cx as f64;
                sy += cy as f64;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let ny = cy as isize + dy;
                        let nx = cx as isize + dx;
                        if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[(ny, nx)] && !visited[(ny, nx)] {
                            visited[(ny, nx)] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            let centroid = (sx / count as f64, sy / count as f64);
            if best.map_or(true, |(c, _, _)| count > c) {
                best = Some((count, centroid.0, centroid.1));
            }
        }
    }
    best.map(|(_, cx, cy)| (cx, cy))
}

/// Finds the finger center of a legacy grayscale image: threshold (Otsu,
/// ridges darker than background), dilate with a disk of diameter 7, take
/// the centroid of the largest 8-connected component.
pub fn legacy_roi_center(image: &ArrayView2<f32>) -> Result<(f64, f64), PreprocessError> {
    let t = otsu_threshold(image);
    let mask = image.mapv(|v| v < t);
    if !mask.iter().any(|&m| m) {
        return Err(PreprocessError::NoFinger);
    }
    let dilated = dilate_disk(&mask, 3.0);
    largest_component_centroid(&dilated).ok_or(PreprocessError::NoFinger)
}

/// A window of preset size centered at `(cx, cy)`, shifted (not shrunk)
/// to stay within the image; shrunk only if the preset exceeds the image.
pub fn roi_window_at(
    cx: f64,
    cy: f64,
    preset_w: usize,
    preset_h: usize,
    img_w: usize,
    img_h: usize,
) -> RoiSpec {
    let width = preset_w.min(img_w);
    let height = preset_h.min(img_h);
    let x0 = (cx - width as f64 / 2.0).round().max(0.0) as usize;
    let y0 = (cy - height as f64 / 2.0).round().max(0.0) as usize;
    RoiSpec {
        x0: x0.min(img_w - width),
        y0: y0.min(img_h - height),
        width,
        height,
    }
}

/// Per-modality fixed ROIs. Modalities without an entry use the full frame.
pub type RoiConfig = BTreeMap<Modality, RoiSpec>;

fn blob_to_f32_stack(
    modality: Modality,
    blob: tensorio::TensorBlob,
) -> Result<Array3<f32>, PreprocessError> {
    let shape = blob.shape().to_vec();
    if shape.len() != 3 {
        return Err(PreprocessError::BadTensor {
            modality,
            expected: "rank-3 (frames, height, width)".into(),
            found: format!("rank-{}", shape.len()),
        });
    }
    if blob.dtype() != modality.storage_dtype() {
        return Err(PreprocessError::BadTensor {
            modality,
            expected: format!("{:?}", modality.storage_dtype()),
            found: format!("{:?}", blob.dtype()),
        });
    }
    let values: Vec<f32> = match blob.into_data() {
        TensorData::U8(v) => v.into_iter().map(f32::from).collect(),
        TensorData::U16(v) => v.into_iter().map(f32::from).collect(),
        TensorData::F32(v) => v,
    };
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), values)
        .map_err(|e| PreprocessError::ShapeMismatch(e.to_string()))
}

fn read_stack(
    manifest: &DatasetManifest,
    record: &SampleRecord,
    modality: Modality,
) -> Result<Array3<f32>, PreprocessError> {
    let path = manifest
        .tensor_path(record, modality)
        .ok_or_else(|| PreprocessError::MissingModality {
            sample_id: record.sample_id.clone(),
            modality,
        })?;
    blob_to_f32_stack(modality, tensorio::read_blob(&path)?)
}

fn preprocess_modality(
    modality: Modality,
    raw: &Array3<f32>,
    roi: Option<&RoiSpec>,
) -> Result<Array3<f32>, PreprocessError> {
    let corrected = apply_dark_correction(modality, raw)?;
    let normalized = normalize_bit_depth(&corrected, modality.bit_depth())?;
    let selected = select_frames(modality, &normalized)?;
    let (h, w) = (selected.shape()[1], selected.shape()[2]);
    let roi = roi.copied().unwrap_or_else(|| RoiSpec::full_frame(w, h));
    let cropped = crop_fixed_roi(&selected, &roi)?;
    let mut out = Array3::zeros((cropped.shape()[0], CUBE_HEIGHT, CUBE_WIDTH));
    for (i, frame) in cropped.axis_iter(Axis(0)).enumerate() {
        let resized = resize_bicubic(&frame, CUBE_WIDTH, CUBE_HEIGHT)?;
        out.slice_mut(s![i, .., ..]).assign(&resized);
    }
    Ok(out)
}

/// Builds the model-ready cube for one record: per selected modality, dark
/// subtraction, normalization, frame selection, ROI crop and bicubic resize,
/// stacked in the fixed F_M, F_S, F_L, B_N order.
pub fn build_cube(
    manifest: &DatasetManifest,
    record: &SampleRecord,
    selection: &ModalitySelection,
    rois: &RoiConfig,
) -> Result<DataCube, PreprocessError> {
    let mut channels: Vec<Array3<f32>> = Vec::new();
    for modality in selection.modalities() {
        let raw = read_stack(manifest, record, modality)?;
        channels.push(preprocess_modality(modality, &raw, rois.get(&modality))?);
    }
    let total: usize = channels.iter().map(|c| c.shape()[0]).sum();
    let mut data = Array3::zeros((total, CUBE_HEIGHT, CUBE_WIDTH));
    let mut offset = 0;
    for part in channels {
        let n = part.shape()[0];
        data.slice_mut(s![offset..offset + n, .., ..]).assign(&part);
        offset += n;
    }
    DataCube::new(data)
}

/// Builds a single-channel cube from a legacy grayscale image: finger-center
/// detection, preset-size ROI, optional resize.
pub fn build_legacy_cube(
    manifest: &DatasetManifest,
    record: &SampleRecord,
    preset: (usize, usize),
    resize_to: Option<(usize, usize)>,
) -> Result<DataCube, PreprocessError> {
    let raw = read_stack(manifest, record, Modality::Legacy)?;
    let normalized = normalize_bit_depth(&raw, Modality::Legacy.bit_depth())?;
    let frame = normalized.index_axis(Axis(0), 0);
    let (cy_h, cx_w) = frame.dim();
    let (cx, cy) = legacy_roi_center(&frame)?;
    let roi = roi_window_at(cx, cy, preset.0, preset.1, cx_w, cy_h);
    let cropped = crop_frame(&frame, &roi)?;
    let out = match resize_to {
        Some((w, h)) => resize_bicubic(&cropped.view(), w, h)?,
        None => cropped,
    };
    let (h, w) = out.dim();
    DataCube::new(out.into_shape((1, h, w)).expect("rank-3 reshape"))
}
