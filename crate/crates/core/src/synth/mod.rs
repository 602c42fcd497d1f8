//! Deterministic synthetic multi-center volumes.
//!
//! Each center gets its own intensity gain/bias, noise level, and blur
//! (resolution proxy), standing in for scanner heterogeneity. Volumes carry
//! two channels (CT-like, PET-like) and a 3-class mask: 0 background,
//! 1 primary tumor, 2 nodal tumor.


use std::io::Write as _;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::NdArray;
use crate::error::{Error, Result};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_PRIMARY: u8 = 1;
pub const LABEL_NODAL: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// One 2-channel volume with its voxel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[2, H, W, D]`, channel 0 CT-like (HU-like), channel 1 PET-like
    /// (SUV-like).
    pub volume: NdArray<f32>,
    /// `H·W·D` labels in {0, 1, 2}, same (z, y, x) order as the volume.
    pub mask: Vec<u8>,
    pub center_id: String,
    pub sample_id: String,
}

impl Sample {
    pub fn spatial(&self) -> [usize; 3] {
        let s = self.volume.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxels(&self) -> usize {
        self.mask.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.volume.shape();
        if s.len() != 4 || s[0] != 2 {
            return Err(Error::Dimension(format!("expected [2,H,W,D] volume, got {s:?}")));
        }
        if self.mask.len() != s[1] * s[2] * s[3] {
            return Err(Error::Dimension(format!(
                "mask has {} voxels, volume spatial size is {}",
                self.mask.len(),
                s[1] * s[2] * s[3]
            )));
        }
        if !self.volume.is_finite() {
            return Err(Error::Numerical("non-finite voxel in volume".into()));
        }
        if let Some(&bad) = self.mask.iter().find(|&&m| m as usize >= NUM_CLASSES) {
            return Err(Error::Contract(format!("mask label {bad} outside {{0,1,2}}")));
        }
        Ok(())
    }
}

/// Ellipsoid blob statistics for one foreground class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobClass {
    pub count_min: usize,
    pub count_max: usize,
    /// Semi-axis range in voxels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Additive CT-channel intensity inside the blob.
    pub ct_delta: f64,
    /// PET-channel uptake inside the blob.
    pub pet_value: f64,
}

/// Per-center generation recipe: how many samples, the intensity transfer
/// (gain/bias per channel), acquisition noise, blur, and blob statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterSpec {
    pub center_id: String,
    pub n_samples: usize,
    pub spatial: [usize; 3],
    /// Per-channel multiplicative gain applied to clean intensities.
    pub gain: [f64; 2],
    /// Per-channel additive bias.
    pub bias: [f64; 2],
    /// Std-dev of additive Gaussian noise, per channel.
    pub noise_sigma: [f64; 2],
    /// Gaussian blur std-dev in voxels (0 disables).
    pub blur_sigma: f64,
    pub primary: BlobClass,
    pub nodal: BlobClass,
    pub seed: u64,
}

impl CenterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config(format!("center {}: n_samples must be ≥ 1", self.center_id)));
        }
        if self.spatial.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!("center {}: empty spatial extent", self.center_id)));
        }
        if self.noise_sigma.iter().any(|&s| s < 0.0) || self.blur_sigma < 0.0 {
            return Err(Error::Config(format!("center {}: sigmas must be ≥ 0", self.center_id)));
        }
        for (class, b) in [("primary", &self.primary), ("nodal", &self.nodal)] {
            if b.count_min > b.count_max {
                return Err(Error::Config(format!(
                    "center {}: {class} blob count range inverted",
                    self.center_id
                )));
            }
            if !(b.radius_min > 0.0) || b.radius_max < b.radius_min {
                return Err(Error::Config(format!(
                    "center {}: {class} blob radius range invalid",
                    self.center_id
                )));
            }
            let min_extent = *self.spatial.iter().min().unwrap() as f64;
            if 2.0 * b.radius_max >= min_extent {
                return Err(Error::Config(format!(
                    "center {}: {class} blob diameter {} does not fit extent {}",
                    self.center_id,
                    2.0 * b.radius_max,
                    min_extent
                )));
            }
        }
        if self.primary.count_min == 0 {
            return Err(Error::Config(format!(
                "center {}: every sample needs at least one primary blob",
                self.center_id
            )));
        }
        Ok(())
    }
}

/// The seven desk-scale default centers, shifted in gain/noise/blur.
pub fn default_centers(n_samples: usize, spatial: [usize; 3], seed: u64) -> Vec<CenterSpec> {
    let shift: [(f64, f64, f64, f64); 7] = [
        // (ct gain, pet gain, noise scale, blur sigma)
        (1.00, 1.00, 1.0, 0.0),
        (1.10, 0.85, 1.4, 0.5),
        (0.90, 1.20, 0.8, 0.0),
        (1.05, 1.50, 1.8, 0.8),
        (0.95, 0.70, 1.2, 0.3),
        (1.20, 1.10, 2.2, 0.6),
        (0.85, 1.30, 1.6, 1.0),
    ];
    shift
        .iter()
        .enumerate()
        .map(|(i, &(gc, gp, ns, blur))| CenterSpec {
            center_id: format!("center{}", i + 1),
            n_samples,
            spatial,
            gain: [gc, gp],
            bias: [5.0 * i as f64, 0.05 * i as f64],
            noise_sigma: [8.0 * ns, 0.08 * ns],
            blur_sigma: blur,
            primary: BlobClass {
                count_min: 1,
                count_max: 2,
                radius_min: 2.0,
                radius_max: 0.18 * *spatial.iter().min().unwrap() as f64,
                ct_delta: 60.0,
                pet_value: 3.5,
            },
            nodal: BlobClass {
                count_min: 0,
                count_max: 2,
                radius_min: 1.5,
                radius_max: 0.12 * *spatial.iter().min().unwrap() as f64,
                ct_delta: 40.0,
                pet_value: 2.0,
            },
            seed: seed.wrapping_add(i as u64),
        })
        .collect()
}

fn sample_rng(spec_seed: u64, index: usize) -> ChaCha8Rng {
    // splitmix-style spread so per-sample streams are independent
    let mut z = spec_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

/// Voxels whose centers satisfy Σ ((xᵢ − cᵢ)/rᵢ)² ≤ 1.
pub fn ellipsoid_voxels(spatial: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> Vec<usize> {
    let [h, w, d] = spatial;
    let mut out = Vec::new();
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                let dz = (z as f64 - center[0]) / radii[0];
                let dy = (y as f64 - center[1]) / radii[1];
                let dx = (x as f64 - center[2]) / radii[2];
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    out.push((z * w + y) * d + x);
                }
            }
        }
    }
    out
}

fn draw_blob(rng: &mut ChaCha8Rng, class: &BlobClass, spatial: [usize; 3]) -> Ellipsoid {
    let mut radii = [0.0f64; 3];
    for r in &mut radii {
        *r = rng.gen_range(class.radius_min..=class.radius_max);
    }
    let mut center = [0.0f64; 3];
    for a in 0..3 {
        let lo = radii[a];
        let hi = spatial[a] as f64 - 1.0 - radii[a];
        center[a] = rng.gen_range(lo..=hi.max(lo));
    }
    Ellipsoid { center, radii }
}

/// Separable truncated-Gaussian blur over the spatial axes of one channel.
fn gaussian_blur(buf: &mut [f32], spatial: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();

    let [h, w, d] = spatial;
    let idx = |z: usize, y: usize, x: usize| (z * w + y) * d + x;
    let mut tmp = vec![0.0f32; buf.len()];
    for (axis, extent) in [(0usize, h), (1, w), (2, d)] {
        for z in 0..h {
            for y in 0..w {
                for x in 0..d {
                    let pos = [z, y, x];
                    let mut acc = 0.0f32;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let off = ki as isize - radius;
                        // clamp-to-edge boundary
                        let p = (pos[axis] as isize + off).clamp(0, extent as isize - 1) as usize;
                        let mut q = pos;
                        q[axis] = p;
                        acc += kv * buf[idx(q[0], q[1], q[2])];
                    }
                    tmp[idx(z, y, x)] = acc;
                }
            }
        }
        buf.copy_from_slice(&tmp);
    }
}

const CT_BACKGROUND: f64 = 30.0;
const PET_BACKGROUND: f64 = 0.3;

/// Generate every sample for one center. Pure function of the spec.
pub fn generate_center(spec: &CenterSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let [h, w, d] = spec.spatial;
    let voxels = h * w * d;
    let mut out = Vec::with_capacity(spec.n_samples);
    for s in 0..spec.n_samples {
        let mut rng = sample_rng(spec.seed, s);
        let mut mask = vec![LABEL_BACKGROUND; voxels];
        let mut ct = vec![CT_BACKGROUND as f32; voxels];
        let mut pet = vec![PET_BACKGROUND as f32; voxels];

        for (label, class) in [(LABEL_PRIMARY, &spec.primary), (LABEL_NODAL, &spec.nodal)] {
            let count = rng.gen_range(class.count_min..=class.count_max);
            for _ in 0..count {
                let blob = draw_blob(&mut rng, class, spec.spatial);
                for v in ellipsoid_voxels(spec.spatial, blob.center, blob.radii) {
                    // first-placed class wins; primaries are placed first
                    if mask[v] == LABEL_BACKGROUND {
                        mask[v] = label;
                        ct[v] += class.ct_delta as f32;
                        pet[v] = class.pet_value as f32;
                    }
                }
            }
        }

        gaussian_blur(&mut ct, spec.spatial, spec.blur_sigma);
        gaussian_blur(&mut pet, spec.spatial, spec.blur_sigma);
        for (c, chan) in [(0usize, &mut ct), (1, &mut pet)] {
            let gain = spec.gain[c] as f32;
            let bias = spec.bias[c] as f32;
            for v in chan.iter_mut() {
                *v = gain * *v + bias;
            }
            if spec.noise_sigma[c] > 0.0 {
                let dist = Normal::new(0.0, spec.noise_sigma[c]).map_err(|e| {
                    Error::Config(format!("bad noise sigma: {e}"))
                })?;
                for v in chan.iter_mut() {
                    *v += dist.sample(&mut rng) as f32;
                }
            }
        }

        let mut data = ct;
        data.extend_from_slice(&pet);
        out.push(Sample {
            volume: NdArray::new(vec![2, h, w, d], data)?,
            mask,
            center_id: spec.center_id.clone(),
            sample_id: format!("{}-{s:03}", spec.center_id),
        });
    }
    Ok(out)
}

const CT_CLIP: (f32, f32) = (-200.0, 200.0);
const PET_CLIP: (f32, f32) = (0.0, 5.0);
const STD_EPS: f32 = 1e-8;

/// Clip (CT to [−200, 200], PET to [0, 5]) then standardize each channel to
/// zero mean, unit variance over the whole volume. Per sample, per channel;
/// the mask is untouched. A constant channel maps to all zeros.
pub fn preprocess(sample: &Sample) -> Result<Sample> {
    sample.validate()?;
    let mut out = sample.clone();
    let v = sample.voxels();
    for (c, (lo, hi)) in [CT_CLIP, PET_CLIP].into_iter().enumerate() {
        let chan = &mut out.volume.data_mut()[c * v..(c + 1) * v];
        for x in chan.iter_mut() {
            *x = x.clamp(lo, hi);
        }
        let mean = chan.iter().map(|&x| x as f64).sum::<f64>() / v as f64;
        let var = chan.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v as f64;
        let std = var.sqrt() as f32;
        if std < STD_EPS {
            chan.fill(0.0);
        } else {
            for x in chan.iter_mut() {
                *x = (*x - mean as f32) / std;
            }
        }
    }
    Ok(out)
}

/// RNG decisions for one crop, split out so tests can force them.
#[derive(Clone, Debug)]
pub struct CropDecision {
    /// Crop window corner (z, y, x).
    pub corner: [usize; 3],
    pub flips: [bool; 3],
    /// Quarter-turns in the (x, y) plane, 0–3.
    pub turns: usize,
}

pub const CROPS_PER_SAMPLE: usize = 4;
const FLIP_P: f64 = 0.2;
const ROTATE_P: f64 = 0.2;
const FOREGROUND_CENTER_P: f64 = 0.5;

/// Crop-center voxel: foreground with probability 0.5, else background,
/// falling back to the other set when the preferred one is empty.
fn pick_center_voxel(sample: &Sample, rng: &mut ChaCha8Rng) -> usize {
    let fg: Vec<usize> = (0..sample.mask.len())
        .filter(|&i| sample.mask[i] != LABEL_BACKGROUND)
        .collect();
    let bg: Vec<usize> = (0..sample.mask.len())
        .filter(|&i| sample.mask[i] == LABEL_BACKGROUND)
        .collect();
    let want_fg = rng.gen_bool(FOREGROUND_CENTER_P);
    let pool = if want_fg && !fg.is_empty() {
        &fg
    } else if bg.is_empty() {
        &fg
    } else {
        &bg
    };
    pool[rng.gen_range(0..pool.len())]
}

fn decide_crop(sample: &Sample, crop: usize, rng: &mut ChaCha8Rng) -> CropDecision {
    let spatial = sample.spatial();
    let pick = pick_center_voxel(sample, rng);
    let [_, w, d] = [spatial[0], spatial[1], spatial[2]];
    let center = [pick / (w * d), (pick / d) % w, pick % d];
    let mut corner = [0usize; 3];
    for a in 0..3 {
        let half = crop / 2;
        corner[a] = center[a]
            .saturating_sub(half)
            .min(spatial[a] - crop);
    }
    let flips = [
        rng.gen_bool(FLIP_P),
        rng.gen_bool(FLIP_P),
        rng.gen_bool(FLIP_P),
    ];
    let turns = if rng.gen_bool(ROTATE_P) {
        rng.gen_range(1..=3)
    } else {
        0
    };
    CropDecision { corner, flips, turns }
}

fn flip_axis(vol: &mut [f32], mask: &mut [u8], s: [usize; 3], axis: usize) {
    let [h, w, d] = s;
    let v = h * w * d;
    let channels = vol.len() / v;
    let idx = |z: usize, y: usize, x: usize| (z * w + y) * d + x;
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                let mut q = [z, y, x];
                q[axis] = s[axis] - 1 - q[axis];
                let (a, b) = (idx(z, y, x), idx(q[0], q[1], q[2]));
                if a < b {
                    for c in 0..channels {
                        vol.swap(c * v + a, c * v + b);
                    }
                    mask.swap(a, b);
                }
            }
        }
    }
}

/// One quarter-turn in the (x, y) plane (the last two axes):
/// `(y, x) → (x, extent − 1 − y)`. Requires a cubic crop.
fn rot90_xy(vol: &mut Vec<f32>, mask: &mut Vec<u8>, s: [usize; 3]) {
    let [h, w, d] = s;
    assert_eq!(w, d, "xy rotation needs equal x/y extents");
    let v = h * w * d;
    let channels = vol.len() / v;
    let src_vol = vol.clone();
    let src_mask = mask.clone();
    let idx = |z: usize, y: usize, x: usize| (z * w + y) * d + x;
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                let dst = idx(z, y, x);
                // destination (y, x) pulls from source (x, w−1−y)
                let src = idx(z, x, w - 1 - y);
                for c in 0..channels {
                    vol[c * v + dst] = src_vol[c * v + src];
                }
                mask[dst] = src_mask[src];
            }
        }
    }
}

/// Extract one crop and apply the decided flips/rotation.
pub fn apply_crop(sample: &Sample, crop: usize, dec: &CropDecision, tag: usize) -> Result<Sample> {
    let spatial = sample.spatial();
    if spatial.iter().any(|&e| crop > e) {
        return Err(Error::Config(format!(
            "crop {crop} exceeds volume extents {spatial:?}"
        )));
    }
    for a in 0..3 {
        if dec.corner[a] + crop > spatial[a] {
            return Err(Error::Contract(format!(
                "crop corner {:?} out of bounds for extents {spatial:?}",
                dec.corner
            )));
        }
    }
    let [_, w, d] = spatial;
    let v = crop * crop * crop;
    let mut vol = vec![0.0f32; 2 * v];
    let mut mask = vec![0u8; v];
    let src = sample.volume.data();
    let sv = sample.voxels();
    for z in 0..crop {
        for y in 0..crop {
            for x in 0..crop {
                let si = ((dec.corner[0] + z) * w + dec.corner[1] + y) * d + dec.corner[2] + x;
                let di = (z * crop + y) * crop + x;
                vol[di] = src[si];
                vol[v + di] = src[sv + si];
                mask[di] = sample.mask[si];
            }
        }
    }
    let cs = [crop, crop, crop];
    for a in 0..3 {
        if dec.flips[a] {
            flip_axis(&mut vol, &mut mask, cs, a);
        }
    }
    for _ in 0..dec.turns {
        rot90_xy(&mut vol, &mut mask, cs);
    }
    Ok(Sample {
        volume: NdArray::new(vec![2, crop, crop, crop], vol)?,
        mask,
        center_id: sample.center_id.clone(),
        sample_id: format!("{}-crop{tag}", sample.sample_id),
    })
}

/// Four random crops with flip/rotation augmentation. Each crop is centered
/// on a foreground voxel with probability 0.5, else on a background voxel.
pub fn augment(sample: &Sample, crop: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    sample.validate()?;
    let spatial = sample.spatial();
    if crop == 0 || spatial.iter().any(|&e| crop > e) {
        return Err(Error::Config(format!(
            "crop {crop} exceeds volume extents {spatial:?}"
        )));
    }
    (0..CROPS_PER_SAMPLE)
        .map(|i| {
            let dec = decide_crop(sample, crop, rng);
            apply_crop(sample, crop, &dec, i)
        })
        .collect()
}

/// Train/test/fold assignment for one center's samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub center_id: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// k lists that partition `train`.
    pub folds: Vec<Vec<usize>>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<usize> = self.train.iter().chain(&self.test).copied().collect();
        all.sort_unstable();
        let n = all.len();
        if all != (0..n).collect::<Vec<_>>() {
            return Err(Error::Contract("train/test is not a partition of 0..n".into()));
        }
        let mut folded: Vec<usize> = self.folds.iter().flatten().copied().collect();
        folded.sort_unstable();
        let mut train = self.train.clone();
        train.sort_unstable();
        if folded != train {
            return Err(Error::Contract("folds do not partition the training set".into()));
        }
        Ok(())
    }
}

/// Deterministic shuffled 70:30 split; the train share is rounded down
/// (9 samples → 6 train / 3 test).
pub fn split_70_30(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 7 / 10;
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Deal the shuffled training indices into k folds; sizes differ by ≤ 1.
pub fn kfold(train: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} training samples",
            train.len()
        )));
    }
    let mut idx = train.to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6b66_6f6c_6466_6f6c));
    let mut folds = vec![Vec::new(); k];
    for (i, s) in idx.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    Ok(folds)
}

/// 70:30 split plus a k-fold partition of the training share.
pub fn plan_center(center_id: &str, n: usize, k: usize, seed: u64) -> Result<SplitPlan> {
    let (train, test) = split_70_30(n, seed);
    let folds = kfold(&train, k, seed)?;
    Ok(SplitPlan {
        center_id: center_id.to_string(),
        train,
        test,
        folds,
    })
}

const VOL_MAGIC: &[u8; 4] = b"PSVL";
const VOL_VERSION: u16 = 1;

/// Self-describing little-endian volume file: magic, version, dims,
/// channels, dtype tag, ids, volume buffer, mask buffer. Bit-exact round
/// trip.
pub fn write_volume(sample: &Sample, path: &Path) -> Result<u64> {
    sample.validate()?;
    let s = sample.volume.shape();
    let mut out = Vec::new();
    out.extend_from_slice(VOL_MAGIC);
    out.extend_from_slice(&VOL_VERSION.to_le_bytes());
    for &e in &s[1..4] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.extend_from_slice(&(s[0] as u32).to_le_bytes());
    out.push(4); // f32 voxels
    for id in [&sample.center_id, &sample.sample_id] {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for &v in sample.volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&sample.mask);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(out.len() as u64)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: format!("truncated: wanted {n} bytes, {} remain", self.buf.len() - self.pos),
                offset: self.pos as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn read_volume(path: &Path) -> Result<Sample> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(4)? != VOL_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "bad magic".into(),
            offset: 0,
        });
    }
    let version = LittleEndian::read_u16(r.take(2)?);
    if version != VOL_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported version {version}"),
            offset: 4,
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = LittleEndian::read_u32(r.take(4)?) as usize;
    }
    let channels = LittleEndian::read_u32(r.take(4)?) as usize;
    let dtype_off = r.pos;
    let dtype = r.take(1)?[0];
    if dtype != 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported voxel dtype tag {dtype}"),
            offset: dtype_off as u64,
        });
    }
    let mut ids = Vec::with_capacity(2);
    for _ in 0..2 {
        let len = LittleEndian::read_u16(r.take(2)?) as usize;
        let off = r.pos;
        ids.push(String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            detail: "non-utf8 id".into(),
            offset: off as u64,
        })?);
    }
    let voxels = dims[0] * dims[1] * dims[2];
    let vol_raw = r.take(channels * voxels * 4)?;
    let data: Vec<f32> = vol_raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mask = r.take(voxels)?.to_vec();
    let sample = Sample {
        volume: NdArray::new(vec![channels, dims[0], dims[1], dims[2]], data)?,
        mask,
        center_id: ids[0].clone(),
        sample_id: ids[1].clone(),
    };
    sample.validate()?;
    Ok(sample)
}
