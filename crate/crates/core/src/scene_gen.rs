//! Synthetic labeled BEV scene generation and parameterized shift
//! transforms standing in for cross-dataset and corruption domain gaps.
//!
//! A scene is a set of oriented boxes rendered into an H×W×C feature grid
//! as truncated anisotropic Gaussian bumps, each scaled by a per-object
//! random channel signature, on top of a low-amplitude background noise
//! floor. Scenes carry their object descriptions so a scale shift can
//! re-render features and labels coherently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom3d::Box3D;

/// Grid geometry shared by generation, the detector, and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub cell_size: f64,
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn entries(&self) -> usize {
        self.h * self.w * self.channels
    }

    /// (x, y) center of the cell at (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.cell_size,
            (row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.w as f64 * self.cell_size, self.h as f64 * self.cell_size)
    }
}

/// The perturbable input: an H×W×C grid of reals, row-major with the
/// channel axis innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevFeature {
    pub values: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub cell_size: f64,
}

impl BevFeature {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            values: vec![0.0; grid.entries()],
            h: grid.h,
            w: grid.w,
            channels: grid.channels,
            cell_size: grid.cell_size,
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.w + col) * self.channels + ch
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            h: self.h,
            w: self.w,
            channels: self.channels,
            cell_size: self.cell_size,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Parameterized target-domain shift: object-size scaling plus feature
/// corruptions, applied in the fixed order scale → noise → dropout →
/// blur → intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub scale_factor: f64,
    pub noise_sigma: f64,
    pub dropout_prob: f64,
    pub blur_width: usize,
    pub intensity_offset: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            scale_factor: 1.0,
            noise_sigma: 0.0,
            dropout_prob: 0.0,
            blur_width: 0,
            intensity_offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.scale_factor > 0.0)
            || !(self.noise_sigma >= 0.0)
            || !(0.0..1.0).contains(&self.dropout_prob)
        {
            return Err(GenError::InvalidShift);
        }
        Ok(())
    }
}

/// One object: an oriented box plus the per-channel amplitude signature
/// it is rendered with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub box3d: Box3D,
    pub signature: Vec<f64>,
}

/// A labeled scene. `objects` is empty for scenes loaded from a dataset
/// container; such scenes cannot be re-rendered or shifted again.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gt_boxes: Vec<Box3D>,
    pub bev: BevFeature,
    pub shift_applied: Option<ShiftSpec>,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

/// Scene generation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// dx sampling range (meters).
    pub length_range: (f64, f64),
    /// dy sampling range (meters).
    pub width_range: (f64, f64),
    /// yaw sampling range (radians); a degenerate range pins the yaw.
    pub yaw_range: (f64, f64),
    /// Fixed vertical priors: every object sits at this z center with
    /// this height.
    pub center_z: f64,
    pub box_height: f64,
    /// Per-channel signature amplitude range.
    pub signature_range: (f64, f64),
    /// Gaussian sigma as a fraction of the box extent per axis.
    pub bump_sigma_factor: f64,
    /// Std-dev of the additive background noise floor.
    pub background_noise: f64,
    /// Minimum center-to-center separation between objects (meters).
    pub min_separation: f64,
    /// Margin between object centers and the grid border (meters).
    pub margin: f64,
    pub placement_max_tries: usize,
}

impl GenConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<(), GenError> {
        let (ex, ey) = grid.extent();
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return Err(GenError::InvalidConfig("object count range".into()));
        }
        if 2.0 * self.margin >= ex || 2.0 * self.margin >= ey {
            return Err(GenError::EmptyPlacementRegion);
        }
        if self.length_range.0 <= 0.0 || self.width_range.0 <= 0.0 {
            return Err(GenError::InvalidConfig("box size ranges".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("placement region is empty (margin exceeds grid extent)")]
    EmptyPlacementRegion,
    #[error("could not place object {index} after {tries} tries")]
    PlacementFailed { index: usize, tries: usize },
    #[error("shift already applied to this scene")]
    DoubleShift,
    #[error("scene has no object descriptions; cannot re-render")]
    NoObjects,
    #[error("invalid shift spec")]
    InvalidShift,
    #[error("stream needs n_batches >= 1 and batch_size >= 1")]
    EmptyStream,
}

fn sample_range(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Derives the background-noise seed for a scene. Kept as a pure function
/// of the scene seed so a re-render reproduces the exact same floor.
fn background_seed(scene_seed: u64) -> u64 {
    scene_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed_ba5e_0000_0001
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per call keeps consumption predictable.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Renders objects into a fresh grid: background noise floor plus one
/// truncated Gaussian bump per object, channel-scaled by its signature.
pub fn render(
    objects: &[SceneObject],
    grid: &GridSpec,
    scene_seed: u64,
    config: &GenConfig,
) -> BevFeature {
    let mut bev = BevFeature::zeros(grid);
    if config.background_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(background_seed(scene_seed));
        for v in bev.values.iter_mut() {
            *v = config.background_noise * standard_normal(&mut rng);
        }
    }
    for obj in objects {
        let b = &obj.box3d;
        let sigma_x = config.bump_sigma_factor * b.dx;
        let sigma_y = config.bump_sigma_factor * b.dy;
        // truncate at 3 sigma; the bounding square covers the rotated extent
        let reach = 3.0 * sigma_x.max(sigma_y);
        let row_lo = (((b.cy - reach) / grid.cell_size - 0.5).floor().max(0.0)) as usize;
        let row_hi = ((((b.cy + reach) / grid.cell_size - 0.5).ceil()) as isize)
            .clamp(0, grid.h as isize - 1) as usize;
        let col_lo = (((b.cx - reach) / grid.cell_size - 0.5).floor().max(0.0)) as usize;
        let col_hi = ((((b.cx + reach) / grid.cell_size - 0.5).ceil()) as isize)
            .clamp(0, grid.w as isize - 1) as usize;
        let (sin_yaw, cos_yaw) = b.yaw.sin_cos();
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let (x, y) = grid.cell_center(row, col);
                let px = x - b.cx;
                let py = y - b.cy;
                let ux = px * cos_yaw + py * sin_yaw;
                let uy = -px * sin_yaw + py * cos_yaw;
                let r2 = (ux / sigma_x).powi(2) + (uy / sigma_y).powi(2);
                if r2 > 9.0 {
                    continue;
                }
                let bump = (-0.5 * r2).exp();
                let base = bev.idx(row, col, 0);
                for (ch, sig) in obj.signature.iter().enumerate() {
                    bev.values[base + ch] += sig * bump;
                }
            }
        }
    }
    bev
}

/// Samples a labeled scene. Deterministic for a fixed (seed, config, grid).
pub fn generate_scene(seed: u64, config: &GenConfig, grid: &GridSpec) -> Result<Scene, GenError> {
    config.validate(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = if config.min_objects == config.max_objects {
        config.min_objects
    } else {
        rng.gen_range(config.min_objects..=config.max_objects)
    };
    let (ex, ey) = grid.extent();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for index in 0..n {
        let mut placed = false;
        for _ in 0..config.placement_max_tries {
            let cx = rng.gen_range(config.margin..ex - config.margin);
            let cy = rng.gen_range(config.margin..ey - config.margin);
            if objects.iter().any(|o| {
                let d = ((o.box3d.cx - cx).powi(2) + (o.box3d.cy - cy).powi(2)).sqrt();
                d < config.min_separation
            }) {
                continue;
            }
            let dx = sample_range(&mut rng, config.length_range);
            let dy = sample_range(&mut rng, config.width_range);
            let yaw = sample_range(&mut rng, config.yaw_range);
            let signature: Vec<f64> = (0..grid.channels)
                .map(|_| sample_range(&mut rng, config.signature_range))
                .collect();
            objects.push(SceneObject {
                box3d: Box3D::new(cx, cy, config.center_z, dx, dy, config.box_height, yaw),
                signature,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(GenError::PlacementFailed {
                index,
                tries: config.placement_max_tries,
            });
        }
    }
    let bev = render(&objects, grid, seed, config);
    Ok(Scene {
        gt_boxes: objects.iter().map(|o| o.box3d).collect(),
        bev,
        shift_applied: None,
        seed,
        objects,
    })
}

/// Applies a shift: scales object dims (labels track the re-rendered
/// objects), then corrupts the grid with noise, dropout, blur, and a
/// global intensity offset. Deterministic given `seed`.
pub fn apply_shift(
    scene: &Scene,
    spec: &ShiftSpec,
    seed: u64,
    config: &GenConfig,
) -> Result<Scene, GenError> {
    spec.validate()?;
    if scene.shift_applied.is_some() {
        return Err(GenError::DoubleShift);
    }
    if scene.objects.is_empty() {
        return Err(GenError::NoObjects);
    }
    let grid = scene.bev.grid();
    let scaled: Vec<SceneObject> = scene
        .objects
        .iter()
        .map(|o| SceneObject {
            box3d: Box3D::new(
                o.box3d.cx,
                o.box3d.cy,
                o.box3d.cz,
                o.box3d.dx * spec.scale_factor,
                o.box3d.dy * spec.scale_factor,
                o.box3d.dz * spec.scale_factor,
                o.box3d.yaw,
            ),
            signature: o.signature.clone(),
        })
        .collect();
    let mut bev = render(&scaled, &grid, scene.seed, config);

    // each corruption stage draws from its own stream so that disabling
    // one stage does not shift the randomness of the others
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x01);
        for v in bev.values.iter_mut() {
            *v += spec.noise_sigma * standard_normal(&mut rng);
        }
    }
    if spec.dropout_prob > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x02);
        for v in bev.values.iter_mut() {
            if rng.gen::<f64>() < spec.dropout_prob {
                *v = 0.0;
            }
        }
    }
    if spec.blur_width > 0 {
        box_blur(&mut bev, spec.blur_width);
    }
    if spec.intensity_offset != 0.0 {
        for v in bev.values.iter_mut() {
            *v += spec.intensity_offset;
        }
    }
    Ok(Scene {
        gt_boxes: scaled.iter().map(|o| o.box3d).collect(),
        bev,
        shift_applied: Some(*spec),
        seed: scene.seed,
        objects: scaled,
    })
}

/// Separable spatial box blur with half-width `w`; windows are truncated
/// at the border and normalized by their in-bounds count.
fn box_blur(bev: &mut BevFeature, half_width: usize) {
    let (h, w, c) = (bev.h, bev.w, bev.channels);
    let hw = half_width as isize;
    let mut tmp = vec![0.0f64; bev.values.len()];
    // horizontal pass
    for row in 0..h {
        for col in 0..w {
            let lo = (col as isize - hw).max(0) as usize;
            let hi = (col as isize + hw).min(w as isize - 1) as usize;
            let count = (hi - lo + 1) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for k in lo..=hi {
                    acc += bev.values[bev.idx(row, k, ch)];
                }
                tmp[bev.idx(row, col, ch)] = acc / count;
            }
        }
    }
    // vertical pass
    for row in 0..h {
        for col in 0..w {
            let lo = (row as isize - hw).max(0) as usize;
            let hi = (row as isize + hw).min(h as isize - 1) as usize;
            let count = (hi - lo + 1) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for k in lo..=hi {
                    acc += tmp[bev.idx(k, col, ch)];
                }
                let idx = bev.idx(row, col, ch);
                bev.values[idx] = acc / count;
            }
        }
    }
}

/// Mixes a salt into a master seed (splitmix64 finalizer).
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master
        .wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-scene seeds for a stream, derived from one master seed.
pub fn derive_scene_seeds(master: u64, count: usize) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| (rng.gen(), rng.gen())).collect()
}

/// Generates an ordered single-pass stream of `n_batches` batches of
/// `batch_size` shifted scenes.
pub fn make_stream(
    n_batches: usize,
    batch_size: usize,
    config: &GenConfig,
    grid: &GridSpec,
    spec: &ShiftSpec,
    seed: u64,
) -> Result<Vec<Vec<Scene>>, GenError> {
    if n_batches < 1 || batch_size < 1 {
        return Err(GenError::EmptyStream);
    }
    let seeds = derive_scene_seeds(seed, n_batches * batch_size);
    let mut stream = Vec::with_capacity(n_batches);
    let mut it = seeds.into_iter();
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (gen_seed, shift_seed) = it.next().unwrap();
            let clean = generate_scene(gen_seed, config, grid)?;
            batch.push(apply_shift(&clean, spec, shift_seed, config)?);
        }
        stream.push(batch);
    }
    Ok(stream)
}

/// Generates a flat set of unshifted labeled scenes (a source dataset).
pub fn make_dataset(
    count: usize,
    config: &GenConfig,
    grid: &GridSpec,
    seed: u64,
) -> Result<Vec<Scene>, GenError> {
    let seeds = derive_scene_seeds(seed, count);
    seeds
        .into_iter()
        .map(|(gen_seed, _)| generate_scene(gen_seed, config, grid))
        .collect()
}

/// Like [`make_dataset`] but with the shift applied, keeping labels
/// consistent with the re-rendered objects (used for oracle training).
pub fn make_shifted_dataset(
    count: usize,
    config: &GenConfig,
    grid: &GridSpec,
    spec: &ShiftSpec,
    seed: u64,
) -> Result<Vec<Scene>, GenError> {
    let seeds = derive_scene_seeds(seed, count);
    seeds
        .into_iter()
        .map(|(gen_seed, shift_seed)| {
            let clean = generate_scene(gen_seed, config, grid)?;
            apply_shift(&clean, spec, shift_seed, config)
        })
        .collect()
}
