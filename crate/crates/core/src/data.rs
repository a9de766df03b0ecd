//! Procedural context-sensitive synthetic dataset.
//!
//! Scenes are horizontal background bands with distinct low-frequency
//! textures, plus flat-textured foreground shapes. Some foreground classes
//! come in context pairs: both members share the exact same texture and
//! shape, and the class is decided purely by which band the object sits in
//! (even band index = first member, odd = second). Test scenes additionally
//! contain anomalies drawn from held-out shape/texture combinations; those
//! pixels carry `ignore_index` in the label mask and 1 in the anomaly mask.

use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{MooseError, Result};

/// Label value for pixels excluded from the segmentation loss (anomalies).
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ShapeKind {
    Disk,
    Bar,
    Cross,
    Ring,
    Triangle,
    Diamond,
}

impl ShapeKind {
    fn covers(&self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dy * dy + dx * dx <= r * r,
            ShapeKind::Bar => dx.abs() <= r && dy.abs() <= (r / 2.5).max(1.5),
            ShapeKind::Cross => {
                let arm = (r / 2.5).max(1.5);
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
            }
            ShapeKind::Triangle => {
                // upright isoceles inside the bounding box
                dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
            }
            ShapeKind::Diamond => dy.abs() + dx.abs() <= r,
        }
    }
}

const INDIST_SHAPES: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Bar, ShapeKind::Cross];
const HELDOUT_SHAPES: [ShapeKind; 3] = [ShapeKind::Ring, ShapeKind::Triangle, ShapeKind::Diamond];

/// One held-out anomaly appearance: a shape and a flat texture color.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AnomalySpec {
    pub shape: ShapeKind,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Known-negative scenes for outlier exposure; anomalies use exposure
    /// textures disjoint from both the in-distribution and test catalogs.
    Oe,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Oe => "oe",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "oe" => Ok(Split::Oe),
            other => Err(MooseError::usage(format!("unknown split '{other}'"))),
        }
    }

    fn has_anomalies(&self) -> bool {
        matches!(self, Split::Test | Split::Oe)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    /// Square image side; must be divisible by the model's output stride.
    pub image_size: usize,
    pub num_background_classes: usize,
    pub num_foreground_classes: usize,
    /// Number of foreground class pairs that share a texture and are
    /// disambiguated only by the band they sit in.
    pub context_pair_count: usize,
    /// Held-out shape/texture combinations used for test anomalies. Filled
    /// from [`SceneConfig::default_catalog`] when empty.
    pub anomaly_catalog: Vec<AnomalySpec>,
    /// Total objects per scene (inclusive range); must admit the guaranteed
    /// per-class objects.
    pub objects_per_scene: (usize, usize),
    /// Amplitude of the uniform per-pixel texture noise.
    pub noise_floor: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Per-scene anomaly pixel fraction range for test scenes.
    pub anomaly_prevalence: (f64, f64),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 128,
            num_background_classes: 2,
            num_foreground_classes: 5,
            context_pair_count: 2,
            anomaly_catalog: Vec::new(),
            objects_per_scene: (7, 10),
            noise_floor: 0.04,
            train_scenes: 300,
            val_scenes: 60,
            test_scenes: 80,
            anomaly_prevalence: (0.01, 0.05),
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(MooseError::config("image_size must be >= 32"));
        }
        if self.num_background_classes < 2 {
            return Err(MooseError::config(
                "need >= 2 background bands (even and odd) for context pairs",
            ));
        }
        if self.num_foreground_classes < 2 * self.context_pair_count
            || self.num_foreground_classes == 0
        {
            return Err(MooseError::config(
                "num_foreground_classes must cover the context pairs",
            ));
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return Err(MooseError::config("objects_per_scene range is inverted"));
        }
        if self.guaranteed_objects() > self.objects_per_scene.1 {
            return Err(MooseError::config(format!(
                "objects_per_scene max {} below the {} guaranteed per-class objects",
                self.objects_per_scene.1,
                self.guaranteed_objects()
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_floor) {
            return Err(MooseError::config("noise_floor must be in [0, 1]"));
        }
        let (lo, hi) = self.anomaly_prevalence;
        if !(0.0 < lo && lo < hi && hi < 0.5) {
            return Err(MooseError::config("anomaly_prevalence must satisfy 0 < lo < hi < 0.5"));
        }
        if self.num_classes() >= IGNORE_INDEX as usize {
            return Err(MooseError::config("too many classes for u8 labels"));
        }
        Ok(())
    }

    /// Background classes come first, then foreground classes.
    pub fn num_classes(&self) -> usize {
        self.num_background_classes + self.num_foreground_classes
    }

    pub fn foreground_classes(&self) -> Vec<usize> {
        (self.num_background_classes..self.num_classes()).collect()
    }

    /// One object per pair member plus one per unpaired foreground class.
    fn guaranteed_objects(&self) -> usize {
        self.num_foreground_classes
    }

    fn band_height(&self) -> usize {
        self.image_size.div_ceil(self.num_background_classes)
    }

    fn band_of_row(&self, y: usize) -> usize {
        (y / self.band_height()).min(self.num_background_classes - 1)
    }

    /// In-distribution object size range in pixels at this image size.
    fn object_size_range(&self) -> (f64, f64) {
        let s = self.image_size as f64 / 128.0;
        ((8.0 * s).max(6.0), 48.0 * s)
    }

    /// Anomaly size range: small (8 px) through large (48 px) at 128px, to
    /// exercise the small-object failure mode.
    fn anomaly_size_range(&self) -> (f64, f64) {
        let s = self.image_size as f64 / 128.0;
        ((8.0 * s).max(6.0), 48.0 * s)
    }

    /// Texture slots: one per context pair, one per unpaired class.
    fn texture_slots(&self) -> usize {
        self.context_pair_count + (self.num_foreground_classes - 2 * self.context_pair_count)
    }

    /// Flat texture color of a foreground class (pair members share one).
    pub fn foreground_color(&self, fg_index: usize) -> [f32; 3] {
        let slot = if fg_index < 2 * self.context_pair_count {
            fg_index / 2
        } else {
            fg_index - self.context_pair_count
        };
        hsv_to_rgb(slot as f64 / self.texture_slots() as f64, 0.75, 0.85)
    }

    /// Shape of a foreground class.
    pub fn foreground_shape(&self, fg_index: usize) -> ShapeKind {
        let slot = if fg_index < 2 * self.context_pair_count {
            fg_index / 2
        } else {
            fg_index - self.context_pair_count
        };
        INDIST_SHAPES[slot % INDIST_SHAPES.len()]
    }

    /// Held-out anomaly appearances: unseen shapes and hue-shifted textures
    /// (disjoint from every in-distribution texture, but close enough that
    /// appearance-driven heads confidently mistake them for a neighbor
    /// class), plus seen shapes in unseen desaturated textures.
    pub fn default_catalog(&self) -> Vec<AnomalySpec> {
        let t = self.texture_slots() as f64;
        let mut out = Vec::new();
        for (i, &shape) in HELDOUT_SHAPES.iter().enumerate() {
            out.push(AnomalySpec {
                shape,
                color: hsv_to_rgb((i as f64 + 0.5) / t, 0.75, 0.85),
            });
        }
        for (i, &shape) in INDIST_SHAPES.iter().enumerate() {
            out.push(AnomalySpec {
                shape,
                color: hsv_to_rgb((i as f64 + 0.5) / t, 0.55, 0.65),
            });
        }
        out
    }

    /// Exposure textures for the optional outlier-exposure split; disjoint
    /// from both the in-distribution colors and the test catalog.
    fn exposure_catalog(&self) -> Vec<AnomalySpec> {
        let t = self.texture_slots() as f64;
        HELDOUT_SHAPES
            .iter()
            .enumerate()
            .map(|(i, &shape)| AnomalySpec {
                shape,
                color: hsv_to_rgb((i as f64 + 0.75) / t, 0.9, 0.5),
            })
            .collect()
    }

    fn catalog_for(&self, split: Split) -> Vec<AnomalySpec> {
        match split {
            Split::Oe => self.exposure_catalog(),
            _ if self.anomaly_catalog.is_empty() => self.default_catalog(),
            _ => self.anomaly_catalog.clone(),
        }
    }

    /// Class of a context-pair member given its band: even bands host the
    /// first member, odd bands the second.
    pub fn pair_class_for_band(&self, pair: usize, band: usize) -> usize {
        let base = self.num_background_classes + 2 * pair;
        if band % 2 == 0 {
            base
        } else {
            base + 1
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// One image with its semantic labels and binary anomaly mask.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    /// `[3, H, W]`, values in [0, 1], quantized to 8 bits so in-memory and
    /// on-disk scenes are bit-identical.
    pub image: Array3<f32>,
    pub labels: Array2<u8>,
    pub anomaly: Array2<u8>,
}

impl LabeledScene {
    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }
}

fn scene_rng(seed: u64, split: Split, index: usize) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(split.tag().as_bytes());
    hasher.update((index as u64).to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha12Rng::from_seed(key)
}

struct Canvas {
    size: usize,
    image: Array3<f32>,
    labels: Array2<u8>,
    anomaly: Array2<u8>,
}

impl Canvas {
    fn paint_shape(
        &mut self,
        shape: ShapeKind,
        color: [f32; 3],
        cy: f64,
        cx: f64,
        r: f64,
        label: u8,
        is_anomaly: bool,
        noise_floor: f64,
        rng: &mut ChaCha12Rng,
    ) -> usize {
        let s = self.size as isize;
        let y0 = ((cy - r).floor() as isize).max(0);
        let y1 = ((cy + r).ceil() as isize).min(s - 1);
        let x0 = ((cx - r).floor() as isize).max(0);
        let x1 = ((cx + r).ceil() as isize).min(s - 1);
        let mut painted = 0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !shape.covers(y as f64 - cy, x as f64 - cx, r) {
                    continue;
                }
                let (yu, xu) = (y as usize, x as usize);
                for c in 0..3 {
                    let noise = (rng.random::<f64>() * 2.0 - 1.0) * noise_floor;
                    self.image[[c, yu, xu]] = (color[c] as f64 + noise).clamp(0.0, 1.0) as f32;
                }
                self.labels[[yu, xu]] = label;
                self.anomaly[[yu, xu]] = u8::from(is_anomaly);
                painted += 1;
            }
        }
        painted
    }
}

/// Deterministically generate one scene: same `(cfg.seed, index, split)`
/// always yields the identical scene, regardless of generation order.
pub fn generate_scene(cfg: &SceneConfig, index: usize, split: Split) -> Result<LabeledScene> {
    cfg.validate()?;
    let s = cfg.image_size;
    let mut rng = scene_rng(cfg.seed, split, index);

    let mut canvas = Canvas {
        size: s,
        image: Array3::zeros((3, s, s)),
        labels: Array2::zeros((s, s)),
        anomaly: Array2::zeros((s, s)),
    };

    // Background bands: per-band base color plus a low-frequency sinusoid.
    let bands = cfg.num_background_classes;
    for y in 0..s {
        let band = cfg.band_of_row(y);
        let base = hsv_to_rgb(0.55 + band as f64 * 0.31, 0.35, 0.45);
        // direction and frequency vary per band, always low-frequency
        let (fy, fx, phase) = match band % 4 {
            0 => (1.0, 0.0, 0.0),
            1 => (0.0, 1.0, 1.0),
            2 => (1.0, 1.0, 2.0),
            _ => (2.0, 1.0, 3.0),
        };
        for x in 0..s {
            let t = 2.0 * std::f64::consts::PI * (fy * y as f64 + fx * x as f64) / s as f64;
            let m = 1.0 + 0.18 * (t + phase).sin();
            for c in 0..3 {
                let noise = (rng.random::<f64>() * 2.0 - 1.0) * cfg.noise_floor;
                canvas.image[[c, y, x]] = ((base[c] as f64) * m + noise).clamp(0.0, 1.0) as f32;
            }
            canvas.labels[[y, x]] = band as u8;
        }
    }

    let (size_lo, size_hi) = cfg.object_size_range();
    let band_h = cfg.band_height() as f64;

    // Free-floating extras first, guaranteed per-class objects after, so a
    // guaranteed object is never fully painted over by an extra.
    let total = rng.random_range(cfg.objects_per_scene.0..=cfg.objects_per_scene.1);
    let extras = total.saturating_sub(cfg.guaranteed_objects());

    let place_pair = |canvas: &mut Canvas, rng: &mut ChaCha12Rng, pair: usize, band: usize| {
        let cls = cfg.pair_class_for_band(pair, band);
        let fg = cls - cfg.num_background_classes;
        // fit inside the band so the context rule is unambiguous
        let rmax = ((band_h - 4.0) / 2.0).min(size_hi / 2.0);
        let r = rng.random_range(size_lo / 2.0..=rmax.max(size_lo / 2.0 + 0.1));
        let y_lo = band as f64 * band_h + r + 1.0;
        let y_hi = (((band + 1) as f64) * band_h - r - 1.0).min(s as f64 - r - 1.0);
        let cy = if y_hi > y_lo { rng.random_range(y_lo..=y_hi) } else { y_lo };
        let cx = rng.random_range(r..=(s as f64 - r));
        canvas.paint_shape(
            cfg.foreground_shape(fg),
            cfg.foreground_color(fg),
            cy,
            cx,
            r,
            cls as u8,
            false,
            cfg.noise_floor,
            rng,
        );
    };

    let place_unpaired = |canvas: &mut Canvas, rng: &mut ChaCha12Rng, fg: usize| {
        let cls = cfg.num_background_classes + fg;
        let r = rng.random_range(size_lo / 2.0..=size_hi / 2.0);
        let cy = rng.random_range(0.0..=(s as f64 - 1.0));
        let cx = rng.random_range(0.0..=(s as f64 - 1.0));
        canvas.paint_shape(
            cfg.foreground_shape(fg),
            cfg.foreground_color(fg),
            cy,
            cx,
            r,
            cls as u8,
            false,
            cfg.noise_floor,
            rng,
        );
    };

    for _ in 0..extras {
        // pick a texture slot uniformly; pairs resolve class via the band
        let slot = rng.random_range(0..cfg.texture_slots());
        if slot < cfg.context_pair_count {
            let band = rng.random_range(0..bands);
            place_pair(&mut canvas, &mut rng, slot, band);
        } else {
            let fg = cfg.context_pair_count + slot;
            place_unpaired(&mut canvas, &mut rng, fg);
        }
    }

    for pair in 0..cfg.context_pair_count {
        let even_bands: Vec<usize> = (0..bands).filter(|b| b % 2 == 0).collect();
        let odd_bands: Vec<usize> = (0..bands).filter(|b| b % 2 == 1).collect();
        let be = even_bands[rng.random_range(0..even_bands.len())];
        let bo = odd_bands[rng.random_range(0..odd_bands.len())];
        place_pair(&mut canvas, &mut rng, pair, be);
        place_pair(&mut canvas, &mut rng, pair, bo);
    }
    for fg in 2 * cfg.context_pair_count..cfg.num_foreground_classes {
        place_unpaired(&mut canvas, &mut rng, fg);
    }

    // Anomalies last, only on splits that carry them.
    if split.has_anomalies() {
        let (anom_lo, anom_hi) = cfg.anomaly_size_range();
        let catalog = cfg.catalog_for(split);
        let (lo, hi) = cfg.anomaly_prevalence;
        let target = rng.random_range(lo.max(lo * 1.15)..=hi * 0.9);
        let total_px = (s * s) as f64;
        let mut placed = 0;
        for _ in 0..12 {
            let current = canvas.anomaly.iter().filter(|&&a| a == 1).count() as f64 / total_px;
            if current >= target || placed >= 6 {
                break;
            }
            // cap the size so a single object cannot overshoot the band
            let budget_px = (hi * 0.95 - current) * total_px;
            let r_budget = (budget_px / std::f64::consts::PI).sqrt();
            let r_hi = (anom_hi / 2.0).min(r_budget);
            if r_hi < anom_lo / 2.0 {
                break;
            }
            let r = rng.random_range(anom_lo / 2.0..=r_hi);
            let spec = &catalog[rng.random_range(0..catalog.len())];
            let cy = rng.random_range(r..=(s as f64 - r));
            let cx = rng.random_range(r..=(s as f64 - r));
            canvas.paint_shape(
                spec.shape,
                spec.color,
                cy,
                cx,
                r,
                IGNORE_INDEX,
                true,
                cfg.noise_floor,
                &mut rng,
            );
            placed += 1;
        }
    }

    // Quantize to 8 bits so the in-memory scene equals its file roundtrip.
    canvas
        .image
        .mapv_inplace(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0);

    Ok(LabeledScene {
        image: canvas.image,
        labels: canvas.labels,
        anomaly: canvas.anomaly,
    })
}

/// Generate every scene of a split, in parallel, deterministically.
pub fn generate_scenes(cfg: &SceneConfig, split: Split, count: usize) -> Result<Vec<LabeledScene>> {
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(cfg, i, split))
        .collect()
}

/// Replace the pixels of the listed classes with a blend of the original and
/// i.i.d. uniform noise: `(1 - level) * original + level * U(0, 1)` per
/// channel. Everything else is bit-identical; labels never change.
pub fn corrupt_foreground(
    scene: &LabeledScene,
    classes: &[usize],
    noise_level: f64,
    num_classes: usize,
    seed: u64,
) -> Result<LabeledScene> {
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(MooseError::usage("noise_level must be in [0, 1]"));
    }
    for &c in classes {
        if c >= num_classes {
            return Err(MooseError::usage(format!("unknown class id {c}")));
        }
    }
    let mut out = scene.clone();
    if noise_level == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6f6f7365);
    let (h, w) = scene.labels.dim();
    for y in 0..h {
        for x in 0..w {
            let l = scene.labels[[y, x]] as usize;
            if scene.labels[[y, x]] != IGNORE_INDEX && classes.contains(&l) {
                for c in 0..3 {
                    let u = rng.random::<f64>();
                    let v = (1.0 - noise_level) * scene.image[[c, y, x]] as f64 + noise_level * u;
                    out.image[[c, y, x]] = v as f32;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

fn write_ppm(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (_, h, w) = (image.dim().0, image.dim().1, image.dim().2);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((image[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

fn read_ppm(path: &Path) -> Result<Array3<f32>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_pnm_header(&mut f, "P6")?;
    let mut buf = vec![0u8; w * h * 3];
    f.read_exact(&mut buf)?;
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[c, y, x]] = buf[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

fn write_pgm(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(mask.as_slice().expect("contiguous mask"))?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<Array2<u8>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_pnm_header(&mut f, "P5")?;
    let mut buf = vec![0u8; w * h];
    f.read_exact(&mut buf)?;
    Array2::from_shape_vec((h, w), buf).map_err(|e| MooseError::format(e.to_string()))
}

fn read_pnm_header(f: &mut impl BufRead, magic: &str) -> Result<(usize, usize)> {
    let mut line = String::new();
    f.read_line(&mut line)?;
    if line.trim() != magic {
        return Err(MooseError::format(format!("expected {magic} header")));
    }
    line.clear();
    f.read_line(&mut line)?;
    let mut it = line.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| MooseError::format("bad PNM dims"))?;
    let h: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| MooseError::format("bad PNM dims"))?;
    line.clear();
    f.read_line(&mut line)?;
    if line.trim() != "255" {
        return Err(MooseError::format("expected 8-bit PNM"));
    }
    Ok((w, h))
}

/// Write `split/{images,labels,anomaly}/NNNNN.(ppm|pgm)` for all configured
/// splits plus a `manifest.txt` with counts and the class catalog.
pub fn generate_split(cfg: &SceneConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    let splits = [
        (Split::Train, cfg.train_scenes),
        (Split::Val, cfg.val_scenes),
        (Split::Test, cfg.test_scenes),
    ];
    for (split, count) in splits {
        let dir = root.join(split.tag());
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("labels"))?;
        std::fs::create_dir_all(dir.join("anomaly"))?;
        (0..count)
            .into_par_iter()
            .try_for_each(|i| -> Result<()> {
                let scene = generate_scene(cfg, i, split)?;
                write_ppm(&dir.join(format!("images/{i:05}.ppm")), &scene.image)?;
                write_pgm(&dir.join(format!("labels/{i:05}.pgm")), &scene.labels)?;
                write_pgm(&dir.join(format!("anomaly/{i:05}.pgm")), &scene.anomaly)?;
                Ok(())
            })?;
    }

    let mut manifest = String::new();
    let _ = writeln!(manifest, "dataset=moose-synth-v1");
    let _ = writeln!(manifest, "image_size={}", cfg.image_size);
    let _ = writeln!(manifest, "num_classes={}", cfg.num_classes());
    let _ = writeln!(manifest, "num_background_classes={}", cfg.num_background_classes);
    let _ = writeln!(manifest, "num_foreground_classes={}", cfg.num_foreground_classes);
    let _ = writeln!(manifest, "context_pair_count={}", cfg.context_pair_count);
    let _ = writeln!(manifest, "ignore_index={IGNORE_INDEX}");
    let _ = writeln!(manifest, "seed={}", cfg.seed);
    let _ = writeln!(manifest, "train_count={}", cfg.train_scenes);
    let _ = writeln!(manifest, "val_count={}", cfg.val_scenes);
    let _ = writeln!(manifest, "test_count={}", cfg.test_scenes);
    for b in 0..cfg.num_background_classes {
        let _ = writeln!(manifest, "class_{b}=band{b}");
    }
    for fg in 0..cfg.num_foreground_classes {
        let cls = cfg.num_background_classes + fg;
        let name = if fg < 2 * cfg.context_pair_count {
            format!("pair{}_{}", fg / 2, if fg % 2 == 0 { "a" } else { "b" })
        } else {
            format!("solo{}", fg - 2 * cfg.context_pair_count)
        };
        let _ = writeln!(manifest, "class_{cls}={name}");
    }
    std::fs::write(root.join("manifest.txt"), manifest)?;
    Ok(())
}

/// A dataset directory with its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub image_size: usize,
    pub num_classes: usize,
    pub num_background_classes: usize,
    pub num_foreground_classes: usize,
    pub context_pair_count: usize,
    pub counts: std::collections::HashMap<String, usize>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(root.join("manifest.txt"))?;
        let mut kv = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        if kv.get("dataset").map(String::as_str) != Some("moose-synth-v1") {
            return Err(MooseError::format("missing moose-synth-v1 manifest"));
        }
        let get = |k: &str| -> Result<usize> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| MooseError::format(format!("manifest missing {k}")))
        };
        let mut counts = std::collections::HashMap::new();
        counts.insert("train".into(), get("train_count")?);
        counts.insert("val".into(), get("val_count")?);
        counts.insert("test".into(), get("test_count")?);
        Ok(Dataset {
            root: root.to_path_buf(),
            image_size: get("image_size")?,
            num_classes: get("num_classes")?,
            num_background_classes: get("num_background_classes")?,
            num_foreground_classes: get("num_foreground_classes")?,
            context_pair_count: get("context_pair_count")?,
            counts,
        })
    }

    pub fn len(&self, split: Split) -> usize {
        *self.counts.get(split.tag()).unwrap_or(&0)
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    pub fn load_scene(&self, split: Split, index: usize) -> Result<LabeledScene> {
        let dir = self.root.join(split.tag());
        let image = read_ppm(&dir.join(format!("images/{index:05}.ppm")))?;
        let labels = read_pgm(&dir.join(format!("labels/{index:05}.pgm")))?;
        let anomaly = read_pgm(&dir.join(format!("anomaly/{index:05}.pgm")))?;
        Ok(LabeledScene {
            image,
            labels,
            anomaly,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledScene>> {
        (0..self.len(split))
            .into_par_iter()
            .map(|i| self.load_scene(split, i))
            .collect()
    }

    pub fn foreground_classes(&self) -> Vec<usize> {
        (self.num_background_classes..self.num_classes).collect()
    }
}
