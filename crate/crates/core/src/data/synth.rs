//! Thin-lens synthetic scenes.
//!
//! A scene is a stack of textured, fronto-parallel layers with known depth.
//! Rendering resolves visibility per pixel, adds distance haze, then blurs
//! every pixel with a uniform disc whose radius is the thin-lens circle of
//! confusion at that pixel's depth. Pixels whose CoC exceeds the in-focus
//! threshold are labelled defocused.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loader::{
    write_depth, write_gray, write_manifest, write_rgb, ManifestRow, DEPTH_DIR, IMAGE_DIR, MASK_DIR,
};
use super::record::{SampleMeta, SampleRecord};
use crate::error::{DbdError, Result};
use crate::seed::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensParams {
    pub focal_length_mm: f64,
    pub f_number: f64,
    pub focus_distance_m: f64,
    pub sensor_px_per_mm: f64,
    pub coc_in_focus_threshold_px: f64,
    /// Upper bound on the rendered blur radius.
    pub max_blur_radius_px: f64,
}

impl Default for LensParams {
    fn default() -> Self {
        Self {
            focal_length_mm: 50.0,
            f_number: 1.8,
            focus_distance_m: 2.0,
            sensor_px_per_mm: 10.0,
            coc_in_focus_threshold_px: 1.0,
            max_blur_radius_px: 6.0,
        }
    }
}

impl LensParams {
    pub fn with_f_number(self, f_number: f64) -> Self {
        Self { f_number, ..self }
    }

    /// `f1.8`, `f16`, ...
    pub fn regime_name(&self) -> String {
        format!("f{}", self.f_number)
    }

    pub fn aperture_mm(&self) -> f64 {
        self.focal_length_mm / self.f_number
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("focal_length_mm", self.focal_length_mm),
            ("focus_distance_m", self.focus_distance_m),
            ("sensor_px_per_mm", self.sensor_px_per_mm),
            ("coc_in_focus_threshold_px", self.coc_in_focus_threshold_px),
            ("max_blur_radius_px", self.max_blur_radius_px),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DbdError::Config(format!(
                    "lens {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.f_number >= 0.5 && self.f_number.is_finite()) {
            return Err(DbdError::Config(format!(
                "f-number must be at least 0.5, got {}",
                self.f_number
            )));
        }
        if self.focus_distance_m * 1000.0 <= self.focal_length_mm {
            return Err(DbdError::Geometry(format!(
                "focus distance {} m is inside the focal length {} mm",
                self.focus_distance_m, self.focal_length_mm
            )));
        }
        Ok(())
    }

    /// Circle of confusion in pixels for a point at `depth_m`:
    /// `A |d - d_f| f / (d (d_f - f))`, all lengths in millimetres, times the sensor scale.
    pub fn coc_px(&self, depth_m: f64) -> Result<f64> {
        let f = self.focal_length_mm;
        let d = depth_m * 1000.0;
        let df = self.focus_distance_m * 1000.0;
        if d <= f {
            return Err(DbdError::Geometry(format!(
                "object at {depth_m} m is not beyond the focal length {f} mm"
            )));
        }
        Ok(self.aperture_mm() * (d - df).abs() * f / (d * (df - f)) * self.sensor_px_per_mm)
    }
}

/// Parses a regime token such as `f1.8` or `f16` into the default lens at that f-number.
pub fn parse_regime(token: &str, base: LensParams) -> Result<LensParams> {
    let n = token
        .trim()
        .strip_prefix('f')
        .or_else(|| token.trim().strip_prefix('F'))
        .and_then(|s| f64::from_str(s).ok())
        .ok_or_else(|| {
            DbdError::Config(format!("bad lens regime {token:?}; expected e.g. f1.8"))
        })?;
    let lens = base.with_f_number(n);
    lens.validate()?;
    Ok(lens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat([f32; 3]),
    Checker {
        period: usize,
        a: [f32; 3],
        b: [f32; 3],
    },
    /// Bilinear value noise on a `cell`-pixel lattice around `base`.
    Noise {
        seed: u64,
        cell: usize,
        base: [f32; 3],
        amplitude: f32,
    },
}

impl Texture {
    fn sampler(&self, size: (usize, usize)) -> Box<dyn Fn(usize, usize) -> [f32; 3] + '_> {
        match self {
            Texture::Flat(c) => Box::new(move |_, _| *c),
            Texture::Checker { period, a, b } => {
                let p = (*period).max(1);
                Box::new(move |y, x| if (y / p + x / p) % 2 == 0 { *a } else { *b })
            }
            Texture::Noise {
                seed,
                cell,
                base,
                amplitude,
            } => {
                let cell = (*cell).max(1);
                let gh = size.0 / cell + 2;
                let gw = size.1 / cell + 2;
                let mut rng = stream(*seed, &[]);
                let grid: Vec<[f32; 3]> = (0..gh * gw)
                    .map(|_| {
                        let l: f32 = rng.random_range(-1.0..1.0);
                        let mut c = [0.0; 3];
                        for ch in &mut c {
                            *ch = l + 0.3 * rng.random_range(-1.0f32..1.0);
                        }
                        c
                    })
                    .collect();
                Box::new(move |y, x| {
                    let fy = y as f32 / cell as f32;
                    let fx = x as f32 / cell as f32;
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                    let g = |yy: usize, xx: usize| grid[yy * gw + xx];
                    let mut out = [0.0; 3];
                    for c in 0..3 {
                        let top = g(y0, x0)[c] * (1.0 - tx) + g(y0, x0 + 1)[c] * tx;
                        let bot = g(y0 + 1, x0)[c] * (1.0 - tx) + g(y0 + 1, x0 + 1)[c] * tx;
                        out[c] =
                            (base[c] + amplitude * (top * (1.0 - ty) + bot * ty)).clamp(0.0, 1.0);
                    }
                    out
                })
            }
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, Texture::Flat(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Full,
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Disc {
        cy: f64,
        cx: f64,
        radius: f64,
    },
}

impl Region {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Region::Full => true,
            Region::Rect {
                top,
                left,
                height,
                width,
            } => y >= top && y < top + height && x >= left && x < left + width,
            Region::Disc { cy, cx, radius } => {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                dy * dy + dx * dx <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthProfile {
    Constant(f64),
    /// Linear in the row index, from `top` at row 0 to `bottom` at the last row.
    VerticalRamp {
        top: f64,
        bottom: f64,
    },
}

impl DepthProfile {
    fn at(&self, y: usize, h: usize) -> f64 {
        match *self {
            DepthProfile::Constant(d) => d,
            DepthProfile::VerticalRamp { top, bottom } => {
                let t = if h > 1 {
                    y as f64 / (h - 1) as f64
                } else {
                    0.0
                };
                top + (bottom - top) * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub region: Region,
    /// Metres.
    pub depth: DepthProfile,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    /// `(height, width)`.
    pub size: (usize, usize),
    /// Visibility is resolved per pixel by the nearest covering layer.
    pub layers: Vec<Layer>,
    /// Haze density per metre; 0 disables haze.
    pub haze: f64,
    pub haze_color: [f32; 3],
}

/// Per-pixel depth in metres, quantised to whole millimetres, and the visible layer index.
pub fn layout_depth(layout: &LayoutSpec) -> Result<(Array2<f32>, Array2<usize>)> {
    let (h, w) = layout.size;
    let mut depth = Array2::from_elem((h, w), f32::INFINITY);
    let mut owner = Array2::from_elem((h, w), usize::MAX);
    for (i, layer) in layout.layers.iter().enumerate() {
        for y in 0..h {
            let d = ((layer.depth.at(y, h) * 1000.0).round() / 1000.0) as f32;
            for x in 0..w {
                if layer.region.contains(y, x) && d < depth[[y, x]] {
                    depth[[y, x]] = d;
                    owner[[y, x]] = i;
                }
            }
        }
    }
    if let Some(((y, x), _)) = owner.indexed_iter().find(|(_, &o)| o == usize::MAX) {
        return Err(DbdError::Config(format!(
            "layout leaves pixel ({y}, {x}) uncovered"
        )));
    }
    Ok((depth, owner))
}

/// Mean over a disc of radius `r` around `(y, x)` with anti-aliased rim and clamped borders.
fn disc_mean(sharp: &Array3<f32>, y: usize, x: usize, r: f64) -> [f32; 3] {
    let (_, h, w) = sharp.dim();
    let reach = (r + 0.5).ceil() as isize;
    let mut acc = [0.0f64; 3];
    let mut total = 0.0f64;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let dist = ((dy * dy + dx * dx) as f64).sqrt();
            let wgt = (r + 0.5 - dist).clamp(0.0, 1.0);
            if wgt == 0.0 {
                continue;
            }
            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
            for c in 0..3 {
                acc[c] += wgt * sharp[[c, yy, xx]] as f64;
            }
            total += wgt;
        }
    }
    [
        (acc[0] / total) as f32,
        (acc[1] / total) as f32,
        (acc[2] / total) as f32,
    ]
}

fn quantise(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders `layout` through `lens`. Image values sit on the 8-bit grid and
/// depth on the millimetre grid, so the record survives a disk round trip.
pub fn synth_scene(layout: &LayoutSpec, lens: &LensParams) -> Result<SampleRecord> {
    lens.validate()?;
    let (h, w) = layout.size;
    let (depth, owner) = layout_depth(layout)?;
    let samplers: Vec<_> = layout
        .layers
        .iter()
        .map(|l| l.texture.sampler(layout.size))
        .collect();

    let mut sharp = Array3::<f32>::zeros((3, h, w));
    let mut coc = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let d = depth[[y, x]] as f64;
            coc[[y, x]] = lens.coc_px(d)?;
            let rgb = samplers[owner[[y, x]]](y, x);
            let t = (-layout.haze * d).exp() as f32;
            for c in 0..3 {
                sharp[[c, y, x]] = rgb[c] * t + layout.haze_color[c] * (1.0 - t);
            }
        }
    }

    let mut image = Array3::<f32>::zeros((3, h, w));
    let mut label = Array3::<f32>::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let c = coc[[y, x]];
            let rgb = disc_mean(&sharp, y, x, c.min(lens.max_blur_radius_px));
            for ch in 0..3 {
                image[[ch, y, x]] = quantise(rgb[ch]);
            }
            if c > lens.coc_in_focus_threshold_px {
                label[[0, y, x]] = 1.0;
            }
        }
    }

    Ok(SampleRecord {
        image,
        blur_label: label,
        depth: Some(depth.insert_axis(ndarray::Axis(0))),
        meta: SampleMeta {
            aperture_f_number: Some(lens.f_number),
            focus_distance: Some(lens.focus_distance_m),
            source_id: String::new(),
            regime: Some(lens.regime_name()),
            homogeneous: false,
        },
    })
}

/// Knobs of the random scene generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneStyle {
    /// Probability that the in-focus subject is textureless.
    pub homogeneous_fraction: f64,
    /// Additional objects besides the subject, drawn uniformly from this range.
    pub extra_objects: (usize, usize),
    pub haze: f64,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self {
            homogeneous_fraction: 0.3,
            extra_objects: (1, 2),
            haze: 0.08,
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

fn random_texture(rng: &mut ChaCha8Rng, size: (usize, usize)) -> Texture {
    if rng.random_bool(0.5) {
        Texture::Checker {
            period: rng.random_range(2..=(size.0 / 8).max(3)),
            a: random_color(rng),
            b: random_color(rng),
        }
    } else {
        Texture::Noise {
            seed: rng.random(),
            cell: rng.random_range(2..=4),
            base: [0.5; 3],
            amplitude: rng.random_range(0.25..0.45),
        }
    }
}

fn random_region(rng: &mut ChaCha8Rng, (h, w): (usize, usize), lo: f64, hi: f64) -> Region {
    let frac = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        let height = ((h as f64 * frac) as usize).max(2);
        let width = ((w as f64 * rng.random_range(lo..hi)) as usize).max(2);
        Region::Rect {
            top: rng.random_range(0..=h - height),
            left: rng.random_range(0..=w - width),
            height,
            width,
        }
    } else {
        let radius = 0.5 * frac * h.min(w) as f64;
        Region::Disc {
            cy: rng.random_range(radius..=h as f64 - radius),
            cx: rng.random_range(radius..=w as f64 - radius),
            radius,
        }
    }
}

/// Random scene: a textured background, an in-focus subject at the focus
/// distance and a few distractors at other depths. Returns the layout and
/// whether the subject is textureless.
pub fn random_layout(
    size: (usize, usize),
    lens: &LensParams,
    style: &SceneStyle,
    rng: &mut ChaCha8Rng,
) -> (LayoutSpec, bool) {
    let df = lens.focus_distance_m;
    let far = rng.random_range(2.2 * df..4.5 * df);
    let background = Layer {
        region: Region::Full,
        depth: if rng.random_bool(0.5) {
            DepthProfile::Constant(far)
        } else {
            DepthProfile::VerticalRamp {
                top: far,
                bottom: rng.random_range(1.4 * df..2.0 * df),
            }
        },
        texture: random_texture(rng, size),
    };
    let homogeneous = rng.random_bool(style.homogeneous_fraction.clamp(0.0, 1.0));
    let subject = Layer {
        region: random_region(rng, size, 0.35, 0.6),
        depth: DepthProfile::Constant(df),
        texture: if homogeneous {
            Texture::Flat(random_color(rng))
        } else {
            random_texture(rng, size)
        },
    };
    let mut layers = vec![background, subject];
    let (lo, hi) = style.extra_objects;
    for _ in 0..rng.random_range(lo..=hi.max(lo)) {
        let depth = if rng.random_bool(0.5) {
            rng.random_range(0.3 * df..0.7 * df)
        } else {
            rng.random_range(1.5 * df..3.0 * df)
        };
        layers.push(Layer {
            region: random_region(rng, size, 0.15, 0.35),
            depth: DepthProfile::Constant(depth.max(lens.focal_length_mm / 1000.0 * 2.0)),
            texture: random_texture(rng, size),
        });
    }
    (
        LayoutSpec {
            size,
            layers,
            haze: style.haze,
            haze_color: [0.75, 0.8, 0.85],
        },
        homogeneous,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    /// `(height, width)`.
    pub size: (usize, usize),
    /// Sample `i` is rendered through `regimes[i % regimes.len()]`.
    pub regimes: Vec<LensParams>,
    pub seed: u64,
    pub style: SceneStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let lens = LensParams::default();
        Self {
            n: 16,
            size: (64, 64),
            regimes: vec![lens, lens.with_f_number(16.0)],
            seed: 0,
            style: SceneStyle::default(),
        }
    }
}

pub fn sample_stem(i: usize) -> String {
    format!("s{i:05}")
}

/// Renders sample `i` of a synthetic set without touching the disk.
pub fn synth_sample(config: &SynthConfig, i: usize) -> Result<SampleRecord> {
    if config.regimes.is_empty() {
        return Err(DbdError::Config(
            "synthetic set needs at least one lens regime".into(),
        ));
    }
    let lens = &config.regimes[i % config.regimes.len()];
    let mut rng = stream(config.seed, &[tag::SYNTH, i as u64]);
    let (layout, homogeneous) = random_layout(config.size, lens, &config.style, &mut rng);
    let mut record = synth_scene(&layout, lens)?;
    record.meta.source_id = sample_stem(i);
    record.meta.homogeneous = homogeneous;
    Ok(record)
}

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const SYNTH_ECHO_NAME: &str = "synth_config.json";

/// Writes `config.n` samples in the loader layout under `root` and returns the manifest path.
pub fn synth_dataset(root: &Path, config: &SynthConfig) -> Result<PathBuf> {
    if config.n == 0 {
        return Err(DbdError::Argument(
            "synthetic set size must be at least 1".into(),
        ));
    }
    for lens in &config.regimes {
        lens.validate()?;
    }
    for dir in [IMAGE_DIR, MASK_DIR, DEPTH_DIR] {
        std::fs::create_dir_all(root.join(dir)).map_err(|e| DbdError::load(root.join(dir), e))?;
    }
    let mut rows = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let r = synth_sample(config, i)?;
        let stem = &r.meta.source_id;
        write_rgb(&root.join(IMAGE_DIR).join(format!("{stem}.png")), &r.image)?;
        write_gray(
            &root.join(MASK_DIR).join(format!("{stem}.png")),
            &r.blur_label,
        )?;
        write_depth(
            &root.join(DEPTH_DIR).join(format!("{stem}.png")),
            r.depth.as_ref().expect("synthetic depth"),
        )?;
        let lens = &config.regimes[i % config.regimes.len()];
        rows.push(ManifestRow {
            stem: stem.clone(),
            regime: r.meta.regime.clone(),
            focal_length_mm: Some(lens.focal_length_mm),
            f_number: Some(lens.f_number),
            focus_distance_m: Some(lens.focus_distance_m),
            homogeneous: Some(r.meta.homogeneous),
        });
    }
    let manifest = root.join(MANIFEST_NAME);
    write_manifest(&manifest, &rows)?;
    std::fs::write(
        root.join(SYNTH_ECHO_NAME),
        serde_json::to_string_pretty(config)?,
    )?;
    Ok(manifest)
}
