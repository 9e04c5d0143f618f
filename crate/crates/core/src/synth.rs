//! Procedurally labelled road scenes with controllable class imbalance.
//!
//! A scene is a perspective trapezoid of one road surface over a textured
//! background, with small features (potholes, markings, ...) stamped onto the
//! road. Each feature is a pixel set; the same set is painted into the image
//! and labelled in the mask, so labels and textures align exactly.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassDistribution, Mask, SegmentationSample};
use crate::error::{Error, Result};
use crate::schema::{self, ClassId, ROAD_CLASS_COUNT};
use crate::seed;

const PLACEMENT_RETRIES: usize = 100;
pub const MIN_SCENE_SIDE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surface {
    Asphalt,
    Paved,
    Unpaved,
}

impl Surface {
    pub const ALL: [Surface; 3] = [Surface::Asphalt, Surface::Paved, Surface::Unpaved];

    pub fn class(self) -> ClassId {
        match self {
            Surface::Asphalt => schema::ASPHALT,
            Surface::Paved => schema::PAVED,
            Surface::Unpaved => schema::UNPAVED,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feature {
    Marking,
    SpeedBump,
    CatsEye,
    StormDrain,
    Patch,
    WaterPuddle,
    Pothole,
    Crack,
}

impl Feature {
    pub const ALL: [Feature; 8] = [
        Feature::Marking,
        Feature::SpeedBump,
        Feature::CatsEye,
        Feature::StormDrain,
        Feature::Patch,
        Feature::WaterPuddle,
        Feature::Pothole,
        Feature::Crack,
    ];

    pub fn class(self) -> ClassId {
        match self {
            Feature::Marking => schema::MARKINGS,
            Feature::SpeedBump => schema::SPEED_BUMP,
            Feature::CatsEye => schema::CATS_EYE,
            Feature::StormDrain => schema::STORM_DRAIN,
            Feature::Patch => schema::PATCH,
            Feature::WaterPuddle => schema::WATER_PUDDLE,
            Feature::Pothole => schema::POTHOLE,
            Feature::Crack => schema::CRACKS,
        }
    }

    pub fn from_class(id: ClassId) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.class() == id)
    }

    /// Approximate pixel area of one feature at scale 1 in a scene whose short side is `side`.
    fn nominal_area(self, side: f64, width: f64) -> f64 {
        let rect = |a: f64, b: f64| a.max(1.0).round() * b.max(1.0).round();
        match self {
            Feature::Pothole => std::f64::consts::PI * (0.06 * side) * (0.04 * side),
            Feature::WaterPuddle => std::f64::consts::PI * (0.09 * side) * (0.05 * side),
            Feature::Patch => rect(0.15 * side, 0.10 * side),
            Feature::Marking => rect(0.03 * side, 0.30 * side),
            Feature::SpeedBump => rect(0.04 * side, 0.4 * width),
            Feature::Crack => 0.4 * side,
            Feature::CatsEye => 4.0,
            Feature::StormDrain => rect(0.08 * side, 0.05 * side),
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            Feature::Marking => [235.0, 235.0, 230.0],
            Feature::SpeedBump => [215.0, 190.0, 40.0],
            Feature::CatsEye => [255.0, 245.0, 170.0],
            Feature::StormDrain => [30.0, 30.0, 35.0],
            Feature::Patch => [55.0, 55.0, 60.0],
            Feature::WaterPuddle => [105.0, 130.0, 165.0],
            Feature::Pothole => [28.0, 22.0, 20.0],
            Feature::Crack => [15.0, 15.0, 15.0],
        }
    }
}

/// Everything needed to render one scene deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub width: u32,
    pub height: u32,
    pub surface: Surface,
    #[serde(default)]
    pub feature_counts: BTreeMap<Feature, usize>,
    /// Per-feature area multiplier; missing entries mean 1.
    #[serde(default)]
    pub feature_scale: BTreeMap<Feature, f64>,
    /// Fraction of the frame covered by road. `None` picks a random layout.
    #[serde(default)]
    pub road_fraction: Option<f64>,
    /// Standard deviation of additive pixel noise, as a fraction of full scale.
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.04
}

impl SceneRecipe {
    pub fn new(width: u32, height: u32, surface: Surface, seed: u64) -> Self {
        SceneRecipe {
            width,
            height,
            surface,
            feature_counts: BTreeMap::new(),
            feature_scale: BTreeMap::new(),
            road_fraction: None,
            noise_level: default_noise(),
            seed,
        }
    }

    pub fn with_features(mut self, feature: Feature, count: usize) -> Self {
        self.feature_counts.insert(feature, count);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_SCENE_SIDE || self.height < MIN_SCENE_SIDE {
            return Err(Error::Config(format!(
                "scenes must be at least {MIN_SCENE_SIDE}x{MIN_SCENE_SIDE}, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config(
                "noise_level must be a finite value >= 0".into(),
            ));
        }
        if let Some(r) = self.road_fraction {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!(
                    "road_fraction must be in (0, 1), got {r}"
                )));
            }
        }
        if self
            .feature_scale
            .values()
            .any(|s| !(*s > 0.0 && s.is_finite()))
        {
            return Err(Error::Config("feature scales must be positive".into()));
        }
        Ok(())
    }
}

/// Road outline: for each row, the half-open column span covered by road.
struct RoadLayout {
    spans: Vec<Option<(u32, u32)>>,
}

impl RoadLayout {
    fn new(recipe: &SceneRecipe, rng: &mut ChaCha8Rng) -> RoadLayout {
        let (w, h) = (recipe.width as f64, recipe.height as f64);
        let horizon = rng.random_range(0.30..0.45);
        let top_width = rng.random_range(0.15..0.30);
        let mut bottom_width = rng.random_range(0.75..1.0);
        let mut horizon_frac = horizon;
        if let Some(target) = recipe.road_fraction {
            // area fraction = (1 - horizon) * (top + bottom) / 2
            bottom_width = 2.0 * target / (1.0 - horizon_frac) - top_width;
            if bottom_width > 1.0 {
                bottom_width = 1.0;
                horizon_frac = (1.0 - 2.0 * target / (top_width + bottom_width)).max(0.02);
            }
            bottom_width = bottom_width.max(top_width);
        }
        let lean = rng.random_range(-0.1..0.1) * w;
        let top = (horizon_frac * h).round() as u32;
        let mut spans = vec![None; recipe.height as usize];
        for y in top..recipe.height {
            let t = if recipe.height - 1 > top {
                (y - top) as f64 / (recipe.height - 1 - top) as f64
            } else {
                1.0
            };
            let half = 0.5 * w * (top_width + (bottom_width - top_width) * t);
            let centre = 0.5 * w + lean * (1.0 - t);
            let lo = (centre - half).round().max(0.0) as u32;
            let hi = ((centre + half).round().min(w) as u32).max(lo);
            if hi > lo {
                spans[y as usize] = Some((lo, hi));
            }
        }
        RoadLayout { spans }
    }

    fn contains(&self, x: i64, y: i64) -> bool {
        if y < 0 || x < 0 {
            return false;
        }
        match self.spans.get(y as usize) {
            Some(Some((lo, hi))) => (x as u32) >= *lo && (x as u32) < *hi,
            _ => false,
        }
    }

    fn rows(&self) -> impl Iterator<Item = (u32, (u32, u32))> + '_ {
        self.spans
            .iter()
            .enumerate()
            .filter_map(|(y, s)| s.map(|s| (y as u32, s)))
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.rows().collect();
        let &(y, (lo, hi)) = rows.get(rng.random_range(0..rows.len().max(1)))?;
        Some((rng.random_range(lo as f64..hi as f64), y as f64))
    }
}

type PixelSet = Vec<(u32, u32)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, w: u32, h: u32) -> PixelSet {
    let (rx, ry) = (rx.max(0.5), ry.max(0.5));
    let mut out = Vec::new();
    let y0 = (cy - ry).floor().max(0.0) as u32;
    let y1 = ((cy + ry).ceil() as u32).min(h - 1);
    let x0 = (cx - rx).floor().max(0.0) as u32;
    let x1 = ((cx + rx).ceil() as u32).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                out.push((x, y));
            }
        }
    }
    if out.is_empty() {
        out.push(((cx as u32).min(w - 1), (cy as u32).min(h - 1)));
    }
    out
}

fn rect(x: i64, y: i64, rw: u32, rh: u32) -> Vec<(i64, i64)> {
    let mut out = Vec::with_capacity((rw * rh) as usize);
    for dy in 0..rh as i64 {
        for dx in 0..rw as i64 {
            out.push((x + dx, y + dy));
        }
    }
    out
}

/// Proposes one candidate pixel set for `feature`; `None` when the candidate leaves the frame.
fn propose(
    feature: Feature,
    scale: f64,
    road: &RoadLayout,
    w: u32,
    h: u32,
    rng: &mut ChaCha8Rng,
) -> Option<PixelSet> {
    let side = w.min(h) as f64;
    let lin = scale.sqrt();
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0.8..1.25);
    let (cx, cy) = road.random_point(rng)?;
    let in_frame = |pts: Vec<(i64, i64)>| -> Option<PixelSet> {
        pts.into_iter()
            .map(|(x, y)| {
                (x >= 0 && y >= 0 && x < w as i64 && y < h as i64).then_some((x as u32, y as u32))
            })
            .collect()
    };
    let dim = |v: f64| v.round().max(1.0) as u32;
    match feature {
        Feature::Pothole => {
            let s = lin * jitter(rng);
            Some(ellipse(cx, cy, 0.06 * side * s, 0.04 * side * s, w, h))
        }
        Feature::WaterPuddle => {
            let s = lin * jitter(rng);
            Some(ellipse(cx, cy, 0.09 * side * s, 0.05 * side * s, w, h))
        }
        Feature::Patch => {
            let s = lin * jitter(rng);
            in_frame(rect(
                cx as i64,
                cy as i64,
                dim(0.15 * side * s),
                dim(0.10 * side * s),
            ))
        }
        Feature::StormDrain => {
            let s = lin * jitter(rng);
            in_frame(rect(
                cx as i64,
                cy as i64,
                dim(0.08 * side * s),
                dim(0.05 * side * s),
            ))
        }
        Feature::Marking => in_frame(rect(
            cx as i64,
            cy as i64,
            dim(0.03 * side * lin),
            dim(0.30 * side * lin),
        )),
        Feature::CatsEye => {
            let d = dim(2.0 * lin);
            in_frame(rect(cx as i64, cy as i64, d, d))
        }
        Feature::SpeedBump => {
            // Transverse band across the whole road.
            let thickness = dim(0.04 * side * scale * jitter(rng));
            let y0 = cy as u32;
            let mut out = Vec::new();
            for y in y0..(y0 + thickness).min(h) {
                if let Some((lo, hi)) = road.spans[y as usize] {
                    out.extend((lo..hi).map(|x| (x, y)));
                }
            }
            (!out.is_empty()).then_some(out)
        }
        Feature::Crack => {
            let steps = dim(0.4 * side * scale * jitter(rng));
            let (mut x, mut y) = (cx as i64, cy as i64);
            let mut out = vec![(x, y)];
            let dir_x: i64 = if rng.random::<bool>() { 1 } else { -1 };
            for _ in 1..steps {
                if rng.random::<f64>() < 0.5 {
                    x += dir_x;
                } else {
                    y += 1;
                }
                out.push((x, y));
            }
            in_frame(out)
        }
    }
}

/// Renders a scene. Deterministic in `recipe.seed`.
pub fn generate_scene(recipe: &SceneRecipe) -> Result<SegmentationSample> {
    recipe.validate()?;
    let (w, h) = (recipe.width, recipe.height);
    let mut layout_rng = seed::rng(recipe.seed, 1);
    let mut place_rng = seed::rng(recipe.seed, 2);
    let mut noise_rng = seed::rng(recipe.seed, 3);

    let road = RoadLayout::new(recipe, &mut layout_rng);
    if road.rows().next().is_none() {
        return Err(Error::Generation("road layout is empty".into()));
    }

    let mut mask = Mask::new(w, h, schema::BACKGROUND);
    for (y, (lo, hi)) in road.rows() {
        for x in lo..hi {
            mask.set(x, y, recipe.surface.class());
        }
    }

    // Features in a fixed order so the draw sequence depends only on the recipe.
    let mut occupied = vec![false; (w * h) as usize];
    let mut stamps: Vec<(Feature, PixelSet)> = Vec::new();
    for (&feature, &count) in &recipe.feature_counts {
        let scale = recipe.feature_scale.get(&feature).copied().unwrap_or(1.0);
        for _ in 0..count {
            let mut fallback = None;
            let mut chosen = None;
            for _ in 0..PLACEMENT_RETRIES {
                let Some(pixels) = propose(feature, scale, &road, w, h, &mut place_rng) else {
                    continue;
                };
                if !pixels
                    .iter()
                    .all(|&(x, y)| road.contains(x as i64, y as i64))
                {
                    continue;
                }
                let clear = pixels
                    .iter()
                    .all(|&(x, y)| neighbourhood(x, y, w, h).all(|i| !occupied[i]));
                if clear {
                    chosen = Some(pixels);
                    break;
                }
                fallback.get_or_insert(pixels);
            }
            let pixels = chosen.or(fallback).ok_or_else(|| {
                Error::Generation(format!(
                    "could not place {feature:?} inside the road after {PLACEMENT_RETRIES} attempts"
                ))
            })?;
            for &(x, y) in &pixels {
                occupied[(y * w + x) as usize] = true;
                mask.set(x, y, feature.class());
            }
            stamps.push((feature, pixels));
        }
    }

    let mut image = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let base = match mask.get(x, y) {
                schema::BACKGROUND => background_texture(x, y, recipe.seed),
                _ => surface_texture(recipe.surface, x, y, recipe.seed),
            };
            image.put_pixel(x, y, to_rgb(base));
        }
    }
    for (feature, pixels) in &stamps {
        for &(x, y) in pixels {
            image.put_pixel(x, y, to_rgb(feature_texture(*feature, x, y)));
        }
    }

    if recipe.noise_level > 0.0 {
        let normal = Normal::new(0.0, recipe.noise_level * 255.0).expect("finite sigma");
        for p in image.pixels_mut() {
            for c in p.0.iter_mut() {
                *c = (*c as f64 + normal.sample(&mut noise_rng))
                    .round()
                    .clamp(0.0, 255.0) as u8;
            }
        }
    }

    Ok(SegmentationSample {
        image,
        mask,
        source_id: format!("synthetic-{:016x}", recipe.seed),
    })
}

fn neighbourhood(x: u32, y: u32, w: u32, h: u32) -> impl Iterator<Item = usize> {
    let xs = x.saturating_sub(1)..=(x + 1).min(w - 1);
    let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
    ys.flat_map(move |yy| xs.clone().map(move |xx| (yy * w + xx) as usize))
}

fn to_rgb(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

/// Cheap deterministic per-pixel hash in [0, 1).
fn hash01(x: u32, y: u32, salt: u64) -> f64 {
    let v = seed::derive(salt, ((x as u64) << 32) | y as u64);
    (v >> 11) as f64 / (1u64 << 53) as f64
}

fn background_texture(x: u32, y: u32, salt: u64) -> [f64; 3] {
    // Coarse vegetation-like blotches.
    let blotch = hash01(x / 4, y / 4, salt ^ 0xB6) * 40.0;
    [60.0 + blotch, 115.0 + blotch, 55.0 + blotch * 0.5]
}

fn surface_texture(surface: Surface, x: u32, y: u32, salt: u64) -> [f64; 3] {
    match surface {
        Surface::Asphalt => {
            let grain = hash01(x, y, salt ^ 0xA5) * 14.0;
            [92.0 + grain, 92.0 + grain, 98.0 + grain]
        }
        Surface::Paved => {
            let mortar = x.is_multiple_of(4) || y.is_multiple_of(3);
            if mortar {
                [120.0, 95.0, 80.0]
            } else {
                [175.0, 120.0, 95.0]
            }
        }
        Surface::Unpaved => {
            let clod = hash01(x / 2, y / 2, salt ^ 0x7E) * 30.0;
            [150.0 + clod, 122.0 + clod, 78.0]
        }
    }
}

fn feature_texture(feature: Feature, x: u32, y: u32) -> [f64; 3] {
    let base = feature.base_color();
    match feature {
        Feature::SpeedBump if ((x + y) / 3) % 2 == 1 => [30.0, 30.0, 30.0],
        Feature::StormDrain if x.is_multiple_of(2) => [120.0, 120.0, 125.0],
        _ => base,
    }
}

// ---------------------------------------------------------------------------
// Corpora

/// The class-pixel fractions of the original annotated road corpus, in schema order.
pub const ROAD_PROFILE: [f64; ROAD_CLASS_COUNT] = [
    0.6586, 0.1290, 0.1050, 0.0922, 0.0078, 0.0006, 0.0002, 0.0002, 0.0022, 0.0003, 0.0006, 0.0033,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n: usize,
    pub width: u32,
    pub height: u32,
    /// Target class fractions, one per road class.
    pub profile: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(n: usize, width: u32, height: u32, profile: &[f64], seed: u64) -> Self {
        CorpusSpec {
            n,
            width,
            height,
            profile: profile.to_vec(),
            noise_level: default_noise(),
            seed,
        }
    }

    pub fn target(&self) -> Result<ClassDistribution> {
        ClassDistribution::from_fractions(self.profile.clone())
    }
}

/// Splits `total` items across `weights` by largest remainder.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Builds the per-scene recipes that realise a corpus spec.
pub fn plan_corpus(spec: &CorpusSpec) -> Result<Vec<SceneRecipe>> {
    if spec.n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if spec.profile.len() != ROAD_CLASS_COUNT {
        return Err(Error::Config(format!(
            "profile needs {ROAD_CLASS_COUNT} fractions, got {}",
            spec.profile.len()
        )));
    }
    let target = spec.target()?;
    let f = &target.fractions;
    let background = f[schema::BACKGROUND as usize];
    if background <= 0.0 {
        return Err(Error::Generation(
            "every scene has background above the horizon; a zero background target is unreachable"
                .into(),
        ));
    }
    let surface_weights: Vec<f64> = Surface::ALL.iter().map(|s| f[s.class() as usize]).collect();
    if surface_weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Generation(
            "profile has no road surface to place features on".into(),
        ));
    }
    let road_fraction = 1.0 - background;
    if !(0.05..=0.9).contains(&road_fraction) {
        return Err(Error::Generation(format!(
            "road coverage {road_fraction:.3} is outside the reachable range [0.05, 0.9]"
        )));
    }

    let mut rng = seed::rng(spec.seed, 10);
    let mut surfaces: Vec<Surface> = apportion(spec.n, &surface_weights)
        .into_iter()
        .zip(Surface::ALL)
        .flat_map(|(k, s)| std::iter::repeat_n(s, k))
        .collect();
    surfaces.shuffle(&mut rng);

    let mut recipes: Vec<SceneRecipe> = surfaces
        .iter()
        .enumerate()
        .map(|(i, &surface)| {
            let mut r = SceneRecipe::new(
                spec.width,
                spec.height,
                surface,
                seed::derive(spec.seed, 1000 + i as u64),
            );
            r.noise_level = spec.noise_level;
            r.road_fraction = Some((road_fraction * rng.random_range(0.9..1.1)).min(0.95));
            r
        })
        .collect();

    let total_pixels = (spec.n as f64) * spec.width as f64 * spec.height as f64;
    let side = spec.width.min(spec.height) as f64;
    for feature in Feature::ALL {
        let fraction = f[feature.class() as usize];
        if fraction <= 0.0 {
            continue;
        }
        let budget = fraction * total_pixels;
        let nominal = feature.nominal_area(side, spec.width as f64);
        let count = ((budget / nominal).round() as usize).max(1);
        let scale = budget / (count as f64 * nominal);
        for _ in 0..count {
            let r = &mut recipes[rng.random_range(0..spec.n)];
            *r.feature_counts.entry(feature).or_default() += 1;
            r.feature_scale.insert(feature, scale);
        }
    }
    Ok(recipes)
}

/// Generates a corpus whose realised class fractions follow `spec.profile`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SegmentationSample>> {
    plan_corpus(spec)?.iter().map(generate_scene).collect()
}

/// True when every pair of classes whose targets differ by at least `ratio`
/// keeps the same order in `realised`.
pub fn preserves_ranking(target: &[f64], realised: &[f64], ratio: f64) -> bool {
    for a in 0..target.len() {
        for b in 0..target.len() {
            if target[a] > 0.0 && target[a] >= ratio * target[b] && realised[a] <= realised[b] {
                return false;
            }
        }
    }
    true
}
