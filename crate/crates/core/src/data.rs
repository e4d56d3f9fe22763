//! Synthetic two-modality dark scenes and their on-disk layout.
//!
//! The visible image carries class identity through per-class colours; a
//! random rectangle of darkness scales it down to at most `darkness_floor`
//! and buries what is left under sensor noise. The auxiliary image is a
//! pseudo-depth map: every shape gets a depth drawn independently of its
//! class, so boundaries survive darkness but class identity does not.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_atomic, write_tensor};
use crate::sampling::LabelMap;
use crate::tensor::Tensor;

/// Fraction of a shape that must stay unoccluded when later shapes land on it.
const MIN_VISIBLE: f64 = 0.5;
const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub darkness_fraction: f64,
    pub darkness_floor: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 64,
            width: 64,
            num_classes: 6,
            min_shapes: 3,
            max_shapes: 6,
            darkness_fraction: 0.5,
            darkness_floor: 0.05,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Argument(format!(
                "num_classes must be in [2, 255], got {}",
                self.num_classes
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Argument(format!(
                "scenes must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Argument("min_shapes exceeds max_shapes".into()));
        }
        if !(0.0..=1.0).contains(&self.darkness_fraction) {
            return Err(Error::Argument(format!(
                "darkness_fraction must be in [0, 1], got {}",
                self.darkness_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.darkness_floor) {
            return Err(Error::Argument("darkness_floor must be in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Argument("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    /// Half-open pixel box `[y0, y0 + h) × [x0, x0 + w)`.
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    /// Pixels whose centre lies within `r` of `(cy, cx)`.
    Circle { cy: f64, cx: f64, r: f64 },
}

impl ShapeKind {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            ShapeKind::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            ShapeKind::Circle { cy, cx, r } => {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

/// One placed shape; later shapes are drawn on top of earlier ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
    pub depth: f64,
}

/// Everything that determined a scene's pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub shapes: Vec<Shape>,
    /// Dark box `[y0, y1) × [x0, x1)`, empty when no darkness was applied.
    pub dark: (usize, usize, usize, usize),
}

impl Layout {
    /// Label implied by the layout: topmost covering shape, else background.
    pub fn label_at(&self, y: usize, x: usize) -> u8 {
        self.shapes
            .iter()
            .rev()
            .find(|s| s.kind.contains(y, x))
            .map_or(0, |s| s.class)
    }

    pub fn is_dark(&self, y: usize, x: usize) -> bool {
        let (y0, y1, x0, x1) = self.dark;
        y >= y0 && y < y1 && x >= x0 && x < x1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub visible: Tensor<f32>,
    /// `[H, W, 1]` in `[0, 1]`.
    pub auxiliary: Tensor<f32>,
    pub label: LabelMap,
}

/// Base colour of each class; class 0 is a neutral background.
pub fn palette(num_classes: usize) -> Vec<[f64; 3]> {
    let fg = num_classes - 1;
    let mut colours = vec![[0.45, 0.45, 0.45]];
    for k in 0..fg {
        let hue = k as f64 / fg as f64;
        colours.push(hsv(hue, 0.85, 0.95));
    }
    colours
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match sector as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn scene_rng(cfg: &GenConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    rng
}

fn random_shape(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> ShapeKind {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w);
    let (lo, hi) = ((side / 8).max(2), (side / 3).max(3));
    if rng.random_bool(0.5) {
        let sh = rng.random_range(lo..=hi);
        let sw = rng.random_range(lo..=hi);
        ShapeKind::Rect {
            y0: rng.random_range(0..=h - sh),
            x0: rng.random_range(0..=w - sw),
            h: sh,
            w: sw,
        }
    } else {
        let r = rng.random_range(lo..=hi) as f64 / 2.0;
        ShapeKind::Circle {
            cy: rng.random_range(r..=h as f64 - r),
            cx: rng.random_range(r..=w as f64 - r),
            r,
        }
    }
}

fn place_shapes(cfg: &GenConfig, rng: &mut ChaCha8Rng, index: u64) -> Result<Vec<Shape>> {
    let (h, w) = (cfg.height, cfg.width);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    // owner[p] = index of the topmost shape at pixel p
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut area = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let kind = random_shape(cfg, rng);
            let mut own = 0usize;
            let mut lost = vec![0usize; shapes.len()];
            for y in 0..h {
                for x in 0..w {
                    if kind.contains(y, x) {
                        own += 1;
                        if let Some(o) = owner[y * w + x] {
                            lost[o] += 1;
                        }
                    }
                }
            }
            let keeps_others = shapes.iter().enumerate().all(|(i, _)| {
                let visible: usize = owner.iter().filter(|o| **o == Some(i)).count() - lost[i];
                visible as f64 >= MIN_VISIBLE * area[i] as f64
            });
            if own == 0 || !keeps_others {
                continue;
            }
            let class = rng.random_range(1..cfg.num_classes) as u8;
            let depth = rng.random_range(0.35..1.0);
            let id = shapes.len();
            for y in 0..h {
                for x in 0..w {
                    if kind.contains(y, x) {
                        owner[y * w + x] = Some(id);
                    }
                }
            }
            shapes.push(Shape { kind, class, depth });
            area.push(own);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "scene {index}: no valid placement for shape {} after {PLACEMENT_RETRIES} attempts",
                shapes.len() + 1
            )));
        }
    }
    Ok(shapes)
}

fn dark_box(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let (h, w) = (cfg.height, cfg.width);
    let target = cfg.darkness_fraction * (h * w) as f64;
    if target < 0.5 {
        return (0, 0, 0, 0);
    }
    let aspect: f64 = rng.random_range(0.5..2.0);
    let bw = ((target * aspect).sqrt().round() as usize).clamp(1, w);
    let bh = ((target / bw as f64).round() as usize).clamp(1, h);
    let y0 = rng.random_range(0..=h - bh);
    let x0 = rng.random_range(0..=w - bw);
    (y0, y0 + bh, x0, x0 + bw)
}

/// Generates scene `index` together with the layout that produced it.
pub fn generate_scene_with_layout(cfg: &GenConfig, index: u64) -> Result<(SceneSample, Layout)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = scene_rng(cfg, index);
    let shapes = place_shapes(cfg, &mut rng, index)?;
    let layout = Layout {
        shapes,
        dark: dark_box(cfg, &mut rng),
    };
    let colours = palette(cfg.num_classes);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Argument(e.to_string()))?;
    let floor = cfg.darkness_floor;
    // largest f32 not above the floor, so stored values honour it exactly
    let floor32 = {
        let f = floor as f32;
        if f64::from(f) > floor { f.next_down() } else { f }
    };

    let mut vis = Vec::with_capacity(h * w * 3);
    let mut aux = Vec::with_capacity(h * w);
    let mut lbl = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let top = layout.shapes.iter().rev().find(|s| s.kind.contains(y, x));
            let class = top.map_or(0, |s| s.class);
            let dark = layout.is_dark(y, x);
            for &base in &colours[class as usize] {
                let lit_value = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                vis.push(if dark {
                    ((floor * lit_value + noise.sample(&mut rng)).clamp(0.0, floor) as f32).min(floor32)
                } else {
                    lit_value as f32
                });
            }
            let depth = top.map_or(0.05 + 0.2 * (y as f64 + 0.5) / h as f64, |s| s.depth);
            aux.push((depth + 0.5 * noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
            lbl.push(class);
        }
    }
    let sample = SceneSample {
        visible: Tensor::new(&[h, w, 3], vis)?,
        auxiliary: Tensor::new(&[h, w, 1], aux)?,
        label: LabelMap::new(h, w, lbl)?,
    };
    Ok((sample, layout))
}

pub fn generate_scene(cfg: &GenConfig, index: u64) -> Result<SceneSample> {
    generate_scene_with_layout(cfg, index).map(|(s, _)| s)
}

/// Scenes `first .. first + count`.
pub fn generate_set(cfg: &GenConfig, first: u64, count: usize) -> Result<Vec<SceneSample>> {
    (first..first + count as u64).map(|i| generate_scene(cfg, i)).collect()
}

const MANIFEST: &str = "manifest.txt";

fn sample_paths(dir: &Path, id: &str) -> [std::path::PathBuf; 3] {
    [
        dir.join(format!("{id}.vis.smt")),
        dir.join(format!("{id}.aux.smt")),
        dir.join(format!("{id}.lbl.smt")),
    ]
}

/// Writes `<id>.{vis,aux,lbl}.smt` per sample and a manifest of ids, last.
pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:06}");
        let [vis, aux, lbl] = sample_paths(dir, &id);
        write_tensor(&vis, &s.visible)?;
        write_tensor(&aux, &s.auxiliary)?;
        write_tensor(&lbl, &s.label.to_tensor::<f32>())?;
        manifest.push_str(&id);
        manifest.push('\n');
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    for id in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if id.contains('/') || id.contains("..") {
            return Err(Error::format(&path, format!("manifest id escapes dataset: `{id}`")));
        }
        let [vis, aux, lbl] = sample_paths(dir, id);
        let visible = read_tensor::<f32>(&vis)?;
        let auxiliary = read_tensor::<f32>(&aux)?;
        let label = LabelMap::from_tensor(&read_tensor::<f32>(&lbl)?)?;
        let (h, w) = (label.height(), label.width());
        if visible.dims() != [h, w, 3] || auxiliary.dims() != [h, w, 1] {
            return Err(Error::format(&vis, format!("sample `{id}` has inconsistent dims")));
        }
        samples.push(SceneSample {
            visible,
            auxiliary,
            label,
        });
    }
    Ok(samples)
}

impl SceneSample {
    /// Mirror image along the width axis.
    pub fn flipped(&self) -> SceneSample {
        SceneSample {
            visible: flip_width(&self.visible),
            auxiliary: flip_width(&self.auxiliary),
            label: self.label.flipped(),
        }
    }
}

fn flip_width(t: &Tensor<f32>) -> Tensor<f32> {
    let (w, c) = (t.dims()[1], t.dims()[2]);
    let mut out = Vec::with_capacity(t.len());
    for row in t.data().chunks_exact(w * c) {
        for px in row.chunks_exact(c).rev() {
            out.extend_from_slice(px);
        }
    }
    Tensor::new(t.dims(), out).expect("same dims")
}

/// Stacks samples into `[B, H, W, 3]` and `[B, H, W, 1]` inputs plus their labels.
pub fn stack_batch(samples: &[&SceneSample]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<LabelMap>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
    let (h, w) = (first.label.height(), first.label.width());
    let mut vis = Vec::with_capacity(samples.len() * h * w * 3);
    let mut aux = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.label.height() != h || s.label.width() != w {
            return Err(Error::shape("batch mixes scene sizes"));
        }
        vis.extend_from_slice(s.visible.data());
        aux.extend_from_slice(s.auxiliary.data());
        labels.push(s.label.clone());
    }
    let b = samples.len();
    Ok((
        Tensor::new(&[b, h, w, 3], vis)?,
        Tensor::new(&[b, h, w, 1], aux)?,
        labels,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_layout() {
        let cfg = GenConfig::default();
        for i in 0..5 {
            let (s, layout) = generate_scene_with_layout(&cfg, i).unwrap();
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    assert_eq!(s.label.get(y, x), layout.label_at(y, x));
                }
            }
            assert!((cfg.min_shapes..=cfg.max_shapes).contains(&layout.shapes.len()));
        }
    }

    #[test]
    fn dark_pixels_stay_under_floor() {
        let cfg = GenConfig::default();
        let (s, layout) = generate_scene_with_layout(&cfg, 3).unwrap();
        let (y0, y1, x0, x1) = layout.dark;
        let area = (y1 - y0) * (x1 - x0);
        assert!((area as f64 - 0.5 * 4096.0).abs() < 100.0, "dark area {area}");
        for y in y0..y1 {
            for x in x0..x1 {
                let px = &s.visible.data()[(y * cfg.width + x) * 3..][..3];
                assert!(px.iter().all(|v| f64::from(*v) <= cfg.darkness_floor));
            }
        }
    }

    #[test]
    fn darkness_extremes() {
        let none = GenConfig {
            darkness_fraction: 0.0,
            ..Default::default()
        };
        let (_, layout) = generate_scene_with_layout(&none, 0).unwrap();
        assert!(!layout.is_dark(0, 0) && layout.dark == (0, 0, 0, 0));
        let all = GenConfig {
            darkness_fraction: 1.0,
            ..Default::default()
        };
        let (s, _) = generate_scene_with_layout(&all, 0).unwrap();
        assert!(s.visible.data().iter().all(|v| f64::from(*v) <= all.darkness_floor));
    }

    #[test]
    fn deterministic_and_index_dependent() {
        let cfg = GenConfig::default();
        assert_eq!(generate_scene(&cfg, 9).unwrap(), generate_scene(&cfg, 9).unwrap());
        assert_ne!(generate_scene(&cfg, 9).unwrap(), generate_scene(&cfg, 10).unwrap());
    }

    #[test]
    fn rejects_single_class() {
        let cfg = GenConfig {
            num_classes: 1,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn crowded_scene_fails_cleanly() {
        let cfg = GenConfig {
            height: 8,
            width: 8,
            min_shapes: 40,
            max_shapes: 40,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate_scene(&GenConfig::default(), 1).unwrap();
        let f = s.flipped();
        assert_ne!(f, s);
        assert_eq!(f.flipped(), s);
        assert_eq!(f.label.get(5, 0), s.label.get(5, 63));
    }
}
