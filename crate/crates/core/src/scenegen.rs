//! Deterministic synthetic scenes with exact object inventories and
//! three-level template captions.
//!
//! Scenes replace an external captioning/detection pipeline: because the
//! object list is generated rather than detected, caption coverage and
//! understanding rewards are exactly checkable. Rasterization is integer-only
//! so the same seed yields bit-identical pixels on every platform.

use crate::image::RgbImage;
use crate::rng::SeededRng;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Stripes,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Stripes => "stripes",
        }
    }

    pub fn synonyms(self) -> &'static [&'static str] {
        match self {
            ShapeKind::Circle => &["disc"],
            ShapeKind::Square => &["box"],
            ShapeKind::Triangle => &["wedge"],
            ShapeKind::Stripes => &["bands"],
        }
    }

    const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Stripes,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Solid,
    Speckled,
    Gradient,
}

impl TextureKind {
    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Solid => "solid",
            TextureKind::Speckled => "speckled",
            TextureKind::Gradient => "gradient",
        }
    }

    const ALL: [TextureKind; 3] = [TextureKind::Solid, TextureKind::Speckled, TextureKind::Gradient];
}

/// Fixed color palette; every name is a single lowercase word.
const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 90, 220]),
    ("yellow", [230, 220, 50]),
    ("cyan", [40, 210, 210]),
    ("magenta", [210, 60, 200]),
    ("orange", [235, 150, 40]),
    ("purple", [130, 60, 190]),
];

const BACKGROUND: [u8; 3] = [30, 30, 30];

/// Bounding box in pixels: x, y of the top-left corner, then width, height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneObject {
    pub name: String,
    pub synonyms: Vec<String>,
    pub kind: ShapeKind,
    pub bbox: BBox,
    pub color: [u8; 3],
    pub color_name: String,
    pub texture: TextureKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSet {
    pub coarse: String,
    pub middle: String,
    pub fine: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub seed: u64,
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
    pub captions: CaptionSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneConfig {
    /// Square image side in pixels; must be divisible by 16.
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SceneError {
    /// Image size not divisible by 16, or object bounds invalid.
    BadConfig(String),
    EmptyObjectList,
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::BadConfig(msg) => write!(f, "invalid scene config: {msg}"),
            SceneError::EmptyObjectList => write!(f, "scene has no objects"),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(SceneError::BadConfig(format!(
                "image_size {} not divisible by 16",
                self.image_size
            )));
        }
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return Err(SceneError::BadConfig(format!(
                "object bounds [{}, {}] invalid",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

/// Generates a scene deterministically from (seed, config).
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene, SceneError> {
    config.validate()?;
    let size = config.image_size;
    let mut rng = SeededRng::new(seed);
    let count = config.min_objects + rng.below(config.max_objects - config.min_objects + 1);

    let mut image = RgbImage::filled(size, size, BACKGROUND);
    let mut objects = Vec::with_capacity(count);
    for index in 0..count {
        let kind = ShapeKind::ALL[rng.below(4)];
        let (color_name, color) = PALETTE[rng.below(PALETTE.len())];
        let texture = TextureKind::ALL[rng.below(3)];
        // Shapes between a quarter and half of the image side keep every
        // object visible after the 4x downscale.
        let lo = size / 4;
        let hi = size / 2;
        let w = lo + rng.below(hi - lo + 1);
        let h = lo + rng.below(hi - lo + 1);
        let x = rng.below(size - w + 1);
        let y = rng.below(size - h + 1);
        let bbox = BBox { x, y, w, h };
        let obj = SceneObject {
            name: kind.name().to_string(),
            synonyms: kind.synonyms().iter().map(|s| s.to_string()).collect(),
            kind,
            bbox,
            color,
            color_name: color_name.to_string(),
            texture,
        };
        rasterize(&mut image, &obj, seed, index as u64);
        objects.push(obj);
    }

    let captions = caption_objects(&objects)?;
    Ok(Scene {
        seed,
        image,
        objects,
        captions,
    })
}

/// Renders the three-level caption set for a scene.
pub fn render_captions(scene: &Scene) -> Result<CaptionSet, SceneError> {
    caption_objects(&scene.objects)
}

fn caption_objects(objects: &[SceneObject]) -> Result<CaptionSet, SceneError> {
    if objects.is_empty() {
        return Err(SceneError::EmptyObjectList);
    }
    let coarse_items: Vec<String> = objects.iter().map(|o| format!("a {}", o.name)).collect();
    let middle_items: Vec<String> = objects
        .iter()
        .map(|o| format!("a {} {}", o.color_name, o.name))
        .collect();
    let fine_items: Vec<String> = objects
        .iter()
        .map(|o| format!("a {} {} {}", o.texture.name(), o.color_name, o.name))
        .collect();
    Ok(CaptionSet {
        coarse: format!("a scene with {}", join_with_and(&coarse_items)),
        middle: format!("a scene with {}", join_with_and(&middle_items)),
        fine: format!("a scene with {}", join_with_and(&fine_items)),
    })
}

fn join_with_and(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => {
            let mut out = items[..n - 1].join(", ");
            out.push_str(" and ");
            out.push_str(&items[n - 1]);
            out
        }
    }
}

/// Integer-only shape rasterization; no anti-aliasing.
fn rasterize(image: &mut RgbImage, obj: &SceneObject, scene_seed: u64, obj_index: u64) {
    let BBox { x: x0, y: y0, w, h } = obj.bbox;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if !inside_shape(obj, x, y) {
                continue;
            }
            let color = textured_color(obj, x, y, scene_seed, obj_index);
            image.set(x, y, color);
        }
    }
}

fn inside_shape(obj: &SceneObject, x: usize, y: usize) -> bool {
    let BBox { x: x0, y: y0, w, h } = obj.bbox;
    match obj.kind {
        ShapeKind::Square => true,
        ShapeKind::Circle => {
            // Doubled coordinates so pixel centers and box centers stay integral.
            let cx2 = (2 * x0 + w) as i64;
            let cy2 = (2 * y0 + h) as i64;
            let px2 = (2 * x + 1) as i64;
            let py2 = (2 * y + 1) as i64;
            let d = w.min(h) as i64;
            let dx = px2 - cx2;
            let dy = py2 - cy2;
            dx * dx + dy * dy <= d * d
        }
        ShapeKind::Triangle => {
            let ax = (x0 + w / 2) as i64;
            let ay = y0 as i64;
            let bx = x0 as i64;
            let by = (y0 + h - 1) as i64;
            let cx = (x0 + w - 1) as i64;
            let cy = (y0 + h - 1) as i64;
            let px = x as i64;
            let py = y as i64;
            let d1 = cross(ax, ay, bx, by, px, py);
            let d2 = cross(bx, by, cx, cy, px, py);
            let d3 = cross(cx, cy, ax, ay, px, py);
            (d1 >= 0 && d2 >= 0 && d3 >= 0) || (d1 <= 0 && d2 <= 0 && d3 <= 0)
        }
        ShapeKind::Stripes => (y - y0) % 4 < 2,
    }
}

fn cross(ax: i64, ay: i64, bx: i64, by: i64, px: i64, py: i64) -> i64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

fn textured_color(obj: &SceneObject, x: usize, y: usize, scene_seed: u64, obj_index: u64) -> [u8; 3] {
    match obj.texture {
        TextureKind::Solid => obj.color,
        TextureKind::Speckled => {
            if pixel_hash(scene_seed, obj_index, x as u64, y as u64) % 5 == 0 {
                [obj.color[0] / 3, obj.color[1] / 3, obj.color[2] / 3]
            } else {
                obj.color
            }
        }
        TextureKind::Gradient => {
            let BBox { x: x0, w, .. } = obj.bbox;
            let span = (w - 1).max(1) as u32;
            let t = 64 + 191 * (x - x0) as u32 / span;
            [
                (obj.color[0] as u32 * t / 255) as u8,
                (obj.color[1] as u32 * t / 255) as u8,
                (obj.color[2] as u32 * t / 255) as u8,
            ]
        }
    }
}

fn pixel_hash(seed: u64, index: u64, x: u64, y: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15) ^ (x << 32 | y);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_generation() {
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.objects, b.objects);
        assert_eq!(a.captions, b.captions);
    }

    #[test]
    fn forced_single_object() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..SceneConfig::default()
        };
        let scene = generate_scene(3, &cfg).unwrap();
        assert_eq!(scene.objects.len(), 1);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SceneConfig {
            image_size: 60,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(0, &cfg), Err(SceneError::BadConfig(_))));
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(0, &cfg), Err(SceneError::BadConfig(_))));
    }

    #[test]
    fn captions_cover_all_levels() {
        let cfg = SceneConfig {
            min_objects: 3,
            max_objects: 3,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let scene = generate_scene(seed, &cfg).unwrap();
            for obj in &scene.objects {
                assert!(scene.captions.coarse.contains(&obj.name));
                assert!(scene.captions.middle.contains(&obj.color_name));
                assert!(scene.captions.fine.contains(obj.texture.name()));
            }
            let words = |s: &str| s.split_whitespace().count();
            assert!(words(&scene.captions.fine) >= words(&scene.captions.middle));
            assert!(words(&scene.captions.middle) >= words(&scene.captions.coarse));
        }
    }

    #[test]
    fn bboxes_inside_bounds() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let scene = generate_scene(seed, &cfg).unwrap();
            for obj in &scene.objects {
                assert!(obj.bbox.x + obj.bbox.w <= cfg.image_size);
                assert!(obj.bbox.y + obj.bbox.h <= cfg.image_size);
            }
        }
    }

    #[test]
    fn names_are_single_lowercase_words() {
        let cfg = SceneConfig {
            min_objects: 2,
            max_objects: 4,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let scene = generate_scene(seed, &cfg).unwrap();
            for obj in &scene.objects {
                for word in core::iter::once(&obj.name).chain(obj.synonyms.iter()) {
                    assert!(word.chars().all(|c| c.is_ascii_lowercase()));
                    assert!(!word.is_empty());
                }
            }
        }
    }
}
