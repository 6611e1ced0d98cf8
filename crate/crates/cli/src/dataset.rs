//! Dataset generation and loading.
//!
//! Layout under the output directory: `config.txt` (the resolved run
//! configuration), then `hq/NNNNNN.png`, `lr/NNNNNN.png`, and
//! `meta/NNNNNN.json` per sample. The metadata stores the scene seed, the
//! scene configuration, and the degradation recipe, so loading regenerates
//! the exact supervision bundles instead of re-deriving them from pixels.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stepsr_core::codec::Codebook;
use stepsr_core::degrade::{apply, sample_recipe, summarize, DegradationRecipe};
use stepsr_core::image::RgbImage;
use stepsr_core::rng::derive_seed;
use stepsr_core::scenegen::{generate_scene, SceneConfig};
use stepsr_core::trace::{build_gt_trace, GtBundle, StepMode, TraceLayout};
use thiserror::Error;

/// Everything a run needs beyond its seeds: scene geometry, policy
/// architecture, trace depth, and the patch size of the image vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub max_len: usize,
    pub steps: StepMode,
    pub patch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            d_model: 128,
            n_heads: 4,
            n_blocks: 2,
            max_len: 1024,
            steps: StepMode::Three,
            patch_size: 4,
        }
    }
}

impl RunConfig {
    pub fn layout(&self) -> TraceLayout {
        TraceLayout {
            hq_size: self.scene.image_size,
            patch_size: self.patch_size,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{path}: {msg}")]
    Meta { path: String, msg: String },
    #[error("{0}")]
    Generate(String),
}

fn io_err(path: &Path, source: io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Config file: flat key = value lines, a TOML-compatible subset
// ---------------------------------------------------------------------------

/// Parses a flat `key = value` config. Blank lines and `#` comments are
/// skipped; string values may be quoted; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig, DatasetError> {
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| DatasetError::Config {
            line: idx + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected key = value".into()))?;
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| err(format!("{key} needs an integer, got {v:?}")))
        };
        match key {
            "image_size" => cfg.scene.image_size = parse_usize(value)?,
            "min_objects" => cfg.scene.min_objects = parse_usize(value)?,
            "max_objects" => cfg.scene.max_objects = parse_usize(value)?,
            "d_model" => cfg.d_model = parse_usize(value)?,
            "n_heads" => cfg.n_heads = parse_usize(value)?,
            "n_blocks" => cfg.n_blocks = parse_usize(value)?,
            "max_len" => cfg.max_len = parse_usize(value)?,
            "patch_size" => cfg.patch_size = parse_usize(value)?,
            "steps" => {
                cfg.steps = match value {
                    "two" => StepMode::Two,
                    "three" => StepMode::Three,
                    other => return Err(err(format!("steps must be two or three, got {other:?}"))),
                }
            }
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    cfg.scene
        .validate()
        .map_err(|e| DatasetError::Generate(e.to_string()))?;
    Ok(cfg)
}

/// Renders the fully resolved config; `parse_config` inverts this.
pub fn render_config(cfg: &RunConfig) -> String {
    let steps = match cfg.steps {
        StepMode::Two => "two",
        StepMode::Three => "three",
    };
    format!(
        "image_size = {}\nmin_objects = {}\nmax_objects = {}\n\
         d_model = {}\nn_heads = {}\nn_blocks = {}\nmax_len = {}\n\
         patch_size = {}\nsteps = \"{}\"\n",
        cfg.scene.image_size,
        cfg.scene.min_objects,
        cfg.scene.max_objects,
        cfg.d_model,
        cfg.n_heads,
        cfg.n_blocks,
        cfg.max_len,
        cfg.patch_size,
        steps
    )
}

pub fn read_config_file(path: &Path) -> Result<RunConfig, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_config(&text)
}

// ---------------------------------------------------------------------------
// Sample metadata
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecipeMeta {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub jpeg_quality: f64,
    pub resize_jitter: f64,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleMeta {
    pub id: usize,
    pub scene_seed: u64,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub recipe: RecipeMeta,
    /// Discretized level label per degradation component, in chain order.
    pub levels: Vec<(String, String)>,
    pub summary: String,
    /// Informational: object names and the coarse caption.
    pub objects: Vec<String>,
    pub caption: String,
}

impl SampleMeta {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            image_size: self.image_size,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
        }
    }

    pub fn degradation_recipe(&self) -> DegradationRecipe {
        DegradationRecipe {
            blur_sigma: self.recipe.blur_sigma,
            noise_sigma: self.recipe.noise_sigma,
            jpeg_quality: self.recipe.jpeg_quality,
            resize_jitter: self.recipe.resize_jitter,
            rng_seed: self.recipe.rng_seed,
        }
    }
}

fn save_png(path: &Path, img: &RgbImage) -> Result<(), DatasetError> {
    image::save_buffer(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| DatasetError::Meta {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Loads an RGB PNG into the core image type.
pub fn load_png(path: &Path) -> Result<RgbImage, DatasetError> {
    let img = image::open(path)
        .map_err(|e| DatasetError::Meta {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(RgbImage {
        width: w,
        height: h,
        data: img.into_raw(),
    })
}

// ---------------------------------------------------------------------------
// Writing and reading
// ---------------------------------------------------------------------------

/// Generates `count` scene/degradation pairs and writes the dataset layout.
pub fn write_dataset(
    out: &Path,
    cfg: &RunConfig,
    count: usize,
    seed: u64,
) -> Result<(), DatasetError> {
    for sub in ["hq", "lr", "meta"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| io_err(&out.join(sub), e))?;
    }
    fs::write(out.join("config.txt"), render_config(cfg))
        .map_err(|e| io_err(&out.join("config.txt"), e))?;

    for id in 0..count {
        let scene_seed = derive_seed(seed, 2 * id as u64);
        let recipe = sample_recipe(derive_seed(seed, 2 * id as u64 + 1));
        let scene = generate_scene(scene_seed, &cfg.scene)
            .map_err(|e| DatasetError::Generate(e.to_string()))?;
        let lr = apply(&scene.image, &recipe).map_err(|e| DatasetError::Generate(e.to_string()))?;
        let summary = summarize(&recipe).map_err(|e| DatasetError::Generate(e.to_string()))?;

        let meta = SampleMeta {
            id,
            scene_seed,
            image_size: cfg.scene.image_size,
            min_objects: cfg.scene.min_objects,
            max_objects: cfg.scene.max_objects,
            recipe: RecipeMeta {
                blur_sigma: recipe.blur_sigma,
                noise_sigma: recipe.noise_sigma,
                jpeg_quality: recipe.jpeg_quality,
                resize_jitter: recipe.resize_jitter,
                rng_seed: recipe.rng_seed,
            },
            levels: summary
                .levels
                .iter()
                .map(|(k, l)| (k.name().to_string(), l.to_string()))
                .collect(),
            summary: summary.text,
            objects: scene.objects.iter().map(|o| o.name.clone()).collect(),
            caption: scene.captions.coarse.clone(),
        };

        let stem = format!("{id:06}");
        save_png(&out.join("hq").join(format!("{stem}.png")), &scene.image)?;
        save_png(&out.join("lr").join(format!("{stem}.png")), &lr)?;
        let meta_path = out.join("meta").join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&meta).map_err(|e| DatasetError::Meta {
            path: meta_path.display().to_string(),
            msg: e.to_string(),
        })?;
        fs::write(&meta_path, json).map_err(|e| io_err(&meta_path, e))?;
    }
    Ok(())
}

/// Reads the config and all sample metadata, sorted by id.
pub fn read_dataset(dir: &Path) -> Result<(RunConfig, Vec<SampleMeta>), DatasetError> {
    let cfg = read_config_file(&dir.join("config.txt"))?;
    let meta_dir = dir.join("meta");
    let mut paths: Vec<PathBuf> = fs::read_dir(&meta_dir)
        .map_err(|e| io_err(&meta_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();

    let mut metas = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| DatasetError::Meta {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        metas.push(meta);
    }
    metas.sort_by_key(|m| m.id);
    Ok((cfg, metas))
}

/// Regenerates the supervision bundle for one sample.
pub fn bundle_from_meta(
    meta: &SampleMeta,
    codebook: &Codebook,
    mode: StepMode,
) -> Result<GtBundle, DatasetError> {
    let scene = generate_scene(meta.scene_seed, &meta.scene_config())
        .map_err(|e| DatasetError::Generate(e.to_string()))?;
    build_gt_trace(&scene, &meta.degradation_recipe(), codebook, mode)
        .map_err(|e| DatasetError::Generate(format!("sample {}: {e}", meta.id)))
}

/// Loads the whole dataset as supervision bundles, in id order.
pub fn load_bundles(
    dir: &Path,
    codebook: &Codebook,
) -> Result<(RunConfig, Vec<GtBundle>), DatasetError> {
    let (cfg, metas) = read_dataset(dir)?;
    let bundles = metas
        .iter()
        .map(|m| bundle_from_meta(m, codebook, cfg.steps))
        .collect::<Result<_, _>>()?;
    Ok((cfg, bundles))
}
