use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::captions::CaptionCorpus;
use super::external::{GenerationRequest, GeneratorClient};
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::seed;

/// Where background scenes come from.
#[derive(Clone)]
pub enum BackgroundBackend {
    /// Seeded texture synthesis keyed by caption.
    Procedural { seed: u64 },
    /// Real photographs sampled without replacement from a directory.
    Directory { path: PathBuf, seed: u64 },
    /// A text-to-image service.
    External { client: Arc<dyn GeneratorClient>, seed: u64 },
}

impl std::fmt::Debug for BackgroundBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Procedural { seed } => write!(f, "Procedural({seed})"),
            Self::Directory { path, seed } => write!(f, "Directory({}, {seed})", path.display()),
            Self::External { seed, .. } => write!(f, "External({seed})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub pixels: RgbImage,
    pub caption: Option<String>,
    pub seed: u64,
}

/// Background captions for `category`: every corpus template with the
/// instance removed.
pub fn background_captions(corpus: &CaptionCorpus, category: &str, use_scene_captions: bool) -> Result<Vec<String>> {
    let templates = if use_scene_captions {
        corpus.templates_for(category)
    } else {
        vec![super::captions::plain_prompt(category)]
    };
    templates
        .iter()
        .map(|t| corpus.strip_identifier(t, category))
        .collect()
}

/// Produce `n` backgrounds of `dims` (height, width). Captions are drawn
/// uniformly with replacement from `captions`.
pub fn generate_backgrounds(
    captions: &[String],
    n: usize,
    dims: (usize, usize),
    backend: &BackgroundBackend,
) -> Result<Vec<Background>> {
    let pick_caption = |s: u64| -> Option<String> {
        (!captions.is_empty()).then(|| {
            let mut rng = seed::rng(s);
            captions[rng.random_range(0..captions.len())].clone()
        })
    };
    match backend {
        BackgroundBackend::Procedural { seed: base } => {
            if captions.is_empty() {
                return Err(Error::BackendUnavailable("procedural backend needs captions".into()));
            }
            Ok((0..n)
                .into_par_iter()
                .map(|i| {
                    let s = seed::derive(*base, "background", i as u64);
                    let caption = pick_caption(s).expect("captions nonempty");
                    Background {
                        pixels: crate::toy::procedural_background(dims.0, dims.1, &caption, s),
                        caption: Some(caption),
                        seed: s,
                    }
                })
                .collect())
        }
        BackgroundBackend::Directory { path, seed: base } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::BackendUnavailable(format!("{}: {e}", path.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                })
                .collect();
            files.sort();
            if files.len() < n {
                return Err(Error::InsufficientSourceImages {
                    requested: n,
                    available: files.len(),
                });
            }
            let picks = sample(&mut seed::stream(*base, "background_dir", 0), files.len(), n).into_vec();
            picks
                .into_par_iter()
                .enumerate()
                .map(|(i, k)| {
                    Ok(Background {
                        pixels: RgbImage::load(&files[k])?.resize_bilinear(dims.0, dims.1),
                        caption: None,
                        seed: seed::derive(*base, "background_dir", i as u64),
                    })
                })
                .collect()
        }
        BackgroundBackend::External { client, seed: base } => (0..n)
            .map(|i| {
                let s = seed::derive(*base, "background", i as u64);
                let caption = pick_caption(s).unwrap_or_default();
                let req = GenerationRequest {
                    instance_id: String::new(),
                    caption: caption.clone(),
                    cfg_scale: None,
                    seed: s,
                    n: 1,
                };
                let mut imgs = client.generate(&req)?;
                let img = imgs
                    .pop()
                    .ok_or_else(|| Error::ExternalGeneratorError("empty response".into()))?;
                Ok(Background {
                    pixels: img.resize_bilinear(dims.0, dims.1),
                    caption: Some(caption),
                    seed: s,
                })
            })
            .collect(),
    }
}
