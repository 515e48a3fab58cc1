//! Synthetic training data: Cut-and-Paste compositing, caption handling,
//! the personalized-generator objective, external generator seam, and
//! perceptual filtering.

mod backgrounds;
mod captions;
mod cutpaste;
mod diffusion;
mod external;
mod filter;

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backgrounds::{background_captions, generate_backgrounds, Background, BackgroundBackend};
pub use captions::{category_prompt, plain_prompt, strip_identifier, CaptionCorpus, CaptionEntry, IDENTIFIER};
pub use cutpaste::{cut_and_paste, paste_at, Placement, DEFAULT_SCALE_RANGE};
pub use diffusion::{dreambooth_loss, dreambooth_loss_grad, Denoiser, LinearDenoiser, NoiseSchedule, NoisedSample};
pub use external::{
    GenerationRequest, GenerationResponse, GeneratorClient, HttpGeneratorClient, ENDPOINT_ENV, RETRIES_ENV, TIMEOUT_ENV,
};
pub use filter::{filter_pool, MaskerFailurePolicy, DEFAULT_FILTER_THRESHOLD};

use crate::data::{
    GeneratorKind, ImageRecord, InstanceDataset, Provenance, Split, SyntheticImage, SyntheticPool, NEGATIVE_INSTANCE,
};
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::seed;
use crate::toy::CategoryPrior;

/// Guidance scales swept for generated pools.
pub const CFG_SWEEP: [f64; 3] = [4.0, 5.0, 7.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub cfg_scale: f64,
    pub use_llm_captions: bool,
    pub n_positives: usize,
    pub n_negatives: usize,
    pub seed: u64,
    /// Distinct background scenes available to Cut-and-Paste.
    pub n_backgrounds: usize,
    pub scale_range: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::CutPaste,
            cfg_scale: 5.0,
            use_llm_captions: true,
            n_positives: 450,
            n_negatives: 1000,
            seed: 0,
            n_backgrounds: 600,
            scale_range: DEFAULT_SCALE_RANGE,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_scale > 0.0) {
            return Err(Error::InvalidConfig(format!("cfg_scale must be positive, got {}", self.cfg_scale)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!("bad scale range ({lo}, {hi})")));
        }
        if self.n_backgrounds == 0 && self.kind == GeneratorKind::CutPaste && self.n_positives > 0 {
            return Err(Error::InvalidConfig("cut_paste needs at least one background".into()));
        }
        Ok(())
    }
}

/// Where generic category samples (negatives) come from.
#[derive(Clone)]
pub enum NegativeSource {
    /// Procedural category renderer.
    Prior,
    /// Real category photographs, sampled without replacement.
    Directory(PathBuf),
    /// The generator client, prompted with the bare category.
    External,
}

/// Backends a pool is synthesized from.
#[derive(Clone)]
pub struct PoolSources {
    pub backgrounds: Option<BackgroundBackend>,
    pub negatives: NegativeSource,
    pub client: Option<Arc<dyn GeneratorClient>>,
}

impl Default for PoolSources {
    /// Procedural backgrounds and category prior; an HTTP generator when
    /// `PERSREP_GEN_ENDPOINT` is set.
    fn default() -> Self {
        Self {
            backgrounds: None,
            negatives: NegativeSource::Prior,
            client: HttpGeneratorClient::from_env().map(|c| Arc::new(c) as Arc<dyn GeneratorClient>),
        }
    }
}

impl PoolSources {
    fn client(&self) -> Result<&Arc<dyn GeneratorClient>> {
        self.client
            .as_ref()
            .ok_or_else(|| Error::ExternalGeneratorError(format!("no generator client registered (set {ENDPOINT_ENV})")))
    }
}

fn pick<'a, T>(items: &'a [T], s: u64, tag: &str) -> &'a T {
    let mut rng = seed::stream(s, tag, 0);
    &items[rng.random_range(0..items.len())]
}

/// Build the synthetic pool for one instance.
pub fn synthesize_pool(
    dataset: &InstanceDataset,
    instance_id: &str,
    config: &GeneratorConfig,
    corpus: &CaptionCorpus,
    sources: &PoolSources,
) -> Result<SyntheticPool> {
    config.validate()?;
    let inst = dataset.get(instance_id)?;
    let dims = inst
        .train
        .first()
        .map(|r| r.pixels.dims())
        .ok_or_else(|| Error::MissingTrainImages {
            instance: instance_id.to_string(),
            found: 0,
            expected: crate::data::TRAIN_IMAGES_PER_INSTANCE,
        })?;
    let category = inst.category.as_str();
    let templates = if config.use_llm_captions {
        corpus.templates_for(category)
    } else {
        vec![plain_prompt(category)]
    };
    let bg_captions = background_captions(corpus, category, config.use_llm_captions)?;

    let mut pool = SyntheticPool::new(instance_id, category);
    pool.positives = match config.kind {
        GeneratorKind::CutPaste => cut_paste_positives(inst.train.as_slice(), instance_id, config, &bg_captions, dims, sources)?,
        GeneratorKind::RealOnly => inst
            .train
            .iter()
            .enumerate()
            .map(|(i, r)| SyntheticImage {
                record: r.clone(),
                provenance: Provenance::new(GeneratorKind::RealOnly, i as u64),
            })
            .collect(),
        GeneratorKind::DreamboothLike | GeneratorKind::External => {
            external_images(sources.client()?.as_ref(), instance_id, config, &templates, "positive", dims)?
        }
    };
    pool.negatives = negatives(instance_id, category, config, &bg_captions, dims, sources)?;
    Ok(pool)
}

fn cut_paste_positives(
    train: &[ImageRecord],
    instance_id: &str,
    config: &GeneratorConfig,
    bg_captions: &[String],
    dims: (usize, usize),
    sources: &PoolSources,
) -> Result<Vec<SyntheticImage>> {
    let fgs: Vec<&ImageRecord> = train.iter().filter(|r| r.mask.as_ref().is_some_and(|m| !m.is_empty())).collect();
    if fgs.len() != train.len() || fgs.is_empty() {
        return Err(Error::MissingMasks(instance_id.to_string()));
    }
    // Procedural scenes are rendered on demand by index; other backends are
    // fetched up front.
    let fetched = match &sources.backgrounds {
        None | Some(BackgroundBackend::Procedural { .. }) => None,
        Some(b) => Some(generate_backgrounds(bg_captions, config.n_backgrounds, dims, b)?),
    };
    let bg_seed = match &sources.backgrounds {
        Some(BackgroundBackend::Procedural { seed }) => *seed,
        _ => seed::derive(config.seed, "background_pool", 0),
    };
    let n_bg = fetched.as_ref().map_or(config.n_backgrounds, Vec::len);
    (0..config.n_positives)
        .into_par_iter()
        .map(|i| {
            let s = seed::derive(config.seed, "cut_paste_positive", i as u64);
            let fg = *pick(&fgs, s, "foreground");
            let k = *pick(&(0..n_bg).collect::<Vec<_>>(), s, "background_index");
            let bg = match &fetched {
                Some(list) => list[k].clone(),
                None => {
                    let bs = seed::derive(bg_seed, "background", k as u64);
                    let caption = pick(bg_captions, bs, "caption").clone();
                    Background {
                        pixels: crate::toy::procedural_background(dims.0, dims.1, &caption, bs),
                        caption: Some(caption),
                        seed: bs,
                    }
                }
            };
            let (pixels, mask, placement) = cut_and_paste(fg, &bg.pixels, config.scale_range, s)?;
            let record = ImageRecord::new(format!("{instance_id}/pos{i:04}"), instance_id, Split::Train, pixels).with_mask(mask)?;
            let mut provenance = Provenance::new(GeneratorKind::CutPaste, s);
            provenance.caption = bg.caption;
            provenance.scale = Some(placement.scale);
            Ok(SyntheticImage { record, provenance })
        })
        .collect()
}

fn external_images(
    client: &dyn GeneratorClient,
    instance_id: &str,
    config: &GeneratorConfig,
    captions: &[String],
    tag: &str,
    dims: (usize, usize),
) -> Result<Vec<SyntheticImage>> {
    let n = if tag == "positive" {
        config.n_positives
    } else {
        config.n_negatives
    };
    (0..n)
        .map(|i| {
            let s = seed::derive(config.seed, tag, i as u64);
            let caption = pick(captions, s, "caption").clone();
            let req = GenerationRequest {
                instance_id: instance_id.to_string(),
                caption: caption.clone(),
                cfg_scale: Some(config.cfg_scale),
                seed: s,
                n: 1,
            };
            let mut imgs = client.generate(&req)?;
            if imgs.len() != 1 {
                return Err(Error::ExternalGeneratorError(format!("asked for 1 image, got {}", imgs.len())));
            }
            let pixels = imgs.remove(0).resize_bilinear(dims.0, dims.1);
            let (id, owner) = if tag == "positive" {
                (format!("{instance_id}/pos{i:04}"), instance_id)
            } else {
                (format!("{instance_id}/neg{i:04}"), NEGATIVE_INSTANCE)
            };
            let mut provenance = Provenance::new(config.kind, s);
            provenance.cfg = Some(config.cfg_scale);
            provenance.caption = Some(caption);
            Ok(SyntheticImage {
                record: ImageRecord::new(id, owner, Split::Train, pixels),
                provenance,
            })
        })
        .collect()
}

fn negatives(
    instance_id: &str,
    category: &str,
    config: &GeneratorConfig,
    bg_captions: &[String],
    dims: (usize, usize),
    sources: &PoolSources,
) -> Result<Vec<SyntheticImage>> {
    let prompt = category_prompt(category);
    match &sources.negatives {
        NegativeSource::Prior => {
            let prior = CategoryPrior { size: dims.0 };
            Ok((0..config.n_negatives)
                .into_par_iter()
                .map(|i| {
                    let s = seed::derive(config.seed, "negative", i as u64);
                    let scene = pick(bg_captions, s, "caption");
                    let (pixels, _) = prior.sample(scene, s);
                    let pixels = if pixels.dims() == dims {
                        pixels
                    } else {
                        pixels.resize_bilinear(dims.0, dims.1)
                    };
                    let mut provenance = Provenance::new(config.kind, s);
                    provenance.caption = Some(prompt.clone());
                    SyntheticImage {
                        record: ImageRecord::new(format!("{instance_id}/neg{i:04}"), NEGATIVE_INSTANCE, Split::Train, pixels),
                        provenance,
                    }
                })
                .collect())
        }
        NegativeSource::Directory(path) => {
            let backend = BackgroundBackend::Directory {
                path: path.clone(),
                seed: seed::derive(config.seed, "negative_dir", 0),
            };
            Ok(generate_backgrounds(&[], config.n_negatives, dims, &backend)?
                .into_iter()
                .enumerate()
                .map(|(i, b)| {
                    let mut provenance = Provenance::new(GeneratorKind::External, b.seed);
                    provenance.caption = Some(prompt.clone());
                    SyntheticImage {
                        record: ImageRecord::new(format!("{instance_id}/neg{i:04}"), NEGATIVE_INSTANCE, Split::Train, b.pixels),
                        provenance,
                    }
                })
                .collect())
        }
        NegativeSource::External => {
            external_images(sources.client()?.as_ref(), instance_id, config, &[prompt], "negative", dims)
        }
    }
}

/// Positives as plain images, for callers that need pixels only.
pub fn positive_pixels(pool: &SyntheticPool) -> Vec<&RgbImage> {
    pool.positives.iter().map(|s| &s.record.pixels).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_dataset, ToyDatasetConfig};

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            n_positives: 12,
            n_negatives: 20,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn pool_sizes_and_provenance() {
        let ds = toy_dataset(&ToyDatasetConfig::default());
        let pool = synthesize_pool(&ds, "toy00", &small_config(), &CaptionCorpus::bundled(), &PoolSources::default()).unwrap();
        assert_eq!((pool.positives.len(), pool.negatives.len()), (12, 20));
        assert!(pool.positives.iter().all(|s| s.record.instance_id == "toy00" && s.record.mask.is_some()));
        assert!(pool.negatives.iter().all(|s| s.record.instance_id == NEGATIVE_INSTANCE));
        assert!(pool.positives.iter().all(|s| s.provenance.scale.is_some()));
    }

    #[test]
    fn empty_positive_pool_is_valid() {
        let ds = toy_dataset(&ToyDatasetConfig::default());
        let cfg = GeneratorConfig {
            n_positives: 0,
            ..small_config()
        };
        let pool = synthesize_pool(&ds, "toy01", &cfg, &CaptionCorpus::bundled(), &PoolSources::default()).unwrap();
        assert!(pool.positives.is_empty());
        assert_eq!(pool.negatives.len(), 20);
    }

    #[test]
    fn deterministic() {
        let ds = toy_dataset(&ToyDatasetConfig::default());
        let a = synthesize_pool(&ds, "toy02", &small_config(), &CaptionCorpus::bundled(), &PoolSources::default()).unwrap();
        let b = synthesize_pool(&ds, "toy02", &small_config(), &CaptionCorpus::bundled(), &PoolSources::default()).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn errors() {
        let mut ds = toy_dataset(&ToyDatasetConfig {
            n_instances: 1,
            ..ToyDatasetConfig::default()
        });
        let corpus = CaptionCorpus::bundled();
        let sources = PoolSources {
            client: None,
            ..PoolSources::default()
        };
        assert!(matches!(
            synthesize_pool(&ds, "nope", &small_config(), &corpus, &sources),
            Err(Error::UnknownInstance(_))
        ));
        let ext = GeneratorConfig {
            kind: GeneratorKind::External,
            ..small_config()
        };
        assert!(matches!(
            synthesize_pool(&ds, "toy00", &ext, &corpus, &sources),
            Err(Error::ExternalGeneratorError(_))
        ));
        ds.instances.get_mut("toy00").unwrap().train[1].mask = None;
        assert!(matches!(
            synthesize_pool(&ds, "toy00", &small_config(), &corpus, &sources),
            Err(Error::MissingMasks(_))
        ));
    }

    #[test]
    fn real_only_uses_train_images() {
        let ds = toy_dataset(&ToyDatasetConfig::default());
        let cfg = GeneratorConfig {
            kind: GeneratorKind::RealOnly,
            ..small_config()
        };
        let pool = synthesize_pool(&ds, "toy03", &cfg, &CaptionCorpus::bundled(), &PoolSources::default()).unwrap();
        assert_eq!(pool.positives.len(), 3);
        assert_eq!(pool.positives[0].record, ds.get("toy03").unwrap().train[0]);
    }

    struct Fake;

    impl GeneratorClient for Fake {
        fn generate(&self, req: &GenerationRequest) -> Result<Vec<RgbImage>> {
            Ok((0..req.n).map(|_| RgbImage::filled(32, 32, [(req.seed % 251) as u8, 0, 0])).collect())
        }
    }

    #[test]
    fn external_kind_uses_client() {
        let ds = toy_dataset(&ToyDatasetConfig::default());
        let cfg = GeneratorConfig {
            kind: GeneratorKind::External,
            cfg_scale: 7.5,
            ..small_config()
        };
        let sources = PoolSources {
            backgrounds: None,
            negatives: NegativeSource::External,
            client: Some(Arc::new(Fake)),
        };
        let pool = synthesize_pool(&ds, "toy00", &cfg, &CaptionCorpus::bundled(), &sources).unwrap();
        assert_eq!((pool.positives.len(), pool.negatives.len()), (12, 20));
        assert_eq!(pool.positives[0].record.pixels.dims(), (64, 64));
        assert_eq!(pool.positives[0].provenance.cfg, Some(7.5));
        assert!(pool.positives[0].provenance.caption.as_ref().unwrap().contains(IDENTIFIER));
    }
}
