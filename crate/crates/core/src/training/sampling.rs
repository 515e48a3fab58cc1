use rand::Rng;

use crate::data::{ImageRecord, Split, SyntheticPool};
use crate::error::{Error, Result};
use crate::seed;

use super::TrainConfig;

/// One anchor with its positive and negatives. Indices point into the real
/// images and the pool's positive/negative lists.
#[derive(Clone, Debug)]
pub struct TrainingPair<'a> {
    pub anchor: &'a ImageRecord,
    pub positive: &'a ImageRecord,
    pub negatives: Vec<&'a ImageRecord>,
    pub anchor_idx: usize,
    pub positive_idx: usize,
    pub negative_idx: Vec<usize>,
}

impl TrainingPair<'_> {
    pub fn is_valid(&self) -> bool {
        self.anchor.split == Split::Train
            && self.anchor.instance_id == self.positive.instance_id
            && self.negatives.iter().all(|n| n.instance_id != self.anchor.instance_id)
    }
}

/// `config.n_pairs` pairs: anchors cycle over `d_r`, positives are drawn
/// uniformly with replacement, negatives without replacement per pair.
pub fn sample_pairs<'a>(
    d_r: &'a [ImageRecord],
    pool: &'a SyntheticPool,
    config: &TrainConfig,
    rng_seed: u64,
) -> Result<Vec<TrainingPair<'a>>> {
    if pool.positives.is_empty() || d_r.is_empty() {
        return Err(Error::EmptyPool);
    }
    if pool.negatives.len() < config.n_neg_per_anchor {
        return Err(Error::InsufficientNegatives {
            needed: config.n_neg_per_anchor,
            available: pool.negatives.len(),
        });
    }
    let mut rng = seed::stream(rng_seed, "sample_pairs", 0);
    Ok((0..config.n_pairs)
        .map(|i| {
            let anchor_idx = i % d_r.len();
            let positive_idx = rng.random_range(0..pool.positives.len());
            let negative_idx = rand::seq::index::sample(&mut rng, pool.negatives.len(), config.n_neg_per_anchor).into_vec();
            TrainingPair {
                anchor: &d_r[anchor_idx],
                positive: &pool.positives[positive_idx].record,
                negatives: negative_idx.iter().map(|&j| &pool.negatives[j].record).collect(),
                anchor_idx,
                positive_idx,
                negative_idx,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GeneratorKind, Provenance, SyntheticImage};
    use crate::raster::RgbImage;

    fn pool(n_pos: usize, n_neg: usize) -> (Vec<ImageRecord>, SyntheticPool) {
        let img = RgbImage::new(2, 2);
        let d_r = (0..3).map(|i| ImageRecord::new(format!("a{i}"), "cup", Split::Train, img.clone())).collect();
        let mut p = SyntheticPool::new("cup", "mug");
        let syn = |id: String, inst: &str| SyntheticImage {
            record: ImageRecord::new(id, inst, Split::Train, img.clone()),
            provenance: Provenance::new(GeneratorKind::CutPaste, 0),
        };
        p.positives = (0..n_pos).map(|i| syn(format!("p{i}"), "cup")).collect();
        p.negatives = (0..n_neg).map(|i| syn(format!("n{i}"), "negative")).collect();
        (d_r, p)
    }

    #[test]
    fn invariants_and_cycling() {
        let (d_r, p) = pool(5, 20);
        let cfg = TrainConfig {
            n_pairs: 30,
            ..TrainConfig::default()
        };
        let pairs = sample_pairs(&d_r, &p, &cfg, 1).unwrap();
        assert_eq!(pairs.len(), 30);
        for (i, pair) in pairs.iter().enumerate() {
            assert!(pair.is_valid());
            assert_eq!(pair.anchor_idx, i % 3);
            let mut n = pair.negative_idx.clone();
            n.sort();
            n.dedup();
            assert_eq!(n.len(), 16);
        }
        let again = sample_pairs(&d_r, &p, &cfg, 1).unwrap();
        assert!(pairs.iter().zip(&again).all(|(a, b)| a.positive_idx == b.positive_idx && a.negative_idx == b.negative_idx));
    }

    #[test]
    fn single_pair_and_errors() {
        let (d_r, p) = pool(5, 20);
        let cfg = TrainConfig {
            n_pairs: 1,
            ..TrainConfig::default()
        };
        assert!(sample_pairs(&d_r, &p, &cfg, 0).unwrap()[0].is_valid());
        let (d_r, p) = pool(0, 20);
        assert!(matches!(sample_pairs(&d_r, &p, &cfg, 0), Err(Error::EmptyPool)));
        let (d_r, p) = pool(3, 10);
        assert!(matches!(
            sample_pairs(&d_r, &p, &cfg, 0),
            Err(Error::InsufficientNegatives { needed: 16, available: 10 })
        ));
    }
}
