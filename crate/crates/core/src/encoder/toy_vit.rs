//! A small fixed-weight patch encoder for CPU experiments.
//!
//! 64x64 input, 8x8 patches (64 tokens), width 32:
//!
//! ```text
//! z   = patch_embed(patches)              frozen random projection
//! y   = z + fc2(relu(fc1(z)))             one residual MLP block
//! k,v = attn.key(y), attn.value(y)        attention pooling with a fixed query
//! cls = sum_p softmax_p(q . k_p / sqrt(D)) v_p
//! ```
//!
//! Patch outputs are `y`. There is no positional embedding, so identical
//! patches map to identical vectors.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::lora::{apply, backward, dropout_mask, AdapterGrads, AdapterSet, AdapterSpec, LayerCache, Linear, LoraAdapter};
use super::{EmbeddingBundle, Encoder, EncoderDescriptor};
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::seed;

pub const TOY_VIT: &str = "toy-vit";

const INPUT: usize = 64;
const PATCH: usize = 8;
const DIM: usize = 32;
const HIDDEN: usize = 64;

const PATCH_EMBED: &str = "patch_embed";
const FC1: &str = "blocks.0.mlp.fc1";
const FC2: &str = "blocks.0.mlp.fc2";
const KEY: &str = "pool.attn.key";
const VALUE: &str = "pool.attn.value";

/// Whether dropout on adapter inputs is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct TrunkTape {
    pe: LayerCache,
    fc1: LayerCache,
    hidden_pre: Array2<f64>,
    fc2: LayerCache,
}

#[derive(Clone, Debug)]
pub struct PoolTape {
    y: Array2<f64>,
    /// Dropout multipliers on the key / value adapter inputs.
    key_mask: Option<Array2<f64>>,
    value_mask: Option<Array2<f64>>,
    attn: Array1<f64>,
}

/// Intermediates needed to backpropagate one image. `trunk` is absent when
/// the pass started from cached trunk outputs.
#[derive(Clone, Debug)]
pub struct EncoderTape {
    pub trunk: Option<TrunkTape>,
    pub pool: PoolTape,
}

#[derive(Clone, Debug)]
pub struct ToyVit {
    descriptor: EncoderDescriptor,
    patch_embed: Linear,
    fc1: Linear,
    fc2: Linear,
    key: Linear,
    value: Linear,
    query: Array1<f64>,
    adapters: AdapterSet,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let b = std * 3f64.sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-b..b))
}

fn map_rng(mode: Mode, name: &str) -> Option<ChaCha8Rng> {
    match mode {
        Mode::Inference => None,
        Mode::Training { seed } => Some(seed::stream(seed, name, 0)),
    }
}

impl ToyVit {
    pub fn descriptor_default() -> EncoderDescriptor {
        EncoderDescriptor {
            name: TOY_VIT.into(),
            input_size: INPUT,
            patch_size: PATCH,
            dim: DIM,
            weight_source: "builtin".into(),
        }
    }

    /// Base encoder with weights drawn from `weight_seed`.
    pub fn new(weight_seed: u64) -> Self {
        let mut rng = seed::stream(weight_seed, TOY_VIT, 0);
        let d_patch = PATCH * PATCH * 3;
        let patch_embed = Linear {
            weight: uniform(&mut rng, DIM, d_patch, 2.0 / (d_patch as f64).sqrt()),
            bias: None,
        };
        let fc1 = Linear {
            weight: uniform(&mut rng, HIDDEN, DIM, (2.0 / DIM as f64).sqrt()),
            bias: Some(Array1::from_shape_fn(HIDDEN, |_| rng.random_range(-0.1..0.1))),
        };
        let fc2 = Linear {
            weight: uniform(&mut rng, DIM, HIDDEN, 0.5 / (HIDDEN as f64).sqrt()),
            bias: None,
        };
        let key = Linear {
            weight: uniform(&mut rng, DIM, DIM, 1.0 / (DIM as f64).sqrt()),
            bias: None,
        };
        let value = Linear {
            weight: uniform(&mut rng, DIM, DIM, 1.0 / (DIM as f64).sqrt()),
            bias: None,
        };
        let query = Array1::from_shape_fn(DIM, |_| rng.random_range(-1.0..1.0));
        Self {
            descriptor: Self::descriptor_default(),
            patch_embed,
            fc1,
            fc2,
            key,
            value,
            query,
            adapters: AdapterSet::default(),
        }
    }

    /// Names of the adaptable linear maps.
    pub fn map_names(&self) -> [&'static str; 5] {
        [PATCH_EMBED, FC1, FC2, KEY, VALUE]
    }

    /// Maps adapted when a spec names none: the attention projections.
    pub fn default_targets(&self) -> Vec<String> {
        self.map_names()
            .iter()
            .filter(|n| n.contains(".attn."))
            .map(|n| n.to_string())
            .collect()
    }

    pub fn linear(&self, name: &str) -> Option<&Linear> {
        match name {
            PATCH_EMBED => Some(&self.patch_embed),
            FC1 => Some(&self.fc1),
            FC2 => Some(&self.fc2),
            KEY => Some(&self.key),
            VALUE => Some(&self.value),
            _ => None,
        }
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut AdapterSet {
        &mut self.adapters
    }

    /// Same base weights, no adapters.
    pub fn base(&self) -> ToyVit {
        ToyVit {
            adapters: AdapterSet::default(),
            ..self.clone()
        }
    }

    /// Hash of the frozen weights (adapters excluded).
    pub fn base_digest(&self) -> String {
        let mut h = Sha256::new();
        for name in self.map_names() {
            let lin = self.linear(name).expect("known map");
            h.update(name.as_bytes());
            for v in lin.weight.iter().chain(lin.bias.iter().flatten()) {
                h.update(v.to_le_bytes());
            }
        }
        for v in &self.query {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn attach(&self, spec: &AdapterSpec, seed_value: u64) -> Result<ToyVit> {
        spec.validate()?;
        let targets = if spec.targets.is_empty() {
            self.default_targets()
        } else {
            spec.targets.clone()
        };
        let mut set = AdapterSet::default();
        for name in targets {
            let lin = self.linear(&name).ok_or_else(|| Error::UnknownTargetMap(name.clone()))?;
            let mut rng = seed::stream(seed_value, &name, 0);
            set.maps.insert(name, LoraAdapter::init(lin.d_in(), lin.d_out(), spec, &mut rng));
        }
        self.with_adapters(set)
    }

    /// Replace the adapter set, checking names and shapes.
    pub fn with_adapters(&self, set: AdapterSet) -> Result<ToyVit> {
        for (name, ad) in &set.maps {
            let lin = self.linear(name).ok_or_else(|| Error::UnknownTargetMap(name.clone()))?;
            if ad.d_in() != lin.d_in() || ad.d_out() != lin.d_out() || ad.a.nrows() != ad.rank || ad.b.ncols() != ad.rank {
                return Err(Error::ShapeMismatch(format!(
                    "adapter for `{name}` has A {:?}, B {:?}; map is {}x{}",
                    ad.a.dim(),
                    ad.b.dim(),
                    lin.d_out(),
                    lin.d_in()
                )));
            }
        }
        Ok(ToyVit {
            adapters: set,
            ..self.clone()
        })
    }

    /// True when any map before the pooling head carries an adapter, so trunk
    /// outputs depend on trainable parameters.
    pub fn trunk_is_adapted(&self) -> bool {
        [PATCH_EMBED, FC1, FC2].iter().any(|n| self.adapters.get(n).is_some())
    }

    /// Patch rows (`64 x 192`) of the image resized to the canonical input.
    pub fn patchify(&self, img: &RgbImage) -> Result<Array2<f64>> {
        if img.is_empty() {
            return Err(Error::EncoderUnavailable("empty image".into()));
        }
        let resized;
        let img = if img.dims() == (INPUT, INPUT) {
            img
        } else {
            resized = img.resize_bilinear(INPUT, INPUT);
            &resized
        };
        let g = INPUT / PATCH;
        let mut out = Array2::zeros((g * g, PATCH * PATCH * 3));
        for pr in 0..g {
            for pc in 0..g {
                let mut row = out.row_mut(pr * g + pc);
                let mut k = 0;
                for r in 0..PATCH {
                    for c in 0..PATCH {
                        for ch in img.get(pr * PATCH + r, pc * PATCH + c) {
                            row[k] = ch as f64 / 255.0 - 0.5;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn layer(&self, name: &str, x: &Array2<f64>, mode: Mode) -> (Array2<f64>, LayerCache) {
        let lin = self.linear(name).expect("known map");
        let mut rng = map_rng(mode, name);
        apply(lin, self.adapters.get(name), x, rng.as_mut())
    }

    pub fn trunk(&self, input: Array2<f64>, mode: Mode) -> (Array2<f64>, TrunkTape) {
        let (z, pe) = self.layer(PATCH_EMBED, &input, mode);
        let (hidden_pre, fc1) = self.layer(FC1, &z, mode);
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let (mlp, fc2) = self.layer(FC2, &hidden, mode);
        let y = &z + &mlp;
        (
            y,
            TrunkTape {
                pe,
                fc1,
                hidden_pre,
                fc2,
            },
        )
    }

    fn pool_mask(&self, name: &str, n: usize, mode: Mode) -> Option<Array2<f64>> {
        let ad = self.adapters.get(name)?;
        let mut rng = map_rng(mode, name)?;
        (ad.dropout > 0.0).then(|| dropout_mask(n, DIM, ad.dropout, &mut rng))
    }

    /// Attention pooling. Both projections are linear, so the key map is
    /// folded into the query (`q . W y = (W^T q) . y`) and the value map is
    /// applied after pooling (`sum a W y = W sum a y`); this is exact, with
    /// adapters and dropout included.
    pub fn pool(&self, y: Array2<f64>, mode: Mode) -> (Vec<f64>, PoolTape) {
        let n = y.nrows();
        let key_mask = self.pool_mask(KEY, n, mode);
        let value_mask = self.pool_mask(VALUE, n, mode);
        let mut logits = y.dot(&self.key.weight.t().dot(&self.query));
        if let Some(ad) = self.adapters.get(KEY) {
            let folded = ad.a.t().dot(&ad.b.t().dot(&self.query));
            logits.scaled_add(ad.scale(), &masked(&y, key_mask.as_ref()).dot(&folded));
        }
        logits /= (DIM as f64).sqrt();
        let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let e = logits.mapv(|x| (x - max).exp());
        let attn = &e / e.sum();
        let mut cls = self.value.weight.dot(&y.t().dot(&attn));
        if let Some(ad) = self.adapters.get(VALUE) {
            let pooled = masked(&y, value_mask.as_ref()).t().dot(&attn);
            cls.scaled_add(ad.scale(), &ad.b.dot(&ad.a.dot(&pooled)));
        }
        (
            cls.to_vec(),
            PoolTape {
                y,
                key_mask,
                value_mask,
                attn,
            },
        )
    }

    fn bundle(&self, cls: Vec<f64>, patches: Array2<f64>, source_dims: (usize, usize)) -> Result<EmbeddingBundle> {
        let g = INPUT / PATCH;
        let b = EmbeddingBundle {
            cls,
            patches,
            grid: (g, g),
            patch_size: PATCH,
            source_dims,
        };
        if b.is_finite() {
            Ok(b)
        } else {
            Err(Error::NonFiniteOutput)
        }
    }

    /// Full pass, keeping what backpropagation needs.
    pub fn forward(&self, img: &RgbImage, mode: Mode) -> Result<(EmbeddingBundle, EncoderTape)> {
        let (y, trunk) = self.trunk(self.patchify(img)?, mode);
        let (bundle, mut tape) = self.forward_from_trunk(y, mode, img.dims())?;
        tape.trunk = Some(trunk);
        Ok((bundle, tape))
    }

    /// Pooling head only, from precomputed trunk outputs.
    pub fn forward_from_trunk(
        &self,
        y: Array2<f64>,
        mode: Mode,
        source_dims: (usize, usize),
    ) -> Result<(EmbeddingBundle, EncoderTape)> {
        let (cls, pool) = self.pool(y, mode);
        let bundle = self.bundle(cls, pool.y.clone(), source_dims)?;
        Ok((bundle, EncoderTape { trunk: None, pool }))
    }

    /// Frozen-trunk outputs for caching; only valid while
    /// [`ToyVit::trunk_is_adapted`] is false.
    pub fn trunk_features(&self, img: &RgbImage) -> Result<Array2<f64>> {
        Ok(self.trunk(self.patchify(img)?, Mode::Inference).0)
    }

    /// Accumulate adapter gradients of a loss whose gradient w.r.t. the CLS
    /// vector is `d_cls` and w.r.t. the mean patch vector is `d_mean`.
    pub fn backward(&self, tape: &EncoderTape, d_cls: &[f64], d_mean: &[f64], grads: &mut AdapterGrads) -> Result<()> {
        let p = &tape.pool;
        let n = p.y.nrows();
        let trunk_grad = self.trunk_is_adapted();
        let d_cls = Array1::from(d_cls.to_vec());
        let mut d_y = trunk_grad.then(|| Array2::from_shape_fn((n, DIM), |(_, j)| d_mean[j] / n as f64));

        // value path: cls = W_v (Y^T a) + s B A (drop(Y)^T a)
        let back_v = self.value.weight.t().dot(&d_cls);
        let mut d_attn = p.y.dot(&back_v);
        if let Some(dy) = d_y.as_mut() {
            *dy += &outer(&p.attn, &back_v);
        }
        if let Some(ad) = self.adapters.get(VALUE) {
            let s = ad.scale();
            let dropped = masked(&p.y, p.value_mask.as_ref());
            let pooled = dropped.t().dot(&p.attn);
            let bt_d = ad.b.t().dot(&d_cls);
            if let Some(g) = grads.maps.get_mut(VALUE) {
                g.b.scaled_add(s, &outer(&d_cls, &ad.a.dot(&pooled)));
                g.a.scaled_add(s, &outer(&bt_d, &pooled));
            }
            let folded = ad.a.t().dot(&bt_d);
            d_attn.scaled_add(s, &dropped.dot(&folded));
            if let Some(dy) = d_y.as_mut() {
                dy.scaled_add(s, &masked(&outer(&p.attn, &folded), p.value_mask.as_ref()));
            }
        }

        // softmax and key path: logits = (Y W_k^T q + s drop(Y) A^T B^T q) / sqrt(D)
        let centered = &d_attn - p.attn.dot(&d_attn);
        let d_logits = &p.attn * &centered / (DIM as f64).sqrt();
        if let Some(dy) = d_y.as_mut() {
            *dy += &outer(&d_logits, &self.key.weight.t().dot(&self.query));
        }
        if let Some(ad) = self.adapters.get(KEY) {
            let s = ad.scale();
            let dropped = masked(&p.y, p.key_mask.as_ref());
            let z = dropped.t().dot(&d_logits);
            let bt_q = ad.b.t().dot(&self.query);
            if let Some(g) = grads.maps.get_mut(KEY) {
                g.b.scaled_add(s, &outer(&self.query, &ad.a.dot(&z)));
                g.a.scaled_add(s, &outer(&bt_q, &z));
            }
            if let Some(dy) = d_y.as_mut() {
                let folded = ad.a.t().dot(&bt_q);
                dy.scaled_add(s, &masked(&outer(&d_logits, &folded), p.key_mask.as_ref()));
            }
        }

        let Some(d_y) = d_y else {
            return Ok(());
        };
        let t = tape
            .trunk
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("trunk is adapted but the pass started from cached features".into()))?;
        let d_hidden = backward(&self.fc2, self.adapters.get(FC2), &t.fc2, &d_y, grads.maps.get_mut(FC2), true)
            .expect("requested");
        let relu_grad = Array2::from_shape_fn(t.hidden_pre.dim(), |(i, j)| {
            if t.hidden_pre[[i, j]] > 0.0 {
                d_hidden[[i, j]]
            } else {
                0.0
            }
        });
        let need_pe = self.adapters.get(PATCH_EMBED).is_some();
        let mut d_z = d_y;
        if let Some(dx) = backward(&self.fc1, self.adapters.get(FC1), &t.fc1, &relu_grad, grads.maps.get_mut(FC1), need_pe) {
            d_z += &dx;
        }
        if need_pe {
            backward(
                &self.patch_embed,
                self.adapters.get(PATCH_EMBED),
                &t.pe,
                &d_z,
                grads.maps.get_mut(PATCH_EMBED),
                false,
            );
        }
        Ok(())
    }
}

fn masked(x: &Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x.clone(),
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
}

impl Encoder for ToyVit {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn embed(&self, img: &RgbImage) -> Result<EmbeddingBundle> {
        Ok(self.forward(img, Mode::Inference)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::global_feature;

    fn noise(seed_value: u64) -> RgbImage {
        let mut rng = seed::rng(seed_value);
        RgbImage::from_fn(64, 64, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn shapes_and_determinism() {
        let enc = ToyVit::new(0);
        let img = noise(1);
        let a = enc.embed(&img).unwrap();
        assert_eq!(a.grid, (8, 8));
        assert_eq!(a.patches.dim(), (64, 32));
        assert_eq!(a.cls.len(), 32);
        assert_eq!(global_feature(&a).len(), 64);
        assert_eq!(a, enc.embed(&img).unwrap());
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let enc = ToyVit::new(0);
        let b = enc.embed(&RgbImage::filled(64, 64, [40, 200, 90])).unwrap();
        for i in 1..64 {
            assert_eq!(b.patches.row(i), b.patches.row(0));
        }
    }

    #[test]
    fn other_sizes_are_resized() {
        let enc = ToyVit::new(0);
        let b = enc.embed(&RgbImage::filled(30, 50, [1, 2, 3])).unwrap();
        assert_eq!(b.grid, (8, 8));
        assert_eq!(b.source_dims, (30, 50));
    }

    #[test]
    fn attach_defaults_and_errors() {
        let enc = ToyVit::new(0);
        let spec = AdapterSpec::default();
        let ad = enc.attach(&spec, 3).unwrap();
        assert_eq!(ad.adapters().maps.keys().collect::<Vec<_>>(), [KEY, VALUE]);
        assert_eq!(ad.adapters().num_params(), 2 * 16 * (32 + 32));
        for a in ad.adapters().maps.values() {
            assert_eq!((a.rank, a.alpha, a.dropout), (16, 0.5, 0.3));
            assert!(a.b.iter().all(|&v| v == 0.0));
        }
        let img = noise(2);
        assert_eq!(ad.embed(&img).unwrap(), enc.embed(&img).unwrap());
        let bad = AdapterSpec {
            targets: vec!["blocks.9.attn.qkv".into()],
            ..spec
        };
        assert!(matches!(enc.attach(&bad, 0), Err(Error::UnknownTargetMap(_))));
    }

    /// Finite-difference check of adapter gradients through the whole
    /// network, for a linear functional of the global feature.
    #[test]
    fn adapter_gradients_match_finite_differences() {
        let enc = ToyVit::new(0);
        let spec = AdapterSpec {
            targets: enc.map_names().iter().map(|s| s.to_string()).collect(),
            rank: 2,
            alpha: 1.0,
            dropout: 0.2,
        };
        let mut model = enc.attach(&spec, 5).unwrap();
        let mut rng = seed::rng(9);
        let params: Vec<f64> = model.adapters().flatten().iter().map(|_| rng.random_range(-0.3..0.3)).collect();
        model.adapters_mut().set_flat(&params);
        let img = noise(4);
        let w: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mode = Mode::Training { seed: 77 };
        let objective = |m: &ToyVit| {
            let (b, _) = m.forward(&img, mode).unwrap();
            global_feature(&b).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, tape) = model.forward(&img, mode).unwrap();
        let mut grads = AdapterGrads::zeros_like(model.adapters());
        model.backward(&tape, &w[..32], &w[32..], &mut grads).unwrap();
        let analytic = grads.flatten();
        let h = 1e-5;
        for i in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p[i] += h;
            model.adapters_mut().set_flat(&p);
            let up = objective(&model);
            p[i] -= 2.0 * h;
            model.adapters_mut().set_flat(&p);
            let down = objective(&model);
            model.adapters_mut().set_flat(&params);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: fd {fd} analytic {}", analytic[i]);
        }
    }
}
