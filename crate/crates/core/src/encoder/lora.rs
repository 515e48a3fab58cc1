//! Low-rank adapters on frozen linear maps, their gradients, and the adapter
//! checkpoint format.
//!
//! Checkpoint layout (little-endian throughout):
//!
//! ```text
//! magic   b"PRLA"
//! u32     version (1)
//! u32     number of maps
//! per map, in name order:
//!   u32   name length, then the UTF-8 name
//!   u32   rank r, u32 d_in, u32 d_out
//!   f32   alpha, f32 dropout
//!   f32   A, r x d_in, row-major
//!   f32   B, d_out x r, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const MAGIC: &[u8; 4] = b"PRLA";
const VERSION: u32 = 1;

/// A frozen linear map `y = W x (+ b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `d_out x d_in`.
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// Which maps to adapt and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    /// Map names. Empty means the encoder's default targets.
    pub targets: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            rank: 16,
            alpha: 0.5,
            dropout: 0.3,
        }
    }
}

impl AdapterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("adapter alpha must be finite".into()));
        }
        Ok(())
    }
}

/// Low-rank delta `(alpha / r) B A` for one map.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// `r x d_in`.
    pub a: Array2<f64>,
    /// `d_out x r`.
    pub b: Array2<f64>,
}

impl LoraAdapter {
    /// `A` uniform in `±1/sqrt(d_in)`, `B = 0`.
    pub fn init(d_in: usize, d_out: usize, spec: &AdapterSpec, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = Array2::from_shape_fn((spec.rank, d_in), |_| rng.random_range(-bound..bound));
        Self {
            rank: spec.rank,
            alpha: spec.alpha,
            dropout: spec.dropout,
            a,
            b: Array2::zeros((d_out, spec.rank)),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// The effective weight delta `(alpha / r) B A`.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale()
    }

    fn check(&self, lin: &Linear) -> Result<()> {
        if self.a.nrows() != self.rank || self.b.ncols() != self.rank {
            return Err(Error::ShapeMismatch(format!(
                "adapter rank {} with A {:?}, B {:?}",
                self.rank,
                self.a.dim(),
                self.b.dim()
            )));
        }
        if self.d_in() != lin.d_in() || self.d_out() != lin.d_out() {
            return Err(Error::ShapeMismatch(format!(
                "adapter {}x{} on map {}x{}",
                self.d_out(),
                self.d_in(),
                lin.d_out(),
                lin.d_in()
            )));
        }
        Ok(())
    }
}

/// Inverted-dropout multipliers (0 or 1/(1-p)) for an `n x d` input.
pub(crate) fn dropout_mask(n: usize, d: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((n, d), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// `W x + (alpha/r) B A drop(x)` for a single vector. Dropout only applies
/// when `training`.
pub fn lora_forward(base: &Array2<f64>, adapter: &LoraAdapter, x: &[f64], training: bool, rng_seed: u64) -> Result<Vec<f64>> {
    let lin = Linear {
        weight: base.clone(),
        bias: None,
    };
    adapter.check(&lin)?;
    if x.len() != lin.d_in() {
        return Err(Error::ShapeMismatch(format!("input {} for map with d_in {}", x.len(), lin.d_in())));
    }
    let xs = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    let mut rng = seed::rng(rng_seed);
    let (out, _) = apply(&lin, Some(adapter), &xs, training.then_some(&mut rng));
    Ok(out.row(0).to_vec())
}

/// Values kept from a forward pass through one (possibly adapted) map.
#[derive(Clone, Debug, Default)]
pub(crate) struct LayerCache {
    /// Adapter input after dropout.
    dropped: Option<Array2<f64>>,
    /// Dropout multipliers, when dropout was active.
    mask: Option<Array2<f64>>,
    /// `drop(X) A^T`.
    xa: Option<Array2<f64>>,
}

/// Row-batched forward: `X W^T + b + s drop(X) A^T B^T`.
pub(crate) fn apply(
    lin: &Linear,
    adapter: Option<&LoraAdapter>,
    x: &Array2<f64>,
    rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, LayerCache) {
    let mut out = x.dot(&lin.weight.t());
    if let Some(b) = &lin.bias {
        out += b;
    }
    let Some(ad) = adapter else {
        return (out, LayerCache::default());
    };
    let mask = match rng {
        Some(rng) if ad.dropout > 0.0 => Some(dropout_mask(x.nrows(), x.ncols(), ad.dropout, rng)),
        _ => None,
    };
    let dropped = match &mask {
        Some(m) => x * m,
        None => x.clone(),
    };
    let xa = dropped.dot(&ad.a.t());
    out.scaled_add(ad.scale(), &xa.dot(&ad.b.t()));
    (
        out,
        LayerCache {
            dropped: Some(dropped),
            mask,
            xa: Some(xa),
        },
    )
}

/// Accumulates adapter gradients into `grad` (when adapted) and returns the
/// input gradient when `need_dx`.
pub(crate) fn backward(
    lin: &Linear,
    adapter: Option<&LoraAdapter>,
    cache: &LayerCache,
    d_out: &Array2<f64>,
    grad: Option<&mut AdapterGrad>,
    need_dx: bool,
) -> Option<Array2<f64>> {
    let mut dx = need_dx.then(|| d_out.dot(&lin.weight));
    if let Some(ad) = adapter {
        let s = ad.scale();
        let (dropped, xa) = (
            cache.dropped.as_ref().expect("adapted forward cache"),
            cache.xa.as_ref().expect("adapted forward cache"),
        );
        let db_out = d_out.dot(&ad.b);
        if let Some(g) = grad {
            g.b.scaled_add(s, &d_out.t().dot(xa));
            g.a.scaled_add(s, &db_out.t().dot(dropped));
        }
        if let Some(dx) = dx.as_mut() {
            let mut through = db_out.dot(&ad.a) * s;
            if let Some(m) = &cache.mask {
                through *= m;
            }
            *dx += &through;
        }
    }
    dx
}

/// Gradient w.r.t. one adapter's `A` and `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

/// All adapters of an encoder, keyed by map name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    pub maps: BTreeMap<String, LoraAdapter>,
}

/// Gradients for every adapter of a set, same keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub maps: BTreeMap<String, AdapterGrad>,
}

impl AdapterGrads {
    pub fn zeros_like(set: &AdapterSet) -> Self {
        Self {
            maps: set
                .maps
                .iter()
                .map(|(k, ad)| {
                    (
                        k.clone(),
                        AdapterGrad {
                            a: Array2::zeros(ad.a.dim()),
                            b: Array2::zeros(ad.b.dim()),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &AdapterGrads) {
        for (k, g) in &mut self.maps {
            let o = &other.maps[k];
            g.a += &o.a;
            g.b += &o.b;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.maps
            .values()
            .flat_map(|g| g.a.iter().chain(g.b.iter()).copied())
            .collect()
    }
}

impl AdapterSet {
    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&LoraAdapter> {
        self.maps.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.maps.values().map(LoraAdapter::num_params).sum()
    }

    /// All trainable parameters, name order, `A` then `B`, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.maps
            .values()
            .flat_map(|ad| ad.a.iter().chain(ad.b.iter()).copied())
            .collect()
    }

    /// Inverse of [`AdapterSet::flatten`].
    pub fn set_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter().copied();
        for ad in self.maps.values_mut() {
            for v in ad.a.iter_mut().chain(ad.b.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        u32le(out, VERSION as usize);
        u32le(out, self.maps.len());
        for (name, ad) in &self.maps {
            u32le(out, name.len());
            out.extend_from_slice(name.as_bytes());
            u32le(out, ad.rank);
            u32le(out, ad.d_in());
            u32le(out, ad.d_out());
            out.extend_from_slice(&(ad.alpha as f32).to_le_bytes());
            out.extend_from_slice(&(ad.dropout as f32).to_le_bytes());
            for v in ad.a.iter().chain(ad.b.iter()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }

    pub fn read_from(bytes: &[u8]) -> Result<AdapterSet> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()?;
        let mut maps = BTreeMap::new();
        for _ in 0..n {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::BadCheckpoint("map name is not UTF-8".into()))?
                .to_string();
            let (rank, d_in, d_out) = (r.u32()?, r.u32()?, r.u32()?);
            let alpha = r.f32()? as f64;
            let dropout = r.f32()? as f64;
            let a = Array2::from_shape_vec((rank, d_in), r.f32s(rank * d_in)?).expect("sized");
            let b = Array2::from_shape_vec((d_out, rank), r.f32s(d_out * rank)?).expect("sized");
            maps.insert(
                name,
                LoraAdapter {
                    rank,
                    alpha,
                    dropout,
                    a,
                    b,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::BadCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(AdapterSet { maps })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf);
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<AdapterSet> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::BadCheckpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::BadCheckpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}
