//! ResNet-style patch regressor and the multi-head convolutional attention
//! that weights neighbor pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{
    read_checkpoint, write_checkpoint, CheckpointEntry, EngineError, Graph, ParamStore, Real, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::grid::{
    normalize_inputs, ChannelStats, PatchSample, CENTER, CH_NDVI, HALF, N_CHANNELS, PATCH, PATCH_PIXELS,
};

pub const N_INDEX_CHANNELS: usize = 3;
pub const NET_PREFIX: &str = "net.";
pub const ATTN_PREFIX: &str = "attn.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub attn_hidden: usize,
    pub dropout: f64,
    /// Gaussian decay in pixels.
    pub sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: 32, blocks: 3, heads: 4, attn_hidden: 16, dropout: 0.15, sigma: 1.5 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.attn_hidden == 0 {
            return Err(Error::Config("model widths and head count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map between normalized network output and °C.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl TargetStats {
    pub fn from_targets(t: &[f64]) -> Self {
        if t.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let n = t.len() as f64;
        let mean = t.iter().sum::<f64>() / n;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt().max(1e-3) }
    }
}

fn conv_init<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize, gain: f64) {
    let fan_in = (c_in * k * k) as f64;
    let std = gain / fan_in.sqrt();
    let w: Vec<f64> = (0..c_out * c_in * k * k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    store.insert(format!("{name}.w"), Tensor::from_f64(vec![c_out, c_in, k, k], &w));
    store.insert(format!("{name}.b"), Tensor::zeros(vec![c_out]));
}

/// Fresh parameters: He-scaled convolutions, zero biases.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let c = cfg.channels;
    let he = 2f64.sqrt();
    conv_init(&mut s, &mut rng, "net.stem", c, N_CHANNELS, 3, he);
    for b in 0..cfg.blocks {
        conv_init(&mut s, &mut rng, &format!("net.block{b}.conv1"), c, c, 3, he);
        // second conv starts small so every block begins near the identity
        conv_init(&mut s, &mut rng, &format!("net.block{b}.conv2"), c, c, 3, 0.5);
    }
    conv_init(&mut s, &mut rng, "net.head", 1, c, 1, 1.0);
    for h in 0..cfg.heads {
        conv_init(&mut s, &mut rng, &format!("attn.head{h}.conv"), cfg.attn_hidden, N_INDEX_CHANNELS, 3, he);
        conv_init(&mut s, &mut rng, &format!("attn.head{h}.out"), 1, cfg.attn_hidden, 1, 1.0);
    }
    s
}

/// Parameters registered on a graph, looked up by name.
pub struct Bound<'a, T: Real> {
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<'a, T: Real> Bound<'a, T> {
    pub fn new(g: &mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        let vars = store.bind(g);
        Self { store, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var, EngineError> {
        g.conv2d(x, self.var(&format!("{name}.w")), self.var(&format!("{name}.b")))
    }
}

/// Network body: `x [B,7,7,8]` (normalized, NHWC) → `[B,49]` in normalized
/// target units.
pub fn net_forward<T: Real>(g: &mut Graph<T>, p: &Bound<'_, T>, cfg: &ModelConfig, x: Var) -> Result<Var, EngineError> {
    let batch = g.shape(x)[0];
    let stem = p.conv(g, "net.stem", x)?;
    let mut h = g.relu(stem);
    for b in 0..cfg.blocks {
        let c1 = p.conv(g, &format!("net.block{b}.conv1"), h)?;
        let a1 = g.relu(c1);
        let c2 = p.conv(g, &format!("net.block{b}.conv2"), a1)?;
        let s = g.add(h, c2)?;
        h = g.relu(s);
    }
    let out = p.conv(g, "net.head", h)?;
    g.reshape(out, vec![batch, PATCH_PIXELS])
}

/// Network output mapped to °C.
pub fn net_forward_celsius<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    cfg: &ModelConfig,
    target: TargetStats,
    x: Var,
) -> Result<Var, EngineError> {
    let y = net_forward(g, p, cfg, x)?;
    let y = g.scale(y, T::from_f64(target.std));
    Ok(g.offset(y, T::from_f64(target.mean)))
}

/// One logit map `[B,49]` per head from raw index channels `[B,7,7,3]`.
pub fn attention_logits<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    cfg: &ModelConfig,
    idx: Var,
    mut rng: Option<&mut R>,
) -> Result<Vec<Var>, EngineError> {
    let batch = g.shape(idx)[0];
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let c = p.conv(g, &format!("attn.head{h}.conv"), idx)?;
        let a = g.relu(c);
        let d = g.dropout(a, cfg.dropout, rng.as_deref_mut());
        let o = p.conv(g, &format!("attn.head{h}.out"), d)?;
        heads.push(g.reshape(o, vec![batch, PATCH_PIXELS])?);
    }
    Ok(heads)
}

/// `exp(-(dx² + dy²) / 2σ²)` over the patch, offsets in pixels.
pub fn gaussian_kernel(sigma: f64) -> [f64; PATCH_PIXELS] {
    let mut k = [0.0; PATCH_PIXELS];
    for (p, v) in k.iter_mut().enumerate() {
        let dy = (p / PATCH) as f64 - HALF as f64;
        let dx = (p % PATCH) as f64 - HALF as f64;
        *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    }
    k
}

fn broadcast_rows<T: Real>(row: &[f64], batch: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(batch * row.len());
    for _ in 0..batch {
        data.extend(row.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::new(vec![batch, row.len()], data)
}

/// Per-head masked softmax over the 48 neighbors, head average, optional
/// Gaussian modulation and renormalization. Returns `[B,49]` with a zero
/// center.
pub fn attention_weights_from_logits<T: Real>(
    g: &mut Graph<T>,
    heads: &[Var],
    sigma: Option<f64>,
) -> Result<Var, EngineError> {
    let batch = g.shape(heads[0])[0];
    let mut mask = [0.0; PATCH_PIXELS];
    mask[CENTER] = f64::NEG_INFINITY;
    let mask = g.constant(broadcast_rows(&mask, batch));
    let mut acc: Option<Var> = None;
    for &h in heads {
        let masked = g.add(h, mask)?;
        let sm = g.softmax(masked);
        acc = Some(match acc {
            None => sm,
            Some(a) => g.add(a, sm)?,
        });
    }
    let avg = g.scale(acc.expect("at least one head"), T::from_f64(1.0 / heads.len() as f64));
    let Some(sigma) = sigma else { return Ok(avg) };
    let kernel = g.constant(broadcast_rows(&gaussian_kernel(sigma), batch));
    let modulated = g.mul(avg, kernel)?;
    let total = g.sum_rows(modulated);
    let total = g.expand_cols(total, PATCH_PIXELS)?;
    g.div(modulated, total)
}

pub fn attention_weights<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    cfg: &ModelConfig,
    idx: Var,
    gaussian: bool,
    rng: Option<&mut R>,
) -> Result<Var, EngineError> {
    let heads = attention_logits(g, p, cfg, idx, rng)?;
    attention_weights_from_logits(g, &heads, gaussian.then_some(cfg.sigma))
}

/// Packs normalized patches into an NHWC tensor `[B,7,7,8]`.
pub fn pack_inputs<T: Real>(patches: &[&PatchSample]) -> Tensor<T> {
    let mut data = Vec::with_capacity(patches.len() * PATCH_PIXELS * N_CHANNELS);
    for p in patches {
        for px in 0..PATCH_PIXELS {
            for c in 0..N_CHANNELS {
                data.push(T::from_f64(p.channels[c * PATCH_PIXELS + px]));
            }
        }
    }
    Tensor::new(vec![patches.len(), PATCH, PATCH, N_CHANNELS], data)
}

/// Packs raw spectral index channels into `[B,7,7,3]`.
pub fn pack_indices<T: Real>(patches: &[&PatchSample]) -> Tensor<T> {
    let mut data = Vec::with_capacity(patches.len() * PATCH_PIXELS * N_INDEX_CHANNELS);
    for p in patches {
        for px in 0..PATCH_PIXELS {
            for c in 0..N_INDEX_CHANNELS {
                data.push(T::from_f64(p.channels[(CH_NDVI + c) * PATCH_PIXELS + px]));
            }
        }
    }
    Tensor::new(vec![patches.len(), PATCH, PATCH, N_INDEX_CHANNELS], data)
}

/// Trained (or freshly initialized) model with its normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct SpycerModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub channel_stats: ChannelStats,
    pub target: TargetStats,
}

impl SpycerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let params = init_params(&config, seed);
        Self { config, params, channel_stats: ChannelStats::identity(), target: TargetStats { mean: 0.0, std: 1.0 } }
    }

    /// Learnable parameters of the regressor (excludes attention heads).
    pub fn net_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(NET_PREFIX))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn normalize(&self, raw: &PatchSample) -> PatchSample {
        normalize_inputs(raw, &self.channel_stats)
    }

    /// Dense 7×7 NSAT prediction (°C) for raw patches, dropout off.
    pub fn predict(&self, raw: &[&PatchSample]) -> Result<Vec<[f64; PATCH_PIXELS]>> {
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        let norm: Vec<PatchSample> = raw.iter().map(|p| self.normalize(p)).collect();
        let refs: Vec<&PatchSample> = norm.iter().collect();
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &self.params);
        let x = g.constant(pack_inputs(&refs));
        let y = net_forward_celsius(&mut g, &p, &self.config, self.target, x)?;
        Ok(rows_to_maps(g.value(y).data()))
    }

    /// Attention weight map (dropout off) for raw patches.
    pub fn attention(&self, raw: &[&PatchSample], gaussian: bool) -> Result<Vec<[f64; PATCH_PIXELS]>> {
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &self.params);
        let idx = g.constant(pack_indices(raw));
        let w = attention_weights::<f32, ChaCha8Rng>(&mut g, &p, &self.config, idx, gaussian, None)?;
        Ok(rows_to_maps(g.value(w).data()))
    }
}

const META_CONFIG: &str = "meta.config";
const META_CHANNEL_MEAN: &str = "meta.channel_mean";
const META_CHANNEL_STD: &str = "meta.channel_std";
const META_TARGET: &str = "meta.target";

/// f64 stored as an f32 pair `(hi, lo)` with `hi + lo` exact to ~1e-14.
/// The two 32-bit halves of an f64 carried as raw f32 bit patterns, so
/// metadata survives the f32 payload exactly.
fn split64(v: f64) -> [f32; 2] {
    let b = v.to_bits();
    [f32::from_bits((b >> 32) as u32), f32::from_bits(b as u32)]
}

fn join64(p: &[f32]) -> f64 {
    f64::from_bits(((p[0].to_bits() as u64) << 32) | p[1].to_bits() as u64)
}

fn pairs(values: &[f64]) -> CheckpointEntry {
    CheckpointEntry { name: String::new(), dims: vec![values.len(), 2], data: values.iter().flat_map(|&v| split64(v)).collect() }
}

impl SpycerModel {
    /// Parameters plus the configuration and normalization state.
    pub fn to_checkpoint(&self) -> Vec<CheckpointEntry> {
        let c = &self.config;
        let meta = [
            (META_CONFIG, vec![c.channels as f64, c.blocks as f64, c.heads as f64, c.attn_hidden as f64, c.dropout, c.sigma]),
            (META_CHANNEL_MEAN, self.channel_stats.mean.to_vec()),
            (META_CHANNEL_STD, self.channel_stats.std.to_vec()),
            (META_TARGET, vec![self.target.mean, self.target.std]),
        ];
        let mut out: Vec<CheckpointEntry> =
            meta.into_iter().map(|(n, v)| CheckpointEntry { name: n.into(), ..pairs(&v) }).collect();
        for (name, t) in self.params.iter() {
            out.push(CheckpointEntry { name: name.into(), dims: t.shape().to_vec(), data: t.data().to_vec() });
        }
        out
    }

    pub fn from_checkpoint(entries: &[CheckpointEntry]) -> Result<Self> {
        let find = |name: &str, len: usize| -> Result<Vec<f64>> {
            let e = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if e.dims != [len, 2] {
                return Err(Error::Format(format!("checkpoint entry {name} has dims {:?}", e.dims)));
            }
            Ok(e.data.chunks(2).map(join64).collect())
        };
        let c = find(META_CONFIG, 6)?;
        let config = ModelConfig {
            channels: c[0] as usize,
            blocks: c[1] as usize,
            heads: c[2] as usize,
            attn_hidden: c[3] as usize,
            dropout: c[4],
            sigma: c[5],
        };
        config.validate()?;
        let mut stats = ChannelStats::identity();
        stats.mean.copy_from_slice(&find(META_CHANNEL_MEAN, N_CHANNELS)?);
        stats.std.copy_from_slice(&find(META_CHANNEL_STD, N_CHANNELS)?);
        let t = find(META_TARGET, 2)?;
        let mut params = init_params::<f32>(&config, 0);
        for (name, p) in params.iter_mut() {
            let e = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if e.dims != p.shape() {
                return Err(Error::Format(format!("parameter {name} has dims {:?}, expected {:?}", e.dims, p.shape())));
            }
            p.data_mut().copy_from_slice(&e.data);
        }
        Ok(Self { config, params, channel_stats: stats, target: TargetStats { mean: t[0], std: t[1] } })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.to_checkpoint())?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(&read_checkpoint(&bytes[..])?)
    }
}

pub(crate) fn rows_to_maps<T: Real>(data: &[T]) -> Vec<[f64; PATCH_PIXELS]> {
    data.chunks(PATCH_PIXELS)
        .map(|r| {
            let mut m = [0.0; PATCH_PIXELS];
            for (d, s) in m.iter_mut().zip(r) {
                *d = s.as_f64();
            }
            m
        })
        .collect()
}
