//! Semi-supervised patch loss and the training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Adam, AdamConfig, EngineError, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{collect_patches, ChannelStats, PatchSample, Scene, SensorNetwork, CENTER, PATCH_PIXELS};
use crate::model::{
    attention_weights, net_forward_celsius, pack_indices, pack_inputs, Bound, ModelConfig, SpycerModel,
    TargetStats, ATTN_PREFIX, NET_PREFIX,
};
use crate::physics::{
    residual_graph, time_derivative_graph, time_perturbed_inputs, PhysicsConfig, ResidualField,
    INTERIOR_CENTER, INTERIOR_PIXELS,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Center residual only; the attention-weighted neighbor sum is dropped.
    NoNeighborPhysics,
    /// Attention weights without the Gaussian distance modulation.
    NoGaussian,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoNeighborPhysics, Ablation::NoGaussian];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoNeighborPhysics => "cfg1",
            Ablation::NoGaussian => "cfg2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_model: f64,
    pub lr_attention: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 2000, lr_model: 3e-3, lr_attention: 5e-5, batch_size: 64, seed: 7, ablation: Ablation::Full }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        for (name, v) in [("lr_model", self.lr_model), ("lr_attention", self.lr_attention)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Plain evaluation of the patch loss. `weights` is the 7×7 attention map;
/// only its interior neighbors are used, renormalized to sum to one. All-zero
/// interior weights contribute no neighbor term.
pub fn patch_loss(pred: &[f64; PATCH_PIXELS], target: f64, weights: &[f64; PATCH_PIXELS], residual: &ResidualField, lambda: f64) -> f64 {
    let w = interior_neighbor_weights(weights);
    let sup = (pred[CENTER] - target).powi(2);
    let rc = residual.values[INTERIOR_CENTER];
    let neigh: f64 = w.iter().zip(&residual.values).map(|(w, r)| w * r * r).sum();
    sup + lambda * (rc * rc + neigh)
}

/// Interior neighbor weights renormalized to sum to one (zeros stay zeros).
pub fn interior_neighbor_weights(weights: &[f64; PATCH_PIXELS]) -> [f64; INTERIOR_PIXELS] {
    let mut w = crate::physics::interior(weights);
    w[INTERIOR_CENTER] = 0.0;
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        for v in &mut w {
            *v /= s;
        }
    }
    w
}

/// Scalar loss and its batch-mean components.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub sup: Var,
    pub phys: Var,
}

fn column_selector<T: Real>(rows: usize, col: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![rows, 1]);
    t.data_mut()[col] = T::one();
    t
}

/// Interior selection with the center column zeroed: `[49, 25]`.
fn neighbor_selector<T: Real>() -> Tensor<T> {
    let mut m = crate::physics::interior_matrix::<T>();
    let data = m.data_mut();
    for row in data.chunks_mut(INTERIOR_PIXELS) {
        row[INTERIOR_CENTER] = T::zero();
    }
    m
}

/// Builds the batch-mean patch loss on `g` for normalized patches. `rng`
/// drives attention dropout; `None` evaluates deterministically.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    model_cfg: &ModelConfig,
    target_stats: TargetStats,
    phys: &PhysicsConfig,
    ablation: Ablation,
    batch: &[&PatchSample],
    rng: Option<&mut R>,
) -> Result<LossVars, EngineError> {
    let b = batch.len();
    let x = pack_inputs::<T>(batch);
    let x5 = g.constant(time_perturbed_inputs(&x, phys.eps_t));
    let out = net_forward_celsius(g, p, model_cfg, target_stats, x5)?;
    let pred = g.slice_rows(out, 0, b)?;
    let days: Vec<f64> = batch.iter().map(|s| s.timestamp.day_of_year).collect();
    let dtdt = time_derivative_graph(g, out, &days, phys.eps_t)?;

    let mut lst = Vec::with_capacity(b * PATCH_PIXELS);
    let mut targets = Vec::with_capacity(b);
    for s in batch {
        lst.extend(s.lst_patch_raw.iter().map(|&v| T::from_f64(v)));
        targets.push(T::from_f64(s.target_nsat));
    }
    let lst = g.constant(Tensor::new(vec![b, PATCH_PIXELS], lst));
    let r = residual_graph(g, pred, dtdt, lst, phys)?;
    let r2 = g.square(r);

    let center_sel = g.constant(column_selector(PATCH_PIXELS, CENTER));
    let pc = g.matmul(pred, center_sel)?;
    let y = g.constant(Tensor::new(vec![b, 1], targets));
    let err = g.sub(pc, y)?;
    let sup = g.square(err);

    let rc_sel = g.constant(column_selector(INTERIOR_PIXELS, INTERIOR_CENTER));
    let mut phys_term = g.matmul(r2, rc_sel)?;
    if ablation != Ablation::NoNeighborPhysics {
        let idx = g.constant(pack_indices::<T>(batch));
        let w = attention_weights(g, p, model_cfg, idx, ablation == Ablation::Full, rng)?;
        let sel = g.constant(neighbor_selector());
        let wi = g.matmul(w, sel)?;
        let tot = g.sum_rows(wi);
        let tot = g.expand_cols(tot, INTERIOR_PIXELS)?;
        let wn = g.div(wi, tot)?;
        let wr = g.mul(wn, r2)?;
        let neigh = g.sum_rows(wr);
        phys_term = g.add(phys_term, neigh)?;
    }
    let weighted = g.scale(phys_term, T::from_f64(phys.lambda));
    let per_patch = g.add(sup, weighted)?;
    Ok(LossVars { total: g.mean(per_patch), sup: g.mean(sup), phys: g.mean(phys_term) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sup_loss: f64,
    pub phys_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "sup_loss", "phys_loss", "total"])?;
        for e in &self.epochs {
            wr.write_record([
                e.epoch.to_string(),
                format!("{:.9e}", e.sup_loss),
                format!("{:.9e}", e.phys_loss),
                format!("{:.9e}", e.total),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Gradients of every store entry, in store order.
pub fn store_grads<T: Real>(grads: &crate::engine::Gradients<T>, vars: &[Var], store: &ParamStore<T>) -> Vec<Vec<T>> {
    vars.iter().zip(store.iter()).map(|(&v, (_, t))| grads.get_or_zeros(v, t.len())).collect()
}

/// Trains from raw patches. Normalization statistics come from these
/// patches only.
pub fn train_on_patches(
    raw: &[PatchSample],
    model_cfg: &ModelConfig,
    phys: &PhysicsConfig,
    cfg: &TrainConfig,
) -> Result<(SpycerModel, TrainHistory)> {
    train_on_patches_with(raw, model_cfg, phys, cfg, |_| {})
}

/// As [`train_on_patches`], calling `on_epoch` after every epoch.
pub fn train_on_patches_with(
    raw: &[PatchSample],
    model_cfg: &ModelConfig,
    phys: &PhysicsConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(SpycerModel, TrainHistory)> {
    model_cfg.validate()?;
    phys.validate()?;
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::InsufficientData("no training patches".into()));
    }
    let mut model = SpycerModel::new(model_cfg.clone(), cfg.seed);
    model.channel_stats = ChannelStats::from_patches(raw);
    model.target = TargetStats::from_targets(&raw.iter().map(|p| p.target_nsat).collect::<Vec<_>>());
    let norm: Vec<PatchSample> = raw.iter().map(|p| model.normalize(p)).collect();

    let mut opt_net = Adam::new(AdamConfig::with_lr(cfg.lr_model), &model.params, |n| n.starts_with(NET_PREFIX));
    let mut opt_attn =
        Adam::new(AdamConfig::with_lr(cfg.lr_attention), &model.params, |n| n.starts_with(ATTN_PREFIX));
    // Separate streams so the batch order does not depend on how many
    // dropout draws an ablation makes.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_7a41);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd12a_0000_0bb5);
    let mut order: Vec<usize> = (0..norm.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut s_sup, mut s_phys, mut s_tot) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatchSample> = chunk.iter().map(|&i| &norm[i]).collect();
            let mut g = Graph::<f32>::new();
            let p = Bound::new(&mut g, &model.params);
            let lv = batch_loss(&mut g, &p, model_cfg, model.target, phys, cfg.ablation, &batch, Some(&mut dropout_rng))?;
            let total = g.value(lv.total).data()[0] as f64;
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            let n = chunk.len() as f64;
            s_sup += g.value(lv.sup).data()[0] as f64 * n;
            s_phys += g.value(lv.phys).data()[0] as f64 * n;
            s_tot += total * n;
            let grads = g.backward(lv.total)?;
            let grads = store_grads(&grads, p.vars(), &model.params);
            opt_net.step(&mut model.params, &grads);
            opt_attn.step(&mut model.params, &grads);
        }
        let n = norm.len() as f64;
        let rec = EpochRecord { epoch, sup_loss: s_sup / n, phys_loss: s_phys / n, total: s_tot / n };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    Ok((model, history))
}

/// Trains on every usable (sensor, date) patch of `sensors`.
pub fn train(
    scene: &Scene,
    sensors: &SensorNetwork,
    model_cfg: &ModelConfig,
    phys: &PhysicsConfig,
    cfg: &TrainConfig,
) -> Result<(SpycerModel, TrainHistory)> {
    let patches = collect_patches(scene, sensors)?;
    let mut ids: Vec<&str> = patches.iter().map(|(id, _)| id.as_str()).collect();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 sensors with usable patches, found {}",
            ids.len()
        )));
    }
    let raw: Vec<PatchSample> = patches.into_iter().map(|(_, p)| p).collect();
    train_on_patches(&raw, model_cfg, phys, cfg)
}

/// Inference-time residual maps for raw patches (dropout off).
pub fn patch_residuals(model: &SpycerModel, phys: &PhysicsConfig, raw: &[&PatchSample]) -> Result<Vec<ResidualField>> {
    let norm: Vec<PatchSample> = raw.iter().map(|p| model.normalize(p)).collect();
    let refs: Vec<&PatchSample> = norm.iter().collect();
    let (pred, dt) = crate::physics::predict_with_time_derivative(&model.params, &model.config, model.target, &refs, phys.eps_t)?;
    Ok(pred
        .iter()
        .zip(&dt)
        .zip(raw)
        .map(|((p, d), s)| crate::physics::adr_residual(p, &s.lst_patch_raw, &crate::physics::interior(d), phys))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{TimeStamp, CH_COS, CH_SIN, N_CHANNELS};

    fn residual(v: f64) -> ResidualField {
        ResidualField { values: [v; INTERIOR_PIXELS] }
    }

    #[test]
    fn patch_loss_examples() {
        let w = [1.0 / 48.0; PATCH_PIXELS];
        let mut pred = [0.0; PATCH_PIXELS];
        pred[CENTER] = 21.0;
        assert_eq!(patch_loss(&pred, 21.0, &w, &residual(0.0), 0.9), 0.0);
        assert_eq!(patch_loss(&pred, 19.0, &w, &residual(0.0), 0.9), 4.0);
        assert!((patch_loss(&pred, 21.0, &w, &residual(1.0), 0.9) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn zero_neighbor_weights_equal_center_only() {
        let mut r = residual(0.0);
        for (i, v) in r.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let pred = [20.0; PATCH_PIXELS];
        let zero = patch_loss(&pred, 19.5, &[0.0; PATCH_PIXELS], &r, 0.9);
        let expect = 0.25 + 0.9 * r.values[INTERIOR_CENTER].powi(2);
        assert!((zero - expect).abs() < 1e-12);
    }

    fn toy_patch(seed: u64) -> PatchSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts = TimeStamp::new(rng.random_range(0.0..365.0), "2025-06-01").unwrap();
        let (s, c) = ts.encode();
        let mut channels = vec![0.0; N_CHANNELS * PATCH_PIXELS];
        for (i, v) in channels.iter_mut().enumerate() {
            *v = match i / PATCH_PIXELS {
                CH_SIN => s,
                CH_COS => c,
                _ => rng.random_range(-1.0..1.0),
            };
        }
        let mut lst = [0.0; PATCH_PIXELS];
        for v in &mut lst {
            *v = rng.random_range(15.0..30.0);
        }
        PatchSample {
            channels,
            target_nsat: rng.random_range(15.0..25.0),
            center: (3, 3),
            timestamp: ts,
            lst_patch_raw: lst,
            grid_pos: (10, 10),
        }
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let cfg = ModelConfig { channels: 8, blocks: 1, ..Default::default() };
        let params = crate::model::init_params::<f64>(&cfg, 3);
        let phys = PhysicsConfig::default();
        let target = TargetStats { mean: 20.0, std: 2.0 };
        let patches: Vec<PatchSample> = (0..3).map(toy_patch).collect();
        let refs: Vec<&PatchSample> = patches.iter().collect();
        for ablation in Ablation::ALL {
            let mut g = Graph::<f64>::new();
            let p = Bound::new(&mut g, &params);
            let lv = batch_loss::<f64, ChaCha8Rng>(&mut g, &p, &cfg, target, &phys, ablation, &refs, None).unwrap();
            let got = g.value(lv.total).data()[0];

            let (pred, dt) =
                crate::physics::predict_with_time_derivative(&params, &cfg, target, &refs, phys.eps_t).unwrap();
            let mut g2 = Graph::<f64>::new();
            let p2 = Bound::new(&mut g2, &params);
            let idx = g2.constant(pack_indices::<f64>(&refs));
            let wv = attention_weights::<f64, ChaCha8Rng>(&mut g2, &p2, &cfg, idx, ablation == Ablation::Full, None)
                .unwrap();
            let w = crate::model::rows_to_maps(g2.value(wv).data());
            let mut expect = 0.0;
            for i in 0..3 {
                let r = crate::physics::adr_residual(&pred[i], &patches[i].lst_patch_raw, &crate::physics::interior(&dt[i]), &phys);
                let wi = if ablation == Ablation::NoNeighborPhysics { [0.0; PATCH_PIXELS] } else { w[i] };
                expect += patch_loss(&pred[i], patches[i].target_nsat, &wi, &r, phys.lambda);
            }
            expect /= 3.0;
            assert!((got - expect).abs() < 1e-9 * expect.abs().max(1.0), "{ablation:?}: {got} vs {expect}");
        }
    }

    #[test]
    fn lambda_zero_gives_attention_no_gradient() {
        let cfg = ModelConfig { channels: 8, blocks: 1, ..Default::default() };
        let params = crate::model::init_params::<f64>(&cfg, 5);
        let phys = PhysicsConfig { lambda: 0.0, ..Default::default() };
        let patches: Vec<PatchSample> = (0..2).map(toy_patch).collect();
        let refs: Vec<&PatchSample> = patches.iter().collect();
        let mut g = Graph::<f64>::new();
        let p = Bound::new(&mut g, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lv = batch_loss(&mut g, &p, &cfg, TargetStats { mean: 20.0, std: 2.0 }, &phys, Ablation::Full, &refs, Some(&mut rng))
            .unwrap();
        let grads = g.backward(lv.total).unwrap();
        let grads = store_grads(&grads, p.vars(), &params);
        for ((name, _), gr) in params.iter().zip(&grads) {
            if name.starts_with(ATTN_PREFIX) {
                assert!(gr.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
    }
}
