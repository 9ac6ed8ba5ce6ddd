//! Fully connected ReLU regressor on the shared engine.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureRow, N_FEATURES};
use crate::engine::{Adam, AdamConfig, EngineError, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::TargetStats;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], lr: 0.03, epochs: 2000, batch_size: 64, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layers: usize,
    pub params: ParamStore<f32>,
    pub target: TargetStats,
}

pub fn init_mlp<T: Real>(n_in: usize, hidden: &[usize], seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut dims = vec![n_in];
    dims.extend_from_slice(hidden);
    dims.push(1);
    for (l, w) in dims.windows(2).enumerate() {
        let std = (2.0 / w[0] as f64).sqrt();
        let data: Vec<f64> = (0..w[0] * w[1])
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        store.insert(format!("mlp.l{l}.w"), Tensor::from_f64(vec![w[0], w[1]], &data));
        store.insert(format!("mlp.l{l}.b"), Tensor::zeros(vec![w[1]]));
    }
    store
}

/// `x [B, n_in]` → `[B, 1]` in normalized target units.
pub fn mlp_forward<T: Real>(g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var, EngineError> {
    let layers = vars.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let z = g.matmul(h, vars[2 * l])?;
        let z = g.add_row_bias(z, vars[2 * l + 1])?;
        h = if l + 1 < layers { g.relu(z) } else { z };
    }
    Ok(h)
}

fn pack<T: Real>(rows: &[[f64; N_FEATURES]]) -> Tensor<T> {
    Tensor::from_f64(vec![rows.len(), N_FEATURES], &rows.iter().flatten().copied().collect::<Vec<_>>())
}

impl MlpModel {
    pub fn predict(&self, rows: &[[f64; N_FEATURES]]) -> Vec<f64> {
        if rows.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::<f32>::new();
        let vars = self.params.bind(&mut g);
        let x = g.constant(pack(rows));
        let y = mlp_forward(&mut g, &vars, x).expect("shapes fixed at fit time");
        g.value(y).data().iter().map(|&v| v as f64 * self.target.std + self.target.mean).collect()
    }
}

pub fn fit_mlp(rows: &[FeatureRow], cfg: &MlpConfig) -> Result<MlpModel> {
    if rows.len() < 5 {
        return Err(Error::InsufficientData(format!("MLP needs 5 rows, got {}", rows.len())));
    }
    let target = TargetStats::from_targets(&rows.iter().map(|r| r.target).collect::<Vec<_>>());
    let mut params = init_mlp::<f32>(N_FEATURES, &cfg.hidden, cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &params, |_| true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00ff_1e55);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xs: Vec<[f64; N_FEATURES]> = chunk.iter().map(|&i| rows[i].features).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| (rows[i].target - target.mean) / target.std).collect();
            let mut g = Graph::<f32>::new();
            let vars = params.bind(&mut g);
            let x = g.constant(pack(&xs));
            let y = g.constant(Tensor::from_f64(vec![ys.len(), 1], &ys));
            let out = mlp_forward(&mut g, &vars, x)?;
            let d = g.sub(out, y)?;
            let sq = g.square(d);
            let loss = g.mean(sq);
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::Numeric(format!("MLP loss diverged at epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Vec<f32>> =
                vars.iter().zip(params.iter()).map(|(&v, (_, t))| grads.get_or_zeros(v, t.len())).collect();
            opt.step(&mut params, &grads);
        }
    }
    Ok(MlpModel { layers: cfg.hidden.len() + 1, params, target })
}
