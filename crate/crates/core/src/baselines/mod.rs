//! Pixel-wise reference estimators and IDW interpolation.

pub mod idw;
pub mod lr;
pub mod mlp;
pub mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ChannelStats, GridMeta, PatchSample, CENTER, CH_COS, CH_LST, CH_NDBI, CH_NDVI, CH_NDWI, CH_SIN};

pub use idw::{idw_map, idw_value};
pub use lr::{fit_lr, LinearModel};
pub use mlp::{fit_mlp, MlpConfig, MlpModel};
pub use tree::{fit_forest, EnsembleMode, ForestConfig, Tree, TreeEnsemble};

/// Center LST, easting, northing, sin, cos, NDVI, NDWI, NDBI.
pub const N_FEATURES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub features: [f64; N_FEATURES],
    pub target: f64,
}

/// Maps raw patches to feature rows: LST and indices z-scored with training
/// statistics, coordinates scaled to [-1, 1] over the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScaler {
    pub stats: ChannelStats,
    pub meta: GridMeta,
}

impl FeatureScaler {
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a PatchSample>, meta: &GridMeta) -> Self {
        Self { stats: ChannelStats::from_patches(train), meta: meta.clone() }
    }

    pub fn row(&self, p: &PatchSample) -> FeatureRow {
        let z = |c: usize| (p.channel(c)[CENTER] - self.stats.mean[c]) / self.stats.std[c];
        let (r, c) = p.grid_pos;
        let sx = 2.0 * c as f64 / (self.meta.width - 1) as f64 - 1.0;
        let sy = 2.0 * r as f64 / (self.meta.height - 1) as f64 - 1.0;
        FeatureRow {
            features: [z(CH_LST), sx, sy, p.channel(CH_SIN)[CENTER], p.channel(CH_COS)[CENTER], z(CH_NDVI), z(CH_NDWI), z(CH_NDBI)],
            target: p.target_nsat,
        }
    }

    pub fn rows<'a>(&self, patches: impl IntoIterator<Item = &'a PatchSample>) -> Vec<FeatureRow> {
        patches.into_iter().map(|p| self.row(p)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Lr,
    Rf,
    Gb,
    Mlp,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::Lr, BaselineKind::Rf, BaselineKind::Gb, BaselineKind::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Lr => "lr",
            BaselineKind::Rf => "rf",
            BaselineKind::Gb => "gb",
            BaselineKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FittedBaseline {
    Lr(LinearModel),
    Forest(TreeEnsemble),
    Mlp(MlpModel),
}

impl FittedBaseline {
    pub fn predict_row(&self, x: &[f64; N_FEATURES]) -> f64 {
        match self {
            FittedBaseline::Lr(m) => m.predict(x),
            FittedBaseline::Forest(m) => m.predict(x),
            FittedBaseline::Mlp(m) => m.predict(&[*x])[0],
        }
    }

    pub fn predict(&self, rows: &[[f64; N_FEATURES]]) -> Vec<f64> {
        match self {
            FittedBaseline::Mlp(m) => m.predict(rows),
            _ => rows.iter().map(|x| self.predict_row(x)).collect(),
        }
    }
}

pub fn fit_baseline(kind: BaselineKind, rows: &[FeatureRow], seed: u64) -> Result<FittedBaseline> {
    Ok(match kind {
        BaselineKind::Lr => FittedBaseline::Lr(fit_lr(rows)?),
        BaselineKind::Rf => FittedBaseline::Forest(fit_forest(rows, &ForestConfig::random_forest(seed))?),
        BaselineKind::Gb => FittedBaseline::Forest(fit_forest(rows, &ForestConfig::gradient_boosting())?),
        BaselineKind::Mlp => FittedBaseline::Mlp(fit_mlp(rows, &MlpConfig { seed, ..Default::default() })?),
    })
}
