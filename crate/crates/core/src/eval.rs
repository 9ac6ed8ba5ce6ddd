//! Monte Carlo cross-validation, metrics and exported artifacts.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_baseline, idw_map, idw_value, BaselineKind, FeatureRow, FeatureScaler, FittedBaseline, N_FEATURES};
use crate::error::{Error, Result};
use crate::grid::{
    collect_patches, extract_patch_at, month_of, GridMeta, PatchSample, Scene, SensorNetwork, SpectralIndex, VariableGrid, CENTER,
    HALF, PATCH_PIXELS,
};
use crate::model::{ModelConfig, SpycerModel};
use crate::physics::{field_residual, predict_with_time_derivative, PhysicsConfig};
use crate::train::{train_on_patches, Ablation, TrainConfig};

/// Distance exponent of the IDW method.
pub const IDW_POWER: f64 = 2.0;

/// `ceil(0.2·N)`.
pub fn test_count(n: usize) -> usize {
    n.div_ceil(5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub master_seed: u64,
    pub folds: Vec<Fold>,
}

/// Independent uniform 80/20 splits, reproducible from `seed`.
pub fn make_folds(ids: &[String], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if ids.len() < 5 {
        return Err(Error::InsufficientSensors(ids.len()));
    }
    let k = test_count(ids.len());
    let mut folds = Vec::with_capacity(n_folds);
    for index in 0..n_folds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        let mut shuffled = ids.to_vec();
        shuffled.shuffle(&mut rng);
        let mut test = shuffled[..k].to_vec();
        let mut train = shuffled[k..].to_vec();
        test.sort();
        train.sort();
        folds.push(Fold { index, train, test });
    }
    Ok(FoldPlan { master_seed: seed, folds })
}

fn check_lengths(p: &[f64], t: &[f64]) -> Result<()> {
    if p.is_empty() || p.len() != t.len() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds, truths)?;
    Ok((preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len() as f64).sqrt())
}

pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds, truths)?;
    Ok(preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Spycer(AblationKey),
    Baseline(BaselineKey),
    /// Reads the held-out readings; plumbing check.
    Oracle,
    /// Mean of the training readings.
    Mean,
    /// Inverse-distance weighting of the training readings on the same date.
    Idw,
}

/// Orderable mirror of [`Ablation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationKey {
    Full,
    Cfg1,
    Cfg2,
}

/// Orderable mirror of [`BaselineKind`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineKey {
    Lr,
    Rf,
    Gb,
    Mlp,
}

impl Method {
    pub const NAMES: [&'static str; 10] =
        ["spycer", "spycer_cfg1", "spycer_cfg2", "lr", "rf", "gb", "mlp", "idw", "oracle", "mean"];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "spycer" => Method::Spycer(AblationKey::Full),
            "spycer_cfg1" => Method::Spycer(AblationKey::Cfg1),
            "spycer_cfg2" => Method::Spycer(AblationKey::Cfg2),
            "lr" => Method::Baseline(BaselineKey::Lr),
            "rf" => Method::Baseline(BaselineKey::Rf),
            "gb" => Method::Baseline(BaselineKey::Gb),
            "mlp" => Method::Baseline(BaselineKey::Mlp),
            "idw" => Method::Idw,
            "oracle" => Method::Oracle,
            "mean" => Method::Mean,
            _ => return Err(Error::Config(format!("unknown method {s:?}; expected one of {}", Self::NAMES.join(", ")))),
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').map(|m| Self::parse(m.trim())).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Spycer(AblationKey::Full) => "spycer",
            Method::Spycer(AblationKey::Cfg1) => "spycer_cfg1",
            Method::Spycer(AblationKey::Cfg2) => "spycer_cfg2",
            Method::Baseline(BaselineKey::Lr) => "lr",
            Method::Baseline(BaselineKey::Rf) => "rf",
            Method::Baseline(BaselineKey::Gb) => "gb",
            Method::Baseline(BaselineKey::Mlp) => "mlp",
            Method::Idw => "idw",
            Method::Oracle => "oracle",
            Method::Mean => "mean",
        }
    }

    pub fn ablation(self) -> Option<Ablation> {
        match self {
            Method::Spycer(AblationKey::Full) => Some(Ablation::Full),
            Method::Spycer(AblationKey::Cfg1) => Some(Ablation::NoNeighborPhysics),
            Method::Spycer(AblationKey::Cfg2) => Some(Ablation::NoGaussian),
            _ => None,
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::Baseline(BaselineKey::Lr) => Some(BaselineKind::Lr),
            Method::Baseline(BaselineKey::Rf) => Some(BaselineKind::Rf),
            Method::Baseline(BaselineKey::Gb) => Some(BaselineKind::Gb),
            Method::Baseline(BaselineKey::Mlp) => Some(BaselineKind::Mlp),
            _ => None,
        }
    }
}

impl From<Ablation> for Method {
    fn from(a: Ablation) -> Self {
        Method::Spycer(match a {
            Ablation::Full => AblationKey::Full,
            Ablation::NoNeighborPhysics => AblationKey::Cfg1,
            Ablation::NoGaussian => AblationKey::Cfg2,
        })
    }
}

/// Everything a cross-validation run needs besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub physics: PhysicsConfig,
    pub train: TrainConfig,
    /// Overrides the MLP baseline's epoch count when set.
    pub mlp_epochs: Option<usize>,
}

/// A fitted estimator that can predict at patches and over whole grids.
#[derive(Clone, Debug)]
pub enum Fitted {
    Spycer(Box<SpycerModel>),
    Baseline(FeatureScaler, FittedBaseline),
    Oracle,
    Mean(f64),
    /// Training readings `(x, y, value)` per date.
    Idw(GridMeta, BTreeMap<String, Vec<(f64, f64, f64)>>),
}

impl Fitted {
    /// Predictions for raw patches, each at its center pixel.
    pub fn predict(&self, patches: &[&PatchSample]) -> Result<Vec<f64>> {
        Ok(match self {
            Fitted::Spycer(m) => {
                let mut out = Vec::with_capacity(patches.len());
                for chunk in patches.chunks(256) {
                    out.extend(m.predict(chunk)?.iter().map(|p| p[CENTER]));
                }
                out
            }
            Fitted::Baseline(scaler, b) => {
                let rows: Vec<[f64; N_FEATURES]> = patches.iter().map(|p| scaler.row(p).features).collect();
                b.predict(&rows)
            }
            Fitted::Oracle => patches.iter().map(|p| p.target_nsat).collect(),
            Fitted::Mean(m) => vec![*m; patches.len()],
            Fitted::Idw(meta, by_date) => patches
                .iter()
                .map(|p| {
                    let pts = by_date.get(&p.timestamp.date_label).map(Vec::as_slice).unwrap_or(&[]);
                    let (x, y) = meta.pixel_center(p.grid_pos.0, p.grid_pos.1);
                    idw_value(x, y, pts, IDW_POWER)
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Fits `method` on the raw training patches.
pub fn fit_method(method: Method, train: &[PatchSample], scene: &Scene, cfg: &ExperimentConfig, seed: u64) -> Result<Fitted> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training patches".into()));
    }
    if let Some(ablation) = method.ablation() {
        let tc = TrainConfig { seed, ablation, ..cfg.train.clone() };
        let (model, _) = train_on_patches(train, &cfg.model, &cfg.physics, &tc)?;
        return Ok(Fitted::Spycer(Box::new(model)));
    }
    if let Some(kind) = method.baseline() {
        let scaler = FeatureScaler::fit(train, &scene.meta);
        let rows: Vec<FeatureRow> = scaler.rows(train);
        let fitted = match (kind, cfg.mlp_epochs) {
            (BaselineKind::Mlp, Some(epochs)) => FittedBaseline::Mlp(crate::baselines::fit_mlp(
                &rows,
                &crate::baselines::MlpConfig { seed, epochs, ..Default::default() },
            )?),
            _ => fit_baseline(kind, &rows, seed)?,
        };
        return Ok(Fitted::Baseline(scaler, fitted));
    }
    Ok(match method {
        Method::Oracle => Fitted::Oracle,
        Method::Idw => {
            let mut by_date: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
            for p in train {
                let (x, y) = scene.meta.pixel_center(p.grid_pos.0, p.grid_pos.1);
                by_date.entry(p.timestamp.date_label.clone()).or_default().push((x, y, p.target_nsat));
            }
            Fitted::Idw(scene.meta.clone(), by_date)
        }
        _ => Fitted::Mean(train.iter().map(|p| p.target_nsat).sum::<f64>() / train.len() as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub fold: usize,
    pub method: String,
    pub sensor: String,
    pub date: String,
    pub month: String,
    pub pred: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub method: String,
    /// Calendar month `YYYY-MM`, or `all`.
    pub month: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub n_folds: usize,
    pub n_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub cells: Vec<MetricCell>,
}

/// Population mean and standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

impl MetricsTable {
    /// Per fold RMSE/MAE per (method, month) and over all months, then mean
    /// and standard deviation over folds.
    pub fn from_records(records: &[PredictionRecord]) -> Result<Self> {
        type Key = (String, String);
        let mut per: BTreeMap<Key, BTreeMap<usize, (Vec<f64>, Vec<f64>)>> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for r in records {
            if !order.contains(&r.method) {
                order.push(r.method.clone());
            }
            for month in [r.month.clone(), "all".to_string()] {
                let e = per.entry((r.method.clone(), month)).or_default().entry(r.fold).or_default();
                e.0.push(r.pred);
                e.1.push(r.truth);
            }
        }
        let mut cells = Vec::new();
        for method in &order {
            for ((m, month), folds) in per.iter().filter(|((m, _), _)| m == method) {
                let mut rm = Vec::new();
                let mut ma = Vec::new();
                let mut n = 0;
                for (p, t) in folds.values() {
                    rm.push(rmse(p, t)?);
                    ma.push(mae(p, t)?);
                    n += p.len();
                }
                let (rmse_mean, rmse_std) = mean_std(&rm);
                let (mae_mean, mae_std) = mean_std(&ma);
                cells.push(MetricCell {
                    method: m.clone(),
                    month: month.clone(),
                    rmse_mean,
                    rmse_std,
                    mae_mean,
                    mae_std,
                    n_folds: folds.len(),
                    n_samples: n,
                });
            }
        }
        Ok(Self { cells })
    }

    pub fn get(&self, method: &str, month: &str) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.method == method && c.month == month)
    }

    pub fn overall(&self, method: &str) -> Option<&MetricCell> {
        self.get(method, "all")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "month", "rmse_mean", "rmse_std", "mae_mean", "mae_std", "n_folds", "n_samples"])?;
        for c in &self.cells {
            wr.write_record([
                c.method.clone(),
                c.month.clone(),
                format!("{:.6}", c.rmse_mean),
                format!("{:.6}", c.rmse_std),
                format!("{:.6}", c.mae_mean),
                format!("{:.6}", c.mae_std),
                c.n_folds.to_string(),
                c.n_samples.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn write_records_csv<W: Write>(w: W, records: &[PredictionRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["fold", "method", "sensor", "date", "month", "pred", "truth"])?;
    for r in records {
        wr.write_record([
            r.fold.to_string(),
            r.method.clone(),
            r.sensor.clone(),
            r.date.clone(),
            r.month.clone(),
            format!("{:.6}", r.pred),
            format!("{:.6}", r.truth),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub table: MetricsTable,
    pub records: Vec<PredictionRecord>,
}

/// Per-run seed of fold `index`.
pub fn fold_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Trains every method on each fold's training sensors (all dates) and
/// scores the held-out sensors. (fold, method) units run on the current
/// rayon pool; results are joined in fold and method order.
pub fn run_experiment(
    scene: &Scene,
    sensors: &SensorNetwork,
    methods: &[Method],
    plan: &FoldPlan,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    let patches = collect_patches(scene, sensors)?;
    let units: Vec<(usize, Method)> =
        (0..plan.folds.len()).flat_map(|f| methods.iter().map(move |&m| (f, m))).collect();
    let results: Vec<Result<Vec<PredictionRecord>>> = units
        .par_iter()
        .map(|&(f, method)| {
            let fold = &plan.folds[f];
            let train: Vec<PatchSample> =
                patches.iter().filter(|(id, _)| fold.train.contains(id)).map(|(_, p)| p.clone()).collect();
            let test: Vec<&(String, PatchSample)> = patches.iter().filter(|(id, _)| fold.test.contains(id)).collect();
            let train_ids = train.len();
            if train_ids == 0 || test.is_empty() {
                return Err(Error::InsufficientData(format!("fold {f} has no usable train or test patches")));
            }
            let fitted = fit_method(method, &train, scene, cfg, fold_seed(cfg.train.seed, fold.index))?;
            let refs: Vec<&PatchSample> = test.iter().map(|(_, p)| p).collect();
            let preds = fitted.predict(&refs)?;
            Ok(test
                .iter()
                .zip(preds)
                .map(|((id, p), pred)| PredictionRecord {
                    fold: fold.index,
                    method: method.name().to_string(),
                    sensor: id.clone(),
                    date: p.timestamp.date_label.clone(),
                    month: month_of(&p.timestamp.date_label),
                    pred,
                    truth: p.target_nsat,
                })
                .collect())
        })
        .collect();
    let mut records = Vec::new();
    for r in results {
        records.extend(r?);
    }
    if records.iter().any(|r| !r.pred.is_finite()) {
        return Err(Error::Numeric("non-finite prediction".into()));
    }
    let table = MetricsTable::from_records(&records)?;
    Ok(ExperimentResult { table, records })
}

/// Full-grid NSAT map at `date`. Patch and pixel predictors cover every
/// margin-valid pixel; the 3-pixel border is nodata.
pub fn export_map(fitted: &Fitted, scene: &Scene, date: &str) -> Result<VariableGrid> {
    let meta = &scene.meta;
    if let Fitted::Oracle = fitted {
        return scene
            .nsat_truth
            .get(date)
            .cloned()
            .ok_or_else(|| Error::MissingVariable(format!("nsat_truth_{date}")));
    }
    let ts = scene.date(date).ok_or_else(|| Error::MissingVariable(format!("lst_{date}")))?.clone();
    scene.lst(date)?;
    for k in SpectralIndex::ALL {
        scene.index(k, &ts.month())?;
    }
    let mut values = vec![f32::NAN; meta.len()];
    let mut mask = vec![true; meta.len()];
    let rows: Vec<usize> = (HALF..meta.height - HALF).collect();
    let per_row: Vec<Result<Vec<(usize, f64)>>> = rows
        .par_iter()
        .map(|&r| {
            let mut patches = Vec::new();
            let mut cols = Vec::new();
            for c in HALF..meta.width - HALF {
                if let Some(p) = extract_patch_at(scene, r, c, &ts, f64::NAN)? {
                    patches.push(p);
                    cols.push(c);
                }
            }
            let refs: Vec<&PatchSample> = patches.iter().collect();
            let preds = fitted.predict(&refs)?;
            Ok(cols.into_iter().zip(preds).map(|(c, v)| (r * meta.width + c, v)).collect())
        })
        .collect();
    for row in per_row {
        for (i, v) in row? {
            values[i] = v as f32;
            mask[i] = false;
        }
    }
    VariableGrid::with_mask(meta.clone(), values, mask)
}

/// Physics residual of the model's own map at `date`. Each margin-valid
/// pixel contributes its center prediction and time derivative; the
/// Laplacian is taken over the predicted field, so pixels whose stencil
/// leaves it are nodata.
pub fn residual_map(model: &SpycerModel, phys: &PhysicsConfig, scene: &Scene, date: &str) -> Result<VariableGrid> {
    let meta = &scene.meta;
    let ts = scene.date(date).ok_or_else(|| Error::MissingVariable(format!("lst_{date}")))?.clone();
    let lst = scene.lst(date)?;
    let params = model.params.cast::<f64>();
    let rows: Vec<usize> = (HALF..meta.height - HALF).collect();
    let per_row: Vec<Result<Vec<(usize, f64, f64)>>> = rows
        .par_iter()
        .map(|&r| {
            let mut norm = Vec::new();
            let mut cols = Vec::new();
            for c in HALF..meta.width - HALF {
                if let Some(p) = extract_patch_at(scene, r, c, &ts, f64::NAN)? {
                    norm.push(model.normalize(&p));
                    cols.push(c);
                }
            }
            let refs: Vec<&PatchSample> = norm.iter().collect();
            let mut out = Vec::with_capacity(cols.len());
            for (chunk, cchunk) in refs.chunks(128).zip(cols.chunks(128)) {
                let (pred, dt) = predict_with_time_derivative(&params, &model.config, model.target, chunk, phys.eps_t)?;
                for ((p, d), &c) in pred.iter().zip(&dt).zip(cchunk) {
                    out.push((r * meta.width + c, p[CENTER], d[CENTER]));
                }
            }
            Ok(out)
        })
        .collect();
    let n = meta.len();
    let (mut t, mut dtdt, mut have) = (vec![0.0; n], vec![0.0; n], vec![false; n]);
    for row in per_row {
        for (i, p, d) in row? {
            t[i] = p;
            dtdt[i] = d;
            have[i] = true;
        }
    }
    let ts_field: Vec<f64> = lst.values.iter().map(|&v| v as f64).collect();
    let res = field_residual(&t, &dtdt, &ts_field, meta.width, meta.height, phys);
    let mut values = vec![f32::NAN; n];
    let mut mask = vec![true; n];
    let w = meta.width;
    for i in 1..meta.height - 1 {
        for j in 1..w - 1 {
            let p = i * w + j;
            if have[p] && have[p - 1] && have[p + 1] && have[p - w] && have[p + w] && !lst.nodata_mask[p] {
                values[p] = res[(i - 1) * (w - 2) + j - 1] as f32;
                mask[p] = false;
            }
        }
    }
    VariableGrid::with_mask(meta.clone(), values, mask)
}

/// IDW map of the readings at `date` from `sensors`.
pub fn idw_export(scene: &Scene, sensors: &SensorNetwork, date: &str, power: f64) -> Result<VariableGrid> {
    let pts: Vec<(f64, f64, f64)> = sensors
        .sensors
        .iter()
        .filter_map(|s| s.readings.get(date).map(|&v| (s.x_utm, s.y_utm, v)))
        .collect();
    idw_map(&pts, &scene.meta, power)
}

/// Per-date prediction against the reading (and the synthetic truth when
/// present) for the listed sensors, as CSV.
pub fn temporal_curves<W: Write>(fitted: &Fitted, scene: &Scene, sensors: &SensorNetwork, ids: &[String], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["sensor", "date", "day_of_year", "pred", "reading", "truth"])?;
    for id in ids {
        let s = sensors.get(id).ok_or_else(|| Error::Config(format!("unknown sensor {id}")))?;
        for ts in &scene.dates {
            let Some(&reading) = s.readings.get(&ts.date_label) else { continue };
            let Some(p) = extract_patch_at(scene, s.pixel_row, s.pixel_col, ts, reading)? else { continue };
            let pred = fitted.predict(&[&p])?[0];
            let truth = scene
                .nsat_truth
                .get(&ts.date_label)
                .map(|g| format!("{:.6}", g.get(s.pixel_row, s.pixel_col)))
                .unwrap_or_default();
            wr.write_record([
                id.clone(),
                ts.date_label.clone(),
                format!("{}", ts.day_of_year),
                format!("{pred:.6}"),
                format!("{reading:.6}"),
                truth,
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// A 7×7 map as seven CSV rows.
pub fn write_patch_csv<W: Write>(map: &[f64; PATCH_PIXELS], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in map.chunks(crate::grid::PATCH) {
        wr.write_record(row.iter().map(|v| format!("{v:.9}")))?;
    }
    wr.flush()?;
    Ok(())
}
