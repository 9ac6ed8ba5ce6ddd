//! Synthetic scenes: land cover, spectral indices, LST forcing and the
//! explicit-Euler diffusion–reaction integration that produces the NSAT
//! ground truth.
//!
//! All class means, offsets and the seasonal curve are implementation
//! constants of the synthetic benchmark.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridMeta, Scene, Sensor, SensorNetwork, SpectralIndex, TimeStamp, VariableGrid, HALF};

pub const PROVENANCE_FILE: &str = "sim_provenance.json";
/// Smallest sub-step the integrator accepts, days.
pub const MIN_DT: f64 = 1e-6;
/// Minimum distance between two sampled sensors, pixels.
pub const MIN_SENSOR_SEPARATION: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandClass {
    Vegetation,
    Water,
    BuiltUp,
    Bare,
}

impl LandClass {
    pub const ALL: [LandClass; 4] = [LandClass::Vegetation, LandClass::Water, LandClass::BuiltUp, LandClass::Bare];

    /// Mean (NDVI, NDWI, NDBI).
    pub fn index_means(self) -> [f64; 3] {
        match self {
            LandClass::Vegetation => [0.7, -0.3, -0.4],
            LandClass::Water => [-0.1, 0.6, -0.5],
            LandClass::BuiltUp => [0.1, -0.4, 0.5],
            LandClass::Bare => [0.2, -0.2, 0.1],
        }
    }

    /// LST offset from the seasonal curve, °C.
    pub fn lst_offset(self) -> f64 {
        match self {
            LandClass::Vegetation => -2.0,
            LandClass::Water => -4.0,
            LandClass::BuiltUp => 4.0,
            LandClass::Bare => 2.0,
        }
    }
}

const INDEX_NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub grid: GridMeta,
    pub n_dates: usize,
    pub date_spacing_days: f64,
    /// Day of year of the first acquisition.
    pub start_doy: f64,
    pub year: i32,
    pub k_true: f64,
    pub alpha_true: f64,
    /// Eastward wind, m/day.
    pub wind_u: f64,
    /// Northward wind, m/day.
    pub wind_v: f64,
    pub noise_lst_std: f64,
    pub noise_sensor_std: f64,
    pub n_sensors: usize,
    pub seed: u64,
    /// Initial integrator sub-step, days; halved until stable.
    pub dt: f64,
    /// Integration time before the first acquisition, days.
    pub spinup_days: f64,
    /// Area fractions of vegetation, water, built-up, bare.
    pub class_fractions: [f64; 4],
    /// Amplitude of the smooth LST anomaly field, °C.
    pub lst_field_amplitude: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid: GridMeta::new(128, 128, 10.0, 500000.0, 4800000.0).expect("valid default grid"),
            n_dates: 12,
            date_spacing_days: 15.0,
            start_doy: 91.0,
            year: 2025,
            k_true: 0.8,
            alpha_true: 0.5,
            wind_u: 0.0,
            wind_v: 0.0,
            noise_lst_std: 1.5,
            noise_sensor_std: 0.3,
            n_sensors: 33,
            seed: 7,
            dt: 0.05,
            spinup_days: 15.0,
            class_fractions: [0.35, 0.1, 0.3, 0.25],
            lst_field_amplitude: 1.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_dates == 0 {
            return Err(Error::Config("sim.n_dates must be at least 1".into()));
        }
        if self.n_sensors < 5 {
            return Err(Error::Config(format!("sim.n_sensors must be at least 5, got {}", self.n_sensors)));
        }
        if !(self.date_spacing_days > 0.0) {
            return Err(Error::Config("sim.date_spacing_days must be positive".into()));
        }
        let last = self.start_doy + self.date_spacing_days * (self.n_dates - 1) as f64;
        if self.start_doy < 0.0 || last >= 365.0 {
            return Err(Error::Config(format!("acquisition days {}..{last} leave the year", self.start_doy)));
        }
        for (name, v) in [("k_true", self.k_true), ("alpha_true", self.alpha_true), ("dt", self.dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sim.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("noise_lst_std", self.noise_lst_std),
            ("noise_sensor_std", self.noise_sensor_std),
            ("spinup_days", self.spinup_days),
            ("lst_field_amplitude", self.lst_field_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sim.{name} must be non-negative, got {v}")));
            }
        }
        let total: f64 = self.class_fractions.iter().sum();
        if self.class_fractions.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("sim.class_fractions must be non-negative and sum to 1".into()));
        }
        Ok(())
    }

    /// Diffusivity in m²/day.
    pub fn k_eff(&self) -> f64 {
        self.k_true * self.grid.resolution_m * self.grid.resolution_m
    }

    pub fn dates(&self) -> Result<Vec<TimeStamp>> {
        (0..self.n_dates)
            .map(|k| TimeStamp::from_day(self.year, self.start_doy + k as f64 * self.date_spacing_days))
            .collect()
    }
}

/// Independent deterministic stream per simulator component.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Sum of random cosine modes with wavelengths of 8 to 64 pixels,
/// scaled to unit standard deviation.
pub fn smooth_field(width: usize, height: usize, rng: &mut impl Rng) -> Vec<f64> {
    const MODES: usize = 16;
    let mut f = vec![0.0; width * height];
    for _ in 0..MODES {
        let wavelength = rng.random_range(8.0..64.0);
        let theta = rng.random_range(0.0..2.0 * PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        let (kx, ky) = (2.0 * PI / wavelength * theta.cos(), 2.0 * PI / wavelength * theta.sin());
        for i in 0..height {
            for j in 0..width {
                f[i * width + j] += (kx * j as f64 + ky * i as f64 + phase).cos();
            }
        }
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - mean) / std);
    f
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandCover {
    pub classes: Vec<LandClass>,
    pub ndvi: VariableGrid,
    pub ndwi: VariableGrid,
    pub ndbi: VariableGrid,
}

/// Smooth random field split at its quantiles into the four classes, then
/// per-class index means plus noise, clamped to [-1, 1].
pub fn gen_landcover(cfg: &SimConfig) -> Result<LandCover> {
    let meta = &cfg.grid;
    let mut rng = stream(cfg.seed, 1);
    let field = smooth_field(meta.width, meta.height, &mut rng);
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&a, &b| field[a].total_cmp(&field[b]).then(a.cmp(&b)));
    let mut classes = vec![LandClass::Bare; field.len()];
    let mut start = 0usize;
    let mut cum = 0.0;
    for (k, class) in LandClass::ALL.into_iter().enumerate() {
        cum += cfg.class_fractions[k];
        let end = if k == 3 { field.len() } else { ((cum * field.len() as f64).round() as usize).min(field.len()) };
        for &p in &order[start..end.max(start)] {
            classes[p] = class;
        }
        start = end.max(start);
    }
    let noise = Normal::new(0.0, INDEX_NOISE_STD).expect("valid std");
    let mut grids = [Vec::new(), Vec::new(), Vec::new()];
    for c in &classes {
        let means = c.index_means();
        for (g, m) in grids.iter_mut().zip(means) {
            g.push((m + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32);
        }
    }
    let [ndvi, ndwi, ndbi] = grids;
    Ok(LandCover {
        classes,
        ndvi: VariableGrid::new(meta.clone(), ndvi)?,
        ndwi: VariableGrid::new(meta.clone(), ndwi)?,
        ndbi: VariableGrid::new(meta.clone(), ndbi)?,
    })
}

/// `15 + 10·sin(2π(d − 80)/365)` °C.
pub fn seasonal_lst(day_of_year: f64) -> f64 {
    15.0 + 10.0 * (2.0 * PI * (day_of_year - 80.0) / 365.0).sin()
}

/// LST per date: seasonal curve + class offset + smooth anomaly + noise.
pub fn gen_lst_forcing(classes: &[LandClass], dates: &[TimeStamp], cfg: &SimConfig) -> Result<Vec<Vec<f64>>> {
    let meta = &cfg.grid;
    let mut rng = stream(cfg.seed, 2);
    let field = smooth_field(meta.width, meta.height, &mut rng);
    let noise = (cfg.noise_lst_std > 0.0).then(|| Normal::new(0.0, cfg.noise_lst_std).expect("valid std"));
    let mut out = Vec::with_capacity(dates.len());
    for d in dates {
        let s = seasonal_lst(d.day_of_year);
        let grid = classes
            .iter()
            .zip(&field)
            .map(|(c, f)| {
                let n = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                s + c.lst_offset() + cfg.lst_field_amplitude * f + n
            })
            .collect();
        out.push(grid);
    }
    Ok(out)
}

/// Coefficients of the explicit scheme on a `width × height` grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdrScheme {
    pub width: usize,
    pub height: usize,
    /// Pixel spacing, m.
    pub h: f64,
    /// Diffusivity, m²/day.
    pub k_eff: f64,
    pub alpha: f64,
    pub wind_u: f64,
    pub wind_v: f64,
}

impl AdrScheme {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            width: cfg.grid.width,
            height: cfg.grid.height,
            h: cfg.grid.resolution_m,
            k_eff: cfg.k_eff(),
            alpha: cfg.alpha_true,
            wind_u: cfg.wind_u,
            wind_v: cfg.wind_v,
        }
    }

    /// Rate bound whose product with `dt` must stay below one.
    pub fn stiffness(&self) -> f64 {
        4.0 * self.k_eff / (self.h * self.h) + self.alpha + (self.wind_u.abs() + self.wind_v.abs()) / self.h
    }

    /// Halves `dt` until the scheme is stable.
    pub fn stable_dt(&self, dt: f64) -> Result<f64> {
        let mut dt = dt;
        while dt * self.stiffness() >= 1.0 {
            dt *= 0.5;
            if dt < MIN_DT {
                return Err(Error::StabilityFailure { min_dt: MIN_DT });
            }
        }
        Ok(dt)
    }

    /// Right-hand side `K_eff·Lap(T) − (u,v)·∇T + α(Ts − T)` with zero-flux
    /// boundaries and upwind advection.
    pub fn rate(&self, t: &[f64], ts: &[f64], out: &mut [f64]) {
        let (w, hgt) = (self.width, self.height);
        let kd = self.k_eff / (self.h * self.h);
        let (u, v) = (self.wind_u / self.h, self.wind_v / self.h);
        for i in 0..hgt {
            let up = if i == 0 { 0 } else { i - 1 };
            let dn = if i + 1 == hgt { i } else { i + 1 };
            for j in 0..w {
                let lf = if j == 0 { 0 } else { j - 1 };
                let rt = if j + 1 == w { j } else { j + 1 };
                let c = t[i * w + j];
                let (n, s, west, east) = (t[up * w + j], t[dn * w + j], t[i * w + lf], t[i * w + rt]);
                let mut r = kd * (n + s + west + east - 4.0 * c) + self.alpha * (ts[i * w + j] - c);
                if u != 0.0 {
                    r -= if u > 0.0 { u * (c - west) } else { u * (east - c) };
                }
                if v != 0.0 {
                    // north is decreasing row
                    r -= if v > 0.0 { v * (c - s) } else { v * (n - c) };
                }
                out[i * w + j] = r;
            }
        }
    }

    /// `t ← t + dt·rate(t)`.
    pub fn step(&self, t: &mut [f64], ts: &[f64], dt: f64, scratch: &mut [f64]) {
        self.rate(t, ts, scratch);
        for (x, r) in t.iter_mut().zip(scratch.iter()) {
            *x += dt * r;
        }
    }

    /// Integrates `duration` days under constant forcing `ts` with sub-steps
    /// no longer than `dt_max`, returning the number of steps and step size.
    pub fn advance(&self, t: &mut [f64], ts: &[f64], duration: f64, dt_max: f64) -> Result<(usize, f64)> {
        let dt_max = self.stable_dt(dt_max)?;
        if duration <= 0.0 {
            return Ok((0, dt_max));
        }
        let n = (duration / dt_max).ceil().max(1.0) as usize;
        let dt = duration / n as f64;
        let mut scratch = vec![0.0; t.len()];
        for _ in 0..n {
            self.step(t, ts, dt, &mut scratch);
        }
        Ok((n, dt))
    }
}

/// NSAT snapshots at every date. The air starts at the first LST grid, is
/// spun up under it for `spinup_days`, and over each interval
/// `(d_{k−1}, d_k]` is forced by the LST acquired at `d_k`.
pub fn integrate_adr(lst: &[Vec<f64>], dates: &[TimeStamp], cfg: &SimConfig) -> Result<Vec<Vec<f64>>> {
    if lst.is_empty() || lst.len() != dates.len() {
        return Err(Error::Config("LST series must have one grid per date".into()));
    }
    let scheme = AdrScheme::from_config(cfg);
    let mut t = lst[0].clone();
    scheme.advance(&mut t, &lst[0], cfg.spinup_days, cfg.dt)?;
    let mut out = Vec::with_capacity(lst.len());
    out.push(t.clone());
    for k in 1..lst.len() {
        let span = dates[k].day_of_year - dates[k - 1].day_of_year;
        scheme.advance(&mut t, &lst[k], span, cfg.dt)?;
        out.push(t.clone());
    }
    Ok(out)
}

/// Placement with a border margin and a minimum pairwise separation;
/// readings are the truth at the sensor pixel plus Gaussian noise.
pub fn sample_sensors(
    truth: &BTreeMap<String, VariableGrid>,
    cfg: &SimConfig,
) -> Result<(SensorNetwork, Vec<SensorNoise>)> {
    let meta = &cfg.grid;
    let mut rng = stream(cfg.seed, 3);
    let (rows, cols) = (meta.height.saturating_sub(2 * HALF), meta.width.saturating_sub(2 * HALF));
    let mut placed: Vec<(usize, usize)> = Vec::new();
    let mut attempts = 0usize;
    let budget = 10 * cfg.n_sensors;
    while placed.len() < cfg.n_sensors {
        if rows == 0 || cols == 0 || attempts >= budget {
            return Err(Error::PlacementFailure { requested: cfg.n_sensors, placed: placed.len() });
        }
        attempts += 1;
        let p = (HALF + rng.random_range(0..rows), HALF + rng.random_range(0..cols));
        let ok = placed.iter().all(|q| {
            let (dr, dc) = (p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
            (dr * dr + dc * dc).sqrt() >= MIN_SENSOR_SEPARATION
        });
        if ok {
            placed.push(p);
        }
    }
    let noise = (cfg.noise_sensor_std > 0.0).then(|| Normal::new(0.0, cfg.noise_sensor_std).expect("valid std"));
    let width = (cfg.n_sensors.max(1) as f64).log10().floor() as usize + 1;
    let mut net = SensorNetwork::default();
    let mut draws = Vec::new();
    for (k, &(r, c)) in placed.iter().enumerate() {
        let (x, y) = meta.pixel_center(r, c);
        let id = format!("S{:0width$}", k + 1);
        let mut s = Sensor::new(id.clone(), x, y, meta)?;
        for (date, grid) in truth {
            let n = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            let reading = grid.get(r, c) as f64 + n;
            s.add_reading(date.clone(), reading)?;
            draws.push(SensorNoise { sensor: id.clone(), date: date.clone(), noise: n });
        }
        net.sensors.push(s);
    }
    Ok((net, draws))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorNoise {
    pub sensor: String,
    pub date: String,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub sensors: SensorNetwork,
    pub provenance: SimConfig,
    pub landcover: LandCover,
    pub noise_draws: Vec<SensorNoise>,
}

fn to_grid(meta: &GridMeta, v: &[f64]) -> Result<VariableGrid> {
    VariableGrid::new(meta.clone(), v.iter().map(|&x| x as f32).collect())
}

pub fn simulate(cfg: &SimConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let meta = &cfg.grid;
    let dates = cfg.dates()?;
    let landcover = gen_landcover(cfg)?;
    let lst = gen_lst_forcing(&landcover.classes, &dates, cfg)?;
    let nsat = integrate_adr(&lst, &dates, cfg)?;

    let mut scene = Scene::new(meta.clone());
    scene.dates = dates.clone();
    for ((d, l), n) in dates.iter().zip(&lst).zip(&nsat) {
        scene.lst.insert(d.date_label.clone(), to_grid(meta, l)?);
        scene.nsat_truth.insert(d.date_label.clone(), to_grid(meta, n)?);
    }
    for month in scene.months() {
        scene.indices.insert((SpectralIndex::Ndvi, month.clone()), landcover.ndvi.clone());
        scene.indices.insert((SpectralIndex::Ndwi, month.clone()), landcover.ndwi.clone());
        scene.indices.insert((SpectralIndex::Ndbi, month), landcover.ndbi.clone());
    }
    let (sensors, noise_draws) = sample_sensors(&scene.nsat_truth, cfg)?;
    Ok(SyntheticScene { scene, sensors, provenance: cfg.clone(), landcover, noise_draws })
}

/// Writes the scene bundle, `sensors.csv` and the provenance dump.
pub fn write_synthetic(dir: &Path, s: &SyntheticScene) -> Result<()> {
    crate::bundle::write_scene(dir, &s.scene)?;
    crate::bundle::write_sensors_file(&dir.join("sensors.csv"), &s.sensors)?;
    let mut text = serde_json::to_string_pretty(&s.provenance)?;
    text.push('\n');
    std::fs::write(dir.join(PROVENANCE_FILE), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig { grid: GridMeta::new(32, 24, 10.0, 500000.0, 4800000.0).unwrap(), n_sensors: 6, n_dates: 3, ..Default::default() }
    }

    #[test]
    fn landcover_deterministic_and_clamped() {
        let cfg = small();
        let a = gen_landcover(&cfg).unwrap();
        assert_eq!(a, gen_landcover(&cfg).unwrap());
        for g in [&a.ndvi, &a.ndwi, &a.ndbi] {
            assert!(g.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn all_vegetation_ndvi_mean() {
        let cfg = SimConfig { class_fractions: [1.0, 0.0, 0.0, 0.0], ..small() };
        let lc = gen_landcover(&cfg).unwrap();
        assert!(lc.classes.iter().all(|&c| c == LandClass::Vegetation));
        let m = lc.ndvi.values.iter().map(|&v| v as f64).sum::<f64>() / lc.ndvi.values.len() as f64;
        assert!((m - 0.7).abs() < 0.02, "{m}");
    }

    #[test]
    fn lst_forcing_examples() {
        let cfg = SimConfig { noise_lst_std: 0.0, lst_field_amplitude: 0.0, ..small() };
        let classes = vec![LandClass::Bare; cfg.grid.len()];
        let d = [TimeStamp::new(171.25, "2025-06-20").unwrap(), TimeStamp::new(353.75, "2025-12-19").unwrap()];
        let lst = gen_lst_forcing(&classes, &d, &cfg).unwrap();
        assert!(lst[0].iter().all(|&v| (v - 27.0).abs() < 1e-12));
        assert!(lst[0].iter().zip(&lst[1]).all(|(a, b)| (a - b - 20.0).abs() < 1e-12));
        assert_eq!(lst, gen_lst_forcing(&classes, &d, &cfg).unwrap());
    }

    #[test]
    fn euler_examples() {
        let cfg = small();
        let scheme = AdrScheme::from_config(&cfg);
        let n = cfg.grid.len();
        let mut t = vec![10.0; n];
        let mut scratch = vec![0.0; n];
        scheme.step(&mut t, &vec![20.0; n], 0.1, &mut scratch);
        assert!(t.iter().all(|&v| (v - 10.5).abs() < 1e-12));
        let mut t = vec![20.0; n];
        scheme.advance(&mut t, &vec![20.0; n], 10.0, 0.05).unwrap();
        assert!(t.iter().all(|&v| v == 20.0));
    }

    #[test]
    fn stability_halving_and_failure() {
        let scheme = AdrScheme::from_config(&small());
        let dt = scheme.stable_dt(1.0).unwrap();
        assert!(dt * scheme.stiffness() < 1.0 && 2.0 * dt * scheme.stiffness() >= 1.0);
        let stiff = AdrScheme { k_eff: 1e12, ..scheme };
        assert!(matches!(stiff.stable_dt(0.1), Err(Error::StabilityFailure { .. })));
    }

    #[test]
    fn sensors_respect_constraints() {
        let s = simulate(&small()).unwrap();
        assert_eq!(s.sensors.len(), 6);
        for a in &s.sensors.sensors {
            assert!(s.scene.meta.patch_fits(a.pixel_row, a.pixel_col));
            for b in &s.sensors.sensors {
                if a.id != b.id {
                    let d = ((a.pixel_row as f64 - b.pixel_row as f64).powi(2)
                        + (a.pixel_col as f64 - b.pixel_col as f64).powi(2))
                    .sqrt();
                    assert!(d >= MIN_SENSOR_SEPARATION);
                }
            }
        }
        for n in &s.noise_draws {
            let sensor = s.sensors.get(&n.sensor).unwrap();
            let truth = s.scene.nsat_truth[&n.date].get(sensor.pixel_row, sensor.pixel_col) as f64;
            assert_eq!(sensor.readings[&n.date], truth + n.noise);
        }
    }

    #[test]
    fn noiseless_readings_equal_truth() {
        let s = simulate(&SimConfig { noise_sensor_std: 0.0, ..small() }).unwrap();
        for sensor in &s.sensors.sensors {
            for (d, &v) in &sensor.readings {
                assert_eq!(v, s.scene.nsat_truth[d].get(sensor.pixel_row, sensor.pixel_col) as f64);
            }
        }
    }

    #[test]
    fn impossible_placement_fails() {
        let cfg = SimConfig { grid: GridMeta::new(16, 16, 10.0, 0.0, 0.0).unwrap(), n_sensors: 1000, ..small() };
        let truth = BTreeMap::new();
        assert!(matches!(sample_sensors(&truth, &cfg), Err(Error::PlacementFailure { .. })));
    }

    #[test]
    fn simulation_is_deterministic() {
        assert_eq!(simulate(&small()).unwrap(), simulate(&small()).unwrap());
    }
}
