//! Georeferenced grids, sensors, time encoding and 7×7 patch extraction.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of a patch in pixels.
pub const PATCH: usize = 7;
/// Pixels per patch.
pub const PATCH_PIXELS: usize = PATCH * PATCH;
/// Distance from the patch center to its edge.
pub const HALF: usize = PATCH / 2;
/// Index of the center pixel in a flattened patch.
pub const CENTER: usize = HALF * PATCH + HALF;
/// Input channels: LST, x offset, y offset, sin t, cos t, NDVI, NDWI, NDBI.
pub const N_CHANNELS: usize = 8;
pub const CH_LST: usize = 0;
pub const CH_XOFF: usize = 1;
pub const CH_YOFF: usize = 2;
pub const CH_SIN: usize = 3;
pub const CH_COS: usize = 4;
pub const CH_NDVI: usize = 5;
pub const CH_NDWI: usize = 6;
pub const CH_NDBI: usize = 7;
pub const DAYS_PER_YEAR: f64 = 365.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub width: usize,
    pub height: usize,
    pub resolution_m: f64,
    /// UTM easting of the center of pixel (0, 0).
    pub origin_x: f64,
    /// UTM northing of the center of pixel (0, 0).
    pub origin_y: f64,
    pub crs_label: String,
}

impl GridMeta {
    pub fn new(width: usize, height: usize, resolution_m: f64, origin_x: f64, origin_y: f64) -> Result<Self> {
        let meta = Self {
            width,
            height,
            resolution_m,
            origin_x,
            origin_y,
            crs_label: "EPSG:32631".into(),
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < PATCH || self.height < PATCH {
            return Err(Error::Config(format!(
                "grid must be at least {PATCH}×{PATCH}, got {}×{}",
                self.width, self.height
            )));
        }
        if !(self.resolution_m > 0.0 && self.resolution_m.is_finite()) {
            return Err(Error::Config(format!("resolution must be positive, got {}", self.resolution_m)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// UTM coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + col as f64 * self.resolution_m,
            self.origin_y - row as f64 * self.resolution_m,
        )
    }

    /// True when the full patch around `(row, col)` lies inside the grid.
    pub fn patch_fits(&self, row: usize, col: usize) -> bool {
        row >= HALF && col >= HALF && row + HALF < self.height && col + HALF < self.width
    }
}

/// Nearest pixel center (half away from zero), rejecting pixels whose patch
/// would leave the grid.
pub fn project_sensor(x: f64, y: f64, meta: &GridMeta) -> Result<(usize, usize)> {
    let row = ((meta.origin_y - y) / meta.resolution_m).round() as i64;
    let col = ((x - meta.origin_x) / meta.resolution_m).round() as i64;
    let m = HALF as i64;
    if row < m || col < m || row >= meta.height as i64 - m || col >= meta.width as i64 - m {
        return Err(Error::OutOfBounds { x, y, row, col, margin: HALF });
    }
    Ok((row as usize, col as usize))
}

pub fn unproject(row: usize, col: usize, meta: &GridMeta) -> (f64, f64) {
    meta.pixel_center(row, col)
}

/// Seasonal encoding `(sin 2πd/365, cos 2πd/365)`.
pub fn encode_time(day_of_year: f64) -> (f64, f64) {
    let a = 2.0 * PI * day_of_year / DAYS_PER_YEAR;
    (a.sin(), a.cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeStamp {
    pub day_of_year: f64,
    pub date_label: String,
}

impl TimeStamp {
    pub fn new(day_of_year: f64, date_label: impl Into<String>) -> Result<Self> {
        if !(0.0..DAYS_PER_YEAR).contains(&day_of_year) {
            return Err(Error::Config(format!("day of year {day_of_year} outside [0, 365)")));
        }
        Ok(Self { day_of_year, date_label: date_label.into() })
    }

    /// Parses `YYYY-MM-DD`; day 0 is January 1st.
    pub fn from_label(label: &str) -> Result<Self> {
        let d = NaiveDate::parse_from_str(label, "%Y-%m-%d")
            .map_err(|e| Error::Format(format!("bad date label {label:?}: {e}")))?;
        Self::new((d.ordinal0() as f64).min(364.0), label)
    }

    /// Label for integer day `doy` of `year`.
    pub fn from_day(year: i32, doy: f64) -> Result<Self> {
        let day = doy.floor().clamp(0.0, 364.0) as u32;
        let d = NaiveDate::from_yo_opt(year, day + 1)
            .ok_or_else(|| Error::Config(format!("invalid day {doy} for year {year}")))?;
        Self::new(doy, d.format("%Y-%m-%d").to_string())
    }

    pub fn encode(&self) -> (f64, f64) {
        encode_time(self.day_of_year)
    }

    /// `YYYY-MM` bucket used for monthly index composites and metrics.
    pub fn month(&self) -> String {
        month_of(&self.date_label)
    }
}

pub fn month_of(label: &str) -> String {
    label.get(..7).unwrap_or(label).to_string()
}

/// One gridded variable. Values are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableGrid {
    pub meta: GridMeta,
    pub values: Vec<f32>,
    pub nodata_mask: Vec<bool>,
}

impl VariableGrid {
    pub fn new(meta: GridMeta, values: Vec<f32>) -> Result<Self> {
        if values.len() != meta.len() {
            return Err(Error::Format(format!(
                "grid has {} values, expected {}",
                values.len(),
                meta.len()
            )));
        }
        let nodata_mask = values.iter().map(|v| !v.is_finite()).collect();
        Ok(Self { meta, values, nodata_mask })
    }

    pub fn filled(meta: GridMeta, value: f32) -> Self {
        let n = meta.len();
        Self { meta, values: vec![value; n], nodata_mask: vec![false; n] }
    }

    pub fn with_mask(meta: GridMeta, values: Vec<f32>, nodata_mask: Vec<bool>) -> Result<Self> {
        let mut g = Self::new(meta, values)?;
        if nodata_mask.len() != g.values.len() {
            return Err(Error::Format("nodata mask length mismatch".into()));
        }
        for (m, &extra) in g.nodata_mask.iter_mut().zip(&nodata_mask) {
            *m |= extra;
        }
        Ok(g)
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.meta.width + col]
    }

    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        self.nodata_mask[row * self.meta.width + col]
    }

    /// Clamps spectral index values into [-1, 1].
    pub fn clamp_index(&mut self) {
        for v in &mut self.values {
            if v.is_finite() {
                *v = v.clamp(-1.0, 1.0);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum SpectralIndex {
    Ndvi,
    Ndwi,
    Ndbi,
}

impl SpectralIndex {
    pub const ALL: [SpectralIndex; 3] = [SpectralIndex::Ndvi, SpectralIndex::Ndwi, SpectralIndex::Ndbi];

    pub fn name(self) -> &'static str {
        match self {
            SpectralIndex::Ndvi => "ndvi",
            SpectralIndex::Ndwi => "ndwi",
            SpectralIndex::Ndbi => "ndbi",
        }
    }
}

/// Stack of gridded variables sharing one [`GridMeta`].
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub meta: GridMeta,
    pub dates: Vec<TimeStamp>,
    pub lst: BTreeMap<String, VariableGrid>,
    /// Keyed by `(index, "YYYY-MM")`.
    pub indices: BTreeMap<(SpectralIndex, String), VariableGrid>,
    pub nsat_truth: BTreeMap<String, VariableGrid>,
}

impl Scene {
    pub fn new(meta: GridMeta) -> Self {
        Self {
            meta,
            dates: Vec::new(),
            lst: BTreeMap::new(),
            indices: BTreeMap::new(),
            nsat_truth: BTreeMap::new(),
        }
    }

    pub fn date(&self, label: &str) -> Option<&TimeStamp> {
        self.dates.iter().find(|d| d.date_label == label)
    }

    pub fn lst(&self, date: &str) -> Result<&VariableGrid> {
        self.lst
            .get(date)
            .ok_or_else(|| Error::MissingVariable(format!("lst_{date}")))
    }

    pub fn index(&self, which: SpectralIndex, month: &str) -> Result<&VariableGrid> {
        self.indices
            .get(&(which, month.to_string()))
            .ok_or_else(|| Error::MissingVariable(format!("{}_{month}", which.name())))
    }

    pub fn months(&self) -> Vec<String> {
        let mut m: Vec<String> = self.dates.iter().map(TimeStamp::month).collect();
        m.dedup();
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sensor {
    pub id: String,
    pub x_utm: f64,
    pub y_utm: f64,
    pub pixel_row: usize,
    pub pixel_col: usize,
    /// NSAT readings in °C keyed by date label.
    pub readings: BTreeMap<String, f64>,
}

impl Sensor {
    pub fn new(id: impl Into<String>, x_utm: f64, y_utm: f64, meta: &GridMeta) -> Result<Self> {
        let (pixel_row, pixel_col) = project_sensor(x_utm, y_utm, meta)?;
        Ok(Self {
            id: id.into(),
            x_utm,
            y_utm,
            pixel_row,
            pixel_col,
            readings: BTreeMap::new(),
        })
    }

    pub fn add_reading(&mut self, date: impl Into<String>, tair_c: f64) -> Result<()> {
        if !(-60.0..=60.0).contains(&tair_c) {
            return Err(Error::Format(format!(
                "reading {tair_c} °C for sensor {} outside [-60, 60]",
                self.id
            )));
        }
        self.readings.insert(date.into(), tair_c);
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SensorNetwork {
    pub sensors: Vec<Sensor>,
}

impl SensorNetwork {
    pub fn ids(&self) -> Vec<String> {
        self.sensors.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sensor> {
        self.sensors.iter().find(|s| s.id == id)
    }

    pub fn subset(&self, ids: &[String]) -> SensorNetwork {
        SensorNetwork {
            sensors: self.sensors.iter().filter(|s| ids.contains(&s.id)).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }
}

/// One 7×7 input window. `channels` is channel-major `[8][7][7]` in raw
/// units; x/y offset channels hold the pixel offset from the center.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub channels: Vec<f64>,
    pub target_nsat: f64,
    pub center: (usize, usize),
    pub timestamp: TimeStamp,
    pub lst_patch_raw: [f64; PATCH_PIXELS],
    /// Grid position of the center pixel.
    pub grid_pos: (usize, usize),
}

impl PatchSample {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c * PATCH_PIXELS..(c + 1) * PATCH_PIXELS]
    }
}

/// Builds the raw patch centered at grid pixel `(row, col)`. Returns `Ok(None)`
/// when any pixel of the window is nodata.
pub fn extract_patch_at(
    scene: &Scene,
    row: usize,
    col: usize,
    date: &TimeStamp,
    target: f64,
) -> Result<Option<PatchSample>> {
    if !scene.meta.patch_fits(row, col) {
        return Err(Error::OutOfBounds {
            x: scene.meta.pixel_center(row, col).0,
            y: scene.meta.pixel_center(row, col).1,
            row: row as i64,
            col: col as i64,
            margin: HALF,
        });
    }
    let lst = scene.lst(&date.date_label)?;
    let month = date.month();
    let idx = [
        scene.index(SpectralIndex::Ndvi, &month)?,
        scene.index(SpectralIndex::Ndwi, &month)?,
        scene.index(SpectralIndex::Ndbi, &month)?,
    ];
    let (s, c) = date.encode();
    let mut channels = vec![0.0; N_CHANNELS * PATCH_PIXELS];
    let mut lst_raw = [0.0; PATCH_PIXELS];
    for i in 0..PATCH {
        for j in 0..PATCH {
            let (r, cc) = (row + i - HALF, col + j - HALF);
            if lst.is_nodata(r, cc) || idx.iter().any(|g| g.is_nodata(r, cc)) {
                return Ok(None);
            }
            let p = i * PATCH + j;
            let t = lst.get(r, cc) as f64;
            lst_raw[p] = t;
            channels[CH_LST * PATCH_PIXELS + p] = t;
            channels[CH_XOFF * PATCH_PIXELS + p] = j as f64 - HALF as f64;
            channels[CH_YOFF * PATCH_PIXELS + p] = i as f64 - HALF as f64;
            channels[CH_SIN * PATCH_PIXELS + p] = s;
            channels[CH_COS * PATCH_PIXELS + p] = c;
            for (k, g) in idx.iter().enumerate() {
                channels[(CH_NDVI + k) * PATCH_PIXELS + p] = g.get(r, cc) as f64;
            }
        }
    }
    Ok(Some(PatchSample {
        channels,
        target_nsat: target,
        center: (HALF, HALF),
        timestamp: date.clone(),
        lst_patch_raw: lst_raw,
        grid_pos: (row, col),
    }))
}

/// Patch for a sensor reading. Nodata windows surface as
/// [`Error::MissingVariable`].
pub fn extract_patch(scene: &Scene, sensor: &Sensor, date: &str) -> Result<PatchSample> {
    let reading = *sensor.readings.get(date).ok_or_else(|| Error::MissingReading {
        sensor: sensor.id.clone(),
        date: date.to_string(),
    })?;
    let ts = scene
        .date(date)
        .ok_or_else(|| Error::MissingVariable(format!("lst_{date}")))?;
    extract_patch_at(scene, sensor.pixel_row, sensor.pixel_col, ts, reading)?
        .ok_or_else(|| Error::MissingVariable(format!("nodata inside patch of {} on {date}", sensor.id)))
}

/// All usable training patches of a network, skipping nodata windows and
/// dates without imagery.
pub fn collect_patches(scene: &Scene, sensors: &SensorNetwork) -> Result<Vec<(String, PatchSample)>> {
    let mut out = Vec::new();
    for s in &sensors.sensors {
        for ts in &scene.dates {
            let Some(&reading) = s.readings.get(&ts.date_label) else { continue };
            if !scene.lst.contains_key(&ts.date_label) {
                continue;
            }
            if let Some(p) = extract_patch_at(scene, s.pixel_row, s.pixel_col, ts, reading)? {
                out.push((s.id.clone(), p));
            }
        }
    }
    Ok(out)
}

/// Per-channel mean/std; coordinate and time channels are not z-scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
}

pub const STD_FLOOR: f64 = 1e-6;

impl ChannelStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; N_CHANNELS], std: [1.0; N_CHANNELS] }
    }

    /// Statistics over every pixel of the given (training) patches.
    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a PatchSample>) -> Self {
        let mut sum = [0.0; N_CHANNELS];
        let mut sq = [0.0; N_CHANNELS];
        let mut n = 0usize;
        for p in patches {
            for c in [CH_LST, CH_NDVI, CH_NDWI, CH_NDBI] {
                for &v in p.channel(c) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += PATCH_PIXELS;
        }
        let mut stats = Self::identity();
        if n == 0 {
            return stats;
        }
        for c in [CH_LST, CH_NDVI, CH_NDWI, CH_NDBI] {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(0.0);
            stats.mean[c] = m;
            stats.std[c] = var.sqrt().max(STD_FLOOR);
        }
        stats
    }
}

/// Z-scores LST and index channels, maps pixel offsets to [-1, 1] and leaves
/// the time encoding untouched.
pub fn normalize_inputs(patch: &PatchSample, stats: &ChannelStats) -> PatchSample {
    let mut out = patch.clone();
    for c in 0..N_CHANNELS {
        let ch = &mut out.channels[c * PATCH_PIXELS..(c + 1) * PATCH_PIXELS];
        match c {
            CH_XOFF | CH_YOFF => {
                for (p, v) in ch.iter_mut().enumerate() {
                    let (i, j) = (p / PATCH, p % PATCH);
                    let off = if c == CH_XOFF { j } else { i } as f64 - HALF as f64;
                    *v = off / HALF as f64;
                }
            }
            CH_SIN | CH_COS => {}
            _ => {
                let sd = stats.std[c].max(STD_FLOOR);
                for v in ch.iter_mut() {
                    *v = (*v - stats.mean[c]) / sd;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> GridMeta {
        GridMeta::new(32, 32, 10.0, 500000.0, 4800000.0).unwrap()
    }

    #[test]
    fn projection_examples() {
        let m = meta();
        assert!(matches!(project_sensor(500000.0, 4800000.0, &m), Err(Error::OutOfBounds { row: 0, col: 0, .. })));
        assert_eq!(project_sensor(500035.0, 4799935.0, &m).unwrap(), (7, 4));
        // one pixel from the left border
        assert!(project_sensor(500010.0, 4799900.0, &m).is_err());
        // last valid column is width - 4
        assert!(project_sensor(500000.0 + 28.0 * 10.0, 4799900.0, &m).is_ok());
        assert!(project_sensor(500000.0 + 29.0 * 10.0, 4799900.0, &m).is_err());
    }

    #[test]
    fn projection_rounds_half_away_from_zero() {
        let m = meta();
        // 4.5 pixels → 5, 5.49 → 5
        assert_eq!(project_sensor(500045.0, 4799955.0, &m).unwrap(), (5, 5));
        assert_eq!(project_sensor(500054.9, 4799945.1, &m).unwrap(), (5, 5));
    }

    #[test]
    fn encode_time_examples() {
        let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12;
        assert!(close(encode_time(0.0), (0.0, 1.0)));
        assert!(close(encode_time(91.25), (1.0, 0.0)));
        assert!(close(encode_time(182.5), (0.0, -1.0)));
    }

    #[test]
    fn timestamp_labels() {
        let t = TimeStamp::from_label("2025-08-08").unwrap();
        assert_eq!(t.day_of_year, 219.0);
        assert_eq!(t.month(), "2025-08");
        assert_eq!(TimeStamp::from_day(2025, 219.0).unwrap().date_label, "2025-08-08");
        assert!(TimeStamp::new(365.0, "x").is_err());
    }

    fn flat_scene(lst: f32) -> Scene {
        let m = meta();
        let mut s = Scene::new(m.clone());
        let ts = TimeStamp::from_label("2025-08-08").unwrap();
        s.lst.insert(ts.date_label.clone(), VariableGrid::filled(m.clone(), lst));
        for k in SpectralIndex::ALL {
            s.indices.insert((k, ts.month()), VariableGrid::filled(m.clone(), 0.1));
        }
        s.dates.push(ts);
        s
    }

    #[test]
    fn patch_channels() {
        let scene = flat_scene(20.0);
        let mut sensor = Sensor::new("a", 500100.0, 4799900.0, &scene.meta).unwrap();
        sensor.add_reading("2025-08-08", 21.5).unwrap();
        let p = extract_patch(&scene, &sensor, "2025-08-08").unwrap();
        let (s, _) = scene.dates[0].encode();
        assert!(p.channel(CH_SIN).iter().all(|&v| v == s));
        assert!(p.lst_patch_raw.iter().all(|&v| v == 20.0));
        assert_eq!(p.target_nsat, 21.5);
        assert_eq!(p.center, (3, 3));
        let again = extract_patch(&scene, &sensor, "2025-08-08").unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn patch_errors() {
        let scene = flat_scene(20.0);
        let mut sensor = Sensor::new("a", 500100.0, 4799900.0, &scene.meta).unwrap();
        assert!(matches!(extract_patch(&scene, &sensor, "2025-08-08"), Err(Error::MissingReading { .. })));
        sensor.add_reading("2025-08-09", 20.0).unwrap();
        assert!(matches!(extract_patch(&scene, &sensor, "2025-08-09"), Err(Error::MissingVariable(_))));
    }

    #[test]
    fn nodata_patch_is_dropped() {
        let mut scene = flat_scene(20.0);
        let g = scene.lst.get_mut("2025-08-08").unwrap();
        let w = g.meta.width;
        g.values[10 * w + 10] = f32::NAN;
        g.nodata_mask[10 * w + 10] = true;
        let ts = scene.dates[0].clone();
        assert!(extract_patch_at(&scene, 11, 11, &ts, 0.0).unwrap().is_none());
        assert!(extract_patch_at(&scene, 20, 20, &ts, 0.0).unwrap().is_some());
    }

    #[test]
    fn normalization() {
        let scene = flat_scene(20.0);
        let ts = scene.dates[0].clone();
        let p = extract_patch_at(&scene, 10, 10, &ts, 0.0).unwrap().unwrap();
        let mut stats = ChannelStats::from_patches([&p]);
        assert_eq!(stats.mean[CH_LST], 20.0);
        assert_eq!(stats.std[CH_LST], STD_FLOOR);
        stats.std[CH_LST] = 2.0;
        let n = normalize_inputs(&p, &stats);
        assert!(n.channel(CH_LST).iter().all(|&v| v == 0.0));
        assert_eq!(n.channel(CH_XOFF)[CENTER], 0.0);
        assert_eq!(n.channel(CH_YOFF)[CENTER], 0.0);
        assert_eq!(n.channel(CH_XOFF)[0], -1.0);
        assert_eq!(n.channel(CH_YOFF)[0], -1.0);
        assert_eq!(n.channel(CH_SIN), p.channel(CH_SIN));
    }

    #[test]
    fn reading_range_enforced() {
        let m = meta();
        let mut s = Sensor::new("a", 500100.0, 4799900.0, &m).unwrap();
        assert!(s.add_reading("2025-08-08", 61.0).is_err());
        assert!(s.add_reading("2025-08-08", -60.0).is_ok());
    }
}
