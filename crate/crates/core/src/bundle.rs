//! On-disk scene bundles and sensor CSV files.
//!
//! A bundle is a directory holding `manifest.json` plus one headerless
//! little-endian `f32` row-major file per variable and date (or month for the
//! spectral indices). Nodata pixels are stored as [`NODATA_VALUE`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridMeta, Scene, Sensor, SensorNetwork, SpectralIndex, TimeStamp, VariableGrid};

pub const MANIFEST: &str = "manifest.json";
pub const NODATA_VALUE: f32 = -9999.0;
const FORMAT_NAME: &str = "spycer-scene";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    grid: GridMeta,
    nodata_value: f32,
    dates: Vec<TimeStamp>,
    months: Vec<String>,
    variables: Vec<VariableEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariableEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    date: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    month: Option<String>,
    file: String,
}

pub fn encode_grid(grid: &VariableGrid) -> Vec<u8> {
    let mut buf = Vec::with_capacity(grid.values.len() * 4);
    for (v, &nd) in grid.values.iter().zip(&grid.nodata_mask) {
        let v = if nd { NODATA_VALUE } else { *v };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_grid(meta: &GridMeta, bytes: &[u8]) -> Result<VariableGrid> {
    if bytes.len() != meta.len() * 4 {
        return Err(Error::Format(format!(
            "raster has {} bytes, expected {} for a {}×{} grid",
            bytes.len(),
            meta.len() * 4,
            meta.height,
            meta.width
        )));
    }
    let mut values = Vec::with_capacity(meta.len());
    let mut mask = Vec::with_capacity(meta.len());
    for c in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        let nd = v == NODATA_VALUE || !v.is_finite();
        mask.push(nd);
        values.push(if nd { f32::NAN } else { v });
    }
    VariableGrid::with_mask(meta.clone(), values, mask)
}

pub fn write_grid_file(path: &Path, grid: &VariableGrid) -> Result<()> {
    fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn read_grid_file(path: &Path, meta: &GridMeta) -> Result<VariableGrid> {
    decode_grid(meta, &fs::read(path)?)
}

/// Manifest written beside a single exported map (`<name>.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapManifest {
    pub format: String,
    pub version: u32,
    pub grid: GridMeta,
    pub nodata_value: f32,
    pub variable: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
    pub file: String,
}

const MAP_FORMAT_NAME: &str = "spycer-map";

/// Writes `grid` to `path` and its manifest to `path` with a `.json` extension.
pub fn write_map(path: &Path, grid: &VariableGrid, variable: &str, date: Option<&str>) -> Result<()> {
    write_grid_file(path, grid)?;
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let manifest = MapManifest {
        format: MAP_FORMAT_NAME.into(),
        version: 1,
        grid: grid.meta.clone(),
        nodata_value: NODATA_VALUE,
        variable: variable.into(),
        date: date.map(String::from),
        file,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(path.with_extension("json"), text)?;
    Ok(())
}

/// Reads a map written by [`write_map`].
pub fn read_map(path: &Path) -> Result<(VariableGrid, MapManifest)> {
    let text = fs::read_to_string(path.with_extension("json"))?;
    let manifest: MapManifest = serde_json::from_str(&text)?;
    if manifest.format != MAP_FORMAT_NAME {
        return Err(Error::Format(format!("unexpected map format {:?}", manifest.format)));
    }
    let grid = read_grid_file(path, &manifest.grid)?;
    Ok((grid, manifest))
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut variables = Vec::new();
    for (date, g) in &scene.lst {
        let file = format!("lst_{date}.f32");
        write_grid_file(&dir.join(&file), g)?;
        variables.push(VariableEntry { name: "lst".into(), date: Some(date.clone()), month: None, file });
    }
    for ((k, month), g) in &scene.indices {
        let file = format!("{}_{month}.f32", k.name());
        write_grid_file(&dir.join(&file), g)?;
        variables.push(VariableEntry { name: k.name().into(), date: None, month: Some(month.clone()), file });
    }
    for (date, g) in &scene.nsat_truth {
        let file = format!("nsat_truth_{date}.f32");
        write_grid_file(&dir.join(&file), g)?;
        variables.push(VariableEntry { name: "nsat_truth".into(), date: Some(date.clone()), month: None, file });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: 1,
        grid: scene.meta.clone(),
        nodata_value: NODATA_VALUE,
        dates: scene.dates.clone(),
        months: scene.months(),
        variables,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::Format(format!("unexpected bundle format {:?}", manifest.format)));
    }
    manifest.grid.validate()?;
    let meta = manifest.grid;
    let mut scene = Scene::new(meta.clone());
    scene.dates = manifest.dates;
    for v in manifest.variables {
        if v.file.contains('/') || v.file.contains("..") {
            return Err(Error::Format(format!("variable file {:?} escapes the bundle", v.file)));
        }
        let grid = read_grid_file(&dir.join(&v.file), &meta)?;
        match (v.name.as_str(), v.date, v.month) {
            ("lst", Some(d), None) => {
                scene.lst.insert(d, grid);
            }
            ("nsat_truth", Some(d), None) => {
                scene.nsat_truth.insert(d, grid);
            }
            (name, None, Some(m)) => {
                let k = SpectralIndex::ALL
                    .into_iter()
                    .find(|k| k.name() == name)
                    .ok_or_else(|| Error::Format(format!("unknown variable {name}")))?;
                let mut grid = grid;
                grid.clamp_index();
                scene.indices.insert((k, m), grid);
            }
            (name, _, _) => return Err(Error::Format(format!("malformed variable entry {name}"))),
        }
    }
    Ok(scene)
}

#[derive(Debug, Serialize, Deserialize)]
struct SensorRow {
    id: String,
    x_utm: f64,
    y_utm: f64,
    date: String,
    tair_c: f64,
}

pub fn write_sensors_csv<W: Write>(w: W, sensors: &SensorNetwork) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for s in &sensors.sensors {
        for (date, &t) in &s.readings {
            wr.serialize(SensorRow {
                id: s.id.clone(),
                x_utm: s.x_utm,
                y_utm: s.y_utm,
                date: date.clone(),
                tair_c: t,
            })?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_sensors_file(path: &Path, sensors: &SensorNetwork) -> Result<()> {
    let f = BufWriter::new(fs::File::create(path)?);
    write_sensors_csv(f, sensors)
}

/// Sensors that fail projection (outside the grid or inside the border
/// margin) are excluded and reported in the second element.
pub fn read_sensors_csv<R: std::io::Read>(r: R, meta: &GridMeta) -> Result<(SensorNetwork, Vec<String>)> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    let expected = ["id", "x_utm", "y_utm", "date", "tair_c"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!("sensor CSV header must be {}", expected.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Result<Sensor>> = BTreeMap::new();
    for row in rd.deserialize() {
        let row: SensorRow = row?;
        let entry = by_id.entry(row.id.clone()).or_insert_with(|| {
            order.push(row.id.clone());
            Sensor::new(row.id.clone(), row.x_utm, row.y_utm, meta)
        });
        if let Ok(s) = entry {
            if s.x_utm != row.x_utm || s.y_utm != row.y_utm {
                return Err(Error::Format(format!("sensor {} changes position between rows", row.id)));
            }
            s.add_reading(row.date, row.tair_c)?;
        }
    }
    let mut net = SensorNetwork::default();
    let mut excluded = Vec::new();
    for id in order {
        match by_id.remove(&id) {
            Some(Ok(s)) => net.sensors.push(s),
            Some(Err(Error::OutOfBounds { .. })) => excluded.push(id),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    Ok((net, excluded))
}

pub fn read_sensors_file(path: &Path, meta: &GridMeta) -> Result<(SensorNetwork, Vec<String>)> {
    read_sensors_csv(fs::File::open(path)?, meta)
}
