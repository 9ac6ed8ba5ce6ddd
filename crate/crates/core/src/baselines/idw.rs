use crate::error::{Error, Result};
use crate::grid::{GridMeta, VariableGrid};

/// Inverse-distance weighted value at `(x, y)` from `(x, y, value)` points.
/// A query coinciding with a point returns that point's value.
pub fn idw_value(x: f64, y: f64, points: &[(f64, f64, f64)], power: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::NoSensors);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &(px, py, v) in points {
        let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
        if d == 0.0 {
            return Ok(v);
        }
        let w = d.powf(-power);
        num += w * v;
        den += w;
    }
    Ok(num / den)
}

/// IDW surface over every pixel center of the grid.
pub fn idw_map(points: &[(f64, f64, f64)], meta: &GridMeta, power: f64) -> Result<VariableGrid> {
    if points.is_empty() {
        return Err(Error::NoSensors);
    }
    let mut values = Vec::with_capacity(meta.len());
    for r in 0..meta.height {
        for c in 0..meta.width {
            let (x, y) = meta.pixel_center(r, c);
            values.push(idw_value(x, y, points, power)? as f32);
        }
    }
    VariableGrid::new(meta.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(idw_value(0.0, 0.0, &[(1.0, 0.0, 10.0), (2.0, 0.0, 20.0)], 2.0).unwrap(), 12.0);
        assert_eq!(idw_value(1.0, 0.0, &[(1.0, 0.0, 10.0), (2.0, 0.0, 20.0)], 2.0).unwrap(), 10.0);
        assert!(matches!(idw_value(0.0, 0.0, &[], 2.0), Err(Error::NoSensors)));
        let meta = GridMeta::new(8, 8, 10.0, 0.0, 0.0).unwrap();
        let m = idw_map(&[(30.0, -30.0, 4.5)], &meta, 2.0).unwrap();
        assert!(m.values.iter().all(|&v| v == 4.5));
    }
}
