//! Diffusion–reaction residual of a predicted NSAT patch, its spatial and
//! temporal ingredients, and the sensible heat flux diagnostic.
//!
//! Units: pixel spacing `h` in meters, time in days. The diffusion
//! coefficient enters as `K_eff = K·h²` per day so that `K` stays
//! dimensionless.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{PatchSample, CH_COS, CH_SIN, DAYS_PER_YEAR, N_CHANNELS, PATCH, PATCH_PIXELS};
use crate::model::{net_forward_celsius, pack_inputs, rows_to_maps, Bound, ModelConfig, TargetStats};

/// Side of the stencil-valid interior of a patch.
pub const INTERIOR: usize = PATCH - 2;
pub const INTERIOR_PIXELS: usize = INTERIOR * INTERIOR;
/// The patch center inside the flattened interior.
pub const INTERIOR_CENTER: usize = INTERIOR_PIXELS / 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    /// Dimensionless diffusion coefficient.
    pub k: f64,
    /// Surface–air coupling, 1/day.
    pub alpha: f64,
    /// Weight of the physics term in the patch loss.
    pub lambda: f64,
    /// Gaussian decay of neighbor weights, pixels.
    pub sigma: f64,
    /// Perturbation of the time channels for the temporal derivative.
    pub eps_t: f64,
    /// Pixel spacing, meters.
    pub h: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self { k: 0.8, alpha: 0.5, lambda: 0.9, sigma: 1.5, eps_t: 1e-3, h: 10.0 }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("k", self.k), ("alpha", self.alpha), ("sigma", self.sigma), ("eps_t", self.eps_t), ("h", self.h)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("physics.{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("physics.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }

    /// Diffusivity in m²/day.
    pub fn k_eff(&self) -> f64 {
        self.k * self.h * self.h
    }
}

/// Five-point Laplacian `(N + S + E + W − 4C)/h²` on the interior of a
/// `width × height` row-major field. Output is `(width−2) × (height−2)`.
pub fn laplacian_field(values: &[f64], width: usize, height: usize, h: f64) -> Vec<f64> {
    assert_eq!(values.len(), width * height);
    let inv = 1.0 / (h * h);
    let mut out = Vec::with_capacity((width - 2) * (height - 2));
    for i in 1..height - 1 {
        for j in 1..width - 1 {
            let c = values[i * width + j];
            let s = values[(i - 1) * width + j] + values[(i + 1) * width + j] + values[i * width + j - 1]
                + values[i * width + j + 1];
            out.push((s - 4.0 * c) * inv);
        }
    }
    out
}

/// Laplacian of a 7×7 map on its 5×5 interior, °C/m².
pub fn laplacian5(pred: &[f64; PATCH_PIXELS], h: f64) -> [f64; INTERIOR_PIXELS] {
    let v = laplacian_field(pred, PATCH, PATCH, h);
    let mut out = [0.0; INTERIOR_PIXELS];
    out.copy_from_slice(&v);
    out
}

/// The 5×5 interior of a 7×7 map.
pub fn interior(map: &[f64; PATCH_PIXELS]) -> [f64; INTERIOR_PIXELS] {
    let mut out = [0.0; INTERIOR_PIXELS];
    for i in 0..INTERIOR {
        for j in 0..INTERIOR {
            out[i * INTERIOR + j] = map[(i + 1) * PATCH + j + 1];
        }
    }
    out
}

/// Residual of the diffusion–reaction balance on the 5×5 interior, °C/day.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualField {
    pub values: [f64; INTERIOR_PIXELS],
}

impl ResidualField {
    pub fn center(&self) -> f64 {
        self.values[INTERIOR_CENTER]
    }
}

/// `r = ∂T/∂t − K_eff ∇²T − α (T_s − T)` on the interior.
pub fn adr_residual(
    pred: &[f64; PATCH_PIXELS],
    lst_raw: &[f64; PATCH_PIXELS],
    dtdt: &[f64; INTERIOR_PIXELS],
    cfg: &PhysicsConfig,
) -> ResidualField {
    let lap = laplacian5(pred, cfg.h);
    let p = interior(pred);
    let s = interior(lst_raw);
    let k = cfg.k_eff();
    let mut values = [0.0; INTERIOR_PIXELS];
    for i in 0..INTERIOR_PIXELS {
        values[i] = dtdt[i] - k * lap[i] - cfg.alpha * (s[i] - p[i]);
    }
    ResidualField { values }
}

/// Residual over the interior of a whole `width × height` field; output is
/// `(width−2) × (height−2)` row-major.
pub fn field_residual(
    t: &[f64],
    dtdt: &[f64],
    lst: &[f64],
    width: usize,
    height: usize,
    cfg: &PhysicsConfig,
) -> Vec<f64> {
    let lap = laplacian_field(t, width, height, cfg.h);
    let k = cfg.k_eff();
    let mut out = Vec::with_capacity(lap.len());
    for i in 1..height - 1 {
        for j in 1..width - 1 {
            let p = i * width + j;
            let l = lap[(i - 1) * (width - 2) + j - 1];
            out.push(dtdt[p] - k * l - cfg.alpha * (lst[p] - t[p]));
        }
    }
    out
}

/// `H = ρ c_p (T_s − T_a) / r_a` in W/m².
pub fn sensible_heat_flux(ts: f64, ta: f64, rho: f64, cp: f64, ra: f64) -> Result<f64> {
    if !(ra > 0.0) {
        return Err(Error::NonPositiveResistance(ra));
    }
    Ok(rho * cp * (ts - ta) / ra)
}

/// Chain rule from the seasonal encoding back to days:
/// `dT/dt = 2π/365 · (∂T/∂sin · cos − ∂T/∂cos · sin)`.
pub fn time_chain_rule(d_sin: f64, d_cos: f64, day_of_year: f64) -> f64 {
    let w = 2.0 * PI / DAYS_PER_YEAR;
    let a = w * day_of_year;
    w * (d_sin * a.cos() - d_cos * a.sin())
}

/// `[49, 25]` matrix mapping a flattened patch to `K_eff·∇²` on the interior.
pub fn diffusion_matrix<T: Real>(cfg: &PhysicsConfig) -> Tensor<T> {
    let scale = cfg.k_eff() / (cfg.h * cfg.h);
    let mut m = vec![0.0; PATCH_PIXELS * INTERIOR_PIXELS];
    for i in 0..INTERIOR {
        for j in 0..INTERIOR {
            let col = i * INTERIOR + j;
            let (r, c) = (i + 1, j + 1);
            m[(r * PATCH + c) * INTERIOR_PIXELS + col] -= 4.0 * scale;
            for (rr, cc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
                m[(rr * PATCH + cc) * INTERIOR_PIXELS + col] += scale;
            }
        }
    }
    Tensor::from_f64(vec![PATCH_PIXELS, INTERIOR_PIXELS], &m)
}

/// `[49, 25]` selection of the interior pixels.
pub fn interior_matrix<T: Real>() -> Tensor<T> {
    let mut m = vec![0.0; PATCH_PIXELS * INTERIOR_PIXELS];
    for i in 0..INTERIOR {
        for j in 0..INTERIOR {
            m[((i + 1) * PATCH + j + 1) * INTERIOR_PIXELS + i * INTERIOR + j] = 1.0;
        }
    }
    Tensor::from_f64(vec![PATCH_PIXELS, INTERIOR_PIXELS], &m)
}

/// Number of forward passes per patch needed for the residual.
pub const TIME_PASSES: usize = 5;

/// Stacks `[base; sin+ε; sin−ε; cos+ε; cos−ε]` copies of an NHWC batch.
pub fn time_perturbed_inputs<T: Real>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let batch = x.shape()[0];
    let mut data = Vec::with_capacity(x.len() * TIME_PASSES);
    data.extend_from_slice(x.data());
    let eps = T::from_f64(eps);
    for (ch, sign) in [(CH_SIN, 1.0), (CH_SIN, -1.0), (CH_COS, 1.0), (CH_COS, -1.0)] {
        let start = data.len();
        data.extend_from_slice(x.data());
        let delta = eps * T::from_f64(sign);
        for px in data[start..].chunks_mut(N_CHANNELS) {
            px[ch] += delta;
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = batch * TIME_PASSES;
    Tensor::new(shape, data)
}

/// Combines the perturbed passes `[5B, 49]` into `∂T/∂t` `[B, 49]` via
/// central differences and the seasonal chain rule.
pub fn time_derivative_graph<T: Real>(
    g: &mut Graph<T>,
    passes: Var,
    days: &[f64],
    eps: f64,
) -> Result<Var, EngineError> {
    let b = days.len();
    let sp = g.slice_rows(passes, b, 2 * b)?;
    let sm = g.slice_rows(passes, 2 * b, 3 * b)?;
    let cp = g.slice_rows(passes, 3 * b, 4 * b)?;
    let cm = g.slice_rows(passes, 4 * b, 5 * b)?;
    let w = 2.0 * PI / DAYS_PER_YEAR;
    let mut cos_w = Vec::with_capacity(b * PATCH_PIXELS);
    let mut sin_w = Vec::with_capacity(b * PATCH_PIXELS);
    for &d in days {
        let a = w * d;
        // 2π/365 · 1/(2ε) folded into the per-sample coefficients
        let f = w / (2.0 * eps);
        cos_w.extend(std::iter::repeat_n(T::from_f64(f * a.cos()), PATCH_PIXELS));
        sin_w.extend(std::iter::repeat_n(T::from_f64(f * a.sin()), PATCH_PIXELS));
    }
    let cos_w = g.constant(Tensor::new(vec![b, PATCH_PIXELS], cos_w));
    let sin_w = g.constant(Tensor::new(vec![b, PATCH_PIXELS], sin_w));
    let ds = g.sub(sp, sm)?;
    let dc = g.sub(cp, cm)?;
    let a = g.mul(ds, cos_w)?;
    let c = g.mul(dc, sin_w)?;
    g.sub(a, c)
}

/// Residual `[B, 25]` from predictions `[B, 49]`, `∂T/∂t` `[B, 49]` and raw
/// LST `[B, 49]`.
pub fn residual_graph<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    dtdt: Var,
    lst_raw: Var,
    cfg: &PhysicsConfig,
) -> Result<Var, EngineError> {
    let sel = g.constant(interior_matrix());
    let diff = g.constant(diffusion_matrix(cfg));
    let dt_int = g.matmul(dtdt, sel)?;
    let lap = g.matmul(pred, diff)?;
    let gap = g.sub(lst_raw, pred)?;
    let gap_int = g.matmul(gap, sel)?;
    let react = g.scale(gap_int, T::from_f64(cfg.alpha));
    let r = g.sub(dt_int, lap)?;
    g.sub(r, react)
}

/// Predictions and `∂T/∂t` for normalized patches, evaluated on a fresh
/// graph in precision `T`.
pub fn predict_with_time_derivative<T: Real>(
    params: &ParamStore<T>,
    model_cfg: &ModelConfig,
    target: TargetStats,
    normalized: &[&PatchSample],
    eps: f64,
) -> Result<(Vec<[f64; PATCH_PIXELS]>, Vec<[f64; PATCH_PIXELS]>)> {
    let mut g = Graph::<T>::new();
    let p = Bound::new(&mut g, params);
    let x = pack_inputs::<T>(normalized);
    let x5 = g.constant(time_perturbed_inputs(&x, eps));
    let out = net_forward_celsius(&mut g, &p, model_cfg, target, x5)?;
    let days: Vec<f64> = normalized.iter().map(|p| p.timestamp.day_of_year).collect();
    let dt = time_derivative_graph(&mut g, out, &days, eps)?;
    let base = g.slice_rows(out, 0, days.len())?;
    Ok((rows_to_maps(g.value(base).data()), rows_to_maps(g.value(dt).data())))
}

/// `∂T̂/∂t` on the 5×5 interior of one normalized patch.
pub fn temporal_derivative<T: Real>(
    params: &ParamStore<T>,
    model_cfg: &ModelConfig,
    target: TargetStats,
    normalized: &PatchSample,
    eps: f64,
) -> Result<[f64; INTERIOR_PIXELS]> {
    let (_, dt) = predict_with_time_derivative(params, model_cfg, target, &[normalized], eps)?;
    Ok(interior(&dt[0]))
}
