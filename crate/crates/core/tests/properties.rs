use proptest::prelude::*;

use spycer::baselines::idw_value;
use spycer::engine::{Graph, Tensor};
use spycer::eval::{mae, make_folds, rmse, test_count, MetricsTable, PredictionRecord};
use spycer::grid::{encode_time, project_sensor, unproject, GridMeta, CENTER, HALF, PATCH, PATCH_PIXELS};
use spycer::model::attention_weights_from_logits;
use spycer::physics::{laplacian5, INTERIOR_PIXELS};
use spycer::sim::AdrScheme;

fn patch_values() -> impl Strategy<Value = [f64; PATCH_PIXELS]> {
    prop::array::uniform32(-50.0..50.0f64).prop_flat_map(|head| {
        prop::array::uniform17(-50.0..50.0f64).prop_map(move |tail| {
            let mut out = [0.0; PATCH_PIXELS];
            out[..32].copy_from_slice(&head);
            out[32..].copy_from_slice(&tail);
            out
        })
    })
}

fn weights(logits: &[Vec<f64>], sigma: Option<f64>) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let heads: Vec<_> = logits.iter().map(|l| g.constant(Tensor::new(vec![1, PATCH_PIXELS], l.clone()))).collect();
    let w = attention_weights_from_logits(&mut g, &heads, sigma).unwrap();
    g.value(w).data().to_vec()
}

fn offset(p: usize) -> (i64, i64) {
    ((p / PATCH) as i64 - HALF as i64, (p % PATCH) as i64 - HALF as i64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_is_linear(f in patch_values(), g in patch_values(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mut comb = [0.0; PATCH_PIXELS];
        for i in 0..PATCH_PIXELS {
            comb[i] = a * f[i] + b * g[i];
        }
        let (lf, lg, lc) = (laplacian5(&f, 10.0), laplacian5(&g, 10.0), laplacian5(&comb, 10.0));
        for i in 0..INTERIOR_PIXELS {
            prop_assert!((lc[i] - (a * lf[i] + b * lg[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_is_a_distribution_over_neighbors(
        logits in prop::collection::vec(prop::collection::vec(-8.0..8.0f64, PATCH_PIXELS), 1..5),
        gaussian in any::<bool>(),
    ) {
        let w = weights(&logits, gaussian.then_some(1.5));
        prop_assert_eq!(w[CENTER], 0.0);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_weight_decays_with_distance(sigma in 0.5..4.0f64) {
        let w = weights(&[vec![0.0; PATCH_PIXELS]], Some(sigma));
        for p in 0..PATCH_PIXELS {
            for q in 0..PATCH_PIXELS {
                if p == CENTER || q == CENTER {
                    continue;
                }
                let (dp, dq) = (offset(p), offset(q));
                let (rp, rq) = (dp.0 * dp.0 + dp.1 * dp.1, dq.0 * dq.0 + dq.1 * dq.1);
                if rp < rq {
                    prop_assert!(w[p] > w[q]);
                }
            }
        }
    }

    #[test]
    fn time_encoding_lies_on_unit_circle(d in 0.0..366.0f64) {
        let (s, c) = encode_time(d);
        prop_assert!((s * s + c * c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_round_trips(w in 7usize..60, h in 7usize..60, r in 0usize..60, c in 0usize..60, res in 1.0..30.0f64) {
        let meta = GridMeta::new(w, h, res, 500000.0, 4800000.0).unwrap();
        prop_assume!(meta.patch_fits(r, c));
        let (x, y) = unproject(r, c, &meta);
        prop_assert_eq!(project_sensor(x, y, &meta).unwrap(), (r, c));
        let jitter = 0.49 * res;
        prop_assert_eq!(project_sensor(x + jitter, y - jitter, &meta).unwrap(), (r, c));
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((-40.0..40.0f64, -40.0..40.0f64), 1..50)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(rmse(&p, &t).unwrap() >= mae(&p, &t).unwrap() - 1e-12);
    }

    #[test]
    fn idw_stays_within_reading_range(
        pts in prop::collection::vec((0.0..1000.0f64, 0.0..1000.0f64, -10.0..40.0f64), 1..12),
        x in 0.0..1000.0f64,
        y in 0.0..1000.0f64,
    ) {
        let v = idw_value(x, y, &pts, 2.0).unwrap();
        let lo = pts.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
    }

    #[test]
    fn folds_are_disjoint_and_cover(n in 5usize..60, k in 1usize..12, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("S{i:02}")).collect();
        let plan = make_folds(&ids, k, seed).unwrap();
        prop_assert_eq!(plan.folds.len(), k);
        for f in &plan.folds {
            prop_assert_eq!(f.test.len(), test_count(n));
            prop_assert!(f.test.iter().all(|t| !f.train.contains(t)));
            let mut all: Vec<String> = f.train.iter().chain(&f.test).cloned().collect();
            all.sort();
            prop_assert_eq!(&all, &ids);
        }
        prop_assert_eq!(make_folds(&ids, k, seed).unwrap(), plan);
    }

    #[test]
    fn monthly_cells_partition_the_samples(
        rows in prop::collection::vec((0usize..3, 1u32..13, 1u32..28, -5.0..5.0f64), 6..80),
    ) {
        let records: Vec<PredictionRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(fold, m, d, e))| PredictionRecord {
                fold,
                method: "m".into(),
                sensor: format!("S{i}"),
                date: format!("2025-{m:02}-{d:02}"),
                month: format!("2025-{m:02}"),
                pred: 20.0 + e,
                truth: 20.0,
            })
            .collect();
        let table = MetricsTable::from_records(&records).unwrap();
        let monthly: usize = table.cells.iter().filter(|c| c.month != "all").map(|c| c.n_samples).sum();
        prop_assert_eq!(monthly, records.len());
        prop_assert_eq!(table.overall("m").unwrap().n_samples, records.len());
        for c in &table.cells {
            prop_assert!(c.rmse_mean >= c.mae_mean - 1e-12);
        }
    }

    #[test]
    fn euler_step_obeys_maximum_principle(
        t0 in prop::collection::vec(0.0..30.0f64, 100),
        ts in prop::collection::vec(0.0..30.0f64, 100),
        u in -2.0..2.0f64,
        v in -2.0..2.0f64,
    ) {
        let scheme = AdrScheme { width: 10, height: 10, h: 10.0, k_eff: 80.0, alpha: 0.5, wind_u: u, wind_v: v };
        let dt = scheme.stable_dt(0.05).unwrap();
        let mut t = t0.clone();
        let mut scratch = vec![0.0; 100];
        for _ in 0..20 {
            scheme.step(&mut t, &ts, dt, &mut scratch);
        }
        let lo = t0.iter().chain(&ts).cloned().fold(f64::INFINITY, f64::min);
        let hi = t0.iter().chain(&ts).cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(t.iter().all(|&x| x >= lo - 1e-9 && x <= hi + 1e-9));
    }
}
