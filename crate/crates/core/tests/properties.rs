use cxrcast::autodiff::{clip_global_norm, global_norm, softmax_in_place, Graph, LrSchedule, Tensor};
use cxrcast::clinical::{bin_hourly, impute, ObsValue, Observation, VariableSet, VariableSpec};
use cxrcast::metrics::{auprc, auroc};
use cxrcast::trajectory::{build_track, interpolate_track, CxrEvent};
use proptest::prelude::*;

fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((-50i32..50, any::<bool>()), 2..40)
        .prop_map(|v| v.into_iter().map(|(s, y)| (s as f64 / 4.0, y)).unzip())
        .prop_filter("both classes", |(_, y): &(Vec<f64>, Vec<bool>)| {
            y.iter().any(|&b| b) && y.iter().any(|&b| !b)
        })
}

fn events(hours: &[usize], dim: usize, seed: u64) -> Vec<CxrEvent> {
    let mut x = seed;
    hours
        .iter()
        .map(|&hour| CxrEvent {
            hour,
            embedding: (0..dim)
                .map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((x >> 40) as f32 / (1u64 << 24) as f32) * 4.0 - 2.0
                })
                .collect(),
            labels: None,
        })
        .collect()
}

fn anchor_hours() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0usize..120, 2..6).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #[test]
    fn normalize_is_monotone(a in -500.0f64..500.0, b in -500.0f64..500.0, lo in -50.0f64..50.0, w in 0.1f64..100.0) {
        let spec = VariableSpec::numeric("x", (-1e4, 1e4), (lo, lo + w));
        let (na, nb) = (spec.normalize(a), spec.normalize(b));
        if a < b { prop_assert!(na <= nb); }
        prop_assert_eq!(spec.normalize(spec.healthy_midpoint().unwrap()), 0.5);
    }

    #[test]
    fn impute_ignores_observation_order(seed in any::<u64>(), n in 1usize..40) {
        let vars = VariableSet::default_icu();
        let names: Vec<String> = vars.specs().iter().map(|s| s.name.clone()).collect();
        let mut x = seed;
        let mut next = |m: u64| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); (x >> 33) % m };
        let obs: Vec<Observation> = (0..n)
            .map(|_| {
                let spec = &vars.specs()[next(names.len() as u64) as usize];
                let value = match spec.categories.as_ref() {
                    Some(c) => ObsValue::Label(c[next(c.len() as u64) as usize].clone()),
                    None => ObsValue::Number(spec.healthy_midpoint().unwrap() + next(7) as f64 - 3.0),
                };
                // one observation per (variable, hour) keeps bin aggregation order-free
                Observation { var: spec.name.clone(), hour: next(1000) as f64 + 0.5, value }
            })
            .collect();
        let mut seen = std::collections::HashSet::new();
        let obs: Vec<Observation> = obs.into_iter().filter(|o| seen.insert((o.var.clone(), o.hour as u64))).collect();
        let mut rev = obs.clone();
        rev.reverse();
        let a = impute(&bin_hourly(&obs, &vars, 24).unwrap(), &vars);
        let b = impute(&bin_hourly(&rev, &vars, 24).unwrap(), &vars);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn categorical_blocks_are_one_hot(seed in any::<u64>()) {
        let vars = VariableSet::default_icu();
        let spec = vars.specs().iter().find(|s| s.categories.is_some()).unwrap().clone();
        let cats = spec.categories.clone().unwrap();
        let k = (seed as usize) % cats.len();
        let obs = vec![Observation { var: spec.name.clone(), hour: 3.2, value: ObsValue::Label(cats[k].clone()) }];
        let rows = impute(&bin_hourly(&obs, &vars, 8).unwrap(), &vars);
        let off = vars.offset(vars.position(&spec.name).unwrap());
        for row in &rows {
            let block = &row.values[off..off + cats.len()];
            prop_assert_eq!(block.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(block.iter().sum::<f64>(), 1.0);
        }
        for row in &rows[3..] {
            prop_assert_eq!(row.values[off + k], 1.0);
        }
    }

    #[test]
    fn numeric_values_forward_fill(v in 0.0f64..200.0, h in 0usize..20) {
        let vars = VariableSet::default_icu();
        let spec = vars.specs().iter().find(|s| s.categories.is_none()).unwrap().clone();
        let obs = vec![Observation { var: spec.name.clone(), hour: h as f64 + 0.25, value: ObsValue::Number(v.clamp(spec.phys_lo.unwrap(), spec.phys_hi.unwrap())) }];
        let rows = impute(&bin_hourly(&obs, &vars, 24).unwrap(), &vars);
        let col = vars.offset(vars.position(&spec.name).unwrap());
        for (t, row) in rows.iter().enumerate() {
            if t < h {
                prop_assert_eq!(row.values[col], 0.5);
            } else {
                prop_assert_eq!(row.values[col], rows[h].values[col]);
                prop_assert_eq!(row.observed_mask[col], t == h);
            }
        }
    }

    #[test]
    fn interpolation_stays_within_anchor_bounds(hours in anchor_hours(), seed in any::<u64>()) {
        let ev = events(&hours, 6, seed);
        let anchors: Vec<(usize, &[f32])> = ev.iter().map(|e| (e.hour, e.embedding.as_slice())).collect();
        let track = interpolate_track(&anchors).unwrap();
        let first = hours[0];
        for pair in ev.windows(2) {
            for t in pair[0].hour..=pair[1].hour {
                let row = &track[(t - first) * 6..(t - first + 1) * 6];
                for d in 0..6 {
                    let (a, b) = (pair[0].embedding[d], pair[1].embedding[d]);
                    prop_assert!(row[d] >= a.min(b) && row[d] <= a.max(b));
                }
            }
        }
        for e in &ev {
            let row = &track[(e.hour - first) * 6..(e.hour - first + 1) * 6];
            prop_assert_eq!(row, e.embedding.as_slice());
        }
    }

    #[test]
    fn previous_track_never_sees_the_current_or_later_cxr(hours in anchor_hours(), seed in any::<u64>()) {
        let ev = events(&hours, 3, seed);
        let track = build_track(&ev).unwrap();
        for t in track.t_first..=track.t_last {
            let expected = ev.iter().rev().find(|e| e.hour < t).unwrap_or(&ev[0]);
            prop_assert_eq!(track.previous_at(t), expected.embedding.as_slice());
        }
        // editing a CXR leaves every earlier-or-equal hour of the previous track unchanged
        let k = (seed as usize) % ev.len();
        let mut edited = ev.clone();
        edited[k].embedding.iter_mut().for_each(|x| *x += 9.0);
        let other = build_track(&edited).unwrap();
        for t in track.t_first..=ev[k].hour.max(track.t_first) {
            if t == track.t_first && k == 0 { continue; }
            prop_assert_eq!(track.previous_at(t), other.previous_at(t));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-80.0f64..80.0, 1..30), shift in -500.0f64..500.0) {
        let mut a = row.clone();
        softmax_in_place(&mut a);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let mut b: Vec<f64> = row.iter().map(|x| x + shift).collect();
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized(row in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        prop_assume!(row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64 > 1e-3);
        let n = row.len();
        let mut g = Graph::new();
        let x = g.input(Tensor::new([1, n], row).unwrap(), false);
        let y = g.layer_norm(x, None, None, 1e-12).unwrap();
        let out = g.value(y).data();
        let m = out.iter().sum::<f64>() / n as f64;
        let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(m.abs() < 1e-9);
        prop_assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm_and_keeps_direction(
        data in prop::collection::vec(-100.0f32..100.0, 1..50),
        max in 0.01f64..10.0,
    ) {
        let mut grads = vec![Tensor::new([data.len()], data.clone()).unwrap()];
        let before = clip_global_norm(&mut grads, max);
        let after = global_norm(&grads);
        prop_assert!(after <= max);
        if before <= max {
            prop_assert_eq!(grads[0].data(), data.as_slice());
        } else if before > 0.0 {
            for (g, d) in grads[0].data().iter().zip(&data) {
                prop_assert!(g.signum() == d.signum() || *d == 0.0);
            }
        }
    }

    #[test]
    fn lr_schedule_rises_then_decays(peak in 1e-5f64..1e-1, total in 10usize..5000, frac in 0.0f64..0.5) {
        let s = LrSchedule::new(peak, total, frac);
        let lrs: Vec<f64> = (0..=total).map(|t| s.lr_at(t).unwrap()).collect();
        prop_assert!(lrs.iter().all(|&l| (0.0..=peak * (1.0 + 1e-12)).contains(&l)));
        for t in 0..total {
            if t + 1 <= s.warmup_steps {
                prop_assert!(lrs[t + 1] >= lrs[t]);
            } else {
                prop_assert!(lrs[t + 1] <= lrs[t] + 1e-18);
            }
        }
        prop_assert!((lrs[s.warmup_steps] - peak).abs() <= peak * 1e-12);
        prop_assert!(lrs[total].abs() < peak * 1e-12);
        prop_assert!(s.lr_at(total + 1).is_err());
    }

    #[test]
    fn auroc_ignores_monotone_transforms((scores, labels) in labeled_scores(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let moved: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert_eq!(auroc(&scores, &labels), auroc(&moved, &labels));
        prop_assert_eq!(auprc(&scores, &labels), auprc(&moved, &labels));
    }

    #[test]
    fn metrics_ignore_sample_order((scores, labels) in labeled_scores(), rot in 0usize..40) {
        let n = scores.len();
        let r = rot % n;
        let s2: Vec<f64> = (0..n).map(|i| scores[(i + r) % n]).collect();
        let l2: Vec<bool> = (0..n).map(|i| labels[(i + r) % n]).collect();
        let (a1, a2) = (auroc(&scores, &labels).unwrap(), auroc(&s2, &l2).unwrap());
        prop_assert!((a1 - a2).abs() < 1e-12);
        let (p1, p2) = (auprc(&scores, &labels).unwrap(), auprc(&s2, &l2).unwrap());
        prop_assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn flipping_scores_mirrors_auroc((scores, labels) in labeled_scores()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_class_metrics_are_undefined() {
    assert_eq!(auroc(&[0.1, 0.5], &[true, true]), None);
    assert_eq!(auprc(&[0.1, 0.5], &[false, false]), None);
}
