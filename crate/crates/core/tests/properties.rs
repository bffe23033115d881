use mfwb_core::alignment::{apply_adapter, rerank, AdapterModel};
use mfwb_core::axis::{min_max_position, one_end_position};
use mfwb_core::baselines::{isotonic_increasing, mds_project};
use mfwb_core::fusion::{build_merged_matrix, euclidean_matrix};
use mfwb_core::mfm::ordinal_loss;
use mfwb_core::quality::{continuity, trustworthiness, zscore_outliers, NeighborhoodFilter};
use mfwb_core::{EmbeddingDataset, EmbeddingPoint, Modality};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn coords(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y)| [x, y]), n)
}

fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), n)
        .prop_filter("non-zero", |vs| vs.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3))
}

fn dataset(vs: &[Vec<f64>], n_text: usize) -> EmbeddingDataset {
    let pts = vs
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let m = if i < n_text { Modality::Text } else { Modality::Image };
            EmbeddingPoint::new(format!("p{i:02}"), m, v.clone()).with_set(if i % 2 == 0 { "even" } else { "odd" })
        })
        .collect();
    EmbeddingDataset::new(vs[0].len(), pts, vec![]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trust_and_continuity_in_unit_interval(a in coords(10), b in coords(10), k in 1usize..4) {
        let (h, l) = (euclidean_matrix(&a), euclidean_matrix(&b));
        let t = trustworthiness(&h, &l, k, NeighborhoodFilter::All).unwrap();
        let c = continuity(&h, &l, k, NeighborhoodFilter::All).unwrap();
        prop_assert!((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&c));
        prop_assert_eq!(c, trustworthiness(&l, &h, k, NeighborhoodFilter::All).unwrap());
    }

    #[test]
    fn metrics_ignore_rigid_motion_and_scale(a in coords(9), b in coords(9), theta in 0.0..std::f64::consts::TAU, s in 0.1..10.0f64, k in 1usize..3) {
        let moved: Vec<[f64; 2]> = b
            .iter()
            .map(|p| {
                let (c, sn) = (theta.cos(), theta.sin());
                [s * (c * p[0] - sn * p[1]) + 3.0, s * (sn * p[0] + c * p[1]) - 1.0]
            })
            .collect();
        let h = euclidean_matrix(&a);
        let t1 = trustworthiness(&h, &euclidean_matrix(&b), k, NeighborhoodFilter::All).unwrap();
        let t2 = trustworthiness(&h, &euclidean_matrix(&moved), k, NeighborhoodFilter::All).unwrap();
        prop_assert!((t1 - t2).abs() < 1e-12);
    }

    #[test]
    fn merged_matrix_is_symmetric_with_zero_diagonal(vs in vectors(8, 5), n_text in 2usize..6) {
        let m = build_merged_matrix(&dataset(&vs, n_text)).unwrap().full();
        for a in 0..m.nrows() {
            prop_assert_eq!(m[(a, a)], 0.0);
            for b in 0..m.nrows() {
                prop_assert!((m[(a, b)] - m[(b, a)]).abs() < 1e-12);
                prop_assert!(m[(a, b)] >= 0.0);
            }
        }
    }

    #[test]
    fn ordinal_loss_is_nonnegative_and_scale_free(ti in prop::collection::vec(0.0..2.0f64, 12), p in prop::collection::vec(0.1..5.0f64, 12), s in 0.1..10.0f64) {
        let ti = DMatrix::from_vec(3, 4, ti);
        let p = DMatrix::from_vec(3, 4, p);
        let l = ordinal_loss(&ti, &p).unwrap();
        prop_assert!(l >= 0.0);
        // Numerator and Frobenius norm scale together.
        let scaled = ordinal_loss(&ti, &(&p * s)).unwrap();
        prop_assert!((l - scaled).abs() < 1e-9 * l.max(1.0));
    }

    #[test]
    fn pava_output_is_monotone_and_mean_preserving(y in prop::collection::vec(-5.0..5.0f64, 1..30)) {
        let fit = isotonic_increasing(&y);
        prop_assert_eq!(fit.len(), y.len());
        for w in fit.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-12);
        }
        let (a, b): (f64, f64) = (y.iter().sum(), fit.iter().sum());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn smacof_stress_is_monotone(pts in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 6..12), seed in 0u64..1000) {
        let n = pts.len();
        let d = DMatrix::from_fn(n, n, |a, b| pts[a].iter().zip(&pts[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        let out = mds_project(&d, seed).unwrap();
        for w in out.stress_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn one_end_absorbs_increasing_affine_maps(sims in prop::collection::vec(-1.0..1.0f64, 3..10), a in 0.1..5.0f64, b in -3.0..3.0f64) {
        let (min, max) = sims.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        prop_assume!(max - min > 1e-6);
        for &s in &sims {
            let p1 = min_max_position(s, min, max, 100.0).value;
            let p2 = min_max_position(a * s + b, a * min + b, a * max + b, 100.0).value;
            prop_assert!((p1 - p2).abs() < 1e-9);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&p1));
        }
    }

    #[test]
    fn zscores_sum_to_zero(vs in vectors(7, 4)) {
        let ds = dataset(&vs, 0);
        let z = zscore_outliers(&ds, "even").unwrap();
        let sum: f64 = z.scores.iter().map(|(_, v)| v).sum();
        prop_assert!(sum.abs() < 1e-9);
    }

    #[test]
    fn adapter_keeps_ids_and_rerank_permutes(vs in vectors(8, 4), noise in prop::collection::vec(-0.3..0.3f64, 20)) {
        let ds = dataset(&vs, 2);
        let mut adapter = AdapterModel::identity(4, None, 0);
        for (p, n) in adapter.params.iter_mut().zip(&noise) {
            *p += n;
        }
        if let Ok(out) = apply_adapter(&ds, &adapter) {
            prop_assert_eq!(out.len(), ds.len());
            for (a, b) in ds.points().iter().zip(out.points()) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(a.modality, b.modality);
                let norm: f64 = b.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
            let cands: Vec<String> = ds.points()[1..].iter().map(|p| p.id.clone()).collect();
            let ranked = rerank("p00", &cands, &ds, Some(&adapter)).unwrap();
            let mut ids: Vec<String> = ranked.into_iter().map(|r| r.id).collect();
            ids.sort();
            prop_assert_eq!(ids, cands);
        }
    }
}

#[test]
fn cohort_extremes_land_on_axis_ends() {
    let cohort: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]];
    let refs: Vec<&[f64]> = cohort.iter().map(Vec::as_slice).collect();
    let concept = [1.0, 0.0];
    assert_eq!(one_end_position(&cohort[0], &concept, &refs, 7.0).value, 7.0);
    assert_eq!(one_end_position(&cohort[2], &concept, &refs, 7.0).value, 0.0);
    assert!((one_end_position(&cohort[1], &concept, &refs, 7.0).value - 4.2).abs() < 1e-12);
}
