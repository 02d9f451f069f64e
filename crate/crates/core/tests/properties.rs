use dorm_core::backbone::{modulate_demodulate, StyleVector};
use dorm_core::dorm::{combine_styles, combine_styles_multi};
use dorm_core::encoder::{autocorr, TokenGrid};
use dorm_core::losses::{l_local, l_ss, scc_mask};
use dorm_core::metrics::{desk_fid, intra_lpips, ClusterDistance, FeatureStats};
use dorm_tensor::Tensor;
use proptest::collection::vec;
use proptest::prelude::*;

fn grid(n: usize, c: usize, data: &[f32]) -> TokenGrid {
    TokenGrid::from_tokens(Tensor::new(vec![n, c], data.to_vec()))
}

/// Token values bounded away from zero rows.
fn tokens(n: usize, c: usize) -> impl Strategy<Value = Vec<f32>> {
    vec(0.1f32..2.0, n * c).prop_flat_map(move |mag| {
        vec(any::<bool>(), n * c).prop_map(move |signs| {
            mag.iter().zip(&signs).map(|(m, s)| if *s { *m } else { -*m }).collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn demodulated_rows_have_unit_norm(w in vec(-2.0f32..2.0, 3 * 4 * 9), s in vec(0.05f32..3.0, 4)) {
        prop_assume!(w.chunks(36).all(|r| r.iter().map(|v| v * v).sum::<f32>() > 1e-2));
        let out = modulate_demodulate(&Tensor::new(vec![3, 4, 3, 3], w), &StyleVector(s), 1e-8).unwrap();
        for row in out.data().chunks(36) {
            let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum();
            prop_assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn autocorr_is_symmetric_with_unit_diagonal(t in tokens(5, 3)) {
        let m = autocorr(&grid(5, 3, &t)).m;
        for i in 0..5 {
            prop_assert!((m.data()[i * 5 + i] - 1.0).abs() < 1e-9);
            for j in 0..5 {
                prop_assert_eq!(m.data()[i * 5 + j], m.data()[j * 5 + i]);
                prop_assert!(m.data()[i * 5 + j].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn autocorr_ignores_token_scale(t in tokens(4, 3), scales in vec(0.25f32..4.0, 4)) {
        let scaled: Vec<f32> = t.chunks(3).zip(&scales).flat_map(|(r, s)| r.iter().map(move |v| v * s)).collect();
        let a = autocorr(&grid(4, 3, &t)).m;
        let b = autocorr(&grid(4, 3, &scaled)).m;
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn structure_loss_is_a_bounded_symmetric_distance(a in tokens(4, 3), b in tokens(4, 3)) {
        let (ma, mb) = (autocorr(&grid(4, 3, &a)), autocorr(&grid(4, 3, &b)));
        let ab = l_ss(&ma, &mb).unwrap();
        prop_assert!((0.0..=2.0).contains(&ab));
        prop_assert_eq!(ab, l_ss(&mb, &ma).unwrap());
        prop_assert_eq!(l_ss(&ma, &ma).unwrap(), 0.0);
    }

    #[test]
    fn local_loss_lies_in_unit_range(a in tokens(3, 4), b in tokens(2, 4)) {
        let v = l_local(&grid(3, 4, &a), &grid(2, 4, &b)).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&v));
    }

    #[test]
    fn mask_always_keeps_a_channel(dw in vec(-3.0f64..3.0, 1..40), alpha in 0.001f64..1.0) {
        let m = scc_mask(&dw, alpha).unwrap();
        prop_assert!(m.iter().any(|&k| k));
        prop_assert_eq!(m.len(), dw.len());
        // The smallest-magnitude channel is always kept.
        let (imin, _) = dw.iter().enumerate().min_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
        prop_assert!(m[imin]);
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(a in vec(-2.0f32..2.0, 3 * 12), b in vec(-2.0f32..2.0, 3 * 12)) {
        let sa = FeatureStats::from_rows(&a.chunks(3).collect::<Vec<_>>()).unwrap();
        let sb = FeatureStats::from_rows(&b.chunks(3).collect::<Vec<_>>()).unwrap();
        let ab = desk_fid(&sa, &sb).unwrap();
        let ba = desk_fid(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
    }

    #[test]
    fn merged_stats_do_not_depend_on_split(rows in vec(-2.0f32..2.0, 2 * 10), split in 1usize..9) {
        let chunks: Vec<&[f32]> = rows.chunks(2).collect();
        let all = FeatureStats::from_rows(&chunks).unwrap();
        let merged = FeatureStats::from_rows(&chunks[..split]).unwrap().merge(&FeatureStats::from_rows(&chunks[split..]).unwrap()).unwrap();
        for (x, y) in all.covariance().iter().zip(merged.covariance().iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn intra_lpips_ignores_synth_order(points in vec(-5.0f64..5.0, 2..12), train in vec(-5.0f64..5.0, 1..4), rot in 0usize..12) {
        let d = |a: &f64, b: &f64| (a - b).abs();
        let mut shuffled = points.clone();
        let k = rot % points.len();
        shuffled.rotate_left(k);
        for mode in [ClusterDistance::ToCenter, ClusterDistance::Pairwise] {
            let a = intra_lpips(&points, &train, mode, d, d).unwrap();
            let b = intra_lpips(&shuffled, &train, mode, d, d).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blending_is_linear(s_s in vec(-2.0f32..2.0, 6), s_t in vec(-2.0f32..2.0, 6), alpha in 0.0f32..=1.0) {
        let (ss, st) = (StyleVector(s_s.clone()), StyleVector(s_t.clone()));
        let one = combine_styles(&ss, &st, alpha).unwrap();
        prop_assert_eq!(&one, &combine_styles_multi(&ss, &[(&st, alpha)]).unwrap());
        for i in 0..6 {
            let want = s_s[i] as f64 + alpha as f64 * (s_t[i] as f64 - s_s[i] as f64);
            prop_assert!((one.0[i] as f64 - want).abs() < 1e-5);
        }
    }
}
