mod common;

use dorm_core::encoder::Encoder;
use dorm_core::image::ImageTensor;
use dorm_core::metrics::{
    cosine_distance, desk_fid, domain_similarity, domain_similarity_features, id_similarity_proxy, intra_lpips,
    intra_lpips_images, perceptual_distance, perceptual_features, ClusterDistance, FeatureStats,
};
use dorm_core::toy::{ToyDomainSpec, ToyStyle};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `tr sqrt(AB)` from the eigenvalues of the general product `AB`, which are
/// real and non-negative for covariance matrices.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a * b).complex_eigenvalues().iter().map(|e| e.re.max(0.0).sqrt()).sum()
}

fn random_stats(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mix = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
    let rows: Vec<Vec<f32>> = (0..count)
        .map(|_| {
            let e: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (0..dim).map(|i| (0..dim).map(|j| mix[(i, j)] * e[j]).sum::<f64>() as f32 + 0.3).collect()
        })
        .collect();
    let s = FeatureStats::from_rows(&rows).unwrap();
    (s.mean().to_vec(), s.covariance())
}

#[test]
fn fid_matches_eigenvalue_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let (ma, ca) = random_stats(&mut rng, 4, 40);
        let (mb, cb) = random_stats(&mut rng, 4, 40);
        let a = FeatureStats::from_moments(ma.clone(), &ca, 40).unwrap();
        let b = FeatureStats::from_moments(mb.clone(), &cb, 40).unwrap();
        let dmu: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
        let want = dmu + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
        let got = desk_fid(&a, &b).unwrap();
        assert!((got - want).abs() / want.abs().max(1e-12) < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn fid_closed_forms() {
    let one = DMatrix::from_element(1, 1, 1.0);
    let a = FeatureStats::from_moments(vec![0.0], &one, 5).unwrap();
    let b = FeatureStats::from_moments(vec![1.0], &one, 5).unwrap();
    assert!((desk_fid(&a, &b).unwrap() - 1.0).abs() < 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (m, c) = random_stats(&mut rng, 6, 30);
    let s = FeatureStats::from_moments(m, &c, 30).unwrap();
    assert!(desk_fid(&s, &s).unwrap().abs() < 1e-8);
}

#[test]
fn fid_rejects_bad_inputs() {
    let a = FeatureStats::from_rows(&[[1.0f32, 2.0], [2.0, 1.0]]).unwrap();
    let b = FeatureStats::from_rows(&[[1.0f32], [2.0]]).unwrap();
    assert!(desk_fid(&a, &b).is_err());
    let single = FeatureStats::from_rows(&[[1.0f32, 2.0]]).unwrap();
    assert!(desk_fid(&a, &single).is_err());
    assert!(FeatureStats::from_rows::<[f32; 2]>(&[]).is_err());
}

/// Two training items, four synthesized items, distances given by a table.
#[test]
fn intra_lpips_matches_assignment_enumeration() {
    let to_train = [[0.1, 0.5], [0.4, 0.2], [0.3, 0.3], [0.6, 0.05]];
    let pair = [
        [0.0, 0.7, 0.2, 0.9],
        [0.7, 0.0, 0.5, 0.3],
        [0.2, 0.5, 0.0, 0.8],
        [0.9, 0.3, 0.8, 0.0],
    ];
    let synth = [0usize, 1, 2, 3];
    let train = [0usize, 1];
    let dt = |s: &usize, t: &usize| to_train[*s][*t];
    let dp = |a: &usize, b: &usize| pair[*a][*b];

    // Enumerate all 2^4 assignments and keep the cheapest.
    let mut best = (f64::INFINITY, vec![]);
    for code in 0..16u32 {
        let assign: Vec<usize> = (0..4).map(|i| ((code >> (3 - i)) & 1) as usize).collect();
        let cost: f64 = (0..4).map(|i| to_train[i][assign[i]]).sum();
        if cost < best.0 - 1e-15 {
            best = (cost, assign);
        }
    }
    let assign = best.1;
    let mut center = Vec::new();
    let mut pairwise = Vec::new();
    for k in 0..2 {
        let members: Vec<usize> = (0..4).filter(|&i| assign[i] == k).collect();
        if members.is_empty() {
            continue;
        }
        center.push(members.iter().map(|&i| to_train[i][k]).sum::<f64>() / members.len() as f64);
        if members.len() >= 2 {
            let mut s = 0.0;
            let mut n = 0.0;
            for a in 0..members.len() {
                for b in a + 1..members.len() {
                    s += pair[members[a]][members[b]];
                    n += 1.0;
                }
            }
            pairwise.push(s / n);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(intra_lpips(&synth, &train, ClusterDistance::ToCenter, dt, dp).unwrap(), mean(&center));
    assert_eq!(intra_lpips(&synth, &train, ClusterDistance::Pairwise, dt, dp).unwrap(), mean(&pairwise));
}

#[test]
fn intra_lpips_of_duplicates_is_zero() {
    let enc = Encoder::default_for(32);
    let train = ToyDomainSpec::new(ToyStyle::Color, 3, 5).generate().unwrap();
    let synth: Vec<&ImageTensor> = (0..9).map(|i| &train[i % 3]).collect();
    let refs: Vec<&ImageTensor> = train.iter().collect();
    assert_eq!(intra_lpips_images(&enc, &synth, &refs, ClusterDistance::ToCenter).unwrap(), 0.0);
    assert!(intra_lpips_images(&enc, &[], &refs, ClusterDistance::ToCenter).is_err());
}

#[test]
fn perceptual_distance_basics() {
    let enc = Encoder::default_for(32);
    let imgs = ToyDomainSpec::new(ToyStyle::Textured, 2, 8).generate().unwrap();
    let (x, y) = (&imgs[0], &imgs[1]);
    assert_eq!(perceptual_distance(&enc, x, x).unwrap(), 0.0);
    let dxy = perceptual_distance(&enc, x, y).unwrap();
    assert!((dxy - perceptual_distance(&enc, y, x).unwrap()).abs() < 1e-9);
    let (fx, fy) = (perceptual_features(&enc, x).unwrap(), perceptual_features(&enc, y).unwrap());
    let dot: f64 = fx.iter().zip(&fy).map(|(a, b)| a * b).sum();
    let nx = fx.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = fy.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!((dxy - (1.0 - dot / (nx * ny))).abs() < 1e-12);
    assert!(dxy > 0.0);
}

#[test]
fn id_proxy_prefers_aligned_pairs() {
    let enc = Encoder::default_for(32);
    let a = ToyDomainSpec::new(ToyStyle::Color, 24, 3).generate().unwrap();
    let b = ToyDomainSpec::new(ToyStyle::Textured, 24, 3).generate().unwrap();
    let ra: Vec<&ImageTensor> = a.iter().collect();
    let rb: Vec<&ImageTensor> = b.iter().collect();
    assert!((id_similarity_proxy(&enc, &ra, &ra).unwrap() - 1.0).abs() < 1e-6);
    let aligned = id_similarity_proxy(&enc, &ra, &rb).unwrap();
    let mut shuffled = rb.clone();
    shuffled.rotate_left(7);
    let control = id_similarity_proxy(&enc, &ra, &shuffled).unwrap();
    assert!(aligned > control, "aligned {aligned} vs shuffled {control}");
    assert!(id_similarity_proxy(&enc, &[], &[]).is_err());
    assert!(id_similarity_proxy(&enc, &ra, &rb[..3]).is_err());
}

#[test]
fn domain_similarity_cases() {
    let enc = Encoder::default_for(32);
    let a = ToyDomainSpec::new(ToyStyle::Color, 4, 3).generate().unwrap();
    let ra: Vec<&ImageTensor> = a.iter().collect();
    assert!((domain_similarity(&enc, &ra, &ra).unwrap() - 1.0).abs() < 1e-6);
    assert!(domain_similarity_features(&[vec![1.0, 0.0]], &[vec![0.0, 3.0]]).abs() < 1e-12);
    let v = domain_similarity_features(&[vec![1.0, 0.0], vec![1.0, 2.0]], &[vec![1.0, 1.0]]);
    // mean [1, 1] against [1, 1]
    assert!((v - 1.0).abs() < 1e-12);
    let w = domain_similarity_features(&[vec![3.0, 4.0]], &[vec![1.0, 0.0]]);
    assert!((w - 0.6).abs() < 1e-12);
    assert_eq!(cosine_distance(&[1.0], &[1.0]), 0.0);
}

#[test]
fn fid_of_identical_encoder_stats_is_zero() {
    let enc = Encoder::default_for(32);
    let imgs = ToyDomainSpec::new(ToyStyle::GrayscaleOutline, 200, 31).generate().unwrap();
    let s = FeatureStats::of_images(&enc, &imgs.iter().collect::<Vec<_>>()).unwrap();
    let fid = desk_fid(&s, &s).unwrap();
    assert!(fid < 1e-9, "{fid}");
}
