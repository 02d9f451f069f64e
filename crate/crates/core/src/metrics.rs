//! Desk-scale evaluation: Fréchet distance over encoder features, intra-cluster
//! perceptual diversity and cosine similarity proxies.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{ensure, Result};
use crate::image::ImageTensor;


/// Running mean and covariance of feature vectors (unbiased estimator).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    mean: Vec<f64>,
    /// Sum of outer products of deviations from the mean, row-major `c × c`.
    m2: Vec<f64>,
    count: usize,
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
            count: 0,
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        ensure!(!rows.is_empty(), "no feature rows");
        let mut s = Self::new(rows[0].as_ref().len());
        for r in rows {
            s.push(r.as_ref())?;
        }
        Ok(s)
    }

    /// Pooled encoder features of `images`.
    pub fn of_images(encoder: &Encoder, images: &[&ImageTensor]) -> Result<Self> {
        Self::from_rows(&encoder.pooled_batch(images)?)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Welford update with one sample.
    pub fn push(&mut self, x: &[f32]) -> Result<()> {
        ensure!(
            x.len() == self.dim(),
            "feature has {} entries, expected {}",
            x.len(),
            self.dim()
        );
        self.count += 1;
        let n = self.count as f64;
        let c = self.dim();
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(&v, m)| v as f64 - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        for i in 0..c {
            let after_i = x[i] as f64 - self.mean[i];
            for j in 0..c {
                self.m2[i * c + j] += delta[j] * after_i;
            }
        }
        Ok(())
    }

    /// Chan et al. parallel merge; the result does not depend on how samples were split.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        ensure!(self.dim() == other.dim(), "cannot merge stats of different dimension");
        if self.count == 0 {
            return Ok(other.clone());
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let c = self.dim();
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let mean = self.mean.iter().zip(&delta).map(|(a, d)| a + d * nb / n).collect();
        let mut m2 = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                m2[i * c + j] =
                    self.m2[i * c + j] + other.m2[i * c + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        Ok(Self {
            mean,
            m2,
            count: self.count + other.count,
        })
    }

    /// Unbiased covariance, symmetrized.
    pub fn covariance(&self) -> DMatrix<f64> {
        let c = self.dim();
        let denom = (self.count.max(2) - 1) as f64;
        let m = DMatrix::from_row_slice(c, c, &self.m2) / denom;
        (&m + m.transpose()) * 0.5
    }

    /// Stats straight from a mean and covariance (used for closed-form checks).
    pub fn from_moments(mean: Vec<f64>, covariance: &DMatrix<f64>, count: usize) -> Result<Self> {
        let c = mean.len();
        ensure!(
            covariance.nrows() == c && covariance.ncols() == c,
            "covariance must be {c}x{c}"
        );
        ensure!(count >= 2, "need at least two samples");
        let m2 = (covariance * (count - 1) as f64).transpose().iter().copied().collect();
        Ok(Self { mean, m2, count })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^½)`, clamped at zero.
///
/// The trace term is taken as `Tr((Σ_a^½ Σ_b Σ_a^½)^½)`, which has the same
/// eigenvalues as `(Σ_a Σ_b)^½` but is symmetric.
pub fn desk_fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    ensure!(
        a.dim() == b.dim(),
        "feature dimensions differ ({} vs {})",
        a.dim(),
        b.dim()
    );
    ensure!(a.count >= 2 && b.count >= 2, "need at least two samples per side");
    let mu = DVector::from_iterator(a.dim(), a.mean.iter().zip(&b.mean).map(|(x, y)| x - y));
    let (ca, cb) = (a.covariance(), b.covariance());
    let sa = psd_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .sum();
    let fid = mu.norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(fid.max(0.0))
}

/// Desk-FID between two image sets under `encoder`.
pub fn desk_fid_images(encoder: &Encoder, a: &[&ImageTensor], b: &[&ImageTensor]) -> Result<f64> {
    desk_fid(&FeatureStats::of_images(encoder, a)?, &FeatureStats::of_images(encoder, b)?)
}

/// How distances inside one cluster are summarized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterDistance {
    /// Mean distance of each member to its training image.
    #[default]
    ToCenter,
    /// Mean distance over all member pairs (clusters with one member are skipped).
    Pairwise,
}

/// Assign each synthesized item to its nearest training item, summarize each
/// cluster, then average over the non-empty clusters. Ties go to the lower index.
pub fn intra_lpips<S, T>(
    synth: &[S],
    train: &[T],
    mode: ClusterDistance,
    dist_to_train: impl Fn(&S, &T) -> f64,
    dist_pair: impl Fn(&S, &S) -> f64,
) -> Result<f64> {
    ensure!(!synth.is_empty(), "no synthesized images");
    ensure!(!train.is_empty(), "no training images");
    let mut clusters: Vec<Vec<(usize, f64)>> = vec![Vec::new(); train.len()];
    for (i, s) in synth.iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (k, t) in train.iter().enumerate() {
            let d = dist_to_train(s, t);
            if d < best.1 {
                best = (k, d);
            }
        }
        clusters[best.0].push((i, best.1));
    }
    let mut per_cluster = Vec::new();
    for members in clusters.iter().filter(|c| !c.is_empty()) {
        match mode {
            ClusterDistance::ToCenter => {
                per_cluster.push(members.iter().map(|m| m.1).sum::<f64>() / members.len() as f64);
            }
            ClusterDistance::Pairwise => {
                if members.len() < 2 {
                    continue;
                }
                let mut sum = 0.0;
                let mut n = 0usize;
                for a in 0..members.len() {
                    for b in a + 1..members.len() {
                        sum += dist_pair(&synth[members[a].0], &synth[members[b].0]);
                        n += 1;
                    }
                }
                per_cluster.push(sum / n as f64);
            }
        }
    }
    if per_cluster.is_empty() {
        return Ok(0.0);
    }
    Ok(per_cluster.iter().sum::<f64>() / per_cluster.len() as f64)
}

/// Concatenated multi-layer encoder features used by the perceptual distance.
pub fn perceptual_features(encoder: &Encoder, x: &ImageTensor) -> Result<Vec<f64>> {
    Ok(encoder.all_features(x)?.into_iter().map(f64::from).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    1.0 - cosine(a, b)
}

/// `1 − cos` of concatenated encoder features.
pub fn perceptual_distance(encoder: &Encoder, x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    Ok(cosine_distance(
        &perceptual_features(encoder, x)?,
        &perceptual_features(encoder, y)?,
    ))
}

/// Intra-cluster perceptual diversity of `synth` around the training images.
pub fn intra_lpips_images(
    encoder: &Encoder,
    synth: &[&ImageTensor],
    train: &[&ImageTensor],
    mode: ClusterDistance,
) -> Result<f64> {
    let fs = synth
        .iter()
        .map(|x| perceptual_features(encoder, x))
        .collect::<Result<Vec<_>>>()?;
    let ft = train
        .iter()
        .map(|x| perceptual_features(encoder, x))
        .collect::<Result<Vec<_>>>()?;
    intra_lpips(&fs, &ft, mode, |a, b| cosine_distance(a, b), |a, b| cosine_distance(a, b))
}

fn pooled_f64(encoder: &Encoder, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
    Ok(encoder
        .pooled_batch(images)?
        .into_iter()
        .map(|r| r.into_iter().map(f64::from).collect())
        .collect())
}

/// Mean cosine of pooled features over aligned pairs.
pub fn id_similarity_proxy(encoder: &Encoder, source: &[&ImageTensor], adapted: &[&ImageTensor]) -> Result<f64> {
    ensure!(!source.is_empty(), "no images to compare");
    ensure!(
        source.len() == adapted.len(),
        "paired lists differ in length ({} vs {})",
        source.len(),
        adapted.len()
    );
    let a = pooled_f64(encoder, source)?;
    let b = pooled_f64(encoder, adapted)?;
    Ok(a.iter().zip(&b).map(|(x, y)| cosine(x, y)).sum::<f64>() / a.len() as f64)
}

fn mean_row(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

/// Cosine between mean pooled features of two sets.
pub fn domain_similarity(encoder: &Encoder, generated: &[&ImageTensor], target_refs: &[&ImageTensor]) -> Result<f64> {
    ensure!(!generated.is_empty() && !target_refs.is_empty(), "no images to compare");
    Ok(domain_similarity_features(
        &pooled_f64(encoder, generated)?,
        &pooled_f64(encoder, target_refs)?,
    ))
}

pub fn domain_similarity_features(generated: &[Vec<f64>], target_refs: &[Vec<f64>]) -> f64 {
    cosine(&mean_row(generated), &mean_row(target_refs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub desk_fid: f64,
    pub intra_lpips: f64,
    pub id_proxy: f64,
    pub domain_similarity: f64,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

/// Images an evaluation run compares. `source` and `adapted` are rendered from
/// the same latents, in the same order.
#[derive(Clone, Copy, Debug)]
pub struct EvalInputs<'a> {
    pub source: &'a [&'a ImageTensor],
    pub adapted: &'a [&'a ImageTensor],
    pub train: &'a [&'a ImageTensor],
    pub holdout: &'a [&'a ImageTensor],
}

pub fn evaluate(
    encoder: &Encoder,
    inputs: EvalInputs<'_>,
    mode: ClusterDistance,
    config_hash: String,
    seeds: Vec<u64>,
) -> Result<EvalReport> {
    Ok(EvalReport {
        desk_fid: desk_fid_images(encoder, inputs.adapted, inputs.holdout)?,
        intra_lpips: intra_lpips_images(encoder, inputs.adapted, inputs.train, mode)?,
        id_proxy: id_similarity_proxy(encoder, inputs.source, inputs.adapted)?,
        domain_similarity: domain_similarity(encoder, inputs.adapted, inputs.train)?,
        config_hash,
        seeds,
    })
}
