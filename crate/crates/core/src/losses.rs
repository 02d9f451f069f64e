//! Training objectives.
//!
//! Every loss has a graph form (generic over the scalar type so it can be
//! gradient-checked in `f64`) and a plain form over concrete values.

use std::collections::VecDeque;

use dorm_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{autocorr_on, normalize_rows_on, AutoCorrMap, TokenGrid};
use crate::error::{ensure, DormError, Result};
use crate::nn::Graph;

/// How one entry of the auto-correlation difference is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsNorm {
    /// Mean absolute difference.
    #[default]
    Abs,
    /// Mean squared difference.
    Squared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_ss: f64,
    pub lambda_local: f64,
    pub lambda_scc: f64,
    /// Proportion used to rank `|Δw|` for the consistency mask.
    pub alpha_mask: f64,
    pub ss_norm: SsNorm,
    /// Capacity of the latent queues behind `Δw`.
    pub queue_capacity: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ss: 10.0,
            lambda_local: 1.0,
            lambda_scc: 1.0,
            alpha_mask: 0.5,
            ss_norm: SsNorm::Abs,
            queue_capacity: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ss", self.lambda_ss),
            ("lambda_local", self.lambda_local),
            ("lambda_scc", self.lambda_scc),
        ] {
            ensure!(v.is_finite() && v >= 0.0, "{name} must be finite and >= 0, got {v}");
        }
        ensure!(
            self.alpha_mask > 0.0 && self.alpha_mask <= 1.0,
            "alpha_mask must lie in (0, 1], got {}",
            self.alpha_mask
        );
        ensure!(self.queue_capacity >= 1, "queue capacity must be at least 1");
        Ok(())
    }
}

fn diverged(what: String) -> DormError {
    DormError::TrainingDiverged {
        step: 0,
        what,
        last_checkpoint: None,
    }
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(diverged(format!("non-finite {name}")))
    }
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().f64()
}

fn vector(xs: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![xs.len()], xs.to_vec())
}

/// `mean(−log σ(fake))`.
pub fn adv_g_on<T: Scalar>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    let n = g.neg(fake_logits);
    let sp = g.softplus(n);
    g.mean(sp)
}

/// `mean(−log(1 − σ(fake))) + mean(−log σ(real))`.
pub fn adv_d_on<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Var {
    let sf = g.softplus(fake_logits);
    let mf = g.mean(sf);
    let nr = g.neg(real_logits);
    let sr = g.softplus(nr);
    let mr = g.mean(sr);
    g.add(mf, mr)
}

pub fn adv_g(fake_logits: &[f64]) -> Result<f64> {
    ensure!(!fake_logits.is_empty(), "no scores");
    check_finite("discriminator scores", fake_logits)?;
    let mut g = Graph::<f64>::inference();
    let f = g.constant(vector(fake_logits));
    let l = adv_g_on(&mut g, f);
    Ok(scalar_of(&g, l))
}

pub fn adv_d(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    ensure!(!real_logits.is_empty() && !fake_logits.is_empty(), "no scores");
    check_finite("discriminator scores", real_logits)?;
    check_finite("discriminator scores", fake_logits)?;
    let mut g = Graph::<f64>::inference();
    let r = g.constant(vector(real_logits));
    let f = g.constant(vector(fake_logits));
    let l = adv_d_on(&mut g, r, f);
    Ok(scalar_of(&g, l))
}

/// Mean over all entries (and the batch) of `|M_A − M_B|`, or its square.
pub fn l_ss_maps_on<T: Scalar>(g: &mut Graph<T>, ma: Var, mb: Var, norm: SsNorm) -> Var {
    let d = g.sub(ma, mb);
    let e = match norm {
        SsNorm::Abs => g.abs(d),
        SsNorm::Squared => g.square(d),
    };
    g.mean(e)
}

/// Structure loss straight from two token batches `[B, n, c]`.
pub fn l_ss_tokens_on<T: Scalar>(g: &mut Graph<T>, fa: Var, fb: Var, norm: SsNorm) -> Var {
    let ma = autocorr_on(g, fa);
    let mb = autocorr_on(g, fb);
    l_ss_maps_on(g, ma, mb, norm)
}

pub fn l_ss(ma: &AutoCorrMap, mb: &AutoCorrMap) -> Result<f64> {
    l_ss_with(ma, mb, SsNorm::Abs)
}

pub fn l_ss_with(ma: &AutoCorrMap, mb: &AutoCorrMap, norm: SsNorm) -> Result<f64> {
    ensure!(
        ma.m.shape() == mb.m.shape(),
        "auto-correlation maps differ in shape ({:?} vs {:?})",
        ma.m.shape(),
        mb.m.shape()
    );
    let mut g = Graph::<f64>::inference();
    let a = g.constant(ma.m.clone());
    let b = g.constant(mb.m.clone());
    let l = l_ss_maps_on(&mut g, a, b, norm);
    Ok(scalar_of(&g, l))
}

/// `max(meanᵢ minⱼ C, meanⱼ minᵢ C)` with `C = 1 − cos`, averaged over the batch.
///
/// `fb` is `[B, n, c]`; `ftar` is `[B, m, c]` or `[1, m, c]`.
pub fn l_local_on<T: Scalar>(g: &mut Graph<T>, fb: Var, ftar: Var) -> Var {
    let ub = normalize_rows_on(g, fb);
    let ut = normalize_rows_on(g, ftar);
    let cos = g.matmul(ub, ut, false, true);
    let neg = g.neg(cos);
    let c = g.add_scalar(neg, 1.0);
    let row_min = g.min_axis(c, 2);
    let a = g.mean_axes(row_min, &[1], true);
    let col_min = g.min_axis(c, 1);
    let b = g.mean_axes(col_min, &[1], true);
    let both = g.concat(&[a, b], 1);
    let worst = g.max_axis(both, 1);
    g.mean(worst)
}

pub fn l_local(fb: &TokenGrid, ftar: &TokenGrid) -> Result<f64> {
    ensure!(fb.n() > 0 && ftar.n() > 0, "token grid is empty");
    ensure!(
        fb.c() == ftar.c(),
        "token grids have {} and {} channels",
        fb.c(),
        ftar.c()
    );
    let mut g = Graph::<f64>::inference();
    let b = g.constant(fb.tokens.cast::<f64>().reshape(vec![1, fb.n(), fb.c()]));
    let t = g.constant(ftar.tokens.cast::<f64>().reshape(vec![1, ftar.n(), ftar.c()]));
    let l = l_local_on(&mut g, b, t);
    Ok(scalar_of(&g, l))
}

/// 1 where `|Δw_i|` is at most the `⌈αN⌉`-th largest `|Δw|`, else 0.
pub fn scc_mask(delta_w: &[f64], alpha_mask: f64) -> Result<Vec<bool>> {
    ensure!(!delta_w.is_empty(), "Δw is empty");
    ensure!(
        alpha_mask > 0.0 && alpha_mask <= 1.0,
        "alpha_mask must lie in (0, 1], got {alpha_mask}"
    );
    let n = delta_w.len();
    // The small slack keeps e.g. 0.7·10 from rounding up to 8.
    let rank = ((alpha_mask * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted: Vec<f64> = delta_w.iter().map(|v| v.abs()).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[rank - 1];
    Ok(delta_w.iter().map(|v| v.abs() <= threshold).collect())
}

/// `‖mask ⊙ (w_B − w_A)‖₁` per row, averaged over the batch. `mask` broadcasts against the latents.
pub fn l_scc_on<T: Scalar>(g: &mut Graph<T>, wa: Var, wb: Var, mask: Var) -> Var {
    let d = g.sub(wb, wa);
    let m = g.mul(d, mask);
    let a = g.abs(m);
    let batch = g.shape(wa)[0];
    let s = g.sum(a);
    g.scale(s, 1.0 / batch as f64)
}

pub fn l_scc(wa: &[f64], wb: &[f64], mask: &[bool]) -> Result<f64> {
    ensure!(
        wa.len() == wb.len() && wa.len() == mask.len(),
        "l_scc inputs have lengths {}, {} and {}",
        wa.len(),
        wb.len(),
        mask.len()
    );
    let mut g = Graph::<f64>::inference();
    let row = |v: &[f64]| Tensor::new(vec![1, v.len()], v.to_vec());
    let a = g.constant(row(wa));
    let b = g.constant(row(wb));
    let m: Vec<f64> = mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let m = g.constant(row(&m));
    let l = l_scc_on(&mut g, a, b, m);
    Ok(scalar_of(&g, l))
}

/// Individual generator loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv: f64,
    pub l_ss: f64,
    pub l_local: f64,
    pub l_scc: f64,
}

pub fn total_g_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64> {
    check_finite("loss term", &[parts.adv, parts.l_ss, parts.l_local, parts.l_scc])?;
    let mut total = parts.adv;
    // Zero-weighted terms are skipped so they cannot perturb the sum.
    for (lambda, v) in [
        (cfg.lambda_ss, parts.l_ss),
        (cfg.lambda_local, parts.l_local),
        (cfg.lambda_scc, parts.l_scc),
    ] {
        if lambda != 0.0 {
            total += lambda * v;
        }
    }
    Ok(total)
}

/// Paired FIFO queues of extended latents whose centers give `Δw`.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionQueue {
    capacity: usize,
    queue_a: VecDeque<Vec<f64>>,
    queue_b: VecDeque<Vec<f64>>,
}

impl InversionQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be positive");
        Self {
            capacity,
            queue_a: VecDeque::with_capacity(capacity),
            queue_b: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.queue_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue_a.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, w_a: Vec<f64>, w_b: Vec<f64>) -> Result<()> {
        ensure!(w_a.len() == w_b.len(), "paired latents differ in length");
        if let Some(first) = self.queue_a.front() {
            ensure!(first.len() == w_a.len(), "latent length changed");
        }
        if self.queue_a.len() == self.capacity {
            self.queue_a.pop_front();
            self.queue_b.pop_front();
        }
        self.queue_a.push_back(w_a);
        self.queue_b.push_back(w_b);
        Ok(())
    }

    fn center(q: &VecDeque<Vec<f64>>) -> Option<Vec<f64>> {
        let first = q.front()?;
        let mut c = vec![0.0; first.len()];
        for w in q {
            for (ci, wi) in c.iter_mut().zip(w) {
                *ci += wi;
            }
        }
        let n = q.len() as f64;
        Some(c.into_iter().map(|v| v / n).collect())
    }

    pub fn centers(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((Self::center(&self.queue_a)?, Self::center(&self.queue_b)?))
    }

    /// `center(X_B) − center(X_A)`.
    pub fn delta_w(&self) -> Option<Vec<f64>> {
        let (a, b) = self.centers()?;
        Some(b.iter().zip(&a).map(|(b, a)| b - a).collect())
    }
}
