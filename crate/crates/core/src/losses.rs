//! Training objective: multi-scale supervised loss, pyramid consistency,
//! KL-based uncertainty, the uncertainty-rectified consistency loss, the
//! Gaussian ramp-up weight and the combined objective.
//!
//! All reductions are accumulated in `f64` regardless of the tensor scalar
//! type. The `*_with_grad` variants return the gradient with respect to each
//! probability map (same layout as the input); the network turns those into
//! logit gradients through the softmax Jacobian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smoothing term in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped to `[PROB_FLOOR, 1]` before any logarithm.
pub const PROB_FLOOR: f64 = 1e-8;
/// Guards the weighted average when every rectification weight vanishes.
pub const WEIGHT_EPS: f64 = 1e-8;

fn check_same(a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

fn check_pyramid<T: Real>(probs: &[Tensor<T>]) -> Result<()> {
    let first = probs
        .first()
        .ok_or_else(|| Error::Input("pyramid has no scales".into()))?;
    for p in probs {
        check_same(first, p)?;
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0)
}

/// d clamp(p) / dp
fn clamp_slope(p: f64) -> f64 {
    if (PROB_FLOOR..=1.0).contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// Soft Dice loss averaged over all classes (background included); sums run
/// over every voxel of every sample in the batch.
pub fn dice_loss<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    dice_loss_with_grad(p, y).map(|(l, _)| l)
}

pub fn dice_loss_with_grad<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_same(p, y)?;
    let [n, c, ..] = p.shape();
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut ysum = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            for (&pv, &yv) in p.plane(i, j).iter().zip(y.plane(i, j)) {
                let (pv, yv) = (pv.as_f64(), yv.as_f64());
                inter[j] += pv * yv;
                psum[j] += pv;
                ysum[j] += yv;
            }
        }
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(p.shape());
    for j in 0..c {
        let num = 2.0 * inter[j] + DICE_SMOOTH;
        let den = psum[j] + ysum[j] + DICE_SMOOTH;
        loss += 1.0 - num / den;
        for i in 0..n {
            let yp = y.plane(i, j);
            for (g, &yv) in grad.plane_mut(i, j).iter_mut().zip(yp) {
                let d = -(2.0 * yv.as_f64() * den - num) / (den * den) / c as f64;
                *g = T::from_f64(d);
            }
        }
    }
    Ok((loss / c as f64, grad))
}

/// Mean over voxels of `-ln p[true class]`, with `p` clamped to `[1e-8, 1]`.
pub fn ce_loss<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    ce_loss_with_grad(p, y).map(|(l, _)| l)
}

pub fn ce_loss_with_grad<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_same(p, y)?;
    let [n, c, ..] = p.shape();
    let count = (n * p.voxels()) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(p.shape());
    for i in 0..n {
        for j in 0..c {
            let pp = p.plane(i, j);
            let yp = y.plane(i, j);
            let gp = grad.plane_mut(i, j);
            for ((g, &pv), &yv) in gp.iter_mut().zip(pp).zip(yp) {
                let yv = yv.as_f64();
                if yv == 0.0 {
                    continue;
                }
                let pv = pv.as_f64();
                let q = clamp_prob(pv);
                loss -= yv * q.ln();
                *g = T::from_f64(-yv * clamp_slope(pv) / (q * count));
            }
        }
    }
    Ok((loss / count, grad))
}

/// `(1/S) Σ_s (dice(p_s, y) + ce(p_s, y)) / 2`.
pub fn supervised_loss<T: Real>(probs: &[Tensor<T>], y: &Tensor<T>) -> Result<f64> {
    supervised_loss_with_grad(probs, y).map(|(l, _)| l)
}

pub fn supervised_loss_with_grad<T: Real>(probs: &[Tensor<T>], y: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    check_pyramid(probs)?;
    let s = probs.len() as f64;
    let scale = T::from_f64(0.5 / s);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for p in probs {
        let (dl, mut g) = dice_loss_with_grad(p, y)?;
        let (cl, gc) = ce_loss_with_grad(p, y)?;
        total += 0.5 * (dl + cl);
        g.add_assign(&gc);
        g.scale(scale);
        grads.push(g);
    }
    Ok((total / s, grads))
}

/// `p_c = (1/S) Σ_s p_s`.
pub fn average_prediction<T: Real>(probs: &[Tensor<T>]) -> Result<Tensor<T>> {
    check_pyramid(probs)?;
    let inv = 1.0 / probs.len() as f64;
    let len = probs[0].data().len();
    let mut acc = vec![0.0f64; len];
    for p in probs {
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v.as_f64();
        }
    }
    Tensor::from_vec(
        probs[0].shape(),
        acc.into_iter().map(|a| T::from_f64(a * inv)).collect(),
    )
}

/// `(1/S) Σ_s mean_{v,j} (p_s − p_c)²`.
pub fn pyramid_consistency_loss<T: Real>(probs: &[Tensor<T>]) -> Result<f64> {
    pyramid_consistency_with_grad(probs).map(|(l, _)| l)
}

pub fn pyramid_consistency_with_grad<T: Real>(probs: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    let pc = average_prediction(probs)?;
    let s = probs.len() as f64;
    let elems = pc.data().len() as f64;
    let mut loss = 0.0;
    // dL/dΔ_s = 2Δ_s/(S·E); dΔ_s/dp_t = δ_st − 1/S.
    let mut gdelta: Vec<Vec<f64>> = Vec::with_capacity(probs.len());
    for p in probs {
        let mut g = Vec::with_capacity(p.data().len());
        for (&a, &b) in p.data().iter().zip(pc.data()) {
            let d = a.as_f64() - b.as_f64();
            loss += d * d;
            g.push(2.0 * d / (s * elems));
        }
        gdelta.push(g);
    }
    let grads = through_delta(&gdelta, probs[0].shape())?;
    Ok((loss / (s * elems), grads))
}

/// Maps gradients w.r.t. `Δ_s = p_s − p_c` onto gradients w.r.t. each `p_s`.
fn through_delta<T: Real>(gdelta: &[Vec<f64>], shape: [usize; 5]) -> Result<Vec<Tensor<T>>> {
    let s = gdelta.len() as f64;
    let len = gdelta[0].len();
    let mut mean = vec![0.0; len];
    for g in gdelta {
        for (m, &v) in mean.iter_mut().zip(g) {
            *m += v / s;
        }
    }
    gdelta
        .iter()
        .map(|g| Tensor::from_vec(shape, g.iter().zip(&mean).map(|(&a, &m)| T::from_f64(a - m)).collect()))
        .collect()
}

/// Per-scale KL discrepancy `D_s` against the scale average and the derived
/// rectification weights `w_s = exp(−D_s)`. Maps have one channel.
#[derive(Clone, Debug)]
pub struct UncertaintyMaps<T> {
    pub divergence: Vec<Tensor<T>>,
    pub weight: Vec<Tensor<T>>,
}

impl<T: Real> UncertaintyMaps<T> {
    /// Replace every weight by one (used to compare against the unrectified loss).
    pub fn with_unit_weights(mut self) -> Self {
        for w in &mut self.weight {
            w.data_mut().iter_mut().for_each(|e| *e = T::one());
        }
        self
    }
}

/// `D_s[v] = Σ_j p_s[j,v] · ln(p_s[j,v] / p_c[j,v])`, both clamped to `[1e-8, 1]`.
pub fn uncertainty<T: Real>(probs: &[Tensor<T>]) -> Result<UncertaintyMaps<T>> {
    let pc = average_prediction(probs)?;
    let [n, c, d, h, w] = pc.shape();
    let v = pc.voxels();
    let mut divergence = Vec::with_capacity(probs.len());
    let mut weight = Vec::with_capacity(probs.len());
    for p in probs {
        let mut dmap = Tensor::zeros([n, 1, d, h, w]);
        let mut wmap = Tensor::zeros([n, 1, d, h, w]);
        for i in 0..n {
            let ps = p.sample(i);
            let cs = pc.sample(i);
            for vox in 0..v {
                let mut kl = 0.0;
                for j in 0..c {
                    let a = clamp_prob(ps[j * v + vox].as_f64());
                    let b = clamp_prob(cs[j * v + vox].as_f64());
                    kl += a * (a / b).ln();
                }
                dmap.sample_mut(i)[vox] = T::from_f64(kl);
                wmap.sample_mut(i)[vox] = T::from_f64((-kl).exp());
            }
        }
        divergence.push(dmap);
        weight.push(wmap);
    }
    Ok(UncertaintyMaps { divergence, weight })
}

/// Returns `(unsup_ur, unsup_um)`:
///
/// * `unsup_ur = (1/S) · Σ_{s,v,j} (p_s − p_c)² w_s[v] / (Σ_{s,v,j} w_s[v] + ε)`
/// * `unsup_um = (1/S) · Σ_s mean_v D_s[v]`
pub fn rectified_consistency_loss<T: Real>(probs: &[Tensor<T>], unc: &UncertaintyMaps<T>) -> Result<(f64, f64)> {
    let pc = average_prediction(probs)?;
    if unc.divergence.len() != probs.len() || unc.weight.len() != probs.len() {
        return Err(Error::shape(probs.len(), unc.weight.len()));
    }
    let [n, c, ..] = pc.shape();
    let v = pc.voxels();
    let s = probs.len() as f64;
    let (mut num, mut den, mut dsum) = (0.0, 0.0, 0.0);
    for (si, p) in probs.iter().enumerate() {
        let wmap = &unc.weight[si];
        if wmap.shape() != [n, 1, pc.shape()[2], pc.shape()[3], pc.shape()[4]] {
            return Err(Error::shape(pc.shape(), wmap.shape()));
        }
        for i in 0..n {
            let ps = p.sample(i);
            let cs = pc.sample(i);
            let ws = wmap.sample(i);
            for vox in 0..v {
                let wv = ws[vox].as_f64();
                for j in 0..c {
                    let d = ps[j * v + vox].as_f64() - cs[j * v + vox].as_f64();
                    num += d * d * wv;
                }
                den += c as f64 * wv;
            }
        }
        dsum += unc.divergence[si].data().iter().map(|e| e.as_f64()).sum::<f64>();
    }
    let voxels = (n * v) as f64;
    Ok((num / (den + WEIGHT_EPS) / s, dsum / voxels / s))
}

/// Which unsupervised terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnsupTerms {
    /// Weight the consistency by `exp(−D)`; otherwise the plain pyramid consistency is used.
    pub rectify: bool,
    /// Add the mean KL divergence term.
    pub minimize: bool,
}

impl UnsupTerms {
    pub const FULL: UnsupTerms = UnsupTerms {
        rectify: true,
        minimize: true,
    };
    pub const PLAIN: UnsupTerms = UnsupTerms {
        rectify: false,
        minimize: false,
    };
}

/// Value and probability gradients of the unsupervised objective.
#[derive(Clone, Debug)]
pub struct UnsupLoss<T> {
    /// Consistency term: rectified when `rectify` is set, plain pyramid consistency otherwise.
    pub consistency: f64,
    /// Uncertainty minimization term (0 when disabled).
    pub minimization: f64,
    pub grads: Vec<Tensor<T>>,
}

/// Unsupervised loss with gradients flowing through `p_c`, `D_s` and `w_s`.
pub fn unsupervised_loss_with_grad<T: Real>(probs: &[Tensor<T>], terms: UnsupTerms) -> Result<UnsupLoss<T>> {
    check_pyramid(probs)?;
    if !terms.rectify && !terms.minimize {
        let (l, grads) = pyramid_consistency_with_grad(probs)?;
        return Ok(UnsupLoss {
            consistency: l,
            minimization: 0.0,
            grads,
        });
    }
    let shape = probs[0].shape();
    let [n, c, ..] = shape;
    let v = probs[0].voxels();
    let ns = probs.len();
    let s = ns as f64;
    let pc = average_prediction(probs)?;
    let nv = n * v;
    let get = |t: &Tensor<T>, i: usize, j: usize, vox: usize| t.sample(i)[j * v + vox].as_f64();

    // Per-scale, per-voxel KL divergence.
    let mut div = vec![vec![0.0; nv]; ns];
    for (si, p) in probs.iter().enumerate() {
        for i in 0..n {
            for vox in 0..v {
                let mut kl = 0.0;
                for j in 0..c {
                    let a = clamp_prob(get(p, i, j, vox));
                    let b = clamp_prob(get(&pc, i, j, vox));
                    kl += a * (a / b).ln();
                }
                div[si][i * v + vox] = kl;
            }
        }
    }

    // Forward values.
    let (mut num, mut wsum, mut dsum) = (0.0, 0.0, 0.0);
    let mut sq = vec![vec![0.0; nv]; ns]; // Σ_j Δ²
    for (si, p) in probs.iter().enumerate() {
        for i in 0..n {
            for vox in 0..v {
                let k = i * v + vox;
                let mut acc = 0.0;
                for j in 0..c {
                    let d = get(p, i, j, vox) - get(&pc, i, j, vox);
                    acc += d * d;
                }
                sq[si][k] = acc;
                let w = (-div[si][k]).exp();
                num += acc * w;
                wsum += w;
                dsum += div[si][k];
            }
        }
    }
    let den = c as f64 * wsum + WEIGHT_EPS;
    let consistency_val = if terms.rectify {
        num / den / s
    } else {
        let elems = (nv * c) as f64;
        sq.iter().flatten().sum::<f64>() / (s * elems)
    };
    let minimization = if terms.minimize { dsum / (nv as f64 * s) } else { 0.0 };

    // Backward: gradients w.r.t. Δ_s (direct path) and D_s.
    let mut gdelta = vec![vec![0.0; nv * c]; ns];
    let mut gdiv = vec![vec![0.0; nv]; ns];
    for (si, p) in probs.iter().enumerate() {
        for i in 0..n {
            for vox in 0..v {
                let k = i * v + vox;
                let w = (-div[si][k]).exp();
                let coef = if terms.rectify {
                    2.0 * w / (den * s)
                } else {
                    2.0 / (s * (nv * c) as f64)
                };
                for j in 0..c {
                    let d = get(p, i, j, vox) - get(&pc, i, j, vox);
                    gdelta[si][(i * c + j) * v + vox] = coef * d;
                }
                if terms.rectify {
                    // ∂UR/∂w = (Σ_j Δ² / den − num·C / den²) / S, ∂w/∂D = −w
                    let gw = (sq[si][k] / den - num * c as f64 / (den * den)) / s;
                    gdiv[si][k] -= gw * w;
                }
                if terms.minimize {
                    gdiv[si][k] += 1.0 / (nv as f64 * s);
                }
            }
        }
    }
    let mut grads = through_delta::<f64>(&gdelta, shape)?;

    // D_s = Σ_j a ln(a / b), a = clamp(p_s), b = clamp(p_c).
    let mut gpc = vec![0.0; nv * c];
    for (si, p) in probs.iter().enumerate() {
        let g = grads[si].data_mut();
        for i in 0..n {
            for vox in 0..v {
                let gd = gdiv[si][i * v + vox];
                if gd == 0.0 {
                    continue;
                }
                for j in 0..c {
                    let idx = (i * c + j) * v + vox;
                    let (pa, pb) = (get(p, i, j, vox), get(&pc, i, j, vox));
                    let (a, b) = (clamp_prob(pa), clamp_prob(pb));
                    g[idx] += gd * ((a / b).ln() + 1.0) * clamp_slope(pa);
                    gpc[idx] -= gd * a / b * clamp_slope(pb);
                }
            }
        }
    }
    let grads = grads
        .into_iter()
        .map(|g| {
            let data = g
                .data()
                .iter()
                .zip(&gpc)
                .map(|(&a, &b)| T::from_f64(a + b / s))
                .collect();
            Tensor::from_vec(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnsupLoss {
        consistency: consistency_val,
        minimization,
        grads,
    })
}

/// Gaussian warm-up `w_max · exp(−5 (1 − t/t_ramp)²)`, held at `w_max` after `t_ramp`.
pub fn ramp_weight(t: f64, w_max: f64, t_ramp: f64) -> Result<f64> {
    if t_ramp.is_nan() || t_ramp <= 0.0 {
        return Err(Error::Config(format!("ramp length must be positive, got {t_ramp}")));
    }
    if t.is_nan() || t < 0.0 {
        return Err(Error::Input(format!("step must be non-negative, got {t}")));
    }
    if t >= t_ramp {
        return Ok(w_max);
    }
    let phase = 1.0 - t / t_ramp;
    Ok(w_max * (-5.0 * phase * phase).exp())
}

/// One step's objective components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sup: f64,
    /// Consistency term (uncertainty-rectified when rectification is enabled).
    pub unsup_ur: f64,
    pub unsup_um: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `total = sup + lambda · (unsup_ur + unsup_um)`.
pub fn total_loss(sup: f64, unsup_ur: f64, unsup_um: f64, lambda: f64) -> Result<LossReport> {
    for (name, v) in [
        ("sup", sup),
        ("unsup_ur", unsup_ur),
        ("unsup_um", unsup_um),
        ("lambda", lambda),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                step: 0,
            });
        }
    }
    let total = sup + lambda * (unsup_ur + unsup_um);
    if !total.is_finite() {
        return Err(Error::NonFinite {
            component: "total".into(),
            step: 0,
        });
    }
    Ok(LossReport {
        sup,
        unsup_ur,
        unsup_um,
        lambda,
        total,
    })
}

/// One-hot encode a label batch (`N` label maps of `D×H×W`) into `N×C×D×H×W`.
pub fn one_hot<T: Real>(labels: &[&[u8]], classes: usize, dims: [usize; 3]) -> Result<Tensor<T>> {
    let v = dims[0] * dims[1] * dims[2];
    let mut out = Tensor::zeros([labels.len(), classes, dims[0], dims[1], dims[2]]);
    for (i, lab) in labels.iter().enumerate() {
        if lab.len() != v {
            return Err(Error::shape(v, lab.len()));
        }
        let s = out.sample_mut(i);
        for (vox, &l) in lab.iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::Input(format!("label {l} out of range for {classes} classes")));
            }
            s[l * v + vox] = T::one();
        }
    }
    Ok(out)
}
