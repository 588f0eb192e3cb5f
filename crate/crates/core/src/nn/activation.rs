use rand::Rng;

use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &mut Tensor<T>) {
    for e in x.data_mut() {
        if *e < T::zero() {
            *e = T::zero();
        }
    }
}

/// `dy` masked by the positive entries of the ReLU output `y`.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &o) in dy.data_mut().iter_mut().zip(y.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Softmax across the channel axis, independently per voxel.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = logits.shape();
    let v = logits.voxels();
    let mut out = Tensor::zeros(logits.shape());
    let mut buf = vec![T::zero(); c];
    for i in 0..n {
        let src = logits.sample(i);
        let dst = out.sample_mut(i);
        for vox in 0..v {
            let mut max = T::neg_infinity();
            for (j, slot) in buf.iter_mut().enumerate() {
                *slot = src[j * v + vox];
                max = max.max(*slot);
            }
            let mut sum = T::zero();
            for slot in buf.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            for (j, &e) in buf.iter().enumerate() {
                dst[j * v + vox] = e / sum;
            }
        }
    }
    out
}

/// Gradient w.r.t. logits given softmax output `p` and `dL/dp`.
pub fn softmax_channels_backward<T: Real>(p: &Tensor<T>, dp: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = p.shape();
    let v = p.voxels();
    let mut dz = Tensor::zeros(p.shape());
    for i in 0..n {
        let ps = p.sample(i);
        let gs = dp.sample(i);
        let out = dz.sample_mut(i);
        for vox in 0..v {
            let mut dot = T::zero();
            for j in 0..c {
                dot += ps[j * v + vox] * gs[j * v + vox];
            }
            for j in 0..c {
                out[j * v + vox] = ps[j * v + vox] * (gs[j * v + vox] - dot);
            }
        }
    }
    dz
}

/// Multiplicative training-time perturbation placed in front of a prediction
/// head: channel dropout (inverted scaling) combined with element-wise
/// feature noise `x · (1 + u)`, `u ~ U(-a, a)`.
#[derive(Clone, Debug)]
pub struct Perturbation<T> {
    mask: Tensor<T>,
}

impl<T: Real> Perturbation<T> {
    /// Draws one mask for a single-sample (`N = 1`) feature map.
    pub fn draw<R: Rng>(shape: [usize; 5], dropout: f64, noise: f64, rng: &mut R) -> Self {
        assert_eq!(shape[0], 1, "perturbations are drawn per sample");
        let c = shape[1];
        let v: usize = shape[2..].iter().product();
        let mut mask = Tensor::zeros(shape);
        let keep_scale = 1.0 / (1.0 - dropout);
        for ch in 0..c {
            let keep = dropout <= 0.0 || rng.gen::<f64>() >= dropout;
            let plane = mask.plane_mut(0, ch);
            for e in plane.iter_mut().take(v) {
                let u = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
                *e = if keep {
                    T::from_f64(keep_scale * (1.0 + u))
                } else {
                    T::zero()
                };
            }
        }
        Self { mask }
    }

    /// Concatenate per-sample masks along the batch axis.
    pub fn stack(parts: &[Perturbation<T>]) -> Self {
        let masks: Vec<&Tensor<T>> = parts.iter().map(|p| &p.mask).collect();
        Self {
            mask: Tensor::cat_batch(&masks).expect("masks share a shape"),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        for (e, &m) in y.data_mut().iter_mut().zip(self.mask.data()) {
            *e *= m;
        }
        y
    }

    pub fn backward(&self, dy: &Tensor<T>) -> Tensor<T> {
        self.apply(dy)
    }
}
