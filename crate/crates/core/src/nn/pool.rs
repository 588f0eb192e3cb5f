use crate::tensor::{Dims3, Real, Tensor};

/// Argmax positions (flat index into the input plane) for each pooled voxel.
#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: [usize; 5],
    argmax: Vec<u32>,
}

/// Non-overlapping max pooling with window = stride = `factor`.
///
/// Spatial extents must be divisible by the factor.
pub fn max_pool<T: Real>(x: &Tensor<T>, factor: Dims3) -> (Tensor<T>, PoolCache) {
    let [n, c, d, h, w] = x.shape();
    assert!(
        d % factor[0] == 0 && h % factor[1] == 0 && w % factor[2] == 0,
        "pooling needs divisible extents"
    );
    let (od, oh, ow) = (d / factor[0], h / factor[1], w / factor[2]);
    let mut y = Tensor::zeros([n, c, od, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * od * oh * ow);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = y.plane_mut(i, ch);
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut at = 0usize;
                        for a in 0..factor[0] {
                            for b in 0..factor[1] {
                                for e in 0..factor[2] {
                                    let idx = ((z * factor[0] + a) * h + yy * factor[1] + b) * w + xx * factor[2] + e;
                                    if src[idx] > best {
                                        best = src[idx];
                                        at = idx;
                                    }
                                }
                            }
                        }
                        dst[(z * oh + yy) * ow + xx] = best;
                        argmax.push(at as u32);
                    }
                }
            }
        }
    }
    (
        y,
        PoolCache {
            input_shape: x.shape(),
            argmax,
        },
    )
}

pub fn max_pool_backward<T: Real>(cache: &PoolCache, dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = cache.input_shape;
    let out_v = dy.voxels();
    let mut dx = Tensor::zeros(cache.input_shape);
    for i in 0..n {
        for ch in 0..c {
            let g = dy.plane(i, ch);
            let idx = &cache.argmax[(i * c + ch) * out_v..(i * c + ch + 1) * out_v];
            let plane = dx.plane_mut(i, ch);
            for (&at, &gv) in idx.iter().zip(g) {
                plane[at as usize] += gv;
            }
        }
    }
    dx
}
