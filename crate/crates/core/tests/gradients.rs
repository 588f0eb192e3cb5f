//! Loss gradients with respect to pre-softmax logits against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urpc_core::losses::{
    one_hot, pyramid_consistency_with_grad, supervised_loss_with_grad, unsupervised_loss_with_grad, UnsupTerms,
};
use urpc_core::nn::{softmax_channels, softmax_channels_backward};
use urpc_core::tensor::Tensor;

const SHAPE: [usize; 5] = [1, 3, 4, 4, 4];
const SCALES: usize = 4;
const H: f64 = 1e-5;
/// Denominator floor for the relative error. Central differences on a loss of
/// order 0.1 carry about 1e-11 of rounding noise, which swamps entries below this.
const FLOOR: f64 = 1e-6;

fn random_logits(seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = SHAPE.iter().product();
    (0..SCALES)
        .map(|_| Tensor::from_vec(SHAPE, (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap())
        .collect()
}

fn random_labels(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
    one_hot(&[&labels], 3, [4, 4, 4]).unwrap()
}

/// Largest elementwise relative error between the analytic logit gradient and
/// central differences, over every logit of every scale.
fn worst_relative_error(
    logits: &[Tensor<f64>],
    loss_and_grad: impl Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>),
) -> f64 {
    let probs = |z: &[Tensor<f64>]| z.iter().map(softmax_channels).collect::<Vec<_>>();
    let p = probs(logits);
    let (_, dp) = loss_and_grad(&p);
    let mut worst = 0.0f64;
    for s in 0..logits.len() {
        let dz = softmax_channels_backward(&p[s], &dp[s]);
        for i in 0..dz.data().len() {
            let mut zp = logits.to_vec();
            zp[s].data_mut()[i] += H;
            let mut zm = logits.to_vec();
            zm[s].data_mut()[i] -= H;
            let fd = (loss_and_grad(&probs(&zp)).0 - loss_and_grad(&probs(&zm)).0) / (2.0 * H);
            let an = dz.data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR));
        }
    }
    worst
}

#[test]
fn supervised_loss_gradient() {
    let y = random_labels(1);
    let worst = worst_relative_error(&random_logits(2), |p| supervised_loss_with_grad(p, &y).unwrap());
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn pyramid_consistency_gradient() {
    let worst = worst_relative_error(&random_logits(3), |p| pyramid_consistency_with_grad(p).unwrap());
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

fn unsup(terms: UnsupTerms) -> impl Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) {
    move |p| {
        let u = unsupervised_loss_with_grad(p, terms).unwrap();
        (u.consistency + u.minimization, u.grads)
    }
}

#[test]
fn rectified_consistency_gradient() {
    let terms = UnsupTerms {
        rectify: true,
        minimize: false,
    };
    let worst = worst_relative_error(&random_logits(4), unsup(terms));
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn rectified_consistency_with_minimization_gradient() {
    let worst = worst_relative_error(&random_logits(5), unsup(UnsupTerms::FULL));
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn plain_consistency_with_minimization_gradient() {
    let terms = UnsupTerms {
        rectify: false,
        minimize: true,
    };
    let worst = worst_relative_error(&random_logits(6), unsup(terms));
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn sharp_predictions_keep_accurate_gradients() {
    // large logits push probabilities close to the clamp
    let logits: Vec<Tensor<f64>> = random_logits(7).iter().map(|z| z.map(|v| 4.0 * v)).collect();
    let worst = worst_relative_error(&logits, unsup(UnsupTerms::FULL));
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
