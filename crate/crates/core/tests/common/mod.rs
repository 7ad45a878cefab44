//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usvs::nn::{LossKind, Network};

fn param(net: &mut Network, layer: usize, bias: bool, j: usize) -> &mut f32 {
    let l = &mut net.layers[layer];
    if bias {
        &mut l.bias[j]
    } else {
        &mut l.weights[j]
    }
}

/// Relative error between analytic and central-difference gradients over
/// (a sample of) all parameters: |g_a - g_n| / (|g_a| + |g_n|).
pub fn gradient_error(net: &Network, inputs: &[Vec<f32>], targets: &[Vec<f32>], per_layer: usize, seed: u64) -> f64 {
    let xs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
    let ts: Vec<&[f32]> = targets.iter().map(Vec::as_slice).collect();
    let (_, grads) = net.loss_and_gradients(&xs, &ts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-3f32;
    let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
    for li in 0..net.layers.len() {
        for is_bias in [false, true] {
            let count = if is_bias { net.layers[li].bias.len() } else { net.layers[li].weights.len() };
            if count == 0 {
                continue;
            }
            let picks: Vec<usize> =
                if count <= per_layer { (0..count).collect() } else { (0..per_layer).map(|_| rng.gen_range(0..count)).collect() };
            for j in picks {
                let mut probe = net.clone();
                let orig = *param(&mut probe, li, is_bias, j);
                *param(&mut probe, li, is_bias, j) = orig + eps;
                let up = probe.loss(&xs, &ts).unwrap() as f64;
                *param(&mut probe, li, is_bias, j) = orig - eps;
                let down = probe.loss(&xs, &ts).unwrap() as f64;
                let numeric = (up - down) / (2.0 * eps as f64);
                let analytic = if is_bias { grads.bias[li][j] } else { grads.weights[li][j] } as f64;
                diff += (analytic - numeric).powi(2);
                norm_a += analytic * analytic;
                norm_n += numeric * numeric;
            }
        }
    }
    diff.sqrt() / (norm_a.sqrt() + norm_n.sqrt()).max(1e-12)
}

pub fn random_data(net: &Network, n: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..n).map(|_| (0..net.input.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let outputs = net.output_shape().len();
    let targets = (0..n)
        .map(|i| match net.loss {
            LossKind::CrossEntropy => (0..outputs).map(|k| (k == i % outputs) as u8 as f32).collect(),
            LossKind::Mse => (0..outputs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    (inputs, targets)
}

/// Oracle-driven scan of `steps` distal steps over a long straight vessel.
pub fn oracle_straight_scan(rotation_deg: f64, steps: usize) -> usvs::ScanLog {
    let cfg = usvs::ControlConfig { scan_length_mm: 2.0 * steps as f64, ..usvs::ControlConfig::default() };
    let ph = usvs::PhantomModel {
        length_mm: 2.4 * steps as f64 + 50.0,
        half_width_mm: 200.0,
        ..usvs::PhantomModel::straight()
    }
    .with_rotation(rotation_deg);
    let r = usvs::Renderer::new(usvs::FrameGeometry::default());
    usvs::run_scan(&ph, &cfg, &usvs::GroundTruthDetector, &r, 7).unwrap()
}
