#![allow(dead_code)]

use ecgnet::model::{Model, ModelConfig};
use ecgnet::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four-convolution, four-channel network over length-32 inputs.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        input_channels: 4,
        input_length: 32,
        conv_layers: 4,
        kernel_size: 5,
        pool_every: 2,
        base_channels: 4,
        channel_cap: Some(4),
        l2_lambda: 1e-2,
        ..ModelConfig::default()
    }
    .with_heads(["a", "b", "c"])
}

pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

fn objective(model: &mut Model<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let pass = model.forward_train(&mut tape, x).unwrap();
    let ce = tape.sigmoid_ce_loss(pass.logits, y).unwrap();
    let l2 = model.l2_penalty_on_tape(&mut tape, &pass).unwrap();
    let loss = tape.add(ce, l2).unwrap();
    tape.value(loss).item().unwrap()
}

/// Compares tape gradients of CE + L2 with central differences at step `h`.
/// An element passes when `|a - n| / max(|a|, |n|) < tol`, or when both
/// magnitudes are below `1e-10`.
pub fn gradient_check(seed: u64, h: f64, tol: f64) -> GradCheck {
    let config = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::build(config.clone(), seed).unwrap();
    let batch = 2;
    let x: Vec<f64> = (0..batch * config.input_channels * config.input_length)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let x = Tensor::new(&[batch, config.input_channels, config.input_length], x).unwrap();
    let heads = config.head_names.len();
    let y: Vec<f64> = (0..batch * heads).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect();
    let y = Tensor::new(&[batch, heads], y).unwrap();

    let mut tape = Tape::new();
    let pass = model.forward_train(&mut tape, &x).unwrap();
    let ce = tape.sigmoid_ce_loss(pass.logits, &y).unwrap();
    let l2 = model.l2_penalty_on_tape(&mut tape, &pass).unwrap();
    let loss = tape.add(ce, l2).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = pass
        .params
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut out = GradCheck { checked: 0, passed: 0, worst: 0.0 };
    for (p, grad) in analytic.iter().enumerate() {
        let n = model.params()[p].value.len();
        for i in 0..n {
            let orig = model.params()[p].value.data()[i];
            model.params_mut()[p].value.data_mut()[i] = orig + h;
            let up = objective(&mut model, &x, &y);
            model.params_mut()[p].value.data_mut()[i] = orig - h;
            let down = objective(&mut model, &x, &y);
            model.params_mut()[p].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.get(i).copied().unwrap_or(0.0);
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-10 { 0.0 } else { (a - numeric).abs() / scale };
            out.checked += 1;
            if rel < tol {
                out.passed += 1;
            }
            out.worst = out.worst.max(rel);
        }
    }
    out
}

/// Twelve-lead model small enough for multi-epoch runs in seconds.
pub fn small_ecg_config() -> ModelConfig {
    ModelConfig {
        conv_layers: 4,
        kernel_size: 8,
        base_channels: 4,
        channel_cap: Some(4),
        ..ModelConfig::default()
    }
    .with_heads(["mobitz_i", "first_degree_avb", "sinus_rhythm"])
}

pub fn small_dataset(n: usize, seed: u64) -> ecgnet::dataset::Dataset {
    use ecgnet::synth::{generate_dataset, ClassMix, NoiseConfig};
    generate_dataset(&ClassMix::preset("multitask-desk").unwrap(), n, seed, &NoiseConfig::default()).unwrap()
}

pub fn param_bits(model: &Model<f32>) -> Vec<u32> {
    let mut out: Vec<u32> = model.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect();
    for (_, b) in model.buffers() {
        out.extend(b.data().iter().map(|v| v.to_bits()));
    }
    out
}
