use cct::model::{forward, param_layout};
use cct::nn::DropState;
use cct::{CctConfig, ModelParams, Tape, Tensor};

/// Parameter count by walking the architecture by hand.
fn count_by_hand(c: &CctConfig) -> usize {
    let mut total = 0;
    let mut ch = c.input_channels;
    let mut side = c.input_hw;
    for l in 0..c.tokenizer_conv_layers {
        let out = if l + 1 == c.tokenizer_conv_layers { c.embed_dim } else { c.embed_dim / 2 };
        total += c.tokenizer_kernel * c.tokenizer_kernel * ch * out + out;
        ch = out;
        side = side.div_ceil(c.tokenizer_pool_stride);
    }
    let d = c.embed_dim;
    let tokens = side * side;
    let block = 2 * (2 * d) + 4 * (d * d + d) + (d * c.ffn_hidden + c.ffn_hidden) + (c.ffn_hidden * d + d);
    total + tokens * d + c.num_encoder_layers * block + 2 * d + d + d * c.num_classes + c.num_classes
}

#[test]
fn default_parameter_count() {
    let cfg = CctConfig::default();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    assert_eq!(count_by_hand(&cfg), 1_143_176);
    assert_eq!(params.num_elements(), 1_143_176);
    assert_eq!(cfg.num_tokens().unwrap(), 49);
}

#[test]
fn parameter_count_tracks_config() {
    for (d, heads, layers, ffn, hw) in [(32, 2, 1, 64, 28), (64, 4, 3, 96, 16), (16, 1, 0, 8, 9)] {
        let cfg = CctConfig {
            embed_dim: d,
            num_heads: heads,
            num_encoder_layers: layers,
            ffn_hidden: ffn,
            input_hw: hw,
            ..CctConfig::default()
        };
        let layout = param_layout(&cfg).unwrap();
        let n: usize = layout.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(n, count_by_hand(&cfg), "{cfg:?}");
        let mut names: Vec<_> = layout.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), layout.len());
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = CctConfig { embed_dim: 16, num_heads: 2, ffn_hidden: 24, num_encoder_layers: 2, ..CctConfig::default() };
    let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let tape = Tape::<f64>::new();
    let bound = params.bind(&tape, true);
    let x = tape.constant(Tensor::from_fn([3, 28, 28, 3], |i| ((i * 7919) % 251) as f64 / 251.0));
    let logits = forward(x, &bound, &cfg, &mut DropState::eval()).unwrap();
    let weights = tape.constant(Tensor::from_fn([3, cfg.num_classes], |i| (i as f64 * 0.37).sin()));
    let grads = tape.backward(logits.mul(weights).unwrap().sum().unwrap()).unwrap();
    for (name, var) in bound.iter() {
        let norm: f64 = grads.wrt(var).data().iter().map(|g| g * g).sum();
        assert!(norm > 0.0, "{name} has zero gradient");
    }
}
