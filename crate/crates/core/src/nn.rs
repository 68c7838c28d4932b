//! Transformer building blocks: multi-head self-attention, the feed-forward
//! block, dropout, stochastic depth and positional embeddings.
//!
//! All blocks are functions of `(input, params, DropState)`. In eval mode
//! dropout and stochastic depth are exact identities.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::TensorError;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Randomness and mode for the stochastic layers of one forward pass.
#[derive(Debug, Clone)]
pub struct DropState {
    mode: Mode,
    rng: ChaCha8Rng,
}

impl DropState {
    pub fn train(seed: u64) -> Self {
        DropState { mode: Mode::Train, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn eval() -> Self {
        DropState { mode: Mode::Eval, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<'t, T: Element>(x: Var<'t, T>, rate: f64, drop: &mut DropState) -> Result<Var<'t, T>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArgument { op: "dropout", reason: format!("rate {rate} outside [0, 1)") });
    }
    if !drop.is_train() || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    // P(u32 < rate · 2³²) = rate, up to 2⁻³² rounding.
    let threshold = (rate * 4_294_967_296.0) as u64;
    let mask = Tensor::from_fn(x.shape(), |_| if (drop.rng.next_u32() as u64) < threshold { T::zero() } else { keep });
    x.mul_const(&mask)
}

/// Per-sample stochastic depth on a residual branch `[B, ...]`: in train mode
/// each sample's branch is zeroed with probability `p_drop`, otherwise scaled
/// by `1 / (1 - p_drop)`.
pub fn stochastic_depth<'t, T: Element>(
    branch: Var<'t, T>,
    p_drop: f64,
    drop: &mut DropState,
) -> Result<Var<'t, T>, TensorError> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(TensorError::InvalidArgument {
            op: "stochastic_depth",
            reason: format!("drop probability {p_drop} outside [0, 1]"),
        });
    }
    if !drop.is_train() || p_drop == 0.0 {
        return Ok(branch);
    }
    let batch = branch.shape().first().copied().unwrap_or(0);
    let keep = if p_drop < 1.0 { T::from_f64_lossy(1.0 / (1.0 - p_drop)) } else { T::zero() };
    let factors: Vec<T> =
        (0..batch).map(|_| if drop.rng.gen::<f64>() < p_drop { T::zero() } else { keep }).collect();
    branch.scale_leading(&factors)
}

/// Add a `[T, d]` positional table to every sample of `[B, T, d]` tokens.
pub fn add_positional_embedding<'t, T: Element>(
    tokens: Var<'t, T>,
    pos: Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let (ts, ps) = (tokens.shape(), pos.shape());
    if ts.len() != 3 || ts[1..] != ps[..] {
        return Err(TensorError::ShapeMismatch { op: "positional_embedding", left: ts, right: ps });
    }
    tokens.add(pos)
}

/// Projection weights of one multi-head self-attention layer. All matrices
/// are `[d, d]` and applied as `x · W + b`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'t, T: Element> {
    pub wq: Var<'t, T>,
    pub bq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub bk: Var<'t, T>,
    pub wv: Var<'t, T>,
    pub bv: Var<'t, T>,
    pub wo: Var<'t, T>,
    pub bo: Var<'t, T>,
    pub num_heads: usize,
}

/// Multi-head self-attention over `x[B, T, d]`.
pub fn multi_head_attention<'t, T: Element>(
    x: Var<'t, T>,
    p: &AttentionParams<'t, T>,
    attn_dropout: f64,
    drop: &mut DropState,
) -> Result<Var<'t, T>, TensorError> {
    multi_head_attention_with_weights(x, p, attn_dropout, drop).map(|(out, _)| out)
}

/// As [`multi_head_attention`], also returning the post-softmax attention
/// weights `[B, heads, T, T]` (before attention dropout).
pub fn multi_head_attention_with_weights<'t, T: Element>(
    x: Var<'t, T>,
    p: &AttentionParams<'t, T>,
    attn_dropout: f64,
    drop: &mut DropState,
) -> Result<(Var<'t, T>, Tensor<T>), TensorError> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(TensorError::RankTooLow { op: "multi_head_attention", rank: shape.len(), min: 3 });
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let heads = p.num_heads;
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::IndivisibleHeads { dim: d, heads });
    }
    let hd = d / heads;

    let split_heads = |v: Var<'t, T>| -> Result<Var<'t, T>, TensorError> {
        v.reshape([b, t, heads, hd])?.permute(&[0, 2, 1, 3])?.reshape([b * heads, t, hd])
    };
    let q = split_heads(x.matmul(p.wq)?.add(p.bq)?)?;
    let k = split_heads(x.matmul(p.wk)?.add(p.bk)?)?;
    let v = split_heads(x.matmul(p.wv)?.add(p.bv)?)?;

    let scores = q.matmul(k.permute(&[0, 2, 1])?)?.scale(1.0 / (hd as f64).sqrt())?;
    let weights = scores.softmax(2)?;
    let weights_value = weights.value().reshape([b, heads, t, t])?;
    let weights = dropout(weights, attn_dropout, drop)?;

    let context = weights.matmul(v)?.reshape([b, heads, t, hd])?.permute(&[0, 2, 1, 3])?.reshape([b, t, d])?;
    let out = context.matmul(p.wo)?.add(p.bo)?;
    Ok((out, weights_value))
}

/// Feed-forward block weights: `[d, h]` then `[h, d]`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForwardParams<'t, T: Element> {
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
}

/// dense → GELU → dropout → dense → dropout.
pub fn feed_forward<'t, T: Element>(
    x: Var<'t, T>,
    p: &FeedForwardParams<'t, T>,
    rate: f64,
    drop: &mut DropState,
) -> Result<Var<'t, T>, TensorError> {
    let h = x.matmul(p.w1)?.add(p.b1)?.gelu()?;
    let h = dropout(h, rate, drop)?;
    let y = h.matmul(p.w2)?.add(p.b2)?;
    dropout(y, rate, drop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check_many, Tape};

    fn attn_params<'t>(tape: &'t Tape<f64>, d: usize, heads: usize, salt: usize) -> AttentionParams<'t, f64> {
        let mat = |k: usize| tape.leaf(Tensor::from_fn([d, d], |i| (((i + k * 13 + salt) * 2654435761) % 1000) as f64 / 1000.0 - 0.5));
        let vec = |k: usize| tape.leaf(Tensor::from_fn([d], |i| ((i + k) as f64 * 0.7).sin() * 0.1));
        AttentionParams {
            wq: mat(1),
            bq: vec(1),
            wk: mat(2),
            bk: vec(2),
            wv: mat(3),
            bv: vec(3),
            wo: mat(4),
            bo: vec(4),
            num_heads: heads,
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let tape = Tape::<f64>::new();
        let d = 4;
        let p = attn_params(&tape, d, 2, 0);
        let x = tape.leaf(Tensor::from_fn([3, 1, d], |i| i as f64 * 0.3 - 1.0));
        let (out, w) = multi_head_attention_with_weights(x, &p, 0.0, &mut DropState::eval()).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        let expected = x.matmul(p.wv).unwrap().add(p.bv).unwrap().matmul(p.wo).unwrap().add(p.bo).unwrap();
        assert!(out.value().max_abs_diff(&expected.value()).unwrap() < 1e-12);
    }

    #[test]
    fn token_permutation_equivariance() {
        let tape = Tape::<f64>::new();
        let d = 8;
        let p = attn_params(&tape, d, 4, 5);
        let t = 5;
        let xv = Tensor::from_fn([2, t, d], |i| (i as f64 * 0.91).sin());
        let perm = [3, 0, 4, 1, 2];
        let permuted = Tensor::from_fn([2, t, d], |i| {
            let (bb, tt, dd) = (i / (t * d), (i / d) % t, i % d);
            xv.at(&[bb, perm[tt], dd])
        });
        let y = multi_head_attention(tape.leaf(xv), &p, 0.0, &mut DropState::eval()).unwrap().value();
        let yp = multi_head_attention(tape.leaf(permuted), &p, 0.0, &mut DropState::eval()).unwrap().value();
        for bb in 0..2 {
            for tt in 0..t {
                for dd in 0..d {
                    assert!((yp.at(&[bb, tt, dd]) - y.at(&[bb, perm[tt], dd])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_hand_case_matches_step_by_step_oracle() {
        // B=1, T=2, d=2, one head, hand-set weights; oracle evaluated directly.
        let tape = Tape::<f64>::new();
        let m = |v: [f64; 4]| tape.leaf(Tensor::new([2, 2], v.to_vec()).unwrap());
        let z = || tape.leaf(Tensor::zeros([2]));
        let p = AttentionParams {
            wq: m([1.0, 0.0, 0.0, 1.0]),
            bq: z(),
            wk: m([0.5, -1.0, 1.0, 0.5]),
            bk: z(),
            wv: m([2.0, 0.0, 1.0, 1.0]),
            bv: tape.leaf(Tensor::new([2], vec![0.1, -0.1]).unwrap()),
            wo: m([1.0, 1.0, 0.0, 1.0]),
            bo: z(),
            num_heads: 1,
        };
        let x = [[1.0, 2.0], [-1.0, 0.5]];
        let out = multi_head_attention(
            tape.leaf(Tensor::new([1, 2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap()),
            &p,
            0.0,
            &mut DropState::eval(),
        )
        .unwrap()
        .value();

        let proj = |w: [f64; 4], b: [f64; 2], r: [f64; 2]| {
            [r[0] * w[0] + r[1] * w[2] + b[0], r[0] * w[1] + r[1] * w[3] + b[1]]
        };
        let q: Vec<_> = x.iter().map(|&r| proj([1.0, 0.0, 0.0, 1.0], [0.0; 2], r)).collect();
        let k: Vec<_> = x.iter().map(|&r| proj([0.5, -1.0, 1.0, 0.5], [0.0; 2], r)).collect();
        let v: Vec<_> = x.iter().map(|&r| proj([2.0, 0.0, 1.0, 1.0], [0.1, -0.1], r)).collect();
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt()).collect();
            let z: f64 = s.iter().map(|a| a.exp()).sum();
            let a: Vec<f64> = s.iter().map(|a| a.exp() / z).collect();
            let ctx = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
            let o = proj([1.0, 1.0, 0.0, 1.0], [0.0; 2], ctx);
            assert!((out.at(&[0, i, 0]) - o[0]).abs() < 1e-12);
            assert!((out.at(&[0, i, 1]) - o[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let tape = Tape::<f64>::new();
        let p = attn_params(&tape, 6, 4, 0);
        let x = tape.leaf(Tensor::zeros([1, 2, 6]));
        assert_eq!(
            multi_head_attention(x, &p, 0.0, &mut DropState::eval()).unwrap_err(),
            TensorError::IndivisibleHeads { dim: 6, heads: 4 }
        );
    }

    #[test]
    fn feed_forward_special_cases() {
        let tape = Tape::<f64>::new();
        let d = 3;
        let xv = Tensor::from_fn([2, 2, d], |i| i as f64 * 0.4 - 1.0);
        let zeros = FeedForwardParams {
            w1: tape.leaf(Tensor::zeros([d, 5])),
            b1: tape.leaf(Tensor::zeros([5])),
            w2: tape.leaf(Tensor::zeros([5, d])),
            b2: tape.leaf(Tensor::zeros([d])),
        };
        let y = feed_forward(tape.leaf(xv.clone()), &zeros, 0.1, &mut DropState::train(3)).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let eye = Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        let ident = FeedForwardParams {
            w1: tape.leaf(eye.clone()),
            b1: tape.leaf(Tensor::zeros([d])),
            w2: tape.leaf(eye),
            b2: tape.leaf(Tensor::zeros([d])),
        };
        let y = feed_forward(tape.leaf(xv.clone()), &ident, 0.1, &mut DropState::eval()).unwrap().value();
        let expected = xv.map(crate::autograd::gelu_scalar);
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-15);

        let bad = FeedForwardParams { w1: tape.leaf(Tensor::zeros([d + 1, 5])), ..zeros };
        assert!(feed_forward(tape.leaf(xv), &bad, 0.0, &mut DropState::eval()).is_err());
    }

    #[test]
    fn feed_forward_two_by_two_oracle() {
        let tape = Tape::<f64>::new();
        let w1 = [0.3, -0.7, 1.1, 0.2];
        let w2 = [-0.5, 0.9, 0.4, 0.6];
        let (b1, b2) = ([0.05, -0.1], [0.2, 0.0]);
        let p = FeedForwardParams {
            w1: tape.leaf(Tensor::new([2, 2], w1.to_vec()).unwrap()),
            b1: tape.leaf(Tensor::new([2], b1.to_vec()).unwrap()),
            w2: tape.leaf(Tensor::new([2, 2], w2.to_vec()).unwrap()),
            b2: tape.leaf(Tensor::new([2], b2.to_vec()).unwrap()),
        };
        let x = [0.8, -1.3];
        let y = feed_forward(tape.leaf(Tensor::new([1, 1, 2], x.to_vec()).unwrap()), &p, 0.2, &mut DropState::eval())
            .unwrap()
            .value();
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let h = [gelu(x[0] * w1[0] + x[1] * w1[2] + b1[0]), gelu(x[0] * w1[1] + x[1] * w1[3] + b1[1])];
        let o = [h[0] * w2[0] + h[1] * w2[2] + b2[0], h[0] * w2[1] + h[1] * w2[3] + b2[1]];
        assert!((y.data()[0] - o[0]).abs() < 1e-14 && (y.data()[1] - o[1]).abs() < 1e-14);
    }

    #[test]
    fn dropout_and_stochastic_depth_edge_cases() {
        let tape = Tape::<f64>::new();
        let xv = Tensor::from_fn([4, 3], |i| i as f64 + 1.0);
        let x = tape.leaf(xv.clone());
        assert_eq!(dropout(x, 0.0, &mut DropState::train(1)).unwrap().value(), xv);
        assert_eq!(dropout(x, 0.9, &mut DropState::eval()).unwrap().value(), xv);
        assert!(dropout(x, 1.0, &mut DropState::train(1)).is_err());

        assert_eq!(stochastic_depth(x, 0.0, &mut DropState::train(1)).unwrap().value(), xv);
        assert_eq!(stochastic_depth(x, 0.0, &mut DropState::eval()).unwrap().value(), xv);
        assert_eq!(stochastic_depth(x, 0.7, &mut DropState::eval()).unwrap().value(), xv);
        let all = stochastic_depth(x, 1.0, &mut DropState::train(1)).unwrap().value();
        assert!(all.data().iter().all(|&v| v == 0.0));
        assert!(stochastic_depth(x, 1.5, &mut DropState::train(1)).is_err());
        assert!(stochastic_depth(x, -0.1, &mut DropState::train(1)).is_err());
    }

    #[test]
    fn stochastic_depth_drops_whole_samples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([64, 3, 2]));
        let y = stochastic_depth(x, 0.5, &mut DropState::train(9)).unwrap().value();
        for sample in y.data().chunks(6) {
            assert!(sample.iter().all(|&v| v == 0.0) || sample.iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn positional_embedding() {
        let tape = Tape::<f64>::new();
        let tokens = Tensor::from_fn([3, 4, 2], |i| i as f64);
        let pos = Tensor::from_fn([4, 2], |i| (i as f64).cos());
        let out = add_positional_embedding(tape.leaf(tokens.clone()), tape.leaf(Tensor::zeros([4, 2]))).unwrap();
        assert_eq!(out.value(), tokens);
        let out = add_positional_embedding(tape.leaf(Tensor::zeros([3, 4, 2])), tape.leaf(pos.clone())).unwrap();
        for chunk in out.value().data().chunks(8) {
            assert_eq!(chunk, pos.data());
        }
        let err = add_positional_embedding(tape.leaf(tokens), tape.leaf(Tensor::zeros([5, 2]))).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "positional_embedding", .. }));

        // d(sum(w ⊙ out))/dpos = Σ_batch w, checked against finite differences.
        let r = grad_check_many(
            |v| {
                let w = v[0].tape().constant(Tensor::from_fn([3, 4, 2], |i| (i as f64 * 0.3).sin()));
                add_positional_embedding(v[0], v[1])?.mul(w)?.sum()
            },
            &[Tensor::from_fn([3, 4, 2], |i| i as f64 * 0.1), pos],
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
