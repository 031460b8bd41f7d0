//! Parameter layout and tape graphs for the purifier encoder/decoder stacks.
//!
//! Both families share the same skeleton: a head conv lifting RGB to the
//! feature depth, four residual blocks that keep the spatial extent, and a
//! two-layer per-pixel decoder back to RGB. The rcan variant adds a
//! channel-gating branch to every block; its last gate layer starts at zero
//! weight and unit bias, so a freshly built rcan block passes features
//! through unchanged.

use super::EncoderFamily;
use crate::error::Result;
use crate::params::ParamSet;
use crate::rng::Stream;
use crate::tensor::{Op, Tape, Tensor, TensorId};

pub(super) const BLOCKS: usize = 4;

fn push_conv(params: &mut ParamSet, name: &str, out: usize, inp: usize, k: usize, mut stream: Stream) {
    let fan_in = inp * k * k;
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let mut w = vec![0.0f32; out * inp * k * k];
    stream.fill_uniform(&mut w, -bound, bound);
    params.push(
        format!("{name}.w"),
        Tensor::new(&[out, inp, k, k], w).expect("conv weight shape"),
    );
    params.push(format!("{name}.b"), Tensor::zeros(&[out]));
}

fn push_dense(params: &mut ParamSet, name: &str, inp: usize, out: usize, mut stream: Stream) {
    let bound = (6.0 / inp as f64).sqrt() as f32;
    let mut w = vec![0.0f32; inp * out];
    stream.fill_uniform(&mut w, -bound, bound);
    params.push(
        format!("{name}.w"),
        Tensor::new(&[inp, out], w).expect("dense weight shape"),
    );
    params.push(format!("{name}.b"), Tensor::zeros(&[out]));
}

pub(super) fn init_params(
    family: EncoderFamily,
    depth: usize,
    channels: usize,
    stream: &Stream,
) -> ParamSet {
    let mut params = ParamSet::new();
    let mut slot = 0u64;
    let mut next = || {
        let s = stream.derive(slot);
        slot += 1;
        s
    };
    push_conv(&mut params, "head", depth, channels, 3, next());
    for b in 0..BLOCKS {
        push_conv(&mut params, &format!("b{b}.c1"), depth, depth, 3, next());
        // Residual branches close with zeros so a fresh stack is just
        // head + decoder; four live He-initialized blocks blow up the
        // activation scale and plain SGD diverges.
        params.push(format!("b{b}.c2.w"), Tensor::zeros(&[depth, depth, 3, 3]));
        params.push(format!("b{b}.c2.b"), Tensor::zeros(&[depth]));
        if family == EncoderFamily::RcanLite {
            let squeeze = depth / 4;
            push_dense(&mut params, &format!("b{b}.g1"), depth, squeeze, next());
            // Pass-through gate: zero weight, unit bias.
            params.push(format!("b{b}.g2.w"), Tensor::zeros(&[squeeze, depth]));
            params.push(format!("b{b}.g2.b"), Tensor::full(&[depth], 1.0));
        }
    }
    push_conv(&mut params, "dec1", depth, depth, 1, next());
    push_conv(&mut params, "dec2", channels, depth, 1, next());
    params
}

/// Parameter slots consumed by the encoder (head + blocks).
pub(super) fn encoder_slots(family: EncoderFamily) -> usize {
    let per_block = match family {
        EncoderFamily::EdsrLite => 4,
        EncoderFamily::RcanLite => 8,
    };
    2 + BLOCKS * per_block
}

fn conv(tape: &mut Tape, ids: &[TensorId], slot: &mut usize, x: TensorId) -> Result<TensorId> {
    let y = tape.apply(Op::Conv2d, &[x, ids[*slot], ids[*slot + 1]])?;
    *slot += 2;
    Ok(y)
}

fn dense(tape: &mut Tape, ids: &[TensorId], slot: &mut usize, x: TensorId) -> Result<TensorId> {
    let y = tape.apply(Op::Matmul, &[x, ids[*slot]])?;
    let y = tape.apply(Op::Add, &[y, ids[*slot + 1]])?;
    *slot += 2;
    Ok(y)
}

/// Channel gate: global average per channel, a squeeze MLP, then a clamped
/// multiplier broadcast back over the frame. Everything is expressed through
/// reshape/matmul so the gate works for any spatial extent.
fn gate(
    tape: &mut Tape,
    ids: &[TensorId],
    slot: &mut usize,
    feats: TensorId,
) -> Result<TensorId> {
    let shape = tape.value(feats).shape().to_vec();
    let (b, d, area) = (shape[0], shape[1], shape[2] * shape[3]);
    let flat = tape.apply(
        Op::Reshape {
            shape: vec![b * d, area],
        },
        &[feats],
    )?;
    let avg_w = tape.leaf(Tensor::full(&[area, 1], 1.0 / area as f32));
    let pooled = tape.apply(Op::Matmul, &[flat, avg_w])?;
    let pooled = tape.apply(
        Op::Reshape {
            shape: vec![b, d],
        },
        &[pooled],
    )?;
    let hidden = dense(tape, ids, slot, pooled)?;
    let hidden = tape.apply(Op::Relu, &[hidden])?;
    let g = dense(tape, ids, slot, hidden)?;
    let g = tape.apply(Op::Clamp { lo: 0.0, hi: 1.0 }, &[g])?;
    let g = tape.apply(
        Op::Reshape {
            shape: vec![b * d, 1],
        },
        &[g],
    )?;
    let spread = tape.leaf(Tensor::full(&[1, area], 1.0));
    let gmap = tape.apply(Op::Matmul, &[g, spread])?;
    let gmap = tape.apply(
        Op::Reshape {
            shape: vec![b, d, shape[2], shape[3]],
        },
        &[gmap],
    )?;
    tape.apply(Op::Mul, &[feats, gmap])
}

/// `[B, C, H, W]` image batch to `[B, D, H, W]` features.
pub(super) fn encode_graph(
    tape: &mut Tape,
    family: EncoderFamily,
    ids: &[TensorId],
    x: TensorId,
) -> Result<TensorId> {
    let mut slot = 0;
    let mut cur = conv(tape, ids, &mut slot, x)?;
    for _ in 0..BLOCKS {
        let skip = cur;
        let mut t = conv(tape, ids, &mut slot, cur)?;
        t = tape.apply(Op::Relu, &[t])?;
        t = conv(tape, ids, &mut slot, t)?;
        if family == EncoderFamily::RcanLite {
            t = gate(tape, ids, &mut slot, t)?;
        }
        cur = tape.apply(Op::Add, &[skip, t])?;
    }
    Ok(cur)
}

/// Per-pixel decode of `[B, D, H, W]` features back to `[B, C, H, W]`.
/// Unclamped: training losses see the raw output.
pub(super) fn decode_graph(
    tape: &mut Tape,
    family: EncoderFamily,
    ids: &[TensorId],
    feats: TensorId,
) -> Result<TensorId> {
    let mut slot = encoder_slots(family);
    let h = conv(tape, ids, &mut slot, feats)?;
    let h = tape.apply(Op::Relu, &[h])?;
    conv(tape, ids, &mut slot, h)
}
