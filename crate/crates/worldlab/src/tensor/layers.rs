//! Layer builders: dense, conv, and a single-gate recurrent cell (plus its
//! convolutional twin). Each layer registers named parameters once and is
//! applied per step through the tape.

use rand::Rng;

use super::{Graph, ParamSet, Tensor, Var};

/// Uniform fan-in init, U(-sqrt(1/fan_in), sqrt(1/fan_in)).
pub fn init_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let s = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(shape, data)
}

pub fn add_dense<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) {
    ps.insert(format!("{name}.w"), init_uniform(rng, vec![fan_in, fan_out], fan_in));
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

pub fn dense(g: &mut Graph, ps: &ParamSet, name: &str, x: Var) -> Var {
    let w = g.param(ps, &format!("{name}.w"));
    let b = g.param(ps, &format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_bias(y, b)
}

pub fn dense_no_bias(g: &mut Graph, ps: &ParamSet, name: &str, x: Var) -> Var {
    let w = g.param(ps, &format!("{name}.w"));
    g.matmul(x, w)
}

pub fn add_conv<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) {
    let fan_in = kh * kw * cin;
    ps.insert(
        format!("{name}.k"),
        init_uniform(rng, vec![kh, kw, cin, cout], fan_in),
    );
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
}

pub fn conv_layer(
    g: &mut Graph,
    ps: &ParamSet,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let k = g.param(ps, &format!("{name}.k"));
    let b = g.param(ps, &format!("{name}.b"));
    let y = g.conv2d(x, k, stride, pad);
    g.add_bias(y, b)
}

/// Recurrent cell with one update gate:
/// z = sigmoid(Wz [x,h]), cand = tanh(Wc [x,h]), h' = z*h + (1-z)*cand.
pub fn add_gated_cell<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    hidden: usize,
) {
    add_dense(ps, rng, &format!("{name}.gate"), in_dim + hidden, hidden);
    add_dense(ps, rng, &format!("{name}.cand"), in_dim + hidden, hidden);
}

pub fn gated_cell(g: &mut Graph, ps: &ParamSet, name: &str, x: Var, h: Var) -> Var {
    let xh = g.concat_last(x, h);
    let z = dense(g, ps, &format!("{name}.gate"), xh);
    let z = g.sigmoid(z);
    let cand = dense(g, ps, &format!("{name}.cand"), xh);
    let cand = g.tanh(cand);
    let keep = g.mul(z, h);
    let one_minus = g.scale(z, -1.0);
    let one_minus = g.add_const(one_minus, 1.0);
    let new = g.mul(one_minus, cand);
    g.add(keep, new)
}

/// Same gating with 3x3 stride-1 convolutions over feature maps.
pub fn add_conv_gated_cell<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    in_ch: usize,
    hidden_ch: usize,
) {
    add_conv(ps, rng, &format!("{name}.gate"), 3, 3, in_ch + hidden_ch, hidden_ch);
    add_conv(ps, rng, &format!("{name}.cand"), 3, 3, in_ch + hidden_ch, hidden_ch);
}

pub fn conv_gated_cell(g: &mut Graph, ps: &ParamSet, name: &str, x: Var, h: Var) -> Var {
    let xh = g.concat_last(x, h);
    let z = conv_layer(g, ps, &format!("{name}.gate"), xh, 1, 1);
    let z = g.sigmoid(z);
    let cand = conv_layer(g, ps, &format!("{name}.cand"), xh, 1, 1);
    let cand = g.tanh(cand);
    let keep = g.mul(z, h);
    let one_minus = g.scale(z, -1.0);
    let one_minus = g.add_const(one_minus, 1.0);
    let new = g.mul(one_minus, cand);
    g.add(keep, new)
}
