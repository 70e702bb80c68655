//! The distribution learner: graph-diffusion GRU encoding of counts features
//! followed by a self-attention encoder and a softmax head that outputs a
//! global production or attraction distribution.

pub mod tape;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{
    CountsDistribution, DistributionSource, FlowKind, GlobalDistribution, Network, NodeIncidence,
    TimeGrid,
};
use crate::sampler::Sample;
use tape::{Grads, Tape, Var};

/// Directed adjacency with its two row-normalized transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDiffusion {
    /// 0/1 adjacency: entry (i, j) = 1 iff a section runs i -> j.
    pub adjacency: Array2<f64>,
    /// Out-degree normalized transitions, rows sum to 1 (or 0 without edges).
    pub forward: Array2<f64>,
    /// In-degree normalized reverse transitions.
    pub reverse: Array2<f64>,
    /// Diffusion steps applied by convolutions on this graph.
    pub k_steps: usize,
}

/// Builds the adjacency and its normalized transition matrices.
pub fn build_adjacency(network: &Network, k_steps: usize) -> GraphDiffusion {
    assert!(k_steps >= 1, "diffusion needs at least one step");
    let n = network.n_od();
    let mut w = Array2::zeros((n, n));
    for sec in &network.sections {
        w[[sec.from_node, sec.to_node]] = 1.0;
    }
    let mut forward = w.clone();
    for mut row in forward.rows_mut() {
        let deg = row.sum();
        if deg > 0.0 {
            row.mapv_inplace(|v| v / deg);
        }
    }
    let mut reverse = w.t().to_owned();
    for mut row in reverse.rows_mut() {
        let deg = row.sum();
        if deg > 0.0 {
            row.mapv_inplace(|v| v / deg);
        }
    }
    GraphDiffusion { adjacency: w, forward, reverse, k_steps }
}

/// Node features per observation interval: chi[tau][i, e] = N[i, e] * D_E[tau, e].
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub n_od: usize,
    pub n_sec: usize,
    pub slices: Vec<Array2<f64>>,
}

/// Broadcasts the counts distribution over the signed incidence rows.
pub fn build_features(incidence: &NodeIncidence, d_e: &CountsDistribution) -> Features {
    assert_eq!(incidence.n_sec(), d_e.n_sec, "incidence and counts disagree on sections");
    let n_od = incidence.n_od();
    let n_sec = incidence.n_sec();
    let mut slices = Vec::with_capacity(d_e.observation_intervals);
    for tau in 0..d_e.observation_intervals {
        let mut x = Array2::zeros((n_od, n_sec));
        for i in 0..n_od {
            for e in 0..n_sec {
                x[[i, e]] = incidence.get(i, e) as f64 * d_e.get(tau, e);
            }
        }
        slices.push(x);
    }
    Features { n_od, n_sec, slices }
}

/// Shape manifest of a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerDims {
    pub n_od: usize,
    pub n_sec: usize,
    pub intervals: usize,
    pub window_len: usize,
    pub obs_per_interval: usize,
    pub d: usize,
    pub heads: usize,
    pub n_enc: usize,
    pub k_steps: usize,
}

impl LearnerDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::ShapeMismatch(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        if self.n_enc == 0 || self.k_steps == 0 {
            return Err(Error::ShapeMismatch(
                "encoder depth and diffusion steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    /// Rows fed to the encoder: one mutual vector per (interval, node).
    pub fn rows(&self) -> usize {
        self.intervals * self.n_od
    }

    pub fn from_grid(
        network: &Network,
        grid: &TimeGrid,
        d: usize,
        heads: usize,
        n_enc: usize,
        k_steps: usize,
    ) -> Self {
        LearnerDims {
            n_od: network.n_od(),
            n_sec: network.n_sec(),
            intervals: grid.estimation_intervals,
            window_len: grid.window_len,
            obs_per_interval: grid.k(),
            d,
            heads,
            n_enc,
            k_steps,
        }
    }
}

/// Diffusion filter weights of one GRU gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    /// Per diffusion step s: weights of (D_O^-1 W)^s x, shape (2 n_sec, n_sec).
    pub forward: Vec<Array2<f64>>,
    /// Per diffusion step s: weights of (D_I^-1 W^T)^s x.
    pub reverse: Vec<Array2<f64>>,
    /// Row bias (1, n_sec).
    pub bias: Array2<f64>,
}

/// One pre-norm encoder layer: multi-head self-attention plus feed-forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    /// Per head: combined query/key/value projection, shape (d, 3 d_h).
    pub qkv: Vec<Array2<f64>>,
    /// Output projection of the concatenated heads, shape (d, d).
    pub proj: Array2<f64>,
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub ff1: Array2<f64>,
    pub ff1_bias: Array2<f64>,
    pub ff2: Array2<f64>,
    pub ff2_bias: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
}

/// All trainable parameters of the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerParams {
    pub dims: LearnerDims,
    pub gate_r: GateWeights,
    pub gate_u: GateWeights,
    pub gate_c: GateWeights,
    /// Projection of hidden rows into the encoder width, (n_sec, d).
    pub input_proj: Array2<f64>,
    pub input_bias: Array2<f64>,
    /// Shared positional table added before and after the encoder, (I n_od, d).
    pub pos_embed: Array2<f64>,
    pub layers: Vec<EncoderLayer>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

impl LearnerParams {
    /// Seeded initialization: Glorot-uniform matrices, zero biases, unit
    /// normalization gains, small positional entries.
    pub fn init(dims: LearnerDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate = |rng: &mut ChaCha8Rng| GateWeights {
            forward: (0..dims.k_steps).map(|_| glorot(rng, 2 * dims.n_sec, dims.n_sec)).collect(),
            reverse: (0..dims.k_steps).map(|_| glorot(rng, 2 * dims.n_sec, dims.n_sec)).collect(),
            bias: Array2::zeros((1, dims.n_sec)),
        };
        let gate_r = gate(&mut rng);
        let gate_u = gate(&mut rng);
        let gate_c = gate(&mut rng);
        let input_proj = glorot(&mut rng, dims.n_sec, dims.d);
        let input_bias = Array2::zeros((1, dims.d));
        let pos_embed =
            Array2::from_shape_fn((dims.rows(), dims.d), |_| rng.random_range(-0.02..0.02));
        let d_h = dims.head_width();
        let layers = (0..dims.n_enc)
            .map(|_| EncoderLayer {
                qkv: (0..dims.heads).map(|_| glorot(&mut rng, dims.d, 3 * d_h)).collect(),
                proj: glorot(&mut rng, dims.d, dims.d),
                ln1_gain: Array2::ones((1, dims.d)),
                ln1_bias: Array2::zeros((1, dims.d)),
                ff1: glorot(&mut rng, dims.d, 4 * dims.d),
                ff1_bias: Array2::zeros((1, 4 * dims.d)),
                ff2: glorot(&mut rng, 4 * dims.d, dims.d),
                ff2_bias: Array2::zeros((1, dims.d)),
                ln2_gain: Array2::ones((1, dims.d)),
                ln2_bias: Array2::zeros((1, dims.d)),
            })
            .collect();
        Ok(LearnerParams {
            dims,
            gate_r,
            gate_u,
            gate_c,
            input_proj,
            input_bias,
            pos_embed,
            layers,
        })
    }

    /// All parameter blocks in a fixed order, with stable names.
    pub fn blocks(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (gname, gate) in
            [("r", &self.gate_r), ("u", &self.gate_u), ("c", &self.gate_c)]
        {
            for (sidx, w) in gate.forward.iter().enumerate() {
                out.push((format!("gate_{gname}.forward.{sidx}"), w));
            }
            for (sidx, w) in gate.reverse.iter().enumerate() {
                out.push((format!("gate_{gname}.reverse.{sidx}"), w));
            }
            out.push((format!("gate_{gname}.bias"), &gate.bias));
        }
        out.push(("input_proj".into(), &self.input_proj));
        out.push(("input_bias".into(), &self.input_bias));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (li, layer) in self.layers.iter().enumerate() {
            for (hi, w) in layer.qkv.iter().enumerate() {
                out.push((format!("layer{li}.qkv.{hi}"), w));
            }
            out.push((format!("layer{li}.proj"), &layer.proj));
            out.push((format!("layer{li}.ln1_gain"), &layer.ln1_gain));
            out.push((format!("layer{li}.ln1_bias"), &layer.ln1_bias));
            out.push((format!("layer{li}.ff1"), &layer.ff1));
            out.push((format!("layer{li}.ff1_bias"), &layer.ff1_bias));
            out.push((format!("layer{li}.ff2"), &layer.ff2));
            out.push((format!("layer{li}.ff2_bias"), &layer.ff2_bias));
            out.push((format!("layer{li}.ln2_gain"), &layer.ln2_gain));
            out.push((format!("layer{li}.ln2_bias"), &layer.ln2_bias));
        }
        out
    }

    /// Mutable view of the same blocks in the same order.
    pub fn blocks_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        for gate in [&mut self.gate_r, &mut self.gate_u, &mut self.gate_c] {
            for w in &mut gate.forward {
                out.push(w);
            }
            for w in &mut gate.reverse {
                out.push(w);
            }
            out.push(&mut gate.bias);
        }
        out.push(&mut self.input_proj);
        out.push(&mut self.input_bias);
        out.push(&mut self.pos_embed);
        for layer in &mut self.layers {
            for w in &mut layer.qkv {
                out.push(w);
            }
            out.push(&mut layer.proj);
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            out.push(&mut layer.ff1);
            out.push(&mut layer.ff1_bias);
            out.push(&mut layer.ff2);
            out.push(&mut layer.ff2_bias);
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
        }
        out
    }
}

/// DCGRU output per estimation interval, each state (n_od, n_sec).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Vec<Array2<f64>>,
}

// ---------------------------------------------------------------------------
// Tape-side forward pass
// ---------------------------------------------------------------------------

struct GateVars {
    forward: Vec<Var>,
    reverse: Vec<Var>,
    bias: Var,
}

struct LayerVars {
    qkv: Vec<Var>,
    proj: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    ff1: Var,
    ff1_bias: Var,
    ff2: Var,
    ff2_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
}

/// Tape handles of every parameter block, plus the graph constants.
struct ParamVars {
    gate_r: GateVars,
    gate_u: GateVars,
    gate_c: GateVars,
    input_proj: Var,
    input_bias: Var,
    pos_embed: Var,
    layers: Vec<LayerVars>,
    /// In [`LearnerParams::blocks`] order, for gradient collection.
    all: Vec<Var>,
    trans_fwd: Var,
    trans_rev: Var,
    k_steps: usize,
    head_width: usize,
}

impl ParamVars {
    fn wire(tape: &mut Tape, params: &LearnerParams, g: &GraphDiffusion, trainable: bool) -> Self {
        let mut all = Vec::new();
        let wire_gate = |tape: &mut Tape, gw: &GateWeights, all: &mut Vec<Var>| {
            let forward: Vec<Var> =
                gw.forward.iter().map(|w| tape.leaf(w.clone(), trainable)).collect();
            let reverse: Vec<Var> =
                gw.reverse.iter().map(|w| tape.leaf(w.clone(), trainable)).collect();
            let bias = tape.leaf(gw.bias.clone(), trainable);
            all.extend(forward.iter().copied());
            all.extend(reverse.iter().copied());
            all.push(bias);
            GateVars { forward, reverse, bias }
        };
        let gate_r = wire_gate(tape, &params.gate_r, &mut all);
        let gate_u = wire_gate(tape, &params.gate_u, &mut all);
        let gate_c = wire_gate(tape, &params.gate_c, &mut all);
        let input_proj = tape.leaf(params.input_proj.clone(), trainable);
        let input_bias = tape.leaf(params.input_bias.clone(), trainable);
        let pos_embed = tape.leaf(params.pos_embed.clone(), trainable);
        all.push(input_proj);
        all.push(input_bias);
        all.push(pos_embed);
        let mut layers = Vec::new();
        for layer in &params.layers {
            let qkv: Vec<Var> = layer.qkv.iter().map(|w| tape.leaf(w.clone(), trainable)).collect();
            let proj = tape.leaf(layer.proj.clone(), trainable);
            let ln1_gain = tape.leaf(layer.ln1_gain.clone(), trainable);
            let ln1_bias = tape.leaf(layer.ln1_bias.clone(), trainable);
            let ff1 = tape.leaf(layer.ff1.clone(), trainable);
            let ff1_bias = tape.leaf(layer.ff1_bias.clone(), trainable);
            let ff2 = tape.leaf(layer.ff2.clone(), trainable);
            let ff2_bias = tape.leaf(layer.ff2_bias.clone(), trainable);
            let ln2_gain = tape.leaf(layer.ln2_gain.clone(), trainable);
            let ln2_bias = tape.leaf(layer.ln2_bias.clone(), trainable);
            all.extend(qkv.iter().copied());
            all.extend([proj, ln1_gain, ln1_bias, ff1, ff1_bias, ff2, ff2_bias, ln2_gain, ln2_bias]);
            layers.push(LayerVars {
                qkv,
                proj,
                ln1_gain,
                ln1_bias,
                ff1,
                ff1_bias,
                ff2,
                ff2_bias,
                ln2_gain,
                ln2_bias,
            });
        }
        let trans_fwd = tape.leaf(g.forward.clone(), false);
        let trans_rev = tape.leaf(g.reverse.clone(), false);
        ParamVars {
            gate_r,
            gate_u,
            gate_c,
            input_proj,
            input_bias,
            pos_embed,
            layers,
            all,
            trans_fwd,
            trans_rev,
            k_steps: g.k_steps,
            head_width: params.dims.head_width(),
        }
    }
}

/// K-step bidirectional diffusion convolution on the tape.
fn diffusion_conv_t(tape: &mut Tape, pv: &ParamVars, gate: &GateVars, x: Var) -> Var {
    let mut acc: Option<Var> = None;
    let mut xf = x;
    let mut xr = x;
    for s in 0..pv.k_steps {
        if s > 0 {
            xf = tape.matmul(pv.trans_fwd, xf);
            xr = tape.matmul(pv.trans_rev, xr);
        }
        let tf = tape.matmul(xf, gate.forward[s]);
        let tr = tape.matmul(xr, gate.reverse[s]);
        let both = tape.add(tf, tr);
        acc = Some(match acc {
            Some(a) => tape.add(a, both),
            None => both,
        });
    }
    acc.expect("k_steps >= 1")
}

/// One DCGRU step on the tape: gates are diffusion convolutions over the
/// concatenated input and hidden features.
fn dcgru_step_t(tape: &mut Tape, pv: &ParamVars, x: Var, h: Var) -> Var {
    let xh = tape.concat_cols(&[x, h]);
    let conv_r = diffusion_conv_t(tape, pv, &pv.gate_r, xh);
    let pre_r = tape.add_row(conv_r, pv.gate_r.bias);
    let r = tape.sigmoid(pre_r);
    let conv_u = diffusion_conv_t(tape, pv, &pv.gate_u, xh);
    let pre_u = tape.add_row(conv_u, pv.gate_u.bias);
    let u = tape.sigmoid(pre_u);
    let rh = tape.mul(r, h);
    let xrh = tape.concat_cols(&[x, rh]);
    let conv_c = diffusion_conv_t(tape, pv, &pv.gate_c, xrh);
    let pre_c = tape.add_row(conv_c, pv.gate_c.bias);
    let c = tape.tanh(pre_c);
    // u ⊙ h + (1 - u) ⊙ c, written without a ones constant
    let uh = tape.mul(u, h);
    let uc = tape.mul(u, c);
    let cm = tape.sub(c, uc);
    tape.add(uh, cm)
}

/// Runs the DCGRU over explicit windows (start slice, slice count), one
/// hidden state per window, all from a zero initial state.
fn encode_windows_t(
    tape: &mut Tape,
    pv: &ParamVars,
    feats: &[Array2<f64>],
    windows: &[(usize, usize)],
    n_od: usize,
    n_sec: usize,
) -> Vec<Var> {
    let mut out = Vec::with_capacity(windows.len());
    for (start, len) in windows {
        let mut h = tape.leaf(Array2::zeros((n_od, n_sec)), false);
        for sidx in 0..*len {
            let x = tape.leaf(feats[start + sidx].clone(), false);
            h = dcgru_step_t(tape, pv, x, h);
        }
        out.push(h);
    }
    out
}

/// Windows of an estimation grid: interval t reads observation slices
/// t*k ..= t*k + delta.
fn grid_windows(grid: &TimeGrid) -> Result<Vec<(usize, usize)>> {
    let k = grid.k();
    let o = grid.observation_intervals;
    let delta = grid.window_len;
    let mut windows = Vec::with_capacity(grid.estimation_intervals);
    for t in 0..grid.estimation_intervals {
        let end = t * k + delta;
        if end >= o {
            return Err(Error::WindowOverrun { t, end, o });
        }
        windows.push((t * k, delta + 1));
    }
    Ok(windows)
}

/// Multi-head self-attention of one layer on the tape.
fn msa_t(tape: &mut Tape, pv: &ParamVars, layer: &LayerVars, z: Var) -> Var {
    let d_h = pv.head_width;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut heads = Vec::with_capacity(layer.qkv.len());
    for qkv_w in &layer.qkv {
        let qkv = tape.matmul(z, *qkv_w);
        let q = tape.slice_cols(qkv, 0, d_h);
        let k = tape.slice_cols(qkv, d_h, d_h);
        let v = tape.slice_cols(qkv, 2 * d_h, d_h);
        let logits = tape.matmul_nt(q, k);
        let scaled = tape.scale(logits, scale);
        let a = tape.softmax_rows(scaled);
        heads.push(tape.matmul(a, v));
    }
    let cat = tape.concat_cols(&heads);
    tape.matmul(cat, layer.proj)
}

/// Distribution head on the tape: projection, positional table, encoder
/// stack, second positional addition, global summation and row scoring.
fn head_t(tape: &mut Tape, pv: &ParamVars, hidden: &[Var]) -> Var {
    let stack = tape.concat_rows(hidden);
    let proj = tape.matmul(stack, pv.input_proj);
    let rows = tape.add_row(proj, pv.input_bias);
    let mut z = tape.add(rows, pv.pos_embed);
    for layer in &pv.layers {
        let n1 = tape.normalize_rows(z);
        let n1g = tape.mul_row(n1, layer.ln1_gain);
        let n1b = tape.add_row(n1g, layer.ln1_bias);
        let attn = msa_t(tape, pv, layer, n1b);
        z = tape.add(z, attn);
        let n2 = tape.normalize_rows(z);
        let n2g = tape.mul_row(n2, layer.ln2_gain);
        let n2b = tape.add_row(n2g, layer.ln2_bias);
        let f1 = tape.matmul(n2b, layer.ff1);
        let f1b = tape.add_row(f1, layer.ff1_bias);
        let act = tape.gelu(f1b);
        let f2 = tape.matmul(act, layer.ff2);
        let ff = tape.add_row(f2, layer.ff2_bias);
        z = tape.add(z, ff);
    }
    z = tape.add(z, pv.pos_embed);
    let g_star = tape.sum_rows(z);
    let scores = tape.matmul_nt(g_star, z);
    tape.softmax_rows(scores)
}

/// Full forward pass from features to the output distribution node.
fn forward_t(
    tape: &mut Tape,
    pv: &ParamVars,
    feats: &Features,
    windows: &[(usize, usize)],
) -> Var {
    let hidden = encode_windows_t(tape, pv, &feats.slices, windows, feats.n_od, feats.n_sec);
    head_t(tape, pv, &hidden)
}

// ---------------------------------------------------------------------------
// Plain (non-tape) views of the individual stages
// ---------------------------------------------------------------------------

/// Diffusion convolution on plain arrays: sums, over steps s and both
/// directions, the s-step diffused features times the step's weight matrix.
pub fn diffusion_conv(
    g: &GraphDiffusion,
    x: &Array2<f64>,
    forward_w: &[Array2<f64>],
    reverse_w: &[Array2<f64>],
) -> Array2<f64> {
    assert_eq!(forward_w.len(), g.k_steps);
    assert_eq!(reverse_w.len(), g.k_steps);
    let mut acc = Array2::zeros((x.nrows(), forward_w[0].ncols()));
    let mut xf = x.clone();
    let mut xr = x.clone();
    for s in 0..g.k_steps {
        if s > 0 {
            xf = g.forward.dot(&xf);
            xr = g.reverse.dot(&xr);
        }
        acc = acc + xf.dot(&forward_w[s]) + xr.dot(&reverse_w[s]);
    }
    acc
}

fn sigmoid_arr(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// One DCGRU step on plain arrays.
pub fn dcgru_step(
    g: &GraphDiffusion,
    params: &LearnerParams,
    x: &Array2<f64>,
    h_prev: &Array2<f64>,
) -> Array2<f64> {
    let xh = ndarray::concatenate(Axis(1), &[x.view(), h_prev.view()]).unwrap();
    let r = sigmoid_arr(
        &(diffusion_conv(g, &xh, &params.gate_r.forward, &params.gate_r.reverse)
            + &params.gate_r.bias),
    );
    let u = sigmoid_arr(
        &(diffusion_conv(g, &xh, &params.gate_u.forward, &params.gate_u.reverse)
            + &params.gate_u.bias),
    );
    let rh = &r * h_prev;
    let xrh = ndarray::concatenate(Axis(1), &[x.view(), rh.view()]).unwrap();
    let c = (diffusion_conv(g, &xrh, &params.gate_c.forward, &params.gate_c.reverse)
        + &params.gate_c.bias)
        .mapv(f64::tanh);
    &u * h_prev + &(1.0 - &u) * &c
}

/// Runs the DCGRU over each estimation interval's observation window and
/// returns the per-interval hidden states.
pub fn encode_sequence(
    feats: &Features,
    grid: &TimeGrid,
    g: &GraphDiffusion,
    params: &LearnerParams,
) -> Result<HiddenStates> {
    if feats.slices.len() != grid.observation_intervals {
        return Err(Error::ShapeMismatch(format!(
            "features cover {} observation slices, grid declares {}",
            feats.slices.len(),
            grid.observation_intervals
        )));
    }
    let windows = grid_windows(grid)?;
    let mut states = Vec::with_capacity(windows.len());
    for (start, len) in windows {
        let mut h = Array2::zeros((feats.n_od, feats.n_sec));
        for sidx in 0..len {
            h = dcgru_step(g, params, &feats.slices[start + sidx], &h);
        }
        states.push(h);
    }
    Ok(HiddenStates { states })
}

/// Single-head scaled dot-product self-attention on plain arrays.
pub fn self_attention(z: &Array2<f64>, u_qkv: &Array2<f64>) -> Array2<f64> {
    assert_eq!(u_qkv.ncols() % 3, 0);
    let d_h = u_qkv.ncols() / 3;
    let qkv = z.dot(u_qkv);
    let q = qkv.slice(s![.., 0..d_h]);
    let k = qkv.slice(s![.., d_h..2 * d_h]);
    let v = qkv.slice(s![.., 2 * d_h..3 * d_h]);
    let mut a = q.dot(&k.t()) / (d_h as f64).sqrt();
    for mut row in a.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    a.dot(&v)
}

/// Multi-head self-attention of one encoder layer on plain arrays.
pub fn msa(z: &Array2<f64>, layer: &EncoderLayer) -> Array2<f64> {
    let heads: Vec<Array2<f64>> = layer.qkv.iter().map(|w| self_attention(z, w)).collect();
    let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
    ndarray::concatenate(Axis(1), &views).unwrap().dot(&layer.proj)
}

/// Applies the encoder and scoring head to hidden states, returning the
/// global distribution values (length I * n_od, sums to 1).
pub fn distribution_head(
    params: &LearnerParams,
    g: &GraphDiffusion,
    hidden: &HiddenStates,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let pv = ParamVars::wire(&mut tape, params, g, false);
    let hs: Vec<Var> = hidden.states.iter().map(|h| tape.leaf(h.clone(), false)).collect();
    let out = head_t(&mut tape, &pv, &hs);
    tape.value(out).row(0).to_vec()
}

/// Full deterministic forward pass: counts distribution in, inferred global
/// distribution out.
pub fn infer(
    params: &LearnerParams,
    network: &Network,
    grid: &TimeGrid,
    d_e: &CountsDistribution,
    kind: FlowKind,
) -> Result<GlobalDistribution> {
    if network.n_od() != params.dims.n_od || network.n_sec() != params.dims.n_sec {
        return Err(Error::ShapeMismatch(format!(
            "network ({}, {}) does not match trained dims ({}, {})",
            network.n_od(),
            network.n_sec(),
            params.dims.n_od,
            params.dims.n_sec
        )));
    }
    if d_e.n_sec != params.dims.n_sec || d_e.observation_intervals != grid.observation_intervals {
        return Err(Error::ShapeMismatch("counts distribution shape mismatch".into()));
    }
    let g = build_adjacency(network, params.dims.k_steps);
    let incidence = crate::model::build_incidence(network);
    let feats = build_features(&incidence, d_e);
    let windows = grid_windows(grid)?;
    let mut tape = Tape::new();
    let pv = ParamVars::wire(&mut tape, params, &g, false);
    let out = forward_t(&mut tape, &pv, &feats, &windows);
    GlobalDistribution::new(kind, DistributionSource::Inferred, tape.value(out).row(0).to_vec())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub heads: usize,
    pub n_enc: usize,
    pub k_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 32,
            heads: 4,
            n_enc: 1,
            k_steps: 2,
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            split_ratio: 0.8,
            seed: 1,
        }
    }
}

/// One line of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: LearnerParams,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_validation: f64,
}

fn sample_target(sample: &Sample, kind: FlowKind) -> &GlobalDistribution {
    match kind {
        FlowKind::Production => &sample.production,
        FlowKind::Attraction => &sample.attraction,
    }
}

/// Mean JSD of the model over a slice of samples (plain forward passes).
pub fn evaluate(
    params: &LearnerParams,
    g: &GraphDiffusion,
    incidence: &NodeIncidence,
    grid: &TimeGrid,
    samples: &[Sample],
    kind: FlowKind,
) -> Result<f64> {
    let windows = grid_windows(grid)?;
    let mut total = 0.0;
    let mut tape = Tape::new();
    let pv = ParamVars::wire(&mut tape, params, g, false);
    let mark = tape.mark();
    for sample in samples {
        let feats = build_features(incidence, &sample.counts);
        let out = forward_t(&mut tape, &pv, &feats, &windows);
        let target = sample_target(sample, kind);
        let pred = tape.value(out).row(0).to_vec();
        total += metrics::jsd(&pred, target.values())?;
        tape.truncate(mark);
    }
    Ok(total / samples.len() as f64)
}

/// Everything a single-pair loss evaluation needs: diffusion operator,
/// input features, attention windows and the target row vector.
type PairLossSetup = (GraphDiffusion, Features, Vec<(usize, usize)>, Array2<f64>);

fn pair_loss_setup(
    params: &LearnerParams,
    network: &Network,
    grid: &TimeGrid,
    d_e: &CountsDistribution,
    target: &GlobalDistribution,
) -> Result<PairLossSetup> {
    if network.n_od() != params.dims.n_od || network.n_sec() != params.dims.n_sec {
        return Err(Error::ShapeMismatch("network does not match learner dims".into()));
    }
    if d_e.n_sec != params.dims.n_sec || d_e.observation_intervals != grid.observation_intervals {
        return Err(Error::ShapeMismatch("counts distribution shape mismatch".into()));
    }
    let out_len = grid.estimation_intervals * network.n_od();
    if target.len() != out_len {
        return Err(Error::ShapeMismatch(format!(
            "target has {} entries, model outputs {out_len}",
            target.len()
        )));
    }
    let g = build_adjacency(network, params.dims.k_steps);
    let incidence = crate::model::build_incidence(network);
    let feats = build_features(&incidence, d_e);
    let windows = grid_windows(grid)?;
    let t = Array2::from_shape_vec((1, out_len), target.values().to_vec())
        .expect("length checked above");
    Ok((g, feats, windows, t))
}

/// JSD training loss of the model on one counts-distribution / target pair.
pub fn pair_loss(
    params: &LearnerParams,
    network: &Network,
    grid: &TimeGrid,
    d_e: &CountsDistribution,
    target: &GlobalDistribution,
) -> Result<f64> {
    let (g, feats, windows, t) = pair_loss_setup(params, network, grid, d_e, target)?;
    let mut tape = Tape::new();
    let pv = ParamVars::wire(&mut tape, params, &g, false);
    let out = forward_t(&mut tape, &pv, &feats, &windows);
    let loss = tape.jsd_loss(out, t);
    Ok(tape.value(loss)[[0, 0]])
}

/// Gradient of [`pair_loss`] with respect to every parameter block, in the
/// order of [`LearnerParams::blocks`].
pub fn pair_loss_gradients(
    params: &LearnerParams,
    network: &Network,
    grid: &TimeGrid,
    d_e: &CountsDistribution,
    target: &GlobalDistribution,
) -> Result<Vec<Array2<f64>>> {
    let (g, feats, windows, t) = pair_loss_setup(params, network, grid, d_e, target)?;
    let mut tape = Tape::new();
    let pv = ParamVars::wire(&mut tape, params, &g, true);
    let out = forward_t(&mut tape, &pv, &feats, &windows);
    let loss = tape.jsd_loss(out, t);
    let grads = tape.backward(loss);
    Ok(params
        .blocks()
        .iter()
        .zip(&pv.all)
        .map(|((_, arr), var)| grads.get(*var, arr))
        .collect())
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
    lr: f64,
}

impl Adam {
    fn new(blocks: &[(String, &Array2<f64>)], lr: f64) -> Self {
        Adam {
            m: blocks.iter().map(|(_, b)| Array2::zeros(b.raw_dim())).collect(),
            v: blocks.iter().map(|(_, b)| Array2::zeros(b.raw_dim())).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut LearnerParams, grads: &[Array2<f64>]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (idx, block) in params.blocks_mut().into_iter().enumerate() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |mv, gv| *mv = B1 * *mv + (1.0 - B1) * gv);
            v.zip_mut_with(g, |vv, gv| *vv = B2 * *vv + (1.0 - B2) * gv * gv);
            ndarray::Zip::from(block).and(&*m).and(&*v).for_each(|p, mv, vv| {
                let mh = mv / bc1;
                let vh = vv / bc2;
                *p -= self.lr * mh / (vh.sqrt() + EPS);
            });
        }
    }
}

/// Trains a learner against the production or attraction labels of the
/// dataset. Returns the parameters with the best validation loss together
/// with the full per-epoch curve; epoch 0 records the untrained model.
pub fn train(
    dataset: &crate::sampler::Dataset,
    kind: FlowKind,
    network: &Network,
    grid: &TimeGrid,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if dataset.samples.len() < 2 {
        return Err(Error::InvalidConfig("training needs at least two samples".into()));
    }
    let dims = LearnerDims::from_grid(network, grid, cfg.d, cfg.heads, cfg.n_enc, cfg.k_steps);
    let mut params = LearnerParams::init(dims, cfg.seed)?;
    let g = build_adjacency(network, cfg.k_steps);
    let incidence = crate::model::build_incidence(network);
    let windows = grid_windows(grid)?;
    let (train_set, val_set) = dataset.split(cfg.split_ratio);

    // features are immutable across epochs; build them once
    let train_feats: Vec<Features> =
        train_set.iter().map(|smp| build_features(&incidence, &smp.counts)).collect();

    let mut curve = Vec::new();
    let val0 = evaluate(&params, &g, &incidence, grid, val_set, kind)?;
    let train0 = evaluate(&params, &g, &incidence, grid, train_set, kind)?;
    curve.push(EpochStats { epoch: 0, train_loss: train0, validation_loss: val0 });

    let mut best_params = params.clone();
    let mut best_val = val0;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut adam = Adam::new(&params.blocks(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);

    for epoch in 1..=cfg.max_epochs {
        // deterministic Fisher-Yates reshuffle per epoch
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let pv = ParamVars::wire(&mut tape, &params, &g, true);
            let mark = tape.mark();
            let mut grad_acc: Vec<Array2<f64>> =
                params.blocks().iter().map(|(_, b)| Array2::zeros(b.raw_dim())).collect();
            for &idx in batch {
                let out = forward_t(&mut tape, &pv, &train_feats[idx], &windows);
                let target = sample_target(&train_set[idx], kind);
                let target_row =
                    Array2::from_shape_vec((1, target.len()), target.values().to_vec())
                        .expect("target row shape");
                let loss = tape.jsd_loss(out, target_row);
                let lv = tape.value(loss)[[0, 0]];
                if !lv.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, loss: lv });
                }
                epoch_loss += lv;
                let grads: Grads = tape.backward(loss);
                for (slot, var) in grad_acc.iter_mut().zip(&pv.all) {
                    *slot += &grads.get(*var, slot);
                }
                tape.truncate(mark);
            }
            let scale = 1.0 / batch.len() as f64;
            for gblk in &mut grad_acc {
                gblk.mapv_inplace(|x| x * scale);
            }
            adam.step(&mut params, &grad_acc);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = evaluate(&params, &g, &incidence, grid, val_set, kind)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, loss: val_loss });
        }
        curve.push(EpochStats { epoch, train_loss, validation_loss: val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainResult { params: best_params, curve, best_epoch, best_validation: best_val })
}
