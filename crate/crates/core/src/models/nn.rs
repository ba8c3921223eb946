//! Neural families: MLP, 1-D CNN and LSTM on a shared layer engine.
//!
//! Parameters live in flat named blocks so the optimizer, the gradient
//! checker and the persistence format all see the same layout. Batch
//! gradients accumulate over [`fixed_chunks`] in a fixed order, which keeps
//! training bit-identical across thread counts; dropout masks and weight
//! init are seeded through [`derive_seed`], never from global state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, fixed_chunks};
use crate::seed::derive_seed;
use crate::windowing::{shuffled_batches, BalancedBatchSampler, ClassWeights, GlycemicLabel};

use super::adam::AdamState;
use super::loss::{sigmoid, weighted_bce, BCE_EPS};
use super::{
    labels_to_targets, require_both_classes, FeatureMatrix, ModelFamily, ModelParams,
    TrainConfig, TrainedModel, TrainingMeta,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpParams {
    pub hidden: (usize, usize),
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams { hidden: (32, 16) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnParams {
    pub channels: (usize, usize),
    pub kernel: usize,
}

impl Default for CnnParams {
    fn default() -> Self {
        CnnParams {
            channels: (16, 32),
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmParams {
    pub hidden: usize,
    pub head: usize,
    /// Move the head's ReLU onto the LSTM hidden state instead of between
    /// the two dense layers.
    pub relu_on_hidden: bool,
}

impl Default for LstmParams {
    fn default() -> Self {
        LstmParams {
            hidden: 32,
            head: 16,
            relu_on_hidden: false,
        }
    }
}

/// Which architecture a trained [`NeuralModel`] carries; enough to rebuild
/// the topology when loading from disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeuralArch {
    Mlp(MlpParams),
    Cnn(CnnParams),
    Lstm(LstmParams),
}

/// Minibatch tensor: `rows` examples of `steps` timesteps with `ch`
/// channels, channel-last.
#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    data: Vec<f64>,
    rows: usize,
    steps: usize,
    ch: usize,
}

impl Tensor {
    fn zeros(rows: usize, steps: usize, ch: usize) -> Tensor {
        Tensor {
            data: vec![0.0; rows * steps * ch],
            rows,
            steps,
            ch,
        }
    }

    /// View a contiguous row range of a feature matrix as a single-channel
    /// tensor.
    fn from_rows(x: &FeatureMatrix, range: std::ops::Range<usize>) -> Tensor {
        Tensor {
            data: x.values[range.start * x.cols..range.end * x.cols].to_vec(),
            rows: range.len(),
            steps: x.cols,
            ch: 1,
        }
    }

    fn features(&self) -> usize {
        self.steps * self.ch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        w: usize,
        b: usize,
    },
    Relu,
    Dropout,
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        w: usize,
        b: usize,
    },
    GlobalMaxPool,
    Lstm {
        in_dim: usize,
        hidden: usize,
        wx: usize,
        wh: usize,
        b: usize,
    },
}

enum Cache {
    None,
    Input(Tensor),
    Mask(Vec<bool>),
    Scale(Vec<f64>),
    Pool { argmax: Vec<usize>, in_steps: usize },
    Lstm(Box<LstmCache>),
}

struct LstmCache {
    x: Tensor,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_g: Vec<f64>,
    gate_o: Vec<f64>,
    /// Cell and hidden state with a leading zero step: `rows * (steps + 1) *
    /// hidden`.
    cell: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Mode {
    Eval,
    Train { mask_seed: u64, dropout: f64 },
}

/// A feed-forward stack with its parameters in named blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNet {
    layers: Vec<LayerSpec>,
    blocks: Vec<Vec<f64>>,
    block_names: Vec<String>,
    /// Marks the blocks the L2 penalty applies to (weights, not biases).
    weight_blocks: Vec<bool>,
    input_cols: usize,
}

impl NeuralNet {
    /// `input_cols -> hidden.0 -> hidden.1 -> 1` with ReLU activations and
    /// dropout after the first hidden layer.
    pub fn mlp(input_cols: usize, params: &MlpParams, seed: u64) -> Result<NeuralNet> {
        let (h0, h1) = params.hidden;
        if input_cols == 0 || h0 == 0 || h1 == 0 {
            return Err(Error::Config("mlp layer widths must be positive".into()));
        }
        let mut b = NetBuilder::new(seed, input_cols);
        b.dense(input_cols, h0);
        b.relu();
        b.dropout();
        b.dense(h0, h1);
        b.relu();
        b.dense(h1, 1);
        Ok(b.finish())
    }

    /// Two valid convolutions, ReLU after each, global max pooling over
    /// time, then a linear head.
    pub fn cnn(input_cols: usize, params: &CnnParams, seed: u64) -> Result<NeuralNet> {
        let (c0, c1) = params.channels;
        let k = params.kernel;
        if c0 == 0 || c1 == 0 || k == 0 {
            return Err(Error::Config("cnn channels and kernel must be positive".into()));
        }
        if input_cols < 2 * k - 1 {
            return Err(Error::Config(format!(
                "cnn with kernel {k} needs at least {} input steps, got {input_cols}",
                2 * k - 1
            )));
        }
        let mut b = NetBuilder::new(seed, input_cols);
        b.conv1d(1, c0, k);
        b.relu();
        b.conv1d(c0, c1, k);
        b.relu();
        b.global_max_pool();
        b.dense(c1, 1);
        Ok(b.finish())
    }

    /// Single LSTM over the sequence; the final hidden state feeds a
    /// two-layer head whose ReLU sits between the dense layers, or directly
    /// on the hidden state with `relu_on_hidden`.
    pub fn lstm(input_cols: usize, params: &LstmParams, seed: u64) -> Result<NeuralNet> {
        if input_cols == 0 || params.hidden == 0 || params.head == 0 {
            return Err(Error::Config("lstm sizes must be positive".into()));
        }
        let mut b = NetBuilder::new(seed, input_cols);
        b.lstm(1, params.hidden);
        if params.relu_on_hidden {
            b.relu();
            b.dense(params.hidden, params.head);
            b.dense(params.head, 1);
        } else {
            b.dense(params.hidden, params.head);
            b.relu();
            b.dense(params.head, 1);
        }
        Ok(b.finish())
    }

    pub fn for_arch(arch: &NeuralArch, input_cols: usize, seed: u64) -> Result<NeuralNet> {
        match arch {
            NeuralArch::Mlp(p) => NeuralNet::mlp(input_cols, p, seed),
            NeuralArch::Cnn(p) => NeuralNet::cnn(input_cols, p, seed),
            NeuralArch::Lstm(p) => NeuralNet::lstm(input_cols, p, seed),
        }
    }

    pub fn input_cols(&self) -> usize {
        self.input_cols
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, b: usize) -> &[f64] {
        &self.blocks[b]
    }

    pub fn block_mut(&mut self, b: usize) -> &mut [f64] {
        &mut self.blocks[b]
    }

    pub fn block_name(&self, b: usize) -> &str {
        &self.block_names[b]
    }

    fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    /// Hypo probability per row (evaluation mode, order-preserving).
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.cols != self.input_cols {
            return Err(Error::Shape(format!(
                "net expects {} input columns, got {}",
                self.input_cols, x.cols
            )));
        }
        if x.rows == 0 {
            return Ok(Vec::new());
        }
        let chunks = fixed_chunks(x.rows);
        let parts = par::try_map_slice(&chunks, |range| {
            let t = Tensor::from_rows(x, range.clone());
            let (out, _) = self.forward(&t, Mode::Eval)?;
            Ok(out.data.iter().map(|&z| sigmoid(z)).collect::<Vec<f64>>())
        })?;
        Ok(parts.concat())
    }

    /// Class-weighted BCE (mean over all rows, plus an L2 term on weight
    /// blocks) and its gradient for every parameter block.
    ///
    /// `mask_seed` enables dropout at `dropout` rate; pass `None` to
    /// evaluate the deterministic network. Gradients sum over fixed chunks
    /// in index order, so the result does not depend on thread count.
    pub fn loss_and_grad(
        &self,
        x: &FeatureMatrix,
        y: &[GlycemicLabel],
        weights: &ClassWeights,
        l2: f64,
        dropout: f64,
        mask_seed: Option<u64>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if x.rows != y.len() {
            return Err(Error::Shape(format!(
                "{} rows for {} labels",
                x.rows,
                y.len()
            )));
        }
        if x.rows == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if x.cols != self.input_cols {
            return Err(Error::Shape(format!(
                "net expects {} input columns, got {}",
                self.input_cols, x.cols
            )));
        }
        if !(l2.is_finite() && l2 >= 0.0) {
            return Err(Error::Config("l2 must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }

        let n_norm = x.rows as f64;
        let targets = labels_to_targets(y);
        let sample_w: Vec<f64> = y.iter().map(|&l| weights.weight_for(l)).collect();
        let chunks = fixed_chunks(x.rows);

        let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> = par::map_indexed(chunks.len(), |ci| {
            let range = chunks[ci].clone();
            let t = Tensor::from_rows(x, range.clone());
            let mode = match mask_seed {
                Some(ms) => Mode::Train {
                    mask_seed: derive_seed(ms, &format!("chunk:{ci}")),
                    dropout,
                },
                None => Mode::Eval,
            };
            let (out, caches) = self.forward(&t, mode)?;
            debug_assert_eq!(out.features(), 1);
            let mut loss = 0.0;
            let mut dz = Tensor::zeros(t.rows, 1, 1);
            for (j, r) in range.clone().enumerate() {
                let p = sigmoid(out.data[j]);
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                let term = if targets[r] > 0.5 { -pc.ln() } else { -(1.0 - pc).ln() };
                loss += sample_w[r] * term / n_norm;
                dz.data[j] = sample_w[r] * (p - targets[r]) / n_norm;
            }
            let grads = self.backward(&caches, dz);
            Ok((loss, grads))
        });

        let mut loss = 0.0;
        let mut grads: Vec<Vec<f64>> = self.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
        for part in parts {
            let (part_loss, part_grads) = part?;
            loss += part_loss;
            for (acc, g) in grads.iter_mut().zip(part_grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }

        if l2 > 0.0 {
            for (bi, is_weight) in self.weight_blocks.iter().enumerate() {
                if !is_weight {
                    continue;
                }
                loss += 0.5 * l2 * self.blocks[bi].iter().map(|w| w * w).sum::<f64>();
                for (g, w) in grads[bi].iter_mut().zip(&self.blocks[bi]) {
                    *g += l2 * w;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite training loss".into()));
        }
        Ok((loss, grads))
    }

    fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let (out, cache) = match *layer {
                LayerSpec::Dense { in_dim, out_dim, w, b } => {
                    dense_forward(&x, in_dim, out_dim, &self.blocks[w], &self.blocks[b])?
                }
                LayerSpec::Relu => relu_forward(&x),
                LayerSpec::Dropout => dropout_forward(&x, mode, li),
                LayerSpec::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    w,
                    b,
                } => conv_forward(&x, in_ch, out_ch, kernel, &self.blocks[w], &self.blocks[b])?,
                LayerSpec::GlobalMaxPool => pool_forward(&x),
                LayerSpec::Lstm {
                    in_dim,
                    hidden,
                    wx,
                    wh,
                    b,
                } => lstm_forward(
                    &x,
                    in_dim,
                    hidden,
                    &self.blocks[wx],
                    &self.blocks[wh],
                    &self.blocks[b],
                )?,
            };
            caches.push(cache);
            x = out;
        }
        Ok((x, caches))
    }

    /// Per-block gradients for one chunk, given the logit gradient `dy`.
    fn backward(&self, caches: &[Cache], mut dy: Tensor) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = self.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            dy = match (*layer, &caches[li]) {
                (LayerSpec::Dense { in_dim, out_dim, w, b }, Cache::Input(xin)) => {
                    let (dx, dw, db) = dense_backward(xin, in_dim, out_dim, &self.blocks[w], &dy);
                    accumulate(&mut grads[w], dw);
                    accumulate(&mut grads[b], db);
                    dx
                }
                (LayerSpec::Relu, Cache::Mask(mask)) => {
                    for (g, &keep) in dy.data.iter_mut().zip(mask) {
                        if !keep {
                            *g = 0.0;
                        }
                    }
                    dy
                }
                (LayerSpec::Dropout, Cache::None) => dy,
                (LayerSpec::Dropout, Cache::Scale(scale)) => {
                    for (g, s) in dy.data.iter_mut().zip(scale) {
                        *g *= s;
                    }
                    dy
                }
                (
                    LayerSpec::Conv1d {
                        in_ch,
                        out_ch,
                        kernel,
                        w,
                        b,
                    },
                    Cache::Input(xin),
                ) => {
                    let (dx, dw, db) =
                        conv_backward(xin, in_ch, out_ch, kernel, &self.blocks[w], &dy);
                    accumulate(&mut grads[w], dw);
                    accumulate(&mut grads[b], db);
                    dx
                }
                (LayerSpec::GlobalMaxPool, Cache::Pool { argmax, in_steps }) => {
                    pool_backward(&dy, argmax, *in_steps)
                }
                (LayerSpec::Lstm { in_dim, hidden, wx, wh, b }, Cache::Lstm(cache)) => {
                    let (dx, dwx, dwh, db) = lstm_backward(
                        cache,
                        in_dim,
                        hidden,
                        &self.blocks[wx],
                        &self.blocks[wh],
                        &dy,
                    );
                    accumulate(&mut grads[wx], dwx);
                    accumulate(&mut grads[wh], dwh);
                    accumulate(&mut grads[b], db);
                    dx
                }
                _ => unreachable!("forward cache shape mismatch"),
            };
        }
        grads
    }
}

fn accumulate(acc: &mut [f64], add: Vec<f64>) {
    for (a, v) in acc.iter_mut().zip(add) {
        *a += v;
    }
}

struct NetBuilder {
    layers: Vec<LayerSpec>,
    blocks: Vec<Vec<f64>>,
    block_names: Vec<String>,
    weight_blocks: Vec<bool>,
    input_cols: usize,
    rng: ChaCha8Rng,
    dense_count: usize,
    conv_count: usize,
    lstm_count: usize,
}

impl NetBuilder {
    fn new(seed: u64, input_cols: usize) -> NetBuilder {
        NetBuilder {
            layers: Vec::new(),
            blocks: Vec::new(),
            block_names: Vec::new(),
            weight_blocks: Vec::new(),
            input_cols,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "init")),
            dense_count: 0,
            conv_count: 0,
            lstm_count: 0,
        }
    }

    /// He-uniform block: +-sqrt(6 / fan_in), drawn in index order.
    fn uniform_block(&mut self, name: String, n: usize, fan_in: usize) -> usize {
        let limit = (6.0 / fan_in as f64).sqrt();
        let block = (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect();
        self.push_block(name, block, true)
    }

    fn zero_block(&mut self, name: String, n: usize) -> usize {
        self.push_block(name, vec![0.0; n], false)
    }

    fn push_block(&mut self, name: String, block: Vec<f64>, is_weight: bool) -> usize {
        self.blocks.push(block);
        self.block_names.push(name);
        self.weight_blocks.push(is_weight);
        self.blocks.len() - 1
    }

    fn dense(&mut self, in_dim: usize, out_dim: usize) {
        let id = self.dense_count;
        self.dense_count += 1;
        let w = self.uniform_block(format!("dense{id}.w"), out_dim * in_dim, in_dim);
        let b = self.zero_block(format!("dense{id}.b"), out_dim);
        self.layers.push(LayerSpec::Dense { in_dim, out_dim, w, b });
    }

    fn relu(&mut self) {
        self.layers.push(LayerSpec::Relu);
    }

    fn dropout(&mut self) {
        self.layers.push(LayerSpec::Dropout);
    }

    fn global_max_pool(&mut self) {
        self.layers.push(LayerSpec::GlobalMaxPool);
    }

    fn conv1d(&mut self, in_ch: usize, out_ch: usize, kernel: usize) {
        let id = self.conv_count;
        self.conv_count += 1;
        let w = self.uniform_block(
            format!("conv{id}.w"),
            out_ch * in_ch * kernel,
            in_ch * kernel,
        );
        let b = self.zero_block(format!("conv{id}.b"), out_ch);
        self.layers.push(LayerSpec::Conv1d {
            in_ch,
            out_ch,
            kernel,
            w,
            b,
        });
    }

    fn lstm(&mut self, in_dim: usize, hidden: usize) {
        let id = self.lstm_count;
        self.lstm_count += 1;
        let wx = self.uniform_block(format!("lstm{id}.wx"), 4 * hidden * in_dim, in_dim);
        let wh = self.uniform_block(format!("lstm{id}.wh"), 4 * hidden * hidden, hidden);
        let b = self.zero_block(format!("lstm{id}.b"), 4 * hidden);
        self.layers.push(LayerSpec::Lstm {
            in_dim,
            hidden,
            wx,
            wh,
            b,
        });
    }

    fn finish(self) -> NeuralNet {
        NeuralNet {
            layers: self.layers,
            blocks: self.blocks,
            block_names: self.block_names,
            weight_blocks: self.weight_blocks,
            input_cols: self.input_cols,
        }
    }
}

fn dense_forward(
    x: &Tensor,
    in_dim: usize,
    out_dim: usize,
    w: &[f64],
    b: &[f64],
) -> Result<(Tensor, Cache)> {
    if x.features() != in_dim {
        return Err(Error::Shape(format!(
            "dense layer expects {in_dim} features, got {}",
            x.features()
        )));
    }
    let mut out = Tensor::zeros(x.rows, 1, out_dim);
    for r in 0..x.rows {
        let xi = &x.data[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            out.data[r * out_dim + o] =
                b[o] + row.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
        }
    }
    Ok((out, Cache::Input(x.clone())))
}

fn dense_backward(
    x: &Tensor,
    in_dim: usize,
    out_dim: usize,
    w: &[f64],
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let mut dx = Tensor::zeros(x.rows, x.steps, x.ch);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out_dim];
    for r in 0..x.rows {
        let xi = &x.data[r * in_dim..(r + 1) * in_dim];
        let dxi = &mut dx.data[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let g = dy.data[r * out_dim + o];
            db[o] += g;
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let dwrow = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwrow[i] += g * xi[i];
                dxi[i] += g * wrow[i];
            }
        }
    }
    (dx, dw, db)
}

fn relu_forward(x: &Tensor) -> (Tensor, Cache) {
    let mut out = x.clone();
    let mask: Vec<bool> = out
        .data
        .iter_mut()
        .map(|v| {
            if *v > 0.0 {
                true
            } else {
                *v = 0.0;
                false
            }
        })
        .collect();
    (out, Cache::Mask(mask))
}

fn dropout_forward(x: &Tensor, mode: Mode, layer_index: usize) -> (Tensor, Cache) {
    match mode {
        Mode::Eval => (x.clone(), Cache::None),
        Mode::Train { mask_seed, dropout } => {
            if dropout == 0.0 {
                return (x.clone(), Cache::None);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                mask_seed,
                &format!("layer:{layer_index}"),
            ));
            let keep = 1.0 / (1.0 - dropout);
            let scale: Vec<f64> = (0..x.data.len())
                .map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { keep })
                .collect();
            let mut out = x.clone();
            for (v, s) in out.data.iter_mut().zip(&scale) {
                *v *= s;
            }
            (out, Cache::Scale(scale))
        }
    }
}

fn conv_forward(
    x: &Tensor,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    w: &[f64],
    b: &[f64],
) -> Result<(Tensor, Cache)> {
    if x.ch != in_ch {
        return Err(Error::Shape(format!(
            "conv layer expects {in_ch} channels, got {}",
            x.ch
        )));
    }
    if x.steps < kernel {
        return Err(Error::Shape(format!(
            "conv kernel {kernel} longer than {} input steps",
            x.steps
        )));
    }
    let out_steps = x.steps - kernel + 1;
    let mut out = Tensor::zeros(x.rows, out_steps, out_ch);
    for r in 0..x.rows {
        for s in 0..out_steps {
            for o in 0..out_ch {
                let mut acc = b[o];
                for ic in 0..in_ch {
                    let wbase = (o * in_ch + ic) * kernel;
                    for j in 0..kernel {
                        acc += w[wbase + j] * x.data[(r * x.steps + s + j) * in_ch + ic];
                    }
                }
                out.data[(r * out_steps + s) * out_ch + o] = acc;
            }
        }
    }
    Ok((out, Cache::Input(x.clone())))
}

fn conv_backward(
    x: &Tensor,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    w: &[f64],
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let out_steps = x.steps - kernel + 1;
    let mut dx = Tensor::zeros(x.rows, x.steps, x.ch);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out_ch];
    for r in 0..x.rows {
        for s in 0..out_steps {
            for o in 0..out_ch {
                let g = dy.data[(r * out_steps + s) * out_ch + o];
                db[o] += g;
                for ic in 0..in_ch {
                    let wbase = (o * in_ch + ic) * kernel;
                    for j in 0..kernel {
                        let xi = (r * x.steps + s + j) * in_ch + ic;
                        dw[wbase + j] += g * x.data[xi];
                        dx.data[xi] += g * w[wbase + j];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn pool_forward(x: &Tensor) -> (Tensor, Cache) {
    let mut out = Tensor::zeros(x.rows, 1, x.ch);
    let mut argmax = vec![0usize; x.rows * x.ch];
    for r in 0..x.rows {
        for c in 0..x.ch {
            let mut best = f64::NEG_INFINITY;
            let mut best_s = 0usize;
            for s in 0..x.steps {
                let v = x.data[(r * x.steps + s) * x.ch + c];
                if v > best {
                    best = v;
                    best_s = s;
                }
            }
            out.data[r * x.ch + c] = best;
            argmax[r * x.ch + c] = best_s;
        }
    }
    (
        out,
        Cache::Pool {
            argmax,
            in_steps: x.steps,
        },
    )
}

fn pool_backward(dy: &Tensor, argmax: &[usize], in_steps: usize) -> Tensor {
    let ch = dy.ch;
    let mut dx = Tensor::zeros(dy.rows, in_steps, ch);
    for r in 0..dy.rows {
        for c in 0..ch {
            let s = argmax[r * ch + c];
            dx.data[(r * in_steps + s) * ch + c] += dy.data[r * ch + c];
        }
    }
    dx
}

fn lstm_forward(
    x: &Tensor,
    in_dim: usize,
    hidden: usize,
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
) -> Result<(Tensor, Cache)> {
    if x.ch != in_dim {
        return Err(Error::Shape(format!(
            "lstm expects {in_dim} input channels, got {}",
            x.ch
        )));
    }
    if x.steps == 0 {
        return Err(Error::Shape("lstm needs at least one timestep".into()));
    }
    let (rows, steps) = (x.rows, x.steps);
    let gate_len = rows * steps * hidden;
    let state_len = rows * (steps + 1) * hidden;
    let mut cache = LstmCache {
        x: x.clone(),
        gate_i: vec![0.0; gate_len],
        gate_f: vec![0.0; gate_len],
        gate_g: vec![0.0; gate_len],
        gate_o: vec![0.0; gate_len],
        cell: vec![0.0; state_len],
        hidden: vec![0.0; state_len],
    };
    for r in 0..rows {
        for t in 0..steps {
            let x_off = (r * steps + t) * in_dim;
            let prev_off = (r * (steps + 1) + t) * hidden;
            let cur_off = prev_off + hidden;
            let g_off = (r * steps + t) * hidden;
            for u in 0..hidden {
                let mut z = [b[u], b[hidden + u], b[2 * hidden + u], b[3 * hidden + u]];
                for (gate, zg) in z.iter_mut().enumerate() {
                    let wx_row = (gate * hidden + u) * in_dim;
                    for i in 0..in_dim {
                        *zg += wx[wx_row + i] * x.data[x_off + i];
                    }
                    let wh_row = (gate * hidden + u) * hidden;
                    for v in 0..hidden {
                        *zg += wh[wh_row + v] * cache.hidden[prev_off + v];
                    }
                }
                let gi = sigmoid(z[0]);
                let gf = sigmoid(z[1]);
                let gg = z[2].tanh();
                let go = sigmoid(z[3]);
                let c = gf * cache.cell[prev_off + u] + gi * gg;
                cache.gate_i[g_off + u] = gi;
                cache.gate_f[g_off + u] = gf;
                cache.gate_g[g_off + u] = gg;
                cache.gate_o[g_off + u] = go;
                cache.cell[cur_off + u] = c;
                cache.hidden[cur_off + u] = go * c.tanh();
            }
        }
    }
    let mut out = Tensor::zeros(rows, 1, hidden);
    for r in 0..rows {
        let last = (r * (steps + 1) + steps) * hidden;
        out.data[r * hidden..(r + 1) * hidden]
            .copy_from_slice(&cache.hidden[last..last + hidden]);
    }
    Ok((out, Cache::Lstm(Box::new(cache))))
}

fn lstm_backward(
    cache: &LstmCache,
    in_dim: usize,
    hidden: usize,
    wx: &[f64],
    wh: &[f64],
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>, Vec<f64>) {
    let x = &cache.x;
    let (rows, steps) = (x.rows, x.steps);
    let mut dx = Tensor::zeros(rows, steps, in_dim);
    let mut dwx = vec![0.0; wx.len()];
    let mut dwh = vec![0.0; wh.len()];
    let mut db = vec![0.0; 4 * hidden];

    for r in 0..rows {
        let mut dh: Vec<f64> = dy.data[r * hidden..(r + 1) * hidden].to_vec();
        let mut dc = vec![0.0; hidden];
        for t in (0..steps).rev() {
            let x_off = (r * steps + t) * in_dim;
            let prev_off = (r * (steps + 1) + t) * hidden;
            let cur_off = prev_off + hidden;
            let g_off = (r * steps + t) * hidden;
            let mut dh_prev = vec![0.0; hidden];
            for u in 0..hidden {
                let gi = cache.gate_i[g_off + u];
                let gf = cache.gate_f[g_off + u];
                let gg = cache.gate_g[g_off + u];
                let go = cache.gate_o[g_off + u];
                let c = cache.cell[cur_off + u];
                let c_prev = cache.cell[prev_off + u];
                let tc = c.tanh();

                let d_out = dh[u] * tc;
                let d_cell = dc[u] + dh[u] * go * (1.0 - tc * tc);
                let dz = [
                    d_cell * gg * gi * (1.0 - gi),
                    d_cell * c_prev * gf * (1.0 - gf),
                    d_cell * gi * (1.0 - gg * gg),
                    d_out * go * (1.0 - go),
                ];
                for (gate, &dzg) in dz.iter().enumerate() {
                    let gu = gate * hidden + u;
                    db[gu] += dzg;
                    let wx_row = gu * in_dim;
                    for i in 0..in_dim {
                        dwx[wx_row + i] += dzg * x.data[x_off + i];
                        dx.data[x_off + i] += dzg * wx[wx_row + i];
                    }
                    let wh_row = gu * hidden;
                    for v in 0..hidden {
                        dwh[wh_row + v] += dzg * cache.hidden[prev_off + v];
                        dh_prev[v] += dzg * wh[wh_row + v];
                    }
                }
                dc[u] = d_cell * gf;
            }
            dh = dh_prev;
        }
    }
    (dx, dwx, dwh, db)
}

/// A trained neural classifier: the architecture spec plus the fitted net.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    pub arch: NeuralArch,
    pub net: NeuralNet,
}

impl NeuralModel {
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        self.net.predict(x)
    }
}

pub fn fit_mlp(
    x: &FeatureMatrix,
    y: &[GlycemicLabel],
    val_x: &FeatureMatrix,
    val_y: &[GlycemicLabel],
    params: &MlpParams,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let net = NeuralNet::mlp(x.cols, params, cfg.seed)?;
    train_net(net, NeuralArch::Mlp(*params), ModelFamily::Mlp, x, y, val_x, val_y, cfg)
}

pub fn fit_cnn(
    x: &FeatureMatrix,
    y: &[GlycemicLabel],
    val_x: &FeatureMatrix,
    val_y: &[GlycemicLabel],
    params: &CnnParams,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let net = NeuralNet::cnn(x.cols, params, cfg.seed)?;
    train_net(net, NeuralArch::Cnn(*params), ModelFamily::Cnn, x, y, val_x, val_y, cfg)
}

pub fn fit_lstm(
    x: &FeatureMatrix,
    y: &[GlycemicLabel],
    val_x: &FeatureMatrix,
    val_y: &[GlycemicLabel],
    params: &LstmParams,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let net = NeuralNet::lstm(x.cols, params, cfg.seed)?;
    train_net(net, NeuralArch::Lstm(*params), ModelFamily::Lstm, x, y, val_x, val_y, cfg)
}

/// Minibatch Adam with early stopping on the class-weighted validation
/// loss; the weights from the best epoch are restored before returning.
#[allow(clippy::too_many_arguments)]
fn train_net(
    mut net: NeuralNet,
    arch: NeuralArch,
    family: ModelFamily,
    x: &FeatureMatrix,
    y: &[GlycemicLabel],
    val_x: &FeatureMatrix,
    val_y: &[GlycemicLabel],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    require_both_classes(y)?;
    if x.rows != y.len() || val_x.rows != val_y.len() {
        return Err(Error::Shape("feature rows and labels disagree".into()));
    }
    if val_x.cols != x.cols {
        return Err(Error::Shape(format!(
            "validation data has {} columns, training data has {}",
            val_x.cols, x.cols
        )));
    }
    if val_x.rows == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }

    let sampler = if cfg.balanced_batches {
        Some(BalancedBatchSampler::new(
            y,
            cfg.batch_size,
            cfg.min_minority_fraction,
            derive_seed(cfg.seed, "sampler"),
        )?)
    } else {
        None
    };

    let mut adam = AdamState::new(&net.block_sizes());
    let mut best_blocks = net.blocks.clone();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.max_epochs {
        let batches = match &sampler {
            Some(s) => s.epoch(epoch),
            None => shuffled_batches(x.rows, cfg.batch_size, derive_seed(cfg.seed, "plain"), epoch),
        };
        for (bi, batch) in batches.iter().enumerate() {
            let bx = x.gather(batch);
            let by: Vec<GlycemicLabel> = batch.iter().map(|&i| y[i]).collect();
            let mask_seed = derive_seed(cfg.seed, &format!("dropout:{epoch}:{bi}"));
            let (_, grads) = net.loss_and_grad(
                &bx,
                &by,
                &cfg.class_weights,
                cfg.l2,
                cfg.dropout,
                Some(mask_seed),
            )?;
            adam.step(&mut net.blocks, &grads, cfg.learning_rate)?;
        }
        epochs_run = epoch + 1;

        let val_probs = net.predict(val_x)?;
        let val_loss = weighted_bce(&val_probs, val_y, &cfg.class_weights)?;
        if val_loss < best_loss {
            best_loss = val_loss;
            best_blocks = net.blocks.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    net.blocks = best_blocks;

    Ok(TrainedModel {
        family,
        input_cols: x.cols,
        params: ModelParams::Neural(NeuralModel { arch, net }),
        meta: TrainingMeta {
            seed: cfg.seed,
            epochs_run,
            best_val_loss: Some(best_loss),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::ClassWeights;

    fn fixture(seed: u64, rows: usize, cols: usize) -> (FeatureMatrix, Vec<GlycemicLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let labels = (0..rows)
            .map(|i| {
                if i % 3 == 0 {
                    GlycemicLabel::Hypo
                } else {
                    GlycemicLabel::Normo
                }
            })
            .collect();
        (FeatureMatrix::new(rows, cols, values).unwrap(), labels)
    }

    fn test_weights() -> ClassWeights {
        ClassWeights {
            hypo: 2.3,
            normo: 0.7,
            scale_pos_weight: 3.0,
        }
    }

    /// Worst relative disagreement between analytic and central-difference
    /// gradients over every parameter. Checks at a generic point: every
    /// parameter (biases included) is jittered off its init value first so
    /// no pre-activation sits exactly on a ReLU kink.
    fn grad_check(
        net: &mut NeuralNet,
        x: &FeatureMatrix,
        y: &[GlycemicLabel],
        dropout: f64,
        mask_seed: Option<u64>,
    ) -> f64 {
        let mut jitter = ChaCha8Rng::seed_from_u64(derive_seed(91, "gradcheck"));
        for b in 0..net.block_count() {
            for v in net.block_mut(b) {
                *v += jitter.gen_range(-0.3..0.3);
            }
        }
        let w = test_weights();
        let l2 = 0.01;
        let (_, analytic) = net.loss_and_grad(x, y, &w, l2, dropout, mask_seed).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for b in 0..net.block_count() {
            for j in 0..net.block(b).len() {
                let orig = net.block(b)[j];
                net.block_mut(b)[j] = orig + h;
                let (up, _) = net.loss_and_grad(x, y, &w, l2, dropout, mask_seed).unwrap();
                net.block_mut(b)[j] = orig - h;
                let (down, _) = net.loss_and_grad(x, y, &w, l2, dropout, mask_seed).unwrap();
                net.block_mut(b)[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[b][j];
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let (x, y) = fixture(seed, 7, 4);
            let mut net = NeuralNet::mlp(4, &MlpParams { hidden: (3, 2) }, seed).unwrap();
            let worst = grad_check(&mut net, &x, &y, 0.0, None);
            assert!(worst < 1e-4, "seed {seed}: rel err {worst}");
        }
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let (x, y) = fixture(seed * 11 + 1, 6, 7);
            let params = CnnParams {
                channels: (2, 3),
                kernel: 2,
            };
            let mut net = NeuralNet::cnn(7, &params, seed).unwrap();
            let worst = grad_check(&mut net, &x, &y, 0.0, None);
            assert!(worst < 1e-4, "seed {seed}: rel err {worst}");
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let (x, y) = fixture(seed * 7 + 3, 5, 6);
            let params = LstmParams {
                hidden: 3,
                head: 2,
                relu_on_hidden: seed % 2 == 0,
            };
            let mut net = NeuralNet::lstm(6, &params, seed).unwrap();
            let worst = grad_check(&mut net, &x, &y, 0.0, None);
            assert!(worst < 1e-4, "seed {seed}: rel err {worst}");
        }
    }

    #[test]
    fn dropout_gradients_match_finite_differences_under_a_fixed_mask() {
        // The mask is a deterministic function of the seed, so the loss
        // stays differentiable and the check still applies.
        for seed in 0..3u64 {
            let (x, y) = fixture(seed + 40, 9, 4);
            let mut net = NeuralNet::mlp(4, &MlpParams { hidden: (4, 3) }, seed).unwrap();
            let worst = grad_check(&mut net, &x, &y, 0.4, Some(99 + seed));
            assert!(worst < 1e-4, "seed {seed}: rel err {worst}");
        }
    }

    #[test]
    fn dropout_masks_depend_only_on_the_seed() {
        let (x, y) = fixture(1, 8, 4);
        let net = NeuralNet::mlp(4, &MlpParams::default(), 5).unwrap();
        let w = test_weights();
        let (a, _) = net.loss_and_grad(&x, &y, &w, 0.0, 0.3, Some(7)).unwrap();
        let (b, _) = net.loss_and_grad(&x, &y, &w, 0.0, 0.3, Some(7)).unwrap();
        let (c, _) = net.loss_and_grad(&x, &y, &w, 0.0, 0.3, Some(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn max_pool_routes_gradient_to_the_first_maximum() {
        let x = Tensor {
            data: vec![2.0, 5.0, 5.0, 1.0],
            rows: 1,
            steps: 4,
            ch: 1,
        };
        let (out, cache) = pool_forward(&x);
        assert_eq!(out.data, vec![5.0]);
        let Cache::Pool { argmax, in_steps } = cache else {
            panic!("wrong cache")
        };
        assert_eq!(argmax, vec![1]);
        let dy = Tensor {
            data: vec![1.0],
            rows: 1,
            steps: 1,
            ch: 1,
        };
        let dx = pool_backward(&dy, &argmax, in_steps);
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn block_names_follow_layer_order() {
        let net = NeuralNet::lstm(6, &LstmParams::default(), 0).unwrap();
        let names: Vec<&str> = (0..net.block_count()).map(|b| net.block_name(b)).collect();
        assert_eq!(
            names,
            vec!["lstm0.wx", "lstm0.wh", "lstm0.b", "dense0.w", "dense0.b", "dense1.w", "dense1.b"]
        );
        assert_eq!(net.block(2).len(), 4 * 32);
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 4,
            batch_size: 8,
            ..TrainConfig::with_seed_and_weights(seed, test_weights())
        }
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let (x, y) = fixture(3, 30, 6);
        let (vx, vy) = fixture(4, 12, 6);
        let params = MlpParams { hidden: (6, 4) };
        let a = fit_mlp(&x, &y, &vx, &vy, &params, &quick_cfg(9)).unwrap();
        let b = fit_mlp(&x, &y, &vx, &vy, &params, &quick_cfg(9)).unwrap();
        assert_eq!(a.params, b.params);
        let c = fit_mlp(&x, &y, &vx, &vy, &params, &quick_cfg(10)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn best_epoch_weights_are_restored() {
        let (x, y) = fixture(5, 40, 5);
        let (vx, vy) = fixture(6, 16, 5);
        let cfg = TrainConfig {
            max_epochs: 8,
            batch_size: 8,
            ..TrainConfig::with_seed_and_weights(2, test_weights())
        };
        let model = fit_lstm(&x, &y, &vx, &vy, &LstmParams { hidden: 4, head: 3, relu_on_hidden: false }, &cfg).unwrap();
        let ModelParams::Neural(m) = &model.params else {
            panic!("wrong params variant")
        };
        let val_loss =
            weighted_bce(&m.net.predict(&vx).unwrap(), &vy, &cfg.class_weights).unwrap();
        assert_eq!(Some(val_loss), model.meta.best_val_loss);
    }

    #[test]
    fn unbalanced_batching_also_trains() {
        let (x, y) = fixture(8, 24, 4);
        let (vx, vy) = fixture(9, 8, 4);
        let cfg = TrainConfig {
            balanced_batches: false,
            max_epochs: 3,
            batch_size: 8,
            ..TrainConfig::with_seed_and_weights(1, test_weights())
        };
        let model = fit_mlp(&x, &y, &vx, &vy, &MlpParams { hidden: (4, 3) }, &cfg).unwrap();
        assert!(model.meta.best_val_loss.unwrap().is_finite());
        assert!(model.meta.epochs_run >= 1);
    }

    #[test]
    fn mlp_learns_a_separable_rule() {
        // Class determined by the mean of the inputs with a wide margin.
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for i in 0..60 {
            let center: f64 = if i % 2 == 0 { 1.2 } else { -1.2 };
            for _ in 0..4 {
                values.push(center + rng.gen_range(-0.3..0.3));
            }
            labels.push(if i % 2 == 0 {
                GlycemicLabel::Hypo
            } else {
                GlycemicLabel::Normo
            });
        }
        let x = FeatureMatrix::new(60, 4, values).unwrap();
        let cfg = TrainConfig {
            max_epochs: 60,
            batch_size: 16,
            dropout: 0.0,
            ..TrainConfig::with_seed_and_weights(4, ClassWeights::unit())
        };
        let model = fit_mlp(&x, &labels, &x, &labels, &MlpParams { hidden: (8, 4) }, &cfg).unwrap();
        let preds = super::super::predict_proba(&model, &x).unwrap();
        let correct = preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p.label == **l)
            .count();
        assert!(correct >= 58, "only {correct}/60 correct");
    }

    #[test]
    fn cnn_rejects_too_short_sequences() {
        assert!(NeuralNet::cnn(4, &CnnParams { channels: (2, 2), kernel: 3 }, 0).is_err());
        let net = NeuralNet::cnn(5, &CnnParams { channels: (2, 2), kernel: 3 }, 0).unwrap();
        let x = FeatureMatrix::new(1, 4, vec![0.0; 4]).unwrap();
        assert!(net.predict(&x).is_err());
    }
}
