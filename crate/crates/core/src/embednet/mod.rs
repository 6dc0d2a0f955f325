//! CNN-BiLSTM sleep stager and its per-epoch latent embedding.
//!
//! Each epoch passes through conv → batch-norm → ReLU → max-pool blocks and is
//! flattened; the flattened epochs of one recording form the sequence of a
//! bidirectional LSTM whose concatenated hidden states are the embedding.

pub mod layers;

use std::ops::Range;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::psg_io::EpochSet;
use crate::stage::{StageLabel, NUM_STAGES};
use layers::{
    cross_entropy, relu_backward, relu_in_place, softmax_cross_entropy_grad, softmax_rows, BatchNorm, BnCache, Conv1d,
    Linear, Lstm, LstmCache, MaxPool, Tensor3,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EmbedError {
    #[error("invalid embedder configuration: {0}")]
    InvalidConfig(String),
    #[error("infeasible layer shapes: {0}")]
    ShapeInfeasible(String),
    #[error("eval-mode forward without batch-norm running statistics")]
    ModeError,
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no epochs")]
    EmptyInput,
}

pub type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub input_channels: usize,
    pub input_length: usize,
    pub conv_out_channels: Vec<usize>,
    /// Odd lengths.
    pub conv_kernels: Vec<usize>,
    pub pool_widths: Vec<usize>,
    /// Hidden units per direction.
    pub lstm_hidden: usize,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub train_epochs: usize,
    /// Longest run of contiguous epochs per training step.
    pub max_sequence: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::new(4, 3000)
    }
}

impl EmbedderConfig {
    pub fn new(input_channels: usize, input_length: usize) -> Self {
        EmbedderConfig {
            input_channels,
            input_length,
            conv_out_channels: vec![256, 128, 64],
            conv_kernels: vec![201, 11, 11],
            pool_widths: vec![4, 4, 4],
            lstm_hidden: 256,
            num_classes: NUM_STAGES,
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            train_epochs: 20,
            max_sequence: 1000,
            seed: 0,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    /// Sample count after each conv block.
    pub fn layer_lengths(&self) -> Result<Vec<usize>> {
        let layers = self.conv_out_channels.len();
        if layers == 0 || self.conv_kernels.len() != layers || self.pool_widths.len() != layers {
            return Err(EmbedError::InvalidConfig("one kernel and pool width per conv layer".into()));
        }
        let positive = self.input_channels > 0
            && self.input_length > 0
            && self.lstm_hidden > 0
            && self.max_sequence > 0
            && self.conv_out_channels.iter().chain(&self.conv_kernels).chain(&self.pool_widths).all(|&v| v > 0);
        if !positive {
            return Err(EmbedError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.num_classes != NUM_STAGES {
            return Err(EmbedError::InvalidConfig(format!("num_classes must be {NUM_STAGES}")));
        }
        if let Some(k) = self.conv_kernels.iter().find(|k| *k % 2 == 0) {
            return Err(EmbedError::InvalidConfig(format!("kernel {k} is even")));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_eps > 0.0) || !(self.learning_rate >= 0.0) {
            return Err(EmbedError::InvalidConfig("optimizer settings out of range".into()));
        }
        let mut len = self.input_length;
        let mut out = Vec::with_capacity(layers);
        for (l, (&k, &w)) in self.conv_kernels.iter().zip(&self.pool_widths).enumerate() {
            if k > len {
                return Err(EmbedError::ShapeInfeasible(format!("layer {l}: kernel {k} exceeds length {len}")));
            }
            len /= w;
            if len == 0 {
                return Err(EmbedError::ShapeInfeasible(format!("layer {l}: pooling by {w} leaves no samples")));
            }
            out.push(len);
        }
        Ok(out)
    }

    /// Width of one flattened epoch entering the LSTM.
    pub fn flatten_dim(&self) -> Result<usize> {
        let lengths = self.layer_lengths()?;
        Ok(lengths.last().copied().unwrap_or(0) * self.conv_out_channels.last().copied().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderModel {
    pub config: EmbedderConfig,
    pub convs: Vec<Conv1d>,
    pub norms: Vec<BatchNorm>,
    pub pools: Vec<MaxPool>,
    pub lstm_forward: Lstm,
    pub lstm_backward: Lstm,
    /// D × 5.
    pub head: Linear,
    /// Batch statistics when true, running statistics when false.
    pub training: bool,
}

fn fill_uniform(values: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in values.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Seeded initialisation: uniform(±1/√fan_in) weights, unit batch-norm scale.
pub fn init_model(config: &EmbedderConfig) -> Result<EmbedderModel> {
    let flat = config.flatten_dim()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    let mut in_c = config.input_channels;
    for (&out_c, &k) in config.conv_out_channels.iter().zip(&config.conv_kernels) {
        let mut conv = Conv1d::zeros(in_c, out_c, k);
        fill_uniform(&mut conv.weight, in_c * k, &mut rng);
        fill_uniform(&mut conv.bias, in_c * k, &mut rng);
        convs.push(conv);
        norms.push(BatchNorm::new(out_c));
        in_c = out_c;
    }
    let h = config.lstm_hidden;
    let lstm = |rng: &mut ChaCha8Rng| {
        let mut l = Lstm::zeros(flat, h);
        fill_uniform(&mut l.w_ih, flat, rng);
        fill_uniform(&mut l.w_hh, h, rng);
        fill_uniform(&mut l.bias, h, rng);
        l
    };
    let lstm_forward = lstm(&mut rng);
    let lstm_backward = lstm(&mut rng);
    let d = config.embedding_dim();
    let mut head = Linear::zeros(d, NUM_STAGES);
    fill_uniform(&mut head.weight, d, &mut rng);
    fill_uniform(&mut head.bias, d, &mut rng);
    Ok(EmbedderModel {
        config: config.clone(),
        convs,
        norms,
        pools: config.pool_widths.iter().map(|&width| MaxPool { width }).collect(),
        lstm_forward,
        lstm_backward,
        head,
        training: true,
    })
}

/// Per-epoch outputs of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// n × D.
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
}

struct BlockCache {
    input: Tensor3,
    norm: BnCache,
    activated: Tensor3,
    argmax: Vec<u32>,
}

struct SequenceCache {
    blocks: Vec<BlockCache>,
    flat: Vec<f64>,
    reversed: Vec<f64>,
    fwd: LstmCache,
    bwd: LstmCache,
    hidden: Vec<f64>,
    probabilities: Vec<f64>,
}

/// Gradients in [`EmbedderModel::param_names`] order.
pub type Gradients = Vec<Vec<f64>>;

fn reverse_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width).rev() {
        out.extend_from_slice(row);
    }
    out
}

fn to_array(data: Vec<f64>, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), data).expect("row-major buffer")
}

/// Epochs `range` of `epochs` as a float64 batch.
pub fn input_tensor(epochs: &EpochSet, range: Range<usize>) -> Tensor3 {
    let n = range.len();
    let mut data = Vec::with_capacity(n * epochs.num_channels() * epochs.samples_per_epoch());
    for e in range {
        data.extend(epochs.epoch(e).iter().map(|&v| v as f64));
    }
    Tensor3::from_vec(n, epochs.num_channels(), epochs.samples_per_epoch(), data)
}

impl EmbedderModel {
    pub fn embedding_dim(&self) -> usize {
        2 * self.lstm_forward.hidden
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.convs.len() {
            names.push(format!("conv{l}.weight"));
            names.push(format!("conv{l}.bias"));
        }
        for l in 0..self.norms.len() {
            names.push(format!("norm{l}.gamma"));
            names.push(format!("norm{l}.beta"));
        }
        for dir in ["lstm_forward", "lstm_backward"] {
            for p in ["w_ih", "w_hh", "bias"] {
                names.push(format!("{dir}.{p}"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Learnable parameters in [`EmbedderModel::param_names`] order.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut p: Vec<&Vec<f64>> = Vec::new();
        for c in &self.convs {
            p.push(&c.weight);
            p.push(&c.bias);
        }
        for n in &self.norms {
            p.push(&n.gamma);
            p.push(&n.beta);
        }
        for l in [&self.lstm_forward, &self.lstm_backward] {
            p.push(&l.w_ih);
            p.push(&l.w_hh);
            p.push(&l.bias);
        }
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut p: Vec<&mut Vec<f64>> = Vec::new();
        for c in self.convs.iter_mut() {
            p.push(&mut c.weight);
            p.push(&mut c.bias);
        }
        for n in self.norms.iter_mut() {
            p.push(&mut n.gamma);
            p.push(&mut n.beta);
        }
        for l in [&mut self.lstm_forward, &mut self.lstm_backward] {
            p.push(&mut l.w_ih);
            p.push(&mut l.w_hh);
            p.push(&mut l.bias);
        }
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }

    /// Batch-norm running statistics, named `norm{l}.running_mean` / `running_var`.
    pub fn buffers(&self) -> Vec<(String, &Vec<f64>)> {
        let mut b = Vec::new();
        for (l, n) in self.norms.iter().enumerate() {
            b.push((format!("norm{l}.running_mean"), &n.running_mean));
            b.push((format!("norm{l}.running_var"), &n.running_var));
        }
        b
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut b = Vec::new();
        for (l, n) in self.norms.iter_mut().enumerate() {
            b.push((format!("norm{l}.running_mean"), &mut n.running_mean));
            b.push((format!("norm{l}.running_var"), &mut n.running_var));
        }
        b
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.n == 0 {
            return Err(EmbedError::EmptyInput);
        }
        if x.c != self.config.input_channels || x.t != self.config.input_length {
            return Err(EmbedError::ShapeMismatch(format!(
                "epochs are {}×{}, model expects {}×{}",
                x.c, x.t, self.config.input_channels, self.config.input_length
            )));
        }
        Ok(())
    }

    fn cnn_eval(&self, x: &Tensor3) -> Result<Tensor3> {
        let mut a = x.clone();
        for ((conv, norm), pool) in self.convs.iter().zip(&self.norms).zip(&self.pools) {
            let z = conv.forward(&a);
            let mut y = norm.forward_eval(&z).ok_or(EmbedError::ModeError)?;
            relu_in_place(&mut y);
            a = pool.forward(&y).0;
        }
        Ok(a)
    }

    fn cnn_train(&self, x: &Tensor3) -> (Tensor3, Vec<BlockCache>) {
        let mut a = x.clone();
        let mut blocks = Vec::with_capacity(self.convs.len());
        for ((conv, norm), pool) in self.convs.iter().zip(&self.norms).zip(&self.pools) {
            let z = conv.forward(&a);
            let (mut y, cache) = norm.forward_train(&z);
            drop(z);
            relu_in_place(&mut y);
            let (pooled, argmax) = pool.forward(&y);
            blocks.push(BlockCache { input: a, norm: cache, activated: y, argmax });
            a = pooled;
        }
        (a, blocks)
    }

    fn bilstm(&self, flat: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, LstmCache, LstmCache) {
        let width = flat.len() / n;
        let h = self.lstm_forward.hidden;
        let (hf, fwd) = self.lstm_forward.forward(flat, n);
        let reversed = reverse_rows(flat, width);
        let (hb, bwd) = self.lstm_backward.forward(&reversed, n);
        let mut hidden = Vec::with_capacity(n * 2 * h);
        for t in 0..n {
            hidden.extend_from_slice(&hf[t * h..(t + 1) * h]);
            hidden.extend_from_slice(&hb[(n - 1 - t) * h..(n - t) * h]);
        }
        (hidden, reversed, fwd, bwd)
    }

    /// Forward pass over contiguous epochs of one recording.
    pub fn forward(&self, x: &Tensor3) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let n = x.n;
        let flat = if self.training { self.cnn_train(x).0 } else { self.cnn_eval(x)? };
        let (hidden, ..) = self.bilstm(&flat.data, n);
        let logits = self.head.forward(&hidden);
        let probabilities = softmax_rows(&logits, NUM_STAGES);
        let d = self.embedding_dim();
        Ok(ForwardOutput {
            embeddings: to_array(hidden, n, d),
            logits: to_array(logits, n, NUM_STAGES),
            probabilities: to_array(probabilities, n, NUM_STAGES),
        })
    }

    fn forward_cached(&self, x: &Tensor3) -> SequenceCache {
        let n = x.n;
        let (flat, blocks) = self.cnn_train(x);
        let (hidden, reversed, fwd, bwd) = self.bilstm(&flat.data, n);
        let probabilities = softmax_rows(&self.head.forward(&hidden), NUM_STAGES);
        SequenceCache { blocks, flat: flat.data, reversed, fwd, bwd, hidden, probabilities }
    }

    /// Training-mode loss, parameter gradients and the batch-norm statistics used.
    pub fn loss_and_gradients(&self, x: &Tensor3, labels: &[StageLabel]) -> Result<(f64, Gradients, Vec<BnCache>)> {
        self.check_input(x)?;
        if labels.len() != x.n {
            return Err(EmbedError::ShapeMismatch(format!("{} epochs but {} labels", x.n, labels.len())));
        }
        let n = x.n;
        let y: Vec<usize> = labels.iter().map(|s| s.index()).collect();
        let cache = self.forward_cached(x);
        let loss = cross_entropy(&cache.probabilities, NUM_STAGES, &y);
        let dz = softmax_cross_entropy_grad(&cache.probabilities, NUM_STAGES, &y);
        let (dw_head, db_head, dhidden) = self.head.backward(&cache.hidden, &dz);

        let h = self.lstm_forward.hidden;
        let mut dhf = Vec::with_capacity(n * h);
        let mut dhb_rev = vec![0.0; n * h];
        for t in 0..n {
            let row = &dhidden[t * 2 * h..(t + 1) * 2 * h];
            dhf.extend_from_slice(&row[..h]);
            dhb_rev[(n - 1 - t) * h..(n - t) * h].copy_from_slice(&row[h..]);
        }
        let (gf, dflat_f) = self.lstm_forward.backward(&cache.flat, &cache.fwd, &dhf);
        let (gb, dflat_rev) = self.lstm_backward.backward(&cache.reversed, &cache.bwd, &dhb_rev);
        let width = cache.flat.len() / n;
        let mut dflat = dflat_f;
        for (row, rrow) in dflat.chunks_exact_mut(width).zip(dflat_rev.chunks_exact(width).rev()) {
            for (a, b) in row.iter_mut().zip(rrow) {
                *a += b;
            }
        }

        let layers = self.convs.len();
        let mut conv_grads = vec![(Vec::new(), Vec::new()); layers];
        let mut norm_grads = vec![(Vec::new(), Vec::new()); layers];
        let last = &cache.blocks[layers - 1];
        let mut d = Tensor3::from_vec(n, last.activated.c, last.activated.t / self.pools[layers - 1].width, dflat);
        let mut stats = Vec::with_capacity(layers);
        for l in (0..layers).rev() {
            let block = &cache.blocks[l];
            let mut da = self.pools[l].backward(&block.argmax, block.activated.t, &d);
            relu_backward(&block.activated, &mut da);
            let (dgamma, dbeta, dzt) = self.norms[l].backward(&block.norm, &da);
            norm_grads[l] = (dgamma, dbeta);
            let (g, dx) = self.convs[l].backward(&block.input, &dzt, l > 0);
            conv_grads[l] = (g.weight, g.bias);
            if let Some(dx) = dx {
                d = dx;
            }
        }
        for block in cache.blocks {
            stats.push(block.norm);
        }

        let mut grads: Gradients = Vec::new();
        for (w, b) in conv_grads {
            grads.push(w);
            grads.push(b);
        }
        for (g, b) in norm_grads {
            grads.push(g);
            grads.push(b);
        }
        for g in [gf, gb] {
            grads.push(g.w_ih);
            grads.push(g.w_hh);
            grads.push(g.bias);
        }
        grads.push(dw_head);
        grads.push(db_head);
        Ok((loss, grads, stats))
    }
}

/// Mean cross-entropy of probability rows against labels, log clamped at 1e-12.
pub fn loss(probabilities: &Array2<f64>, labels: &[StageLabel]) -> f64 {
    let y: Vec<usize> = labels.iter().map(|s| s.index()).collect();
    let p: Vec<f64> = probabilities.iter().copied().collect();
    cross_entropy(&p, probabilities.ncols(), &y)
}

/// Adam moment estimates.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(model: &EmbedderModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Adam { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn update(&mut self, model: &mut EmbedderModel, grads: &Gradients) {
        let (b1, b2) = model.config.adam_betas;
        let lr = model.config.learning_rate;
        let eps = model.config.adam_eps;
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (((p, g), m), v) in model.params_mut().into_iter().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Training loss after every optimizer step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l:?}\n"));
        }
        out
    }
}

/// Contiguous windows of at most `max_sequence` epochs within each recording.
fn sequence_chunks(epochs: &EpochSet, max_sequence: usize) -> Vec<Vec<Range<usize>>> {
    epochs
        .subject_runs()
        .into_iter()
        .map(|run| {
            let mut chunks = Vec::new();
            let mut s = run.start;
            while s < run.end {
                let e = (s + max_sequence).min(run.end);
                chunks.push(s..e);
                s = e;
            }
            chunks
        })
        .collect()
}

fn check_epochs(model: &EmbedderModel, epochs: &EpochSet) -> Result<()> {
    if epochs.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    let c = &model.config;
    if epochs.num_channels() != c.input_channels || epochs.samples_per_epoch() != c.input_length {
        return Err(EmbedError::ShapeMismatch(format!(
            "epochs are {}×{}, model expects {}×{}",
            epochs.num_channels(),
            epochs.samples_per_epoch(),
            c.input_channels,
            c.input_length
        )));
    }
    Ok(())
}

/// Adam on per-recording sequences, recordings shuffled each pass. The
/// returned model is in eval mode.
pub fn train(mut model: EmbedderModel, epochs: &EpochSet) -> Result<(EmbedderModel, LossTrace)> {
    check_epochs(&model, epochs)?;
    model.training = true;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model);
    let mut trace = LossTrace::default();
    let recordings = sequence_chunks(epochs, model.config.max_sequence);
    let mut order: Vec<usize> = (0..recordings.len()).collect();
    for pass in 0..model.config.train_epochs {
        order.shuffle(&mut rng);
        for &r in &order {
            for range in &recordings[r] {
                let step = trace.losses.len();
                let x = input_tensor(epochs, range.clone());
                let (l, grads, stats) = model.loss_and_gradients(&x, &epochs.labels()[range.clone()])?;
                if !l.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(EmbedError::NonFiniteLoss { step });
                }
                adam.update(&mut model, &grads);
                for (norm, s) in model.norms.iter_mut().zip(&stats) {
                    norm.update_running(s);
                }
                trace.losses.push(l);
            }
        }
        let recent = &trace.losses[trace.losses.len().saturating_sub(order.len().max(1))..];
        log::info!("embedder pass {}: mean loss {:.4}", pass + 1, recent.iter().sum::<f64>() / recent.len().max(1) as f64);
    }
    if model.norms.iter().any(|n| !n.has_running_stats) {
        // No step ran; fold the whole set's statistics in once.
        for range in recordings.iter().flatten() {
            let (_, blocks) = model.cnn_train(&input_tensor(epochs, range.clone()));
            for (norm, b) in model.norms.iter_mut().zip(&blocks) {
                norm.update_running(&b.norm);
            }
        }
    }
    model.training = false;
    Ok((model, trace))
}

/// Embeddings and stage probabilities aligned with the source epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// N × D.
    pub values: Array2<f64>,
    /// N × 5 CNN-BiLSTM stage probabilities.
    pub probabilities: Array2<f64>,
    pub subject_ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn num_epochs(&self) -> usize {
        self.values.nrows()
    }
}

/// Eval-mode embeddings, one sequence pass per recording window.
pub fn extract_embeddings(model: &EmbedderModel, epochs: &EpochSet) -> Result<EmbeddingMatrix> {
    check_epochs(model, epochs)?;
    let d = model.embedding_dim();
    let n = epochs.len();
    let mut values = Array2::zeros((n, d));
    let mut probabilities = Array2::zeros((n, NUM_STAGES));
    let mut eval = model.clone();
    eval.training = false;
    for range in sequence_chunks(epochs, model.config.max_sequence).into_iter().flatten() {
        let out = eval.forward(&input_tensor(epochs, range.clone()))?;
        values.slice_mut(ndarray::s![range.clone(), ..]).assign(&out.embeddings);
        probabilities.slice_mut(ndarray::s![range, ..]).assign(&out.probabilities);
    }
    Ok(EmbeddingMatrix { values, probabilities, subject_ids: epochs.subject_ids().to_vec() })
}

#[cfg(test)]
mod tests;
