//! Trainable classifiers built from scratch: dense and 3×3 convolutional
//! layers, backprop, and the SGD variants used as training-time defenses
//! (proximal L1/L2, dropout, augmented training, DP-SGD, adversarial
//! regularization, fine-tuning).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{augmentation_set, AugmentationSpec, ExampleRecord, FeatureSchema, ImageShape};
use crate::error::{Error, Result};
use crate::numerics::{argmax, digest_json, sigmoid, softmax_in_place, ConfidenceVector, Matrix, RngStream};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Logistic,
    Mlp,
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    LEAKY_SLOPE * v
                }
            }
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if y > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    pub input_dim: usize,
    #[serde(default)]
    pub image_shape: Option<ImageShape>,
    pub num_classes: usize,
    /// Dense hidden widths (after the convolutional stack for CNNs).
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// 3×3 valid convolutions, CNN only.
    #[serde(default)]
    pub conv_filters: Vec<usize>,
    /// Number of convolutions before the single 2×2 max-pool.
    #[serde(default)]
    pub pool_after: usize,
}

impl Architecture {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ArchKind::Logistic,
            input_dim,
            image_shape: None,
            num_classes,
            hidden: vec![],
            activation: Activation::Tanh,
            conv_filters: vec![],
            pool_after: 0,
        }
    }

    pub fn mlp(input_dim: usize, num_classes: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        Self {
            kind: ArchKind::Mlp,
            hidden,
            activation,
            ..Self::logistic(input_dim, num_classes)
        }
    }

    pub fn cnn(
        shape: ImageShape,
        num_classes: usize,
        conv_filters: Vec<usize>,
        pool_after: usize,
        hidden: Vec<usize>,
    ) -> Self {
        Self {
            kind: ArchKind::Cnn,
            input_dim: shape.len(),
            image_shape: Some(shape),
            num_classes,
            hidden,
            activation: Activation::Relu,
            conv_filters,
            pool_after,
        }
    }

    /// Four ReLU convolutions (32, 32, pool, 64, 64) and a 512-wide dense layer.
    pub fn reference_cnn(shape: ImageShape, num_classes: usize) -> Self {
        Self::cnn(shape, num_classes, vec![32, 32, 64, 64], 2, vec![512])
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("architecture: {m}")));
        if self.num_classes < 2 {
            return fail("need at least two classes");
        }
        if self.input_dim == 0 || self.hidden.contains(&0) || self.conv_filters.contains(&0) {
            return fail("zero-width layer");
        }
        match self.kind {
            ArchKind::Logistic if !self.hidden.is_empty() || !self.conv_filters.is_empty() => {
                fail("logistic regression has no hidden layers")
            }
            ArchKind::Mlp if !self.conv_filters.is_empty() => fail("mlp has no convolutions"),
            ArchKind::Cnn => {
                let Some(shape) = self.image_shape else {
                    return fail("cnn needs an image shape");
                };
                if shape.len() != self.input_dim {
                    return fail("image shape does not match input dimension");
                }
                if self.conv_filters.is_empty() || self.pool_after > self.conv_filters.len() {
                    return fail("bad convolution stack");
                }
                let mut side = shape.height.min(shape.width);
                for i in 0..self.conv_filters.len() {
                    if side < 3 {
                        return fail("image too small for convolution stack");
                    }
                    side -= 2;
                    if i + 1 == self.pool_after {
                        side /= 2;
                    }
                }
                if side == 0 {
                    return fail("image too small for convolution stack");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Two-class logistic regression keeps a single weight vector.
    fn binary_head(&self) -> bool {
        self.kind == ArchKind::Logistic && self.num_classes == 2
    }

    fn schema(&self) -> Option<FeatureSchema> {
        self.image_shape
            .map(|s| FeatureSchema::image(s, self.num_classes))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FineTuneMode {
    #[default]
    None,
    LastLayer,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l1: f64,
    pub l2: f64,
    pub dropout: f64,
    pub augmentation: Option<AugmentationSpec>,
    pub fine_tune: FineTuneMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.1,
            l1: 0.0,
            l2: 0.0,
            dropout: 0.0,
            augmentation: None,
            fine_tune: FineTuneMode::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("training: {m}")));
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {}", self.learning_rate));
        }
        if !(self.l1 >= 0.0 && self.l2 >= 0.0) {
            return fail("regularization weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        if let Some(aug) = &self.augmentation {
            aug.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_norm: 2.0,
            noise_multiplier: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvRegConfig {
    pub warmup_epochs: usize,
    pub k: usize,
    pub lambda: f64,
    pub confidence_branch: Vec<usize>,
    pub label_branch: Vec<usize>,
    pub head: Vec<usize>,
    pub defender_learning_rate: f64,
}

impl Default for AdvRegConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 3,
            k: 1,
            lambda: 1.0,
            confidence_branch: vec![256, 128, 16],
            label_branch: vec![128, 16],
            head: vec![64, 16],
            defender_learning_rate: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DpSummary {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub steps: usize,
    /// Largest per-example gradient norm after clipping, over all steps.
    pub max_clipped_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config_hash: String,
    pub seed: u64,
    pub stream_id: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub acc_train: f64,
    #[serde(default)]
    pub dp: Option<DpSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Layer {
    /// `y = x·Wᵀ + b`, `W` is `out × in`.
    Dense {
        weights: Matrix,
        bias: Vec<f64>,
    },
    /// Valid 3×3 convolution, stride 1, channels-last; `W` is `filters × 9·channels`.
    Conv3x3 {
        input: ImageShape,
        weights: Matrix,
        bias: Vec<f64>,
    },
    MaxPool2 {
        input: ImageShape,
    },
    Act {
        f: Activation,
    },
    /// Inverted dropout; identity outside training.
    Dropout {
        rate: f64,
    },
}

impl Layer {
    fn dense(inp: usize, out: usize, rng: &mut RngStream) -> Layer {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        let w = (0..inp * out)
            .map(|_| (2.0 * rng.uniform() - 1.0) * limit)
            .collect();
        Layer::Dense {
            weights: Matrix::from_vec_unchecked(out, inp, w),
            bias: vec![0.0; out],
        }
    }

    fn conv(input: ImageShape, filters: usize, rng: &mut RngStream) -> Layer {
        let fan_in = 9 * input.channels;
        let limit = (6.0 / (fan_in + 9 * filters) as f64).sqrt();
        let w = (0..filters * fan_in)
            .map(|_| (2.0 * rng.uniform() - 1.0) * limit)
            .collect();
        Layer::Conv3x3 {
            input,
            weights: Matrix::from_vec_unchecked(filters, fan_in, w),
            bias: vec![0.0; filters],
        }
    }

    fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv3x3 { .. })
    }
}

fn conv_out(s: ImageShape, filters: usize) -> ImageShape {
    ImageShape {
        height: s.height - 2,
        width: s.width - 2,
        channels: filters,
    }
}

fn pool_out(s: ImageShape) -> ImageShape {
    ImageShape {
        height: s.height / 2,
        width: s.width / 2,
        channels: s.channels,
    }
}

enum Cache {
    Dense(Matrix),
    Conv(Matrix),
    Pool { src: Vec<usize>, in_dim: usize },
    Act(Matrix),
    Dropout(Option<Vec<f64>>),
}

/// Feed-forward stack operating on row-per-example batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub(crate) struct Network {
    layers: Vec<Layer>,
}

type Grads = Vec<Vec<f64>>;

impl Network {
    /// Dense stack `input → hidden… → out` with `act` after every hidden layer.
    pub(crate) fn dense_stack(
        input: usize,
        hidden: &[usize],
        out: usize,
        act: Activation,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Network {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(Layer::dense(prev, h, rng));
            layers.push(Layer::Act { f: act });
            if dropout > 0.0 {
                layers.push(Layer::Dropout { rate: dropout });
            }
            prev = h;
        }
        layers.push(Layer::dense(prev, out, rng));
        Network { layers }
    }

    fn build(arch: &Architecture, dropout: f64, rng: &mut RngStream) -> Network {
        let out = if arch.binary_head() { 1 } else { arch.num_classes };
        if arch.kind != ArchKind::Cnn {
            return Self::dense_stack(arch.input_dim, &arch.hidden, out, arch.activation, dropout, rng);
        }
        let mut layers = Vec::new();
        let mut shape = arch.image_shape.expect("validated cnn");
        for (i, &f) in arch.conv_filters.iter().enumerate() {
            layers.push(Layer::conv(shape, f, rng));
            layers.push(Layer::Act { f: arch.activation });
            shape = conv_out(shape, f);
            if i + 1 == arch.pool_after {
                layers.push(Layer::MaxPool2 { input: shape });
                shape = pool_out(shape);
            }
        }
        let tail = Self::dense_stack(shape.len(), &arch.hidden, out, arch.activation, dropout, rng);
        layers.extend(tail.layers);
        Network { layers }
    }

    fn tensor_count(&self) -> usize {
        2 * self.layers.iter().filter(|l| l.has_params()).count()
    }

    fn zero_grads(&self) -> Grads {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Dense { weights, bias } | Layer::Conv3x3 { weights, bias, .. } => {
                    vec![vec![0.0; weights.as_slice().len()], vec![0.0; bias.len()]]
                }
                _ => vec![],
            })
            .collect()
    }

    fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Dense { weights, bias } | Layer::Conv3x3 { weights, bias, .. } => {
                    vec![weights.as_slice(), bias.as_slice()]
                }
                _ => vec![],
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Dense { weights, bias } | Layer::Conv3x3 { weights, bias, .. } => {
                    vec![weights.as_mut_slice(), bias.as_mut_slice()]
                }
                _ => vec![],
            })
            .collect()
    }

    /// Index of the final parameterized layer.
    fn last_param_layer(&self) -> usize {
        self.layers
            .iter()
            .rposition(Layer::has_params)
            .expect("network has a parameterized layer")
    }

    pub(crate) fn infer(&self, x: &Matrix) -> Matrix {
        self.run(x, self.layers.len(), None, None)
    }

    /// Runs the first `upto` layers; with `train` set, dropout is active and
    /// backward caches are recorded.
    fn run(
        &self,
        x: &Matrix,
        upto: usize,
        mut dropout_rng: Option<&mut RngStream>,
        mut caches: Option<&mut Vec<Cache>>,
    ) -> Matrix {
        let n = x.rows();
        let mut cur = x.clone();
        for layer in &self.layers[..upto] {
            let next = match layer {
                Layer::Dense { weights, bias } => {
                    let mut y = cur.matmul_t(weights);
                    add_bias(&mut y, bias);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Dense(cur));
                    }
                    y
                }
                Layer::Conv3x3 { input, weights, bias } => {
                    let cols = im2col(&cur, *input);
                    let mut y = cols.matmul_t(weights);
                    add_bias(&mut y, bias);
                    let per = y.as_slice().len() / n.max(1);
                    let y = Matrix::from_vec_unchecked(n, per, y.into_vec());
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Conv(cols));
                    }
                    y
                }
                Layer::MaxPool2 { input } => {
                    let (y, src) = max_pool(&cur, *input);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Pool {
                            src,
                            in_dim: cur.cols(),
                        });
                    }
                    y
                }
                Layer::Act { f } => {
                    let mut y = cur;
                    for v in y.as_mut_slice() {
                        *v = f.apply(*v);
                    }
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Act(y.clone()));
                    }
                    y
                }
                Layer::Dropout { rate } => {
                    let mut y = cur;
                    let mask = dropout_rng.as_deref_mut().map(|rng| {
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..y.as_slice().len())
                            .map(|_| if rng.uniform() < *rate { 0.0 } else { keep })
                            .collect();
                        for (v, m) in y.as_mut_slice().iter_mut().zip(&mask) {
                            *v *= m;
                        }
                        mask
                    });
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Dropout(mask));
                    }
                    y
                }
            };
            cur = next;
        }
        cur
    }

    fn forward_train(&self, x: &Matrix, dropout_rng: Option<&mut RngStream>) -> (Matrix, Vec<Cache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let out = self.run(x, self.layers.len(), dropout_rng, Some(&mut caches));
        (out, caches)
    }

    /// Backpropagates `d` (gradient w.r.t. the network output).
    ///
    /// Accumulates parameter gradients into `grads` when given, adds each
    /// example's squared parameter-gradient norm into `sq_norms` when given,
    /// and returns the input gradient when `need_input` is set.
    fn backward(
        &self,
        caches: &[Cache],
        mut d: Matrix,
        mut grads: Option<&mut Grads>,
        mut sq_norms: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Matrix> {
        let n = d.rows();
        let mut t = self.tensor_count();
        for (idx, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let first = idx == 0;
            if first && !need_input && !layer.has_params() {
                return None;
            }
            d = match (layer, cache) {
                (Layer::Dense { weights, .. }, Cache::Dense(x)) => {
                    t -= 2;
                    if let Some(g) = grads.as_deref_mut() {
                        d.t_matmul_acc(x, &mut g[t]);
                        col_sums_acc(&d, &mut g[t + 1]);
                    }
                    if let Some(sq) = sq_norms.as_deref_mut() {
                        for i in 0..n {
                            let dy: f64 = d.row(i).iter().map(|v| v * v).sum();
                            let xx: f64 = x.row(i).iter().map(|v| v * v).sum();
                            sq[i] += dy * (xx + 1.0);
                        }
                    }
                    if first && !need_input {
                        return None;
                    }
                    d.matmul(weights)
                }
                (Layer::Conv3x3 { input, weights, .. }, Cache::Conv(cols)) => {
                    t -= 2;
                    let f = weights.rows();
                    let d2 = Matrix::from_vec_unchecked(cols.rows(), f, d.into_vec());
                    if let Some(g) = grads.as_deref_mut() {
                        d2.t_matmul_acc(cols, &mut g[t]);
                        col_sums_acc(&d2, &mut g[t + 1]);
                    }
                    if let Some(sq) = sq_norms.as_deref_mut() {
                        let p = cols.rows() / n;
                        let k = cols.cols();
                        let mut gw = vec![0.0; f * k];
                        let mut gb = vec![0.0; f];
                        for (i, s) in sq.iter_mut().enumerate() {
                            let di = Matrix::from_vec_unchecked(
                                p,
                                f,
                                d2.as_slice()[i * p * f..(i + 1) * p * f].to_vec(),
                            );
                            let ci = Matrix::from_vec_unchecked(
                                p,
                                k,
                                cols.as_slice()[i * p * k..(i + 1) * p * k].to_vec(),
                            );
                            gw.fill(0.0);
                            gb.fill(0.0);
                            di.t_matmul_acc(&ci, &mut gw);
                            col_sums_acc(&di, &mut gb);
                            *s += gw.iter().chain(&gb).map(|v| v * v).sum::<f64>();
                        }
                    }
                    if first && !need_input {
                        return None;
                    }
                    col2im(&d2.matmul(weights), *input, n)
                }
                (Layer::MaxPool2 { .. }, Cache::Pool { src, in_dim }) => {
                    let mut dx = Matrix::zeros(n, *in_dim);
                    let out_dim = d.cols();
                    for i in 0..n {
                        let drow = d.row(i);
                        let dxrow = dx.row_mut(i);
                        for o in 0..out_dim {
                            dxrow[src[i * out_dim + o]] += drow[o];
                        }
                    }
                    dx
                }
                (Layer::Act { f }, Cache::Act(y)) => {
                    for (g, &yv) in d.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *g *= f.derivative_from_output(yv);
                    }
                    d
                }
                (Layer::Dropout { .. }, Cache::Dropout(mask)) => {
                    if let Some(mask) = mask {
                        for (g, m) in d.as_mut_slice().iter_mut().zip(mask) {
                            *g *= m;
                        }
                    }
                    d
                }
                _ => unreachable!("cache does not match layer"),
            };
        }
        Some(d)
    }
}

fn add_bias(y: &mut Matrix, bias: &[f64]) {
    let cols = bias.len();
    for row in y.as_mut_slice().chunks_exact_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sums_acc(d: &Matrix, acc: &mut [f64]) {
    for row in d.iter_rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Patch matrix with one row per (example, output position) and columns
/// ordered `(dy, dx, channel)`.
fn im2col(x: &Matrix, s: ImageShape) -> Matrix {
    let (h, w, c) = (s.height, s.width, s.channels);
    let (oh, ow) = (h - 2, w - 2);
    let k = 9 * c;
    let n = x.rows();
    let mut cols = vec![0.0; n * oh * ow * k];
    for i in 0..n {
        let img = x.row(i);
        for r in 0..oh {
            for col in 0..ow {
                let base = ((i * oh + r) * ow + col) * k;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let src = ((r + dy) * w + col + dx) * c;
                        let dst = base + (dy * 3 + dx) * c;
                        cols[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    Matrix::from_vec_unchecked(n * oh * ow, k, cols)
}

fn col2im(dcols: &Matrix, s: ImageShape, n: usize) -> Matrix {
    let (h, w, c) = (s.height, s.width, s.channels);
    let (oh, ow) = (h - 2, w - 2);
    let k = 9 * c;
    let mut dx = Matrix::zeros(n, h * w * c);
    for i in 0..n {
        let out = dx.row_mut(i);
        for r in 0..oh {
            for col in 0..ow {
                let base = ((i * oh + r) * ow + col) * k;
                let patch = &dcols.as_slice()[base..base + k];
                for dy in 0..3 {
                    for ddx in 0..3 {
                        let dst = ((r + dy) * w + col + ddx) * c;
                        let src = (dy * 3 + ddx) * c;
                        for ch in 0..c {
                            out[dst + ch] += patch[src + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn max_pool(x: &Matrix, s: ImageShape) -> (Matrix, Vec<usize>) {
    let o = pool_out(s);
    let (w, c) = (s.width, s.channels);
    let n = x.rows();
    let od = o.len();
    let mut y = Matrix::zeros(n, od);
    let mut src = vec![0usize; n * od];
    for i in 0..n {
        let img = x.row(i);
        for r in 0..o.height {
            for col in 0..o.width {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let j = ((2 * r + dy) * w + 2 * col + dx) * c + ch;
                        if img[j] > best_v {
                            best_v = img[j];
                            best = j;
                        }
                    }
                    let oi = (r * o.width + col) * c + ch;
                    y.row_mut(i)[oi] = best_v;
                    src[i * od + oi] = best;
                }
            }
        }
    }
    (y, src)
}

fn softmax_rows(m: &mut Matrix) {
    let cols = m.cols();
    for row in m.as_mut_slice().chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
}

fn gather(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Matrix::from_vec_unchecked(idx.len(), x.cols(), data)
}

/// Trained model exposing logits, confidences, features and input gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    architecture: Architecture,
    network: Network,
    meta: TrainingMeta,
}

impl Classifier {
    /// Randomly initialized, untrained model.
    pub fn init(arch: &Architecture, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            architecture: arch.clone(),
            network: Network::build(arch, 0.0, rng),
            meta: TrainingMeta::default(),
        })
    }

    /// Two-class logistic model with the given weight vector and bias.
    pub fn from_linear(w: &[f64], b: f64) -> Result<Self> {
        let arch = Architecture::logistic(w.len(), 2);
        arch.validate()?;
        Ok(Self {
            architecture: arch,
            network: Network {
                layers: vec![Layer::Dense {
                    weights: Matrix::from_vec(1, w.len(), w.to_vec())?,
                    bias: vec![b],
                }],
            },
            meta: TrainingMeta::default(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn num_classes(&self) -> usize {
        self.architecture.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim
    }

    /// `(w, b)` for two-class logistic models, where the positive-class logit is `wᵀx + b`.
    pub fn linear_params(&self) -> Option<(Vec<f64>, f64)> {
        match (self.architecture.binary_head(), self.network.layers.as_slice()) {
            (true, [Layer::Dense { weights, bias }]) => Some((weights.row(0).to_vec(), bias[0])),
            _ => None,
        }
    }

    fn check_batch(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn single(&self, x: &[f64]) -> Result<Matrix> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        self.check_batch(&m)?;
        Ok(m)
    }

    fn expand_logits(&self, raw: Matrix) -> Matrix {
        if !self.architecture.binary_head() {
            return raw;
        }
        let mut data = Vec::with_capacity(raw.rows() * 2);
        for &z in raw.as_slice() {
            data.extend_from_slice(&[0.0, z]);
        }
        Matrix::from_vec_unchecked(raw.rows(), 2, data)
    }

    /// Maps a gradient on the class logits back to the network output.
    fn contract_logit_grad(&self, d: Matrix) -> Matrix {
        if !self.architecture.binary_head() {
            return d;
        }
        let data = d.iter_rows().map(|r| r[1]).collect();
        Matrix::from_vec_unchecked(d.rows(), 1, data)
    }

    pub fn logits_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_batch(x)?;
        Ok(self.expand_logits(self.network.infer(x)))
    }

    /// Softmax confidences, one row per input.
    pub fn predict_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut l = self.logits_batch(x)?;
        softmax_rows(&mut l);
        Ok(l)
    }

    pub fn labels_batch(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits_batch(x)?.iter_rows().map(argmax).collect())
    }

    pub fn predict_confidences(&self, x: &[f64]) -> Result<ConfidenceVector> {
        let p = self.predict_batch(&self.single(x)?)?;
        ConfidenceVector::new(p.into_vec())
    }

    pub fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(self.labels_batch(&self.single(x)?)?[0])
    }

    pub fn penultimate_batch(&self, x: &Matrix) -> Result<Matrix> {
        if self.architecture.kind == ArchKind::Logistic {
            return Err(Error::UnsupportedArchitecture(
                "logistic regression has no penultimate layer".into(),
            ));
        }
        self.check_batch(x)?;
        Ok(self.network.run(x, self.network.last_param_layer(), None, None))
    }

    /// Activations feeding the final linear layer.
    pub fn penultimate_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.penultimate_batch(&self.single(x)?)?.into_vec())
    }

    /// `logit_y − max_{j≠y} logit_j`.
    pub fn margin(&self, x: &[f64], y: usize) -> Result<f64> {
        let l = self.logits_batch(&self.single(x)?)?;
        let (_, m) = margin_and_rival(l.row(0), y);
        Ok(m)
    }

    /// Gradient of the margin with respect to the input.
    pub fn input_gradient(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let xm = self.single(x)?;
        if y >= self.num_classes() {
            return Err(Error::InvalidInput(format!("label {y} out of range")));
        }
        let (raw, caches) = self.network.forward_train(&xm, None);
        let logits = self.expand_logits(raw);
        let (rival, _) = margin_and_rival(logits.row(0), y);
        let mut d = Matrix::zeros(1, self.num_classes());
        d.set(0, y, 1.0);
        d.set(0, rival, -1.0);
        let d = self.contract_logit_grad(d);
        let dx = self
            .network
            .backward(&caches, d, None, None, true)
            .expect("input gradient requested");
        Ok(dx.into_vec())
    }

    pub fn accuracy(&self, records: &[ExampleRecord]) -> Result<f64> {
        if records.is_empty() {
            return Ok(0.0);
        }
        let (x, y) = to_matrix(records)?;
        let pred = self.labels_batch(&x)?;
        let hits = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / records.len() as f64)
    }

    /// Writes the JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.model.architecture.validate()?;
        Ok(ckpt.model)
    }
}

const CHECKPOINT_FORMAT: &str = "miaudit-classifier";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Classifier,
}

/// Highest-scoring class other than `y` and the margin to it.
fn margin_and_rival(logits: &[f64], y: usize) -> (usize, f64) {
    let mut rival = usize::MAX;
    let mut best = f64::NEG_INFINITY;
    for (j, &v) in logits.iter().enumerate() {
        if j != y && v > best {
            best = v;
            rival = j;
        }
    }
    (rival, logits[y] - best)
}

pub(crate) fn to_matrix(records: &[ExampleRecord]) -> Result<(Matrix, Vec<usize>)> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.x.as_slice()).collect();
    let x = Matrix::from_rows(&rows)?;
    Ok((x, records.iter().map(|r| r.y).collect()))
}

fn prepare_data(
    arch: &Architecture,
    train: &[ExampleRecord],
    cfg: &TrainConfig,
) -> Result<(Matrix, Vec<usize>)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if let Some(r) = train.iter().find(|r| r.y >= arch.num_classes) {
        return Err(Error::InvalidInput(format!(
            "record {} label {} outside model classes",
            r.id, r.y
        )));
    }
    let Some(spec) = &cfg.augmentation else {
        let (x, y) = to_matrix(train)?;
        if x.cols() != arch.input_dim {
            return Err(Error::InvalidInput(format!(
                "data has {} features, architecture expects {}",
                x.cols(),
                arch.input_dim
            )));
        }
        return Ok((x, y));
    };
    let schema = arch
        .schema()
        .ok_or_else(|| Error::Schema("augmented training needs an image architecture".into()))?;
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for r in train {
        for q in augmentation_set(&r.x, &schema, spec)? {
            rows.push(q);
            ys.push(r.y);
        }
    }
    Ok((Matrix::from_rows(&rows)?, ys))
}

/// Extra logit gradient added to each target step (adversarial regularization).
type StepHook<'a> = dyn FnMut(&Matrix, &[usize], &Matrix) -> Result<Option<Matrix>> + 'a;

struct Sgd<'a> {
    cfg: &'a TrainConfig,
    dp: Option<&'a DpConfig>,
    /// Parameter tensors below this index stay frozen.
    trainable_from: usize,
    steps: usize,
    last_loss: f64,
    max_clipped_norm: f64,
}

impl<'a> Sgd<'a> {
    fn new(cfg: &'a TrainConfig, dp: Option<&'a DpConfig>) -> Self {
        Self {
            cfg,
            dp,
            trainable_from: 0,
            steps: 0,
            last_loss: f64::NAN,
            max_clipped_norm: 0.0,
        }
    }

    fn epochs(
        &mut self,
        model: &mut Classifier,
        x: &Matrix,
        y: &[usize],
        epochs: usize,
        rng: &mut RngStream,
        mut hook: Option<&mut StepHook<'_>>,
    ) -> Result<()> {
        for _ in 0..epochs {
            let perm = rng.permutation(x.rows());
            for batch in perm.chunks(self.cfg.batch_size) {
                let xb = gather(x, batch);
                let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
                self.step(model, &xb, &yb, rng, hook.as_deref_mut())?;
            }
        }
        Ok(())
    }

    fn step(
        &mut self,
        model: &mut Classifier,
        xb: &Matrix,
        yb: &[usize],
        rng: &mut RngStream,
        hook: Option<&mut StepHook<'_>>,
    ) -> Result<()> {
        let n = xb.rows();
        let inv_n = 1.0 / n as f64;
        let (raw, caches) = model.network.forward_train(xb, Some(rng));
        let mut probs = model.expand_logits(raw);
        softmax_rows(&mut probs);

        let mut loss = 0.0;
        let mut base = probs.clone();
        for (i, &t) in yb.iter().enumerate() {
            let p = probs.get(i, t);
            loss -= if p.is_nan() { p } else { p.max(1e-300).ln() };
            base.row_mut(i)[t] -= 1.0;
        }
        loss *= inv_n;
        if !loss.is_finite() {
            return Err(Error::Training {
                step: self.steps,
                message: format!("non-finite loss {loss}"),
            });
        }
        self.last_loss = loss;

        let mut grads = model.network.zero_grads();
        let mut d = base;
        match self.dp {
            None => {
                for v in d.as_mut_slice() {
                    *v *= inv_n;
                }
            }
            Some(dp) => {
                let mut sq = vec![0.0; n];
                model.network.backward(
                    &caches,
                    model.contract_logit_grad(d.clone()),
                    None,
                    Some(&mut sq),
                    false,
                );
                for (i, s) in sq.iter().enumerate() {
                    let norm = s.sqrt();
                    let scale = if norm > dp.clip_norm {
                        dp.clip_norm / norm
                    } else {
                        1.0
                    };
                    self.max_clipped_norm = self.max_clipped_norm.max(scale * norm);
                    let k = scale * inv_n;
                    for v in d.row_mut(i) {
                        *v *= k;
                    }
                }
            }
        }
        if let Some(h) = hook {
            if let Some(extra) = h(xb, yb, &probs)? {
                for (v, e) in d.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                    *v += e;
                }
            }
        }
        let d = model.contract_logit_grad(d);
        model.network.backward(&caches, d, Some(&mut grads), None, false);

        if let Some(dp) = self.dp {
            if dp.noise_multiplier > 0.0 {
                let sd = dp.noise_multiplier * dp.clip_norm;
                for g in grads.iter_mut().skip(self.trainable_from) {
                    for v in g.iter_mut() {
                        *v += sd * rng.normal() * inv_n;
                    }
                }
            }
        }
        self.apply(model, &grads);
        if model
            .network
            .params()
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Training {
                step: self.steps,
                message: "parameters became non-finite".into(),
            });
        }
        self.steps += 1;
        Ok(())
    }

    /// Gradient step followed by the proximal map of the L1/L2 penalty on weights.
    fn apply(&self, model: &mut Classifier, grads: &Grads) {
        let lr = self.cfg.learning_rate;
        let shrink = 1.0 / (1.0 + 2.0 * lr * self.cfg.l2);
        let thresh = lr * self.cfg.l1;
        for (t, (p, g)) in model
            .network
            .params_mut()
            .into_iter()
            .zip(grads)
            .enumerate()
            .skip(self.trainable_from)
        {
            let is_weight = t % 2 == 0;
            for (w, gv) in p.iter_mut().zip(g) {
                let mut u = *w - lr * gv;
                if is_weight {
                    if thresh > 0.0 {
                        u = u.signum() * (u.abs() - thresh).max(0.0);
                    }
                    if self.cfg.l2 > 0.0 {
                        u *= shrink;
                    }
                }
                *w = u;
            }
        }
    }
}

fn finish(
    mut model: Classifier,
    sgd: &Sgd<'_>,
    hash_input: &impl Serialize,
    rng: &RngStream,
    train: &[ExampleRecord],
) -> Result<Classifier> {
    let acc_train = model.accuracy(train)?;
    model.meta = TrainingMeta {
        config_hash: digest_json(hash_input)?,
        seed: rng.seed(),
        stream_id: rng.stream_id(),
        steps: sgd.steps,
        final_loss: sgd.last_loss,
        acc_train,
        dp: sgd.dp.map(|dp| DpSummary {
            clip_norm: dp.clip_norm,
            noise_multiplier: dp.noise_multiplier,
            steps: sgd.steps,
            max_clipped_norm: sgd.max_clipped_norm,
        }),
    };
    Ok(model)
}

fn fresh_model(arch: &Architecture, cfg: &TrainConfig, rng: &RngStream) -> Result<Classifier> {
    arch.validate()?;
    cfg.validate()?;
    if cfg.fine_tune != FineTuneMode::None {
        return Err(Error::Config(
            "fine-tune modes apply to fine_tune, not training from scratch".into(),
        ));
    }
    let mut init_rng = rng.derive_named("init");
    Ok(Classifier {
        architecture: arch.clone(),
        network: Network::build(arch, cfg.dropout, &mut init_rng),
        meta: TrainingMeta::default(),
    })
}

/// Mini-batch SGD on cross-entropy with the configured regularizers.
pub fn train_classifier(
    arch: &Architecture,
    train: &[ExampleRecord],
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Classifier> {
    let mut model = fresh_model(arch, cfg, rng)?;
    let (x, y) = prepare_data(arch, train, cfg)?;
    let mut sgd = Sgd::new(cfg, None);
    let mut sgd_rng = rng.derive_named("sgd");
    sgd.epochs(&mut model, &x, &y, cfg.epochs, &mut sgd_rng, None)?;
    finish(model, &sgd, &("plain", arch, cfg), rng, train)
}

/// DP-SGD: per-example clipping to `clip_norm` and Gaussian noise with
/// standard deviation `noise_multiplier · clip_norm` on the summed batch gradient.
pub fn train_dpsgd(
    arch: &Architecture,
    train: &[ExampleRecord],
    cfg: &TrainConfig,
    dp: &DpConfig,
    rng: &mut RngStream,
) -> Result<Classifier> {
    if !(dp.clip_norm > 0.0) || !(dp.noise_multiplier >= 0.0) {
        return Err(Error::Config(format!(
            "dp: clip norm {} and noise multiplier {} must be positive / non-negative",
            dp.clip_norm, dp.noise_multiplier
        )));
    }
    let mut model = fresh_model(arch, cfg, rng)?;
    let (x, y) = prepare_data(arch, train, cfg)?;
    let mut sgd = Sgd::new(cfg, Some(dp));
    let mut sgd_rng = rng.derive_named("sgd");
    sgd.epochs(&mut model, &x, &y, cfg.epochs, &mut sgd_rng, None)?;
    finish(model, &sgd, &("dp", arch, cfg, dp), rng, train)
}

/// Per-example parameter-gradient norms of the cross-entropy loss, no dropout.
pub fn per_example_gradient_norms(model: &Classifier, x: &Matrix, y: &[usize]) -> Result<Vec<f64>> {
    model.check_batch(x)?;
    let (raw, caches) = model.network.forward_train(x, None);
    let mut d = model.expand_logits(raw);
    softmax_rows(&mut d);
    for (i, &t) in y.iter().enumerate() {
        d.row_mut(i)[t] -= 1.0;
    }
    let mut sq = vec![0.0; x.rows()];
    model
        .network
        .backward(&caches, model.contract_logit_grad(d), None, Some(&mut sq), false);
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

/// Membership classifier over `(confidence vector, one-hot label)` pairs.
struct Defender {
    confidence: Network,
    label: Network,
    head: Network,
    split: usize,
}

impl Defender {
    fn new(k: usize, adv: &AdvRegConfig, rng: &mut RngStream) -> Result<Self> {
        let (Some((&c_out, c_hidden)), Some((&l_out, l_hidden))) =
            (adv.confidence_branch.split_last(), adv.label_branch.split_last())
        else {
            return Err(Error::Config("defender branches need at least one layer".into()));
        };
        let relu = Activation::Relu;
        let mut confidence = Network::dense_stack(k, c_hidden, c_out, relu, 0.0, rng);
        confidence.layers.push(Layer::Act { f: relu });
        let mut label = Network::dense_stack(k, l_hidden, l_out, relu, 0.0, rng);
        label.layers.push(Layer::Act { f: relu });
        let head = Network::dense_stack(c_out + l_out, &adv.head, 1, relu, 0.0, rng);
        Ok(Self {
            confidence,
            label,
            head,
            split: c_out,
        })
    }

    /// Forward pass returning member logits and everything backward needs.
    fn forward(&self, probs: &Matrix, y: &[usize]) -> (Matrix, [Vec<Cache>; 3]) {
        let onehot = one_hot(y, probs.cols());
        let (a, ca) = self.confidence.forward_train(probs, None);
        let (b, cb) = self.label.forward_train(&onehot, None);
        let joined = hconcat(&a, &b);
        let (z, ch) = self.head.forward_train(&joined, None);
        (z, [ca, cb, ch])
    }

    /// One BCE step on a balanced member / non-member batch.
    fn train_step(&mut self, probs: &Matrix, y: &[usize], member: &[bool], lr: f64) {
        let (z, [ca, cb, ch]) = self.forward(probs, y);
        let n = probs.rows() as f64;
        let dz: Vec<f64> = z
            .as_slice()
            .iter()
            .zip(member)
            .map(|(&zi, &m)| (sigmoid(zi) - if m { 1.0 } else { 0.0 }) / n)
            .collect();
        let dz = Matrix::from_vec_unchecked(probs.rows(), 1, dz);
        let mut gh = self.head.zero_grads();
        let dj = self
            .head
            .backward(&ch, dz, Some(&mut gh), None, true)
            .expect("input gradient");
        let (da, db) = hsplit(&dj, self.split);
        let mut ga = self.confidence.zero_grads();
        let mut gb = self.label.zero_grads();
        self.confidence.backward(&ca, da, Some(&mut ga), None, false);
        self.label.backward(&cb, db, Some(&mut gb), None, false);
        for (net, g) in [
            (&mut self.confidence, &ga),
            (&mut self.label, &gb),
            (&mut self.head, &gh),
        ] {
            for (p, gv) in net.params_mut().into_iter().zip(g) {
                for (w, d) in p.iter_mut().zip(gv) {
                    *w -= lr * d;
                }
            }
        }
    }

    /// Gradient of `mean(member score)` with respect to the confidence inputs.
    fn score_grad(&self, probs: &Matrix, y: &[usize]) -> Matrix {
        let (z, [ca, _, ch]) = self.forward(probs, y);
        let n = probs.rows() as f64;
        let dz: Vec<f64> = z
            .as_slice()
            .iter()
            .map(|&zi| {
                let s = sigmoid(zi);
                s * (1.0 - s) / n
            })
            .collect();
        let dz = Matrix::from_vec_unchecked(probs.rows(), 1, dz);
        let dj = self
            .head
            .backward(&ch, dz, None, None, true)
            .expect("input gradient");
        let (da, _) = hsplit(&dj, self.split);
        self.confidence
            .backward(&ca, da, None, None, true)
            .expect("input gradient")
    }

    fn member_scores(&self, probs: &Matrix, y: &[usize]) -> Vec<f64> {
        let (z, _) = self.forward(probs, y);
        z.as_slice().iter().map(|&v| sigmoid(v)).collect()
    }
}

fn one_hot(y: &[usize], k: usize) -> Matrix {
    let mut m = Matrix::zeros(y.len(), k);
    for (i, &c) in y.iter().enumerate() {
        m.set(i, c, 1.0);
    }
    m
}

fn hconcat(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(a.rows() * (a.cols() + b.cols()));
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Matrix::from_vec_unchecked(a.rows(), a.cols() + b.cols(), data)
}

fn hsplit(m: &Matrix, at: usize) -> (Matrix, Matrix) {
    let mut a = Vec::with_capacity(m.rows() * at);
    let mut b = Vec::with_capacity(m.rows() * (m.cols() - at));
    for r in m.iter_rows() {
        a.extend_from_slice(&r[..at]);
        b.extend_from_slice(&r[at..]);
    }
    (
        Matrix::from_vec_unchecked(m.rows(), at, a),
        Matrix::from_vec_unchecked(m.rows(), m.cols() - at, b),
    )
}

/// Back-propagates a gradient on softmax outputs to the logits.
fn softmax_backward(probs: &Matrix, dprobs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = dprobs.row(i);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (pj, gj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pj * (gj - inner);
        }
    }
    out
}

/// Min-max training against a jointly trained membership classifier.
///
/// After `warmup_epochs` of plain SGD, every target batch is preceded by `k`
/// defender steps on balanced batches drawn from `train` (members) and
/// `reference` (non-members); the target then minimizes cross-entropy plus
/// `lambda` times the defender's mean member score on its batch.
pub fn train_adv_reg(
    arch: &Architecture,
    train: &[ExampleRecord],
    reference: &[ExampleRecord],
    cfg: &TrainConfig,
    adv: &AdvRegConfig,
    rng: &mut RngStream,
) -> Result<Classifier> {
    if adv.k == 0 || !(adv.lambda >= 0.0) {
        return Err(Error::Config(format!(
            "adversarial regularization: k={} lambda={}",
            adv.k, adv.lambda
        )));
    }
    if reference.is_empty() {
        return Err(Error::InvalidInput("empty defender reference set".into()));
    }
    let mut model = fresh_model(arch, cfg, rng)?;
    let (x, y) = prepare_data(arch, train, cfg)?;
    let (rx, ry) = to_matrix(reference)?;
    let mut sgd = Sgd::new(cfg, None);
    let mut sgd_rng = rng.derive_named("sgd");
    let warmup = adv.warmup_epochs.min(cfg.epochs);
    sgd.epochs(&mut model, &x, &y, warmup, &mut sgd_rng, None)?;

    let mut def_rng = rng.derive_named("defender");
    let mut defender = Defender::new(arch.num_classes, adv, &mut def_rng)?;
    let half = cfg.batch_size;
    let mut members = vec![true; half];
    members.extend(std::iter::repeat_n(false, half));

    for _ in warmup..cfg.epochs {
        let perm = sgd_rng.permutation(x.rows());
        for batch in perm.chunks(cfg.batch_size) {
            let xb = gather(&x, batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            for _ in 0..adv.k {
                let mi: Vec<usize> = (0..half).map(|_| def_rng.below(x.rows())).collect();
                let ni: Vec<usize> = (0..half).map(|_| def_rng.below(rx.rows())).collect();
                let mut rows = gather(&x, &mi).into_vec();
                rows.extend(gather(&rx, &ni).into_vec());
                let both = Matrix::from_vec_unchecked(2 * half, x.cols(), rows);
                let mut labels: Vec<usize> = mi.iter().map(|&i| y[i]).collect();
                labels.extend(ni.iter().map(|&i| ry[i]));
                let probs = model.predict_batch(&both)?;
                defender.train_step(&probs, &labels, &members, adv.defender_learning_rate);
            }
            let mut hook = |_: &Matrix, yb: &[usize], probs: &Matrix| -> Result<Option<Matrix>> {
                if adv.lambda == 0.0 {
                    return Ok(None);
                }
                let mut g = defender.score_grad(probs, yb);
                for v in g.as_mut_slice() {
                    *v *= adv.lambda;
                }
                Ok(Some(softmax_backward(probs, &g)))
            };
            sgd.step(&mut model, &xb, &yb, &mut sgd_rng, Some(&mut hook))?;
        }
    }
    finish(model, &sgd, &("adv-reg", arch, cfg, adv), rng, train)
}

/// Defender accuracy on held-out member / non-member pairs, used to check that
/// the membership classifier itself learns something.
pub fn defender_holdout_accuracy(
    model: &Classifier,
    members: &[ExampleRecord],
    nonmembers: &[ExampleRecord],
    held_members: &[ExampleRecord],
    held_nonmembers: &[ExampleRecord],
    adv: &AdvRegConfig,
    steps: usize,
    batch: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let (mx, my) = to_matrix(members)?;
    let (nx, ny) = to_matrix(nonmembers)?;
    let mp = model.predict_batch(&mx)?;
    let np = model.predict_batch(&nx)?;
    let mut defender = Defender::new(model.num_classes(), adv, rng)?;
    let mut flags = vec![true; batch];
    flags.extend(std::iter::repeat_n(false, batch));
    for _ in 0..steps {
        let mi: Vec<usize> = (0..batch).map(|_| rng.below(mp.rows())).collect();
        let ni: Vec<usize> = (0..batch).map(|_| rng.below(np.rows())).collect();
        let mut rows = gather(&mp, &mi).into_vec();
        rows.extend(gather(&np, &ni).into_vec());
        let probs = Matrix::from_vec_unchecked(2 * batch, mp.cols(), rows);
        let mut labels: Vec<usize> = mi.iter().map(|&i| my[i]).collect();
        labels.extend(ni.iter().map(|&i| ny[i]));
        defender.train_step(&probs, &labels, &flags, adv.defender_learning_rate);
    }
    let mut correct = 0usize;
    for (set, is_member) in [(held_members, true), (held_nonmembers, false)] {
        let (hx, hy) = to_matrix(set)?;
        let scores = defender.member_scores(&model.predict_batch(&hx)?, &hy);
        correct += scores.iter().filter(|&&s| (s > 0.5) == is_member).count();
    }
    Ok(correct as f64 / (held_members.len() + held_nonmembers.len()) as f64)
}

/// Continues training a pretrained model on a new set; `LastLayer` freezes
/// everything except the final dense layer.
pub fn fine_tune(
    pretrained: &Classifier,
    train: &[ExampleRecord],
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Classifier> {
    cfg.validate()?;
    let mut model = pretrained.clone();
    let (x, y) = prepare_data(&model.architecture, train, cfg)?;
    let mut sgd = Sgd::new(cfg, None);
    sgd.trainable_from = match cfg.fine_tune {
        FineTuneMode::None => return Err(Error::Config("fine_tune requires a fine-tune mode".into())),
        FineTuneMode::Full => 0,
        FineTuneMode::LastLayer => model.network.tensor_count() - 2,
    };
    let mut sgd_rng = rng.derive_named("fine-tune");
    sgd.epochs(&mut model, &x, &y, cfg.epochs, &mut sgd_rng, None)?;
    let arch = model.architecture.clone();
    finish(model, &sgd, &("fine-tune", &arch, cfg), rng, train)
}
