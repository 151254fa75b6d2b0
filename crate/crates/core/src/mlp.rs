//! Single-hidden-layer perceptron: ReLU hidden layer, softmax cross-entropy
//! output, and analytic per-sample gradients.
//!
//! A dense layer's per-sample weight gradient is the outer product of the
//! sample's upstream error and its layer input, so [`LayerSampleGrads`]
//! stores those two factors instead of `b` flattened copies of the weight
//! matrix. Flattened rows are produced on demand; sums over a block of
//! samples reduce to one matrix product.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::rng::RngState;
use crate::tensor::{gemm, Matrix};
use crate::{Error, Result};

/// Layer widths of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Architecture {
    /// 784 → 64 → 10.
    pub const MNIST: Architecture = Architecture {
        input: 784,
        hidden: 64,
        output: 10,
    };
}

/// Number of layers with trainable parameters.
pub const NUM_LAYERS: usize = 2;

/// Weight (`out × in`) and bias (`out`) of one fully connected layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Length of the flattened `[weight (row-major), bias]` vector.
    pub fn flat_len(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Inverse of [`DenseLayer::to_flat`].
    pub fn from_flat(out_dim: usize, in_dim: usize, flat: &[f64]) -> Result<Self> {
        let w = out_dim * in_dim;
        if flat.len() != w + out_dim {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {out_dim}x{in_dim} layer",
                flat.len()
            )));
        }
        Ok(Self {
            weight: Matrix::from_vec(out_dim, in_dim, flat[..w].to_vec())?,
            bias: flat[w..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        v.extend_from_slice(self.weight.as_slice());
        v.extend_from_slice(&self.bias);
        v
    }
}

/// Trainable parameters. The same type carries aggregated gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

/// Gradients share the parameter layout.
pub type MlpGrads = MlpParams;

impl MlpParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            hidden: DenseLayer::zeros(arch.hidden, arch.input),
            output: DenseLayer::zeros(arch.output, arch.hidden),
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(arch: Architecture, rng: &mut RngState) -> Self {
        let mut layer = |out: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            DenseLayer {
                weight: Matrix::from_fn(out, fan_in, |_, _| rng.uniform_range(-bound, bound)),
                bias: vec![0.0; out],
            }
        };
        let hidden = layer(arch.hidden, arch.input);
        let output = layer(arch.output, arch.hidden);
        Self { hidden, output }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.hidden.in_dim(),
            hidden: self.hidden.out_dim(),
            output: self.output.out_dim(),
        }
    }

    pub fn layer(&self, l: usize) -> &DenseLayer {
        match l {
            0 => &self.hidden,
            1 => &self.output,
            _ => panic!("layer index {l} out of range"),
        }
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut DenseLayer {
        match l {
            0 => &mut self.hidden,
            1 => &mut self.output,
            _ => panic!("layer index {l} out of range"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.weight.is_finite()
            && self.output.weight.is_finite()
            && self.hidden.bias.iter().chain(&self.output.bias).all(|v| v.is_finite())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::serde(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: MlpParams = serde_json::from_str(&text).map_err(|e| Error::serde(path, e))?;
        if p.hidden.bias.len() != p.hidden.out_dim()
            || p.output.bias.len() != p.output.out_dim()
            || p.output.in_dim() != p.hidden.out_dim()
        {
            return Err(Error::serde(path, "inconsistent layer shapes"));
        }
        Ok(p)
    }
}

/// Intermediate state of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub inputs: Matrix,
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut probs = logits.clone();
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

fn logits_only(p: &MlpParams, inputs: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    if inputs.cols() != p.hidden.in_dim() {
        return Err(Error::Shape(format!(
            "inputs have {} features, network expects {}",
            inputs.cols(),
            p.hidden.in_dim()
        )));
    }
    let mut hidden_pre = inputs.matmul_t(&p.hidden.weight)?;
    hidden_pre.add_row_vector(&p.hidden.bias)?;
    if !hidden_pre.is_finite() {
        return Err(Error::Numeric {
            layer: "hidden".into(),
        });
    }
    let hidden = hidden_pre.map(|v| v.max(0.0));
    let mut logits = hidden.matmul_t(&p.output.weight)?;
    logits.add_row_vector(&p.output.bias)?;
    if !logits.is_finite() {
        return Err(Error::Numeric {
            layer: "output".into(),
        });
    }
    Ok((hidden_pre, hidden, logits))
}

pub fn forward(p: &MlpParams, inputs: &Matrix) -> Result<ForwardCache> {
    let (hidden_pre, hidden, logits) = logits_only(p, inputs)?;
    let probs = softmax_rows(&logits);
    Ok(ForwardCache {
        inputs: inputs.clone(),
        hidden_pre,
        hidden,
        logits,
        probs,
    })
}

/// Per-sample cross-entropy and its batch mean.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub mean_loss: f64,
    pub per_sample_losses: Vec<f64>,
}

/// Cross-entropy `−log p[label]`, evaluated as `logsumexp(z) − z[label]`.
pub fn loss(cache: &ForwardCache, labels: &[u8]) -> Result<LossValue> {
    if labels.len() != cache.batch_size() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            cache.batch_size()
        )));
    }
    let per_sample_losses: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let z = cache.logits.row(i);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - z[y as usize]
        })
        .collect();
    let mean_loss = if per_sample_losses.is_empty() {
        0.0
    } else {
        per_sample_losses.iter().sum::<f64>() / per_sample_losses.len() as f64
    };
    Ok(LossValue {
        mean_loss,
        per_sample_losses,
    })
}

/// Per-sample gradients of one dense layer in outer-product form: sample
/// `i`'s flattened gradient is `[vec(upstream_i ⊗ input_i), upstream_i]`.
#[derive(Clone, Debug)]
pub struct LayerSampleGrads {
    upstream: Matrix,
    inputs: Matrix,
}

impl LayerSampleGrads {
    pub fn new(upstream: Matrix, inputs: Matrix) -> Result<Self> {
        if upstream.rows() != inputs.rows() {
            return Err(Error::Consistency(format!(
                "{} upstream rows for {} inputs",
                upstream.rows(),
                inputs.rows()
            )));
        }
        Ok(Self { upstream, inputs })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.upstream.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn out_dim(&self) -> usize {
        self.upstream.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Length of one flattened per-sample gradient.
    pub fn dim(&self) -> usize {
        self.out_dim() * self.in_dim() + self.out_dim()
    }

    pub fn upstream(&self) -> &Matrix {
        &self.upstream
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// Flattened gradient of sample `i`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let u = self.upstream.row(i);
        let x = self.inputs.row(i);
        let mut out = Vec::with_capacity(self.dim());
        for &uj in u {
            out.extend(x.iter().map(|&xk| uj * xk));
        }
        out.extend_from_slice(u);
        out
    }

    /// All flattened rows stacked into a `b × dim` matrix.
    pub fn to_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.dim());
        for i in 0..self.len() {
            data.extend(self.row(i));
        }
        Matrix::from_vec(self.len(), self.dim(), data).expect("row lengths are consistent")
    }

    /// Sum of the flattened rows in `range`.
    pub fn range_sum(&self, range: Range<usize>) -> Vec<f64> {
        block_sum(&self.upstream, &self.inputs, range)
    }

    /// Elementwise sum of squares of the flattened rows in `range`.
    pub fn range_sum_sq(&self, range: Range<usize>) -> Vec<f64> {
        let u2 = self.upstream.row_block(range.clone()).to_matrix().map(|v| v * v);
        let x2 = self.inputs.row_block(range.clone()).to_matrix().map(|v| v * v);
        block_sum(&u2, &x2, 0..range.len())
    }

    /// Mean gradient over every sample, as a layer-shaped value.
    pub fn mean_gradient(&self) -> Result<DenseLayer> {
        if self.is_empty() {
            return Err(Error::Domain("mean gradient of an empty batch".into()));
        }
        let sum = self.range_sum(0..self.len());
        DenseLayer::from_flat(self.out_dim(), self.in_dim(), &sum_to_mean(sum, self.len()))
    }
}

fn block_sum(upstream: &Matrix, inputs: &Matrix, range: Range<usize>) -> Vec<f64> {
    let (out_dim, in_dim) = (upstream.cols(), inputs.cols());
    let mut weight = Matrix::zeros(out_dim, in_dim);
    gemm(
        1.0,
        upstream.row_block(range.clone()).t(),
        inputs.row_block(range.clone()),
        0.0,
        &mut weight,
    )
    .expect("factor shapes are consistent");
    let mut flat = weight.into_vec();
    let mut bias = vec![0.0; out_dim];
    for i in range {
        for (b, u) in bias.iter_mut().zip(upstream.row(i)) {
            *b += u;
        }
    }
    flat.extend(bias);
    flat
}

/// Divides a summed gradient by the number of contributing samples.
pub fn sum_to_mean(mut sum: Vec<f64>, n: usize) -> Vec<f64> {
    let n = n as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    sum
}

/// Per-sample gradients for every trainable layer, hidden layer first.
#[derive(Clone, Debug)]
pub struct PerSampleGrads {
    pub layers: Vec<LayerSampleGrads>,
}

impl PerSampleGrads {
    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    /// Mean over samples, i.e. the gradient of the mean batch loss.
    pub fn mean_gradients(&self) -> Result<MlpGrads> {
        if self.layers.len() != NUM_LAYERS {
            return Err(Error::Consistency(format!(
                "expected {NUM_LAYERS} layers, found {}",
                self.layers.len()
            )));
        }
        Ok(MlpGrads {
            hidden: self.layers[0].mean_gradient()?,
            output: self.layers[1].mean_gradient()?,
        })
    }
}

/// Gradients of each sample's own loss (not divided by the batch size).
pub fn backward_per_sample(p: &MlpParams, cache: &ForwardCache, labels: &[u8]) -> Result<PerSampleGrads> {
    let arch = p.architecture();
    let b = cache.batch_size();
    if cache.inputs.cols() != arch.input
        || cache.hidden.cols() != arch.hidden
        || cache.probs.cols() != arch.output
        || cache.hidden_pre.rows() != b
        || cache.probs.rows() != b
    {
        return Err(Error::Consistency(
            "forward cache does not match the network shape".into(),
        ));
    }
    if labels.len() != b {
        return Err(Error::Consistency(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut out_err = cache.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= arch.output {
            return Err(Error::Consistency(format!("label {y} outside the output layer")));
        }
        out_err.row_mut(i)[y as usize] -= 1.0;
    }
    let mut hidden_err = out_err.matmul(&p.output.weight)?;
    for (g, &pre) in hidden_err.as_mut_slice().iter_mut().zip(cache.hidden_pre.as_slice()) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(PerSampleGrads {
        layers: vec![
            LayerSampleGrads::new(hidden_err, cache.inputs.clone())?,
            LayerSampleGrads::new(out_err, cache.hidden.clone())?,
        ],
    })
}

/// Gradient of the mean batch loss.
pub fn batch_gradient(p: &MlpParams, cache: &ForwardCache, labels: &[u8]) -> Result<MlpGrads> {
    backward_per_sample(p, cache, labels)?.mean_gradients()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(p: &MlpParams, inputs: &Matrix) -> Result<Vec<u8>> {
    let (_, _, logits) = logits_only(p, inputs)?;
    Ok(logits.iter_rows().map(|z| argmax(z) as u8).collect())
}

const EVAL_CHUNK: usize = 1000;

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(p: &MlpParams, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..d.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let inputs = if chunk.len() == d.len() {
            d.images().clone()
        } else {
            d.images().gather_rows(chunk)
        };
        let preds = predict(p, &inputs)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(&pred, &i)| pred == d.labels()[i])
            .count();
    }
    Ok(correct as f64 / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NUM_CLASSES;

    const TOY: Architecture = Architecture {
        input: 2,
        hidden: 2,
        output: 2,
    };

    fn toy_params() -> MlpParams {
        MlpParams {
            hidden: DenseLayer {
                weight: Matrix::from_rows(&[[1.0, -1.0], [0.5, 2.0]]).unwrap(),
                bias: vec![0.0, -1.0],
            },
            output: DenseLayer {
                weight: Matrix::from_rows(&[[1.0, 0.0], [-1.0, 1.0]]).unwrap(),
                bias: vec![0.5, 0.0],
            },
        }
    }

    fn random_batch(rng: &mut RngState, b: usize, arch: Architecture) -> (Matrix, Vec<u8>) {
        let x = Matrix::from_fn(b, arch.input, |_, _| rng.uniform());
        let y = (0..b).map(|_| (rng.next_u32_below(arch.output as u32)) as u8).collect();
        (x, y)
    }

    trait Below {
        fn next_u32_below(&mut self, n: u32) -> u32;
    }

    impl Below for RngState {
        fn next_u32_below(&mut self, n: u32) -> u32 {
            (self.uniform() * n as f64) as u32
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MlpParams::init(Architecture::MNIST, &mut RngState::new(3));
        let b = MlpParams::init(Architecture::MNIST, &mut RngState::new(3));
        assert_eq!(a, b);
        assert!(a.hidden.weight.as_slice().iter().all(|w| w.abs() < 1.0 / 28.0));
        assert!(a.output.weight.as_slice().iter().all(|w| w.abs() < 1.0 / 8.0));
        assert!(a.hidden.bias.iter().all(|&b| b == 0.0));
        assert!(a.output.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_network_predicts_uniformly() {
        let p = MlpParams::zeros(Architecture::MNIST);
        let mut rng = RngState::new(1);
        let (x, y) = random_batch(&mut rng, 4, Architecture::MNIST);
        let c = forward(&p, &x).unwrap();
        assert!(c.probs.as_slice().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let l = loss(&c, &y).unwrap();
        for v in &l.per_sample_losses {
            assert!((v - 10f64.ln()).abs() < 1e-12);
        }
        assert!((l.mean_loss - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn toy_forward_matches_hand_evaluation() {
        // pre = [1-2+0, 0.5+4-1] = [-1, 3.5]; h = [0, 3.5]; z = [0.5, 3.5]
        let c = forward(&toy_params(), &Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(c.hidden_pre.as_slice(), &[-1.0, 3.5]);
        assert_eq!(c.hidden.as_slice(), &[0.0, 3.5]);
        assert_eq!(c.logits.as_slice(), &[0.5, 3.5]);
        let p0 = 1.0 / (1.0 + 3f64.exp());
        assert!((c.probs.get(0, 0) - p0).abs() < 1e-15);
        assert!((c.probs.get(0, 1) - (1.0 - p0)).abs() < 1e-15);
    }

    #[test]
    fn probability_rows_are_normalized() {
        let mut rng = RngState::new(4);
        let p = MlpParams::init(Architecture::MNIST, &mut rng);
        let (x, _) = random_batch(&mut rng, 16, Architecture::MNIST);
        let c = forward(&p, &x).unwrap();
        for row in c.probs.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = RngState::new(5);
        let z = Matrix::from_fn(3, 10, |_, _| rng.uniform_range(-5.0, 5.0));
        let shifted = z.map(|v| v + 123.456);
        let (a, b) = (softmax_rows(&z), softmax_rows(&shifted));
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let mut logits = Matrix::zeros(1, 10);
        logits.set(0, 4, 1000.0);
        let cache = ForwardCache {
            inputs: Matrix::zeros(1, 1),
            hidden_pre: Matrix::zeros(1, 1),
            hidden: Matrix::zeros(1, 1),
            probs: softmax_rows(&logits),
            logits,
        };
        assert_eq!(loss(&cache, &[4]).unwrap().per_sample_losses, vec![0.0]);
    }

    #[test]
    fn loss_matches_scalar_reference() {
        let mut rng = RngState::new(6);
        let p = MlpParams::init(Architecture::MNIST, &mut rng);
        let (x, y) = random_batch(&mut rng, 8, Architecture::MNIST);
        let l = loss(&forward(&p, &x).unwrap(), &y).unwrap();
        for i in 0..8 {
            // independent scalar forward pass
            let mut h = vec![0.0; 64];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut acc = p.hidden.bias[j];
                for k in 0..784 {
                    acc += p.hidden.weight.get(j, k) * x.get(i, k);
                }
                *hj = acc.max(0.0);
            }
            let mut z = [0.0; 10];
            for (c, zc) in z.iter_mut().enumerate() {
                let mut acc = p.output.bias[c];
                for (j, hj) in h.iter().enumerate() {
                    acc += p.output.weight.get(c, j) * hj;
                }
                *zc = acc;
            }
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let reference = -(z[y[i] as usize].exp() / denom).ln();
            assert!((l.per_sample_losses[i] - reference).abs() < 1e-10);
        }
        let mean = l.per_sample_losses.iter().sum::<f64>() / 8.0;
        assert!((l.mean_loss - mean).abs() < 1e-12);
    }

    #[test]
    fn per_sample_rows_match_finite_differences() {
        let mut rng = RngState::new(10);
        let p = MlpParams::init(TOY, &mut rng);
        let (x, y) = random_batch(&mut rng, 3, TOY);
        let c = forward(&p, &x).unwrap();
        assert!(c.hidden_pre.as_slice().iter().all(|v| v.abs() > 1e-3), "fixture sits on a ReLU kink");
        let g = backward_per_sample(&p, &c, &y).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let xi = x.gather_rows(&[i]);
            let sample_loss = |q: &MlpParams| loss(&forward(q, &xi).unwrap(), &y[i..=i]).unwrap().mean_loss;
            for l in 0..NUM_LAYERS {
                let analytic = g.layers[l].row(i);
                let flat = p.layer(l).to_flat();
                for k in 0..flat.len() {
                    let mut plus = p.clone();
                    let mut minus = p.clone();
                    let (o, n) = (p.layer(l).out_dim(), p.layer(l).in_dim());
                    let mut f = flat.clone();
                    f[k] += h;
                    *plus.layer_mut(l) = DenseLayer::from_flat(o, n, &f).unwrap();
                    f[k] -= 2.0 * h;
                    *minus.layer_mut(l) = DenseLayer::from_flat(o, n, &f).unwrap();
                    let fd = (sample_loss(&plus) - sample_loss(&minus)) / (2.0 * h);
                    assert!((fd - analytic[k]).abs() < 1e-6, "layer {l} coord {k}: {fd} vs {}", analytic[k]);
                }
            }
        }
    }

    #[test]
    fn mean_of_rows_is_batch_gradient() {
        let mut rng = RngState::new(12);
        let p = MlpParams::init(Architecture::MNIST, &mut rng);
        let (x, y) = random_batch(&mut rng, 5, Architecture::MNIST);
        let c = forward(&p, &x).unwrap();
        let g = backward_per_sample(&p, &c, &y).unwrap();
        let batch = batch_gradient(&p, &c, &y).unwrap();
        for l in 0..NUM_LAYERS {
            let rows = g.layers[l].to_matrix();
            let want = batch.layer(l).to_flat();
            for (k, w) in want.iter().enumerate() {
                let mean = (0..5).map(|i| rows.get(i, k)).sum::<f64>() / 5.0;
                assert!((mean - w).abs() <= 1e-10 * w.abs().max(1e-8));
            }
        }
    }

    #[test]
    fn duplicated_sample_gives_identical_rows() {
        let mut rng = RngState::new(13);
        let p = MlpParams::init(Architecture::MNIST, &mut rng);
        let (x, y) = random_batch(&mut rng, 1, Architecture::MNIST);
        let x2 = x.gather_rows(&[0, 0]);
        let c = forward(&p, &x2).unwrap();
        let g = backward_per_sample(&p, &c, &[y[0], y[0]]).unwrap();
        for layer in &g.layers {
            assert_eq!(layer.row(0), layer.row(1));
        }
    }

    #[test]
    fn range_sums_match_explicit_rows() {
        let mut rng = RngState::new(14);
        let p = MlpParams::init(TOY, &mut rng);
        let (x, y) = random_batch(&mut rng, 7, TOY);
        let g = backward_per_sample(&p, &forward(&p, &x).unwrap(), &y).unwrap();
        for layer in &g.layers {
            let rows = layer.to_matrix();
            let sum = layer.range_sum(2..6);
            let sq = layer.range_sum_sq(2..6);
            for k in 0..layer.dim() {
                let s: f64 = (2..6).map(|i| rows.get(i, k)).sum();
                let q: f64 = (2..6).map(|i| rows.get(i, k).powi(2)).sum();
                assert!((s - sum[k]).abs() < 1e-14);
                assert!((q - sq[k]).abs() < 1e-14);
            }
            assert_eq!(layer.range_sum_sq(3..3), vec![0.0; layer.dim()]);
        }
    }

    #[test]
    fn mismatched_cache_is_consistency_error() {
        let mut rng = RngState::new(15);
        let p = MlpParams::init(TOY, &mut rng);
        let (x, y) = random_batch(&mut rng, 2, TOY);
        let c = forward(&p, &x).unwrap();
        let other = MlpParams::init(Architecture::MNIST, &mut rng);
        assert!(matches!(backward_per_sample(&other, &c, &y), Err(Error::Consistency(_))));
        assert!(matches!(backward_per_sample(&p, &c, &y[..1]), Err(Error::Consistency(_))));
    }

    #[test]
    fn forward_rejects_wrong_width_and_non_finite() {
        let p = toy_params();
        assert!(matches!(forward(&p, &Matrix::zeros(1, 3)), Err(Error::Shape(_))));
        let mut bad = p.clone();
        bad.hidden.bias[0] = f64::NAN;
        let err = forward(&bad, &Matrix::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref layer } if layer == "hidden"));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0; 10]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    fn balanced(n_per_class: usize, dim: usize, rng: &mut RngState) -> Dataset {
        let n = n_per_class * NUM_CLASSES;
        let images = Matrix::from_fn(n, dim, |_, _| rng.uniform());
        Dataset::new(images, (0..n).map(|i| (i % NUM_CLASSES) as u8).collect()).unwrap()
    }

    #[test]
    fn zero_model_accuracy_is_one_tenth() {
        let mut rng = RngState::new(16);
        let d = balanced(7, 784, &mut rng);
        assert_eq!(accuracy(&MlpParams::zeros(Architecture::MNIST), &d).unwrap(), 0.1);
    }

    #[test]
    fn single_correct_sample_scores_one() {
        let p = toy_params();
        let d = Dataset::new(Matrix::from_rows(&[[1.0, 1.0]]).unwrap(), vec![1]).unwrap();
        assert_eq!(accuracy(&p, &d).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_equals_confusion_trace() {
        let mut rng = RngState::new(17);
        let p = MlpParams::init(Architecture::MNIST, &mut rng);
        let d = balanced(250, 784, &mut rng);
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for i in 0..d.len() {
            let c = forward(&p, &d.images().gather_rows(&[i])).unwrap();
            confusion[d.labels()[i] as usize][argmax(c.probs.row(0))] += 1;
        }
        let trace: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        assert_eq!(accuracy(&p, &d).unwrap(), trace as f64 / d.len() as f64);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = MlpParams::init(Architecture::MNIST, &mut RngState::new(18));
        let path = dir.path().join("params.json");
        p.save_json(&path).unwrap();
        assert_eq!(MlpParams::load_json(&path).unwrap(), p);
    }
}
