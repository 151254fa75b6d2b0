//! Dynamic batch adaptation.
//!
//! Each batch is cut into selection strides of `s` consecutive samples. For
//! every layer independently, a greedy search (bottom-up or top-down, picked
//! by a fair coin) looks for the set of strides whose gradient metric best
//! matches a target derived from the model metric (the batch loss):
//!
//! ```text
//! | metric(X) − (loss / loss_ema) · metric_ema · mu |
//! ```
//!
//! The layer's gradient is then replaced by the mean over the chosen samples.
//! At the end of every epoch the batch size moves by `delta` depending on the
//! median number of samples that made it into updates.
//!
//! Candidate metrics are evaluated from per-stride sums and sums of squares,
//! so a trial addition or removal costs one pass over the layer's parameters
//! regardless of how many strides are involved.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::mlp::{sum_to_mean, DenseLayer, LayerSampleGrads, MlpGrads, PerSampleGrads, NUM_LAYERS};
use crate::rng::RngState;
use crate::tensor::{l2_norm, percentile_50, Ema, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMetricKind {
    /// L2 norm of the mean gradient.
    GradientNorm,
    /// L2 norm of the per-coordinate unbiased sample variance.
    VarianceNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MarginLossKind {
    /// `|g − (m / m_ema) · g_ema · mu|`
    SlopeMargin,
    /// `|alpha · g − m|`
    AbsDifference { alpha: f64 },
}

/// What each layer's gradient-metric running mean is fed after a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradEmaSource {
    Chosen,
    FullBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbaConfig {
    pub stride_size: usize,
    pub metric: GradMetricKind,
    pub mu: f64,
    pub smoothing: f64,
    pub delta: usize,
    pub min_batch: usize,
    pub max_batch: usize,
    pub loss: MarginLossKind,
    pub grad_ema_source: GradEmaSource,
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self {
            stride_size: 16,
            metric: GradMetricKind::VarianceNorm,
            mu: 1.0,
            smoothing: 0.9,
            delta: 8,
            min_batch: 32,
            max_batch: 2048,
            loss: MarginLossKind::SlopeMargin,
            grad_ema_source: GradEmaSource::Chosen,
        }
    }
}

impl DbaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stride_size == 0 {
            return bad("stride size must be at least 1".into());
        }
        if self.delta == 0 {
            return bad("batch-size delta must be at least 1".into());
        }
        if self.min_batch == 0 || self.min_batch > self.max_batch {
            return bad(format!(
                "batch bounds [{}, {}] are invalid",
                self.min_batch, self.max_batch
            ));
        }
        if !(self.mu > 0.0) {
            return bad(format!("mu must be positive, got {}", self.mu));
        }
        if !(self.smoothing > 0.0 && self.smoothing < 1.0) {
            return bad(format!("smoothing must lie in (0, 1), got {}", self.smoothing));
        }
        if let MarginLossKind::AbsDifference { alpha } = self.loss {
            if !(alpha > 0.0) {
                return bad(format!("alpha must be positive, got {alpha}"));
            }
        }
        Ok(())
    }
}

/// Consecutive, disjoint sample ranges covering `[0, b)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StridePartition {
    strides: Vec<Range<usize>>,
}

impl StridePartition {
    pub fn len(&self) -> usize {
        self.strides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strides.is_empty()
    }

    pub fn stride(&self, i: usize) -> Range<usize> {
        self.strides[i].clone()
    }

    pub fn strides(&self) -> &[Range<usize>] {
        &self.strides
    }

    pub fn batch_size(&self) -> usize {
        self.strides.last().map_or(0, |r| r.end)
    }
}

/// Stride `i` holds samples `[i·s, min((i+1)·s, b))`.
///
/// Panics if `s == 0`.
pub fn split_strides(b: usize, s: usize) -> StridePartition {
    assert!(s > 0, "stride size must be positive");
    StridePartition {
        strides: (0..b.div_ceil(s)).map(|i| i * s..((i + 1) * s).min(b)).collect(),
    }
}

/// Gradient metric of an explicit set of per-sample rows.
pub fn gradient_metric<R: AsRef<[f64]>>(kind: GradMetricKind, rows: &[R]) -> Result<f64> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Domain("gradient metric of an empty candidate".into()));
    }
    let dim = rows[0].as_ref().len();
    if rows.iter().any(|r| r.as_ref().len() != dim) {
        return Err(Error::Shape("candidate rows differ in length".into()));
    }
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    match kind {
        GradMetricKind::GradientNorm => l2_norm(&mean),
        GradMetricKind::VarianceNorm => {
            if n == 1 {
                return Ok(0.0);
            }
            let mut var = vec![0.0; dim];
            for r in rows {
                for ((acc, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
            l2_norm(&var)
        }
    }
}

/// `|g1 − (m1 / model_ema) · grad_ema · mu|`.
pub fn margin_loss(g1: f64, m1: f64, model_ema: f64, grad_ema: f64, mu: f64) -> Result<f64> {
    Ok(Objective::slope(m1, model_ema, grad_ema, mu, 0)?.eval(g1))
}

/// `|alpha · g1 − m1|`.
pub fn alt_margin_loss(g1: f64, m1: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    Ok((alpha * g1 - m1).abs())
}

/// The quantity a selection minimizes, as a function of the candidate's
/// gradient metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Slope { target: f64 },
    AbsDifference { alpha: f64, model_metric: f64 },
}

impl Objective {
    /// Slope objective for `layer`; fails when the model-metric mean is zero.
    pub fn slope(m1: f64, model_ema: f64, grad_ema: f64, mu: f64, layer: usize) -> Result<Self> {
        if model_ema == 0.0 {
            return Err(Error::DegenerateMetric { layer });
        }
        Ok(Objective::Slope {
            target: m1 / model_ema * grad_ema * mu,
        })
    }

    #[inline]
    pub fn eval(&self, g: f64) -> f64 {
        match *self {
            Objective::Slope { target } => (g - target).abs(),
            Objective::AbsDifference { alpha, model_metric } => (alpha * g - model_metric).abs(),
        }
    }
}

/// Per-sample gradient rows of one layer, accessed in blocks.
pub trait SampleRows {
    fn num_samples(&self) -> usize;
    fn dim(&self) -> usize;
    fn block_sum(&self, rows: Range<usize>) -> Vec<f64>;
    fn block_sum_sq(&self, rows: Range<usize>) -> Vec<f64>;
}

impl SampleRows for LayerSampleGrads {
    fn num_samples(&self) -> usize {
        self.len()
    }

    fn dim(&self) -> usize {
        LayerSampleGrads::dim(self)
    }

    fn block_sum(&self, rows: Range<usize>) -> Vec<f64> {
        self.range_sum(rows)
    }

    fn block_sum_sq(&self, rows: Range<usize>) -> Vec<f64> {
        self.range_sum_sq(rows)
    }
}

impl SampleRows for Matrix {
    fn num_samples(&self) -> usize {
        self.rows()
    }

    fn dim(&self) -> usize {
        self.cols()
    }

    fn block_sum(&self, rows: Range<usize>) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols()];
        for i in rows {
            acc.iter_mut().zip(self.row(i)).for_each(|(a, v)| *a += v);
        }
        acc
    }

    fn block_sum_sq(&self, rows: Range<usize>) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols()];
        for i in rows {
            acc.iter_mut().zip(self.row(i)).for_each(|(a, v)| *a += v * v);
        }
        acc
    }
}

/// Sample count, sum and (for the variance metric) sum of squares of one stride.
#[derive(Clone, Debug)]
pub struct StrideMoments {
    pub count: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Option<Vec<f64>>,
}

pub fn stride_moments(
    partition: &StridePartition,
    grads: &dyn SampleRows,
    kind: GradMetricKind,
) -> Result<Vec<StrideMoments>> {
    if partition.batch_size() != grads.num_samples() {
        return Err(Error::Consistency(format!(
            "partition covers {} samples, gradients hold {}",
            partition.batch_size(),
            grads.num_samples()
        )));
    }
    Ok(partition
        .strides()
        .iter()
        .map(|r| StrideMoments {
            count: r.len(),
            sum: grads.block_sum(r.clone()),
            sum_sq: match kind {
                GradMetricKind::GradientNorm => None,
                GradMetricKind::VarianceNorm => Some(grads.block_sum_sq(r.clone())),
            },
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BottomUp,
    TopDown,
}

/// One fair draw per call.
pub fn choose_strategy(rng: &mut RngState) -> Strategy {
    if rng.coin() {
        Strategy::BottomUp
    } else {
        Strategy::TopDown
    }
}

/// Result of running one strategy on one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    pub strategy: Strategy,
    /// Chosen stride indices, ascending.
    pub strides: Vec<usize>,
    pub samples_selected: usize,
    /// Objective value of the chosen set.
    pub loss: f64,
    /// Gradient metric of the chosen set.
    pub metric: f64,
}

/// Running sums over a set of strides.
struct Candidate<'a> {
    moments: &'a [StrideMoments],
    kind: GradMetricKind,
    count: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl<'a> Candidate<'a> {
    fn empty(moments: &'a [StrideMoments], kind: GradMetricKind) -> Self {
        let dim = moments.first().map_or(0, |m| m.sum.len());
        let sq_dim = if kind == GradMetricKind::VarianceNorm { dim } else { 0 };
        Self {
            moments,
            kind,
            count: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; sq_dim],
        }
    }

    fn full(moments: &'a [StrideMoments], kind: GradMetricKind) -> Self {
        let mut c = Self::empty(moments, kind);
        for t in 0..moments.len() {
            c.apply(t, 1.0);
        }
        c
    }

    fn apply(&mut self, t: usize, sign: f64) {
        let m = &self.moments[t];
        if sign > 0.0 {
            self.count += m.count;
        } else {
            self.count -= m.count;
        }
        self.sum.iter_mut().zip(&m.sum).for_each(|(a, v)| *a += sign * v);
        if let Some(sq) = &m.sum_sq {
            self.sum_sq.iter_mut().zip(sq).for_each(|(a, v)| *a += sign * v);
        }
    }

    /// Metric of this set with stride `t` added (`sign = 1`) or removed (`-1`).
    fn metric_with(&self, t: usize, sign: f64) -> f64 {
        let m = &self.moments[t];
        let n = if sign > 0.0 {
            self.count + m.count
        } else {
            self.count - m.count
        };
        let nf = n as f64;
        match self.kind {
            GradMetricKind::GradientNorm => {
                let ss: f64 = self
                    .sum
                    .iter()
                    .zip(&m.sum)
                    .map(|(a, v)| {
                        let mean = (a + sign * v) / nf;
                        mean * mean
                    })
                    .sum();
                ss.sqrt()
            }
            GradMetricKind::VarianceNorm => {
                if n <= 1 {
                    return 0.0;
                }
                let sq = m.sum_sq.as_ref().expect("variance metric needs squared sums");
                let ss: f64 = self
                    .sum
                    .iter()
                    .zip(&m.sum)
                    .zip(self.sum_sq.iter().zip(sq))
                    .map(|((a, v), (aq, vq))| {
                        let s = a + sign * v;
                        let q = aq + sign * vq;
                        let var = ((q - s * s / nf) / (nf - 1.0)).max(0.0);
                        var * var
                    })
                    .sum();
                ss.sqrt()
            }
        }
    }
}

/// Metric of an explicit set of strides, recomputed from their moments.
fn set_metric(moments: &[StrideMoments], chosen: &[usize], kind: GradMetricKind) -> f64 {
    let mut c = Candidate::empty(moments, kind);
    let (&last, rest) = chosen.split_last().expect("chosen set is never empty");
    for &t in rest {
        c.apply(t, 1.0);
    }
    c.metric_with(last, 1.0)
}

fn finish(
    moments: &[StrideMoments],
    mut chosen: Vec<usize>,
    objective: &Objective,
    kind: GradMetricKind,
    strategy: Strategy,
) -> Result<LayerSelection> {
    if chosen.is_empty() {
        return Err(Error::Numeric {
            layer: "selection objective (no candidate beat an infinite loss)".into(),
        });
    }
    chosen.sort_unstable();
    let metric = set_metric(moments, &chosen, kind);
    Ok(LayerSelection {
        layer: 0,
        strategy,
        samples_selected: chosen.iter().map(|&t| moments[t].count).sum(),
        strides: chosen,
        loss: objective.eval(metric),
        metric,
    })
}

/// Greedy growth from the empty set. Every sweep tries each stride still in
/// the pool against the current set; a stride that strictly lowers the best
/// loss joins the set and leaves the pool. Stops after a sweep with no joins.
pub fn bottom_up_from_moments(
    moments: &[StrideMoments],
    objective: &Objective,
    kind: GradMetricKind,
) -> Result<LayerSelection> {
    let mut pool: Vec<usize> = (0..moments.len()).collect();
    let mut set = Candidate::empty(moments, kind);
    let mut chosen = Vec::new();
    let mut best = f64::INFINITY;
    loop {
        let mut grew = false;
        for t in pool.clone() {
            let d = objective.eval(set.metric_with(t, 1.0));
            if d < best {
                best = d;
                set.apply(t, 1.0);
                chosen.push(t);
                pool.retain(|&x| x != t);
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    finish(moments, chosen, objective, kind, Strategy::BottomUp)
}

/// Greedy shrinking from the full set. The best loss starts at infinity, so
/// the first removal trial is always accepted; afterwards a stride is dropped
/// only if that strictly lowers the best loss. The last stride is never
/// removed. Stops after a sweep with no removals.
pub fn top_down_from_moments(
    moments: &[StrideMoments],
    objective: &Objective,
    kind: GradMetricKind,
) -> Result<LayerSelection> {
    let mut set = Candidate::full(moments, kind);
    let mut chosen: Vec<usize> = (0..moments.len()).collect();
    let mut best = f64::INFINITY;
    loop {
        let mut shrank = false;
        for t in chosen.clone() {
            if chosen.len() == 1 {
                break;
            }
            let d = objective.eval(set.metric_with(t, -1.0));
            if d < best {
                best = d;
                set.apply(t, -1.0);
                chosen.retain(|&x| x != t);
                shrank = true;
            }
        }
        if !shrank {
            break;
        }
    }
    finish(moments, chosen, objective, kind, Strategy::TopDown)
}

pub fn bottom_up_select(
    partition: &StridePartition,
    grads: &dyn SampleRows,
    objective: &Objective,
    kind: GradMetricKind,
) -> Result<LayerSelection> {
    if partition.is_empty() {
        return Err(Error::Domain("cannot select from an empty partition".into()));
    }
    bottom_up_from_moments(&stride_moments(partition, grads, kind)?, objective, kind)
}

pub fn top_down_select(
    partition: &StridePartition,
    grads: &dyn SampleRows,
    objective: &Objective,
    kind: GradMetricKind,
) -> Result<LayerSelection> {
    if partition.is_empty() {
        return Err(Error::Domain("cannot select from an empty partition".into()));
    }
    top_down_from_moments(&stride_moments(partition, grads, kind)?, objective, kind)
}

/// Running means of the model metric (one) and the gradient metric (one per
/// layer).
#[derive(Clone, Debug)]
pub struct MetricState {
    model_ema: Ema,
    grad_ema: Vec<Ema>,
}

impl MetricState {
    pub fn new(num_layers: usize, smoothing: f64) -> Result<Self> {
        Ok(Self {
            model_ema: Ema::new(smoothing)?,
            grad_ema: vec![Ema::new(smoothing)?; num_layers],
        })
    }

    pub fn model_ema(&self) -> &Ema {
        &self.model_ema
    }

    pub fn grad_ema(&self, layer: usize) -> &Ema {
        &self.grad_ema[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.grad_ema.len()
    }
}

/// Per-layer selections of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub layers: Vec<LayerSelection>,
}

impl SelectionOutcome {
    /// Samples that entered this step's update: the per-layer counts
    /// averaged and rounded to the nearest integer.
    pub fn samples_selected(&self) -> usize {
        if self.layers.is_empty() {
            return 0;
        }
        let total: usize = self.layers.iter().map(|l| l.samples_selected).sum();
        (total as f64 / self.layers.len() as f64).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct DbaStepOutput {
    pub grads: MlpGrads,
    pub outcome: SelectionOutcome,
}

/// Replaces every layer's gradient with the mean over the strides chosen for
/// it, then folds this step into the running means.
///
/// On the first call the running means are seeded before selection: the
/// model mean with `batch_loss` and each gradient mean with the full batch's
/// metric. That seeding is the step's only update.
pub fn dba_step(
    grads: &PerSampleGrads,
    batch_loss: f64,
    state: &mut MetricState,
    cfg: &DbaConfig,
    rng: &mut RngState,
) -> Result<DbaStepOutput> {
    if grads.layers.len() != NUM_LAYERS || state.num_layers() != NUM_LAYERS {
        return Err(Error::Consistency(format!(
            "expected per-sample gradients and metric state for {NUM_LAYERS} layers"
        )));
    }
    if !batch_loss.is_finite() {
        return Err(Error::Numeric {
            layer: "batch loss".into(),
        });
    }
    let b = grads.batch_size();
    if b == 0 || grads.layers.iter().any(|l| l.len() != b) {
        return Err(Error::Consistency("per-sample gradient stacks differ in height".into()));
    }
    let partition = split_strides(b, cfg.stride_size);
    let strategies: Vec<Strategy> = (0..NUM_LAYERS).map(|_| choose_strategy(rng)).collect();
    let moments: Vec<Vec<StrideMoments>> = grads
        .layers
        .iter()
        .map(|l| stride_moments(&partition, l, cfg.metric))
        .collect::<Result<_>>()?;
    let full_metrics: Vec<f64> = moments
        .iter()
        .map(|m| Candidate::full(m, cfg.metric).metric_with_none())
        .collect();

    let cold = state.model_ema.value().is_none();
    if cold {
        state.model_ema.update(batch_loss)?;
        for (ema, &g) in state.grad_ema.iter_mut().zip(&full_metrics) {
            ema.update(g).map_err(|_| Error::Numeric {
                layer: "gradient metric".into(),
            })?;
        }
    }

    let mut layers = Vec::with_capacity(NUM_LAYERS);
    let mut new_layers = Vec::with_capacity(NUM_LAYERS);
    for (l, (layer_moments, strategy)) in moments.iter().zip(&strategies).enumerate() {
        let objective = match cfg.loss {
            MarginLossKind::SlopeMargin => Objective::slope(
                batch_loss,
                state.model_ema.value().expect("seeded above"),
                state.grad_ema[l].value().expect("seeded above"),
                cfg.mu,
                l,
            )?,
            MarginLossKind::AbsDifference { alpha } => Objective::AbsDifference {
                alpha,
                model_metric: batch_loss,
            },
        };
        let mut sel = match strategy {
            Strategy::BottomUp => bottom_up_from_moments(layer_moments, &objective, cfg.metric)?,
            Strategy::TopDown => top_down_from_moments(layer_moments, &objective, cfg.metric)?,
        };
        sel.layer = l;

        let (&first, rest) = sel.strides.split_first().expect("selection is nonempty");
        let mut sum = layer_moments[first].sum.clone();
        for &t in rest {
            sum.iter_mut().zip(&layer_moments[t].sum).for_each(|(a, v)| *a += v);
        }
        let src = &grads.layers[l];
        new_layers.push(DenseLayer::from_flat(
            src.out_dim(),
            src.in_dim(),
            &sum_to_mean(sum, sel.samples_selected),
        )?);
        layers.push(sel);
    }

    if !cold {
        state.model_ema.update(batch_loss)?;
        for (l, sel) in layers.iter().enumerate() {
            let observed = match cfg.grad_ema_source {
                GradEmaSource::Chosen => sel.metric,
                GradEmaSource::FullBatch => full_metrics[l],
            };
            state.grad_ema[l].update(observed).map_err(|_| Error::Numeric {
                layer: format!("gradient metric of layer {l}"),
            })?;
        }
    }

    let output = new_layers.pop().expect("two layers");
    let hidden = new_layers.pop().expect("two layers");
    Ok(DbaStepOutput {
        grads: MlpGrads { hidden, output },
        outcome: SelectionOutcome { layers },
    })
}

impl Candidate<'_> {
    fn metric_with_none(&self) -> f64 {
        let nf = self.count as f64;
        match self.kind {
            GradMetricKind::GradientNorm => self.sum.iter().map(|a| (a / nf) * (a / nf)).sum::<f64>().sqrt(),
            GradMetricKind::VarianceNorm => {
                if self.count <= 1 {
                    return 0.0;
                }
                self.sum
                    .iter()
                    .zip(&self.sum_sq)
                    .map(|(s, q)| {
                        let var = ((q - s * s / nf) / (nf - 1.0)).max(0.0);
                        var * var
                    })
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }
}

/// Epoch-level batch-size adaptation driven by the median selected-sample
/// count of the epoch's steps.
#[derive(Clone, Debug)]
pub struct BatchSizeController {
    current: usize,
    delta: usize,
    min_batch: usize,
    max_batch: usize,
    records: Vec<usize>,
}

impl BatchSizeController {
    pub fn new(initial: usize, delta: usize, min_batch: usize, max_batch: usize) -> Result<Self> {
        if min_batch == 0 || min_batch > max_batch || !(min_batch..=max_batch).contains(&initial) || delta == 0 {
            return Err(Error::Config(format!(
                "batch size {initial} with delta {delta} and bounds [{min_batch}, {max_batch}] is invalid"
            )));
        }
        Ok(Self {
            current: initial,
            delta,
            min_batch,
            max_batch,
            records: Vec::new(),
        })
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.min_batch, self.max_batch)
    }

    pub fn record(&mut self, samples_selected: usize) {
        self.records.push(samples_selected);
    }

    pub fn records(&self) -> &[usize] {
        &self.records
    }

    /// Applies the epoch's update and clears the records.
    pub fn next_batch_size(&mut self) -> Result<usize> {
        let q = percentile_50(&self.records)
            .map_err(|_| Error::State("no selections recorded this epoch".into()))?;
        let current = self.current as f64;
        let next = if q > 0.8 * current {
            self.current + self.delta
        } else if q < 0.2 * current {
            self.current.saturating_sub(self.delta)
        } else {
            self.current
        };
        self.current = next.clamp(self.min_batch, self.max_batch);
        self.records.clear();
        Ok(self.current)
    }
}
