//! Backward pass, losses, Adam and the training / fold protocol.
//!
//! Min and max pooling route their whole incoming gradient to a single grid
//! position per kernel (the first occurrence in row-major order), so the
//! kernel gradient of one sample is a weighted sum of at most two input
//! windows per kernel.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{dense_score, split_indices, LabelKind, LabeledTile, DEFAULT_SPLIT};
use crate::error::{Error, Result};
use crate::metrics::{self, mean_defined, EvalReport, MetricResult};
use crate::model::{LossKind, ModelParams};
use crate::tensor::ImageTensor;
use crate::{CONV_STRIDE, CROP_SIZE};

/// Added to the PLCC denominator so zero-variance batches stay finite.
pub const PLCC_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub n_kernels: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `decay_factor` every this many epochs.
    pub decay_interval_epochs: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Compute validation SRCC every this many epochs (and on the last); 0 disables.
    pub validate_every: usize,
    /// Z-levels at or below this count as sharp in evaluation reports.
    pub sharp_max: i64,
    /// Keep a copy of the parameters at the end of every decay interval.
    pub keep_decay_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Plcc,
            n_kernels: 1,
            learning_rate: 0.01,
            decay_interval_epochs: 60,
            decay_factor: 0.1,
            epochs: 120,
            batch_size: 64,
            seed: DEFAULT_SEED,
            adam: AdamConfig::default(),
            validate_every: 1,
            sharp_max: metrics::DEFAULT_SHARP_MAX_ZLEVEL,
            keep_decay_checkpoints: false,
        }
    }
}

pub const DEFAULT_SEED: u64 = 20200;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_interval_epochs == 0 {
            return bad("decay interval must be at least one epoch".into());
        }
        if self.n_kernels == 0 {
            return bad("need at least one kernel".into());
        }
        if self.batch_size == 0 || (self.loss == LossKind::Plcc && self.batch_size < 2) {
            return bad(format!(
                "batch size {} is too small for {} loss",
                self.batch_size, self.loss
            ));
        }
        Ok(())
    }

    /// Step-decayed rate for a 1-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = (epoch.max(1) - 1) / self.decay_interval_epochs;
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub kernels: Vec<f64>,
    pub conv_bias: Vec<f64>,
    pub pool_min_w: Vec<f64>,
    pub pool_max_w: Vec<f64>,
    pub pool_bias: f64,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let n = params.n_kernels();
        Self {
            kernels: vec![0.0; params.kernels.len()],
            conv_bias: vec![0.0; n],
            pool_min_w: vec![0.0; n],
            pool_max_w: vec![0.0; n],
            pool_bias: 0.0,
        }
    }

    /// Values in the same order as [`ModelParams::iter_values`].
    pub fn flatten(&self) -> Vec<f64> {
        self.kernels
            .iter()
            .chain(&self.conv_bias)
            .chain(&self.pool_min_w)
            .chain(&self.pool_max_w)
            .chain(std::iter::once(&self.pool_bias))
            .copied()
            .collect()
    }
}

/// Pearson correlation with `PLCC_EPSILON` added to the denominator.
pub fn plcc(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    Ok(plcc_with_gradient(predictions, labels)?.0)
}

/// Stabilized PLCC and its gradient with respect to each prediction.
fn plcc_with_gradient(p: &[f64], t: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p.len() != t.len() || p.len() < 2 {
        return Err(Error::Argument(format!(
            "PLCC needs two equal-length vectors of at least 2 values, got {} and {}",
            p.len(),
            t.len()
        )));
    }
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mt = t.iter().sum::<f64>() / n;
    let dp: Vec<f64> = p.iter().map(|v| v - mp).collect();
    let dt: Vec<f64> = t.iter().map(|v| v - mt).collect();
    let cov: f64 = dp.iter().zip(&dt).map(|(a, b)| a * b).sum();
    let sp = dp.iter().map(|a| a * a).sum::<f64>().sqrt();
    let st = dt.iter().map(|b| b * b).sum::<f64>().sqrt();
    let denom = sp * st + PLCC_EPSILON;
    let r = cov / denom;
    // dr/dp_i = dt_i / D − cov · st · (dp_i / sp) / D²; the centring terms cancel
    // because the deviations sum to zero.
    let grad = dp
        .iter()
        .zip(&dt)
        .map(|(&a, &b)| {
            let spread = if sp > 0.0 { st * a / sp } else { 0.0 };
            b / denom - cov * spread / (denom * denom)
        })
        .collect();
    Ok((r, grad))
}

/// Forward intermediates of one sample kept for the backward pass.
struct SampleTrace {
    score: f64,
    extrema_min: Vec<f32>,
    extrema_max: Vec<f32>,
    /// Input windows under each kernel's argmin / argmax, `[n][k][i][j]`.
    min_windows: Vec<f32>,
    max_windows: Vec<f32>,
}

/// A training input: a window of a larger image.
#[derive(Clone, Copy)]
struct Region<'a> {
    image: &'a ImageTensor,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

fn trace_region(params: &ModelParams, region: Region<'_>) -> Result<SampleTrace> {
    let padded = params.padded_input(
        region.image,
        region.top,
        region.left,
        region.height,
        region.width,
    )?;
    let trace = params.trace_padded(&padded, &params.packed_kernels())?;
    let shape = params.kernel_shape;
    let per = shape.per_kernel();
    let mut min_windows = vec![0.0f32; shape.count * per];
    let mut max_windows = vec![0.0f32; shape.count * per];
    for n in 0..shape.count {
        for (pos, dst) in [
            (trace.extrema.argmin[n], &mut min_windows[n * per..(n + 1) * per]),
            (trace.extrema.argmax[n], &mut max_windows[n * per..(n + 1) * per]),
        ] {
            let top = (pos / trace.cols) * CONV_STRIDE;
            let left = (pos % trace.cols) * CONV_STRIDE;
            for k in 0..shape.channels {
                for i in 0..shape.height {
                    for j in 0..shape.width {
                        dst[(k * shape.height + i) * shape.width + j] =
                            padded.get(top + i, left + j, k);
                    }
                }
            }
        }
    }
    Ok(SampleTrace {
        score: trace.score,
        extrema_min: trace.extrema.min,
        extrema_max: trace.extrema.max,
        min_windows,
        max_windows,
    })
}

/// Batch loss and its exact gradient with respect to every parameter.
///
/// `patches` may have any size the kernels fit into. MSE is the batch mean of
/// squared errors; PLCC loss is the negated stabilized correlation.
pub fn loss_and_gradients(
    params: &ModelParams,
    patches: &[ImageTensor],
    labels: &[f64],
    loss: LossKind,
) -> Result<(f64, GradientSet)> {
    let regions: Vec<Region<'_>> = patches
        .iter()
        .map(|p| Region {
            image: p,
            top: 0,
            left: 0,
            height: p.height(),
            width: p.width(),
        })
        .collect();
    loss_and_gradients_regions(params, &regions, labels, loss)
}

fn loss_and_gradients_regions(
    params: &ModelParams,
    regions: &[Region<'_>],
    labels: &[f64],
    loss: LossKind,
) -> Result<(f64, GradientSet)> {
    if regions.len() != labels.len() || regions.is_empty() {
        return Err(Error::Argument(format!(
            "{} patches for {} labels",
            regions.len(),
            labels.len()
        )));
    }
    if loss == LossKind::Plcc && regions.len() < 2 {
        return Err(Error::Argument("PLCC loss needs at least 2 samples".into()));
    }
    let traces: Vec<SampleTrace> = regions
        .par_iter()
        .map(|&r| trace_region(params, r))
        .collect::<Result<_>>()?;
    if let Some(index) = traces.iter().position(|t| !t.score.is_finite()) {
        return Err(Error::Numeric {
            index,
            detail: format!("forward produced {}", traces[index].score),
        });
    }
    let scores: Vec<f64> = traces.iter().map(|t| t.score).collect();

    let b = scores.len() as f64;
    let (value, upstream) = match loss {
        LossKind::Mse => {
            let value = scores
                .iter()
                .zip(labels)
                .map(|(y, t)| (y - t) * (y - t))
                .sum::<f64>()
                / b;
            let grad = scores.iter().zip(labels).map(|(y, t)| 2.0 * (y - t) / b).collect();
            (value, grad)
        }
        LossKind::Plcc => {
            let (r, grad) = plcc_with_gradient(&scores, labels)?;
            (-r, grad.into_iter().map(|g| -g).collect::<Vec<_>>())
        }
    };

    let shape = params.kernel_shape;
    let per = shape.per_kernel();
    let mut grads = GradientSet::zeros_like(params);
    for (trace, &g) in traces.iter().zip(&upstream) {
        grads.pool_bias += g;
        for n in 0..shape.count {
            let w_min = f64::from(params.pool_min_w[n]);
            let w_max = f64::from(params.pool_max_w[n]);
            grads.pool_min_w[n] += g * f64::from(trace.extrema_min[n]);
            grads.pool_max_w[n] += g * f64::from(trace.extrema_max[n]);
            grads.conv_bias[n] += g * (w_min + w_max);
            let range = n * per..(n + 1) * per;
            for ((dk, &lo), &hi) in grads.kernels[range.clone()]
                .iter_mut()
                .zip(&trace.min_windows[range.clone()])
                .zip(&trace.max_windows[range])
            {
                *dk += g * (w_min * f64::from(lo) + w_max * f64::from(hi));
            }
        }
    }
    Ok((value, grads))
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(
        &mut self,
        config: &AdamConfig,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam state holds {} moments, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = config.beta1 * self.m[i] + (1.0 - config.beta1) * g;
            self.v[i] = config.beta2 * self.v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        Ok(())
    }
}

/// Adam update of model parameters; moments are kept in `f64`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let mut flat: Vec<f64> = params.iter_values().map(f64::from).collect();
    let g = grads.flatten();
    if g.len() != flat.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            g.len(),
            flat.len()
        )));
    }
    state.update(config, &mut flat, &g, lr)?;
    for (slot, v) in params.values_mut().zip(flat) {
        *slot = v as f32;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the batches applied this epoch.
    pub loss: f64,
    pub val_srcc: MetricResult,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// `(epoch, params)` at the end of each decay interval, if requested.
    pub decay_checkpoints: Vec<(usize, ModelParams)>,
}

/// Trains a fresh model on `train_set`.
///
/// Every epoch reshuffles the tiles and draws one uniformly random 235×235
/// crop per tile. Validation uses dense scoring of full tiles.
pub fn train(
    config: &TrainConfig,
    train_set: &[LabeledTile],
    val_set: &[LabeledTile],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if let Some(t) = train_set
        .iter()
        .find(|t| t.image.height() < CROP_SIZE || t.image.width() < CROP_SIZE)
    {
        return Err(Error::Dimension(format!(
            "tile {} is {}x{}, smaller than the {CROP_SIZE}x{CROP_SIZE} crop",
            t.id,
            t.image.height(),
            t.image.width()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::initialized(config.n_kernels, &mut rng)?;
    params.trained_with = config.loss;
    let mut adam = AdamState::new(params.param_count());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut decay_checkpoints = Vec::new();

    for epoch in 1..=config.epochs {
        let lr = config.learning_rate_at(epoch);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut loss_sum, mut applied, mut skipped) = (0.0, 0usize, 0usize);

        for batch in order.chunks(config.batch_size) {
            let regions: Vec<Region<'_>> = batch
                .iter()
                .map(|&i| {
                    let img = &train_set[i].image;
                    Region {
                        image: img,
                        top: rng.gen_range(0..=img.height() - CROP_SIZE),
                        left: rng.gen_range(0..=img.width() - CROP_SIZE),
                        height: CROP_SIZE,
                        width: CROP_SIZE,
                    }
                })
                .collect();
            let labels: Vec<f64> = batch.iter().map(|&i| train_set[i].label).collect();
            if config.loss == LossKind::Plcc
                && (labels.len() < 2 || labels.iter().all(|&l| l == labels[0]))
            {
                log::warn!(
                    "epoch {epoch}: skipping batch of {} with constant labels",
                    labels.len()
                );
                skipped += 1;
                continue;
            }
            let (value, grads) = loss_and_gradients_regions(&params, &regions, &labels, config.loss)
                .map_err(|e| match e {
                    Error::Numeric { index, detail } => Error::Numeric {
                        index: batch[index],
                        detail: format!("tile {}: {detail}", train_set[batch[index]].id),
                    },
                    other => other,
                })?;
            adam_step(&mut params, &grads, &mut adam, &config.adam, lr)?;
            loss_sum += value;
            applied += 1;
        }

        let validate = config.validate_every > 0
            && !val_set.is_empty()
            && (epoch % config.validate_every == 0 || epoch == config.epochs);
        let val_srcc = if validate {
            validation_srcc(&params, val_set)?
        } else {
            Err(metrics::MetricError::Undefined("not evaluated this epoch"))
        };
        let entry = EpochLog {
            epoch,
            lr,
            loss: if applied > 0 {
                loss_sum / applied as f64
            } else {
                f64::NAN
            },
            val_srcc,
            skipped_batches: skipped,
        };
        log::info!(
            "epoch {epoch:>4} lr {lr:.2e} loss {:.6} val_srcc {}",
            entry.loss,
            metrics::format_metric(&entry.val_srcc)
        );
        log.push(entry);

        if config.keep_decay_checkpoints
            && (epoch % config.decay_interval_epochs == 0 || epoch == config.epochs)
        {
            decay_checkpoints.push((epoch, params.clone()));
        }
    }

    Ok(TrainOutcome {
        params,
        log,
        decay_checkpoints,
    })
}

fn validation_srcc(params: &ModelParams, tiles: &[LabeledTile]) -> Result<MetricResult> {
    let preds: Vec<f64> = tiles
        .par_iter()
        .map(|t| dense_score(params, &t.image).map(|s| s.value))
        .collect::<Result<_>>()?;
    let labels: Vec<f64> = tiles.iter().map(|t| t.label).collect();
    Ok(metrics::srcc(&preds, &labels))
}

/// Training log CSV: `epoch,lr,loss,val_srcc,skipped_batches`.
pub fn write_log_csv(log: &[EpochLog], path: impl AsRef<Path>, comment: &str) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# {comment}")?;
    writeln!(file, "epoch,lr,loss,val_srcc,skipped_batches")?;
    for e in log {
        let srcc = e
            .val_srcc
            .as_ref()
            .map_or_else(|_| "nan".to_string(), |v| format!("{v:.6}"));
        writeln!(
            file,
            "{},{:e},{:.9},{srcc},{}",
            e.epoch, e.lr, e.loss, e.skipped_batches
        )?;
    }
    file.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct FoldsSummary {
    pub folds: Vec<FoldResult>,
    pub mean_srcc: MetricResult,
    pub mean_plcc: MetricResult,
    pub mean_roc_auc: MetricResult,
    pub mean_pr_auc: MetricResult,
}

/// Seed used for fold `fold`'s split and training run.
pub fn fold_seed(base: u64, fold: usize) -> u64 {
    base.wrapping_add(fold as u64)
}

/// Repeats split → train → test `n_folds` times with independent seeded
/// 60/20/20 splits and averages the test metrics.
pub fn run_folds(
    config: &TrainConfig,
    dataset: &[LabeledTile],
    kind: LabelKind,
    n_folds: usize,
) -> Result<FoldsSummary> {
    if n_folds == 0 {
        return Err(Error::Argument("need at least one fold".into()));
    }
    let mut folds = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let seed = fold_seed(config.seed, fold);
        let parts = split_indices(dataset.len(), &DEFAULT_SPLIT, seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
        let ids = |idx: &[usize]| idx.iter().map(|&i| dataset[i].id.clone()).collect::<Vec<_>>();
        let (train_set, val_set, test_set) = (pick(&parts[0]), pick(&parts[1]), pick(&parts[2]));

        let fold_config = TrainConfig {
            seed,
            ..config.clone()
        };
        log::info!(
            "fold {}/{n_folds}: {} train, {} val, {} test",
            fold + 1,
            train_set.len(),
            val_set.len(),
            test_set.len()
        );
        let outcome = train(&fold_config, &train_set, &val_set)?;
        let report = evaluate_parallel(&outcome.params, &test_set, kind, config.sharp_max)?;
        folds.push(FoldResult {
            fold,
            seed,
            train_ids: ids(&parts[0]),
            val_ids: ids(&parts[1]),
            test_ids: ids(&parts[2]),
            outcome,
            report,
        });
    }
    Ok(FoldsSummary {
        mean_srcc: mean_defined(folds.iter().map(|f| &f.report.srcc)),
        mean_plcc: mean_defined(folds.iter().map(|f| &f.report.plcc)),
        mean_roc_auc: mean_defined(folds.iter().map(|f| &f.report.roc_auc)),
        mean_pr_auc: mean_defined(folds.iter().map(|f| &f.report.pr_auc)),
        folds,
    })
}

/// [`crate::data::evaluate`] on the global rayon pool.
pub fn evaluate_parallel(
    params: &ModelParams,
    tiles: &[LabeledTile],
    kind: LabelKind,
    sharp_max: i64,
) -> Result<EvalReport> {
    let samples = tiles
        .par_iter()
        .map(|t| {
            Ok(metrics::SamplePrediction {
                id: t.id.clone(),
                prediction: dense_score(params, &t.image)?.value,
                label: t.label,
                positive: kind.is_blurry(t.label, sharp_max),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plcc_extremes() {
        let t = [1.0, 2.0, 4.0, 7.0];
        assert!((plcc(&t, &t).unwrap() - 1.0).abs() < 1e-7);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((plcc(&neg, &t).unwrap() + 1.0).abs() < 1e-7);
        assert!(plcc(&[1.0], &[1.0]).is_err());
        assert!(plcc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn plcc_matches_textbook_formula() {
        let p = [1.0, 2.0, 3.0, 5.0];
        let t = [2.0, 4.0, 5.0, 9.0];
        let n = 4.0;
        let (sp, st) = (p.iter().sum::<f64>(), t.iter().sum::<f64>());
        let spt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
        let spp: f64 = p.iter().map(|a| a * a).sum();
        let stt: f64 = t.iter().map(|b| b * b).sum();
        let r = (n * spt - sp * st) / ((n * spp - sp * sp).sqrt() * (n * stt - st * st).sqrt());
        assert!((plcc(&p, &t).unwrap() - r).abs() < 1e-8);
    }

    #[test]
    fn plcc_loss_ignores_positive_affine_label_changes() {
        let p = [0.3, -1.2, 2.5, 0.9, 1.1];
        let t = [1.0, 0.0, 4.0, 2.0, 3.0];
        let t2: Vec<f64> = t.iter().map(|v| 3.5 * v - 2.0).collect();
        assert!((plcc(&p, &t).unwrap() - plcc(&p, &t2).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn plcc_gradient_matches_differences() {
        let p = [0.3, -1.2, 2.5, 0.9, 1.1];
        let t = [1.0, 0.0, 4.0, 2.0, 3.0];
        let (_, g) = plcc_with_gradient(&p, &t).unwrap();
        for i in 0..p.len() {
            let h = 1e-6;
            let mut up = p;
            up[i] += h;
            let mut down = p;
            down[i] -= h;
            let fd = (plcc(&up, &t).unwrap() - plcc(&down, &t).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn lr_schedule_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(1), 0.01);
        assert_eq!(c.learning_rate_at(60), 0.01);
        assert!((c.learning_rate_at(61) - 0.001).abs() < 1e-15);
        assert!((c.learning_rate_at(120) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { decay_factor: 1.5, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { n_kernels: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let mse_single = TrainConfig { loss: LossKind::Mse, batch_size: 1, ..Default::default() };
        assert!(mse_single.validate().is_ok());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(2);
        state.m = vec![0.5, -0.5];
        state.v = vec![0.25, 0.25];
        let mut params = vec![1.0, 2.0];
        // A non-zero first moment still moves parameters; reset to the fresh case.
        let mut fresh = AdamState::new(2);
        fresh.update(&cfg, &mut params, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(params, vec![1.0, 2.0]);
        state.update(&cfg, &mut [0.0, 0.0], &[0.0, 0.0], 0.1).unwrap();
        assert!((state.m[0] - 0.45).abs() < 1e-15);
        assert!(state.v[0] < 0.25);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(3);
        let mut params = vec![0.0, 0.0, 0.0];
        state.update(&cfg, &mut params, &[3.0, -0.2, 1e-3], 0.01).unwrap();
        for (p, s) in params.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 0.01).abs() < 1e-6, "{p}");
        }
        assert!(state.update(&cfg, &mut params, &[1.0], 0.01).is_err());
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // f(x) = 0.5 · a · (x − c)²
        let (a, c) = (3.0f64, 1.5f64);
        let cfg = AdamConfig::default();
        let lr = 0.1;
        let mut state = AdamState::new(1);
        let mut x = [-2.0f64];

        let (mut rx, mut m, mut v) = (-2.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = a * (x[0] - c);
            state.update(&cfg, &mut x, &[g], lr).unwrap();

            let rg = a * (rx - c);
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            rx -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - rx).abs() < 1e-12, "step {t}: {} vs {rx}", x[0]);
        }
    }

    #[test]
    fn mse_gradient_for_pool_bias_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::initialized(2, &mut rng).unwrap();
        let patches: Vec<ImageTensor> = (0..3)
            .map(|_| ImageTensor::new(20, 20, 3, (0..1200).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        let labels = [0.0, 1.0, 5.0];
        let preds: Vec<f64> = patches.iter().map(|p| params.score_patch(p).unwrap().value).collect();
        let (_, g) = loss_and_gradients(&params, &patches, &labels, LossKind::Mse).unwrap();
        let expected: f64 = preds.iter().zip(&labels).map(|(y, t)| y - t).sum::<f64>() * 2.0 / 3.0;
        assert!((g.pool_bias - expected).abs() < 1e-12);

        // Labels equal to predictions: zero loss and zero gradient.
        let (loss, g) = loss_and_gradients(&params, &patches, &preds, LossKind::Mse).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_forward_names_the_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::initialized(1, &mut rng).unwrap();
        let good = ImageTensor::filled(20, 20, 3, 0.5).unwrap();
        let mut bad = good.clone();
        bad.data_mut()[0] = f32::INFINITY;
        let err = loss_and_gradients(&params, &[good, bad], &[0.0, 1.0], LossKind::Mse).unwrap_err();
        assert!(matches!(err, Error::Numeric { index: 1, .. }), "{err:?}");
    }

    #[test]
    fn training_on_identical_patches_with_mse_reaches_zero_loss() {
        let tile = ImageTensor::filled(235, 235, 3, 0.5).unwrap();
        let tiles: Vec<LabeledTile> = (0..4)
            .map(|i| LabeledTile {
                id: format!("t{i}"),
                image: tile.clone(),
                label: 3.0,
            })
            .collect();
        let config = TrainConfig {
            loss: LossKind::Mse,
            epochs: 400,
            decay_interval_epochs: 400,
            batch_size: 4,
            learning_rate: 0.05,
            validate_every: 0,
            ..Default::default()
        };
        let out = train(&config, &tiles, &[]).unwrap();
        let last = out.log.last().unwrap().loss;
        assert!(last < 1e-4, "final loss {last}");
        assert_eq!(out.params.trained_with, LossKind::Mse);
    }

    #[test]
    fn constant_label_batches_are_skipped_under_plcc() {
        let tiles: Vec<LabeledTile> = (0..4)
            .map(|i| LabeledTile {
                id: format!("t{i}"),
                image: ImageTensor::filled(240, 240, 3, 0.1 * i as f32).unwrap(),
                label: 2.0,
            })
            .collect();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 2,
            validate_every: 0,
            ..Default::default()
        };
        let out = train(&config, &tiles, &[]).unwrap();
        assert!(out.log.iter().all(|e| e.skipped_batches == 2 && e.loss.is_nan()));
    }
}
