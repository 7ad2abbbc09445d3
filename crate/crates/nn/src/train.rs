//! Mini-batch training with per-sample graphs, the variant objectives,
//! best-by-validation checkpoint selection and a JSON-lines log.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stormtail_core::field::LogitsField;
use stormtail_core::grid::{ClassField, ThresholdSchema};
use stormtail_core::losses::{
    blv_noise, cross_entropy, focal_loss, la_adjust, la_offsets, overall_loss_with_noise, wce_weights, ClassStats, LossConfig,
    LossOutput,
};
use stormtail_core::metrics::{class_contingency, scores, ContingencyTable};
use stormtail_core::{Error, Result};

use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::optim::AdamW;
use crate::predict::{decide, infer, Prepared};
use crate::variant::{Objective, Variant};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub checkpoint_every: usize,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_schedule: bool,
    pub focal_gamma: f64,
    /// Fraction of each oversampled batch drawn from samples containing the
    /// top class.
    pub resample_fraction: f64,
    /// Shift logits by `tau log prior` before the inference-time decision.
    pub la_at_inference: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 30,
            seeds: vec![0, 1, 2, 3, 4],
            deterministic: false,
            checkpoint_every: 10,
            cosine_schedule: false,
            focal_gamma: 2.0,
            resample_fraction: 0.5,
            la_at_inference: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be nonnegative");
        }
        if !(self.resample_fraction > 0.0 && self.resample_fraction <= 1.0) {
            return bad("resample_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub schema_version: u32,
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub main_loss: Option<f64>,
    pub spatial_loss: Option<f64>,
    pub lr: f64,
    /// Mean CSI over the heavy classes (validation records only).
    pub heavy_csi: Option<f64>,
    pub wall_clock_s: f64,
}

/// Everything fixed for a run except the seed.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub variant: Variant,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub schema: ThresholdSchema,
    pub stats: ClassStats,
}

impl RunSpec {
    /// Variant-adjusted model config; errors for untrainable variants.
    pub fn new(
        variant: Variant,
        base_model: &ModelConfig,
        loss: LossConfig,
        train: TrainConfig,
        schema: ThresholdSchema,
        stats: ClassStats,
    ) -> Result<Self> {
        let model = variant
            .model_config(base_model)
            .ok_or_else(|| Error::Config(format!("variant {variant} has no trainable model")))?;
        model.validate()?;
        loss.validate()?;
        train.validate()?;
        if model.num_classes != schema.num_classes() || stats.num_classes() != schema.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes, schema {} and class stats {}",
                model.num_classes,
                schema.num_classes(),
                stats.num_classes()
            )));
        }
        Ok(Self {
            variant,
            model,
            loss,
            train,
            schema,
            stats,
        })
    }

    pub fn objective(&self) -> Objective {
        self.variant.objective().expect("trainable variant")
    }

    /// Class shift used at the inference-time decision, if enabled. Only
    /// objectives trained on adjusted logits are shifted.
    pub fn inference_shift(&self) -> Result<Option<Vec<f64>>> {
        if self.train.la_at_inference && self.variant.uses_logit_adjustment() {
            Ok(Some(la_offsets(&self.stats, self.loss.tau)?))
        } else {
            Ok(None)
        }
    }
}

/// Per-epoch callback payload.
pub struct EpochEvent<'a> {
    pub epoch: usize,
    pub records: &'a [LogRecord],
    pub model: &'a Model,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    /// 0 when no epoch ran or none improved on the initial model.
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub final_model: Model,
    pub log: Vec<LogRecord>,
    pub final_val_loss: Option<f64>,
}

struct BatchLoss {
    value: f64,
    main_value: Option<f64>,
    spatial_value: Option<f64>,
    main_grads: Vec<LogitsField>,
    spatial_grads: Option<Vec<LogitsField>>,
}

fn single(out: LossOutput) -> BatchLoss {
    BatchLoss {
        value: out.value,
        main_value: None,
        spatial_value: None,
        main_grads: out.grads,
        spatial_grads: None,
    }
}

/// Objective value and logit gradients; `noise_rng` is `None` in evaluation
/// mode, where BLV perturbation is the identity.
fn objective_loss(
    spec: &RunSpec,
    main: &[LogitsField],
    spatial: Option<&[LogitsField]>,
    targets: &[ClassField],
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss> {
    let stats = &spec.stats;
    let cfg = &spec.loss;
    let zero_noise = |z: &[LogitsField]| -> Vec<LogitsField> {
        z.iter()
            .map(|l| LogitsField::zeros(l.num_classes(), l.height(), l.width()))
            .collect()
    };
    let draw = |z: &[LogitsField], rng: Option<&mut ChaCha8Rng>| -> Result<Vec<LogitsField>> {
        match rng {
            Some(r) => z.iter().map(|l| blv_noise(l, stats, cfg.sigma, r)).collect(),
            None => Ok(zero_noise(z)),
        }
    };
    Ok(match spec.objective() {
        Objective::DualLoss => {
            let spatial = spatial.ok_or_else(|| Error::Config("dual loss needs spatial logits".into()))?;
            let noise = draw(spatial, noise_rng)?;
            let o = overall_loss_with_noise(main, spatial, &noise, targets, stats, cfg)?;
            BatchLoss {
                value: o.value,
                main_value: Some(o.main.value),
                spatial_value: Some(o.spatial.value),
                main_grads: o.main_grads,
                spatial_grads: Some(o.spatial_grads),
            }
        }
        Objective::Wce => single(cross_entropy(main, targets, Some(&wce_weights(stats)?))?),
        Objective::LogitAdjustedCe => {
            let adjusted = main.iter().map(|z| la_adjust(z, stats, cfg.tau)).collect::<Result<Vec<_>>>()?;
            single(cross_entropy(&adjusted, targets, None)?)
        }
        Objective::BlvCe => {
            let noise = draw(main, noise_rng)?;
            let perturbed: Vec<LogitsField> = main
                .iter()
                .zip(&noise)
                .map(|(z, e)| {
                    let data = z.data().iter().zip(e.data()).map(|(a, b)| a + b).collect();
                    LogitsField::new(z.num_classes(), z.height(), z.width(), data).expect("same shape")
                })
                .collect();
            single(cross_entropy(&perturbed, targets, None)?)
        }
        Objective::Focal => single(focal_loss(main, targets, spec.train.focal_gamma)?),
        Objective::ResampledCe => single(cross_entropy(main, targets, None)?),
    })
}

fn logits_of(t: &crate::tensor::Tensor) -> LogitsField {
    LogitsField::new(t.dim(0), t.dim(1), t.dim(2), t.data().to_vec()).expect("[C, H, W] logits")
}

fn logit_summary(fields: &[LogitsField]) -> String {
    let all = fields.iter().flat_map(|f| f.data().iter().copied());
    let (mut mn, mut mx, mut sum, mut n, mut bad) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize, 0usize);
    for v in all {
        if v.is_finite() {
            mn = mn.min(v);
            mx = mx.max(v);
            sum += v;
            n += 1;
        } else {
            bad += 1;
        }
    }
    format!("logits min {mn:.4e} max {mx:.4e} mean {:.4e}, {bad} non-finite", sum / n.max(1) as f64)
}

/// Forward, loss and backward over one batch; returns the loss and the
/// summed parameter gradients.
fn batch_gradients(
    spec: &RunSpec,
    model: &Model,
    batch: &[&Prepared],
    noise_rng: &mut ChaCha8Rng,
) -> Result<(BatchLoss, Vec<LogitsField>, Vec<Vec<f64>>)> {
    let mut graphs = Vec::with_capacity(batch.len());
    let mut main = Vec::with_capacity(batch.len());
    let mut spatial = Vec::new();
    for p in batch {
        let mut g = Graph::new(&model.params);
        let x = g.input(p.input.clone());
        let out = model.forward(&mut g, x)?;
        main.push(logits_of(g.value(out.main_logits)));
        if let Some(s) = out.spatial_logits {
            spatial.push(logits_of(g.value(s)));
        }
        graphs.push((g, out));
    }
    let targets: Vec<ClassField> = batch.iter().map(|p| p.target.clone()).collect();
    let spatial_ref = (!spatial.is_empty()).then_some(spatial.as_slice());
    let loss = objective_loss(spec, &main, spatial_ref, &targets, Some(noise_rng))?;
    let mut grads = model.params.zeros_like();
    if loss.value.is_finite() {
        for (b, (g, out)) in graphs.iter().enumerate() {
            let mut seeds = vec![(out.main_logits, loss.main_grads[b].data())];
            if let (Some(sv), Some(sg)) = (out.spatial_logits, &loss.spatial_grads) {
                seeds.push((sv, sg[b].data()));
            }
            let gr = g.backward(&seeds);
            g.accumulate_param_grads(&gr, &mut grads);
        }
    }
    Ok((loss, main, grads))
}

/// Pooled CSI averaged over the heavy classes; undefined scores count as 0.
pub fn heavy_csi(pred: &[ClassField], obs: &[ClassField], schema: &ThresholdSchema) -> Result<f64> {
    let heavy = schema.heavy_classes();
    let mut total = 0.0;
    for &k in heavy {
        let mut t = ContingencyTable::default();
        for (p, o) in pred.iter().zip(obs) {
            t += class_contingency(p, o, k)?;
        }
        total += scores(&t).csi.unwrap_or(0.0);
    }
    Ok(total / heavy.len().max(1) as f64)
}

/// Evaluation-mode loss and heavy CSI over `data`, in chunks of the batch
/// size.
pub fn evaluate(spec: &RunSpec, model: &Model, data: &[Prepared]) -> Result<(f64, Option<f64>, Option<f64>, f64)> {
    let shift = spec.inference_shift()?;
    let (mut loss, mut main_l, mut spatial_l) = (0.0, 0.0, 0.0);
    let mut has_parts = false;
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(spec.train.batch_size) {
        let mut main = Vec::new();
        let mut spatial = Vec::new();
        for p in chunk {
            let inf = infer(model, &p.input)?;
            preds.push(decide(&inf.main, shift.as_deref()));
            main.push(inf.main);
            spatial.extend(inf.spatial);
        }
        let targets: Vec<ClassField> = chunk.iter().map(|p| p.target.clone()).collect();
        let spatial_ref = (!spatial.is_empty()).then_some(spatial.as_slice());
        let l = objective_loss(spec, &main, spatial_ref, &targets, None)?;
        let w = chunk.len() as f64 / data.len() as f64;
        loss += w * l.value;
        if let (Some(m), Some(s)) = (l.main_value, l.spatial_value) {
            has_parts = true;
            main_l += w * m;
            spatial_l += w * s;
        }
    }
    let obs: Vec<ClassField> = data.iter().map(|p| p.target.clone()).collect();
    let csi = heavy_csi(&preds, &obs, &spec.schema)?;
    Ok((loss, has_parts.then_some(main_l), has_parts.then_some(spatial_l), csi))
}

/// Batches of one epoch as indices into the training set.
fn epoch_batches(spec: &RunSpec, data: &[Prepared], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = data.len();
    let bs = spec.train.batch_size;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if spec.objective() != Objective::ResampledCe {
        return order.chunks(bs).map(<[usize]>::to_vec).collect();
    }
    let top = (spec.schema.num_classes() - 1) as u8;
    let (heavy, light): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| data[i].target.labels().contains(&top));
    if heavy.is_empty() || light.is_empty() {
        log::warn!("oversampling needs both heavy and light samples; using plain shuffling");
        return order.chunks(bs).map(<[usize]>::to_vec).collect();
    }
    let batches = n.div_ceil(bs);
    (0..batches)
        .map(|b| {
            let size = bs.min(n - b * bs);
            let nh = ((spec.train.resample_fraction * size as f64).round() as usize).min(size);
            let mut batch: Vec<usize> = (0..nh).map(|_| heavy[rng.random_range(0..heavy.len())]).collect();
            batch.extend((nh..size).map(|_| light[rng.random_range(0..light.len())]));
            batch
        })
        .collect()
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if cfg.cosine_schedule && total > 0 {
        0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
    } else {
        cfg.learning_rate
    }
}

/// Trains one seed. `on_epoch` sees every epoch's records and the current
/// model, for logging and periodic checkpoints.
pub fn train<F>(spec: &RunSpec, seed: u64, train_set: &[Prepared], val_set: &[Prepared], mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochEvent) -> Result<()>,
{
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut model = Model::new(spec.model.clone(), seed)?;
    let mut opt = AdamW::new(&model.params, spec.train.learning_rate, spec.train.weight_decay);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score: Option<f64> = None;
    let mut log = Vec::new();
    let mut final_val_loss = None;
    let started = Instant::now();
    let clock = |t: &Instant| if spec.train.deterministic { 0.0 } else { t.elapsed().as_secs_f64() };
    let steps_per_epoch = train_set.len().div_ceil(spec.train.batch_size);
    let total_steps = steps_per_epoch * spec.train.epochs;
    let mut step = 0;
    for epoch in 1..=spec.train.epochs {
        let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
        order_rng.set_stream(epoch as u64);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream((1 << 32) + epoch as u64);
        let batches = epoch_batches(spec, train_set, &mut order_rng);
        let (mut tl, mut tm, mut ts, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = spec.train.learning_rate;
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, logits, grads) = batch_gradients(spec, &model, &batch, &mut noise_rng)?;
            if !loss.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "variant {} seed {seed} epoch {epoch} batch {bi}: loss {} on samples {idx:?}; {}",
                    spec.variant,
                    loss.value,
                    logit_summary(&logits)
                )));
            }
            lr = lr_at(&spec.train, step, total_steps);
            opt.step(&mut model.params, &grads, lr);
            step += 1;
            let n = batch.len();
            seen += n;
            tl += loss.value * n as f64;
            tm += loss.main_value.unwrap_or(0.0) * n as f64;
            ts += loss.spatial_value.unwrap_or(0.0) * n as f64;
        }
        let dual = spec.objective() == Objective::DualLoss;
        let train_rec = LogRecord {
            schema_version: LOG_SCHEMA_VERSION,
            variant: spec.variant.name().into(),
            seed,
            epoch,
            split: "train".into(),
            loss: tl / seen as f64,
            main_loss: dual.then(|| tm / seen as f64),
            spatial_loss: dual.then(|| ts / seen as f64),
            lr,
            heavy_csi: None,
            wall_clock_s: clock(&started),
        };
        let mut records = vec![train_rec];
        let mut improved = false;
        if !val_set.is_empty() {
            let (vl, vm, vs, csi) = evaluate(spec, &model, val_set)?;
            if !vl.is_finite() {
                return Err(Error::NonFinite(format!(
                    "variant {} seed {seed} epoch {epoch}: validation loss {vl}",
                    spec.variant
                )));
            }
            final_val_loss = Some(vl);
            if best_score.is_none_or(|b| csi > b) {
                best_score = Some(csi);
                best = model.clone();
                best_epoch = epoch;
                improved = true;
            }
            records.push(LogRecord {
                split: "val".into(),
                loss: vl,
                main_loss: vm,
                spatial_loss: vs,
                heavy_csi: Some(csi),
                wall_clock_s: clock(&started),
                ..records[0].clone()
            });
        } else {
            best = model.clone();
            best_epoch = epoch;
            improved = true;
        }
        log::info!(
            "{} seed {seed} epoch {epoch}/{}: train loss {:.4}{}",
            spec.variant,
            spec.train.epochs,
            records[0].loss,
            records
                .get(1)
                .map(|r| format!(", val loss {:.4}, heavy CSI {:.4}", r.loss, r.heavy_csi.unwrap_or(0.0)))
                .unwrap_or_default()
        );
        on_epoch(&EpochEvent {
            epoch,
            records: &records,
            model: &model,
            improved,
        })?;
        log.extend(records);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_score,
        final_model: model,
        log,
        final_val_loss,
    })
}

/// Repeated optimisation of one fixed batch, returning the loss before the
/// first and after the last step.
pub fn overfit_batch(spec: &RunSpec, seed: u64, batch: &[Prepared], steps: usize) -> Result<(f64, f64)> {
    let mut model = Model::new(spec.model.clone(), seed)?;
    let mut opt = AdamW::new(&model.params, spec.train.learning_rate, spec.train.weight_decay);
    let refs: Vec<&Prepared> = batch.iter().collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = None;
    for _ in 0..steps {
        let (loss, _, grads) = batch_gradients(spec, &model, &refs, &mut noise_rng)?;
        first.get_or_insert(loss.value);
        opt.step(&mut model.params, &grads, spec.train.learning_rate);
    }
    let (last, ..) = evaluate(spec, &model, batch)?;
    Ok((first.unwrap_or(last), last))
}
