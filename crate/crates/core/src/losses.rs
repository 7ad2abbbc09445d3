//! Imbalance-aware segmentation losses with analytic logit gradients.
//!
//! Every batch loss returns [`LossOutput`]: the scalar value plus the gradient
//! with respect to each input logit volume. Cross-entropy terms are averaged
//! over all pixels in the batch; the Dice term pools overlap counts over the
//! whole batch.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{LogitsField, ProbField};
use crate::grid::ClassField;

/// Per-class training pixel counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    counts: Vec<u64>,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() || counts.iter().all(|&c| c == 0) {
            return Err(Error::Empty("class counts".into()));
        }
        Ok(Self { counts })
    }

    /// Counts every label of `fields`.
    pub fn from_fields(fields: &[&ClassField], num_classes: usize) -> Result<Self> {
        let mut counts = vec![0u64; num_classes];
        for f in fields {
            for &l in f.labels() {
                let l = usize::from(l);
                if l >= num_classes {
                    return Err(Error::LabelOutOfRange { label: l, num_classes });
                }
                counts[l] += 1;
            }
        }
        Self::from_counts(counts)
    }

    /// Raises every count to at least `floor` so absent classes stay usable.
    pub fn with_floor(&self, floor: u64) -> Self {
        Self {
            counts: self.counts.iter().map(|&c| c.max(floor)).collect(),
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn require_present(&self) -> Result<()> {
        match self.counts.iter().position(|&c| c == 0) {
            Some(class) => Err(Error::AbsentClass { class }),
            None => Ok(()),
        }
    }

    pub fn priors(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the spatial-branch loss in the overall objective.
    pub alpha: f64,
    /// Weight of the Dice term inside each branch loss.
    pub gamma: f64,
    /// Logit-adjustment scale.
    pub tau: f64,
    /// Std of the logit perturbation noise.
    pub sigma: f64,
    pub dice_smoothing: f64,
    pub heavy_classes: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.7,
            tau: 0.5,
            sigma: 0.5,
            dice_smoothing: 1.0,
            heavy_classes: vec![4, 5],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.tau >= 0.0) || !(self.sigma >= 0.0) || !(self.dice_smoothing > 0.0) {
            return Err(Error::Config(
                "tau and sigma must be >= 0 and dice_smoothing > 0".into(),
            ));
        }
        if self.gamma <= 0.5 {
            log::warn!("Dice weight gamma = {} is not above 0.5", self.gamma);
        }
        Ok(())
    }
}

/// Loss value with per-sample gradients with respect to the input logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<LogitsField>,
}

impl LossOutput {
    fn zeros_like(logits: &[LogitsField]) -> Self {
        Self {
            value: 0.0,
            grads: logits
                .iter()
                .map(|z| LogitsField::zeros(z.num_classes(), z.height(), z.width()))
                .collect(),
        }
    }

    /// `self += weight * other`.
    pub fn accumulate(&mut self, other: &LossOutput, weight: f64) {
        self.value += weight * other.value;
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in g.data_mut().iter_mut().zip(o.data()) {
                *a += weight * b;
            }
        }
    }
}

fn check_batch(logits: &[LogitsField], targets: &[ClassField]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets", logits.len()),
            actual: format!("{}", targets.len()),
        });
    }
    for (z, t) in logits.iter().zip(targets) {
        if z.height() != t.height() || z.width() != t.width() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", z.height(), z.width()),
                actual: format!("{}x{}", t.height(), t.width()),
            });
        }
        if let Some(&l) = t.labels().iter().find(|&&l| usize::from(l) >= z.num_classes()) {
            return Err(Error::LabelOutOfRange {
                label: l.into(),
                num_classes: z.num_classes(),
            });
        }
    }
    Ok(())
}

fn total_pixels(logits: &[LogitsField]) -> usize {
    logits.iter().map(|z| z.pixels()).sum()
}

/// Heavy-class Dice loss on probabilities.
///
/// Heavy probability mass is merged into one foreground channel and compared
/// with the binary heavy target, pooled over every pixel of the batch.
pub fn dice_heavy(probs: &[ProbField], targets: &[ClassField], heavy: &[usize], eps: f64) -> Result<f64> {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (p, t) in probs.iter().zip(targets) {
        p.check_normalized(1e-4)?;
        for (i, &l) in t.labels().iter().enumerate() {
            let mass: f64 = heavy.iter().filter(|&&k| k < p.num_classes()).map(|&k| p.at(k, i)).sum();
            let tt = f64::from(u8::from(heavy.contains(&usize::from(l))));
            inter += mass * tt;
            psum += mass;
            tsum += tt;
        }
    }
    Ok(1.0 - (2.0 * inter + eps) / (psum + tsum + eps))
}

/// [`dice_heavy`] evaluated on `softmax(logits)` with its logit gradient.
pub fn dice_heavy_logits(
    logits: &[LogitsField],
    targets: &[ClassField],
    heavy: &[usize],
    eps: f64,
) -> Result<LossOutput> {
    check_batch(logits, targets)?;
    let c = logits[0].num_classes();
    let is_heavy: Vec<bool> = (0..c).map(|k| heavy.contains(&k)).collect();
    let probs: Vec<ProbField> = logits.iter().map(LogitsField::softmax).collect();
    let masses: Vec<Vec<f64>> = probs
        .iter()
        .map(|p| {
            (0..p.pixels())
                .map(|i| (0..c).filter(|&k| is_heavy[k]).map(|k| p.at(k, i)).sum())
                .collect()
        })
        .collect();
    let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
    for (m, t) in masses.iter().zip(targets) {
        for (&mi, &l) in m.iter().zip(t.labels()) {
            let tt = f64::from(u8::from(is_heavy[usize::from(l)]));
            inter += mi * tt;
            psum += mi;
            tsum += tt;
        }
    }
    let num = 2.0 * inter + eps;
    let den = psum + tsum + eps;
    let mut out = LossOutput::zeros_like(logits);
    out.value = 1.0 - num / den;
    for (b, (p, t)) in probs.iter().zip(targets).enumerate() {
        let n = p.pixels();
        let g = out.grads[b].data_mut();
        for (i, &l) in t.labels().iter().enumerate() {
            let tt = f64::from(u8::from(is_heavy[usize::from(l)]));
            let dl_dm = -(2.0 * tt * den - num) / (den * den);
            let mi = masses[b][i];
            for k in 0..c {
                let h = f64::from(u8::from(is_heavy[k]));
                g[k * n + i] = dl_dm * p.at(k, i) * (h - mi);
            }
        }
    }
    Ok(out)
}

/// Square-root inverse-frequency class weights normalized to mean 1.
pub fn wce_weights(stats: &ClassStats) -> Result<Vec<f64>> {
    stats.require_present()?;
    let raw: Vec<f64> = stats.priors().iter().map(|f| (1.0 / f).sqrt()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Per-class noise scales `c_k / max_j c_j` with `c_k = log(sum q / q_k)`.
pub fn blv_scales(stats: &ClassStats) -> Result<Vec<f64>> {
    stats.require_present()?;
    let total = stats.total() as f64;
    let c: Vec<f64> = stats.counts().iter().map(|&q| (total / q as f64).ln()).collect();
    let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        // A single class holds all mass; there is nothing to rebalance.
        return Ok(vec![0.0; c.len()]);
    }
    Ok(c.iter().map(|v| v / max).collect())
}

/// Draws perturbation noise shaped like `z`: fresh N(0, sigma^2) per pixel and
/// class, scaled per class.
pub fn blv_noise<R: Rng + ?Sized>(
    z: &LogitsField,
    stats: &ClassStats,
    sigma: f64,
    rng: &mut R,
) -> Result<LogitsField> {
    let scales = blv_scales(stats)?;
    check_classes(z.num_classes(), scales.len())?;
    let n = z.pixels();
    let mut noise = LogitsField::zeros(z.num_classes(), z.height(), z.width());
    if sigma == 0.0 {
        return Ok(noise);
    }
    for (idx, v) in noise.data_mut().iter_mut().enumerate() {
        let e: f64 = rng.sample(StandardNormal);
        *v = scales[idx / n] * sigma * e;
    }
    Ok(noise)
}

fn check_classes(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected} classes"),
            actual: format!("{actual} classes"),
        });
    }
    Ok(())
}

/// Training-time logit perturbation. With `sigma == 0` the result equals `z`.
pub fn blv_perturb<R: Rng + ?Sized>(
    z: &LogitsField,
    stats: &ClassStats,
    sigma: f64,
    rng: &mut R,
) -> Result<LogitsField> {
    if sigma == 0.0 {
        stats.require_present()?;
        return Ok(z.clone());
    }
    let noise = blv_noise(z, stats, sigma, rng)?;
    Ok(add_fields(z, &noise))
}

fn add_fields(a: &LogitsField, b: &LogitsField) -> LogitsField {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    LogitsField::new(a.num_classes(), a.height(), a.width(), data).expect("same shape")
}

/// Per-class shift `tau * log(prior_k)`.
pub fn la_offsets(stats: &ClassStats, tau: f64) -> Result<Vec<f64>> {
    stats.require_present()?;
    Ok(stats.priors().iter().map(|p| tau * p.ln()).collect())
}

/// Logit adjustment. With `tau == 0` the result equals `z`.
pub fn la_adjust(z: &LogitsField, stats: &ClassStats, tau: f64) -> Result<LogitsField> {
    let offsets = la_offsets(stats, tau)?;
    check_classes(z.num_classes(), offsets.len())?;
    if tau == 0.0 {
        return Ok(z.clone());
    }
    Ok(shift_classes(z, &offsets))
}

pub fn shift_classes(z: &LogitsField, offsets: &[f64]) -> LogitsField {
    let n = z.pixels();
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + offsets[i / n])
        .collect();
    LogitsField::new(z.num_classes(), z.height(), z.width(), data).expect("same shape")
}

/// Log-softmax of one pixel, written into `out`.
fn log_softmax_pixel(z: &LogitsField, p: usize, out: &mut [f64]) {
    let n = z.pixels();
    let c = z.num_classes();
    let max = (0..c).map(|k| z.data()[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + (0..c).map(|k| (z.data()[k * n + p] - max).exp()).sum::<f64>().ln();
    for (k, o) in out.iter_mut().enumerate().take(c) {
        *o = z.data()[k * n + p] - lse;
    }
}

/// Cross-entropy averaged over every pixel of the batch, optionally class
/// weighted (weights multiply each pixel's term; the divisor stays the pixel
/// count).
pub fn cross_entropy(logits: &[LogitsField], targets: &[ClassField], weights: Option<&[f64]>) -> Result<LossOutput> {
    check_batch(logits, targets)?;
    if let Some(w) = weights {
        check_classes(logits[0].num_classes(), w.len())?;
    }
    let inv_n = 1.0 / total_pixels(logits) as f64;
    let mut out = LossOutput::zeros_like(logits);
    let mut logp = vec![0.0; logits[0].num_classes()];
    for (b, (z, t)) in logits.iter().zip(targets).enumerate() {
        let n = z.pixels();
        let c = z.num_classes();
        let g = out.grads[b].data_mut();
        for (i, &l) in t.labels().iter().enumerate() {
            let y = usize::from(l);
            log_softmax_pixel(z, i, &mut logp);
            let w = weights.map_or(1.0, |w| w[y]);
            out.value -= w * logp[y] * inv_n;
            for k in 0..c {
                let s = logp[k].exp();
                g[k * n + i] = w * (s - f64::from(u8::from(k == y))) * inv_n;
            }
        }
    }
    Ok(out)
}

/// Focal loss `-(1 - p_y)^g log p_y` averaged over pixels.
pub fn focal_loss(logits: &[LogitsField], targets: &[ClassField], focal_gamma: f64) -> Result<LossOutput> {
    check_batch(logits, targets)?;
    let inv_n = 1.0 / total_pixels(logits) as f64;
    let mut out = LossOutput::zeros_like(logits);
    let mut logp = vec![0.0; logits[0].num_classes()];
    for (b, (z, t)) in logits.iter().zip(targets).enumerate() {
        let n = z.pixels();
        let c = z.num_classes();
        let g = out.grads[b].data_mut();
        for (i, &l) in t.labels().iter().enumerate() {
            let y = usize::from(l);
            log_softmax_pixel(z, i, &mut logp);
            let py = logp[y].exp();
            let one_m = (1.0 - py).max(0.0);
            out.value -= one_m.powf(focal_gamma) * logp[y] * inv_n;
            // d/dp_y of the per-pixel term, times p_y (chain through log p_y).
            let dterm = if focal_gamma == 0.0 {
                -1.0
            } else {
                focal_gamma * one_m.powf(focal_gamma - 1.0) * logp[y] * py - one_m.powf(focal_gamma)
            };
            for k in 0..c {
                let s = logp[k].exp();
                let d = f64::from(u8::from(k == y)) - s;
                g[k * n + i] = dterm * d * inv_n;
            }
        }
    }
    Ok(out)
}

/// Main-branch loss: `(1 - gamma) CE(la_adjust(z)) + gamma Dice(softmax(z))`.
pub fn main_loss(
    logits: &[LogitsField],
    targets: &[ClassField],
    stats: &ClassStats,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_batch(logits, targets)?;
    let adjusted = logits
        .iter()
        .map(|z| la_adjust(z, stats, cfg.tau))
        .collect::<Result<Vec<_>>>()?;
    let ce = cross_entropy(&adjusted, targets, None)?;
    let dice = dice_heavy_logits(logits, targets, &cfg.heavy_classes, cfg.dice_smoothing)?;
    let mut out = LossOutput::zeros_like(logits);
    out.accumulate(&ce, 1.0 - cfg.gamma);
    out.accumulate(&dice, cfg.gamma);
    Ok(out)
}

/// Spatial-branch loss with explicit perturbation noise (one volume per
/// sample): `gamma Dice(softmax(z)) + (1 - gamma) WCE(z + noise)`.
pub fn spatial_loss_with_noise(
    logits: &[LogitsField],
    noise: &[LogitsField],
    targets: &[ClassField],
    stats: &ClassStats,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_batch(logits, targets)?;
    if noise.len() != logits.len() || noise.iter().zip(logits).any(|(a, b)| !a.same_shape(b)) {
        return Err(Error::ShapeMismatch {
            expected: "noise shaped like logits".into(),
            actual: format!("{} noise volumes", noise.len()),
        });
    }
    let weights = wce_weights(stats)?;
    let perturbed: Vec<LogitsField> = logits.iter().zip(noise).map(|(z, e)| add_fields(z, e)).collect();
    let wce = cross_entropy(&perturbed, targets, Some(&weights))?;
    let dice = dice_heavy_logits(logits, targets, &cfg.heavy_classes, cfg.dice_smoothing)?;
    let mut out = LossOutput::zeros_like(logits);
    out.accumulate(&dice, cfg.gamma);
    out.accumulate(&wce, 1.0 - cfg.gamma);
    Ok(out)
}

pub fn spatial_loss<R: Rng + ?Sized>(
    logits: &[LogitsField],
    targets: &[ClassField],
    stats: &ClassStats,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    let noise = logits
        .iter()
        .map(|z| blv_noise(z, stats, cfg.sigma, rng))
        .collect::<Result<Vec<_>>>()?;
    spatial_loss_with_noise(logits, &noise, targets, stats, cfg)
}

/// Gradients of the two-branch objective, one set per branch.
#[derive(Debug, Clone)]
pub struct OverallLoss {
    pub value: f64,
    pub main: LossOutput,
    pub spatial: LossOutput,
    pub main_grads: Vec<LogitsField>,
    pub spatial_grads: Vec<LogitsField>,
}

/// `(1 - alpha) main_loss + alpha spatial_loss`.
pub fn overall_loss<R: Rng + ?Sized>(
    main_logits: &[LogitsField],
    spatial_logits: &[LogitsField],
    targets: &[ClassField],
    stats: &ClassStats,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<OverallLoss> {
    let noise = spatial_logits
        .iter()
        .map(|z| blv_noise(z, stats, cfg.sigma, rng))
        .collect::<Result<Vec<_>>>()?;
    overall_loss_with_noise(main_logits, spatial_logits, &noise, targets, stats, cfg)
}

pub fn overall_loss_with_noise(
    main_logits: &[LogitsField],
    spatial_logits: &[LogitsField],
    noise: &[LogitsField],
    targets: &[ClassField],
    stats: &ClassStats,
    cfg: &LossConfig,
) -> Result<OverallLoss> {
    cfg.validate()?;
    let main = main_loss(main_logits, targets, stats, cfg)?;
    let spatial = spatial_loss_with_noise(spatial_logits, noise, targets, stats, cfg)?;
    let scale = |grads: &[LogitsField], w: f64| -> Vec<LogitsField> {
        grads
            .iter()
            .map(|g| {
                let data = g.data().iter().map(|v| v * w).collect();
                LogitsField::new(g.num_classes(), g.height(), g.width(), data).expect("same shape")
            })
            .collect()
    };
    Ok(OverallLoss {
        value: (1.0 - cfg.alpha) * main.value + cfg.alpha * spatial.value,
        main_grads: scale(&main.grads, 1.0 - cfg.alpha),
        spatial_grads: scale(&spatial.grads, cfg.alpha),
        main,
        spatial,
    })
}
