//! Separability diagnostics for sampled pixel embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N x d` embedding matrix with one class label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub labels: Vec<usize>,
    pub source_layer: String,
}

impl FeatureSample {
    pub fn new(dim: usize, vectors: Vec<f64>, labels: Vec<usize>, source_layer: impl Into<String>) -> Result<Self> {
        if dim == 0 || vectors.len() != dim * labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} x {dim}", labels.len()),
                actual: format!("{} values", vectors.len()),
            });
        }
        Ok(Self {
            dim,
            vectors,
            labels,
            source_layer: source_layer.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Rows whose label is in `keep`.
    pub fn restrict_to(&self, keep: &[usize]) -> Self {
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if keep.contains(&l) {
                vectors.extend_from_slice(self.row(i));
                labels.push(l);
            }
        }
        Self {
            dim: self.dim,
            vectors,
            labels,
            source_layer: self.source_layer.clone(),
        }
    }

    fn unit_rows(&self) -> Vec<f64> {
        let mut out = self.vectors.clone();
        for row in out.chunks_mut(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    }
}

/// Per-class caps `min(max_cap, ceil(scale * sqrt(pool)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgressiveCaps {
    pub scale: f64,
    pub max_cap: usize,
}

impl Default for ProgressiveCaps {
    fn default() -> Self {
        Self {
            scale: 3.0,
            max_cap: 2000,
        }
    }
}

impl ProgressiveCaps {
    pub fn caps(&self, pool_sizes: &[usize]) -> Vec<usize> {
        pool_sizes
            .iter()
            .map(|&n| ((self.scale * (n as f64).sqrt()).ceil() as usize).min(self.max_cap))
            .collect()
    }
}

/// Draws `min(cap_k, pool_k)` rows without replacement from each class pool.
/// `pools[k]` is a flat `n_k x dim` matrix for class `k`; empty pools are
/// dropped with a warning.
pub fn progressive_sample<R: Rng + ?Sized>(
    pools: &[Vec<f64>],
    dim: usize,
    caps: &[usize],
    source_layer: &str,
    rng: &mut R,
) -> Result<FeatureSample> {
    if caps.len() != pools.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} caps", pools.len()),
            actual: format!("{}", caps.len()),
        });
    }
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for (k, pool) in pools.iter().enumerate() {
        if pool.len() % dim != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("multiple of {dim}"),
                actual: format!("{}", pool.len()),
            });
        }
        let n = pool.len() / dim;
        if n == 0 {
            log::warn!("class {k} has no embeddings; dropped from the feature sample");
            continue;
        }
        let take = caps[k].min(n);
        let mut idx = rand::seq::index::sample(rng, n, take).into_vec();
        idx.sort_unstable();
        for i in idx {
            vectors.extend_from_slice(&pool[i * dim..(i + 1) * dim]);
            labels.push(k);
        }
    }
    FeatureSample::new(dim, vectors, labels, source_layer)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn members(fs: &FeatureSample) -> Vec<(usize, Vec<usize>)> {
    fs.classes()
        .into_iter()
        .map(|c| (c, (0..fs.len()).filter(|&i| fs.labels[i] == c).collect()))
        .collect()
}

/// Mean over classes (with at least two members) of the mean cosine
/// similarity between distinct members.
pub fn intra_sim(fs: &FeatureSample) -> Result<f64> {
    let unit = fs.unit_rows();
    let row = |i: usize| &unit[i * fs.dim..(i + 1) * fs.dim];
    let mut total = 0.0;
    let mut classes = 0usize;
    for (_, idx) in members(fs) {
        let m = idx.len();
        if m < 2 {
            continue;
        }
        let mut s = 0.0;
        for a in 0..m {
            for b in a + 1..m {
                s += dot(row(idx[a]), row(idx[b]));
            }
        }
        total += 2.0 * s / (m * (m - 1)) as f64;
        classes += 1;
    }
    if classes == 0 {
        return Err(Error::Empty("no class with two or more samples".into()));
    }
    Ok(total / classes as f64)
}

/// Mean over unordered class pairs of the mean cross-class cosine similarity.
pub fn inter_sim(fs: &FeatureSample) -> Result<f64> {
    let unit = fs.unit_rows();
    let row = |i: usize| &unit[i * fs.dim..(i + 1) * fs.dim];
    let groups = members(fs);
    if groups.len() < 2 {
        return Err(Error::DegenerateSplit("similarity margin needs two classes".into()));
    }
    // Cross-pair sums reduce to dot products of per-class summed unit vectors.
    let sums: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, idx)| {
            let mut s = vec![0.0; fs.dim];
            for &i in idx {
                s.iter_mut().zip(row(i)).for_each(|(a, b)| *a += b);
            }
            s
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            total += dot(&sums[a], &sums[b]) / (groups[a].1.len() * groups[b].1.len()) as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn sim_margin(fs: &FeatureSample) -> Result<f64> {
    let inter = inter_sim(fs)?;
    Ok(intra_sim(fs)? - inter)
}

/// Leave-one-out 1-NN accuracy under cosine similarity; ties go to the lower
/// index.
pub fn knn_acc(fs: &FeatureSample) -> Result<f64> {
    let n = fs.len();
    if n < 2 {
        return Err(Error::Empty("1-NN needs at least two samples".into()));
    }
    let unit = fs.unit_rows();
    let row = |i: usize| &unit[i * fs.dim..(i + 1) * fs.dim];
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_s = f64::NEG_INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = dot(row(i), row(j));
            if s > best_s {
                best_s = s;
                best = j;
            }
        }
        correct += usize::from(fs.labels[best] == fs.labels[i]);
    }
    Ok(correct as f64 / n as f64)
}

/// Traces of the class-size-weighted between-class and within-class scatter.
pub fn scatter_traces(fs: &FeatureSample) -> Result<(f64, f64, usize)> {
    let groups = members(fs);
    if groups.len() < 2 {
        return Err(Error::DegenerateSplit("scatter ratio needs two classes".into()));
    }
    let d = fs.dim;
    let n = fs.len() as f64;
    let mut grand = vec![0.0; d];
    for i in 0..fs.len() {
        grand.iter_mut().zip(fs.row(i)).for_each(|(g, x)| *g += x / n);
    }
    let (mut tb, mut tw) = (0.0, 0.0);
    for (_, idx) in &groups {
        let m = idx.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in idx {
            mean.iter_mut().zip(fs.row(i)).for_each(|(a, x)| *a += x / m);
        }
        tb += m * mean.iter().zip(&grand).map(|(a, g)| (a - g).powi(2)).sum::<f64>();
        for &i in idx {
            tw += fs.row(i).iter().zip(&mean).map(|(x, a)| (x - a).powi(2)).sum::<f64>();
        }
    }
    Ok((tb, tw, groups.len()))
}

/// `tr(S_b) / tr(S_w)`; `None` when the within-class scatter vanishes.
pub fn fisher_score(fs: &FeatureSample) -> Result<Option<f64>> {
    let (tb, tw, _) = scatter_traces(fs)?;
    Ok((tw > 0.0).then(|| tb / tw))
}

/// Calinski-Harabasz index `[tr(B)/(c-1)] / [tr(W)/(N-c)]`.
pub fn ch_index(fs: &FeatureSample) -> Result<Option<f64>> {
    let (tb, tw, c) = scatter_traces(fs)?;
    let n = fs.len();
    if n <= c {
        return Err(Error::DegenerateSplit(format!("CH index needs N > c, got N={n}, c={c}")));
    }
    Ok((tw > 0.0).then(|| (tb / (c - 1) as f64) / (tw / (n - c) as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// Hinge-loss penalty `C`.
    pub c: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Fraction of each class held out for scoring.
    pub test_frac: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iter: 1000,
            tol: 1e-4,
            test_frac: 0.3,
        }
    }
}

/// Binary linear SVM `min 0.5|w|^2 + C sum max(0, 1 - y w.x)` solved in the
/// dual by coordinate descent. Rows of `x` carry a trailing 1 for the bias.
fn train_binary_svm<R: Rng + ?Sized>(x: &[Vec<f64>], y: &[f64], cfg: &SvmConfig, rng: &mut R) -> Vec<f64> {
    let d = x[0].len();
    let mut w = vec![0.0; d];
    let mut alpha = vec![0.0; x.len()];
    let qii: Vec<f64> = x.iter().map(|r| dot(r, r)).collect();
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..cfg.max_iter {
        order.shuffle(rng);
        let mut max_pg: f64 = f64::NEG_INFINITY;
        let mut min_pg: f64 = f64::INFINITY;
        for &i in &order {
            if qii[i] == 0.0 {
                continue;
            }
            let g = y[i] * dot(&w, &x[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.c {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg);
            min_pg = min_pg.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, cfg.c);
                let delta = (alpha[i] - old) * y[i];
                w.iter_mut().zip(&x[i]).for_each(|(wj, xj)| *wj += delta * xj);
            }
        }
        if max_pg - min_pg < cfg.tol {
            break;
        }
    }
    w
}

/// Macro-F1 of a one-vs-rest linear SVM on a seeded stratified hold-out split.
/// Features are standardized with statistics of the training part.
pub fn f1_svm<R: Rng + ?Sized>(fs: &FeatureSample, cfg: &SvmConfig, rng: &mut R) -> Result<f64> {
    let groups = members(fs);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, idx) in &groups {
        let mut idx = idx.clone();
        idx.shuffle(rng);
        let k = ((idx.len() as f64 * cfg.test_frac).round() as usize).min(idx.len().saturating_sub(1));
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    let distinct = |set: &[usize]| {
        let mut c: Vec<usize> = set.iter().map(|&i| fs.labels[i]).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let train_classes = distinct(&train);
    if train_classes.len() < 2 || distinct(&test).len() < 2 {
        return Err(Error::DegenerateSplit(
            "both SVM split parts need at least two classes".into(),
        ));
    }
    let d = fs.dim;
    let nt = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        mean.iter_mut().zip(fs.row(i)).for_each(|(m, x)| *m += x / nt);
    }
    let mut sd = vec![0.0; d];
    for &i in &train {
        sd.iter_mut()
            .zip(fs.row(i).iter().zip(&mean))
            .for_each(|(s, (x, m))| *s += (x - m).powi(2) / nt);
    }
    let sd: Vec<f64> = sd.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    let prep = |i: usize| -> Vec<f64> {
        let mut r: Vec<f64> = fs.row(i).iter().zip(&mean).zip(&sd).map(|((x, m), s)| (x - m) / s).collect();
        r.push(1.0);
        r
    };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| prep(i)).collect();
    let xte: Vec<Vec<f64>> = test.iter().map(|&i| prep(i)).collect();
    let models: Vec<Vec<f64>> = train_classes
        .iter()
        .map(|&c| {
            let y: Vec<f64> = train.iter().map(|&i| if fs.labels[i] == c { 1.0 } else { -1.0 }).collect();
            train_binary_svm(&xtr, &y, cfg, rng)
        })
        .collect();
    let pred: Vec<usize> = xte
        .iter()
        .map(|x| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (k, w) in models.iter().enumerate() {
                let v = dot(w, x);
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            train_classes[best]
        })
        .collect();
    let truth: Vec<usize> = test.iter().map(|&i| fs.labels[i]).collect();
    Ok(macro_f1(&truth, &pred, &train_classes))
}

pub fn macro_f1(truth: &[usize], pred: &[usize], classes: &[usize]) -> f64 {
    let mut total = 0.0;
    for &c in classes {
        let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
        let fn_ = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
        let den = 2.0 * tp + fp + fn_;
        total += if den > 0.0 { 2.0 * tp / den } else { 0.0 };
    }
    total / classes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureQualityReport {
    pub source_layer: String,
    pub samples: usize,
    pub class_counts: Vec<(usize, usize)>,
    pub intra_sim: Option<f64>,
    pub inter_sim: Option<f64>,
    pub sim_margin: Option<f64>,
    pub knn_acc: Option<f64>,
    pub fisher: Option<f64>,
    pub ch: Option<f64>,
    pub f1_svm: Option<f64>,
    /// CH restricted to the heavy classes.
    pub ch_heavy: Option<f64>,
    /// SVM macro-F1 restricted to the heavy classes.
    pub f1_svm_heavy: Option<f64>,
    pub svm: SvmConfig,
}

/// Runs the whole battery; metrics whose preconditions fail are reported as
/// `None` and logged.
pub fn feature_report<R: Rng + ?Sized>(
    fs: &FeatureSample,
    heavy: &[usize],
    svm: &SvmConfig,
    rng: &mut R,
) -> FeatureQualityReport {
    fn ok<T>(name: &str, r: Result<T>) -> Option<T> {
        r.map_err(|e| log::warn!("{name}: {e}")).ok()
    }
    let heavy_fs = fs.restrict_to(heavy);
    let class_counts = members(fs).into_iter().map(|(c, idx)| (c, idx.len())).collect();
    FeatureQualityReport {
        source_layer: fs.source_layer.clone(),
        samples: fs.len(),
        class_counts,
        intra_sim: ok("intra_sim", intra_sim(fs)),
        inter_sim: ok("inter_sim", inter_sim(fs)),
        sim_margin: ok("sim_margin", sim_margin(fs)),
        knn_acc: ok("knn_acc", knn_acc(fs)),
        fisher: ok("fisher", fisher_score(fs)).flatten(),
        ch: ok("ch", ch_index(fs)).flatten(),
        f1_svm: ok("f1_svm", f1_svm(fs, svm, rng)),
        ch_heavy: ok("ch_heavy", ch_index(&heavy_fs)).flatten(),
        f1_svm_heavy: ok("f1_svm_heavy", f1_svm(&heavy_fs, svm, rng)),
        svm: *svm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn fs(rows: &[&[f64]], labels: &[usize]) -> FeatureSample {
        let dim = rows[0].len();
        FeatureSample::new(dim, rows.iter().flat_map(|r| r.to_vec()).collect(), labels.to_vec(), "test").unwrap()
    }

    #[test]
    fn scatter_hand_example() {
        let f = fs(&[&[0.0], &[2.0], &[4.0], &[6.0]], &[0, 0, 1, 1]);
        assert_eq!(scatter_traces(&f).unwrap().0, 16.0);
        assert_eq!(fisher_score(&f).unwrap(), Some(4.0));
        assert_eq!(ch_index(&f).unwrap(), Some(8.0));
    }

    #[test]
    fn equal_means_zero_ratio() {
        let f = fs(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]], &[0, 0, 1, 1]);
        assert_eq!(fisher_score(&f).unwrap(), Some(0.0));
        assert_eq!(ch_index(&f).unwrap(), Some(0.0));
        let tight = fs(&[&[1.0], &[1.0], &[3.0], &[3.0]], &[0, 0, 1, 1]);
        assert_eq!(fisher_score(&tight).unwrap(), None);
    }

    #[test]
    fn orthogonal_classes() {
        let f = fs(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 3.0], &[0.0, 1.0]], &[0, 0, 1, 1]);
        assert!((intra_sim(&f).unwrap() - 1.0).abs() < 1e-12);
        assert!(inter_sim(&f).unwrap().abs() < 1e-12);
        assert!((sim_margin(&f).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(knn_acc(&f).unwrap(), 1.0);
        let single = fs(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        assert_eq!(knn_acc(&single).unwrap(), 0.0);
        assert!(sim_margin(&fs(&[&[1.0], &[2.0]], &[0, 0])).is_err());
    }

    #[test]
    fn progressive_counts() {
        let pools = vec![vec![1.0; 1000], vec![2.0; 10]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = progressive_sample(&pools, 1, &[100, 100], "x", &mut rng).unwrap();
        assert_eq!(out.labels.iter().filter(|&&l| l == 0).count(), 100);
        assert_eq!(out.labels.iter().filter(|&&l| l == 1).count(), 10);
        let full = progressive_sample(&pools, 1, &[5000, 5000], "x", &mut rng).unwrap();
        assert_eq!(full.len(), 1010);
        let caps = ProgressiveCaps::default().caps(&[1_000_000, 10_000, 9]);
        assert_eq!(caps, vec![2000, 300, 9]);
    }

    fn clouds(seed: u64, n: usize, shift: f64) -> FeatureSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut v = Vec::new();
        let mut l = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { -shift } else { shift };
            v.push(center + noise.sample(&mut rng));
            v.push(noise.sample(&mut rng));
            v.push(noise.sample(&mut rng));
            l.push(c);
        }
        FeatureSample::new(3, v, l, "clouds").unwrap()
    }

    #[test]
    fn separable_clouds_f1_one() {
        let f = clouds(1, 120, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(f1_svm(&f, &SvmConfig::default(), &mut rng).unwrap(), 1.0);
        let a = f1_svm(&f, &SvmConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = f1_svm(&f, &SvmConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuted_labels_near_chance() {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut f = clouds(100 + seed, 200, 3.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            f.labels.shuffle(&mut rng);
            total += f1_svm(&f, &SvmConfig::default(), &mut rng).unwrap();
        }
        let mean = total / 20.0;
        assert!((mean - 0.5).abs() < 0.1, "{mean}");
    }
}
