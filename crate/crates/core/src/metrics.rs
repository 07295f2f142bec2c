//! Measurement battery: predictive-entropy series, embedding trajectories,
//! n-gram redundancy, cross-trial response similarity and a windowed
//! embedding-coherence proxy.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate, Generation, ModelConfig};
use crate::tensor::Tensor;
use crate::training::Checkpoint;

pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 1000;
pub const NGRAM_ORDERS: [usize; 3] = [2, 3, 4];

/// Passes the per-step entropies through and returns their population
/// variance.
pub fn token_entropy_series(entropies: &[f64]) -> Result<(Vec<f64>, f64)> {
    if entropies.is_empty() {
        return Err(Error::contract("entropy series is empty"));
    }
    Ok((entropies.to_vec(), population_variance(entropies)))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mat_vec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| dot(&c[i * d..(i + 1) * d], v)).collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// Projects mean-centred rows of `x[t×d]` onto the top `k` principal
/// directions, found by power iteration with deflation.
///
/// Each component's first loading above 1e-12 in magnitude is made positive.
/// When the data has rank below `k`, the remaining directions are completed
/// to an orthonormal basis and carry zero variance.
pub fn pca_project(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::dim("pca_project", x.shape(), &[0, 0]));
    }
    let (t, d) = (x.rows(), x.cols());
    if t < 2 {
        return Err(Error::contract(format!("pca_project needs at least 2 rows, got {t}")));
    }
    if k == 0 || k > d {
        return Err(Error::contract(format!("pca_project: k = {k} must be in 1..={d}")));
    }
    let mut centred = x.to_vec();
    for j in 0..d {
        let m = (0..t).map(|i| centred[i * d + j]).sum::<f64>() / t as f64;
        (0..t).for_each(|i| centred[i * d + j] -= m);
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..t {
        let r = &centred[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    let scale = cov.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::Degenerate("pca_project: all rows are identical".into()));
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut deflated = cov.clone();
    for _ in 0..k {
        let v = leading_direction(&deflated, d, &components, scale);
        let lambda = dot(&v, &mat_vec(&cov, d, &v));
        for a in 0..d {
            for b in 0..d {
                deflated[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        components.push(v);
    }

    let mut out = Vec::with_capacity(t * k);
    for i in 0..t {
        let r = &centred[i * d..(i + 1) * d];
        out.extend(components.iter().map(|c| dot(r, c)));
    }
    Tensor::new(vec![t, k], out)
}

fn leading_direction(c: &[f64], d: usize, found: &[Vec<f64>], scale: f64) -> Vec<f64> {
    // the largest column of c always has a component along the top
    // eigenvector unless that eigenvector has a zero there
    let col_norm = |j: usize| (0..d).map(|i| c[i * d + j] * c[i * d + j]).sum::<f64>();
    let best = (0..d).fold(0, |b, j| if col_norm(j) > col_norm(b) { j } else { b });
    let mut v: Vec<f64> = (0..d).map(|i| c[i * d + best]).collect();
    orthogonalize(&mut v, found);

    if norm(&v) <= 1e-12 * scale {
        return complete_basis(d, found);
    }
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    for _ in 0..PCA_MAX_ITERS {
        let mut w = mat_vec(c, d, &v);
        orthogonalize(&mut w, found);
        let n = norm(&w);
        if n <= 1e-12 * scale {
            break;
        }
        w.iter_mut().for_each(|x| *x /= n);
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if delta < PCA_TOLERANCE {
            break;
        }
    }
    fix_sign(v)
}

/// Standard basis vector least aligned with `found`, orthonormalized.
fn complete_basis(d: usize, found: &[Vec<f64>]) -> Vec<f64> {
    let mut best = Vec::new();
    let mut best_norm = -1.0;
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        orthogonalize(&mut e, found);
        orthogonalize(&mut e, found);
        let n = norm(&e);
        if n > best_norm + 1e-12 {
            best_norm = n;
            best = e;
        }
    }
    best.iter_mut().for_each(|x| *x /= best_norm);
    fix_sign(best)
}

fn fix_sign(mut v: Vec<f64>) -> Vec<f64> {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// Mean Euclidean step `‖e_i − e_{i−1}‖` over consecutive rows.
pub fn embedding_divergence(trace: &Tensor) -> Result<f64> {
    if trace.ndim() != 2 || trace.rows() < 2 {
        return Err(Error::contract(format!(
            "embedding divergence needs a [t×d] trace with t >= 2, got {:?}",
            trace.shape()
        )));
    }
    let steps: Vec<f64> = (1..trace.rows())
        .map(|i| {
            let (a, b) = (trace.row(i), trace.row(i - 1));
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    Ok(mean(&steps))
}

/// 2-D PCA projection of the per-position embeddings, plus their
/// [`embedding_divergence`].
pub fn embedding_trajectory(trace: &Tensor) -> Result<(Tensor, f64)> {
    let divergence = embedding_divergence(trace)?;
    Ok((pca_project(trace, 2)?, divergence))
}

/// Occurrences of length-`n` windows beyond each window's first occurrence.
pub fn count_repeated_ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> Result<usize> {
    if n == 0 || tokens.len() < n {
        return Err(Error::contract(format!(
            "count_repeated_ngrams: n = {n} needs 1 <= n <= {}",
            tokens.len()
        )));
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<&[T]> = tokens.windows(n).collect();
    Ok(total - distinct.len())
}

fn bigrams<T: Eq + Hash>(tokens: &[T]) -> HashSet<&[T]> {
    tokens.windows(2).collect()
}

/// Mean bigram-set Jaccard similarity over unordered response pairs.
pub fn response_similarity<T: Eq + Hash, R: AsRef<[T]>>(responses: &[R]) -> Result<f64> {
    if responses.len() < 2 {
        return Err(Error::contract("response_similarity needs at least 2 responses"));
    }
    if let Some(r) = responses.iter().find(|r| r.as_ref().len() < 2) {
        return Err(Error::contract(format!(
            "response of {} tokens has no bigrams",
            r.as_ref().len()
        )));
    }
    let sets: Vec<HashSet<&[T]>> = responses.iter().map(|r| bigrams(r.as_ref())).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            sum += jaccard(&sets[i], &sets[j]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

fn jaccard<K: Eq + Hash>(a: &HashSet<K>, b: &HashSet<K>) -> f64 {
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Mean cosine between mean-pooled embeddings of consecutive windows,
/// mapped from [-1, 1] to [0, 1].
///
/// Windows start at multiples of `stride` and must fit entirely inside the
/// trace.
pub fn coherence_score(trace: &Tensor, window: usize, stride: usize) -> Result<f64> {
    if window == 0 || stride == 0 {
        return Err(Error::contract("coherence window and stride must be positive"));
    }
    if trace.ndim() != 2 || trace.rows() < 2 * window {
        return Err(Error::contract(format!(
            "coherence needs at least {} positions, got {:?}",
            2 * window,
            trace.shape()
        )));
    }
    let (t, d) = (trace.rows(), trace.cols());
    let means: Vec<Vec<f64>> = (0..)
        .map(|w| w * stride)
        .take_while(|s| s + window <= t)
        .map(|s| {
            let mut m = vec![0.0; d];
            for i in s..s + window {
                m.iter_mut().zip(trace.row(i)).for_each(|(a, b)| *a += b / window as f64);
            }
            m
        })
        .collect();
    let mut cosines = Vec::with_capacity(means.len() - 1);
    for pair in means.windows(2) {
        let denom = norm(&pair[0]) * norm(&pair[1]);
        if denom == 0.0 {
            return Err(Error::Degenerate("coherence: a window mean is the zero vector".into()));
        }
        cosines.push((dot(&pair[0], &pair[1]) / denom).clamp(-1.0, 1.0));
    }
    Ok(((mean(&cosines) + 1.0) / 2.0).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Bytes sampled per generation.
    pub n_new: usize,
    pub temperature: f64,
    /// Generations per prompt; trial `i` samples with seed `seed + i`.
    pub trials: usize,
    pub seed: u64,
    pub coherence_window: usize,
    pub coherence_stride: usize,
    /// Prefix lengths for the coherence-vs-length table.
    pub coherence_lengths: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_new: 500,
            temperature: 1.0,
            trials: 10,
            seed: 0,
            coherence_window: 16,
            coherence_stride: 8,
            coherence_lengths: vec![100, 200, 300, 400, 500],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "eval.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.trials < 2 {
            return Err(Error::Config(format!(
                "eval.trials must be >= 2 to measure similarity, got {}",
                self.trials
            )));
        }
        if self.coherence_window == 0 || self.coherence_stride == 0 {
            return Err(Error::Config("eval coherence window and stride must be positive".into()));
        }
        if self.n_new < 2 * self.coherence_window || self.n_new < *NGRAM_ORDERS.last().unwrap() {
            return Err(Error::Config(format!(
                "eval.n_new ({}) must be at least twice the coherence window ({})",
                self.n_new, self.coherence_window
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub model_hash: String,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    /// Prompts as lossy UTF-8.
    pub prompts: Vec<String>,
    /// Sampling seed of each trial.
    pub trial_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Predictive entropy per generated position, averaged over generations.
    pub entropy_series: Vec<f64>,
    /// Population variance of each generation's entropy series, averaged.
    pub entropy_variance: f64,
    /// PCA projection of the first generation's embedding trace.
    pub trajectory_2d: Vec<[f64; 2]>,
    pub embedding_divergence: f64,
    /// Mean repeated-n-gram count per generation, keyed by n.
    pub repeated_ngrams: BTreeMap<usize, f64>,
    /// `repeated_ngrams` rescaled to a 500-byte output.
    pub repeated_ngrams_per_500: BTreeMap<usize, f64>,
    /// Raw per-generation counts, keyed by n.
    pub ngram_counts: BTreeMap<usize, Vec<usize>>,
    pub response_similarity: f64,
    /// Entry `i`: mean similarity of trial `i` to every other trial.
    pub similarity_by_trial: Vec<f64>,
    pub coherence: f64,
    /// `(length, coherence of the first `length` generated positions)`.
    pub coherence_by_length: Vec<(usize, f64)>,
    pub metadata: RunMetadata,
}

/// Generates `cfg.trials` continuations of every prompt and measures them.
pub fn evaluate(ckpt: &Checkpoint, prompts: &[Vec<u8>], cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if prompts.is_empty() || prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::contract("evaluate needs at least one nonempty prompt"));
    }
    let trial_seeds: Vec<u64> = (0..cfg.trials as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let jobs: Vec<(usize, u64)> = (0..prompts.len())
        .flat_map(|p| trial_seeds.iter().map(move |&s| (p, s)))
        .collect();
    // generation holds no tape, so trials run in parallel and are collected
    // back in job order
    let gens: Vec<Generation> = jobs
        .par_iter()
        .map(|&(p, seed)| generate(&ckpt.params, &ckpt.model, &prompts[p], cfg.n_new, cfg.temperature, seed))
        .collect::<Result<_>>()?;

    let n = cfg.n_new;
    let mut entropy_series = vec![0.0; n];
    let mut variances = Vec::with_capacity(gens.len());
    let mut divergences = Vec::with_capacity(gens.len());
    let mut coherences = Vec::with_capacity(gens.len());
    let lengths: Vec<usize> = cfg
        .coherence_lengths
        .iter()
        .copied()
        .filter(|&l| l <= n && l >= 2 * cfg.coherence_window)
        .collect();
    let mut by_length = vec![0.0; lengths.len()];
    let mut ngram_counts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut traces = Vec::with_capacity(gens.len());

    for g in &gens {
        let (series, var) = token_entropy_series(&g.entropies)?;
        entropy_series.iter_mut().zip(&series).for_each(|(a, b)| *a += b / gens.len() as f64);
        variances.push(var);
        let trace = Tensor::from_rows(&g.embeddings)?;
        divergences.push(embedding_divergence(&trace)?);
        coherences.push(coherence_score(&trace, cfg.coherence_window, cfg.coherence_stride)?);
        for (slot, &len) in by_length.iter_mut().zip(&lengths) {
            let prefix = trace.slice_rows(0, len)?;
            *slot += coherence_score(&prefix, cfg.coherence_window, cfg.coherence_stride)? / gens.len() as f64;
        }
        for order in NGRAM_ORDERS {
            ngram_counts.entry(order).or_default().push(count_repeated_ngrams(g.generated(), order)?);
        }
        traces.push(trace);
    }

    let trajectory = pca_project(&traces[0], 2)?;
    let trajectory_2d = (0..trajectory.rows()).map(|i| [trajectory.at(i, 0), trajectory.at(i, 1)]).collect();

    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut similarity_by_trial = vec![0.0; cfg.trials];
    for p in 0..prompts.len() {
        let group: Vec<&[u8]> = gens[p * cfg.trials..(p + 1) * cfg.trials].iter().map(|g| g.generated()).collect();
        per_prompt.push(response_similarity(&group)?);
        for (i, slot) in similarity_by_trial.iter_mut().enumerate() {
            let others: f64 = (0..cfg.trials)
                .filter(|&j| j != i)
                .map(|j| jaccard(&bigrams(group[i]), &bigrams(group[j])))
                .sum();
            *slot += others / (cfg.trials - 1) as f64 / prompts.len() as f64;
        }
    }

    let repeated_ngrams: BTreeMap<usize, f64> = ngram_counts
        .iter()
        .map(|(&k, v)| (k, v.iter().sum::<usize>() as f64 / v.len() as f64))
        .collect();
    let repeated_ngrams_per_500 = repeated_ngrams.iter().map(|(&k, &v)| (k, v * 500.0 / n as f64)).collect();

    Ok(MetricsReport {
        entropy_series,
        entropy_variance: mean(&variances),
        trajectory_2d,
        embedding_divergence: mean(&divergences),
        repeated_ngrams,
        repeated_ngrams_per_500,
        ngram_counts,
        response_similarity: mean(&per_prompt),
        similarity_by_trial,
        coherence: mean(&coherences),
        coherence_by_length: lengths.into_iter().zip(by_length).collect(),
        metadata: RunMetadata {
            model_hash: ckpt.hash()?,
            model: ckpt.model.clone(),
            eval: cfg.clone(),
            prompts: prompts.iter().map(|p| String::from_utf8_lossy(p).into_owned()).collect(),
            trial_seeds,
        },
    })
}

/// Baseline and flux reports evaluated under one configuration, with
/// `flux − baseline` deltas for every scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: MetricsReport,
    pub flux: MetricsReport,
    pub deltas: BTreeMap<String, f64>,
}

pub fn compare(
    baseline: &Checkpoint,
    flux: &Checkpoint,
    prompts: &[Vec<u8>],
    cfg: &EvalConfig,
) -> Result<Comparison> {
    if baseline.model.vocab_size != flux.model.vocab_size
        || baseline.model.context_len != flux.model.context_len
    {
        return Err(Error::contract(format!(
            "checkpoints disagree on vocab/context: {}/{} vs {}/{}",
            baseline.model.vocab_size,
            baseline.model.context_len,
            flux.model.vocab_size,
            flux.model.context_len
        )));
    }
    let b = evaluate(baseline, prompts, cfg)?;
    let f = evaluate(flux, prompts, cfg)?;
    let mut deltas = BTreeMap::new();
    for (name, x, y) in [
        ("entropy_variance", b.entropy_variance, f.entropy_variance),
        ("embedding_divergence", b.embedding_divergence, f.embedding_divergence),
        ("response_similarity", b.response_similarity, f.response_similarity),
        ("coherence", b.coherence, f.coherence),
    ] {
        deltas.insert(name.to_string(), y - x);
    }
    for n in NGRAM_ORDERS {
        deltas.insert(format!("repeated_{n}grams"), f.repeated_ngrams[&n] - b.repeated_ngrams[&n]);
    }
    Ok(Comparison { baseline: b, flux: f, deltas })
}

fn ngram_label(n: usize) -> String {
    format!("{n}-gram")
}

fn write(dir: &Path, name: &str, body: String) -> Result<()> {
    fs::write(dir.join(name), body)?;
    Ok(())
}

/// Writes `report.json` and the per-figure CSVs into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write(dir, "report.json", serde_json::to_string_pretty(report)? + "\n")?;

    let mut s = String::from("step,entropy\n");
    for (i, h) in report.entropy_series.iter().enumerate() {
        writeln!(s, "{},{h}", i + 1).unwrap();
    }
    write(dir, "entropy_series.csv", s)?;

    let mut s = String::from("position,x,y\n");
    for (i, [x, y]) in report.trajectory_2d.iter().enumerate() {
        writeln!(s, "{i},{x},{y}").unwrap();
    }
    write(dir, "trajectory.csv", s)?;

    let mut s = String::from("ngram,count,per_500\n");
    for (n, c) in &report.repeated_ngrams {
        writeln!(s, "{},{c},{}", ngram_label(*n), report.repeated_ngrams_per_500[n]).unwrap();
    }
    write(dir, "ngrams.csv", s)?;

    let mut s = String::from("trial,similarity\n");
    for (i, v) in report.similarity_by_trial.iter().enumerate() {
        writeln!(s, "{},{v}", i + 1).unwrap();
    }
    write(dir, "similarity.csv", s)?;

    let mut s = String::from("length,coherence\n");
    for (len, c) in &report.coherence_by_length {
        writeln!(s, "{len},{c}").unwrap();
    }
    write(dir, "coherence.csv", s)
}

/// Writes both reports under `baseline/` and `flux/`, then side-by-side
/// CSVs and `comparison.json` at the top of `dir`.
pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<()> {
    let (b, f) = (&cmp.baseline, &cmp.flux);
    write_report(b, &dir.join("baseline"))?;
    write_report(f, &dir.join("flux"))?;
    write(dir, "comparison.json", serde_json::to_string_pretty(cmp)? + "\n")?;

    let mut s = String::from("step,baseline,flux\n");
    for (i, (x, y)) in b.entropy_series.iter().zip(&f.entropy_series).enumerate() {
        writeln!(s, "{},{x},{y}", i + 1).unwrap();
    }
    write(dir, "entropy_series.csv", s)?;

    let mut s = String::from("model,position,x,y\n");
    for (label, r) in [("baseline", b), ("flux", f)] {
        for (i, [x, y]) in r.trajectory_2d.iter().enumerate() {
            writeln!(s, "{label},{i},{x},{y}").unwrap();
        }
    }
    write(dir, "trajectory.csv", s)?;

    let mut s = String::from("ngram,baseline,flux,delta,baseline_per_500,flux_per_500\n");
    for n in NGRAM_ORDERS {
        let (x, y) = (b.repeated_ngrams[&n], f.repeated_ngrams[&n]);
        let (px, py) = (b.repeated_ngrams_per_500[&n], f.repeated_ngrams_per_500[&n]);
        writeln!(s, "{},{x},{y},{},{px},{py}", ngram_label(n), y - x).unwrap();
    }
    write(dir, "ngrams.csv", s)?;

    let mut s = String::from("trial,baseline,flux\n");
    for (i, (x, y)) in b.similarity_by_trial.iter().zip(&f.similarity_by_trial).enumerate() {
        writeln!(s, "{},{x},{y}", i + 1).unwrap();
    }
    write(dir, "similarity.csv", s)?;

    let mut s = String::from("length,baseline,flux,delta\n");
    for ((len, x), (_, y)) in b.coherence_by_length.iter().zip(&f.coherence_by_length) {
        writeln!(s, "{len},{x},{y},{}", y - x).unwrap();
    }
    write(dir, "coherence.csv", s)
}
