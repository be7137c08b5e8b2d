//! Measurement: 10-fold verification, linear probes on frozen embeddings,
//! and attribute-only identity predictiveness.
//!
//! The verification protocol scores balanced genuine/impostor pairs split
//! into 10 identity-disjoint folds; each fold is judged at the threshold
//! that maximizes accuracy over the other nine, so selection never inspects
//! the evaluated fold. Probes and attribute-only analyses use hinge- or
//! logistic-loss affine classifiers trained by seeded SGD, keeping every
//! result deterministic without an external solver.

use std::collections::HashMap;

use rand::Rng;

use crate::data::{Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::rng;

/// One labeled comparison between two samples of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub left: usize,
    pub right: usize,
    pub genuine: bool,
    pub fold: usize,
}

pub const NUM_FOLDS: usize = 10;

/// Per-fold accuracies, their mean, and the threshold used on each fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold_accuracy: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub mean: f64,
}

/// Threshold search over the distinct observed scores plus a `+∞` sentinel;
/// decision rule `score ≥ threshold ⇒ genuine`. Candidates sit exactly on
/// score values (not between them) so held-out decisions depend only on the
/// ordering of scores, which keeps fold accuracy invariant under every
/// strictly increasing transform. Returns the lowest threshold achieving
/// the maximum correct count.
fn best_threshold(scored: &mut [(f64, bool)]) -> f64 {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let genuine_total = scored.iter().filter(|(_, g)| *g).count();

    // Candidate at the lowest score predicts everything genuine.
    let mut correct = genuine_total;
    let mut best_correct = correct;
    let mut best_threshold = scored.first().map_or(f64::INFINITY, |(s, _)| *s);

    let mut i = 0;
    while i < scored.len() {
        // Raise the threshold past this tie group: its pairs flip from
        // predicted-genuine to predicted-impostor.
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            if scored[j].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            j += 1;
        }
        let candidate = if j < scored.len() {
            scored[j].0
        } else {
            f64::INFINITY
        };
        if correct > best_correct {
            best_correct = correct;
            best_threshold = candidate;
        }
        i = j;
    }
    best_threshold
}

/// 10-fold verification accuracy. For each fold the threshold is chosen on
/// the other nine folds only, then applied to the held-out fold.
pub fn verification_accuracy_10fold(
    scores: &[f64],
    pairs: &[VerificationPair],
) -> Result<FoldReport> {
    if scores.len() != pairs.len() {
        return Err(Error::eval(format!(
            "{} scores for {} pairs",
            scores.len(),
            pairs.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::eval(format!("non-finite score {bad}")));
    }
    let mut fold_sizes = [0usize; NUM_FOLDS];
    for p in pairs {
        if p.fold >= NUM_FOLDS {
            return Err(Error::eval(format!("fold {} out of range", p.fold)));
        }
        fold_sizes[p.fold] += 1;
    }
    if let Some(f) = fold_sizes.iter().position(|&n| n == 0) {
        return Err(Error::eval(format!("fold {f} is empty")));
    }

    let mut fold_accuracy = Vec::with_capacity(NUM_FOLDS);
    let mut thresholds = Vec::with_capacity(NUM_FOLDS);
    for f in 0..NUM_FOLDS {
        let mut train: Vec<(f64, bool)> = pairs
            .iter()
            .zip(scores)
            .filter(|(p, _)| p.fold != f)
            .map(|(p, &s)| (s, p.genuine))
            .collect();
        let threshold = best_threshold(&mut train);
        let (mut correct, mut total) = (0usize, 0usize);
        for (p, &s) in pairs.iter().zip(scores).filter(|(p, _)| p.fold == f) {
            total += 1;
            if (s >= threshold) == p.genuine {
                correct += 1;
            }
        }
        fold_accuracy.push(correct as f64 / total as f64);
        thresholds.push(threshold);
    }
    let mean = fold_accuracy.iter().sum::<f64>() / NUM_FOLDS as f64;
    Ok(FoldReport {
        fold_accuracy,
        thresholds,
        mean,
    })
}

/// Cosine similarity with the same near-zero-norm guard the model applies.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-6 || nb < 1e-6 {
        return Err(Error::eval(format!(
            "near-zero embedding norm ({na:.3e}, {nb:.3e})"
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Embed every sample referenced by `pairs` with the frozen model and score
/// each pair by cosine similarity.
pub fn embed_and_score(
    model: &MultiTaskModel,
    dataset: &SyntheticDataset,
    pairs: &[VerificationPair],
) -> Result<Vec<f64>> {
    let mut needed: Vec<usize> = pairs.iter().flat_map(|p| [p.left, p.right]).collect();
    needed.sort_unstable();
    needed.dedup();

    let mut embeddings: HashMap<usize, Vec<f64>> = HashMap::with_capacity(needed.len());
    for chunk in needed.chunks(256) {
        let feats: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| dataset.samples[i].features.clone())
            .collect();
        let embs = model.embed_batch(&feats)?;
        for (&i, e) in chunk.iter().zip(embs) {
            embeddings.insert(i, e);
        }
    }
    pairs
        .iter()
        .map(|p| cosine(&embeddings[&p.left], &embeddings[&p.right]))
        .collect()
}

// ---------------------------------------------------------------------------
// Seeded affine classifiers: logistic for probes, hinge for the attribute-only
// protocols.
// ---------------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Per-sample logistic-loss SGD with tail averaging: the returned classifier
/// is the mean of the end-of-epoch iterates over the final quarter of
/// training, which removes the oscillation constant-step SGD leaves around
/// the decision boundary.
fn logistic_sgd(
    xs: &[&[f64]],
    ys: &[f64],
    epochs: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> (Vec<f64>, f64) {
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let tail_start = epochs - epochs / 2;
    let mut w_avg = vec![0.0; dim];
    let mut b_avg = 0.0;
    let mut averaged = 0usize;
    for epoch in 0..epochs {
        let averaging = epoch >= tail_start;
        for &i in &shuffled(xs.len(), rng) {
            let f: f64 = xs[i].iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            let err = ys[i] - sigmoid(f);
            for (wi, x) in w.iter_mut().zip(xs[i]) {
                *wi += lr * err * x;
            }
            b += lr * err;
            if averaging {
                for (a, wi) in w_avg.iter_mut().zip(&w) {
                    *a += wi;
                }
                b_avg += b;
                averaged += 1;
            }
        }
    }
    if averaged > 0 {
        for a in w_avg.iter_mut() {
            *a /= averaged as f64;
        }
        (w_avg, b_avg / averaged as f64)
    } else {
        (w, b)
    }
}

/// Per-sample hinge-loss SGD with ±1 labels; returns `(weights, bias)`.
fn hinge_sgd(
    xs: &[&[f64]],
    ys: &[f64],
    epochs: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> (Vec<f64>, f64) {
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..epochs {
        for &i in &shuffled(xs.len(), rng) {
            let f: f64 = xs[i].iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            if ys[i] * f < 1.0 {
                for (wi, x) in w.iter_mut().zip(xs[i]) {
                    *wi += lr * ys[i] * x;
                }
                b += lr * ys[i];
            }
        }
    }
    (w, b)
}

/// Outcome of probing one attribute on frozen embeddings. `None` accuracy
/// marks a degenerate attribute (single class in the probe-train half).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub attribute_index: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub results: Vec<ProbeResult>,
    /// Mean over non-degenerate attributes; `None` if all were degenerate.
    pub group_mean: Option<f64>,
}

const PROBE_EPOCHS: usize = 200;
const PROBE_LR: f64 = 0.1;

/// Train one affine logistic classifier per listed attribute on half the
/// embeddings (seeded split) and report held-out accuracy.
pub fn linear_probe(
    embeddings: &[Vec<f64>],
    attribute_labels: &[Vec<u8>],
    attr_indices: &[usize],
    seed: u64,
) -> Result<ProbeReport> {
    if embeddings.len() != attribute_labels.len() {
        return Err(Error::eval(format!(
            "{} embeddings for {} label rows",
            embeddings.len(),
            attribute_labels.len()
        )));
    }
    if embeddings.len() < 4 {
        return Err(Error::eval("need at least 4 samples to probe"));
    }

    let mut split_rng = rng::stream(seed, "probe-split");
    let order = shuffled(embeddings.len(), &mut split_rng);
    let half = embeddings.len() / 2;
    let (train_idx, test_idx) = order.split_at(half);

    let mut results = Vec::with_capacity(attr_indices.len());
    for (k, &attr) in attr_indices.iter().enumerate() {
        let ys: Vec<f64> = train_idx
            .iter()
            .map(|&i| f64::from(attribute_labels[i][attr]))
            .collect();
        let ones = ys.iter().filter(|&&y| y == 1.0).count();
        if ones == 0 || ones == ys.len() {
            results.push(ProbeResult {
                attribute_index: attr,
                accuracy: None,
            });
            continue;
        }
        let xs: Vec<&[f64]> = train_idx.iter().map(|&i| embeddings[i].as_slice()).collect();
        let mut rng = rng::substream(seed, "probe-train", (attr + k) as u64);
        let (w, b) = logistic_sgd(&xs, &ys, PROBE_EPOCHS, PROBE_LR, &mut rng);

        let correct = test_idx
            .iter()
            .filter(|&&i| {
                let f: f64 =
                    embeddings[i].iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + b;
                (f >= 0.0) == (attribute_labels[i][attr] == 1)
            })
            .count();
        results.push(ProbeResult {
            attribute_index: attr,
            accuracy: Some(correct as f64 / test_idx.len() as f64),
        });
    }

    let kept: Vec<f64> = results.iter().filter_map(|r| r.accuracy).collect();
    let group_mean = if kept.is_empty() {
        None
    } else {
        Some(kept.iter().sum::<f64>() / kept.len() as f64)
    };
    Ok(ProbeReport {
        results,
        group_mean,
    })
}

/// Closed-set identification from attribute vectors alone.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationReport {
    pub rank1: f64,
    pub rank5: f64,
    pub num_classes: usize,
    /// Identities excluded for lacking both a train and a test image.
    pub excluded_identities: usize,
}

const ID_EPOCHS: usize = 50;
const ID_LR: f64 = 0.1;

/// One-vs-rest hinge classifiers on attribute bit vectors with an
/// image-disjoint split within each identity. Rank-k counts a hit when the
/// true identity scores among the top k, ties broken by ascending class
/// index.
pub fn attribute_only_identification(
    attribute_vectors: &[Vec<u8>],
    identities: &[usize],
    seed: u64,
) -> Result<IdentificationReport> {
    if attribute_vectors.len() != identities.len() {
        return Err(Error::eval("attribute vectors and identities differ in length"));
    }
    let mut by_identity: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &id) in identities.iter().enumerate() {
        match by_identity.iter_mut().find(|(x, _)| *x == id) {
            Some((_, v)) => v.push(i),
            None => by_identity.push((id, vec![i])),
        }
    }
    by_identity.sort_by_key(|(id, _)| *id);

    let excluded_identities = by_identity.iter().filter(|(_, v)| v.len() < 2).count();
    by_identity.retain(|(_, v)| v.len() >= 2);
    if by_identity.len() < 2 {
        return Err(Error::eval(format!(
            "need at least 2 identities with 2+ images, have {}",
            by_identity.len()
        )));
    }

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (id, samples) in &by_identity {
        let mut rng = rng::substream(seed, "attr-id-split", *id as u64);
        let order = shuffled(samples.len(), &mut rng);
        let split = samples.len().div_ceil(2);
        for (pos, &o) in order.iter().enumerate() {
            if pos < split {
                train_idx.push(samples[o]);
            } else {
                test_idx.push(samples[o]);
            }
        }
    }

    let features: Vec<Vec<f64>> = attribute_vectors
        .iter()
        .map(|bits| bits.iter().map(|&b| f64::from(b)).collect())
        .collect();
    let classes: Vec<usize> = by_identity.iter().map(|(id, _)| *id).collect();

    // One hinge classifier per class; scores rank candidates per test row.
    let xs: Vec<&[f64]> = train_idx.iter().map(|&i| features[i].as_slice()).collect();
    let mut classifiers = Vec::with_capacity(classes.len());
    for (ci, &class) in classes.iter().enumerate() {
        let ys: Vec<f64> = train_idx
            .iter()
            .map(|&i| if identities[i] == class { 1.0 } else { -1.0 })
            .collect();
        let mut rng = rng::substream(seed, "attr-id-train", ci as u64);
        classifiers.push(hinge_sgd(&xs, &ys, ID_EPOCHS, ID_LR, &mut rng));
    }

    let (mut hit1, mut hit5) = (0usize, 0usize);
    for &ti in &test_idx {
        let true_pos = classes
            .iter()
            .position(|&c| c == identities[ti])
            .expect("test identity has a classifier");
        let scores: Vec<f64> = classifiers
            .iter()
            .map(|(w, b)| features[ti].iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() + b)
            .collect();
        let true_score = scores[true_pos];
        let rank = scores
            .iter()
            .enumerate()
            .filter(|&(c, &s)| s > true_score || (s == true_score && c < true_pos))
            .count();
        if rank < 1 {
            hit1 += 1;
        }
        if rank < 5 {
            hit5 += 1;
        }
    }
    Ok(IdentificationReport {
        rank1: hit1 as f64 / test_idx.len() as f64,
        rank5: hit5 as f64 / test_idx.len() as f64,
        num_classes: classes.len(),
        excluded_identities,
    })
}

const VERIF_EPOCHS: usize = 30;
const VERIF_LR: f64 = 0.1;

/// Map a pair of attribute vectors to the symmetric feature
/// `[|a−b|, a·b]`.
fn pair_feature(a: &[u8], b: &[u8]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * a.len());
    for (&x, &y) in a.iter().zip(b) {
        out.push((f64::from(x) - f64::from(y)).abs());
    }
    for (&x, &y) in a.iter().zip(b) {
        out.push(f64::from(x) * f64::from(y));
    }
    out
}

fn check_balanced(pairs: &[VerificationPair], what: &str) -> Result<()> {
    let genuine = pairs.iter().filter(|p| p.genuine).count();
    if genuine * 2 != pairs.len() {
        return Err(Error::eval(format!(
            "{what} pair set unbalanced: {genuine} genuine of {}",
            pairs.len()
        )));
    }
    Ok(())
}

/// Verification from attribute vectors alone: a hinge-loss affine classifier
/// on symmetric pair features, trained on `train_pairs`, judged on the
/// disjoint `eval_pairs`. Both sets must be balanced.
pub fn attribute_only_verification(
    attribute_vectors: &[Vec<u8>],
    train_pairs: &[VerificationPair],
    eval_pairs: &[VerificationPair],
    seed: u64,
) -> Result<f64> {
    if train_pairs.is_empty() || eval_pairs.is_empty() {
        return Err(Error::eval("empty pair set"));
    }
    check_balanced(train_pairs, "train")?;
    check_balanced(eval_pairs, "eval")?;

    let feats: Vec<Vec<f64>> = train_pairs
        .iter()
        .map(|p| pair_feature(&attribute_vectors[p.left], &attribute_vectors[p.right]))
        .collect();
    let xs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
    let ys: Vec<f64> = train_pairs
        .iter()
        .map(|p| if p.genuine { 1.0 } else { -1.0 })
        .collect();
    let mut rng = rng::stream(seed, "attr-verif-train");
    let (w, b) = hinge_sgd(&xs, &ys, VERIF_EPOCHS, VERIF_LR, &mut rng);

    let correct = eval_pairs
        .iter()
        .filter(|p| {
            let f = pair_feature(&attribute_vectors[p.left], &attribute_vectors[p.right]);
            let score: f64 = f.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            (score >= 0.0) == p.genuine
        })
        .count();
    Ok(correct as f64 / eval_pairs.len() as f64)
}

/// Attribute vectors and identities of one dataset split, the inputs to the
/// attribute-only protocols.
pub fn split_attributes(dataset: &SyntheticDataset, split: Split) -> (Vec<Vec<u8>>, Vec<usize>) {
    let idx = dataset.indices(split);
    (
        idx.iter().map(|&i| dataset.samples[i].attributes.clone()).collect(),
        idx.iter().map(|&i| dataset.samples[i].identity).collect(),
    )
}

fn restrict(vectors: &[Vec<u8>], attr_indices: &[usize]) -> Vec<Vec<u8>> {
    vectors
        .iter()
        .map(|v| attr_indices.iter().map(|&a| v[a]).collect())
        .collect()
}

/// Sizing of the attribute-only protocol.
#[derive(Debug, Clone)]
pub struct AttrOnlyOptions {
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub seed: u64,
}

impl Default for AttrOnlyOptions {
    fn default() -> Self {
        AttrOnlyOptions {
            train_pairs: 20_000,
            eval_pairs: 5_000,
            seed: 0,
        }
    }
}

/// Identification and verification from attribute labels alone, per group,
/// for the canonical P+N+M combination, for all attributes, and a chance
/// reference row. Runs on the training split.
pub fn attribute_only_table(dataset: &SyntheticDataset, opts: &AttrOnlyOptions) -> Result<Table> {
    let total = opts.train_pairs + opts.eval_pairs;
    let pairs = crate::data::make_flat_pairs(dataset, Split::Train, total, opts.seed)?;
    let (train_pairs, eval_pairs) = pairs.split_at(opts.train_pairs);

    // Pair indices address dataset.samples directly, so verification uses
    // full-length vector tables; identification gets split-local rows.
    let all_vectors: Vec<Vec<u8>> = dataset.samples.iter().map(|s| s.attributes.clone()).collect();
    let (split_vectors, split_identities) = split_attributes(dataset, Split::Train);

    let group_slices = dataset.config.group_slices();
    let mut rows: Vec<(String, Vec<usize>)> = group_slices.clone();
    let letter_of = |group: &str| crate::data::group_letter(group);
    let combo: Vec<usize> = ['P', 'N', 'M']
        .iter()
        .filter_map(|want| {
            group_slices
                .iter()
                .find(|(g, _)| letter_of(g) == Some(*want))
        })
        .flat_map(|(_, idx)| idx.iter().copied())
        .collect();
    let have_all_three = ['P', 'N', 'M']
        .iter()
        .all(|want| group_slices.iter().any(|(g, _)| letter_of(g) == Some(*want)));
    if have_all_three {
        rows.push(("PNM".to_string(), combo));
    }
    rows.push((
        "All".to_string(),
        (0..dataset.config.num_attributes()).collect(),
    ));

    let mut table = Table::new(
        "identity predictiveness of attribute labels",
        vec!["verif_pct".into(), "rank1_pct".into(), "rank5_pct".into()],
    );
    let mut chance_classes = 0usize;
    for (label, indices) in rows {
        let verif = attribute_only_verification(
            &restrict(&all_vectors, &indices),
            train_pairs,
            eval_pairs,
            rng::derive(opts.seed, &format!("attr-verif:{label}")),
        )?;
        let id = attribute_only_identification(
            &restrict(&split_vectors, &indices),
            &split_identities,
            rng::derive(opts.seed, &format!("attr-id:{label}")),
        )?;
        chance_classes = id.num_classes;
        table.push(label, vec![verif * 100.0, id.rank1 * 100.0, id.rank5 * 100.0]);
    }
    let c = chance_classes.max(1) as f64;
    table.push("Chance", vec![50.0, 100.0 / c, 100.0 * (5.0_f64.min(c)) / c]);
    Ok(table)
}

// ---------------------------------------------------------------------------
// Report tables: aligned text plus CSV that re-parses to the exact values.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> Self {
        Table {
            title: title.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) {
        self.rows.push(TableRow {
            label: label.into(),
            values,
        });
    }

    /// Stable report order: baseline first, prediction-only rows, then rows
    /// with suppression.
    pub fn sort_rows_for_report(&mut self) {
        self.rows.sort_by_key(|r| {
            if r.label == "FR" {
                0u8
            } else if r.label.contains('-') {
                2
            } else {
                1
            }
        });
    }

    pub fn render_text(&self) -> String {
        let mut label_w = "Mode".len();
        for r in &self.rows {
            label_w = label_w.max(r.label.len());
        }
        let col_ws: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(c, name)| {
                self.rows
                    .iter()
                    .map(|r| format!("{:.2}", r.values[c]).len())
                    .chain([name.len()])
                    .max()
                    .unwrap_or(name.len())
            })
            .collect();

        let mut out = String::new();
        out.push_str(&self.title);
        out.push('\n');
        out.push_str(&format!("{:<label_w$}", "Mode"));
        for (name, w) in self.columns.iter().zip(&col_ws) {
            out.push_str(&format!("  {name:>w$}"));
        }
        out.push('\n');
        let total = label_w + col_ws.iter().map(|w| w + 2).sum::<usize>();
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<label_w$}", r.label));
            for (v, w) in r.values.iter().zip(&col_ws) {
                out.push_str(&format!("  {:>w$.2}", v));
            }
            out.push('\n');
        }
        out
    }

    /// CSV with exact float round-trip; `#`-prefixed lines are comments.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("mode");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.label);
            for v in &r.values {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(title: &str, csv: &str) -> Result<Table> {
        let mut lines = csv
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::eval("empty CSV table"))?;
        let mut cols: Vec<String> = header.split(',').map(str::to_string).collect();
        if cols.first().map(String::as_str) != Some("mode") {
            return Err(Error::eval("CSV table must start with a `mode` column"));
        }
        cols.remove(0);
        let mut table = Table::new(title, cols);
        for line in lines {
            let mut parts = line.split(',');
            let label = parts
                .next()
                .ok_or_else(|| Error::eval("CSV row missing label"))?;
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::eval(format!("bad CSV number `{p}`")))
                })
                .collect::<Result<_>>()?;
            if values.len() != table.columns.len() {
                return Err(Error::eval(format!(
                    "CSV row `{label}` has {} values for {} columns",
                    values.len(),
                    table.columns.len()
                )));
            }
            table.push(label, values);
        }
        Ok(table)
    }
}

/// Format several tables as one text report.
pub fn render_report(tables: &[Table]) -> String {
    tables
        .iter()
        .map(Table::render_text)
        .collect::<Vec<_>>()
        .join("\n")
}
