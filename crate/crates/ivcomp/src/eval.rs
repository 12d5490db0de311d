//! Trial scoring and equal-error-rate evaluation.
//!
//! Enrollment models are per-speaker means with an utterance count. Trials
//! are scored by cosine similarity, negative Euclidean distance, or the PLDA
//! log-likelihood ratio. The EER sweep walks every distinct score threshold
//! plus a virtual top point and interpolates the FAR/FRR crossing linearly,
//! so it hits exactly the operating points a midpoint-threshold scan sees.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::dataset::{Embedding, LabeledCorpus, TrialLabel, TrialList};
use crate::error::{Error, Result};
use crate::plda::{plda_score, PldaModel};
use crate::textio;

/// Per-speaker enrollment: the mean embedding and how many utterances built it.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrollModel {
    pub mean: Embedding,
    pub n_utterances: usize,
}

/// How to score a (model, test) pair.
#[derive(Debug, Clone, Copy)]
pub enum ScoreMethod<'a> {
    /// Cosine similarity between enrollment mean and test embedding.
    Cosine,
    /// Negative Euclidean distance; embeddings are compared as they are,
    /// without re-normalization.
    Euclidean,
    /// PLDA log-likelihood ratio with the enrollment utterance count.
    Plda(&'a PldaModel),
}

/// One scored trial, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub model_id: String,
    pub test_utterance_id: String,
    pub score: f64,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredTrials {
    pub trials: Vec<ScoredTrial>,
}

/// Equal error rate and the operating point it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eer_percent: f64,
    pub eer_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "eer_percent {}", self.eer_percent)?;
        writeln!(f, "eer_threshold {}", self.eer_threshold)?;
        writeln!(f, "n_target {}", self.n_target)?;
        write!(f, "n_nontarget {}", self.n_nontarget)
    }
}

/// Average each speaker's utterances into an enrollment model.
pub fn enroll(corpus: &LabeledCorpus) -> BTreeMap<String, EnrollModel> {
    let d = corpus.dim();
    let mut out = BTreeMap::new();
    for (speaker, idxs) in corpus.speakers() {
        let mut mean = vec![0.0; d];
        for &i in &idxs {
            for (m, v) in mean.iter_mut().zip(&corpus.items()[i].embedding) {
                *m += v;
            }
        }
        let n = idxs.len();
        for m in &mut mean {
            *m /= n as f64;
        }
        out.insert(speaker.to_string(), EnrollModel { mean, n_utterances: n });
    }
    out
}

/// Index a corpus by utterance id for trial lookup.
pub fn test_map(corpus: &LabeledCorpus) -> BTreeMap<String, Embedding> {
    corpus
        .items()
        .iter()
        .map(|u| (u.utterance_id.clone(), u.embedding.clone()))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score one (enrollment, test) pair under the chosen method.
pub fn score_pair(method: ScoreMethod, model: &EnrollModel, test: &[f64]) -> Result<f64> {
    if model.mean.len() != test.len() {
        return Err(Error::Dimension(format!(
            "enrollment dim {} vs test dim {}",
            model.mean.len(),
            test.len()
        )));
    }
    match method {
        ScoreMethod::Cosine => {
            let na = dot(&model.mean, &model.mean).sqrt();
            let nb = dot(test, test).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::DegenerateInput(
                    "cosine scoring of a zero-norm embedding".into(),
                ));
            }
            Ok(dot(&model.mean, test) / (na * nb))
        }
        ScoreMethod::Euclidean => {
            let dist2: f64 = model
                .mean
                .iter()
                .zip(test)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            Ok(-dist2.sqrt())
        }
        ScoreMethod::Plda(plda) => plda_score(plda, &model.mean, model.n_utterances, test),
    }
}

fn score_chunk(
    chunk: &[crate::dataset::Trial],
    enrollments: &BTreeMap<String, EnrollModel>,
    tests: &BTreeMap<String, Embedding>,
    method: ScoreMethod,
) -> Result<Vec<ScoredTrial>> {
    let mut out = Vec::with_capacity(chunk.len());
    for trial in chunk {
        let model = enrollments.get(&trial.model_id).ok_or_else(|| {
            Error::Lookup(format!("no enrollment for model id {:?}", trial.model_id))
        })?;
        let test = tests.get(&trial.test_utterance_id).ok_or_else(|| {
            Error::Lookup(format!(
                "no test embedding for utterance id {:?}",
                trial.test_utterance_id
            ))
        })?;
        let score = score_pair(method, model, test)?;
        out.push(ScoredTrial {
            model_id: trial.model_id.clone(),
            test_utterance_id: trial.test_utterance_id.clone(),
            score,
            label: trial.label,
        });
    }
    Ok(out)
}

/// Score every trial, preserving input order. With `jobs > 1` the list is
/// split across threads and merged back in order, so the output is identical
/// to the sequential run.
pub fn score_trials(
    trials: &TrialList,
    enrollments: &BTreeMap<String, EnrollModel>,
    tests: &BTreeMap<String, Embedding>,
    method: ScoreMethod,
    jobs: usize,
) -> Result<ScoredTrials> {
    if jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    if jobs == 1 || trials.trials.len() < 2 * jobs {
        return Ok(ScoredTrials {
            trials: score_chunk(&trials.trials, enrollments, tests, method)?,
        });
    }
    let chunk_size = trials.trials.len().div_ceil(jobs);
    let results: Vec<Result<Vec<ScoredTrial>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = trials
            .trials
            .chunks(chunk_size)
            .map(|chunk| scope.spawn(move || score_chunk(chunk, enrollments, tests, method)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(trials.trials.len());
    for r in results {
        out.extend(r?);
    }
    Ok(ScoredTrials { trials: out })
}

/// Equal error rate by threshold sweep.
///
/// FAR(t) is the fraction of nontarget scores ≥ t and FRR(t) the fraction of
/// target scores < t. Both are evaluated at every distinct score ascending,
/// plus a virtual point above the maximum where (FAR, FRR) = (0, 1). FAR−FRR
/// starts at +1 and ends at −1; the EER is read off the first sign change by
/// linear interpolation between the bracketing operating points.
pub fn compute_eer(scored: &ScoredTrials) -> Result<EvalReport> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in &scored.trials {
        if !t.score.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite score for trial ({}, {})",
                t.model_id, t.test_utterance_id
            )));
        }
        match t.label {
            TrialLabel::Target => targets.push(t.score),
            TrialLabel::Nontarget => nontargets.push(t.score),
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::DegenerateInput(
            "EER needs at least one target and one nontarget trial".into(),
        ));
    }
    let n_target = targets.len();
    let n_nontarget = nontargets.len();
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nontargets.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut thresholds: Vec<f64> = targets.iter().chain(&nontargets).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let far_frr = |t: f64| -> (f64, f64) {
        let below_nt = nontargets.partition_point(|&s| s < t);
        let far = (n_nontarget - below_nt) as f64 / n_nontarget as f64;
        let frr = targets.partition_point(|&s| s < t) as f64 / n_target as f64;
        (far, frr)
    };
    let mut points: Vec<(f64, f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (far, frr) = far_frr(t);
            (t, far, frr)
        })
        .collect();
    let top = thresholds.last().unwrap() + 1.0;
    points.push((top, 0.0, 1.0));

    for k in 0..points.len() - 1 {
        let (t0, far0, frr0) = points[k];
        let (t1, far1, frr1) = points[k + 1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d1 < 0.0 {
            let s = d0 / (d0 - d1);
            let eer = far0 + s * (far1 - far0);
            return Ok(EvalReport {
                eer_percent: 100.0 * eer,
                eer_threshold: t0 + s * (t1 - t0),
                n_target,
                n_nontarget,
            });
        }
    }
    // Unreachable: the virtual point always has FAR − FRR = −1.
    Err(Error::Numerical("EER sweep found no FAR/FRR crossing".into()))
}

/// Mean within-class and between-class pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceStats {
    pub mean_within: f64,
    pub mean_between: f64,
    pub n_within: usize,
    pub n_between: usize,
}

impl DistanceStats {
    /// Within-to-between distance ratio; small is good for discrimination.
    pub fn ratio(&self) -> f64 {
        self.mean_within / self.mean_between
    }
}

/// Pairwise distance statistics over every pair of utterances in a corpus.
pub fn distance_stats(corpus: &LabeledCorpus) -> Result<DistanceStats> {
    let items = corpus.items();
    let mut class = vec![0usize; items.len()];
    for (c, (_, idxs)) in corpus.speakers().iter().enumerate() {
        for &i in idxs {
            class[i] = c;
        }
    }
    let mut within = (0.0, 0usize);
    let mut between = (0.0, 0usize);
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            let dist: f64 = items[i]
                .embedding
                .iter()
                .zip(&items[j].embedding)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if class[i] == class[j] {
                within.0 += dist;
                within.1 += 1;
            } else {
                between.0 += dist;
                between.1 += 1;
            }
        }
    }
    if within.1 == 0 {
        return Err(Error::DegenerateInput(
            "no within-class pairs: every speaker has a single utterance".into(),
        ));
    }
    if between.1 == 0 {
        return Err(Error::DegenerateInput(
            "no between-class pairs: corpus has a single speaker".into(),
        ));
    }
    Ok(DistanceStats {
        mean_within: within.0 / within.1 as f64,
        mean_between: between.0 / between.1 as f64,
        n_within: within.1,
        n_between: between.1,
    })
}

/// Write scored trials as `model_id utterance_id score label` lines.
pub fn write_scores(scored: &ScoredTrials, path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in &scored.trials {
        out.push_str(&t.model_id);
        out.push(' ');
        out.push_str(&t.test_utterance_id);
        out.push(' ');
        textio::push_floats(&mut out, &[t.score]);
        out.push(' ');
        out.push_str(t.label.as_str());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write an evaluation report as `key value` lines.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, format!("{report}\n"))?;
    Ok(())
}
