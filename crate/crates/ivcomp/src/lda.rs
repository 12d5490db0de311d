//! Linear Discriminant Analysis: scatter statistics, projection fitting via
//! whitening + symmetric eigendecomposition, and the embedding transform.
//!
//! The generalized eigenproblem for (between-scatter, within-scatter) is
//! never solved with an explicit inverse: the within-scatter (plus ridge) is
//! Cholesky-factored, the between-scatter is whitened with triangular
//! solves, and an ordinary symmetric eigendecomposition finishes the job.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dataset::{Embedding, LabeledCorpus};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::textio;

/// Ridge default: `1e-6 * trace(s_w) / dim` when the caller does not pick one.
const DEFAULT_RIDGE_SCALE: f64 = 1e-6;

/// First line of a serialized LDA model file.
pub const MODEL_TAG: &str = "lda";

/// Between/within scatter matrices with the per-class bookkeeping behind
/// them. Both matrices use the 1/N convention: between-class terms are
/// weighted by class counts, within-class terms are summed over all items.
#[derive(Debug, Clone)]
pub struct ScatterStats {
    pub s_b: Matrix,
    pub s_w: Matrix,
    pub global_mean: Embedding,
    pub class_means: BTreeMap<String, Embedding>,
    pub class_counts: BTreeMap<String, usize>,
    pub total: usize,
}

/// A fitted LDA projection. `projection` has one row per input dimension
/// and one column per output dimension; columns are sorted by decreasing
/// discriminability (`eigenvalues`).
#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub projection: Matrix,
    pub global_mean: Embedding,
    pub eigenvalues: Vec<f64>,
    pub ridge: f64,
}

impl LdaModel {
    pub fn input_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.cols()
    }
}

/// Accumulate between-class and within-class scatter over a corpus.
pub fn scatter_stats(corpus: &LabeledCorpus) -> Result<ScatterStats> {
    if corpus.is_empty() {
        return Err(Error::DegenerateInput("scatter_stats on empty corpus".into()));
    }
    let d = corpus.dim();
    let n = corpus.len() as f64;

    let mut global_mean = vec![0.0; d];
    for u in corpus.items() {
        for (g, v) in global_mean.iter_mut().zip(&u.embedding) {
            *g += v / n;
        }
    }

    let speakers = corpus.speakers();
    let mut class_means = BTreeMap::new();
    let mut class_counts = BTreeMap::new();
    let mut s_b = Matrix::zeros(d, d);
    let mut s_w = Matrix::zeros(d, d);
    for (speaker, idxs) in &speakers {
        let ns = idxs.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in idxs {
            for (m, v) in mean.iter_mut().zip(&corpus.items()[i].embedding) {
                *m += v / ns;
            }
        }
        for &i in idxs {
            let diff: Vec<f64> = corpus.items()[i]
                .embedding
                .iter()
                .zip(&mean)
                .map(|(v, m)| v - m)
                .collect();
            s_w.add_outer(1.0 / n, &diff, &diff);
        }
        let dev: Vec<f64> = mean.iter().zip(&global_mean).map(|(m, g)| m - g).collect();
        s_b.add_outer(ns / n, &dev, &dev);
        class_means.insert(speaker.to_string(), mean);
        class_counts.insert(speaker.to_string(), idxs.len());
    }

    Ok(ScatterStats {
        s_b,
        s_w,
        global_mean,
        class_means,
        class_counts,
        total: corpus.len(),
    })
}

/// Fit an LDA projection by solving the generalized eigenproblem for
/// (s_b, s_w + ridge·I). `ridge = None` picks the default
/// `1e-6 · trace(s_w) / dim`.
pub fn fit_lda(corpus: &LabeledCorpus, out_dim: usize, ridge: Option<f64>) -> Result<LdaModel> {
    let d = corpus.dim();
    if out_dim == 0 || out_dim > d {
        return Err(Error::Dimension(format!(
            "out_dim {out_dim} must be in 1..={d}"
        )));
    }
    if corpus.n_speakers() < 2 {
        return Err(Error::DegenerateInput("LDA needs at least 2 speakers".into()));
    }
    let stats = scatter_stats(corpus)?;
    let ridge = match ridge {
        Some(r) if r.is_finite() && r >= 0.0 => r,
        Some(r) => return Err(Error::Config(format!("ridge must be >= 0, got {r}"))),
        None => DEFAULT_RIDGE_SCALE * stats.s_w.trace() / d as f64,
    };

    let mut s_w_reg = stats.s_w.clone();
    for i in 0..d {
        s_w_reg.set(i, i, s_w_reg.get(i, i) + ridge);
    }
    let l = linalg::cholesky(&s_w_reg).map_err(|e| match e {
        Error::NotPositiveDefinite(msg) => Error::NotPositiveDefinite(format!(
            "within-class scatter is singular even with ridge {ridge:.3e} ({msg}); \
             increase the ridge"
        )),
        other => other,
    })?;

    // Whiten: M = L⁻¹ s_b L⁻ᵀ, symmetric by construction; symmetrize to
    // scrub the last bits of roundoff before the eigensolve.
    let c = linalg::solve_lower(&l, &stats.s_b)?;
    let m_raw = linalg::solve_lower(&l, &c.transpose())?.transpose();
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m.set(i, j, 0.5 * (m_raw.get(i, j) + m_raw.get(j, i)));
        }
    }
    let eig = linalg::sym_eig(&m)?;

    let mut v_top = Matrix::zeros(d, out_dim);
    for j in 0..out_dim {
        for i in 0..d {
            v_top.set(i, j, eig.eigenvectors.get(i, j));
        }
    }
    // Un-whiten: W = L⁻ᵀ V, so Wᵀ (s_w + ridge·I) W = I.
    let mut w = linalg::solve_lower_transpose(&l, &v_top)?;
    for j in 0..out_dim {
        let lead = (0..d).map(|i| w.get(i, j)).find(|x| x.abs() > 1e-12);
        if let Some(lead) = lead {
            if lead < 0.0 {
                for i in 0..d {
                    w.set(i, j, -w.get(i, j));
                }
            }
        }
    }

    Ok(LdaModel {
        projection: w,
        global_mean: stats.global_mean,
        eigenvalues: eig.eigenvalues[..out_dim].to_vec(),
        ridge,
    })
}

/// Project a centered embedding: `y = Wᵀ(x − global_mean)`.
pub fn lda_transform(model: &LdaModel, x: &[f64]) -> Result<Embedding> {
    if x.len() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "input dim {} does not match model dim {}",
            x.len(),
            model.input_dim()
        )));
    }
    let centered: Vec<f64> = x
        .iter()
        .zip(&model.global_mean)
        .map(|(v, m)| v - m)
        .collect();
    let mut y = vec![0.0; model.output_dim()];
    for (i, &ci) in centered.iter().enumerate() {
        if ci == 0.0 {
            continue;
        }
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += model.projection.get(i, j) * ci;
        }
    }
    Ok(y)
}

/// Serialize a model: tag line, shape header, mean, eigenvalues, projection
/// rows. Round-trips bit-exactly.
pub fn write_model(model: &LdaModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(MODEL_TAG);
    out.push('\n');
    out.push_str(&format!(
        "{} {} {}\n",
        model.input_dim(),
        model.output_dim(),
        model.ridge
    ));
    textio::push_floats(&mut out, &model.global_mean);
    out.push('\n');
    textio::push_floats(&mut out, &model.eigenvalues);
    out.push('\n');
    for i in 0..model.input_dim() {
        textio::push_floats(&mut out, model.projection.row(i));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<LdaModel> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, tag) = lines
        .next()
        .ok_or_else(|| Error::Format("empty model file".into()))?;
    if tag.trim() != MODEL_TAG {
        return Err(Error::Format(format!(
            "expected {MODEL_TAG:?} model file, found {:?}",
            tag.trim()
        )));
    }
    let (idx, header) = lines
        .next()
        .ok_or_else(|| Error::Format("missing model header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            line: idx + 1,
            msg: "expected `input_dim output_dim ridge`".into(),
        });
    }
    let input_dim = textio::parse_usize(fields[0], idx + 1, "input_dim")?;
    let output_dim = textio::parse_usize(fields[1], idx + 1, "output_dim")?;
    let ridge = textio::parse_float(fields[2], idx + 1, "ridge")?;

    let mut read_row = |expected: usize, what: &str| -> Result<Vec<f64>> {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::Format(format!("missing {what} line")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let row = textio::parse_floats(&fields, idx + 1)?;
        if row.len() != expected {
            return Err(Error::Format(format!(
                "{what} has {} values, expected {expected}",
                row.len()
            )));
        }
        Ok(row)
    };

    let global_mean = read_row(input_dim, "mean")?;
    let eigenvalues = read_row(output_dim, "eigenvalues")?;
    let mut projection = Matrix::zeros(input_dim, output_dim);
    for i in 0..input_dim {
        let row = read_row(output_dim, "projection row")?;
        for (j, v) in row.iter().enumerate() {
            projection.set(i, j, *v);
        }
    }
    Ok(LdaModel { projection, global_mean, eigenvalues, ridge })
}
