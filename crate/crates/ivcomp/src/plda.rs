//! Two-covariance PLDA: EM training of between-speaker and within-speaker
//! covariances, simultaneous diagonalization, and log-likelihood-ratio
//! scoring with count-aware multi-utterance enrollment.
//!
//! The generative model: each speaker owns a latent offset `v ~ N(0, B)`,
//! and utterances are `x = mean + v + e` with `e ~ N(0, W)`. EM runs on
//! per-speaker sufficient statistics; the fitted pair (B, W) is then jointly
//! diagonalized so scoring decomposes per dimension.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dataset::{Embedding, LabeledCorpus};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::textio;

/// First line of a serialized PLDA model file.
pub const MODEL_TAG: &str = "plda";

/// A fitted PLDA model in diagonalized form: `diagonalizer` maps centered
/// embeddings into a space where the within-speaker covariance is the
/// identity and the between-speaker covariance is `diag(psi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mean: Embedding,
    pub diagonalizer: Matrix,
    pub psi: Vec<f64>,
    pub dim: usize,
}

/// Marginal log-likelihood of the training corpus per EM iteration; entry 0
/// is the likelihood under the initial parameters, so a fit with `iters`
/// iterations yields `iters + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    pub log_likelihoods: Vec<f64>,
}

/// Per-speaker sufficient statistics plus corpus-level moments.
struct SuffStats {
    dim: usize,
    n_total: f64,
    n_speakers: f64,
    mean: Vec<f64>,
    /// Σ over all utterances of (x − mean)(x − mean)ᵀ.
    total_moment: Matrix,
    /// (count, centered utterance mean) per speaker, in sorted speaker order.
    speakers: Vec<(usize, Vec<f64>)>,
}

fn collect_stats(corpus: &LabeledCorpus) -> Result<SuffStats> {
    if corpus.is_empty() {
        return Err(Error::DegenerateInput("PLDA fit on empty corpus".into()));
    }
    let by_speaker = corpus.speakers();
    if by_speaker.len() < 2 {
        return Err(Error::DegenerateInput("PLDA needs at least 2 speakers".into()));
    }
    if by_speaker.values().all(|idxs| idxs.len() == 1) {
        return Err(Error::Identifiability(
            "every speaker has a single utterance; within-speaker covariance \
             is unidentifiable"
                .into(),
        ));
    }
    let d = corpus.dim();
    let n = corpus.len() as f64;
    let mut mean = vec![0.0; d];
    for u in corpus.items() {
        for (m, v) in mean.iter_mut().zip(&u.embedding) {
            *m += v / n;
        }
    }
    let mut total_moment = Matrix::zeros(d, d);
    for u in corpus.items() {
        let diff: Vec<f64> = u.embedding.iter().zip(&mean).map(|(v, m)| v - m).collect();
        total_moment.add_outer(1.0, &diff, &diff);
    }
    let speakers = by_speaker
        .values()
        .map(|idxs| {
            let ns = idxs.len() as f64;
            let mut xbar = vec![0.0; d];
            for &i in idxs {
                for (x, v) in xbar.iter_mut().zip(&corpus.items()[i].embedding) {
                    *x += v / ns;
                }
            }
            let centered = xbar.iter().zip(&mean).map(|(x, m)| x - m).collect();
            (idxs.len(), centered)
        })
        .collect();
    Ok(SuffStats {
        dim: d,
        n_total: n,
        n_speakers: by_speaker.len() as f64,
        mean,
        total_moment,
        speakers,
    })
}

fn symmetrize(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, 0.5 * (a.get(i, j) + a.get(j, i)));
        }
    }
    out
}

fn inverse_spd(a: &Matrix, what: &str) -> Result<Matrix> {
    linalg::spd_solve(a, &Matrix::identity(a.rows())).map_err(|_| {
        Error::Numerical(format!("{what} covariance collapsed (not positive definite)"))
    })
}

fn log_det_from_cholesky(l: &Matrix) -> f64 {
    2.0 * (0..l.rows()).map(|i| l.get(i, i).ln()).sum::<f64>()
}

/// Marginal log-likelihood of the corpus under (between, within), with the
/// per-speaker latent integrated out analytically.
fn marginal_ll(stats: &SuffStats, between: &Matrix, within: &Matrix) -> Result<f64> {
    let d = stats.dim as f64;
    let chol_w = linalg::cholesky(within)
        .map_err(|_| Error::Numerical("within covariance collapsed".into()))?;
    let chol_b = linalg::cholesky(between)
        .map_err(|_| Error::Numerical("between covariance collapsed".into()))?;
    let w_inv = inverse_spd(within, "within")?;
    let b_inv = inverse_spd(between, "between")?;
    let log_det_w = log_det_from_cholesky(&chol_w);
    let log_det_b = log_det_from_cholesky(&chol_b);

    let ln_2pi = std::f64::consts::TAU.ln();
    let mut ll = -0.5 * stats.n_total * d * ln_2pi;
    ll -= 0.5 * stats.n_total * log_det_w;
    ll -= 0.5 * stats.n_speakers * log_det_b;
    ll -= 0.5 * w_inv.matmul(&stats.total_moment)?.trace();

    // Cache the posterior precision factorization per enrollment count.
    let mut by_count: BTreeMap<usize, (Matrix, f64)> = BTreeMap::new();
    for (n_s, xbar) in &stats.speakers {
        let (chol_lambda, log_det_lambda) = match by_count.get(n_s) {
            Some(entry) => entry.clone(),
            None => {
                let lambda = symmetrize(&b_inv.add(&w_inv.scale(*n_s as f64))?);
                let chol = linalg::cholesky(&lambda)
                    .map_err(|_| Error::Numerical("posterior precision collapsed".into()))?;
                let log_det = log_det_from_cholesky(&chol);
                by_count.insert(*n_s, (chol.clone(), log_det));
                (chol, log_det)
            }
        };
        let b_vec: Vec<f64> = w_inv.matvec(xbar)?.iter().map(|v| v * *n_s as f64).collect();
        // bᵀ Λ⁻¹ b = ‖L⁻¹ b‖² with Λ = L Lᵀ.
        let rhs = Matrix::new(b_vec.len(), 1, b_vec)?;
        let half = linalg::solve_lower(&chol_lambda, &rhs)?;
        let quad: f64 = half.column(0).iter().map(|v| v * v).sum();
        ll += -0.5 * log_det_lambda + 0.5 * quad;
    }
    Ok(ll)
}

/// One EM iteration: returns the updated (between, within) pair.
fn em_step(stats: &SuffStats, between: &Matrix, within: &Matrix) -> Result<(Matrix, Matrix)> {
    let d = stats.dim;
    let w_inv = inverse_spd(within, "within")?;
    let b_inv = inverse_spd(between, "between")?;

    let mut posterior_by_count: BTreeMap<usize, Matrix> = BTreeMap::new();
    let mut b_acc = Matrix::zeros(d, d);
    let mut w_acc = stats.total_moment.clone();
    for (n_s, xbar) in &stats.speakers {
        let n = *n_s as f64;
        let sigma = match posterior_by_count.get(n_s) {
            Some(m) => m.clone(),
            None => {
                let lambda = symmetrize(&b_inv.add(&w_inv.scale(n))?);
                let sigma = linalg::spd_solve(&lambda, &Matrix::identity(d))
                    .map_err(|_| Error::Numerical("posterior precision collapsed".into()))?;
                let sigma = symmetrize(&sigma);
                posterior_by_count.insert(*n_s, sigma.clone());
                sigma
            }
        };
        let m_s = sigma.matvec(&w_inv.matvec(xbar)?.iter().map(|v| v * n).collect::<Vec<_>>())?;

        b_acc = b_acc.add(&sigma)?;
        b_acc.add_outer(1.0, &m_s, &m_s);

        w_acc.add_outer(-n, xbar, &m_s);
        w_acc.add_outer(-n, &m_s, xbar);
        w_acc.add_outer(n, &m_s, &m_s);
        w_acc = w_acc.add(&sigma.scale(n))?;
    }
    let new_between = symmetrize(&b_acc.scale(1.0 / stats.n_speakers));
    let new_within = symmetrize(&w_acc.scale(1.0 / stats.n_total));
    Ok((new_between, new_within))
}

/// Fit a two-covariance PLDA model with `iters` EM iterations.
///
/// The corpus mean is held fixed at the sample mean; initialization splits
/// the total covariance evenly between the two components. The returned
/// trace holds the marginal log-likelihood before training and after each
/// iteration.
pub fn fit_plda(corpus: &LabeledCorpus, iters: usize) -> Result<(PldaModel, EmTrace)> {
    let stats = collect_stats(corpus)?;
    let d = stats.dim;
    let total_cov = stats.total_moment.scale(1.0 / stats.n_total);
    let mut between = total_cov.scale(0.5);
    let mut within = total_cov.scale(0.5);

    let mut log_likelihoods = Vec::with_capacity(iters + 1);
    log_likelihoods.push(marginal_ll(&stats, &between, &within)?);
    for _ in 0..iters {
        let (b, w) = em_step(&stats, &between, &within)?;
        between = b;
        within = w;
        log_likelihoods.push(marginal_ll(&stats, &between, &within)?);
    }

    // Simultaneous diagonalization: with L the Cholesky factor of the
    // within covariance and (psi, V) the eigensystem of L⁻¹ B L⁻ᵀ, the map
    // D = Vᵀ L⁻¹ sends W to I and B to diag(psi).
    let chol_w = linalg::cholesky(&within)
        .map_err(|_| Error::Numerical("within covariance collapsed".into()))?;
    let c = linalg::solve_lower(&chol_w, &between)?;
    let m = symmetrize(&linalg::solve_lower(&chol_w, &c.transpose())?.transpose());
    let eig = linalg::sym_eig(&m)?;
    let diagonalizer = linalg::solve_lower_transpose(&chol_w, &eig.eigenvectors)?.transpose();
    let psi: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();

    Ok((
        PldaModel { mean: stats.mean, diagonalizer, psi, dim: d },
        EmTrace { log_likelihoods },
    ))
}

/// Log-likelihood ratio for a trial: same-speaker vs different-speaker
/// hypotheses for a test embedding against an enrollment represented by the
/// mean of `n_enroll` utterances.
pub fn plda_score(
    model: &PldaModel,
    enroll_mean: &[f64],
    n_enroll: usize,
    test: &[f64],
) -> Result<f64> {
    if enroll_mean.len() != model.dim || test.len() != model.dim {
        return Err(Error::Dimension(format!(
            "model dim {} vs enroll {} / test {}",
            model.dim,
            enroll_mean.len(),
            test.len()
        )));
    }
    if n_enroll == 0 {
        return Err(Error::DegenerateInput("enrollment needs n_enroll >= 1".into()));
    }
    let center = |x: &[f64]| -> Result<Vec<f64>> {
        let c: Vec<f64> = x.iter().zip(&model.mean).map(|(v, m)| v - m).collect();
        model.diagonalizer.matvec(&c)
    };
    let u = center(enroll_mean)?;
    let t = center(test)?;
    let n = n_enroll as f64;

    let log_normal = |x: f64, mean: f64, var: f64| -> f64 {
        -0.5 * ((std::f64::consts::TAU * var).ln() + (x - mean).powi(2) / var)
    };
    let mut llr = 0.0;
    for ((ui, ti), psi) in u.iter().zip(&t).zip(&model.psi) {
        let shrink = n * psi / (n * psi + 1.0);
        let same_mean = shrink * ui;
        let same_var = 1.0 + psi / (n * psi + 1.0);
        llr += log_normal(*ti, same_mean, same_var) - log_normal(*ti, 0.0, 1.0 + psi);
    }
    Ok(llr)
}

/// Serialize a model: tag, dim, mean, psi, diagonalizer rows. Round-trips
/// bit-exactly.
pub fn write_model(model: &PldaModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(MODEL_TAG);
    out.push('\n');
    out.push_str(&format!("{}\n", model.dim));
    textio::push_floats(&mut out, &model.mean);
    out.push('\n');
    textio::push_floats(&mut out, &model.psi);
    out.push('\n');
    for i in 0..model.dim {
        textio::push_floats(&mut out, model.diagonalizer.row(i));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<PldaModel> {
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
    let (idx, dim_line) = lines
        .next()
        .ok_or_else(|| Error::Format("missing model header".into()))?;
    let dim = textio::parse_usize(dim_line.trim(), idx + 1, "dim")?;

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
    let mean = read_row(dim, "mean")?;
    let psi = read_row(dim, "psi")?;
    let mut diagonalizer = Matrix::zeros(dim, dim);
    for i in 0..dim {
        let row = read_row(dim, "diagonalizer row")?;
        for (j, v) in row.iter().enumerate() {
            diagonalizer.set(i, j, *v);
        }
    }
    Ok(PldaModel { mean, diagonalizer, psi, dim })
}
