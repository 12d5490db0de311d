//! Labeled corpora, trial lists, length normalization, text I/O, and the
//! synthetic i-vector generator.
//!
//! The generator draws one mean per speaker, then composes each utterance as
//! `speaker_mean + channel_offset + residual` with an optional nonlinear
//! distortion on top. Channel offsets are drawn fresh per utterance; the
//! channel label only selects which distortion variant is applied, so with
//! `distortion = None` the data follows the two-covariance model exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::textio;

/// A dense real vector: an i-vector or a compensated embedding.
pub type Embedding = Vec<f64>;

/// One labeled utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker_id: String,
    pub utterance_id: String,
    pub embedding: Embedding,
}

/// A speaker-labeled embedding collection with a single shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    dim: usize,
    items: Vec<Utterance>,
}

impl LabeledCorpus {
    /// Build a corpus, validating shared dimension, finiteness, and
    /// utterance-id uniqueness.
    pub fn new(items: Vec<Utterance>) -> Result<Self> {
        let dim = match items.first() {
            Some(u) => u.embedding.len(),
            None => return Err(Error::DegenerateInput("empty corpus".into())),
        };
        if dim == 0 {
            return Err(Error::Dimension("zero-dimensional embeddings".into()));
        }
        let mut seen = BTreeSet::new();
        for u in &items {
            if u.embedding.len() != dim {
                return Err(Error::Format(format!(
                    "utterance {} has dim {}, corpus dim is {dim}",
                    u.utterance_id,
                    u.embedding.len()
                )));
            }
            if u.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite value in utterance {}",
                    u.utterance_id
                )));
            }
            if !seen.insert(u.utterance_id.as_str()) {
                return Err(Error::Format(format!(
                    "duplicate utterance id {}",
                    u.utterance_id
                )));
            }
        }
        Ok(Self { dim, items })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[Utterance] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Speaker id → indices into `items`, in first-appearance order of the
    /// utterances and sorted speaker order (deterministic iteration).
    pub fn speakers(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.items.iter().enumerate() {
            map.entry(u.speaker_id.as_str()).or_default().push(i);
        }
        map
    }

    pub fn n_speakers(&self) -> usize {
        self.items
            .iter()
            .map(|u| u.speaker_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Corpus with every embedding length-normalized.
    pub fn length_normalized(&self) -> Result<Self> {
        self.map_embeddings(length_normalize)
    }

    /// Corpus with `f` applied to every embedding; ids are preserved.
    pub fn map_embeddings(
        &self,
        f: impl Fn(&[f64]) -> Result<Embedding>,
    ) -> Result<Self> {
        let items = self
            .items
            .iter()
            .map(|u| {
                Ok(Utterance {
                    speaker_id: u.speaker_id.clone(),
                    utterance_id: u.utterance_id.clone(),
                    embedding: f(&u.embedding)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }
}

/// Trial label: same speaker or different speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        }
    }
}

/// One (enrollment model, test utterance) pair with its ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub model_id: String,
    pub test_utterance_id: String,
    pub label: TrialLabel,
}

/// An ordered list of trials.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

/// Optional nonlinear distortion applied by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distortion {
    /// No distortion: data follows the two-covariance model exactly.
    None,
    /// Each channel label owns a fixed composite of Givens rotations acting
    /// on a random coordinate subset; the utterance's channel picks which
    /// composite is applied.
    RotationPerChannel,
    /// Elementwise saturation `s * tanh(v / s)` with `s = speaker_std`.
    TanhWarp,
}

impl Distortion {
    pub fn as_str(self) -> &'static str {
        match self {
            Distortion::None => "none",
            Distortion::RotationPerChannel => "rotation_per_channel",
            Distortion::TanhWarp => "tanh_warp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Distortion::None),
            "rotation_per_channel" => Ok(Distortion::RotationPerChannel),
            "tanh_warp" => Ok(Distortion::TanhWarp),
            other => Err(Error::Config(format!("unknown distortion {other:?}"))),
        }
    }
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub speaker_std: f64,
    pub channel_std: f64,
    pub residual_std: f64,
    pub distortion: Distortion,
    /// Scales the rotation angles of `RotationPerChannel`; 1.0 allows up to
    /// a quarter turn per Givens factor. Ignored by the other distortions.
    pub distortion_strength: f64,
    pub n_channels: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        if self.n_speakers < 2 {
            return Err(Error::Config("n_speakers must be at least 2".into()));
        }
        if self.utts_per_speaker < 1 {
            return Err(Error::Config("utts_per_speaker must be at least 1".into()));
        }
        if self.n_channels < 1 {
            return Err(Error::Config("n_channels must be at least 1".into()));
        }
        for (name, v) in [
            ("speaker_std", self.speaker_std),
            ("channel_std", self.channel_std),
            ("residual_std", self.residual_std),
            ("distortion_strength", self.distortion_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.distortion == Distortion::TanhWarp && self.speaker_std <= 0.0 {
            return Err(Error::Config(
                "tanh_warp needs speaker_std > 0 (it sets the saturation scale)".into(),
            ));
        }
        Ok(())
    }
}

/// Scale `x` to unit L2 norm.
pub fn length_normalize(x: &[f64]) -> Result<Embedding> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateInput(
            "cannot length-normalize a zero vector".into(),
        ));
    }
    Ok(x.iter().map(|v| v / norm).collect())
}

/// One plane rotation by a fixed angle in coordinates (i, j).
#[derive(Debug, Clone)]
struct Givens {
    i: usize,
    j: usize,
    cos: f64,
    sin: f64,
}

fn apply_rotations(rotations: &[Givens], v: &mut [f64]) {
    for r in rotations {
        let a = v[r.i];
        let b = v[r.j];
        v[r.i] = r.cos * a - r.sin * b;
        v[r.j] = r.sin * a + r.cos * b;
    }
}

/// Draw one channel's rotation composite: about half the coordinates are
/// selected and mixed pairwise by angles scaled with `strength`.
fn draw_channel_rotations(dim: usize, strength: f64, rng: &mut ChaCha8Rng) -> Vec<Givens> {
    let subset_size = dim.div_ceil(2).max(2).min(dim);
    let mut coords: Vec<usize> = (0..dim).collect();
    coords.shuffle(rng);
    coords.truncate(subset_size);
    let mut rotations = Vec::with_capacity(subset_size);
    for _ in 0..subset_size {
        let i = coords[rng.random_range(0..subset_size)];
        let mut j = coords[rng.random_range(0..subset_size)];
        while j == i {
            j = coords[rng.random_range(0..subset_size)];
        }
        let angle = strength * rng.random_range(-std::f64::consts::FRAC_PI_2
            ..std::f64::consts::FRAC_PI_2);
        rotations.push(Givens { i, j, cos: angle.cos(), sin: angle.sin() });
    }
    rotations
}

fn gaussian_vector(dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        })
        .collect()
}

/// Generate a labeled corpus from the generative model in the module docs.
/// Deterministic for a fixed config (including the seed).
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<LabeledCorpus> {
    cfg.validate()?;

    // Independent sub-streams keep each ingredient's draws stable even if
    // another ingredient's count changes.
    let mut speaker_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    speaker_rng.set_stream(0);
    let mut distortion_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    distortion_rng.set_stream(1);
    let mut utt_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    utt_rng.set_stream(2);

    let speaker_means: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|_| gaussian_vector(cfg.dim, cfg.speaker_std, &mut speaker_rng))
        .collect();

    let channel_rotations: Vec<Vec<Givens>> = match cfg.distortion {
        Distortion::RotationPerChannel => (0..cfg.n_channels)
            .map(|_| draw_channel_rotations(cfg.dim, cfg.distortion_strength, &mut distortion_rng))
            .collect(),
        _ => Vec::new(),
    };

    let id_width = cfg.n_speakers.to_string().len().max(4);
    let utt_width = cfg.utts_per_speaker.to_string().len().max(3);
    let mut items = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for (s, mean) in speaker_means.iter().enumerate() {
        let speaker_id = format!("spk{s:0id_width$}");
        for u in 0..cfg.utts_per_speaker {
            let channel = utt_rng.random_range(0..cfg.n_channels);
            let offset = gaussian_vector(cfg.dim, cfg.channel_std, &mut utt_rng);
            let residual = gaussian_vector(cfg.dim, cfg.residual_std, &mut utt_rng);
            let mut v: Vec<f64> = (0..cfg.dim)
                .map(|k| mean[k] + offset[k] + residual[k])
                .collect();
            match cfg.distortion {
                Distortion::None => {}
                Distortion::RotationPerChannel => {
                    apply_rotations(&channel_rotations[channel], &mut v);
                }
                Distortion::TanhWarp => {
                    let s = cfg.speaker_std;
                    for x in &mut v {
                        *x = s * (*x / s).tanh();
                    }
                }
            }
            items.push(Utterance {
                speaker_id: speaker_id.clone(),
                utterance_id: format!("{speaker_id}-utt{u:0utt_width$}"),
                embedding: v,
            });
        }
    }
    LabeledCorpus::new(items)
}

/// Read a corpus from `speaker_id utterance_id v1 .. vD` lines.
pub fn read_corpus(path: &Path) -> Result<LabeledCorpus> {
    let text = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected speaker_id utterance_id v1 .. vD".into(),
            });
        }
        let embedding = textio::parse_floats(&fields[2..], line_no)?;
        match dim {
            None => dim = Some(embedding.len()),
            Some(d) if d != embedding.len() => {
                return Err(Error::Format(format!(
                    "line {line_no}: vector length {} differs from {d}",
                    embedding.len()
                )));
            }
            Some(_) => {}
        }
        items.push(Utterance {
            speaker_id: fields[0].to_string(),
            utterance_id: fields[1].to_string(),
            embedding,
        });
    }
    LabeledCorpus::new(items)
}

/// Write a corpus in the format read by [`read_corpus`]. Round-trips
/// bit-exactly.
pub fn write_corpus(corpus: &LabeledCorpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for u in corpus.items() {
        out.push_str(&u.speaker_id);
        out.push(' ');
        out.push_str(&u.utterance_id);
        out.push(' ');
        textio::push_floats(&mut out, &u.embedding);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a trial list from `model_id utterance_id target|nontarget` lines.
pub fn read_trials(path: &Path) -> Result<TrialList> {
    let text = std::fs::read_to_string(path)?;
    let mut trials = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected model_id utterance_id target|nontarget".into(),
            });
        }
        let label = match fields[2] {
            "target" => TrialLabel::Target,
            "nontarget" => TrialLabel::Nontarget,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown label {other:?}"),
                })
            }
        };
        trials.push(Trial {
            model_id: fields[0].to_string(),
            test_utterance_id: fields[1].to_string(),
            label,
        });
    }
    Ok(TrialList { trials })
}

/// Write a trial list in the format read by [`read_trials`].
pub fn write_trials(trials: &TrialList, path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in &trials.trials {
        out.push_str(&t.model_id);
        out.push(' ');
        out.push_str(&t.test_utterance_id);
        out.push(' ');
        out.push_str(t.label.as_str());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
