//! Conversation grading and score-based filtering.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{DefaultTokenizer, Tokenizer};
use crate::corpus::{Dataset, Record};
use crate::filters::{quality_filter, QualityConfig};
use crate::prompts::{format_conversation, PromptError, PromptScheme};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("scorer_unavailable: {0}")]
    Unavailable(String),
    #[error("scorer_protocol: {0}")]
    Protocol(String),
    #[error("unscored_record: {0}")]
    UnscoredRecord(String),
    #[error("invalid_config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl ScoreError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Unavailable(_) => "scorer_unavailable",
            Self::Protocol(_) => "scorer_protocol",
            Self::UnscoredRecord(_) => "unscored_record",
            Self::InvalidConfig(_) => "invalid_config",
            Self::Prompt(e) => e.code(),
        }
    }
}

pub trait Scorer: Send + Sync {
    /// A quality value in [0, 1].
    fn score(&self, record: &Record) -> Result<f64, ScoreError>;
}

pub fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

// ---------------------------------------------------------------------------
// Heuristic scorer

pub const LENGTH_WEIGHT: f64 = 0.4;
pub const DIVERSITY_WEIGHT: f64 = 0.3;
pub const STRUCTURE_WEIGHT: f64 = 0.3;
/// Response length, in tokens, at which the length component is one half.
pub const LENGTH_MIDPOINT: f64 = 20.0;
/// Token counts above this are treated as this.
pub const LENGTH_SATURATION: usize = 200;
pub const LENGTH_STEEPNESS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicComponents {
    pub length: f64,
    pub diversity: f64,
    pub structure: f64,
}

impl HeuristicComponents {
    pub fn combined(&self) -> f64 {
        (LENGTH_WEIGHT * self.length
            + DIVERSITY_WEIGHT * self.diversity
            + STRUCTURE_WEIGHT * self.structure)
            .clamp(0.0, 1.0)
    }
}

pub fn heuristic_components(response: &str) -> HeuristicComponents {
    let tokens: Vec<String> = DefaultTokenizer
        .split(response)
        .into_iter()
        .map(|s| response[s].to_lowercase())
        .collect();
    let n = tokens.len();
    let length = logistic(LENGTH_STEEPNESS * (n.min(LENGTH_SATURATION) as f64 - LENGTH_MIDPOINT));
    let diversity = if n == 0 {
        0.0
    } else {
        let distinct: HashSet<&str> = tokens.iter().map(String::as_str).collect();
        distinct.len() as f64 / n as f64
    };
    let structure = if n > 0 && quality_filter(response, &QualityConfig::default()).keep {
        1.0
    } else {
        0.0
    };
    HeuristicComponents {
        length,
        diversity,
        structure,
    }
}

/// Built-in deterministic score of a record's response text.
pub fn heuristic_score(record: &Record) -> f64 {
    heuristic_components(&record.payload.response_text()).combined()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicScorer;

impl Scorer for HeuristicScorer {
    fn score(&self, record: &Record) -> Result<f64, ScoreError> {
        Ok(heuristic_score(record))
    }
}

// ---------------------------------------------------------------------------
// Remote reward-model scorer

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    score: f64,
    calibrated: bool,
}

/// HTTP client for an external reward model. POSTs `{"text": ...}` and expects
/// `{"score": <number>, "calibrated": <bool>}` with status 200. Raw
/// (uncalibrated) scores go through the logistic before clamping.
pub struct RemoteScorer {
    endpoint: String,
    scheme: PromptScheme,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, scheme: PromptScheme) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            scheme,
            agent,
        }
    }

    pub fn score_text(&self, text: &str) -> Result<f64, ScoreError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(ScoreRequest { text })
            .map_err(classify)?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(ScoreError::Protocol(format!("status {status}")));
        }
        let body: ScoreResponse = resp.body_mut().read_json().map_err(classify)?;
        if !body.score.is_finite() {
            return Err(ScoreError::Protocol("non-finite score".into()));
        }
        let v = if body.calibrated {
            body.score
        } else {
            logistic(body.score)
        };
        Ok(v.clamp(0.0, 1.0))
    }
}

fn classify(e: ureq::Error) -> ScoreError {
    use ureq::Error as E;
    match e {
        E::Json(_) | E::Protocol(_) | E::StatusCode(_) | E::BodyExceedsLimit(_) | E::Http(_) => {
            ScoreError::Protocol(e.to_string())
        }
        E::Io(ref io) if io.kind() == std::io::ErrorKind::InvalidData => {
            ScoreError::Protocol(e.to_string())
        }
        other => ScoreError::Unavailable(other.to_string()),
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, record: &Record) -> Result<f64, ScoreError> {
        let text = format_conversation(&record.payload.as_path(), &self.scheme)?;
        self.score_text(&text)
    }
}

// ---------------------------------------------------------------------------
// Grading

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnScorerError {
    #[default]
    Abort,
    KeepUnscored,
    Drop,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradeOutcome {
    pub dataset: Dataset,
    /// Ids whose scoring failed and were kept without a score.
    pub unscored: Vec<String>,
    /// Ids whose scoring failed and were removed, with the error code.
    pub dropped: Vec<(String, &'static str)>,
}

/// Score every record, overwriting existing scores. Up to `max_in_flight`
/// records are scored concurrently; output order always follows input order.
pub fn grade_dataset(
    d: &Dataset,
    scorer: &dyn Scorer,
    on_error: OnScorerError,
    max_in_flight: usize,
) -> Result<GradeOutcome, ScoreError> {
    let results: Vec<Result<f64, ScoreError>> = if max_in_flight <= 1 {
        d.records.iter().map(|r| scorer.score(r)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(max_in_flight)
            .build()
            .map_err(|_| ScoreError::InvalidConfig("cannot start scoring workers"))?;
        pool.install(|| d.records.par_iter().map(|r| scorer.score(r)).collect())
    };

    let mut out = GradeOutcome::default();
    let mut records = Vec::with_capacity(d.len());
    for (rec, res) in d.records.iter().zip(results) {
        let mut rec = rec.clone();
        match res {
            Ok(s) => {
                rec.score = Some(s);
                records.push(rec);
            }
            Err(e) => match on_error {
                OnScorerError::Abort => return Err(e),
                OnScorerError::KeepUnscored => {
                    rec.score = None;
                    out.unscored.push(rec.id.clone());
                    records.push(rec);
                }
                OnScorerError::Drop => out.dropped.push((rec.id.clone(), e.code())),
            },
        }
    }
    out.dataset = Dataset::from_records(records);
    if out.dropped.is_empty() {
        out.dataset.provenance = d.provenance.clone();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Score filter

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScoreFilterConfig {
    Threshold { threshold: f64 },
    DropFraction { drop_fraction: f64 },
}

impl ScoreFilterConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        match *self {
            Self::Threshold { threshold } if !(0.0..=1.0).contains(&threshold) => {
                Err(ScoreError::InvalidConfig("threshold must lie in [0, 1]"))
            }
            Self::DropFraction { drop_fraction } if !(0.0..1.0).contains(&drop_fraction) => {
                Err(ScoreError::InvalidConfig("drop_fraction must lie in [0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScoreFilterReport {
    pub dropped: Vec<(String, f64)>,
}

fn by_score_then_id(a: &Record, b: &Record) -> Ordering {
    let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
    sa.total_cmp(&sb).then_with(|| a.id.cmp(&b.id))
}

/// Number of records removed in drop-fraction mode: `floor(n * f)`, with a
/// small allowance so that products like `100 * 0.29` are not rounded down
/// past the intended integer.
pub fn drop_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction) + 1e-9).floor() as usize
}

/// Which records the score filter removes, by position.
pub fn score_filter_mask(records: &[Record], cfg: &ScoreFilterConfig) -> Result<Vec<bool>, ScoreError> {
    cfg.validate()?;
    if let Some(r) = records.iter().find(|r| r.score.is_none()) {
        return Err(ScoreError::UnscoredRecord(r.id.clone()));
    }
    let mut drop = vec![false; records.len()];
    match *cfg {
        ScoreFilterConfig::Threshold { threshold } => {
            for (d, r) in drop.iter_mut().zip(records) {
                *d = r.score.unwrap_or(0.0) < threshold;
            }
        }
        ScoreFilterConfig::DropFraction { drop_fraction } => {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.sort_by(|&a, &b| by_score_then_id(&records[a], &records[b]).then(a.cmp(&b)));
            for &i in order.iter().take(drop_count(records.len(), drop_fraction)) {
                drop[i] = true;
            }
        }
    }
    Ok(drop)
}

pub fn filter_by_score(
    d: &Dataset,
    cfg: &ScoreFilterConfig,
) -> Result<(Dataset, ScoreFilterReport), ScoreError> {
    let mask = score_filter_mask(&d.records, cfg)?;
    let mut report = ScoreFilterReport::default();
    let mut kept = Vec::with_capacity(d.len());
    for (r, drop) in d.records.iter().zip(mask) {
        if drop {
            report.dropped.push((r.id.clone(), r.score.unwrap_or(0.0)));
        } else {
            kept.push(r.clone());
        }
    }
    Ok((Dataset::from_records(kept), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Payload, QaPair};

    fn qa(id: &str, output: &str) -> Record {
        Record::new(
            id,
            "t",
            Payload::Qa(QaPair {
                input: "question".into(),
                output: output.into(),
            }),
        )
    }

    fn scored(id: &str, s: f64) -> Record {
        let mut r = qa(id, "x");
        r.score = Some(s);
        r
    }

    #[test]
    fn empty_response_scores_near_zero() {
        let s = heuristic_score(&qa("a", ""));
        assert!(s < 0.1, "{s}");
        let c = heuristic_components("");
        assert_eq!(c.diversity, 0.0);
        assert_eq!(c.structure, 0.0);
    }

    #[test]
    fn diversity_of_repeated_token() {
        let c = heuristic_components("a a a a a a a a a a");
        assert_eq!(c.diversity, 0.1);
    }

    #[test]
    fn longer_answer_scores_higher() {
        // ten distinct words, repeated to 20 and 40 tokens: diversity 0.5 both
        let w20: Vec<String> = (0..20).map(|i| format!("w{}", i % 10)).collect();
        let w40: Vec<String> = (0..40).map(|i| format!("v{}", i % 20)).collect();
        let (c20, c40) = (heuristic_components(&w20.join(" ")), heuristic_components(&w40.join(" ")));
        assert_eq!(c20.diversity, c40.diversity);
        assert_eq!(c20.structure, c40.structure);
        assert!(heuristic_score(&qa("b", &w40.join(" "))) > heuristic_score(&qa("a", &w20.join(" "))));
    }

    #[test]
    fn logistic_identity() {
        assert_eq!(logistic(0.0), 0.5);
    }

    #[test]
    fn regrading_overwrites_and_is_deterministic() {
        let mut r = qa("a", "some reasonable answer.");
        r.score = Some(0.99);
        let d = Dataset::from_records(vec![r]);
        let g1 = grade_dataset(&d, &HeuristicScorer, OnScorerError::Abort, 1).unwrap();
        let g2 = grade_dataset(&g1.dataset, &HeuristicScorer, OnScorerError::Abort, 4).unwrap();
        let s = g1.dataset.records[0].score.unwrap();
        assert_ne!(s, 0.99);
        assert_eq!(g2.dataset.records[0].score, Some(s));

        let empty = grade_dataset(&Dataset::default(), &HeuristicScorer, OnScorerError::Abort, 1).unwrap();
        assert!(empty.dataset.is_empty());
    }

    struct Failing;
    impl Scorer for Failing {
        fn score(&self, r: &Record) -> Result<f64, ScoreError> {
            if r.id == "bad" {
                Err(ScoreError::Unavailable("down".into()))
            } else {
                Ok(0.5)
            }
        }
    }

    #[test]
    fn error_policies() {
        let d = Dataset::from_records(vec![qa("ok", "x"), qa("bad", "y")]);
        let e = grade_dataset(&d, &Failing, OnScorerError::Abort, 1).unwrap_err();
        assert_eq!(e.code(), "scorer_unavailable");
        let k = grade_dataset(&d, &Failing, OnScorerError::KeepUnscored, 2).unwrap();
        assert_eq!(k.unscored, ["bad"]);
        assert_eq!(k.dataset.len(), 2);
        assert_eq!(k.dataset.records[1].score, None);
        let dr = grade_dataset(&d, &Failing, OnScorerError::Drop, 2).unwrap();
        assert_eq!(dr.dropped, [("bad".to_string(), "scorer_unavailable")]);
        assert_eq!(dr.dataset.len(), 1);
    }

    #[test]
    fn threshold_zero_keeps_all() {
        let d = Dataset::from_records(vec![scored("a", 0.0), scored("b", 0.3)]);
        let (kept, rep) = filter_by_score(&d, &ScoreFilterConfig::Threshold { threshold: 0.0 }).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(rep.dropped.is_empty());
    }

    #[test]
    fn drop_fraction_examples() {
        let d = Dataset::from_records(vec![scored("a", 0.5), scored("b", 0.1), scored("c", 0.9)]);
        let (kept, rep) =
            filter_by_score(&d, &ScoreFilterConfig::DropFraction { drop_fraction: 1.0 / 3.0 }).unwrap();
        assert_eq!(rep.dropped, [("b".to_string(), 0.1)]);
        let ids: Vec<_> = kept.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);

        let tie = Dataset::from_records(vec![scored("z", 0.2), scored("m", 0.2), scored("q", 0.8)]);
        let (_, rep) =
            filter_by_score(&tie, &ScoreFilterConfig::DropFraction { drop_fraction: 0.4 }).unwrap();
        assert_eq!(rep.dropped, [("m".to_string(), 0.2)]);
    }

    #[test]
    fn drop_count_floor() {
        assert_eq!(drop_count(3, 1.0 / 3.0), 1);
        assert_eq!(drop_count(100, 0.29), 29);
        assert_eq!(drop_count(10, 0.0), 0);
        assert_eq!(drop_count(7, 0.5), 3);
    }

    #[test]
    fn unscored_is_an_error() {
        let d = Dataset::from_records(vec![qa("a", "x")]);
        let e = filter_by_score(&d, &ScoreFilterConfig::Threshold { threshold: 0.5 }).unwrap_err();
        assert_eq!(e.code(), "unscored_record");
    }

    #[test]
    fn config_json_shape() {
        let c: ScoreFilterConfig = serde_json::from_str(r#"{"mode":"threshold","threshold":0.4}"#).unwrap();
        assert_eq!(c, ScoreFilterConfig::Threshold { threshold: 0.4 });
        let c: ScoreFilterConfig =
            serde_json::from_str(r#"{"mode":"drop_fraction","drop_fraction":0.1}"#).unwrap();
        assert_eq!(c, ScoreFilterConfig::DropFraction { drop_fraction: 0.1 });
        assert!(ScoreFilterConfig::DropFraction { drop_fraction: 1.0 }.validate().is_err());
    }
}
