//! Evaluation metrics. Logarithms are natural throughout (nats).

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::path_data::{Sequence, Token};

/// Half the L1 distance.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(validation(format!("distributions have lengths {} and {}", p.len(), q.len())));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Mean over rows of `-sum p ln p`, with `0 ln 0 = 0`.
pub fn entropy_metric(rows: ArrayView2<f64>) -> f64 {
    if rows.nrows() == 0 {
        return 0.0;
    }
    let total: f64 = rows
        .rows()
        .into_iter()
        .map(|r| r.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
        .sum();
    total / rows.nrows() as f64
}

/// Fraction of changed positions predicted correctly.
pub fn token_accuracy(predicted: &[Token], truth: &[Token], changed: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() || changed.len() != truth.len() {
        return Err(validation("predicted, truth and changed mask must have equal length"));
    }
    let total = changed.iter().filter(|&&c| c).count();
    if total == 0 {
        return Err(validation("token accuracy over an empty changed set"));
    }
    let hits = (0..truth.len()).filter(|&i| changed[i] && predicted[i] == truth[i]).count();
    Ok(hits as f64 / total as f64)
}

/// A fixed distribution over sequences used to score samples.
pub trait SequenceReference {
    fn log_prob(&self, x: &[Token]) -> Result<f64>;
}

/// Explicit distribution, optionally mixed with a uniform distribution over
/// all `data_tokens^L` sequences: `(1 - a) p(x) + a / data_tokens^L`.
#[derive(Debug, Clone)]
pub struct ExplicitReference {
    probs: HashMap<Vec<Token>, f64>,
    smoothing: f64,
    log_universe: f64,
}

impl ExplicitReference {
    pub fn new(support: &[(Sequence, f64)], data_tokens: usize, smoothing: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(validation(format!("smoothing {smoothing} outside [0, 1)")));
        }
        let len = support.first().map_or(0, |s| s.0.len());
        let probs = support.iter().map(|(x, p)| (x.0.clone(), *p)).collect();
        Ok(Self { probs, smoothing, log_universe: len as f64 * (data_tokens as f64).ln() })
    }

    /// Entropy of the unsmoothed distribution, per sequence.
    pub fn entropy(&self) -> f64 {
        self.probs.values().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

impl SequenceReference for ExplicitReference {
    fn log_prob(&self, x: &[Token]) -> Result<f64> {
        let p = self.probs.get(x).copied().unwrap_or(0.0);
        let mixed = (1.0 - self.smoothing) * p + self.smoothing * (-self.log_universe).exp();
        if mixed > 0.0 {
            Ok(mixed.ln())
        } else {
            Err(validation(format!("sample {x:?} has zero reference probability")))
        }
    }
}

const BOUNDARY: Token = Token::MAX;

/// Add-one smoothed trigram model over a token alphabet of `vocab_size`.
#[derive(Debug, Clone, Default)]
pub struct TrigramReference {
    vocab_size: usize,
    trigrams: HashMap<(Token, Token, Token), u64>,
    contexts: HashMap<(Token, Token), u64>,
}

impl TrigramReference {
    pub fn fit(sequences: &[Sequence], vocab_size: usize) -> Self {
        let mut model = Self { vocab_size, ..Self::default() };
        for s in sequences {
            let (mut a, mut b) = (BOUNDARY, BOUNDARY);
            for &c in s.iter() {
                *model.trigrams.entry((a, b, c)).or_insert(0) += 1;
                *model.contexts.entry((a, b)).or_insert(0) += 1;
                (a, b) = (b, c);
            }
        }
        model
    }
}

impl SequenceReference for TrigramReference {
    fn log_prob(&self, x: &[Token]) -> Result<f64> {
        let (mut a, mut b) = (BOUNDARY, BOUNDARY);
        let mut total = 0.0;
        for &c in x {
            let n = self.trigrams.get(&(a, b, c)).copied().unwrap_or(0) as f64;
            let d = self.contexts.get(&(a, b)).copied().unwrap_or(0) as f64;
            total += ((n + 1.0) / (d + self.vocab_size as f64)).ln();
            (a, b) = (b, c);
        }
        Ok(total)
    }
}

/// Mean negative log-probability per token of `samples` under `reference`.
pub fn nll_eval(samples: &[Sequence], reference: &dyn SequenceReference) -> Result<f64> {
    let tokens: usize = samples.iter().map(|s| s.len()).sum();
    if tokens == 0 {
        return Err(validation("no tokens to score"));
    }
    let mut total = 0.0;
    for s in samples {
        total -= reference.log_prob(s)?;
    }
    Ok(total / tokens as f64)
}

/// One evaluation summary. Empty cells in CSV for metrics that do not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub steps: usize,
    pub entropy_nats: f64,
    pub token_accuracy: Option<f64>,
    pub nll_nats_per_token: Option<f64>,
    pub mean_jumps: f64,
    pub tv: Option<f64>,
    pub valid_fraction: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "label,steps,entropy_nats,token_accuracy,nll_nats_per_token,mean_jumps,tv,valid_fraction";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.label,
            r.steps,
            r.entropy_nats,
            cell(r.token_accuracy),
            cell(r.nll_nats_per_token),
            r.mean_jumps,
            cell(r.tv),
            cell(r.valid_fraction)
        )
        .expect("string write");
    }
    out
}

/// Empirical distribution of `samples` over an enumerated state list.
pub fn empirical_distribution(samples: &[Sequence], index: &HashMap<Vec<Token>, usize>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; index.len()];
    for s in samples {
        let k = index.get(&s.0).ok_or_else(|| validation(format!("sample {:?} outside the state list", s.0)))?;
        out[*k] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}
