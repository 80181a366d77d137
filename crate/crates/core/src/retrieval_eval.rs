//! Exhaustive dense retrieval, NDCG / recall evaluation and paired
//! significance testing between runs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::data_io::{EmbeddingStore, Qrels, Run};
use crate::moe_head::{head_forward, HeadParams};
use crate::numerics::{dot, norm};
use crate::training::Similarity;
use crate::{Error, Result};

pub const SIGNIFICANCE_ALPHA: f64 = 0.05;

/// Best-first ordering: higher score, then ascending doc id.
fn rank_order(a: &(usize, f64), b: &(usize, f64), ids: &[String]) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
}

/// Applies the head (noise off) to every vector; cosine also normalises.
fn encode(
    store: &EmbeddingStore,
    head: Option<&HeadParams>,
    similarity: Similarity,
) -> Result<Vec<Vec<f64>>> {
    (0..store.len())
        .into_par_iter()
        .map(|i| {
            let x = store.vector(i);
            let mut y = match head {
                Some(h) => head_forward(h, x, None)?.0,
                None => x.to_vec(),
            };
            if similarity == Similarity::Cosine {
                let n = norm(&y);
                if n == 0.0 {
                    return Err(Error::Numeric(format!(
                        "'{}' has zero norm under cosine similarity",
                        store.ids()[i]
                    )));
                }
                y.iter_mut().for_each(|v| *v /= n);
            }
            Ok(y)
        })
        .collect()
}

/// Scores every query against every document and keeps the top `k`.
///
/// Ties are broken by ascending document id, so the output is a total order
/// and repeated calls are bit-identical regardless of thread count.
pub fn retrieve(
    query_store: &EmbeddingStore,
    doc_store: &EmbeddingStore,
    head: Option<&HeadParams>,
    k: usize,
    similarity: Similarity,
) -> Result<Run> {
    if k == 0 {
        return Err(Error::Config("retrieval depth k must be at least 1".into()));
    }
    if query_store.dim() != doc_store.dim() {
        return Err(Error::Shape(format!(
            "query store dim {} differs from doc store dim {}",
            query_store.dim(),
            doc_store.dim()
        )));
    }
    if let Some(h) = head {
        if h.config.dim != query_store.dim() {
            return Err(Error::Shape(format!(
                "head dim {} differs from store dim {}",
                h.config.dim,
                query_store.dim()
            )));
        }
    }
    let queries = encode(query_store, head, similarity)?;
    let docs = encode(doc_store, head, similarity)?;
    let doc_ids = doc_store.ids();
    let depth = k.min(docs.len());

    let ranked: Vec<Vec<(String, f64)>> = queries
        .par_iter()
        .map(|q| {
            let mut scored: Vec<(usize, f64)> = docs
                .iter()
                .enumerate()
                .map(|(j, d)| (j, dot(q, d)))
                .collect();
            if depth > 0 && depth < scored.len() {
                scored.select_nth_unstable_by(depth - 1, |a, b| rank_order(a, b, doc_ids));
                scored.truncate(depth);
            }
            scored.sort_by(|a, b| rank_order(a, b, doc_ids));
            scored
                .into_iter()
                .map(|(j, s)| (doc_ids[j].clone(), s))
                .collect()
        })
        .collect();

    Ok(query_store.ids().iter().cloned().zip(ranked).collect())
}

/// NDCG gain function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `rel`
    Linear,
    /// `2^rel - 1`
    Exponential,
}

impl Gain {
    fn apply(self, grade: i64) -> f64 {
        match self {
            Gain::Linear => grade as f64,
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ndcg { k: usize, gain: Gain },
    Recall { k: usize },
}

impl Metric {
    pub const NDCG_10: Metric = Metric::Ndcg {
        k: 10,
        gain: Gain::Linear,
    };
    pub const RECALL_100: Metric = Metric::Recall { k: 100 };

    fn per_query(&self, ranked: &[(String, f64)], judged: &BTreeMap<String, i64>) -> f64 {
        match *self {
            Metric::Ndcg { k, gain } => ndcg_query(ranked, judged, k, gain),
            Metric::Recall { k } => recall_query(ranked, judged, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg {
                k,
                gain: Gain::Linear,
            } => write!(f, "ndcg@{k}"),
            Metric::Ndcg {
                k,
                gain: Gain::Exponential,
            } => write!(f, "ndcg_exp@{k}"),
            Metric::Recall { k } => write!(f, "recall@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, k) = lower
            .split_once('@')
            .ok_or_else(|| Error::Config(format!("metric '{s}' must look like name@k")))?;
        let k: usize = k
            .parse()
            .ok()
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::Config(format!("metric '{s}' needs a positive cutoff")))?;
        match name {
            "ndcg" | "ndcg_cut" => Ok(Metric::Ndcg {
                k,
                gain: Gain::Linear,
            }),
            "ndcg_exp" => Ok(Metric::Ndcg {
                k,
                gain: Gain::Exponential,
            }),
            "recall" | "r" => Ok(Metric::Recall { k }),
            _ => Err(Error::Config(format!("unknown metric '{s}'"))),
        }
    }
}

fn has_relevant(judged: &BTreeMap<String, i64>) -> bool {
    judged.values().any(|&g| g > 0)
}

fn ndcg_query(
    ranked: &[(String, f64)],
    judged: &BTreeMap<String, i64>,
    k: usize,
    gain: Gain,
) -> f64 {
    let discount = |rank0: usize| 1.0 / ((rank0 + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, (d, _))| {
            let g = judged.get(d).copied().unwrap_or(0).max(0);
            gain.apply(g) * discount(r)
        })
        .sum();
    let mut ideal: Vec<i64> = judged.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, &g)| gain.apply(g) * discount(r))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn recall_query(ranked: &[(String, f64)], judged: &BTreeMap<String, i64>, k: usize) -> f64 {
    let relevant = judged.values().filter(|&&g| g > 0).count();
    if relevant == 0 {
        return 0.0;
    }
    let found = ranked
        .iter()
        .take(k)
        .filter(|(d, _)| judged.get(d).is_some_and(|&g| g > 0))
        .count();
    found as f64 / relevant as f64
}

/// Per-query values and their mean for one metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricValues {
    pub metric: String,
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub num_queries: usize,
    pub metrics: Vec<MetricValues>,
}

impl MetricReport {
    pub fn get(&self, metric: &Metric) -> Option<&MetricValues> {
        let name = metric.to_string();
        self.metrics.iter().find(|m| m.metric == name)
    }
}

/// Scores every qrels query with at least one relevant document. Queries
/// missing from the run score zero.
pub fn evaluate_metric(run: &Run, qrels: &Qrels, metric: Metric) -> MetricValues {
    let empty = Vec::new();
    let per_query: BTreeMap<String, f64> = qrels
        .iter()
        .filter(|(_, judged)| has_relevant(judged))
        .map(|(q, judged)| {
            let ranked = run.get(q).unwrap_or(&empty);
            (q.clone(), metric.per_query(ranked, judged))
        })
        .collect();
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    MetricValues {
        metric: metric.to_string(),
        mean,
        per_query,
    }
}

pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricValues {
    evaluate_metric(
        run,
        qrels,
        Metric::Ndcg {
            k,
            gain: Gain::Linear,
        },
    )
}

pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricValues {
    evaluate_metric(run, qrels, Metric::Recall { k })
}

pub fn evaluate(run: &Run, qrels: &Qrels, metrics: &[Metric]) -> MetricReport {
    MetricReport {
        num_queries: qrels.values().filter(|j| has_relevant(j)).count(),
        metrics: metrics
            .iter()
            .map(|m| evaluate_metric(run, qrels, *m))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Two-sided paired Student's t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Data("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().all(|&d| d == diffs[0]) {
        return Err(Error::DegenerateVariance);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = n - 1;
    Ok(TTest {
        t,
        df,
        p_value: student_t_two_sided(t, df as f64),
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom, via the
/// regularised incomplete beta function.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// `min(1, m * p)`.
pub fn bonferroni(p: f64, comparisons: usize) -> f64 {
    (p * comparisons as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignificanceReport {
    pub metric: String,
    pub num_queries: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    pub p_corrected: f64,
    pub comparisons: usize,
    pub alpha: f64,
    pub significant: bool,
}

/// Paired t-test per metric over the queries evaluated in both runs, with
/// Bonferroni correction for `comparisons` tests.
pub fn compare_runs(
    run_a: &Run,
    run_b: &Run,
    qrels: &Qrels,
    metrics: &[Metric],
    comparisons: usize,
) -> Result<Vec<SignificanceReport>> {
    if comparisons == 0 {
        return Err(Error::Config("comparison count must be at least 1".into()));
    }
    let in_a: HashSet<&String> = run_a.keys().collect();
    let common: Vec<&String> = qrels
        .iter()
        .filter(|(q, judged)| has_relevant(judged) && in_a.contains(q) && run_b.contains_key(*q))
        .map(|(q, _)| q)
        .collect();
    if common.len() < 2 {
        return Err(Error::Data(format!(
            "runs share {} evaluated queries; at least 2 are needed",
            common.len()
        )));
    }
    metrics
        .iter()
        .map(|metric| {
            let va = evaluate_metric(run_a, qrels, *metric);
            let vb = evaluate_metric(run_b, qrels, *metric);
            let a: Vec<f64> = common.iter().map(|q| va.per_query[*q]).collect();
            let b: Vec<f64> = common.iter().map(|q| vb.per_query[*q]).collect();
            let test = paired_ttest(&a, &b)?;
            let p_corrected = bonferroni(test.p_value, comparisons);
            Ok(SignificanceReport {
                metric: metric.to_string(),
                num_queries: common.len(),
                mean_a: a.iter().sum::<f64>() / a.len() as f64,
                mean_b: b.iter().sum::<f64>() / b.len() as f64,
                t: test.t,
                df: test.df,
                p_value: test.p_value,
                p_corrected,
                comparisons,
                alpha: SIGNIFICANCE_ALPHA,
                significant: p_corrected < SIGNIFICANCE_ALPHA,
            })
        })
        .collect()
}
