//! In-batch contrastive training of the head.
//!
//! Every query and positive document in a batch goes through the head; the
//! B×B score matrix feeds an InfoNCE loss in which each query's positive is
//! the matching row and every other row's document is a negative. Gradients
//! are exact reverse-mode derivatives of that loss, and the optimiser is Adam.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_io::EmbeddingStore;
use crate::moe_head::{
    draw_gate_noise, head_backward, head_forward_traced, init_head, GradientSet, HeadConfig,
    HeadParams, HeadTrace, Pooling,
};
use crate::numerics::{
    argmax, axpy, dot, finite_difference_gradient, log_sum_exp, norm, Matrix, SeededRng,
};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    Dot,
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Cosine => "cosine",
            Similarity::Dot => "dot",
        })
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Ok(Similarity::Cosine),
            "dot" => Ok(Similarity::Dot),
            other => Err(Error::Config(format!("unknown similarity '{other}'"))),
        }
    }
}

/// Score of `q` against `v`.
pub fn similarity(q: &[f64], v: &[f64], kind: Similarity) -> Result<f64> {
    if q.len() != v.len() {
        return Err(Error::Shape(format!(
            "similarity of vectors with dims {} and {}",
            q.len(),
            v.len()
        )));
    }
    match kind {
        Similarity::Dot => Ok(dot(q, v)),
        Similarity::Cosine => {
            let (nq, nv) = (norm(q), norm(v));
            if nq == 0.0 || nv == 0.0 {
                return Err(Error::Numeric(
                    "cosine similarity of a zero-norm vector".into(),
                ));
            }
            Ok(dot(q, v) / (nq * nv))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub pooling: Pooling,
    pub n_experts: usize,
    pub similarity: Similarity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-4,
            epochs: 30,
            temperature: 0.05,
            val_fraction: 0.05,
            seed: 42,
            pooling: Pooling::All,
            n_experts: 6,
            similarity: Similarity::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.n_experts == 0 || self.n_experts > crate::moe_head::MAX_EXPERTS {
            return Err(Error::Config(format!(
                "expert count must be in 1..={}, got {}",
                crate::moe_head::MAX_EXPERTS,
                self.n_experts
            )));
        }
        Ok(())
    }

    pub fn head_config(&self, dim: usize) -> Result<HeadConfig> {
        HeadConfig::new(dim, self.n_experts, self.pooling)
    }
}

/// Row `i` of `docs` is the positive for row `i` of `queries`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub queries: Matrix,
    pub docs: Matrix,
    pub query_ids: Vec<String>,
    pub doc_ids: Vec<String>,
}

impl Batch {
    pub fn new(queries: Matrix, docs: Matrix) -> Result<Self> {
        if queries.shape() != docs.shape() {
            return Err(Error::Shape(format!(
                "query block {:?} and doc block {:?} differ",
                queries.shape(),
                docs.shape()
            )));
        }
        let n = queries.rows();
        Ok(Self {
            queries,
            docs,
            query_ids: (0..n).map(|i| format!("q{i}")).collect(),
            doc_ids: (0..n).map(|i| format!("d{i}")).collect(),
        })
    }

    /// Gathers rows for `pairs` of (query index, doc index).
    pub fn gather(
        query_store: &EmbeddingStore,
        doc_store: &EmbeddingStore,
        pairs: &[(usize, usize)],
    ) -> Self {
        let d = query_store.dim();
        let mut q = Vec::with_capacity(pairs.len() * d);
        let mut e = Vec::with_capacity(pairs.len() * d);
        let mut query_ids = Vec::with_capacity(pairs.len());
        let mut doc_ids = Vec::with_capacity(pairs.len());
        for &(qi, di) in pairs {
            q.extend_from_slice(query_store.vector(qi));
            e.extend_from_slice(doc_store.vector(di));
            query_ids.push(query_store.ids()[qi].clone());
            doc_ids.push(doc_store.ids()[di].clone());
        }
        Self {
            queries: Matrix::from_vec(pairs.len(), d, q).expect("sized above"),
            docs: Matrix::from_vec(pairs.len(), doc_store.dim(), e).expect("sized above"),
            query_ids,
            doc_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn contrastive_check(scores: &Matrix, temperature: f64) -> Result<()> {
    let (r, c) = scores.shape();
    if r != c || r < 2 {
        return Err(Error::Shape(format!(
            "contrastive loss needs a square score matrix with B >= 2, got {r}x{c}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if !scores.is_finite() {
        return Err(Error::Numeric("score matrix has non-finite entries".into()));
    }
    Ok(())
}

/// `lse(logits) - logits[target]`, written as `(max - target) + ln_1p(rest)`
/// so a confident row keeps its tiny loss instead of cancelling to zero.
fn row_loss(logits: &[f64], target: usize) -> f64 {
    let top = argmax(logits);
    let max = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    (max - logits[target]) + rest.ln_1p()
}

/// Mean over rows of `-log softmax(row / τ)[diagonal]`.
pub fn contrastive_loss(scores: &Matrix, temperature: f64) -> Result<f64> {
    Ok(contrastive_loss_and_grad(scores, temperature)?.0)
}

/// Loss and its gradient with respect to every score.
pub fn contrastive_loss_and_grad(scores: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    contrastive_check(scores, temperature)?;
    let b = scores.rows();
    let mut grad = Matrix::zeros(b, b);
    let mut total = 0.0;
    let mut logits = vec![0.0; b];
    for i in 0..b {
        for (l, s) in logits.iter_mut().zip(scores.row(i)) {
            *l = s / temperature;
        }
        let lse = log_sum_exp(&logits);
        total += row_loss(&logits, i);
        let row = grad.row_mut(i);
        for j in 0..b {
            let p = (logits[j] - lse).exp();
            row[j] = (p - if i == j { 1.0 } else { 0.0 }) / (temperature * b as f64);
        }
    }
    Ok((total / b as f64, grad))
}

/// Per-expert selection counts (argmax of the gate) over a batch.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct RoutingStats {
    pub query_selections: Vec<usize>,
    pub doc_selections: Vec<usize>,
}

impl RoutingStats {
    fn from_traces(n: usize, queries: &[HeadTrace], docs: &[HeadTrace]) -> Self {
        let count = |traces: &[HeadTrace]| {
            let mut c = vec![0; n];
            for t in traces {
                c[t.routing().selected] += 1;
            }
            c
        };
        Self {
            query_selections: count(queries),
            doc_selections: count(docs),
        }
    }
}

/// Gate noise for one batch: rows `0..B` for queries, `B..2B` for documents.
pub fn draw_batch_noise(p: &HeadParams, batch_len: usize, rng: &mut SeededRng) -> Matrix {
    let n = p.config.n_experts;
    let mut m = Matrix::zeros(2 * batch_len, n);
    for r in 0..2 * batch_len {
        m.row_mut(r).copy_from_slice(&draw_gate_noise(n, rng));
    }
    m
}

struct BatchPass {
    loss: f64,
    query_traces: Vec<HeadTrace>,
    doc_traces: Vec<HeadTrace>,
    // Head outputs normalised for cosine; raw otherwise.
    query_units: Vec<Vec<f64>>,
    doc_units: Vec<Vec<f64>>,
    query_norms: Vec<f64>,
    doc_norms: Vec<f64>,
    scores: Matrix,
    d_scores: Matrix,
}

fn run_batch(
    p: &HeadParams,
    batch: &Batch,
    noise: Option<&Matrix>,
    similarity: Similarity,
    temperature: f64,
) -> Result<BatchPass> {
    let b = batch.len();
    if batch.queries.cols() != p.config.dim {
        return Err(Error::Shape(format!(
            "batch embeddings have dim {}, head expects {}",
            batch.queries.cols(),
            p.config.dim
        )));
    }
    let trace = |m: &Matrix, offset: usize| -> Result<Vec<HeadTrace>> {
        (0..b)
            .map(|i| head_forward_traced(p, m.row(i), noise.map(|n| n.row(offset + i))))
            .collect()
    };
    let query_traces = trace(&batch.queries, 0)?;
    let doc_traces = trace(&batch.docs, b)?;

    let prepare = |traces: &[HeadTrace]| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut units = Vec::with_capacity(b);
        let mut norms = Vec::with_capacity(b);
        for t in traces {
            let n = norm(&t.output);
            match similarity {
                Similarity::Dot => units.push(t.output.clone()),
                Similarity::Cosine => {
                    if n == 0.0 {
                        return Err(Error::Numeric(
                            "head output has zero norm under cosine similarity".into(),
                        ));
                    }
                    units.push(t.output.iter().map(|x| x / n).collect());
                }
            }
            norms.push(n);
        }
        Ok((units, norms))
    };
    let (query_units, query_norms) = prepare(&query_traces)?;
    let (doc_units, doc_norms) = prepare(&doc_traces)?;

    let mut scores = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            scores.set(i, j, dot(&query_units[i], &doc_units[j]));
        }
    }
    let (loss, d_scores) = contrastive_loss_and_grad(&scores, temperature)?;
    Ok(BatchPass {
        loss,
        query_traces,
        doc_traces,
        query_units,
        doc_units,
        query_norms,
        doc_norms,
        scores,
        d_scores,
    })
}

/// Loss and routing statistics for one batch with explicit noise draws.
pub fn forward_batch_with_noise(
    p: &HeadParams,
    batch: &Batch,
    noise: Option<&Matrix>,
    similarity: Similarity,
    temperature: f64,
) -> Result<(f64, RoutingStats)> {
    let pass = run_batch(p, batch, noise, similarity, temperature)?;
    let stats = RoutingStats::from_traces(p.config.n_experts, &pass.query_traces, &pass.doc_traces);
    Ok((pass.loss, stats))
}

/// Loss of one batch. With an rng the gate is noisy (training mode) and
/// the draws are consumed in the same order as [`backward_batch`].
pub fn forward_batch(
    p: &HeadParams,
    batch: &Batch,
    rng: Option<&mut SeededRng>,
    cfg: &TrainConfig,
) -> Result<(f64, RoutingStats)> {
    let noise = rng.map(|r| draw_batch_noise(p, batch.len(), r));
    forward_batch_with_noise(p, batch, noise.as_ref(), cfg.similarity, cfg.temperature)
}

/// Gradient of the loss with respect to one side's head outputs.
fn output_grads(pass: &BatchPass, similarity: Similarity, queries_side: bool) -> Vec<Vec<f64>> {
    let b = pass.scores.rows();
    let (own, other, norms) = if queries_side {
        (&pass.query_units, &pass.doc_units, &pass.query_norms)
    } else {
        (&pass.doc_units, &pass.query_units, &pass.doc_norms)
    };
    (0..b)
        .map(|i| {
            let g = |j: usize| {
                if queries_side {
                    pass.d_scores.get(i, j)
                } else {
                    pass.d_scores.get(j, i)
                }
            };
            let mut d_unit = vec![0.0; own[i].len()];
            for (j, o) in other.iter().enumerate() {
                axpy(&mut d_unit, g(j), o);
            }
            match similarity {
                Similarity::Dot => d_unit,
                Similarity::Cosine => {
                    // d(x/|x|) = (I - u uᵀ) / |x|
                    let radial = dot(&d_unit, &own[i]);
                    d_unit
                        .iter()
                        .zip(&own[i])
                        .map(|(g, u)| (g - radial * u) / norms[i])
                        .collect()
                }
            }
        })
        .collect()
}

/// Loss and exact gradients for one batch with explicit noise draws.
pub fn backward_batch_with_noise(
    p: &HeadParams,
    batch: &Batch,
    noise: Option<&Matrix>,
    similarity: Similarity,
    temperature: f64,
) -> Result<(f64, GradientSet)> {
    let pass = run_batch(p, batch, noise, similarity, temperature)?;
    let mut grad = p.zero_grad();
    let dq = output_grads(&pass, similarity, true);
    let dd = output_grads(&pass, similarity, false);
    for (t, g) in pass.query_traces.iter().zip(&dq) {
        head_backward(p, t, g, &mut grad);
    }
    for (t, g) in pass.doc_traces.iter().zip(&dd) {
        head_backward(p, t, g, &mut grad);
    }
    Ok((pass.loss, grad))
}

/// Loss and gradients for one batch. The rng (training mode) is consumed
/// exactly as in [`forward_batch`], so both see the same noise draws.
pub fn backward_batch(
    p: &HeadParams,
    batch: &Batch,
    rng: Option<&mut SeededRng>,
    cfg: &TrainConfig,
) -> Result<(f64, GradientSet)> {
    let noise = rng.map(|r| draw_batch_noise(p, batch.len(), r));
    backward_batch_with_noise(p, batch, noise.as_ref(), cfg.similarity, cfg.temperature)
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut HeadParams,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let total = params.num_values();
    if grads.num_values() != total || state.m.len() != total || state.v.len() != total {
        return Err(Error::Shape(
            "parameter, gradient and optimiser sizes differ".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let mut k = 0;
    for (w, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (wi, &gi) in w.iter_mut().zip(g) {
            let m = &mut state.m[k];
            let v = &mut state.v[k];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *wi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            k += 1;
        }
    }
    Ok(())
}

/// Best-validation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: HeadParams,
    pub epoch: usize,
    pub val_loss: f64,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean training batch loss; `None` for the pre-training evaluation.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub steps: usize,
    pub routing: RoutingStats,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochReport>,
    pub train_pairs: usize,
    pub val_pairs: usize,
}

fn resolve_pairs(
    pairs: &[(String, String)],
    query_store: &EmbeddingStore,
    doc_store: &EmbeddingStore,
) -> Result<Vec<(usize, usize)>> {
    pairs
        .iter()
        .map(|(q, d)| {
            let qi = query_store
                .position(q)
                .ok_or_else(|| Error::Data(format!("query id '{q}' not found in query store")))?;
            let di = doc_store
                .position(d)
                .ok_or_else(|| Error::Data(format!("document id '{d}' not found in doc store")))?;
            Ok((qi, di))
        })
        .collect()
}

/// Fixed-order chunks of the validation set; a trailing singleton is folded
/// into the previous chunk because the loss needs at least two rows.
fn validation_batches(
    val: &[(usize, usize)],
    batch_size: usize,
    query_store: &EmbeddingStore,
    doc_store: &EmbeddingStore,
) -> Vec<Batch> {
    let mut chunks: Vec<&[(usize, usize)]> = val.chunks(batch_size).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        chunks.pop();
        let start = (chunks.len() - 1) * batch_size;
        *chunks.last_mut().unwrap() = &val[start..];
    }
    chunks
        .into_iter()
        .map(|c| Batch::gather(query_store, doc_store, c))
        .collect()
}

/// Noise-free loss averaged over validation rows.
pub fn validation_loss(p: &HeadParams, batches: &[Batch], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0;
    for b in batches {
        let (loss, _) = forward_batch(p, b, None, cfg)?;
        total += loss * b.len() as f64;
        rows += b.len();
    }
    Ok(total / rows as f64)
}

pub fn train(
    pairs: &[(String, String)],
    cfg: &TrainConfig,
    query_store: &EmbeddingStore,
    doc_store: &EmbeddingStore,
) -> Result<TrainOutcome> {
    train_with_progress(pairs, cfg, query_store, doc_store, |_| {})
}

/// Trains a fresh head and keeps the epoch with the lowest validation loss
/// (epoch 0 is the untrained head; the earliest epoch wins ties).
///
/// All randomness comes from one stream seeded with `cfg.seed`, consumed in
/// order: initialisation, train/validation split, then per epoch the shuffle
/// followed by gate noise for each batch.
pub fn train_with_progress<F: FnMut(&EpochReport)>(
    pairs: &[(String, String)],
    cfg: &TrainConfig,
    query_store: &EmbeddingStore,
    doc_store: &EmbeddingStore,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if query_store.dim() != doc_store.dim() {
        return Err(Error::Shape(format!(
            "query store dim {} differs from doc store dim {}",
            query_store.dim(),
            doc_store.dim()
        )));
    }
    let resolved = resolve_pairs(pairs, query_store, doc_store)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut head = init_head(cfg.head_config(query_store.dim())?, &mut rng)?;

    let mut order = resolved;
    rng.shuffle(&mut order);
    let n_val = (cfg.val_fraction * order.len() as f64).ceil() as usize;
    if n_val < 2 {
        return Err(Error::Config(format!(
            "validation split holds {n_val} pairs; at least 2 are needed"
        )));
    }
    let mut train_set = order;
    let val_set = train_set.split_off(train_set.len() - n_val);
    if cfg.epochs > 0 && train_set.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} training pairs cannot fill one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let val_batches = validation_batches(&val_set, cfg.batch_size, query_store, doc_store);

    let init_val = validation_loss(&head, &val_batches, cfg)?;
    let mut best = Checkpoint {
        head: head.clone(),
        epoch: 0,
        val_loss: init_val,
        train_config: cfg.clone(),
    };
    let first = EpochReport {
        epoch: 0,
        train_loss: None,
        val_loss: init_val,
        steps: 0,
        routing: RoutingStats {
            query_selections: vec![0; cfg.n_experts],
            doc_selections: vec![0; cfg.n_experts],
        },
    };
    on_epoch(&first);
    let mut history = vec![first];

    let mut adam = AdamState::new(head.num_values());
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut train_set);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut routing = RoutingStats {
            query_selections: vec![0; cfg.n_experts],
            doc_selections: vec![0; cfg.n_experts],
        };
        for chunk in train_set.chunks_exact(cfg.batch_size) {
            let batch = Batch::gather(query_store, doc_store, chunk);
            let noise = draw_batch_noise(&head, batch.len(), &mut rng);
            let pass = run_batch(&head, &batch, Some(&noise), cfg.similarity, cfg.temperature)?;
            let stats =
                RoutingStats::from_traces(cfg.n_experts, &pass.query_traces, &pass.doc_traces);
            for (a, b) in routing
                .query_selections
                .iter_mut()
                .zip(stats.query_selections)
            {
                *a += b;
            }
            for (a, b) in routing.doc_selections.iter_mut().zip(stats.doc_selections) {
                *a += b;
            }
            let (loss, grads) = backward_batch_with_noise(
                &head,
                &batch,
                Some(&noise),
                cfg.similarity,
                cfg.temperature,
            )?;
            adam_step(&mut head, &grads, &mut adam, cfg.lr)?;
            loss_sum += loss;
            steps += 1;
        }
        let val_loss = validation_loss(&head, &val_batches, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss diverged at epoch {epoch}"
            )));
        }
        if val_loss < best.val_loss {
            best = Checkpoint {
                head: head.clone(),
                epoch,
                val_loss,
                train_config: cfg.clone(),
            };
        }
        let report = EpochReport {
            epoch,
            train_loss: Some(loss_sum / steps as f64),
            val_loss,
            steps,
            routing,
        };
        on_epoch(&report);
        history.push(report);
    }

    Ok(TrainOutcome {
        checkpoint: best,
        history,
        train_pairs: train_set.len(),
        val_pairs: val_set.len(),
    })
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub n_experts: usize,
    pub batch_size: usize,
    pub pooling: Pooling,
    pub similarity: Similarity,
    pub temperature: f64,
    pub seed: u64,
    pub step: f64,
    /// Draw gate noise once and hold it fixed (training-mode gradients).
    pub noise: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            n_experts: 3,
            batch_size: 4,
            pooling: Pooling::All,
            similarity: Similarity::Cosine,
            temperature: 0.05,
            seed: 42,
            step: 1e-5,
            noise: true,
        }
    }
}

pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub loss: f64,
    pub num_params: usize,
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
}

/// Discrepancy between an analytic and a numeric derivative: relative error,
/// or zero when the absolute difference is within the 1e-8 floor.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= GRAD_CHECK_ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn tensor_names(config: &HeadConfig) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..config.n_experts {
        for t in ["w_down", "b_down", "w_up", "b_up"] {
            names.push(format!("expert{i}.{t}"));
        }
    }
    for t in [
        "w_hidden", "b_hidden", "w_out", "b_out", "w_noise", "b_noise",
    ] {
        names.push(format!("gate.{t}"));
    }
    names
}

/// Random head and batch for gradient checks. Up-projections and biases are
/// perturbed away from their zero initialisation so every path is live.
pub fn grad_check_problem(cfg: &GradCheckConfig) -> Result<(HeadParams, Batch, Option<Matrix>)> {
    let mut rng = SeededRng::new(cfg.seed);
    let config = HeadConfig::new(cfg.dim, cfg.n_experts, cfg.pooling)?;
    let mut p = init_head(config, &mut rng)?;
    for t in p.tensors_mut() {
        for v in t {
            *v += 0.2 * rng.gaussian();
        }
    }
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    let mut block = || {
        let data = (0..cfg.batch_size * cfg.dim)
            .map(|_| scale * rng.gaussian())
            .collect();
        Matrix::from_vec(cfg.batch_size, cfg.dim, data)
    };
    let queries = block()?;
    let docs = block()?;
    let batch = Batch::new(queries, docs)?;
    let noise = cfg
        .noise
        .then(|| draw_batch_noise(&p, batch.len(), &mut rng));
    Ok((p, batch, noise))
}

/// Compares [`backward_batch_with_noise`] with central finite differences.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.batch_size < 2 {
        return Err(Error::Config(
            "gradient check needs a batch of at least 2".into(),
        ));
    }
    let (p, batch, noise) = grad_check_problem(cfg)?;
    let (loss, grads) =
        backward_batch_with_noise(&p, &batch, noise.as_ref(), cfg.similarity, cfg.temperature)?;
    let mut probe = p.clone();
    let numeric = finite_difference_gradient(
        |flat| {
            probe.copy_from_flat(flat)?;
            forward_batch_with_noise(
                &probe,
                &batch,
                noise.as_ref(),
                cfg.similarity,
                cfg.temperature,
            )
            .map(|(l, _)| l)
        },
        &p.to_flat(),
        cfg.step,
    )?;

    let names = tensor_names(&p.config);
    let mut groups = Vec::with_capacity(names.len());
    let mut offset = 0;
    for (name, analytic) in names.into_iter().zip(grads.tensors()) {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let n = numeric[offset + k];
            max_rel = max_rel.max(gradient_error(a, n));
            max_abs = max_abs.max((a - n).abs());
        }
        offset += analytic.len();
        groups.push(GroupError {
            name,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        config: *cfg,
        loss,
        num_params: p.num_values(),
        max_rel_error,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe_head::{expert_forward, ExpertParams};
    use std::f64::consts::LN_2;

    #[test]
    fn similarity_cases() {
        let v = [0.3, -2.0, 1.1];
        assert!((similarity(&v, &v, Similarity::Cosine).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((similarity(&v, &neg, Similarity::Cosine).unwrap() + 1.0).abs() < 1e-15);
        let c = similarity(&[1.0, 0.0], &[1.0, 1.0], Similarity::Cosine).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(
            similarity(&[1.0, 2.0], &[3.0, 4.0], Similarity::Dot).unwrap(),
            11.0
        );
        assert!(matches!(
            similarity(&[0.0, 0.0], &[1.0, 1.0], Similarity::Cosine),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn loss_closed_forms() {
        let equal = Matrix::from_vec(2, 2, vec![0.3; 4]).unwrap();
        assert!((contrastive_loss(&equal, 0.05).unwrap() - LN_2).abs() < 1e-12);
        let equal = Matrix::from_vec(64, 64, vec![-0.7; 64 * 64]).unwrap();
        assert!((contrastive_loss(&equal, 0.05).unwrap() - 64f64.ln()).abs() < 1e-12);
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        let got = contrastive_loss(&s, 0.05).unwrap();
        assert!((got - expected).abs() <= 1e-9 * expected);
        assert!((got - 2.06e-9).abs() < 1e-11);
        assert!(contrastive_loss(&Matrix::zeros(1, 1), 0.05).is_err());
        assert!(contrastive_loss(&Matrix::zeros(2, 3), 0.05).is_err());
        let mut bad = Matrix::zeros(2, 2);
        bad.set(0, 1, f64::INFINITY);
        assert!(matches!(
            contrastive_loss(&bad, 0.05),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let data: Vec<f64> = (0..9).map(|_| rng.gaussian() * 0.2).collect();
        let s = Matrix::from_vec(3, 3, data.clone()).unwrap();
        let (_, g) = contrastive_loss_and_grad(&s, 0.1).unwrap();
        let fd = finite_difference_gradient(
            |p| contrastive_loss(&Matrix::from_vec(3, 3, p.to_vec())?, 0.1),
            &data,
            1e-6,
        )
        .unwrap();
        for (a, n) in g.as_slice().iter().zip(&fd) {
            assert!((a - n).abs() < 1e-7);
        }
    }

    fn toy_batch(b: usize, d: usize, seed: u64) -> Batch {
        let mut rng = SeededRng::new(seed);
        let data = |rng: &mut SeededRng| (0..b * d).map(|_| rng.gaussian()).collect();
        let q = Matrix::from_vec(b, d, data(&mut rng)).unwrap();
        let e = Matrix::from_vec(b, d, data(&mut rng)).unwrap();
        Batch::new(q, e).unwrap()
    }

    #[test]
    fn identity_head_loss_equals_raw_loss() {
        let cfg = TrainConfig {
            n_experts: 4,
            ..TrainConfig::default()
        };
        let batch = toy_batch(8, 6, 1);
        let head = init_head(cfg.head_config(6).unwrap(), &mut SeededRng::new(42)).unwrap();
        let (loss, _) = forward_batch(&head, &batch, None, &cfg).unwrap();
        let mut raw = Matrix::zeros(8, 8);
        for i in 0..8 {
            for j in 0..8 {
                raw.set(
                    i,
                    j,
                    similarity(batch.queries.row(i), batch.docs.row(j), Similarity::Cosine)
                        .unwrap(),
                );
            }
        }
        let expected = contrastive_loss(&raw, cfg.temperature).unwrap();
        assert!((loss - expected).abs() <= 1e-12);
    }

    #[test]
    fn duplicated_rows_give_ln_b() {
        let cfg = TrainConfig {
            n_experts: 3,
            ..TrainConfig::default()
        };
        let q = Matrix::from_vec(5, 4, [0.1, 0.5, -0.3, 0.9].repeat(5)).unwrap();
        let e = Matrix::from_vec(5, 4, [1.0, -0.2, 0.4, 0.0].repeat(5)).unwrap();
        let batch = Batch::new(q, e).unwrap();
        let mut rng = SeededRng::new(2);
        let mut head = init_head(cfg.head_config(4).unwrap(), &mut rng).unwrap();
        for t in head.tensors_mut() {
            for v in t {
                *v += 0.1 * rng.gaussian();
            }
        }
        let (loss, _) = forward_batch(&head, &batch, None, &cfg).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn golden_batch_loss() {
        // Regression value, recorded after the gradient checks passed.
        let cfg = TrainConfig {
            n_experts: 2,
            pooling: Pooling::All,
            ..TrainConfig::default()
        };
        let gc = GradCheckConfig {
            dim: 8,
            n_experts: 2,
            batch_size: 4,
            pooling: Pooling::All,
            noise: false,
            ..GradCheckConfig::default()
        };
        let (p, batch, _) = grad_check_problem(&gc).unwrap();
        let (loss, stats) = forward_batch(&p, &batch, None, &cfg).unwrap();
        assert_eq!(stats.query_selections.iter().sum::<usize>(), 4);
        assert_eq!(stats.doc_selections.iter().sum::<usize>(), 4);
        let golden = GOLDEN_LOSS;
        assert!((loss - golden).abs() < 1e-12, "loss {loss:.17}");
    }

    const GOLDEN_LOSS: f64 = 3.831_999_124_698_328;

    #[test]
    fn top1_unselected_expert_gets_no_gradient() {
        let gc = GradCheckConfig {
            n_experts: 6,
            batch_size: 2,
            pooling: Pooling::Top1,
            ..GradCheckConfig::default()
        };
        let (p, batch, noise) = grad_check_problem(&gc).unwrap();
        let (_, grads) =
            backward_batch_with_noise(&p, &batch, noise.as_ref(), gc.similarity, gc.temperature)
                .unwrap();
        let pass = run_batch(&p, &batch, noise.as_ref(), gc.similarity, gc.temperature).unwrap();
        let used: Vec<usize> = pass
            .query_traces
            .iter()
            .chain(&pass.doc_traces)
            .map(|t| t.routing().selected)
            .collect();
        let unused: Vec<usize> = (0..6).filter(|i| !used.contains(i)).collect();
        assert!(!unused.is_empty());
        for i in unused {
            assert!(grads.experts[i].w_up.as_slice().iter().all(|&g| g == 0.0));
            assert!(grads.experts[i].w_down.as_slice().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        // One expert, d = 2, queries equal to their documents and orthogonal
        // across rows; the gradient vanishes by symmetry when the up-projection
        // is zero and the down-projection is symmetric.
        let config = HeadConfig::new(2, 1, Pooling::All).unwrap();
        let mut p = crate::moe_head::HeadParams::zeros(config);
        p.experts[0].w_down = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = Batch::new(q.clone(), q).unwrap();
        let (_, g) = backward_batch_with_noise(&p, &batch, None, Similarity::Cosine, 0.02).unwrap();
        let norm2: f64 = g.to_flat().iter().map(|v| v * v).sum();
        assert!(norm2.sqrt() < 1e-8, "gradient norm {}", norm2.sqrt());
    }

    #[test]
    fn single_expert_gradients_match_plain_adapter_path() {
        // For n = 1 the gate probability is identically 1, so the expert
        // gradients must equal those of the adapter used on its own.
        let gc = GradCheckConfig {
            n_experts: 1,
            noise: false,
            similarity: Similarity::Dot,
            ..GradCheckConfig::default()
        };
        let (p, batch, _) = grad_check_problem(&gc).unwrap();
        let (_, grads) =
            backward_batch_with_noise(&p, &batch, None, gc.similarity, gc.temperature).unwrap();
        let expert: ExpertParams = p.experts[0].clone();
        let base = expert_to_flat(&expert);
        let fd = finite_difference_gradient(
            |flat| {
                let e = expert_from_flat(&expert, flat);
                let b = batch.len();
                let mut s = Matrix::zeros(b, b);
                let qs: Vec<_> = (0..b)
                    .map(|i| expert_forward(&e, batch.queries.row(i)))
                    .collect::<Result<_>>()?;
                let ds: Vec<_> = (0..b)
                    .map(|i| expert_forward(&e, batch.docs.row(i)))
                    .collect::<Result<_>>()?;
                for i in 0..b {
                    for j in 0..b {
                        s.set(i, j, dot(&qs[i], &ds[j]));
                    }
                }
                contrastive_loss(&s, gc.temperature)
            },
            &base,
            1e-5,
        )
        .unwrap();
        let analytic = expert_to_flat(&grads.experts[0]);
        for (a, n) in analytic.iter().zip(&fd) {
            assert!(gradient_error(*a, *n) <= 1e-4, "{a} vs {n}");
        }
        assert!(grads.gate.to_flat_gate().iter().all(|g| g.abs() < 1e-12));
    }

    fn expert_to_flat(e: &ExpertParams) -> Vec<f64> {
        [e.w_down.as_slice(), &e.b_down, e.w_up.as_slice(), &e.b_up].concat()
    }

    fn expert_from_flat(template: &ExpertParams, flat: &[f64]) -> ExpertParams {
        let mut e = template.clone();
        let mut o = 0;
        for t in [
            e.w_down.as_mut_slice(),
            e.b_down.as_mut_slice(),
            e.w_up.as_mut_slice(),
            e.b_up.as_mut_slice(),
        ] {
            let n = t.len();
            t.copy_from_slice(&flat[o..o + n]);
            o += n;
        }
        e
    }

    trait GateFlat {
        fn to_flat_gate(&self) -> Vec<f64>;
    }

    impl GateFlat for crate::moe_head::GateParams {
        fn to_flat_gate(&self) -> Vec<f64> {
            [
                self.w_hidden.as_slice(),
                &self.b_hidden,
                self.w_out.as_slice(),
                &self.b_out,
                self.w_noise.as_slice(),
                &self.b_noise,
            ]
            .concat()
        }
    }

    #[test]
    fn grad_check_all_and_top1() {
        for pooling in [Pooling::All, Pooling::Top1] {
            let report = grad_check(&GradCheckConfig {
                pooling,
                ..GradCheckConfig::default()
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{pooling}: {report:#?}");
        }
    }

    #[test]
    fn adam_cases() {
        let config = HeadConfig::new(2, 1, Pooling::All).unwrap();
        let mut p = init_head(config, &mut SeededRng::new(1)).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(p.num_values());
        let zero = p.zero_grad();
        adam_step(&mut p, &zero, &mut state, 0.1).unwrap();
        assert_eq!(p, before);

        let mut p = before.clone();
        let mut state = AdamState::new(p.num_values());
        let mut g = p.zero_grad();
        g.experts[0].b_up = vec![0.5, 0.5];
        g.experts[0].b_down = vec![0.5];
        adam_step(&mut p, &g, &mut state, 0.1).unwrap();
        let expected = -0.1 * 0.5 / (0.5 + ADAM_EPS);
        assert!((p.experts[0].b_up[0] - expected).abs() < 1e-15);
        assert!((p.experts[0].b_up[0] + 0.1).abs() < 1e-7);
        // Identical gradients give identical updates.
        assert_eq!(p.experts[0].b_up[0], p.experts[0].b_up[1]);
        assert_eq!(
            p.experts[0].b_down[0] - before.experts[0].b_down[0],
            expected
        );

        let mut bad = p.zero_grad();
        bad.gate.b_out[0] = f64::NAN;
        let snapshot = p.clone();
        assert!(matches!(
            adam_step(&mut p, &bad, &mut state, 0.1),
            Err(Error::Numeric(_))
        ));
        assert_eq!(p, snapshot);
    }

    fn toy_stores(
        n: usize,
        d: usize,
        seed: u64,
    ) -> (EmbeddingStore, EmbeddingStore, Vec<(String, String)>) {
        let mut rng = SeededRng::new(seed);
        let mut qs = EmbeddingStore::new(d);
        let mut ds = EmbeddingStore::new(d);
        let mut pairs = Vec::new();
        for i in 0..n {
            let e: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
            let q: Vec<f64> = e.iter().map(|x| x + 0.8 * rng.gaussian()).collect();
            qs.push(format!("q{i}"), &q).unwrap();
            ds.push(format!("d{i}"), &e).unwrap();
            pairs.push((format!("q{i}"), format!("d{i}")));
        }
        (qs, ds, pairs)
    }

    #[test]
    fn zero_epochs_returns_initial_head() {
        let (qs, ds, pairs) = toy_stores(40, 6, 3);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 8,
            val_fraction: 0.2,
            n_experts: 3,
            ..TrainConfig::default()
        };
        let out = train(&pairs, &cfg, &qs, &ds).unwrap();
        let init = init_head(cfg.head_config(6).unwrap(), &mut SeededRng::new(42)).unwrap();
        assert_eq!(out.checkpoint.head, init);
        assert_eq!(out.checkpoint.epoch, 0);
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.val_pairs, 8);
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_best_epoch() {
        // Queries see a fixed anisotropic distortion of their document, which
        // the head can learn to undo.
        let (mut qs, ds, pairs) = toy_stores(200, 6, 4);
        let scale = [4.0, 0.25, 1.0, -2.0, 0.5, 1.0];
        let mut distorted = EmbeddingStore::new(6);
        for (id, v) in qs.iter() {
            let v: Vec<f64> = v.iter().zip(scale).map(|(x, s)| x * s).collect();
            distorted.push(id.to_string(), &v).unwrap();
        }
        qs = distorted;
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 1e-3,
            val_fraction: 0.1,
            n_experts: 3,
            ..TrainConfig::default()
        };
        let a = train(&pairs, &cfg, &qs, &ds).unwrap();
        let b = train(&pairs, &cfg, &qs, &ds).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let best = a
            .history
            .iter()
            .min_by(|x, y| x.val_loss.total_cmp(&y.val_loss))
            .unwrap();
        assert_eq!(a.checkpoint.epoch, best.epoch);
        assert_eq!(a.checkpoint.val_loss, best.val_loss);
        assert!(best.val_loss < a.history[0].val_loss);
        // Validation is noise-free, so re-evaluating the checkpoint reproduces it.
        let mut order: Vec<(usize, usize)> = pairs
            .iter()
            .map(|(q, d)| (qs.position(q).unwrap(), ds.position(d).unwrap()))
            .collect();
        let mut rng = SeededRng::new(cfg.seed);
        init_head(cfg.head_config(6).unwrap(), &mut rng).unwrap();
        rng.shuffle(&mut order);
        let val = order.split_off(order.len() - a.val_pairs);
        let batches = validation_batches(&val, cfg.batch_size, &qs, &ds);
        let v1 = validation_loss(&a.checkpoint.head, &batches, &cfg).unwrap();
        let v2 = validation_loss(&a.checkpoint.head, &batches, &cfg).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1, a.checkpoint.val_loss);
    }

    #[test]
    fn training_errors() {
        let (qs, ds, mut pairs) = toy_stores(30, 4, 5);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 1,
            n_experts: 2,
            ..TrainConfig::default()
        };
        // 5% of 30 rounds up to 2 validation pairs.
        assert!(train(&pairs, &cfg, &qs, &ds).is_ok());
        pairs.push(("q0".into(), "missing-doc".into()));
        match train(&pairs, &cfg, &qs, &ds) {
            Err(Error::Data(msg)) => assert!(msg.contains("missing-doc")),
            other => panic!("unexpected {other:?}"),
        }
        let few = &pairs[..10];
        assert!(matches!(train(few, &cfg, &qs, &ds), Err(Error::Config(_))));
        let bad = TrainConfig {
            batch_size: 1,
            ..cfg.clone()
        };
        assert!(matches!(
            train(&pairs[..30], &bad, &qs, &ds),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_chunks_never_leave_a_singleton() {
        let (qs, ds, _) = toy_stores(9, 3, 6);
        let val: Vec<(usize, usize)> = (0..9).map(|i| (i, i)).collect();
        let sizes: Vec<usize> = validation_batches(&val, 4, &qs, &ds)
            .iter()
            .map(Batch::len)
            .collect();
        assert_eq!(sizes, vec![4, 5]);
        let sizes: Vec<usize> = validation_batches(&val[..8], 4, &qs, &ds)
            .iter()
            .map(Batch::len)
            .collect();
        assert_eq!(sizes, vec![4, 4]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn loss_nonnegative_and_scale_free(
                entries in prop::collection::vec(-1.0f64..1.0, 16),
                tau in 0.01f64..1.0,
                scale in 0.1f64..10.0,
            ) {
                let s = Matrix::from_vec(4, 4, entries.clone()).unwrap();
                let l = contrastive_loss(&s, tau).unwrap();
                prop_assert!(l >= 0.0);
                let scaled = Matrix::from_vec(4, 4, entries.iter().map(|x| x * scale).collect()).unwrap();
                let l2 = contrastive_loss(&scaled, tau * scale).unwrap();
                prop_assert!((l - l2).abs() <= 1e-9 * l.max(1.0));
            }
        }
    }
}
