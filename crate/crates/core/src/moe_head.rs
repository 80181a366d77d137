//! The single MoE block: bottleneck adapter experts with a skip connection,
//! a two-layer gating MLP with a learned noise head, and TOP-1 / ALL pooling.
//!
//! The forward pass is a pure function of the parameters and one embedding.
//! [`head_forward_traced`] keeps the intermediates that [`head_backward`]
//! needs to push a gradient on the head output back onto every parameter.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::{
    add_assign, argmax, axpy, dot, gelu, gelu_grad, matvec, matvec_transpose, sigmoid, softmax,
    softplus, Matrix, SeededRng,
};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"SBMH";
pub const MODEL_VERSION: u32 = 1;
pub const MAX_EXPERTS: usize = 64;

/// How expert outputs are combined into the final embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Output of the highest-scoring expert, scaled by its gate probability.
    Top1,
    /// Probability-weighted sum of all expert outputs.
    All,
}

impl Pooling {
    fn code(self) -> u8 {
        match self {
            Pooling::Top1 => 0,
            Pooling::All => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Pooling::Top1),
            1 => Some(Pooling::All),
            _ => None,
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Top1 => "top1",
            Pooling::All => "all",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top1" | "top-1" => Ok(Pooling::Top1),
            "all" => Ok(Pooling::All),
            other => Err(Error::Config(format!("unknown pooling '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub dim: usize,
    pub n_experts: usize,
    pub pooling: Pooling,
}

impl HeadConfig {
    pub fn new(dim: usize, n_experts: usize, pooling: Pooling) -> Result<Self> {
        let config = Self {
            dim,
            n_experts,
            pooling,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "embedding dimension must be at least 2, got {}",
                self.dim
            )));
        }
        if self.n_experts == 0 || self.n_experts > MAX_EXPERTS {
            return Err(Error::Config(format!(
                "expert count must be in 1..={MAX_EXPERTS}, got {}",
                self.n_experts
            )));
        }
        Ok(())
    }

    /// Bottleneck width, `ceil(dim / 2)`.
    pub fn hidden(&self) -> usize {
        self.dim.div_ceil(2)
    }
}

/// One adapter expert: down-projection to half width, GELU, up-projection
/// back to the input width, plus the skip connection.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub w_down: Matrix,
    pub b_down: Vec<f64>,
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
}

impl ExpertParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w_down: Matrix::zeros(hidden, dim),
            b_down: vec![0.0; hidden],
            w_up: Matrix::zeros(dim, hidden),
            b_up: vec![0.0; dim],
        }
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_down.as_slice(),
            &self.b_down,
            self.w_up.as_slice(),
            &self.b_up,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_down.as_mut_slice(),
            &mut self.b_down,
            self.w_up.as_mut_slice(),
            &mut self.b_up,
        ]
    }
}

/// Gating MLP: a hidden layer of half width feeding two heads of size
/// `n_experts`, one for the clean logits and one for the noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w_hidden: Matrix,
    pub b_hidden: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
    pub w_noise: Matrix,
    pub b_noise: Vec<f64>,
}

impl GateParams {
    pub fn zeros(dim: usize, hidden: usize, n_experts: usize) -> Self {
        Self {
            w_hidden: Matrix::zeros(hidden, dim),
            b_hidden: vec![0.0; hidden],
            w_out: Matrix::zeros(n_experts, hidden),
            b_out: vec![0.0; n_experts],
            w_noise: Matrix::zeros(n_experts, hidden),
            b_noise: vec![0.0; n_experts],
        }
    }

    fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w_hidden.as_slice(),
            &self.b_hidden,
            self.w_out.as_slice(),
            &self.b_out,
            self.w_noise.as_slice(),
            &self.b_noise,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w_hidden.as_mut_slice(),
            &mut self.b_hidden,
            self.w_out.as_mut_slice(),
            &mut self.b_out,
            self.w_noise.as_mut_slice(),
            &mut self.b_noise,
        ]
    }
}

/// Every trainable tensor of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub experts: Vec<ExpertParams>,
    pub gate: GateParams,
}

/// Gradients with the same layout as [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub experts: Vec<ExpertParams>,
    pub gate: GateParams,
}

macro_rules! tensor_views {
    () => {
        /// All tensors in the canonical order of the model file.
        pub fn tensors(&self) -> Vec<&[f64]> {
            let mut out = Vec::with_capacity(4 * self.experts.len() + 6);
            for e in &self.experts {
                out.extend(e.tensors());
            }
            out.extend(self.gate.tensors());
            out
        }

        pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            let mut out = Vec::with_capacity(4 * self.experts.len() + 6);
            for e in &mut self.experts {
                out.extend(e.tensors_mut());
            }
            out.extend(self.gate.tensors_mut());
            out
        }

        pub fn num_values(&self) -> usize {
            self.tensors().iter().map(|t| t.len()).sum()
        }

        /// Flat copy in canonical order.
        pub fn to_flat(&self) -> Vec<f64> {
            self.tensors().concat()
        }

        pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
            if flat.len() != self.num_values() {
                return Err(Error::shape(format!(
                    "expected {} values, got {}",
                    self.num_values(),
                    flat.len()
                )));
            }
            let mut offset = 0;
            for t in self.tensors_mut() {
                let len = t.len();
                t.copy_from_slice(&flat[offset..offset + len]);
                offset += len;
            }
            Ok(())
        }

        pub fn is_finite(&self) -> bool {
            self.tensors()
                .iter()
                .all(|t| t.iter().all(|v| v.is_finite()))
        }
    };
}

impl HeadParams {
    tensor_views!();

    /// All-zero parameters for `config`.
    pub fn zeros(config: HeadConfig) -> Self {
        let (d, h, n) = (config.dim, config.hidden(), config.n_experts);
        Self {
            config,
            experts: (0..n).map(|_| ExpertParams::zeros(d, h)).collect(),
            gate: GateParams::zeros(d, h, n),
        }
    }

    pub fn zero_grad(&self) -> GradientSet {
        let zeros = Self::zeros(self.config);
        GradientSet {
            experts: zeros.experts,
            gate: zeros.gate,
        }
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::zeros(self.config);
        if self.experts.len() != self.config.n_experts {
            return Err(Error::shape(format!(
                "{} experts present, config says {}",
                self.experts.len(),
                self.config.n_experts
            )));
        }
        let ours = self.tensors();
        for (i, (a, b)) in ours.iter().zip(reference.tensors()).enumerate() {
            if a.len() != b.len() {
                return Err(Error::shape(format!(
                    "tensor {i} has {} values, expected {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

impl GradientSet {
    tensor_views!();

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            add_assign(a, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t {
                *v *= factor;
            }
        }
    }
}

/// Gate outputs for one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingInfo {
    pub clean_logits: Vec<f64>,
    pub noisy_logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub selected: usize,
}

/// Per-expert, gate and total trainable parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub per_expert: usize,
    pub gate: usize,
    pub total: usize,
}

pub fn param_count(config: &HeadConfig) -> ParamCount {
    let (d, h, n) = (config.dim, config.hidden(), config.n_experts);
    let per_expert = 2 * d * h + h + d;
    let gate = d * h + h + 2 * (n * h + n);
    ParamCount {
        per_expert,
        gate,
        total: n * per_expert + gate,
    }
}

/// Glorot-uniform projections, zero up-projections and zero biases. Every
/// expert starts as the identity map, so the fresh head reproduces its input.
pub fn init_head(config: HeadConfig, rng: &mut SeededRng) -> Result<HeadParams> {
    config.validate()?;
    let (d, h, n) = (config.dim, config.hidden(), config.n_experts);
    let experts = (0..n)
        .map(|_| ExpertParams {
            w_down: Matrix::glorot_uniform(h, d, rng),
            b_down: vec![0.0; h],
            w_up: Matrix::zeros(d, h),
            b_up: vec![0.0; d],
        })
        .collect();
    let gate = GateParams {
        w_hidden: Matrix::glorot_uniform(h, d, rng),
        b_hidden: vec![0.0; h],
        w_out: Matrix::glorot_uniform(n, h, rng),
        b_out: vec![0.0; n],
        w_noise: Matrix::glorot_uniform(n, h, rng),
        b_noise: vec![0.0; n],
    };
    Ok(HeadParams {
        config,
        experts,
        gate,
    })
}

#[derive(Debug, Clone)]
struct ExpertTrace {
    pre: Vec<f64>,
    act: Vec<f64>,
    // Adapter branch only, without the skip term.
    branch: Vec<f64>,
    out: Vec<f64>,
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::shape(format!(
            "embedding has dim {}, head expects {expected}",
            x.len()
        )));
    }
    Ok(())
}

fn expert_traced(e: &ExpertParams, x: &[f64]) -> Result<ExpertTrace> {
    let mut pre = matvec(&e.w_down, x)?;
    add_assign(&mut pre, &e.b_down);
    let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
    let mut branch = matvec(&e.w_up, &act)?;
    if branch.len() != x.len() || e.b_up.len() != x.len() {
        return Err(Error::shape(
            "expert up-projection does not restore input dim",
        ));
    }
    add_assign(&mut branch, &e.b_up);
    let out = branch.iter().zip(x).map(|(b, xi)| b + xi).collect();
    Ok(ExpertTrace {
        pre,
        act,
        branch,
        out,
    })
}

/// `x + W_up · gelu(W_down · x + b_down) + b_up`.
pub fn expert_forward(e: &ExpertParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(e.w_down.cols(), x)?;
    Ok(expert_traced(e, x)?.out)
}

#[derive(Debug, Clone)]
struct GateTrace {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    noise_pre: Vec<f64>,
    noise: Option<Vec<f64>>,
    routing: RoutingInfo,
}

fn gate_traced(g: &GateParams, x: &[f64], noise: Option<&[f64]>) -> Result<GateTrace> {
    let n = g.b_out.len();
    let mut hidden_pre = matvec(&g.w_hidden, x)?;
    add_assign(&mut hidden_pre, &g.b_hidden);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&z| gelu(z)).collect();
    let mut clean = matvec(&g.w_out, &hidden)?;
    add_assign(&mut clean, &g.b_out);
    let mut noise_pre = matvec(&g.w_noise, &hidden)?;
    add_assign(&mut noise_pre, &g.b_noise);

    let noisy = match noise {
        Some(eps) => {
            if eps.len() != n {
                return Err(Error::shape(format!(
                    "{} noise draws for {n} experts",
                    eps.len()
                )));
            }
            clean
                .iter()
                .zip(&noise_pre)
                .zip(eps)
                .map(|((c, r), e)| c + e * softplus(*r))
                .collect()
        }
        None => clean.clone(),
    };
    let probs = softmax(&noisy)?;
    let selected = argmax(&noisy);
    Ok(GateTrace {
        hidden_pre,
        hidden,
        noise_pre,
        noise: noise.map(<[f64]>::to_vec),
        routing: RoutingInfo {
            clean_logits: clean,
            noisy_logits: noisy,
            probs,
            selected,
        },
    })
}

/// Draws one standard-normal value per expert.
pub fn draw_gate_noise(n_experts: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n_experts).map(|_| rng.gaussian()).collect()
}

/// Runs the gate. With an rng the logits are perturbed by
/// `eps_i * softplus(noise_i)` (training); without one they are left clean.
pub fn gate_forward(g: &GateParams, x: &[f64], rng: Option<&mut SeededRng>) -> Result<RoutingInfo> {
    check_dim(g.w_hidden.cols(), x)?;
    let eps = rng.map(|r| draw_gate_noise(g.b_out.len(), r));
    Ok(gate_traced(g, x, eps.as_deref())?.routing)
}

/// Intermediate values of one head evaluation.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Vec<f64>,
    gate: GateTrace,
    // Indexed by expert; TOP1 only evaluates the selected one.
    experts: Vec<Option<ExpertTrace>>,
    pub output: Vec<f64>,
}

impl HeadTrace {
    pub fn routing(&self) -> &RoutingInfo {
        &self.gate.routing
    }

    /// Raw output of expert `i`, if it was evaluated.
    pub fn expert_output(&self, i: usize) -> Option<&[f64]> {
        self.experts.get(i)?.as_ref().map(|t| t.out.as_slice())
    }
}

/// Head forward with explicit noise draws (`None` disables noise).
pub fn head_forward_traced(p: &HeadParams, x: &[f64], noise: Option<&[f64]>) -> Result<HeadTrace> {
    check_dim(p.config.dim, x)?;
    let gate = gate_traced(&p.gate, x, noise)?;
    let probs = &gate.routing.probs;
    let mut output = vec![0.0; x.len()];
    let mut experts = vec![None; p.experts.len()];
    match p.config.pooling {
        Pooling::Top1 => {
            let k = gate.routing.selected;
            let t = expert_traced(&p.experts[k], x)?;
            axpy(&mut output, probs[k], &t.out);
            experts[k] = Some(t);
        }
        Pooling::All => {
            // sum_i p_i (x + branch_i) with sum_i p_i = 1, written as
            // x + sum_i p_i branch_i so identity experts return x exactly.
            output.copy_from_slice(x);
            let traces = p
                .experts
                .iter()
                .map(|e| expert_traced(e, x))
                .collect::<Result<Vec<_>>>()?;
            // Accumulate in an order that depends only on the contributions,
            // so permuting the experts leaves the output bit-identical.
            let mut order: Vec<usize> = (0..traces.len()).collect();
            order.sort_by(|&a, &b| {
                probs[a].total_cmp(&probs[b]).then_with(|| {
                    traces[a]
                        .branch
                        .iter()
                        .zip(&traces[b].branch)
                        .map(|(u, v)| u.total_cmp(v))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
            });
            for i in order {
                axpy(&mut output, probs[i], &traces[i].branch);
            }
            experts = traces.into_iter().map(Some).collect();
        }
    }
    Ok(HeadTrace {
        input: x.to_vec(),
        gate,
        experts,
        output,
    })
}

/// Applies the head to one embedding. Pass an rng only for training passes.
pub fn head_forward(
    p: &HeadParams,
    x: &[f64],
    rng: Option<&mut SeededRng>,
) -> Result<(Vec<f64>, RoutingInfo)> {
    let eps = rng.map(|r| draw_gate_noise(p.config.n_experts, r));
    let trace = head_forward_traced(p, x, eps.as_deref())?;
    Ok((trace.output, trace.gate.routing))
}

fn expert_backward(
    e: &ExpertParams,
    t: &ExpertTrace,
    x: &[f64],
    d_out: &[f64],
    grad: &mut ExpertParams,
) {
    // The skip path carries no parameters; only the adapter branch matters.
    add_assign(&mut grad.b_up, d_out);
    grad.w_up.add_outer(d_out, &t.act, 1.0);
    let d_act = matvec_transpose(&e.w_up, d_out).expect("shapes checked in forward");
    let d_pre: Vec<f64> = d_act
        .iter()
        .zip(&t.pre)
        .map(|(da, &z)| da * gelu_grad(z))
        .collect();
    add_assign(&mut grad.b_down, &d_pre);
    grad.w_down.add_outer(&d_pre, x, 1.0);
}

/// Accumulates `d output / d params · d_output` into `grad`.
///
/// Noise draws recorded in the trace are treated as constants and the TOP1
/// selection is held fixed.
pub fn head_backward(p: &HeadParams, trace: &HeadTrace, d_output: &[f64], grad: &mut GradientSet) {
    let x = &trace.input;
    let probs = &trace.gate.routing.probs;
    let n = p.config.n_experts;

    let mut d_probs = vec![0.0; n];
    for (i, t) in trace.experts.iter().enumerate() {
        let Some(t) = t else { continue };
        // Under ALL the shared skip term drops out of the softmax Jacobian.
        d_probs[i] = match p.config.pooling {
            Pooling::Top1 => dot(d_output, &t.out),
            Pooling::All => dot(d_output, &t.branch),
        };
        let d_expert: Vec<f64> = d_output.iter().map(|g| probs[i] * g).collect();
        expert_backward(&p.experts[i], t, x, &d_expert, &mut grad.experts[i]);
    }

    // Softmax Jacobian.
    let mean = dot(probs, &d_probs);
    let d_logits: Vec<f64> = probs
        .iter()
        .zip(&d_probs)
        .map(|(pi, dpi)| pi * (dpi - mean))
        .collect();

    let gate = &trace.gate;
    let g = &mut grad.gate;
    add_assign(&mut g.b_out, &d_logits);
    g.w_out.add_outer(&d_logits, &gate.hidden, 1.0);
    let mut d_hidden =
        matvec_transpose(&p.gate.w_out, &d_logits).expect("shapes checked in forward");

    if let Some(eps) = &gate.noise {
        let d_noise_pre: Vec<f64> = d_logits
            .iter()
            .zip(eps)
            .zip(&gate.noise_pre)
            .map(|((dl, e), r)| dl * e * sigmoid(*r))
            .collect();
        add_assign(&mut g.b_noise, &d_noise_pre);
        g.w_noise.add_outer(&d_noise_pre, &gate.hidden, 1.0);
        let extra =
            matvec_transpose(&p.gate.w_noise, &d_noise_pre).expect("shapes checked in forward");
        add_assign(&mut d_hidden, &extra);
    }

    let d_hidden_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&gate.hidden_pre)
        .map(|(dh, &z)| dh * gelu_grad(z))
        .collect();
    add_assign(&mut g.b_hidden, &d_hidden_pre);
    g.w_hidden.add_outer(&d_hidden_pre, x, 1.0);
}

/// Serialises the head in the `SBMH` model format.
pub fn write_model<W: Write>(p: &HeadParams, mut w: W) -> Result<()> {
    p.validate()?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(p.config.dim as u32).to_le_bytes())?;
    w.write_all(&(p.config.n_experts as u32).to_le_bytes())?;
    w.write_all(&[p.config.pooling.code()])?;
    let mut buf = Vec::with_capacity(p.num_values() * 4);
    for t in p.tensors() {
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<HeadParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

fn decode_model(bytes: &[u8]) -> Result<HeadParams> {
    const HEADER: usize = 17;
    let fmt_err = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER {
        return Err(fmt_err(bytes.len(), "model header truncated".into()));
    }
    if &bytes[0..4] != MODEL_MAGIC {
        return Err(fmt_err(0, "bad magic, expected SBMH".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != MODEL_VERSION {
        return Err(fmt_err(4, format!("unsupported model version {version}")));
    }
    let dim = u32_at(8) as usize;
    let n = u32_at(12) as usize;
    let pooling = Pooling::from_code(bytes[16])
        .ok_or_else(|| fmt_err(16, format!("unknown pooling code {}", bytes[16])))?;
    let config = HeadConfig {
        dim,
        n_experts: n,
        pooling,
    };
    config.validate().map_err(|e| fmt_err(8, e.to_string()))?;
    let mut params = HeadParams::zeros(config);
    let expected = HEADER + params.num_values() * 4;
    if bytes.len() != expected {
        return Err(fmt_err(
            bytes.len().min(expected),
            format!("model body has {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let flat: Vec<f64> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    params.copy_from_flat(&flat)?;
    Ok(params)
}

pub fn save_model(p: &HeadParams, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(p, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HeadParams> {
    decode_model(&std::fs::read(path)?)
}
