//! Soft prompts, the frozen source-prompt bank, the input–prompt attention
//! sub-network and instance-wise prompt interpolation.
//!
//! For an input with embeddings `X`, the composed prompt is
//!
//! ```text
//! x̂      = maxpool(X)                    (masked, per dimension)
//! h_up   = LN(W_upᵀ silu(W_downᵀ x̂))
//! z_j    = p̂_j · h_up · scale            j over bank prompts, then target
//! a      = softmax(z)
//! P_inst = P_target + Σ_j a_j P_j         (target included: weight 1 + a_{t+1})
//! ```
//!
//! with `scale = 1 / (d·e^K)` by default (see [`LogitScaling`]).
//!
//! Each step has a tape-level form (`*_on`) used by training and a value
//! form that builds its own tape.

use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::nn::{hash_tensor, EmbeddedInput, FrozenLm};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    RandomVocab,
    CopiedFromSource,
    Trained,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt<F: Scalar = f32> {
    name: String,
    values: Tensor<F>,
    trainable: bool,
    origin: PromptOrigin,
}

impl<F: Scalar> SoftPrompt<F> {
    pub fn new(name: impl Into<String>, values: Tensor<F>, trainable: bool, origin: PromptOrigin) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::dim("soft prompt", values.shape(), &[]));
        }
        Ok(Self {
            name: name.into(),
            values,
            trainable,
            origin,
        })
    }

    /// `m` embedding rows of uniformly drawn content tokens, trainable.
    pub fn from_random_vocab(name: impl Into<String>, lm: &FrozenLm<F>, m: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("prompt length must be ≥ 1".into()));
        }
        let content = Vocab::new(lm.config().vocab_size)?.content();
        let tokens: Vec<usize> = (0..m).map(|_| rng.between(content.start, content.end - 1)).collect();
        let rows = lm.embed(&tokens)?.x;
        Self::new(name, rows, true, PromptOrigin::RandomVocab)
    }

    /// Trainable copy of `source` under a new name.
    pub fn copied_from(source: &SoftPrompt<F>, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            values: source.values.clone(),
            trainable: true,
            origin: PromptOrigin::CopiedFromSource,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    /// Mutable access, refused for frozen prompts.
    pub fn values_mut(&mut self) -> Result<&mut Tensor<F>> {
        if !self.trainable {
            return Err(Error::Config(format!("prompt `{}` is frozen", self.name)));
        }
        Ok(&mut self.values)
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn origin(&self) -> PromptOrigin {
        self.origin
    }

    pub fn freeze(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.values.numel()
    }

    pub fn cast<G: Scalar>(&self) -> SoftPrompt<G> {
        SoftPrompt {
            name: self.name.clone(),
            values: self.values.cast(),
            trainable: self.trainable,
            origin: self.origin,
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        hash_tensor(&mut h, &self.name, &self.values);
        hex::encode(h.finalize())
    }
}

/// Ordered, frozen source prompts. Index `j` in attention vectors refers to
/// this order. Pooled and flattened views are computed once; they cannot go
/// stale because the bank only admits frozen prompts and never hands out
/// mutable access.
#[derive(Debug)]
pub struct PromptBank<F: Scalar = f32> {
    prompts: Vec<SoftPrompt<F>>,
    pooled: OnceLock<Option<Tensor<F>>>,
    stacked: OnceLock<Option<Tensor<F>>>,
}

impl<F: Scalar> Clone for PromptBank<F> {
    fn clone(&self) -> Self {
        Self {
            prompts: self.prompts.clone(),
            pooled: OnceLock::new(),
            stacked: OnceLock::new(),
        }
    }
}

impl<F: Scalar> PartialEq for PromptBank<F> {
    fn eq(&self, other: &Self) -> bool {
        self.prompts == other.prompts
    }
}

impl<F: Scalar> PromptBank<F> {
    pub fn new(prompts: Vec<SoftPrompt<F>>) -> Result<Self> {
        let mut names = HashSet::new();
        for p in &prompts {
            if p.is_trainable() {
                return Err(Error::Config(format!("bank prompt `{}` must be frozen", p.name())));
            }
            if !names.insert(p.name().to_string()) {
                return Err(Error::Config(format!("duplicate bank prompt `{}`", p.name())));
            }
            if p.values().shape() != prompts[0].values().shape() {
                return Err(Error::dim("prompt bank", prompts[0].values().shape(), p.values().shape()));
            }
        }
        Ok(Self {
            prompts,
            pooled: OnceLock::new(),
            stacked: OnceLock::new(),
        })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new()).expect("empty bank is valid")
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[SoftPrompt<F>] {
        &self.prompts
    }

    pub fn names(&self) -> Vec<&str> {
        self.prompts.iter().map(|p| p.name()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&SoftPrompt<F>> {
        self.prompts.iter().find(|p| p.name() == name)
    }

    /// Prompt shape `(m, d)`, if the bank is nonempty.
    pub fn prompt_shape(&self) -> Option<(usize, usize)> {
        self.prompts.first().map(|p| (p.len(), p.dim()))
    }

    /// Bank reduced to the single prompt `name`.
    pub fn restrict(&self, name: &str) -> Result<Self> {
        let p = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("no bank prompt named `{name}`")))?;
        Self::new(vec![p.clone()])
    }

    /// `t×d` matrix of per-prompt max-pooled rows.
    pub fn pooled(&self) -> Option<&Tensor<F>> {
        self.pooled
            .get_or_init(|| {
                let (_, d) = self.prompt_shape()?;
                let data = self.prompts.iter().flat_map(|p| pool_prompt(p).into_data()).collect();
                Some(Tensor::matrix(self.len(), d, data).expect("pooled shape"))
            })
            .as_ref()
    }

    /// `t×(m·d)` matrix of flattened prompts.
    pub fn stacked(&self) -> Option<&Tensor<F>> {
        self.stacked
            .get_or_init(|| {
                let (m, d) = self.prompt_shape()?;
                let data = self.prompts.iter().flat_map(|p| p.values().data().to_vec()).collect();
                Some(Tensor::matrix(self.len(), m * d, data).expect("stacked shape"))
            })
            .as_ref()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.prompts {
            hash_tensor(&mut h, p.name(), p.values());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<G: Scalar>(&self) -> PromptBank<G> {
        PromptBank {
            prompts: self.prompts.iter().map(SoftPrompt::cast).collect(),
            pooled: OnceLock::new(),
            stacked: OnceLock::new(),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, F>) -> BoundBank {
        BoundBank {
            pooled: self.pooled().map(|t| tape.constant(t)),
            stacked: self.stacked().map(|t| tape.constant(t)),
            len: self.len(),
        }
    }
}

/// A bank registered on a tape (as constants).
#[derive(Clone, Copy, Debug)]
pub struct BoundBank {
    pooled: Option<Var>,
    stacked: Option<Var>,
    len: usize,
}

impl BoundBank {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// How the logit scale is derived from the temperature `K` and model width `d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitScaling {
    /// Logits divided by `d·e^K`.
    #[default]
    InverseDExpK,
    /// Logits multiplied by `e^K / d`.
    ExpKOverD,
}

/// The attention sub-network: down/up projection, SiLU, layer norm and a
/// temperature-scaled softmax over pooled prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModule<F: Scalar = f32> {
    pub w_down: Tensor<F>,
    pub w_up: Tensor<F>,
    pub ln_gain: Tensor<F>,
    pub ln_bias: Tensor<F>,
    pub temperature: f64,
    pub scaling: LogitScaling,
}

impl<F: Scalar> AttentionModule<F> {
    pub const PARAM_NAMES: [&'static str; 4] = ["w_down", "w_up", "ln_gain", "ln_bias"];

    /// Gaussian projections with std `1/√fan_in`; norm at gain 1, bias 0.
    pub fn new(d: usize, r: usize, temperature: f64, rng: &mut Rng) -> Result<Self> {
        if r == 0 || r >= d {
            return Err(Error::Config(format!("bottleneck r={r} must satisfy 0 < r < d={d}")));
        }
        Ok(Self {
            w_down: Tensor::randn(&[d, r], 1.0 / (d as f64).sqrt(), rng),
            w_up: Tensor::randn(&[r, d], 1.0 / (r as f64).sqrt(), rng),
            ln_gain: Tensor::full(&[d], F::one()),
            ln_bias: Tensor::zeros(&[d]),
            temperature,
            scaling: LogitScaling::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.shape()[1]
    }

    pub fn logit_scale(&self) -> f64 {
        let d = self.dim() as f64;
        match self.scaling {
            LogitScaling::InverseDExpK => 1.0 / (d * self.temperature.exp()),
            LogitScaling::ExpKOverD => self.temperature.exp() / d,
        }
    }

    /// `2rd + 2d`.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn tensors(&self) -> [&Tensor<F>; 4] {
        [&self.w_down, &self.w_up, &self.ln_gain, &self.ln_bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<F>; 4] {
        [&mut self.w_down, &mut self.w_up, &mut self.ln_gain, &mut self.ln_bias]
    }

    /// Checks that every tensor has the shape a fresh `d×r` module would.
    pub fn validate(&self) -> Result<()> {
        let (d, r) = (self.dim(), self.bottleneck());
        let expect: [&[usize]; 4] = [&[d, r], &[r, d], &[d], &[d]];
        for (t, e) in self.tensors().iter().zip(expect) {
            if t.shape() != e {
                return Err(Error::dim("attention module", t.shape(), e));
            }
        }
        if r >= d {
            return Err(Error::Config(format!("bottleneck r={r} must be < d={d}")));
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> AttentionModule<G> {
        AttentionModule {
            w_down: self.w_down.cast(),
            w_up: self.w_up.cast(),
            ln_gain: self.ln_gain.cast(),
            ln_bias: self.ln_bias.cast(),
            temperature: self.temperature,
            scaling: self.scaling,
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, F>, trainable: bool) -> BoundAttention {
        let mut leaf = |t: &'a Tensor<F>| if trainable { tape.param(t) } else { tape.constant(t) };
        BoundAttention {
            w_down: leaf(&self.w_down),
            w_up: leaf(&self.w_up),
            ln_gain: leaf(&self.ln_gain),
            ln_bias: leaf(&self.ln_bias),
            scale: self.logit_scale(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub w_down: Var,
    pub w_up: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub scale: f64,
}

impl BoundAttention {
    pub fn vars(&self) -> [Var; 4] {
        [self.w_down, self.w_up, self.ln_gain, self.ln_bias]
    }
}

/// Attention over prompts in bank order, with the target (when present) last.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<F: Scalar = f32> {
    pub weights: Tensor<F>,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrompt<F: Scalar = f32> {
    pub prompt: Tensor<F>,
    pub attention: AttentionWeights<F>,
}

/// Ablation switches for the composition and training regimes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Drop the target prompt from both the attention set and the sum.
    pub no_target: bool,
    /// Replace learned attention by `1/t` on every source prompt.
    pub constant_attention: bool,
    /// Restrict the bank to one named source prompt.
    pub single_source: Option<String>,
    /// Start target training from a fresh attention module.
    pub no_prior: bool,
}

impl AblationFlags {
    pub fn none() -> Self {
        Self::default()
    }

    /// Bank seen by composition under these flags.
    pub fn effective_bank<F: Scalar>(&self, bank: &PromptBank<F>) -> Result<PromptBank<F>> {
        match &self.single_source {
            Some(name) => bank.restrict(name),
            None => Ok(bank.clone()),
        }
    }

    fn check(&self, bank_len: usize) -> Result<()> {
        if self.no_target && bank_len == 0 {
            return Err(Error::Config("no_target requires at least one source prompt".into()));
        }
        if self.constant_attention && bank_len == 0 {
            return Err(Error::Config("constant attention over an empty bank".into()));
        }
        Ok(())
    }
}

pub fn pool_prompt<F: Scalar>(p: &SoftPrompt<F>) -> Tensor<F> {
    let mut tape = Tape::new();
    let v = tape.constant(p.values());
    let mask = vec![true; p.len()];
    let out = tape.max_pool_seq(v, &mask).expect("prompt has at least one row");
    tape.value(out).clone()
}

pub fn pool_input<F: Scalar>(x: &EmbeddedInput<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let v = tape.constant(&x.x);
    let out = tape.max_pool_seq(v, &x.mask)?;
    Ok(tape.value(out).clone())
}

/// `LN(W_upᵀ silu(W_downᵀ x̂))` for a length-`d` `x_hat`.
pub fn project_on<F: Scalar>(tape: &mut Tape<'_, F>, g: &BoundAttention, x_hat: Var) -> Result<Var> {
    let d = tape.value(x_hat).numel();
    let row = tape.reshape(x_hat, &[1, d])?;
    let down = tape.matmul(row, g.w_down)?;
    let act = tape.silu(down);
    let up = tape.matmul(act, g.w_up)?;
    let normed = tape.layer_norm(up, g.ln_gain, g.ln_bias, LN_EPS)?;
    tape.reshape(normed, &[d])
}

/// Softmax over scaled dot products between `pooled` rows and `h_up`.
pub fn attend_on<F: Scalar>(tape: &mut Tape<'_, F>, g: &BoundAttention, h_up: Var, pooled: Var) -> Result<Var> {
    let d = tape.value(h_up).numel();
    let k = tape.value(pooled).shape()[0];
    let col = tape.reshape(h_up, &[d, 1])?;
    let logits = tape.matmul(pooled, col)?;
    let logits = tape.scale(logits, F::of(g.scale));
    if !tape.value(logits).is_finite() {
        return Err(Error::Numeric("attention logits".into()));
    }
    let logits = tape.reshape(logits, &[k])?;
    tape.softmax(logits)
}

/// `Σ_j a_j P_j` over the rows of `stacked` (`k×(m·d)`), reshaped to `m×d`.
fn mixture_on<F: Scalar>(tape: &mut Tape<'_, F>, a: Var, stacked: Var, m: usize, d: usize) -> Result<Var> {
    let k = tape.value(a).numel();
    let row = tape.reshape(a, &[1, k])?;
    let mix = tape.matmul(row, stacked)?;
    tape.reshape(mix, &[m, d])
}

/// Output of [`compose_on`].
#[derive(Clone, Copy, Debug)]
pub struct Composed {
    pub prompt: Var,
    pub attention: Var,
}

/// The full pool → project → attend → interpolate pipeline on a tape.
///
/// `target` is the (possibly trainable) target prompt and is required unless
/// `flags.no_target`. `g` may be `None` only under constant attention.
/// `single_source` is not applied here; pass the restricted bind.
pub fn compose_on<F: Scalar>(
    tape: &mut Tape<'_, F>,
    bank: &BoundBank,
    target: Option<Var>,
    g: Option<&BoundAttention>,
    x_hat: Var,
    flags: &AblationFlags,
) -> Result<Composed> {
    flags.check(bank.len)?;
    let target = if flags.no_target {
        None
    } else {
        Some(target.ok_or_else(|| Error::Config("target prompt required unless no_target".into()))?)
    };
    let (m, d) = match (target, bank.stacked) {
        (Some(t), _) => {
            let s = tape.value(t).shape();
            (s[0], s[1])
        }
        (None, Some(_)) => {
            let d = tape.value(x_hat).numel();
            let md = tape.value(bank.stacked.unwrap()).shape()[1];
            (md / d, d)
        }
        (None, None) => unreachable!("checked by flags.check"),
    };
    if tape.value(x_hat).numel() != d {
        return Err(Error::dim("compose", tape.value(x_hat).shape(), &[d]));
    }

    if flags.constant_attention {
        let t = bank.len;
        let a = tape.input(Tensor::full(&[t], F::of(1.0 / t as f64)), false);
        let mix = mixture_on(tape, a, bank.stacked.expect("nonempty bank"), m, d)?;
        let prompt = match target {
            Some(tv) => tape.add(tv, mix)?,
            None => mix,
        };
        return Ok(Composed { prompt, attention: a });
    }

    let g = g.ok_or_else(|| Error::Config("attention module required".into()))?;
    let mut pooled_parts = Vec::new();
    let mut stacked_parts = Vec::new();
    if let (Some(p), Some(s)) = (bank.pooled, bank.stacked) {
        pooled_parts.push(p);
        stacked_parts.push(s);
    }
    if let Some(tv) = target {
        let mask = vec![true; m];
        let pooled_t = tape.max_pool_seq(tv, &mask)?;
        pooled_parts.push(tape.reshape(pooled_t, &[1, d])?);
        stacked_parts.push(tape.reshape(tv, &[1, m * d])?);
    }
    let pooled = tape.concat_rows(&pooled_parts)?;
    let stacked = tape.concat_rows(&stacked_parts)?;
    let h_up = project_on(tape, g, x_hat)?;
    let a = attend_on(tape, g, h_up, pooled)?;
    let mix = mixture_on(tape, a, stacked, m, d)?;
    let prompt = match target {
        Some(tv) => tape.add(tv, mix)?,
        None => mix,
    };
    Ok(Composed { prompt, attention: a })
}

/// `[P; X]` with prompt positions always attendable.
pub fn prepend_on<F: Scalar>(tape: &mut Tape<'_, F>, prompt: Var, x: Var, x_mask: &[bool]) -> Result<(Var, Vec<bool>)> {
    let m = tape.value(prompt).shape()[0];
    let cat = tape.concat_rows(&[prompt, x])?;
    let mut mask = vec![true; m];
    mask.extend_from_slice(x_mask);
    Ok((cat, mask))
}

pub fn project<F: Scalar>(g: &AttentionModule<F>, x_hat: &Tensor<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, false);
    let x = tape.constant(x_hat);
    let out = project_on(&mut tape, &bound, x)?;
    Ok(tape.value(out).clone())
}

/// Attention of `x_hat` over the rows of `pooled` (bank order, target last).
pub fn attend<F: Scalar>(g: &AttentionModule<F>, x_hat: &Tensor<F>, pooled: &Tensor<F>) -> Result<Tensor<F>> {
    if pooled.shape().len() != 2 || pooled.shape()[1] != x_hat.numel() {
        return Err(Error::dim("attend", pooled.shape(), x_hat.shape()));
    }
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, false);
    let x = tape.constant(x_hat);
    let p = tape.constant(pooled);
    let h = project_on(&mut tape, &bound, x)?;
    let a = attend_on(&mut tape, &bound, h, p)?;
    Ok(tape.value(a).clone())
}

fn prompt_labels<F: Scalar>(bank: &PromptBank<F>, with_target: bool) -> Vec<String> {
    let mut labels: Vec<String> = bank.names().into_iter().map(str::to_string).collect();
    if with_target {
        labels.push("target".into());
    }
    labels
}

/// `P_target + Σ_{j≤t} a_j P_j + a_{t+1} P_target`.
pub fn interpolate<F: Scalar>(bank: &PromptBank<F>, target: &SoftPrompt<F>, a: &Tensor<F>) -> Result<InstancePrompt<F>> {
    if a.numel() != bank.len() + 1 {
        return Err(Error::dim("interpolate", &[bank.len() + 1], a.shape()));
    }
    if let Some(shape) = bank.prompt_shape() {
        if shape != (target.len(), target.dim()) {
            return Err(Error::dim("interpolate", &[shape.0, shape.1], target.values().shape()));
        }
    }
    let (m, d) = (target.len(), target.dim());
    let mut tape = Tape::new();
    let vt = tape.constant(target.values());
    let flat_t = tape.reshape(vt, &[1, m * d])?;
    let stacked = match bank.stacked() {
        Some(s) => {
            let s = tape.constant(s);
            tape.concat_rows(&[s, flat_t])?
        }
        None => flat_t,
    };
    let av = tape.constant(a);
    let mix = mixture_on(&mut tape, av, stacked, m, d)?;
    let out = tape.add(vt, mix)?;
    Ok(InstancePrompt {
        prompt: tape.value(out).clone(),
        attention: AttentionWeights {
            weights: a.clone(),
            labels: prompt_labels(bank, true),
        },
    })
}

/// Instance-wise prompt for `x` under `flags` (value form).
pub fn compose_instance_prompt<F: Scalar>(
    bank: &PromptBank<F>,
    target: Option<&SoftPrompt<F>>,
    g: Option<&AttentionModule<F>>,
    x: &EmbeddedInput<F>,
    flags: &AblationFlags,
) -> Result<InstancePrompt<F>> {
    let bank = flags.effective_bank(bank)?;
    let mut tape = Tape::new();
    let bb = bank.bind(&mut tape);
    let tv = target.map(|t| tape.constant(t.values()));
    let gb = g.map(|g| g.bind(&mut tape, false));
    let xv = tape.constant(&x.x);
    let x_hat = tape.max_pool_seq(xv, &x.mask)?;
    let c = compose_on(&mut tape, &bb, tv, gb.as_ref(), x_hat, flags)?;
    Ok(InstancePrompt {
        prompt: tape.value(c.prompt).clone(),
        attention: AttentionWeights {
            weights: tape.value(c.attention).clone(),
            labels: prompt_labels(&bank, !flags.no_target && !flags.constant_attention),
        },
    })
}

/// Cosine of the flattened prompts.
pub fn cosine_similarity<F: Scalar>(p1: &SoftPrompt<F>, p2: &SoftPrompt<F>) -> Result<f64> {
    if p1.values().shape() != p2.values().shape() {
        return Err(Error::dim("cosine_similarity", p1.values().shape(), p2.values().shape()));
    }
    let (a, b) = (p1.values().data(), p2.values().data());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum();
    let na = a.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    for (n, p) in [(na, p1), (nb, p2)] {
        if n == 0.0 {
            return Err(Error::DegenerateNorm(p.name().to_string()));
        }
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Bank prompt most cosine-similar to `reference` (first on ties).
pub fn most_similar_source<F: Scalar>(bank: &PromptBank<F>, reference: &SoftPrompt<F>) -> Result<String> {
    let mut best: Option<(f64, &str)> = None;
    for p in bank.prompts() {
        let c = cosine_similarity(p, reference)?;
        if best.is_none_or(|(b, _)| c > b) {
            best = Some((c, p.name()));
        }
    }
    best.map(|(_, n)| n.to_string())
        .ok_or_else(|| Error::Config("empty bank".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::random;

    fn prompt(name: &str, t: Tensor<f64>) -> SoftPrompt<f64> {
        SoftPrompt::new(name, t, false, PromptOrigin::Trained).unwrap()
    }

    fn bank(n: usize, m: usize, d: usize, seed: u64) -> PromptBank<f64> {
        PromptBank::new((0..n).map(|j| prompt(&format!("s{j}"), random(&[m, d], seed + j as u64))).collect()).unwrap()
    }

    fn target(m: usize, d: usize, seed: u64) -> SoftPrompt<f64> {
        SoftPrompt::new("target", random(&[m, d], seed), true, PromptOrigin::RandomVocab).unwrap()
    }

    fn input(l: usize, d: usize, seed: u64) -> EmbeddedInput<f64> {
        EmbeddedInput {
            x: random(&[l, d], seed),
            mask: vec![true; l],
            tokens: vec![5; l],
        }
    }

    #[test]
    fn pool_input_single_row_and_permutation() {
        let x = input(1, 6, 1);
        assert_eq!(pool_input(&x).unwrap().data(), x.x.data());
        let x = input(5, 6, 2);
        let mut rows: Vec<Vec<f64>> = (0..5).map(|i| x.x.row(i).to_vec()).collect();
        rows.reverse();
        rows.swap(0, 2);
        let y = EmbeddedInput {
            x: Tensor::from_rows(&rows).unwrap(),
            ..x.clone()
        };
        assert_eq!(pool_input(&x).unwrap(), pool_input(&y).unwrap());
    }

    #[test]
    fn pool_input_matches_brute_force_masked_max() {
        let mut x = input(9, 16, 3);
        x.mask = vec![true, false, true, true, false, true, true, true, false];
        let got = pool_input(&x).unwrap();
        for j in 0..16 {
            let want = (0..9)
                .filter(|&i| x.mask[i])
                .map(|i| x.x.data()[i * 16 + j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(got.data()[j], want);
        }
        x.mask = vec![false; 9];
        assert!(matches!(pool_input(&x), Err(Error::EmptyPool)));
    }

    #[test]
    fn pool_prompt_cases() {
        let p = prompt("p", Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap());
        assert_eq!(pool_prompt(&p).data(), &[1.0, 2.0]);
        let p = prompt("q", Tensor::from_rows(&[vec![3.0, -2.0]]).unwrap());
        assert_eq!(pool_prompt(&p).data(), &[3.0, -2.0]);
    }

    #[test]
    fn zero_down_projection_yields_ln_bias() {
        let mut g = AttentionModule::<f64>::new(8, 3, 1.0, &mut Rng::new(1)).unwrap();
        g.w_down = Tensor::zeros(&[8, 3]);
        g.ln_bias = random(&[8], 4);
        let out = project(&g, &random(&[8], 5)).unwrap();
        assert_eq!(out, g.ln_bias);
    }

    #[test]
    fn bottleneck_must_be_below_dim() {
        assert!(AttentionModule::<f64>::new(8, 8, 1.0, &mut Rng::new(1)).is_err());
        let g = AttentionModule::<f64>::new(8, 3, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!((g.dim(), g.bottleneck(), g.param_count()), (8, 3, 2 * 3 * 8 + 2 * 8));
    }

    #[test]
    fn project_gradients_match_finite_differences() {
        use crate::tensor::gradcheck::check;
        for seed in 0..20 {
            let g = AttentionModule::<f64>::new(8, 3, 1.0, &mut Rng::new(seed)).unwrap();
            let inputs = [
                g.w_down.clone(),
                g.w_up.clone(),
                random(&[8], seed + 20),
                random(&[8], seed + 40),
                random(&[8], seed + 60),
                random(&[8], seed + 80),
            ];
            let f = |t: &mut Tape<'_, f64>, v: &[Var]| -> Result<Var> {
                let b = BoundAttention {
                    w_down: v[0],
                    w_up: v[1],
                    ln_gain: v[2],
                    ln_bias: v[3],
                    scale: 1.0,
                };
                let h = project_on(t, &b, v[4])?;
                let w = t.mul(h, v[5])?;
                Ok(t.sum(w))
            };
            for which in 0..4 {
                let err = check(&inputs, which, 1e-5, &f);
                assert!(err < 1e-4, "seed {seed} param {which}: {err}");
            }
        }
    }

    #[test]
    fn identical_pooled_prompts_give_uniform_attention() {
        let g = AttentionModule::<f64>::new(6, 2, 1.0, &mut Rng::new(2)).unwrap();
        let row = random(&[6], 9);
        let pooled = Tensor::matrix(4, 6, row.data().repeat(4)).unwrap();
        let a = attend(&g, &random(&[6], 1), &pooled).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn huge_temperature_flattens_attention() {
        let mut g = AttentionModule::<f64>::new(6, 2, 1.0, &mut Rng::new(2)).unwrap();
        g.temperature = 60.0;
        let a = attend(&g, &random(&[6], 1), &random(&[3, 6], 2)).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-9));
    }

    #[test]
    fn attention_matches_hand_computed_logits() {
        let g = AttentionModule::<f64>::new(6, 2, 1.0, &mut Rng::new(7)).unwrap();
        let x_hat = random(&[6], 3);
        let pooled = random(&[3, 6], 4); // t = 2 sources + target
        // H_down = W_downᵀ x̂
        let mut down = [0.0; 2];
        for (k, dk) in down.iter_mut().enumerate() {
            for i in 0..6 {
                *dk += g.w_down.data()[i * 2 + k] * x_hat.data()[i];
            }
        }
        let act: Vec<f64> = down.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let mut up = [0.0; 6];
        for (j, uj) in up.iter_mut().enumerate() {
            for k in 0..2 {
                *uj += g.w_up.data()[k * 6 + j] * act[k];
            }
        }
        let mean = up.iter().sum::<f64>() / 6.0;
        let var = up.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        let h: Vec<f64> = up.iter().map(|v| (v - mean) / (var + 1e-6).sqrt()).collect();
        let logits: Vec<f64> = (0..3)
            .map(|j| (0..6).map(|i| pooled.data()[j * 6 + i] * h[i]).sum::<f64>() / (6.0 * 1f64.exp()))
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let want: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let got = attend(&g, &x_hat, &pooled).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn alternative_scaling_multiplies_by_exp_k_over_d() {
        let mut g = AttentionModule::<f64>::new(6, 2, 1.0, &mut Rng::new(7)).unwrap();
        assert!((g.logit_scale() - 1.0 / (6.0 * 1f64.exp())).abs() < 1e-15);
        g.scaling = LogitScaling::ExpKOverD;
        assert!((g.logit_scale() - 1f64.exp() / 6.0).abs() < 1e-15);
    }

    #[test]
    fn interpolation_closed_forms() {
        let b = bank(3, 2, 4, 10);
        let t = target(2, 4, 1);
        let mut onehot = vec![0.0; 4];
        onehot[3] = 1.0;
        let p = interpolate(&b, &t, &Tensor::vector(onehot)).unwrap();
        let twice = t.values().map(|v| 2.0 * v);
        assert!(p.prompt.max_abs_diff(&twice).unwrap() < 1e-12);

        let mut onehot = vec![0.0; 4];
        onehot[1] = 1.0;
        let p = interpolate(&b, &t, &Tensor::vector(onehot)).unwrap();
        for k in 0..8 {
            let want = t.values().data()[k] + b.prompts()[1].values().data()[k];
            assert!((p.prompt.data()[k] - want).abs() < 1e-12);
        }

        let p = interpolate(&b, &t, &Tensor::vector(vec![0.25; 4])).unwrap();
        for k in 0..8 {
            let sources: f64 = b.prompts().iter().map(|s| s.values().data()[k]).sum();
            let want = t.values().data()[k] * 1.25 + 0.25 * sources;
            assert!((p.prompt.data()[k] - want).abs() < 1e-6);
        }
        assert!(matches!(interpolate(&b, &t, &Tensor::vector(vec![0.5; 3])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn empty_bank_doubles_target() {
        let t = target(3, 4, 2);
        let g = AttentionModule::<f64>::new(4, 2, 1.0, &mut Rng::new(1)).unwrap();
        let p = compose_instance_prompt(&PromptBank::empty(), Some(&t), Some(&g), &input(5, 4, 3), &AblationFlags::none()).unwrap();
        assert_eq!(p.attention.weights.data(), &[1.0]);
        assert!(p.prompt.max_abs_diff(&t.values().map(|v| 2.0 * v)).unwrap() < 1e-12);
    }

    #[test]
    fn no_target_output_is_convex_combination_of_sources() {
        let b = bank(3, 2, 5, 20);
        let g = AttentionModule::<f64>::new(5, 2, 1.0, &mut Rng::new(1)).unwrap();
        let flags = AblationFlags {
            no_target: true,
            ..AblationFlags::default()
        };
        let p = compose_instance_prompt(&b, None, Some(&g), &input(4, 5, 1), &flags).unwrap();
        assert_eq!(p.attention.weights.numel(), 3);
        for k in 0..10 {
            let vals: Vec<f64> = b.prompts().iter().map(|s| s.values().data()[k]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(p.prompt.data()[k] >= lo - 1e-12 && p.prompt.data()[k] <= hi + 1e-12);
        }
        let err = compose_instance_prompt(&PromptBank::empty(), None, Some(&g), &input(4, 5, 1), &flags);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn constant_attention_matches_average_formula() {
        let b = bank(3, 2, 4, 30);
        let t = target(2, 4, 5);
        let flags = AblationFlags {
            constant_attention: true,
            ..AblationFlags::default()
        };
        let p = compose_instance_prompt(&b, Some(&t), None, &input(3, 4, 1), &flags).unwrap();
        for k in 0..8 {
            let mean: f64 = b.prompts().iter().map(|s| s.values().data()[k]).sum::<f64>() / 3.0;
            assert!((p.prompt.data()[k] - (t.values().data()[k] + mean)).abs() < 1e-6);
        }
    }

    #[test]
    fn single_source_restricts_bank() {
        let b = bank(3, 2, 4, 40);
        let t = target(2, 4, 5);
        let g = AttentionModule::<f64>::new(4, 2, 1.0, &mut Rng::new(1)).unwrap();
        let flags = AblationFlags {
            single_source: Some("s1".into()),
            ..AblationFlags::default()
        };
        let p = compose_instance_prompt(&b, Some(&t), Some(&g), &input(3, 4, 1), &flags).unwrap();
        assert_eq!(p.attention.labels, vec!["s1".to_string(), "target".into()]);
        let a = p.attention.weights.data();
        let manual = interpolate(&b.restrict("s1").unwrap(), &t, &p.attention.weights).unwrap();
        assert!(p.prompt.max_abs_diff(&manual.prompt).unwrap() < 1e-12);
        assert!((a[0] + a[1] - 1.0).abs() < 1e-12);
        let missing = AblationFlags {
            single_source: Some("nope".into()),
            ..AblationFlags::default()
        };
        assert!(compose_instance_prompt(&b, Some(&t), Some(&g), &input(3, 4, 1), &missing).is_err());
    }

    #[test]
    fn distinct_inputs_get_distinct_attention() {
        let b = bank(3, 4, 16, 50);
        let t = target(4, 16, 6);
        let g = AttentionModule::<f64>::new(16, 5, 1.0, &mut Rng::new(3)).unwrap();
        let f = AblationFlags::none();
        let a1 = compose_instance_prompt(&b, Some(&t), Some(&g), &input(6, 16, 1), &f).unwrap();
        let a2 = compose_instance_prompt(&b, Some(&t), Some(&g), &input(6, 16, 2), &f).unwrap();
        let diff = a1.attention.weights.max_abs_diff(&a2.attention.weights).unwrap();
        assert!(diff > 1e-9, "{diff}");
    }

    #[test]
    fn compose_is_bit_deterministic() {
        let b = bank(2, 3, 8, 60);
        let t = target(3, 8, 7);
        let g = AttentionModule::<f64>::new(8, 3, 1.0, &mut Rng::new(4)).unwrap();
        let x = input(5, 8, 9);
        let f = AblationFlags::none();
        let p1 = compose_instance_prompt(&b, Some(&t), Some(&g), &x, &f).unwrap();
        let p2 = compose_instance_prompt(&b, Some(&t), Some(&g), &x, &f).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn bank_validation() {
        let p = prompt("a", random(&[2, 3], 1));
        assert!(PromptBank::new(vec![p.clone(), p.clone()]).is_err());
        let q = prompt("b", random(&[3, 3], 1));
        assert!(PromptBank::new(vec![p.clone(), q]).is_err());
        let trainable = SoftPrompt::new("c", random(&[2, 3], 1), true, PromptOrigin::RandomVocab).unwrap();
        assert!(PromptBank::new(vec![p, trainable]).is_err());
    }

    #[test]
    fn frozen_prompt_refuses_mutation() {
        let mut p = prompt("a", random(&[2, 3], 1));
        assert!(p.values_mut().is_err());
        let mut c = SoftPrompt::copied_from(&p, "t");
        assert!(c.is_trainable());
        assert_eq!(c.origin(), PromptOrigin::CopiedFromSource);
        c.values_mut().unwrap().data_mut()[0] = 9.0;
        assert_ne!(c.values(), p.values());
    }

    #[test]
    fn cosine_similarity_cases() {
        let p = prompt("a", random(&[2, 3], 1));
        let neg = prompt("n", p.values().map(|v| -v));
        let scaled = prompt("s", p.values().map(|v| 3.0 * v));
        assert!((cosine_similarity(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&p, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&p, &scaled).unwrap() - 1.0).abs() < 1e-12);
        let zero = prompt("z", Tensor::zeros(&[2, 3]));
        assert!(matches!(cosine_similarity(&p, &zero), Err(Error::DegenerateNorm(_))));
        let b = PromptBank::new(vec![neg, scaled]).unwrap();
        assert_eq!(most_similar_source(&b, &p).unwrap(), "s");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::rng::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn attention_is_a_distribution(seed in 0u64..10_000, t in 0usize..5) {
                let b = bank(t, 3, 8, seed);
                let tg = target(3, 8, seed + 99);
                let g = AttentionModule::<f64>::new(8, 3, 1.0, &mut Rng::new(seed)).unwrap();
                let p = compose_instance_prompt(&b, Some(&tg), Some(&g), &input(4, 8, seed + 7), &AblationFlags::none()).unwrap();
                let a = p.attention.weights;
                prop_assert_eq!(a.numel(), t + 1);
                prop_assert!(a.data().iter().all(|&v| v > 0.0));
                prop_assert!((a.sum() - 1.0).abs() < 1e-6);
            }

            #[test]
            fn interpolation_is_affine_in_attention(seed in 0u64..10_000, lambda in 0.0f64..1.0) {
                let b = bank(3, 2, 4, seed);
                let t = target(2, 4, seed + 5);
                let mut rng = Rng::new(seed);
                let mut simplex = || {
                    let raw: Vec<f64> = (0..4).map(|_| rng.uniform() + 1e-3).collect();
                    let s: f64 = raw.iter().sum();
                    Tensor::vector(raw.into_iter().map(|v| v / s).collect())
                };
                let (a, a2) = (simplex(), simplex());
                let mixed = Tensor::vector(a.data().iter().zip(a2.data()).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect());
                let lhs = interpolate(&b, &t, &mixed).unwrap().prompt;
                let pa = interpolate(&b, &t, &a).unwrap().prompt;
                let pb = interpolate(&b, &t, &a2).unwrap().prompt;
                let rhs = Tensor::vector(
                    pa.data().iter().zip(pb.data()).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect(),
                );
                prop_assert!(lhs.reshape(&[8]).unwrap().max_abs_diff(&rhs).unwrap() < 1e-6);
            }

            #[test]
            fn raising_temperature_flattens_attention(seed in 0u64..10_000, k in -2.0f64..3.0) {
                let mut g = AttentionModule::<f64>::new(8, 3, k, &mut Rng::new(seed)).unwrap();
                let x = random(&[8], seed + 1);
                let pooled = random(&[4, 8], seed + 2).map(|v| v * 20.0);
                let before = attend(&g, &x, &pooled).unwrap();
                g.temperature = k + 0.5;
                let after = attend(&g, &x, &pooled).unwrap();
                let max = |t: &Tensor<f64>| t.data().iter().copied().fold(0.0, f64::max);
                prop_assert!(max(&after) < max(&before));
            }
        }
    }
}
