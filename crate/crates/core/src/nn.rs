//! Tiny pre-LN encoder–decoder language model used as the frozen backbone.
//!
//! Soft prompts are prepended on the encoder side; the decoder is teacher
//! forced from `bos`. Positions are learned absolute embeddings and prompt
//! rows occupy positions `0..m`. Once a [`FrozenLm`] exists its weights can
//! only be read: there is no mutable accessor, and [`FrozenLm::bind`] puts
//! them on a tape as constants.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, GenOptions, TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var, MASK_BIAS};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub pad_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
    pub init_scale: f64,
    pub pretrain: PretrainConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 256,
            max_len: 128,
            pad_id: data::PAD,
            bos_id: data::BOS,
            eos_id: data::EOS,
            init_scale: 0.02,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl LmConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model_dim == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.model_dim % self.n_heads != 0 {
            return bad(format!("model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads));
        }
        for (name, id) in [("pad_id", self.pad_id), ("bos_id", self.bos_id), ("eos_id", self.eos_id)] {
            if id >= self.vocab_size {
                return bad(format!("{name} {id} outside vocabulary {}", self.vocab_size));
            }
        }
        if self.init_scale <= 0.0 {
            return bad("init_scale must be positive".into());
        }
        Ok(())
    }
}

/// Optional denoising pass over the backbone before it is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Transformations mixed into pretraining, each behind a fixed
    /// instruction prefix. Empty means plain denoising without prefixes.
    pub instructed: Vec<TaskKind>,
    pub instruction_len: usize,
    /// See [`GenOptions::content_tokens`].
    pub content_tokens: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            batch_size: 16,
            lr: 1e-3,
            mask_prob: 0.15,
            min_len: 3,
            max_len: 8,
            instructed: Vec::new(),
            instruction_len: 10,
            content_tokens: 0,
        }
    }
}

impl PretrainConfig {
    /// The fixed prefix for `kind` (`None` selects denoising).
    pub fn instruction(&self, vocab: &Vocab, kind: Option<TaskKind>) -> Vec<usize> {
        let key = kind.map_or(0, |k| 1 + TaskKind::ALL.iter().position(|&x| x == k).expect("known kind") as u64);
        let mut rng = Rng::new(0x1257_0c7e).fork(key);
        let content = vocab.content();
        (0..self.instruction_len)
            .map(|_| rng.between(content.start, content.end - 1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfParams<T> {
    pub w_in: T,
    pub w_out: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn_norm: NormParams<T>,
    pub attn: AttnParams<T>,
    pub ff_norm: NormParams<T>,
    pub ff: FfParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_norm: NormParams<T>,
    pub self_attn: AttnParams<T>,
    pub cross_norm: NormParams<T>,
    pub cross_attn: AttnParams<T>,
    pub ff_norm: NormParams<T>,
    pub ff: FfParams<T>,
}

/// Backbone parameter tree. `T` is a [`Tensor`] for weights, a [`Var`] once
/// bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams<T> {
    pub embed: T,
    pub enc_pos: T,
    pub dec_pos: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm: NormParams<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub dec_norm: NormParams<T>,
    pub w_out: T,
    pub b_out: T,
}

macro_rules! tree {
    (leaf $name:ident { $($f:ident),+ }) => {
        impl<T> $name<T> {
            pub fn map<'s, U>(&'s self, prefix: &str, f: &mut impl FnMut(&str, &'s T) -> U) -> $name<U> {
                $name { $($f: f(&format!("{prefix}.{}", stringify!($f)), &self.$f)),+ }
            }
            pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s T)) {
                $(f(format!("{prefix}.{}", stringify!($f)), &self.$f);)+
            }
            pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut impl FnMut(String, &'s mut T)) {
                $(f(format!("{prefix}.{}", stringify!($f)), &mut self.$f);)+
            }
        }
    };
    (node $name:ident { $($f:ident),+ }) => {
        impl<T> $name<T> {
            pub fn map<'s, U>(&'s self, prefix: &str, f: &mut impl FnMut(&str, &'s T) -> U) -> $name<U> {
                $name { $($f: self.$f.map(&format!("{prefix}.{}", stringify!($f)), f)),+ }
            }
            pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s T)) {
                $(self.$f.visit(&format!("{prefix}.{}", stringify!($f)), f);)+
            }
            pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut impl FnMut(String, &'s mut T)) {
                $(self.$f.visit_mut(&format!("{prefix}.{}", stringify!($f)), f);)+
            }
        }
    };
}

tree!(leaf AttnParams { wq, wk, wv, wo });
tree!(leaf NormParams { gain, bias });
tree!(leaf FfParams { w_in, w_out });
tree!(node EncoderLayer { attn_norm, attn, ff_norm, ff });
tree!(node DecoderLayer { self_norm, self_attn, cross_norm, cross_attn, ff_norm, ff });

impl<T> LmParams<T> {
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&str, &'s T) -> U) -> LmParams<U> {
        LmParams {
            embed: f("embed", &self.embed),
            enc_pos: f("enc_pos", &self.enc_pos),
            dec_pos: f("dec_pos", &self.dec_pos),
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("encoder.{i}"), f))
                .collect(),
            enc_norm: self.enc_norm.map("enc_norm", f),
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("decoder.{i}"), f))
                .collect(),
            dec_norm: self.dec_norm.map("dec_norm", f),
            w_out: f("w_out", &self.w_out),
            b_out: f("b_out", &self.b_out),
        }
    }

    /// Visits every leaf in a fixed declaration order.
    pub fn visit<'s>(&'s self, f: &mut impl FnMut(String, &'s T)) {
        f("embed".into(), &self.embed);
        f("enc_pos".into(), &self.enc_pos);
        f("dec_pos".into(), &self.dec_pos);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), f);
        }
        self.enc_norm.visit("enc_norm", f);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), f);
        }
        self.dec_norm.visit("dec_norm", f);
        f("w_out".into(), &self.w_out);
        f("b_out".into(), &self.b_out);
    }

    pub fn visit_mut<'s>(&'s mut self, f: &mut impl FnMut(String, &'s mut T)) {
        f("embed".into(), &mut self.embed);
        f("enc_pos".into(), &mut self.enc_pos);
        f("dec_pos".into(), &mut self.dec_pos);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.{i}"), f);
        }
        self.enc_norm.visit_mut("enc_norm", f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.{i}"), f);
        }
        self.dec_norm.visit_mut("dec_norm", f);
        f("w_out".into(), &mut self.w_out);
        f("b_out".into(), &mut self.b_out);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }
}

impl<F: Scalar> LmParams<Tensor<F>> {
    /// Seeded Gaussian initialization (std `init_scale`); norms start at
    /// gain 1, bias 0 and the output bias at 0.
    pub fn init(cfg: &LmConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (v, d, ff, l) = (cfg.vocab_size, cfg.model_dim, cfg.ff_dim, cfg.max_len);
        let s = cfg.init_scale;
        let mut g = |shape: &[usize]| Tensor::randn(shape, s, rng);
        let norm = || NormParams {
            gain: Tensor::full(&[d], F::one()),
            bias: Tensor::zeros(&[d]),
        };
        let embed = g(&[v, d]);
        let enc_pos = g(&[l, d]);
        let dec_pos = g(&[l, d]);
        let attn = |g: &mut dyn FnMut(&[usize]) -> Tensor<F>| AttnParams {
            wq: g(&[d, d]),
            wk: g(&[d, d]),
            wv: g(&[d, d]),
            wo: g(&[d, d]),
        };
        let encoder = (0..cfg.n_layers)
            .map(|_| {
                let a = attn(&mut g);
                EncoderLayer {
                    attn_norm: norm(),
                    attn: a,
                    ff_norm: norm(),
                    ff: FfParams {
                        w_in: g(&[d, ff]),
                        w_out: g(&[ff, d]),
                    },
                }
            })
            .collect();
        let decoder = (0..cfg.n_layers)
            .map(|_| {
                let sa = attn(&mut g);
                let ca = attn(&mut g);
                DecoderLayer {
                    self_norm: norm(),
                    self_attn: sa,
                    cross_norm: norm(),
                    cross_attn: ca,
                    ff_norm: norm(),
                    ff: FfParams {
                        w_in: g(&[d, ff]),
                        w_out: g(&[ff, d]),
                    },
                }
            })
            .collect();
        let w_out = g(&[d, v]);
        Ok(LmParams {
            embed,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm: norm(),
            decoder,
            dec_norm: norm(),
            w_out,
            b_out: Tensor::zeros(&[v]),
        })
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn cast<G: Scalar>(&self) -> LmParams<Tensor<G>> {
        self.map(&mut |_, t| t.cast())
    }

    /// SHA-256 over names, shapes and 32-bit little-endian data, in
    /// declaration order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, t| hash_tensor(&mut h, &name, t));
        hex::encode(h.finalize())
    }

    fn check_shapes(&self, cfg: &LmConfig) -> Result<()> {
        let reference: LmParams<Tensor<F>> = LmParams::init(cfg, &mut Rng::new(0))?;
        let want = reference.named();
        let got = self.named();
        if want.len() != got.len() {
            return Err(Error::Compatibility(format!(
                "backbone has {} tensors, config implies {}",
                got.len(),
                want.len()
            )));
        }
        for ((wn, wt), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || wt.shape() != gt.shape() {
                return Err(Error::Compatibility(format!(
                    "{gn} {:?} vs expected {wn} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn hash_tensor<F: Scalar>(h: &mut Sha256, name: &str, t: &Tensor<F>) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((t.shape().len() as u64).to_le_bytes());
    for &s in t.shape() {
        h.update((s as u64).to_le_bytes());
    }
    h.update(t.to_f32_le_bytes());
}

/// Embedded token sequence. `mask[i]` is false exactly at pad positions.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedInput<F = f32> {
    pub x: Tensor<F>,
    pub mask: Vec<bool>,
    pub tokens: Vec<usize>,
}

impl<F: Scalar> EmbeddedInput<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FrozenLm<F: Scalar = f32> {
    config: LmConfig,
    params: LmParams<Tensor<F>>,
}

enum Bias {
    Row(Var),
    Full(Var),
}

/// Constructs the backbone: seeded init, optional denoising pass, freeze.
pub fn build_frozen_lm(config: &LmConfig, rng: &mut Rng) -> Result<FrozenLm<f32>> {
    let mut params = LmParams::<Tensor<f32>>::init(config, rng)?;
    if config.pretrain.steps > 0 {
        pretrain_denoising(config, &mut params, rng)?;
    }
    Ok(FrozenLm {
        config: config.clone(),
        params,
    })
}

fn pretrain_denoising(cfg: &LmConfig, params: &mut LmParams<Tensor<f32>>, rng: &mut Rng) -> Result<()> {
    let pc = &cfg.pretrain;
    let vocab = Vocab::new(cfg.vocab_size)?;
    let opts = GenOptions {
        vocab_size: cfg.vocab_size,
        min_len: pc.min_len,
        max_len: pc.max_len,
        content_tokens: pc.content_tokens,
    };
    let prefixes: Vec<(Option<TaskKind>, Vec<usize>)> = if pc.instructed.is_empty() {
        vec![(None, Vec::new())]
    } else {
        std::iter::once(None)
            .chain(pc.instructed.iter().copied().map(Some))
            .map(|k| (k, pc.instruction(&vocab, k)))
            .collect()
    };
    fit_backbone(cfg, params, pc.steps, pc.lr, |_| {
        (0..pc.batch_size)
            .map(|_| {
                let (kind, prefix) = &prefixes[rng.below(prefixes.len())];
                let (x, y) = match kind {
                    None => data::denoising_example(&vocab, &opts, pc.mask_prob, rng),
                    Some(k) => data::draw_example(*k, &vocab, &opts, rng),
                };
                (prefix.iter().copied().chain(x).collect(), y)
            })
            .collect()
    })
}

/// Adam on every backbone tensor over batches of `(input, target)` token
/// pairs produced by `next_batch(step)`.
pub(crate) fn fit_backbone(
    cfg: &LmConfig,
    params: &mut LmParams<Tensor<f32>>,
    steps: usize,
    lr: f64,
    mut next_batch: impl FnMut(usize) -> Vec<(Vec<usize>, Vec<usize>)>,
) -> Result<()> {
    let mut state = AdamState::default();
    for step in 0..steps {
        let pairs = next_batch(step);
        let grads: Vec<Tensor<f32>> = {
            let lm = BorrowedLm { config: cfg, params };
            let mut tape = Tape::new();
            let bound = params.map(&mut |_, t| tape.param(t));
            let mut losses = Vec::with_capacity(pairs.len());
            for (input, target) in &pairs {
                let emb = lm.embed_tokens(input)?;
                let x = tape.input(emb.x, false);
                losses.push(lm.nll(&mut tape, &bound, x, &emb.mask, target)?);
            }
            let loss = tape.mean_of(&losses)?;
            tape.backward(loss)?;
            let mut gs = Vec::new();
            bound.visit(&mut |_, v| gs.push(tape.grad(*v).cloned().expect("trainable leaf has a gradient")));
            gs
        };
        let mut names = Vec::new();
        let mut refs = Vec::new();
        params.visit_mut(&mut |n, t| {
            names.push(n);
            refs.push(t);
        });
        let mut group: Vec<(&str, &mut Tensor<f32>)> = names.iter().map(String::as_str).zip(refs).collect();
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        adam_step(&mut group, &grad_refs, &mut state, lr, 0.0)?;
    }
    Ok(())
}

/// The forward pass, shared by the frozen model and backbone pretraining.
struct BorrowedLm<'p, F: Scalar> {
    config: &'p LmConfig,
    params: &'p LmParams<Tensor<F>>,
}

impl<F: Scalar> BorrowedLm<'_, F> {
    fn embed_tokens(&self, tokens: &[usize]) -> Result<EmbeddedInput<F>> {
        let cfg = self.config;
        if tokens.is_empty() {
            return Err(Error::Data("cannot embed an empty sequence".into()));
        }
        if tokens.len() > cfg.max_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: cfg.max_len,
            });
        }
        let d = cfg.model_dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= cfg.vocab_size {
                return Err(Error::Vocabulary {
                    token: t,
                    vocab_size: cfg.vocab_size,
                });
            }
            data.extend_from_slice(self.params.embed.row(t));
        }
        Ok(EmbeddedInput {
            x: Tensor::matrix(tokens.len(), d, data)?,
            mask: tokens.iter().map(|&t| t != cfg.pad_id).collect(),
            tokens: tokens.to_vec(),
        })
    }

    fn norm(&self, tape: &mut Tape<'_, F>, p: &NormParams<Var>, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.gain, p.bias, LN_EPS)
    }

    /// Transposed keys and values of `kv_in`.
    fn keys_values(&self, tape: &mut Tape<'_, F>, p: &AttnParams<Var>, kv_in: Var) -> Result<(Var, Var)> {
        let k = tape.matmul(kv_in, p.wk)?;
        let v = tape.matmul(kv_in, p.wv)?;
        Ok((tape.transpose(k)?, v))
    }

    fn attention(&self, tape: &mut Tape<'_, F>, p: &AttnParams<Var>, q_in: Var, kv_in: Var, bias: &Bias) -> Result<Var> {
        let kv = self.keys_values(tape, p, kv_in)?;
        self.attention_kv(tape, p, q_in, kv, bias)
    }

    fn attention_kv(&self, tape: &mut Tape<'_, F>, p: &AttnParams<Var>, q_in: Var, (kt, v): (Var, Var), bias: &Bias) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let q = tape.matmul(q_in, p.wq)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_rows(kt, h * dh, dh)?;
            let scores = tape.matmul(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let scores = match *bias {
                Bias::Row(b) => tape.add_row(scores, b)?,
                Bias::Full(b) => tape.add(scores, b)?,
            };
            let w = tape.softmax(scores)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            outs.push(tape.matmul(w, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        tape.matmul(cat, p.wo)
    }

    fn feed_forward(&self, tape: &mut Tape<'_, F>, p: &FfParams<Var>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.w_in)?;
        let h = tape.silu(h);
        tape.matmul(h, p.w_out)
    }

    fn key_bias(tape: &mut Tape<'_, F>, mask: &[bool]) -> Var {
        let row = mask.iter().map(|&m| if m { F::zero() } else { F::of(MASK_BIAS) }).collect();
        tape.input(Tensor::vector(row), false)
    }

    fn encode(&self, tape: &mut Tape<'_, F>, b: &LmParams<Var>, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (len, d) = match shape[..] {
            [l, d] => (l, d),
            _ => return Err(Error::dim("encode", &shape, &[])),
        };
        if d != self.config.model_dim || mask.len() != len {
            return Err(Error::dim("encode", &shape, &[mask.len(), self.config.model_dim]));
        }
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max: self.config.max_len,
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Data("encoder input has no attendable position".into()));
        }
        let pos = tape.slice_rows(b.enc_pos, 0, len)?;
        let mut h = tape.add(x, pos)?;
        let bias = Bias::Row(Self::key_bias(tape, mask));
        for layer in &b.encoder {
            let a = self.norm(tape, &layer.attn_norm, h)?;
            let a = self.attention(tape, &layer.attn, a, a, &bias)?;
            h = tape.add(h, a)?;
            let f = self.norm(tape, &layer.ff_norm, h)?;
            let f = self.feed_forward(tape, &layer.ff, f)?;
            h = tape.add(h, f)?;
        }
        self.norm(tape, &b.enc_norm, h)
    }

    /// Logits (`T×V`) for decoder inputs `dec_in` given encoder states.
    /// Per decoder layer cross-attention keys and values over `enc`.
    fn cross_cache(&self, tape: &mut Tape<'_, F>, b: &LmParams<Var>, enc: Var) -> Result<Vec<(Var, Var)>> {
        b.decoder.iter().map(|l| self.keys_values(tape, &l.cross_attn, enc)).collect()
    }

    fn decode(&self, tape: &mut Tape<'_, F>, b: &LmParams<Var>, enc: Var, enc_mask: &[bool], dec_in: &[usize]) -> Result<Var> {
        let cache = self.cross_cache(tape, b, enc)?;
        self.decode_cached(tape, b, &cache, enc_mask, dec_in)
    }

    fn decode_cached(
        &self,
        tape: &mut Tape<'_, F>,
        b: &LmParams<Var>,
        cache: &[(Var, Var)],
        enc_mask: &[bool],
        dec_in: &[usize],
    ) -> Result<Var> {
        let t = dec_in.len();
        if t > self.config.max_len {
            return Err(Error::Length {
                len: t,
                max: self.config.max_len,
            });
        }
        let tok = tape.gather_rows(b.embed, dec_in)?;
        let pos = tape.slice_rows(b.dec_pos, 0, t)?;
        let mut h = tape.add(tok, pos)?;
        let mut causal = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in (i + 1)..t {
                causal.data_mut()[i * t + j] = F::of(MASK_BIAS);
            }
        }
        let causal = Bias::Full(tape.input(causal, false));
        let cross = Bias::Row(Self::key_bias(tape, enc_mask));
        for (layer, &kv) in b.decoder.iter().zip(cache) {
            let a = self.norm(tape, &layer.self_norm, h)?;
            let a = self.attention(tape, &layer.self_attn, a, a, &causal)?;
            h = tape.add(h, a)?;
            let c = self.norm(tape, &layer.cross_norm, h)?;
            let c = self.attention_kv(tape, &layer.cross_attn, c, kv, &cross)?;
            h = tape.add(h, c)?;
            let f = self.norm(tape, &layer.ff_norm, h)?;
            let f = self.feed_forward(tape, &layer.ff, f)?;
            h = tape.add(h, f)?;
        }
        let h = self.norm(tape, &b.dec_norm, h)?;
        let logits = tape.matmul(h, b.w_out)?;
        tape.add_row(logits, b.b_out)
    }

    fn nll(&self, tape: &mut Tape<'_, F>, b: &LmParams<Var>, x: Var, mask: &[bool], target: &[usize]) -> Result<Var> {
        let cfg = self.config;
        if target.last() != Some(&cfg.eos_id) {
            return Err(Error::Data("target must end with eos".into()));
        }
        let enc = self.encode(tape, b, x, mask)?;
        let mut dec_in = Vec::with_capacity(target.len());
        dec_in.push(cfg.bos_id);
        dec_in.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.decode(tape, b, enc, mask, &dec_in)?;
        tape.cross_entropy(logits, target, None)
    }
}

impl<F: Scalar> FrozenLm<F> {
    /// Reassembles a backbone from stored weights, checking every shape.
    pub fn from_params(config: LmConfig, params: LmParams<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &LmParams<Tensor<F>> {
        &self.params
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Always zero: the backbone is never optimized.
    pub fn trainable_param_count(&self) -> usize {
        0
    }

    pub fn theta_hash(&self) -> String {
        self.params.hash()
    }

    pub fn cast<G: Scalar>(&self) -> FrozenLm<G> {
        FrozenLm {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn borrowed(&self) -> BorrowedLm<'_, F> {
        BorrowedLm {
            config: &self.config,
            params: &self.params,
        }
    }

    /// Registers θ on `tape` as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, F>) -> LmParams<Var> {
        self.params.map(&mut |_, t| tape.constant(t))
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<EmbeddedInput<F>> {
        self.borrowed().embed_tokens(tokens)
    }

    /// Encoder states for `prompted` (`(m+l)×d`).
    pub fn encode(&self, tape: &mut Tape<'_, F>, bound: &LmParams<Var>, prompted: Var, mask: &[bool]) -> Result<Var> {
        self.borrowed().encode(tape, bound, prompted, mask)
    }

    /// Teacher-forced mean token NLL of `target` given the prompted input.
    pub fn nll(&self, tape: &mut Tape<'_, F>, bound: &LmParams<Var>, prompted: Var, mask: &[bool], target: &[usize]) -> Result<Var> {
        self.borrowed().nll(tape, bound, prompted, mask, target)
    }

    /// Per-instance losses for several prompted inputs sharing one tape.
    pub fn batch_nll(
        &self,
        tape: &mut Tape<'_, F>,
        bound: &LmParams<Var>,
        items: &[(Var, &[bool], &[usize])],
    ) -> Result<Vec<Var>> {
        items
            .iter()
            .map(|&(x, mask, target)| self.nll(tape, bound, x, mask, target))
            .collect()
    }

    /// Value-only conditional NLL.
    pub fn conditional_nll(&self, prompted_input: &Tensor<F>, input_mask: &[bool], target: &[usize]) -> Result<F> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(prompted_input);
        let loss = self.nll(&mut tape, &bound, x, input_mask, target)?;
        Ok(tape.value(loss).item())
    }

    /// Argmax decoding from `bos` until `eos` or `max_steps` tokens; the
    /// returned sequence excludes `eos`.
    pub fn greedy_decode(&self, prompted_input: &Tensor<F>, input_mask: &[bool], max_steps: usize) -> Result<Vec<usize>> {
        let lm = self.borrowed();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(prompted_input);
        let enc = lm.encode(&mut tape, &bound, x, input_mask)?;
        let cache = lm.cross_cache(&mut tape, &bound, enc)?;
        let mut prefix = vec![self.config.bos_id];
        let mut out = Vec::new();
        let steps = max_steps.min(self.config.max_len);
        for _ in 0..steps {
            let logits = lm.decode_cached(&mut tape, &bound, &cache, input_mask, &prefix)?;
            let last = tape.value(logits).row(prefix.len() - 1);
            let mut best = 0;
            for (j, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = j;
                }
            }
            if best == self.config.eos_id {
                break;
            }
            out.push(best);
            prefix.push(best);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> LmConfig {
        LmConfig {
            vocab_size: 24,
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 32,
            max_len: 24,
            init_scale: 0.3,
            ..LmConfig::default()
        }
    }

    #[test]
    fn default_config_head_dim() {
        let cfg = LmConfig::default();
        assert_eq!((cfg.model_dim, cfg.n_heads, cfg.head_dim()), (64, 4, 16));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = LmConfig {
            n_heads: 5,
            ..LmConfig::default()
        };
        assert!(matches!(build_frozen_lm(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_identical_weights_and_no_trainables() {
        let cfg = LmConfig::default();
        let a = build_frozen_lm(&cfg, &mut Rng::new(3)).unwrap();
        let b = build_frozen_lm(&cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.theta_hash(), b.theta_hash());
        assert_eq!(a.trainable_param_count(), 0);
        let c = build_frozen_lm(&cfg, &mut Rng::new(4)).unwrap();
        assert_ne!(a.theta_hash(), c.theta_hash());
    }

    #[test]
    fn embed_looks_up_rows_and_masks_pad() {
        let lm = build_frozen_lm(&small_config(), &mut Rng::new(1)).unwrap();
        let e = lm.embed(&[7]).unwrap();
        assert_eq!(e.x.data(), lm.params().embed.row(7));
        let e = lm.embed(&[5, 5, 0, 9]).unwrap();
        assert_eq!(e.mask, vec![true, true, false, true]);
        assert_eq!(e.x.row(0), e.x.row(1));
        assert!(matches!(lm.embed(&[24]), Err(Error::Vocabulary { token: 24, .. })));
    }

    #[test]
    fn nll_never_reaches_theta_and_matches_finite_differences() {
        let lm = build_frozen_lm(&small_config(), &mut Rng::new(2)).unwrap().cast::<f64>();
        let emb = lm.embed(&[4, 9, 11]).unwrap();
        let prompt = Tensor::<f64>::randn(&[2, 16], 0.5, &mut Rng::new(5));
        let target = [6, 7, data::EOS];
        let mut mask = vec![true; 2];
        mask.extend(&emb.mask);

        let loss_at = |p: &Tensor<f64>| {
            let mut tape = Tape::new();
            let pv = tape.constant(p);
            let xv = tape.constant(&emb.x);
            let cat = tape.concat_rows(&[pv, xv]).unwrap();
            let cat = tape.value(cat).clone();
            lm.conditional_nll(&cat, &mask, &target).unwrap()
        };

        let mut tape = Tape::new();
        let bound = lm.bind(&mut tape);
        let pv = tape.param(&prompt);
        let xv = tape.constant(&emb.x);
        let cat = tape.concat_rows(&[pv, xv]).unwrap();
        let loss = lm.nll(&mut tape, &bound, cat, &mask, &target).unwrap();
        tape.backward(loss).unwrap();
        bound.visit(&mut |name, v| assert!(tape.grad(*v).is_none(), "{name} got a gradient"));
        let g = tape.grad(pv).unwrap();
        let h = 1e-5;
        for k in 0..prompt.numel() {
            let mut plus = prompt.clone();
            plus.data_mut()[k] += h;
            let mut minus = prompt.clone();
            minus.data_mut()[k] -= h;
            let num = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (g.data()[k] - num).abs() / g.data()[k].abs().max(num.abs()).max(1e-3);
            assert!(rel < 1e-4, "coord {k}: analytic {} numeric {num}", g.data()[k]);
        }
    }

    #[test]
    fn pad_embeddings_do_not_change_loss() {
        let lm = build_frozen_lm(&small_config(), &mut Rng::new(8)).unwrap();
        let a = lm.embed(&[4, 9, 0, 0]).unwrap();
        let mut b = a.clone();
        for i in 2..4 {
            for j in 0..16 {
                b.x.data_mut()[i * 16 + j] = (i * j) as f32 * 3.1 - 7.0;
            }
        }
        let short = lm.embed(&[4, 9]).unwrap();
        let target = [5, data::EOS];
        let la = lm.conditional_nll(&a.x, &a.mask, &target).unwrap();
        let lb = lm.conditional_nll(&b.x, &b.mask, &target).unwrap();
        let ls = lm.conditional_nll(&short.x, &short.mask, &target).unwrap();
        assert!((la - lb).abs() < 1e-6);
        assert!((la - ls).abs() < 1e-6);
    }

    #[test]
    fn batch_losses_are_permutation_equivariant_and_mean_is_duplication_stable() {
        let lm = build_frozen_lm(&small_config(), &mut Rng::new(9)).unwrap();
        let e1 = lm.embed(&[4, 5]).unwrap();
        let e2 = lm.embed(&[6, 7, 8]).unwrap();
        let (t1, t2) = ([5, data::EOS], [8, 7, data::EOS]);
        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let bound = lm.bind(&mut tape);
            let x1 = tape.constant(&e1.x);
            let x2 = tape.constant(&e2.x);
            let all = [(x1, &e1.mask[..], &t1[..]), (x2, &e2.mask[..], &t2[..])];
            let items: Vec<_> = order.iter().map(|&i| all[i]).collect();
            let losses = lm.batch_nll(&mut tape, &bound, &items).unwrap();
            let mean = tape.mean_of(&losses).unwrap();
            (losses.iter().map(|&l| tape.value(l).item()).collect::<Vec<f32>>(), tape.value(mean).item())
        };
        let (fwd, _) = run(&[0, 1]);
        let (rev, _) = run(&[1, 0]);
        assert_eq!(fwd, vec![rev[1], rev[0]]);
        let (_, single) = run(&[0]);
        let (_, doubled) = run(&[0, 0]);
        assert!((single - doubled).abs() < 1e-6);
    }

    #[test]
    fn too_long_sequence_is_a_length_error() {
        let lm = build_frozen_lm(&small_config(), &mut Rng::new(1)).unwrap();
        let x = Tensor::<f32>::zeros(&[25, 16]);
        assert!(matches!(
            lm.conditional_nll(&x, &[true; 25], &[data::EOS]),
            Err(Error::Length { len: 25, max: 24 })
        ));
    }

    #[test]
    fn eos_biased_decoder_stops_immediately() {
        let cfg = small_config();
        let lm = build_frozen_lm(&cfg, &mut Rng::new(1)).unwrap();
        let mut params = lm.params().clone();
        params.w_out = Tensor::zeros(params.w_out.shape());
        params.b_out.data_mut()[cfg.eos_id] = 10.0;
        let lm = FrozenLm::from_params(cfg, params).unwrap();
        let e = lm.embed(&[4, 5, 6]).unwrap();
        assert_eq!(lm.greedy_decode(&e.x, &e.mask, 10).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn decoding_is_deterministic() {
        let lm = build_frozen_lm(&small_config(), &mut Rng::new(4)).unwrap();
        let e = lm.embed(&[4, 5, 6]).unwrap();
        let a = lm.greedy_decode(&e.x, &e.mask, 6).unwrap();
        let b = lm.greedy_decode(&e.x, &e.mask, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
    }

    #[test]
    fn overfitting_one_example_makes_decode_return_target() {
        let cfg = small_config();
        let mut params = LmParams::<Tensor<f32>>::init(&cfg, &mut Rng::new(6)).unwrap();
        let input = vec![4, 9, 11];
        let target = vec![11, 9, 4, data::EOS];
        let pair = (input.clone(), target.clone());
        fit_backbone(&cfg, &mut params, 60, 1e-2, |_| vec![pair.clone()]).unwrap();
        let lm = FrozenLm::from_params(cfg, params).unwrap();
        let e = lm.embed(&input).unwrap();
        assert!(lm.conditional_nll(&e.x, &e.mask, &target).unwrap() < 1e-2);
        assert_eq!(lm.greedy_decode(&e.x, &e.mask, 8).unwrap(), vec![11, 9, 4]);
    }

    #[test]
    fn pretraining_reduces_denoising_loss_and_is_deterministic() {
        let mut cfg = small_config();
        cfg.vocab_size = 32;
        cfg.pretrain = PretrainConfig {
            steps: 40,
            batch_size: 8,
            lr: 1e-2,
            ..PretrainConfig::default()
        };
        let eval = |lm: &FrozenLm| {
            let vocab = Vocab::new(32).unwrap();
            let opts = GenOptions {
                vocab_size: 32,
                ..GenOptions::default()
            };
            let mut rng = Rng::new(77);
            (0..16)
                .map(|_| {
                    let (x, y) = data::denoising_example(&vocab, &opts, 0.15, &mut rng);
                    let e = lm.embed(&x).unwrap();
                    lm.conditional_nll(&e.x, &e.mask, &y).unwrap()
                })
                .sum::<f32>()
        };
        let trained = build_frozen_lm(&cfg, &mut Rng::new(1)).unwrap();
        let again = build_frozen_lm(&cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(trained.theta_hash(), again.theta_hash());
        cfg.pretrain.steps = 0;
        let fresh = build_frozen_lm(&cfg, &mut Rng::new(1)).unwrap();
        assert!(eval(&trained) < eval(&fresh));
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let cfg = small_config();
        let lm = build_frozen_lm(&cfg, &mut Rng::new(1)).unwrap();
        let mut params = lm.params().clone();
        params.b_out = Tensor::zeros(&[3]);
        assert!(matches!(FrozenLm::from_params(cfg, params), Err(Error::Compatibility(_))));
    }
}
