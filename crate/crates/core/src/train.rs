//! Training regimes: source prompts, single-target and multi-task instance-wise
//! prompt tuning, attention-prior pretraining, plus evaluation and parameter
//! accounting.
//!
//! All regimes share one loop. The backbone and bank prompts are bound to the
//! tape as constants, so they receive no gradient and are never handed to the
//! optimizer. Prompts and the attention module keep separate Adam states and
//! learning rates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, Example, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::nn::{EmbeddedInput, FrozenLm};
use crate::optim::{adam_step, AdamState};
use crate::prompt::{
    compose_instance_prompt, compose_on, prepend_on, AblationFlags, AttentionModule, PromptBank, SoftPrompt,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetInit {
    #[default]
    RandomVocab,
    FromSource(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub prompt_lr: f64,
    pub attention_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub temperature_k: f64,
    pub prompt_length: usize,
    pub bottleneck: usize,
    pub ablation: AblationFlags,
    pub target_init: TargetInit,
    /// Linear warmup length in optimizer steps; 0 disables it.
    pub warmup_steps: usize,
    /// Batches accumulated per optimizer step.
    pub grad_accum: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Dev examples per task scored after each epoch (all when unset).
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prompt_lr: 0.3,
            attention_lr: 0.3,
            weight_decay: 1e-5,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            temperature_k: 1.0,
            prompt_length: 10,
            bottleneck: 16,
            ablation: AblationFlags::default(),
            target_init: TargetInit::RandomVocab,
            warmup_steps: 500,
            grad_accum: 1,
            max_steps: None,
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    /// `m = 100`, `r = 100`: the full-size setting, used for accounting.
    pub fn full_scale() -> Self {
        Self {
            prompt_length: 100,
            bottleneck: 100,
            ..Self::default()
        }
    }

    /// Learning rates may be zero (that group is then frozen); the strictly
    /// positive range is enforced by the command layer.
    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.prompt_lr >= 0.0 && self.attention_lr >= 0.0) {
            return bad("learning rates must be ≥ 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be ≥ 0".into());
        }
        if self.prompt_length == 0 {
            return bad("prompt_length must be ≥ 1".into());
        }
        if self.bottleneck == 0 || self.bottleneck >= d {
            return bad(format!("bottleneck {} must satisfy 0 < r < d={d}", self.bottleneck));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be ≥ 1".into());
        }
        if !self.temperature_k.is_finite() {
            return bad("temperature_k must be finite".into());
        }
        Ok(())
    }

    fn lr_factor(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// How an instance's prompt is produced.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    /// The task prompt is prepended as is.
    PromptTuning,
    /// Instance-wise interpolation over the bank and the task prompt.
    Attempt(AblationFlags),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Source,
    Target,
    MultiTask,
    AttentionPrior,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Source => "source",
            Regime::Target => "target",
            Regime::MultiTask => "multi_task",
            Regime::AttentionPrior => "attention_prior",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    /// Per task: mean dev attention in bank order, target last.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mean_attention: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: Regime,
    pub task_ids: Vec<String>,
    pub seed: u64,
    pub init_dev_metric: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch beat the initial parameters.
    pub best_epoch: usize,
    pub best_dev_metric: f64,
    pub best_checkpoint_id: String,
    pub steps: usize,
    pub attention_init: Option<String>,
    pub theta_hash: String,
    pub bank_hash: String,
    /// Kept out of serialized reports so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Line-oriented run log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    pub fn push(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.lines.iter().any(|l| l.contains(needle))
    }

    pub fn extend(&mut self, other: &RunLog) {
        self.lines.extend(other.lines.iter().cloned());
    }

    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug)]
pub struct SourceRun {
    pub prompt: SoftPrompt,
    pub report: TrainReport,
    pub log: RunLog,
}

#[derive(Clone, Debug)]
pub struct TargetRun {
    pub prompt: SoftPrompt,
    /// `None` under constant attention.
    pub attention: Option<AttentionModule>,
    pub report: TrainReport,
    pub log: RunLog,
}

#[derive(Clone, Debug)]
pub struct MultiTaskRun {
    pub prompts: BTreeMap<String, SoftPrompt>,
    pub attention: AttentionModule,
    pub report: TrainReport,
    pub log: RunLog,
}

#[derive(Clone, Debug)]
pub struct PriorRun {
    pub attention: AttentionModule,
    pub report: TrainReport,
    pub log: RunLog,
}

/// Gradients of `Σ_i nll_i / denom` over a set of examples.
#[derive(Clone, Debug)]
pub struct BatchGradients<F: Scalar = f32> {
    pub loss: f64,
    pub count: usize,
    /// One entry for every task prompt, used or not.
    pub prompts: BTreeMap<String, Tensor<F>>,
    /// Task prompts that at least one instance was routed to.
    pub used: BTreeSet<String>,
    /// `[w_down, w_up, ln_gain, ln_bias]`.
    pub attention: Option<[Tensor<F>; 4]>,
    /// Every bank prompt's gradient (always zero; kept for auditing).
    pub bank: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> BatchGradients<F> {
    fn accumulate(&mut self, other: BatchGradients<F>) -> Result<()> {
        fn add<F: Scalar>(a: &mut Tensor<F>, b: &Tensor<F>) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + *y;
            }
        }
        self.loss += other.loss;
        self.count += other.count;
        for (k, g) in other.prompts {
            match self.prompts.get_mut(&k) {
                Some(a) => add(a, &g),
                None => {
                    self.prompts.insert(k, g);
                }
            }
        }
        self.used.extend(other.used);
        match (&mut self.attention, other.attention) {
            (Some(a), Some(b)) => a.iter_mut().zip(&b).for_each(|(x, y)| add(x, y)),
            (None, b) => self.attention = b,
            (Some(_), None) => {}
        }
        Ok(())
    }
}

/// Prompt and input rows stacked, with the combined mask.
pub fn prepend<F: Scalar>(prompt: &Tensor<F>, x: &EmbeddedInput<F>) -> Result<(Tensor<F>, Vec<bool>)> {
    let mut tape = Tape::new();
    let p = tape.constant(prompt);
    let xv = tape.constant(&x.x);
    let (cat, mask) = prepend_on(&mut tape, p, xv, &x.mask)?;
    Ok((tape.value(cat).clone(), mask))
}

fn route<'p, F: Scalar>(prompts: &'p BTreeMap<String, SoftPrompt<F>>, task_id: &str) -> Result<&'p SoftPrompt<F>> {
    prompts
        .get(task_id)
        .ok_or_else(|| Error::Data(format!("no task prompt for task `{task_id}`")))
}

/// Forward and backward over `examples` with each instance routed to its
/// task's prompt (keyed by task id).
///
/// `bank` is the bank as seen by composition; a `single_source` flag is
/// applied here if the bank has not already been restricted. Under
/// `Method::Attempt` with `no_target`, `prompts` may be empty.
pub fn batch_gradients<F: Scalar>(
    lm: &FrozenLm<F>,
    bank: &PromptBank<F>,
    prompts: &BTreeMap<String, SoftPrompt<F>>,
    attention: Option<&AttentionModule<F>>,
    examples: &[&Example],
    method: &Method,
    denom: usize,
) -> Result<BatchGradients<F>> {
    if examples.is_empty() || denom == 0 {
        return Err(Error::DegenerateBatch);
    }
    let restricted;
    let bank = match method {
        Method::Attempt(AblationFlags {
            single_source: Some(name),
            ..
        }) if bank.names() != [name.as_str()] => {
            restricted = bank.restrict(name)?;
            &restricted
        }
        _ => bank,
    };
    let mut tape = Tape::new();
    let theta = lm.bind(&mut tape);
    let bound_bank = bank.bind(&mut tape);
    let bank_leaves: Vec<Var> = bank.prompts().iter().map(|p| tape.constant(p.values())).collect();
    let prompt_vars: BTreeMap<&str, Var> = prompts.iter().map(|(k, p)| (k.as_str(), tape.param(p.values()))).collect();
    let trainable_attention = !matches!(method, Method::Attempt(f) if f.constant_attention);
    let g = match (method, attention) {
        (Method::Attempt(_), Some(g)) if trainable_attention => Some(g.bind(&mut tape, true)),
        _ => None,
    };

    let mut used = BTreeSet::new();
    let mut losses = Vec::with_capacity(examples.len());
    for ex in examples {
        let emb = lm.embed(&ex.input_tokens)?;
        let (x, mask) = (tape.input(emb.x, false), emb.mask);
        let target = match method {
            Method::Attempt(f) if f.no_target => None,
            _ => {
                route(prompts, &ex.task_id)?;
                used.insert(ex.task_id.clone());
                Some(prompt_vars[ex.task_id.as_str()])
            }
        };
        let p_inst = match method {
            Method::PromptTuning => target.expect("prompt tuning routes every instance"),
            Method::Attempt(flags) => {
                let x_hat = tape.max_pool_seq(x, &mask)?;
                compose_on(&mut tape, &bound_bank, target, g.as_ref(), x_hat, flags)?.prompt
            }
        };
        let (prompted, full_mask) = prepend_on(&mut tape, p_inst, x, &mask)?;
        losses.push(lm.nll(&mut tape, &theta, prompted, &full_mask, &ex.target_tokens)?);
    }
    let mean = tape.mean_of(&losses)?;
    let loss = tape.scale(mean, F::of(examples.len() as f64 / denom as f64));
    tape.backward(loss)?;

    let grad = |v: Var| tape.grad(v).cloned().expect("parameter leaf has a gradient");
    Ok(BatchGradients {
        loss: tape.value(loss).item().f64(),
        count: examples.len(),
        prompts: prompt_vars.iter().map(|(k, &v)| (k.to_string(), grad(v))).collect(),
        used,
        attention: g.map(|g| g.vars().map(grad)),
        bank: bank_leaves.iter().map(|&v| tape.grad(v).cloned()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub split: Split,
    pub n: usize,
    pub exact_match: f64,
    /// Bank prompt names, then `target` when the target takes part.
    pub attention_labels: Vec<String>,
    pub mean_attention: Option<Vec<f64>>,
    /// Per-instance attention, in split order.
    pub instance_attention: Vec<Vec<f64>>,
}

/// What [`evaluate_with`] composes each instance's prompt from.
#[derive(Clone, Copy, Debug)]
pub enum Composer<'a> {
    Plain(&'a SoftPrompt),
    Attempt {
        bank: &'a PromptBank,
        attention: Option<&'a AttentionModule>,
        target: Option<&'a SoftPrompt>,
        flags: &'a AblationFlags,
    },
}

/// Greedy-decoding exact match through instance-wise composition.
pub fn evaluate(
    lm: &FrozenLm,
    bank: &PromptBank,
    g: Option<&AttentionModule>,
    p_target: Option<&SoftPrompt>,
    task: &TaskDataset,
    ablation: &AblationFlags,
    split: Split,
) -> Result<EvalReport> {
    let bank = ablation.effective_bank(bank)?;
    let composer = Composer::Attempt {
        bank: &bank,
        attention: g,
        target: p_target,
        flags: ablation,
    };
    evaluate_with(lm, &composer, task, split, None)
}

/// Exact match of plain prompt tuning.
pub fn evaluate_prompt(lm: &FrozenLm, prompt: &SoftPrompt, task: &TaskDataset, split: Split) -> Result<EvalReport> {
    evaluate_with(lm, &Composer::Plain(prompt), task, split, None)
}

/// Scores the first `limit` examples of `split` (all when `None`).
///
/// Decoding stops one token past the reference length: any longer output
/// is already a mismatch, so the metric equals unbounded decoding.
pub fn evaluate_with(
    lm: &FrozenLm,
    composer: &Composer<'_>,
    task: &TaskDataset,
    split: Split,
    limit: Option<usize>,
) -> Result<EvalReport> {
    let examples = task.split(split);
    let examples = &examples[..limit.map_or(examples.len(), |l| l.min(examples.len()))];
    let mut hits = 0;
    let mut labels = Vec::new();
    let mut instance_attention = Vec::new();
    for ex in examples {
        let emb = lm.embed(&ex.input_tokens)?;
        let prompt = match composer {
            Composer::Plain(p) => p.values().clone(),
            Composer::Attempt {
                bank,
                attention,
                target,
                flags,
            } => {
                let inst = compose_instance_prompt(bank, *target, *attention, &emb, flags)?;
                labels = inst.attention.labels;
                instance_attention.push(inst.attention.weights.data().iter().map(|v| v.f64()).collect::<Vec<_>>());
                inst.prompt
            }
        };
        let (prompted, mask) = prepend(&prompt, &emb)?;
        let reference = ex.target_tokens.strip_suffix(&[lm.config().eos_id]).unwrap_or(&ex.target_tokens);
        let out = lm.greedy_decode(&prompted, &mask, reference.len() + 1)?;
        if out == reference {
            hits += 1;
        }
    }
    let mean_attention = (!instance_attention.is_empty()).then(|| {
        let k = instance_attention[0].len();
        let n = instance_attention.len() as f64;
        (0..k).map(|j| instance_attention.iter().map(|a| a[j]).sum::<f64>() / n).collect()
    });
    Ok(EvalReport {
        task_id: task.task_id.clone(),
        split,
        n: examples.len(),
        exact_match: if examples.is_empty() { 0.0 } else { hits as f64 / examples.len() as f64 },
        attention_labels: labels,
        mean_attention,
        instance_attention,
    })
}

/// Trainable scalars for `n_tasks` tasks sharing one attention module.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub d: usize,
    pub m: usize,
    pub r: usize,
    pub n_tasks: usize,
    pub prompt_per_task: usize,
    pub attention: usize,
    /// `N·d·m + 2rd + 2d`.
    pub total: usize,
    /// `d·m + (2rd + 2d)/N`.
    pub per_task: f64,
}

pub fn count_trainable_params(cfg: &TrainConfig, d: usize, n_tasks: usize) -> Result<ParamCount> {
    if n_tasks == 0 {
        return Err(Error::Config("N must be ≥ 1".into()));
    }
    let (m, r) = (cfg.prompt_length, cfg.bottleneck);
    let prompt = d * m;
    let attention = 2 * r * d + 2 * d;
    Ok(ParamCount {
        d,
        m,
        r,
        n_tasks,
        prompt_per_task: prompt,
        attention,
        total: n_tasks * prompt + attention,
        per_task: prompt as f64 + attention as f64 / n_tasks as f64,
    })
}

/// Plain prompt tuning: `d·m`.
pub fn count_prompt_tuning_params(cfg: &TrainConfig, d: usize) -> usize {
    d * cfg.prompt_length
}

struct Snapshot {
    prompts: BTreeMap<String, SoftPrompt>,
    attention: Option<AttentionModule>,
}

/// Shared optimization loop for every regime.
struct Learner<'m> {
    lm: &'m FrozenLm,
    bank: PromptBank,
    prompts: BTreeMap<String, SoftPrompt>,
    attention: Option<AttentionModule>,
    method: Method,
    cfg: &'m TrainConfig,
    prompt_states: BTreeMap<String, AdamState>,
    attention_state: AdamState,
    step: usize,
    log: RunLog,
}

struct Outcome {
    best: Snapshot,
    report: TrainReport,
    log: RunLog,
}

impl<'m> Learner<'m> {
    fn new(
        lm: &'m FrozenLm,
        bank: PromptBank,
        prompts: BTreeMap<String, SoftPrompt>,
        attention: Option<AttentionModule>,
        method: Method,
        cfg: &'m TrainConfig,
    ) -> Self {
        Self {
            lm,
            bank,
            prompt_states: prompts.keys().map(|k| (k.clone(), AdamState::default())).collect(),
            prompts,
            attention,
            method,
            cfg,
            attention_state: AdamState::default(),
            step: 0,
            log: RunLog::default(),
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            prompts: self.prompts.clone(),
            attention: self.attention.clone(),
        }
    }

    fn apply(&mut self, grads: &BatchGradients) -> Result<()> {
        let scale = self.cfg.lr_factor(self.step);
        let (plr, alr) = (self.cfg.prompt_lr * scale, self.cfg.attention_lr * scale);
        // Unused prompts are skipped entirely (no decay, no momentum drift).
        for key in &grads.used {
            if plr == 0.0 {
                break;
            }
            let p = self.prompts.get_mut(key).expect("routed prompt exists");
            let st = self.prompt_states.get_mut(key).expect("state per prompt");
            adam_step(&mut [(key, p.values_mut()?)], &[&grads.prompts[key]], st, plr, self.cfg.weight_decay)?;
        }
        if let (Some(g), Some(ga), true) = (&mut self.attention, &grads.attention, alr > 0.0) {
            let names = AttentionModule::<f32>::PARAM_NAMES;
            let mut group: Vec<(&str, &mut Tensor)> = names.into_iter().zip(g.tensors_mut()).collect();
            let refs: Vec<&Tensor> = ga.iter().collect();
            adam_step(&mut group, &refs, &mut self.attention_state, alr, self.cfg.weight_decay)?;
        }
        self.log.push(format!(
            "step={} loss={:.6} prompt_lr={plr:.6e} attention_lr={alr:.6e}",
            self.step + 1,
            grads.loss
        ));
        self.step += 1;
        Ok(())
    }

    /// Gradients for one optimizer step spanning `batches`.
    fn gradients(&self, batches: &[Batch]) -> Result<BatchGradients> {
        let denom: usize = batches.iter().map(Batch::len).sum();
        let mut total: Option<BatchGradients> = None;
        for b in batches {
            let examples: Vec<Example> = (0..b.len()).map(|i| b.example(i)).collect();
            let refs: Vec<&Example> = examples.iter().collect();
            let g = batch_gradients(
                self.lm,
                &self.bank,
                &self.prompts,
                self.attention.as_ref(),
                &refs,
                &self.method,
                denom,
            )?;
            match &mut total {
                Some(t) => t.accumulate(g)?,
                None => total = Some(g),
            }
        }
        total.ok_or(Error::DegenerateBatch)
    }

    fn dev_metric(&self, tasks: &[&TaskDataset], with_target: bool) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut sum = 0.0;
        let mut attn = BTreeMap::new();
        for task in tasks {
            let composer = match &self.method {
                Method::PromptTuning => Composer::Plain(route(&self.prompts, &task.task_id)?),
                Method::Attempt(flags) => Composer::Attempt {
                    bank: &self.bank,
                    attention: self.attention.as_ref(),
                    target: if with_target { Some(route(&self.prompts, &task.task_id)?) } else { None },
                    flags,
                },
            };
            let r = evaluate_with(self.lm, &composer, task, Split::Dev, self.cfg.eval_limit)?;
            sum += r.exact_match;
            if let Some(a) = r.mean_attention {
                attn.insert(task.task_id.clone(), a);
            }
        }
        Ok((sum / tasks.len() as f64, attn))
    }

    fn run(mut self, regime: Regime, tasks: &[&TaskDataset], skip_eval: bool) -> Result<Outcome> {
        let start = Instant::now();
        let cfg = self.cfg;
        let with_target = !matches!(&self.method, Method::Attempt(f) if f.no_target);
        let eval = |l: &Self| -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
            if skip_eval {
                Ok((0.0, BTreeMap::new()))
            } else {
                l.dev_metric(tasks, with_target)
            }
        };
        let (init_metric, _) = eval(&self)?;
        self.log.push(format!("epoch=0 dev_metric={init_metric:.6}"));
        let mut best = (init_metric, 0usize, self.snapshot());
        let mut epochs = Vec::new();
        let rng = Rng::new(cfg.seed).fork(0xba7c);
        'outer: for epoch in 1..=cfg.epochs {
            let batches: Vec<Batch> = make_batches(tasks, cfg.batch_size, rng.fork(epoch as u64).seed(), true)?.collect();
            let (mut loss_sum, mut count) = (0.0, 0usize);
            let mut stopped = false;
            for chunk in batches.chunks(cfg.grad_accum) {
                if cfg.max_steps.is_some_and(|m| self.step >= m) {
                    stopped = true;
                    break;
                }
                let grads = self.gradients(chunk)?;
                loss_sum += grads.loss * grads.count as f64;
                count += grads.count;
                self.apply(&grads)?;
            }
            if count == 0 {
                break;
            }
            let (dev_metric, mean_attention) = eval(&self)?;
            let train_loss = loss_sum / count as f64;
            self.log.push(format!("epoch={epoch} train_loss={train_loss:.6} dev_metric={dev_metric:.6}"));
            for (t, a) in &mean_attention {
                let a: Vec<String> = a.iter().map(|v| format!("{v:.4}")).collect();
                self.log.push(format!("epoch={epoch} task={t} mean_attention=[{}]", a.join(",")));
            }
            if dev_metric > best.0 {
                best = (dev_metric, epoch, self.snapshot());
            }
            epochs.push(EpochRecord {
                epoch,
                steps: self.step,
                train_loss,
                dev_metric,
                mean_attention,
            });
            if stopped || cfg.max_steps.is_some_and(|m| self.step >= m) {
                break 'outer;
            }
        }
        if skip_eval {
            best = (0.0, epochs.len(), self.snapshot());
        }
        let report = TrainReport {
            regime,
            task_ids: tasks.iter().map(|t| t.task_id.clone()).collect(),
            seed: cfg.seed,
            init_dev_metric: init_metric,
            best_epoch: best.1,
            best_dev_metric: best.0,
            best_checkpoint_id: if best.1 == 0 { "init".into() } else { format!("epoch-{}", best.1) },
            steps: self.step,
            attention_init: None,
            theta_hash: self.lm.theta_hash(),
            bank_hash: self.bank.hash(),
            epochs,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        Ok(Outcome {
            best: best.2,
            report,
            log: self.log,
        })
    }
}

fn check_task(task: &TaskDataset) -> Result<()> {
    if task.train.is_empty() {
        return Err(Error::Data(format!("task `{}` has no training examples", task.task_id)));
    }
    Ok(())
}

fn init_prompt(lm: &FrozenLm, bank: &PromptBank, cfg: &TrainConfig, name: &str, rng: &mut Rng) -> Result<SoftPrompt> {
    match &cfg.target_init {
        TargetInit::RandomVocab => SoftPrompt::from_random_vocab(name, lm, cfg.prompt_length, rng),
        TargetInit::FromSource(src) => {
            let p = bank
                .get(src)
                .ok_or_else(|| Error::Config(format!("target_init source `{src}` is not in the bank")))?;
            if p.len() != cfg.prompt_length {
                return Err(Error::Compatibility(format!(
                    "source prompt `{src}` has length {}, config wants {}",
                    p.len(),
                    cfg.prompt_length
                )));
            }
            Ok(SoftPrompt::copied_from(p, name))
        }
    }
}

fn check_bank(lm: &FrozenLm, bank: &PromptBank, cfg: &TrainConfig) -> Result<()> {
    if let Some((m, d)) = bank.prompt_shape() {
        if (m, d) != (cfg.prompt_length, lm.model_dim()) {
            return Err(Error::Compatibility(format!(
                "bank prompts are {m}×{d}, expected {}×{}",
                cfg.prompt_length,
                lm.model_dim()
            )));
        }
    }
    Ok(())
}

fn init_attention(
    lm: &FrozenLm,
    cfg: &TrainConfig,
    prior: Option<&AttentionModule>,
    rng: &mut Rng,
    log: &mut RunLog,
) -> Result<Option<AttentionModule>> {
    if cfg.ablation.constant_attention {
        log.push("attention_init=none (constant attention)");
        return Ok(None);
    }
    let d = lm.model_dim();
    match prior {
        Some(_) if cfg.ablation.no_prior => Err(Error::Config("a prior was supplied under the no_prior ablation".into())),
        Some(p) => {
            p.validate()?;
            if (p.dim(), p.bottleneck()) != (d, cfg.bottleneck) {
                return Err(Error::Compatibility(format!(
                    "prior attention is {}×{}, expected {d}×{}",
                    p.dim(),
                    p.bottleneck(),
                    cfg.bottleneck
                )));
            }
            log.push("attention_init=prior");
            let mut g = p.clone();
            g.temperature = cfg.temperature_k;
            Ok(Some(g))
        }
        None => {
            log.push("attention_init=fresh");
            Ok(Some(AttentionModule::new(d, cfg.bottleneck, cfg.temperature_k, rng)?))
        }
    }
}

/// Prompt tuning on one task with only the prompt trainable. Returns the
/// best-dev prompt, frozen.
pub fn train_source_prompt(lm: &FrozenLm, task: &TaskDataset, cfg: &TrainConfig) -> Result<SourceRun> {
    cfg.validate(lm.model_dim())?;
    check_task(task)?;
    let mut rng = Rng::new(cfg.seed).fork(1);
    let prompt = SoftPrompt::from_random_vocab(task.task_id.clone(), lm, cfg.prompt_length, &mut rng)?;
    let prompts = BTreeMap::from([(task.task_id.clone(), prompt)]);
    let learner = Learner::new(lm, PromptBank::empty(), prompts, None, Method::PromptTuning, cfg);
    let mut out = learner.run(Regime::Source, &[task], false)?;
    let prompt = out.best.prompts.remove(&task.task_id).expect("task prompt").freeze();
    Ok(SourceRun {
        prompt,
        report: out.report,
        log: out.log,
    })
}

/// Instance-wise prompt tuning on one target task.
///
/// `prior` initializes the attention module (see [`pretrain_attention_prior`]);
/// without it the module starts fresh.
pub fn train_target(
    lm: &FrozenLm,
    bank: &PromptBank,
    task: &TaskDataset,
    cfg: &TrainConfig,
    prior: Option<&AttentionModule>,
) -> Result<TargetRun> {
    cfg.validate(lm.model_dim())?;
    check_task(task)?;
    if cfg.ablation.no_target {
        return Err(Error::Config(
            "no_target leaves nothing to train; use evaluation-only composition".into(),
        ));
    }
    check_bank(lm, bank, cfg)?;
    let seed_rng = Rng::new(cfg.seed);
    let target = init_prompt(lm, bank, cfg, &task.task_id, &mut seed_rng.fork(1))?;
    let mut log = RunLog::default();
    let attention = init_attention(lm, cfg, prior, &mut seed_rng.fork(2), &mut log)?;
    let attention_init = log.lines().last().cloned();
    let eff = cfg.ablation.effective_bank(bank)?;
    let prompts = BTreeMap::from([(task.task_id.clone(), target)]);
    let learner = Learner::new(lm, eff, prompts, attention, Method::Attempt(cfg.ablation.clone()), cfg);
    let mut out = learner.run(Regime::Target, &[task], false)?;
    log.extend(&out.log);
    out.report.attention_init = attention_init.map(|l| l.trim_start_matches("attention_init=").to_string());
    Ok(TargetRun {
        prompt: out.best.prompts.remove(&task.task_id).expect("task prompt"),
        attention: out.best.attention,
        report: out.report,
        log,
    })
}

fn unique_tasks(tasks: &[&TaskDataset]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in tasks {
        check_task(t)?;
        if !seen.insert(t.task_id.as_str()) {
            return Err(Error::Config(format!("duplicate task id `{}`", t.task_id)));
        }
    }
    Ok(())
}

fn multi(
    lm: &FrozenLm,
    bank: &PromptBank,
    tasks: &[&TaskDataset],
    cfg: &TrainConfig,
    prior: Option<&AttentionModule>,
    regime: Regime,
) -> Result<MultiTaskRun> {
    if cfg.ablation.no_target {
        return Err(Error::Config("no_target leaves no task prompts to train".into()));
    }
    if cfg.ablation.constant_attention {
        return Err(Error::Config("multi-task training needs a trainable attention module".into()));
    }
    check_bank(lm, bank, cfg)?;
    let seed_rng = Rng::new(cfg.seed);
    let mut prompts = BTreeMap::new();
    for (i, t) in tasks.iter().enumerate() {
        let p = init_prompt(lm, bank, cfg, &t.task_id, &mut seed_rng.fork(1).fork(i as u64))?;
        prompts.insert(t.task_id.clone(), p);
    }
    let mut log = RunLog::default();
    let attention = init_attention(lm, cfg, prior, &mut seed_rng.fork(2), &mut log)?.expect("not constant attention");
    let eff = cfg.ablation.effective_bank(bank)?;
    let learner = Learner::new(lm, eff, prompts, Some(attention), Method::Attempt(cfg.ablation.clone()), cfg);
    let mut out = learner.run(regime, tasks, regime == Regime::AttentionPrior)?;
    log.extend(&out.log);
    out.report.attention_init = Some(if prior.is_some() { "prior" } else { "fresh" }.into());
    Ok(MultiTaskRun {
        prompts: out.best.prompts,
        attention: out.best.attention.expect("trainable attention"),
        report: out.report,
        log,
    })
}

/// Mixed-task training: one prompt per task, one shared attention module.
pub fn train_multi_task(
    lm: &FrozenLm,
    bank: &PromptBank,
    tasks: &[&TaskDataset],
    cfg: &TrainConfig,
    prior: Option<&AttentionModule>,
) -> Result<MultiTaskRun> {
    cfg.validate(lm.model_dim())?;
    if tasks.len() < 2 {
        return Err(Error::Config("multi-task training needs at least two tasks".into()));
    }
    unique_tasks(tasks)?;
    multi(lm, bank, tasks, cfg, prior, Regime::MultiTask)
}

/// Trains the attention module across the source tasks, each with a fresh
/// throwaway prompt, and returns the module. Ablation flags in `cfg` are
/// ignored; all `cfg.epochs` are run (no dev selection).
pub fn pretrain_attention_prior(
    lm: &FrozenLm,
    bank: &PromptBank,
    source_tasks: &[&TaskDataset],
    cfg: &TrainConfig,
) -> Result<PriorRun> {
    cfg.validate(lm.model_dim())?;
    if source_tasks.is_empty() {
        return Err(Error::Config("attention prior needs at least one source task".into()));
    }
    unique_tasks(source_tasks)?;
    for t in source_tasks {
        if bank.get(&t.task_id).is_none() {
            return Err(Error::Config(format!("source task `{}` has no bank prompt", t.task_id)));
        }
    }
    let renamed: Vec<TaskDataset> = source_tasks.iter().map(|t| t.renamed(&format!("prior:{}", t.task_id))).collect();
    let refs: Vec<&TaskDataset> = renamed.iter().collect();
    let prior_cfg = TrainConfig {
        ablation: AblationFlags::none(),
        target_init: TargetInit::RandomVocab,
        ..cfg.clone()
    };
    let run = multi(lm, bank, &refs, &prior_cfg, None, Regime::AttentionPrior)?;
    let mut log = RunLog::default();
    log.push(format!(
        "event=attention_prior_pretraining sources=[{}] steps={}",
        source_tasks.iter().map(|t| t.task_id.as_str()).collect::<Vec<_>>().join(","),
        run.report.steps
    ));
    log.extend(&run.log);
    Ok(PriorRun {
        attention: run.attention,
        report: run.report,
        log,
    })
}
