//! Experiment commands: each reads an [`ExperimentConfig`] and writes artifacts under its output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ExperimentConfig, TaskRole, TaskSpec};
use crate::data::{self, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::export::{self, AttentionMatrix};
use crate::nn::{build_frozen_lm, FrozenLm};
use crate::prompt::{AblationFlags, AttentionModule, PromptBank};
use crate::rng::Rng;
use crate::train::{self, Composer, EvalReport, ParamCount, TargetInit, TrainConfig, TrainReport};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

/// Loads the backbone checkpoint named by the config.
pub fn load_backbone(cfg: &ExperimentConfig) -> Result<FrozenLm> {
    let path = cfg.lm_path();
    ExperimentConfig::require("backbone checkpoint", std::slice::from_ref(&path))?;
    checkpoint::load_lm(&Checkpoint::load(&path)?)
}

/// Loads and freezes every bank prompt, checking each against `lm`.
pub fn load_bank(cfg: &ExperimentConfig, lm: &FrozenLm) -> Result<PromptBank> {
    let paths = cfg.bank_paths();
    ExperimentConfig::require("bank prompt", &paths)?;
    let theta = lm.theta_hash();
    let prompts = paths
        .iter()
        .map(|p| Ok(checkpoint::load_prompt(&Checkpoint::load(p)?, &theta)?.freeze()))
        .collect::<Result<Vec<_>>>()?;
    PromptBank::new(prompts)
}

fn load_tasks<'a>(cfg: &ExperimentConfig, specs: impl IntoIterator<Item = &'a TaskSpec>) -> Result<Vec<TaskDataset>> {
    specs.into_iter().map(|s| cfg.load_task(s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BuildSummary {
    pub path: PathBuf,
    pub param_count: usize,
    pub trainable_params: usize,
    pub theta_hash: String,
}

pub fn build_lm(cfg: &ExperimentConfig) -> Result<BuildSummary> {
    let lm = build_frozen_lm(&cfg.lm, &mut Rng::new(cfg.lm_seed))?;
    let path = cfg.lm_path();
    checkpoint::lm_checkpoint(&lm, cfg.lm_seed)?.save(&path)?;
    Ok(BuildSummary {
        path,
        param_count: lm.param_count(),
        trainable_params: lm.trainable_param_count(),
        theta_hash: lm.theta_hash(),
    })
}

/// Writes `<id>.jsonl` and `<id>.manifest.json` for every configured task.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.require_datasets(&cfg.tasks)?;
    let mut written = Vec::new();
    for spec in &cfg.tasks {
        let ds = cfg.load_task(spec)?;
        let path = out_dir.join(format!("{}.jsonl", spec.id));
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        data::save_jsonl(&ds, &path)?;
        write_json(&out_dir.join(format!("{}.manifest.json", spec.id)), &ds.manifest())?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct SourceOutcome {
    pub task_id: String,
    pub checkpoint: PathBuf,
    pub report: TrainReport,
}

pub fn train_source(cfg: &ExperimentConfig) -> Result<Vec<SourceOutcome>> {
    let specs: Vec<&TaskSpec> = cfg.tasks_with(TaskRole::Source).collect();
    if specs.is_empty() {
        return Err(Error::Config("no source tasks configured".into()));
    }
    cfg.require_datasets(specs.iter().copied())?;
    let lm = load_backbone(cfg)?;
    let tasks = load_tasks(cfg, specs)?;
    let out = cfg.output_dir();
    let mut outcomes = Vec::new();
    for task in &tasks {
        let run = train::train_source_prompt(&lm, task, &cfg.train)?;
        let path = cfg.source_prompt_path(&task.task_id);
        checkpoint::prompt_checkpoint(&run.prompt, &lm.theta_hash(), None, cfg.train.seed)?.save(&path)?;
        write(&out.join("reports").join(format!("source-{}.json", task.task_id)), run.report.to_json()? + "\n")?;
        write(&out.join("logs").join(format!("source-{}.log", task.task_id)), run.log.render())?;
        outcomes.push(SourceOutcome {
            task_id: task.task_id.clone(),
            checkpoint: path,
            report: run.report,
        });
    }
    Ok(outcomes)
}

/// Command-line overrides for target training.
#[derive(Clone, Debug, Default)]
pub struct TargetOptions {
    pub multi_task: bool,
    pub ablation: Option<AblationFlags>,
    pub prior: Option<PathBuf>,
    pub target_init: Option<TargetInit>,
    pub attention_lr: Option<f64>,
    pub prompt_lr: Option<f64>,
    /// Restricts single-task training to this target.
    pub task: Option<String>,
}

impl TargetOptions {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if let Some(a) = &self.ablation {
            cfg.ablation = a.clone();
        }
        if let Some(t) = &self.target_init {
            cfg.target_init = t.clone();
        }
        if let Some(lr) = self.attention_lr {
            cfg.attention_lr = lr;
        }
        if let Some(lr) = self.prompt_lr {
            cfg.prompt_lr = lr;
        }
        cfg
    }
}

/// Directory name for an ablation setting.
pub fn variant_name(flags: &AblationFlags) -> String {
    if flags.no_target {
        "no-target".into()
    } else if flags.constant_attention {
        "const-attn".into()
    } else if let Some(s) = &flags.single_source {
        format!("single-{s}")
    } else if flags.no_prior {
        "no-prior".into()
    } else {
        "full".into()
    }
}

/// Parses `no-target`, `const-attn`, `single:NAME` or `no-prior`.
pub fn parse_ablation(s: &str) -> Result<AblationFlags> {
    let mut f = AblationFlags::none();
    match s {
        "none" | "full" => {}
        "no-target" => f.no_target = true,
        "const-attn" => f.constant_attention = true,
        "no-prior" => f.no_prior = true,
        _ => match s.strip_prefix("single:") {
            Some(name) if !name.is_empty() => f.single_source = Some(name.to_string()),
            _ => return Err(Error::Config(format!("unknown ablation `{s}`"))),
        },
    }
    Ok(f)
}

/// Parses `random` or `source:NAME`.
pub fn parse_target_init(s: &str) -> Result<TargetInit> {
    match s {
        "random" => Ok(TargetInit::RandomVocab),
        _ => match s.strip_prefix("source:") {
            Some(name) if !name.is_empty() => Ok(TargetInit::FromSource(name.to_string())),
            _ => Err(Error::Config(format!("unknown target init `{s}`"))),
        },
    }
}

#[derive(Clone, Debug)]
pub struct TargetOutcome {
    pub variant: String,
    pub reports: Vec<TrainReport>,
    /// Filled only for the evaluation-only `no-target` composition.
    pub evals: Vec<EvalReport>,
    pub artifacts: Vec<PathBuf>,
}

pub fn target_dir(cfg: &ExperimentConfig, variant: &str) -> PathBuf {
    cfg.output_dir().join("target").join(variant)
}

fn attention_path(cfg: &ExperimentConfig, variant: &str, task_id: &str) -> PathBuf {
    target_dir(cfg, variant).join(format!("{task_id}.attention.ckpt"))
}

fn target_prompt_path(cfg: &ExperimentConfig, variant: &str, task_id: &str) -> PathBuf {
    target_dir(cfg, variant).join(format!("{task_id}.prompt.ckpt"))
}

const MULTI_ATTENTION: &str = "multi-task";

fn fresh_attention(lm: &FrozenLm, tc: &TrainConfig) -> Result<AttentionModule> {
    AttentionModule::new(lm.model_dim(), tc.bottleneck, tc.temperature_k, &mut Rng::new(tc.seed).fork(2))
}

pub fn train_target(cfg: &ExperimentConfig, opts: &TargetOptions) -> Result<TargetOutcome> {
    let tc = opts.apply(&cfg.train);
    tc.validate(cfg.lm.model_dim)?;
    let specs: Vec<&TaskSpec> = match &opts.task {
        Some(id) => vec![cfg.task(id)?],
        None => cfg.tasks_with(TaskRole::Target).collect(),
    };
    if specs.is_empty() {
        return Err(Error::Config("no target tasks configured".into()));
    }
    let prior_path = if tc.ablation.no_prior {
        None
    } else {
        opts.prior.clone().or_else(|| cfg.prior_path())
    };
    // Every input is resolved before any training starts.
    cfg.require_datasets(specs.iter().copied())?;
    ExperimentConfig::require("backbone checkpoint", &[cfg.lm_path()])?;
    ExperimentConfig::require("bank prompt", &cfg.bank_paths())?;
    if let Some(p) = &prior_path {
        ExperimentConfig::require("attention prior", std::slice::from_ref(p))?;
    }
    let lm = load_backbone(cfg)?;
    let bank = load_bank(cfg, &lm)?;
    let theta = lm.theta_hash();
    let prior = match &prior_path {
        Some(p) => Some(checkpoint::load_attention(&Checkpoint::load(p)?, &theta)?),
        None => None,
    };
    let tasks = load_tasks(cfg, specs)?;
    let variant = variant_name(&tc.ablation);
    let dir = target_dir(cfg, &variant);
    let mut out = TargetOutcome {
        variant: variant.clone(),
        reports: Vec::new(),
        evals: Vec::new(),
        artifacts: Vec::new(),
    };

    if tc.ablation.no_target {
        let g = match &prior {
            Some(g) => g.clone(),
            None => fresh_attention(&lm, &tc)?,
        };
        for task in &tasks {
            let r = train::evaluate(&lm, &bank, Some(&g), None, task, &tc.ablation, Split::Dev)?;
            let path = dir.join(format!("{}.eval.json", task.task_id));
            write_json(&path, &r)?;
            out.artifacts.push(path);
            out.evals.push(r);
        }
        return Ok(out);
    }

    let save_report = |out: &mut TargetOutcome, name: &str, report: TrainReport, log: &train::RunLog| -> Result<()> {
        let rp = dir.join(format!("{name}.report.json"));
        write(&rp, report.to_json()? + "\n")?;
        write(&dir.join(format!("{name}.log")), log.render())?;
        out.artifacts.push(rp);
        out.reports.push(report);
        Ok(())
    };

    if opts.multi_task {
        let refs: Vec<&TaskDataset> = tasks.iter().collect();
        let run = train::train_multi_task(&lm, &bank, &refs, &tc, prior.as_ref())?;
        for (id, p) in &run.prompts {
            let path = target_prompt_path(cfg, &variant, id);
            checkpoint::prompt_checkpoint(p, &theta, Some(bank.hash()), tc.seed)?.save(&path)?;
            out.artifacts.push(path);
        }
        let path = attention_path(cfg, &variant, MULTI_ATTENTION);
        checkpoint::attention_checkpoint(&run.attention, &theta, Some(bank.hash()), tc.seed)?.save(&path)?;
        out.artifacts.push(path);
        save_report(&mut out, MULTI_ATTENTION, run.report, &run.log)?;
        return Ok(out);
    }

    for task in &tasks {
        let run = train::train_target(&lm, &bank, task, &tc, prior.as_ref())?;
        let path = target_prompt_path(cfg, &variant, &task.task_id);
        checkpoint::prompt_checkpoint(&run.prompt, &theta, Some(bank.hash()), tc.seed)?.save(&path)?;
        out.artifacts.push(path);
        if let Some(g) = &run.attention {
            let path = attention_path(cfg, &variant, &task.task_id);
            checkpoint::attention_checkpoint(g, &theta, Some(bank.hash()), tc.seed)?.save(&path)?;
            out.artifacts.push(path);
        }
        save_report(&mut out, &task.task_id, run.report, &run.log)?;
    }
    Ok(out)
}

/// Trains an attention module over the source tasks and saves it as `<output_dir>/prior.attention.ckpt`.
pub fn pretrain_prior(cfg: &ExperimentConfig) -> Result<(PathBuf, TrainReport)> {
    let specs: Vec<&TaskSpec> = cfg.tasks_with(TaskRole::Source).collect();
    cfg.require_datasets(specs.iter().copied())?;
    let lm = load_backbone(cfg)?;
    let bank = load_bank(cfg, &lm)?;
    let tasks = load_tasks(cfg, specs)?;
    let refs: Vec<&TaskDataset> = tasks.iter().collect();
    let run = train::pretrain_attention_prior(&lm, &bank, &refs, &cfg.train)?;
    let path = cfg.output_dir().join("prior.attention.ckpt");
    checkpoint::attention_checkpoint(&run.attention, &lm.theta_hash(), Some(bank.hash()), cfg.train.seed)?.save(&path)?;
    write(&cfg.output_dir().join("reports").join("prior.json"), run.report.to_json()? + "\n")?;
    Ok((path, run.report))
}

/// Rejects an attention module whose width differs from the bank prompts.
pub fn check_compatible(g: &AttentionModule, bank: &PromptBank) -> Result<()> {
    if let Some((m, d)) = bank.prompt_shape() {
        if g.dim() != d {
            return Err(Error::Compatibility(format!(
                "attention module has W_down {:?} (d={}) but bank prompts are {m}x{d}",
                g.w_down.shape(),
                g.dim()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskMetric {
    pub task_id: String,
    pub split: Split,
    pub n: usize,
    pub exact_match: f64,
    pub mean_attention: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub reports: Vec<EvalReport>,
    pub matrix: Option<AttentionMatrix>,
    pub dir: PathBuf,
}

/// Evaluates saved target artifacts of `variant` and exports attention tables.
pub fn eval(cfg: &ExperimentConfig, variant: &str, split: Split, svg: bool) -> Result<EvalOutcome> {
    let specs: Vec<&TaskSpec> = cfg.tasks_with(TaskRole::Target).collect();
    if specs.is_empty() {
        return Err(Error::Config("no target tasks configured".into()));
    }
    let flags = match variant {
        "full" => AblationFlags::none(),
        v => parse_ablation(&v.replacen("single-", "single:", 1))?,
    };
    let prompt_paths: Vec<PathBuf> = specs.iter().map(|s| target_prompt_path(cfg, variant, &s.id)).collect();
    let multi = attention_path(cfg, variant, MULTI_ATTENTION);
    let attention_paths: Vec<PathBuf> = if flags.constant_attention {
        Vec::new()
    } else if multi.is_file() {
        vec![multi.clone()]
    } else {
        specs.iter().map(|s| attention_path(cfg, variant, &s.id)).collect()
    };
    cfg.require_datasets(specs.iter().copied())?;
    ExperimentConfig::require("target prompt", &prompt_paths)?;
    ExperimentConfig::require("attention module", &attention_paths)?;
    let lm = load_backbone(cfg)?;
    let bank = load_bank(cfg, &lm)?;
    let theta = lm.theta_hash();
    let bank = flags.effective_bank(&bank)?;
    let modules = attention_paths
        .iter()
        .map(|p| {
            let g = checkpoint::load_attention(&Checkpoint::load(p)?, &theta)?;
            check_compatible(&g, &bank)?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let task = cfg.load_task(spec)?;
        let prompt = checkpoint::load_prompt(&Checkpoint::load(&prompt_paths[i])?, &theta)?;
        let g = match modules.len() {
            0 => None,
            1 => Some(&modules[0]),
            _ => Some(&modules[i]),
        };
        let composer = Composer::Attempt {
            bank: &bank,
            attention: g,
            target: Some(&prompt),
            flags: &flags,
        };
        reports.push(train::evaluate_with(&lm, &composer, &task, split, None)?);
    }
    let dir = cfg.output_dir().join("eval").join(variant);
    let metrics: Vec<TaskMetric> = reports
        .iter()
        .map(|r| TaskMetric {
            task_id: r.task_id.clone(),
            split: r.split,
            n: r.n,
            exact_match: r.exact_match,
            mean_attention: r.mean_attention.clone(),
        })
        .collect();
    write_json(&dir.join("metrics.json"), &metrics)?;
    let matrix = if reports.iter().any(|r| !r.instance_attention.is_empty()) {
        Some(export::export_all(&dir, &reports, svg)?)
    } else {
        None
    };
    Ok(EvalOutcome { reports, matrix, dir })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSummary {
    pub count: ParamCount,
    pub prompt_tuning: usize,
}

pub fn params(tc: &TrainConfig, d: usize, n_tasks: usize) -> Result<ParamSummary> {
    Ok(ParamSummary {
        count: train::count_trainable_params(tc, d, n_tasks)?,
        prompt_tuning: train::count_prompt_tuning_params(tc, d),
    })
}

impl ParamSummary {
    pub fn render(&self) -> String {
        let c = &self.count;
        format!(
            "d={} m={} r={} N={}\nprompt per task: {}\nattention module: {}\ntotal trainable: {}\nper task: {:.1}\nprompt tuning baseline: {}\n",
            c.d, c.m, c.r, c.n_tasks, c.prompt_per_task, c.attention, c.total, c.per_task, self.prompt_tuning
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub variant: String,
    /// Best dev exact match per seed.
    pub dev: Vec<f64>,
}

impl GridRow {
    pub fn mean(&self) -> f64 {
        self.dev.iter().sum::<f64>() / self.dev.len().max(1) as f64
    }
}

/// The five ablation settings, in table order.
pub fn grid_variants(bank: &PromptBank) -> Vec<AblationFlags> {
    let single = bank.names().first().map(|s| s.to_string());
    vec![
        AblationFlags::none(),
        AblationFlags {
            no_target: true,
            ..AblationFlags::none()
        },
        AblationFlags {
            constant_attention: true,
            ..AblationFlags::none()
        },
        AblationFlags {
            single_source: single,
            ..AblationFlags::none()
        },
        AblationFlags {
            no_prior: true,
            ..AblationFlags::none()
        },
    ]
}

/// One training run per (variant, seed) on `task`.
///
/// The full method starts from `prior`; `no-prior` starts fresh;
/// `no-target` is scored without training.
pub fn run_grid(
    lm: &FrozenLm,
    bank: &PromptBank,
    task: &TaskDataset,
    tc: &TrainConfig,
    prior: Option<&AttentionModule>,
    seeds: &[u64],
) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for flags in grid_variants(bank) {
        let mut dev = Vec::new();
        for &seed in seeds {
            let c = TrainConfig {
                seed,
                ablation: flags.clone(),
                ..tc.clone()
            };
            let score = if flags.no_target {
                let g = match prior {
                    Some(g) => g.clone(),
                    None => fresh_attention(lm, &c)?,
                };
                let composer = Composer::Attempt {
                    bank,
                    attention: Some(&g),
                    target: None,
                    flags: &flags,
                };
                train::evaluate_with(lm, &composer, task, Split::Dev, c.eval_limit)?.exact_match
            } else {
                let p = if flags.no_prior || flags.constant_attention { None } else { prior };
                train::train_target(lm, bank, task, &c, p)?.report.best_dev_metric
            };
            dev.push(score);
        }
        rows.push(GridRow {
            variant: variant_name(&flags),
            dev,
        });
    }
    Ok(rows)
}

pub fn render_grid(rows: &[GridRow], seeds: &[u64]) -> String {
    let mut s = String::from("| variant |");
    for seed in seeds {
        let _ = write!(s, " seed {seed} |");
    }
    s.push_str(" mean |\n|---|");
    s.push_str(&"---|".repeat(seeds.len() + 1));
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} |", r.variant);
        for v in &r.dev {
            let _ = write!(s, " {v:.3} |");
        }
        let _ = writeln!(s, " {:.3} |", r.mean());
    }
    s
}

/// Runs the ablation grid on one target task and writes `ablation.md` and `ablation.json`.
pub fn ablation_grid(cfg: &ExperimentConfig, task_id: Option<&str>, seeds: &[u64]) -> Result<Vec<GridRow>> {
    let spec = match task_id {
        Some(id) => cfg.task(id)?,
        None => cfg
            .tasks_with(TaskRole::Target)
            .next()
            .ok_or_else(|| Error::Config("no target tasks configured".into()))?,
    };
    cfg.require_datasets([spec])?;
    ExperimentConfig::require("backbone checkpoint", &[cfg.lm_path()])?;
    ExperimentConfig::require("bank prompt", &cfg.bank_paths())?;
    let prior_path = cfg.prior_path();
    if let Some(p) = &prior_path {
        ExperimentConfig::require("attention prior", std::slice::from_ref(p))?;
    }
    let lm = load_backbone(cfg)?;
    let bank = load_bank(cfg, &lm)?;
    let prior = match &prior_path {
        Some(p) => Some(checkpoint::load_attention(&Checkpoint::load(p)?, &lm.theta_hash())?),
        None => None,
    };
    let task = cfg.load_task(spec)?;
    let rows = run_grid(&lm, &bank, &task, &cfg.train, prior.as_ref(), seeds)?;
    let out = cfg.output_dir();
    write(&out.join("ablation.md"), render_grid(&rows, seeds))?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_flags_parse() {
        assert!(parse_ablation("no-target").unwrap().no_target);
        assert!(parse_ablation("const-attn").unwrap().constant_attention);
        assert!(parse_ablation("no-prior").unwrap().no_prior);
        assert_eq!(parse_ablation("single:copy").unwrap().single_source.as_deref(), Some("copy"));
        for bad in ["single:", "nope", ""] {
            assert!(parse_ablation(bad).is_err());
        }
        for f in ["no-target", "const-attn", "no-prior", "full"] {
            assert_eq!(variant_name(&parse_ablation(f).unwrap()), f);
        }
    }

    #[test]
    fn target_init_parses() {
        assert_eq!(parse_target_init("random").unwrap(), TargetInit::RandomVocab);
        assert_eq!(parse_target_init("source:sort").unwrap(), TargetInit::FromSource("sort".into()));
        assert!(parse_target_init("source:").is_err());
    }

    #[test]
    fn grid_table_has_a_row_per_variant() {
        let rows: Vec<GridRow> = ["full", "no-target", "const-attn", "single-copy", "no-prior"]
            .iter()
            .map(|v| GridRow {
                variant: v.to_string(),
                dev: vec![0.5, 0.25],
            })
            .collect();
        let t = render_grid(&rows, &[0, 1]);
        assert_eq!(t.lines().count(), 7);
        assert!(t.contains("| single-copy | 0.500 | 0.250 | 0.375 |"));
    }

    #[test]
    fn full_scale_accounting() {
        let s = params(&TrainConfig::full_scale(), 768, 1).unwrap();
        assert_eq!(s.count.total, 231_936);
        assert_eq!(s.prompt_tuning, 76_800);
        assert!(s.render().contains("total trainable: 231936"));
    }
}
