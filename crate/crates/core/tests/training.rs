//! Training-progress oracles on a small instructed backbone.

use std::sync::OnceLock;

use attempt_core::data::{self, GenOptions, TaskDataset, TaskKind};
use attempt_core::nn::{build_frozen_lm, FrozenLm, LmConfig};
use attempt_core::prompt::{PromptBank, PromptOrigin};
use attempt_core::train::{self, TrainConfig};
use attempt_core::Rng;

fn lm_config() -> LmConfig {
    let mut cfg = LmConfig::default();
    cfg.pretrain.steps = 3000;
    cfg.pretrain.min_len = 2;
    cfg.pretrain.max_len = 5;
    cfg.pretrain.content_tokens = 16;
    cfg.pretrain.instructed = vec![TaskKind::Copy, TaskKind::Sort, TaskKind::Reverse];
    cfg
}

fn backbone() -> &'static FrozenLm {
    static LM: OnceLock<FrozenLm> = OnceLock::new();
    LM.get_or_init(|| build_frozen_lm(&lm_config(), &mut Rng::new(0)).unwrap())
}

fn task(kind: TaskKind, size: usize, seed: u64) -> TaskDataset {
    let pc = &lm_config().pretrain;
    let opts = GenOptions {
        min_len: pc.min_len,
        max_len: pc.max_len,
        content_tokens: pc.content_tokens,
        ..GenOptions::default()
    };
    data::gen_synthetic_task_with(kind, size, seed, &opts).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        prompt_lr: 0.03,
        attention_lr: 0.03,
        warmup_steps: 0,
        eval_limit: Some(60),
        ..TrainConfig::default()
    }
}

#[test]
fn source_training_improves_copy() {
    let lm = backbone();
    let theta = lm.theta_hash();
    let copy = task(TaskKind::Copy, 200, 1);
    let run = train::train_source_prompt(lm, &copy, &TrainConfig { epochs: 20, ..cfg() }).unwrap();
    assert_eq!(run.prompt.origin(), PromptOrigin::RandomVocab);
    assert!(!run.prompt.is_trainable());
    assert_eq!(lm.theta_hash(), theta);
    assert!(
        run.report.best_dev_metric > run.report.init_dev_metric,
        "dev {} vs init {}",
        run.report.best_dev_metric,
        run.report.init_dev_metric
    );
}

#[test]
fn prior_pretraining_fits_sources() {
    let lm = backbone();
    let c = TrainConfig { epochs: 3, ..cfg() };
    let copy = task(TaskKind::Copy, 200, 1).renamed("copy");
    let sort = task(TaskKind::Sort, 200, 2).renamed("sort");
    let bank = PromptBank::new(
        [&copy, &sort]
            .iter()
            .map(|t| train::train_source_prompt(lm, t, &c).unwrap().prompt)
            .collect(),
    )
    .unwrap();
    let run = train::pretrain_attention_prior(lm, &bank, &[&copy, &sort], &c).unwrap();
    let epochs = &run.report.epochs;
    let (first, last) = (epochs[0].train_loss, epochs[epochs.len() - 1].train_loss);
    assert!(last < first, "epoch losses {first} -> {last}");
}
