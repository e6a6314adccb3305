//! Python bindings. Tensors cross the boundary as nested lists of floats;
//! reports come back as JSON strings.

use std::path::PathBuf;

use attempt_core::checkpoint::Checkpoint;
use attempt_core::commands::{self, TargetOptions};
use attempt_core::config::ExperimentConfig;
use attempt_core::data::Split;
use attempt_core::prompt::{self, AttentionModule, PromptBank, PromptOrigin, SoftPrompt};
use attempt_core::train::{self, TrainConfig};
use attempt_core::{Error, Rng, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Resolution { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.n_rows()).map(|i| t.row(i).to_vec()).collect()
}

fn bank_of(prompts: &[Vec<Vec<f64>>]) -> PyResult<PromptBank<f64>> {
    let prompts = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| SoftPrompt::new(format!("source{i}"), matrix(p)?, false, PromptOrigin::Trained).map_err(py_err))
        .collect::<PyResult<Vec<_>>>()?;
    PromptBank::new(prompts).map_err(py_err)
}

fn target_of(target: &[Vec<f64>]) -> PyResult<SoftPrompt<f64>> {
    SoftPrompt::new("target", matrix(target)?, true, PromptOrigin::Trained).map_err(py_err)
}

/// Trainable-parameter accounting for width `d`, prompt length `m`, bottleneck `r` and `n_tasks` tasks.
#[pyfunction]
#[pyo3(signature = (d, m, r, n_tasks=1))]
fn param_count<'py>(py: Python<'py>, d: usize, m: usize, r: usize, n_tasks: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrainConfig {
        prompt_length: m,
        bottleneck: r,
        ..TrainConfig::default()
    };
    let c = train::count_trainable_params(&cfg, d, n_tasks).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("prompt_per_task", c.prompt_per_task)?;
    out.set_item("attention", c.attention)?;
    out.set_item("total", c.total)?;
    out.set_item("per_task", c.per_task)?;
    out.set_item("prompt_tuning", train::count_prompt_tuning_params(&cfg, d))?;
    Ok(out)
}

/// `target + Σ a_j · P_j` over the bank prompts followed by the target.
#[pyfunction]
fn interpolate(bank: Vec<Vec<Vec<f64>>>, target: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let bank = bank_of(&bank)?;
    let target = target_of(&target)?;
    let out = prompt::interpolate(&bank, &target, &Tensor::vector(weights)).map_err(py_err)?;
    Ok(to_rows(&out.prompt))
}

/// Attention weights of a freshly initialized module for input embeddings `x`.
#[pyfunction]
#[pyo3(signature = (bank, target, x, bottleneck, temperature=1.0, seed=0))]
fn attention_weights(
    bank: Vec<Vec<Vec<f64>>>,
    target: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    bottleneck: usize,
    temperature: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let mut prompts = bank_of(&bank)?.prompts().to_vec();
    prompts.push(target_of(&target)?);
    let pooled: Vec<Vec<f64>> = prompts.iter().map(|p| prompt::pool_prompt(p).into_data()).collect();
    let x = matrix(&x)?;
    let x_hat: Vec<f64> = (0..x.last_dim())
        .map(|j| (0..x.n_rows()).map(|i| x.row(i)[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let g = AttentionModule::<f64>::new(x_hat.len(), bottleneck, temperature, &mut Rng::new(seed)).map_err(py_err)?;
    let a = prompt::attend(&g, &Tensor::vector(x_hat), &matrix(&pooled)?).map_err(py_err)?;
    Ok(a.into_data())
}

/// JSON header of a checkpoint file, after integrity checks.
#[pyfunction]
fn checkpoint_header(path: PathBuf) -> PyResult<String> {
    let c = Checkpoint::load(&path).map_err(py_err)?;
    json(&c.header)
}

fn load(config: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::load(&PathBuf::from(config)).map_err(py_err)
}

#[pyfunction]
fn build_lm(config: &str) -> PyResult<String> {
    json(&commands::build_lm(&load(config)?).map_err(py_err)?)
}

/// Trains every source prompt; returns the reports as a JSON list.
#[pyfunction]
fn train_source(config: &str) -> PyResult<String> {
    let out = commands::train_source(&load(config)?).map_err(py_err)?;
    json(&out.iter().map(|o| &o.report).collect::<Vec<_>>())
}

#[pyfunction]
#[pyo3(signature = (config, ablation=None, multi_task=false, prior=None, target_init=None, attention_lr=None, prompt_lr=None))]
fn train_target(
    config: &str,
    ablation: Option<&str>,
    multi_task: bool,
    prior: Option<PathBuf>,
    target_init: Option<&str>,
    attention_lr: Option<f64>,
    prompt_lr: Option<f64>,
) -> PyResult<String> {
    let opts = TargetOptions {
        multi_task,
        ablation: ablation.map(commands::parse_ablation).transpose().map_err(py_err)?,
        prior,
        target_init: target_init.map(commands::parse_target_init).transpose().map_err(py_err)?,
        attention_lr,
        prompt_lr,
        task: None,
    };
    let out = commands::train_target(&load(config)?, &opts).map_err(py_err)?;
    if out.reports.is_empty() {
        json(&out.evals)
    } else {
        json(&out.reports)
    }
}

#[pyfunction]
#[pyo3(signature = (config, variant="full", split="dev", svg=false))]
fn evaluate(config: &str, variant: &str, split: &str, svg: bool) -> PyResult<String> {
    let split = match split {
        "train" => Split::Train,
        "dev" => Split::Dev,
        "test" => Split::Test,
        s => return Err(PyValueError::new_err(format!("unknown split `{s}`"))),
    };
    let out = commands::eval(&load(config)?, variant, split, svg).map_err(py_err)?;
    json(&out.reports)
}

#[pymodule]
fn attempt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(attention_weights, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_header, m)?)?;
    m.add_function(wrap_pyfunction!(build_lm, m)?)?;
    m.add_function(wrap_pyfunction!(train_source, m)?)?;
    m.add_function(wrap_pyfunction!(train_target, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
