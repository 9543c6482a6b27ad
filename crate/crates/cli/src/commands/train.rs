//! `dpfl train`: one federated training run, exporting rounds.csv, the
//! final model, and the run manifest.

use crate::config;
use crate::manifest::write_manifest;
use crate::CommonArgs;
use anyhow::{Context, Result};
use dpfl_core::attack::{adversarial_objective, regression_residual_objective, AttackReport};
use dpfl_core::fl::{run_training, TrainingHistory};
use dpfl_core::nn::{ModelSpec, ParamVector, Task};
use std::fmt::Write as _;
use std::path::Path;

pub fn run(args: &CommonArgs) -> Result<()> {
    args.init_thread_pool()?;
    let (cfg, raw) = config::load(&args.config, args.seed)?;
    let built = config::build(&cfg)?;
    let out_dir = args.out_dir();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let fl = cfg.fl_config(cfg.master_seed);
    let privacy = cfg.privacy_setup()?;
    let attack = cfg.attack_profile()?;
    let (params, history) = run_training(&fl, &built.model, &privacy, &attack, None, &built.data)?;

    crate::commands::write_atomic(&out_dir.join("rounds.csv"), history.to_csv().as_bytes())?;
    write_model(&out_dir.join("model.txt"), &built.model, &params)?;
    write_manifest(&out_dir, "train", cfg.master_seed, &raw, &cfg.input_files())?;

    print_summary(&history, built.task);
    if attack.enabled {
        let report = final_attack_report(&cfg, &built, &params, &history)?;
        println!(
            "attack: mean_shift={:.6} kl={:.6} objective={}",
            report.mu_a, report.kl, report.objective_value
        );
    }
    Ok(())
}

fn print_summary(history: &TrainingHistory, task: Task) {
    match history.final_record() {
        Some(last) => match task {
            Task::Classification => println!(
                "finished: rounds={} termination={} test_loss={:.6} test_accuracy={:.4}",
                last.round, history.termination, last.test_loss, last.test_accuracy
            ),
            Task::Regression => println!(
                "finished: rounds={} termination={} test_loss={:.6}",
                last.round, history.termination, last.test_loss
            ),
        },
        None => println!(
            "finished: rounds=0 termination={} (no aggregation completed)",
            history.termination
        ),
    }
}

/// Attack summary on the final model: the deployed mean shift and KL of the
/// last aggregated round plus the adversarial objective on the test set.
fn final_attack_report(
    cfg: &config::ExperimentConfig,
    built: &config::BuiltExperiment,
    params: &ParamVector,
    history: &TrainingHistory,
) -> Result<AttackReport> {
    let last = history.final_record();
    let kl = last.map_or(0.0, |r| r.noise_kl);
    let gamma = last.map_or(0.0, |r| r.gamma);
    // The deployed shift of the last round: sqrt(2*gamma) * sigma * S, with
    // sigma recalibrated from that round's epsilon.
    let mu_a = match last {
        Some(r) if r.epsilon.is_finite() => {
            let p = dpfl_core::dp::PrivacyParams::new(
                r.epsilon,
                cfg.privacy.delta_round,
                cfg.privacy.sensitivity,
            )?;
            let sigma = dpfl_core::dp::calibrate_sigma(&p)?;
            (2.0 * gamma).sqrt() * sigma * r.sensitivity
        }
        _ => 0.0,
    };
    let (misclassified, objective_value) = match built.task {
        Task::Classification => {
            let (miss, obj) = adversarial_objective(
                &built.model,
                params,
                &built.data.test.inputs,
                &built.data.test.targets,
            )?;
            (Some(miss), obj)
        }
        Task::Regression => {
            let residual = regression_residual_objective(
                &built.model,
                params,
                &built.data.test.inputs,
                &built.data.test.targets,
            )?;
            (None, residual)
        }
    };
    Ok(AttackReport {
        mu_a,
        kl,
        misclassified,
        objective_value,
    })
}

/// Flat text model format: layer sizes then one parameter per line.
pub fn write_model(path: &Path, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    let mut out = String::from("dpfl-model v1\n");
    let task = match spec.task() {
        Task::Classification => "classification",
        Task::Regression => "regression",
    };
    let _ = writeln!(out, "task {task}");
    out.push_str("layers");
    let _ = write!(out, " {}", spec.input_dim());
    for (rows, _) in spec.layer_shapes() {
        let _ = write!(out, " {rows}");
    }
    out.push('\n');
    for v in params.values() {
        let _ = writeln!(out, "{v}");
    }
    crate::commands::write_atomic(path, out.as_bytes())?;
    Ok(())
}
