//! `dpfl detect`: replay a trained policy greedily under the configured
//! attack, flag rounds whose federated loss deviates from the trusted
//! baselines, and print detection/false-positive rates.

use crate::config;
use crate::manifest::write_manifest;
use crate::CommonArgs;
use anyhow::{bail, Context, Result};
use dpfl_core::fl::{run_training, DetectionVerdict, RoundAdvisor};
use dpfl_core::rl::{load_policy, DetectingPolicy, RLConfig};
use std::fmt::Write as _;
use std::path::Path;

pub const DETECT_CSV_HEADER: &str = "round,epsilon,test_loss,verdict";

pub fn run(args: &CommonArgs, policy_path: &Path) -> Result<()> {
    args.init_thread_pool()?;
    let (cfg, raw) = config::load(&args.config, args.seed)?;
    let rl_section = cfg.rl.clone().unwrap_or_default();
    let loaded = load_policy(policy_path)?;
    let built = config::build(&cfg)?;
    let out_dir = args.out_dir();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    // The policy file pins the state-space geometry; the config section
    // supplies the reward/grid-independent knobs and the margin.
    let rl_cfg = RLConfig {
        m_bins: loaded.m_bins,
        f_bins: loaded.f_bins,
        eps_grid: loaded.eps_grid.clone(),
        eps_start_idx: loaded.eps_start_idx,
        ..rl_section.to_core()
    };
    let margin = rl_section.margin;
    if loaded.baseline_is_empty() {
        bail!(
            "policy {} carries no baselines; retrain with rl-train",
            policy_path.display()
        );
    }
    let mut policy = DetectingPolicy::new(rl_cfg, loaded.qtable, loaded.baseline, margin)?;

    let fl = cfg.fl_config(cfg.master_seed);
    let privacy = cfg.privacy_setup()?;
    let attack = cfg.attack_profile()?;
    let history = {
        let advisor: &mut dyn RoundAdvisor = &mut policy;
        run_training(&fl, &built.model, &privacy, &attack, Some(advisor), &built.data)?.1
    };

    let mut csv = String::from(DETECT_CSV_HEADER);
    csv.push('\n');
    for record in &history.records {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            record.round, record.epsilon, record.test_loss, record.detection
        );
    }
    crate::commands::write_atomic(&out_dir.join("detect.csv"), csv.as_bytes())?;
    write_manifest(&out_dir, "detect", cfg.master_seed, &raw, &cfg.input_files())?;

    let total = history.records.len();
    let suspected = history
        .records
        .iter()
        .filter(|r| r.detection == DetectionVerdict::AttackSuspected)
        .count();
    let no_baseline = history
        .records
        .iter()
        .filter(|r| r.detection == DetectionVerdict::NoBaseline)
        .count();
    let rate = if total > 0 {
        suspected as f64 / total as f64
    } else {
        0.0
    };
    if attack.enabled {
        println!(
            "detect: rounds={total} suspected={suspected} no_baseline={no_baseline} detection_rate={rate:.4}"
        );
    } else {
        println!(
            "detect: rounds={total} suspected={suspected} no_baseline={no_baseline} false_positive_rate={rate:.4}"
        );
    }
    Ok(())
}
