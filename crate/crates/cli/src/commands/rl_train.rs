//! `dpfl rl-train`: train the Q-learning privacy agent over repeated
//! federated runs, saving the policy (Q-table plus baselines) and the
//! per-episode reward curve.

use crate::config;
use crate::manifest::write_manifest;
use crate::CommonArgs;
use anyhow::{bail, Context, Result};
use dpfl_core::fl::{run_training, RoundAdvisor};
use dpfl_core::rl::{save_policy, train_agent};
use std::fmt::Write as _;

pub const REWARDS_CSV_HEADER: &str = "episode,explore_prob,accumulated_reward";

pub fn run(args: &CommonArgs) -> Result<()> {
    args.init_thread_pool()?;
    let (cfg, raw) = config::load(&args.config, args.seed)?;
    let Some(rl_section) = cfg.rl.clone() else {
        bail!("rl-train requires an [rl] section in the config");
    };
    let rl_cfg = rl_section.to_core();
    let built = config::build(&cfg)?;
    let out_dir = args.out_dir();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let fl = cfg.fl_config(cfg.master_seed);
    let privacy = cfg.privacy_setup()?;
    let attack = cfg.attack_profile()?;

    let policy = train_agent(&rl_cfg, cfg.master_seed, |agent| {
        let advisor: &mut dyn RoundAdvisor = agent;
        run_training(&fl, &built.model, &privacy, &attack, Some(advisor), &built.data)
            .map(|_| ())
    })?;

    save_policy(&rl_cfg, &policy, &out_dir.join("policy.txt"))?;
    let mut csv = String::from(REWARDS_CSV_HEADER);
    csv.push('\n');
    for entry in &policy.reward_curve {
        let _ = writeln!(
            csv,
            "{},{},{}",
            entry.episode, entry.explore_prob, entry.accumulated_reward
        );
    }
    crate::commands::write_atomic(&out_dir.join("rewards.csv"), csv.as_bytes())?;
    write_manifest(&out_dir, "rl-train", cfg.master_seed, &raw, &cfg.input_files())?;

    let last = policy.reward_curve.last().expect("episodes >= 1");
    println!(
        "rl training complete: episodes={} final_explore={:.4} final_reward={:.4}",
        policy.reward_curve.len(),
        last.explore_prob,
        last.accumulated_reward
    );
    Ok(())
}
