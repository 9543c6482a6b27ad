//! `dpfl attack-sweep`: one training per (epsilon, gamma, seed) cell plus a
//! no-DP baseline per seed, exporting final loss/accuracy per cell.

use crate::config;
use crate::manifest::write_manifest;
use crate::CommonArgs;
use anyhow::{bail, Context, Result};
use dpfl_core::attack::AttackProfile;
use dpfl_core::fl::{run_training, PrivacySetup};
use rayon::prelude::*;
use std::fmt::Write as _;

pub const SWEEP_CSV_HEADER: &str =
    "epsilon,gamma,seed,rounds,final_loss,final_accuracy,termination,status";

#[derive(Debug, Clone, Copy)]
struct Cell {
    epsilon: f64, // +inf = no-DP baseline
    gamma: f64,
    seed: u64,
}

pub fn run(args: &CommonArgs) -> Result<()> {
    args.init_thread_pool()?;
    let (cfg, raw) = config::load(&args.config, args.seed)?;
    if cfg.sweep.epsilons.is_empty() || cfg.sweep.gammas.is_empty() || cfg.sweep.seeds.is_empty() {
        bail!("sweep.epsilons, sweep.gammas and sweep.seeds must be nonempty");
    }
    let built = config::build(&cfg)?;
    let out_dir = args.out_dir();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    // Baseline rows first (one per seed), then the full grid in axis order.
    let mut cells = Vec::new();
    for &seed in &cfg.sweep.seeds {
        cells.push(Cell {
            epsilon: f64::INFINITY,
            gamma: 0.0,
            seed,
        });
    }
    for &epsilon in &cfg.sweep.epsilons {
        for &gamma in &cfg.sweep.gammas {
            for &seed in &cfg.sweep.seeds {
                cells.push(Cell {
                    epsilon,
                    gamma,
                    seed,
                });
            }
        }
    }

    let rows: Vec<String> = cells
        .par_iter()
        .map(|cell| run_cell(&cfg, &built, cell))
        .collect();

    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for row in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    crate::commands::write_atomic(&out_dir.join("sweep.csv"), csv.as_bytes())?;
    write_manifest(&out_dir, "attack-sweep", cfg.master_seed, &raw, &cfg.input_files())?;
    println!(
        "sweep complete: {} cells ({} baseline rows), wrote {}",
        cells.len(),
        cfg.sweep.seeds.len(),
        out_dir.join("sweep.csv").display()
    );
    Ok(())
}

/// One training run. Failures land in the status column; the sweep goes on.
fn run_cell(cfg: &config::ExperimentConfig, built: &config::BuiltExperiment, cell: &Cell) -> String {
    let fl = cfg.fl_config(cell.seed);
    let result = (|| -> Result<String> {
        let privacy = if cell.epsilon.is_finite() {
            PrivacySetup::new(
                cell.epsilon,
                cfg.privacy.delta_round,
                cfg.privacy.sensitivity,
                cfg.privacy.budget,
            )?
        } else {
            PrivacySetup::no_dp()
        };
        let attack = AttackProfile::new(cell.gamma, cell.gamma > 0.0)?;
        let (_, history) = run_training(&fl, &built.model, &privacy, &attack, None, &built.data)?;
        let mut row = String::new();
        match history.final_record() {
            Some(last) => {
                let _ = write!(
                    row,
                    "{},{},{},{},{},{},{},ok",
                    cell.epsilon,
                    cell.gamma,
                    cell.seed,
                    last.round,
                    last.test_loss,
                    last.test_accuracy,
                    history.termination
                );
            }
            None => {
                let _ = write!(
                    row,
                    "{},{},{},0,NaN,NaN,{},ok",
                    cell.epsilon, cell.gamma, cell.seed, history.termination
                );
            }
        }
        Ok(row)
    })();
    match result {
        Ok(row) => row,
        Err(err) => {
            let msg = err.to_string().replace([',', '\n'], ";");
            format!(
                "{},{},{},0,NaN,NaN,none,error: {msg}",
                cell.epsilon, cell.gamma, cell.seed
            )
        }
    }
}
