//! `dpfl report`: validate and summarize a rounds.csv file.

use anyhow::{bail, Context, Result};
use dpfl_core::fl::ROUNDS_CSV_HEADER;
use std::path::Path;

pub fn run(rounds_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(rounds_path)
        .with_context(|| format!("reading {}", rounds_path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != ROUNDS_CSV_HEADER {
        bail!(
            "{}: unknown headers\n  expected: {ROUNDS_CSV_HEADER}\n  found:    {header}",
            rounds_path.display()
        );
    }
    let expected_fields = ROUNDS_CSV_HEADER.split(',').count();

    let mut rounds = 0usize;
    let mut last_loss = f64::NAN;
    let mut last_accuracy = f64::NAN;
    let mut best_accuracy = f64::NAN;
    let mut delta_spent = 0.0f64;
    let mut suspected = 0usize;
    for (line_no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_fields {
            bail!(
                "{}: line {}: {} fields, expected {expected_fields}",
                rounds_path.display(),
                line_no + 2,
                fields.len()
            );
        }
        rounds += 1;
        let parse = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().with_context(|| {
                format!(
                    "{}: line {}: bad value {:?} in column {}",
                    rounds_path.display(),
                    line_no + 2,
                    fields[idx],
                    ROUNDS_CSV_HEADER.split(',').nth(idx).unwrap()
                )
            })
        };
        last_loss = parse(5)?;
        last_accuracy = parse(6)?;
        if !last_accuracy.is_nan() && !(last_accuracy <= best_accuracy) {
            best_accuracy = last_accuracy;
        }
        delta_spent = parse(7)?;
        if fields[10] == "attack_suspected" {
            suspected += 1;
        }
    }

    println!("rounds: {rounds}");
    println!("final_test_loss: {last_loss}");
    println!("final_test_accuracy: {last_accuracy}");
    println!("best_test_accuracy: {best_accuracy}");
    println!("delta_spent: {delta_spent}");
    println!("rounds_flagged: {suspected}");
    Ok(())
}
