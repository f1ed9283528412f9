use std::fmt::Write as _;

use clap::Args;
use rand::Rng;
use serde::Serialize;
use tinc_core::linalg::Matrix;
use tinc_core::losses::{check_loss_gradient, loss_gradient, LossConfig, LossInputs, LossKind};
use tinc_core::nn::EncoderKind;
use tinc_core::rng::{stream, tag};
use tinc_core::trainer::{end_to_end_check, Method};

use crate::config::write_file;
use crate::{CliError, GlobalArgs};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Skip the end-to-end model checks.
    #[arg(long)]
    pub losses_only: bool,
    /// Corrupt one analytic loss gradient (negative control).
    #[arg(long, hide = true)]
    pub inject_error: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub passed: bool,
}

/// Random operands for one loss: n = 8, d = 6 embeddings, margins in
/// [0, 1], or n×1 predictions and targets for the time head.
pub fn random_inputs(kind: LossKind, seed: u64) -> LossInputs {
    let mut rng = stream(seed, &[tag::GRADCHECK, kind as u64]);
    let (n, d) = (8, 6);
    let mut normal = |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5));
    let tensors = if kind == LossKind::TimeHead {
        vec![normal(n, 1), normal(n, 1)]
    } else {
        vec![normal(n, d), normal(n, d)]
    };
    let mut rng = stream(seed, &[tag::GRADCHECK, kind as u64, 1]);
    LossInputs {
        tensors,
        dv: Some((0..n).map(|_| rng.random_range(0.0..=1.0)).collect()),
        cfg: LossConfig::default(),
    }
}

pub fn loss_rows(seed: u64, step: f64, tolerance: f64, inject_error: bool) -> Result<Vec<Row>, CliError> {
    let mut rows = Vec::new();
    for kind in LossKind::ALL {
        let inputs = random_inputs(kind, seed);
        let mut analytic = loss_gradient(kind, &inputs)?;
        if inject_error && kind == LossKind::Invariance {
            let g = &mut analytic[0].as_mut_slice()[0];
            *g += 1e-2 * (g.abs() + 1.0);
        }
        let r = check_loss_gradient(kind, &inputs, &analytic, step, tolerance)?;
        rows.push(Row {
            name: format!("loss:{}", kind.name()),
            seed,
            max_rel_error: r.max_rel_error,
            checked: r.inputs.iter().map(|i| i.checked).sum(),
            excluded: r.inputs.iter().map(|i| i.excluded).sum(),
            passed: r.passed,
        });
    }
    Ok(rows)
}

pub fn model_rows(seed: u64, step: f64, tolerance: f64) -> Result<Vec<Row>, CliError> {
    let mut rows = Vec::new();
    for method in Method::ALL {
        for (enc, label) in [(EncoderKind::SmallCnn, "cnn"), (EncoderKind::Mlp, "mlp")] {
            let r = end_to_end_check(method, enc, seed, step, tolerance)?;
            rows.push(Row {
                name: format!("model:{method}:{label}"),
                seed,
                max_rel_error: r.max_rel_error,
                checked: r.inputs.iter().map(|i| i.checked).sum(),
                excluded: r.inputs.iter().map(|i| i.excluded).sum(),
                passed: r.passed,
            });
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[Row]) -> String {
    let mut s = format!(
        "{:<32} {:>5} {:>14} {:>8} {:>9}  result\n",
        "check", "seed", "max_rel_error", "checked", "excluded"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<32} {:>5} {:>14.3e} {:>8} {:>9}  {}",
            r.name,
            r.seed,
            r.max_rel_error,
            r.checked,
            r.excluded,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    s
}

pub fn run(global: &GlobalArgs, args: GradcheckArgs) -> Result<(), CliError> {
    if !(args.step > 0.0 && args.tolerance > 0.0) {
        return Err(CliError::Usage("--step and --tolerance must be positive".into()));
    }
    let first = global.seed.unwrap_or(0);
    let mut rows = Vec::new();
    for seed in first..first + args.seeds.max(1) {
        rows.extend(loss_rows(seed, args.step, args.tolerance, args.inject_error)?);
        if !args.losses_only {
            rows.extend(model_rows(seed, args.step, args.tolerance)?);
        }
    }
    let table = format_table(&rows);
    print!("{table}");
    if let Some(out) = &global.out {
        write_file(&out.join("gradcheck.txt"), table.as_bytes())?;
        let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
        write_file(&out.join("gradcheck.json"), json.as_bytes())?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!(
            "{failed} of {} gradient checks exceeded relative error {}",
            rows.len(),
            args.tolerance
        )));
    }
    println!("all {} checks passed", rows.len());
    Ok(())
}
