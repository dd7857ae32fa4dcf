mod args;
mod output;

use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use gcnvat::experiment::{argmax_mean, run_experiment_with, SummaryRow};
use gcnvat::gradcheck::{run_gradcheck, GradcheckOptions};
use gcnvat::split::SplitConfig;
use gcnvat::vat::regularization_curvature;
use gcnvat::{
    build_normalized_adjacency, fit, load_bundle, GraphDataset, RunRecord, SplitSetting, TrainConfig, VatConfig,
    VatMode,
};
use serde_json::json;

use args::{Cli, Command, CurvatureArgs, DataArgs, GradcheckArgs, HyperArgs, SweepArgs, TrainArgs};
use output::Output;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::SweepLabelRate(a) => cmd_sweep(a, false),
        Command::SweepEpsilon(a) => cmd_sweep(a, true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Curvature(a) => cmd_curvature(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn settings(data: &DataArgs) -> Vec<SplitSetting> {
    if data.bundled_split {
        vec![SplitSetting::Bundled]
    } else if let Some(k) = data.per_class {
        vec![SplitSetting::PerClass(k)]
    } else {
        data.label_rate.iter().map(|&r| SplitSetting::LabelRate(r)).collect()
    }
}

fn load(data: &DataArgs) -> Result<GraphDataset> {
    load_bundle(&data.dataset).with_context(|| format!("loading dataset {}", data.dataset.display()))
}

fn train_config(hyper: &HyperArgs, mode: VatMode, epsilon: Option<f64>) -> Result<TrainConfig> {
    let base = VatConfig::new(mode);
    let config = TrainConfig {
        learning_rate: hyper.lr,
        epochs: hyper.epochs,
        hidden: hyper.hidden,
        dropout_keep: 1.0 - hyper.dropout,
        weight_decay: hyper.weight_decay,
        vat: VatConfig {
            epsilon: epsilon.unwrap_or(base.epsilon),
            alpha: hyper.alpha,
            xi: hyper.xi,
            power_iters: hyper.power_iters,
            ..base
        },
        seed: hyper.seed,
        optimizer: hyper.optimizer,
        vat_nodes: hyper.vat_nodes(),
        vadv_dropout: hyper.vadv_dropout,
        batch_nodes: hyper.batch_nodes,
    };
    config.validate()?;
    Ok(config)
}

fn banner(value: serde_json::Value) {
    println!("resolved config: {}", serde_json::to_string_pretty(&value).expect("config serializes"));
}

struct Grid {
    records: Vec<RunRecord>,
    summaries: Vec<SummaryRow>,
}

fn run_grid(
    dataset: &GraphDataset,
    configs: &[TrainConfig],
    settings: &[SplitSetting],
    runs: usize,
    split: SplitConfig,
) -> Result<Grid> {
    let a_hat = build_normalized_adjacency(dataset);
    let mut grid = Grid { records: Vec::new(), summaries: Vec::new() };
    for &setting in settings {
        for config in configs {
            let result = run_experiment_with(dataset, &a_hat, config, setting, runs, split)
                .with_context(|| format!("{} run with {setting:?}", config.vat.mode.label()))?;
            let row = SummaryRow::new(&result, config);
            println!(
                "{:<10} {:<5} rate={:.4} eps={:<8} {}",
                row.dataset,
                row.mode,
                row.label_rate,
                row.epsilon,
                result.summary.format_table()
            );
            grid.records.extend(result.records);
            grid.summaries.push(row);
        }
    }
    Ok(grid)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let settings = settings(&a.data);
    if settings.len() != 1 {
        bail!("train needs exactly one of --label-rate, --per-class or --bundled-split");
    }
    if a.hyper.epsilon.len() > 1 {
        bail!("train takes a single --epsilon; use sweep-epsilon for several");
    }
    let config = train_config(&a.hyper, a.mode, a.hyper.epsilon.first().copied())?;
    let dataset = load(&a.data)?;
    let split = SplitConfig { test_size: a.data.test_size };
    banner(json!({
        "command": "train",
        "dataset": a.data.dataset,
        "setting": settings[0],
        "test_size": split.test_size,
        "runs": a.hyper.runs,
        "config": config,
        "out": a.out,
    }));
    let out = Output::new(&a.out)?;
    let grid = run_grid(&dataset, std::slice::from_ref(&config), &settings, a.hyper.runs, split)?;
    out.write_runs(&grid.records)?;
    out.write_summary(&grid.summaries)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(a: SweepArgs, over_epsilon: bool) -> Result<ExitCode> {
    let settings = settings(&a.data);
    if settings.is_empty() {
        bail!("no label setting given; pass --label-rate, --per-class or --bundled-split");
    }
    if a.mode.is_empty() {
        bail!("no modes given");
    }
    if over_epsilon && a.hyper.epsilon.is_empty() {
        bail!("sweep-epsilon needs at least one --epsilon");
    }
    let mut configs = Vec::new();
    for &mode in &a.mode {
        if over_epsilon && mode != VatMode::None {
            for &eps in &a.hyper.epsilon {
                configs.push(train_config(&a.hyper, mode, Some(eps))?);
            }
        } else {
            if !over_epsilon && a.hyper.epsilon.len() > 1 {
                bail!("sweep-label-rate takes a single --epsilon");
            }
            configs.push(train_config(&a.hyper, mode, a.hyper.epsilon.first().copied())?);
        }
    }
    let dataset = load(&a.data)?;
    let split = SplitConfig { test_size: a.data.test_size };
    banner(json!({
        "command": if over_epsilon { "sweep-epsilon" } else { "sweep-label-rate" },
        "dataset": a.data.dataset,
        "settings": settings,
        "test_size": split.test_size,
        "runs": a.hyper.runs,
        "configs": configs,
        "out": a.out,
    }));
    let out = Output::new(&a.out)?;
    let grid = run_grid(&dataset, &configs, &settings, a.hyper.runs, split)?;
    out.write_runs(&grid.records)?;
    out.write_summary(&grid.summaries)?;
    if over_epsilon {
        let best = best_epsilons(&grid.summaries, &settings, &a.mode);
        for b in &best {
            println!(
                "best epsilon {} {} rate={:.4}: {} ({:.1})",
                b.dataset,
                b.mode,
                b.label_rate,
                b.epsilon,
                100.0 * b.mean_accuracy
            );
        }
        out.write_csv("best_epsilon.csv", &best)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// The argmax-ε row per (setting, mode), reading rows in the order `run_grid` produced them.
fn best_epsilons(rows: &[SummaryRow], settings: &[SplitSetting], modes: &[VatMode]) -> Vec<SummaryRow> {
    let per_setting = rows.len() / settings.len();
    let mut best = Vec::new();
    for chunk in rows.chunks(per_setting) {
        for mode in modes.iter().filter(|&&m| m != VatMode::None) {
            let candidates: Vec<&SummaryRow> = chunk.iter().filter(|r| r.mode == mode.label()).collect();
            let stats: Vec<gcnvat::Summary> = candidates
                .iter()
                .map(|r| gcnvat::Summary { runs: r.runs, mean: r.mean_accuracy, std: r.std_accuracy })
                .collect();
            if let Some(i) = argmax_mean(&stats) {
                best.push(candidates[i].clone());
            }
        }
    }
    best
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let options = GradcheckOptions { instances: a.instances, seed: a.seed, corrupt: a.corrupt, ..Default::default() };
    banner(json!({ "command": "gradcheck", "instances": a.instances, "seed": a.seed }));
    let report = run_gradcheck(&options)?;
    for r in &report.results {
        println!(
            "{:<16} max error {:.3e} (tolerance {:.0e}) {}",
            r.check.name(),
            r.max_error,
            r.check.tolerance(),
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    println!("{} instances, {} redrawn at kinks", report.instances, report.redrawn);
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        let failing: Vec<&str> = report.results.iter().filter(|r| !r.passed).map(|r| r.check.name()).collect();
        eprintln!("failing checks: {}", failing.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_curvature(a: CurvatureArgs) -> Result<ExitCode> {
    if a.mode == VatMode::None {
        bail!("curvature needs --mode svat or dvat");
    }
    let settings = settings(&a.data);
    if settings.len() != 1 {
        bail!("curvature needs exactly one of --label-rate, --per-class or --bundled-split");
    }
    let epsilons = if a.hyper.epsilon.is_empty() { vec![1e-3, 2e-3, 4e-3] } else { a.hyper.epsilon.clone() };
    if let Some(bad) = epsilons.iter().find(|e| !(**e > 0.0)) {
        bail!("epsilon must be positive, got {bad}");
    }
    let fit_config = train_config(&a.hyper, VatMode::None, None)?;
    let probe = VatConfig { mode: a.mode, ..train_config(&a.hyper, a.mode, Some(epsilons[0]))?.vat };
    let dataset = load(&a.data)?;
    let split_config = SplitConfig { test_size: a.data.test_size };
    banner(json!({
        "command": "curvature",
        "dataset": a.data.dataset,
        "setting": settings[0],
        "test_size": split_config.test_size,
        "fit": fit_config,
        "probe": probe,
        "epsilons": epsilons,
        "out": a.out,
    }));
    let out = Output::new(&a.out)?;
    let split = settings[0].split(&dataset, fit_config.seed, split_config)?;
    let a_hat = build_normalized_adjacency(&dataset);
    let (state, _) = fit(&dataset, &a_hat, &split, &fit_config)?;
    let points = regularization_curvature(&dataset, &a_hat, &state.params, &epsilons, &probe)?;
    for p in &points {
        println!("eps={:<10} R={:.6e} implied lambda={:.6e}", p.epsilon, p.value, p.implied_lambda);
    }
    out.write_csv("curvature.csv", &points)?;
    Ok(ExitCode::SUCCESS)
}
