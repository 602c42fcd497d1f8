//! Command-line driver for the full experimental pipeline: synthetic data
//! generation, pretraining, per-strategy fine-tuning, evaluation, the
//! comparison matrix, ablation sweeps, significance tests, parameter
//! accounting, and gradient checking.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use promptseg::config::{derive_seed, ExperimentConfig};
use promptseg::error::{Error, Result};
use promptseg::eval::{build_comparison_matrix, evaluate, FoldReport};
use promptseg::pipeline::{
    ablate, build_dataset, finetune, pretrain, read_dataset, write_dataset, AblationAxis,
    gradcheck_prompt_model, parameter_table, strategy_significance, test_pool,
};
use promptseg::tuning::{load_full, save_delta, save_full, TuningStrategy};

#[derive(Parser)]
#[command(name = "promptseg", version, about = "prompt-tuning segmentation workbench")]
struct Cli {
    /// Experiment config JSON; defaults to the built-in desk-scale setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Workspace directory for all artifacts.
    #[arg(long, global = true, default_value = "promptseg-out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, preprocess-ready, and split all configured centers.
    Generate {
        /// Overwrite a non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the promptless base model on all centers except one.
    Pretrain {
        /// Center held out from pretraining.
        #[arg(long)]
        center: String,
    },
    /// Fine-tune one strategy × center × fold cell and score it.
    Finetune {
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        center: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Score the pretrained base (or a fine-tuned cell) on a center's test
    /// manifest.
    Evaluate {
        #[arg(long)]
        center: String,
        /// When given, evaluate that strategy's fold cell instead of the
        /// base model.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Aggregate all strategy × fold cells for a held-out center into the
    /// comparison matrix.
    Compare {
        #[arg(long)]
        center: String,
        /// Execute missing cells instead of reporting gaps.
        #[arg(long)]
        run: bool,
    },
    /// Sweep one prompt-design axis on a held-out center.
    Ablate {
        #[arg(long)]
        center: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// num_prompts | prompt_sites | skip_prompts
        #[arg(long)]
        axis: String,
    },
    /// Pairwise strategy significance tests over recorded fold reports.
    Stats {
        #[arg(long)]
        center: String,
    },
    /// Learnable-parameter counts and fractions per strategy.
    CountParams,
    /// 64-bit finite-difference check of the prompt-model gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn copy_config_into(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    cfg.save(&dir.join("config.json"))
}

fn pretrain_dir(out: &Path, center: &str) -> PathBuf {
    out.join("pretrain").join(center)
}

fn run_dir(out: &Path, strategy: TuningStrategy, center: &str, fold: usize) -> PathBuf {
    out.join("runs")
        .join(strategy.name())
        .join(center)
        .join(format!("fold{fold}"))
}

fn load_base(cfg: &ExperimentConfig, out: &Path, center: &str) -> Result<promptseg::model::SegModel<f32>> {
    let path = pretrain_dir(out, center).join("model.ckpt");
    if !path.exists() {
        return Err(Error::MissingData(format!(
            "no pretrained checkpoint at {}; run `promptseg pretrain --center {center}` first",
            path.display()
        )));
    }
    let model = load_full::<f32>(&path)?;
    if model.config != cfg.model {
        return Err(Error::Config(
            "pretrained checkpoint architecture does not match the config".into(),
        ));
    }
    Ok(model)
}

fn records_jsonl(records: &[promptseg::tuning::TrainRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect::<Vec<_>>()
        .join("\n")
}

fn cmd_generate(cli: &Cli, force: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let ds = build_dataset(&cfg)?;
    let data_dir = cli.out.join("data");
    write_dataset(&ds, &data_dir, force)?;
    copy_config_into(&cfg, &data_dir)?;
    println!(
        "generated {} centers ({} samples) into {}",
        ds.centers.len(),
        ds.centers.iter().map(|c| c.samples.len()).sum::<usize>(),
        data_dir.display()
    );
    Ok(())
}

fn load_data(cli: &Cli, cfg: &ExperimentConfig) -> Result<promptseg::pipeline::DataSet> {
    let data_dir = cli.out.join("data");
    if data_dir.join("manifest.json").exists() {
        read_dataset(&data_dir)
    } else {
        build_dataset(cfg)
    }
}

fn cmd_pretrain(cli: &Cli, center: &str) -> Result<()> {
    let cfg = load_config(cli)?;
    let ds = load_data(cli, &cfg)?;
    let run = pretrain(&ds, &cfg, center)?;
    let dir = pretrain_dir(&cli.out, center);
    ensure_dir(&dir)?;
    copy_config_into(&cfg, &dir)?;
    let bytes = save_full(&run.model, &dir.join("model.ckpt"))?;
    write_text(&dir.join("train_log.jsonl"), &records_jsonl(&run.records))?;
    let first = run.records.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = run.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pretrained holdout={center}: {} steps, loss {first:.4} -> {last:.4}, checkpoint {bytes} bytes",
        run.records.len()
    );
    Ok(())
}

fn cmd_finetune(cli: &Cli, strategy: &str, center: &str, fold: usize) -> Result<()> {
    let cfg = load_config(cli)?;
    let strategy = TuningStrategy::parse(strategy)?;
    let ds = load_data(cli, &cfg)?;
    let base = load_base(&cfg, &cli.out, center)?;
    let run = finetune(&base, &ds, &cfg, center, fold, strategy)?;
    let dir = run_dir(&cli.out, strategy, center, fold);
    ensure_dir(&dir)?;
    copy_config_into(&cfg, &dir)?;
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&run.report).unwrap())?;
    write_text(&dir.join("train_log.jsonl"), &records_jsonl(&run.records))?;
    match strategy {
        TuningStrategy::None => {}
        TuningStrategy::Full => {
            save_full(&run.model, &dir.join("model.ckpt"))?;
        }
        s => {
            save_delta(&run.model, s, &dir.join("delta.ckpt"))?;
        }
    }
    println!(
        "finetuned {} on {center} fold {fold}: old {:.4}, new {:.4}",
        strategy.name(),
        run.report.old_center_mean,
        run.report.new_center_mean
    );
    Ok(())
}

fn cmd_evaluate(cli: &Cli, center: &str, strategy: Option<&str>, fold: usize) -> Result<()> {
    let cfg = load_config(cli)?;
    let ds = load_data(cli, &cfg)?;
    let base = load_base(&cfg, &cli.out, center)?;
    let model = match strategy {
        None => base,
        Some(s) => {
            let strategy = TuningStrategy::parse(s)?;
            let dir = run_dir(&cli.out, strategy, center, fold);
            match strategy {
                TuningStrategy::None => base,
                TuningStrategy::Full => load_full(&dir.join("model.ckpt"))?,
                s => {
                    let prompted = promptseg::pipeline::model_for_strategy(&base, &cfg, s)?;
                    promptseg::tuning::load_delta(&dir.join("delta.ckpt"), &prompted)?
                }
            }
        }
    };
    let reports = evaluate(&model, &test_pool(&ds, &cfg, &[center])?)?;
    let mut csv = String::from("sample_id,center_id,primary,nodal,mean\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id, r.center_id, r.primary, r.nodal, r.mean
        ));
    }
    print!("{csv}");
    let n = reports.len().max(1) as f64;
    println!(
        "# mean over {} samples: {:.4}",
        reports.len(),
        reports.iter().map(|r| r.mean).sum::<f64>() / n
    );
    Ok(())
}

fn collect_reports(cli: &Cli, cfg: &ExperimentConfig, center: &str) -> Result<(Vec<FoldReport>, bool)> {
    let mut reports = Vec::new();
    let mut gaps = false;
    for &strategy in &TuningStrategy::ALL {
        for fold in 0..cfg.folds {
            let path = run_dir(&cli.out, strategy, center, fold).join("report.json");
            match std::fs::read_to_string(&path) {
                Ok(text) => reports.push(serde_json::from_str(&text).map_err(|e| Error::Format {
                    path: path.clone(),
                    detail: format!("bad report: {e}"),
                    offset: 0,
                })?),
                Err(_) => gaps = true,
            }
        }
    }
    Ok((reports, gaps))
}

fn cmd_compare(cli: &Cli, center: &str, run: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let (reports, gaps) = if run {
        let ds = load_data(cli, &cfg)?;
        let base = match load_base(&cfg, &cli.out, center) {
            Ok(m) => m,
            Err(_) => {
                let trained = pretrain(&ds, &cfg, center)?;
                let dir = pretrain_dir(&cli.out, center);
                ensure_dir(&dir)?;
                save_full(&trained.model, &dir.join("model.ckpt"))?;
                trained.model
            }
        };
        let mut reports = Vec::new();
        for &strategy in &TuningStrategy::ALL {
            for fold in 0..cfg.folds {
                let dir = run_dir(&cli.out, strategy, center, fold);
                let path = dir.join("report.json");
                if let Ok(text) = std::fs::read_to_string(&path) {
                    reports.push(serde_json::from_str(&text).map_err(|e| Error::Format {
                        path,
                        detail: format!("bad report: {e}"),
                        offset: 0,
                    })?);
                    continue;
                }
                let cell = finetune(&base, &ds, &cfg, center, fold, strategy)?;
                ensure_dir(&dir)?;
                write_text(
                    &dir.join("report.json"),
                    &serde_json::to_string_pretty(&cell.report).unwrap(),
                )?;
                reports.push(cell.report);
            }
        }
        (reports, false)
    } else {
        collect_reports(cli, &cfg, center)?
    };

    let matrix = build_comparison_matrix(&reports)?;
    let dir = cli.out.join("compare").join(center);
    ensure_dir(&dir)?;
    copy_config_into(&cfg, &dir)?;
    write_text(&dir.join("matrix.csv"), &matrix.to_csv())?;
    write_text(&dir.join("matrix.json"), &matrix.to_json())?;
    print!("{}", matrix.to_csv());
    if gaps {
        return Err(Error::MissingData(
            "comparison has gap cells; rerun with --run to execute them".into(),
        ));
    }
    Ok(())
}

fn cmd_ablate(cli: &Cli, center: &str, fold: usize, axis: &str) -> Result<()> {
    let cfg = load_config(cli)?;
    let axis = AblationAxis::parse(axis)?;
    let ds = load_data(cli, &cfg)?;
    let table = ablate(&ds, &cfg, center, fold, axis)?;
    let dir = cli.out.join("ablate").join(center);
    ensure_dir(&dir)?;
    copy_config_into(&cfg, &dir)?;
    write_text(&dir.join(format!("{}.csv", table.axis)), &table.to_csv())?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_stats(cli: &Cli, center: &str) -> Result<()> {
    let cfg = load_config(cli)?;
    let (reports, gaps) = collect_reports(cli, &cfg, center)?;
    if reports.is_empty() {
        return Err(Error::MissingData(format!(
            "no recorded fold reports for center {center}"
        )));
    }
    let rows = strategy_significance(&reports)?;
    let mut csv = String::from("better,worse,wilcoxon_one_sided_p,t_test_two_tailed_p\n");
    for (a, b, w, t) in rows {
        csv.push_str(&format!("{},{},{},{}\n", a.name(), b.name(), w, t));
    }
    print!("{csv}");
    if gaps {
        eprintln!("warning: some strategy × fold cells are missing");
    }
    Ok(())
}

fn cmd_count_params(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    println!("strategy,learnable,fraction");
    for (s, count, fraction) in parameter_table(&cfg)? {
        println!("{},{count},{fraction:.6}", s.name());
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, tol: f64) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut model_cfg = cfg.model.clone();
    // shrink to gradient-check scale regardless of the experiment config
    model_cfg.spatial = [8, 8, 8];
    model_cfg.validate()?;
    let report = gradcheck_prompt_model(&model_cfg, 4, derive_seed(cfg.seed, "gradcheck"), 1e-5)?;
    println!(
        "checked {} parameters: max relative error {:.3e} (at index {})",
        report.per_param.len(),
        report.max_rel_err,
        report.argmax
    );
    if report.max_rel_err > tol {
        return Err(Error::Numerical(format!(
            "gradient check failed: {:.3e} > {tol:.3e}",
            report.max_rel_err
        )));
    }
    println!("gradient check passed (tolerance {tol:.1e})");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { force } => cmd_generate(cli, *force),
        Command::Pretrain { center } => cmd_pretrain(cli, center),
        Command::Finetune { strategy, center, fold } => cmd_finetune(cli, strategy, center, *fold),
        Command::Evaluate { center, strategy, fold } => {
            cmd_evaluate(cli, center, strategy.as_deref(), *fold)
        }
        Command::Compare { center, run: r } => cmd_compare(cli, center, *r),
        Command::Ablate { center, fold, axis } => cmd_ablate(cli, center, *fold, axis),
        Command::Stats { center } => cmd_stats(cli, center),
        Command::CountParams => cmd_count_params(cli),
        Command::Gradcheck { tol } => cmd_gradcheck(cli, *tol),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
