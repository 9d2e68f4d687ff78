use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hiertune::backbone::BackboneRegistry;
use hiertune::config::{read_ini, RunConfig};
use hiertune::datamodel::{load_annotations, SplitName};
use hiertune::metrics::{predictions_from_jsonl, predictions_to_jsonl, qualitative_diff, render_diff, MetricsReport};
use hiertune::pipeline::{
    checkpoint_path, compare_stages, evaluate_states, export_synthetic, load_checkpoints, load_workspace, run_stage1,
    run_stage2, targets_as_predictions, Workspace,
};
use hiertune::report::{file_digest, metrics_csv, per_class_csv, write_file, ResultsFile};
use hiertune::zeroshot::{evaluate_zeroshot, ExternalPredictions, LabelMatcher};
use hiertune::{Hierarchy, Level, Result};

#[derive(Parser)]
#[command(name = "hiertune", version, about = "Hierarchical multi-label prompt tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// INI config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.stage1.lr0=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
    /// Training seed (same as `--set train.seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Accept stage-2 weights that do not sum to 1.
    #[arg(long)]
    allow_unnormalized_lambda: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check or summarize a hierarchy TSV file.
    Hierarchy {
        #[command(subcommand)]
        action: HierarchyAction,
    },
    /// Write a seeded synthetic dataset (hierarchy, annotations, features, config).
    Synth {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train prompts: stage 1 per level, stage 2 jointly from stage-1 checkpoints.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Directory with stage-1 checkpoints (stage 2 only; defaults to --out).
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints on a split and write results files.
    Eval {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: SplitName,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score external fine-grained predictions at all three levels.
    Zeroshot {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        /// TSV of `variant<TAB>canonical` label aliases.
        #[arg(long)]
        aliases: Option<PathBuf>,
        #[arg(long)]
        model_name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sample differences between two prediction files.
    Diff {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        new: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum HierarchyAction {
    Validate { path: PathBuf },
    Stats { path: PathBuf },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

fn parse_split(s: &str) -> std::result::Result<SplitName, String> {
    s.parse().map_err(|e: hiertune::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Hierarchy { action } => cmd_hierarchy(action),
        Command::Synth { run, out } => {
            let cfg = build_config(&run, None)?;
            let data = export_synthetic(&cfg, &out)?;
            println!("hierarchy {}", data.hierarchy.stats_line());
            println!(
                "samples train {} / val {} / test {}",
                data.train.len(),
                data.val.len(),
                data.test.len()
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Train { stage, init, run, out } => cmd_train(stage, init, &run, &out),
        Command::Eval {
            checkpoints,
            split,
            run,
            out,
        } => cmd_eval(&checkpoints, split, &run, out.as_deref()),
        Command::Zeroshot {
            predictions,
            annotations,
            hierarchy,
            aliases,
            model_name,
            out,
        } => cmd_zeroshot(&predictions, &annotations, &hierarchy, aliases.as_deref(), model_name, out.as_deref()),
        Command::Diff {
            base,
            new,
            annotations,
            hierarchy,
            out,
        } => cmd_diff(&base, &new, &annotations, &hierarchy, out.as_deref()),
    }
}

/// File config (or `fallback` when no --config is given), then --set, then flags.
fn build_config(args: &RunArgs, fallback: Option<&Path>) -> Result<RunConfig> {
    let file = args
        .config
        .as_deref()
        .or_else(|| fallback.filter(|p| p.exists()));
    let mut cfg = match file {
        Some(p) => RunConfig::from_map(&read_ini(p)?)?,
        None => RunConfig::default(),
    };
    for (k, v) in &args.overrides {
        cfg.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("train.seed", &seed.to_string())?;
    }
    if args.allow_unnormalized_lambda {
        cfg.allow_unnormalized_lambda = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_hierarchy(action: HierarchyAction) -> Result<()> {
    match action {
        HierarchyAction::Validate { path } => {
            let h = Hierarchy::load(&path)?;
            println!("ok: {} ({})", path.display(), h.stats_line());
        }
        HierarchyAction::Stats { path } => {
            let h = Hierarchy::load(&path)?;
            println!("{}", h.stats_line());
        }
    }
    Ok(())
}

fn print_levels(title: &str, levels: &[MetricsReport]) {
    println!("{title}");
    print!("{}", metrics_csv(levels));
}

fn cmd_train(stage: u8, init: Option<PathBuf>, args: &RunArgs, out: &Path) -> Result<()> {
    let registry = BackboneRegistry::default();
    match stage {
        1 => {
            let cfg = build_config(args, None)?;
            let ws = load_workspace(&cfg, &registry)?;
            let digest = ws.backbone.parameter_digest();
            let outcome = run_stage1(&ws, &cfg, Some(out))?;
            check_frozen(&ws, &digest)?;
            for (lv, r) in Level::ALL.iter().zip(&outcome.reports) {
                println!(
                    "level {} loss {:.6} -> {:.6}, wrote {}",
                    lv.number(),
                    r.initial_loss[lv.slot()].unwrap_or(f64::NAN),
                    r.final_loss[lv.slot()].unwrap_or(f64::NAN),
                    checkpoint_path(out, *lv, None).display()
                );
            }
            Ok(())
        }
        _ => {
            let init_dir = init.unwrap_or_else(|| out.to_path_buf());
            let cfg = build_config(args, Some(&init_dir.join("config.ini")))?;
            let ws = load_workspace(&cfg, &registry)?;
            let stage1 = load_checkpoints(&init_dir, &ws.hierarchy)?;
            let digest = ws.backbone.parameter_digest();
            let outcome = run_stage2(&ws, &cfg, stage1.clone(), Some(out))?;
            check_frozen(&ws, &digest)?;
            let split = ws.test.as_ref().or(ws.val.as_ref());
            if let Some(split) = split {
                let cmp = compare_stages(&ws, &cfg, &stage1, &outcome.states, split)?;
                write_file(
                    &out.join("stage_comparison.json"),
                    &(serde_json::to_string_pretty(&cmp)? + "\n"),
                )?;
                println!(
                    "mean IoU on {}: stage 1 {:.2}, stage 2 {:.2}, delta {:+.2}",
                    cmp.split, cmp.stage1_mean_iou, cmp.stage2_mean_iou, cmp.mean_iou_delta
                );
            }
            println!("wrote stage-2 checkpoints to {}", out.display());
            Ok(())
        }
    }
}

fn check_frozen(ws: &Workspace, before: &str) -> Result<()> {
    if ws.backbone.parameter_digest() != before {
        return Err(hiertune::Error::Backbone("backbone parameters changed during training".into()));
    }
    Ok(())
}

fn cmd_eval(checkpoints: &Path, split: SplitName, args: &RunArgs, out: Option<&Path>) -> Result<()> {
    let cfg = build_config(args, Some(&checkpoints.join("config.ini")))?;
    let ws = load_workspace(&cfg, &BackboneRegistry::default())?;
    let states = load_checkpoints(checkpoints, &ws.hierarchy)?;
    let data = ws.split(split)?;
    let eval = evaluate_states(&ws, &cfg, &states, data)?;

    let mut inputs = ws.inputs.clone();
    for lv in Level::ALL {
        let p = checkpoint_path(checkpoints, lv, None);
        inputs.insert(format!("checkpoint_level{}", lv.number()), file_digest(&p)?);
    }
    let results = ResultsFile::new(
        format!("eval --split {split}"),
        cfg.echo(),
        inputs,
        Some(cfg.head.threshold),
        eval.levels.clone(),
    );
    print_levels(&format!("split {split}"), &results.levels);
    if let Some(dir) = out {
        write_file(&dir.join("results.json"), &results.to_json())?;
        write_file(&dir.join("metrics.csv"), &metrics_csv(&results.levels))?;
        write_file(&dir.join("per_class_f1.csv"), &per_class_csv(&results.levels))?;
        write_file(&dir.join("predictions.jsonl"), &eval.predictions_jsonl())?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_zeroshot(
    predictions: &Path,
    annotations: &Path,
    hierarchy: &Path,
    aliases: Option<&Path>,
    model_name: Option<String>,
    out: Option<&Path>,
) -> Result<()> {
    let h = Hierarchy::load(hierarchy)?;
    let data = load_annotations(annotations, SplitName::Test, &h)?;
    let model_name = model_name.unwrap_or_else(|| {
        predictions
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let preds = ExternalPredictions::load(model_name.clone(), predictions)?;
    let mut matcher = LabelMatcher::new(&h);
    let mut inputs = BTreeMap::from([
        ("predictions".to_string(), file_digest(predictions)?),
        ("annotations".to_string(), file_digest(annotations)?),
        ("hierarchy".to_string(), file_digest(hierarchy)?),
    ]);
    if let Some(a) = aliases {
        let text = std::fs::read_to_string(a).map_err(|e| hiertune::Error::io(a, e))?;
        matcher = matcher.with_alias_tsv(&text, a)?;
        inputs.insert("aliases".to_string(), file_digest(a)?);
    }
    let report = evaluate_zeroshot(&preds, &data, &h, &matcher)?;

    let config = BTreeMap::from([
        ("model_name".to_string(), model_name),
        ("predictions".to_string(), predictions.display().to_string()),
        ("annotations".to_string(), annotations.display().to_string()),
        ("hierarchy".to_string(), hierarchy.display().to_string()),
        (
            "aliases".to_string(),
            aliases.map(|a| a.display().to_string()).unwrap_or_default(),
        ),
    ]);
    let mut results = ResultsFile::new("zeroshot", config, inputs, None, report.levels.clone());
    results.extra = serde_json::json!({
        "unmatched_label_count": report.unmatched_label_count,
        "unmatched_labels": report.unmatched_labels,
    });
    print_levels(&format!("model {}", report.model_name), &results.levels);
    println!("unmatched labels: {}", report.unmatched_label_count);
    if let Some(dir) = out {
        write_file(&dir.join("results.json"), &results.to_json())?;
        write_file(&dir.join("metrics.csv"), &metrics_csv(&results.levels))?;
        write_file(&dir.join("per_class_f1.csv"), &per_class_csv(&results.levels))?;
        write_file(&dir.join("predictions.jsonl"), &predictions_to_jsonl(&report.predictions))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_diff(base: &Path, new: &Path, annotations: &Path, hierarchy: &Path, out: Option<&Path>) -> Result<()> {
    let h = Hierarchy::load(hierarchy)?;
    let data = load_annotations(annotations, SplitName::Test, &h)?;
    let read = |p: &Path| -> Result<_> {
        let text = std::fs::read_to_string(p).map_err(|e| hiertune::Error::io(p, e))?;
        predictions_from_jsonl(&text, p)
    };
    let diffs = qualitative_diff(&read(base)?, &read(new)?, &targets_as_predictions(&data), Some(&h))?;
    let text = render_diff(&diffs);
    print!("{text}");
    if let Some(dir) = out {
        write_file(&dir.join("diff.json"), &(serde_json::to_string_pretty(&diffs)? + "\n"))?;
        write_file(&dir.join("diff.txt"), &text)?;
    }
    Ok(())
}
