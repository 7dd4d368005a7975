//! Command-line interface: synthetic benchmark generation, cold-start splits,
//! cross-validated training/evaluation, ablation sweeps, F-rank tables,
//! gradient checks, and telemetry summaries.
//!
//! Exit codes: 0 on success, 1 for configuration/input errors, 2 when a
//! computation itself fails numerically.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use aimfuse::eval::{
    aggregate_folds, compute_f_rank, compute_metrics, parse_variant_matrix_str, subset_metrics,
    write_f_rank_report, write_metrics_report, write_variant_matrix, Metrics, VariantMatrix,
};
use aimfuse::fusion::parse_telemetry_str;
use aimfuse::kgdata::{
    audit_split, generate_synthetic, load_bundle, make_split, read_split, write_split, Bundle,
    Setting, SplitPlan, SynthConfig,
};
use aimfuse::numkernel::GRAD_REL_TOL;
use aimfuse::tokenizer::PairVariant;
use aimfuse::trainer::{
    ablation_variants, corrupted_gradient_check, fit, gradient_suite, parse_config_str, predict,
    write_checkpoint, write_config, write_history, SemanticChoice, TrainConfig,
};
use aimfuse::{Error, Result};

const SEED_ENV: &str = "AIMFUSE_SEED";
const DEFAULT_SEED: u64 = 17;

#[derive(Parser)]
#[command(
    name = "aimfuse",
    version,
    about = "Multimodal drug-drug interaction event prediction: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark (triples per channel, prompts, pairs)
    GenData(GenDataArgs),
    /// Build a cold-start cross-validation split and write it to a file
    Split(SplitArgs),
    /// Train and evaluate over every fold of a split
    TrainEval(TrainEvalArgs),
    /// Run an ablation sweep and rank the variants
    Ablate(AblateArgs),
    /// Compute F-ranks from an existing variant-metrics table
    Frank(FrankArgs),
    /// Check every analytic gradient against finite differences
    Gradcheck(GradcheckArgs),
    /// Summarize a routing-telemetry export
    TelemetryReport(TelemetryReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the generated files
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    drugs: usize,
    /// Number of interaction event types
    #[arg(long, default_value_t = 8)]
    events: usize,
    /// Number of labeled drug pairs
    #[arg(long, default_value_t = 600)]
    pairs: usize,
    /// Generator seed (falls back to $AIMFUSE_SEED, then 17)
    #[arg(long)]
    seed: Option<u64>,
    /// Label pairs by a learnable rule over latent drug attributes instead of
    /// uniform noise
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, value_name = "BOOL")]
    planted_rule: bool,
}

#[derive(Args)]
struct SplitArgs {
    /// Directory holding the data files
    #[arg(long)]
    data: PathBuf,
    /// Evaluation setting: seen, one-unseen, or both-unseen
    #[arg(long)]
    setting: String,
    #[arg(long)]
    folds: usize,
    /// Split seed (falls back to $AIMFUSE_SEED, then 17)
    #[arg(long)]
    seed: Option<u64>,
    /// File to write the fold assignment to
    #[arg(long)]
    out: PathBuf,
}

/// Training-configuration sources, shared by train-eval and ablate.
/// Precedence: defaults < $AIMFUSE_SEED (seed only) < --config file < --set
/// overrides (in order) < --seed.
#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set epochs=40
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainEvalArgs {
    /// Directory holding the data files
    #[arg(long)]
    data: PathBuf,
    /// Evaluation setting: seen, one-unseen, or both-unseen
    #[arg(long)]
    setting: String,
    /// Fold count when no --split file is given (default 5); with --split it
    /// must match the file
    #[arg(long)]
    folds: Option<usize>,
    /// Reuse a split file written by `split` instead of building one
    #[arg(long)]
    split: Option<PathBuf>,
    /// Output directory for metrics, checkpoints, histories, telemetry
    #[arg(long)]
    out: PathBuf,
    /// File of drug names (one per line); also report metrics over test pairs
    /// touching them
    #[arg(long)]
    subset: Option<PathBuf>,
    /// Folds trained in parallel
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory holding the data files
    #[arg(long)]
    data: PathBuf,
    /// Evaluation setting: seen, one-unseen, or both-unseen
    #[arg(long)]
    setting: String,
    /// Fold count per variant (default 2)
    #[arg(long)]
    folds: Option<usize>,
    /// Variant list file (one key per line); default: all semantic variants,
    /// expert counts 2-5, and the three pair representations
    #[arg(long)]
    variants: Option<PathBuf>,
    /// Output directory for the matrix, F-ranks, and telemetry
    #[arg(long)]
    out: PathBuf,
    /// (variant, fold) runs executed in parallel
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct FrankArgs {
    /// Variant-metrics CSV (header `variant,acc,auc,aupr,f1,pre,rec`)
    #[arg(long)]
    matrix: PathBuf,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the check points (falls back to $AIMFUSE_SEED, then 17)
    #[arg(long)]
    seed: Option<u64>,
    /// Append a deliberately broken backward fixture; the run must then fail
    /// (negative control for the checker itself)
    #[arg(long, default_value_t = false)]
    corrupt: bool,
}

#[derive(Args)]
struct TelemetryReportArgs {
    /// Telemetry TSV written by train-eval or ablate
    #[arg(long)]
    telemetry: PathBuf,
    /// Also write the summary to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are successful outcomes; anything else is a
            // configuration error.
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(if err.is_numeric() { 2 } else { 1 });
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Split(args) => cmd_split(args),
        Command::TrainEval(args) => cmd_train_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Frank(args) => cmd_frank(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::TelemetryReport(args) => cmd_telemetry_report(args),
    }
}

// ---- shared helpers ----

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(text) => text.trim().parse::<u64>().map(Some).map_err(|_| {
            Error::Config(format!("{SEED_ENV} must be a non-negative integer, got '{text}'"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::Config(format!("{SEED_ENV} is not valid UTF-8")))
        }
    }
}

/// Seed for commands without a config file: flag, else env, else the default.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(seed) => seed,
        None => env_seed()?.unwrap_or(DEFAULT_SEED),
    })
}

/// Does a config file set `seed` itself? Mirrors the parser's line handling;
/// decides whether $AIMFUSE_SEED still applies as the fallback.
fn file_mentions_seed(text: &str) -> bool {
    text.lines().any(|raw| {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let line = line.split('#').next().unwrap_or("");
        line.split_once('=').map(|(key, _)| key.trim() == "seed").unwrap_or(false)
    })
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut seed_fallback = env_seed()?;
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            if file_mentions_seed(&text) {
                seed_fallback = None;
            }
            parse_config_str(&text, &path.to_string_lossy())?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_fallback {
        config.seed = seed;
    }
    for entry in &args.set {
        let (key, value) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got '{entry}'"))
        })?;
        config.apply(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn parse_setting(key: &str) -> Result<Setting> {
    Setting::from_key(key).ok_or_else(|| {
        Error::Config(format!(
            "unknown setting '{key}'; valid settings: seen, one-unseen, both-unseen"
        ))
    })
}

/// Run `f(0..n)` over `jobs` worker threads. Results keep index order and the
/// lowest-index error wins, so the outcome is independent of scheduling.
fn parallel_map<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = jobs.max(1).min(n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let result = f(i);
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.into_inner().expect("result slot poisoned") {
            Some(result) => out.push(result?),
            None => return Err(Error::Domain(format!("task {i} produced no result"))),
        }
    }
    Ok(out)
}

fn metrics_summary(m: &Metrics) -> String {
    let a = m.as_array();
    format!(
        "acc {:.4} auc {:.4} aupr {:.4} f1 {:.4} pre {:.4} rec {:.4}",
        a[0], a[1], a[2], a[3], a[4], a[5]
    )
}

fn metrics_csv_line(label: &str, m: &Metrics) -> String {
    let a = m.as_array();
    format!("{label},{},{},{},{},{},{}\n", a[0], a[1], a[2], a[3], a[4], a[5])
}

// ---- gen-data ----

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let config = SynthConfig {
        drugs: args.drugs,
        events: args.events,
        pairs: args.pairs,
        planted_rule: args.planted_rule,
        ..SynthConfig::default()
    };
    let synth = generate_synthetic(&config, seed)?;
    synth.write_to_dir(&args.out)?;
    let mut files: Vec<String> =
        synth.channels.iter().map(|c| format!("triples_{}.txt", c.name)).collect();
    files.push("pairs.txt".into());
    files.push("prompts.tsv".into());
    println!(
        "generated {} drugs, {} event types, {} labeled pairs (seed {seed}, {})",
        args.drugs,
        synth.pairs.n_events,
        synth.pairs.pairs.len(),
        if synth.rule.is_some() { "planted rule" } else { "noise labels" },
    );
    println!("wrote {} to {}", files.join(", "), args.out.display());
    Ok(())
}

// ---- split ----

fn cmd_split(args: SplitArgs) -> Result<()> {
    let setting = parse_setting(&args.setting)?;
    let seed = resolve_seed(args.seed)?;
    let bundle = load_bundle(&args.data)?;
    let plan = make_split(&bundle.pairs, bundle.drugs.len(), setting, args.folds, seed)?;
    fail_on_audit_violations(&plan, &bundle)?;
    std::fs::write(&args.out, write_split(&plan))?;
    println!(
        "wrote {}-fold {} split over {} units to {}",
        plan.k,
        setting,
        plan.assignment.len(),
        args.out.display()
    );
    for (f, fold) in plan.folds.iter().enumerate() {
        println!("fold {f}: {} train pairs, {} test pairs", fold.train_pairs.len(), fold.test_pairs.len());
    }
    Ok(())
}

fn fail_on_audit_violations(plan: &SplitPlan, bundle: &Bundle) -> Result<()> {
    let violations = audit_split(plan, &bundle.pairs, bundle.drugs.len());
    if violations.is_empty() {
        return Ok(());
    }
    for violation in &violations {
        eprintln!("split violation: {violation}");
    }
    Err(Error::Config(format!("split audit failed with {} violation(s)", violations.len())))
}

// ---- train-eval ----

struct FoldRun {
    metrics: Metrics,
    subset: Option<Metrics>,
    kept: usize,
    skipped: usize,
    train_acc: f64,
}

enum ArtifactPlan {
    /// Checkpoint + history + telemetry per fold (train-eval).
    Full,
    /// Telemetry only, tagged with a variant label (ablate).
    TelemetryTagged(String),
}

fn run_one_fold(
    bundle: &Bundle,
    plan: &SplitPlan,
    fold_idx: usize,
    config: &TrainConfig,
    out: &Path,
    artifacts: &ArtifactPlan,
    subset: Option<&BTreeSet<usize>>,
) -> Result<FoldRun> {
    let fold = &plan.folds[fold_idx];
    if fold.train_pairs.is_empty() || fold.test_pairs.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold_idx} has {} train / {} test pairs; use fewer folds or more data",
            fold.train_pairs.len(),
            fold.test_pairs.len()
        )));
    }
    let state = fit(bundle, fold, config)?;
    let prediction = predict(&state, bundle, fold, &fold.test_pairs, config.test_substitution)?;
    if prediction.kept.is_empty() {
        return Err(Error::Domain(format!(
            "fold {fold_idx}: all {} test pairs were skipped (no resolvable representation)",
            fold.test_pairs.len()
        )));
    }
    let metrics = compute_metrics(&prediction.probs, &prediction.labels)?;
    let subset_result = match subset {
        None => None,
        Some(set) => {
            let kept_pairs: Vec<(usize, usize)> = prediction
                .kept
                .iter()
                .map(|&i| {
                    let (u, v, _) = bundle.pairs.pairs[fold.test_pairs[i]];
                    (u, v)
                })
                .collect();
            subset_metrics(&prediction.probs, &prediction.labels, &kept_pairs, set)?
        }
    };
    match artifacts {
        ArtifactPlan::Full => {
            write_checkpoint(&state, &out.join(format!("model_fold{fold_idx}.ckpt")))?;
            std::fs::write(
                out.join(format!("history_fold{fold_idx}.csv")),
                write_history(&state.history),
            )?;
            std::fs::write(
                out.join(format!("telemetry_fold{fold_idx}.tsv")),
                aimfuse::fusion::write_telemetry(&prediction.telemetry),
            )?;
        }
        ArtifactPlan::TelemetryTagged(tag) => {
            std::fs::write(
                out.join(format!("telemetry_{tag}_fold{fold_idx}.tsv")),
                aimfuse::fusion::write_telemetry(&prediction.telemetry),
            )?;
        }
    }
    Ok(FoldRun {
        metrics,
        subset: subset_result,
        kept: prediction.kept.len(),
        skipped: prediction.skipped,
        train_acc: state.history.last().map(|e| e.train_acc).unwrap_or(0.0),
    })
}

fn load_split_plan(
    bundle: &Bundle,
    setting: Setting,
    split: Option<&Path>,
    folds: Option<usize>,
    seed: u64,
) -> Result<SplitPlan> {
    let plan = match split {
        Some(path) => {
            let plan = read_split(path, &bundle.pairs, bundle.drugs.len(), setting)?;
            if let Some(k) = folds {
                if k != plan.k {
                    return Err(Error::Config(format!(
                        "--folds {k} disagrees with the split file's {} folds",
                        plan.k
                    )));
                }
            }
            plan
        }
        None => make_split(&bundle.pairs, bundle.drugs.len(), setting, folds.unwrap_or(5), seed)?,
    };
    fail_on_audit_violations(&plan, bundle)?;
    Ok(plan)
}

fn load_subset(path: &Path, bundle: &Bundle) -> Result<BTreeSet<usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut subset = BTreeSet::new();
    for raw in text.lines() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let name = line.split('#').next().unwrap_or("").trim();
        if name.is_empty() {
            continue;
        }
        let id = bundle.drugs.id(name).ok_or_else(|| {
            Error::Config(format!("subset drug '{name}' is not in the dataset"))
        })?;
        subset.insert(id);
    }
    if subset.is_empty() {
        return Err(Error::Config(format!(
            "subset file '{}' names no drugs",
            path.display()
        )));
    }
    Ok(subset)
}

fn cmd_train_eval(args: TrainEvalArgs) -> Result<()> {
    let setting = parse_setting(&args.setting)?;
    let bundle = load_bundle(&args.data)?;
    let config = resolve_config(&args.config)?;
    let plan = load_split_plan(&bundle, setting, args.split.as_deref(), args.folds, config.seed)?;
    let subset = match &args.subset {
        Some(path) => Some(load_subset(path, &bundle)?),
        None => None,
    };
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.txt"), write_config(&config))?;
    std::fs::write(args.out.join("split.txt"), write_split(&plan))?;

    let runs = parallel_map(plan.k, args.jobs, |f| {
        run_one_fold(&bundle, &plan, f, &config, &args.out, &ArtifactPlan::Full, subset.as_ref())
    })?;

    let fold_metrics: Vec<Metrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    let report = aggregate_folds(&fold_metrics)?;
    std::fs::write(args.out.join("metrics.csv"), write_metrics_report(&report))?;

    for (f, run) in runs.iter().enumerate() {
        println!(
            "fold {f}: {} | kept {} skipped {} | final train acc {:.4}",
            metrics_summary(&run.metrics),
            run.kept,
            run.skipped,
            run.train_acc
        );
    }
    println!("mean over {} folds: {}", plan.k, metrics_summary(&report.mean));
    println!("std  over {} folds: {}", plan.k, metrics_summary(&report.std));

    if subset.is_some() {
        let rows: Vec<(usize, Metrics)> = runs
            .iter()
            .enumerate()
            .filter_map(|(f, run)| run.subset.clone().map(|m| (f, m)))
            .collect();
        if rows.is_empty() {
            println!("subset: no test pair touches the listed drugs in any fold");
        } else {
            let subset_report =
                aggregate_folds(&rows.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>())?;
            let mut csv = String::from("fold,acc,auc,aupr,f1,pre,rec\n");
            for (f, m) in &rows {
                csv.push_str(&metrics_csv_line(&f.to_string(), m));
            }
            csv.push_str(&metrics_csv_line("mean", &subset_report.mean));
            csv.push_str(&metrics_csv_line("std", &subset_report.std));
            std::fs::write(args.out.join("subset_metrics.csv"), csv)?;
            println!(
                "subset mean over {} fold(s) ({}): {}",
                rows.len(),
                rows.iter().map(|(f, _)| f.to_string()).collect::<Vec<_>>().join(","),
                metrics_summary(&subset_report.mean)
            );
        }
    }
    println!("wrote metrics.csv, config.txt, split.txt, and per-fold artifacts to {}", args.out.display());
    Ok(())
}

// ---- ablate ----

enum VariantPatch {
    Semantic(SemanticChoice),
    Experts(usize),
    Pair(PairVariant),
}

fn parse_variant_key(key: &str) -> Result<VariantPatch> {
    if let Some(rest) = key.strip_prefix("semantic:") {
        return Ok(VariantPatch::Semantic(SemanticChoice::from_key(rest)?));
    }
    if let Some(rest) = key.strip_prefix("experts:") {
        let n: usize = rest.parse().map_err(|_| {
            Error::Config(format!("experts variant needs a positive integer, got '{rest}'"))
        })?;
        return Ok(VariantPatch::Experts(n));
    }
    if let Some(rest) = key.strip_prefix("pair:") {
        return PairVariant::from_key(rest).map(VariantPatch::Pair).ok_or_else(|| {
            Error::Config(format!(
                "unknown pair variant '{rest}'; valid: separate, drug-average, modality-pair"
            ))
        });
    }
    Err(Error::Config(format!(
        "unknown variant key '{key}'; expected semantic:<modality set>, experts:<n>, or \
         pair:<separate|drug-average|modality-pair>"
    )))
}

/// The full sweep: every semantic-modality configuration, expert counts 2-5,
/// and the three pair representations.
fn default_variants() -> Vec<(String, VariantPatch)> {
    let mut out = Vec::new();
    for (key, choice) in ablation_variants() {
        out.push((format!("semantic:{key}"), VariantPatch::Semantic(choice)));
    }
    for n in 2..=5 {
        out.push((format!("experts:{n}"), VariantPatch::Experts(n)));
    }
    for variant in [PairVariant::Separate, PairVariant::DrugAverage, PairVariant::ModalityPair] {
        out.push((format!("pair:{}", variant.key()), VariantPatch::Pair(variant)));
    }
    out
}

fn parse_variants_file(text: &str, source: &Path) -> Result<Vec<(String, VariantPatch)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for raw in text.lines() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let key = line.split('#').next().unwrap_or("").trim();
        if key.is_empty() {
            continue;
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!(
                "variant '{key}' appears more than once in {}",
                source.display()
            )));
        }
        out.push((key.to_string(), parse_variant_key(key)?));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("variant file '{}' names no variants", source.display())));
    }
    Ok(out)
}

fn apply_patch(base: &TrainConfig, label: &str, patch: &VariantPatch) -> Result<TrainConfig> {
    let mut config = base.clone();
    match patch {
        VariantPatch::Semantic(choice) => config.semantic = choice.clone(),
        VariantPatch::Experts(n) => config.n_experts = *n,
        VariantPatch::Pair(variant) => config.pair_mode = *variant,
    }
    config
        .validate()
        .map_err(|e| Error::Config(format!("variant '{label}': {e}")))?;
    Ok(config)
}

/// Variant label → filename fragment (keeps letters, digits, `_ + -`).
fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '+' | '-') { c } else { '-' })
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let setting = parse_setting(&args.setting)?;
    let bundle = load_bundle(&args.data)?;
    let base = resolve_config(&args.config)?;
    let variants = match &args.variants {
        Some(path) => parse_variants_file(&std::fs::read_to_string(path)?, path)?,
        None => default_variants(),
    };
    // Patched configs are validated up front so a bad variant fails the run
    // before any training starts.
    let configs: Vec<TrainConfig> = variants
        .iter()
        .map(|(label, patch)| apply_patch(&base, label, patch))
        .collect::<Result<_>>()?;
    let plan = load_split_plan(&bundle, setting, None, args.folds.or(Some(2)), base.seed)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.txt"), write_config(&base))?;
    std::fs::write(args.out.join("split.txt"), write_split(&plan))?;

    // One work item per (variant, fold); every variant sees the same folds.
    let k = plan.k;
    let runs = parallel_map(variants.len() * k, args.jobs, |i| {
        let (vi, f) = (i / k, i % k);
        let tag = sanitize_label(&variants[vi].0);
        run_one_fold(&bundle, &plan, f, &configs[vi], &args.out, &ArtifactPlan::TelemetryTagged(tag), None)
    })?;

    let mut matrix = VariantMatrix { variants: Vec::new(), metrics: Vec::new() };
    for (vi, (label, _)) in variants.iter().enumerate() {
        let fold_metrics: Vec<Metrics> =
            (0..k).map(|f| runs[vi * k + f].metrics.clone()).collect();
        let report = aggregate_folds(&fold_metrics)?;
        matrix.variants.push(label.clone());
        matrix.metrics.push(report.mean.as_array());
    }
    let f_ranks = compute_f_rank(&matrix)?;
    std::fs::write(args.out.join("ablation_matrix.csv"), write_variant_matrix(&matrix))?;
    std::fs::write(args.out.join("f_rank.csv"), write_f_rank_report(&matrix, &f_ranks)?)?;

    let width = matrix.variants.iter().map(|v| v.len()).max().unwrap_or(8).max(8);
    for ((label, row), rank) in matrix.variants.iter().zip(&matrix.metrics).zip(&f_ranks) {
        println!(
            "{label:<width$}  acc {:.4}  auc {:.4}  aupr {:.4}  f1 {:.4}  pre {:.4}  rec {:.4}  f-rank {rank:.2}",
            row[0], row[1], row[2], row[3], row[4], row[5]
        );
    }
    println!(
        "ranked {} variants over {k} fold(s); wrote ablation_matrix.csv, f_rank.csv, telemetry to {}",
        matrix.variants.len(),
        args.out.display()
    );
    Ok(())
}

// ---- frank ----

fn cmd_frank(args: FrankArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.matrix)?;
    let matrix = parse_variant_matrix_str(&text, &args.matrix.to_string_lossy())?;
    let f_ranks = compute_f_rank(&matrix)?;
    let report = write_f_rank_report(&matrix, &f_ranks)?;
    print!("{report}");
    if let Some(out) = &args.out {
        std::fs::write(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---- gradcheck ----

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let mut reports = gradient_suite(seed)?;
    if args.corrupt {
        reports.push(corrupted_gradient_check()?);
    }
    for report in &reports {
        let kinks = if report.skipped > 0 {
            format!("  [{} coord(s) on relu kinks, cap {}]", report.skipped, report.allowed_skips())
        } else {
            String::new()
        };
        println!(
            "{:<22} max rel err {:>9.3e}  ({} coords)  {}{kinks}",
            report.name,
            report.max_rel_err,
            report.coords,
            if report.pass() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> =
        reports.iter().filter(|r| !r.pass()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} gradient checks passed (tolerance {:.0e})", reports.len(), GRAD_REL_TOL);
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "{} of {} checks exceeded {:.0e}: {}",
            failed.len(),
            reports.len(),
            GRAD_REL_TOL,
            failed.join(", ")
        )))
    }
}

// ---- telemetry-report ----

fn cmd_telemetry_report(args: TelemetryReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.telemetry)?;
    let rows = parse_telemetry_str(&text, &args.telemetry.to_string_lossy())?;
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "telemetry file '{}' holds no instances",
            args.telemetry.display()
        )));
    }
    let n_experts = rows[0].gates.len();
    let n_tokens = rows[0].contributions.len();
    for (i, row) in rows.iter().enumerate() {
        if row.gates.len() != n_experts || row.contributions.len() != n_tokens {
            return Err(Error::Config(format!(
                "telemetry row {i} disagrees on expert/token counts ({} gates, {} contributions)",
                row.gates.len(),
                row.contributions.len()
            )));
        }
    }
    let n = rows.len();
    let mut report = String::new();
    report.push_str(&format!(
        "instances: {n}\nexperts: {n_experts}\ntokens per instance: {n_tokens}\n"
    ));
    report.push_str("expert  assigned  selected-by  mean-gate\n");
    for e in 0..n_experts {
        let assigned = rows.iter().filter(|r| r.assigned == e).count();
        let selected = rows.iter().filter(|r| r.selectors.contains(&e)).count();
        let mean_gate: f64 = rows.iter().map(|r| r.gates[e]).sum::<f64>() / n as f64;
        report.push_str(&format!(
            "{e:<6}  {assigned:>4} ({:>5.1}%)  {selected:>11}  {mean_gate:>9.4}\n",
            100.0 * assigned as f64 / n as f64
        ));
    }
    let mean_selectors: f64 =
        rows.iter().map(|r| r.selectors.len() as f64).sum::<f64>() / n as f64;
    report.push_str(&format!("mean selector-set size: {mean_selectors:.2}\n"));
    let max_contribution_drift: f64 = rows
        .iter()
        .map(|r| (r.contributions.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    report.push_str(&format!(
        "max |contribution row sum - 1|: {max_contribution_drift:.3e}\n"
    ));
    let mut token_means = vec![0.0f64; n_tokens];
    for row in &rows {
        for (slot, &c) in token_means.iter_mut().zip(&row.contributions) {
            *slot += c;
        }
    }
    let token_means: Vec<String> =
        token_means.iter().map(|t| format!("{:.4}", t / n as f64)).collect();
    report.push_str(&format!("mean contribution per token: {}\n", token_means.join(" ")));
    print!("{report}");
    if let Some(out) = &args.out {
        std::fs::write(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
