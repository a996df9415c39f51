//! Command-line entry point: runs, landscape scans, diagnostics and data
//! files. Failures print one `error kind=... message=...` line on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use acmap::config::{Settings, DEFAULTS};
use acmap::diagnostics::{
    alignment_csv, convergence_csv, diagnose_experiment, export_json, landscape_experiment, write_atomic,
    AlignmentVariant,
};
use acmap::harness::{
    read_embedding_file, run_experiment, stream_from_rows, stream_to_table, write_embedding_file, ExperimentSpec,
    RunReport, RunSummary, Split, SplitSpec, StreamSource,
};
use acmap::{Error, Result};

const OUT_DIR_ENV: &str = "ACMAP_OUT_DIR";

#[derive(Parser)]
#[command(name = "acmap", version, about = "Exemplar-free class-incremental learning with merged adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run methods over all seeds; writes one report per seed plus summary.json.
    Run(RunArgs),
    /// Train three consecutive adapters and scan their interpolation simplex.
    Landscape(LandscapeArgs),
    /// Alignment and convergence curves for a saved ACMap report.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic stream to an embedding file.
    GenData(GenDataArgs),
    /// Check an embedding file.
    Validate(ValidateArgs),
    /// Print the defaults table.
    Defaults,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override one key (repeatable), applied after the file.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated methods.
    #[arg(long, short = 'm')]
    method: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Early-stop threshold L (integer or inf).
    #[arg(long)]
    early_stop: Option<String>,
    /// Embedding file used instead of the synthetic stream.
    #[arg(long)]
    embeddings: Option<String>,
    /// Output directory (default: $ACMAP_OUT_DIR, else acmap-out).
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Also write per-task accuracy CSVs.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct LandscapeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Lattice size G.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Report JSON written by `run`.
    #[arg(long)]
    report: PathBuf,
    /// Retained split used for true prototypes: train, val or eval.
    #[arg(long, default_value = "train")]
    truth_split: String,
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Destination; a `.csv` extension selects CSV, anything else ACMEMB1.
    #[arg(long, short = 'o')]
    output: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    file: PathBuf,
    /// Also check that the classes split into tasks.
    #[arg(long, default_value_t = 0)]
    base_classes: usize,
    #[arg(long)]
    inc_classes: Option<usize>,
}

fn settings(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &args.config {
        s.apply_file(path)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        s.set(k.trim(), v)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, v)?;
        }
    }
    Ok(s)
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("acmap-out"))
}

fn run(args: RunArgs) -> Result<()> {
    let s = settings(
        &args.cfg,
        &[
            ("method", args.method),
            ("seeds", args.seeds),
            ("early_stop", args.early_stop),
            ("embeddings", args.embeddings),
        ],
    )?;
    let cfg = s.resolve()?;
    let dir = out_dir(args.out);
    let mut summaries = Vec::new();
    for &method in &cfg.methods {
        let mut reports = Vec::new();
        let mut files = Vec::new();
        for &seed in &cfg.seeds {
            let spec = ExperimentSpec::resolved(method, seed, &cfg.source, &cfg.run);
            let name = format!("{method}_seed{seed}");
            let out = match run_experiment(&spec) {
                Ok(out) => out,
                Err(Error::Aborted { task, source, partial }) => {
                    partial.write_json(&dir.join(format!("{name}.partial.json")))?;
                    return Err(Error::Aborted { task, source, partial });
                }
                Err(e) => return Err(e),
            };
            out.report.write_json(&dir.join(format!("{name}.json")))?;
            if args.csv {
                out.report.write_csv(&dir.join(format!("{name}.csv")))?;
            }
            println!(
                "method={method} seed={seed} avg_accuracy={:.6} final_accuracy={:.6}",
                out.report.avg_accuracy, out.report.final_accuracy
            );
            files.push(format!("{name}.json"));
            reports.push(out.report);
        }
        let summary = RunSummary::from_reports(&reports, files)?;
        println!(
            "summary method={method} avg_accuracy={:.6}±{:.6} final_accuracy={:.6}±{:.6}",
            summary.avg_accuracy.mean, summary.avg_accuracy.std, summary.final_accuracy.mean, summary.final_accuracy.std
        );
        summaries.push(summary);
    }
    export_json(&summaries, &dir.join("summary.json"))
}

fn first_seed(s: &mut Settings, seed: Option<u64>) -> Result<u64> {
    if let Some(seed) = seed {
        s.set("seeds", &seed.to_string())?;
    }
    Ok(s.resolve()?.seeds[0])
}

fn landscape(args: LandscapeArgs) -> Result<()> {
    let mut s = settings(&args.cfg, &[("grid_size", args.grid.map(|g| g.to_string()))])?;
    let seed = first_seed(&mut s, args.seed)?;
    let cfg = s.resolve()?;
    let spec = ExperimentSpec::resolved(cfg.methods[0], seed, &cfg.source, &cfg.run);
    let result = landscape_experiment(&spec, cfg.grid_size, cfg.landscape_ir)?;
    let dir = out_dir(args.out);
    write_atomic(&dir.join(format!("landscape_seed{seed}.csv")), result.grid.to_csv().as_bytes())?;
    export_json(&result, &dir.join(format!("landscape_seed{seed}.json")))?;
    let [a, b, c] = result.standalone_errors;
    println!(
        "landscape seed={seed} points={} min_error={:.6} standalone={a:.6},{b:.6},{c:.6}",
        result.grid.points.len(),
        result.grid.min_error()
    );
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let report = RunReport::read_json(&args.report)?;
    let spec = report
        .experiment
        .clone()
        .ok_or_else(|| Error::IncompleteArtifacts("report carries no experiment spec".into()))?;
    let split = match args.truth_split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "eval" => Split::Eval,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let d = diagnose_experiment(&spec, split)?;
    if d.accuracy != report.per_task_accuracy {
        return Err(Error::Data("re-executed run does not reproduce the saved report".into()));
    }
    let dir = out_dir(args.out);
    let stem = format!("{}_seed{}", spec.method, spec.seed);
    for v in AlignmentVariant::ALL {
        let series = d.variant(v);
        write_atomic(&dir.join(format!("{stem}_alignment_{v}.csv")), alignment_csv(&series).as_bytes())?;
        let mean = acmap::diagnostics::mean_offdiagonal_alignment(&series);
        println!("alignment variant={v} mean_cos={}", mean.map_or("nan".into(), |m| format!("{m:.6}")));
    }
    if let Some(c) = &d.convergence {
        write_atomic(&dir.join(format!("{stem}_convergence.csv")), convergence_csv(c).as_bytes())?;
    }
    export_json(&d, &dir.join(format!("{stem}_diagnosis.json")))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut s = settings(&args.cfg, &[])?;
    let seed = first_seed(&mut s, args.seed)?;
    let cfg = s.resolve()?;
    let spec = ExperimentSpec::resolved(cfg.methods[0], seed, &cfg.source, &cfg.run);
    if !matches!(spec.source, StreamSource::Synthetic(_)) {
        return Err(Error::Config("gen-data needs the synthetic stream (unset embeddings)".into()));
    }
    let table = stream_to_table(&spec.build_stream()?);
    write_embedding_file(&args.output, &table)?;
    println!("wrote rows={} dim={} path={}", table.rows.len(), table.dim, args.output.display());
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<()> {
    let table = read_embedding_file(&args.file)?;
    let classes = table.n_classes();
    if let Some(inc) = args.inc_classes {
        let split = SplitSpec {
            base_classes: args.base_classes,
            inc_classes: inc,
            eval_fraction: 0.3,
            val_fraction: 0.0,
            seed: 0,
        };
        let stream = stream_from_rows(table.rows.clone(), table.dim, &split)?;
        println!("ok rows={} dim={} classes={classes} tasks={}", table.rows.len(), table.dim, stream.n_tasks());
    } else {
        println!("ok rows={} dim={} classes={classes}", table.rows.len(), table.dim);
    }
    Ok(())
}

fn defaults() {
    let width = DEFAULTS.iter().map(|s| s.key.len()).max().unwrap_or(0);
    for s in DEFAULTS {
        let shown = if s.default.is_empty() { "\"\"" } else { s.default };
        println!("{:width$} = {:24}  # {}", s.key, shown, s.help);
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Aborted { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    let message = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    let quoted = serde_json::to_string(&message).unwrap_or_else(|_| "\"\"".into());
    eprintln!("error kind={kind} exit={code} message={quoted}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            return fail("usage", 2, first);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Landscape(a) => landscape(a),
        Command::Diagnose(a) => diagnose(a),
        Command::GenData(a) => gen_data(a),
        Command::Validate(a) => validate(a),
        Command::Defaults => {
            defaults();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), exit_code(&e), &e.to_string()),
    }
}
