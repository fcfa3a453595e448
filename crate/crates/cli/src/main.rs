use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dimaf_core::checkpoint::Checkpoint;
use dimaf_core::config::RunConfig;
use dimaf_core::datagen::{generate_cohort, read_cohort, write_cohort};
use dimaf_core::manifest::{append_manifest, hash_inputs, FileHash, RunManifest};
use dimaf_core::prototype::{prototype_assignments, write_assignments};
use dimaf_core::train_eval::{crossval_to_dir, explain_checkpoints, read_report, write_explain_report};
use dimaf_core::{Error, Result};

use dimaf_cli::render;

/// Disentangled attention fusion of pathway tokens and slide prototypes for
/// survival prediction.
#[derive(Debug, Parser)]
#[command(name = "dimaf", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalOpts {
    /// TOML run configuration; missing keys take their defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the run seed (`train.seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of cross-validation folds
    #[arg(long, global = true, default_value_t = 5)]
    folds: usize,
    /// Overrides the disentanglement weight; 0 trains the ablation
    #[arg(long, global = true, value_name = "W")]
    lambda_dis: Option<f64>,
    /// Overrides the survival loss weight
    #[arg(long, global = true, value_name = "W")]
    lambda_surv: Option<f64>,
    /// Output directory
    #[arg(long, global = true, env = "DIMAF_OUT_DIR", default_value = "dimaf_out", value_name = "DIR")]
    out: PathBuf,
    /// Worker threads; 1 runs everything on the calling thread
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic planted-signal cohort
    Generate,
    /// Check a cohort directory against the file schemas
    Validate {
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
    },
    /// Cross-validate on a cohort, writing checkpoints and reports
    Crossval {
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
    },
    /// Recompute attribution shares from fold checkpoints
    Explain {
        /// Checkpoint files, or directories holding `fold*_checkpoint.json`
        #[arg(long = "checkpoint", value_name = "PATH", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
        /// Also write per-patch prototype assignments of the test patients
        #[arg(long)]
        assignments: bool,
    },
    /// Render report files as tables and plots
    Report {
        #[arg(required = true, value_name = "REPORT")]
        files: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Validate { .. } => "validate",
            Command::Crossval { .. } => "crossval",
            Command::Explain { .. } => "explain",
            Command::Report { .. } => "report",
        }
    }
}

/// What a command touched, for the manifest.
#[derive(Default)]
struct Trace {
    config: Option<RunConfig>,
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<String>,
}

impl Trace {
    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.extend(hash_inputs(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }
}

fn load_config(g: &GlobalOpts, trace: &mut Trace) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            trace.input(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    if let Some(l) = g.lambda_dis {
        cfg.train.lambda_dis = l;
    }
    if let Some(l) = g.lambda_surv {
        cfg.train.lambda_surv = l;
    }
    cfg.validate()?;
    trace.seed = Some(cfg.train.seed);
    trace.config = Some(cfg.clone());
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn cmd_generate(g: &GlobalOpts, trace: &mut Trace) -> Result<()> {
    let cfg = load_config(g, trace)?;
    let cohort = generate_cohort(&cfg.generator, cfg.train.seed)?;
    write_cohort(&cohort, &g.out)?;
    trace.outputs.extend(hash_inputs(&g.out)?.into_iter().map(|f| f.path).filter(|p| !p.ends_with("manifest.jsonl")));
    println!("wrote {} patients to {}", cohort.len(), g.out.display());
    Ok(())
}

fn cmd_validate(cohort_dir: &Path, trace: &mut Trace) -> Result<()> {
    trace.input(cohort_dir)?;
    let cohort = read_cohort(cohort_dir)?;
    cohort.validate()?;
    println!(
        "{}: {} patients, {} genes, {} pathways, patch dim {}, censored {:.1}%",
        cohort_dir.display(),
        cohort.len(),
        cohort.gene_names.len(),
        cohort.membership.len(),
        cohort.patch_dim(),
        100.0 * cohort.censoring_fraction()
    );
    Ok(())
}

fn cmd_crossval(g: &GlobalOpts, cohort_dir: &Path, trace: &mut Trace) -> Result<()> {
    let cfg = load_config(g, trace)?;
    trace.input(cohort_dir)?;
    let cohort = read_cohort(cohort_dir)?;
    let result = crossval_to_dir(&cfg, &cohort, g.folds, &g.out);
    // Checkpoints of successful folds are kept even if another fold failed.
    for f in 0..g.folds {
        let p = g.out.join(dimaf_core::train_eval::checkpoint_name(f));
        if p.exists() {
            trace.output(&p);
        }
    }
    let out = result?;
    for name in ["crossval_report.json", "crossval_report.csv", "explain_report.json", "explain_report.csv"] {
        trace.output(&g.out.join(name));
    }
    let s = &out.report.summary;
    println!(
        "{}: c-index {:.4} ± {:.4}, test DC total {:.4} ± {:.4}, shared share {:.3}",
        out.report.variant, s.c_index.mean, s.c_index.std, s.dc_total.mean, s.dc_total.std, out.explain.summary.shared.mean
    );
    Ok(())
}

fn checkpoint_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| {
                    let name = q.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.starts_with("fold") && name.ends_with("_checkpoint.json")
                })
                .collect();
            if found.is_empty() {
                return Err(Error::Input(format!("{}: no fold checkpoints", p.display())));
            }
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_explain(g: &GlobalOpts, paths: &[PathBuf], cohort_dir: &Path, assignments: bool, trace: &mut Trace) -> Result<()> {
    let paths = checkpoint_paths(paths)?;
    let mut checkpoints = Vec::with_capacity(paths.len());
    for p in &paths {
        trace.input(p)?;
        checkpoints.push(Checkpoint::load(p)?);
    }
    checkpoints.sort_by_key(|c| c.fold);
    trace.seed = checkpoints.first().map(|c| c.config.train.seed);
    trace.config = checkpoints.first().map(|c| c.config.clone());
    trace.input(cohort_dir)?;
    let cohort = read_cohort(cohort_dir)?;
    let report = explain_checkpoints(&checkpoints, &cohort)?;
    create_dir(&g.out)?;
    write_explain_report(&g.out, &report)?;
    trace.output(&g.out.join("explain_report.json"));
    trace.output(&g.out.join("explain_report.csv"));
    if assignments {
        for ck in &checkpoints {
            let dir = g.out.join("assignments").join(format!("fold{}", ck.fold));
            create_dir(&dir)?;
            for id in &ck.test_ids {
                let patient = cohort
                    .patients
                    .iter()
                    .find(|p| &p.id == id)
                    .ok_or_else(|| Error::Validation(format!("checkpoint patient {id} is not in the cohort")))?;
                let gmm = ck.features.fit_slide(patient)?;
                let path = dir.join(format!("{id}.csv"));
                write_assignments(&path, &prototype_assignments(&patient.patches, &gmm))?;
                trace.output(&path);
            }
        }
    }
    let s = &report.summary;
    println!(
        "{}: specific {:.1}%, shared {:.1}% over {} fold(s)",
        report.variant,
        100.0 * s.specific.mean,
        100.0 * s.shared.mean,
        report.folds.len()
    );
    Ok(())
}

fn cmd_report(g: &GlobalOpts, files: &[PathBuf], trace: &mut Trace) -> Result<()> {
    let mut reports = Vec::with_capacity(files.len());
    for f in files {
        trace.input(f)?;
        reports.push(read_report(f)?);
    }
    let text = render::render_tables(&reports);
    print!("{text}");
    create_dir(&g.out)?;
    let path = g.out.join("report.txt");
    write_file(&path, &text)?;
    trace.output(&path);
    for (name, svg) in render::render_plots(&reports) {
        let path = g.out.join(name);
        write_file(&path, &svg)?;
        trace.output(&path);
    }
    Ok(())
}

fn run(cli: &Cli, trace: &mut Trace) -> Result<()> {
    let g = &cli.global;
    if g.folds < 2 {
        return Err(Error::Config(format!("--folds {} must be at least 2", g.folds)));
    }
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Generate => cmd_generate(g, trace),
        Command::Validate { cohort } => cmd_validate(cohort, trace),
        Command::Crossval { cohort } => cmd_crossval(g, cohort, trace),
        Command::Explain {
            checkpoints,
            cohort,
            assignments,
        } => cmd_explain(g, checkpoints, cohort, *assignments, trace),
        Command::Report { files } => cmd_report(g, files, trace),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let start = Instant::now();
    let mut trace = Trace::default();
    let result = run(&cli, &mut trace);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    let manifest = RunManifest {
        command: std::env::args().collect::<Vec<_>>().join(" "),
        config: trace.config,
        seed: trace.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: trace.inputs,
        outputs: trace.outputs,
        wall_seconds: start.elapsed().as_secs_f64(),
        status,
    };
    if let Err(e) = append_manifest(&cli.global.out, &manifest) {
        log::error!("could not record manifest: {e}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", cli.command.name());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
