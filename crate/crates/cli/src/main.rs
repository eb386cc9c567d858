//! `tardis`: train, evaluate and analyse memory-augmented recurrent models.
//!
//! Exit status is 0 on success, 1 on usage or input errors and 2 on
//! numerical failure (divergence, failed gradient check).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tardis::analysis::{self, AccessModel, Activation, ProbeModel, ReadPolicy};
use tardis::autodiff::Tensor;
use tardis::checks::{gradcheck_scope, GradScope, GRADCHECK_TOL};
use tardis::config::{RunConfig, TaskKind};
use tardis::rng::SeedStream;
use tardis::run::{self, load_model, train_run};
use tardis::tasks::{self, TaskBatch};
use tardis::training::{evaluate, merge_eval};

#[derive(Parser)]
#[command(name = "tardis", version, about = "Memory-augmented RNN experiments")]
struct Cli {
    /// Root seed; overrides any seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set k=8`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
        overrides: Vec<(String, String)>,
        /// Suppress the per-evaluation metrics lines on stdout.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on freshly drawn episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Copy task only: evaluate at exactly this sequence length.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, default_value_t = 4)]
        batches: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Monte-Carlo wormhole path-length simulation; writes CSV.
    SimulatePaths {
        /// tardis-uniform, uMANN, urMANN or all.
        #[arg(long, default_value = "all")]
        model: String,
        #[arg(long = "steps", short = 'T', default_value_t = 200)]
        t_len: usize,
        /// Memory sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "50")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        n_sims: usize,
        /// Dependency pair `t0,t1` for shortest-path statistics.
        #[arg(long, value_name = "T0,T1", value_parser = parse_pair)]
        dependency: Option<(usize, usize)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Jacobian norm probe of a random linear-algebra recurrence; writes CSV.
    ProbeGradients {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        d_x: usize,
        #[arg(long, default_value_t = 16)]
        d_m: usize,
        /// Spectral norm `W` is rescaled to.
        #[arg(long, default_value_t = 0.9)]
        w_norm: f64,
        #[arg(long, value_enum, default_value_t = Act::Linear)]
        activation: Act,
        #[arg(long, default_value_t = 5)]
        t0: usize,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
        gaps: Vec<usize>,
        /// vanilla, oracle, uniform; comma separated.
        #[arg(long, value_delimiter = ',', default_value = "vanilla,oracle,uniform")]
        policies: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// ops, controller, full-step, gumbel-st or all.
        #[arg(long, default_value = "all")]
        scope: String,
        /// Corrupt one analytic gradient entry to self-test the checker.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Write task episodes as JSON lines, or synthetic glyphs as a stroke file.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
        overrides: Vec<(String, String)>,
        /// Episodes (json) or glyphs per digit (strokes).
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, value_enum, default_value_t = DataFormat::Json)]
        format: DataFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Act {
    Linear,
    Tanh,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataFormat {
    Json,
    Strokes,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected t0,t1, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(a)?, n(b)?))
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// Marks an error as numerical, for exit status 2.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            }
            std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            if !p.exists() {
                bail!("config file not found: {}", p.display());
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<()> {
    let out = cfg.output_dir.clone();
    let mut stdout = std::io::stdout();
    let res = train_run(cfg, Some(&out), &mut |r| {
        if !quiet {
            let _ = writeln!(stdout, "{}", serde_json::to_string(r).unwrap());
        }
    });
    let outcome = match res {
        Ok(o) => o,
        Err(e @ tardis::Error::NonFinite { .. }) => return Err(Numerical(format!("training diverged: {e}")).into()),
        Err(e) => return Err(e.into()),
    };
    eprintln!(
        "best valid metric {:.6} at step {}; checkpoint {}",
        outcome.best_metric,
        outcome.best_step,
        out.join(run::CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, length: Option<usize>, batches: usize, size: usize, seed: Option<u64>) -> Result<()> {
    if batches == 0 || size == 0 {
        bail!("--batches and --batch-size must be positive");
    }
    let (cfg, model) = load_model(checkpoint).with_context(|| format!("cannot load {}", checkpoint.display()))?;
    let glyphs = cfg.glyph_source()?;
    let root = SeedStream::new(seed.unwrap_or(cfg.seed)).child("eval");
    let mut stats = Vec::new();
    for i in 0..batches {
        let mut rng = root.indexed("batch", i as u64).rng();
        let batch: TaskBatch = match length {
            Some(len) => {
                if cfg.task != TaskKind::Copy {
                    bail!("--length applies to the copy task only");
                }
                tasks::gen_copy_lengths(&vec![len; size], cfg.n_bits, &mut rng)?
            }
            None => cfg.sample(&glyphs, size, &mut rng)?,
        };
        stats.push(evaluate(&model, &batch)?);
    }
    let s = merge_eval(&stats);
    let report = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "task": cfg.task.name(),
        "mode": cfg.mode.name(),
        "length": length,
        "loss": s.loss,
        "aux_loss": s.aux_loss,
        "error": s.error,
        "count": s.count,
    });
    println!("{report}");
    if !s.loss.is_finite() {
        return Err(Numerical("evaluation loss is not finite".into()).into());
    }
    Ok(())
}

fn cmd_simulate(
    model: &str,
    t_len: usize,
    ks: &[usize],
    n_sims: usize,
    dependency: Option<(usize, usize)>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let models: Vec<AccessModel> = if model == "all" {
        AccessModel::ALL.to_vec()
    } else {
        vec![AccessModel::parse(model).with_context(|| format!("unknown model {model:?} (tardis-uniform, uMANN, urMANN, all)"))?]
    };
    let mut rows = Vec::new();
    for m in models {
        for &k in ks {
            rows.push(analysis::simulate_paths(m, t_len, k, n_sims, dependency, seed)?);
        }
    }
    emit(out, &analysis::paths_csv(&rows))
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    n: usize,
    d_x: usize,
    d_m: usize,
    w_norm: f64,
    act: Act,
    t0: usize,
    gaps: &[usize],
    policies: &[String],
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if n == 0 || d_x == 0 || d_m == 0 {
        bail!("--n, --d-x and --d-m must be positive");
    }
    if !(w_norm.is_finite() && w_norm > 0.0) {
        bail!("--w-norm must be positive");
    }
    let policies = policies
        .iter()
        .map(|p| ReadPolicy::parse(p).with_context(|| format!("unknown policy {p:?} (vanilla, oracle, uniform)")))
        .collect::<Result<Vec<_>>>()?;
    let activation = match act {
        Act::Linear => Activation::Linear,
        Act::Tanh => Activation::Tanh,
    };
    let stream = SeedStream::new(seed).child("probe");
    let model = ProbeModel::random(n, d_x, d_m, w_norm, activation, &mut stream.child("model").rng());
    let rows = match analysis::probe_gaps(&model, t0, gaps, &policies, &stream) {
        Ok(r) => r,
        Err(e @ tardis::Error::NonFinite { .. }) => return Err(Numerical(e.to_string()).into()),
        Err(e) => return Err(e.into()),
    };
    emit(out, &analysis::probe_csv(&rows))
}

fn cmd_gradcheck(scope: &str, seed: u64, inject_fault: bool) -> Result<bool> {
    let scopes: Vec<GradScope> = if scope == "all" {
        GradScope::ALL.to_vec()
    } else {
        vec![GradScope::parse(scope).with_context(|| format!("unknown scope {scope:?} (ops, controller, full-step, gumbel-st, all)"))?]
    };
    let mut ok = true;
    for s in scopes {
        let start = std::time::Instant::now();
        let report = gradcheck_scope(s, seed, inject_fault)?;
        for b in &report.blocks {
            let pass = b.non_finite == 0 && b.max_rel_err < GRADCHECK_TOL;
            println!(
                "{:<10} {:<24} {:>6} elems  max rel err {:.3e}  {}",
                s.name(),
                b.name,
                b.elements,
                b.max_rel_err,
                if pass { "ok" } else { "FAIL" }
            );
        }
        let pass = report.passed(GRADCHECK_TOL);
        println!(
            "{}: max rel err {:.3e} (tol {:.0e}) in {:.1}s: {}",
            s.name(),
            report.max_rel_err(),
            GRADCHECK_TOL,
            start.elapsed().as_secs_f64(),
            if pass { "PASS" } else { "FAIL" }
        );
        ok &= pass;
    }
    Ok(ok)
}

fn batch_json(b: &TaskBatch, e: usize) -> serde_json::Value {
    let rows = |ts: &[Tensor]| -> Vec<Vec<f64>> { ts.iter().map(|t| t.row(e).to_vec()).collect() };
    serde_json::json!({
        "task": b.task,
        "length": b.lengths[e],
        "inputs": rows(&b.inputs),
        "targets": rows(&b.targets),
        "mask": b.mask.iter().map(|m| m[e]).collect::<Vec<_>>(),
        "labels": b.labels.get(e),
    })
}

fn cmd_gen_data(cfg: &RunConfig, count: usize, format: DataFormat, out: Option<&Path>) -> Result<()> {
    if count == 0 {
        bail!("--count must be positive");
    }
    let root = SeedStream::new(cfg.seed).child("gen-data");
    let text = match format {
        DataFormat::Strokes => {
            let mut rng = root.child("glyphs").rng();
            let glyphs: Vec<_> = (0..count)
                .flat_map(|_| (0..tasks::N_DIGITS).map(|d| tasks::glyph_template(d)).collect::<Vec<_>>())
                .map(|g| tasks::jitter_glyph(&g, &mut rng))
                .collect();
            tasks::format_strokes(&glyphs)
        }
        DataFormat::Json => {
            let glyphs = cfg.glyph_source()?;
            let batch = cfg.sample(&glyphs, count, &mut root.child("episodes").rng())?;
            let mut s = String::new();
            for e in 0..count {
                s.push_str(&batch_json(&batch, e).to_string());
                s.push('\n');
            }
            s
        }
    };
    emit(out, &text)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Train {
            config,
            overrides,
            quiet,
        } => cmd_train(&load_config(Some(&config), &overrides, seed)?, quiet)?,
        Cmd::Eval {
            checkpoint,
            length,
            batches,
            batch_size,
        } => cmd_eval(&checkpoint, length, batches, batch_size, seed)?,
        Cmd::SimulatePaths {
            model,
            t_len,
            k,
            n_sims,
            dependency,
            out,
        } => cmd_simulate(&model, t_len, &k, n_sims, dependency, seed.unwrap_or(0), out.as_deref())?,
        Cmd::ProbeGradients {
            n,
            d_x,
            d_m,
            w_norm,
            activation,
            t0,
            gaps,
            policies,
            out,
        } => cmd_probe(n, d_x, d_m, w_norm, activation, t0, &gaps, &policies, seed.unwrap_or(0), out.as_deref())?,
        Cmd::Gradcheck { scope, inject_fault } => {
            if !cmd_gradcheck(&scope, seed.unwrap_or(0), inject_fault)? {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::GenData {
            config,
            overrides,
            count,
            format,
            out,
        } => cmd_gen_data(&load_config(config.as_deref(), &overrides, seed)?, count, format, out.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Numerical>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
