use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fairsynth_core::data;
use fairsynth_core::derive_seed;
use fairsynth_core::eval::causal::repeat_effects;
use fairsynth_core::generation::{generate_batch, BatchSettings, BatchStatus};
use fairsynth_core::mitigation::{self, Method};
use fairsynth_core::orchestrator::{self, evaluate_iteration, pin_roles, RealReference, RunStatus};
use fairsynth_core::prompting::{build_prompt, render_rows, select_icl_samples};
use fairsynth_core::Engine;

mod report;

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 1;
const EXIT_NO_ROWS: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_BACKEND: u8 = 4;

#[derive(Parser)]
#[command(name = "fairsynth", version, about = "Fairness-constrained synthetic tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Engine configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic batch.
    Generate(Common),
    /// Evaluate a synthetic CSV against the real data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Synthetic CSV; defaults to `synthetic.csv` in the output directory.
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Run the generate, evaluate, refine loop.
    Run(Common),
    /// Apply a bias mitigation transform.
    Mitigate {
        #[command(flatten)]
        common: Common,
        /// One of sup, cor, dir, rw.
        #[arg(long)]
        method: String,
        /// Method parameter as key=value (threshold, alpha, lambda).
        #[arg(long = "param")]
        params: Vec<String>,
        /// Input CSV; defaults to the real data.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Retrain on the result and report dp, ftu and utility.
        #[arg(long)]
        evaluate: bool,
    },
}

struct RunContext {
    engine: Engine,
    out: PathBuf,
}

fn load(common: &Common) -> Result<RunContext> {
    let mut engine = Engine::load(&common.config)?;
    if let Some(seed) = common.seed {
        engine.config.seed = seed;
    }
    let out = match &common.out {
        Some(p) => p.clone(),
        None => engine.config.output_dir(),
    };
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok(RunContext { engine, out })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_generate(common: &Common) -> Result<u8> {
    let ctx = load(common)?;
    let engine = &ctx.engine;
    let backend = engine.backend()?;
    let real = engine.real_data()?;
    let settings = engine.run_settings()?;
    let spec = settings.prompt.clone().bind(real.schema())?;
    let icl = select_icl_samples(&real, &spec, derive_seed(settings.seed, 2))?;
    let prompt = build_prompt(&spec, &render_rows(&real, &icl))?;
    let shown: Vec<_> = icl.iter().map(|&i| real.rows()[i].clone()).collect();
    fs::write(ctx.out.join("prompt.txt"), format!("{}\n\n{}\n", prompt.system_role, prompt.user_body))?;
    let g = &settings.generation;
    let batch = generate_batch(
        backend.as_ref(),
        &prompt,
        &settings.sampling,
        real.schema(),
        &shown,
        &BatchSettings {
            target_n: g.target_n,
            budget: g.request_budget,
            max_in_flight: g.max_in_flight,
            seed: derive_seed(settings.seed, 1000),
            refinement_count: spec.extra_directives.len(),
            retain_raw: g.retain_raw,
        },
    );
    let batch = match batch {
        Ok(b) => b,
        Err(e) => {
            write_json(&ctx.out.join("diagnostics.json"), &e.partial)?;
            eprintln!("error: backend failure: {e}");
            return Ok(EXIT_BACKEND);
        }
    };
    for (i, raw) in batch.raw_responses.iter().enumerate() {
        fs::write(ctx.out.join(format!("response_{:02}.txt", i + 1)), raw)?;
    }
    write_json(&ctx.out.join("diagnostics.json"), &batch.diagnostics)?;
    data::save_csv(&batch.dataset, ctx.out.join(orchestrator::SYNTHETIC_FILE))?;
    let n = batch.dataset.len();
    let status = match batch.diagnostics.status {
        BatchStatus::Complete => "complete",
        BatchStatus::BudgetExhausted => "budget exhausted",
    };
    println!("{n} rows written to {} ({status})", ctx.out.join(orchestrator::SYNTHETIC_FILE).display());
    Ok(if n == 0 { EXIT_NO_ROWS } else { EXIT_OK })
}

fn cmd_evaluate(common: &Common, synthetic: Option<&Path>) -> Result<u8> {
    let ctx = load(common)?;
    let engine = &ctx.engine;
    let settings = engine.run_settings()?;
    let real = engine.real_data()?;
    let path = synthetic.map(Path::to_path_buf).unwrap_or_else(|| ctx.out.join(orchestrator::SYNTHETIC_FILE));
    let synth = engine
        .load_dataset(&path)
        .with_context(|| format!("cannot load synthetic data {}", path.display()))?;
    let roles = pin_roles(&settings.roles, &real)?;
    let reference = RealReference::new(real.clone(), settings.evaluation.real_test_fraction, derive_seed(settings.seed, 1))?;
    let (metrics, violations) = evaluate_iteration(
        &synth,
        &reference,
        &roles,
        &settings.evaluation,
        &settings.thresholds,
        derive_seed(settings.seed, 2000),
    )?;
    let real_effects = repeat_effects(&real, &roles, &settings.evaluation.trainer, &settings.evaluation.repeat, derive_seed(settings.seed, 5))?;
    let oracle = match &engine.scm {
        Some(scm) => {
            let names = &real.schema().column(&roles.sensitive).expect("validated").categories;
            let r = roles.resolve(&real)?;
            Some(scm.exact_effects(&names[r.x0 as usize], &names[r.x1 as usize])?)
        }
        None => None,
    };
    let doc = report::MetricsDocument::new(&path, real_effects, metrics, oracle, violations);
    write_json(&ctx.out.join("metrics.json"), &doc)?;
    report::write_tables(&ctx.out, &doc)?;
    println!("metrics written to {}", ctx.out.join("metrics.json").display());
    Ok(EXIT_OK)
}

fn cmd_run(common: &Common) -> Result<u8> {
    let ctx = load(common)?;
    let engine = &ctx.engine;
    let backend = engine.backend()?;
    let real = engine.real_data()?;
    let settings = engine.run_settings()?;
    fs::write(ctx.out.join("config.toml"), &engine.source)?;
    let outcome = orchestrator::run(&settings, backend.as_ref(), &real, Some(&ctx.out))?;
    let report = &outcome.report;
    println!(
        "{} after {} iteration(s); report at {}",
        match report.status {
            RunStatus::Converged => "converged",
            RunStatus::BudgetExhausted => "budget exhausted",
            RunStatus::BackendError => "backend error",
        },
        report.iterations.len(),
        ctx.out.join(orchestrator::REPORT_FILE).display()
    );
    if let Some(e) = &report.error {
        eprintln!("error: {e}");
    }
    Ok(match report.status {
        RunStatus::Converged => EXIT_OK,
        RunStatus::BudgetExhausted => EXIT_BUDGET,
        RunStatus::BackendError => EXIT_BACKEND,
    })
}

fn parse_params(method: Method, raw: &[String]) -> Result<BTreeMap<String, f64>> {
    let allowed: &[&str] = match method {
        Method::Sup => &["threshold"],
        Method::Cor => &["alpha"],
        Method::Dir => &["lambda", "repair_level"],
        Method::Rw => &[],
    };
    let mut out = BTreeMap::new();
    for p in raw {
        let (k, v) = p.split_once('=').with_context(|| format!("parameter `{p}` is not key=value"))?;
        let k = k.trim();
        if !allowed.contains(&k) {
            bail!("method {method} has no parameter `{k}` (valid: {})", allowed.join(", "));
        }
        let v: f64 = v.trim().parse().with_context(|| format!("parameter `{k}` is not a number"))?;
        out.insert(if k == "repair_level" { "lambda".to_string() } else { k.to_string() }, v);
    }
    Ok(out)
}

fn cmd_mitigate(common: &Common, method: &str, params: &[String], input: Option<&Path>, evaluate: bool) -> Result<u8> {
    let method: Method = method.parse()?;
    let params = parse_params(method, params)?;
    let ctx = load(common)?;
    let engine = &ctx.engine;
    let cfg = &engine.config.mitigation;
    let dataset = match input {
        Some(p) => engine.load_dataset(p).with_context(|| format!("cannot load {}", p.display()))?,
        None => engine.real_data()?,
    };
    let roles = pin_roles(&engine.config.roles, &dataset)?;
    let outcome = match method {
        Method::Sup => mitigation::suppress(&dataset, &roles, *params.get("threshold").unwrap_or(&cfg.suppression_threshold))?,
        Method::Cor => mitigation::correlation_remover(&dataset, &roles, *params.get("alpha").unwrap_or(&cfg.cor_alpha))?,
        Method::Dir => mitigation::disparate_impact_remover(&dataset, &roles, *params.get("lambda").unwrap_or(&cfg.dir_repair_level))?,
        Method::Rw => mitigation::reweigh(&dataset, &roles)?,
    };
    let csv_path = ctx.out.join(format!("mitigated_{method}.csv"));
    data::save_csv(&outcome.dataset, &csv_path)?;
    write_json(&ctx.out.join(format!("mitigation_{method}.json")), &outcome.audit)?;
    println!("{} written to {}", method, csv_path.display());
    if evaluate {
        let eval = report::mitigation_evaluation(engine, &dataset, &outcome.dataset, &roles)?;
        write_json(&ctx.out.join(format!("mitigation_{method}_metrics.json")), &eval)?;
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::Evaluate { common, synthetic } => cmd_evaluate(common, synthetic.as_deref()),
        Command::Run(c) => cmd_run(c),
        Command::Mitigate { common, method, params, input, evaluate } => {
            cmd_mitigate(common, method, params, input.as_deref(), *evaluate)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
