//! Command-line front end: generate and check models, build recovery heads,
//! query the masked-LM oracle, and run seeded experiments.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::{json, Value};

use hmm_recovery::assumptions::{
    check_nondegenerate_emissions, check_recoverable, check_recoverable_prompt, check_regularity, check_relaxed_vanilla, check_stationary, SpanCheck,
    STATIONARY_TOL,
};
use hmm_recovery::downstream::{gen_dataset, make_task, MemoryTarget, Source, Splits, VanillaTarget};
use hmm_recovery::experiment::{run_experiment, write_report, ExperimentConfig, ExperimentKind, Report};
use hmm_recovery::families::{build_degenerate_family, build_marker_mem_family, TASK_NONZEROS};
use hmm_recovery::inference::{mem_oracle, mlm_oracle};
use hmm_recovery::io::Model;
use hmm_recovery::linalg::RANK_TOL;
use hmm_recovery::model::{random_hmm, random_mem_hmm, HmmParams, MemHmmParams};
use hmm_recovery::par::Exec;
use hmm_recovery::recovery::{
    construct_attention_thm3, construct_linear_head_thm1, construct_prompt_attention_thm4, construct_prompt_head_thm2, eval_attention, eval_linear,
};
use hmm_recovery::tuning::{attention_features, prompt_data, prompt_features, train_attention_head, train_prompt, TrainConfig};

#[derive(Parser)]
#[command(name = "hmm-recovery", version, about = "Exact masked-LM oracles, recovery heads and tuning experiments for HMMs")]
struct Cli {
    /// JSON config: an experiment config for `theorem`/`sweep`/`run`, a training config for `tune`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Hmm,
    MemHmm,
    /// Rank-deficient vanilla model with a designed source state.
    Degenerate,
    /// Memory-augmented model with a marker state.
    Marker,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    HeadVsPrompt,
    Memory,
}

#[derive(clap::Args)]
struct Sets {
    /// Task weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    q: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    h_star: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    b_set: Option<Vec<usize>>,
    #[arg(long)]
    j_star: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    s_star: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    m_star: Option<Vec<usize>>,
    #[arg(long, default_value_t = RANK_TOL)]
    tol: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random model as JSON.
    GenModel {
        #[arg(long, value_enum, default_value = "hmm")]
        kind: ModelKind,
        #[arg(long, default_value_t = 4)]
        hidden: usize,
        #[arg(long, default_value_t = 10)]
        vocab: usize,
        #[arg(long, default_value_t = 1)]
        cells: usize,
        #[arg(long, default_value_t = 2)]
        mem: usize,
        #[arg(long, default_value_t = 4)]
        syntax: usize,
        #[arg(long, default_value_t = 6)]
        h_star_size: usize,
    },
    /// Run assumption checks on a model and print verdicts as JSON.
    Check {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        sets: Sets,
    },
    /// Build the head (and prompt) of one construction.
    Construct {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=4))]
        which: u8,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        sets: Sets,
    },
    /// Without --model, run the oracle-versus-enumeration battery; with it,
    /// print oracle conditionals as CSV `position,token,prob`.
    OracleTest {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        tokens: Option<Vec<usize>>,
        /// 1-based positions to mask; default each position in turn.
        #[arg(long, value_delimiter = ',')]
        masked: Option<Vec<usize>>,
    },
    /// Verify one construction against exact labels.
    Theorem {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=4))]
        which: u8,
    },
    /// Train heads and prompts on one model and report test accuracy.
    Tune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = Splits::PAPER.n_train)]
        n_train: usize,
        #[arg(long, default_value_t = Splits::PAPER.n_val)]
        n_val: usize,
        #[arg(long, default_value_t = Splits::PAPER.n_test)]
        n_test: usize,
        #[arg(long, default_value_t = Splits::PAPER.t_len)]
        t_len: usize,
    },
    /// Run a tuning sweep.
    Sweep {
        #[arg(value_enum)]
        which: Option<SweepKind>,
    },
    /// Run any experiment config.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn exec_for(jobs: Option<usize>) -> Result<Exec> {
    match jobs {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building thread pool")?;
            Ok(Exec::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(Exec::Sequential),
        None => Ok(Exec::Parallel),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let exec = exec_for(cli.jobs)?;
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenModel { kind, hidden, vocab, cells, mem, syntax, h_star_size } => {
            let (model, info) = match kind {
                ModelKind::Hmm => (Model::Hmm(random_hmm(seed, hidden, vocab)?), Value::Null),
                ModelKind::MemHmm => (Model::MemHmm(random_mem_hmm(seed, cells, mem, syntax, vocab)?), Value::Null),
                ModelKind::Degenerate => {
                    let f = build_degenerate_family(seed, hidden, vocab, h_star_size)?;
                    let info = json!({"h_star": f.h_star, "b_set": f.b_set, "q": f.task.weights.as_slice()});
                    (Model::Hmm(f.params), info)
                }
                ModelKind::Marker => {
                    let f = build_marker_mem_family(seed, cells, mem, syntax, vocab)?;
                    let info = json!({"j_star": f.j_star, "s_star": f.s_star, "target_state": f.target_state, "marker_state": f.marker_state, "marker_token": f.marker_token});
                    (Model::MemHmm(f.params), info)
                }
            };
            emit(cli.out.as_deref(), &model.to_json()?)?;
            if !info.is_null() {
                println!("{}", serde_json::to_string_pretty(&info)?);
            }
            Ok(true)
        }
        Command::Check { model, sets } => {
            let model = load_model(&model)?;
            let (verdicts, certs) = check_model(&model, &sets)?;
            let pass = verdicts.iter().all(|v| v["pass"] == Value::Bool(true));
            let doc = json!({"model_digest": model.digest()?, "pass": pass, "verdicts": verdicts, "certificates": certs});
            emit(cli.out.as_deref(), &serde_json::to_string_pretty(&doc)?)?;
            Ok(pass)
        }
        Command::Construct { which, model, sets } => {
            let model = load_model(&model)?;
            let doc = construct(which, &model, &sets)?;
            emit(cli.out.as_deref(), &serde_json::to_string_pretty(&doc)?)?;
            Ok(true)
        }
        Command::OracleTest { model: Some(path), tokens, masked } => {
            let model = load_model(&path)?;
            let tokens = tokens.ok_or_else(|| anyhow!("--tokens is required with --model"))?;
            let positions: Vec<Vec<usize>> = match masked {
                Some(m) => vec![m],
                None => (1..=tokens.len()).map(|i| vec![i]).collect(),
            };
            let mut csv = String::from("position,token,prob\n");
            for m in positions {
                let out = match &model {
                    Model::Hmm(p) => mlm_oracle(p, &tokens, &m)?,
                    Model::MemHmm(p) => mem_oracle(p, &tokens, &m)?,
                };
                for (pos, dist) in out.positions.iter().zip(&out.dists) {
                    for (z, pr) in dist.iter().enumerate() {
                        csv.push_str(&format!("{pos},{z},{pr:e}\n"));
                    }
                }
            }
            emit(cli.out.as_deref(), &csv)?;
            Ok(true)
        }
        Command::OracleTest { model: None, .. } => experiment(&cli.config, ExperimentKind::OracleTest, cli.seed, cli.trials, cli.out.as_deref(), exec),
        Command::Theorem { which } => {
            let kind = [ExperimentKind::Theorem1, ExperimentKind::Theorem2, ExperimentKind::Theorem3, ExperimentKind::Theorem4][usize::from(which) - 1];
            experiment(&cli.config, kind, cli.seed, cli.trials, cli.out.as_deref(), exec)
        }
        Command::Sweep { which } => {
            let kind = match which {
                Some(SweepKind::HeadVsPrompt) => Some(ExperimentKind::SweepHeadVsPrompt),
                Some(SweepKind::Memory) => Some(ExperimentKind::SweepMemory),
                None => None,
            };
            match (kind, &cli.config) {
                (Some(k), _) => experiment(&cli.config, k, cli.seed, cli.trials, cli.out.as_deref(), exec),
                (None, Some(_)) => config_experiment(&cli.config, None, cli.seed, cli.trials, cli.out.as_deref(), exec),
                (None, None) => bail!("sweep needs a kind or --config"),
            }
        }
        Command::Run => {
            if cli.config.is_none() {
                bail!("run needs --config");
            }
            config_experiment(&cli.config, None, cli.seed, cli.trials, cli.out.as_deref(), exec)
        }
        Command::Tune { model, n_train, n_val, n_test, t_len } => {
            let model = load_model(&model)?;
            let mut train: TrainConfig = match &cli.config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => TrainConfig::default(),
            };
            train.seed = seed;
            tune(&model, &train, Splits { n_train, n_val, n_test, t_len }, seed, cli.out.as_deref(), exec)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            let nl = if text.ends_with('\n') { "" } else { "\n" };
            match write!(out, "{text}{nl}") {
                // a closed pipe (e.g. `| head`) is not an error
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Model::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn need<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| anyhow!("--{flag} is required"))
}

fn span_json(c: &SpanCheck) -> Value {
    match &c.certificate {
        Some(cert) => json!({"tag": format!("{:?}", cert.tag), "digest": cert.digest()}),
        None => Value::Null,
    }
}

fn check_model(model: &Model, sets: &Sets) -> Result<(Vec<Value>, Vec<Value>)> {
    let mut verdicts = Vec::new();
    let mut certs = Vec::new();
    match model {
        Model::Hmm(p) => {
            verdicts.push(serde_json::to_value(check_nondegenerate_emissions(&p.emission, sets.tol).verdict)?);
            verdicts.push(serde_json::to_value(check_regularity(&p.transition, &p.start))?);
            verdicts.push(serde_json::to_value(check_stationary(&p.transition, &p.start, STATIONARY_TOL))?);
            if let (Some(q), Some(h), Some(b)) = (&sets.q, &sets.h_star, &sets.b_set) {
                let r = check_relaxed_vanilla(p, &DVector::from_vec(q.clone()), h, b, sets.tol);
                verdicts.push(serde_json::to_value(&r.verdict)?);
                if let Some(c) = &r.certificate {
                    certs.push(json!({"tag": format!("{:?}", c.tag), "digest": c.digest()}));
                }
            }
        }
        Model::MemHmm(p) => {
            verdicts.push(serde_json::to_value(check_regularity(&p.transition, &p.start))?);
            verdicts.push(serde_json::to_value(check_stationary(&p.transition, &p.start, STATIONARY_TOL))?);
            if let (Some(j), Some(s)) = (sets.j_star, &sets.s_star) {
                let r = check_recoverable(p, j, s, sets.tol);
                verdicts.push(serde_json::to_value(&r.verdict)?);
                certs.push(span_json(&r));
                if let Some(m) = &sets.m_star {
                    let r = check_recoverable_prompt(p, j, s, m, sets.tol);
                    verdicts.push(serde_json::to_value(&r.verdict)?);
                    certs.push(span_json(&r));
                }
            }
        }
    }
    certs.retain(|c| !c.is_null());
    Ok((verdicts, certs))
}

fn vanilla(model: &Model) -> Result<&HmmParams> {
    match model {
        Model::Hmm(p) => Ok(p),
        Model::MemHmm(_) => bail!("this construction needs a vanilla HMM"),
    }
}

fn memory(model: &Model) -> Result<&MemHmmParams> {
    match model {
        Model::MemHmm(p) => Ok(p),
        Model::Hmm(_) => bail!("this construction needs a memory-augmented HMM"),
    }
}

fn construct(which: u8, model: &Model, sets: &Sets) -> Result<Value> {
    let q = DVector::from_vec(need(&sets.q, "q")?);
    Ok(match which {
        1 => {
            let head = construct_linear_head_thm1(vanilla(model)?, &q, sets.tol)?;
            json!({"head": head.to_doc()})
        }
        2 => {
            let ph = construct_prompt_head_thm2(vanilla(model)?, &q, &need(&sets.h_star, "h-star")?, &need(&sets.b_set, "b-set")?, sets.tol)?;
            json!({"prompt": ph.prompt.to_doc(), "head": ph.head.to_doc(), "certificate_digest": ph.certificate.digest()})
        }
        3 => {
            let p = memory(model)?;
            let (j, s) = (need(&sets.j_star, "j-star")?, need(&sets.s_star, "s-star")?);
            let c = check_recoverable(p, j, &s, sets.tol);
            let cert = c.certificate.ok_or_else(|| anyhow!("assumption not satisfied: {}", c.verdict.detail))?;
            let head = construct_attention_thm3(p, &q, j, &s, &cert)?;
            json!({"head": head.to_doc(), "certificate_digest": cert.digest()})
        }
        _ => {
            let p = memory(model)?;
            let (j, s) = (need(&sets.j_star, "j-star")?, need(&sets.s_star, "s-star")?);
            let m_star: Vec<usize> = (0..q.len()).filter(|&v| q[v] != 0.0).collect();
            let c = check_recoverable_prompt(p, j, &s, &m_star, sets.tol);
            let cert = c.certificate.ok_or_else(|| anyhow!("assumption not satisfied: {}", c.verdict.detail))?;
            let pa = construct_prompt_attention_thm4(p, &q, j, &s, &cert)?;
            json!({"prompt": pa.prompt.to_doc(), "head": pa.head.to_doc(), "certificate_digest": cert.digest()})
        }
    })
}

fn load_config(path: &Option<PathBuf>, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let cfg = ExperimentConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?;
            if let Some(k) = kind {
                if cfg.kind != k {
                    bail!("config kind {} does not match command ({k})", cfg.kind);
                }
            }
            Ok(cfg)
        }
        None => Ok(ExperimentConfig::new(kind.ok_or_else(|| anyhow!("--config is required"))?)),
    }
}

fn experiment(config: &Option<PathBuf>, kind: ExperimentKind, seed: Option<u64>, trials: Option<usize>, out: Option<&Path>, exec: Exec) -> Result<bool> {
    config_experiment(config, Some(kind), seed, trials, out, exec)
}

fn config_experiment(config: &Option<PathBuf>, kind: Option<ExperimentKind>, seed: Option<u64>, trials: Option<usize>, out: Option<&Path>, exec: Exec) -> Result<bool> {
    let mut cfg = load_config(config, kind)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if trials.is_some() {
        cfg.trials = trials;
    }
    let report = run_experiment(&cfg, exec)?;
    finish(&report, out.or(cfg.out_dir.as_deref()))
}

fn finish(report: &Report, out: Option<&Path>) -> Result<bool> {
    for line in report.lines() {
        println!("{line}");
    }
    for g in &report.groups {
        println!("{} {} n={} mean={:.6} ci=[{:.6}, {:.6}]", g.group, g.arm, g.n, g.mean, g.ci_low, g.ci_high);
    }
    if let Some(dir) = out {
        write_report(report, dir)?;
        println!("wrote {}", dir.display());
    }
    Ok(report.pass)
}

fn tune(model: &Model, train: &TrainConfig, splits: Splits, seed: u64, out: Option<&Path>, exec: Exec) -> Result<bool> {
    let result = match model {
        Model::Hmm(p) => {
            let task = make_task(seed, p.n_hidden, TASK_NONZEROS.min(p.n_hidden))?;
            let ds = gen_dataset(Source::Vanilla { params: p, target: VanillaTarget::MaskedFirst }, &task, splits, seed, exec)?;
            let fit = train_prompt(exec, p, &ds.train, train)?;
            let test = prompt_data(exec, p, &ds.test)?;
            let base = prompt_features(exec, &test, &[]);
            let entries: Vec<DVector<f64>> = fit.prompts.iter().map(|q| q.entries.clone()).collect();
            let prompted = prompt_features(exec, &test, &entries);
            let acc = |h, fs: &[DVector<f64>]| fs.iter().zip(&test.labels).filter(|(f, y)| eval_linear(h, f) == **y).count() as f64 / fs.len() as f64;
            json!({
                "balance": ds.balance,
                "head_only_accuracy": acc(&fit.head_only.head, &base),
                "prompt_accuracy": acc(&fit.head, &prompted),
                "head_only": fit.head_only.head.to_doc(),
                "head": fit.head.to_doc(),
                "prompts": fit.prompts.iter().map(|q| q.to_doc()).collect::<Vec<_>>(),
                "losses": fit.losses,
            })
        }
        Model::MemHmm(p) => {
            let task = make_task(seed, p.mem_size, TASK_NONZEROS.min(p.mem_size))?.with_cell(0);
            let ds = gen_dataset(Source::Memory { params: p, target: MemoryTarget::MaskedFirst }, &task, splits, seed, exec)?;
            let fit = train_attention_head(exec, p, &ds.train, &ds.val, train)?;
            let mut hits = 0;
            for e in &ds.test {
                let inp = attention_features(p, &e.tokens)?;
                hits += usize::from(eval_attention(&fit.head, &inp.outputs, &inp.values)?.label == e.label);
            }
            json!({
                "balance": ds.balance,
                "attention_accuracy": hits as f64 / ds.test.len() as f64,
                "validation_accuracy": fit.val_accuracy,
                "selected": fit.selected,
                "head": fit.head.to_doc(),
                "losses": fit.losses,
            })
        }
    };
    let text = serde_json::to_string_pretty(&result)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("fit.json"), text + "\n").context("writing fit.json")?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in result["losses"].as_array().into_iter().flatten().enumerate() {
                csv.push_str(&format!("{i},{:e}\n", l.as_f64().unwrap_or(f64::NAN)));
            }
            fs::write(dir.join("losses.csv"), csv).context("writing losses.csv")?;
        }
        None => {
            for key in ["balance", "head_only_accuracy", "prompt_accuracy", "attention_accuracy"] {
                if let Some(v) = result.get(key) {
                    println!("{key} {v}");
                }
            }
        }
    }
    Ok(true)
}
