//! `advlab` command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning                                      |
//! |------|----------------------------------------------|
//! | 0    | success                                      |
//! | 2    | usage error (unknown subcommand, bad flags)  |
//! | 3    | configuration error                          |
//! | 4    | data error (dataset, checkpoint, file I/O)   |
//! | 5    | compute error (divergence, unstable probe)   |

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use advlab::attacks::{attack, AttackConfig, AttackKind};
use advlab::config::RunConfig;
use advlab::detect::{analyze, probe};
use advlab::experiments::{
    correctly_classified, countermeasure_study, minimality_ratios, resilience_matrix, synergy_study,
};
use advlab::trainer::{distill, train, train_augmented, train_robust, Norm, TrainReport};
use advlab::{Checkpoint, Error, ErrorCategory};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "advlab", version, about = "Adversarial-input crafting, hardening and tampering analysis")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Run seed (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Trained checkpoint.
    #[arg(long, short)]
    model: PathBuf,
    /// JSON array holding one input (pixels in [-1, 1]).
    #[arg(long, conflicts_with = "index")]
    input: Option<PathBuf>,
    /// Index into the configured test split.
    #[arg(long)]
    index: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the configured data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Maximum epochs (overrides the configuration).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Craft an adversarial input.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: InputArgs,
        /// G, H, P or C.
        #[arg(long)]
        kind: AttackKind,
        /// Target class (untargeted when omitted).
        #[arg(long)]
        target: Option<usize>,
        /// Budget (δ for G/H, flipped components for P/C).
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Train a hardened model.
    Defend {
        #[command(subcommand)]
        scheme: Defense,
    },
    /// Estimate the probe of one input.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Full tampering analysis of one input.
    Detect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Evaluation studies.
    Bench {
        #[command(subcommand)]
        study: Study,
    },
}

#[derive(Subcommand)]
enum Defense {
    /// Adversarial augmentation.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "G")]
        attack: AttackKind,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Worst-case perturbation training.
    Robust {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "linf")]
        norm: Norm,
        #[arg(long, default_value_t = 0.2)]
        budget: f64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Teacher/student distillation.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 40.0)]
        temperature: f64,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Subcommand)]
enum Study {
    /// Minimality-ratio distributions for every configured attack.
    Ratios {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        model: PathBuf,
    },
    /// Attack success rates against several models.
    Resilience {
        #[command(flatten)]
        common: Common,
        #[arg(long = "model", short, required = true)]
        models: Vec<PathBuf>,
    },
    /// Probe-raising countermeasures.
    Counter {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        model: PathBuf,
    },
    /// Detection on a distilled model.
    Synergy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        distilled: PathBuf,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.category() {
            ErrorCategory::Config => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Compute => 5,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn data_error(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 4,
        message: format!("{}: {e}", path.display()),
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn load_config(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.probe.seed = s;
    }
    Ok(cfg)
}

/// Writes `text` under the output directory and returns the path.
fn write(cfg: &RunConfig, name: &str, text: &str) -> Outcome<PathBuf> {
    std::fs::create_dir_all(&cfg.output).map_err(|e| data_error(&cfg.output, e))?;
    let path = cfg.output.join(name);
    std::fs::write(&path, text).map_err(|e| data_error(&path, e))?;
    Ok(path)
}

/// Timing lives in a sidecar so result files stay byte-reproducible.
fn write_meta(cfg: &RunConfig, command: &str, started: Instant) -> Outcome {
    let meta = json!({ "command": command, "elapsed_seconds": started.elapsed().as_secs_f64() });
    write(cfg, "run-meta.json", &format!("{meta}\n")).map(|_| ())
}

fn load_model(path: &Path) -> Outcome<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

/// The input selected by `--input` or `--index`, with its label when known.
fn load_input(cfg: &RunConfig, args: &InputArgs, expected: usize) -> Outcome<(Vec<f64>, Option<usize>)> {
    let (x, label) = match (&args.input, args.index) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| data_error(p, e))?;
            let v: Vec<f64> = serde_json::from_str(&text).map_err(|e| data_error(p, e))?;
            (v, None)
        }
        (None, Some(i)) => {
            let (_, test) = cfg.datasets()?;
            if i >= test.len() {
                return Err(Error::InvalidArgument(format!("index {i} with {} test inputs", test.len())).into());
            }
            (test.example(i).to_vec(), Some(test.labels[i]))
        }
        (None, None) => return Err(Error::InvalidArgument("pass --input or --index".into()).into()),
    };
    if x.len() != expected {
        return Err(Error::Shape(format!("input has {} values, model expects {expected}", x.len())).into());
    }
    Ok((x, label))
}

fn save_training(cfg: &RunConfig, ckpt: &Checkpoint, report: &TrainReport, name: &str) -> Outcome {
    std::fs::create_dir_all(&cfg.output).map_err(|e| data_error(&cfg.output, e))?;
    let path = cfg.output.join(format!("{name}.json"));
    ckpt.save(&path)?;
    write(cfg, &format!("{name}-train.jsonl"), &report.to_jsonl())?;
    println!("{}", path.display());
    Ok(())
}

fn with_epochs(cfg: &mut RunConfig, epochs: Option<usize>) {
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
    }
}

fn run(cli: Cli) -> Outcome {
    let started = Instant::now();
    match cli.command {
        Command::Train { common, epochs } => {
            let mut cfg = load_config(&common)?;
            with_epochs(&mut cfg, epochs);
            let (train_set, _) = cfg.datasets()?;
            let (ckpt, report) = train(&cfg.network()?, &train_set, &cfg.train)?;
            save_training(&cfg, &ckpt, &report, "ckpt")?;
            write_meta(&cfg, "train", started)
        }
        Command::Attack {
            common,
            input,
            kind,
            target,
            budget,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = load_model(&input.model)?;
            let (x, _) = load_input(&cfg, &input, ckpt.spec.input_len())?;
            let acfg = AttackConfig {
                target,
                budget,
                seed: cfg.seed,
                ..AttackConfig::new(kind)
            };
            let r = attack(&ckpt, &x, &acfg)?;
            let record = serde_json::to_string(&r).expect("results serialize");
            write(&cfg, "attack.jsonl", &format!("{record}\n"))?;
            let adv = serde_json::to_string(&r.adversarial).expect("inputs serialize");
            let path = write(&cfg, "adversarial.json", &adv)?;
            println!("{record}");
            println!("{}", path.display());
            write_meta(&cfg, "attack", started)
        }
        Command::Defend { scheme } => {
            let (common, name) = match &scheme {
                Defense::Augment { common, .. } => (common, "augmented"),
                Defense::Robust { common, .. } => (common, "robust"),
                Defense::Distill { common, .. } => (common, "distilled"),
            };
            let mut cfg = load_config(common)?;
            let (train_set, _) = cfg.datasets()?;
            match scheme {
                Defense::Augment { attack, alpha, epochs, .. } => {
                    with_epochs(&mut cfg, epochs);
                    let (c, r) = train_augmented(&cfg.network()?, &train_set, &cfg.train, attack, alpha)?;
                    save_training(&cfg, &c, &r, name)?;
                }
                Defense::Robust { norm, budget, epochs, .. } => {
                    with_epochs(&mut cfg, epochs);
                    let (c, r) = train_robust(&cfg.network()?, &train_set, &cfg.train, norm, budget)?;
                    save_training(&cfg, &c, &r, name)?;
                }
                Defense::Distill { temperature, epochs, .. } => {
                    with_epochs(&mut cfg, epochs);
                    let (teacher, student, r) = distill(&cfg.network()?, &train_set, &cfg.train, temperature)?;
                    teacher.save(cfg.output.join("teacher.json"))?;
                    save_training(&cfg, &student, &r, name)?;
                }
            }
            write_meta(&cfg, &format!("defend {name}"), started)
        }
        Command::Probe { common, input } => {
            let cfg = load_config(&common)?;
            let ckpt = load_model(&input.model)?;
            let (x, _) = load_input(&cfg, &input, ckpt.spec.input_len())?;
            let p = probe(&ckpt, &x, &cfg.probe)?;
            let record = serde_json::to_string(&p).expect("results serialize");
            write(&cfg, "probe.jsonl", &format!("{record}\n"))?;
            println!("{record}");
            write_meta(&cfg, "probe", started)
        }
        Command::Detect { common, input } => {
            let cfg = load_config(&common)?;
            let ckpt = load_model(&input.model)?;
            let (x, label) = load_input(&cfg, &input, ckpt.spec.input_len())?;
            let report = analyze(&ckpt, &x, &cfg.probe)?;
            let mut value = serde_json::to_value(&report).expect("reports serialize");
            value["input"] = json!(input.index.map_or_else(
                || input.input.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                |i| format!("test:{i}")
            ));
            value["label"] = json!(label);
            let record = value.to_string();
            write(&cfg, "detect.jsonl", &format!("{record}\n"))?;
            println!("{record}");
            write_meta(&cfg, "detect", started)
        }
        Command::Bench { study } => bench(study, started),
    }
}

fn pool(cfg: &RunConfig, ckpt: &Checkpoint, test: &advlab::data::Dataset) -> Vec<usize> {
    let mut idx = correctly_classified(ckpt, test);
    idx.truncate(cfg.study.pool);
    idx
}

fn bench(study: Study, started: Instant) -> Outcome {
    match study {
        Study::Ratios { common, model } => {
            let cfg = load_config(&common)?;
            let ckpt = load_model(&model)?;
            let (train_set, test) = cfg.datasets()?;
            let idx = pool(&cfg, &ckpt, &test);
            let mut summary = String::from("attack  n    nearest-median  return-median  return<=0.3\n");
            let mut records = String::new();
            for a in &cfg.attacks {
                let (near, back, recs) = minimality_ratios(&ckpt, &train_set, &test, &idx, a, cfg.seed)?;
                for r in &recs {
                    records.push_str(&serde_json::to_string(r).expect("records serialize"));
                    records.push('\n');
                }
                write(&cfg, &format!("ratios-{}-nearest.csv", a.kind), &near.to_csv())?;
                write(&cfg, &format!("ratios-{}-return.csv", a.kind), &back.to_csv())?;
                summary.push_str(&format!(
                    "{:<7} {:<4} {:<15.4} {:<14.4} {:.3}\n",
                    a.kind.to_string(),
                    recs.len(),
                    near.median().unwrap_or(f64::NAN),
                    back.median().unwrap_or(f64::NAN),
                    back.fraction_within(0.0, 0.3).unwrap_or(f64::NAN)
                ));
            }
            write(&cfg, "ratios.jsonl", &records)?;
            write(&cfg, "ratios.txt", &summary)?;
            print!("{summary}");
            write_meta(&cfg, "bench ratios", started)
        }
        Study::Resilience { common, models } => {
            let cfg = load_config(&common)?;
            let ckpts = models.iter().map(|p| load_model(p)).collect::<Outcome<Vec<_>>>()?;
            let (_, test) = cfg.datasets()?;
            let test = test.take(cfg.study.pool);
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            let table = resilience_matrix(&refs, &cfg.attacks, &test, cfg.seed)?;
            let mut summary = format!("{:<32}", "model");
            for a in &cfg.attacks {
                summary.push_str(&format!("{:>9}", format!("{}-Attack", a.kind)));
            }
            summary.push('\n');
            let mut records = String::new();
            for (path, row) in models.iter().zip(&table) {
                summary.push_str(&format!("{:<32}", path.display().to_string()));
                for (a, v) in cfg.attacks.iter().zip(row) {
                    summary.push_str(&format!("{:>8.1}%", 100.0 * v));
                    records.push_str(&format!(
                        "{}\n",
                        json!({ "model": path.display().to_string(), "attack": a.kind, "success_rate": v })
                    ));
                }
                summary.push('\n');
            }
            write(&cfg, "resilience.jsonl", &records)?;
            write(&cfg, "resilience.txt", &summary)?;
            print!("{summary}");
            write_meta(&cfg, "bench resilience", started)
        }
        Study::Counter { common, model } => {
            let cfg = load_config(&common)?;
            let ckpt = load_model(&model)?;
            let (_, test) = cfg.datasets()?;
            let mut idx = pool(&cfg, &ckpt, &test);
            idx.truncate(cfg.study.countermeasure);
            let out = countermeasure_study(&ckpt, &test, &idx, &cfg.attacks, &cfg.probe, 1.0, cfg.seed)?;
            let mut summary = String::from("attack  attempts  amplified-fail  random-fail  amplified-median  random-median\n");
            let mut records = String::new();
            for o in &out {
                records.push_str(&serde_json::to_string(o).expect("records serialize"));
                records.push('\n');
                write(&cfg, &format!("counter-{}-amplified.csv", o.kind), &o.amplified.to_csv())?;
                write(&cfg, &format!("counter-{}-random.csv", o.kind), &o.random.to_csv())?;
                summary.push_str(&format!(
                    "{:<7} {:<9} {:<15.3} {:<12.3} {:<17.3} {:.3}\n",
                    o.kind.to_string(),
                    o.attempts,
                    o.amplified_failure_rate().unwrap_or(f64::NAN),
                    o.random_failure_rate().unwrap_or(f64::NAN),
                    o.amplified.median().unwrap_or(f64::NAN),
                    o.random.median().unwrap_or(f64::NAN)
                ));
            }
            write(&cfg, "counter.jsonl", &records)?;
            write(&cfg, "counter.txt", &summary)?;
            print!("{summary}");
            write_meta(&cfg, "bench counter", started)
        }
        Study::Synergy {
            common,
            original,
            distilled,
        } => {
            let cfg = load_config(&common)?;
            let orig = load_model(&original)?;
            let dist = load_model(&distilled)?;
            let (_, test) = cfg.datasets()?;
            let idx = pool(&cfg, &orig, &test);
            let out = synergy_study(&orig, &dist, &test, &idx, &cfg.probe, cfg.seed)?;
            let rate = |r: advlab::Result<f64>| r.map_or("undefined".to_string(), |v| format!("{:.1}%", 100.0 * v));
            let summary = format!(
                "defended by distillation   {} of {} flagged ({})\nuncaptured by distillation {} of {} flagged ({})\n",
                out.defended_flagged,
                out.defended,
                rate(out.defended_rate()),
                out.penetrating_flagged,
                out.penetrating,
                rate(out.penetrating_rate())
            );
            write(&cfg, "synergy.jsonl", &format!("{}\n", serde_json::to_string(&out).expect("records serialize")))?;
            write(&cfg, "synergy.txt", &summary)?;
            print!("{summary}");
            write_meta(&cfg, "bench synergy", started)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
