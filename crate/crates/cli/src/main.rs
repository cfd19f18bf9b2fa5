use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tokalign::harness::{
    gen_synthetic, run_ablation, run_eval, run_grad_suite, statistics, train, DatasetBundle,
    EvalReport, Settings, SweepSpec,
};
use tokalign::model::{load_checkpoint, save_checkpoint, Model, PromptState};
use tokalign::stats::{load_stats, save_stats, SourceStats};
use tokalign::tta::{adapt_and_predict, Mode};
use tokalign::Error;

#[derive(Parser, Debug)]
#[command(
    name = "tokalign",
    version,
    about = "Test-time prompt adaptation with token-distribution alignment"
)]
struct Cli {
    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; also the default location of inputs from earlier steps.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra key=value assignments, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Inputs {
    /// Checkpoint [default: <out>/model.ckpt].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Source statistics file.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Dataset directory [default: <out>/data/test].
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic source splits and the shifted test split.
    GenData,
    /// Train the backbone, then fit the source prompts.
    Pretrain {
        /// Training set [default: <out>/data/train].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compute source token statistics with the prompt-free backbone.
    ComputeStats {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Source set [default: <out>/data/train].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adapt to one test sample and print the losses of every step.
    Adapt {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Adapt to every test sample and write a report.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        /// Only score the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Sweep one config axis, e.g. `--sweep beta=0,1,10,100`.
    Ablate {
        #[command(flatten)]
        inputs: Inputs,
        /// One axis and its values, `key=v1,v2,...`.
        #[arg(long)]
        sweep: String,
        /// Only score the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Check analytic against finite-difference gradients on toy episodes.
    GradCheck {
        #[arg(long, default_value_t = 3)]
        episodes: usize,
    },
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Contract(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn settings(cli: &Cli) -> Result<Settings, Failure> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        s.apply_text(&text)?;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    for a in &cli.set {
        s.apply(a)?;
    }
    Ok(s)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_model(cli: &Cli, path: &Option<PathBuf>) -> Result<(Model, PromptState), Failure> {
    let path = path.clone().unwrap_or_else(|| cli.out.join("model.ckpt"));
    let (model, prompts) =
        load_checkpoint(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let prompts = match prompts {
        Some(p) => p,
        None => model.default_prompts(0)?,
    };
    Ok((model, prompts))
}

fn load_data(path: &Path) -> Result<DatasetBundle, Failure> {
    DatasetBundle::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Loads the model, statistics and dataset; `need_stats` makes a missing
/// `--stats` with `beta > 0` an error.
fn load_inputs(
    cli: &Cli,
    inputs: &Inputs,
    s: &Settings,
) -> Result<(Model, PromptState, Option<SourceStats>, DatasetBundle), Failure> {
    let (model, prompts) = load_model(cli, &inputs.model)?;
    let stats = match &inputs.stats {
        Some(p) => Some(load_stats(p, &model.backbone_hash()).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?),
        None if s.tta.beta > 0.0 => {
            return Err(Failure::Data(format!(
                "beta = {} needs source statistics; pass --stats (or set beta=0 for entropy-only adaptation)",
                s.tta.beta
            )))
        }
        None => None,
    };
    let data = load_data(
        &inputs
            .data
            .clone()
            .unwrap_or_else(|| cli.out.join("data/test")),
    )?;
    Ok((model, prompts, stats, data))
}

fn run(cli: &Cli) -> Outcome {
    let s = settings(cli)?;
    fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::Data(format!("{}: {e}", cli.out.display())))?;
    match &cli.command {
        Command::GenData => {
            s.synth.validate()?;
            let d = gen_synthetic(&s.synth, s.seed)?;
            for (name, b) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
                let dir = cli.out.join("data").join(name);
                b.write(&dir)?;
                println!("{name}: {} samples -> {}", b.len(), dir.display());
            }
        }
        Command::Pretrain { data } => {
            let train_set = load_data(&data.clone().unwrap_or_else(|| cli.out.join("data/train")))?;
            let t = train(&s, &train_set)?;
            let path = cli.out.join("model.ckpt");
            save_checkpoint(&path, &t.model, Some(&t.prompts))?;
            for (e, (l, a)) in t
                .backbone_log
                .epoch_loss
                .iter()
                .zip(&t.backbone_log.epoch_accuracy)
                .enumerate()
            {
                println!("backbone epoch {:>3}  loss {l:.5}  acc {a:.4}", e + 1);
            }
            for (e, (l, a)) in t
                .prompt_log
                .epoch_loss
                .iter()
                .zip(&t.prompt_log.epoch_accuracy)
                .enumerate()
            {
                println!("prompts  epoch {:>3}  loss {l:.5}  acc {a:.4}", e + 1);
            }
            write_json(
                &cli.out.join("pretrain.json"),
                &serde_json::json!({ "backbone": t.backbone_log, "prompts": t.prompt_log }),
            )?;
            println!(
                "model hash {}\ncheckpoint -> {}",
                t.model.backbone_hash(),
                path.display()
            );
        }
        Command::ComputeStats { model, data } => {
            let (m, _) = load_model(cli, model)?;
            let src = load_data(&data.clone().unwrap_or_else(|| cli.out.join("data/train")))?;
            let st = statistics(&s, &m, &src)?;
            let path = cli.out.join("source.stats");
            save_stats(&st, &path)?;
            fs::write(cli.out.join("source.stats.json"), st.to_json())
                .map_err(|e| Failure::Data(e.to_string()))?;
            println!(
                "{} layers x {} channels, orders up to {}, {} images -> {}",
                st.n_layers(),
                st.dim(),
                st.max_order,
                st.sample_count,
                path.display()
            );
        }
        Command::Adapt { inputs, index } => {
            let (model, mut prompts, stats, data) = load_inputs(cli, inputs, &s)?;
            let img = data.images.get(*index).ok_or_else(|| {
                Failure::Usage(format!(
                    "index {index} out of range ({} samples)",
                    data.len()
                ))
            })?;
            let cfg = s.tta_config();
            let r = adapt_and_predict(img, &model, &mut prompts, stats.as_ref(), &cfg)?;
            for (i, st) in r.steps.iter().enumerate() {
                let align = st.align.map_or("-".into(), |a| format!("{a:.6}"));
                println!(
                    "step {:>2}  entropy {:.6}  align {align}  final {:.6}  kept {:?}",
                    i + 1,
                    st.entropy,
                    st.total,
                    st.kept
                );
            }
            let names = &data.meta.class_names;
            println!(
                "prediction {} ({})  label {} ({})",
                r.prediction, names[r.prediction], data.labels[*index], names[data.labels[*index]]
            );
            write_json(&cli.out.join("adapt.json"), &r)?;
        }
        Command::Eval { inputs, limit } => {
            let (model, prompts, stats, mut data) = load_inputs(cli, inputs, &s)?;
            if let Some(n) = limit {
                data = data.truncate(*n);
            }
            let cfg = s.tta_config();
            let rep = run_eval(&model, &prompts, stats.as_ref(), &data, &cfg)?;
            let dir = cli.out.join("eval");
            rep.write(&dir)?;
            print_report(&rep);
            println!("report -> {}", dir.display());
        }
        Command::Ablate {
            inputs,
            sweep,
            limit,
        } => {
            let (model, prompts, stats, mut data) = load_inputs(cli, inputs, &s)?;
            if let Some(n) = limit {
                data = data.truncate(*n);
            }
            let spec = SweepSpec::parse(sweep)?;
            let mut base = s.tta_config();
            if spec.axes.iter().any(|(a, _)| a == "prompt_reg_lambda") {
                base.mode = Mode::Continuous;
            }
            let table = run_ablation(&model, &prompts, stats.as_ref(), &data, &base, &spec)?;
            let dir = cli.out.join("ablate");
            table.write(&dir)?;
            print!("{}", table.render());
            println!("tables -> {}", dir.display());
        }
        Command::GradCheck { episodes } => {
            let r = run_grad_suite(*episodes, s.seed)?;
            for c in &r.checks {
                println!(
                    "episode {:>2}  {:<12} max rel error {:.3e}",
                    c.episode, c.term, c.max_rel_error
                );
            }
            println!("max relative error {:.3e}", r.max_rel_error);
            write_json(&cli.out.join("grad_check.json"), &r)?;
            if !r.passed() {
                return Err(Failure::Data(format!(
                    "gradient check failed: {:.3e} >= 1e-4",
                    r.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
    println!("dataset    {}", r.dataset_id);
    println!("samples    {}", r.n_samples);
    println!("top-1      {:.4}", r.accuracy);
    println!("entropy    {}", opt(r.mean_entropy));
    println!("align      {}", opt(r.mean_align));
    println!("final      {}", opt(r.mean_total));
    println!("sec/sample {:.4}", r.timing.mean_latency());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
