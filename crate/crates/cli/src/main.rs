use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use streammem::config::RunConfig;
use streammem::error::{Error, Result};
use streammem::eval::{evaluate, EvalSummary};
use streammem::lm::Decoding;
use streammem::model::{SelectionStrategy, StreamModel};
use streammem::pipeline::{budget_report, budget_table, rebuild, run_stage1, run_stage2, test_split, train_split};
use streammem::streaming::MemoryBank;
use streammem::synth::{read_dataset, read_stream, write_dataset};
use streammem::tokenizer::{detokenize, tokenize};
use streammem::train::EpochLog;

#[derive(Parser)]
#[command(name = "streammem", version, about = "Streaming memory encoder for long feature streams")]
struct Cli {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set model.selection.top_v=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and held-out datasets.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a training stage.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
    },
    /// Encode one stream into a memory bank.
    Encode {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Answer a question against a persisted bank.
    Ask {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "learned")]
        strategy: StrategyArg,
    },
    /// Grounding and answer evaluation on a dataset.
    Eval {
        /// Dataset index; defaults to the held-out split in the data dir.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-question records (JSON lines).
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one config key.
    Ablate {
        /// Named axis or any dotted config key.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; named axes have defaults.
        #[arg(long)]
        values: Option<String>,
    },
    /// Reader token counts and encode/answer wall times versus K.
    ReportBudget {
        #[arg(long, value_delimiter = ',', default_values_t = vec![16, 32, 64])]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Stage1,
    Stage2,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Learned,
    LastV,
}

impl From<StrategyArg> for SelectionStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Learned => SelectionStrategy::Learned,
            StrategyArg::LastV => SelectionStrategy::LastV,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load_with_overrides(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, out.as_deref().unwrap_or(&cfg.paths.data_dir)),
        Command::Train { stage } => train(&cfg, stage),
        Command::Encode { video, out, checkpoint } => encode(&cfg, &video, &out, checkpoint.as_deref()),
        Command::Ask {
            bank,
            question,
            checkpoint,
            strategy,
        } => ask(&cfg, &bank, &question, checkpoint.as_deref(), strategy.into()),
        Command::Eval {
            dataset,
            checkpoint,
            records,
        } => eval(&cfg, dataset.as_deref(), checkpoint.as_deref(), records.as_deref()),
        Command::Ablate { axis, values } => ablate(&cfg, &axis, values.as_deref()),
        Command::ReportBudget { ks, repeats, checkpoint } => report_budget(&cfg, &ks, repeats, checkpoint.as_deref()),
    }
}

/// Writes the effective config next to an artifact.
fn echo_config(cfg: &RunConfig, artifact: &Path) -> Result<()> {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".config.toml");
    fs::write(PathBuf::from(name), cfg.to_toml())?;
    Ok(())
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train = train_split(cfg)?;
    let test = test_split(cfg)?;
    let train_index = write_dataset(out, "train", &train)?;
    let test_index = write_dataset(out, "test", &test)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    for (split, index, videos) in [("train", &train_index, &train), ("test", &test_index, &test)] {
        print_json(json!({
            "record": "dataset",
            "split": split,
            "index": index.display().to_string(),
            "streams": videos.len(),
            "questions": videos.iter().map(|v| v.qa.len()).sum::<usize>(),
            "config_digest": cfg.digest(),
        }));
    }
    Ok(())
}

fn stage1_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("stage1.vstt")
}

fn stage2_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("stage2.vstt")
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<StreamModel> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} not found", path.display())));
    }
    StreamModel::load(cfg.model.clone(), path)
}

fn epoch_logger(cfg: &RunConfig) -> impl FnMut(&EpochLog, &StreamModel) {
    let digest = cfg.digest();
    move |e: &EpochLog, _: &StreamModel| {
        eprintln!(
            "{}",
            json!({
                "record": "epoch",
                "stage": format!("{:?}", e.stage),
                "epoch": e.epoch,
                "mean_loss": e.mean_loss,
                "steps": e.steps,
                "config_digest": digest,
            })
        );
    }
}

fn train(cfg: &RunConfig, stage: StageArg) -> Result<()> {
    fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    let mut log = epoch_logger(cfg);
    if matches!(stage, StageArg::Stage1 | StageArg::All) {
        let model = run_stage1(cfg, &mut log)?;
        let path = stage1_path(cfg);
        model.save(&path)?;
        echo_config(cfg, &path)?;
        print_json(json!({"record": "checkpoint", "stage": "stage1", "path": path.display().to_string()}));
    }
    if matches!(stage, StageArg::Stage2 | StageArg::All) {
        let mut model = load_model(cfg, &stage1_path(cfg))?;
        let index = cfg.paths.data_dir.join("train.jsonl");
        let videos = read_dataset(&index)?;
        run_stage2(&mut model, cfg, &videos, &mut log)?;
        let path = stage2_path(cfg);
        model.save(&path)?;
        echo_config(cfg, &path)?;
        print_json(json!({"record": "checkpoint", "stage": "stage2", "path": path.display().to_string()}));
    }
    Ok(())
}

fn encode(cfg: &RunConfig, video: &Path, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let model = load_model(cfg, checkpoint.unwrap_or(&stage2_path(cfg)))?;
    let stream = read_stream(video)?;
    let bank = model.encode(&stream)?;
    bank.save(out)?;
    echo_config(cfg, out)?;
    print_json(json!({
        "record": "bank",
        "path": out.display().to_string(),
        "clips": bank.len(),
        "memory_rows": bank.memory_rows(),
        "model_dim": bank.model_dim,
        "fingerprint": format!("{:016x}", bank.fingerprint),
    }));
    Ok(())
}

fn ask(cfg: &RunConfig, bank: &Path, question: &str, checkpoint: Option<&Path>, strategy: SelectionStrategy) -> Result<()> {
    let model = load_model(cfg, checkpoint.unwrap_or(&stage2_path(cfg)))?;
    let bank = MemoryBank::load(bank)?;
    if bank.fingerprint != model.encoder.fingerprint(&model.store) {
        return Err(Error::Checkpoint("bank was encoded by a different model".into()));
    }
    let q = tokenize(question).map_err(|e| Error::Data(e.to_string()))?;
    let ans = model.answer(&bank, &q, &Decoding::Greedy, strategy)?;
    let selected: Vec<usize> = ans.selection.indices().iter().map(|&i| bank.entries[i].index).collect();
    print_json(json!({
        "record": "answer",
        "question": question,
        "answer": detokenize(&ans.tokens)?,
        "answer_tokens": ans.tokens,
        "selected_clips": selected,
        "similarities": ans.selection.similarities,
        "reader_input_tokens": ans.reader_input_len,
        "config_digest": cfg.digest(),
    }));
    Ok(())
}

fn summary_json(label: &str, value: &str, s: &EvalSummary) -> serde_json::Value {
    json!({"record": "summary", "axis": label, "value": value, "summary": s})
}

fn eval(cfg: &RunConfig, dataset: Option<&Path>, checkpoint: Option<&Path>, records_out: Option<&Path>) -> Result<()> {
    let model = load_model(cfg, checkpoint.unwrap_or(&stage2_path(cfg)))?;
    let index = dataset.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.data_dir.join("test.jsonl"));
    let videos = read_dataset(&index)?;
    let (records, summary) = evaluate(&model, &videos, &cfg.eval_options())?;
    if let Some(path) = records_out {
        let mut f = fs::File::create(path)?;
        for r in &records {
            writeln!(f, "{}", serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?)?;
        }
        echo_config(cfg, path)?;
    }
    eprint!("{}", summary.table());
    print_json(json!({"record": "summary", "summary": summary, "config_digest": cfg.digest()}));
    Ok(())
}

/// Named axes and their default sweep values.
fn axis_key(axis: &str, cfg: &RunConfig) -> (String, Vec<String>) {
    let layers = cfg.model.encoder.num_layers;
    let quarter = (layers / 4).max(1);
    match axis {
        "tap_layer" => (
            "model.encoder.tap_layer".into(),
            vec![quarter.to_string(), (layers / 2).max(1).to_string(), layers.to_string()],
        ),
        "top_v" => ("model.selection.top_v".into(), vec!["1".into(), "2".into(), "4".into()]),
        "summarization" => ("model.summarization_per_frame".into(), vec!["1".into(), "2".into(), "4".into()]),
        "time_prompts" => (
            "model.time_prompts".into(),
            ["none", "clip", "memory", "clip_and_memory"].map(|s| format!("\"{s}\"")).to_vec(),
        ),
        "similarity" => ("model.selection.similarity".into(), vec!["\"cosine\"".into(), "\"dot\"".into()]),
        "regime" => (
            "stage2.regime".into(),
            ["fully_weak", "warmup", "mixed", "warmup_mixed"].map(|s| format!("\"{s}\"")).to_vec(),
        ),
        "memory" => ("model.use_memory".into(), vec!["true".into(), "false".into()]),
        "selection" => ("eval.strategy".into(), vec!["\"learned\"".into(), "\"last_v\"".into()]),
        other => (other.to_string(), Vec::new()),
    }
}

fn ablate(cfg: &RunConfig, axis: &str, values: Option<&str>) -> Result<()> {
    let (key, defaults) = axis_key(axis, cfg);
    let values: Vec<String> = match values {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        None if !defaults.is_empty() => defaults,
        None => return Err(Error::Config { field: "ablate.values".into(), message: format!("axis `{axis}` needs --values") }),
    };
    let train = train_split(cfg)?;
    let test = test_split(cfg)?;
    // Settings that only affect stage 2 or evaluation share one stage-1 model.
    let shares_stage1 = key.starts_with("stage2.") || key.starts_with("eval.") || key.starts_with("model.selection.");
    let eval_only = key.starts_with("eval.");
    let mut log = epoch_logger(cfg);
    let shared = if shares_stage1 { Some(run_stage1(cfg, &mut log)?) } else { None };
    let mut trained_once: Option<StreamModel> = None;
    let mut rows = Vec::new();
    for value in &values {
        let variant = cfg.with_overrides(&[format!("{key}={value}")])?;
        let model = match (&shared, eval_only, &trained_once) {
            (Some(_), true, Some(m)) => rebuild(&variant, m)?,
            (Some(s), _, _) => {
                let mut m = rebuild(&variant, s)?;
                run_stage2(&mut m, &variant, &train, &mut log)?;
                m
            }
            (None, _, _) => {
                let mut m = run_stage1(&variant, &mut log)?;
                run_stage2(&mut m, &variant, &train, &mut log)?;
                m
            }
        };
        let (_, summary) = evaluate(&model, &test, &variant.eval_options())?;
        print_json(summary_json(&key, value, &summary));
        rows.push((value.clone(), summary));
        if eval_only && trained_once.is_none() {
            trained_once = Some(model);
        }
    }
    eprintln!("{:<20} {:>8} {:>8} {:>8} {:>8} {:>8}", key, "hit", "mIoP", "IoP>=.5", "acc", "joint");
    for (v, s) in &rows {
        let a = &s.overall;
        eprintln!(
            "{:<20} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            v, a.hit_rate, a.mean_iop, a.iop_at_half, a.answer_accuracy, a.joint_accuracy
        );
    }
    Ok(())
}

fn report_budget(cfg: &RunConfig, ks: &[usize], repeats: usize, checkpoint: Option<&Path>) -> Result<()> {
    let model = match checkpoint {
        Some(p) => load_model(cfg, p)?,
        None if stage2_path(cfg).exists() => load_model(cfg, &stage2_path(cfg))?,
        None => StreamModel::new(cfg.model.clone(), cfg.seeds.init)?,
    };
    for &k in ks {
        cfg.model.check_bank(k)?;
    }
    let rows = budget_report(&model, &cfg.synth, ks, repeats, cfg.seeds.data)?;
    eprint!("{}", budget_table(&rows));
    for r in &rows {
        print_json(json!({"record": "budget", "row": r, "config_digest": cfg.digest()}));
    }
    Ok(())
}
