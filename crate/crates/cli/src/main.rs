use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mmsum::checkpoint::Checkpoint;
use mmsum::config::RunConfig;
use mmsum::dataset::{read_jsonl, write_jsonl, DatasetRecord, MultiModalExample, SPLITS};
use mmsum::eval::{alignment, fit_scorer, infer, infer_all, score_outputs, InferenceConfig, SelectionSource};
use mmsum::model::{Mode, TaskFlags};
use mmsum::synth::{corpus_stats, generate_corpus, SynthConfig};
use mmsum::text::Vocab;
use mmsum::training::{mean_losses, prepare_example, PreparedExample, StepLosses, Trainer};

#[derive(Parser)]
#[command(name = "mmsum", version, about = "Multimodal summarization jobs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and print its statistics.
    Gendata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        docs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a model; per-epoch losses go to stdout as CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// joint or cross
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated subset of gen,sel,reo
        #[arg(long)]
        tasks: Option<String>,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps in total
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Score a checkpoint on a split and write a metric report.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Expected run configuration; differing keys are an error
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Per-document summaries and selections as JSONL
        #[arg(long)]
        outputs: Option<PathBuf>,
    },
    /// Summarize one JSONL record.
    Summarize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Export the image/text relevance matrix of one JSONL record as CSV.
    Alignment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gendata { out, docs, seed } => gendata(&out, docs, seed),
        Command::Train {
            data,
            config,
            out,
            mode,
            tasks,
            resume,
            max_steps,
        } => train(
            &data,
            config.as_deref(),
            &out,
            mode,
            tasks,
            resume.as_deref(),
            max_steps,
        ),
        Command::Evaluate {
            data,
            ckpt,
            report,
            config,
            split,
            outputs,
        } => evaluate(&data, &ckpt, &report, config.as_deref(), &split, outputs.as_deref()),
        Command::Summarize { ckpt, input, k } => summarize(&ckpt, &input, k),
        Command::Alignment { ckpt, input, out } => export_alignment(&ckpt, &input, &out),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn gendata(out: &Path, docs: usize, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        n_docs: docs,
        seed,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    println!("split,docs,avg_tokens,avg_images,avg_summary_tokens");
    for (split, docs) in SPLITS.iter().zip([&corpus.train, &corpus.valid, &corpus.test]) {
        let examples: Vec<MultiModalExample> = docs.iter().map(|d| d.example.clone()).collect();
        write_jsonl(&examples, out, split)?;
        let s = corpus_stats(&examples);
        println!(
            "{split},{},{:.2},{:.2},{:.2}",
            s.docs, s.avg_tokens, s.avg_images, s.avg_summary_tokens
        );
    }
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}

fn build_vocab(train: &[MultiModalExample], max_size: usize) -> Result<Vocab> {
    let texts = train.iter().flat_map(|d| d.paragraphs.iter().chain([&d.summary]));
    Ok(Vocab::build(texts, max_size)?)
}

fn prepare_all(docs: &[MultiModalExample], vocab: &Vocab, run: &RunConfig) -> Result<Vec<PreparedExample>> {
    let model_cfg = run.model_config(vocab.len());
    docs.iter()
        .map(|d| prepare_example(d, vocab, &model_cfg, run.k_select).map_err(Into::into))
        .collect()
}

fn csv_cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn epoch_row(epoch: u64, step: u64, m: &StepLosses) -> String {
    format!(
        "{epoch},{step},{:.6},{},{},{:.6}",
        m.generation,
        csv_cell(m.selection),
        csv_cell(m.reordering),
        m.total
    )
}

fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    mode: Option<String>,
    tasks: Option<String>,
    resume: Option<&Path>,
    max_steps: Option<u64>,
) -> Result<()> {
    let mut run = read_config(config)?;
    if let Some(m) = mode {
        run.mode = m.parse::<Mode>()?;
    }
    if let Some(t) = tasks {
        run.tasks = t.parse::<TaskFlags>()?;
    }
    run.validate()?;
    let train_docs = read_jsonl(data, "train")?;
    let (vocab, mut trainer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let differing: Vec<_> = run.diff(&ck.run).into_iter().filter(|&k| k != "epochs").collect();
            if !differing.is_empty() {
                bail!("configuration differs from checkpoint in: {}", differing.join(", "));
            }
            let mut trainer = ck.into_trainer()?;
            trainer.config.epochs = run.epochs;
            (ck.vocab, trainer)
        }
        None => {
            let vocab = build_vocab(&train_docs, run.vocab_size)?;
            let trainer = Trainer::new(run.model_config(vocab.len()), run.train_config())?;
            (vocab, trainer)
        }
    };
    let train_set = prepare_all(&train_docs, &vocab, &run)?;
    log::info!("{} training documents, vocabulary of {}", train_set.len(), vocab.len());

    let stdout = std::io::stdout();
    let mut log_out = stdout.lock();
    writeln!(log_out, "epoch,step,l_gen,l_sel,l_reo,total")?;
    let mut steps = Vec::new();
    while trainer.progress.epoch < run.epochs {
        if max_steps.is_some_and(|m| trainer.progress.step >= m) {
            break;
        }
        let epoch = trainer.progress.epoch;
        let (losses, done) = trainer.step(&train_set)?;
        steps.push(losses);
        if done {
            let m = mean_losses(&steps).expect("at least one step");
            writeln!(log_out, "{}", epoch_row(epoch, trainer.progress.step, &m))?;
            log_out.flush()?;
            steps.clear();
        }
    }
    Checkpoint::from_trainer(&run, &vocab, &trainer).save(out)?;
    Ok(())
}

fn inference_config(run: &RunConfig, k: usize) -> InferenceConfig {
    InferenceConfig {
        beam: run.beam(),
        k,
        selection: if run.tasks.selection {
            SelectionSource::Head
        } else {
            SelectionSource::Similarity
        },
    }
}

fn evaluate(
    data: &Path,
    ckpt: &Path,
    report: &Path,
    config: Option<&Path>,
    split: &str,
    outputs: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    if let Some(path) = config {
        let expected = read_config(Some(path))?;
        let differing = expected.diff(&ck.run);
        if !differing.is_empty() {
            bail!(
                "configuration does not match the checkpoint; differing keys: {}",
                differing.join(", ")
            );
        }
    }
    let (model, store) = ck.into_model()?;
    let docs = read_jsonl(data, split)?;
    let prepared = prepare_all(&docs, &ck.vocab, &ck.run)?;
    let cfg = inference_config(&ck.run, ck.run.k_select);
    let outs = infer_all(&model, &store, &ck.vocab, &prepared, &cfg)?;
    let scorer = fit_scorer(&read_jsonl(data, "train")?, ck.run.k_select)?;
    let metrics = score_outputs(&docs, &outs, &scorer, ck.run.k_select)?;
    fs::write(report, metrics.to_report_text()).with_context(|| format!("writing {}", report.display()))?;
    if let Some(path) = outputs {
        let mut text = String::new();
        for o in &outs {
            let line = serde_json::json!({
                "doc_id": o.doc_id,
                "summary": o.summary,
                "selected": o.selection.indices,
            });
            text.push_str(&line.to_string());
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{}", metrics.to_report_text());
    Ok(())
}

fn read_record(input: &Path) -> Result<MultiModalExample> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .with_context(|| format!("{} holds no record", input.display()))?;
    let record = DatasetRecord::from_json_line(line, 1)?;
    let root = input.parent().unwrap_or(Path::new("."));
    Ok(record.load(root)?)
}

fn summarize(ckpt: &Path, input: &Path, k: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (model, store) = ck.into_model()?;
    let doc = read_record(input)?;
    let k = k.unwrap_or(ck.run.k_select);
    let prepared = prepare_example(&doc, &ck.vocab, &model.config, ck.run.k_select)?;
    if k > prepared.n_images() {
        eprintln!(
            "warning: --k {k} exceeds the {} available images; selecting all of them",
            prepared.n_images()
        );
    }
    let out = infer(&model, &store, &ck.vocab, &prepared, &inference_config(&ck.run, k))?;
    println!("{}", out.summary);
    for i in out.selection.indices {
        println!("{}", doc.image_paths[i]);
    }
    Ok(())
}

fn export_alignment(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (model, store) = ck.into_model()?;
    let doc = read_record(input)?;
    let matrix = alignment(&model, &store, &ck.vocab, &doc)?;
    fs::write(out, matrix.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
