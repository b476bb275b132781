use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cog_core::checkpoint;
use cog_core::dataio::{
    parse_csv, read_dataset, read_embeddings_from, synth_generate, write_dataset,
};
use cog_core::eval::{
    decisions, evaluate, loso_folds, parallel_map, ribbon_export, EvalReport, EvalRow, WindowSpec,
};
use cog_core::gradcheck::{self, GradCheckConfig};
use cog_core::stream::{bench, FrameResult, StreamEngine};
use cog_core::trainer::{train_with, TrainState};
use cog_core::{
    Ablation, Dataset, Error, FormatError, ModelConfig, Result, SynthConfig, TrainConfig,
};

const THREADS_VAR: &str = "COG_THREADS";

#[derive(Parser)]
#[command(
    name = "cog",
    version,
    about = "Frame-level surgical error detection over precomputed embeddings",
    after_help = "Defaults are tagged by origin: [published] settings of the reference \
                  configuration, [derived] values computed from other inputs, and [local] \
                  choices of this implementation.\n\n\
                  Exit codes: 0 ok, 2 usage or configuration, 3 i/o or format, 4 numeric.\n\
                  COG_THREADS caps worker threads for `eval`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Synth {
        /// JSON synthesis settings; omitted keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Directory for the videos, manifest and prompt bank.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or cross-validate its settings with --loso.
    Eval(EvalArgs),
    /// Run the streaming detector over one embedding sequence.
    Stream {
        /// Checkpoint to run.
        #[arg(long)]
        ckpt: PathBuf,
        /// `.coge` file or CSV rows of floats; `-` reads stdin.
        #[arg(long = "in")]
        input: String,
        /// CSV output; `-` writes stdout.
        #[arg(long, default_value = "-")]
        out: String,
        /// Decision threshold on p_error. [local]
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Check taped gradients against central differences on a small model.
    GradCheck {
        /// Seed for the random model and inputs. [local]
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure per-frame streaming latency on random frames.
    Bench {
        /// Checkpoint to time.
        #[arg(long)]
        ckpt: PathBuf,
        /// Frames to push (at least 100). [local]
        #[arg(long, default_value_t = 10_000)]
        frames: usize,
        /// Seed for the random frames. [local]
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset directory with a manifest.
    #[arg(long)]
    data: PathBuf,
    /// Prompt bank (`.cogp`).
    #[arg(long)]
    prompts: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Adam learning rate. [published]
    #[arg(long = "lr", default_value_t = 5e-4)]
    learning_rate: f64,
    /// Passes over the training videos; 0 writes the initialization. [published]
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Weight of the smoothing term. [published]
    #[arg(long, default_value_t = 0.15)]
    lambda: f64,
    /// Prompt-reasoning window in frames. [published]
    #[arg(long, default_value_t = 40)]
    n: usize,
    /// Stages of both temporal pathways. [published]
    #[arg(long, default_value_t = 3)]
    stages: usize,
    /// Slow pathway pooling factor. [published]
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Model width. [published]
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Seed for initialization and video order. [local]
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Remove one component: gvr, mstr, slow or fast.
    #[arg(long)]
    ablate: Option<String>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory with a manifest.
    #[arg(long)]
    data: PathBuf,
    /// Retrain the checkpoint's settings on each leave-one-supertrial-out fold.
    #[arg(long)]
    loso: bool,
    /// Override the checkpoint's epoch count when retraining folds.
    #[arg(long)]
    epochs: Option<usize>,
    /// Decision threshold on p_error. [local]
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// CSV report with one row per split plus mean and std.
    #[arg(long)]
    report: PathBuf,
    /// Directory for per-video `frame,truth,pred` ribbons.
    #[arg(long)]
    ribbons: Option<PathBuf>,
}

fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Usage(format!(
                "{THREADS_VAR} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config)?;
    let cfg: SynthConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Usage(format!("{}: {e}", config.display())))?;
    let ds = synth_generate(&cfg)?;
    write_dataset(&ds, out)?;
    eprintln!("wrote {} videos to {}", ds.videos.len(), out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let ds = read_dataset(&a.data, Some(&a.prompts))?;
    let d_vis = ds
        .d_vis()
        .ok_or_else(|| Error::Usage("dataset has no videos".into()))?;
    let model = ModelConfig {
        d_vis,
        d_text: ds.prompts.d_text(),
        prompts: ds.prompts.len(),
        width: a.width,
        window: a.n,
        slow_stages: a.stages,
        fast_stages: a.stages,
        pool: a.k,
        ablation: a
            .ablate
            .as_deref()
            .map(Ablation::parse)
            .transpose()?
            .unwrap_or_default(),
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        lambda: a.lambda,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let state = TrainState::init(model, train, &ds.prompts)?;
    let state = train_with(state, &ds, |epoch, loss| {
        eprintln!("epoch {epoch:>4}  loss {loss:.6}")
    })?;
    checkpoint::save(&state, &a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn labelled(ds: &Dataset, ids: &[String]) -> Result<Dataset> {
    let videos = ids
        .iter()
        .map(|id| {
            ds.videos
                .iter()
                .find(|v| &v.id == id)
                .cloned()
                .expect("fold ids come from the dataset")
        })
        .collect();
    Ok(Dataset {
        videos,
        prompts: ds.prompts.clone(),
    })
}

fn check_eval_data(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    for v in &ds.videos {
        if v.sequence.d_vis() != model.d_vis {
            return Err(Error::Config(format!(
                "video `{}` has {} features, checkpoint expects {}",
                v.id,
                v.sequence.d_vis(),
                model.d_vis
            )));
        }
        if v.sequence.labels.is_none() {
            return Err(Error::Usage(format!("video `{}` has no labels", v.id)));
        }
    }
    if ds.videos.is_empty() {
        return Err(Error::Usage("dataset has no videos".into()));
    }
    Ok(())
}

fn eval_split(
    state: &TrainState,
    ds: &Dataset,
    name: String,
    threshold: f64,
    ribbons: Option<&Path>,
) -> Result<EvalRow> {
    let spec = WindowSpec::default();
    let model = &state.model;
    let frames: Vec<_> = ds
        .videos
        .iter()
        .map(|v| v.sequence.frames.cast::<f64>())
        .collect();
    let pairs: Vec<_> = frames
        .iter()
        .zip(&ds.videos)
        .map(|(f, v)| (f, v.sequence.labels.as_deref().expect("checked")))
        .collect();
    if let Some(dir) = ribbons {
        for (v, (f, truth)) in ds.videos.iter().zip(&pairs) {
            let pred = decisions(&model.error_probabilities(f)?, threshold);
            ribbon_export(&pred, truth, &dir.join(format!("{}.csv", v.id)))?;
        }
    }
    Ok(EvalRow::from_counts(
        name,
        &evaluate(model, &pairs, threshold, &spec)?,
    ))
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let threads = thread_cap()?;
    let mut state = checkpoint::load(&a.ckpt)?;
    let ds = read_dataset(&a.data, None)?;
    check_eval_data(&state.model.config, &ds)?;
    if let Some(dir) = &a.ribbons {
        fs::create_dir_all(dir)?;
    }
    let ribbons = a.ribbons.as_deref();
    let rows: Vec<Result<EvalRow>> = if a.loso {
        if let Some(e) = a.epochs {
            state.train.epochs = e;
        }
        let ids: Vec<_> = ds
            .videos
            .iter()
            .map(|v| (v.surgeon, v.trial, v.id.clone()))
            .collect();
        let folds = loso_folds(&ids)?;
        let bank = state.model.bank()?;
        parallel_map(&folds, threads, |fold| {
            let train_ds = labelled(&ds, &fold.train)?;
            let test_ds = labelled(&ds, &fold.test)?;
            let init = TrainState::init(state.model.config.clone(), state.train.clone(), &bank)?;
            let trained = train_with(init, &train_ds, |_, _| {})?;
            eprintln!("fold {} done", fold.trial);
            eval_split(
                &trained,
                &test_ds,
                format!("fold{}", fold.trial),
                a.threshold,
                ribbons,
            )
        })
    } else {
        parallel_map(&ds.videos, threads, |v| {
            let one = Dataset {
                videos: vec![v.clone()],
                prompts: ds.prompts.clone(),
            };
            eval_split(&state, &one, v.id.clone(), a.threshold, ribbons)
        })
    };
    let report = EvalReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    };
    fs::write(&a.report, report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn open_output(out: &str) -> Result<Box<dyn Write>> {
    Ok(if out == "-" {
        Box::new(BufWriter::new(io::stdout().lock()))
    } else {
        Box::new(BufWriter::new(fs::File::create(out)?))
    })
}

fn stream_cmd(ckpt: &Path, input: &str, out: &str, threshold: f64) -> Result<()> {
    let state = checkpoint::load(ckpt)?;
    let mut engine = StreamEngine::<f32>::new(&state.model)?.with_threshold(threshold);
    let reader: Box<dyn Read> = if input == "-" {
        Box::new(io::stdin().lock())
    } else {
        Box::new(fs::File::open(input)?)
    };
    let mut reader = BufReader::new(reader);
    let mut w = open_output(out)?;
    writeln!(w, "{}", FrameResult::CSV_HEADER)?;
    let emit = |r: FrameResult, w: &mut dyn Write| -> Result<()> {
        r.write_csv(&mut *w)?;
        Ok(())
    };
    // CSV rows begin with a number, binary files with the magic
    if reader.fill_buf()?.first() == Some(&b'C') {
        let seq = read_embeddings_from(reader)?;
        for t in 0..seq.len() {
            emit(engine.push_f32(seq.frame(t))?, &mut w)?;
        }
    } else {
        let d = engine.d_vis();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let seq = parse_csv(&line, d).map_err(|e| match e {
                Error::Format(FormatError::Csv { detail, .. }) => Error::Format(FormatError::Csv {
                    line: i + 1,
                    detail,
                }),
                other => other,
            })?;
            emit(engine.push_f32(seq.frame(0))?, &mut w)?;
            if out == "-" {
                w.flush()?;
            }
        }
    }
    engine.close();
    w.flush()?;
    Ok(())
}

fn grad_check_cmd(seed: u64) -> Result<bool> {
    let report = gradcheck::run(&GradCheckConfig::mini(seed))?;
    let worst = report.worst().expect("model has parameters");
    println!(
        "probes {}  loss {:.6}  max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        report.probes.len(),
        report.loss,
        worst.rel_error,
        worst.param,
        worst.index,
        worst.analytic,
        worst.numeric
    );
    let ok = report.passed();
    println!(
        "{} (tolerance {:e})",
        if ok { "PASS" } else { "FAIL" },
        gradcheck::TOLERANCE
    );
    Ok(ok)
}

fn bench_cmd(ckpt: &Path, frames: usize, seed: u64) -> Result<()> {
    let state = checkpoint::load(ckpt)?;
    let mut engine = StreamEngine::<f32>::new(&state.model)?;
    let s = bench(&mut engine, frames, seed)?;
    println!("frames   {}", s.count);
    println!("mean_us  {:.1}", s.mean_us);
    println!("p50_us   {:.1}", s.p50_us);
    println!("p99_us   {:.1}", s.p99_us);
    if let Some(v) = s.early_p99_us {
        println!("early_p99_us {v:.1}");
    }
    if let Some(v) = s.late_p99_us {
        println!("late_p99_us  {v:.1}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { config, out } => synth(&config, &out)?,
        Command::Train(a) => train_cmd(&a)?,
        Command::Eval(a) => eval_cmd(&a)?,
        Command::Stream {
            ckpt,
            input,
            out,
            threshold,
        } => stream_cmd(&ckpt, &input, &out, threshold)?,
        Command::GradCheck { seed } => {
            if !grad_check_cmd(seed)? {
                return Ok(ExitCode::from(4));
            }
        }
        Command::Bench { ckpt, frames, seed } => bench_cmd(&ckpt, frames, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
