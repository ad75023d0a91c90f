use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use echovt_core::dataset::{import_image_dir, read_dataset, write_dataset};
use echovt_core::gradsuite::{self, SuiteConfig};
use echovt_core::heads::{SdMode, SdOutput};
use echovt_core::metrics::write_csv;
use echovt_core::model::{param_breakdown, Preset, PresetName};
use echovt_core::pipeline::{
    evaluate, parse_kv, predict_video, split_dataset, Checkpoint, LrSchedule, TrainConfig, TrainStatus, Trainer,
};
use echovt_core::sampling::{Method, VideoRecord};
use echovt_core::synth::{generate_dataset, PhantomConfig};

#[derive(Parser, Debug)]
#[command(name = "echovt", version, about = "Video transformer for ES/ED detection and ejection fraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset.
    Generate(GenerateArgs),
    /// Convert directories of PNG frames into a dataset.
    Import {
        /// Directory holding `manifest.txt` and one subdirectory per video.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Per-frame prediction trace for one video.
    Predict(PredictArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Parameter counts per preset.
    Paramcount {
        /// One preset, or all of them when omitted.
        #[arg(long)]
        preset: Option<PresetName>,
        #[arg(long, default_value = "reg")]
        sd_mode: SdMode,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frame size follows the preset unless `--frame-size` is given.
    #[arg(long, default_value = "reduced2")]
    preset: PresetName,
    #[arg(long)]
    frame_size: Option<usize>,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write (updated after every epoch).
    #[arg(long)]
    out: PathBuf,
    /// Defaults to reduced2 for a fresh run.
    #[arg(long)]
    preset: Option<PresetName>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    sd_mode: Option<SdMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    schedule: Option<LrSchedule>,
    /// Dropout for encoder output and attention stack.
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Single-threaded training.
    #[arg(long)]
    reference: bool,
    /// `key = value` file; its entries override the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Evaluate on the validation split every N epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Per-video metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Video id; defaults to the first video in the dataset.
    #[arg(long)]
    video: Option<String>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = SuiteConfig::default().eps)]
    eps: f64,
    #[arg(long, default_value_t = SuiteConfig::default().tol)]
    tol: f64,
    /// Only this op (see the list printed by a full run).
    #[arg(long)]
    op: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Import { input, out } => import(&input, &out),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Paramcount { preset, sd_mode } => paramcount(preset, sd_mode),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = PhantomConfig {
        frame_size: a.frame_size.unwrap_or(Preset::new(a.preset).frame_size),
        seed: a.seed,
        ..PhantomConfig::default()
    };
    if let Some(n) = a.min_frames {
        cfg.num_frames.0 = n;
    }
    if let Some(n) = a.max_frames {
        cfg.num_frames.1 = n;
    }
    if let Some(s) = a.noise {
        cfg.noise_level = s;
    }
    let start = Instant::now();
    let videos: Vec<VideoRecord> = generate_dataset(&cfg, a.count)?.into_iter().map(|(v, _)| v).collect();
    write_dataset(&videos, &a.out)?;
    println!(
        "wrote {} videos ({}x{} px) to {} in {:.1}s",
        videos.len(),
        cfg.frame_size,
        cfg.frame_size,
        a.out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn import(input: &Path, out: &Path) -> Result<()> {
    let videos = import_image_dir(input)?;
    write_dataset(&videos, out)?;
    println!("imported {} videos into {}", videos.len(), out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    let mut preset_name = a.preset;
    let mut dropout = a.dropout;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(method => method, sd_mode => sd_mode, seed => seed, epochs => epochs, batch => batch_size, lr => lr, schedule => schedule);
    if a.grad_clip.is_some() {
        cfg.grad_clip = a.grad_clip;
    }
    if a.reference {
        cfg.parallel = false;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (k, v) in parse_kv(&text, path)? {
            match k.as_str() {
                "preset" => preset_name = Some(v.parse()?),
                "dropout" => dropout = Some(v.parse().with_context(|| format!("dropout `{v}`"))?),
                _ => {
                    if !cfg.apply(&k, &v)? {
                        bail!("{}: unknown key `{k}`", path.display());
                    }
                }
            }
        }
    }
    cfg.validate()?;

    let videos = read_dataset(&a.data)?;
    if videos.is_empty() {
        bail!("{} holds no videos", a.data.display());
    }
    let split = split_dataset(videos.len(), cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| videos[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&split.train), pick(&split.val));

    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if dropout.is_some() || preset_name.is_some_and(|p| p != ckpt.preset.name) {
                eprintln!("note: preset and dropout come from the resumed checkpoint");
            }
            Trainer::resume(ckpt, cfg.clone())?
        }
        None => {
            let mut preset = Preset::new(preset_name.unwrap_or(PresetName::Reduced2));
            if let Some(p) = dropout {
                preset = preset.with_dropout(p);
            }
            Trainer::new(preset, cfg.clone())?
        }
    };
    println!(
        "training {} / {} / {} on {} videos ({} val), {} epochs from epoch {}",
        trainer.model().preset().name,
        cfg.method,
        cfg.sd_mode,
        train_set.len(),
        val_set.len(),
        cfg.epochs,
        trainer.epoch()
    );

    let mut history = match &a.history {
        Some(p) => {
            let mut w = BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?);
            writeln!(w, "epoch,train_loss,val_loss,skipped,val_ef_mae,val_afd_es,val_afd_ed,val_rejected")?;
            Some(w)
        }
        None => None,
    };
    let start = Instant::now();
    let mut failure: Option<anyhow::Error> = None;
    let outcome = trainer.run(&train_set, &val_set, |stats, t| {
        let mut line = format!(
            "epoch {:>4}  train {:.5}  val {}  skipped {}  {:.1}s",
            stats.epoch,
            stats.train_loss,
            stats.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            stats.skipped,
            start.elapsed().as_secs_f64()
        );
        let mut metrics = String::from(",,,");
        if a.eval_every > 0 && stats.epoch % a.eval_every == 0 && !val_set.is_empty() {
            match evaluate(t.model(), t.params(), &val_set) {
                Ok(ev) => {
                    let r = &ev.report;
                    let fmt = |d: Option<f64>| d.map_or("-".to_string(), |v| format!("{v:.2}"));
                    line += &format!(
                        "  | val MAE {:.2}  aFD ES {}  ED {}  rejected {}",
                        r.ef.mae,
                        fmt(r.afd_es.map(|s| s.mean)),
                        fmt(r.afd_ed.map(|s| s.mean)),
                        r.rejected_count
                    );
                    metrics = format!(
                        "{},{},{},{}",
                        r.ef.mae,
                        r.afd_es.map_or(String::new(), |s| s.mean.to_string()),
                        r.afd_ed.map_or(String::new(), |s| s.mean.to_string()),
                        r.rejected_count
                    );
                }
                Err(e) => line += &format!("  | eval failed: {e}"),
            }
        }
        println!("{line}");
        if failure.is_none() {
            if let Some(w) = history.as_mut() {
                let val = stats.val_loss.map_or(String::new(), |v| v.to_string());
                if let Err(e) = writeln!(w, "{},{},{},{},{}", stats.epoch, stats.train_loss, val, stats.skipped, metrics) {
                    failure = Some(e.into());
                }
            }
            if let Err(e) = t.checkpoint().save(&a.out) {
                failure = Some(e.into());
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.context("writing training outputs"));
    }
    if let Some(mut w) = history {
        w.flush()?;
    }
    outcome.checkpoint.save(&a.out)?;
    match outcome.status {
        TrainStatus::Completed => {
            println!("saved {} (epoch {})", a.out.display(), outcome.checkpoint.epoch);
            Ok(())
        }
        TrainStatus::Diverged { epoch } => bail!(
            "loss became non-finite in epoch {epoch}; kept the epoch {} checkpoint at {}",
            outcome.checkpoint.epoch,
            a.out.display()
        ),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let videos = read_dataset(&a.data)?;
    let split = split_dataset(videos.len(), ckpt.config.seed);
    let idx: Vec<usize> = match a.split {
        SplitName::Train => split.train,
        SplitName::Val => split.val,
        SplitName::Test => split.test,
        SplitName::All => (0..videos.len()).collect(),
    };
    if idx.is_empty() {
        bail!("the {:?} split of {} is empty", a.split, a.data.display());
    }
    let subset: Vec<VideoRecord> = idx.iter().map(|&i| videos[i].clone()).collect();
    let ev = evaluate(&model, &ckpt.params, &subset)?;
    println!(
        "{} videos ({} split), checkpoint epoch {}",
        subset.len(),
        format!("{:?}", a.split).to_lowercase(),
        ckpt.epoch
    );
    println!("{}", ev.report);
    if let Some(path) = &a.out {
        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(f);
        write_csv(&mut w, &ev.results, &ev.report)?;
        w.flush()?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let videos = read_dataset(&a.data)?;
    let video = match &a.video {
        Some(id) => videos
            .iter()
            .find(|v| &v.id == id)
            .with_context(|| format!("no video `{id}` in {}", a.data.display()))?,
        None => videos.first().context("dataset is empty")?,
    };
    let pred = predict_video(&model, &ckpt.params, video)?;
    let stride = if pred.subsampled { 2 } else { 1 };

    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    match &pred.sd {
        SdOutput::Regression(s) => {
            writeln!(out, "frame_index,source_frame,sd_value")?;
            for (i, v) in s.iter().enumerate() {
                writeln!(out, "{i},{},{v}", i * stride)?;
            }
        }
        SdOutput::Classification(p) => {
            writeln!(out, "frame_index,source_frame,p_transition,p_ed,p_es")?;
            for (i, [t, ed, es]) in p.iter().enumerate() {
                writeln!(out, "{i},{},{t},{ed},{es}", i * stride)?;
            }
        }
    }
    out.flush()?;
    drop(out);
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    eprintln!(
        "{}: EF {:.2}%  ED [{}]  ES [{}]{}",
        pred.id,
        pred.ef_percent,
        join(&pred.indices.ed),
        join(&pred.indices.es),
        if pred.indices.rejected { "  (rejected)" } else { "" }
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = SuiteConfig {
        seeds: a.seeds,
        eps: a.eps,
        tol: a.tol,
    };
    let ops: Vec<&str> = match &a.op {
        Some(op) => vec![op.as_str()],
        None => gradsuite::OPS.to_vec(),
    };
    let start = Instant::now();
    let mut failed = Vec::new();
    println!("{:<24} {:>6} {:>12} {:>12}  result", "op", "seeds", "max rel err", "max abs err");
    for op in ops {
        let s = gradsuite::run_op(op, &cfg)?;
        println!(
            "{:<24} {:>6} {:>12.3e} {:>12.3e}  {}",
            s.op_name,
            s.seeds,
            s.max_rel_err,
            s.max_abs_err,
            if s.passed { "PASS" } else { "FAIL" }
        );
        if !s.passed {
            failed.push(s.op_name);
        }
    }
    println!("eps {:e}, tol {:e}, {:.1}s", cfg.eps, cfg.tol, start.elapsed().as_secs_f64());
    if failed.is_empty() {
        println!("all ops pass");
        Ok(())
    } else {
        bail!("gradient check failed for {}", failed.join(", "))
    }
}

fn paramcount(preset: Option<PresetName>, sd_mode: SdMode) -> Result<()> {
    let names = match preset {
        Some(p) => vec![p],
        None => PresetName::ALL.to_vec(),
    };
    for name in names {
        let p = Preset::new(name);
        let s = p.stack;
        let b = param_breakdown(name, sd_mode)?;
        let (nb, nd, ff, nf) = (s.num_layers, s.embed_dim, s.ff_dim, s.max_seq);
        let per_layer = 4 * (nd * nd + nd) + nd * ff + ff + ff * nd + nd + 4 * nd;
        println!("preset {name}: nB={nb} nD={nd} dFF={ff} nF={nf}, sd-mode {sd_mode}");
        println!("  stack closed form    {:>12}", b.stack_closed_form);
        println!("    per layer          {per_layer:>12}  = 4(nD^2+nD) + nD*dFF + dFF + dFF*nD + nD + 4nD");
        println!("    x nB               {:>12}", nb * per_layer);
        println!("    positions nF*nD    {:>12}", nf * nd);
        println!("  stack actual         {:>12}  {}", b.stack, if b.stack == b.stack_closed_form { "match" } else { "MISMATCH" });
        println!("  encoder              {:>12}", b.encoder);
        println!("  sd head              {:>12}", b.sd_head);
        println!("  ef head              {:>12}", b.ef_head);
        println!("  total                {:>12}  ({:.1}M)", b.total, b.total as f64 / 1e6);
        if b.stack != b.stack_closed_form {
            bail!("{name}: stack count {} differs from closed form {}", b.stack, b.stack_closed_form);
        }
    }
    Ok(())
}
