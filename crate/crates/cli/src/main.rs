//! Command-line front end. Each subcommand resolves a run directory, does
//! one unit of work there and exits nonzero with `error[<class>]: <message>`
//! on failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use wsi_inr::config::{Preset, RunConfig};
use wsi_inr::data::{Level, Manifest, Split, SyntheticSpec};
use wsi_inr::encoding::{CoordEncoder, EncoderKind, HashGridEncoder};
use wsi_inr::experiments::{
    decouple_hash_levels, emit_report, eval_cross_resolution, run_ablation, table2_csv, write_decoupling, write_dense,
    write_ito, Ablation, EvalMode, Layout,
};
use wsi_inr::numerics::Checkpoint;
use wsi_inr::pipeline::{
    find_slide, gradcheck, infer_dense, load_slides, run_ito, synthetic_id, train_stage1, train_stage2,
    training_metrics, GradScope, RunDir, TrainState,
};
use wsi_inr::{Error, Result};

/// Overrides the directory that relative `--run` paths resolve against.
const RUN_ROOT_ENV: &str = "WSI_INR_RUN_ROOT";

#[derive(Parser)]
#[command(name = "wsi-inr", version, about = "Coordinate-network lesion segmentation on slide pyramids")]
struct Cli {
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Full JSON config; the preset is ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk-scale")]
    preset: Preset,
    /// Dotted override `key=<json>`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn explicit(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }

    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(self.preset),
        };
        let cfg = base.with_overrides(&self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `a..b` (exclusive) or a single seed.
#[derive(Clone, Debug)]
struct SeedRange(std::ops::Range<u64>);

impl FromStr for SeedRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<SeedRange> {
        let bad = || Error::Config(format!("seed range `{s}` is not `a..b` or `n`"));
        let range = match s.split_once("..") {
            Some((a, b)) => a.parse().map_err(|_| bad())?..b.parse().map_err(|_| bad())?,
            None => {
                let n: u64 = s.parse().map_err(|_| bad())?;
                n..n + 1
            }
        };
        if range.is_empty() {
            return Err(bad());
        }
        Ok(SeedRange(range))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic slide pyramids and a manifest.
    GenData {
        #[arg(long)]
        seed_range: SeedRange,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Canvas side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Run both training stages.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Adapt a fresh encoder to one slide.
    Ito {
        #[arg(long)]
        slide: String,
        #[arg(long, default_value = "base")]
        level: Level,
        #[arg(long, default_value = "resolution-specific-opt")]
        mode: EvalMode,
    },
    /// Dense inference with an adapted encoder.
    Infer {
        #[arg(long)]
        slide: String,
        #[arg(long, default_value = "base")]
        level: Level,
        #[arg(long, default_value = "resolution-specific-opt")]
        mode: EvalMode,
    },
    /// Cross-resolution evaluation on the test split.
    Eval {
        /// `both` or one protocol mode.
        #[arg(long, default_value = "both")]
        protocol: String,
    },
    /// Encoder ablation, one full training per arm and seed.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        arms: Vec<EncoderKind>,
        /// Defaults to the run seed plus `experiments.ablation_seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Inference with subsets of hash levels and their spectra.
    Decouple {
        /// First level of the high group.
        #[arg(long)]
        split: Option<usize>,
        /// Defaults to the first test slide.
        #[arg(long)]
        slide: Option<String>,
        #[arg(long, default_value = "base")]
        level: Level,
    },
    /// Central-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: GradScope,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Markdown report and figures from a run directory.
    Report,
}

fn run_root(arg: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if arg.is_relative() => PathBuf::from(root).join(arg),
        _ => arg.to_path_buf(),
    }
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn load_trained(run: &RunDir, cfg: &RunConfig) -> Result<TrainState> {
    let path = run.checkpoint("stage2");
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} missing; run `train` first", path.display())));
    }
    let ids: Vec<String> = load_slides(cfg, Split::Train)?.iter().map(|s| s.id().to_string()).collect();
    TrainState::from_checkpoint(cfg, &ids, &Checkpoint::load(&path)?)
}

/// ITO level for a mode: base-resolution-opt always adapts at Base.
fn ito_level(mode: EvalMode, level: Level) -> Level {
    match mode {
        EvalMode::BaseOpt => Level::Base,
        EvalMode::ResolutionSpecific => level,
    }
}

fn load_ito_encoder(cfg: &RunConfig, dir: &Path) -> Result<CoordEncoder> {
    if cfg.encoder.kind != EncoderKind::Hash {
        return cfg.encoder.build(0);
    }
    let path = dir.join("encoder.ckpt");
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} missing; run `ito` first", path.display())));
    }
    let tables = Checkpoint::load(&path)?.params("encoder/");
    Ok(CoordEncoder::Hash(HashGridEncoder::from_tables(cfg.encoder.hash.clone(), tables)?))
}

fn gen_data(seeds: SeedRange, out: &Path, split: Split, size: Option<usize>) -> Result<()> {
    let manifest_path = out.join("manifest.json");
    let mut manifest = if manifest_path.exists() {
        Manifest::load(&manifest_path)?
    } else {
        Manifest { slides: Vec::new() }
    };
    for seed in seeds.0 {
        let mut spec = SyntheticSpec::desk(seed);
        if let Some(n) = size {
            (spec.height, spec.width) = (n, n);
        }
        let id = synthetic_id(split, seed);
        let slide = wsi_inr::data::generate_synthetic(&id, &spec)?;
        let entry = wsi_inr::data::write_dataset(out, &slide, split, Some(spec))?;
        manifest.slides.retain(|s| s.id != id);
        manifest.slides.push(entry);
        progress(&format!("wrote {id}"));
    }
    manifest.slides.sort_by(|a, b| a.id.cmp(&b.id));
    manifest.save(&manifest_path)?;
    println!("{}", manifest_path.display());
    Ok(())
}

/// Reuses the stored config of an existing run unless one is given explicitly.
fn open_or_create(root: &Path, args: &ConfigArgs) -> Result<(RunDir, RunConfig)> {
    let cfg = match RunDir::open(root) {
        Ok(existing) if !args.explicit() => existing.config()?,
        _ => args.resolve()?,
    };
    Ok((RunDir::create(root, &cfg)?, cfg))
}

fn train(root: &Path, args: &ConfigArgs, resume: bool) -> Result<()> {
    let (run, cfg) = open_or_create(root, args)?;
    let slides = load_slides(&cfg, Split::Train)?;
    let ids: Vec<String> = slides.iter().map(|s| s.id().to_string()).collect();
    let latest = run.checkpoint("latest");
    let mut state = match (resume, latest.exists()) {
        (true, true) => TrainState::from_checkpoint(&cfg, &ids, &Checkpoint::load(&latest)?)?,
        (false, true) => {
            return Err(Error::Config(format!(
                "{} already holds training checkpoints; pass --resume or use a fresh run directory",
                run.root().display()
            )))
        }
        _ => TrainState::new(&cfg, &ids)?,
    };
    let every = cfg.train.checkpoint_every;
    let save = |s: &TrainState, name: &str| s.to_checkpoint()?.save(&run.checkpoint(name));
    let log = |s: &TrainState| -> Result<()> {
        let epoch = s.stage1.len() + s.stage2.len();
        if every > 0 && epoch % every == 0 {
            save(s, "latest")?;
        }
        Ok(())
    };

    if !state.stage1_done(&cfg) {
        train_stage1(&mut state, &cfg, &slides, &mut |s| {
            if let Some(m) = s.stage1.last() {
                progress(&format!("stage 1 epoch {} mse {m:.6}", s.stage1.len()));
            }
            log(s)
        })?;
        save(&state, "stage1")?;
        save(&state, "latest")?;
    }
    train_stage2(&mut state, &cfg, &slides, &mut |s| {
        if let Some(l) = s.stage2.last() {
            progress(&format!("stage 2 epoch {} bce {:.6} dice {:.6}", s.stage2.len(), l.bce, l.dice));
        }
        log(s)
    })?;
    save(&state, "stage2")?;
    save(&state, "latest")?;

    let mut history = String::from("stage,epoch,mse,bce,dice\n");
    for (i, m) in state.stage1.iter().enumerate() {
        history += &format!("1,{},{m:.10},,\n", i + 1);
    }
    for (i, l) in state.stage2.iter().enumerate() {
        history += &format!("2,{},,{:.10},{:.10}\n", i + 1, l.bce, l.dice);
    }
    std::fs::write(run.root().join("train_log.csv"), history).map_err(|e| Error::io(run.root(), e))?;
    let rows = training_metrics(&state, &cfg, &slides)?;
    run.write_metrics("train", &rows)?;
    let mean = rows.iter().map(|r| r.mse).sum::<f64>() / rows.len().max(1) as f64;
    println!("trained {} slides; mean reconstruction mse {mean:.6}", rows.len());
    Ok(())
}

fn ito(root: &Path, slide: &str, level: Level, mode: EvalMode) -> Result<()> {
    let run = RunDir::open(root)?;
    let cfg = run.config()?;
    let state = load_trained(&run, &cfg)?;
    let slide = find_slide(&cfg, slide)?;
    let level = ito_level(mode, level);
    let result = run_ito(slide.images(), level, &state.model, &cfg)?;
    write_ito(&Layout(&run).ito(mode, slide.id(), level), &result)?;
    println!(
        "{} {} stop {} at epoch {} mse {:.6}",
        slide.id(),
        level,
        result.decision.reason.tag(),
        result.decision.epoch,
        result.decision.mse
    );
    Ok(())
}

fn infer(root: &Path, slide: &str, level: Level, mode: EvalMode) -> Result<()> {
    let run = RunDir::open(root)?;
    let cfg = run.config()?;
    let state = load_trained(&run, &cfg)?;
    let slide = find_slide(&cfg, slide)?;
    let encoder = load_ito_encoder(&cfg, &Layout(&run).ito(mode, slide.id(), ito_level(mode, level)))?;
    let out = infer_dense(slide.geometry(), level, &state.model, &encoder, cfg.train.window)?;
    let dir = Layout(&run).output(mode, slide.id(), level);
    write_dense(&dir, &out)?;
    println!("{}", dir.display());
    Ok(())
}

fn eval(root: &Path, protocol: &str) -> Result<()> {
    let run = RunDir::open(root)?;
    let cfg = run.config()?;
    let modes = match protocol {
        "both" => EvalMode::ALL.to_vec(),
        other => vec![other.parse()?],
    };
    let state = load_trained(&run, &cfg)?;
    let slides = load_slides(&cfg, Split::Test)?;
    let layout = Layout(&run);
    let table = eval_cross_resolution(&state.model, &cfg, &slides, &modes, &mut |mode, ito, out| {
        write_ito(&layout.ito(mode, &ito.slide, ito.level), ito)?;
        write_dense(&layout.output(mode, &ito.slide, out.level), out)
    })?;
    wsi_inr::experiments::write_text(&layout.table1(), &table.table1_csv())?;
    run.write_metrics("eval", &table.metric_rows())?;
    for mode in &modes {
        let cells: Vec<String> = Level::ALL
            .iter()
            .filter_map(|&l| table.mean_dice(*mode, l).map(|d| format!("{l} {d:.4}")))
            .collect();
        println!("{mode}: {}", cells.join(", "));
    }
    Ok(())
}

fn ablate(root: &Path, args: &ConfigArgs, arms: Vec<EncoderKind>, seeds: Vec<u64>) -> Result<()> {
    let (run, cfg) = open_or_create(root, args)?;
    let arms = if arms.is_empty() { cfg.experiments.ablation_arms.clone() } else { arms };
    let seeds = if seeds.is_empty() {
        std::iter::once(cfg.seed).chain(cfg.experiments.ablation_seeds.iter().copied()).collect()
    } else {
        seeds
    };
    let layout = Layout(&run);
    let mut runs = Vec::new();
    for seed in seeds {
        let a = run_ablation(&cfg, &arms, seed, &mut progress)?;
        let dir = layout.ablation_seed(seed);
        wsi_inr::experiments::write_text(&dir.join("table2.csv"), &a.table2_csv())?;
        let per_slide: String = std::iter::once(wsi_inr::pipeline::METRICS_HEADER.to_string())
            .chain(a.per_slide.iter().map(|r| r.csv()))
            .map(|l| l + "\n")
            .collect();
        wsi_inr::experiments::write_text(&dir.join("per_slide.csv"), &per_slide)?;
        runs.push(a);
    }
    let averaged = Ablation::averaged(&runs);
    wsi_inr::experiments::write_text(&layout.table2(), &table2_csv(&averaged))?;
    print!("{}", table2_csv(&averaged));
    Ok(())
}

fn decouple(root: &Path, split: Option<usize>, slide: Option<String>, level: Level) -> Result<()> {
    let run = RunDir::open(root)?;
    let cfg = run.config()?;
    let state = load_trained(&run, &cfg)?;
    let slide = match slide {
        Some(id) => find_slide(&cfg, &id)?,
        None => load_slides(&cfg, Split::Test)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Data("no test slides configured".into()))?,
    };
    let dir = Layout(&run).ito(EvalMode::BaseOpt, slide.id(), Level::Base);
    let encoder = match load_ito_encoder(&cfg, &dir) {
        Ok(e) => e,
        Err(Error::Checkpoint(_)) => {
            let r = run_ito(slide.images(), Level::Base, &state.model, &cfg)?;
            write_ito(&dir, &r)?;
            r.encoder
        }
        Err(e) => return Err(e),
    };
    let d = decouple_hash_levels(slide.images(), level, &state.model, &encoder, split.or(cfg.experiments.split), &cfg)?;
    write_decoupling(&Layout(&run).decouple(), &d)?;
    print!("{}", d.summary_csv());
    Ok(())
}

fn gradcheck_cmd(scope: GradScope, seeds: u64, args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let mut failed = Vec::new();
    for seed in 0..seeds {
        let report = gradcheck(&cfg, scope, seed)?;
        for g in &report.groups {
            println!(
                "seed {seed} {:<10} checked {:>3} kinks {:>2} max_rel_err {:.3e} {}",
                g.group,
                g.checked,
                g.kinks_skipped,
                g.max_rel_err,
                if g.passed(report.tolerance) { "ok" } else { "FAIL" }
            );
        }
        if !report.passed() {
            failed.push(seed);
        }
    }
    if failed.is_empty() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Error::OracleInvalid(format!("gradient check failed for seeds {failed:?}")))
    }
}

fn report(root: &Path) -> Result<()> {
    let run = RunDir::open(root)?;
    let outcome = emit_report(&run)?;
    for f in &outcome.files {
        println!("{}", f.display());
    }
    for m in &outcome.missing {
        eprintln!("missing: {m}");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let root = run_root(&cli.run);
    match cli.command {
        Command::GenData {
            seed_range,
            out,
            split,
            size,
        } => gen_data(seed_range, &out, split, size),
        Command::Train { config, resume } => train(&root, &config, resume),
        Command::Ito { slide, level, mode } => ito(&root, &slide, level, mode),
        Command::Infer { slide, level, mode } => infer(&root, &slide, level, mode),
        Command::Eval { protocol } => eval(&root, &protocol),
        Command::Ablate { config, arms, seeds } => ablate(&root, &config, arms, seeds),
        Command::Decouple { split, slide, level } => decouple(&root, split, slide, level),
        Command::Gradcheck { scope, seeds, config } => gradcheck_cmd(scope, seeds, &config),
        Command::Report => report(&root),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&text).trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
