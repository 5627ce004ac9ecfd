use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use animecolor::config::RunConfig;
use animecolor::diffusion::{self, NoiseSchedule, Reference, Sample, SampleRequest, StageCond};
use animecolor::evalkit::{self, Colorizer, RunMeta, Scenario};
use animecolor::fsio::write_atomic;
use animecolor::latent;
use animecolor::pipeline::{self, loss_log, parse_loss_log, Checkpoint, Prior, RunOptions};
use animecolor::selftest;
use animecolor::synthgen::{self, caption, shard, DataItem, Split, VideoClip};
use animecolor::Error;
use clap::{Args, Parser, Subcommand};

const TRAIN_SHARD: &str = "train.aclp";
const TEST_SHARD: &str = "test.aclp";

#[derive(Parser, Debug)]
#[command(name = "animecolor", version, about = "Reference-based sketch-to-video colorization")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Force single-threaded, bit-reproducible numerics.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Raise log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and test shards.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage.
    Train {
        #[arg(long)]
        stage: u32,
        /// Dataset directory or train shard.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prerequisite checkpoints, or a same-stage checkpoint to resume.
        #[arg(long)]
        from: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many total steps.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Colorize one sketch sequence.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sketch source as `SHARD:INDEX`.
        #[arg(long)]
        sketches: String,
        /// A `.ppm` image or `SHARD:INDEX[:FRAME]`.
        #[arg(long = "ref")]
        reference: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Use the empty caption instead of the clip's caption.
        #[arg(long)]
        null_caption: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on held-out scenarios.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scenario tag; repeat for several (default: standard).
        #[arg(long)]
        scenario: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train all stages and report the five ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the temporal profile of one pixel row.
    Profile(ProfileArgs),
    /// Run the built-in property suites.
    Selftest {
        /// Run only this suite.
        #[arg(long)]
        suite: Option<String>,
    },
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Clip as `SHARD:INDEX`.
    #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
    clip: Option<String>,
    /// Directory of `frame_NNN.ppm` files.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    row: usize,
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { 3 } else { 2 },
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Outcome<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn seed_of(cfg: &RunConfig, flag: Option<u64>, what: &str) -> Outcome<u64> {
    match flag {
        Some(s) => Ok(s),
        None => Ok(cfg.require_seed(what)?),
    }
}

fn run(cli: Cli) -> Outcome {
    if cli.deterministic {
        log::info!("deterministic mode: numerics run on one thread");
    }
    if let Command::Selftest { suite } = &cli.cmd {
        return run_selftest(suite.as_deref());
    }
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Command::GenData { out, seed } => gen_data(&cfg, &out, seed_of(&cfg, seed, "gen-data")?),
        Command::Train {
            stage,
            data,
            out,
            from,
            seed,
            stop_at,
        } => train(&cfg, stage, &data, &out, &from, seed_of(&cfg, seed, "train")?, stop_at),
        Command::Sample {
            ckpt,
            sketches,
            reference,
            seed,
            out,
            null_caption,
            steps,
        } => sample(
            &cfg,
            &ckpt,
            &sketches,
            &reference,
            seed_of(&cfg, seed, "sample")?,
            &out,
            null_caption,
            steps,
        ),
        Command::Eval {
            ckpt,
            scenario,
            out,
            seed,
        } => eval(&cfg, &ckpt, &scenario, &out, seed_of(&cfg, seed, "eval")?),
        Command::Ablate { data, out, seed } => ablate(&cfg, &data, &out, seed_of(&cfg, seed, "ablate")?),
        Command::Profile(p) => profile(&p),
        Command::Selftest { .. } => unreachable!("handled above"),
    }
}

fn run_selftest(only: Option<&str>) -> Outcome {
    let results = match only {
        Some(name) => vec![selftest::run_suite(name).ok_or_else(|| {
            usage(format!("unknown suite `{name}` (expected one of {})", selftest::SUITES.join(", ")))
        })?],
        None => selftest::run_all(),
    };
    let mut failed = 0;
    for r in &results {
        println!("{:<22} {}/{} passed", r.suite, r.passed(), r.cases.len());
        for c in &r.cases {
            println!("  {} {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
        if !r.all_passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure {
            code: 4,
            msg: format!("{failed} suite(s) failed"),
        });
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path, seed: u64) -> Outcome {
    fs::create_dir_all(out).map_err(Error::from)?;
    for (split, count, name) in [
        (Split::Train, cfg.data.train_clips, TRAIN_SHARD),
        (Split::Test, cfg.data.test_clips, TEST_SHARD),
    ] {
        let items = synthgen::generate_split(&cfg.generator, seed, split, count)?;
        shard::write_shard(&out.join(name), &items)?;
        log::info!("wrote {count} {} clips", split.tag());
    }
    println!("wrote {} train and {} test clips to {}", cfg.data.train_clips, cfg.data.test_clips, out.display());
    Ok(())
}

fn train_shard(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(TRAIN_SHARD)
    } else {
        data.to_path_buf()
    }
}

fn loss_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.tsv");
    PathBuf::from(s)
}

fn train(
    cfg: &RunConfig,
    stage: u32,
    data: &Path,
    out: &Path,
    from: &[PathBuf],
    seed: u64,
    stop_at: Option<u64>,
) -> Outcome {
    if !(1..=4).contains(&stage) {
        return Err(usage(format!("--stage must be 1 to 4, got {stage}")));
    }
    let ckpts = from.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>, _>>()?;
    let prior = Prior::for_stage(stage, ckpts)?;
    let resumed_at = match &prior {
        Prior::Resume(c) => Some(c.step),
        _ => None,
    };
    let items = shard::read_shard(&train_shard(data))?;
    let clips: Vec<&VideoClip> = items.iter().map(|i| &i.clip).collect();
    let samples = pipeline::samples_of(&clips, &cfg.model)?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let plan = cfg.train.plan(stage, seed)?;
    let opts = RunOptions {
        stop_at,
        log_every: cfg.train.log_every,
    };
    let run = pipeline::run_stage(&plan, prior, &samples, &cfg.model, &sched, &opts)?;
    let log_path = loss_log_path(out);
    let mut losses = Vec::new();
    if let Some(at) = resumed_at {
        if let Ok(text) = fs::read_to_string(&log_path) {
            losses.extend(parse_loss_log(&text)?.into_iter().filter(|(s, _)| *s <= at));
        }
    }
    losses.extend(run.losses);
    run.checkpoint.save(out)?;
    write_atomic(&log_path, loss_log(&losses).as_bytes())?;
    let last = losses.last().map_or(String::from("-"), |(_, l)| format!("{l:.5}"));
    println!(
        "stage {stage}: step {}/{} (last loss {last}) -> {}",
        run.checkpoint.step,
        plan.iterations,
        out.display()
    );
    Ok(())
}

/// Splits `SHARD:INDEX[:FRAME]` into its parts.
fn parse_clip_ref(s: &str) -> Outcome<(PathBuf, usize, Option<usize>)> {
    let bad = || usage(format!("expected SHARD:INDEX[:FRAME], got `{s}`"));
    let num = |x: &str| x.parse::<usize>().map_err(|_| bad());
    match s.split(':').collect::<Vec<_>>().as_slice() {
        [p, i] if !p.is_empty() => Ok((PathBuf::from(p), num(i)?, None)),
        [p, i, f] if !p.is_empty() => Ok((PathBuf::from(p), num(i)?, Some(num(f)?))),
        _ => Err(bad()),
    }
}

fn load_clip(path: &Path, index: usize) -> Outcome<DataItem> {
    let mut items = shard::read_shard(path)?;
    if index >= items.len() {
        return Err(Error::Input(format!("{} holds {} clips, no index {index}", path.display(), items.len())).into());
    }
    Ok(items.swap_remove(index))
}

fn load_reference(spec: &str, cfg: &RunConfig) -> Outcome<Vec<u8>> {
    let (h, w) = (cfg.model.height, cfg.model.width);
    if spec.to_ascii_lowercase().ends_with(".ppm") {
        let bytes = fs::read(spec).map_err(|e| Error::Input(format!("{spec}: {e}")))?;
        let (ph, pw, rgb) = evalkit::read_ppm(&bytes)?;
        if (ph, pw) != (h, w) {
            return Err(Error::Input(format!("reference is {ph}x{pw}, the model expects {h}x{w}")).into());
        }
        return Ok(rgb);
    }
    let (path, index, frame) = parse_clip_ref(spec)?;
    let clip = load_clip(&path, index)?.clip;
    let f = frame.unwrap_or(clip.reference_index);
    if f >= clip.frames {
        return Err(Error::Input(format!("clip has {} frames, no frame {f}", clip.frames)).into());
    }
    Ok(clip.frame(f).to_vec())
}

/// Pathways a checkpoint of `stage` was trained with.
fn cond_of(ckpt: &Checkpoint) -> Outcome<StageCond> {
    Ok(StageCond::for_stage(ckpt.stage)?)
}

#[allow(clippy::too_many_arguments)]
fn sample(
    cfg: &RunConfig,
    ckpt_path: &Path,
    sketches: &str,
    reference: &str,
    seed: u64,
    out: &Path,
    null_caption: bool,
    steps: Option<usize>,
) -> Outcome {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (path, index, frame) = parse_clip_ref(sketches)?;
    if frame.is_some() {
        return Err(usage("--sketches takes SHARD:INDEX"));
    }
    let clip = load_clip(&path, index)?.clip;
    let m = &cfg.model;
    if (clip.frames, clip.height, clip.width) != (m.frames, m.height, m.width) {
        return Err(Error::Input(format!(
            "clip of {}x{}x{} does not fit a model for {}x{}x{}",
            clip.frames, clip.height, clip.width, m.frames, m.height, m.width
        ))
        .into());
    }
    let rgb = load_reference(reference, cfg)?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let steps = steps.unwrap_or_else(|| cfg.eval.steps(&cfg.schedule));
    let request = SampleRequest {
        sketch: latent::patchify(&clip.sketch, clip.frames, clip.height, clip.width, 1, m.patch)?,
        caption: if null_caption { caption::null_caption() } else { clip.caption.clone() },
        reference: Some(Reference::from_rgb(&rgb, m.height, m.width, m, &cfg.generator.xdog)?),
        seed,
    };
    let frames = diffusion::ddim_sample(&ckpt.params, m, &sched, cond_of(&ckpt)?, &[request], steps, false)?
        .pop()
        .ok_or_else(|| Error::Input("sampler returned nothing".into()))?;
    write_frames(out, &frames, m.frames, m.height, m.width)?;
    println!("wrote {} frames to {}", m.frames, out.display());
    Ok(())
}

fn write_frames(out: &Path, rgb: &[u8], frames: usize, height: usize, width: usize) -> Outcome {
    fs::create_dir_all(out).map_err(Error::from)?;
    let n = height * width * 3;
    for t in 0..frames {
        evalkit::write_ppm(&out.join(format!("frame_{t:03}.ppm")), &rgb[t * n..(t + 1) * n], height, width)?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig, ckpt_path: &Path, scenarios: &[String], out: &Path, seed: u64) -> Outcome {
    let scenarios = if scenarios.is_empty() {
        vec![Scenario::Standard]
    } else {
        scenarios.iter().map(|s| Scenario::parse(s)).collect::<Result<Vec<_>, _>>()?
    };
    let ckpt = Checkpoint::load(ckpt_path)?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let model = Colorizer {
        store: &ckpt.params,
        cfg: &cfg.model,
        sched: &sched,
        cond: cond_of(&ckpt)?,
        steps: cfg.eval.steps(&cfg.schedule),
        batch: cfg.eval.batch,
    };
    let meta = RunMeta {
        checkpoint: ckpt_path.display().to_string(),
        seed,
        split: Split::Test.tag().into(),
    };
    let report = evalkit::evaluate(&model, &scenarios, &cfg.generator, seed, &cfg.eval, meta)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    report.write(out, "eval")?;
    print!("{}", report.table());
    Ok(())
}

fn ablate(cfg: &RunConfig, data: &Path, out: &Path, seed: u64) -> Outcome {
    let items = shard::read_shard(&train_shard(data))?;
    let samples: Vec<Sample> = items
        .iter()
        .map(|i| Sample::from_clip(&i.clip, &cfg.model))
        .collect::<Result<_, _>>()?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let opts = RunOptions {
        stop_at: None,
        log_every: cfg.train.log_every,
    };
    let (stores, report) = pipeline::run_ablation(
        &cfg.train,
        seed,
        &samples,
        &cfg.model,
        &sched,
        &cfg.generator,
        &cfg.eval,
        cfg.eval.steps(&cfg.schedule),
        &opts,
    )?;
    fs::create_dir_all(out).map_err(Error::from)?;
    for (k, s) in stores.stages.iter().enumerate() {
        if let Ok(c) = s {
            c.save(&out.join(format!("stage{}.ckpt", k + 1)))?;
        }
    }
    for row in &report.rows {
        if let Ok(r) = &row.report {
            let stem = format!("variant{}", row.variant.label().trim_matches(|c| c == '(' || c == ')'));
            r.write(out, &stem)?;
        }
    }
    let table = report.table();
    write_atomic(&out.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn read_frames_dir(dir: &Path) -> Outcome<(usize, usize, usize, Vec<u8>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no .ppm frames in {}", dir.display())).into());
    }
    let mut rgb = Vec::new();
    let mut dims = None;
    for p in &paths {
        let (h, w, px) = evalkit::read_ppm(&fs::read(p).map_err(Error::from)?)?;
        if dims.is_some_and(|d| d != (h, w)) {
            return Err(Error::Input(format!("{} has a different size", p.display())).into());
        }
        dims = Some((h, w));
        rgb.extend(px);
    }
    let (h, w) = dims.unwrap_or_default();
    Ok((paths.len(), h, w, rgb))
}

fn profile(p: &ProfileArgs) -> Outcome {
    let (frames, h, w, rgb) = match (&p.clip, &p.frames) {
        (Some(c), _) => {
            let (path, index, _) = parse_clip_ref(c)?;
            let clip = load_clip(&path, index)?.clip;
            (clip.frames, clip.height, clip.width, clip.rgb)
        }
        (None, Some(dir)) => read_frames_dir(dir)?,
        (None, None) => return Err(usage("profile needs --clip or --frames")),
    };
    let prof = evalkit::temporal_profile(&rgb, frames, h, w, p.row)?;
    evalkit::write_ppm(&p.out, &prof, frames, w)?;
    println!("wrote {frames}x{w} profile of row {} to {}", p.row, p.out.display());
    Ok(())
}
