//! `blobtrack`: simulate, track, harvest patches, train, evaluate and render.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, ensure, Context, Result};
use blobtrack::classifier::{self, Dataset};
use blobtrack::evaluation::{self, TABLE_HEADER};
use blobtrack::events::{
    generate_scene, open_events, read_events, scenes, write_events, write_truth_csv, EventFormat, SceneConfig,
};
use blobtrack::manager::{self, read_track_csv, Validator};
use blobtrack::{Mlp, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "blobtrack", version, about = "Event-camera blob detection, validation and tracking")]
#[command(after_help = "Any configuration key can be overridden as --section.key=value, e.g. --detector.gamma=0.25.")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run seed; replaces the `seed` key and the seed of a scene file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for commands given several input files.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic event stream and its ground truth.
    Simulate(SimulateArgs),
    /// Run the tracker over event files.
    Track(TrackArgs),
    /// Collect labelled 28x28 patches from candidate tracks.
    HarvestPatches(HarvestArgs),
    /// Train the patch classifier.
    Train(TrainArgs),
    /// Score track output against a labelled event stream.
    Evaluate(EvaluateArgs),
    /// Draw events and tracks into PNG frames.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    SingleBlob,
    Crossing,
    Swarm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Binary,
    Csv,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scene description (JSON).
    #[arg(long, value_name = "FILE", conflicts_with = "preset", required_unless_present = "preset")]
    scene: Option<PathBuf>,
    /// Built-in scene, seeded by the run seed.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, value_enum, default_value_t = Format::Binary)]
    format: Format,
    /// Output prefix: writes PREFIX.aevt (or .csv), PREFIX.truth.csv and PREFIX.scene.json.
    #[arg(long, value_name = "PREFIX")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(required = true, value_name = "EVENTS")]
    inputs: Vec<PathBuf>,
    /// Classifier weights; defaults to `paths.model`.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Validate tracks with the event-count thresholds instead of the classifier.
    #[arg(long, conflicts_with = "model")]
    no_classifier: bool,
    /// Output prefix for a single input, or a directory for several.
    #[arg(long, value_name = "PREFIX")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HarvestArgs {
    /// Labelled event files (as written by `simulate`).
    #[arg(required = true, value_name = "EVENTS")]
    inputs: Vec<PathBuf>,
    /// Dataset directory; patches go to pos/ and neg/.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Keep a random subset of at most N patches per class.
    #[arg(long, value_name = "N")]
    per_class: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory with pos/ and neg/.
    #[arg(value_name = "DIR")]
    dataset: PathBuf,
    /// Model file to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Per-epoch report; defaults to MODEL.report.csv.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Track output from `track`.
    #[arg(value_name = "TRACKS")]
    tracks: PathBuf,
    /// Labelled event stream serving as ground truth.
    #[arg(long, value_name = "EVENTS")]
    events: PathBuf,
    /// Match radius in pixels; replaces `evaluation.epsilon`.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Row name in the printed table; defaults to the track file name.
    #[arg(long)]
    name: Option<String>,
    /// Output prefix: writes PREFIX.metrics.csv and PREFIX.metrics.json.
    #[arg(long, value_name = "PREFIX")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(value_name = "EVENTS")]
    events: PathBuf,
    #[arg(value_name = "TRACKS")]
    tracks: PathBuf,
    /// Frame directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Pulls `--section.key=value` (or `--section.key value`) out of the
/// arguments. A flag is an override when its name contains a dot.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<String>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    let mut positional_only = false;
    while let Some(arg) = iter.next() {
        let Some(text) = arg.to_str().filter(|_| !positional_only) else {
            rest.push(arg);
            continue;
        };
        if text == "--" {
            positional_only = true;
            rest.push(arg);
            continue;
        }
        let Some(flag) = text.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let name = flag.split_once('=').map_or(flag, |(n, _)| n);
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        if flag.contains('=') {
            overrides.push(flag.to_string());
        } else {
            let value = iter
                .next()
                .and_then(|v| v.into_string().ok())
                .with_context(|| format!("--{name} needs a value"))?;
            overrides.push(format!("{name}={value}"));
        }
    }
    Ok((rest, overrides))
}

fn main() {
    if let Err(e) = try_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn try_main() -> Result<()> {
    let (args, mut overrides) = split_overrides(std::env::args_os().collect())?;
    let cli = Cli::parse_from(args);
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides).context("loading configuration")?;
    if cli.dump_config {
        println!("{}", config.to_json());
        return Ok(());
    }
    ensure!(cli.jobs >= 1, "--jobs must be at least 1");
    let Some(command) = cli.command else {
        bail!("no command given (try --help)");
    };
    match command {
        Command::Simulate(a) => simulate(&config, cli.seed, &a),
        Command::Track(a) => track(&config, cli.jobs, &a),
        Command::HarvestPatches(a) => harvest(&config, cli.jobs, &a),
        Command::Train(a) => train(&config, &a),
        Command::Evaluate(a) => evaluate(&config, &a),
        Command::Render(a) => render(&config, &a),
    }
}

/// `prefix` with `suffix` appended to the file name.
fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::with_capacity(1 << 16, file))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "events".into(), |s| s.to_string_lossy().into_owned())
}

/// Runs `f` over every input on up to `jobs` threads. All inputs are
/// attempted; the first failure in input order is returned.
fn for_each_input<T, F>(inputs: &[PathBuf], jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Path) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..inputs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(inputs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = inputs.get(i) else { break };
                let r = f(path).with_context(|| format!("processing {}", path.display()));
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every input visited")).collect()
}

fn simulate(config: &RunConfig, seed: Option<u64>, a: &SimulateArgs) -> Result<()> {
    let scene_config = match (&a.scene, a.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut scene: SceneConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing scene {}", path.display()))?;
            if let Some(seed) = seed {
                scene.seed = seed;
            }
            scene
        }
        (None, Some(Preset::SingleBlob)) => scenes::single_blob(config.seed),
        (None, Some(Preset::Crossing)) => scenes::crossing(config.seed),
        (None, Some(Preset::Swarm)) => scenes::swarm(&scenes::SwarmOptions::default(), config.seed),
        (None, None) => bail!("pass --scene or --preset"),
    };
    let scene = generate_scene(&scene_config)?;
    let (format, ext) = match a.format {
        Format::Binary => (EventFormat::Binary, ".aevt"),
        Format::Csv => (EventFormat::Csv, ".csv"),
    };
    let events_path = with_suffix(&a.out, ext);
    create(&events_path)?;
    write_events(&events_path, format, scene.geometry, &scene.events, true)
        .with_context(|| format!("writing {}", events_path.display()))?;
    let truth_path = with_suffix(&a.out, ".truth.csv");
    write_truth_csv(create(&truth_path)?, &scene.truth).with_context(|| format!("writing {}", truth_path.display()))?;
    let scene_path = with_suffix(&a.out, ".scene.json");
    let mut w = create(&scene_path)?;
    serde_json::to_writer_pretty(&mut w, &scene_config)?;
    writeln!(w)?;
    w.flush()?;
    println!(
        "{} events on {}x{} over {} s -> {}",
        scene.events.len(),
        scene.geometry.width,
        scene.geometry.height,
        scene_config.duration_s,
        events_path.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Mlp> {
    Mlp::load(path).with_context(|| format!("loading classifier model {}", path.display()))
}

fn track(config: &RunConfig, jobs: usize, a: &TrackArgs) -> Result<()> {
    let model = if a.no_classifier {
        None
    } else {
        let path = a.model.as_ref().or(config.paths.model.as_ref()).context(
            "no classifier model: pass --model, set paths.model, or run with --no-classifier",
        )?;
        Some(load_model(path)?)
    };
    let several = a.inputs.len() > 1;
    let tracker = config.tracker();
    let summaries = for_each_input(&a.inputs, jobs, |input| {
        let prefix = if several { a.out.join(stem(input)) } else { a.out.clone() };
        let validator = match &model {
            Some(m) => Validator::Classifier(Box::new(m.clone())),
            None => Validator::Thresholds,
        };
        let mut reader = open_events(input, None, config.read_options())?;
        let geometry = reader.geometry();
        let tracks_path = with_suffix(&prefix, ".tracks.csv");
        let mut out = create(&tracks_path)?;
        let result = manager::run(reader.by_ref(), geometry, &tracker, validator, &mut out)?;
        let summary_path = with_suffix(&prefix, ".summary.json");
        let mut w = create(&summary_path)?;
        let summary = serde_json::json!({
            "input": input,
            "validation": if model.is_some() { "classifier" } else { "thresholds" },
            "summary": result.summary,
        });
        serde_json::to_writer_pretty(&mut w, &summary)?;
        writeln!(w)?;
        w.flush()?;
        Ok(format!(
            "{}: {} events, {} tracks promoted, {} records -> {}",
            input.display(),
            result.summary.stats.events,
            result.summary.stats.promoted,
            result.summary.records,
            tracks_path.display()
        ))
    })?;
    for line in summaries {
        println!("{line}");
    }
    Ok(())
}

fn harvest(config: &RunConfig, jobs: usize, a: &HarvestArgs) -> Result<()> {
    let tracker = config.tracker();
    let per_input = for_each_input(&a.inputs, jobs, |input| {
        let mut reader = open_events(input, None, config.read_options())?;
        let geometry = reader.geometry();
        let result = manager::run(reader.by_ref(), geometry, &tracker, Validator::<f64>::Harvest, &mut std::io::sink())?;
        ensure!(reader.is_labelled(), "{} has no label column", input.display());
        Ok(result.harvested)
    })?;
    let mut patches = Vec::new();
    for (input, harvested) in a.inputs.iter().zip(per_input) {
        let name = stem(input);
        patches.extend(harvested.into_iter().map(|p| (name.clone(), p)));
    }
    if let Some(n) = a.per_class {
        patches.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        let mut kept = [0usize; 2];
        patches.retain(|(_, p)| {
            let k = &mut kept[(p.label != 0) as usize];
            *k += 1;
            *k <= n
        });
        patches.sort_by(|(a, p), (b, q)| (a, p.track_id, p.t_us).cmp(&(b, q.track_id, q.t_us)));
    }
    let mut counts = [0usize; 2];
    for (name, p) in &patches {
        let label = p.label != 0;
        counts[label as usize] += 1;
        let file = format!("{name}_{:06}_{:010}", p.track_id, p.t_us);
        Dataset::write_sample(&a.out, label, &file, &p.input)?;
    }
    println!("{} positive and {} negative patches -> {}", counts[1], counts[0], a.out.display());
    Ok(())
}

fn train(config: &RunConfig, a: &TrainArgs) -> Result<()> {
    let data = Dataset::load_dir(&a.dataset).with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let (model, report) = classifier::train::<f64>(&data, &config.train_config())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".report.csv"));
    report.write_csv(create(&report_path)?)?;
    let accuracy = report
        .selected_validation_accuracy()
        .map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} samples ({} positive), epoch {} kept, validation accuracy {accuracy}, {:.1} s -> {}",
        data.len(),
        data.positives(),
        report.selected_epoch,
        report.wall_clock_s,
        a.out.display()
    );
    Ok(())
}

fn read_tracks(path: &Path) -> Result<Vec<manager::TrackRecord<f64>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_track_csv(BufReader::new(file)).with_context(|| format!("reading tracks {}", path.display()))
}

fn evaluate(config: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    let mut params = config.evaluation.clone();
    if let Some(eps) = a.epsilon {
        params.epsilon = eps;
    }
    params.validate().map_err(anyhow::Error::msg)?;
    let records = read_tracks(&a.tracks)?;
    let stream = read_events(&a.events, None, config.read_options())
        .with_context(|| format!("reading events {}", a.events.display()))?;
    ensure!(stream.labelled, "{} has no label column to serve as ground truth", a.events.display());
    let report = evaluation::score(&records, &stream.events, &params)?;
    report.write_csv(create(&with_suffix(&a.out, ".metrics.csv"))?)?;
    let mut w = create(&with_suffix(&a.out, ".metrics.json"))?;
    report.write_json(&mut w)?;
    writeln!(w)?;
    w.flush()?;
    let name = a.name.clone().unwrap_or_else(|| stem(&a.tracks));
    println!("{TABLE_HEADER}");
    println!("{}", report.table_row(&name));
    Ok(())
}

fn render(config: &RunConfig, a: &RenderArgs) -> Result<()> {
    let records = read_tracks(&a.tracks)?;
    let stream = read_events(&a.events, None, config.read_options())
        .with_context(|| format!("reading events {}", a.events.display()))?;
    let duration = stream.events.last().map_or(0, |e| e.event.t + 1);
    let frames = evaluation::render_to_dir(
        &stream.events,
        &records,
        stream.geometry,
        duration,
        config.evaluation.frame_period_us,
        &a.out,
    )?;
    println!("{frames} frames -> {}", a.out.display());
    Ok(())
}
