mod manifest;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Serialize};

use peerlabel::geom::Box3;
use peerlabel::metrics::{pr_curve, EvalConfig, MetricsReport};
use peerlabel::net::{load_weights, save_weights, NetSpec, TrainConfig};
use peerlabel::pipeline::{
    annotated_subset, detect_all, eval_ground_truth, refine_reference_labels, run_pipeline,
    PipelineConfig, Prepared,
};
use peerlabel::ranker::{
    gen_training_samples, train_ranker, RankerSample, RefineMode, SampleConfig,
};
use peerlabel::simkit::io::{
    frames_path, read_frames, read_jsonl, read_labels, reflabels_path, write_frames, write_jsonl,
    write_labels,
};
use peerlabel::simkit::{
    distance_recall_curve, generate_sequence, make_reference_predictions, LabeledBox, NoiseModel,
    SceneFrame, WorldConfig,
};

use manifest::{write_atomic, Recorder};

/// Train a LiDAR detector from a nearby agent's shared box predictions.
#[derive(Parser, Debug)]
#[command(name = "peerlabel", version)]
struct Cli {
    /// Seed for every stochastic step; required by stochastic commands.
    #[arg(long, global = true, env = "POP_SEED")]
    seed: Option<u64>,
    /// Directory all relative paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker threads for per-frame work. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-agent dataset and the reference's predictions.
    Simulate(SimulateArgs),
    /// Build ranker training samples from the annotated frames of a dataset.
    GenRankerData(GenRankerDataArgs),
    /// Train the box ranker.
    TrainRanker(TrainRankerArgs),
    /// Basic-filter, refine and threshold the reference labels.
    Refine(RefineArgs),
    /// Run both self-training rounds and write the final detector and labels.
    Selftrain(SelftrainArgs),
    /// Score labels or a detector against a dataset's ground truth.
    Evaluate(EvaluateArgs),
    /// Render a BEV scene, distance-recall curve, PR curves or an AP table as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// World config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference noise model JSON; missing fields take defaults.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Override the number of frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Dataset name; writes <NAME>.frames.jsonl and <NAME>.reflabels.jsonl.
    #[arg(long, default_value = "train")]
    name: String,
}

#[derive(Args, Debug)]
struct GenRankerDataArgs {
    /// Dataset name.
    #[arg(long, default_value = "train")]
    dataset: String,
    /// Annotated frames to draw samples from, spread evenly over clips.
    #[arg(long, default_value_t = 40)]
    n_frames: usize,
    /// Frames per clip in the dataset.
    #[arg(long, default_value_t = 10)]
    frames_per_clip: usize,
    /// Candidates per ground-truth box.
    #[arg(long, default_value_t = 100)]
    per_box: usize,
    #[arg(long, default_value = "ranker_samples.jsonl")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainRankerArgs {
    #[arg(long, default_value = "ranker_samples.jsonl")]
    samples: PathBuf,
    #[arg(long, default_value = "ranker.weights")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Final learning rate as a fraction of --lr (cosine schedule).
    #[arg(long, default_value_t = 0.01)]
    final_lr_ratio: f64,
    /// Per-point MLP widths.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    widths: Vec<usize>,
    /// Hidden width of the two output heads.
    #[arg(long, default_value_t = 32)]
    head_hidden: usize,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[arg(long, default_value = "train")]
    dataset: String,
    #[arg(long, default_value = "ranker.weights")]
    ranker: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::C2f)]
    mode: ModeArg,
    /// Pipeline config JSON for filter and refinement settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "refined.labels.jsonl")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Naive,
    C2f,
}

#[derive(Args, Debug)]
struct SelftrainArgs {
    #[arg(long, default_value = "train")]
    dataset: String,
    #[arg(long, default_value = "ranker.weights")]
    ranker: PathBuf,
    /// Pipeline config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Held-out dataset name to measure detector AP on.
    #[arg(long)]
    eval: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "selftrain")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, default_value = "train")]
    dataset: String,
    /// Label or detection file (JSONL, one row per frame).
    #[arg(
        long,
        conflicts_with = "detector",
        required_unless_present = "detector"
    )]
    labels: Option<PathBuf>,
    /// Detector weights to run on the dataset instead of reading labels.
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Pipeline config JSON (detector settings and ROI) used with --detector.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ego returns a ground-truth box needs to count.
    #[arg(long, default_value_t = 5)]
    min_gt_points: u32,
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlotKind {
    Scene,
    DistanceRecall,
    Pr,
    ApBins,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long, value_enum, default_value_t = PlotKind::Scene)]
    kind: PlotKind,
    #[arg(long, default_value = "train")]
    dataset: String,
    /// Frame index for the scene plot.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Reference labels; defaults to the dataset's own.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Refined labels drawn as a separate layer or series.
    #[arg(long)]
    refined: Option<PathBuf>,
    /// Metrics JSON for the AP table plot.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, default_value = "plot.svg")]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl From<peerlabel::Error> for CliError {
    fn from(e: peerlabel::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

struct Ctx {
    workdir: PathBuf,
    seed: Option<u64>,
    threads: usize,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn seed(&self, command: &str) -> CliResult<u64> {
        self.seed.ok_or_else(|| {
            CliError::Usage(format!(
                "`{command}` is stochastic: pass --seed or set POP_SEED"
            ))
        })
    }

    fn recorder(&self, command: &str) -> Recorder {
        Recorder::new(command, &self.workdir, self.seed, self.threads)
    }

    fn frames(&self, name: &str, rec: &mut Recorder) -> CliResult<Vec<SceneFrame>> {
        let p = frames_path(&self.workdir, name);
        let frames = read_frames(&p)?;
        if frames.is_empty() {
            return Err(io_err(&p, "no frames"));
        }
        rec.input(&p).map_err(|e| io_err(&p, e))?;
        Ok(frames)
    }
}

fn read_json<T: DeserializeOwned + Default>(
    path: Option<&Path>,
    rec: &mut Recorder,
) -> CliResult<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
    rec.input(p).map_err(|e| io_err(p, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if !cli.workdir.is_dir() {
        return Err(io_err(&cli.workdir, "workdir is not a directory"));
    }
    let ctx = Ctx {
        workdir: cli.workdir,
        seed: cli.seed,
        threads: cli.threads,
    };
    match cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::GenRankerData(a) => gen_ranker_data(&ctx, a),
        Command::TrainRanker(a) => train_ranker_cmd(&ctx, a),
        Command::Refine(a) => refine(&ctx, a),
        Command::Selftrain(a) => selftrain(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Plot(a) => plot(&ctx, a),
    }
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> CliResult<()> {
    let seed = ctx.seed("simulate")?;
    let mut rec = ctx.recorder("simulate");
    let mut world: WorldConfig = read_json(a.config.map(|p| ctx.path(&p)).as_deref(), &mut rec)?;
    let noise: NoiseModel = read_json(a.noise.map(|p| ctx.path(&p)).as_deref(), &mut rec)?;
    if let Some(n) = a.frames {
        world.n_frames = n;
    }
    rec.config(&serde_json::json!({ "world": world, "noise": noise }));
    let frames = generate_sequence(&world, seed)?;
    rec.stage("generate");
    let labels = make_reference_predictions(&frames, &noise, seed)?;
    rec.stage("reference");
    let fp = frames_path(&ctx.workdir, &a.name);
    let lp = reflabels_path(&ctx.workdir, &a.name);
    write_frames(&fp, &frames)?;
    write_labels(&lp, &frames, &labels)?;
    rec.stage("write");
    for p in [&fp, &lp] {
        rec.output(p).map_err(|e| io_err(p, e))?;
    }
    let mp = ctx
        .workdir
        .join(format!("{}.simulate.manifest.json", a.name));
    rec.finish(&mp).map_err(|e| io_err(&mp, e))?;
    println!("wrote {} frames to {}", frames.len(), fp.display());
    Ok(())
}

fn gen_ranker_data(ctx: &Ctx, a: GenRankerDataArgs) -> CliResult<()> {
    let seed = ctx.seed("gen-ranker-data")?;
    if a.n_frames == 0 || a.frames_per_clip == 0 {
        return Err(CliError::Usage(
            "--n-frames and --frames-per-clip must be >= 1".into(),
        ));
    }
    let mut rec = ctx.recorder("gen-ranker-data");
    let frames = ctx.frames(&a.dataset, &mut rec)?;
    if frames.len() < a.n_frames {
        return Err(CliError::Data(format!(
            "dataset `{}` has {} frames, fewer than --n-frames {}",
            a.dataset,
            frames.len(),
            a.n_frames
        )));
    }
    let clips = frames.len().div_ceil(a.frames_per_clip);
    let per_clip = a.n_frames.div_ceil(clips);
    let idx: Vec<usize> = annotated_subset(frames.len(), a.frames_per_clip, per_clip)
        .into_iter()
        .take(a.n_frames)
        .collect();
    let annotated: Vec<SceneFrame> = idx.iter().map(|&i| frames[i].clone()).collect();
    let cfg = SampleConfig {
        per_box: a.per_box,
        ..SampleConfig::default()
    };
    rec.config(&serde_json::json!({ "samples": cfg, "annotated_frames": idx }));
    let samples = gen_training_samples(&annotated, &cfg, seed)?;
    rec.stage("samples");
    let out = ctx.path(&a.out);
    write_jsonl(&out, &samples)?;
    rec.output(&out).map_err(|e| io_err(&out, e))?;
    rec.finish(&manifest_path(&out))
        .map_err(|e| io_err(&out, e))?;
    println!(
        "wrote {} samples from {} frames to {}",
        samples.len(),
        idx.len(),
        out.display()
    );
    Ok(())
}

fn train_ranker_cmd(ctx: &Ctx, a: TrainRankerArgs) -> CliResult<()> {
    let seed = ctx.seed("train-ranker")?;
    let spec = NetSpec {
        point_mlp_widths: a.widths,
        head_hidden: a.head_hidden,
        extra_feature_dim: 3,
    };
    let train = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        final_lr_ratio: a.final_lr_ratio,
    };
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rec = ctx.recorder("train-ranker");
    rec.config(&serde_json::json!({ "net": spec, "train": train }));
    let sp = ctx.path(&a.samples);
    let samples: Vec<RankerSample> = read_jsonl(&sp)?;
    rec.input(&sp).map_err(|e| io_err(&sp, e))?;
    rec.stage("load");
    let w = train_ranker(&samples, &spec, &train, seed)?;
    rec.stage("train");
    let out = ctx.path(&a.out);
    save_weights(&w, &out)?;
    rec.output(&out).map_err(|e| io_err(&out, e))?;
    rec.finish(&manifest_path(&out))
        .map_err(|e| io_err(&out, e))?;
    println!(
        "trained ranker on {} samples, wrote {}",
        samples.len(),
        out.display()
    );
    Ok(())
}

fn refine(ctx: &Ctx, a: RefineArgs) -> CliResult<()> {
    let seed = ctx.seed("refine")?;
    let mut rec = ctx.recorder("refine");
    let mut cfg: PipelineConfig = read_json(a.config.map(|p| ctx.path(&p)).as_deref(), &mut rec)?;
    cfg.step1_refine_mode = match a.mode {
        ModeArg::Naive => RefineMode::Naive,
        ModeArg::C2f => RefineMode::C2f,
    };
    cfg.validate()?;
    rec.config(&cfg);
    let frames = ctx.frames(&a.dataset, &mut rec)?;
    let lp = reflabels_path(&ctx.workdir, &a.dataset);
    let labels = read_labels(&lp, &frames)?;
    rec.input(&lp).map_err(|e| io_err(&lp, e))?;
    let rp = ctx.path(&a.ranker);
    let ranker = load_weights(&rp)?;
    rec.input(&rp).map_err(|e| io_err(&rp, e))?;
    let data = Prepared::new(&frames, &cfg.detector, seed)?;
    rec.stage("prepare");
    let refined = refine_reference_labels(&data, &labels, &ranker, &cfg, seed)?;
    rec.stage("refine");
    let out = ctx.path(&a.out);
    write_labels(&out, &frames, &refined)?;
    rec.output(&out).map_err(|e| io_err(&out, e))?;
    rec.finish(&manifest_path(&out))
        .map_err(|e| io_err(&out, e))?;
    let kept: usize = refined.iter().map(Vec::len).sum();
    let total: usize = labels.iter().map(Vec::len).sum();
    println!(
        "kept {kept} of {total} reference labels, wrote {}",
        out.display()
    );
    Ok(())
}

fn selftrain(ctx: &Ctx, a: SelftrainArgs) -> CliResult<()> {
    let seed = ctx.seed("selftrain")?;
    let mut rec = ctx.recorder("selftrain");
    let cfg: PipelineConfig = read_json(a.config.map(|p| ctx.path(&p)).as_deref(), &mut rec)?;
    cfg.validate()?;
    rec.config(&cfg);
    let frames = ctx.frames(&a.dataset, &mut rec)?;
    let lp = reflabels_path(&ctx.workdir, &a.dataset);
    let labels = read_labels(&lp, &frames)?;
    rec.input(&lp).map_err(|e| io_err(&lp, e))?;
    let rp = ctx.path(&a.ranker);
    let ranker = load_weights(&rp)?;
    rec.input(&rp).map_err(|e| io_err(&rp, e))?;
    let data = Prepared::new(&frames, &cfg.detector, seed)?;
    rec.stage("prepare");
    let result = run_pipeline(&data, &labels, &ranker, &cfg, seed)?;
    rec.stage("pipeline");

    let dir = ctx.path(&a.out);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let eval_cfg = EvalConfig {
        roi: cfg.roi(),
        ..EvalConfig::default()
    };
    let train_gt = eval_ground_truth(&frames, eval_cfg.min_gt_points);
    let mut metrics = serde_json::Map::new();
    let mut outputs = Vec::new();
    let s1 = dir.join("step1.labels.jsonl");
    write_labels(&s1, &frames, &result.step1.labels)?;
    metrics.insert(
        "step1_labels".into(),
        report(&result.step1.labels, &train_gt, &eval_cfg),
    );
    outputs.push(s1);
    let s1w = dir.join("step1.detector.weights");
    save_weights(&result.step1.detector, &s1w)?;
    outputs.push(s1w);
    if let Some(s2) = &result.step2 {
        let p = dir.join("step2.labels.jsonl");
        write_labels(&p, &frames, &s2.labels)?;
        metrics.insert(
            "step2_labels".into(),
            report(&s2.labels, &train_gt, &eval_cfg),
        );
        outputs.push(p);
    }
    let det = dir.join("detector.weights");
    save_weights(&result.final_step().detector, &det)?;
    outputs.push(det);
    if let Some(name) = &a.eval {
        let eval_frames = ctx.frames(name, &mut rec)?;
        let edata = Prepared::new(&eval_frames, &cfg.detector, seed)?;
        let dets = detect_all(&result.final_step().detector, &edata, &cfg.detector)?;
        let gt = eval_ground_truth(&eval_frames, eval_cfg.min_gt_points);
        metrics.insert("detector".into(), report(&dets, &gt, &eval_cfg));
        rec.stage("evaluate");
    }
    let mp = dir.join("metrics.json");
    write_json(&mp, &metrics)?;
    outputs.push(mp);
    for p in &outputs {
        rec.output(p).map_err(|e| io_err(p, e))?;
    }
    let man = dir.join("manifest.json");
    rec.finish(&man).map_err(|e| io_err(&man, e))?;
    println!("self-training done, outputs in {}", dir.display());
    Ok(())
}

fn report(labels: &[Vec<LabeledBox>], gt: &[Vec<Box3>], cfg: &EvalConfig) -> serde_json::Value {
    serde_json::to_value(MetricsReport::evaluate(labels, gt, cfg)).unwrap_or_default()
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> CliResult<()> {
    let mut rec = ctx.recorder("evaluate");
    let cfg: PipelineConfig = read_json(a.config.map(|p| ctx.path(&p)).as_deref(), &mut rec)?;
    cfg.validate()?;
    let eval_cfg = EvalConfig {
        roi: cfg.roi(),
        min_gt_points: a.min_gt_points,
        ..EvalConfig::default()
    };
    rec.config(&eval_cfg);
    let frames = ctx.frames(&a.dataset, &mut rec)?;
    let labels = match (&a.labels, &a.detector) {
        (Some(l), _) => {
            let p = ctx.path(l);
            let v = read_labels(&p, &frames)?;
            rec.input(&p).map_err(|e| io_err(&p, e))?;
            v
        }
        (None, Some(d)) => {
            let seed = ctx.seed("evaluate --detector")?;
            let p = ctx.path(d);
            let w = load_weights(&p)?;
            rec.input(&p).map_err(|e| io_err(&p, e))?;
            let data = Prepared::new(&frames, &cfg.detector, seed)?;
            detect_all(&w, &data, &cfg.detector)?
        }
        (None, None) => return Err(CliError::Usage("pass --labels or --detector".into())),
    };
    rec.stage("load");
    let gt = eval_ground_truth(&frames, eval_cfg.min_gt_points);
    let r = MetricsReport::evaluate(&labels, &gt, &eval_cfg);
    rec.stage("evaluate");
    let out = ctx.path(&a.out);
    write_json(&out, &r)?;
    rec.output(&out).map_err(|e| io_err(&out, e))?;
    rec.finish(&manifest_path(&out))
        .map_err(|e| io_err(&out, e))?;
    for e in r
        .entries
        .iter()
        .filter(|e| e.bin == "roi" || e.bin == "0-80")
    {
        match e.value {
            Some(v) => println!("{} @{} [{}]: {v:.4}", e.metric, e.iou, e.bin),
            None => println!("{} @{} [{}]: n/a", e.metric, e.iou, e.bin),
        }
    }
    Ok(())
}

fn plot(ctx: &Ctx, a: PlotArgs) -> CliResult<()> {
    let mut rec = ctx.recorder("plot");
    let roi = PipelineConfig::default().roi();
    let svg = if let PlotKind::ApBins = a.kind {
        let Some(m) = &a.metrics else {
            return Err(CliError::Usage("--kind ap-bins needs --metrics".into()));
        };
        let p = ctx.path(m);
        let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        let r: MetricsReport = serde_json::from_str(&text).map_err(|e| io_err(&p, e))?;
        rec.input(&p).map_err(|e| io_err(&p, e))?;
        ap_bins_chart(&r)
    } else {
        let frames = ctx.frames(&a.dataset, &mut rec)?;
        let lp = a
            .labels
            .as_ref()
            .map(|p| ctx.path(p))
            .unwrap_or_else(|| reflabels_path(&ctx.workdir, &a.dataset));
        let raw = read_labels(&lp, &frames)?;
        rec.input(&lp).map_err(|e| io_err(&lp, e))?;
        let refined = match &a.refined {
            Some(p) => {
                let p = ctx.path(p);
                let v = read_labels(&p, &frames)?;
                rec.input(&p).map_err(|e| io_err(&p, e))?;
                Some(v)
            }
            None => None,
        };
        let gt = eval_ground_truth(&frames, EvalConfig::default().min_gt_points);
        match a.kind {
            PlotKind::Scene => {
                let Some(f) = frames.get(a.frame) else {
                    return Err(CliError::Usage(format!(
                        "--frame {} out of range ({} frames)",
                        a.frame,
                        frames.len()
                    )));
                };
                let boxes = |v: &[LabeledBox]| v.iter().map(|l| l.bbox).collect::<Vec<_>>();
                let mut layers = vec![
                    svg::BoxLayer {
                        class: "gt",
                        label: "ground truth",
                        boxes: gt[a.frame].clone(),
                    },
                    svg::BoxLayer {
                        class: "raw",
                        label: "reference",
                        boxes: boxes(&raw[a.frame]),
                    },
                ];
                if let Some(r) = &refined {
                    layers.push(svg::BoxLayer {
                        class: "refined",
                        label: "refined",
                        boxes: boxes(&r[a.frame]),
                    });
                }
                let title = format!(
                    "frame {} (ego-reference distance {:.1} m)",
                    f.frame_id, f.ego_ref_distance
                );
                let pts: Vec<_> = f.ego_cloud.iter().filter(|p| p[2] > 0.3).copied().collect();
                svg::scene(&title, roi.x, roi.y, &pts, &layers)
            }
            PlotKind::DistanceRecall => {
                let edges = [0.0, 20.0, 40.0, 60.0, 80.0, 100.0];
                let mut series = Vec::new();
                let mut sets = vec![("reference", &raw)];
                if let Some(r) = &refined {
                    sets.push(("refined", r));
                }
                for (label, set) in sets {
                    let curve = distance_recall_curve(&frames, set, &gt, a.iou, &edges)?;
                    series.push(svg::Series {
                        label,
                        points: curve
                            .iter()
                            .filter_map(|b| b.recall.map(|r| (0.5 * (b.lo + b.hi), r)))
                            .collect(),
                    });
                }
                svg::line_chart(
                    &format!("label recall@{} vs ego-reference distance", a.iou),
                    "distance (m)",
                    "recall",
                    [0.0, 100.0],
                    [0.0, 1.0],
                    &series,
                )
            }
            PlotKind::Pr => {
                let mut series = Vec::new();
                let mut sets = vec![("reference", &raw)];
                if let Some(r) = &refined {
                    sets.push(("refined", r));
                }
                for (label, set) in sets {
                    let pts = pr_curve(set, &gt, a.iou, &roi).unwrap_or_default();
                    series.push(svg::Series {
                        label,
                        points: pts.into_iter().map(|(p, r)| (r, p)).collect(),
                    });
                }
                svg::line_chart(
                    &format!("precision-recall @{}", a.iou),
                    "recall",
                    "precision",
                    [0.0, 1.0],
                    [0.0, 1.0],
                    &series,
                )
            }
            PlotKind::ApBins => unreachable!("handled above"),
        }
    };
    let out = ctx.path(&a.out);
    write_atomic(&out, svg.as_bytes()).map_err(|e| io_err(&out, e))?;
    rec.output(&out).map_err(|e| io_err(&out, e))?;
    rec.finish(&manifest_path(&out))
        .map_err(|e| io_err(&out, e))?;
    println!("wrote {}", out.display());
    Ok(())
}

/// AP per range bin as one series per IoU threshold, bins on the x axis
/// in report order.
fn ap_bins_chart(r: &MetricsReport) -> String {
    let mut ious: Vec<f64> = Vec::new();
    let mut bins: Vec<String> = Vec::new();
    for e in r.entries.iter().filter(|e| e.metric == "ap_bev") {
        if !ious.contains(&e.iou) {
            ious.push(e.iou);
        }
        if !bins.contains(&e.bin) {
            bins.push(e.bin.clone());
        }
    }
    let labels: Vec<String> = ious.iter().map(|i| format!("AP@{i}")).collect();
    let series: Vec<svg::Series> = ious
        .iter()
        .zip(&labels)
        .map(|(&iou, label)| svg::Series {
            label,
            points: bins
                .iter()
                .enumerate()
                .filter_map(|(i, b)| r.get("ap_bev", iou, b).map(|v| (i as f64, v)))
                .collect(),
        })
        .collect();
    svg::line_chart(
        &format!("BEV AP per range bin ({})", bins.join(", ")),
        "range bin index",
        "AP",
        [0.0, bins.len().saturating_sub(1).max(1) as f64],
        [0.0, 1.0],
        &series,
    )
}
