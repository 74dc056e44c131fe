//! `tssd` command-line driver.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tssd::eval::{
    format_mot_csv, mot_csv, mot_metrics, mot_table, parse_mot_csv, sequence_map, map_table, tracks_to_mot,
    MotReport, MotRow,
};
use tssd::net::{init_params, load_checkpoint, save_checkpoint, AttentionMaps, Detector, NetConfig, TemporalMode};
use tssd::ota::{track_sequence, SimilarityKind, TrackerParams};
use tssd::postproc::{detect_sequence, read_detections_jsonl, write_detections_jsonl, BBox, Detection, Profile};
use tssd::synth::{
    crossing_pair_scene, gen_sequence, random_scene, read_dataset, read_sequence, scale_change_scene, sequence_dirs,
    write_dataset, Sequence, CANVAS, NUM_CLASSES,
};
use tssd::tensor::{read_tnsr, write_tnsr};
use tssd::train::{
    epoch_means, grad_check, grad_report, loss_csv, parse_config, run_stage, toy_config, GradCase, TrainConfig,
};

/// Relative output paths are resolved against this directory when set.
const OUT_DIR_ENV: &str = "TSSD_OUT_DIR";

const CLASS_NAMES: [&str; NUM_CLASSES] = ["square", "disc", "triangle", "diamond"];

#[derive(Parser)]
#[command(name = "tssd", version, about = "Temporal single-shot detector and tubelet tracker")]
struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// `key = value` file applied on top of the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset profile selecting NMS IoU and top-k retention.
    #[arg(long, global = true, default_value = "vid")]
    profile: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Run the detector over a dataset and write detections JSONL.
    Detect(DetectArgs),
    /// Assign identities to detections and write MOT CSV.
    Track(TrackArgs),
    /// Detection mAP of detections JSONL against a dataset.
    EvalMap(EvalMapArgs),
    /// CLEAR-MOT metrics of MOT CSV results against ground truth.
    EvalMot(EvalMotArgs),
    /// Analytic vs finite-difference gradients on a toy network.
    GradCheck(GradCheckArgs),
    /// Metric-vs-parameter CSV.
    Sweep(SweepArgs),
    /// Write per-frame attention maps as tensor files.
    DumpAttention(DumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Random,
    Crossing,
    Scale,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    sequences: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, value_enum, default_value = "random")]
    scenario: Scenario,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetSize {
    Default,
    Compact,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    /// Dataset root written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Previous-stage checkpoint; required for stages 2 and 3.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Network widths for a fresh stage-1 run.
    #[arg(long, value_enum, default_value = "compact")]
    net: NetSize,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory, one `<sequence>.jsonl` per sequence.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "aclstm")]
    mode: String,
    #[arg(long, default_value_t = 0.01)]
    conf_thresh: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Similarity {
    Attention,
    Iou,
}

#[derive(Args, Clone)]
struct TrackerArgs {
    /// Match threshold T.
    #[arg(long = "T", default_value_t = 1.0)]
    t: f64,
    /// Tubelet generation score G.
    #[arg(long = "G", default_value_t = 0.3)]
    g: f64,
    #[arg(long, default_value_t = 10)]
    tub_len: usize,
    #[arg(long, default_value_t = 10)]
    max_miss: usize,
    #[arg(long, value_enum, default_value = "attention")]
    similarity: Similarity,
}

impl TrackerArgs {
    fn params(&self) -> TrackerParams {
        TrackerParams {
            match_threshold: self.t,
            gen_score: self.g,
            tub_len_max: self.tub_len,
            max_miss: self.max_miss,
            similarity: match self.similarity {
                Similarity::Attention => SimilarityKind::AttentionIou,
                Similarity::Iou => SimilarityKind::IouOnly,
            },
        }
    }
}

#[derive(Args)]
struct TrackArgs {
    /// Detections JSONL file, MOT CSV file, or a directory of `.jsonl` files.
    #[arg(long)]
    detections: PathBuf,
    /// Per-row attention vectors for MOT CSV input, a [rows, 147] tensor.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output MOT CSV file, or directory when the input is a directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args)]
struct EvalMapArgs {
    /// Directory of `<sequence>.jsonl` files from `detect`.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args)]
struct EvalMotArgs {
    /// MOT CSV file, or a directory of `<sequence>.txt` files.
    #[arg(long)]
    hyp: PathBuf,
    /// Ground-truth CSV file, or a dataset root.
    #[arg(long)]
    gt: PathBuf,
    /// Also write the report as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    gate: f64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Include the association term.
    #[arg(long)]
    association: bool,
    #[arg(long, default_value = "aclstm")]
    mode: String,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Fails when any relative error reaches this value.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Theta,
    #[value(name = "T")]
    T,
    #[value(name = "tub_len")]
    TubLen,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values; defaults depend on the parameter.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Theta: training dataset. T/tub_len: dataset whose ground truth scores the tracks.
    #[arg(long)]
    data: PathBuf,
    /// Theta: stage-2 checkpoint to fine-tune from.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Theta: held-out dataset for mAP; defaults to the training data.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Theta: stage-3 epochs per value.
    #[arg(long)]
    epochs: Option<usize>,
    /// T/tub_len: directory of `<sequence>.jsonl` detections.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    /// One sequence directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Output paths created by the command; removed again if it fails.
#[derive(Default)]
struct Outputs {
    created: Vec<PathBuf>,
}

impl Outputs {
    fn resolve(&self, p: &Path) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(root) if p.is_relative() => Path::new(&root).join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Claims a file path; its parent directories are created.
    fn file(&mut self, p: &Path) -> Result<PathBuf> {
        let p = self.resolve(p);
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            self.mkdirs(parent)?;
        }
        if !p.exists() {
            self.created.push(p.clone());
        }
        Ok(p)
    }

    fn dir(&mut self, p: &Path) -> Result<PathBuf> {
        let p = self.resolve(p);
        self.mkdirs(&p)?;
        Ok(p)
    }

    fn mkdirs(&mut self, p: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(p);
        while let Some(d) = cur.filter(|d| !d.as_os_str().is_empty() && !d.exists()) {
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
        self.created.extend(missing.into_iter().rev());
        Ok(())
    }

    fn remove_all(&self) {
        for p in self.created.iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}

struct Ctx {
    seed: u64,
    config: Vec<(String, String)>,
    profile: Profile,
    out: Outputs,
}

impl Ctx {
    fn log(&self, what: &str, kv: &[(&str, String)]) {
        let fields: Vec<String> = kv.iter().map(|(k, v)| format!("{}={}", k, v)).collect();
        eprintln!(
            "tssd {}: seed={} profile={} {}",
            what,
            self.seed,
            self.profile.name(),
            fields.join(" ")
        );
    }

    fn train_config(&self, stage: u8, epochs: Option<usize>) -> Result<TrainConfig> {
        let mut tc = TrainConfig::for_stage(stage)?;
        tc.profile = self.profile;
        tc.apply(&self.config)?;
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        Ok(tc)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = Outputs::default();
    let result = run(cli, &mut out);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.remove_all();
            let msg = format!("{:#}", e).replace('\n', " ");
            eprintln!("tssd: error: {}", msg);
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli, out: &mut Outputs) -> Result<()> {
    let config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => Vec::new(),
    };
    let mut ctx = Ctx {
        seed: cli.seed,
        config,
        profile: Profile::parse(&cli.profile)?,
        out: std::mem::take(out),
    };
    let r = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(&mut ctx, a),
        Cmd::Train(a) => cmd_train(&mut ctx, a),
        Cmd::Detect(a) => cmd_detect(&mut ctx, a),
        Cmd::Track(a) => cmd_track(&mut ctx, a),
        Cmd::EvalMap(a) => cmd_eval_map(&mut ctx, a),
        Cmd::EvalMot(a) => cmd_eval_mot(&mut ctx, a),
        Cmd::GradCheck(a) => cmd_grad_check(&mut ctx, a),
        Cmd::Sweep(a) => cmd_sweep(&mut ctx, a),
        Cmd::DumpAttention(a) => cmd_dump(&mut ctx, a),
    };
    *out = ctx.out;
    r
}

fn cmd_gen(ctx: &mut Ctx, a: GenArgs) -> Result<()> {
    if a.sequences == 0 || a.frames == 0 {
        bail!("--sequences and --frames must be >= 1");
    }
    ctx.log(
        "gen",
        &[
            ("sequences", a.sequences.to_string()),
            ("frames", a.frames.to_string()),
        ],
    );
    let seqs = (0..a.sequences as u64)
        .map(|i| {
            let seed = ctx.seed.wrapping_mul(1_000_003).wrapping_add(i);
            let spec = match a.scenario {
                Scenario::Random => random_scene(seed, a.frames),
                Scenario::Crossing => crossing_pair_scene(seed, a.frames),
                Scenario::Scale => scale_change_scene(seed, a.frames),
            };
            gen_sequence(&spec)
        })
        .collect::<tssd::Result<Vec<_>>>()?;
    let dir = ctx.out.dir(&a.out)?;
    write_dataset(&seqs, &dir)?;
    Ok(())
}

fn cmd_train(ctx: &mut Ctx, a: TrainArgs) -> Result<()> {
    let tc = ctx.train_config(a.stage, a.epochs)?;
    let data = read_dataset(&a.data).with_context(|| format!("dataset {}", a.data.display()))?;
    let (cfg, init) = match &a.init {
        Some(p) => {
            let (cfg, params) = load_checkpoint(p).with_context(|| format!("checkpoint {}", p.display()))?;
            (cfg, Some(params))
        }
        None if a.stage > 1 => bail!("stage {} needs --init with the stage {} checkpoint", a.stage, a.stage - 1),
        None => {
            let cfg = match a.net {
                NetSize::Default => NetConfig::default(),
                NetSize::Compact => NetConfig::compact(),
            };
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(ctx.seed);
            let params = init_params(&cfg, &mut rng)?;
            (cfg, Some(params))
        }
    };
    ctx.log("train", &[("stage", a.stage.to_string()), ("sequences", data.len().to_string())]);
    eprint!("{}", tc.to_kv());
    let result = run_stage(&data, &cfg, init.as_ref(), &tc, ctx.seed)?;
    if result.frozen_checksum.0 != result.frozen_checksum.1 {
        bail!("frozen parameters changed during stage {}", a.stage);
    }
    let dir = ctx.out.dir(&a.out)?;
    save_checkpoint(&dir, &cfg, &result.params)?;
    fs::write(dir.join("loss.csv"), loss_csv(&result.log))?;
    let mut resolved = format!("# seed = {}\n", ctx.seed);
    resolved.push_str(&tc.to_kv());
    fs::write(dir.join("config.txt"), resolved)?;
    if let Some(last) = epoch_means(&result.log).last() {
        eprintln!("tssd train: final epoch mean loss {:.6}", last);
    }
    Ok(())
}

fn load_detector(model: &Path, mode: &str) -> Result<Detector> {
    let (cfg, params) = load_checkpoint(model).with_context(|| format!("checkpoint {}", model.display()))?;
    Ok(Detector::new(cfg, params, TemporalMode::parse(mode)?)?)
}

fn seq_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_detect(ctx: &mut Ctx, a: DetectArgs) -> Result<()> {
    let mut det = load_detector(&a.model, &a.mode)?;
    let dirs = sequence_dirs(&a.data)?;
    ctx.log(
        "detect",
        &[("mode", a.mode.clone()), ("conf_thresh", a.conf_thresh.to_string())],
    );
    let out = ctx.out.dir(&a.out)?;
    for d in dirs {
        let seq = read_sequence(&d)?;
        let dets = detect_sequence(&mut det, &seq.frames, a.conf_thresh, ctx.profile)?;
        let path = ctx.out.file(&out.join(format!("{}.jsonl", seq_name(&d))))?;
        write_jsonl(&path, &dets)?;
    }
    Ok(())
}

fn write_jsonl(path: &Path, dets: &[Vec<Detection>]) -> Result<()> {
    let frames: Vec<(usize, Vec<Detection>)> = dets.iter().cloned().enumerate().map(|(i, d)| (i + 1, d)).collect();
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_detections_jsonl(&mut w, &frames)?;
    w.flush()?;
    Ok(())
}

/// Detections per 0-based frame, from 1-based JSONL frames.
fn read_jsonl(path: &Path) -> Result<Vec<Vec<Detection>>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let frames = read_detections_jsonl(BufReader::new(file)).with_context(|| path.display().to_string())?;
    let n = frames.iter().map(|(f, _)| *f).max().unwrap_or(0);
    let mut out = vec![Vec::new(); n];
    for (f, d) in frames {
        if f == 0 {
            bail!("{}: frames are 1-based", path.display());
        }
        out[f - 1].extend(d);
    }
    Ok(out)
}

/// MOT rows as untracked class-0 detections, with optional attention rows.
fn read_mot_detections(path: &Path, embeddings: Option<&Path>) -> Result<Vec<Vec<Detection>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = parse_mot_csv(&text).with_context(|| path.display().to_string())?;
    let emb = embeddings.map(read_tnsr).transpose()?;
    if let Some(e) = &emb {
        if e.dims().len() != 2 || e.dims()[0] != rows.len() {
            bail!("embeddings {:?} do not index {} rows", e.dims(), rows.len());
        }
    }
    let n = CANVAS as f64;
    let frames = rows.iter().map(|r| r.frame).max().unwrap_or(0);
    let mut out = vec![Vec::new(); frames];
    for (i, r) in rows.iter().enumerate() {
        if r.frame == 0 {
            bail!("{}: frames are 1-based", path.display());
        }
        let av = emb.as_ref().map(|e| {
            let w = e.dims()[1];
            e.data()[i * w..(i + 1) * w].to_vec()
        });
        out[r.frame - 1].push(Detection {
            class_id: 0,
            score: r.conf,
            bbox: BBox::new(r.left / n, r.top / n, (r.left + r.width) / n, (r.top + r.height) / n),
            av,
            id: -1,
        });
    }
    Ok(out)
}

fn track_file(input: &Path, embeddings: Option<&Path>, params: &TrackerParams) -> Result<Vec<MotRow>> {
    let dets = if input.extension().is_some_and(|e| e == "jsonl") {
        read_jsonl(input)?
    } else {
        read_mot_detections(input, embeddings)?
    };
    Ok(tracks_to_mot(&track_sequence(&dets, params)?))
}

fn jsonl_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .jsonl files in {}", dir.display());
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_track(ctx: &mut Ctx, a: TrackArgs) -> Result<()> {
    let params = a.tracker.params();
    params.validate()?;
    ctx.log(
        "track",
        &[
            ("T", params.match_threshold.to_string()),
            ("G", params.gen_score.to_string()),
            ("tub_len", params.tub_len_max.to_string()),
            ("max_miss", params.max_miss.to_string()),
            ("similarity", format!("{:?}", params.similarity)),
        ],
    );
    if a.detections.is_dir() {
        let files = jsonl_files(&a.detections)?;
        let out = ctx.out.dir(&a.out)?;
        for f in files {
            let rows = track_file(&f, None, &params)?;
            let path = ctx.out.file(&out.join(format!("{}.txt", stem(&f))))?;
            fs::write(path, format_mot_csv(&rows))?;
        }
    } else {
        let rows = track_file(&a.detections, a.embeddings.as_deref(), &params)?;
        let path = ctx.out.file(&a.out)?;
        fs::write(path, format_mot_csv(&rows))?;
    }
    Ok(())
}

fn cmd_eval_map(ctx: &mut Ctx, a: EvalMapArgs) -> Result<()> {
    let dirs = sequence_dirs(&a.data)?;
    let mut seqs = Vec::new();
    let mut runs = Vec::new();
    for d in &dirs {
        let path = a.detections.join(format!("{}.jsonl", seq_name(d)));
        let seq = read_sequence(d)?;
        let mut dets = read_jsonl(&path)?;
        if dets.len() > seq.len() {
            bail!("{} has frames beyond the sequence", path.display());
        }
        dets.resize(seq.len(), Vec::new());
        runs.push(dets);
        seqs.push(seq);
    }
    ctx.log("eval-map", &[("iou", a.iou.to_string()), ("sequences", seqs.len().to_string())]);
    let report = sequence_map(&runs, &seqs, NUM_CLASSES, a.iou)?;
    print!("{}", map_table(&report, &CLASS_NAMES));
    Ok(())
}

fn read_mot_file(p: &Path) -> Result<Vec<MotRow>> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    parse_mot_csv(&text).with_context(|| p.display().to_string())
}

fn cmd_eval_mot(ctx: &mut Ctx, a: EvalMotArgs) -> Result<()> {
    ctx.log("eval-mot", &[("gate", a.gate.to_string())]);
    let mut rows: Vec<(String, MotReport)> = Vec::new();
    if a.gt.is_dir() {
        for d in sequence_dirs(&a.gt)? {
            let name = seq_name(&d);
            let gt = read_mot_file(&d.join("gt.csv"))?;
            let hyp_path = if a.hyp.is_dir() {
                a.hyp.join(format!("{}.txt", name))
            } else {
                a.hyp.clone()
            };
            let hyp = read_mot_file(&hyp_path)?;
            rows.push((name, mot_metrics(&hyp, &gt, a.gate)));
        }
    } else {
        let gt = read_mot_file(&a.gt)?;
        let hyp = read_mot_file(&a.hyp)?;
        rows.push((stem(&a.gt), mot_metrics(&hyp, &gt, a.gate)));
    }
    if rows.len() > 1 {
        let all: Vec<MotReport> = rows.iter().map(|(_, r)| r.clone()).collect();
        rows.push(("OVERALL".into(), MotReport::aggregate(&all)));
    }
    print!("{}", mot_table(&rows));
    if let Some(p) = &a.out {
        let path = ctx.out.file(p)?;
        fs::write(path, mot_csv(&rows))?;
    }
    Ok(())
}

fn cmd_grad_check(ctx: &mut Ctx, a: GradCheckArgs) -> Result<()> {
    let cfg = toy_config();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(ctx.seed);
    let params = init_params(&cfg, &mut rng)?;
    let case = GradCase {
        frames: a.frames,
        mode: TemporalMode::parse(&a.mode)?,
        dropout: a.dropout,
        with_association: a.association,
        seed: ctx.seed,
        h: a.h,
        ..GradCase::default()
    };
    ctx.log(
        "grad-check",
        &[
            ("frames", a.frames.to_string()),
            ("mode", a.mode.clone()),
            ("dropout", a.dropout.to_string()),
            ("association", a.association.to_string()),
            ("h", a.h.to_string()),
        ],
    );
    let trainable = tssd::train::stage_trainable(2);
    let rows = grad_check(&cfg, &params, &case, &trainable)?;
    let report = grad_report(&rows);
    match &a.out {
        Some(p) => {
            let path = ctx.out.file(p)?;
            fs::write(path, &report)?;
        }
        None => print!("{}", report),
    }
    let worst = rows.first().map_or(0.0, |r| r.max_rel_err);
    if worst >= a.tol {
        bail!("max relative error {:.3e} >= {:.1e}", worst, a.tol);
    }
    Ok(())
}

fn cmd_sweep(ctx: &mut Ctx, a: SweepArgs) -> Result<()> {
    match a.param {
        SweepParam::Theta => sweep_theta(ctx, &a),
        SweepParam::T | SweepParam::TubLen => sweep_tracker(ctx, &a),
    }
}

fn sweep_theta(ctx: &mut Ctx, a: &SweepArgs) -> Result<()> {
    let values = if a.values.is_empty() {
        vec![0.01, 0.1, 0.3, 0.5]
    } else {
        a.values.clone()
    };
    let model = a.model.as_ref().context("theta sweep needs --model (stage-2 checkpoint)")?;
    let (cfg, init) = load_checkpoint(model).with_context(|| format!("checkpoint {}", model.display()))?;
    let train = read_dataset(&a.data)?;
    let held_out: Vec<Sequence> = match &a.eval_data {
        Some(p) => read_dataset(p)?,
        None => train.clone(),
    };
    ctx.log("sweep", &[("param", "theta".into()), ("values", format!("{:?}", values))]);
    let mut csv = String::from("theta,final_loss,finite,mAP\n");
    for &theta in &values {
        let mut tc = ctx.train_config(3, a.epochs)?;
        tc.theta = theta;
        tc.validate()?;
        let out = run_stage(&train, &cfg, Some(&init), &tc, ctx.seed)?;
        let finite = out.log.iter().all(|r| r.bundle.total.is_finite());
        let last = epoch_means(&out.log).last().copied().unwrap_or(f64::NAN);
        let mut det = Detector::new(cfg.clone(), out.params, tc.mode)?;
        let runs = held_out
            .iter()
            .map(|s| detect_sequence(&mut det, &s.frames, 0.01, ctx.profile))
            .collect::<tssd::Result<Vec<_>>>()?;
        let map = sequence_map(&runs, &held_out, cfg.num_classes, 0.5)?.map;
        csv.push_str(&format!("{},{:.6},{},{:.6}\n", theta, last, finite, map));
    }
    let path = ctx.out.file(&a.out)?;
    fs::write(path, csv)?;
    Ok(())
}

fn sweep_tracker(ctx: &mut Ctx, a: &SweepArgs) -> Result<()> {
    let (name, values) = match a.param {
        SweepParam::T if a.values.is_empty() => ("T", vec![0.6, 0.8, 1.0, 1.2, 1.4]),
        SweepParam::T => ("T", a.values.clone()),
        _ if a.values.is_empty() => ("tub_len", vec![1.0, 3.0, 5.0, 10.0, 20.0]),
        _ => ("tub_len", a.values.clone()),
    };
    let det_dir = a.detections.as_ref().context("tracker sweeps need --detections")?;
    let mut inputs = Vec::new();
    for d in sequence_dirs(&a.data)? {
        let name = seq_name(&d);
        let gt = read_mot_file(&d.join("gt.csv"))?;
        let dets = read_jsonl(&det_dir.join(format!("{}.jsonl", name)))?;
        inputs.push((dets, gt));
    }
    ctx.log("sweep", &[("param", name.into()), ("values", format!("{:?}", values))]);
    let mut csv = format!("{},MOTA,IDS\n", name);
    for &v in &values {
        let mut params = a.tracker.params();
        match a.param {
            SweepParam::T => params.match_threshold = v,
            _ => {
                if v < 1.0 || v.fract() != 0.0 {
                    bail!("tub_len values must be positive integers, got {}", v);
                }
                params.tub_len_max = v as usize;
            }
        }
        params.validate()?;
        let reports = inputs
            .iter()
            .map(|(dets, gt)| Ok(mot_metrics(&tracks_to_mot(&track_sequence(dets, &params)?), gt, 0.5)))
            .collect::<Result<Vec<_>>>()?;
        let all = MotReport::aggregate(&reports);
        csv.push_str(&format!("{},{:.6},{}\n", v, all.mota, all.ids));
    }
    let path = ctx.out.file(&a.out)?;
    fs::write(path, csv)?;
    Ok(())
}

fn cmd_dump(ctx: &mut Ctx, a: DumpArgs) -> Result<()> {
    let mut det = load_detector(&a.model, "aclstm")?;
    let seq = read_sequence(&a.data)?;
    ctx.log("dump-attention", &[("frames", seq.len().to_string())]);
    let out = ctx.out.dir(&a.out)?;
    det.reset();
    for (i, f) in seq.frames.iter().enumerate() {
        let o = det.step(f)?;
        let AttentionMaps { maps } = &o.att;
        for (level, m) in maps.iter().enumerate() {
            let path = ctx.out.file(&out.join(format!("att_{:06}_l{}.tnsr", i + 1, level)))?;
            write_tnsr(m, path)?;
        }
    }
    Ok(())
}
