//! `labelguide`: data generation, staged training, evaluation, ablation
//! grids and report emission.

mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use labelguide::labelenc::autoencoder_eval;
use labelguide::pipeline::{
    file_hash, load_labelenc, load_student, load_teacher, read_header, run_stage_labelenc, run_stage_student,
    run_stage_teacher, student_detect, teacher_detect, evaluate_detections, AblationAxis, AblationTable,
    CheckpointError, Corpus, Dataset, EvalReport, ExperimentConfig, PipelineError, RunDir, RunManifest, Workbench,
    TRAIN_FILE, VAL_FILE,
};
use serde::Serialize;

const EXIT_FAILURE: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;
const EXIT_MISSING_CHECKPOINT: u8 = 3;

#[derive(Parser)]
#[command(name = "labelguide", version, about = "Label-guided cross-modal distillation on a synthetic BEV world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $LABELGUIDE_OUT/<command>, else runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Teacher,
    Labelenc,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Components,
    ChannelRatio,
    LabelencVariant,
    Distance,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val scene files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        #[command(flatten)]
        common: Common,
        /// Dataset directory from gen-data [default: generate from the config].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Point-cloud teacher checkpoint.
        #[arg(long)]
        teacher_ckpt: Option<PathBuf>,
        /// Label-encoder checkpoint.
        #[arg(long)]
        labelenc_ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        /// Teacher, student or label-encoder checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory [default: generate from the checkpoint's config].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid over several seeds.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[command(flatten)]
        common: Common,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Rebuild tables and plots from ablation results.
    Report {
        /// Directory holding `<axis>.json` files written by ablate.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) => EXIT_BAD_CONFIG,
            PipelineError::MissingCheckpoint(_) | PipelineError::Checkpoint(CheckpointError::Missing(_)) => {
                EXIT_MISSING_CHECKPOINT
            }
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::new(EXIT_BAD_CONFIG, e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(out: &Option<PathBuf>, command: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| match std::env::var_os("LABELGUIDE_OUT") {
        Some(root) => PathBuf::from(root).join(command),
        None => PathBuf::from("runs").join(command),
    })
}

fn start(command: &str, config_path: Option<&Path>, cfg: &ExperimentConfig, out: &Path) -> Result<RunDir, Failure> {
    let manifest = RunManifest::new(command, config_path, cfg, out);
    RunDir::create(out, &manifest, cfg)
        .map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot start run in {}: {e}", out.display())))
}

fn dataset(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset, Failure> {
    match data {
        Some(dir) => {
            let d = Dataset::load(dir).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
            if d.world != cfg.world {
                return Err(Failure::new(EXIT_BAD_CONFIG, "dataset world differs from the config's `world` section"));
            }
            Ok(d)
        }
        None => Dataset::generate(&cfg.world, cfg.data.train_scenes, cfg.data.val_scenes)
            .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string())),
    }
}

fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("bucket,mAP,NDS*,mATE,mASE,mAOE,num_gt,num_pred\n");
    for (name, m) in [("all", report.overall), ("near", report.near), ("far", report.far)] {
        out.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            m.map, m.nds, m.mate, m.mase, m.maoe, m.num_gt, m.num_pred
        ));
    }
    out
}

fn gen_data(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(&common.out, "gen-data");
    let run = start("gen-data", common.config.as_deref(), &cfg, &out)?;
    let data = dataset(&cfg, None)?;
    data.save(&out).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    #[derive(Serialize)]
    struct Report {
        train_scenes: usize,
        val_scenes: usize,
        train_sha256: String,
        val_sha256: String,
    }
    run.write_json(
        "report.json",
        &Report {
            train_scenes: data.train.len(),
            val_scenes: data.val.len(),
            train_sha256: file_hash(&out.join(TRAIN_FILE))?,
            val_sha256: file_hash(&out.join(VAL_FILE))?,
        },
    )?;
    eprintln!("wrote {} train and {} val scenes to {}", data.train.len(), data.val.len(), out.display());
    Ok(())
}

fn train(
    stage: Stage,
    common: &Common,
    data: Option<&Path>,
    teacher_ckpt: Option<&Path>,
    labelenc_ckpt: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let name = match stage {
        Stage::Teacher => "teacher",
        Stage::Labelenc => "labelenc",
        Stage::Student => "student",
    };
    // Fail on absent checkpoints before any work.
    let sw = &cfg.switches;
    let needs_teacher = match stage {
        Stage::Labelenc => sw.label_encoder_variant == labelguide::labelenc::LabelEncoderVariant::Inverse,
        Stage::Student => sw.use_lidar_distill,
        Stage::Teacher => false,
    };
    let needs_labelenc = matches!(stage, Stage::Student) && sw.use_label_distill;
    for (needed, path, what) in [(needs_teacher, teacher_ckpt, "--teacher-ckpt"), (needs_labelenc, labelenc_ckpt, "--labelenc-ckpt")] {
        if needed {
            match path {
                None => return Err(Failure::new(EXIT_MISSING_CHECKPOINT, format!("{what} is required by the config switches"))),
                Some(p) if !p.exists() => {
                    return Err(Failure::new(EXIT_MISSING_CHECKPOINT, format!("{what} {} does not exist", p.display())))
                }
                _ => {}
            }
        }
    }
    let out = out_dir(&common.out, &format!("train-{name}"));
    let run = start(&format!("train {name}"), common.config.as_deref(), &cfg, &out)?;
    let corpus = Corpus::<f32>::new(dataset(&cfg, data)?, &cfg);
    let report = match stage {
        Stage::Teacher => run_stage_teacher(&cfg, &corpus, &run)?.report().overall,
        Stage::Labelenc => {
            let r = run_stage_labelenc(&cfg, &corpus, teacher_ckpt, &run)?.report;
            eprintln!("autoencoder mAP {:.4} NDS* {:.4} mATE {:.4} mAOE {:.4}", r.map, r.nds, r.mate, r.maoe);
            return Ok(());
        }
        Stage::Student => run_stage_student(&cfg, &corpus, teacher_ckpt, labelenc_ckpt, &run)?.stage.report().overall,
    };
    eprintln!("{name}: mAP {:.4} NDS* {:.4} mATE {:.4} mASE {:.4}", report.map, report.nds, report.mate, report.mase);
    Ok(())
}

fn eval(ckpt: &Path, data: Option<&Path>, out: &Option<PathBuf>) -> Result<(), Failure> {
    let header = read_header(ckpt)?;
    let cfg = header.config.clone();
    let out = out_dir(out, "eval");
    let run = start("eval", None, &cfg, &out)?;
    let corpus = Corpus::<f32>::new(dataset(&cfg, data)?, &cfg);
    #[derive(Serialize)]
    struct Report<'a> {
        checkpoint: String,
        checkpoint_sha256: String,
        kind: &'a str,
        #[serde(flatten)]
        metrics: EvalReport,
    }
    let report = match header.kind.as_str() {
        "teacher" => {
            let (_, mut t) = load_teacher::<f32>(ckpt)?;
            evaluate_detections(teacher_detect(&mut t, &corpus.val, &cfg), &corpus.data.val, &cfg)
        }
        "student" => {
            let (_, mut s) = load_student::<f32>(ckpt)?;
            evaluate_detections(student_detect(&mut s, &corpus.val, &cfg), &corpus.data.val, &cfg)
        }
        "labelenc" => {
            let (_, mut m) = load_labelenc::<f32>(ckpt)?;
            let overall = autoencoder_eval(&mut m, &corpus.data.val, &cfg.decode, &cfg.eval, 16)
                .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
            EvalReport { overall, near: overall, far: overall }
        }
        other => return Err(Failure::new(EXIT_FAILURE, format!("unknown checkpoint kind `{other}`"))),
    };
    run.write("metrics.csv", eval_csv(&report).as_bytes())?;
    run.write_json(
        "report.json",
        &Report {
            checkpoint: ckpt.display().to_string(),
            checkpoint_sha256: file_hash(ckpt)?,
            kind: &header.kind,
            metrics: report,
        },
    )?;
    let m = report.overall;
    eprintln!("{}: mAP {:.4} NDS* {:.4} mATE {:.4} mASE {:.4} mAOE {:.4}", header.kind, m.map, m.nds, m.mate, m.mase, m.maoe);
    Ok(())
}

fn write_table(dir: &Path, table: &AblationTable) -> std::io::Result<()> {
    let name = table.axis.name();
    let write = |file: String, bytes: &[u8]| labelguide::pipeline::write_atomic(&dir.join(file), bytes);
    write(format!("{name}.csv"), table.to_csv().as_bytes())?;
    write(format!("{name}_seeds.csv"), table.to_seed_csv().as_bytes())?;
    write(format!("{name}.json"), &serde_json::to_vec_pretty(table).expect("table serializes"))?;
    let cats: Vec<String> = table.rows.iter().map(|r| r.config.clone()).collect();
    let bars = svg::bar_chart(
        &format!("{name}: mean over {} seeds", table.rows.first().map_or(0, |r| r.seeds.len())),
        &cats,
        &[
            ("mAP", table.rows.iter().map(|r| r.mean_map()).collect()),
            ("NDS*", table.rows.iter().map(|r| r.mean_nds()).collect()),
        ],
    );
    write(format!("{name}.svg"), bars.as_bytes())?;
    if table.axis == AblationAxis::Distance {
        let mut configs: Vec<&str> = Vec::new();
        for r in &table.rows {
            let c = r.config.rsplit_once('/').map_or(r.config.as_str(), |x| x.0);
            if !configs.contains(&c) {
                configs.push(c);
            }
        }
        let buckets = ["near".to_string(), "far".to_string()];
        let series: Vec<(&str, Vec<f64>)> = configs
            .iter()
            .map(|c| {
                let v = buckets
                    .iter()
                    .map(|b| table.row(&format!("{c}/{b}")).map_or(0.0, |r| r.mean_mase()))
                    .collect();
                (*c, v)
            })
            .collect();
        write("distance_mase.svg".into(), svg::line_chart("mASE by distance bucket", &buckets, &series).as_bytes())?;
    }
    Ok(())
}

fn ablate(axis: Axis, common: &Common, seeds: &[u64], data: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    if seeds.is_empty() {
        return Err(Failure::new(EXIT_FAILURE, "at least one seed is required"));
    }
    let out = out_dir(&common.out, "ablate");
    let run = start("ablate", common.config.as_deref(), &cfg, &out)?;
    let axes: Vec<AblationAxis> = match axis {
        Axis::Components => vec![AblationAxis::Components],
        Axis::ChannelRatio => vec![AblationAxis::ChannelRatio],
        Axis::LabelencVariant => vec![AblationAxis::LabelencVariant],
        Axis::Distance => vec![AblationAxis::Distance],
        Axis::All => AblationAxis::ALL.to_vec(),
    };
    let corpus = Corpus::<f32>::new(dataset(&cfg, data)?, &cfg);
    let mut bench = Workbench::new(cfg, corpus);
    bench.progress = Some(Box::new(|m| eprintln!("[ablate] {m}")));
    let mut tables = Vec::new();
    for a in axes {
        let table = bench.run(a, seeds)?;
        write_table(&out, &table)?;
        eprint!("{}", table.to_csv());
        tables.push(table);
    }
    run.write_json("report.json", &tables)?;
    Ok(())
}

fn report(input: &Path, out: &Option<PathBuf>) -> Result<(), Failure> {
    let out = out.clone().unwrap_or_else(|| input.to_path_buf());
    let mut found = 0;
    let mut summary = String::from("axis,config,mAP,NDS*,mATE,mASE,mAP_std\n");
    for axis in AblationAxis::ALL {
        let path = input.join(format!("{}.json", axis.name()));
        if !path.exists() {
            continue;
        }
        let table: AblationTable = serde_json::from_slice(&std::fs::read(&path)?)
            .map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", path.display())))?;
        std::fs::create_dir_all(&out)?;
        write_table(&out, &table)?;
        for r in &table.rows {
            summary.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                axis.name(),
                r.config,
                r.mean_map(),
                r.mean_nds(),
                r.mean_mate(),
                r.mean_mase(),
                r.std_map()
            ));
        }
        found += 1;
    }
    if found == 0 {
        return Err(Failure::new(EXIT_FAILURE, format!("no ablation tables in {}", input.display())));
    }
    labelguide::pipeline::write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    eprint!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common } => gen_data(common),
        Command::Train { stage, common, data, teacher_ckpt, labelenc_ckpt } => {
            train(*stage, common, data.as_deref(), teacher_ckpt.as_deref(), labelenc_ckpt.as_deref())
        }
        Command::Eval { ckpt, data, out } => eval(ckpt, data.as_deref(), out),
        Command::Ablate { axis, common, seeds, data } => ablate(*axis, common, seeds, data.as_deref()),
        Command::Report { input, out } => report(input, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
