//! `handgcn`: index, split, train, evaluate and query hand-keypoint sign models.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use handgcn::graph::{AdjacencyStack, HandGraphTopology, SUBSET_COUNT};
use handgcn::keypoints::{assign_splits, DatasetManifest, KeypointSequence, Split};
use handgcn::nn::{checkpoint, fuse_streams, AgcnModel, ModelConfig, Stream};
use handgcn::pipeline::{
    evaluate, to_input_tensor, top_k, write_epoch_log, ClassificationReport, Dataset, Precision, Trainer,
};
use handgcn::{Error, Real, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "handgcn", version, about = "Hand-keypoint sign recognition with adaptive graph convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hand graph utilities.
    Graph {
        #[command(subcommand)]
        action: GraphAction,
    },
    /// Validate `ROOT/<class>/*.json` and write manifest.csv.
    Index {
        /// Dataset root with one directory per class.
        #[arg(long)]
        root: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign a stratified train/test split to a manifest.
    Split {
        /// Input manifest.csv.
        #[arg(long)]
        manifest: PathBuf,
        /// Per-class test fraction.
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        /// Shuffle seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample every manifest entry into model input and write preprocessed.csv.
    Preprocess {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; writes config.echo, model.agcn and epochs.csv.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one model, or fuse two, on the test split; writes report.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint; give twice to fuse a joint and a bone model.
        #[arg(long = "model", required = true, num_args = 1)]
        models: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the five most likely classes for one keypoint document.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint; give twice to fuse a joint and a bone model.
        #[arg(long = "model", required = true, num_args = 1)]
        models: Vec<PathBuf>,
        /// Keypoint JSON document.
        #[arg(long)]
        sequence: PathBuf,
    },
}

#[derive(Subcommand)]
enum GraphAction {
    /// Print vertex and edge counts; write edge lists and adjacency slices as CSV.
    Inspect {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Leave out the fingertip edges added to the natural skeleton.
        #[arg(long)]
        no_supplementary: bool,
    },
}

/// Settings shared by commands that preprocess or train; flags override `--config`.
#[derive(Args)]
struct RunArgs {
    /// key=value settings file (for example a previous run's config.echo).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest CSV.
    #[arg(long)]
    manifest: Option<String>,
    /// Training epochs [default: 5].
    #[arg(long)]
    epochs: Option<String>,
    /// Mini-batch size [default: 64].
    #[arg(long)]
    batch: Option<String>,
    /// Learning rate [default: 0.01].
    #[arg(long)]
    lr: Option<String>,
    /// Time steps per sequence [default: 50].
    #[arg(long = "T")]
    time_steps: Option<String>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    momentum: Option<String>,
    /// Seed for initialization and shuffling [default: 7].
    #[arg(long)]
    seed: Option<String>,
    /// Float width, 32 or 64 [default: 32].
    #[arg(long)]
    precision: Option<String>,
    /// joint, bone or both [default: joint].
    #[arg(long)]
    stream: Option<String>,
    /// Undetected frames: interpolate or zero-fill [default: interpolate].
    #[arg(long)]
    missing: Option<String>,
    /// Resampling: uniform-index or pad-repeat-last [default: uniform-index].
    #[arg(long)]
    resample: Option<String>,
    /// Include supplementary fingertip edges, true or false [default: true].
    #[arg(long)]
    supplementary: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(
            self.config.as_deref(),
            &[
                ("manifest", self.manifest.as_ref()),
                ("epochs", self.epochs.as_ref()),
                ("batch", self.batch.as_ref()),
                ("lr", self.lr.as_ref()),
                ("T", self.time_steps.as_ref()),
                ("momentum", self.momentum.as_ref()),
                ("seed", self.seed.as_ref()),
                ("precision", self.precision.as_ref()),
                ("stream", self.stream.as_ref()),
                ("missing", self.missing.as_ref()),
                ("resample", self.resample.as_ref()),
                ("supplementary", self.supplementary.as_ref()),
            ],
        )
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Checkpoint(_) => 3,
        Error::ClassMismatch(_) => 4,
        Error::Divergence { .. } => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Graph {
            action: GraphAction::Inspect { out, no_supplementary },
        } => graph_inspect(&out, !no_supplementary),
        Command::Index { root, out } => index(&root, &out),
        Command::Split {
            manifest,
            fraction,
            seed,
            out,
        } => split(&manifest, fraction, seed, &out),
        Command::Preprocess { run, out } => preprocess(&run.resolve()?, &out),
        Command::Train { run, out } => {
            let cfg = run.resolve()?;
            match cfg.train.precision {
                Precision::F32 => train::<f32>(&cfg, &out),
                Precision::F64 => train::<f64>(&cfg, &out),
            }
        }
        Command::Eval { run, models, out } => {
            let cfg = run.resolve()?;
            match cfg.train.precision {
                Precision::F32 => eval::<f32>(&cfg, &models, &out),
                Precision::F64 => eval::<f64>(&cfg, &models, &out),
            }
        }
        Command::Predict { run, models, sequence } => {
            let cfg = run.resolve()?;
            match cfg.train.precision {
                Precision::F32 => predict::<f32>(&cfg, &models, &sequence),
                Precision::F64 => predict::<f64>(&cfg, &models, &sequence),
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn graph_inspect(out: &Path, supplementary: bool) -> Result<()> {
    create_dir(out)?;
    let topo = HandGraphTopology::build();
    let edges = |list: &[(usize, usize)]| {
        let mut s = String::from("from,to\n");
        for (a, b) in list {
            let _ = writeln!(s, "{a},{b}");
        }
        s
    };
    let none = Vec::new();
    let (neighbor, bend) = if supplementary {
        (&topo.supp_neighbor_edges, &topo.supp_bend_edges)
    } else {
        (&none, &none)
    };
    write_file(&out.join("edges_natural.csv"), edges(&topo.natural_edges))?;
    write_file(&out.join("edges_type1.csv"), edges(neighbor))?;
    write_file(&out.join("edges_type2.csv"), edges(bend))?;
    let adjacency = AdjacencyStack::build(&topo, supplementary);
    for (k, name) in (0..SUBSET_COUNT).zip(["self", "inward", "outward"]) {
        let slice = adjacency.slice(k);
        let v = adjacency.vertex_count();
        let mut s = String::new();
        for row in slice.data().chunks(v) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        write_file(&out.join(format!("adjacency_{name}.csv")), s)?;
    }
    println!(
        "vertices={} natural={} supplementary={}",
        topo.vertex_count,
        topo.natural_edges.len(),
        neighbor.len() + bend.len()
    );
    Ok(())
}

fn summarize(manifest: &DatasetManifest) -> String {
    let counts = manifest.class_counts();
    let min = counts.values().min().copied().unwrap_or(0);
    let max = counts.values().max().copied().unwrap_or(0);
    format!(
        "classes={} videos={} clips/class=[{min},{max}]",
        manifest.classes.len(),
        manifest.entries.len()
    )
}

fn save_manifest(manifest: &DatasetManifest, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut buf = Vec::new();
    manifest.write_csv(&mut buf)?;
    write_file(&out.join("manifest.csv"), buf)
}

fn index(root: &Path, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::build(root)?;
    save_manifest(&manifest, out)?;
    println!("{}", summarize(&manifest));
    Ok(())
}

fn split(path: &Path, fraction: f64, seed: u64, out: &Path) -> Result<()> {
    let manifest = assign_splits(&DatasetManifest::load(path)?, fraction, seed)?;
    save_manifest(&manifest, out)?;
    println!(
        "{} train={} test={}",
        summarize(&manifest),
        manifest.subset(Split::Train).entries.len(),
        manifest.subset(Split::Test).entries.len()
    );
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no manifest given (--manifest or manifest= in --config)".into()))?;
    DatasetManifest::load(path)
}

fn split_subset(manifest: &DatasetManifest, split: Split) -> Result<DatasetManifest> {
    let subset = manifest.subset(split);
    if subset.entries.is_empty() {
        return Err(Error::Split(format!(
            "manifest has no {} entries; run `handgcn split` first",
            split.as_str()
        )));
    }
    Ok(subset)
}

fn preprocess(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let data = Dataset::load(&manifest, &cfg.pre)?;
    create_dir(out)?;
    write_file(&out.join("config.echo"), cfg.echo())?;
    let shape = data.inputs.shape().to_vec();
    let (c, t, v) = (shape[1], shape[2], shape[3]);
    let mut s = String::from("video_id,label,split");
    for ci in 0..c {
        for ti in 0..t {
            for vi in 0..v {
                let _ = write!(s, ",c{ci}t{ti}v{vi}");
            }
        }
    }
    s.push('\n');
    let row = c * t * v;
    for (entry, values) in manifest.entries.iter().zip(data.inputs.data().chunks(row)) {
        let split = entry.split.map(Split::as_str).unwrap_or("");
        let _ = write!(s, "{},{},{split}", entry.video_id, entry.label);
        for x in values {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    write_file(&out.join("preprocessed.csv"), s)?;
    println!("sequences={} T={t}", data.len());
    Ok(())
}

fn artifact_names(stream: Stream, both: bool) -> (&'static str, &'static str) {
    match (stream, both) {
        (Stream::Bone, true) => ("model.bone.agcn", "epochs.bone.csv"),
        _ => ("model.agcn", "epochs.csv"),
    }
}

fn train<F: Real>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let data = Dataset::load(&split_subset(&manifest, Split::Train)?, &cfg.pre)?;
    create_dir(out)?;
    write_file(&out.join("config.echo"), cfg.echo())?;
    let streams = cfg.stream.streams();
    let adjacency = AdjacencyStack::build(&HandGraphTopology::build(), cfg.supplementary);
    for &stream in &streams {
        let model = AgcnModel::<F>::new(
            ModelConfig::standard(data.classes.len()),
            data.classes.clone(),
            stream,
            adjacency.clone(),
            cfg.train.seed,
        )?;
        let mut trainer = Trainer::new(model, cfg.train)?;
        let mut log = Vec::with_capacity(cfg.train.epochs);
        for _ in 0..cfg.train.epochs {
            let r = trainer.run_epoch(&data)?;
            println!(
                "stream={} epoch={} step={} loss={:.6} train_acc={:.4}",
                stream.as_str(),
                r.epoch,
                r.step,
                r.loss,
                r.train_acc
            );
            log.push(r);
        }
        let (model_name, log_name) = artifact_names(stream, streams.len() > 1);
        checkpoint::save(&trainer.into_model(), &out.join(model_name))?;
        let mut buf = Vec::new();
        write_epoch_log(&log, &mut buf)?;
        write_file(&out.join(log_name), buf)?;
    }
    Ok(())
}

fn load_models<F: Real>(paths: &[PathBuf]) -> Result<Vec<AgcnModel<F>>> {
    if paths.len() > 2 {
        return Err(Error::Config("at most two models can be fused".into()));
    }
    paths.iter().map(|p| checkpoint::load::<F>(p)).collect()
}

fn eval<F: Real>(cfg: &RunConfig, paths: &[PathBuf], out: &Path) -> Result<()> {
    let models = load_models::<F>(paths)?;
    let manifest = load_manifest(cfg)?;
    let test = split_subset(&manifest, Split::Test)?;
    if models.iter().any(|m| m.classes != test.classes) {
        return Err(Error::ClassMismatch("model classes differ from the manifest's".into()));
    }
    let data = Dataset::load(&test, &cfg.pre)?;
    let refs: Vec<&AgcnModel<F>> = models.iter().collect();
    let report: ClassificationReport = evaluate(&refs, &data)?;
    if models.len() == 2 {
        for m in &models {
            let single = evaluate(&[m], &data)?;
            println!("{} accuracy={:.4}", m.stream.as_str(), single.accuracy);
        }
    }
    create_dir(out)?;
    write_file(&out.join("report.csv"), report.to_csv_string()?)?;
    println!("{report}");
    Ok(())
}

fn predict<F: Real>(cfg: &RunConfig, paths: &[PathBuf], sequence: &Path) -> Result<()> {
    let models = load_models::<F>(paths)?;
    if models.iter().any(|m| m.classes != models[0].classes) {
        return Err(Error::ClassMismatch("models were trained on different class lists".into()));
    }
    let seq = KeypointSequence::from_path(sequence)?;
    let x = to_input_tensor(&seq, &cfg.pre)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let x = x.reshape(&shape)?.cast::<F>();
    let mut logits = Vec::with_capacity(models.len());
    for m in &models {
        logits.push(m.predict_logits(&x)?);
    }
    let probs = match logits.as_slice() {
        [one] => handgcn::autodiff::softmax_rows(one),
        [a, b] => fuse_streams(a, b)?,
        _ => unreachable!("one or two models"),
    };
    for (rank, (c, p)) in top_k(probs.data(), 5).into_iter().enumerate() {
        println!("{} {} {p:.4}", rank + 1, models[0].classes[c]);
    }
    Ok(())
}
