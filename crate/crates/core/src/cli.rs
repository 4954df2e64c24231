//! The `dgd` command line.
//!
//! Exit codes: 0 ok, 2 config, 3 usage, 4 io, 5 score, 6 auc, 7 mine, 8 fuse.
//! Every command computes its full result before writing any file.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    generate_identities, make_verification_pairs, parse_pair_manifest, parse_train_manifest,
    read_image, read_tensor, write_pgm, DataError, Image, TensorRecord, TrainManifest,
};
use crate::descriptor::{EmbedMode, Embedding};
use crate::evalfuse::{
    auc, format_auc, fuse, mine_pseudo, parse_scores, score_pairs, scores_to_csv, tta_score,
    EvalError, PairScore, TtaMode,
};
use crate::augment::bilinear_resize;
use crate::extractor::{extract_features, make_filter_bank, INPUT_SIZE};
use crate::pipeline::{load_images, resolve, Model};
use crate::trainer::{load_checkpoint, TrainError, TrainInit, TrainSession};

pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const USAGE: i32 = 3;
    pub const IO: i32 = 4;
    pub const SCORE: i32 = 5;
    pub const AUC: i32 = 6;
    pub const MINE: i32 = 7;
    pub const FUSE: i32 = 8;
}

#[derive(Debug, Parser)]
#[command(name = "dgd", version, about = "Nose-print pair verification with dual global descriptors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: images, train.csv, val_pairs.csv, val_images.txt.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write a checkpoint. The epoch log goes to stdout.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Training manifests; paths inside resolve against each manifest's
        /// directory. Defaults to <data_dir>/train.csv.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
        /// Starting weights; required for stage 2.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted run of this stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs of the current invocation.
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a list of images (one path per line) into an [N, D] tensor, or
    /// [N, V, D] with --tta. Writes <out>.paths.csv alongside.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the projections at inference.
        #[arg(long)]
        no_fc: bool,
        /// One embedding per test-time view.
        #[arg(long)]
        tta: bool,
        /// Use the live head instead of the EMA shadow.
        #[arg(long)]
        live: bool,
        /// Run config supplying TTA views and seed.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the frozen extractor's [C, H, W] feature map of one image.
    Extract {
        /// Run config supplying the extractor seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-score every pair of a pair manifest.
    Score {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Aggregation for [N, V, D] embeddings.
        #[arg(long, value_enum, default_value = "mean-sim")]
        tta_mode: TtaModeArg,
    },
    /// Print `auc=<value>` for a labeled score file.
    EvalAuc {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Turn the top-K scored pairs into pseudo identities.
    MinePseudo {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Existing training manifest; new ids start after its largest id.
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Weighted mean of score files over the same pairs.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TtaModeArg {
    MeanSim,
    MeanEmb,
}

impl From<TtaModeArg> for TtaMode {
    fn from(m: TtaModeArg) -> Self {
        match m {
            TtaModeArg::MeanSim => TtaMode::MeanSim,
            TtaModeArg::MeanEmb => TtaMode::MeanEmb,
        }
    }
}

/// A failed command: exit code and message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn config_failure(e: ConfigError) -> Failure {
    Failure::new(exit::CONFIG, e.to_string())
}

fn data_failure(e: DataError, otherwise: i32) -> Failure {
    let code = if matches!(e, DataError::Io { .. }) { exit::IO } else { otherwise };
    Failure::new(code, e.to_string())
}

fn eval_failure(e: EvalError, code: i32) -> Failure {
    match e {
        EvalError::Data(d) => data_failure(d, code),
        other => Failure::new(code, other.to_string()),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Data(d) => data_failure(d, exit::CONFIG),
        other => Failure::new(exit::CONFIG, other.to_string()),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::new(exit::IO, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::new(exit::IO, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::new(exit::IO, format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

fn unreadable(failures: Vec<(String, DataError)>) -> Failure {
    let mut msg = format!("{} unreadable image(s):", failures.len());
    for (path, e) in failures {
        let _ = write!(msg, "\n  {path}: {e}");
    }
    Failure::new(exit::IO, msg)
}

fn gen_synth(config: &Path, out: &Path) -> CmdResult {
    let cfg = RunConfig::load(config).map_err(config_failure)?;
    let synth = &cfg.synth;
    let train = generate_identities(&synth.dataset, 0..synth.dataset.identities)
        .map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
    let held_out = if synth.eval_identities > 0 {
        let first = synth.dataset.identities;
        let set = generate_identities(&synth.dataset, first..first + synth.eval_identities)
            .map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
        let pairs = make_verification_pairs(&set.manifest, synth.eval_pairs_per_class, synth.dataset.seed)
            .map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
        Some((set, pairs))
    } else {
        None
    };

    std::fs::create_dir_all(out).map_err(|e| Failure::new(exit::IO, format!("{}: {e}", out.display())))?;
    let write_images = |set: &crate::data::SyntheticSet| -> CmdResult {
        for (name, img) in set.named_images() {
            write_pgm(img, out.join(name)).map_err(|e| data_failure(e, exit::IO))?;
        }
        Ok(())
    };
    write_images(&train)?;
    write_file(&out.join("train.csv"), train.manifest.to_csv().as_bytes())?;
    if let Some((set, pairs)) = held_out {
        write_images(&set)?;
        write_file(&out.join("val_pairs.csv"), pairs.to_csv().as_bytes())?;
        let list: String = set.manifest.paths().map(|(_, p)| format!("{p}\n")).collect();
        write_file(&out.join("val_images.txt"), list.as_bytes())?;
    }
    Ok(())
}

/// Reads manifests, resolving every image path against its manifest's
/// directory, and merges them.
fn load_training_data(manifests: &[PathBuf]) -> Result<(TrainManifest, HashMap<String, Image>), Failure> {
    let mut merged = TrainManifest::new();
    for path in manifests {
        let text = read_text(path)?;
        let m = parse_train_manifest(&text)
            .map_err(|e| data_failure(e, exit::CONFIG))
            .map_err(|f| Failure::new(f.code, format!("{}: {}", path.display(), f.message)))?;
        let base = base_dir(path);
        let groups = m
            .groups()
            .iter()
            .map(|(&id, paths)| {
                let resolved = paths.iter().map(|p| resolve(base, p).display().to_string()).collect();
                (id, resolved)
            })
            .collect();
        let m = TrainManifest::from_groups(groups).map_err(|e| data_failure(e, exit::CONFIG))?;
        merged = merged.merged(&m).map_err(|e| data_failure(e, exit::CONFIG))?;
    }
    if merged.is_empty() {
        return Err(Failure::new(exit::CONFIG, "training manifest is empty"));
    }
    let paths: Vec<String> = merged.paths().map(|(_, p)| p.to_string()).collect();
    let images = load_images(&paths, Path::new("")).map_err(unreadable)?;
    Ok((merged, paths.into_iter().zip(images).collect()))
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    stage: u8,
    manifests: &[PathBuf],
    init: Option<&Path>,
    resume: Option<&Path>,
    max_epochs: Option<usize>,
    out: &Path,
) -> CmdResult {
    let cfg = RunConfig::load(config).map_err(config_failure)?;
    let stage_cfg = cfg.stage(stage).map_err(config_failure)?.clone();
    if stage == 2 && init.is_none() && resume.is_none() {
        return Err(Failure::new(exit::USAGE, "stage 2 requires --init <checkpoint>"));
    }
    let profile = cfg.profile(&stage_cfg.augment_profile).map_err(config_failure)?;
    let manifests = if manifests.is_empty() {
        vec![cfg.data_dir.join("train.csv")]
    } else {
        manifests.to_vec()
    };
    let load = |p: &Path| load_checkpoint(p).map_err(train_failure);
    let start = match (init, resume) {
        (_, Some(r)) => TrainInit::Resume(load(r)?),
        (Some(i), None) => TrainInit::FineTune(load(i)?),
        (None, None) => TrainInit::Fresh(cfg.head),
    };
    let extractor_seed = match &start {
        TrainInit::Fresh(_) => cfg.extractor_seed,
        TrainInit::FineTune(c) | TrainInit::Resume(c) => c.extractor_seed,
    };
    let (manifest, images) = load_training_data(&manifests)?;
    let bank = make_filter_bank(extractor_seed);
    let mut session =
        TrainSession::new(&manifest, &images, &bank, start, stage_cfg, profile).map_err(train_failure)?;
    let mut remaining = max_epochs.unwrap_or(usize::MAX);
    let stdout = std::io::stdout();
    while !session.is_finished() && remaining > 0 {
        let log = session.run_epoch().map_err(train_failure)?;
        let _ = writeln!(stdout.lock(), "{log}");
        remaining -= 1;
    }
    let bytes = session.checkpoint().to_bytes().map_err(train_failure)?;
    write_file(out, &bytes)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".paths.csv");
    PathBuf::from(name)
}

fn read_list(path: &Path) -> Result<Vec<String>, Failure> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn extract_cmd(config: Option<&Path>, image: &Path, out: &Path) -> CmdResult {
    let seed = match config {
        Some(p) => RunConfig::load(p).map_err(config_failure)?.extractor_seed,
        None => 0,
    };
    let img = read_image(image).map_err(|e| data_failure(e, exit::IO))?;
    let img = if img.width() == INPUT_SIZE && img.height() == INPUT_SIZE {
        img
    } else {
        bilinear_resize(&img, INPUT_SIZE, INPUT_SIZE)
    };
    let features = extract_features(&img, &make_filter_bank(seed))
        .map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
    write_file(out, &features.to_record().to_bytes())
}

fn embed_cmd(
    ckpt: &Path,
    list: &Path,
    out: &Path,
    no_fc: bool,
    tta: bool,
    live: bool,
    config: Option<&Path>,
) -> CmdResult {
    let cfg = match config {
        Some(p) => RunConfig::load(p).map_err(config_failure)?,
        None => RunConfig::default(),
    };
    let ck = load_checkpoint(ckpt).map_err(|e| match e {
        TrainError::Data(d) => data_failure(d, exit::CONFIG),
        other => Failure::new(exit::CONFIG, format!("{}: {other}", ckpt.display())),
    })?;
    let names = read_list(list)?;
    let images = load_images(&names, base_dir(list)).map_err(unreadable)?;
    let model = Model::from_checkpoint(&ck, !live && cfg.eval.use_ema);
    let mode = if no_fc { EmbedMode::NoFc } else { cfg.eval.embed_mode };
    let model_failure = |e: crate::pipeline::ModelError| Failure::new(exit::CONFIG, e.to_string());
    let record = if tta {
        let mut data = Vec::new();
        let mut dims = vec![images.len(), cfg.eval.tta.views.len(), 0];
        for img in &images {
            let views = model
                .embed_views(img, &cfg.eval.tta, cfg.eval.tta_seed, mode)
                .map_err(model_failure)?;
            for v in views {
                dims[2] = v.dim();
                data.extend_from_slice(v.as_slice());
            }
        }
        if images.is_empty() {
            dims[2] = model.head.embedding_dim(mode);
        }
        TensorRecord::new(dims, data)
    } else {
        let embs = model.embed_images(&images, mode).map_err(model_failure)?;
        let d = model.head.embedding_dim(mode);
        TensorRecord::new(vec![images.len(), d], embs.into_iter().flat_map(Embedding::into_vec).collect())
    }
    .map_err(|e| data_failure(e, exit::CONFIG))?;
    let mut sidecar = String::from("index,path\n");
    for (i, n) in names.iter().enumerate() {
        let _ = writeln!(sidecar, "{i},{n}");
    }
    write_file(out, &record.to_bytes())?;
    write_file(&sidecar_path(out), sidecar.as_bytes())
}

fn read_sidecar(path: &Path) -> Result<Vec<String>, Failure> {
    let text = read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("index,path") {
        return Err(Failure::new(exit::SCORE, format!("{}: expected header index,path", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| match l.trim().split_once(',') {
            Some((idx, p)) if idx == i.to_string() => Ok(p.to_string()),
            _ => Err(Failure::new(
                exit::SCORE,
                format!("{}: line {}: expected index {i}", path.display(), i + 2),
            )),
        })
        .collect()
}

fn score_cmd(emb: &Path, pairs: &Path, out: &Path, mode: TtaMode) -> CmdResult {
    let record = read_tensor(emb).map_err(|e| data_failure(e, exit::SCORE))?;
    let names = read_sidecar(&sidecar_path(emb))?;
    let manifest = parse_pair_manifest(&read_text(pairs)?)
        .map_err(|e| Failure::new(exit::SCORE, format!("{}: {e}", pairs.display())))?;
    let dims = record.dims().to_vec();
    if dims.first() != Some(&names.len()) || !(dims.len() == 2 || dims.len() == 3) {
        return Err(Failure::new(
            exit::SCORE,
            format!("embedding dims {dims:?} do not match {} listed paths", names.len()),
        ));
    }
    let d = *dims.last().unwrap();
    let v = if dims.len() == 3 { dims[1] } else { 1 };
    let unit = |chunk: &[f64], row: usize| {
        Embedding::from_unit(chunk.to_vec())
            .map_err(|e| Failure::new(exit::SCORE, format!("embedding of row {row}: {e}")))
    };
    let per_image = record.data().chunks(v * d.max(1));
    let scores = if dims.len() == 2 {
        let mut map = HashMap::new();
        for (row, (name, chunk)) in names.iter().zip(per_image).enumerate() {
            map.insert(name.clone(), unit(chunk, row)?);
        }
        score_pairs(&map, &manifest)
    } else {
        let mut map = HashMap::new();
        for (row, (name, chunk)) in names.iter().zip(per_image).enumerate() {
            let views = chunk.chunks(d).map(|c| unit(c, row)).collect::<Result<Vec<_>, _>>()?;
            map.insert(name.clone(), views);
        }
        tta_score(&map, &manifest, mode)
    }
    .map_err(|e| eval_failure(e, exit::SCORE))?;
    write_file(out, scores_to_csv(&scores).as_bytes())
}

fn load_scores(path: &Path, code: i32) -> Result<Vec<PairScore>, Failure> {
    parse_scores(&read_text(path)?)
        .map_err(|e| eval_failure(e, code))
        .map_err(|f| Failure::new(f.code, format!("{}: {}", path.display(), f.message)))
}

fn eval_auc(scores: &Path) -> CmdResult {
    let scores = load_scores(scores, exit::AUC)?;
    let value = auc(&scores).map_err(|e| eval_failure(e, exit::AUC))?;
    println!("{}", format_auc(value));
    Ok(())
}

fn mine_cmd(scores: &Path, k: usize, out: &Path, train: Option<&Path>) -> CmdResult {
    let scores = load_scores(scores, exit::MINE)?;
    let next_id = match train {
        Some(p) => parse_train_manifest(&read_text(p)?)
            .map_err(|e| data_failure(e, exit::MINE))?
            .next_id(),
        None => 0,
    };
    let mined = mine_pseudo(&scores, k, next_id).map_err(|e| eval_failure(e, exit::MINE))?;
    write_file(out, mined.to_csv().as_bytes())
}

fn fuse_cmd(inputs: &[PathBuf], weights: Option<&[f64]>, out: &Path) -> CmdResult {
    let lists = inputs
        .iter()
        .map(|p| load_scores(p, exit::FUSE))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = fuse(&lists, weights).map_err(|e| eval_failure(e, exit::FUSE))?;
    write_file(out, scores_to_csv(&fused).as_bytes())
}

pub fn execute(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenSynth { config, out } => gen_synth(&config, &out),
        Command::Train {
            config,
            stage,
            manifests,
            init,
            resume,
            max_epochs,
            out,
        } => train(
            &config,
            stage,
            &manifests,
            init.as_deref(),
            resume.as_deref(),
            max_epochs,
            &out,
        ),
        Command::Embed {
            ckpt,
            images,
            out,
            no_fc,
            tta,
            live,
            config,
        } => embed_cmd(&ckpt, &images, &out, no_fc, tta, live, config.as_deref()),
        Command::Score {
            emb,
            pairs,
            out,
            tta_mode,
        } => score_cmd(&emb, &pairs, &out, tta_mode.into()),
        Command::Extract { config, image, out } => extract_cmd(config.as_deref(), &image, &out),
        Command::EvalAuc { scores } => eval_auc(&scores),
        Command::MinePseudo { scores, k, out, train } => mine_cmd(&scores, k, &out, train.as_deref()),
        Command::Fuse { inputs, weights, out } => fuse_cmd(&inputs, weights.as_deref(), &out),
    }
}

/// Parses arguments, runs the command, reports errors on stderr, and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => exit::OK,
                _ => exit::USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
