//! `partgen`: synthesize data, train, sample, encode, edit, evaluate, serve.
//!
//! `sample`, `encode` and `edit` run in-process against `--ckpt`, or talk to
//! a running service when `--server URL` is given. Local edit sessions are
//! JSON files; remote ones are server-side ids.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use partgen_client::Client;
use partgen_core::config::{ModelConfig, Profile, TrainConfig};
use partgen_core::data::SegmentedCloud;
use partgen_core::dataset::{load_dataset, read_record, read_record_dir, synthesize_dataset, write_dataset, write_record, BoxFurnitureTemplate, BOX_FURNITURE_CLASS, BOX_FURNITURE_CONNECTIONS};
use partgen_core::metrics::{evaluate_category, ConnectionSpec, DEFAULT_METRIC_POINTS, DEFAULT_N_SNAP};
use partgen_core::model::PartGen;
use partgen_core::pipeline::{self, EditSession, PartConstraint, TransformEditOptions};
use partgen_core::train::{train_stage1, train_stage2, EpochLog};
use partgen_core::wire::{WireCloud, DEFAULT_INTERP_STEPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::info;

#[derive(Parser)]
#[command(name = "partgen", version, about = "Part-aware point-cloud generation and editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a box-furniture dataset, or resample an existing one.
    MakeData(MakeData),
    /// Run training stage 1 or 2.
    Train(Box<Train>),
    /// Generate shapes.
    Sample(Sample),
    /// Encode a shape into an edit session.
    Encode(Encode),
    /// Edit a session.
    Edit {
        #[command(subcommand)]
        op: EditOp,
    },
    /// Compare two directories of shape records.
    Eval(Eval),
    /// Start the HTTP service.
    Serve(Serve),
}

#[derive(Args)]
struct MakeData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    #[arg(long, default_value_t = 16)]
    n_test: usize,
    /// Points per shape.
    #[arg(long, default_value_t = 512)]
    points: usize,
    /// Resample the shapes of this manifest instead of synthesizing.
    #[arg(long)]
    convert: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    profile: Profile,
    /// Stage-1 checkpoint (required for stage 2).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Points per training shape (stage 1; defaults to the profile budget).
    #[arg(long)]
    points: Option<usize>,
    /// Epochs of the selected stage.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    recache_every: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    direct_regression: bool,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// Append per-epoch logs here as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Backend {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Base URL of a running service, e.g. http://127.0.0.1:8080.
    #[arg(long, conflicts_with = "ckpt")]
    server: Option<String>,
}

enum Target {
    Local(Box<PartGen>),
    Remote(Client),
}

impl Backend {
    fn open(&self) -> Result<Target> {
        match (&self.ckpt, &self.server) {
            (Some(path), None) => Ok(Target::Local(Box::new(PartGen::load(path)?))),
            (None, Some(url)) => Ok(Target::Remote(Client::new(url.clone()))),
            _ => bail!("pass exactly one of --ckpt or --server"),
        }
    }
}

#[derive(Args)]
struct Sample {
    #[command(flatten)]
    backend: Backend,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Points per shape (defaults to the model budget).
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args)]
struct Encode {
    #[command(flatten)]
    backend: Backend,
    /// Shape record to encode.
    #[arg(long)]
    shape: PathBuf,
    /// Session file to write (local mode).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EditCommon {
    #[command(flatten)]
    backend: Backend,
    /// Session file (local) or id (remote).
    #[arg(long)]
    session: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output record (or directory for `interp`).
    #[arg(long)]
    out: PathBuf,
    /// Local mode: where to write the edited session.
    #[arg(long)]
    save_session: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EditOp {
    /// Redraw the style of some parts.
    Resample {
        #[command(flatten)]
        common: EditCommon,
        #[arg(long, value_delimiter = ',')]
        parts: Vec<usize>,
    },
    /// Take parts from donor sessions.
    Mix {
        #[command(flatten)]
        common: EditCommon,
        #[arg(long = "donor")]
        donors: Vec<String>,
        /// `PART=SESSION`, repeatable.
        #[arg(long = "assign")]
        assign: Vec<String>,
    },
    /// Move one part's style towards another session's.
    Interp {
        #[command(flatten)]
        common: EditCommon,
        #[arg(long)]
        part: usize,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = DEFAULT_INTERP_STEPS)]
        steps: usize,
    },
    /// Constrain part placement: `PART:shift.x=V` or `PART:scale.z=V`, repeatable.
    Transform {
        #[command(flatten)]
        common: EditCommon,
        #[arg(long = "constraint")]
        constraints: Vec<String>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value = BOX_FURNITURE_CLASS)]
    class: String,
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// ConnectionSpec JSON; defaults exist for box-furniture and chair.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_METRIC_POINTS)]
    points: usize,
    #[arg(long, default_value_t = DEFAULT_N_SNAP)]
    n_snap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = partgen_server::DEFAULT_MAX_SESSIONS)]
    max_sessions: usize,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn write_clouds(dir: &Path, clouds: &[SegmentedCloud]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, c) in clouds.iter().enumerate() {
        write_record(&dir.join(format!("shape_{i:05}.txt")), c)?;
    }
    Ok(())
}

fn write_cloud(path: &Path, cloud: &SegmentedCloud) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_record(path, cloud)?;
    Ok(())
}

fn make_data(a: MakeData) -> Result<()> {
    let dataset = match &a.convert {
        Some(manifest) => load_dataset(manifest, a.points, a.seed)?,
        None => {
            let template = BoxFurnitureTemplate { points_per_shape: a.points, ..Default::default() };
            synthesize_dataset(a.seed, a.n_train, a.n_test, &template)?
        }
    };
    let path = write_dataset(&a.out, &dataset)?;
    println!("{}", path.display());
    Ok(())
}

fn train_config(a: &Train, class_id: &str) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::for_profile(a.profile, class_id),
    };
    c.seed = a.seed;
    if let Some(e) = a.epochs {
        if a.stage == 1 {
            c.stage1_epochs = e;
        } else {
            c.stage2_epochs = e;
        }
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { c.$field = v; } )* };
    }
    set!(batch_size, lr, lr_final, lambda1, stage2_lr, lambda2, recache_every, k);
    if a.clip_norm.is_some() {
        c.clip_norm = a.clip_norm;
    }
    c.direct_regression |= a.direct_regression;
    c.validate()?;
    Ok(c)
}

fn train(a: &Train) -> Result<()> {
    let mut log_file = match &a.log {
        Some(p) => Some(fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let every = a.log_every.max(1);
    let mut on_epoch = |l: &EpochLog| {
        if l.epoch % every == 0 {
            info!(stage = l.stage, epoch = l.epoch, loss = l.loss, recon = l.recon, kl = l.kl, fit = l.fit, lr = l.lr, "epoch");
        }
        if let Some(f) = log_file.as_mut() {
            use std::io::Write;
            let _ = writeln!(f, "{}", serde_json::to_string(l).unwrap_or_default());
        }
    };
    let model = if a.stage == 1 {
        let manifest = partgen_core::dataset::DatasetManifest::read(&a.data)?;
        let names = if manifest.part_names.is_empty() { (0..manifest.m).map(|j| format!("part{j}")).collect() } else { manifest.part_names.clone() };
        let mut cfg = ModelConfig::for_class(a.profile, &manifest.class_id, names, manifest.connections.clone());
        if let Some(p) = a.points {
            cfg.point_budget = p;
        }
        let data = load_dataset(&a.data, cfg.point_budget, a.seed)?;
        let tc = train_config(a, &data.class_id)?;
        let mut model = PartGen::new(cfg, a.seed)?;
        let logs = train_stage1(&mut model, &data.train, &tc, &mut on_epoch)?;
        if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
            println!("stage 1: recon {:.4} -> {:.4} over {} epochs", first.recon, last.recon, logs.len());
        }
        model
    } else {
        let init = a.init.as_ref().ok_or_else(|| anyhow!("stage 2 needs --init <stage-1 checkpoint>"))?;
        let mut model = PartGen::load(init)?;
        let data = load_dataset(&a.data, model.config.point_budget, a.seed)?;
        let tc = train_config(a, &data.class_id)?;
        let out = train_stage2(&mut model, &data.train, &tc, &mut on_epoch)?;
        if let (Some(first), Some(last)) = (out.logs.first(), out.logs.last()) {
            println!("stage 2: fit {:.4} -> {:.4} over {} epochs", first.fit, last.fit, out.logs.len());
        }
        model
    };
    model.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

async fn sample(a: Sample) -> Result<()> {
    let clouds = match a.backend.open()? {
        Target::Local(model) => {
            let points = a.points.unwrap_or(model.config.point_budget);
            pipeline::generate(&model, a.n, &pipeline::even_split(points, model.m()), &Default::default(), &mut rng(a.seed))?
        }
        Target::Remote(client) => {
            let meta = client.meta().await?;
            let wire = client.generate(a.n, a.seed, a.points).await?;
            wire.iter().map(|w| w.to_cloud(&meta.class_id)).collect::<partgen_core::Result<_>>()?
        }
    };
    write_clouds(&a.out, &clouds)?;
    println!("wrote {} shapes to {}", clouds.len(), a.out.display());
    Ok(())
}

fn read_session(path: &str) -> Result<EditSession> {
    Ok(serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading session {path}"))?)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

async fn encode(a: Encode) -> Result<()> {
    match a.backend.open()? {
        Target::Local(model) => {
            let shape = read_record(&a.shape, &model.config.class_id, model.m())?;
            let session = pipeline::encode_shape(&model, &shape)?;
            let out = a.out.ok_or_else(|| anyhow!("local encode needs --out <session.json>"))?;
            write_json(&out, &session)?;
            println!("{}", out.display());
        }
        Target::Remote(client) => {
            let meta = client.meta().await?;
            let shape = read_record(&a.shape, &meta.class_id, meta.m)?;
            let created = client.create_session(WireCloud::from_cloud(&shape)).await?;
            println!("{}", serde_json::to_string_pretty(&created)?);
        }
    }
    Ok(())
}

/// `1:shift.y=0.5` → part 1, shift, axis 1, 0.5.
fn parse_constraint(s: &str, into: &mut BTreeMap<usize, PartConstraint>) -> Result<()> {
    let bad = || anyhow!("constraint {s:?} is not PART:(shift|scale).(x|y|z)=VALUE");
    let (part, rest) = s.split_once(':').ok_or_else(bad)?;
    let (lhs, value) = rest.split_once('=').ok_or_else(bad)?;
    let (kind, axis) = lhs.split_once('.').ok_or_else(bad)?;
    let part: usize = part.trim().parse().map_err(|_| bad())?;
    let value: f64 = value.trim().parse().map_err(|_| bad())?;
    let axis = match axis {
        "x" => 0,
        "y" => 1,
        "z" => 2,
        _ => return Err(bad()),
    };
    let entry = into.entry(part).or_default();
    match kind {
        "shift" => entry.shift[axis] = Some(value),
        "scale" => entry.scale[axis] = Some(value),
        _ => return Err(bad()),
    }
    Ok(())
}

fn parse_assign(items: &[String]) -> Result<BTreeMap<usize, String>> {
    items
        .iter()
        .map(|s| {
            let (p, src) = s.split_once('=').ok_or_else(|| anyhow!("assignment {s:?} is not PART=SESSION"))?;
            Ok((p.trim().parse().with_context(|| format!("part index in {s:?}"))?, src.to_string()))
        })
        .collect()
}

fn finish_local(common: &EditCommon, cloud: &SegmentedCloud, session: &EditSession) -> Result<()> {
    write_cloud(&common.out, cloud)?;
    if let Some(p) = &common.save_session {
        write_json(p, session)?;
    }
    println!("{}", common.out.display());
    Ok(())
}

async fn remote_cloud(client: &Client, wire: &WireCloud) -> Result<SegmentedCloud> {
    let meta = client.meta().await?;
    Ok(wire.to_cloud(&meta.class_id)?)
}

async fn edit(op: EditOp) -> Result<()> {
    match op {
        EditOp::Resample { common, parts } => match common.backend.open()? {
            Target::Local(model) => {
                let session = read_session(&common.session)?;
                let (cloud, next) = pipeline::resample_parts(&model, &session, &parts, &mut rng(common.seed))?;
                finish_local(&common, &cloud, &next)
            }
            Target::Remote(client) => {
                let wire = client.resample(&common.session, parts, common.seed).await?;
                write_cloud(&common.out, &remote_cloud(&client, &wire).await?)
            }
        },
        EditOp::Mix { common, donors, assign } => {
            let assignment = parse_assign(&assign)?;
            match common.backend.open()? {
                Target::Local(model) => {
                    let base = read_session(&common.session)?;
                    let donor_sessions: Vec<EditSession> = donors.iter().map(|d| read_session(d)).collect::<Result<_>>()?;
                    let mut refs = vec![&base];
                    refs.extend(donor_sessions.iter());
                    let mut idx = vec![0; model.m()];
                    for (part, src) in &assignment {
                        let slot = idx.get_mut(*part).ok_or_else(|| anyhow!("part {part} out of range"))?;
                        if *src != common.session {
                            *slot = 1 + donors.iter().position(|d| d == src).ok_or_else(|| anyhow!("{src} is not a --donor"))?;
                        }
                    }
                    let (cloud, next) = pipeline::mix_parts(&model, &refs, &idx, &mut rng(common.seed))?;
                    finish_local(&common, &cloud, &next)
                }
                Target::Remote(client) => {
                    let wire = client.mix(&common.session, donors, assignment, common.seed).await?;
                    write_cloud(&common.out, &remote_cloud(&client, &wire).await?)
                }
            }
        }
        EditOp::Interp { common, part, target, steps } => {
            let frames = match common.backend.open()? {
                Target::Local(model) => {
                    let session = read_session(&common.session)?;
                    let goal = read_session(&target)?;
                    let z = goal.latents.z.get(part).filter(|_| goal.present().get(part) == Some(&true)).ok_or_else(|| anyhow!("part {part} is absent in {target}"))?;
                    pipeline::interpolate_part(&model, &session, part, z, steps, &mut rng(common.seed))?.into_iter().map(|f| f.cloud).collect()
                }
                Target::Remote(client) => {
                    let wire = client.interpolate(&common.session, part, &target, steps, common.seed).await?;
                    let mut out = Vec::with_capacity(wire.len());
                    for w in &wire {
                        out.push(remote_cloud(&client, w).await?);
                    }
                    out
                }
            };
            write_clouds(&common.out, &frames)?;
            println!("wrote {} frames to {}", frames.len(), common.out.display());
            Ok(())
        }
        EditOp::Transform { common, constraints, max_iters } => {
            let mut parsed = BTreeMap::new();
            for c in &constraints {
                parse_constraint(c, &mut parsed)?;
            }
            match common.backend.open()? {
                Target::Local(model) => {
                    let session = read_session(&common.session)?;
                    let mut opts = TransformEditOptions::default();
                    if let Some(n) = max_iters {
                        opts.max_iters = n;
                    }
                    let out = pipeline::edit_transform(&model, &session, &parsed, &opts, &mut rng(common.seed))?;
                    println!("residual {:.3e}{}", out.residual, if out.converged { "" } else { " (not converged)" });
                    finish_local(&common, &out.cloud, &out.session)
                }
                Target::Remote(client) => {
                    let resp = client.transform(&common.session, parsed, common.seed, max_iters).await?;
                    println!("residual {:.3e}{}", resp.residual, if resp.converged { "" } else { " (not converged)" });
                    write_cloud(&common.out, &remote_cloud(&client, &resp.cloud).await?)
                }
            }
        }
    }
}

fn eval(a: Eval) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None if a.class == BOX_FURNITURE_CLASS => ConnectionSpec::from_pairs(&BOX_FURNITURE_CONNECTIONS),
        None if a.class == "chair" => ConnectionSpec::chair(),
        None => bail!("no default connection spec for class {:?}; pass --spec", a.class),
    };
    let generated = read_record_dir(&a.generated, &a.class, a.m)?;
    let reference = read_record_dir(&a.reference, &a.class, a.m)?;
    let report = evaluate_category(&generated, &reference, &spec, a.points, a.n_snap, &mut rng(a.seed))?;
    println!("{report}");
    if let Some(out) = &a.out {
        write_json(out, &serde_json::json!({ "raw": report, "scaled": report.scaled() }))?;
    }
    Ok(())
}

async fn serve(a: Serve) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad --host/--port")?;
    partgen_server::serve(partgen_server::ServeOptions { checkpoint: a.ckpt, addr, max_sessions: a.max_sessions })
        .await
        .map_err(|e| anyhow!(e))
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::MakeData(a) => make_data(a),
        Command::Train(a) => tokio::task::block_in_place(|| train(&a)),
        Command::Sample(a) => sample(a).await,
        Command::Encode(a) => encode(a).await,
        Command::Edit { op } => edit(op).await,
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a).await,
    }
}
