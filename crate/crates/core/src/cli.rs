//! Command-line entry points: `train`, `eval`, `infer`, `visualize`, `serve`.
//!
//! Every config key is also a flag (`--loss.lambda1 10`). Values merge as
//! defaults ← preset ← `--config` file ← flags.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use crate::checkpoint::CheckpointKind;
use crate::config::{RunConfig, KEYS};
use crate::data::{self, Dataset, SYNTHETIC_EVAL_BASE, SYNTHETIC_TRAIN_BASE};
use crate::eval::{embedding_from_run, evaluate};
use crate::model::{model_inputs, sample_seed, latent_from_seed, IdentityModel, InpaintModel, Inpainter};
use crate::prior::Mode;
use crate::service::{self, ServiceState};
use crate::training::{LossReport, Trainer};
use crate::visualize::{save_raster, visualize_prior};

/// Shorthand flags and the config keys they set.
const ALIASES: &[(&str, &str, &str)] = &[
    ("iters", "train.iters", "total training iterations"),
    ("mode", "prior.mode", "det | prob (or deterministic | probabilistic)"),
    ("size", "data.size", "image side length"),
    ("ckpt-every", "train.ckpt_every", "checkpoint interval"),
    ("k", "eval.k", "samples per pair for probabilistic models"),
    ("port", "serve.port", "HTTP port"),
];

fn with_config_args(mut cmd: Command) -> Command {
    cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").value_parser(value_parser!(PathBuf)).help("config file of `key = value` lines"))
        .arg(Arg::new("preset").long("preset").value_name("NAME").help("default | desk"));
    for (flag, key, help) in ALIASES {
        cmd = cmd.arg(Arg::new(*flag).long(*flag).value_name("VALUE").help(format!("{help} (sets {key})")));
    }
    for spec in KEYS {
        cmd = cmd.arg(Arg::new(spec.key).long(spec.key).value_name("VALUE").help(spec.help).hide(true));
    }
    cmd
}

fn data_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("synthetic").long("synthetic").value_name("N").value_parser(value_parser!(usize)).help("use N synthetic pairs"))
        .arg(Arg::new("manifest").long("manifest").value_name("FILE").value_parser(value_parser!(PathBuf)).help("newline-delimited image list"))
        .arg(Arg::new("masks").long("masks").value_name("DIR").value_parser(value_parser!(PathBuf)).help("directory of PNG masks"))
}

fn path_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id).long(id).value_name("PATH").value_parser(value_parser!(PathBuf)).help(help)
}

pub fn command() -> Command {
    let train = data_args(with_config_args(Command::new("train").about("train a model")))
        .arg(path_arg("out", "run directory for checkpoints and the loss log").default_value("runs/spn"))
        .arg(path_arg("resume", "continue from a training checkpoint"));
    let eval = data_args(with_config_args(Command::new("eval").about("evaluate a checkpoint")))
        .arg(path_arg("checkpoint", "checkpoint or inference export"))
        .arg(Arg::new("identity-model").long("identity-model").action(ArgAction::SetTrue).help("debug oracle that returns the ground truth"))
        .arg(path_arg("out", "report prefix; writes PREFIX.tsv and PREFIX.txt").default_value("report"));
    let infer = with_config_args(Command::new("infer").about("inpaint one image"))
        .arg(path_arg("checkpoint", "checkpoint or inference export").required(true))
        .arg(path_arg("image", "input PNG").required(true))
        .arg(path_arg("mask", "mask PNG, >=128 marks missing pixels").required(true))
        .arg(path_arg("out", "output PNG; several samples get _<i> suffixes").required(true))
        .arg(Arg::new("samples").long("samples").value_parser(value_parser!(usize)).default_value("1"))
        .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)).default_value("0"))
        .arg(Arg::new("raw").long("raw").action(ArgAction::SetTrue).help("skip compositing"));
    let visualize = with_config_args(Command::new("visualize").about("K-Means rasters of the prior pyramid"))
        .arg(path_arg("checkpoint", "checkpoint or inference export").required(true))
        .arg(path_arg("image", "input PNG").required(true))
        .arg(path_arg("mask", "mask PNG").required(true))
        .arg(path_arg("out-dir", "output directory").required(true))
        .arg(Arg::new("clusters").long("clusters").value_parser(value_parser!(usize)).default_value("6"))
        .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)).default_value("0"));
    let serve = with_config_args(Command::new("serve").about("start the HTTP service"))
        .arg(path_arg("checkpoint", "checkpoint or inference export (overrides serve.checkpoint)"));
    Command::new("spn")
        .about("Semantic pyramid network for image inpainting")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommands([train, eval, infer, visualize, serve])
}

/// Applies preset, config file and flags on top of `base` (or the defaults).
fn effective_config(m: &ArgMatches, base: Option<RunConfig>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (base, m.get_one::<String>("preset")) {
        (Some(b), None) => b,
        (Some(_), Some(_)) => bail!("--preset cannot be combined with a stored config"),
        (None, p) => RunConfig::with_preset(p.map_or("default", String::as_str))?,
    };
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.merge_file(path)?;
    }
    for (flag, key, _) in ALIASES {
        if let Some(v) = m.get_one::<String>(flag) {
            cfg.set(key, v)?;
        }
    }
    for spec in KEYS {
        if let Some(v) = m.get_one::<String>(spec.key) {
            cfg.set(spec.key, v)?;
        }
    }
    let mode = Mode::parse(cfg.str("prior.mode"))?;
    cfg.set("prior.mode", mode.as_str())?;
    Ok(cfg)
}

fn dataset(m: &ArgMatches, cfg: &RunConfig, synthetic_base: u64) -> anyhow::Result<Dataset> {
    let size = cfg.usize("data.size")?;
    match (m.get_one::<usize>("synthetic"), m.get_one::<PathBuf>("manifest"), m.get_one::<PathBuf>("masks")) {
        (Some(&n), None, None) => {
            if n == 0 {
                bail!("--synthetic needs at least one pair");
            }
            Ok(Dataset::Synthetic { first_seed: synthetic_base, len: n, size })
        }
        (None, Some(manifest), Some(masks)) => Ok(Dataset::from_files(
            manifest,
            masks,
            size,
            cfg.bool("data.center_crop"),
            cfg.bool("data.flip_masks"),
        )?),
        _ => bail!("give either --synthetic N or both --manifest and --masks"),
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(m: &ArgMatches) -> anyhow::Result<i32> {
    let out = m.get_one::<PathBuf>("out").expect("defaulted").clone();
    let mut trainer = match m.get_one::<PathBuf>("resume") {
        Some(dir) => {
            let stored = fs::read_to_string(crate::checkpoint::config_path(dir))
                .with_context(|| format!("reading the config of {}", dir.display()))?;
            let cfg = effective_config(m, Some(RunConfig::from_text(&stored)?))?;
            let t = Trainer::resume(dir, Some(&cfg))?;
            log::info!("resumed {} at iteration {}", dir.display(), t.iteration);
            t
        }
        None => Trainer::new(&effective_config(m, None)?)?,
    };
    let cfg = trainer.nets.config.clone();
    let ds = dataset(m, &cfg, SYNTHETIC_TRAIN_BASE)?;
    data::check_divisible(ds.image_size(), trainer.nets.levels())?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("config.toml"), &cfg.to_text())?;
    let log_path = out.join("loss.tsv");
    let fresh = !log_path.exists() || trainer.iteration == 0;
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if fresh {
        writeln!(log_file, "{}", LossReport::columns(trainer.mode()).join("\t"))?;
    }
    let total = trainer.train.total_iters;
    let every = cfg.usize("train.ckpt_every")?.max(1) as u64;
    let extractors = trainer.extractor_digest();
    let mut last_saved = None;
    while trainer.iteration < total {
        let report = trainer.step(&ds)?;
        writeln!(log_file, "{}", report.tsv_row())?;
        if report.iteration % 50 == 0 {
            log::info!("{report}");
        }
        if trainer.iteration % every == 0 || trainer.iteration == total {
            let dir = out.join(format!("ckpt-{:07}", trainer.iteration));
            trainer.save(&dir)?;
            write_text(&out.join("latest"), &format!("{}\n", dir.file_name().unwrap().to_string_lossy()))?;
            log::info!("saved {}", dir.display());
            last_saved = Some(dir);
        }
    }
    if trainer.extractor_digest() != extractors {
        bail!("frozen extractor parameters changed during training");
    }
    let export = out.join("export");
    trainer.nets.save_params(&export, CheckpointKind::Inference, trainer.iteration)?;
    println!(
        "trained to iteration {total}; last checkpoint {}; inference export {}",
        last_saved.map_or_else(|| "-".into(), |d| d.display().to_string()),
        export.display()
    );
    Ok(0)
}

/// Accepts a checkpoint directory or a run directory containing `latest`.
fn resolve_checkpoint(path: &Path) -> anyhow::Result<PathBuf> {
    if path.join("meta").exists() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join("latest");
    if latest.exists() {
        let name = fs::read_to_string(&latest)?;
        return Ok(path.join(name.trim()));
    }
    bail!("{} is not a checkpoint directory", path.display())
}

fn cmd_eval(m: &ArgMatches) -> anyhow::Result<i32> {
    let (model, base): (Box<dyn InpaintModel>, Option<RunConfig>) = if m.get_flag("identity-model") {
        (Box::new(IdentityModel), None)
    } else {
        let ckpt = m.get_one::<PathBuf>("checkpoint").context("--checkpoint is required (or --identity-model)")?;
        let dir = resolve_checkpoint(ckpt)?;
        let inpainter = Inpainter::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
        let cfg = inpainter.with_networks(|n| n.config.clone());
        (Box::new(inpainter), Some(cfg))
    };
    let cfg = effective_config(m, base)?;
    let levels = cfg.int_list("prior.channels").len();
    let ds = dataset(m, &cfg, SYNTHETIC_EVAL_BASE)?;
    let seed = cfg.int("eval.seed") as u64;
    let pairs = ds.evaluation_pairs(seed, levels)?;
    let mut k = cfg.usize("eval.k")?;
    if !model.is_probabilistic() && k > 1 {
        eprintln!("warning: deterministic model, forcing k = 1 (requested {k})");
        k = 1;
    }
    let embedder = embedding_from_run(&cfg)?;
    let report = evaluate(model.as_ref(), &pairs, k, cfg.bool("eval.composited"), seed, embedder.as_ref())?;
    let prefix = m.get_one::<PathBuf>("out").expect("defaulted");
    let config_lines: String = cfg.to_text().lines().map(|l| format!("# config {l}\n")).collect();
    let table = report.to_table();
    write_text(&prefix.with_extension("tsv"), &format!("{table}{config_lines}"))?;
    let kv: String = cfg.to_text().lines().map(|l| format!("config.{l}\n")).collect();
    write_text(&prefix.with_extension("txt"), &format!("{}{kv}", report.to_key_values()))?;
    print!("{table}");
    Ok(0)
}

fn read_png_pair(image: &Path, mask: &Path) -> anyhow::Result<(data::ImageTensor, data::MaskTensor)> {
    let img = data::decode_png(&fs::read(image).with_context(|| format!("reading {}", image.display()))?)?;
    let msk = data::decode_mask_png(&fs::read(mask).with_context(|| format!("reading {}", mask.display()))?)?;
    Ok((img, msk))
}

fn cmd_infer(m: &ArgMatches) -> anyhow::Result<i32> {
    let dir = resolve_checkpoint(m.get_one::<PathBuf>("checkpoint").expect("required"))?;
    let model = Inpainter::load(&dir)?;
    let (image, mask) = read_png_pair(m.get_one::<PathBuf>("image").unwrap(), m.get_one::<PathBuf>("mask").unwrap())?;
    let out = m.get_one::<PathBuf>("out").unwrap();
    let mut samples = *m.get_one::<usize>("samples").unwrap();
    if samples > 1 && !model.is_probabilistic() {
        eprintln!("warning: deterministic model, writing 1 sample");
        samples = 1;
    }
    let seed = *m.get_one::<u64>("seed").unwrap();
    for i in 0..samples as u64 {
        let s = sample_seed(seed, i);
        let raw = model.inpaint(&image, &mask, s)?;
        let result = if m.get_flag("raw") { raw } else { data::composite(&raw, &image, &mask)? };
        let path = if samples == 1 {
            out.clone()
        } else {
            let stem = out.file_stem().unwrap_or_default().to_string_lossy();
            out.with_file_name(format!("{stem}_{i}.png"))
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        data::save_image(&path, &result)?;
        println!("{}\tseed={s}", path.display());
    }
    let cfg = model.with_networks(|n| n.config.clone());
    write_text(&out.with_extension("config.toml"), &effective_config(m, Some(cfg))?.to_text())?;
    Ok(0)
}

fn cmd_visualize(m: &ArgMatches) -> anyhow::Result<i32> {
    let dir = resolve_checkpoint(m.get_one::<PathBuf>("checkpoint").expect("required"))?;
    let model = Inpainter::load(&dir)?;
    let (image, mask) = read_png_pair(m.get_one::<PathBuf>("image").unwrap(), m.get_one::<PathBuf>("mask").unwrap())?;
    let out = m.get_one::<PathBuf>("out-dir").unwrap();
    let k = *m.get_one::<usize>("clusters").unwrap();
    let seed = *m.get_one::<u64>("seed").unwrap();
    let (masked, mask_t) = model_inputs(&image, &mask)?;
    let rasters = model.with_networks(|nets| -> anyhow::Result<_> {
        let z = (nets.mode() == Mode::Probabilistic).then(|| latent_from_seed(sample_seed(seed, 0), nets.latent_dim()));
        let fwd = tch::no_grad(|| nets.forward(&masked, &mask_t, z.as_ref()))?;
        Ok(visualize_prior(&fwd.pyramid, k, seed)?)
    })?;
    fs::create_dir_all(out)?;
    for (l, r) in rasters.iter().enumerate() {
        let path = out.join(format!("prior_level{}.png", l + 1));
        save_raster(&path, r)?;
        println!("{}\t{}x{}\tclusters={}", path.display(), r.width, r.height, r.effective_clusters);
    }
    let cfg = model.with_networks(|n| n.config.clone());
    write_text(&out.join("config.toml"), &effective_config(m, Some(cfg))?.to_text())?;
    Ok(0)
}

fn cmd_serve(m: &ArgMatches) -> anyhow::Result<i32> {
    let cfg = effective_config(m, None)?;
    let state = Arc::new(ServiceState::new(cfg.usize("serve.max_samples")?));
    let ckpt = m
        .get_one::<PathBuf>("checkpoint")
        .cloned()
        .or_else(|| Some(PathBuf::from(cfg.str("serve.checkpoint"))).filter(|p| !p.as_os_str().is_empty()));
    match ckpt {
        Some(path) => {
            let dir = resolve_checkpoint(&path)?;
            state.load(&dir).with_context(|| format!("loading {}", dir.display()))?;
        }
        None => log::warn!("no checkpoint given; /inpaint and /model-info answer 503"),
    }
    let port = u16::try_from(cfg.int("serve.port")).context("serve.port out of range")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, port))?;
    Ok(0)
}

/// Parses `args` (including the program name) and runs the chosen command.
pub fn run<I, T>(args: I) -> anyhow::Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("infer", m)) => cmd_infer(m),
        Some(("visualize", m)) => cmd_visualize(m),
        Some(("serve", m)) => cmd_serve(m),
        _ => unreachable!("subcommand required"),
    }
}
