//! zoomout: command-line driver for the superpixel zoom-out segmentation
//! pipeline. Thin and single-threaded; parallelism lives inside the pipeline
//! stages and is bounded by --threads.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
//! Every command logs a reproducibility header (config hash, seeds, threads)
//! to stderr, and no command leaves partial artifacts behind on failure.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use zoomout::embeddings::{builtin_provider_arch, import_precomputed, FeatureProvider};
use zoomout::eval::{oracle_upper_bound, ConfusionMatrix};
use zoomout::imagecore::{
    load_image, load_label_map, render_labels, rgb_to_lab, save_image, save_label_map, LabImage,
    Palette, IGNORE,
};
use zoomout::neuralnet::{
    save_model, ArchSpec, ClassStats, LossMode, ModelHeader, NetModel, TrainConfig,
};
use zoomout::pipeline::{
    extract_dataset_features, predict_from_features, predict_image, save_bundle, train_codebooks,
    train_on_features, Codebooks, DatasetManifest, FeatureExtractor, Providers, TrainedModel,
    ZoomoutConfig,
};
use zoomout::superpixel::{save_superpixelization, slic_oversegment};
use zoomout::{Error, Result};

#[derive(Parser)]
#[command(
    name = "zoomout",
    version,
    about = "Superpixel zoom-out feature segmentation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON pipeline configuration; individual flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// master seed (SLIC seeding and classifier initialization)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker thread cap for parallel pipeline stages
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Symmetric,
    Asymmetric,
}

impl From<LossArg> for LossMode {
    fn from(l: LossArg) -> LossMode {
        match l {
            LossArg::Symmetric => LossMode::Symmetric,
            LossArg::Asymmetric => LossMode::Asymmetric,
        }
    }
}

/// `--provider LEVEL=KIND` where LEVEL is local|distant|global and KIND is
/// builtin, none, or file:PATH.
#[derive(Clone, Debug)]
struct ProviderSpec {
    level: String,
    kind: ProviderKind,
}

#[derive(Clone, Debug)]
enum ProviderKind {
    Builtin,
    None,
    File(PathBuf),
}

fn parse_provider(s: &str) -> std::result::Result<ProviderSpec, String> {
    let (level, kind) = s
        .split_once('=')
        .ok_or_else(|| format!("expected LEVEL=KIND, got {s:?}"))?;
    if !matches!(level, "local" | "distant" | "global") {
        return Err(format!("unknown provider level {level:?}"));
    }
    let kind = match kind {
        "builtin" => ProviderKind::Builtin,
        "none" => ProviderKind::None,
        _ => match kind.strip_prefix("file:") {
            Some(p) if !p.is_empty() => ProviderKind::File(PathBuf::from(p)),
            _ => return Err(format!("provider kind must be builtin|file:PATH|none, got {kind:?}")),
        },
    };
    Ok(ProviderSpec {
        level: level.to_string(),
        kind,
    })
}

#[derive(Subcommand)]
enum Cmd {
    /// SLIC-oversegment one image into a ZOSP file
    Oversegment {
        #[arg(long)]
        image: PathBuf,
        /// requested superpixel count
        #[arg(long)]
        k: Option<usize>,
        /// SLIC compactness
        #[arg(long)]
        m: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train texton and visual-word codebooks from training images
    TrainCodebooks {
        #[arg(long)]
        manifest: PathBuf,
        /// output directory for texton.zocb and words.zocb
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        texton_k: usize,
        #[arg(long, default_value_t = 500)]
        word_k: usize,
        /// number of training images sampled for codebook estimation
        #[arg(long, default_value_t = 10)]
        sample_images: usize,
    },
    /// Train the local learned block (C-way + figure/ground convnets)
    TrainLocalNet {
        #[arg(long)]
        manifest: PathBuf,
        /// output directory for local_cway.zomd and local_binary.zomd
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 8)]
        crops_per_image: usize,
    },
    /// Extract zoom-out feature rows for a manifest split into a ZOFT file
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// directory holding texton.zocb and words.zocb
        #[arg(long)]
        codebooks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train|test|... ; omit for all entries
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<f32>,
        #[arg(long, value_parser = parse_provider)]
        provider: Vec<ProviderSpec>,
        #[arg(long, default_value_t = 64)]
        provider_size: usize,
    },
    /// Train the superpixel classifier and persist a model bundle
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codebooks: PathBuf,
        /// output bundle directory
        #[arg(long)]
        out: PathBuf,
        /// comma-separated zoom-out levels to keep (default: all)
        #[arg(long)]
        levels: Option<String>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// comma-separated hidden layer widths; empty for a linear model
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<f32>,
        #[arg(long, value_parser = parse_provider)]
        provider: Vec<ProviderSpec>,
        #[arg(long, default_value_t = 64)]
        provider_size: usize,
    },
    /// Predict label maps for a manifest split with a trained bundle
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        /// bundle directory written by `train`
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score predicted label maps against ground truth
    Evaluate {
        /// directory of predicted label maps
        #[arg(long)]
        pred: PathBuf,
        /// directory of ground-truth label maps with matching file names
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        classes: usize,
        /// optional report file; the report always goes to stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Superpixel majority-vote oracle accuracy over a manifest split
    Oracle {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<f32>,
    },
    /// Colorize an indexed label map for inspection
    Render {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train linear classifiers on level subsets and report held-out mean IoU
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codebooks: PathBuf,
        /// subset as comma-separated levels or "all"; repeatable
        #[arg(long)]
        levels: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<f32>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long, value_parser = parse_provider)]
        provider: Vec<ProviderSpec>,
        #[arg(long, default_value_t = 64)]
        provider_size: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            let code = match e.kind() {
                DisplayHelp | DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        // ignore the error if a global pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

// ------------------------------------------------------------- utilities

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn log_header(cli: &Cli, config: &ZoomoutConfig) {
    let json = serde_json::to_string(config).unwrap_or_default();
    eprintln!(
        "zoomout {} | config-hash={:016x} | slic-seed={} train-seed={} | threads={}",
        env!("CARGO_PKG_VERSION"),
        fnv1a64(json.as_bytes()),
        config.slic.seed,
        config.train.seed,
        cli.threads.map_or_else(|| "auto".into(), |t| t.to_string()),
    );
}

struct Overrides {
    classes: Option<usize>,
    k: Option<usize>,
    m: Option<f32>,
    hidden: Option<String>,
    epochs: Option<usize>,
    loss: Option<LossArg>,
}

impl Overrides {
    fn none() -> Self {
        Overrides {
            classes: None,
            k: None,
            m: None,
            hidden: None,
            epochs: None,
            loss: None,
        }
    }
}

/// Config file (if any) overlaid with command-line overrides.
fn effective_config(cli: &Cli, ov: &Overrides) -> Result<ZoomoutConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("config {}: {e}", path.display())))?
        }
        None => ZoomoutConfig::new(ov.classes.unwrap_or(21)),
    };
    if let Some(c) = ov.classes {
        cfg.num_classes = c;
    }
    if let Some(k) = ov.k {
        cfg.slic.k = k;
    }
    if let Some(m) = ov.m {
        cfg.slic.m = m;
    }
    if let Some(h) = &ov.hidden {
        cfg.hidden = parse_hidden(h)?;
    }
    if let Some(e) = ov.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = ov.loss {
        cfg.train.loss_mode = l.into();
    }
    if let Some(s) = cli.seed {
        cfg.slic.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("bad hidden width {p:?}")))
        })
        .collect()
}

fn parse_levels(s: &str) -> Vec<&str> {
    if s == "all" {
        vec!["local", "proximal", "distant", "global"]
    } else {
        s.split(',').map(str::trim).collect()
    }
}

/// Writes a single output file via a temporary sibling so a failure never
/// leaves a partial artifact.
fn stage_file(out: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    // keep the extension so format-by-extension writers still work
    let name = out
        .file_name()
        .ok_or_else(|| Error::Data(format!("bad output path {}", out.display())))?;
    let tmp = out.with_file_name(format!(".partial.{}", name.to_string_lossy()));
    if let Err(e) = write(&tmp) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, out).map_err(|e| Error::io(out, e))
}

/// Builds a whole output directory in a staging location, then renames it.
fn stage_dir(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() {
        return Err(Error::Data(format!("output {} already exists", out.display())));
    }
    let mut tmp = out.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, out).map_err(|e| Error::io(out, e))
}

fn provider_train_config(cfg: &ZoomoutConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.003,
        weight_decay: 1e-4,
        batch_size: 64,
        epochs: cfg.train.epochs,
        seed: cfg.train.seed.wrapping_add(2),
        loss_mode: LossMode::Asymmetric,
    }
}

/// Resolves --provider flags into concrete feature providers, training the
/// builtin convnets where requested. Defaults: local=none, distant=builtin,
/// global=builtin.
fn build_providers(
    manifest: &DatasetManifest,
    cfg: &ZoomoutConfig,
    specs: &[ProviderSpec],
    provider_size: usize,
) -> Result<(Providers, (Option<PathBuf>, Option<PathBuf>))> {
    let mut local = ProviderKind::None;
    let mut distant = ProviderKind::Builtin;
    let mut global = ProviderKind::Builtin;
    for s in specs {
        match s.level.as_str() {
            "local" => local = s.kind.clone(),
            "distant" => distant = s.kind.clone(),
            "global" => global = s.kind.clone(),
            _ => unreachable!("validated by the flag parser"),
        }
    }
    let pcfg = provider_train_config(cfg);
    let arch = builtin_provider_arch(cfg.num_classes, provider_size);

    let local = match local {
        ProviderKind::None => None,
        ProviderKind::Builtin => {
            eprintln!("training local nets...");
            let (crops, labels, mean) =
                zoomout::pipeline::collect_local_crops(manifest, cfg, 8)?;
            Some(zoomout::embeddings::train_local_convnet(
                &crops,
                &labels,
                cfg.num_classes,
                &pcfg,
                None,
                mean,
            )?)
        }
        ProviderKind::File(p) => {
            return Err(Error::Data(format!(
                "local level takes builtin|none, not a file ({})",
                p.display()
            )))
        }
    };
    let mut paths = (None, None);
    let level = |kind: ProviderKind,
                     global_level: bool,
                     path_slot: &mut Option<PathBuf>|
     -> Result<FeatureProvider> {
        Ok(match kind {
            ProviderKind::None => FeatureProvider::Null,
            ProviderKind::Builtin => {
                eprintln!(
                    "training builtin {} provider...",
                    if global_level { "global" } else { "distant" }
                );
                FeatureProvider::Builtin(zoomout::pipeline::train_builtin_provider(
                    manifest,
                    cfg,
                    arch.clone(),
                    &pcfg,
                    global_level,
                    8,
                    false,
                )?)
            }
            ProviderKind::File(p) => {
                let provider = import_precomputed(&p)?;
                *path_slot = Some(p);
                FeatureProvider::Precomputed(provider)
            }
        })
    };
    let distant = level(distant, false, &mut paths.0)?;
    let global = level(global, true, &mut paths.1)?;
    Ok((
        Providers {
            local,
            distant,
            global,
        },
        paths,
    ))
}

fn file_stem_for(image_id: &str) -> String {
    let stem = image_id.replace(['/', '\\'], "_");
    match stem.rsplit_once('.') {
        Some((base, _)) => base.to_string(),
        None => stem,
    }
}

// ------------------------------------------------------------- commands

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Oversegment { image, k, m, out } => {
            let mut ov = Overrides::none();
            ov.k = *k;
            ov.m = *m;
            let cfg = effective_config(cli, &ov)?;
            log_header(cli, &cfg);
            let lab = rgb_to_lab(&load_image(image)?);
            let sp = slic_oversegment(&lab, &cfg.slic)?;
            stage_file(out, |p| save_superpixelization(&sp, p))?;
            println!(
                "{}: {} superpixels (requested {})",
                out.display(),
                sp.count(),
                cfg.slic.k
            );
            Ok(())
        }

        Cmd::TrainCodebooks {
            manifest,
            out,
            texton_k,
            word_k,
            sample_images,
        } => {
            let cfg = effective_config(cli, &Overrides::none())?;
            log_header(cli, &cfg);
            let manifest = DatasetManifest::load(manifest)?;
            let train = manifest.split("train");
            if train.is_empty() {
                return Err(Error::Data("manifest has no train entries".into()));
            }
            let n = (*sample_images).min(train.len()).max(1);
            let images: Result<Vec<LabImage>> = train[..n]
                .iter()
                .map(|e| Ok(rgb_to_lab(&load_image(&e.image)?)))
                .collect();
            let codebooks = train_codebooks(&images?, *texton_k, *word_k, cfg.slic.seed)?;
            stage_dir(out, |dir| codebooks.save(dir))?;
            println!(
                "{}: textons k={} words k={} from {n} images",
                out.display(),
                texton_k,
                word_k
            );
            Ok(())
        }

        Cmd::TrainLocalNet {
            manifest,
            out,
            classes,
            epochs,
            crops_per_image,
        } => {
            let mut ov = Overrides::none();
            ov.classes = *classes;
            ov.epochs = *epochs;
            let cfg = effective_config(cli, &ov)?;
            log_header(cli, &cfg);
            let manifest = DatasetManifest::load(manifest)?;
            let (crops, labels, mean) =
                zoomout::pipeline::collect_local_crops(&manifest, &cfg, *crops_per_image)?;
            let pcfg = provider_train_config(&cfg);
            let nets = zoomout::embeddings::train_local_convnet(
                &crops,
                &labels,
                cfg.num_classes,
                &pcfg,
                None,
                mean,
            )?;
            let mut counts = vec![0u64; cfg.num_classes];
            for &y in &labels {
                counts[y] += 1;
            }
            let stats = ClassStats::from_counts(counts)?;
            stage_dir(out, |dir| {
                let header = |arch: ArchSpec, stats: ClassStats| ModelHeader {
                    arch,
                    loss_mode: pcfg.loss_mode,
                    class_stats: stats,
                    block_layout: None,
                };
                save_model(
                    &NetModel::Conv(nets.cway.clone()),
                    &header(ArchSpec::Conv(nets.cway.arch.clone()), stats.clone()),
                    &dir.join("local_cway.zomd"),
                )?;
                if let Some(b) = &nets.binary {
                    let bstats = ClassStats::from_counts(vec![1, 1])?;
                    save_model(
                        &NetModel::Conv(b.clone()),
                        &header(ArchSpec::Conv(b.arch.clone()), bstats),
                        &dir.join("local_binary.zomd"),
                    )?;
                }
                let meta = serde_json::json!({ "mean": nets.mean });
                let p = dir.join("local_meta.json");
                std::fs::write(&p, meta.to_string()).map_err(|e| Error::io(&p, e))
            })?;
            println!("{}: local nets on {} crops", out.display(), labels.len());
            Ok(())
        }

        Cmd::Extract {
            manifest,
            codebooks,
            out,
            split,
            classes,
            k,
            m,
            provider,
            provider_size,
        } => {
            let mut ov = Overrides::none();
            ov.classes = *classes;
            ov.k = *k;
            ov.m = *m;
            let cfg = effective_config(cli, &ov)?;
            log_header(cli, &cfg);
            let manifest = DatasetManifest::load(manifest)?;
            let codebooks = Codebooks::load(codebooks)?;
            let (providers, _) = build_providers(&manifest, &cfg, provider, *provider_size)?;
            let ex = FeatureExtractor {
                config: &cfg,
                codebooks: &codebooks,
                providers: &providers,
            };
            let feats = extract_dataset_features(&manifest, split.as_deref(), &ex)?;
            for (id, err) in &feats.skipped {
                eprintln!("skipped {id}: {err}");
            }
            stage_file(out, |p| zoomout::pipeline::save_features(&feats, p))?;
            // row metadata sidecar: image id, superpixel id, label or -
            let rows_path = {
                let mut s = out.as_os_str().to_owned();
                s.push(".rows.tsv");
                PathBuf::from(s)
            };
            stage_file(&rows_path, |p| {
                let mut text = String::new();
                for r in &feats.rows {
                    let label = r
                        .label
                        .map_or_else(|| "-".to_string(), |l| l.to_string());
                    text.push_str(&format!("{}\t{}\t{}\n", r.image_id, r.spid, label));
                }
                std::fs::write(p, text).map_err(|e| Error::io(p, e))
            })?;
            println!(
                "{}: {} rows x {} dims",
                out.display(),
                feats.rows.len(),
                feats.store.layout.total_dim
            );
            Ok(())
        }

        Cmd::Train {
            manifest,
            codebooks,
            out,
            levels,
            loss,
            hidden,
            epochs,
            classes,
            k,
            m,
            provider,
            provider_size,
        } => {
            let ov = Overrides {
                classes: *classes,
                k: *k,
                m: *m,
                hidden: hidden.clone(),
                epochs: *epochs,
                loss: *loss,
            };
            let cfg = effective_config(cli, &ov)?;
            log_header(cli, &cfg);
            let manifest = DatasetManifest::load(manifest)?;
            let codebooks = Codebooks::load(codebooks)?;
            let (providers, paths) = build_providers(&manifest, &cfg, provider, *provider_size)?;
            let ex = FeatureExtractor {
                config: &cfg,
                codebooks: &codebooks,
                providers: &providers,
            };
            let feats = extract_dataset_features(&manifest, Some("train"), &ex)?;
            for (id, err) in &feats.skipped {
                eprintln!("skipped {id}: {err}");
            }
            let keep: Option<Vec<&str>> = levels.as_deref().map(parse_levels);
            let trained = train_on_features(&feats, &ex, keep.as_deref())?;
            stage_dir(out, |dir| {
                save_bundle(dir, &trained, &ex, (paths.0.as_deref(), paths.1.as_deref()))
            })?;
            println!(
                "{}: classifier over {:?}, final epoch loss {:.4}",
                out.display(),
                trained.blocks,
                trained.report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }

        Cmd::Predict {
            manifest,
            model,
            out,
            split,
        } => {
            let bundle = zoomout::pipeline::load_bundle(model)?;
            log_header(cli, &bundle.config);
            let manifest = DatasetManifest::load(manifest)?;
            let entries = manifest.split(split);
            if entries.is_empty() {
                return Err(Error::Data(format!("no entries in split {split:?}")));
            }
            let ex = FeatureExtractor {
                config: &bundle.config,
                codebooks: &bundle.codebooks,
                providers: &bundle.providers,
            };
            stage_dir(out, |dir| {
                for e in &entries {
                    let img = load_image(&e.image)?;
                    let pred = predict_image(&bundle.trained, &ex, &img, &e.image_id)?;
                    let name = format!("{}.png", file_stem_for(&e.image_id));
                    save_label_map(&pred, &dir.join(name))?;
                }
                Ok(())
            })?;
            println!("{}: {} predictions", out.display(), entries.len());
            Ok(())
        }

        Cmd::Evaluate {
            pred,
            truth,
            classes,
            out,
        } => {
            let cfg = ZoomoutConfig::new(*classes);
            log_header(cli, &cfg);
            let mut names: Vec<PathBuf> = std::fs::read_dir(truth)
                .map_err(|e| Error::io(truth, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(Error::Data(format!(
                    "no .png label maps under {}",
                    truth.display()
                )));
            }
            let mut cm = ConfusionMatrix::new(*classes);
            for t in &names {
                let file = t.file_name().expect("listed file");
                let p = pred.join(file);
                let truth_map = load_label_map(t, *classes)?;
                let pred_map = load_label_map(&p, *classes)?;
                cm.accumulate(&pred_map, &truth_map)?;
            }
            let class_names: Vec<String> =
                (0..*classes).map(|c| format!("class{c}")).collect();
            let report = cm.report(&class_names);
            print!("{report}");
            if let Some(path) = out {
                stage_file(path, |p| {
                    std::fs::write(p, &report).map_err(|e| Error::io(p, e))
                })?;
            }
            Ok(())
        }

        Cmd::Oracle {
            manifest,
            split,
            classes,
            k,
            m,
        } => {
            let mut ov = Overrides::none();
            ov.classes = *classes;
            ov.k = *k;
            ov.m = *m;
            let cfg = effective_config(cli, &ov)?;
            log_header(cli, &cfg);
            let manifest = DatasetManifest::load(manifest)?;
            let entries: Vec<_> = manifest
                .split(split)
                .into_iter()
                .filter(|e| e.label.is_some())
                .collect();
            if entries.is_empty() {
                return Err(Error::Data(format!(
                    "no labeled entries in split {split:?}"
                )));
            }
            let mut weighted = 0.0f64;
            let mut total = 0.0f64;
            for e in &entries {
                let lab = rgb_to_lab(&load_image(&e.image)?);
                let sp = slic_oversegment(&lab, &cfg.slic)?;
                let truth = load_label_map(e.label.as_ref().expect("filtered"), cfg.num_classes)?;
                let acc = oracle_upper_bound(&sp, &truth)?;
                let valid = truth.data.iter().filter(|&&t| t != IGNORE).count() as f64;
                weighted += acc * valid;
                total += valid;
                println!("{}\t{acc:.6}", e.image_id);
            }
            println!("oracle_upper_bound={:.6}", weighted / total);
            Ok(())
        }

        Cmd::Render {
            labels,
            classes,
            out,
        } => {
            let cfg = ZoomoutConfig::new(*classes);
            log_header(cli, &cfg);
            let lm = load_label_map(labels, *classes)?;
            let img = render_labels(&lm, &Palette::voc(*classes))?;
            stage_file(out, |p| save_image(&img, p))?;
            println!("{}", out.display());
            Ok(())
        }

        Cmd::Ablate {
            manifest,
            codebooks,
            levels,
            epochs,
            classes,
            k,
            m,
            loss,
            provider,
            provider_size,
        } => {
            let mut ov = Overrides::none();
            ov.classes = *classes;
            ov.k = *k;
            ov.m = *m;
            ov.epochs = *epochs;
            ov.loss = *loss;
            // the ablation contract is linear (zero-hidden-layer) models
            ov.hidden = Some(String::new());
            let cfg = effective_config(cli, &ov)?;
            log_header(cli, &cfg);
            let manifest = DatasetManifest::load(manifest)?;
            let codebooks = Codebooks::load(codebooks)?;
            let (providers, _) = build_providers(&manifest, &cfg, provider, *provider_size)?;
            let ex = FeatureExtractor {
                config: &cfg,
                codebooks: &codebooks,
                providers: &providers,
            };
            let train_feats = extract_dataset_features(&manifest, Some("train"), &ex)?;
            let test_entries: Vec<_> = manifest
                .split("test")
                .into_iter()
                .filter(|e| e.label.is_some())
                .collect();
            if test_entries.is_empty() {
                return Err(Error::Data("ablation needs a labeled test split".into()));
            }
            let test_data: Result<Vec<_>> = test_entries
                .iter()
                .map(|e| {
                    let img = load_image(&e.image)?;
                    let feats = ex.extract_image(&img, &e.image_id)?;
                    let truth =
                        load_label_map(e.label.as_ref().expect("filtered"), cfg.num_classes)?;
                    Ok((feats, truth))
                })
                .collect();
            let test_data = test_data?;

            let subsets: Vec<String> = if levels.is_empty() {
                vec!["local".into(), "local,proximal".into(), "all".into()]
            } else {
                levels.clone()
            };
            println!("{:<24} {:>10} {:>10} {:>10}", "levels", "mean_iou", "pixel_acc", "class_acc");
            for subset in &subsets {
                let keep = parse_levels(subset);
                let trained: TrainedModel =
                    train_on_features(&train_feats, &ex, Some(&keep))?;
                let mut cm = ConfusionMatrix::new(cfg.num_classes);
                for (feats, truth) in &test_data {
                    let pred = predict_from_features(&trained, &ex, feats)?;
                    cm.accumulate(&pred, truth)?;
                }
                println!(
                    "{:<24} {:>10.4} {:>10.4} {:>10.4}",
                    subset,
                    cm.mean_iou(),
                    cm.pixel_accuracy()?,
                    cm.mean_class_accuracy()?
                );
            }
            Ok(())
        }
    }
}
