//! End-to-end orchestration: manifest ingestion, superpixel ground-truth
//! labeling, zoom-out feature assembly across levels, classifier training,
//! prediction and model-bundle persistence.

use crate::descriptors::store::{
    load_feature_store, save_feature_store, BlockLayout, FeatureStore,
};
use crate::descriptors::{
    dense_sift, load_codebook, save_codebook, train_sift_codebook, train_texton_codebook,
    Codebook, DenseSiftParams, HandcraftedContext, RegionSelector,
};
use crate::embeddings::{
    dataset_channel_mean, local_crop, provider_crop, BuiltinProvider, FeatureProvider, LocalNets,
};
use crate::eval::ConfusionMatrix;
use crate::imagecore::{load_image, load_label_map, rgb_to_lab, Image, LabImage, LabelMap, IGNORE};
use crate::neuralnet::conv::{train_convnet, ConvArch};
use crate::neuralnet::modelio::{load_model, save_model, ArchSpec, ModelHeader, NetModel};
use crate::neuralnet::{train_classifier, ClassStats, MlpModel, TrainConfig, TrainReport};
use crate::superpixel::{
    build_adjacency, compute_zoom_regions, slic_oversegment, SlicParams, Superpixelization,
};
use crate::{Error, Result};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    /// path as written in the manifest; also the key for precomputed features
    pub image_id: String,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub split: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Tab-separated lines: `image-path<TAB>label-path-or--<TAB>split`,
    /// paths relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {}",
                    ln + 1,
                    parts.len()
                )));
            }
            let label = if parts[1] == "-" {
                None
            } else {
                Some(root.join(parts[1]))
            };
            if parts[2] == "train" && label.is_none() {
                return Err(Error::Format(format!(
                    "manifest line {}: train entry without a label map",
                    ln + 1
                )));
            }
            entries.push(ManifestEntry {
                image_id: parts[0].to_string(),
                image: root.join(parts[0]),
                label,
                split: parts[2].to_string(),
            });
        }
        Ok(DatasetManifest { root, entries })
    }

    pub fn split(&self, tag: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == tag).collect()
    }
}

/// Per-superpixel ground truth; `None` marks EXCLUDED superpixels (more than
/// half IGNORE), which never enter training.
pub fn label_superpixels(sp: &Superpixelization, gt: &LabelMap) -> Result<Vec<Option<u8>>> {
    if sp.width != gt.width || sp.height != gt.height {
        return Err(Error::Dimension(format!(
            "superpixels {}x{} vs labels {}x{}",
            sp.width, sp.height, gt.width, gt.height
        )));
    }
    let c = gt.num_classes;
    let mut hists = vec![0u32; sp.count() * c];
    let mut ignored = vec![0u32; sp.count()];
    for (i, &id) in sp.ids.iter().enumerate() {
        let l = gt.data[i];
        if l == IGNORE {
            ignored[id as usize] += 1;
        } else {
            hists[id as usize * c + l as usize] += 1;
        }
    }
    Ok((0..sp.count())
        .map(|s| {
            let total = sp.superpixels[s].pixel_count as u32;
            if 2 * ignored[s] > total {
                return None;
            }
            let hist = &hists[s * c..(s + 1) * c];
            let mut best = 0usize;
            let mut best_count = 0u32;
            for (cls, &count) in hist.iter().enumerate() {
                if count > best_count {
                    best_count = count;
                    best = cls;
                }
            }
            if best_count == 0 {
                None
            } else {
                Some(best as u8)
            }
        })
        .collect())
}

/// f_c over all non-EXCLUDED superpixel labels.
pub fn class_frequencies(labels: &[Option<u8>], num_classes: usize) -> Result<ClassStats> {
    let mut counts = vec![0u64; num_classes];
    for l in labels.iter().flatten() {
        if *l as usize >= num_classes {
            return Err(Error::Data(format!("label {l} out of range")));
        }
        counts[*l as usize] += 1;
    }
    ClassStats::from_counts(counts)
}

#[derive(Debug, Clone)]
pub struct Codebooks {
    pub texton: Codebook,
    pub words: Codebook,
}

impl Codebooks {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_codebook(&self.texton, &dir.join("texton.zocb"))?;
        save_codebook(&self.words, &dir.join("words.zocb"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Codebooks {
            texton: load_codebook(&dir.join("texton.zocb"))?,
            words: load_codebook(&dir.join("words.zocb"))?,
        })
    }
}

/// Trains the texton and visual-word dictionaries over a set of images.
pub fn train_codebooks(
    images: &[LabImage],
    texton_k: usize,
    word_k: usize,
    seed: u64,
) -> Result<Codebooks> {
    let texton = train_texton_codebook(images, texton_k, seed)?;
    let mut descriptors: Vec<f32> = Vec::new();
    let params = DenseSiftParams::default();
    for img in images {
        match dense_sift(img, &params) {
            Ok(d) => descriptors.extend(d.descriptors),
            Err(Error::Dimension(_)) => continue, // too small for any patch
            Err(e) => return Err(e),
        }
    }
    let words = train_sift_codebook(&descriptors, word_k, seed.wrapping_add(1))?;
    Ok(Codebooks { texton, words })
}

/// The four levels' feature sources: local learned nets plus distant/global
/// providers (handcrafted local/proximal blocks are always present).
#[derive(Debug, Clone)]
pub struct Providers {
    pub local: Option<LocalNets>,
    pub distant: FeatureProvider,
    pub global: FeatureProvider,
}

impl Providers {
    pub fn handcrafted_only() -> Self {
        Providers {
            local: None,
            distant: FeatureProvider::Null,
            global: FeatureProvider::Null,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ZoomoutConfig {
    pub slic: SlicParams,
    pub proximal_radius: usize,
    pub distant_radius: usize,
    pub num_classes: usize,
    /// hidden layer widths of the superpixel classifier; empty = linear
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl ZoomoutConfig {
    pub fn new(num_classes: usize) -> Self {
        ZoomoutConfig {
            slic: SlicParams::default(),
            proximal_radius: 2,
            distant_radius: 3,
            num_classes,
            hidden: vec![],
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proximal_radius < 1 || self.distant_radius < self.proximal_radius {
            return Err(Error::Data(
                "radii must satisfy 1 <= proximal <= distant".into(),
            ));
        }
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::Data("class count must be in 2..=254".into()));
        }
        self.train.validate()
    }
}

/// One named block of the assembled feature row, in concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LevelBlock {
    LocalHand,
    LocalLearned,
    Proximal,
    Distant,
    Global,
}

impl LevelBlock {
    /// The zoom-out level a block belongs to, as named on the command line.
    pub fn level(&self) -> &'static str {
        match self {
            LevelBlock::LocalHand | LevelBlock::LocalLearned => "local",
            LevelBlock::Proximal => "proximal",
            LevelBlock::Distant => "distant",
            LevelBlock::Global => "global",
        }
    }
}

pub struct FeatureExtractor<'a> {
    pub config: &'a ZoomoutConfig,
    pub codebooks: &'a Codebooks,
    pub providers: &'a Providers,
}

#[derive(Debug)]
pub struct ImageFeatures {
    pub sp: Superpixelization,
    /// one row per superpixel, layout as in `FeatureExtractor::layout`
    pub store: FeatureStore,
}

impl<'a> FeatureExtractor<'a> {
    fn handcrafted_dim(&self) -> usize {
        use crate::descriptors::{COLOR_DIM, LOCATION_DIM};
        COLOR_DIM + self.codebooks.texton.k + 1 + 3 * self.codebooks.words.k + 6 + LOCATION_DIM
    }

    /// (block, dim) pairs including zero-dim blocks.
    pub fn block_dims(&self) -> Vec<(LevelBlock, usize)> {
        let hand = self.handcrafted_dim();
        vec![
            (LevelBlock::LocalHand, hand),
            (
                LevelBlock::LocalLearned,
                self.providers.local.as_ref().map_or(0, |l| l.dim()),
            ),
            (LevelBlock::Proximal, hand),
            (LevelBlock::Distant, self.providers.distant.dim()),
            (LevelBlock::Global, self.providers.global.dim()),
        ]
    }

    /// Blocks that actually contribute columns, in row order.
    pub fn blocks(&self) -> Vec<LevelBlock> {
        self.block_dims()
            .into_iter()
            .filter(|&(_, d)| d > 0)
            .map(|(b, _)| b)
            .collect()
    }

    pub fn layout(&self) -> BlockLayout {
        let dims: Vec<usize> = self
            .block_dims()
            .into_iter()
            .map(|(_, d)| d)
            .filter(|&d| d > 0)
            .collect();
        BlockLayout::from_block_dims(&dims)
    }

    /// Oversegments one image and assembles a feature row per superpixel.
    pub fn extract_image(&self, img: &Image, image_id: &str) -> Result<ImageFeatures> {
        let lab = rgb_to_lab(img);
        self.extract_lab(&lab, image_id)
    }

    pub fn extract_lab(&self, lab: &LabImage, image_id: &str) -> Result<ImageFeatures> {
        let sp = slic_oversegment(lab, &self.config.slic)?;
        let graph = build_adjacency(&sp);
        let regions = compute_zoom_regions(
            &sp,
            &graph,
            self.config.proximal_radius,
            self.config.distant_radius,
        )?;
        let ctx = HandcraftedContext::new(
            lab,
            &self.codebooks.texton,
            &self.codebooks.words,
            &DenseSiftParams::default(),
        )?;
        let layout = self.layout();
        let mut store = FeatureStore::new(layout)?;
        // global block is constant per image; compute once
        let global_vec = self
            .providers
            .global
            .extract(lab, image_id, regions.global(), None)?;
        for s in 0..sp.count() as u32 {
            let local_hand = ctx.descriptor(&RegionSelector::from_superpixels(&sp, &[s])?)?;
            let local_learned = match &self.providers.local {
                Some(nets) => nets.emit(lab, regions.local[s as usize])?,
                None => Vec::new(),
            };
            let proximal = ctx.descriptor(&RegionSelector::from_superpixels(
                &sp,
                &regions.proximal_ids[s as usize],
            )?)?;
            let distant = self.providers.distant.extract(
                lab,
                image_id,
                regions.distant[s as usize],
                Some(s),
            )?;
            let mut row = Vec::with_capacity(store.layout.total_dim as usize);
            row.extend_from_slice(&local_hand);
            row.extend_from_slice(&local_learned);
            row.extend_from_slice(&proximal);
            row.extend_from_slice(&distant);
            row.extend_from_slice(&global_vec);
            store.push_row(&row)?;
        }
        Ok(ImageFeatures { sp, store })
    }
}

/// Row provenance within a dataset-level feature store.
#[derive(Debug, Clone)]
pub struct RowMeta {
    pub image_id: String,
    pub spid: u32,
    pub label: Option<u8>,
}

#[derive(Debug)]
pub struct DatasetFeatures {
    pub store: FeatureStore,
    pub rows: Vec<RowMeta>,
    /// (image id, error) for images that failed and were skipped
    pub skipped: Vec<(String, String)>,
}

/// Extracts features for every manifest entry in `split` (all entries when
/// `None`). Per-image failures are recorded and skipped; a layout drift
/// against the extractor's declared layout is fatal.
pub fn extract_dataset_features(
    manifest: &DatasetManifest,
    split: Option<&str>,
    extractor: &FeatureExtractor,
) -> Result<DatasetFeatures> {
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .collect();
    let num_classes = extractor.config.num_classes;
    type PerImage = std::result::Result<(ImageFeatures, Vec<Option<u8>>), String>;
    let results: Vec<PerImage> = entries
        .par_iter()
        .map(|entry| {
            let run = || -> Result<(ImageFeatures, Vec<Option<u8>>)> {
                let img = load_image(&entry.image)?;
                let feats = extractor.extract_image(&img, &entry.image_id)?;
                let labels = match &entry.label {
                    Some(path) => {
                        let gt = load_label_map(path, num_classes)?;
                        label_superpixels(&feats.sp, &gt)?
                    }
                    None => vec![None; feats.sp.count()],
                };
                Ok((feats, labels))
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    let layout = extractor.layout();
    let mut store = FeatureStore::new(layout.clone())?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (entry, result) in entries.iter().zip(results) {
        match result {
            Ok((feats, labels)) => {
                if feats.store.layout != layout {
                    return Err(Error::Dimension(format!(
                        "feature layout drifted on {}",
                        entry.image_id
                    )));
                }
                for s in 0..feats.store.n_rows {
                    store.push_row(feats.store.row(s))?;
                    rows.push(RowMeta {
                        image_id: entry.image_id.clone(),
                        spid: s as u32,
                        label: labels[s],
                    });
                }
            }
            Err(msg) => skipped.push((entry.image_id.clone(), msg)),
        }
    }
    Ok(DatasetFeatures {
        store,
        rows,
        skipped,
    })
}

/// Column selector for a subset of blocks; `sel[i]` matches `blocks[i]`.
pub fn block_selection(blocks: &[LevelBlock], keep_levels: &[&str]) -> Result<Vec<bool>> {
    for &name in keep_levels {
        if !["local", "proximal", "distant", "global"].contains(&name) {
            return Err(Error::Data(format!("unknown level {name:?}")));
        }
    }
    if keep_levels.is_empty() {
        return Err(Error::Data("empty level subset".into()));
    }
    Ok(blocks
        .iter()
        .map(|b| keep_levels.contains(&b.level()))
        .collect())
}

/// Copies the kept blocks of one feature row.
pub fn select_columns(row: &[f32], layout: &BlockLayout, sel: &[bool]) -> Vec<f32> {
    let mut out = Vec::new();
    for (i, &keep) in sel.iter().enumerate() {
        if keep {
            let (a, b) = layout.block_range(i);
            out.extend_from_slice(&row[a..b]);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub stats: ClassStats,
    pub layout: BlockLayout,
    pub blocks: Vec<LevelBlock>,
    pub report: TrainReport,
}

/// Trains the superpixel classifier on already-extracted features, optionally
/// restricted to a level subset.
pub fn train_on_features(
    features: &DatasetFeatures,
    extractor: &FeatureExtractor,
    keep_levels: Option<&[&str]>,
) -> Result<TrainedModel> {
    let blocks = extractor.blocks();
    let sel = match keep_levels {
        Some(levels) => block_selection(&blocks, levels)?,
        None => vec![true; blocks.len()],
    };
    let layout_full = extractor.layout();
    let kept_dims: Vec<usize> = sel
        .iter()
        .enumerate()
        .filter(|&(_, &k)| k)
        .map(|(i, _)| {
            let (a, b) = layout_full.block_range(i);
            b - a
        })
        .collect();
    let layout = BlockLayout::from_block_dims(&kept_dims);
    let kept_blocks: Vec<LevelBlock> = blocks
        .iter()
        .zip(&sel)
        .filter(|&(_, &k)| k)
        .map(|(b, _)| *b)
        .collect();

    let mut x: Vec<f32> = Vec::new();
    let mut y: Vec<usize> = Vec::new();
    let mut all_labels: Vec<Option<u8>> = Vec::new();
    for (i, meta) in features.rows.iter().enumerate() {
        all_labels.push(meta.label);
        if let Some(l) = meta.label {
            x.extend(select_columns(
                features.store.row(i),
                &layout_full,
                &sel,
            ));
            y.push(l as usize);
        }
    }
    let stats = class_frequencies(&all_labels, extractor.config.num_classes)?;
    let cfg = extractor.config.train;
    let (model, report) = train_classifier(
        &x,
        layout.total_dim as usize,
        &y,
        &stats,
        &cfg,
        &extractor.config.hidden,
    )?;
    Ok(TrainedModel {
        model,
        stats,
        layout,
        blocks: kept_blocks,
        report,
    })
}

/// End-to-end training over the manifest's `train` split.
pub fn train(manifest: &DatasetManifest, extractor: &FeatureExtractor) -> Result<TrainedModel> {
    extractor.config.validate()?;
    let features = extract_dataset_features(manifest, Some("train"), extractor)?;
    if features.rows.is_empty() {
        return Err(Error::Data("no training superpixels extracted".into()));
    }
    train_on_features(&features, extractor, None)
}

/// Per-superpixel argmax broadcast to pixels; piecewise constant, no IGNORE.
pub fn predict_image(
    trained: &TrainedModel,
    extractor: &FeatureExtractor,
    img: &Image,
    image_id: &str,
) -> Result<LabelMap> {
    let feats = extractor.extract_image(img, image_id)?;
    predict_from_features(trained, extractor, &feats)
}

pub fn predict_from_features(
    trained: &TrainedModel,
    extractor: &FeatureExtractor,
    feats: &ImageFeatures,
) -> Result<LabelMap> {
    let blocks = extractor.blocks();
    let keep: Vec<&str> = trained.blocks.iter().map(|b| b.level()).collect();
    let sel = block_selection(&blocks, &keep)?;
    let full_layout = extractor.layout();
    let n = feats.store.n_rows;
    let dim = trained.layout.total_dim as usize;
    if dim != trained.model.input_dim() {
        return Err(Error::Dimension("model does not match its layout".into()));
    }
    let mut x = Vec::with_capacity(n * dim);
    for i in 0..n {
        let row = select_columns(feats.store.row(i), &full_layout, &sel);
        if row.len() != dim {
            return Err(Error::Dimension(format!(
                "selected row has {} dims, model expects {dim}",
                row.len()
            )));
        }
        x.extend(row.into_iter().map(|v| v as f64));
    }
    let preds = trained.model.predict(&x, n)?;
    let data: Vec<u8> = feats
        .sp
        .ids
        .iter()
        .map(|&id| preds[id as usize] as u8)
        .collect();
    LabelMap::new(
        feats.sp.width,
        feats.sp.height,
        extractor.config.num_classes,
        data,
    )
}

/// Dataset-level confusion matrix of a trained model over one manifest split.
pub fn evaluate(
    manifest: &DatasetManifest,
    split: &str,
    trained: &TrainedModel,
    extractor: &FeatureExtractor,
) -> Result<ConfusionMatrix> {
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.split == split && e.label.is_some())
        .collect();
    if entries.is_empty() {
        return Err(Error::Data(format!("no labeled entries in split {split:?}")));
    }
    let partials: Result<Vec<ConfusionMatrix>> = entries
        .par_iter()
        .map(|entry| {
            let img = load_image(&entry.image)?;
            let pred = predict_image(trained, extractor, &img, &entry.image_id)?;
            let truth = load_label_map(
                entry.label.as_ref().expect("filtered"),
                extractor.config.num_classes,
            )?;
            let mut cm = ConfusionMatrix::new(extractor.config.num_classes);
            cm.accumulate(&pred, &truth)?;
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(extractor.config.num_classes);
    for p in partials? {
        cm.merge(&p);
    }
    Ok(cm)
}

/// Trains a built-in distant or global provider: a small convnet predicting
/// the center superpixel's class from the level's crop; its penultimate
/// activations become the level features.
pub fn train_builtin_provider(
    manifest: &DatasetManifest,
    config: &ZoomoutConfig,
    arch: ConvArch,
    cfg: &TrainConfig,
    global_level: bool,
    crops_per_image: usize,
    skip_background: bool,
) -> Result<BuiltinProvider> {
    let entries = manifest.split("train");
    if entries.is_empty() {
        return Err(Error::Data("no train entries for provider training".into()));
    }
    type CropBatch = (Vec<f64>, Vec<usize>, [f64; 3], usize);
    let per_image: Result<Vec<CropBatch>> = entries
        .par_iter()
        .map(|entry| {
            let img = load_image(&entry.image)?;
            let lab = rgb_to_lab(&img);
            let sp = slic_oversegment(&lab, &config.slic)?;
            let graph = build_adjacency(&sp);
            let regions =
                compute_zoom_regions(&sp, &graph, config.proximal_radius, config.distant_radius)?;
            let gt = load_label_map(
                entry.label.as_ref().ok_or_else(|| {
                    Error::Data(format!("train entry {} lacks labels", entry.image_id))
                })?,
                config.num_classes,
            )?;
            let labels = label_superpixels(&sp, &gt)?;
            let mean = dataset_channel_mean(&[&lab]);
            let mut crops = Vec::new();
            let mut ys = Vec::new();
            let candidates: Vec<usize> = (0..sp.count())
                .filter(|&s| match labels[s] {
                    Some(y) => !(skip_background && y == 0),
                    None => false,
                })
                .collect();
            let stride = (candidates.len() / crops_per_image.max(1)).max(1);
            for &s in candidates.iter().step_by(stride) {
                let y = labels[s].unwrap();
                let rect = if global_level {
                    regions.global()
                } else {
                    regions.distant[s]
                };
                crops.extend(provider_crop(&lab, rect, &arch, mean)?);
                ys.push(y as usize);
            }
            let npx = lab.width * lab.height;
            Ok((crops, ys, mean, npx))
        })
        .collect();
    let per_image = per_image?;
    let mut crops = Vec::new();
    let mut labels = Vec::new();
    let mut mean = [0.0f64; 3];
    let mut total_px = 0usize;
    for (c, y, m, npx) in &per_image {
        crops.extend_from_slice(c);
        labels.extend_from_slice(y);
        for ch in 0..3 {
            mean[ch] += m[ch] * *npx as f64;
        }
        total_px += npx;
    }
    for ch in &mut mean {
        *ch /= total_px.max(1) as f64;
    }
    let mut counts = vec![0u64; config.num_classes];
    for &y in &labels {
        counts[y] += 1;
    }
    let stats = ClassStats::from_counts(counts)?;
    let (model, _) = train_convnet(&crops, &labels, &stats, cfg, arch)?;
    Ok(BuiltinProvider { model, mean })
}

/// Gathers padded local crops and their labels for local-convnet training.
pub fn collect_local_crops(
    manifest: &DatasetManifest,
    config: &ZoomoutConfig,
    crops_per_image: usize,
) -> Result<(Vec<f64>, Vec<usize>, [f64; 3])> {
    let entries = manifest.split("train");
    if entries.is_empty() {
        return Err(Error::Data("no train entries".into()));
    }
    // first pass: dataset mean (weighted by pixel count)
    let labs: Result<Vec<LabImage>> = entries
        .par_iter()
        .map(|e| Ok(rgb_to_lab(&load_image(&e.image)?)))
        .collect();
    let labs = labs?;
    let refs: Vec<&LabImage> = labs.iter().collect();
    let mean = dataset_channel_mean(&refs);
    let per_image: Result<Vec<(Vec<f64>, Vec<usize>)>> = entries
        .par_iter()
        .zip(&labs)
        .map(|(entry, lab)| {
            let sp = slic_oversegment(lab, &config.slic)?;
            let gt = load_label_map(
                entry.label.as_ref().ok_or_else(|| {
                    Error::Data(format!("train entry {} lacks labels", entry.image_id))
                })?,
                config.num_classes,
            )?;
            let labels = label_superpixels(&sp, &gt)?;
            let mut crops = Vec::new();
            let mut ys = Vec::new();
            let stride = (sp.count() / crops_per_image.max(1)).max(1);
            for s in (0..sp.count()).step_by(stride) {
                let Some(y) = labels[s] else { continue };
                crops.extend(local_crop(lab, sp.superpixels[s].bbox, mean)?);
                ys.push(y as usize);
            }
            Ok((crops, ys))
        })
        .collect();
    let mut crops = Vec::new();
    let mut ys = Vec::new();
    for (c, y) in per_image? {
        crops.extend(c);
        ys.extend(y);
    }
    Ok((crops, ys, mean))
}

/// Everything `load_bundle` needs beyond the binary artifacts.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct BundleMeta {
    config: ZoomoutConfig,
    blocks: Vec<LevelBlock>,
    local_mean: Option<[f64; 3]>,
    distant: ProviderMeta,
    global: ProviderMeta,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
enum ProviderMeta {
    Null,
    Builtin { mean: [f64; 3] },
    Precomputed { path: PathBuf },
}

fn provider_meta(p: &FeatureProvider, path: Option<&Path>) -> Result<ProviderMeta> {
    Ok(match p {
        FeatureProvider::Null => ProviderMeta::Null,
        FeatureProvider::Builtin(b) => ProviderMeta::Builtin { mean: b.mean },
        FeatureProvider::Precomputed(_) => match path {
            Some(p) => ProviderMeta::Precomputed {
                path: p.to_path_buf(),
            },
            None => {
                return Err(Error::Data(
                    "precomputed provider needs its source path for bundling".into(),
                ))
            }
        },
    })
}

fn dummy_stats(c: usize) -> ClassStats {
    ClassStats::from_counts(vec![1; c]).expect("nonzero")
}

fn save_provider_model(p: &FeatureProvider, path: &Path) -> Result<()> {
    if let FeatureProvider::Builtin(b) = p {
        let header = ModelHeader {
            arch: ArchSpec::Conv(b.model.arch.clone()),
            loss_mode: crate::neuralnet::LossMode::Asymmetric,
            class_stats: dummy_stats(b.model.arch.num_classes),
            block_layout: None,
        };
        save_model(&NetModel::Conv(b.model.clone()), &header, path)?;
    }
    Ok(())
}

fn load_provider(meta: &ProviderMeta, path: &Path) -> Result<FeatureProvider> {
    Ok(match meta {
        ProviderMeta::Null => FeatureProvider::Null,
        ProviderMeta::Builtin { mean } => {
            let (model, _) = load_model(path)?;
            match model {
                NetModel::Conv(m) => FeatureProvider::Builtin(BuiltinProvider {
                    model: m,
                    mean: *mean,
                }),
                _ => return Err(Error::Format("provider model is not a convnet".into())),
            }
        }
        ProviderMeta::Precomputed { path } => {
            FeatureProvider::Precomputed(crate::embeddings::import_precomputed(path)?)
        }
    })
}

/// A persisted model bundle: classifier, codebooks, provider nets and a JSON
/// snapshot of the configuration.
pub struct Bundle {
    pub config: ZoomoutConfig,
    pub codebooks: Codebooks,
    pub providers: Providers,
    pub trained: TrainedModel,
}

/// `precomputed_paths`: source files of any precomputed providers
/// (distant, global), recorded so the bundle can reopen them.
pub fn save_bundle(
    dir: &Path,
    trained: &TrainedModel,
    extractor: &FeatureExtractor,
    precomputed_paths: (Option<&Path>, Option<&Path>),
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = ModelHeader {
        arch: ArchSpec::Mlp {
            input_dim: trained.model.input_dim(),
            hidden: trained.model.hidden_sizes(),
            num_classes: trained.model.num_classes,
        },
        loss_mode: extractor.config.train.loss_mode,
        class_stats: trained.stats.clone(),
        block_layout: Some(trained.layout.clone()),
    };
    save_model(
        &NetModel::Mlp(trained.model.clone()),
        &header,
        &dir.join("model.zomd"),
    )?;
    extractor.codebooks.save(dir)?;
    if let Some(nets) = &extractor.providers.local {
        let h = |c| ModelHeader {
            arch: ArchSpec::Conv(ConvArch::standard_local(c)),
            loss_mode: extractor.config.train.loss_mode,
            class_stats: dummy_stats(c),
            block_layout: None,
        };
        let mut hc = h(nets.cway.arch.num_classes);
        hc.arch = ArchSpec::Conv(nets.cway.arch.clone());
        save_model(
            &NetModel::Conv(nets.cway.clone()),
            &hc,
            &dir.join("local_cway.zomd"),
        )?;
        if let Some(b) = &nets.binary {
            let mut hb = h(2);
            hb.arch = ArchSpec::Conv(b.arch.clone());
            save_model(&NetModel::Conv(b.clone()), &hb, &dir.join("local_binary.zomd"))?;
        }
    }
    save_provider_model(&extractor.providers.distant, &dir.join("distant.zomd"))?;
    save_provider_model(&extractor.providers.global, &dir.join("global.zomd"))?;
    let meta = BundleMeta {
        config: extractor.config.clone(),
        blocks: trained.blocks.clone(),
        local_mean: extractor.providers.local.as_ref().map(|l| l.mean),
        distant: provider_meta(&extractor.providers.distant, precomputed_paths.0)?,
        global: provider_meta(&extractor.providers.global, precomputed_paths.1)?,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("bundle meta: {e}")))?;
    let meta_path = dir.join("bundle.json");
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let meta_path = dir.join("bundle.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bundle meta: {e}")))?;
    let codebooks = Codebooks::load(dir)?;
    let (model, header) = load_model(&dir.join("model.zomd"))?;
    let NetModel::Mlp(model) = model else {
        return Err(Error::Format("bundle classifier is not an MLP".into()));
    };
    let layout = header
        .block_layout
        .clone()
        .ok_or_else(|| Error::Format("bundle model lacks a block layout".into()))?;
    let local = match meta.local_mean {
        Some(mean) => {
            let (cway, _) = load_model(&dir.join("local_cway.zomd"))?;
            let NetModel::Conv(cway) = cway else {
                return Err(Error::Format("local net is not a convnet".into()));
            };
            let binary_path = dir.join("local_binary.zomd");
            let binary = if binary_path.exists() {
                match load_model(&binary_path)?.0 {
                    NetModel::Conv(b) => Some(b),
                    _ => return Err(Error::Format("binary net is not a convnet".into())),
                }
            } else {
                None
            };
            Some(LocalNets { cway, binary, mean })
        }
        None => None,
    };
    let providers = Providers {
        local,
        distant: load_provider(&meta.distant, &dir.join("distant.zomd"))?,
        global: load_provider(&meta.global, &dir.join("global.zomd"))?,
    };
    let trained = TrainedModel {
        model,
        stats: header.class_stats.clone(),
        layout,
        blocks: meta.blocks.clone(),
        report: TrainReport {
            epoch_losses: Vec::new(),
        },
    };
    Ok(Bundle {
        config: meta.config,
        codebooks,
        providers,
        trained,
    })
}

/// Convenience wrappers so feature stores persist across runs.
pub fn save_features(df: &DatasetFeatures, path: &Path) -> Result<()> {
    save_feature_store(&df.store, path)
}

pub fn load_features(path: &Path) -> Result<FeatureStore> {
    load_feature_store(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::save_label_map;
    use crate::superpixel::SuperpixelInfo;

    fn sp_grid(width: usize, height: usize, ids: Vec<u32>) -> Superpixelization {
        Superpixelization::from_id_map(width, height, ids).unwrap()
    }

    #[test]
    fn majority_label_per_superpixel() {
        // 3x1: superpixel 0 covers all pixels, classes {1,1,2} -> 1
        let sp = sp_grid(3, 1, vec![0, 0, 0]);
        let gt = LabelMap::new(3, 1, 4, vec![1, 1, 2]).unwrap();
        assert_eq!(label_superpixels(&sp, &gt).unwrap(), vec![Some(1)]);
    }

    #[test]
    fn ignore_majority_is_excluded() {
        let sp = sp_grid(3, 1, vec![0, 0, 0]);
        let gt = LabelMap::new(3, 1, 8, vec![IGNORE, IGNORE, 5]).unwrap();
        assert_eq!(label_superpixels(&sp, &gt).unwrap(), vec![None]);
    }

    #[test]
    fn ties_break_to_lowest_class() {
        let sp = sp_grid(4, 1, vec![0, 0, 0, 0]);
        let gt = LabelMap::new(4, 1, 8, vec![3, 1, 1, 3]).unwrap();
        assert_eq!(label_superpixels(&sp, &gt).unwrap(), vec![Some(1)]);
    }

    #[test]
    fn frequencies_sum_to_one() {
        let labels = vec![Some(0u8); 90]
            .into_iter()
            .chain(vec![Some(1u8); 9])
            .chain(vec![Some(2u8); 1])
            .chain(vec![None; 50])
            .collect::<Vec<_>>();
        let stats = class_frequencies(&labels, 3).unwrap();
        assert_eq!(stats.counts, vec![90, 9, 1]);
        assert!((stats.frequencies[0] - 0.9).abs() < 1e-12);
        assert!(class_frequencies(&[None, None], 3).is_err());
    }

    #[test]
    fn manifest_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "a.png\tl.png\ttrain\nb.png\t-\ttest\n").unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.split("train").len(), 1);
        assert!(m.entries[1].label.is_none());
        std::fs::write(&path, "a.png\t-\ttrain\n").unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }

    #[test]
    fn selection_masks_blocks() {
        let layout = BlockLayout::from_block_dims(&[2, 3, 1]);
        let blocks = [LevelBlock::LocalHand, LevelBlock::Proximal, LevelBlock::Global];
        let sel = block_selection(&blocks, &["local", "global"]).unwrap();
        assert_eq!(sel, vec![true, false, true]);
        let row = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(select_columns(&row, &layout, &sel), vec![1.0, 2.0, 6.0]);
        assert!(block_selection(&blocks, &["nearby"]).is_err());
        assert!(block_selection(&blocks, &[]).is_err());
    }

    #[test]
    fn oracle_style_prediction_matches_labeling() {
        // internal consistency: broadcasting majority labels reproduces the
        // oracle projection measured by eval
        let ids = vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3];
        let sp = sp_grid(4, 4, ids.clone());
        let mut gt_data = vec![0u8; 16];
        for (i, &id) in ids.iter().enumerate() {
            gt_data[i] = id as u8;
        }
        gt_data[0] = 3; // minority pixel inside superpixel 0
        let gt = LabelMap::new(4, 4, 4, gt_data).unwrap();
        let labels = label_superpixels(&sp, &gt).unwrap();
        let pred: Vec<u8> = ids.iter().map(|&id| labels[id as usize].unwrap()).collect();
        let pred = LabelMap::new(4, 4, 4, pred).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &gt).unwrap();
        let oracle = crate::eval::oracle_upper_bound(&sp, &gt).unwrap();
        assert!((cm.pixel_accuracy().unwrap() - oracle).abs() < 1e-12);

        // also exercise save/load of a tiny label map through the pipeline dir
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_label_map(&gt, &p).unwrap();
        let back = load_label_map(&p, 4).unwrap();
        assert_eq!(back.data, gt.data);
    }

    #[test]
    fn superpixel_info_accessible() {
        let sp = sp_grid(2, 2, vec![0, 1, 0, 1]);
        let infos: &Vec<SuperpixelInfo> = &sp.superpixels;
        assert_eq!(infos.len(), 2);
    }
}
