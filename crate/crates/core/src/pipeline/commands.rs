//! The pipeline commands over one run directory.
//!
//! Layout under the run directory:
//!
//! ```text
//! slides/                      synthetic dataset (manifest.jsonl + tile pyramids)
//! ingest.jsonl                 one IngestRecord per slide
//! models/                      qhvae.ckpt, scorer-<n>.ckpt, l2g.ckpt
//! codec/<slide>.tsv            cached per-cell codec features
//! cascade/                     scores, stage1, representatives (.jsonl)
//! bitstreams/<slide>/<r>_<c>.qhv
//! decoded/<slide>/<r>_<c>.png
//! features.tsv                 per-representative slide features
//! heatmaps/<slide>.png, <slide>-scores.png
//! metrics/*.jsonl
//! ```

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::abmil::{aggregate as run_aggregate, bags_from_rows, AggregateReport};
use super::cascade::{run_slide, train_scorers as fit_scorers, CascadeRecord, Scorer, SelectedPatch};
use super::config::RunConfig;
use super::featfile::{read_features, write_features, FeatureRow};
use super::features::CellFeatures;
use super::heatmap;
use super::ingest::{self, image_of, ingest_slide, load_rgb, save_rgb, IngestRecord, IngestedSlide, Split};
use super::metrics::{psnr, ssim, MetricsRecord};
use super::synth::{synth_slide, SynthParams};
use super::{create_dir, read_file, read_jsonl, write_file, write_jsonl, PipelineError, Result};
use crate::attention::{fuse_scores, AttentionMap, EnsembleWeights, MilModel, Pooling};
use crate::l2g::{L2g, L2gTrainer, PreparedPatch};
use crate::qhvae::{compress as qcompress, decompress as qdecompress, Qhvae, QhvaeTrainer};
use crate::tensor::{checkpoint, ParamStore, RngSeed, Tensor};

pub struct Workspace {
    pub out: PathBuf,
    pub cfg: RunConfig,
    pub verbose: bool,
    pool: rayon::ThreadPool,
}

impl Workspace {
    pub fn new(out: &Path, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        create_dir(out)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| PipelineError::Invalid(format!("thread pool: {}", e)))?;
        Ok(Workspace { out: out.to_path_buf(), cfg, verbose: false, pool })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn seed(&self, tag: &str) -> RngSeed {
        RngSeed(self.cfg.seed).derive_str(tag)
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn par<T: Sync, U: Send>(&self, items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    fn resolve(&self, root: &Path) -> PathBuf {
        if root.is_absolute() {
            root.to_path_buf()
        } else {
            self.out.join(root)
        }
    }

    pub fn records(&self) -> Result<Vec<IngestRecord>> {
        read_jsonl(&self.path("ingest.jsonl"))
    }

    pub fn load(&self, rec: &IngestRecord) -> Result<IngestedSlide> {
        ingest_slide(&self.resolve(&rec.root), &rec.manifest)
    }

    pub fn qhvae(&self) -> Result<(Qhvae, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Qhvae::new(&self.cfg.qhvae, &mut store, self.seed("qhvae"))?;
        checkpoint::load_into(&mut store, &self.path("models/qhvae.ckpt"))?;
        Ok((model, store))
    }

    pub fn l2g(&self) -> Result<(L2g, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = L2g::new(&self.cfg.l2g, &self.cfg.qhvae, &mut store, self.seed("l2g"))?;
        checkpoint::load_into(&mut store, &self.path("models/l2g.ckpt"))?;
        Ok((model, store))
    }

    pub fn scorers(&self) -> Result<Vec<Scorer>> {
        let mut out = Vec::new();
        for (n, &scale) in self.cfg.scorers.scales.iter().enumerate() {
            let bytes = read_file(&self.path(&format!("models/scorer-{}.ckpt", n)))?;
            let mut store = ParamStore::new();
            for (name, t) in checkpoint::from_bytes(&bytes)? {
                store.insert(&name, t)?;
            }
            out.push(Scorer { scale, model: MilModel::from_store(&self.cfg.scorers.mil, store)? });
        }
        Ok(out)
    }

    fn save_store(&self, store: &ParamStore<f32>, rel: &str) -> Result<()> {
        write_file(&self.path(rel), &checkpoint::to_bytes(store))
    }
}

fn split_of(rec: &IngestRecord) -> Option<Split> {
    rec.manifest.split
}

/// Renders the train and test splits; even-numbered slides carry tumor.
pub fn synth(ws: &Workspace) -> Result<Vec<ingest::SlideManifest>> {
    let s = &ws.cfg.synth;
    let root = ws.path("slides");
    let mut jobs = Vec::new();
    for (split, n, tag) in [(Split::Train, s.train_slides, "train"), (Split::Test, s.test_slides, "test")] {
        for i in 0..n {
            jobs.push((split, format!("{}-{:03}", tag, i), i % 2 == 0));
        }
    }
    let manifests = ws.par(&jobs, |(split, id, positive)| {
        let p = SynthParams {
            rows: s.rows,
            cols: s.cols,
            cell: ws.cfg.sizes.i2,
            tumor_fraction: if *positive { s.tumor_fraction } else { 0.0 },
            tissue_coverage: s.tissue_coverage,
        };
        let slide = synth_slide(ws.seed("synth").derive_str(id), &p);
        let m = ingest::write_synth_slide(&root, id, &slide, Some(*split))?;
        ws.note(format!("synth {} label={} tumor_share={:.3}", id, slide.label(), slide.tumor_share()));
        Ok(m)
    })?;
    ingest::write_manifest(&root, &manifests)?;
    Ok(manifests)
}

/// Validates every slide under `dir` (default: the run's `slides/`) and
/// writes the ingest index.
pub fn ingest(ws: &Workspace, dir: Option<&Path>) -> Result<Vec<IngestRecord>> {
    let root = dir.map(Path::to_path_buf).unwrap_or_else(|| ws.path("slides"));
    let manifests = if root.join(ingest::MANIFEST).exists() { ingest::read_manifest(&root)? } else { ingest::scan_dir(&root)? };
    if manifests.is_empty() {
        return Err(PipelineError::Invalid(format!("no slides under {}", root.display())));
    }
    let stored = root.strip_prefix(&ws.out).map(Path::to_path_buf).unwrap_or_else(|_| root.clone());
    let results: Vec<Result<IngestRecord>> = ws.pool.install(|| {
        manifests
            .par_iter()
            .map(|m| {
                let s = ingest_slide(&root, m)?;
                if s.grid.scale != ws.cfg.sizes.i2 {
                    return Err(PipelineError::Config(format!("{} has {}-pixel tiles, I2 is {}", m.slide_id, s.grid.scale, ws.cfg.sizes.i2)));
                }
                Ok(IngestRecord::of(&stored, &s))
            })
            .collect()
    });
    let mut problems = Vec::new();
    let mut records = Vec::new();
    for r in results {
        match r {
            Ok(r) => records.push(r),
            Err(PipelineError::Tiles { slide, problems: p }) => problems.extend(p.into_iter().map(|x| format!("{}: {}", slide, x))),
            Err(e) => return Err(e),
        }
    }
    if !problems.is_empty() {
        return Err(PipelineError::Tiles { slide: root.display().to_string(), problems });
    }
    for r in &records {
        ws.note(format!("ingest {} grid={}x{} tissue={}", r.slide_id(), r.rows, r.cols, r.tissue_cells));
    }
    write_jsonl(&ws.path("ingest.jsonl"), &records)?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub rate_bpp: Option<f64>,
    pub psnr: Option<f64>,
}

/// Cells per training slide kept as the crop pool.
const CROP_POOL_PER_SLIDE: usize = 24;

/// Rate-distortion training on random crops of train-split tissue cells.
pub fn train_qhvae(ws: &Workspace) -> Result<Vec<TrainRecord>> {
    let train: Vec<IngestRecord> = ws.records()?.into_iter().filter(|r| split_of(r) != Some(Split::Test)).collect();
    let pools = ws.par(&train, |rec| {
        let s = ws.load(rec)?;
        let mut cells = s.grid.cells();
        let mut rng = ws.seed("qhvae-pool").derive_str(rec.slide_id()).rng();
        rand::seq::SliceRandom::shuffle(&mut cells[..], &mut rng);
        cells.truncate(CROP_POOL_PER_SLIDE);
        cells.sort_unstable();
        cells.iter().map(|&c| s.cell(c)).collect::<Result<Vec<_>>>()
    })?;
    let pool: Vec<Tensor<f32>> = pools.into_iter().flatten().collect();
    if pool.is_empty() {
        return Err(PipelineError::Invalid("no tissue cells in the training split".into()));
    }
    let t = &ws.cfg.qhvae_train;
    let mut trainer = QhvaeTrainer::new(&ws.cfg.qhvae, ws.seed("qhvae"), t.lr)?;
    let mut rng = ws.seed("qhvae-crops").rng();
    let cell = ws.cfg.sizes.i2;
    let mut log = Vec::new();
    for step in 0..t.steps {
        let crops = (0..t.batch)
            .map(|_| {
                let src = &pool[rng.random_range(0..pool.len())];
                let (y, x) = (rng.random_range(0..=cell - t.crop), rng.random_range(0..=cell - t.crop));
                src.reshape(vec![1, 3, cell, cell])?.crop(y, x, t.crop, t.crop)
            })
            .collect::<crate::tensor::Result<Vec<_>>>()?;
        let m = trainer.step(&Tensor::stack_batch(&crops)?)?;
        if step % 10 == 9 || step + 1 == t.steps {
            ws.note(format!("train-qhvae step={} loss={:.4} bpp={:.4} psnr={:.2}", m.step, m.loss, m.rate_bpp, m.psnr));
            log.push(TrainRecord { step: m.step, loss: m.loss, rate_bpp: Some(m.rate_bpp), psnr: Some(m.psnr) });
        }
    }
    ws.save_store(&trainer.store, "models/qhvae.ckpt")?;
    write_jsonl(&ws.path("metrics/qhvae_train.jsonl"), &log)?;
    Ok(log)
}

/// Codec features of one slide, computed once and cached.
fn codec_features(ws: &Workspace, q: &(Qhvae, ParamStore<f32>), rec: &IngestRecord, slide: Option<&IngestedSlide>) -> Result<CellFeatures> {
    let path = ws.path(&format!("codec/{}.tsv", rec.slide_id()));
    if path.exists() {
        return CellFeatures::from_rows(rec.slide_id(), &read_features(&path)?);
    }
    let owned;
    let slide = match slide {
        Some(s) => s,
        None => {
            owned = ws.load(rec)?;
            &owned
        }
    };
    let f = CellFeatures::compute(&q.0, &q.1, slide)?;
    write_features(&path, &f.rows())?;
    Ok(f)
}

/// One scorer per configured scale on the train split.
pub fn train_scorers(ws: &Workspace) -> Result<Vec<MetricsRecord>> {
    let q = ws.qhvae()?;
    let train: Vec<IngestRecord> = ws.records()?.into_iter().filter(|r| split_of(r) != Some(Split::Test)).collect();
    let feats = ws.par(&train, |rec| codec_features(ws, &q, rec, None))?;
    let grids = train.iter().map(|r| r.grid()).collect::<Result<Vec<_>>>()?;
    let mut items = Vec::new();
    for ((rec, f), g) in train.iter().zip(&feats).zip(&grids) {
        let label = rec.manifest.label.ok_or_else(|| PipelineError::Invalid(format!("{} has no label", rec.slide_id())))?;
        items.push((f, g, label));
    }
    let scorers = fit_scorers(&items, &ws.cfg, ws.seed("scorers"))?;
    let mut out = Vec::new();
    for (n, s) in scorers.iter().enumerate() {
        ws.save_store(&s.model.store, &format!("models/scorer-{}.ckpt", n))?;
        let mut correct = 0;
        let mut total = 0;
        for (f, g, label) in &items {
            if g.is_empty() {
                continue;
            }
            let p = s.model.predict(&f.bag(g, s.scale)?.1)?.0;
            correct += ((p >= 0.5) == *label) as usize;
            total += 1;
        }
        let acc = correct as f64 / total.max(1) as f64;
        ws.note(format!("train-scorers scale={} train_accuracy={:.3}", s.scale, acc));
        out.push(MetricsRecord { name: format!("scorer-{}", s.scale), accuracy: Some(acc), ..Default::default() });
    }
    write_jsonl(&ws.path("metrics/scorers.jsonl"), &out)?;
    Ok(out)
}

pub struct CascadeSummary {
    pub records: Vec<CascadeRecord>,
    pub mean_representatives: f64,
}

/// Both stages on every ingested slide.
pub fn cascade(ws: &Workspace) -> Result<CascadeSummary> {
    let q = ws.qhvae()?;
    let scorers = ws.scorers()?;
    let recs = ws.records()?;
    let results = ws.par(&recs, |rec| {
        let slide = ws.load(rec)?;
        if slide.grid.is_empty() {
            ws.note(format!("cascade {} skipped: no tissue", rec.slide_id()));
            return Ok(None);
        }
        let f = codec_features(ws, &q, rec, Some(&slide))?;
        let c = run_slide(&q.0, &q.1, &slide, &f, &scorers, &ws.cfg, ws.seed("cascade"))?;
        let r = &c.record;
        ws.note(format!(
            "cascade {} tissue={} stage1={} k={} m_min={} representatives={}{}",
            r.slide_id,
            r.tissue,
            r.stage1,
            r.k,
            r.m_min,
            r.representatives,
            r.iou.map(|v| format!(" iou={:.3}", v)).unwrap_or_default()
        ));
        let scores: Vec<SelectedPatch> = c
            .stage1
            .fused
            .cells
            .iter()
            .zip(&c.stage1.fused.scores)
            .map(|(&(row, col), &score)| SelectedPatch { slide_id: r.slide_id.clone(), row, col, scale: c.stage1.fused.scale, score, cluster: None })
            .collect();
        Ok(Some((c.record.clone(), scores, c.stage1_records(), c.representative_records())))
    })?;
    let (mut records, mut scores, mut s1, mut reps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, sc, a, b) in results.into_iter().flatten() {
        records.push(r);
        scores.extend(sc);
        s1.extend(a);
        reps.extend(b);
    }
    write_jsonl(&ws.path("cascade/scores.jsonl"), &scores)?;
    write_jsonl(&ws.path("cascade/stage1.jsonl"), &s1)?;
    write_jsonl(&ws.path("cascade/representatives.jsonl"), &reps)?;
    write_jsonl(&ws.path("metrics/cascade.jsonl"), &records)?;
    let mean = records.iter().map(|r| r.representatives as f64).sum::<f64>() / records.len().max(1) as f64;
    ws.note(format!("cascade mean representatives per slide: {:.2} (reference budget 9)", mean));
    Ok(CascadeSummary { records, mean_representatives: mean })
}

fn representatives(ws: &Workspace) -> Result<Vec<SelectedPatch>> {
    read_jsonl(&ws.path("cascade/representatives.jsonl"))
}

/// Representatives grouped per ingested slide, in index order.
fn reps_by_slide(ws: &Workspace) -> Result<Vec<(IngestRecord, Vec<SelectedPatch>)>> {
    let reps = representatives(ws)?;
    Ok(ws
        .records()?
        .into_iter()
        .map(|r| {
            let mine = reps.iter().filter(|p| p.slide_id == r.slide_id()).cloned().collect();
            (r, mine)
        })
        .filter(|(_, v): &(IngestRecord, Vec<SelectedPatch>)| !v.is_empty())
        .collect())
}

fn patch_name(p: &SelectedPatch) -> String {
    format!("{}_{}", p.row, p.col)
}

/// Codes the I₃ block of every representative.
pub fn compress(ws: &Workspace) -> Result<Vec<MetricsRecord>> {
    let q = ws.qhvae()?;
    let groups = reps_by_slide(ws)?;
    let per = ws.par(&groups, |(rec, reps)| {
        let slide = ws.load(rec)?;
        let mut out = Vec::new();
        for p in reps {
            let x = slide.block((p.row, p.col))?;
            let c = qcompress(&q.0, &q.1, &x)?;
            write_file(&ws.path(&format!("bitstreams/{}/{}.qhv", rec.slide_id(), patch_name(p))), &c.bytes)?;
            let recon = c.recon.reshape(x.shape().to_vec())?.map(|v| v.clamp(0.0, 1.0));
            let bpp = (c.bytes.len() * 8) as f64 / (x.shape()[1] * x.shape()[2]) as f64;
            out.push(MetricsRecord {
                name: "compress".into(),
                slide_id: Some(rec.slide_id().into()),
                patch: Some(patch_name(p)),
                psnr: Some(psnr(&recon, &x)?),
                ssim: Some(ssim(&recon, &x)?),
                bpp: Some(bpp),
                ..Default::default()
            });
        }
        ws.note(format!("compress {} patches={}", rec.slide_id(), reps.len()));
        Ok(out)
    })?;
    let out: Vec<MetricsRecord> = per.into_iter().flatten().collect();
    write_jsonl(&ws.path("metrics/compress.jsonl"), &out)?;
    Ok(out)
}

/// Decodes every bitstream to a PNG.
pub fn decompress(ws: &Workspace) -> Result<usize> {
    let q = ws.qhvae()?;
    let groups = reps_by_slide(ws)?;
    let counts = ws.par(&groups, |(rec, reps)| {
        for p in reps {
            let bytes = read_file(&ws.path(&format!("bitstreams/{}/{}.qhv", rec.slide_id(), patch_name(p))))?;
            let d = qdecompress(&q.0, &q.1, &bytes)?;
            let [_, c, h, w] = d.recon.shape()[..] else { unreachable!("decoder output is 4-d") };
            let img = image_of(&d.recon.reshape(vec![c, h, w])?)?;
            save_rgb(&img, &ws.path(&format!("decoded/{}/{}.png", rec.slide_id(), patch_name(p))))?;
        }
        Ok(reps.len())
    })?;
    Ok(counts.into_iter().sum())
}

fn prepared(ws: &Workspace, q: &(Qhvae, ParamStore<f32>), groups: &[(IngestRecord, Vec<SelectedPatch>)]) -> Result<Vec<Vec<PreparedPatch>>> {
    ws.par(groups, |(rec, reps)| {
        let slide = ws.load(rec)?;
        reps.iter().map(|p| Ok(PreparedPatch::new(&slide.block((p.row, p.col))?, &ws.cfg.l2g, &q.0, &q.1)?)).collect()
    })
}

/// Fits the reconstruction network on train-split representatives with the
/// codec frozen.
pub fn train_l2g(ws: &Workspace) -> Result<Vec<TrainRecord>> {
    let q = ws.qhvae()?;
    let frozen = q.1.weight_hash();
    let groups: Vec<_> = reps_by_slide(ws)?.into_iter().filter(|(r, _)| split_of(r) != Some(Split::Test)).collect();
    let data: Vec<PreparedPatch> = prepared(ws, &q, &groups)?.into_iter().flatten().collect();
    let mut store = ParamStore::new();
    let model = L2g::new(&ws.cfg.l2g, &ws.cfg.qhvae, &mut store, ws.seed("l2g"))?;
    let mut trainer = L2gTrainer::new(model, store, ws.seed("l2g-train"), ws.cfg.l2g_train.lr);
    let mut log = Vec::new();
    let steps = ws.cfg.l2g_train.steps;
    trainer.fit(&data, steps, |m| {
        if m.step % 10 == 0 || m.step as usize == steps {
            ws.note(format!("train-l2g step={} loss={:.4}", m.step, m.loss));
            log.push(TrainRecord { step: m.step, loss: m.loss, rate_bpp: None, psnr: None });
        }
    })?;
    if q.1.weight_hash() != frozen {
        return Err(PipelineError::Invalid("codec weights changed during reconstruction training".into()));
    }
    ws.save_store(&trainer.store, "models/l2g.ckpt")?;
    write_jsonl(&ws.path("metrics/l2g_train.jsonl"), &log)?;
    Ok(log)
}

/// Fused local-global feature of every representative.
pub fn features(ws: &Workspace) -> Result<Vec<FeatureRow>> {
    let q = ws.qhvae()?;
    let (l2g, store) = ws.l2g()?;
    let groups = reps_by_slide(ws)?;
    let per = ws.par(&groups, |(rec, reps)| {
        let slide = ws.load(rec)?;
        reps.iter()
            .map(|p| {
                let pp = PreparedPatch::new(&slide.block((p.row, p.col))?, &ws.cfg.l2g, &q.0, &q.1)?;
                Ok(FeatureRow { slide_id: rec.slide_id().into(), cell: (p.row, p.col), values: l2g.patch_feature(&store, &pp)? })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<FeatureRow> = per.into_iter().flatten().collect();
    write_features(&ws.path("features.tsv"), &rows)?;
    Ok(rows)
}

/// Slide classification for each configured seed, with attention pooling
/// and (unless `only` says otherwise) the mean-pooling ablation.
pub fn aggregate(ws: &Workspace, only: Option<Pooling>) -> Result<Vec<AggregateReport>> {
    let rows = read_features(&ws.path("features.tsv"))?;
    let recs = ws.records()?;
    let meta = |id: &str| {
        let r = recs.iter().find(|r| r.slide_id() == id)?;
        Some((r.manifest.label?, r.manifest.split.unwrap_or(Split::Train)))
    };
    let bags = bags_from_rows(&rows, meta)?;
    let poolings = match only {
        Some(p) => vec![p],
        None => vec![Pooling::Attention, Pooling::Mean],
    };
    let mut out = Vec::new();
    for &seed in &ws.cfg.aggregate.seeds {
        for &p in &poolings {
            let (_, r) = run_aggregate(&bags, &ws.cfg.aggregate.mil, p, seed)?;
            ws.note(format!("aggregate seed={} pooling={} accuracy={:.3} auc={:.3}", seed, RunConfig::pooling_label(p), r.accuracy, r.auc));
            out.push(r);
        }
    }
    write_jsonl(&ws.path("metrics/aggregate.jsonl"), &out)?;
    Ok(out)
}

/// Composite heatmaps from the cascade's fused scores.
pub fn heatmap(ws: &Workspace) -> Result<Vec<MetricsRecord>> {
    let scores: Vec<SelectedPatch> = read_jsonl(&ws.path("cascade/scores.jsonl"))?;
    let recs = ws.records()?;
    let mut ps = ws.cfg.cascade.heatmap_p.clone();
    ps.sort_by(|a, b| a.total_cmp(b));
    let mut out = Vec::new();
    for rec in &recs {
        let mine: Vec<&SelectedPatch> = scores.iter().filter(|s| s.slide_id == rec.slide_id()).collect();
        if mine.is_empty() {
            continue;
        }
        let grid = rec.grid()?;
        let map = AttentionMap { model_id: 0, scale: grid.scale, cells: mine.iter().map(|s| (s.row, s.col)).collect(), scores: mine.iter().map(|s| s.score).collect() };
        let fused = fuse_scores(&[map], &EnsembleWeights::uniform(1)?)?;
        let layers = heatmap::overlays(&fused, &ps)?;
        let mask = rec.mask_flags();
        save_rgb(&heatmap::render(&grid, &fused, &layers, mask.as_deref()), &ws.path(&format!("heatmaps/{}.png", rec.slide_id())))?;
        let gray = heatmap::render_gray(&grid, &fused);
        let gpath = ws.path(&format!("heatmaps/{}-scores.png", rec.slide_id()));
        gray.save_with_format(&gpath, image::ImageFormat::Png).map_err(|source| PipelineError::Image { path: gpath.clone(), source })?;
        let mask_cells: Vec<_> = mask.iter().flat_map(|m| (0..m.len()).filter(|&i| m[i]).map(|i| (i / grid.cols, i % grid.cols))).collect();
        for (p, cells) in &layers {
            let iou = (!mask_cells.is_empty()).then(|| super::cascade::iou(cells, &mask_cells));
            out.push(MetricsRecord {
                name: format!("top-{}", p),
                slide_id: Some(rec.slide_id().into()),
                selected: Some(cells.len()),
                ssim: None,
                psnr: None,
                accuracy: iou,
                ..Default::default()
            });
        }
    }
    write_jsonl(&ws.path("metrics/heatmap.jsonl"), &out)?;
    Ok(out)
}

/// PSNR and SSIM of two images on disk.
pub fn eval_pair(recon: &Path, target: &Path) -> Result<MetricsRecord> {
    let a = ingest::tensor_of_image(&load_rgb(recon)?)?;
    let b = ingest::tensor_of_image(&load_rgb(target)?)?;
    Ok(MetricsRecord { name: "pair".into(), psnr: Some(psnr(&a, &b)?), ssim: Some(ssim(&a, &b)?), ..Default::default() })
}

/// Decoded codec PNGs and reconstruction-network outputs against the
/// original blocks of every representative.
pub fn eval(ws: &Workspace) -> Result<Vec<MetricsRecord>> {
    let q = ws.qhvae()?;
    let net = if ws.path("models/l2g.ckpt").exists() { Some(ws.l2g()?) } else { None };
    let groups = reps_by_slide(ws)?;
    let per = ws.par(&groups, |(rec, reps)| {
        let slide = ws.load(rec)?;
        let mut out = Vec::new();
        for p in reps {
            let x = slide.block((p.row, p.col))?;
            let decoded = ws.path(&format!("decoded/{}/{}.png", rec.slide_id(), patch_name(p)));
            if decoded.exists() {
                let d = ingest::tensor_of_image(&load_rgb(&decoded)?)?;
                out.push(MetricsRecord {
                    name: "codec".into(),
                    slide_id: Some(rec.slide_id().into()),
                    patch: Some(patch_name(p)),
                    psnr: Some(psnr(&d, &x)?),
                    ssim: Some(ssim(&d, &x)?),
                    ..Default::default()
                });
            }
            if let Some((m, store)) = &net {
                let pp = PreparedPatch::new(&x, &ws.cfg.l2g, &q.0, &q.1)?;
                let inf = m.infer(store, &pp, true)?;
                let r = inf.recons.last().expect("four scales");
                let r = r.reshape(x.shape().to_vec())?.map(|v| v.clamp(0.0, 1.0));
                out.push(MetricsRecord {
                    name: "l2g".into(),
                    slide_id: Some(rec.slide_id().into()),
                    patch: Some(patch_name(p)),
                    psnr: Some(psnr(&r, &x)?),
                    ssim: Some(ssim(&r, &x)?),
                    ..Default::default()
                });
            }
        }
        Ok(out)
    })?;
    let out: Vec<MetricsRecord> = per.into_iter().flatten().collect();
    write_jsonl(&ws.path("metrics/eval.jsonl"), &out)?;
    Ok(out)
}

/// Every step from synthesis to heatmaps and evaluation.
pub fn run_all(ws: &Workspace) -> Result<()> {
    synth(ws)?;
    ingest(ws, None)?;
    train_qhvae(ws)?;
    train_scorers(ws)?;
    cascade(ws)?;
    compress(ws)?;
    decompress(ws)?;
    train_l2g(ws)?;
    features(ws)?;
    aggregate(ws, None)?;
    heatmap(ws)?;
    eval(ws)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::small();
        c.synth.rows = 6;
        c.synth.cols = 6;
        c.qhvae_train.steps = 4;
        c.l2g_train.steps = 3;
        c.cluster.k = 2;
        c
    }

    #[test]
    fn degenerate_cascade_keeps_every_tissue_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.cascade.p1 = 100.0;
        cfg.cluster.k = 1;
        cfg.synth.train_slides = 2;
        cfg.synth.test_slides = 2;
        let ws = Workspace::new(dir.path(), cfg).unwrap();
        synth(&ws).unwrap();
        let recs = ingest(&ws, None).unwrap();
        train_qhvae(&ws).unwrap();
        train_scorers(&ws).unwrap();
        let s = cascade(&ws).unwrap();
        for (r, rec) in s.records.iter().zip(&recs) {
            assert_eq!(r.stage1, rec.tissue_cells);
            assert_eq!(r.representatives, rec.tissue_cells);
        }
    }
}
