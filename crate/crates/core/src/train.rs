//! Training engine: model assembly, parameter groups, the optimization loop,
//! checkpoints and tiled evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, patchify, Backbone, BackboneConfig};
use crate::config::RunConfig;
use crate::datagen::{crop, merge_tiles, split_train_val, CropPolicy, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::{Aggregation, MetricReport};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Archive, ParamGroup, ParamSet};
use crate::rein::{Adapter, AdapterConfig, TOKEN_INIT_SCALE};
use crate::seghead::{HeadConfig, HeadOutputs, SegHead};
use crate::tape::{Tape, Var};

pub const CHECKPOINT_KIND: &str = "reinseg_checkpoint";
pub const LOG_HEADER: &str = "iter,loss,lr_rein,lr_head";
pub const QUERY_EMBED: &str = "head.query_embed";

/// Independent seed streams derived from the run seed.
fn derived_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

/// Frozen backbone, Rein adapter (or learned free queries for the head-only
/// baseline) and mask head.
#[derive(Clone, Debug)]
pub struct SegModel {
    cfg: RunConfig,
    backbone: Backbone,
    adapter: Option<Adapter>,
    queries: Option<ParamSet>,
    head: SegHead,
}

impl SegModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut bcfg = BackboneConfig::new(cfg.backbone, cfg.layers, cfg.width, cfg.patch_size, cfg.crop_size, cfg.backbone_seed);
        bcfg.heads = cfg.heads;
        let mut backbone = build_backbone(&bcfg)?;
        if let Some(dir) = &cfg.weights_dir {
            backbone.import_weights(dir)?;
        }
        if cfg.backbone_frozen {
            backbone.freeze();
        }
        let (adapter, queries) = if cfg.use_rein {
            let acfg = AdapterConfig {
                layers: cfg.layers,
                tokens: cfg.tokens,
                rank: cfg.rank,
                width: cfg.width,
                hidden: cfg.hidden,
                query_dim: cfg.query_dim,
                seed: derived_seed(cfg.seed, 1),
            };
            (Some(Adapter::new(acfg)?), None)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, 1));
            let q = Array2::from_shape_fn((cfg.tokens, cfg.query_dim), |_| rng.random_range(-TOKEN_INIT_SCALE..TOKEN_INIT_SCALE));
            let mut set = ParamSet::new();
            set.push(QUERY_EMBED, q);
            (None, Some(set))
        };
        let head = SegHead::new(HeadConfig {
            query_dim: cfg.query_dim,
            width: cfg.width,
            num_queries: cfg.tokens,
            upsample_factor: cfg.patch_size,
            seed: derived_seed(cfg.seed, 2),
        })?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            adapter,
            queries,
            head,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    pub fn head(&self) -> &SegHead {
        &self.head
    }

    /// Parameter groups in a fixed order: backbone, rein or queries, head.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let c = &self.cfg;
        let mut groups = vec![ParamGroup::from_set("backbone", self.backbone.params(), !c.backbone_frozen, c.lr_backbone)];
        if let Some(a) = &self.adapter {
            groups.push(ParamGroup::from_set("rein", a.params(), true, c.lr_rein));
        }
        if let Some(q) = &self.queries {
            groups.push(ParamGroup::from_set("queries", q, true, c.lr_head));
        }
        groups.push(ParamGroup::from_set("head", self.head.params(), true, c.lr_head));
        groups
    }

    fn sets(&self) -> Vec<&ParamSet> {
        let mut out = vec![self.backbone.params()];
        out.extend(self.adapter.as_ref().map(|a| a.params()));
        out.extend(self.queries.as_ref());
        out.push(self.head.params());
        out
    }

    fn sets_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut out = vec![self.backbone.params_mut()];
        out.extend(self.adapter.as_mut().map(|a| a.params_mut()));
        out.extend(self.queries.as_mut());
        out.push(self.head.params_mut());
        out
    }

    /// Builds the forward graph for a `batch x S x S x 3` image batch.
    /// Returns the per-group parameter handles and the head outputs.
    fn forward<'a>(&'a self, tape: &mut Tape<'a>, images: ArrayView4<f32>, train: bool) -> (Vec<Vec<Var>>, HeadOutputs) {
        let grid = self.backbone.config().grid();
        let bb = self.backbone.bind(tape, train && !self.cfg.backbone_frozen);
        let patches = tape.constant(patchify(images, self.cfg.patch_size));
        let mut handles = Vec::with_capacity(4);
        let (final_features, queries) = match &self.adapter {
            Some(a) => {
                let bound = a.bind(tape, train);
                let (_, out) = self.backbone.forward_tape(tape, &bb, patches, &mut |t, l, f| a.refine_tape(t, &bound, l, f));
                let q = a.queries_tape(tape, &bound);
                handles.push(bb);
                handles.push(bound.vars);
                (out, q)
            }
            None => {
                let (_, out) = self.backbone.forward_tape(tape, &bb, patches, &mut |_, _, f| f);
                let q = tape.param(self.queries.as_ref().expect("baseline has queries").get(0), train);
                handles.push(bb);
                handles.push(vec![q]);
                (out, q)
            }
        };
        let head_vars = self.head.bind(tape, train);
        let r = self.head.resampler(grid, grid, self.cfg.upsampling);
        let out = self.head.predict_tape(tape, &head_vars, final_features, queries, &r);
        handles.push(head_vars);
        (handles, out)
    }

    /// Batch loss and per-group gradients (`None` for frozen tensors).
    fn loss_and_grads(&self, images: ArrayView4<f32>, gt: Array2<f64>) -> (f64, Vec<Vec<Option<Array2<f64>>>>) {
        let block = images.dim().1 * images.dim().2;
        let mut tape = Tape::new();
        let (handles, out) = self.forward(&mut tape, images, true);
        let loss_var = tape.seg_loss(out.semantic, gt, block);
        let loss = tape.scalar(loss_var);
        let mut g = tape.backward(loss_var);
        let grads = handles.iter().map(|hs| hs.iter().map(|&v| g.take(v)).collect()).collect();
        (loss, grads)
    }

    fn gt_column(&self, images: &ArrayView4<f32>, masks: &[Array2<bool>]) -> Result<Array2<f64>> {
        let (b, h, w, _) = images.dim();
        if masks.len() != b || masks.iter().any(|m| m.dim() != (h, w)) {
            return Err(Error::shape("ground-truth masks", format!("{b} of {h}x{w}"), masks.len()));
        }
        Ok(Array2::from_shape_vec((b * h * w, 1), masks.iter().flat_map(|m| m.iter().map(|&v| v as u8 as f64)).collect()).expect("sized"))
    }

    /// Mean segmentation loss of a crop batch.
    pub fn loss(&self, images: ArrayView4<f32>, masks: &[Array2<bool>]) -> Result<f64> {
        let gt = self.gt_column(&images, masks)?;
        Ok(self.loss_and_grads(images, gt).0)
    }

    /// Loss and the gradient of every trainable tensor, keyed by name.
    pub fn gradients(&self, images: ArrayView4<f32>, masks: &[Array2<bool>]) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
        let gt = self.gt_column(&images, masks)?;
        let (loss, grads) = self.loss_and_grads(images, gt);
        let mut out = BTreeMap::new();
        for (set, gs) in self.sets().iter().zip(grads) {
            for (p, g) in set.iter().zip(gs) {
                if let Some(g) = g {
                    out.insert(p.name.clone(), g);
                }
            }
        }
        Ok((loss, out))
    }

    /// Any model tensor by name. Editing a frozen backbone tensor is caught
    /// by the frozen-digest check.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.sets_mut().into_iter().find_map(|set| {
            let i = set.index_of(name)?;
            Some(set.get_mut(i))
        })
    }

    /// Foreground probability maps, one `S x S` map per image.
    pub fn predict_probs(&self, images: ArrayView4<f32>) -> Vec<Array2<f64>> {
        let (b, h, w, _) = images.dim();
        let mut tape = Tape::new();
        let (_, out) = self.forward(&mut tape, images, false);
        let sem = tape.value(out.semantic);
        (0..b)
            .map(|i| {
                sem.slice(s![i * h * w..(i + 1) * h * w, 0])
                    .to_owned()
                    .into_shape_with_order((h, w))
                    .expect("contiguous")
            })
            .collect()
    }

    /// Full-image probability map from mean-merged sliding tiles.
    pub fn predict_image(&self, sample: &ImageSample) -> Result<Array2<f64>> {
        let tiles = crop(sample, self.cfg.crop_size, CropPolicy::Sliding)?;
        let batch = stack_images(tiles.iter().map(|t| &t.sample));
        let probs = self.predict_probs(batch.view());
        let coords: Vec<_> = tiles.iter().map(|t| (t.y, t.x)).collect();
        merge_tiles(&probs, &coords, sample.height(), sample.width())
    }

    pub fn set_threshold(&mut self, threshold: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} must lie in [0, 1]")));
        }
        self.cfg.threshold = threshold;
        Ok(())
    }

    pub fn predict_mask(&self, sample: &ImageSample) -> Result<Array2<bool>> {
        let t = self.cfg.threshold;
        Ok(self.predict_image(sample)?.mapv(|p| p >= t))
    }

    pub fn to_checkpoint(&self, iteration: usize, val_score: Option<f64>) -> Archive {
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            iteration,
            frozen_digest: self.backbone.frozen_digest().map(str::to_string),
            val_score,
        };
        let mut archive = Archive::new(CHECKPOINT_KIND, serde_json::to_value(&meta).expect("meta serializes"));
        for (g, set) in self.param_groups().iter().zip(self.sets()) {
            archive.add_set(&g.name, set, g.trainable);
        }
        archive
    }

    /// Rebuilds a model from a checkpoint, checking that a frozen backbone
    /// still matches its recorded digest.
    pub fn from_checkpoint(archive: &Archive) -> Result<(Self, CheckpointMeta)> {
        if archive.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a {CHECKPOINT_KIND} archive, found `{}`", archive.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let mut cfg = meta.config.clone();
        // Weights come from the archive, not from the import directory.
        cfg.weights_dir = None;
        let mut model = Self::new(&cfg)?;
        model.cfg.weights_dir = meta.config.weights_dir.clone();
        model.backbone.set_params(archive.group_set("backbone"))?;
        if let Some(a) = model.adapter.as_mut() {
            a.set_params(archive.group_set("rein"))?;
        }
        if model.queries.is_some() {
            let q = archive.group_set("queries");
            if q.infos() != model.queries.as_ref().unwrap().infos() {
                return Err(Error::Format("query manifest does not match config".into()));
            }
            model.queries = Some(q);
        }
        model.head.set_params(archive.group_set("head"))?;
        if cfg.backbone_frozen {
            model.backbone.freeze();
            if model.backbone.frozen_digest().map(str::to_string) != meta.frozen_digest {
                return Err(Error::Format("backbone parameters do not match the recorded frozen digest".into()));
            }
        }
        Ok((model, meta))
    }

    pub fn save(&self, path: &Path, iteration: usize, val_score: Option<f64>) -> Result<()> {
        self.to_checkpoint(iteration, val_score).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        Self::from_checkpoint(&Archive::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub iteration: usize,
    pub frozen_digest: Option<String>,
    pub val_score: Option<f64>,
}

fn stack_images<'s>(samples: impl ExactSizeIterator<Item = &'s ImageSample>) -> Array4<f32> {
    let samples: Vec<_> = samples.collect();
    let (h, w) = (samples[0].height(), samples[0].width());
    let mut out = Array4::zeros((samples.len(), h, w, 3));
    for (i, smp) in samples.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(&smp.image);
    }
    out
}

pub fn build_optimizer(groups: Vec<ParamGroup>, cfg: &RunConfig) -> Result<AdamW> {
    AdamW::new(
        groups,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr_rein: f64,
    pub lr_head: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.9},{:e},{:e}", self.iter, self.loss, self.lr_rein, self.lr_head)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// `(iteration, validation challenge score)`
    pub validations: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the first and last `window` iterations.
    pub fn smoothed_endpoints(&self, window: usize) -> (f64, f64) {
        let l = self.losses();
        let w = window.clamp(1, l.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&l[..w.min(l.len())]), mean(&l[l.len().saturating_sub(w)..]))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the log go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Skip validation (and best-model selection) entirely.
    pub skip_validation: bool,
    pub progress: bool,
}

pub struct TrainOutcome {
    pub model: SegModel,
    pub log: TrainLog,
    /// Best validation checkpoint, `(iteration, score, archive)`.
    pub best: Option<(usize, f64, Archive)>,
    pub final_checkpoint: Archive,
}

/// One crop per sampled image, stacked with its ground truth column.
fn sample_batch(data: &[ImageSample], cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<(Array4<f32>, Array2<f64>)> {
    let size = cfg.crop_size;
    let mut crops = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let smp = &data[rng.random_range(0..data.len())];
        crops.push(crop(smp, size, CropPolicy::Random { seed: rng.random() })?.remove(0).sample);
    }
    let images = stack_images(crops.iter());
    let gt = Array2::from_shape_vec(
        (cfg.batch_size * size * size, 1),
        crops.iter().flat_map(|c| c.mask.iter().map(|&m| m as u8 as f64)).collect(),
    )
    .expect("sized");
    Ok((images, gt))
}

/// Validation challenge score (per-image mean) on full images.
pub fn validation_score(model: &SegModel, val: &[ImageSample]) -> Result<f64> {
    Ok(evaluate_samples(model, val)?.1.aggregate.score)
}

/// Trains on `dataset` after an 8:2-style stratified split. Validation runs
/// every checkpoint interval and at the end; the best-scoring state is kept.
pub fn train(cfg: &RunConfig, dataset: &[ImageSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    let (train_set, val_set) = split_train_val(dataset, cfg.val_ratio, derived_seed(cfg.seed, 4))?;
    train_on(cfg, &train_set, &val_set, opts)
}

pub fn train_on(cfg: &RunConfig, train_set: &[ImageSample], val_set: &[ImageSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let mut model = SegModel::new(cfg)?;
    let mut opt = build_optimizer(model.param_groups(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, 3));
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, Archive)> = None;
    let every = cfg.checkpoint_interval();

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
            let path = dir.join("train_log.csv");
            let mut w = BufWriter::new(fs::File::create(&path).map_err(Error::io(&path))?);
            writeln!(w, "{LOG_HEADER}").map_err(Error::io(&path))?;
            Some((w, path))
        }
        None => None,
    };

    for iter in 1..=cfg.iterations {
        let (images, gt) = sample_batch(train_set, cfg, &mut rng)?;
        let (loss, grads) = model.loss_and_grads(images.view(), gt);
        if !loss.is_finite() {
            let mut grad_norms = Vec::new();
            for (set, gs) in model.sets().iter().zip(&grads) {
                for (p, g) in set.iter().zip(gs) {
                    let n = g.as_ref().map_or(0.0, |g| g.iter().map(|x| x * x).sum::<f64>().sqrt());
                    grad_norms.push((p.name.clone(), n));
                }
            }
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                grad_norms,
            });
        }
        opt.step(&mut model.sets_mut(), &grads)?;
        let rec = LogRecord {
            iter,
            loss,
            lr_rein: cfg.lr_rein,
            lr_head: cfg.lr_head,
        };
        if let Some((w, path)) = log_file.as_mut() {
            writeln!(w, "{rec}").map_err(Error::io(path.as_path()))?;
        }
        if opts.progress && (iter % 25 == 0 || iter == 1) {
            eprintln!("iter {iter:>6}  loss {loss:.5}");
        }
        log.records.push(rec);

        if iter % every == 0 || iter == cfg.iterations {
            let score = if opts.skip_validation || val_set.is_empty() {
                None
            } else {
                let s = validation_score(&model, val_set)?;
                log.validations.push((iter, s));
                if opts.progress {
                    eprintln!("iter {iter:>6}  val score {s:.4}");
                }
                Some(s)
            };
            let ckpt = model.to_checkpoint(iter, score);
            if let Some(dir) = &opts.out_dir {
                ckpt.save(&dir.join(format!("checkpoint_{iter:06}.rseg")))?;
            }
            if let Some(s) = score {
                if best.as_ref().is_none_or(|b| s > b.1) {
                    best = Some((iter, s, ckpt));
                }
            }
        }
    }
    if let Some((w, path)) = log_file.as_mut() {
        w.flush().map_err(Error::io(path.as_path()))?;
    }
    if cfg.backbone_frozen {
        model.backbone.verify_frozen()?;
    }
    let final_checkpoint = model.to_checkpoint(cfg.iterations, log.validations.last().map(|v| v.1));
    if let Some(dir) = &opts.out_dir {
        final_checkpoint.save(&dir.join("final.rseg"))?;
        if let Some((_, _, b)) = &best {
            b.save(&dir.join("best.rseg"))?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        best,
        final_checkpoint,
    })
}

/// Tiled prediction and per-image metrics over `samples`, in order.
pub fn evaluate_samples(model: &SegModel, samples: &[ImageSample]) -> Result<(Vec<Array2<bool>>, MetricReport)> {
    let preds: Vec<Array2<bool>> = samples.par_iter().map(|s| model.predict_mask(s)).collect::<Result<_>>()?;
    let report = MetricReport::evaluate(
        samples.iter().zip(&preds).map(|(s, p)| (s.sample_id.clone(), p, &s.mask)),
        Aggregation::PerImage,
    )?;
    Ok((preds, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    pub name: String,
    pub params: usize,
    pub trainable: bool,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub groups: Vec<GroupRow>,
    pub total: usize,
    pub trainable: usize,
}

impl ParamReport {
    pub fn from_groups(groups: &[ParamGroup]) -> Self {
        let rows: Vec<GroupRow> = groups
            .iter()
            .map(|g| GroupRow {
                name: g.name.clone(),
                params: g.count(),
                trainable: g.trainable,
                learning_rate: g.learning_rate,
            })
            .collect();
        Self {
            total: rows.iter().map(|r| r.params).sum(),
            trainable: rows.iter().filter(|r| r.trainable).map(|r| r.params).sum(),
            groups: rows,
        }
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total.max(1) as f64
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10}  {:<9} {:>8}", "group", "params", "trainable", "lr")?;
        for r in &self.groups {
            let lr = if r.trainable { format!("{:e}", r.learning_rate) } else { "-".into() };
            writeln!(f, "{:<10} {:>10}  {:<9} {:>8}", r.name, r.params, if r.trainable { "yes" } else { "no" }, lr)?;
        }
        writeln!(f, "{:<10} {:>10}", "total", self.total)?;
        writeln!(f, "{:<10} {:>10}", "trainable", self.trainable)?;
        write!(f, "trainable fraction {:.4}%", 100.0 * self.trainable_fraction())
    }
}

pub fn param_report(model: &SegModel) -> ParamReport {
    ParamReport::from_groups(&model.param_groups())
}
