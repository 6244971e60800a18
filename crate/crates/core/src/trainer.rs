//! Two-stage schedule: prompt learning on frozen encoders, then encoder
//! fine-tuning with the composite objective.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;

use crate::archive::Archive;
use crate::augment::Augmenter;
use crate::config::Config;
use crate::data::{DatasetManifest, Image, PkSampler, Split};
use crate::error::{contract, Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::loader::SampleLoader;
use crate::losses::{
    ce_loss, centroid_consistency_loss, disentangle_loss, i2tce_loss, prompt_contrastive_loss, stage1_total,
    sample_prompt_rows, stage2_total, triplet_loss, Direction, LossReport, Stage1Terms, Stage2Terms,
};
use crate::masking::make_shielding_image;
use crate::model::{images_to_tensor, project_clothes, CcafModel, PromptKind, PROJ_C, PROMPT_BANK, RAW_ENCODER, SHIELD_ENCODER, TEXT_ENCODER};
use crate::optim::{cosine_lr, Adam, AdamSlot};
use crate::scalar::Scalar;
use crate::seeding::stream_rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub stage: u8,
    /// Epochs of `stage` completed when the checkpoint was written.
    pub epoch: usize,
    pub hash: String,
}

/// Model plus optimizer state, everything needed to continue a stage.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: CcafModel<T>,
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    /// Prompts in stage 1; encoders and heads in stage 2.
    pub optim: Adam<T>,
    pub proj_optim: Adam<T>,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh stage-1 state: encoders frozen, prompt bank trainable.
    pub fn stage1(model: CcafModel<T>, config: &Config) -> Self {
        let mut model = model;
        model.raw.trainable = false;
        model.shield.trainable = false;
        model.bank.trainable = true;
        Self {
            model,
            stage: 1,
            epoch: 0,
            step: 0,
            optim: Adam::new(config.adam()),
            proj_optim: Adam::new(config.adam()),
        }
    }

    /// Fresh stage-2 state from a finished stage-1 model.
    pub fn stage2(model: CcafModel<T>, config: &Config) -> Self {
        let mut model = model;
        model.raw.trainable = true;
        model.shield.trainable = true;
        model.bank.trainable = false;
        Self {
            model,
            stage: 2,
            epoch: 0,
            step: 0,
            optim: Adam::new(config.adam()),
            proj_optim: Adam::new(config.adam()),
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.model.to_archive();
        a.set_meta("stage", self.stage);
        a.set_meta("epoch", self.epoch);
        a.set_meta("step", self.step);
        for (group, opt) in [("optim", &self.optim), ("optim_proj", &self.proj_optim)] {
            for (name, slot) in opt.slots() {
                a.insert(format!("{group}/m/{name}"), &slot.m);
                a.insert(format!("{group}/v/{name}"), &slot.v);
                a.set_meta(&format!("{group}/step/{name}"), slot.step);
            }
        }
        a
    }

    pub fn from_archive(a: &Archive, config: &Config) -> Result<Self> {
        let stage: u8 = a.meta_parse("stage")?;
        contract!(stage == 1 || stage == 2, "unknown stage tag {stage}");
        let model = CcafModel::<T>::from_archive(a)?;
        let mut state = if stage == 1 {
            Self::stage1(model, config)
        } else {
            Self::stage2(model, config)
        };
        state.epoch = a.meta_parse("epoch")?;
        state.step = a.meta_parse("step")?;
        for (group, opt) in [("optim", &mut state.optim), ("optim_proj", &mut state.proj_optim)] {
            let prefix = format!("{group}/step/");
            for (key, value) in a.metadata.iter().filter(|(k, _)| k.starts_with(&prefix)) {
                let name = &key[prefix.len()..];
                let step = value
                    .parse()
                    .map_err(|_| Error::Corruption(format!("bad optimizer step for `{name}`")))?;
                let slot = AdamSlot {
                    step,
                    m: a.get(&format!("{group}/m/{name}"))?,
                    v: a.get(&format!("{group}/v/{name}"))?,
                };
                opt.insert_slot(name.to_string(), slot);
            }
        }
        Ok(state)
    }
}

/// Append-only `step,loss_name,value` log.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    /// Open `path`, dropping any entries at or beyond `from_step` so a resumed
    /// run rewrites exactly what it will reproduce.
    pub fn open(path: &Path, from_step: u64) -> Result<Self> {
        let mut kept = vec!["step,loss_name,value".to_string()];
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(path, e))?;
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < from_step) {
                    kept.push(line);
                }
            }
        }
        let mut text = kept.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn record(&mut self, step: u64, name: &str, value: f64) -> Result<()> {
        writeln!(self.file, "{step},{name},{value:?}").map_err(|e| Error::io(Path::new("metrics"), e))
    }

    fn reports(&mut self, step: u64, reports: &[LossReport]) -> Result<()> {
        for r in reports {
            self.record(step, &r.name, r.value)?;
        }
        Ok(())
    }
}

pub fn metrics_path(run_dir: &Path, stage: u8) -> PathBuf {
    run_dir.join(format!("metrics_stage{stage}.csv"))
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<CheckpointRef> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let hash = state.to_archive().save(path)?;
    Ok(CheckpointRef {
        path: path.to_path_buf(),
        stage: state.stage,
        epoch: state.epoch,
        hash,
    })
}

/// Describe a checkpoint on disk without keeping its contents.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointRef> {
    let (a, hash) = Archive::load(path)?;
    Ok(CheckpointRef {
        path: path.to_path_buf(),
        stage: a.meta_parse("stage")?,
        epoch: a.meta_parse("epoch")?,
        hash,
    })
}

/// Reload a checkpoint, checking it against its reference and the config.
pub fn resume<T: Scalar>(ckpt: &CheckpointRef, config: &Config) -> Result<TrainState<T>> {
    let (a, hash) = Archive::load(&ckpt.path)?;
    if hash != ckpt.hash {
        return Err(Error::Corruption(format!(
            "{}: content hash {hash} does not match expected {}",
            ckpt.path.display(),
            ckpt.hash
        )));
    }
    let c: usize = a.meta_parse("C")?;
    if c != config.model.feature_dim {
        return Err(Error::Config(format!(
            "checkpoint feature dim {c} differs from configured {}",
            config.model.feature_dim
        )));
    }
    let seed: u64 = a.meta_parse("seed")?;
    if seed != config.run.seed {
        warn!("checkpoint seed {seed} differs from configured seed {}", config.run.seed);
    }
    TrainState::from_archive(&a, config)
}

/// What one stage-2 iteration did to each parameter group; used to check
/// that each loss only reaches its own parameters.
#[derive(Clone, Debug, Default)]
pub struct RoutingProbe {
    /// Parameter names with a gradient from the projection loss.
    pub proj_loss_params: Vec<String>,
    /// Largest |grad| of the projection loss on any encoder parameter.
    pub proj_loss_encoder_grad: f64,
    /// Largest |grad| of the disentangling loss on the projection.
    pub dis_proj_grad: f64,
    /// Groups whose checksum changed in the projection update.
    pub changed_in_proj_step: Vec<String>,
    /// Groups whose checksum changed in the encoder update.
    pub changed_in_encoder_step: Vec<String>,
}

const GROUPS: [&str; 7] = [RAW_ENCODER, SHIELD_ENCODER, TEXT_ENCODER, PROMPT_BANK, PROJ_C, "head_id/", "head_id_s/"];

fn group_checksums<T: Scalar>(model: &CcafModel<T>) -> Vec<String> {
    GROUPS.iter().map(|g| model.checksum(g)).collect()
}

fn changed(before: &[String], after: &[String]) -> Vec<String> {
    GROUPS
        .iter()
        .zip(before.iter().zip(after))
        .filter(|(_, (a, b))| a != b)
        .map(|(g, _)| g.trim_end_matches('/').to_string())
        .collect()
}

fn max_abs<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.to_f64_exact().abs()).fold(0.0, f64::max)
}

fn labels_of(manifest: &DatasetManifest, batch: &[usize]) -> (Vec<usize>, Vec<usize>) {
    batch
        .iter()
        .map(|&i| (manifest.records[i].identity, manifest.records[i].clothes_id))
        .unzip()
}

fn rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let c = t.cols();
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new([idx.len(), c], data).expect("row gather")
}

fn only_prefixed<T: Scalar>(grads: Gradients<T>, prefixes: &[&str]) -> BTreeMap<String, Tensor<T>> {
    grads
        .into_params()
        .into_iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .collect()
}

/// Runs stages against one manifest, writing into a run directory.
pub struct Trainer<'a> {
    pub config: &'a Config,
    pub manifest: &'a DatasetManifest,
    pub loader: SampleLoader,
    pub run_dir: PathBuf,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a Config, manifest: &'a DatasetManifest, run_dir: &Path) -> Self {
        let ext = config.data.cache_masks.then(|| config.data.mask_ext.clone());
        Self {
            config,
            manifest,
            loader: SampleLoader::new(config.image_size(), config.clothes_labels(), ext),
            run_dir: run_dir.to_path_buf(),
        }
    }

    pub fn new_model<T: Scalar>(&self) -> Result<CcafModel<T>> {
        CcafModel::new(
            self.config.model_config(self.manifest.num_identities, self.manifest.num_clothes),
            self.config.run.seed,
        )
    }

    fn sampler(&self) -> Result<PkSampler> {
        PkSampler::new(self.manifest, self.config.batch.p, self.config.batch.k)
    }

    fn stage_seed(&self, stage: u8) -> u64 {
        stream_rng(self.config.run.seed, "stage", &[stage as u64]).random()
    }

    fn checkpoint_path(&self, stage: u8, epoch: usize, last: bool) -> PathBuf {
        let name = if last {
            format!("stage{stage}_final.ckpt")
        } else {
            format!("stage{stage}_epoch{epoch:04}.ckpt")
        };
        self.run_dir.join(CHECKPOINT_DIR).join(name)
    }

    fn after_epoch<T: Scalar>(&self, state: &TrainState<T>, every: usize, epochs: usize, stop: usize) -> Result<Option<CheckpointRef>> {
        let last = state.epoch >= epochs;
        if last || state.epoch == stop {
            return save_checkpoint(state, &self.checkpoint_path(state.stage, state.epoch, last)).map(Some);
        }
        if every > 0 && state.epoch % every == 0 {
            save_checkpoint(state, &self.checkpoint_path(state.stage, state.epoch, false))?;
        }
        Ok(None)
    }

    /// Stage 1 from `state.epoch` until the configured epoch count, or until
    /// `stop_after` epochs are done. Returns the checkpoint written last.
    pub fn run_stage1<T: Scalar>(&self, state: &mut TrainState<T>, stop_after: Option<usize>) -> Result<CheckpointRef> {
        contract!(state.stage == 1, "stage-1 run on a stage-{} state", state.stage);
        if state.model.raw.trainable || state.model.shield.trainable {
            return Err(Error::Config("image encoders must be frozen during stage 1".into()));
        }
        let cfg = &self.config.stage1;
        let epochs = cfg.epochs;
        let stop = stop_after.unwrap_or(epochs).min(epochs);
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let mut log = MetricsLog::open(&metrics_path(&self.run_dir, 1), state.step)?;
        if state.epoch >= stop {
            return save_checkpoint(state, &self.checkpoint_path(1, state.epoch, state.epoch >= epochs));
        }

        let (shield_feats, clothes_feats) = self.stage1_features(&state.model)?;
        let sampler = self.sampler()?;
        let seed = self.stage_seed(1);
        let sim = self.config.similarity();
        while state.epoch < stop {
            let lr = cosine_lr(cfg.lr, cfg.lr_floor, state.epoch, epochs);
            for batch in sampler.epoch(seed, state.epoch) {
                let (ids, clothes) = labels_of(self.manifest, &batch);
                let m = &state.model;
                let mut g = Graph::<T>::new();
                let xs = g.constant(rows(&shield_feats, &batch));
                let xc = g.constant(rows(&clothes_feats, &batch));
                let pid = m.bank.features(&mut g, &m.store, &m.text, PromptKind::Identity, Some(&ids))?;
                let pc = m.bank.features(&mut g, &m.store, &m.text, PromptKind::Clothes, Some(&clothes))?;
                let terms = Stage1Terms {
                    i2t: prompt_contrastive_loss(&mut g, xs, pid, &ids, Direction::ImageToText, sim)?,
                    t2i: prompt_contrastive_loss(&mut g, xs, pid, &ids, Direction::TextToImage, sim)?,
                    i2t_c: prompt_contrastive_loss(&mut g, xc, pc, &clothes, Direction::ImageToText, sim)?,
                    t2i_c: prompt_contrastive_loss(&mut g, xc, pc, &clothes, Direction::TextToImage, sim)?,
                };
                let (total, reports) = stage1_total(&mut g, &terms)?;
                let grads = only_prefixed(g.backward(total)?, &[PROMPT_BANK]);
                state.optim.step(&mut state.model.store, &grads, lr)?;
                log.reports(state.step, &reports)?;
                log.record(state.step, "lr", lr)?;
                state.step += 1;
            }
            state.epoch += 1;
            info!("stage 1 epoch {}/{epochs} done", state.epoch);
            if let Some(r) = self.after_epoch(state, cfg.checkpoint_every, epochs, stop)? {
                return Ok(r);
            }
        }
        unreachable!("loop exits through a checkpoint")
    }

    /// Frozen raw-encoder features of the shielding and clothes views of
    /// every record (rows follow manifest order; only train rows are used).
    pub fn stage1_features<T: Scalar>(&self, model: &CcafModel<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = self.manifest.records.len();
        let c = model.config.feature_dim;
        let train: Vec<usize> = (0..n).filter(|&i| self.manifest.records[i].split == Split::Train).collect();
        let mut shield = Tensor::zeros([n, c]);
        let mut clothes = Tensor::zeros([n, c]);
        for chunk in train.chunks(self.config.eval.batch_size.max(1)) {
            let samples = self.loader.get_many(self.manifest, chunk)?;
            let s: Vec<Image> = samples.iter().map(|x| x.shielding()).collect();
            let cl: Vec<Image> = samples.iter().map(|x| x.clothes()).collect();
            let fs = model.raw.encode_images(&model.store, &s)?;
            let fc = model.raw.encode_images(&model.store, &cl)?;
            for (r, &i) in chunk.iter().enumerate() {
                shield.data_mut()[i * c..(i + 1) * c].copy_from_slice(fs.row(r));
                clothes.data_mut()[i * c..(i + 1) * c].copy_from_slice(fc.row(r));
            }
        }
        Ok((shield, clothes))
    }

    /// Augmented raw and shielding views of one batch.
    fn stage2_views(&self, batch: &[usize], epoch: usize, b: usize) -> Result<(Vec<Image>, Vec<Image>)> {
        let aug = Augmenter::from_config(&self.config.augment);
        let seed = self.config.run.seed;
        let samples = self.loader.get_many(self.manifest, batch)?;
        let mut raws = Vec::with_capacity(batch.len());
        let mut shields = Vec::with_capacity(batch.len());
        for (j, s) in samples.iter().enumerate() {
            let idx = [2, epoch as u64, b as u64, j as u64];
            let (img, mask) = aug.geometric(&s.image, &s.mask, &mut stream_rng(seed, "augment", &idx));
            let mut shield = make_shielding_image(&img, &mask)?;
            if self.config.augment.erase_masked_streams {
                aug.erase(&mut shield, &mut stream_rng(seed, "erase-shield", &idx));
            }
            let mut raw = img;
            aug.erase(&mut raw, &mut stream_rng(seed, "erase", &idx));
            raws.push(raw);
            shields.push(shield);
        }
        Ok((raws, shields))
    }

    /// Stage 2 from `state.epoch`; see [`Self::run_stage1`] for `stop_after`.
    pub fn run_stage2<T: Scalar>(&self, state: &mut TrainState<T>, stop_after: Option<usize>) -> Result<CheckpointRef> {
        contract!(state.stage == 2, "stage-2 run on a stage-{} state", state.stage);
        let cfg = &self.config.stage2;
        let epochs = cfg.epochs;
        let stop = stop_after.unwrap_or(epochs).min(epochs);
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let mut log = MetricsLog::open(&metrics_path(&self.run_dir, 2), state.step)?;
        if state.epoch >= stop {
            return save_checkpoint(state, &self.checkpoint_path(2, state.epoch, state.epoch >= epochs));
        }
        let prompts = Stage2Prompts::new(&state.model)?;
        let sampler = self.sampler()?;
        let seed = self.stage_seed(2);
        while state.epoch < stop {
            let lr = cosine_lr(cfg.lr, cfg.lr_floor, state.epoch, epochs);
            let base_proj = cfg.proj_lr.unwrap_or(cfg.lr);
            let proj_lr = cosine_lr(base_proj, cfg.lr_floor.min(base_proj), state.epoch, epochs);
            for (b, batch) in sampler.epoch(seed, state.epoch).into_iter().enumerate() {
                let (raws, shields) = self.stage2_views(&batch, state.epoch, b)?;
                let (ids, clothes) = labels_of(self.manifest, &batch);
                let views = BatchViews {
                    raw: images_to_tensor(&raws)?,
                    shield: images_to_tensor(&shields)?,
                    ids,
                    clothes,
                };
                let reports = self.stage2_step(state, &prompts, &views, lr, proj_lr, None)?;
                log.reports(state.step, &reports)?;
                log.record(state.step, "lr", lr)?;
                state.step += 1;
            }
            state.epoch += 1;
            info!("stage 2 epoch {}/{epochs} done", state.epoch);
            if let Some(r) = self.after_epoch(state, cfg.checkpoint_every, epochs, stop)? {
                return Ok(r);
            }
        }
        unreachable!("loop exits through a checkpoint")
    }

    /// One stage-2 iteration: projection update, then encoder update.
    pub fn stage2_step<T: Scalar>(
        &self,
        state: &mut TrainState<T>,
        prompts: &Stage2Prompts<T>,
        views: &BatchViews<T>,
        lr: f64,
        proj_lr: f64,
        mut probe: Option<&mut RoutingProbe>,
    ) -> Result<Vec<LossReport>> {
        let cfg = &self.config.stage2;
        let loss = &self.config.loss;
        let sim = self.config.similarity();
        let before = probe.is_some().then(|| group_checksums(&state.model));

        let mut g = Graph::<T>::new();
        let m = &state.model;
        let x = g.input(views.raw.clone());
        let f = m.raw.forward(&mut g, &m.store, x)?;
        let fd = g.detach(f);
        let mut i2tce_c = None;
        if cfg.use_cfm {
            let p = g.param(PROJ_C, m.store.get(PROJ_C)?, true);
            let fc = g.matmul(fd, p)?;
            let cp = g.constant(prompts.clothes.clone());
            let lc = i2tce_loss(&mut g, fc, cp, &views.clothes, sim)?;
            i2tce_c = Some(g.value(lc).item().to_f64_exact());
            let grads = g.backward(lc)?;
            if let Some(pr) = probe.as_deref_mut() {
                pr.proj_loss_params = grads.params().keys().cloned().collect();
                pr.proj_loss_encoder_grad = grads
                    .params()
                    .iter()
                    .filter(|(n, _)| n.starts_with(RAW_ENCODER) || n.starts_with(SHIELD_ENCODER))
                    .map(|(_, t)| max_abs(t))
                    .fold(0.0, f64::max);
            }
            let grads = only_prefixed(grads, &[PROJ_C]);
            state.proj_optim.step(&mut state.model.store, &grads, proj_lr)?;
        }
        let mid = probe.is_some().then(|| group_checksums(&state.model));

        let m = &mut state.model;
        let mut terms = Stage2Terms {
            i2tce_c,
            ..Default::default()
        };
        let (idp, id_targets) = match loss.sampled_negatives {
            0 => (g.constant(prompts.identity.clone()), views.ids.clone()),
            n => {
                let mut rng = stream_rng(self.config.run.seed, "negatives", &[state.step]);
                let (rows_used, targets) = sample_prompt_rows(&views.ids, prompts.identity.rows(), n, &mut rng);
                (g.constant(rows(&prompts.identity, &rows_used)), targets)
            }
        };
        let logits = m.head_id.forward_train(&mut g, &mut m.store, f, true)?;
        let ce = ce_loss(&mut g, logits, &views.ids)?;
        let tri = triplet_loss(&mut g, f, &views.ids, loss.margin)?;
        terms.id = Some(g.add(ce, tri)?);
        if cfg.use_i2t {
            terms.i2tce = Some(i2tce_loss(&mut g, f, idp, &id_targets, sim)?);
        }
        if cfg.use_i2i {
            let xs = g.input(views.shield.clone());
            let fs = m.shield.forward(&mut g, &m.store, xs)?;
            let logits = m.head_id_s.forward_train(&mut g, &mut m.store, fs, true)?;
            let ce = ce_loss(&mut g, logits, &views.ids)?;
            let tri = triplet_loss(&mut g, fs, &views.ids, loss.margin)?;
            terms.id_s = Some(g.add(ce, tri)?);
            terms.i2tce_s = Some(i2tce_loss(&mut g, fs, idp, &id_targets, sim)?);
            terms.con = Some(centroid_consistency_loss(&mut g, f, fs, &views.ids)?);
        }
        let mut dis_var: Option<Var> = None;
        if cfg.use_cfm {
            let fc_new = project_clothes(g.value(fd), m.store.get(PROJ_C)?)?;
            let fc_new = g.constant(fc_new);
            let d = disentangle_loss(&mut g, f, fc_new)?;
            terms.dis = Some(d);
            dis_var = Some(d);
        }
        let total = stage2_total(&mut g, &terms, loss.lambda1, loss.lambda2)?;
        if let (Some(pr), Some(d)) = (probe.as_deref_mut(), dis_var) {
            let gd = g.backward(d)?;
            pr.dis_proj_grad = gd.param(PROJ_C).map_or(0.0, max_abs);
        }
        let grads = only_prefixed(
            g.backward(total.encoder_objective)?,
            &[RAW_ENCODER, SHIELD_ENCODER, "head_id/", "head_id_s/"],
        );
        state.optim.step(&mut state.model.store, &grads, lr)?;
        if let (Some(pr), Some(b), Some(mid)) = (probe, before, mid) {
            let after = group_checksums(&state.model);
            pr.changed_in_proj_step = changed(&b, &mid);
            pr.changed_in_encoder_step = changed(&mid, &after);
        }
        Ok(total.reports)
    }

    /// Build stage-2 inputs for one batch without augmentation.
    pub fn plain_views<T: Scalar>(&self, batch: &[usize]) -> Result<BatchViews<T>> {
        let samples = self.loader.get_many(self.manifest, batch)?;
        let raws: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
        let shields: Vec<Image> = samples.iter().map(|s| s.shielding()).collect();
        let (ids, clothes) = labels_of(self.manifest, batch);
        Ok(BatchViews {
            raw: images_to_tensor(&raws)?,
            shield: images_to_tensor(&shields)?,
            ids,
            clothes,
        })
    }

    /// Batches of the first stage-2 epoch, for probes and tests.
    pub fn first_stage2_batch(&self) -> Result<Vec<usize>> {
        Ok(self.sampler()?.epoch(self.stage_seed(2), 0).remove(0))
    }

    /// Load a finished stage-1 checkpoint as a fresh stage-2 state.
    pub fn stage2_from_checkpoint<T: Scalar>(&self, path: &Path) -> Result<TrainState<T>> {
        if !path.exists() {
            return Err(Error::Config(format!("stage-1 checkpoint {} not found", path.display())));
        }
        let (a, _) = Archive::load(path)?;
        let stage: u8 = a.meta_parse("stage")?;
        if stage != 1 {
            return Err(Error::Config(format!("{} is a stage-{stage} checkpoint, expected stage 1", path.display())));
        }
        let model = CcafModel::<T>::from_archive(&a)?;
        let c = model.config.feature_dim;
        if c != self.config.model.feature_dim {
            return Err(Error::Config(format!(
                "checkpoint feature dim {c} differs from configured {}",
                self.config.model.feature_dim
            )));
        }
        Ok(TrainState::stage2(model, self.config))
    }
}

/// Frozen prompt features used as constants throughout stage 2.
#[derive(Clone, Debug)]
pub struct Stage2Prompts<T> {
    pub identity: Tensor<T>,
    pub clothes: Tensor<T>,
}

impl<T: Scalar> Stage2Prompts<T> {
    pub fn new(model: &CcafModel<T>) -> Result<Self> {
        Ok(Self {
            identity: model.bank.all_features(&model.store, &model.text, PromptKind::Identity)?,
            clothes: model.bank.all_features(&model.store, &model.text, PromptKind::Clothes)?,
        })
    }
}

/// Network inputs and labels of one batch.
#[derive(Clone, Debug)]
pub struct BatchViews<T> {
    pub raw: Tensor<T>,
    pub shield: Tensor<T>,
    pub ids: Vec<usize>,
    pub clothes: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toybench::{generate, ToySpec};

    fn toy() -> (tempfile::TempDir, Config, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            identities: 4,
            images_per_outfit: 8,
            ..ToySpec::default()
        };
        let manifest = generate(&spec, &dir.path().join("data")).unwrap();
        let mut config = Config::default();
        config.data.image_height = 64;
        config.data.image_width = 32;
        config.model.feature_dim = 8;
        config.batch.p = 2;
        config.batch.k = 4;
        config.stage1.epochs = 2;
        config.stage2.epochs = 2;
        config.stage1.lr = 1e-2;
        config.stage2.lr = 1e-3;
        config.data.cache_masks = false;
        (dir, config, manifest)
    }

    #[test]
    fn zero_epochs_checkpoint_equals_init() {
        let (dir, mut config, manifest) = toy();
        config.stage1.epochs = 0;
        let t = Trainer::new(&config, &manifest, &dir.path().join("run"));
        let model = t.new_model::<f64>().unwrap();
        let init = model.store.clone();
        let mut st = TrainState::stage1(model, &config);
        let ck = t.run_stage1(&mut st, None).unwrap();
        let back: TrainState<f64> = resume(&ck, &config).unwrap();
        assert_eq!(back.model.store, init);
    }

    #[test]
    fn stage1_touches_only_prompts() {
        let (dir, config, manifest) = toy();
        let t = Trainer::new(&config, &manifest, &dir.path().join("run"));
        let mut st = TrainState::stage1(t.new_model::<f64>().unwrap(), &config);
        let before = group_checksums(&st.model);
        t.run_stage1(&mut st, None).unwrap();
        let after = group_checksums(&st.model);
        assert_eq!(changed(&before, &after), vec![PROMPT_BANK.to_string()]);
    }

    #[test]
    fn trainable_encoder_rejected_in_stage1() {
        let (dir, config, manifest) = toy();
        let t = Trainer::new(&config, &manifest, &dir.path().join("run"));
        let mut st = TrainState::stage1(t.new_model::<f64>().unwrap(), &config);
        st.model.raw.trainable = true;
        assert!(matches!(t.run_stage1(&mut st, None), Err(Error::Config(_))));
    }

    #[test]
    fn stage2_routing() {
        let (dir, config, manifest) = toy();
        let t = Trainer::new(&config, &manifest, &dir.path().join("run"));
        let mut st = TrainState::stage2(t.new_model::<f64>().unwrap(), &config);
        let prompts = Stage2Prompts::new(&st.model).unwrap();
        let views = t.plain_views(&t.first_stage2_batch().unwrap()).unwrap();
        let mut probe = RoutingProbe::default();
        t.stage2_step(&mut st, &prompts, &views, 1e-3, 1e-3, Some(&mut probe)).unwrap();
        assert_eq!(probe.proj_loss_params, vec![PROJ_C.to_string()]);
        assert_eq!(probe.proj_loss_encoder_grad, 0.0);
        assert_eq!(probe.dis_proj_grad, 0.0);
        assert_eq!(probe.changed_in_proj_step, vec![PROJ_C.to_string()]);
        assert!(!probe.changed_in_encoder_step.iter().any(|g| g == PROJ_C || g == PROMPT_BANK || g == TEXT_ENCODER));
        assert!(probe.changed_in_encoder_step.iter().any(|g| g == RAW_ENCODER));
    }

    #[test]
    fn sampled_denominator_step() {
        let (dir, mut config, manifest) = toy();
        config.loss.sampled_negatives = 1;
        let t = Trainer::new(&config, &manifest, &dir.path().join("run"));
        let mut st = TrainState::stage2(t.new_model::<f64>().unwrap(), &config);
        let prompts = Stage2Prompts::new(&st.model).unwrap();
        let views = t.plain_views(&t.first_stage2_batch().unwrap()).unwrap();
        let reports = t.stage2_step(&mut st, &prompts, &views, 1e-3, 1e-3, None).unwrap();
        assert!(reports.iter().any(|r| r.name == "i2tce" && r.value.is_finite()));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (dir, config, manifest) = toy();
        let straight = Trainer::new(&config, &manifest, &dir.path().join("a"));
        let mut s1 = TrainState::stage1(straight.new_model::<f64>().unwrap(), &config);
        let ck = straight.run_stage1(&mut s1, None).unwrap();
        let mut a = straight.stage2_from_checkpoint::<f64>(&ck.path).unwrap();
        straight.run_stage2(&mut a, None).unwrap();

        let split = Trainer::new(&config, &manifest, &dir.path().join("b"));
        let mut b = split.stage2_from_checkpoint::<f64>(&ck.path).unwrap();
        let mid = split.run_stage2(&mut b, Some(1)).unwrap();
        assert_eq!(mid.epoch, 1);
        let mut b: TrainState<f64> = resume(&mid, &config).unwrap();
        split.run_stage2(&mut b, None).unwrap();

        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.optim, b.optim);
        let la = fs::read_to_string(metrics_path(&dir.path().join("a"), 2)).unwrap();
        let lb = fs::read_to_string(metrics_path(&dir.path().join("b"), 2)).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn tampered_hash_is_corruption() {
        let (dir, mut config, manifest) = toy();
        config.stage1.epochs = 0;
        let t = Trainer::new(&config, &manifest, &dir.path().join("run"));
        let mut st = TrainState::stage1(t.new_model::<f64>().unwrap(), &config);
        let mut ck = t.run_stage1(&mut st, None).unwrap();
        ck.hash = "0".repeat(64);
        assert!(matches!(resume::<f64>(&ck, &config), Err(Error::Corruption(_))));
    }

    #[test]
    fn mismatched_feature_dim_is_config_error() {
        let (dir, mut config, manifest) = toy();
        config.stage1.epochs = 0;
        let t = Trainer::new(&config, &manifest, &dir.path().join("run"));
        let mut st = TrainState::stage1(t.new_model::<f64>().unwrap(), &config);
        let ck = t.run_stage1(&mut st, None).unwrap();
        config.model.feature_dim = 16;
        assert!(matches!(resume::<f64>(&ck, &config), Err(Error::Config(_))));
    }
}
