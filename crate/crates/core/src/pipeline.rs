//! End-to-end glue: train both stages and score a model on a manifest.

use std::path::Path;

use crate::config::Config;
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{extract_features, score_relations, split_indices, cosine_distances, FeatureSet, Protocol, ProtocolRule, Relation, RetrievalResult};
use crate::loader::SampleLoader;
use crate::model::CcafModel;
use crate::scalar::Scalar;
use crate::trainer::{CheckpointRef, TrainState, Trainer};

/// Which stage-2 components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub use_i2t: bool,
    pub use_i2i: bool,
    pub use_cfm: bool,
}

pub const BASELINE: Variant = Variant {
    name: "baseline",
    use_i2t: false,
    use_i2i: false,
    use_cfm: false,
};

pub const FULL: Variant = Variant {
    name: "full",
    use_i2t: true,
    use_i2i: true,
    use_cfm: true,
};

/// Baseline, full model, and the full model minus each component.
pub const ABLATION: [Variant; 5] = [
    BASELINE,
    FULL,
    Variant {
        name: "no_i2t",
        use_i2t: false,
        ..FULL
    },
    Variant {
        name: "no_i2i",
        use_i2i: false,
        ..FULL
    },
    Variant {
        name: "no_cfm",
        use_cfm: false,
        ..FULL
    },
];

impl Variant {
    pub fn apply(&self, config: &mut Config) {
        config.stage2.use_i2t = self.use_i2t;
        config.stage2.use_i2i = self.use_i2i;
        config.stage2.use_cfm = self.use_cfm;
    }
}

pub fn loader_for(config: &Config) -> SampleLoader {
    let ext = config.data.cache_masks.then(|| config.data.mask_ext.clone());
    SampleLoader::new(config.image_size(), config.clothes_labels(), ext)
}

/// Query and gallery features from the raw encoder.
pub fn query_gallery_features<T: Scalar>(
    model: &CcafModel<T>,
    manifest: &DatasetManifest,
    loader: &SampleLoader,
    batch_size: usize,
) -> Result<(FeatureSet, FeatureSet)> {
    let q = extract_features(&model.raw, &model.store, manifest, &split_indices(manifest, Split::Query), loader, batch_size)?;
    let g = extract_features(&model.raw, &model.store, manifest, &split_indices(manifest, Split::Gallery), loader, batch_size)?;
    Ok((q, g))
}

/// A scored protocol together with the relation masks behind it.
pub struct Scored {
    pub result: RetrievalResult,
    pub relations: Vec<Vec<Relation>>,
}

pub fn score_sets(query: &FeatureSet, gallery: &FeatureSet, rule: ProtocolRule) -> Result<Scored> {
    if query.meta.is_empty() || gallery.meta.is_empty() {
        return Err(Error::Evaluation("query or gallery split is empty".into()));
    }
    let relations: Vec<Vec<Relation>> = query.meta.iter().map(|q| rule.relations(q, &gallery.meta)).collect();
    let distances = cosine_distances(&query.features, &gallery.features)?;
    let result = score_relations(rule.protocol, distances, &relations)?;
    Ok(Scored { result, relations })
}

pub fn evaluate_model<T: Scalar>(
    model: &CcafModel<T>,
    config: &Config,
    manifest: &DatasetManifest,
    loader: &SampleLoader,
    protocol: Protocol,
) -> Result<Scored> {
    let (q, g) = query_gallery_features(model, manifest, loader, config.eval.batch_size)?;
    let rule = ProtocolRule {
        protocol,
        multi_shot: config.eval.multi_shot,
    };
    score_sets(&q, &g, rule)
}

/// Run stage 1 from scratch into `run_dir`.
pub fn train_stage1<T: Scalar>(config: &Config, manifest: &DatasetManifest, run_dir: &Path) -> Result<(TrainState<T>, CheckpointRef)> {
    let trainer = Trainer::new(config, manifest, run_dir);
    let mut state = TrainState::stage1(trainer.new_model()?, config);
    let ck = trainer.run_stage1(&mut state, None)?;
    Ok((state, ck))
}

/// Run stage 2 from a stage-1 checkpoint into `run_dir`.
pub fn train_stage2<T: Scalar>(
    config: &Config,
    manifest: &DatasetManifest,
    stage1: &Path,
    run_dir: &Path,
) -> Result<(TrainState<T>, CheckpointRef)> {
    let trainer = Trainer::new(config, manifest, run_dir);
    let mut state = trainer.stage2_from_checkpoint(stage1)?;
    let ck = trainer.run_stage2(&mut state, None)?;
    Ok((state, ck))
}
