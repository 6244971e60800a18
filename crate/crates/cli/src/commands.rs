use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use ccaf::data::load_manifest;
use ccaf::evaluation::{distance_histogram_csv, protocol_applicable, split_indices, EvalReport, FeatureSet, StubEncoder};
use ccaf::pipeline::{query_gallery_features, score_sets, Scored};
use ccaf::scalar::Scalar;
use ccaf::toybench::{generate, plant_confound_check, ToySpec};
use ccaf::trainer::{inspect_checkpoint, metrics_path, resume, CheckpointRef, CHECKPOINT_DIR};
use ccaf::{archive::Archive, CcafModel, Config, DatasetManifest, Precision, Protocol, ProtocolRule, Split, TrainState, Trainer};

use crate::run_dir::{self, LoadedConfig, REPORTS};
use crate::{Failure, EXIT_NO_STAGE1, EXIT_PROTOCOL, EXIT_USAGE};

fn usage(msg: impl Into<String>) -> Failure {
    Failure::new(EXIT_USAGE, anyhow!(msg.into()))
}

fn load_dataset(config: &Config) -> Result<DatasetManifest, Failure> {
    let path = config.manifest_path();
    load_manifest(&path).with_context(|| format!("loading manifest {}", path.display())).map_err(Failure::from)
}

pub fn gen_toy(config: &Path, out: Option<PathBuf>, force: bool) -> Result<(), Failure> {
    let cfg = run_dir::load_config(config)?;
    let out = match out {
        Some(o) => o,
        None => cfg
            .config
            .manifest_path()
            .parent()
            .map(Path::to_path_buf)
            .ok_or_else(|| usage("cannot derive an output directory; pass --out"))?,
    };
    run_dir::claim(&out, &cfg, force, false)?;
    let manifest = generate(&ToySpec::from(&cfg.config.toy), &out)?;
    let report = plant_confound_check(&manifest)?;
    println!("manifest={}", out.join("manifest.tsv").display());
    println!("images={}", manifest.records.len());
    println!("train_identities={}", manifest.num_identities);
    println!("train_clothes={}", manifest.num_clothes);
    for line in report.to_lines() {
        println!("{line}");
    }
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub stage: Option<u8>,
    pub out: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<usize>,
    pub force: bool,
}

enum Start {
    Fresh1,
    Fresh2(PathBuf),
    Resume(CheckpointRef),
}

pub fn train(args: &TrainArgs) -> Result<(), Failure> {
    let cfg = run_dir::load_config(&args.config)?;
    let (start, out) = if let Some(path) = &args.resume {
        let ck = inspect_checkpoint(path)?;
        if args.stage.is_some_and(|s| s != ck.stage) {
            return Err(usage(format!("--stage {} given for a stage-{} checkpoint", args.stage.unwrap_or(0), ck.stage)));
        }
        let out = args
            .out
            .clone()
            .or_else(|| run_dir::run_dir_of(path))
            .ok_or_else(|| usage("cannot derive a run directory; pass --out"))?;
        (Start::Resume(ck), out)
    } else {
        let out = args.out.clone().ok_or_else(|| usage("--out is required"))?;
        match args.stage {
            Some(1) => (Start::Fresh1, out),
            Some(2) => {
                let init = args
                    .init
                    .clone()
                    .or_else(|| cfg.config.stage2.init_checkpoint.as_ref().map(|p| cfg.config.resolve(p)))
                    .or_else(|| {
                        let p = out.join(CHECKPOINT_DIR).join("stage1_final.ckpt");
                        p.exists().then_some(p)
                    })
                    .ok_or_else(|| {
                        Failure::new(
                            EXIT_NO_STAGE1,
                            anyhow!("stage 2 needs a stage-1 checkpoint: pass --init or set stage2.init_checkpoint"),
                        )
                    })?;
                let ok = inspect_checkpoint(&init).is_ok_and(|c| c.stage == 1);
                if !ok {
                    return Err(Failure::new(
                        EXIT_NO_STAGE1,
                        anyhow!("{} is not a readable stage-1 checkpoint", init.display()),
                    ));
                }
                (Start::Fresh2(init), out)
            }
            _ => return Err(usage("--stage 1 or --stage 2 is required")),
        }
    };
    let same_run_ok = !matches!(start, Start::Fresh1);
    run_dir::claim(&out, &cfg, args.force, same_run_ok)?;
    run_dir::initialise(&out, &cfg)?;
    let manifest = load_dataset(&cfg.config)?;
    let ck = match cfg.config.run.precision {
        Precision::F32 => train_as::<f32>(&cfg, &manifest, &out, start, args.stop_after)?,
        Precision::F64 => train_as::<f64>(&cfg, &manifest, &out, start, args.stop_after)?,
    };
    Ok(ck)
}

fn train_as<T: Scalar>(
    cfg: &LoadedConfig,
    manifest: &DatasetManifest,
    out: &Path,
    start: Start,
    stop_after: Option<usize>,
) -> Result<(), Failure> {
    let config = &cfg.config;
    let trainer = Trainer::new(config, manifest, out);
    let mut state: TrainState<T> = match start {
        Start::Fresh1 => TrainState::stage1(trainer.new_model()?, config),
        Start::Fresh2(init) => trainer.stage2_from_checkpoint(&init)?,
        Start::Resume(ck) => resume(&ck, config)?,
    };
    let ck = match state.stage {
        1 => trainer.run_stage1(&mut state, stop_after)?,
        _ => trainer.run_stage2(&mut state, stop_after)?,
    };
    println!("stage={}", ck.stage);
    println!("epoch={}", ck.epoch);
    println!("steps={}", state.step);
    for (name, value) in last_metrics(&metrics_path(out, ck.stage))? {
        println!("{name}={value}");
    }
    for group in ["raw_encoder", "shield_encoder", "text_encoder", "prompt_bank", "proj_c"] {
        println!("checksum_{group}={}", state.model.checksum(group));
    }
    println!("checkpoint_sha256={}", ck.hash);
    println!("checkpoint={}", ck.path.display());
    Ok(())
}

/// Values logged at the final step of a metrics file.
fn last_metrics(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let rows: Vec<(&str, &str, &str)> = text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let mut it = l.splitn(3, ',');
            Some((it.next()?, it.next()?, it.next()?))
        })
        .collect();
    let Some(last) = rows.last().map(|r| r.0) else {
        return Ok(Vec::new());
    };
    Ok(rows
        .iter()
        .filter(|r| r.0 == last)
        .map(|r| (format!("final_{}", r.1), r.2.to_string()))
        .collect())
}

fn checkpoint_features<T: Scalar>(archive: &Archive, config: &Config, manifest: &DatasetManifest) -> Result<(FeatureSet, FeatureSet), Failure> {
    let model = CcafModel::<T>::from_archive(archive).context("checkpoint lacks usable raw-encoder weights")?;
    let loader = ccaf::pipeline::loader_for(config);
    Ok(query_gallery_features(&model, manifest, &loader, config.eval.batch_size)?)
}

pub fn eval(
    config: &Path,
    ckpt: Option<PathBuf>,
    protocol: Option<Protocol>,
    stub: Option<StubEncoder>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = run_dir::load_config(config)?;
    let config = &cfg.config;
    let protocol = match protocol {
        Some(p) => p,
        None => config.eval.protocol.parse().map_err(|e: ccaf::Error| usage(e.to_string()))?,
    };
    let out = out
        .or_else(|| ckpt.as_deref().and_then(run_dir::run_dir_of))
        .ok_or_else(|| usage("--out is required"))?;
    let manifest = load_dataset(config)?;
    let (query, gallery) = match (&ckpt, stub) {
        (_, Some(stub)) => {
            let dim = config.model.feature_dim;
            (
                stub.features(&manifest, &split_indices(&manifest, Split::Query), dim),
                stub.features(&manifest, &split_indices(&manifest, Split::Gallery), dim),
            )
        }
        (Some(path), None) => {
            let (archive, _) = Archive::load(path)?;
            match config.run.precision {
                Precision::F32 => checkpoint_features::<f32>(&archive, config, &manifest)?,
                Precision::F64 => checkpoint_features::<f64>(&archive, config, &manifest)?,
            }
        }
        (None, None) => return Err(usage("either --ckpt or --stub is required")),
    };
    let rule = ProtocolRule {
        protocol,
        multi_shot: config.eval.multi_shot,
    };
    if query.meta.is_empty() || gallery.meta.is_empty() || !protocol_applicable(&query.meta, &gallery.meta, rule) {
        return Err(Failure::new(
            EXIT_PROTOCOL,
            anyhow!("protocol {protocol} has no query with a valid gallery positive on this dataset"),
        ));
    }
    let Scored { result, relations } = score_sets(&query, &gallery, rule)?;
    if !out.join(run_dir::CONFIG_SNAPSHOT).exists() {
        run_dir::initialise(&out, &cfg)?;
    }
    let reports = out.join(REPORTS);
    fs::create_dir_all(&reports).with_context(|| format!("cannot create {}", reports.display()))?;
    let report = EvalReport::from(&result);
    let report_path = reports.join(format!("eval_{protocol}.txt"));
    report.write(&report_path)?;
    let hist_path = reports.join(format!("distances_{protocol}.csv"));
    fs::write(&hist_path, distance_histogram_csv(&result, &relations, config.eval.histogram_bins))
        .with_context(|| format!("cannot write {}", hist_path.display()))?;
    for line in report.to_lines() {
        println!("{line}");
    }
    let (chance, sd) = result.chance_rank1();
    println!("chance_rank1={chance:.4}");
    println!("chance_rank1_sd={sd:.4}");
    println!("report={}", report_path.display());
    Ok(())
}
