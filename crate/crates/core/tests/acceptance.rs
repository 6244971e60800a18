//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! `ACCEPTANCE_ONLY=ablation,masking` restricts the run to some criteria.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccaf::data::{load_sample, DatasetManifest, Image, Split};
use ccaf::evaluation::{score_relations, Protocol, Relation};
use ccaf::graph::{Graph, Var};
use ccaf::losses::{
    centroid_consistency_loss, ce_loss, disentangle_loss, i2tce_loss, prompt_contrastive_loss, stage1_total,
    stage2_total, triplet_loss, Direction, SimilarityConfig, Stage1Terms, Stage2Terms,
};
use ccaf::masking::{build_clothes_mask, make_clothes_image, make_shielding_image, BinaryMask};
use ccaf::model::{PromptKind, PROMPT_BANK, PROJ_C, RAW_ENCODER, SHIELD_ENCODER, TEXT_ENCODER};
use ccaf::pipeline::{evaluate_model, loader_for, train_stage1, train_stage2, ABLATION};
use ccaf::toybench::{generate, ToySpec};
use ccaf::trainer::{metrics_path, resume, RoutingProbe, Stage2Prompts, TrainState, Trainer};
use ccaf::{Config, Tensor};

// Tolerances and budgets.
const FD_EPS: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-4;
const FD_INSTANCES: u64 = 20;
const FD_C: usize = 8;
const FD_NB: usize = 8;
const MASK_PAIRS: u64 = 1000;
const ORACLE_GALLERIES: u64 = 200;
const ORACLE_MAX_GALLERY: usize = 12;
const ORACLE_TOL: f64 = 1e-9;
const ABLATION_SEEDS: [u64; 6] = [1, 2, 3, 4, 5, 6];
const ABLATION_GAIN: f64 = 0.10;
const ABLATION_SLACK: f64 = 0.02;
const STAGE1_ACCURACY: f64 = 0.90;
const ROUTING_STAGE1_EPOCHS: usize = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config() -> Config {
    Config::load(&workspace().join("configs/toy.toml")).expect("configs/toy.toml")
}

fn toy_data(config: &Config, dir: &Path) -> DatasetManifest {
    generate(&ToySpec::from(&config.toy), dir).expect("toy generation")
}

/// A few-epoch variant of the toy config for runs that only test plumbing.
fn quick_config() -> Config {
    let mut c = toy_config();
    c.stage1.epochs = 3;
    c.stage2.epochs = 2;
    c
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

type Builder = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Worst relative error between analytic and central-difference gradients
/// over the inputs listed in `checked`.
fn fd_check(inputs: &[Tensor<f64>], checked: &[usize], build: &Builder) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for &k in checked {
        let analytic: Vec<f64> = grads
            .wrt(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let numeric: Vec<f64> = (0..inputs[k].numel())
            .map(|i| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += FD_EPS;
                let up = eval(&xs);
                xs[k].data_mut()[i] -= 2.0 * FD_EPS;
                let down = eval(&xs);
                (up - down) / (2.0 * FD_EPS)
            })
            .collect();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let sim = SimilarityConfig::default();
    let pk: Vec<usize> = (0..FD_NB).map(|i| i / 2).collect();
    let ids = FD_NB / 2;
    let m = 0.3;
    type Case = (&'static str, Vec<Vec<usize>>, Vec<usize>, Box<Builder>);
    let cases: Vec<Case> = vec![
        (
            "ce",
            vec![vec![FD_NB, FD_C]],
            vec![0],
            Box::new(move |g, v| ce_loss(g, v[0], &(0..FD_NB).map(|i| (i * 5) % FD_C).collect::<Vec<_>>()).unwrap()),
        ),
        (
            "triplet",
            vec![vec![FD_NB, FD_C]],
            vec![0],
            Box::new({
                let pk = pk.clone();
                move |g, v| triplet_loss(g, v[0], &pk, m).unwrap()
            }),
        ),
        (
            "i2t",
            vec![vec![FD_NB, FD_C], vec![ids, FD_C]],
            vec![0, 1],
            Box::new({
                let pk = pk.clone();
                move |g, v| {
                    let p = g.gather_rows(v[1], &pk).unwrap();
                    prompt_contrastive_loss(g, v[0], p, &pk, Direction::ImageToText, sim).unwrap()
                }
            }),
        ),
        (
            "t2i",
            vec![vec![FD_NB, FD_C], vec![ids, FD_C]],
            vec![0, 1],
            Box::new({
                let pk = pk.clone();
                move |g, v| {
                    let p = g.gather_rows(v[1], &pk).unwrap();
                    prompt_contrastive_loss(g, v[0], p, &pk, Direction::TextToImage, sim).unwrap()
                }
            }),
        ),
        (
            "i2tce",
            vec![vec![FD_NB, FD_C], vec![FD_C, FD_C]],
            vec![0, 1],
            Box::new({
                let pk = pk.clone();
                move |g, v| i2tce_loss(g, v[0], v[1], &pk, sim).unwrap()
            }),
        ),
        (
            "con",
            vec![vec![FD_NB, FD_C], vec![FD_NB, FD_C]],
            vec![0, 1],
            Box::new({
                let pk = pk.clone();
                move |g, v| centroid_consistency_loss(g, v[0], v[1], &pk).unwrap()
            }),
        ),
        (
            "dis",
            vec![vec![FD_NB, FD_C], vec![FD_NB, FD_C]],
            vec![0],
            Box::new(|g, v| disentangle_loss(g, v[0], v[1]).unwrap()),
        ),
        (
            "stage1_total",
            vec![vec![FD_NB, FD_C], vec![ids, FD_C], vec![FD_NB, FD_C], vec![ids, FD_C]],
            vec![0, 1, 2, 3],
            Box::new({
                let pk = pk.clone();
                move |g, v| {
                    let p = g.gather_rows(v[1], &pk).unwrap();
                    let pc = g.gather_rows(v[3], &pk).unwrap();
                    let t = Stage1Terms {
                        i2t: prompt_contrastive_loss(g, v[0], p, &pk, Direction::ImageToText, sim).unwrap(),
                        t2i: prompt_contrastive_loss(g, v[0], p, &pk, Direction::TextToImage, sim).unwrap(),
                        i2t_c: prompt_contrastive_loss(g, v[2], pc, &pk, Direction::ImageToText, sim).unwrap(),
                        t2i_c: prompt_contrastive_loss(g, v[2], pc, &pk, Direction::TextToImage, sim).unwrap(),
                    };
                    stage1_total(g, &t).unwrap().0
                }
            }),
        ),
        (
            "stage2_total",
            vec![
                vec![FD_NB, FD_C],
                vec![FD_NB, FD_C],
                vec![FD_NB, ids],
                vec![FD_NB, ids],
                vec![ids, FD_C],
                vec![FD_NB, FD_C],
            ],
            vec![0, 1, 2, 3, 4],
            Box::new({
                let pk = pk.clone();
                move |g, v| {
                    let (f, fs, logits, logits_s, prompts, fc) = (v[0], v[1], v[2], v[3], v[4], v[5]);
                    let ce = ce_loss(g, logits, &pk).unwrap();
                    let tri = triplet_loss(g, f, &pk, m).unwrap();
                    let id = g.add(ce, tri).unwrap();
                    let t = Stage2Terms {
                        id: Some(id),
                        i2tce: Some(i2tce_loss(g, f, prompts, &pk, sim).unwrap()),
                        id_s: Some(ce_loss(g, logits_s, &pk).unwrap()),
                        i2tce_s: Some(i2tce_loss(g, fs, prompts, &pk, sim).unwrap()),
                        con: Some(centroid_consistency_loss(g, f, fs, &pk).unwrap()),
                        dis: Some(disentangle_loss(g, f, fc).unwrap()),
                        i2tce_c: Some(0.5),
                    };
                    stage2_total(g, &t, 0.1, 1.0).unwrap().encoder_objective
                }
            }),
        ),
    ];
    let mut worst = Vec::new();
    let mut pass = true;
    for (name, shapes, checked, build) in &cases {
        let mut w: f64 = 0.0;
        for inst in 0..FD_INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * inst + name.len() as u64);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s.clone(), 1.0, &mut rng)).collect();
            w = w.max(fd_check(&inputs, checked, build.as_ref()));
        }
        pass &= w <= FD_REL_TOL;
        worst.push(format!("{name}={w:.1e}"));
    }
    outcome(pass, format!("max rel err (tol {FD_REL_TOL:e}): {}", worst.join(" ")))
}

fn gradient_routing() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config();
    config.stage1.epochs = ROUTING_STAGE1_EPOCHS;
    let manifest = toy_data(&config, &dir.path().join("data"));
    let trainer = Trainer::new(&config, &manifest, &dir.path().join("run"));

    let mut s1 = TrainState::stage1(trainer.new_model::<f64>().unwrap(), &config);
    let frozen = [RAW_ENCODER, SHIELD_ENCODER, TEXT_ENCODER, PROJ_C, "head_id/", "head_id_s/"];
    let before: Vec<String> = frozen.iter().map(|g| s1.model.checksum(g)).collect();
    let bank_before = s1.model.checksum(PROMPT_BANK);
    let ck = trainer.run_stage1(&mut s1, None).unwrap();
    let after: Vec<String> = frozen.iter().map(|g| s1.model.checksum(g)).collect();
    let stage1_ok = before == after && bank_before != s1.model.checksum(PROMPT_BANK) && s1.epoch == ROUTING_STAGE1_EPOCHS;

    let mut s2 = trainer.stage2_from_checkpoint::<f64>(&ck.path).unwrap();
    let prompts = Stage2Prompts::new(&s2.model).unwrap();
    let views = trainer.plain_views(&trainer.first_stage2_batch().unwrap()).unwrap();
    let mut probe = RoutingProbe::default();
    trainer
        .stage2_step(&mut s2, &prompts, &views, config.stage2.lr, config.stage2.lr, Some(&mut probe))
        .unwrap();
    let pass = stage1_ok
        && probe.proj_loss_encoder_grad == 0.0
        && probe.dis_proj_grad == 0.0
        && probe.proj_loss_params == vec![PROJ_C.to_string()];
    outcome(
        pass,
        format!(
            "|dL_c/dE|max={:e} |dL_dis/dP|max={:e} L_c reaches {:?}; stage-1 frozen groups unchanged over {ROUTING_STAGE1_EPOCHS} epochs: {stage1_ok}",
            probe.proj_loss_encoder_grad, probe.dis_proj_grad, probe.proj_loss_params
        ),
    )
}

/// `mask*xs + (1-mask)*xc == x` per channel, in integers.
fn complementary(x: &Image, mask: &BinaryMask) -> bool {
    let xs = make_shielding_image(x, mask).unwrap();
    let xc = make_clothes_image(x, mask).unwrap();
    (0..x.data.len()).all(|i| {
        let m = u32::from(mask.values[i / 3]);
        m * u32::from(xs.data[i]) + (1 - m) * u32::from(xc.data[i]) == u32::from(x.data[i])
    })
}

fn masking_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut random_ok = 0;
    for _ in 0..MASK_PAIRS {
        let (h, w) = (rng.random_range(1..=48), rng.random_range(1..=32));
        let data: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
        let p: f64 = rng.random();
        let mask: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(p))).collect();
        let x = Image::new(h, w, data).unwrap();
        let mask = BinaryMask::new(h, w, mask).unwrap();
        random_ok += usize::from(complementary(&x, &mask));
    }
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config();
    let manifest = toy_data(&config, dir.path());
    let labels: BTreeSet<u8> = config.clothes_labels();
    let mut toy_ok = 0;
    let mut with_clothes = 0;
    for s in &manifest.records {
        let (img, parsing) = load_sample(&manifest, s, (config.toy.height, config.toy.width)).unwrap();
        let mask = build_clothes_mask(&parsing, &labels);
        with_clothes += usize::from(mask.clothes_pixels() > 0);
        toy_ok += usize::from(complementary(&img, &mask));
    }
    let n = manifest.records.len();
    outcome(
        random_ok == MASK_PAIRS as usize && toy_ok == n && with_clothes == n,
        format!("random pairs {random_ok}/{MASK_PAIRS}, toy pairs {toy_ok}/{n} (with clothes pixels: {with_clothes})"),
    )
}

/// Definitional CMC and mAP: drop junk, sort by (distance, index).
fn oracle(d: &[Vec<f64>], rel: &[Vec<Relation>], ng: usize) -> Option<(Vec<f64>, f64)> {
    let mut cmc = vec![0.0; ng];
    let mut ap_sum = 0.0;
    let mut n = 0.0;
    for (row, r) in d.iter().zip(rel) {
        let mut valid: Vec<usize> = (0..ng).filter(|&j| r[j] != Relation::Junk).collect();
        valid.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let hits: Vec<usize> = valid
            .iter()
            .enumerate()
            .filter(|(_, &j)| r[j] == Relation::Positive)
            .map(|(pos, _)| pos)
            .collect();
        if hits.is_empty() {
            continue;
        }
        n += 1.0;
        for (k, c) in cmc.iter_mut().enumerate() {
            if hits[0] <= k {
                *c += 1.0;
            }
        }
        ap_sum += hits.iter().enumerate().map(|(i, &pos)| (i + 1) as f64 / (pos + 1) as f64).sum::<f64>() / hits.len() as f64;
    }
    if n == 0.0 {
        return None;
    }
    Some((cmc.into_iter().map(|c| c / n).collect(), ap_sum / n))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    let mut agree = 0;
    let mut empty = 0;
    for _ in 0..ORACLE_GALLERIES {
        let ng = rng.random_range(1..=ORACLE_MAX_GALLERY);
        let nq = rng.random_range(1..=4);
        // Coarse distances so ties are common.
        let d: Vec<Vec<f64>> = (0..nq)
            .map(|_| (0..ng).map(|_| f64::from(rng.random_range(0..8u8)) / 4.0).collect())
            .collect();
        let rel: Vec<Vec<Relation>> = (0..nq)
            .map(|_| {
                (0..ng)
                    .map(|_| match rng.random_range(0..10) {
                        0..=2 => Relation::Positive,
                        3..=4 => Relation::Junk,
                        _ => Relation::Negative,
                    })
                    .collect()
            })
            .collect();
        let t = Tensor::new([nq, ng], d.iter().flatten().copied().collect()).unwrap();
        let got = score_relations(Protocol::General, t, &rel);
        match (oracle(&d, &rel, ng), got) {
            (None, Err(_)) => {
                agree += 1;
                empty += 1;
            }
            (Some((cmc, map)), Ok(r)) => {
                let e = cmc
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (c - r.rank(k + 1)).abs())
                    .fold((map - r.map).abs(), f64::max);
                worst = worst.max(e);
                agree += usize::from(e <= ORACLE_TOL && r.cmc.len() == ng);
            }
            _ => {}
        }
    }
    outcome(
        agree == ORACLE_GALLERIES as usize,
        format!("{agree}/{ORACLE_GALLERIES} galleries agree ({empty} with no valid query), max |diff| {worst:.1e} (tol {ORACLE_TOL:e})"),
    )
}

fn ablation_trend() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = toy_config();
    let manifest = toy_data(&base, &dir.path().join("data"));
    let mut sums = vec![0.0; ABLATION.len()];
    let mut per_seed = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let mut config = base.clone();
        config.run.seed = seed;
        let run = dir.path().join(format!("seed{seed}"));
        let (_, ck) = train_stage1::<f32>(&config, &manifest, &run.join("stage1")).unwrap();
        let mut line = Vec::new();
        for (i, v) in ABLATION.iter().enumerate() {
            let mut c = config.clone();
            v.apply(&mut c);
            let (state, _) = train_stage2::<f32>(&c, &manifest, &ck.path, &run.join(v.name)).unwrap();
            let r1 = evaluate_model(&state.model, &c, &manifest, &loader_for(&c), Protocol::ClothChanging)
                .unwrap()
                .result
                .rank(1);
            sums[i] += r1;
            line.push(format!("{}={r1:.2}", v.name));
        }
        per_seed.push(format!("seed {seed}: {}", line.join(" ")));
    }
    let n = ABLATION_SEEDS.len() as f64;
    let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let find = |name: &str| mean[ABLATION.iter().position(|v| v.name == name).unwrap()];
    let full = find("full");
    let baseline = find("baseline");
    let gain_ok = full >= baseline + ABLATION_GAIN;
    let trend_ok = ABLATION
        .iter()
        .filter(|v| v.name.starts_with("no_"))
        .all(|v| full >= find(v.name) - ABLATION_SLACK);
    for l in &per_seed {
        println!("    {l}");
    }
    let summary: Vec<String> = ABLATION.iter().zip(&mean).map(|(v, m)| format!("{}={m:.3}", v.name)).collect();
    outcome(
        gain_ok && trend_ok,
        format!(
            "mean CC Rank-1 over {} seeds: {}; full-baseline {:+.3} (need >= {ABLATION_GAIN}), trend within {ABLATION_SLACK}: {trend_ok}",
            ABLATION_SEEDS.len(),
            summary.join(" "),
            full - baseline
        ),
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn stage1_discriminability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config();
    let manifest = toy_data(&config, &dir.path().join("data"));
    let (state, _) = train_stage1::<f64>(&config, &manifest, &dir.path().join("run")).unwrap();
    let trainer = Trainer::new(&config, &manifest, &dir.path().join("run"));
    let (shield, clothes) = trainer.stage1_features(&state.model).unwrap();
    let m = &state.model;
    let prompts = m.bank.all_features(&m.store, &m.text, PromptKind::Identity).unwrap();
    let (mut correct, mut n) = (0usize, 0usize);
    let (mut sim_s, mut sim_c) = (0.0, 0.0);
    for (i, s) in manifest.records.iter().enumerate() {
        if s.split != Split::Train {
            continue;
        }
        let sims: Vec<f64> = (0..prompts.rows()).map(|k| cosine(prompts.row(k), shield.row(i))).collect();
        let best = (0..sims.len()).max_by(|&a, &b| sims[a].total_cmp(&sims[b])).unwrap();
        correct += usize::from(best == s.identity);
        sim_s += sims[s.identity];
        sim_c += cosine(prompts.row(s.identity), clothes.row(i));
        n += 1;
    }
    let acc = correct as f64 / n as f64;
    let (sim_s, sim_c) = (sim_s / n as f64, sim_c / n as f64);
    outcome(
        acc >= STAGE1_ACCURACY && sim_c < sim_s,
        format!(
            "nearest-prompt accuracy {acc:.3} over {n} train images (need >= {STAGE1_ACCURACY}); mean cos(prompt, shielding) {sim_s:.3} vs cos(prompt, clothes) {sim_c:.3}"
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config();
    let manifest = toy_data(&config, &dir.path().join("data"));
    let logs = |run: &Path| -> (Vec<u8>, Vec<u8>) {
        (
            fs::read(metrics_path(run, 1)).unwrap(),
            fs::read(metrics_path(run, 2)).unwrap(),
        )
    };
    let full_run = |name: &str| {
        let run = dir.path().join(name);
        let (_, ck1) = train_stage1::<f32>(&config, &manifest, &run).unwrap();
        let (_, ck2) = train_stage2::<f32>(&config, &manifest, &ck1.path, &run).unwrap();
        (logs(&run), ck2.hash)
    };
    let (a, hash_a) = full_run("a");
    let (b, hash_b) = full_run("b");
    let identical = a == b && hash_a == hash_b;

    let run = dir.path().join("c");
    let t = Trainer::new(&config, &manifest, &run);
    let mut s1 = TrainState::<f32>::stage1(t.new_model().unwrap(), &config);
    let mid = t.run_stage1(&mut s1, Some(1)).unwrap();
    let mut s1: TrainState<f32> = resume(&mid, &config).unwrap();
    let ck1 = t.run_stage1(&mut s1, None).unwrap();
    let mut s2 = t.stage2_from_checkpoint::<f32>(&ck1.path).unwrap();
    let mid = t.run_stage2(&mut s2, Some(1)).unwrap();
    let mut s2: TrainState<f32> = resume(&mid, &config).unwrap();
    let ck2 = t.run_stage2(&mut s2, None).unwrap();
    let resumed = logs(&run) == a && ck2.hash == hash_a;
    outcome(
        identical && resumed,
        format!("seed-identical runs identical: {identical}; interrupted+resumed run identical: {resumed}"),
    )
}

type Criterion = (&'static str, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("gradients", "gradient correctness", Duration::from_secs(60), gradient_correctness),
        ("routing", "gradient routing", Duration::from_secs(120), gradient_routing),
        ("masking", "masking algebra", Duration::from_secs(60), masking_algebra),
        ("metrics", "metric oracle equivalence", Duration::from_secs(60), metric_oracle),
        ("ablation", "desk-scale ablation trend", Duration::from_secs(15 * 60), ablation_trend),
        ("stage1", "stage-1 prompt discriminability", Duration::from_secs(300), stage1_discriminability),
        ("determinism", "determinism and resume", Duration::from_secs(600), determinism),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(str::to_string).collect());
    let mut failed = 0;
    for (key, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|k| k == key)) {
            continue;
        }
        let t0 = Instant::now();
        let o = run();
        let took = t0.elapsed();
        let in_time = took <= budget;
        let pass = o.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{} {name}: {} [{:.1}s, budget {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
