//! Train every ablation variant on the toy benchmark and print the
//! cloth-changing Rank-1/mAP, averaged over seed-paired runs.
//!
//! `SEEDS=1,2,3 cargo run --release -p ccaf --example ablation -- configs/toy.toml /tmp/abl`

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use ccaf::config::Config;
use ccaf::evaluation::Protocol;
use ccaf::pipeline::{evaluate_model, loader_for, train_stage1, train_stage2, ABLATION};
use ccaf::toybench::{generate, ToySpec};

fn main() -> ccaf::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let base = Config::load(&PathBuf::from(&args[1]))?;
    let out = PathBuf::from(&args[2]);
    let seeds: Vec<u64> = std::env::var("SEEDS")
        .unwrap_or_else(|_| base.run.seed.to_string())
        .split(',')
        .map(|s| s.trim().parse().expect("seed"))
        .collect();
    let only: Option<Vec<String>> = std::env::var("ONLY").ok().map(|s| s.split(',').map(str::to_string).collect());
    let variants: Vec<_> = ABLATION
        .into_iter()
        .filter(|v| only.as_ref().is_none_or(|o| o.iter().any(|n| n == v.name)))
        .collect();
    let t0 = Instant::now();
    let manifest = generate(&ToySpec::from(&base.toy), &out.join("data"))?;
    let mut sums: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for &seed in &seeds {
        let mut config = base.clone();
        config.run.seed = seed;
        let dir = out.join(format!("seed{seed}"));
        let (_, ck) = train_stage1::<f32>(&config, &manifest, &dir.join("stage1"))?;
        let mut line = format!("seed {seed:>3}:");
        for &v in &variants {
            let mut c = config.clone();
            v.apply(&mut c);
            let (state, _) = train_stage2::<f32>(&c, &manifest, &ck.path, &dir.join(v.name))?;
            let loader = loader_for(&c);
            let cc = evaluate_model(&state.model, &c, &manifest, &loader, Protocol::ClothChanging)?;
            let e = sums.entry(v.name).or_default();
            e.0 += cc.result.rank(1);
            e.1 += cc.result.map;
            line.push_str(&format!(" {}={:.3}", v.name, cc.result.rank(1)));
        }
        println!("{line}");
    }
    let n = seeds.len() as f64;
    for v in &variants {
        let (r1, map) = sums[v.name];
        println!("{:<9} rank1={:.3} mAP={:.3}", v.name, r1 / n, map / n);
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
