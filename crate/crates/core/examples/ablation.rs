//! Runs the full pipeline and its ablations over several seeds on synthetic
//! data and prints Tail/Head/Overall macro accuracy on the balanced test set.
//!
//! cargo run --release -p progtune-core --example ablation -- [seeds] [config.toml]

use std::time::Instant;

use progtune_core::eval::Protocol;
use progtune_core::pipeline::{run_pipeline, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let base = match args.get(2) {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let variants: Vec<(&str, Box<dyn Fn(&mut PipelineConfig)>)> = vec![
        ("full", Box::new(|_| {})),
        ("all-data sft", Box::new(|c| {
            c.skip_stage_a = true;
            c.skip_stage_b = true;
            c.epsilon = 0.0;
        })),
        ("random select", Box::new(|c| c.strategy = "random".into())),
        ("topk select", Box::new(|c| c.strategy = "topk".into())),
        ("b-loss sft", Box::new(|c| c.b_loss = progtune_core::model::LossKind::Sft)),
        ("skip stage a", Box::new(|c| c.skip_stage_a = true)),
    ];
    let only: Option<Vec<String>> = std::env::var("VARIANTS").ok().map(|v| v.split(',').map(str::to_owned).collect());
    println!("{:<14} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}", "variant", "seed", "ref.tail", "tail", "head", "ref.head", "overall");
    for seed in 0..seeds {
        for (name, apply) in &variants {
            if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == name)) {
                continue;
            }
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.synthetic.rng_seed = seed;
            apply(&mut cfg);
            let t = Instant::now();
            let out = run_pipeline(&cfg, None)?;
            if std::env::var_os("TRACE").is_some() {
                for stage in [Some(&out.manifest.stage_a), out.manifest.stage_b.as_ref()].into_iter().flatten() {
                    for t in &stage.trace {
                        eprintln!("  epoch {} loss {:.4} val {:?}", t.epoch, t.mean_loss, t.validation);
                    }
                    eprintln!("  --");
                }
            }
            let r = out.manifest.reference_metrics.get(Protocol::Balanced);
            let p = out.manifest.policy_metrics.get(Protocol::Balanced);
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "{:<14} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}  ({:.1}s)",
                name,
                seed,
                f(r.tail),
                f(p.tail),
                f(p.head),
                f(r.head),
                f(p.overall),
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
