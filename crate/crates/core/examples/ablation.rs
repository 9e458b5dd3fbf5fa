//! Train the same model under different attention masks and compare how well
//! generated patches match the layout.
//!
//!     cargo run --release --example ablation [steps] [variant,...]
//!
//! Defaults to causal versus focal on the desk preset. 2000 steps per
//! variant take a few minutes each.

use focalgen::connectivity::AttentionKind;
use focalgen::experiment::{self, ExperimentConfig};

fn main() -> focalgen::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let variants: Vec<AttentionKind> = match args.get(2) {
        Some(list) => list.split(',').map(str::parse).collect::<focalgen::Result<_>>()?,
        None => vec![AttentionKind::Causal, AttentionKind::FOCAL],
    };
    let mut cfg = ExperimentConfig::desk();
    cfg.opt.steps = steps;
    cfg.opt.warmup_steps = cfg.opt.warmup_steps.min(steps / 5);
    let cats = experiment::categories();
    let prep = experiment::prepare(&cfg, &cats)?;
    for v in variants {
        let start = std::time::Instant::now();
        let t = experiment::train_attention(&cfg, &cats, &prep, v, &mut |_, _| {})?;
        let score = experiment::evaluate(&t.params, &cfg, &cats, &prep, v)?;
        println!(
            "{v:<16} final_loss={:.4} consistency={score:.4} ({:.0}s)",
            t.trace.last().unwrap(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
