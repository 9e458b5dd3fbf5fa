//! Train a focal-attention model on the synthetic corpus, then sample from it.
//!
//!     cargo run --release --example train_sample [steps] [desk]
//!
//! Without `desk` a tiny model trains in seconds; with it the full desk preset
//! is used (about 0.1 s per step on one core).

use focalgen::connectivity::AttentionKind;
use focalgen::experiment::{self, ExperimentConfig, BASE_CATEGORIES};
use focalgen::model::ModelConfig;
use focalgen::sampler::sample_sequence;
use focalgen::scenegen::consistency_score;

fn main() -> focalgen::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let desk = args.iter().any(|a| a == "desk");

    let mut cfg = ExperimentConfig::desk();
    cfg.opt.steps = steps;
    if !desk {
        cfg.model = ModelConfig { vocab_size: 32, embed_dim: 32, n_heads: 4, ..ModelConfig::tiny(BASE_CATEGORIES) };
        cfg.model.grid = focalgen::layout::PatchGrid::square(8);
        cfg.opt.lr = 3e-3;
        cfg.opt.warmup_steps = steps / 10;
        cfg.n_train = 128;
        cfg.n_eval = 16;
    }
    let cats = experiment::categories();
    let prep = experiment::prepare(&cfg, &cats)?;
    let every = (steps / 10).max(1);
    let trained = experiment::train_attention(&cfg, &cats, &prep, AttentionKind::FOCAL, &mut |s, l| {
        if s % every == 0 {
            println!("step {s:>5} loss {l:.4}");
        }
    })?;
    println!("final loss {:.4}", trained.trace.last().unwrap());
    println!("greedy consistency on eval {:.4}", experiment::evaluate(&trained.params, &cfg, &cats, &prep, cfg.attention)?);

    let layout = &prep.eval.layouts[0];
    println!("\neval layout 0:\n{}", layout.to_text(&cats));
    let mask = AttentionKind::FOCAL.build(layout, cfg.model.grid, &cats)?;
    for seed in 0..3 {
        let t = sample_sequence(&trained.params, layout, &mask, &cfg.model, seed, 1.0)?;
        let score = consistency_score(&t, layout, &prep.codebook, &cats, cfg.model.grid)?;
        println!("seed {seed} (T=1) consistency {score:.3}\n{}", t.to_grid_text(cfg.model.grid));
    }
    Ok(())
}
