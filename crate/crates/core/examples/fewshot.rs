//! Teach a trained base model a category it has never seen from a couple of
//! example scenes, without changing anything it already does.
//!
//!     cargo run --release --example fewshot [base_steps] [shots]

use focalgen::experiment::{self, ExperimentConfig, FewShotConfig, BASE_CATEGORIES};
use focalgen::layout::PatchGrid;
use focalgen::model::ModelConfig;

fn main() -> focalgen::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let shots = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);

    let mut cfg = ExperimentConfig::desk();
    cfg.model = ModelConfig { embed_dim: 32, n_heads: 4, vocab_size: 64, grid: PatchGrid::square(8), ..ModelConfig::tiny(BASE_CATEGORIES) };
    cfg.opt.steps = steps;
    cfg.opt.lr = 3e-3;
    cfg.opt.warmup_steps = steps / 10;
    cfg.n_train = 256;
    cfg.n_eval = 16;
    let cats = experiment::categories();
    let prep = experiment::prepare(&cfg, &cats)?;
    let base = experiment::train_attention(&cfg, &cats, &prep, cfg.attention, &mut |_, _| {})?.params;
    println!("base model trained for {steps} steps on categories 0..{BASE_CATEGORIES}");

    let fs = FewShotConfig { shots, n_eval: 16, ..FewShotConfig::default() };
    let report = experiment::run_fewshot(&base, &cfg, &fs, &cats, &prep)?;
    println!("novel '{}' from superclass '{}' with {shots} shots", fs.novel, fs.superclass);
    println!("novel consistency before {:.3} after {:.3}", report.novel_before, report.novel_after);
    println!("fine-tune loss {:.4} -> {:.4}", report.trace[0], report.trace.last().unwrap());
    println!("base parameter hash unchanged: {}", report.base_hash_before == report.base_hash_after);
    println!(
        "base outputs identical on novel-free scenes: {}",
        experiment::base_outputs_match(&base, &report.model, &cfg, &cats, &prep)?
    );
    Ok(())
}
