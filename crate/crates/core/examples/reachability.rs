//! Perturb tokens a position cannot reach through the mask and watch its
//! logits stay bit-identical, then perturb one it can reach.
//!
//!     cargo run --example reachability

use focalgen::connectivity::{reachable_set, AttentionKind};
use focalgen::experiment::{base_constraints, categories, BASE_CATEGORIES};
use focalgen::model::{self, ModelConfig, ModelParams};
use focalgen::scenegen::gen_layout;

fn main() -> focalgen::Result<()> {
    let cats = categories();
    let cfg = ModelConfig::tiny(BASE_CATEGORIES);
    let params = ModelParams::init(&cfg, 1, 0.5);
    let layout = gen_layout(3, &cats, &base_constraints());
    let n = layout.len();
    let m = cfg.grid.len();
    let tokens: Vec<usize> = (0..m).map(|i| (i * 5) % cfg.vocab_size).collect();

    for kind in [AttentionKind::Causal, AttentionKind::Grid(2), AttentionKind::FOCAL] {
        let mask = kind.build(&layout, cfg.grid, &cats)?;
        let row = n + m - 1;
        let reach = reachable_set(&mask, cfg.n_layers, row);
        // Token s_k is fed at sequence position n + k + 1.
        let (inside, outside): (Vec<usize>, Vec<usize>) =
            (0..m - 1).partition(|&k| reach.contains(&(n + k + 1)));
        let base = model::forward(&params, &layout, &tokens, &mask, &cfg, None)?;
        let mut far = tokens.clone();
        for &k in &outside {
            far[k] = (far[k] + 1) % cfg.vocab_size;
        }
        let after = model::forward(&params, &layout, &far, &mask, &cfg, None)?;
        let same = base.row(row) == after.row(row);
        let changed = inside.last().map(|&k| {
            let mut near = tokens.clone();
            near[k] = (near[k] + 1) % cfg.vocab_size;
            let l = model::forward(&params, &layout, &near, &mask, &cfg, None).unwrap();
            l.row(row) != base.row(row)
        });
        println!(
            "{kind:<8} last patch reaches {:>2} earlier tokens; {:>2} unreachable perturbed -> identical={same}; reachable perturbed -> changed={changed:?}",
            inside.len(),
            outside.len()
        );
    }
    Ok(())
}
