//! Render a synthetic corpus, fit the patch codebook and check that tokens
//! survive a decode/encode round trip.
//!
//!     cargo run --example codebook [out_dir]

use focalgen::codebook::{decode, encode, fit_codebook, mse};
use focalgen::experiment::{base_constraints, categories};
use focalgen::layout::PatchGrid;
use focalgen::scenegen::{consistency_score, texture_swatches, Corpus};

fn main() -> focalgen::Result<()> {
    let cats = categories();
    let grid = PatchGrid::square(8);
    let corpus = Corpus::generate(0, 0, 128, &cats, &base_constraints(), grid, 4);
    let mut images = corpus.images.clone();
    images.extend(texture_swatches(&cats, 4));
    let cb = fit_codebook(&images, 64, 4, 7)?;
    println!("codebook: K={} patch={}px dim={}", cb.size(), cb.patch_px(), cb.dim());

    let mut err = 0.0;
    let mut score = 0.0;
    for (img, layout) in corpus.images.iter().zip(&corpus.layouts) {
        let t = encode(img, &cb)?;
        let back = decode(&t, &cb, grid)?;
        assert_eq!(encode(&back, &cb)?, t);
        err += mse(img, &back);
        score += consistency_score(&t, layout, &cb, &cats, grid)?;
    }
    let n = corpus.len() as f64;
    println!("mean reconstruction mse {:.3e}", err / n);
    println!("mean consistency of encoded renders {:.4}", score / n);

    let t = encode(&corpus.images[0], &cb)?;
    println!("scene 0 tokens:\n{}", t.to_grid_text(grid));

    if let Some(dir) = std::env::args().nth(1) {
        corpus.write_dir(std::path::Path::new(&dir), &cats, Some(&cb))?;
        cb.save(std::path::Path::new(&dir).join("codebook.fgcb"))?;
        println!("wrote dataset to {dir}");
    }
    Ok(())
}
