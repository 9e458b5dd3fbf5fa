//! Build every attention variant for one layout and print the patch block.
//!
//!     cargo run --example masks [out.pgm]

use focalgen::connectivity::{reachable_set, AttentionKind};
use focalgen::layout::{assign_patch_owner, canonicalize, CategoryTable, Layout, Owner, PatchGrid};

const LAYOUT: &str = "\
sky   0.0 0.0 1.0 1.0
grass 0.0 0.6 1.0 1.0
dog   0.1 0.2 0.5 0.8
car   0.55 0.5 0.95 0.9
";

fn main() -> focalgen::Result<()> {
    let cats = CategoryTable::synthetic_default();
    let layout = canonicalize(&Layout::parse(LAYOUT, &cats)?);
    let grid = PatchGrid::square(6);

    println!("patch owners (. = stuff):");
    let owners = assign_patch_owner(&layout, grid, &cats);
    for r in 0..grid.rows {
        let row: String = (0..grid.cols)
            .map(|c| match owners[grid.index(r, c)] {
                Owner::Instance(k) => char::from_digit(k as u32, 10).unwrap_or('#'),
                Owner::Stuff => '.',
            })
            .collect();
        println!("  {row}");
    }

    let n = layout.len();
    for kind in AttentionKind::ablation_set() {
        let mask = kind.build(&layout, grid, &cats)?;
        // How much of the sequence the last patch can see after four layers.
        let reach = reachable_set(&mask, 4, mask.size() - 1).len();
        println!("{kind:<16} allowed={:<5} reach(last patch, 4 layers)={reach}", mask.count_allowed());
    }

    let focal = AttentionKind::FOCAL.build(&layout, grid, &cats)?;
    println!("\nfocal patch rows 0..12 (# = allowed key among patches):");
    for i in 0..12 {
        let row: String = (0..grid.len()).map(|j| if focal.get(n + i, n + j) { '#' } else { '.' }).collect();
        println!("  {i:>2} {row}");
    }

    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, focal.to_pgm())?;
        println!("wrote {path}");
    }
    Ok(())
}
