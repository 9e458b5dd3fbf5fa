use focalgen::connectivity::{
    causal_mask, focal_mask, grid_mask, reachable_set, AttentionKind, Block, ConnectivityMask, FocalBlocks,
};
use focalgen::layout::{assign_patch_owner, canonicalize, CategoryTable, Layout, Owner, PatchGrid};
use focalgen::scenegen::{gen_layout, LayoutConstraints};
use proptest::prelude::*;

fn cats() -> CategoryTable {
    CategoryTable::synthetic_default()
}

fn layout_and_grid() -> impl Strategy<Value = (Layout, PatchGrid)> {
    (any::<u64>(), 1usize..10, 1usize..10).prop_map(|(seed, r, c)| {
        (gen_layout(seed, &cats(), &LayoutConstraints::default()), PatchGrid::new(r, c).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn neighbour_relation_is_symmetric((layout, grid) in layout_and_grid()) {
        let n = layout.len();
        let m = focal_mask(&layout, grid, &cats()).unwrap();
        let owners = assign_patch_owner(&layout, grid, &cats());
        // Below the diagonal the mask is the neighbour relation itself, so
        // mirroring it must agree with owners compared the other way round.
        for i in 0..grid.len() {
            for j in 0..i {
                prop_assert_eq!(m.get(n + i, n + j), owners[j] == owners[i]);
            }
        }
    }

    #[test]
    fn every_row_has_support((layout, grid) in layout_and_grid(), v in 0usize..8) {
        let kind = AttentionKind::ablation_set()[v];
        if let AttentionKind::Grid(k) = kind {
            prop_assume!(k <= grid.rows.max(grid.cols));
        }
        let m = kind.build(&layout, grid, &cats()).unwrap();
        let n = layout.len();
        for r in 0..m.size() {
            prop_assert!(m.row(r).iter().any(|&a| a), "row {} empty", r);
        }
        if let AttentionKind::Focal(_) = kind {
            for i in 0..grid.len() {
                prop_assert!(m.get(n + i, n + i));
            }
        }
        if kind == AttentionKind::FOCAL {
            for (i, o) in assign_patch_owner(&layout, grid, &cats()).iter().enumerate() {
                if let Owner::Instance(k) = o {
                    prop_assert!(m.get(n + i, *k));
                }
            }
        }
    }

    #[test]
    fn focal_only_removes_patch_edges((layout, grid) in layout_and_grid(), b in 0usize..3) {
        let causal = causal_mask(layout.len(), grid.len());
        let full = focal_mask(&layout, grid, &cats()).unwrap();
        let block = [Block::ObjectObject, Block::ObjectPatch, Block::PatchPatch][b];
        let ablated = AttentionKind::Focal(FocalBlocks::without(block)).build(&layout, grid, &cats()).unwrap();
        for m in [&full, &ablated] {
            let (pb, cb) = (m.patch_block(), causal.patch_block());
            prop_assert!(pb.iter().zip(&cb).all(|(&f, &c)| !f || c));
        }
    }

    #[test]
    fn objects_never_see_patches((layout, grid) in layout_and_grid(), v in 0usize..8) {
        let kind = AttentionKind::ablation_set()[v];
        if let AttentionKind::Grid(k) = kind {
            prop_assume!(k <= grid.rows.max(grid.cols));
        }
        let m = kind.build(&layout, grid, &cats()).unwrap();
        let n = layout.len();
        for i in 0..n {
            prop_assert!(m.row(i)[n..].iter().all(|&a| !a));
        }
    }

    #[test]
    fn full_window_is_causal(n in 0usize..6, r in 1usize..12, c in 1usize..12) {
        let grid = PatchGrid::new(r, c).unwrap();
        let g = grid_mask(n, grid, r.max(c)).unwrap();
        prop_assert_eq!(g.patch_block(), causal_mask(n, grid.len()).patch_block());
    }

    #[test]
    fn mask_text_round_trip((layout, grid) in layout_and_grid()) {
        let m = focal_mask(&layout, grid, &cats()).unwrap();
        prop_assert_eq!(ConnectivityMask::from_pairs_text(&m.to_pairs_text()).unwrap(), m);
    }
}

#[test]
fn causal_rows_are_prefixes() {
    for l in [1, 2, 7, 40] {
        let m = causal_mask(0, l);
        for i in 0..l {
            assert_eq!(m.allowed_keys(i), (0..=i).collect::<Vec<_>>());
        }
    }
}

#[test]
fn instance_patches_never_reach_other_instances() {
    let c = cats();
    let grid = PatchGrid::square(8);
    for seed in 0..40 {
        let layout = gen_layout(seed, &c, &LayoutConstraints::default());
        let n = layout.len();
        let m = focal_mask(&layout, grid, &c).unwrap();
        let owners = assign_patch_owner(&layout, grid, &c);
        for (i, o) in owners.iter().enumerate() {
            let Owner::Instance(k) = o else { continue };
            for j in reachable_set(&m, 64, n + i) {
                if j >= n {
                    assert!(matches!(owners[j - n], Owner::Instance(x) if x == *k), "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn pgm_of_causal_is_lower_triangular() {
    let m = causal_mask(0, 16);
    let pgm = m.to_pgm();
    let header = b"P5\n16 16\n255\n";
    assert!(pgm.starts_with(header));
    let body = &pgm[header.len()..];
    for i in 0..16 {
        for j in 0..16 {
            assert_eq!(body[i * 16 + j], if j <= i { 255 } else { 0 });
        }
    }
}

#[test]
fn non_canonical_layouts_are_rejected() {
    let c = cats();
    let layout = gen_layout(5, &c, &LayoutConstraints::default());
    let mut rev = layout.clone();
    rev.objects.reverse();
    if rev != canonicalize(&rev) {
        assert!(focal_mask(&rev, PatchGrid::square(4), &c).is_err());
    }
}
