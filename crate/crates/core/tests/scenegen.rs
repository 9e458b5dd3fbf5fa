use focalgen::codebook::fit_codebook;
use focalgen::layout::{canonicalize, CategoryKind, CategoryTable, PatchGrid};
use focalgen::scenegen::{consistency_score, gen_layout, texture_swatches, Corpus, LayoutConstraints};

#[test]
fn thousand_layouts_are_valid() {
    let cats = CategoryTable::synthetic_default();
    let c = LayoutConstraints::default();
    for seed in 0..1000 {
        let l = gen_layout(seed, &cats, &c);
        l.validate(&cats).unwrap();
        assert!(l.is_canonical(), "seed {seed}");
        assert!(l.len() <= c.max_objects);
        let instances: Vec<usize> = l
            .objects
            .iter()
            .filter(|o| cats.kind(o.category) == Some(CategoryKind::Instance))
            .map(|o| o.category)
            .collect();
        assert!(!instances.is_empty() && instances.len() <= c.max_instances);
        let mut dedup = instances.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), instances.len(), "instance categories repeat at seed {seed}");
        assert_eq!(l, gen_layout(seed, &cats, &c));
    }
}

#[test]
fn rendered_corpus_scores_one() {
    let cats = CategoryTable::synthetic_default();
    let grid = PatchGrid::square(8);
    let corpus = Corpus::generate(2, 0, 64, &cats, &LayoutConstraints::default(), grid, 4);
    let mut images = corpus.images.clone();
    images.extend(texture_swatches(&cats, 4));
    let cb = fit_codebook(&images, 64, 4, 0).unwrap();
    for (t, l) in corpus.encode_all(&cb).unwrap().iter().zip(&corpus.layouts) {
        assert_eq!(consistency_score(t, l, &cb, &cats, grid).unwrap(), 1.0);
        let mut shuffled = l.clone();
        shuffled.objects.reverse();
        assert_eq!(consistency_score(t, &canonicalize(&shuffled), &cb, &cats, grid).unwrap(), 1.0);
    }
}

#[test]
fn dataset_is_reproducible_from_seed() {
    let cats = CategoryTable::synthetic_default();
    let grid = PatchGrid::square(4);
    let c = LayoutConstraints::default();
    let a = Corpus::generate(11, 0, 5, &cats, &c, grid, 2);
    let b = Corpus::generate(11, 0, 5, &cats, &c, grid, 2);
    assert_eq!(a.layouts, b.layouts);
    assert_eq!(a.images, b.images);
    // Scene i depends only on its index, so windows agree.
    let tail = Corpus::generate(11, 3, 2, &cats, &c, grid, 2);
    assert_eq!(&a.layouts[3..], &tail.layouts[..]);

    let dir = tempfile::tempdir().unwrap();
    a.write_dir(dir.path(), &cats, None).unwrap();
    for f in ["manifest.txt", "layouts/000.txt", "images/004.ppm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = Corpus::read_dir(dir.path(), &cats).unwrap();
    assert_eq!(back.layouts, a.layouts);
    assert_eq!(back.images, a.images);
}
