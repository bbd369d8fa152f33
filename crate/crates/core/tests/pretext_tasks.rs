use std::collections::HashSet;

use equivar_core::group::{apply_grid, FiniteGroup, GridAction, GroupKind, LabelAction};
use equivar_core::nn::{BackboneConfig, BatchStats, Mode, ParamStore};
use equivar_core::pretext::{
    context_cell, context_label_action, extract_context, extract_jigsaw, generate_closed_subset,
    grid_permutation, hamming, pretext_loss, stack_patches, HeadKind, PatchClassifier,
    PatchClassifierConfig, PatchGrid, Permutation, PermutationSubset, CONTEXT_LABELS,
};
use equivar_core::{Error, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type NoRng = ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn label(name: &str) -> usize {
    CONTEXT_LABELS.iter().position(|&l| l == name).unwrap()
}

#[test]
fn patch_grid_fits_desk_extent() {
    let grid = PatchGrid::fit(32, 1).unwrap();
    assert_eq!(grid.patch, 10);
    assert_eq!(grid.origin(0), (0, 0));
    assert_eq!(grid.origin(4), (11, 11));
    assert!(matches!(PatchGrid::new(8, 3, 1), Err(Error::Extent(_))));
    assert!(matches!(PatchGrid::fit(2, 0), Err(Error::Extent(_))));
}

#[test]
fn right_neighbor_lies_right_of_center() {
    let grid = PatchGrid::fit(32, 1).unwrap();
    // horizontal gradient: pixel value = column index
    let img = Tensor::<f64>::from_fn(vec![1, 32, 32], |i| (i % 32) as f64);
    let s = extract_context::<f64, NoRng>(&img, label("right"), &grid, None).unwrap();
    let center_max = s.center.data().iter().cloned().fold(f64::MIN, f64::max);
    let right_min = s.neighbor.data().iter().cloned().fold(f64::MAX, f64::min);
    assert!(right_min > center_max);
    assert_eq!(s.label, label("right"));
}

#[test]
fn neighbors_tile_the_grid_minus_center() {
    let cells: HashSet<usize> = (0..8).map(context_cell).collect();
    assert_eq!(cells.len(), 8);
    assert!(!cells.contains(&4));
    let grid = PatchGrid::fit(32, 1).unwrap();
    // tag each pixel with its own index: patches are disjoint iff no tag repeats
    let img = Tensor::<f64>::from_fn(vec![1, 32, 32], |i| i as f64);
    let mut seen = HashSet::new();
    for l in 0..8 {
        let s = extract_context::<f64, NoRng>(&img, l, &grid, None).unwrap();
        assert_eq!(s.label, l);
        for &v in s.neighbor.data() {
            assert!(seen.insert(v as u64));
        }
        if l == 0 {
            for &v in s.center.data() {
                assert!(seen.insert(v as u64));
            }
        }
    }
    assert_eq!(seen.len(), 9 * 100);
}

#[test]
fn jittered_extraction_stays_in_bounds() {
    let grid = PatchGrid::new(36, 10, 1).unwrap();
    let img = Tensor::<f64>::randn(vec![3, 36, 36], 1.0, &mut rng(0));
    let mut r = rng(1);
    for l in 0..8 {
        let s = extract_context(&img, l, &grid, Some((&mut r, 2))).unwrap();
        assert_eq!(s.neighbor.shape(), &[3, 10, 10]);
    }
}

#[test]
fn context_action_follows_quarter_turn() {
    let group = FiniteGroup::new(GroupKind::Rot4);
    let act = context_label_action(&group).unwrap();
    let r = group.index_of("r").unwrap();
    assert_eq!(act.apply(r, label("right")), label("up"));
    assert_eq!(act.apply(r, label("upper-left")), label("lower-left"));
    assert_eq!(act.apply(r, label("left")), label("down"));
    assert_eq!(act.apply(r, label("lower-right")), label("upper-right"));
    let mut l = label("down");
    for _ in 0..4 {
        l = act.apply(r, l);
    }
    assert_eq!(l, label("down"));
    assert_eq!(act, LabelAction::regular_copies(&group, 2));
    assert!(matches!(
        context_label_action(&FiniteGroup::new(GroupKind::Rot4Flip)),
        Err(Error::Group(_))
    ));
}

/// Building the stimulus from the transformed image yields the acted label
/// and transformed patches, for every label and rotation.
#[test]
fn context_labels_are_equivariant_exhaustively() {
    let group = FiniteGroup::new(GroupKind::Rot4);
    let act = context_label_action(&group).unwrap();
    let grid = PatchGrid::fit(32, 1).unwrap();
    let img_action = GridAction::new(&group, 32).unwrap();
    let patch_action = GridAction::new(&group, grid.patch).unwrap();
    let img = Tensor::<f64>::randn(vec![3, 32, 32], 1.0, &mut rng(2));
    for l in 0..8 {
        let base = extract_context::<f64, NoRng>(&img, l, &grid, None).unwrap();
        for g in group.elements() {
            let moved = apply_grid(&img_action, g, &img).unwrap();
            let acted = act.apply(g, l);
            let s = extract_context::<f64, NoRng>(&moved, acted, &grid, None).unwrap();
            assert_eq!(s.center, apply_grid(&patch_action, g, &base.center).unwrap());
            assert_eq!(s.neighbor, apply_grid(&patch_action, g, &base.neighbor).unwrap());
        }
    }
}

#[test]
fn jigsaw_slots_follow_the_permutation() {
    let grid = PatchGrid::fit(32, 1).unwrap();
    let img = Tensor::<f64>::from_fn(vec![1, 32, 32], |i| i as f64);
    let id: Vec<usize> = (0..9).collect();
    let s = extract_jigsaw(&img, &id, &grid).unwrap();
    for k in 0..9 {
        let (r, c) = grid.origin(k);
        assert_eq!(s.patches.at(&[k, 0, 0, 0]), (r * 32 + c) as f64);
    }
    // coordinate oracle for the quarter-turn cell permutation
    let group = FiniteGroup::new(GroupKind::Rot4);
    let pi = grid_permutation(&group, 1);
    let sigma: Vec<usize> = pi.iter().map(|&v| v as usize).collect();
    let s = extract_jigsaw(&img, &sigma, &grid).unwrap();
    for k in 0..9 {
        let (row, col) = (k / 3, k % 3);
        let cell = (2 - col) * 3 + row;
        let (r, c) = grid.origin(cell);
        for y in 0..grid.patch {
            for x in 0..grid.patch {
                assert_eq!(s.patches.at(&[k, 0, y, x]), ((r + y) * 32 + c + x) as f64);
            }
        }
    }
}

#[test]
fn jigsaw_patch_multiset_is_permutation_independent() {
    let grid = PatchGrid::fit(32, 1).unwrap();
    let img = Tensor::<f64>::randn(vec![2, 32, 32], 1.0, &mut rng(3));
    let sorted = |t: &Tensor<f64>| {
        let mut v: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
        v.sort_unstable();
        v
    };
    let base = sorted(&extract_jigsaw(&img, &(0..9).collect::<Vec<_>>(), &grid).unwrap().patches);
    let mut r = rng(4);
    for _ in 0..10 {
        let mut p: Vec<usize> = (0..9).collect();
        p.shuffle(&mut r);
        assert_eq!(sorted(&extract_jigsaw(&img, &p, &grid).unwrap().patches), base);
    }
    assert!(matches!(
        extract_jigsaw(&img, &[0, 0, 1, 2, 3, 4, 5, 6, 7], &grid),
        Err(Error::Permutation(_))
    ));
}

fn compose(a: &Permutation, b: &Permutation) -> Permutation {
    let mut out = [0; 9];
    for k in 0..9 {
        out[k] = a[b[k] as usize];
    }
    out
}

#[test]
fn grid_permutations_form_a_homomorphism() {
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let mut r = rng(5);
    for _ in 0..100 {
        let (a, b) = (r.random_range(0..8), r.random_range(0..8));
        let mut sigma: Permutation = [0, 1, 2, 3, 4, 5, 6, 7, 8];
        sigma.shuffle(&mut r);
        let two = compose(&grid_permutation(&group, a), &compose(&grid_permutation(&group, b), &sigma));
        let one = compose(&grid_permutation(&group, group.compose(a, b)), &sigma);
        assert_eq!(two, one);
    }
}

/// The image-level transform and the label action agree: the puzzle built
/// from the transformed image with `π_g∘σ` shows the transformed patches in
/// the original slot order.
#[test]
fn jigsaw_pipeline_consistency() {
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let grid = PatchGrid::fit(32, 1).unwrap();
    let img_action = GridAction::new(&group, 32).unwrap();
    let patch_action = GridAction::new(&group, grid.patch).unwrap();
    let img = Tensor::<f64>::randn(vec![3, 32, 32], 1.0, &mut rng(6));
    let mut r = rng(7);
    for _ in 0..100 {
        let g = r.random_range(0..8);
        let mut sigma: Permutation = [0, 1, 2, 3, 4, 5, 6, 7, 8];
        sigma.shuffle(&mut r);
        let base = extract_jigsaw(&img, &sigma.map(usize::from), &grid).unwrap();
        let acted = compose(&grid_permutation(&group, g), &sigma);
        let moved = apply_grid(&img_action, g, &img).unwrap();
        let s = extract_jigsaw(&moved, &acted.map(usize::from), &grid).unwrap();
        let expected = apply_grid(&patch_action, g, &base.patches).unwrap();
        assert_eq!(s.patches, expected);
    }
}

#[test]
fn closed_subset_has_2000_members_in_free_closed_orbits() {
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let subset = generate_closed_subset(&group, 250, 17).unwrap();
    assert_eq!(subset.len(), 2000);
    assert_eq!(subset.n_orbits(), 250);
    let all: HashSet<Permutation> = subset.perms().iter().copied().collect();
    assert_eq!(all.len(), 2000);
    for orbit in subset.perms().chunks(8) {
        assert_eq!(orbit.iter().collect::<HashSet<_>>().len(), 8);
    }
    for p in subset.perms() {
        for g in group.elements() {
            assert!(all.contains(&compose(&grid_permutation(&group, g), p)));
        }
    }
    let min = subset
        .perms()
        .iter()
        .enumerate()
        .flat_map(|(i, a)| subset.perms()[i + 1..].iter().map(move |b| hamming(a, b)))
        .min()
        .unwrap();
    assert_eq!(min, subset.min_hamming());
    assert!(min >= 2);
    let action = subset.label_action().unwrap();
    assert_eq!(action, LabelAction::regular_copies(&group, 250));
    assert_eq!(generate_closed_subset(&group, 250, 17).unwrap(), subset);
}

#[test]
fn subset_label_action_identity_and_composition() {
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let subset = generate_closed_subset(&group, 20, 3).unwrap();
    let mut r = rng(8);
    for _ in 0..100 {
        let l = r.random_range(0..subset.len());
        let (a, b) = (r.random_range(0..8), r.random_range(0..8));
        assert_eq!(subset.act(&group, group.identity(), l).unwrap(), l);
        let two = subset.act(&group, a, subset.act(&group, b, l).unwrap()).unwrap();
        assert_eq!(two, subset.act(&group, group.compose(a, b), l).unwrap());
    }
}

#[test]
fn subset_file_round_trip_and_corruption() {
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let subset = generate_closed_subset(&group, 12, 9).unwrap();
    let mut buf = Vec::new();
    subset.write(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        format!("group=rot4_flip orbits=12 seed=9 min_hamming={}", subset.min_hamming())
    );
    assert_eq!(text.lines().count(), 97);
    assert_eq!(PermutationSubset::read(&buf[..]).unwrap(), subset);

    // swap two members of different orbits: no longer closed
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines.swap(2, 12);
    let corrupted = lines.join("\n");
    assert!(matches!(
        PermutationSubset::read(corrupted.as_bytes()),
        Err(Error::ClosureViolation(_))
    ));
}

#[test]
fn open_subset_is_not_closed_under_rotations() {
    let trivial = FiniteGroup::new(GroupKind::Trivial);
    let open = generate_closed_subset(&trivial, 100, 1).unwrap();
    assert_eq!(open.len(), 100);
    let d4 = FiniteGroup::new(GroupKind::Rot4Flip);
    let misses = (0..open.len())
        .filter(|&l| matches!(open.act(&d4, 1, l), Err(Error::ClosureViolation(_))))
        .count();
    assert!(misses > 0);
}

#[test]
fn pretext_loss_examples() {
    let tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros(vec![1, 8]));
    let l = tape.value(pretext_loss(&tape, uniform, &[3]).unwrap()).item();
    assert!((l - 8f64.ln()).abs() < 1e-12);

    let mut v = vec![0.0; 8];
    v[2] = 1e3;
    let peaked = tape.constant(Tensor::new(vec![1, 8], v).unwrap());
    assert!(tape.value(pretext_loss(&tape, peaked, &[2]).unwrap()).item() < 1e-12);

    let mut r = rng(10);
    for _ in 0..20 {
        let z: Vec<f64> = (0..8).map(|_| r.random_range(-5.0..5.0)).collect();
        let y = r.random_range(0..8);
        let logsum = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        let expected = logsum - z[y];
        let t = tape.constant(Tensor::new(vec![1, 8], z).unwrap());
        let got = tape.value(pretext_loss(&tape, t, &[y]).unwrap()).item();
        assert!((got - expected).abs() <= 1e-9);
    }
}

fn patch_backbone(group: GroupKind) -> BackboneConfig {
    BackboneConfig {
        group,
        in_channels: 3,
        widths: vec![8, 16],
        pool_after: vec![false, true],
        stem_pool: 1,
        kernel: 3,
        batch_norm: true,
        scale_widths: true,
    }
}

fn loss_of<T: Scalar>(model: &PatchClassifier, store: &ParamStore<T>, patches: &Tensor<T>, labels: &[usize], mode: Mode) -> f64 {
    let tape = Tape::new();
    let bound = store.bind(&tape, false);
    let x = tape.constant(patches.clone());
    let logits = model
        .forward(&tape, &bound, store, x, mode, &mut BatchStats::new())
        .unwrap();
    tape.value(pretext_loss(&tape, logits, labels).unwrap()).item().as_f64()
}

/// Replacing one image by a transformed copy, with its label acted on,
/// leaves the cross-entropy unchanged.
#[test]
fn context_loss_is_consistent_under_transforms() {
    let group = FiniteGroup::new(GroupKind::Rot4);
    let act = context_label_action(&group).unwrap();
    let grid = PatchGrid::fit(32, 1).unwrap();
    let mut store = ParamStore::<f32>::new();
    let cfg = PatchClassifierConfig {
        backbone: patch_backbone(GroupKind::Rot4),
        patches: 2,
        hidden: 8,
        head: HeadKind::Equivariant(act.clone()),
    };
    let model = PatchClassifier::new(cfg, &mut store, &mut rng(11)).unwrap();
    let images: Vec<Tensor<f32>> = (0..4).map(|i| Tensor::randn(vec![3, 32, 32], 1.0, &mut rng(20 + i))).collect();
    let labels = vec![0, 3, 5, 6];
    let build = |imgs: &[Tensor<f32>], labels: &[usize]| {
        let per: Vec<Tensor<f32>> = imgs
            .iter()
            .zip(labels)
            .map(|(im, &l)| {
                let s = extract_context::<f32, NoRng>(im, l, &grid, None).unwrap();
                Tensor::stack(&[s.center, s.neighbor]).unwrap()
            })
            .collect();
        stack_patches(&per).unwrap()
    };
    let img_action = GridAction::new(&group, 32).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let base = loss_of(&model, &store, &build(&images, &labels), &labels, mode);
        for m in 0..4 {
            for g in group.elements() {
                let mut imgs = images.clone();
                let mut ls = labels.clone();
                imgs[m] = apply_grid(&img_action, g, &images[m]).unwrap();
                ls[m] = act.apply(g, labels[m]);
                let moved = loss_of(&model, &store, &build(&imgs, &ls), &ls, mode);
                assert!((moved - base).abs() <= 1e-4, "m={m} g={g}: {moved} vs {base}");
            }
        }
    }
}

#[test]
fn jigsaw_loss_is_consistent_under_transforms() {
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let subset = generate_closed_subset(&group, 6, 4).unwrap();
    let grid = PatchGrid::fit(32, 1).unwrap();
    let mut store = ParamStore::<f32>::new();
    let cfg = PatchClassifierConfig {
        backbone: patch_backbone(GroupKind::Rot4Flip),
        patches: 9,
        hidden: 8,
        head: HeadKind::Equivariant(subset.label_action().unwrap()),
    };
    let model = PatchClassifier::new(cfg, &mut store, &mut rng(12)).unwrap();
    assert_eq!(model.label_count(), 48);
    let images: Vec<Tensor<f32>> = (0..3).map(|i| Tensor::randn(vec![3, 32, 32], 1.0, &mut rng(30 + i))).collect();
    let labels = vec![0, 17, 40];
    let build = |imgs: &[Tensor<f32>], labels: &[usize]| {
        let per: Vec<Tensor<f32>> = imgs
            .iter()
            .zip(labels)
            .map(|(im, &l)| extract_jigsaw(im, &subset.get(l).map(usize::from), &grid).unwrap().patches)
            .collect();
        stack_patches(&per).unwrap()
    };
    let img_action = GridAction::new(&group, 32).unwrap();
    let base = loss_of(&model, &store, &build(&images, &labels), &labels, Mode::Train);
    for m in 0..3 {
        for g in group.elements() {
            let mut imgs = images.clone();
            let mut ls = labels.clone();
            imgs[m] = apply_grid(&img_action, g, &images[m]).unwrap();
            ls[m] = subset.act(&group, g, labels[m]).unwrap();
            let moved = loss_of(&model, &store, &build(&imgs, &ls), &ls, Mode::Train);
            assert!((moved - base).abs() <= 1e-4, "m={m} g={g}: {moved} vs {base}");
        }
    }
}

#[test]
fn plain_head_on_trivial_group_classifies() {
    let mut store = ParamStore::<f64>::new();
    let cfg = PatchClassifierConfig {
        backbone: patch_backbone(GroupKind::Trivial),
        patches: 2,
        hidden: 4,
        head: HeadKind::Plain { labels: 8 },
    };
    let model = PatchClassifier::new(cfg, &mut store, &mut rng(13)).unwrap();
    let x = Tensor::<f64>::randn(vec![6, 3, 10, 10], 1.0, &mut rng(14));
    let l = loss_of(&model, &store, &x, &[0, 1, 7], Mode::Train);
    assert!(l.is_finite() && l > 0.0);
}
