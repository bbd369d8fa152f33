use equivar_core::group::{apply_grid, FiniteGroup, GridAction, GroupKind, LabelAction};
use equivar_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [GroupKind; 3] = [GroupKind::Rot4, GroupKind::Rot2Flip, GroupKind::Rot4Flip];

#[test]
fn identity_element_fixes_every_coordinate() {
    for kind in KINDS {
        let g = FiniteGroup::new(kind);
        let act = GridAction::new(&g, 5).unwrap();
        for p in 0..25 {
            assert_eq!(act.forward_map(g.identity())[p], p);
        }
    }
}

#[test]
fn quarter_turn_tracks_corner() {
    let g = FiniteGroup::new(GroupKind::Rot4);
    let act = GridAction::new(&g, 3).unwrap();
    let r = g.index_of("r").unwrap();
    assert_eq!(act.map(r, 0, 0), (2, 0));
    // general formula (row, col) -> (n-1-col, row)
    for row in 0..3 {
        for col in 0..3 {
            assert_eq!(act.map(r, row, col), (2 - col, row));
        }
    }
    let m = FiniteGroup::new(GroupKind::Rot4Flip);
    let act = GridAction::new(&m, 3).unwrap();
    let flip = m.index_of("m").unwrap();
    assert_eq!(act.map(flip, 1, 0), (1, 2));
}

/// Exhaustive composition oracle: the coordinate map of `a∘b` equals the
/// composition of the maps, for every pair and every coordinate.
#[test]
fn grid_action_is_a_homomorphism() {
    for kind in KINDS {
        let g = FiniteGroup::new(kind);
        for n in [1, 2, 7, 8] {
            let act = GridAction::new(&g, n).unwrap();
            for a in g.elements() {
                let fa = act.forward_map(a);
                let mut seen = vec![false; n * n];
                fa.iter().for_each(|&q| seen[q] = true);
                assert!(seen.iter().all(|&s| s), "{kind} element {a} not bijective");
                for b in g.elements() {
                    let fab = act.forward_map(g.compose(a, b));
                    let fb = act.forward_map(b);
                    for p in 0..n * n {
                        assert_eq!(fab[p], fa[fb[p]], "{kind} n={n} a={a} b={b}");
                    }
                }
            }
        }
    }
}

#[test]
fn apply_grid_basic_cases() {
    let g = FiniteGroup::new(GroupKind::Rot4Flip);
    let act = GridAction::new(&g, 6).unwrap();
    let x = Tensor::<f64>::randn(vec![2, 3, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(apply_grid(&act, g.identity(), &x).unwrap(), x);
    let r = g.index_of("r").unwrap();
    let mut y = x.clone();
    for _ in 0..4 {
        y = apply_grid(&act, r, &y).unwrap();
    }
    assert_eq!(y, x);
    let m = g.index_of("m").unwrap();
    let two_steps = apply_grid(&act, m, &apply_grid(&act, r, &x).unwrap()).unwrap();
    let once = apply_grid(&act, g.compose(m, r), &x).unwrap();
    assert_eq!(two_steps, once);
}

#[test]
fn apply_grid_rejects_non_square() {
    let g = FiniteGroup::new(GroupKind::Rot4);
    let act = GridAction::new(&g, 4).unwrap();
    assert!(apply_grid(&act, 1, &Tensor::<f64>::zeros(vec![1, 4, 5])).is_err());
    assert!(apply_grid(&act, 1, &Tensor::<f64>::zeros(vec![1, 5, 5])).is_err());
}

#[test]
fn quarter_turn_moves_pixel_values() {
    let g = FiniteGroup::new(GroupKind::Rot4);
    let act = GridAction::new(&g, 2).unwrap();
    // [[1,2],[3,4]] rotated counter-clockwise is [[2,4],[1,3]]
    let x = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = apply_grid(&act, 1, &x).unwrap();
    assert_eq!(y.data(), &[2.0, 4.0, 1.0, 3.0]);
}

#[test]
fn regular_copies_are_free() {
    let g = FiniteGroup::new(GroupKind::Rot4Flip);
    let act = LabelAction::regular_copies(&g, 3);
    assert_eq!(act.label_count(), 24);
    let rebuilt = LabelAction::new(&g, (0..8).map(|e| act.permutation(e).to_vec()).collect()).unwrap();
    assert_eq!(rebuilt, act);
    let coords = act.free_orbit_coordinates().unwrap();
    for (l, &(o, e)) in coords.iter().enumerate() {
        assert_eq!(l, o * 8 + e);
    }
}

#[test]
fn label_action_rejects_non_homomorphisms_and_non_free_orbits() {
    let g = FiniteGroup::new(GroupKind::Rot4);
    // r acting as a transposition squares to the identity, but r∘r = r2 must act like r∘r
    let bad = vec![vec![0, 1], vec![1, 0], vec![1, 0], vec![1, 0]];
    assert!(LabelAction::new(&g, bad).is_err());
    // trivial action on 2 labels is a homomorphism but its orbits are not free
    let trivial = LabelAction::new(&g, vec![vec![0, 1]; 4]).unwrap();
    assert!(trivial.free_orbit_coordinates().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn apply_grid_is_a_left_action(kind_ix in 0usize..3, n in 1usize..9, seed in any::<u64>()) {
        let g = FiniteGroup::new(KINDS[kind_ix]);
        let act = GridAction::new(&g, n).unwrap();
        let x = Tensor::<f64>::randn(vec![2, n, n], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        for a in g.elements() {
            for b in g.elements() {
                let lhs = apply_grid(&act, a, &apply_grid(&act, b, &x).unwrap()).unwrap();
                let rhs = apply_grid(&act, g.compose(a, b), &x).unwrap();
                prop_assert_eq!(lhs, rhs);
            }
        }
    }
}
