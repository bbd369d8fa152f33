use equivar_core::contrastive::{
    embed, invariant_inner, moco_forward, moco_loss, moco_step, simsiam_forward, simsiam_loss,
    sinkhorn_knopp, soft_cross_entropy, swav_forward, swav_loss, ContrastiveNet,
    ContrastiveNetConfig, FeatureQueue, MocoConfig, MocoState, MomentumEncoder, Prototypes,
    SimSiamConfig, SwavConfig,
};
use equivar_core::group::{apply_grid, FiniteGroup, GridAction, GroupKind};
use equivar_core::nn::{BackboneConfig, BatchStats, ParamStore, PooledFeature, Schedule, Sgd};
use equivar_core::tensor::grad_check;
use equivar_core::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let d = t.shape()[1];
    let mut v = t.to_vec();
    for row in v.chunks_exact_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::new(t.shape().to_vec(), v).unwrap()
}

#[test]
fn queue_is_fifo_and_bounded() {
    let mut q = FeatureQueue::<f64>::new(5, 2);
    assert!(q.keys().is_none());
    for step in 0..4 {
        let keys = Tensor::from_fn(vec![2, 2], |i| if i % 2 == 0 { (step * 2 + i / 2 + 1) as f64 } else { 0.0 });
        q.push(&keys).unwrap();
        assert_eq!(q.len(), ((step + 1) * 2).min(5));
    }
    // eight pushed, the three oldest evicted; all rows are unit vectors along x
    let k = q.keys().unwrap();
    assert_eq!(k.shape(), &[5, 2]);
    assert!(k.data().chunks(2).all(|r| (r[0] - 1.0).abs() < 1e-12 && r[1] == 0.0));
    let mut q = FeatureQueue::<f64>::new(4, 3);
    q.push(&Tensor::from_fn(vec![6, 3], |i| i as f64 + 1.0)).unwrap();
    let rows = q.keys().unwrap();
    let expected = unit_rows(&Tensor::from_fn(vec![4, 3], |i| i as f64 + 7.0));
    assert!(rows.max_abs_diff(&expected) < 1e-15);
    for row in rows.data().chunks(3) {
        assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6);
    }
    assert!(q.push(&Tensor::zeros(vec![1, 2])).is_err());
}

#[test]
fn momentum_encoder_update_is_exact() {
    let mut online = ParamStore::<f64>::new();
    let w = online.add("w", Tensor::randn(vec![3, 2], 1.0, &mut rng(0)));
    let buf = online.add_buffer("running", Tensor::full(vec![2], 4.0));
    let mut enc = MomentumEncoder::new(&online, 0.999).unwrap();
    let before = enc.params().get(w).clone();
    online.set(w, Tensor::randn(vec![3, 2], 1.0, &mut rng(1))).unwrap();
    online.set(buf, Tensor::full(vec![2], -1.0)).unwrap();
    enc.update(&online).unwrap();
    let expected: Vec<f64> = before
        .data()
        .iter()
        .zip(online.get(w).data())
        .map(|(&k, &t)| 0.999 * k + (1.0 - 0.999) * t)
        .collect();
    assert_eq!(enc.params().get(w).data(), expected.as_slice());
    assert_eq!(enc.params().get(buf), online.get(buf));
}

#[test]
fn prototypes_have_unit_columns() {
    let mut store = ParamStore::<f64>::new();
    let p = Prototypes::new(&mut store, 12, 7, &mut rng(2)).unwrap();
    store.set(p.id(), Tensor::randn(vec![12, 7], 3.0, &mut rng(3))).unwrap();
    p.renormalize(&mut store).unwrap();
    let c = store.get(p.id());
    for j in 0..7 {
        let n: f64 = (0..12).map(|i| c.at(&[i, j]).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-6);
    }
}

fn double_sum(u: &PooledFeature<f64>, v: &PooledFeature<f64>) -> f64 {
    let group = u.group();
    let n = group.order() as f64;
    let mut acc = 0.0;
    for a in group.elements() {
        for b in group.elements() {
            let (x, y) = (u.transform(a), v.transform(b));
            acc += x.tensor().data().iter().zip(y.tensor().data()).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    acc / (n * n)
}

#[test]
fn invariant_inner_matches_double_sum() {
    let mut r = rng(4);
    for kind in [GroupKind::Rot4, GroupKind::Rot4Flip] {
        let group = FiniteGroup::new(kind);
        for _ in 0..100 {
            let c = r.random_range(1..6);
            let u = PooledFeature::new(Tensor::randn(vec![1, group.order(), c], 1.0, &mut r), &group).unwrap();
            let v = PooledFeature::new(Tensor::randn(vec![1, group.order(), c], 1.0, &mut r), &group).unwrap();
            let fast = invariant_inner(&u, &v).unwrap()[0];
            let slow = double_sum(&u, &v);
            assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1e-300), "{fast} vs {slow}");
            for h in group.elements() {
                assert_eq!(invariant_inner(&u.transform(h), &v).unwrap()[0], fast);
            }
        }
    }
}

#[test]
fn invariant_inner_on_trivial_group_is_dot_product() {
    let group = FiniteGroup::new(GroupKind::Trivial);
    let u = PooledFeature::new(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap(), &group).unwrap();
    let v = PooledFeature::new(Tensor::new(vec![1, 1, 3], vec![-1.0, 0.5, 2.0]).unwrap(), &group).unwrap();
    assert_eq!(invariant_inner(&u, &v).unwrap(), vec![6.0]);
    let w = PooledFeature::new(Tensor::zeros(vec![1, 1, 4]), &group).unwrap();
    assert!(matches!(invariant_inner(&u, &w), Err(Error::Structure(_))));
}

#[test]
fn moco_loss_examples() {
    let tape = Tape::<f64>::new();
    let q = tape.constant(unit_rows(&Tensor::randn(vec![3, 4], 1.0, &mut rng(5))));
    let k = tape.constant(unit_rows(&Tensor::randn(vec![3, 4], 1.0, &mut rng(6))));
    let empty = FeatureQueue::new(8, 4);
    assert_eq!(tape.value(moco_loss(&tape, q, k, &empty, 0.2).unwrap()).item(), 0.0);
    assert!(matches!(moco_loss(&tape, q, k, &empty, 0.0), Err(Error::Parameter(_))));
    assert!(matches!(moco_loss(&tape, q, k, &empty, -1.0), Err(Error::Parameter(_))));

    // negative equal to the positive: two-way tie
    let x = Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
    let mut queue = FeatureQueue::new(8, 2);
    queue.push(&x).unwrap();
    let (qv, kv) = (tape.constant(x.clone()), tape.constant(x));
    let l = tape.value(moco_loss(&tape, qv, kv, &queue, 1.0).unwrap()).item();
    assert!((l - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn moco_loss_matches_scalar_formula() {
    let qs = unit_rows(&Tensor::randn(vec![4, 5], 1.0, &mut rng(7)));
    let ks = unit_rows(&Tensor::randn(vec![4, 5], 1.0, &mut rng(8)));
    let mut queue = FeatureQueue::new(16, 5);
    queue.push(&Tensor::randn(vec![10, 5], 1.0, &mut rng(9))).unwrap();
    let negs = queue.keys().unwrap();
    let tau = 0.2;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut expected = 0.0;
    for b in 0..4 {
        let q = &qs.data()[b * 5..b * 5 + 5];
        let pos = (dot(q, &ks.data()[b * 5..b * 5 + 5]) / tau).exp();
        let neg: f64 = negs.data().chunks(5).map(|n| (dot(q, n) / tau).exp()).sum();
        expected -= (pos / (pos + neg)).ln();
    }
    expected /= 4.0;
    let tape = Tape::new();
    let (q, k) = (tape.constant(qs), tape.constant(ks));
    let got = tape.value(moco_loss(&tape, q, k, &queue, tau).unwrap()).item();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn sinkhorn_converges_to_uniform_marginals() {
    let scores = Tensor::<f64>::uniform(vec![64, 16], -1.0, 1.0, &mut rng(10));
    let q = sinkhorn_knopp(&scores, 100, 0.05).unwrap();
    // as a transport plan: rows 1/B, columns 1/c
    let plan: Vec<f64> = q.data().iter().map(|v| v / 64.0).collect();
    let row_err = plan.chunks(16).map(|r| (r.iter().sum::<f64>() - 1.0 / 64.0).abs()).fold(0.0, f64::max);
    let col_err = (0..16)
        .map(|j| ((0..64).map(|i| plan[i * 16 + j]).sum::<f64>() - 1.0 / 16.0).abs())
        .fold(0.0, f64::max);
    assert!(row_err <= 1e-6 && col_err <= 1e-6, "{row_err} {col_err}");
}

#[test]
fn sinkhorn_rows_are_distributions() {
    let mut r = rng(11);
    for iters in [1, 3, 10] {
        let scores = Tensor::<f64>::randn(vec![32, 10], 1.0, &mut r);
        let q = sinkhorn_knopp(&scores, iters, 0.05).unwrap();
        assert!(q.data().iter().all(|&v| v >= 0.0));
        for row in q.data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn sinkhorn_diagonal_limit_is_a_permutation() {
    let scores = Tensor::<f64>::from_fn(vec![6, 6], |i| if i / 6 == i % 6 { 5.0 } else { 0.0 });
    let q = sinkhorn_knopp(&scores, 3, 0.05).unwrap();
    for i in 0..6 {
        assert!((q.at(&[i, i]) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn sinkhorn_survives_underflowing_kernels() {
    // entries far below the maximum underflow to zero in the linear domain
    let scores = Tensor::<f64>::from_fn(vec![8, 4], |i| if i % 4 == 0 { 100.0 } else { -100.0 * (i % 4) as f64 });
    let q = sinkhorn_knopp(&scores, 3, 0.05).unwrap();
    assert!(q.is_finite());
    for row in q.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    assert!(sinkhorn_knopp(&scores, 0, 0.05).is_err());
    assert!(sinkhorn_knopp(&scores, 3, 0.0).is_err());
}

#[test]
fn soft_cross_entropy_of_own_distribution_is_entropy() {
    let logits = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng(12));
    let tape = Tape::new();
    let lv = tape.constant(logits.clone());
    let p = tape.value(tape.softmax(lv, 1).unwrap());
    let ce = tape.value(soft_cross_entropy(&tape, lv, &p).unwrap()).item();
    let entropy = -p.data().iter().map(|&x| x * x.ln()).sum::<f64>() / 3.0;
    assert!((ce - entropy).abs() < 1e-12);
}

#[test]
fn simsiam_loss_examples() {
    let group = FiniteGroup::new(GroupKind::Rot4);
    let tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::randn(vec![3, 4, 2], 1.0, &mut rng(13)));
    let l = tape.value(simsiam_loss(&tape, [z, z], [z, z], &group, false).unwrap()).item();
    assert!((l + 1.0).abs() < 1e-12);
    let l = tape.value(simsiam_loss(&tape, [z, z], [z, z], &group, true).unwrap()).item();
    assert!((l + 1.0).abs() < 1e-12);
    let a = tape.constant(Tensor::from_fn(vec![1, 4, 2], |i| if i == 0 { 1.0 } else { 0.0 }));
    let b = tape.constant(Tensor::from_fn(vec![1, 4, 2], |i| if i == 1 { 1.0 } else { 0.0 }));
    let l = tape.value(simsiam_loss(&tape, [a, a], [b, b], &group, false).unwrap()).item();
    assert_eq!(l, 0.0);
}

fn net_config(kind: GroupKind, predictor: bool) -> ContrastiveNetConfig {
    ContrastiveNetConfig {
        backbone: BackboneConfig {
            group: kind,
            in_channels: 3,
            widths: vec![6, 8],
            pool_after: vec![true, false],
            stem_pool: 1,
            kernel: 3,
            batch_norm: true,
            scale_widths: true,
        },
        proj_hidden: 8,
        proj_out: 8,
        predictor_hidden: predictor.then_some(8),
    }
}

struct Fixture {
    group: FiniteGroup,
    action: GridAction,
    views: Vec<Tensor<f64>>,
}

fn fixture(batch: usize, n: usize, count: usize, seed: u64) -> Fixture {
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let action = GridAction::new(&group, n).unwrap();
    let views = (0..count).map(|i| Tensor::randn(vec![batch, 3, n, n], 1.0, &mut rng(seed + i as u64))).collect();
    Fixture { group, action, views }
}

/// Transforms sample `m` of a batch by element `g`.
fn perturb(action: &GridAction, x: &Tensor<f64>, m: usize, g: usize) -> Tensor<f64> {
    let samples: Vec<Tensor<f64>> = (0..x.shape()[0])
        .map(|b| {
            let s = x.select(b).unwrap();
            if b == m {
                apply_grid(action, g, &s).unwrap()
            } else {
                s
            }
        })
        .collect();
    Tensor::stack(&samples).unwrap()
}

/// Largest and smallest loss change over all single-sample perturbations of
/// every view.
fn perturbation_range(fx: &Fixture, loss: &dyn Fn(&[Tensor<f64>]) -> f64) -> (f64, f64) {
    let base = loss(&fx.views);
    let (mut worst, mut least) = (0.0f64, f64::MAX);
    for v in 0..fx.views.len() {
        for m in 0..fx.views[v].shape()[0] {
            for g in fx.group.elements().skip(1) {
                let mut views = fx.views.clone();
                views[v] = perturb(&fx.action, &fx.views[v], m, g);
                let d = (loss(&views) - base).abs();
                worst = worst.max(d);
                least = least.min(d);
            }
        }
    }
    (worst, least)
}

#[test]
fn moco_loss_is_invariant_only_when_flagged() {
    let fx = fixture(4, 12, 2, 20);
    let mut store = ParamStore::<f64>::new();
    let net = ContrastiveNet::new(net_config(GroupKind::Rot4Flip, false), &mut store, &mut rng(21)).unwrap();
    let mut queue = FeatureQueue::new(32, net.embed_dim());
    queue.fill_random(&mut rng(22)).unwrap();
    let key = MomentumEncoder::new(&store, 0.999).unwrap();
    for invariant in [true, false] {
        let cfg = MocoConfig {
            invariant,
            ..MocoConfig::default()
        };
        let loss = |views: &[Tensor<f64>]| {
            let tape = Tape::new();
            let bound = store.bind(&tape, true);
            let (l, _) = moco_forward(&net, &tape, &bound, &store, key.params(), &queue, &views[0], &views[1], &cfg, &mut BatchStats::new()).unwrap();
            tape.value(l).item()
        };
        let (worst, least) = perturbation_range(&fx, &loss);
        if invariant {
            assert!(worst <= 1e-8, "invariant moco changed by {worst}");
        } else {
            assert!(least > 1e-12, "plain moco unchanged by some perturbation");
            assert!(worst > 1e-3, "plain moco changed by only {worst}");
        }
    }
}

#[test]
fn swav_loss_is_invariant_only_when_flagged() {
    let mut fx = fixture(4, 12, 2, 30);
    fx.views.extend((0..2).map(|i| Tensor::randn(vec![4, 3, 12, 12], 1.0, &mut rng(40 + i))));
    let mut store = ParamStore::<f64>::new();
    let net = ContrastiveNet::new(net_config(GroupKind::Rot4Flip, false), &mut store, &mut rng(31)).unwrap();
    let protos = Prototypes::new(&mut store, net.embed_dim(), 6, &mut rng(32)).unwrap();
    for invariant in [true, false] {
        let cfg = SwavConfig {
            invariant,
            prototypes: 6,
            ..SwavConfig::default()
        };
        let loss = |views: &[Tensor<f64>]| {
            let tape = Tape::new();
            let bound = store.bind(&tape, true);
            let l = swav_forward(&net, &tape, &bound, &store, protos, views, &cfg, &mut BatchStats::new()).unwrap();
            tape.value(l).item()
        };
        let (worst, least) = perturbation_range(&fx, &loss);
        if invariant {
            assert!(worst <= 1e-8, "invariant swav changed by {worst}");
        } else {
            assert!(least > 1e-12, "plain swav unchanged by some perturbation");
            assert!(worst > 1e-3, "plain swav changed by only {worst}");
        }
    }
}

#[test]
fn simsiam_loss_is_invariant_only_when_flagged() {
    let fx = fixture(4, 12, 2, 50);
    let mut store = ParamStore::<f64>::new();
    let net = ContrastiveNet::new(net_config(GroupKind::Rot4Flip, true), &mut store, &mut rng(51)).unwrap();
    for invariant in [true, false] {
        let cfg = SimSiamConfig { invariant };
        let loss = |views: &[Tensor<f64>]| {
            let tape = Tape::new();
            let bound = store.bind(&tape, true);
            let l = simsiam_forward(&net, &tape, &bound, &store, &views[0], &views[1], &cfg, &mut BatchStats::new()).unwrap();
            tape.value(l).item()
        };
        let (worst, least) = perturbation_range(&fx, &loss);
        if invariant {
            assert!(worst <= 1e-8, "invariant simsiam changed by {worst}");
        } else {
            assert!(least > 1e-12, "plain simsiam unchanged by some perturbation");
            assert!(worst > 1e-3, "plain simsiam changed by only {worst}");
        }
    }
}

#[test]
fn invariant_losses_pass_gradient_checks() {
    let group = FiniteGroup::new(GroupKind::Rot4Flip);
    let feats = Tensor::<f64>::randn(vec![3, 8, 2], 1.0, &mut rng(60));
    let keys = Tensor::<f64>::randn(vec![3, 8, 2], 1.0, &mut rng(61));
    let mut queue = FeatureQueue::new(8, 16);
    queue.fill_random(&mut rng(62)).unwrap();
    let err = grad_check(
        |t, x| {
            let q = embed(t, x, &group, true)?;
            let k = embed(t, t.constant(keys.clone()), &group, true)?;
            moco_loss(t, q, k, &queue, 0.2)
        },
        &feats,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-3, "moco {err}");

    let protos = unit_rows(&Tensor::randn(vec![5, 16], 1.0, &mut rng(63)));
    let others: Vec<Tensor<f64>> = (0..2).map(|i| Tensor::randn(vec![3, 8, 2], 1.0, &mut rng(64 + i))).collect();
    let err = grad_check(
        |t, x| {
            let mut z: Vec<_> = others
                .iter()
                .map(|o| embed(t, t.constant(o.clone()), &group, true))
                .collect::<Result<_, _>>()?;
            z.push(embed(t, x, &group, true)?);
            let c = t.constant(Tensor::from_fn(vec![16, 5], |i| protos.data()[(i % 5) * 16 + i / 5]));
            swav_loss(t, &z, c, 2, 0.1, 0.05, 3)
        },
        &feats,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-3, "swav {err}");

    let err = grad_check(
        |t, x| {
            let p2 = t.constant(others[0].clone());
            let z1 = t.constant(others[1].clone());
            let z2 = t.constant(keys.clone());
            simsiam_loss(t, [x, p2], [z1, z2], &group, true)
        },
        &feats,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-3, "simsiam {err}");
}

#[test]
fn moco_step_updates_queue_and_momentum_encoder() {
    let cfg = MocoConfig {
        queue_size: 10,
        ..MocoConfig::default()
    };
    assert_eq!((cfg.tau, cfg.momentum), (0.2, 0.999));
    assert_eq!(MocoConfig::default().queue_size, 4096);
    let mut store = ParamStore::<f64>::new();
    let net = ContrastiveNet::new(net_config(GroupKind::Rot4, false), &mut store, &mut rng(70)).unwrap();
    let opt = Sgd::new(0.05, 0.9, 1e-4, Schedule::Constant).unwrap();
    let mut state = MocoState::new(&net, store, opt, &cfg).unwrap();
    let mut r = rng(71);
    for step in 0..4 {
        let before_online = state.params.clone();
        let before_key = state.key.params().clone();
        let x1 = Tensor::randn(vec![3, 3, 8, 8], 1.0, &mut r);
        let x2 = Tensor::randn(vec![3, 3, 8, 8], 1.0, &mut r);
        let loss = moco_step(&net, &mut state, &x1, &x2, &cfg).unwrap();
        assert!(loss.is_finite());
        if step == 0 {
            assert_eq!(loss, 0.0);
        }
        assert_eq!(state.queue.len(), ((step + 1) * 3).min(10));
        assert!(!state.params.bit_equal(&before_online));
        let id = state.params.find("backbone.conv0.w").unwrap();
        let expected = before_key
            .get(id)
            .zip_map(state.params.get(id), |k, t| 0.999 * k + (1.0 - 0.999) * t)
            .unwrap();
        assert_eq!(state.key.params().get(id), &expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn sinkhorn_rows_sum_to_one(seed in any::<u64>(), b in 2usize..20, c in 2usize..12, iters in 1usize..5) {
        let scores = Tensor::<f64>::randn(vec![b, c], 1.0, &mut rng(seed));
        let q = sinkhorn_knopp(&scores, iters, 0.05).unwrap();
        for row in q.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
