use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rap_autodiff::{ParamStore, Tape, Tensor};
use rap_core::config::{BackboneConfig, PolicyConfig};
use rap_core::data::{generate_patchcue, Dataset, PatchCueParams};
use rap_core::eval::{confidence_half_width, evaluate, AttentionEval, EvalSpec};
use rap_core::metalearner::{compute_prototypes, linear_head_loss, protonet_loss, LinearHead};
use rap_core::nn::{Ctx, Mode};
use rap_core::RapModel;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mat(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(&[rows, cols], |_| r.random_range(-1.0..1.0))
}

#[test]
fn prototype_examples() {
    let tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap());
    let p = compute_prototypes(&s, &[0, 0], 1, 2).unwrap();
    assert_eq!(p.prototypes.value().data(), &[1.0, 1.0]);
    let single = tape.constant(mat(3, 4, 0));
    let p = compute_prototypes(&single, &[2, 0, 1], 3, 1).unwrap();
    let v = p.prototypes.value();
    assert_eq!(&v.data()[8..12], &single.value().data()[0..4]);
    assert_eq!(&v.data()[0..4], &single.value().data()[4..8]);
    assert!(compute_prototypes(&single, &[0, 0, 1], 3, 1).is_err());
    assert!(compute_prototypes(&single, &[0, 1], 3, 1).is_err());
}

#[test]
fn prototypes_ignore_support_order() {
    let tape = Tape::<f64>::new();
    let m = mat(6, 5, 1);
    let a = compute_prototypes(&tape.constant(m.clone()), &[0, 1, 2, 0, 1, 2], 3, 2).unwrap();
    let perm = [3, 1, 5, 0, 4, 2];
    let b = compute_prototypes(&tape.constant(m.gather_rows(&perm).unwrap()), &[0, 1, 2, 0, 1, 2], 3, 2).unwrap();
    for (x, y) in a.prototypes.value().data().iter().zip(b.prototypes.value().data()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn protonet_examples() {
    let tape = Tape::<f64>::new();
    let protos = compute_prototypes(
        &tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 10.0, 10.0]).unwrap()),
        &[0, 1],
        2,
        1,
    )
    .unwrap();
    let q = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    assert_eq!(protonet_loss(&q, &[0], &protos).unwrap().predicted, vec![0]);
    let eq = compute_prototypes(
        &tape.constant(Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap()),
        &[0, 1, 2, 3],
        4,
        1,
    )
    .unwrap();
    let centre = tape.constant(Tensor::zeros(&[1, 2]));
    let pred = protonet_loss(&centre, &[2], &eq).unwrap();
    assert!((pred.loss.value().data()[0] - 4f64.ln()).abs() < 1e-12);
}

/// Distances and softmax coded directly from the definitions.
fn oracle_loss(q: &Tensor<f64>, labels: &[usize], protos: &[Vec<f64>]) -> f64 {
    let d = q.shape()[1];
    let mut total = 0.0;
    for (i, row) in q.data().chunks(d).enumerate() {
        let logits: Vec<f64> = protos
            .iter()
            .map(|p| -row.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        total -= (logits[labels[i]].exp() / z).ln();
    }
    total / labels.len() as f64
}

#[test]
fn protonet_matches_brute_force_oracle() {
    for seed in 0..10 {
        let (way, shot, query, dim) = (5, 2, 3, 4);
        let support = mat(way * shot, dim, seed);
        let q = mat(way * query, dim, seed + 100);
        let s_labels: Vec<usize> = (0..way * shot).map(|i| i % way).collect();
        let q_labels: Vec<usize> = (0..way * query).map(|i| i / query).collect();
        let tape = Tape::<f64>::new();
        let protos = compute_prototypes(&tape.constant(support.clone()), &s_labels, way, shot).unwrap();
        let pred = protonet_loss(&tape.constant(q.clone()), &q_labels, &protos).unwrap();
        let oracle_protos: Vec<Vec<f64>> = (0..way)
            .map(|c| {
                (0..dim)
                    .map(|k| {
                        (0..way * shot)
                            .filter(|&i| s_labels[i] == c)
                            .map(|i| support.data()[i * dim + k])
                            .sum::<f64>()
                            / shot as f64
                    })
                    .collect()
            })
            .collect();
        let want = oracle_loss(&q, &q_labels, &oracle_protos);
        assert!((pred.loss.value().data()[0] - want).abs() < 1e-6);
        let logits = pred.logits.value();
        for row in logits.data().chunks(way) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let probs: f64 = row.iter().map(|v| (v - m).exp() / z).sum();
            assert!((probs - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn linear_head_examples() {
    let tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros(&[4, 10]));
    let (loss, _) = linear_head_loss(&uniform, &[0, 3, 9, 1]).unwrap();
    assert!((loss.value().data()[0] - 10f64.ln()).abs() < 1e-12);
    let perfect = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 60.0 } else { 0.0 }));
    let (loss, acc) = linear_head_loss(&perfect, &[0, 1, 2]).unwrap();
    assert!(loss.value().data()[0] < 1e-20);
    assert_eq!(acc, 1.0);
    assert!(linear_head_loss(&perfect, &[0, 1, 3]).is_err());
}

#[test]
fn linear_head_gradient_matches_finite_difference() {
    let mut store = ParamStore::<f64>::new();
    let head = LinearHead::new(&mut store, 6, 4, &mut rng(0));
    let emb = mat(5, 6, 3);
    let labels = [0, 3, 1, 1, 2];
    let loss_at = |store: &ParamStore<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Train, 1e-5);
        let (l, _) = linear_head_loss(&head.logits(&ctx, &tape.constant(emb.clone())).unwrap(), &labels).unwrap();
        l.value().data()[0]
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Train, 1e-5);
    let (l, _) = linear_head_loss(&head.logits(&ctx, &tape.constant(emb.clone())).unwrap(), &labels).unwrap();
    let g = tape.backward(l).unwrap();
    let grads = ctx.bound().grads(&store, &g);
    for id in [head.weight, head.bias] {
        let analytic = grads[id.index()].clone().unwrap();
        for k in 0..analytic.len() {
            let h = 1e-6;
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            assert!(
                (a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()).max(1e-6),
                "{a} vs {numeric}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn protonet_is_rigid_motion_invariant(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU, shift in prop::collection::vec(-5.0f64..5.0, 4)) {
        let (way, dim) = (5, 4);
        let support = mat(way, dim, seed);
        let q = mat(10, dim, seed ^ 1);
        let labels: Vec<usize> = (0..10).map(|i| i % way).collect();
        let (c, s) = (angle.cos(), angle.sin());
        let rotate = |t: &Tensor<f64>| {
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(dim) {
                let (x, y) = (row[0], row[2]);
                row[0] = c * x - s * y;
                row[2] = s * x + c * y;
            }
            out
        };
        let run = |s: Tensor<f64>, q: Tensor<f64>| {
            let tape = Tape::<f64>::new();
            let p = compute_prototypes(&tape.constant(s), &(0..way).collect::<Vec<_>>(), way, 1).unwrap();
            let pred = protonet_loss(&tape.constant(q), &labels, &p).unwrap();
            (pred.predicted, (*pred.logits.value()).clone(), pred.loss.value().data()[0])
        };
        let (p0, l0, loss0) = run(support.clone(), q.clone());
        let (p1, _, _) = run(rotate(&support), rotate(&q));
        prop_assert_eq!(&p0, &p1);
        let tr = |t: &Tensor<f64>| {
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(dim) {
                for (v, d) in row.iter_mut().zip(&shift) {
                    *v += d;
                }
            }
            out
        };
        let (p2, l2, loss2) = run(tr(&support), tr(&q));
        prop_assert_eq!(&p0, &p2);
        prop_assert!((loss0 - loss2).abs() < 1e-5);
        for (a, b) in l0.data().iter().zip(l2.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}

fn tiny_model(seed: u64) -> RapModel {
    let bb = BackboneConfig {
        input_hw: 16,
        channels: [8, 8, 8, 8],
        ..Default::default()
    };
    let pol = PolicyConfig {
        conv_channels: [2, 2, 2],
        ..Default::default()
    };
    RapModel::new(&bb, &pol, None, &mut rng(seed)).unwrap()
}

fn spec(steps: usize, attention: AttentionEval) -> EvalSpec {
    EvalSpec {
        steps,
        attention,
        deterministic: true,
        seed: 4,
    }
}

#[test]
fn perfectly_separable_toy_scores_one() {
    let colours = [[250u8, 10, 10], [10, 250, 10], [10, 10, 250], [200, 200, 20], [20, 120, 240]];
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (c, col) in colours.iter().enumerate() {
        for _ in 0..20 {
            pixels.extend((0..256).flat_map(|_| *col));
            labels.push(c);
        }
    }
    let data = Dataset::new(16, pixels, labels, 5).unwrap();
    let model = tiny_model(0);
    let report = evaluate(&model, &data, &[0, 1, 2, 3, 4], 5, 1, 16, 50, &spec(2, AttentionEval::Policy)).unwrap();
    assert_eq!(report.mean, 1.0);
    assert_eq!(report.half_width, 0.0);
}

#[test]
fn random_labels_score_chance() {
    let mut r = rng(9);
    let n = 600;
    let pixels = (0..n * 16 * 16 * 3).map(|_| r.random::<u8>()).collect();
    let labels = (0..n).map(|_| r.random_range(0..5)).collect();
    let data = Dataset::new(16, pixels, labels, 5).unwrap();
    let model = tiny_model(1);
    let report = evaluate(
        &model,
        &data,
        &[0, 1, 2, 3, 4],
        5,
        1,
        16,
        1000,
        &spec(1, AttentionEval::Policy),
    )
    .unwrap();
    assert!((report.mean - 0.2).abs() <= 0.02, "{}", report.mean);
}

#[test]
fn reports_are_deterministic_and_identity_matches_step_zero() {
    let p = PatchCueParams {
        hw: 16,
        ..Default::default()
    };
    let data = generate_patchcue(&p, &mut rng(0)).unwrap();
    let model = tiny_model(2);
    let classes = [0, 3, 7, 9, 12, 20];
    let a = evaluate(&model, &data, &classes, 5, 1, 16, 40, &spec(3, AttentionEval::Policy)).unwrap();
    let b = evaluate(&model, &data, &classes, 5, 1, 16, 40, &spec(3, AttentionEval::Policy)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_step.len(), 4);
    assert_eq!(a.mean, a.per_step[3]);
    let off = evaluate(&model, &data, &classes, 5, 1, 16, 40, &spec(3, AttentionEval::Identity)).unwrap();
    assert_eq!(off.mean, a.per_step[0]);
    assert!(a.per_step.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.half_width >= 0.0);
}

#[test]
fn half_width_shrinks_with_episode_count() {
    let p = PatchCueParams {
        hw: 16,
        ..Default::default()
    };
    let data = generate_patchcue(&p, &mut rng(0)).unwrap();
    let model = tiny_model(3);
    let classes: Vec<usize> = (0..25).collect();
    let s = spec(1, AttentionEval::Identity);
    let small = evaluate(&model, &data, &classes, 5, 1, 16, 150, &s).unwrap();
    let large = evaluate(&model, &data, &classes, 5, 1, 16, 600, &s).unwrap();
    let ratio = large.half_width / small.half_width;
    assert!((ratio - 0.5).abs() <= 0.5 * 0.15, "{ratio}");
}

#[test]
fn half_width_formula() {
    assert_eq!(confidence_half_width(&[0.5]), 0.0);
    assert_eq!(confidence_half_width(&[1.0; 10]), 0.0);
    let v = [0.2, 0.4, 0.6, 0.8];
    let sd = (((0.3f64).powi(2) + 0.1f64.powi(2)) * 2.0 / 3.0).sqrt();
    assert!((confidence_half_width(&v) - 1.96 * sd / 2.0).abs() < 1e-12);
}
