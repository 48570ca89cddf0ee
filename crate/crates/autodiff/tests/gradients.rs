use proptest::prelude::*;
use rap_autodiff::gradcheck::suite::{run_suite, OPS};
use rap_autodiff::gradcheck::{grad_check, GradCheckConfig};
use rap_autodiff::{AutodiffError, Tape, Tensor};

#[test]
fn every_op_matches_central_differences() {
    let summaries = run_suite(100, 0xA11CE, &GradCheckConfig::default());
    assert_eq!(summaries.len(), OPS.len());
    for s in &summaries {
        assert!(
            s.passed(),
            "{}: {} of {} instances failed, worst rel error {:.3e}, first error {:?}",
            s.op,
            s.failures,
            s.instances,
            s.worst_rel_error,
            s.first_error
        );
    }
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let loss = x.mul(&x).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(&x).data(), &[2.0, 4.0]);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::ones(&[3]));
    let w = tape.leaf(Tensor::ones(&[2, 2]));
    let loss = x.sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(&w).is_none());
    assert_eq!(grads.wrt(&w), Tensor::zeros(&[2, 2]));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::ones(&[3]));
    let err = tape.backward(x.relu().unwrap()).unwrap_err();
    assert_eq!(err, AutodiffError::NonScalarLoss { shape: vec![3] });
}

#[test]
fn backward_after_clear_is_an_error() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::ones(&[3]));
    let loss = x.sum().unwrap();
    tape.clear();
    assert!(matches!(tape.backward(loss), Err(AutodiffError::TapeCleared { .. })));
    assert!(matches!(x.relu(), Err(AutodiffError::TapeCleared { .. })));
}

#[test]
fn sigmoid_affine_on_eight_dims() {
    let mut rng = rap_autodiff::gradcheck::suite::SplitMix::new(8);
    let point = rng.tensor(&[1, 8], -1.0, 1.0);
    let w = rng.tensor(&[8, 1], -1.0, 1.0);
    let b = rng.tensor(&[1], -1.0, 1.0);
    let report = grad_check(
        move |tape, x| {
            let w = tape.constant(w.clone());
            let b = tape.constant(b.clone());
            x.affine(&w, &b)?.sigmoid()?.sum()
        },
        &point,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_cross_entropy_on_five_logits() {
    let point = Tensor::new(vec![1, 5], vec![0.3, -1.2, 2.0, 0.1, -0.4]).unwrap();
    let report = grad_check(|_tape, x| x.softmax_cross_entropy(&[3]), &point, 1e-3).unwrap();
    assert!(report.passed(), "{report:?}");
}

fn graph_gradient(seed: u64) -> Vec<u32> {
    let mut rng = rap_autodiff::gradcheck::suite::SplitMix::new(seed);
    let x = rng.tensor(&[2, 4, 4, 2], -1.0, 1.0).cast::<f32>();
    let w = rng.tensor(&[3, 3, 2, 3], -1.0, 1.0).cast::<f32>();
    let tape = Tape::<f32>::new();
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let gamma = tape.leaf(Tensor::ones(&[3]));
    let beta = tape.leaf(Tensor::zeros(&[3]));
    let (y, _) = xv.conv2d(&wv).unwrap().batch_norm(&gamma, &beta, 1e-5).unwrap();
    let loss = y
        .relu()
        .unwrap()
        .max_pool2()
        .unwrap()
        .global_avg_pool()
        .unwrap()
        .mean()
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    grads.wrt(&wv).data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn repeated_passes_give_bit_identical_gradients() {
    assert_eq!(graph_gradient(3), graph_gradient(3));
}

proptest! {
    #[test]
    fn multiply_by_ones_and_add_zero_are_bit_exact(values in proptest::collection::vec(-1e6f32..1e6f32, 1..64)) {
        let n = values.len();
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![n], values.clone()).unwrap());
        let ones = tape.constant(Tensor::ones(&[n]));
        let zeros = tape.constant(Tensor::zeros(&[n]));
        let prod = x.mul(&ones).unwrap().value();
        let sum = x.add(&zeros).unwrap().value();
        for ((a, b), c) in values.iter().zip(prod.data()).zip(sum.data()) {
            // -0.0 + 0.0 rounds to +0.0, so compare zeros by value
            if *a == 0.0 {
                prop_assert_eq!(*c, 0.0);
                prop_assert_eq!(a.to_bits(), b.to_bits());
            } else {
                prop_assert_eq!(a.to_bits(), b.to_bits());
                prop_assert_eq!(a.to_bits(), c.to_bits());
            }
        }
    }

    #[test]
    fn batch_norm_training_output_is_standardized(
        values in proptest::collection::vec(-5.0f64..5.0, 24),
        scale in 0.1f64..10.0,
    ) {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![4, 2, 1, 3], values.iter().map(|v| v * scale).collect()).unwrap());
        let gamma = tape.constant(Tensor::ones(&[3]));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let (y, _) = x.batch_norm(&gamma, &beta, 1e-5).unwrap();
        let y = y.value();
        for k in 0..3 {
            let col: Vec<f64> = y.data().iter().skip(k).step_by(3).copied().collect();
            let raw: Vec<f64> = values.iter().skip(k).step_by(3).map(|v| v * scale).collect();
            let rm = raw.iter().sum::<f64>() / 8.0;
            let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / 8.0;
            // variance only reaches 1 when the batch variance dominates eps
            prop_assume!(rv > 1e-1);
            let m = col.iter().sum::<f64>() / 8.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-4);
            prop_assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
