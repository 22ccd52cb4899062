use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
    t(shape, data).requiring_grad()
}

#[test]
fn conv_output_shape_first_layer() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::full([64, 64, 3], 0.5).unwrap());
    let k = tape.leaf(&Tensor::full([3, 3, 3, 32], 0.01).unwrap());
    let b = tape.leaf(&Tensor::zeros([32]).unwrap());
    let y = tape.conv2d(x, k, b, 1).unwrap();
    assert_eq!(tape.shape(y), &[62, 62, 32]);
}

#[test]
fn conv_identity_one_by_one() {
    let mut tape = Tape::new();
    let input = Tensor::from_fn([4, 4, 32], |i| (i as f64 * 0.37).sin()).unwrap();
    let kernel = Tensor::from_fn([1, 1, 32, 32], |i| if i / 32 == i % 32 { 1.0 } else { 0.0 }).unwrap();
    let x = tape.constant(&input);
    let k = tape.constant(&kernel);
    let b = tape.constant(&Tensor::zeros([32]).unwrap());
    let y = tape.conv2d(x, k, b, 1).unwrap();
    assert_eq!(tape.value(y), input.data());
}

#[test]
fn conv_sum_of_ones() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::full([3, 3, 1], 1.0).unwrap());
    let k = tape.constant(&Tensor::full([3, 3, 1, 1], 1.0).unwrap());
    let b = tape.constant(&Tensor::zeros([1]).unwrap());
    let y = tape.conv2d(x, k, b, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1]);
    assert_eq!(tape.value(y), &[9.0]);
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros([4, 4, 3]).unwrap());
    let k_bad_c = tape.constant(&Tensor::zeros([3, 3, 2, 8]).unwrap());
    let k_big = tape.constant(&Tensor::zeros([5, 5, 3, 8]).unwrap());
    let b = tape.constant(&Tensor::zeros([8]).unwrap());
    assert!(matches!(tape.conv2d(x, k_bad_c, b, 1), Err(Error::Shape(_))));
    assert!(matches!(tape.conv2d(x, k_big, b, 1), Err(Error::Shape(_))));
    let k = tape.constant(&Tensor::zeros([3, 3, 3, 8]).unwrap());
    assert!(tape.conv2d(x, k, b, 0).is_err());
    let b_bad = tape.constant(&Tensor::zeros([7]).unwrap());
    assert!(matches!(tape.conv2d(x, k, b_bad, 1), Err(Error::Shape(_))));
}

#[test]
fn conv_stride_output_formula() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros([2, 9, 8, 3]).unwrap());
    let k = tape.constant(&Tensor::zeros([3, 2, 3, 5]).unwrap());
    let b = tape.constant(&Tensor::zeros([5]).unwrap());
    let y = tape.conv2d(x, k, b, 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 4, 5]);
}

#[test]
fn avgpool_floor_shapes_and_constants() {
    for (h, expected) in [(29, 14), (62, 31), (12, 6)] {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full([h, h, 32], 0.25).unwrap());
        let y = tape.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[expected, expected, 32]);
        assert!(tape.value(y).iter().all(|&v| v == 0.25));
    }
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros([1, 5, 1]).unwrap());
    assert!(tape.avgpool2d(x, 2, 2).is_err());
}

#[test]
fn avgpool_means_windows() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2, 2, 1], vec![1.0, 2.0, 3.0, 6.0]));
    let y = tape.avgpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y), &[3.0]);
}

#[test]
fn batchnorm_train_on_standardized_input() {
    // two channels, each with mean 0 and unit (biased) variance
    let data = vec![1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0];
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[4, 2], data.clone()));
    let g = tape.constant(&Tensor::full([2], 1.0).unwrap());
    let b = tape.constant(&Tensor::zeros([2]).unwrap());
    let mut stats = BatchNormStats::new(2);
    let y = tape
        .batchnorm(x, g, b, &mut stats, Mode::Train, 0.99, 1e-12)
        .unwrap();
    for (a, e) in tape.value(y).iter().zip(&data) {
        assert!((a - e).abs() < 1e-9);
    }
    // running stats moved 1% towards the batch moments
    assert!((stats.var[0] - 1.0).abs() < 1e-12);
    assert_eq!(stats.mean, vec![0.0, 0.0]);
}

#[test]
fn batchnorm_infer_uses_running_stats() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::full([1, 1, 1], 0.5).unwrap());
    let g = tape.constant(&Tensor::full([1], 2.0).unwrap());
    let b = tape.constant(&Tensor::full([1], 1.0).unwrap());
    let mut stats = BatchNormStats::new(1);
    let eps = 1e-5;
    let y = tape
        .batchnorm(x, g, b, &mut stats, Mode::Infer, 0.99, eps)
        .unwrap();
    let expected = 2.0 * 0.5 / (1.0 + eps).sqrt() + 1.0;
    assert!((tape.value(y)[0] - expected).abs() < 1e-15);
    assert!((tape.value(y)[0] - 2.0).abs() < 1e-5);
    assert_eq!(stats, BatchNormStats::new(1));
}

#[test]
fn batchnorm_rejects_nonpositive_epsilon() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros([2, 1]).unwrap());
    let g = tape.constant(&Tensor::zeros([1]).unwrap());
    let mut stats = BatchNormStats::new(1);
    for eps in [0.0, -1e-5] {
        let r = tape.batchnorm(x, g, g, &mut stats, Mode::Train, 0.99, eps);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}

#[test]
fn dense_identity_and_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[3], vec![1.0, -2.0, 0.5]));
    let w = tape.constant(&Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }).unwrap());
    let b = tape.constant(&Tensor::zeros([3]).unwrap());
    let y = tape.dense(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y), &[1.0, -2.0, 0.5]);

    let w_bad = tape.constant(&Tensor::zeros([4, 2]).unwrap());
    assert!(matches!(tape.dense(x, w_bad, None), Err(Error::Shape(_))));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2], vec![0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let x = tape.constant(&t(&[2], vec![1000.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y);
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[3], vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
    let z = tape.constant(&t(&[1], vec![0.0]));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s), &[0.5]);

    let a = tape.constant(&t(&[2], vec![1.0, 2.0]));
    let b = tape.constant(&t(&[2], vec![3.0, 4.0]));
    let sum = tape.add(a, b).unwrap();
    let prod = tape.mul(a, b).unwrap();
    assert_eq!(tape.value(sum), &[4.0, 6.0]);
    assert_eq!(tape.value(prod), &[3.0, 8.0]);
    let c = tape.constant(&t(&[3], vec![0.0; 3]));
    assert!(tape.add(a, c).is_err());
}

#[test]
fn concat_three_bottlenecks_on_channels() {
    let mut tape = Tape::new();
    let parts: Vec<Var> = (0..3)
        .map(|k| tape.constant(&Tensor::full([4, 4, 32], k as f64).unwrap()))
        .collect();
    let y = tape.concat(&parts, 2).unwrap();
    assert_eq!(tape.shape(y), &[4, 4, 96]);
    let first_pixel = &tape.value(y)[..96];
    for (c, &v) in first_pixel.iter().enumerate() {
        assert_eq!(v, (c / 32) as f64);
    }
    let bad = tape.constant(&Tensor::zeros([4, 3, 32]).unwrap());
    assert!(tape.concat(&[parts[0], bad], 2).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(&param(&[2, 3], vec![0.3; 6]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(&param(&[3], vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

    // a second sweep accumulates
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(&param(&[3], vec![1.0, 2.0, 3.0]));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(Error::Shape(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(&param(&[2], vec![1.0, 2.0]));
    let x = tape.leaf(&param(&[2], vec![3.0, 4.0]));
    let p = tape.mul(c, x).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    assert_eq!(tape.tensor(x).grad().unwrap(), &[1.0, 2.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&param(&[3], vec![-1.0, 0.0, 1.0]));
    let r = tape.relu(x);
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_fn([2, 8, 8, 3], |i| (i as f64).cos()).unwrap());
        let k = tape.constant(&Tensor::from_fn([3, 3, 3, 4], |i| (i as f64 * 0.1).sin()).unwrap());
        let b = tape.constant(&Tensor::zeros([4]).unwrap());
        let y = tape.conv2d(x, k, b, 1).unwrap();
        let p = tape.avgpool2d(y, 2, 2).unwrap();
        let f = tape.flatten(p).unwrap();
        let s = tape.softmax(f).unwrap();
        tape.value(s).to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
