use patchcam_core::gradcheck::{check_layer, relative_error, GradReport};
use patchcam_core::{Layer, Rng, Tensor};

const CASES: u64 = 20;
const TOLERANCE: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn assert_report(what: &str, case: u64, r: GradReport) {
    assert!(
        r.max_relative_error < TOLERANCE,
        "{what} case {case}: relative error {:e} (analytic {:e}, numeric {:e})",
        r.max_relative_error,
        r.analytic,
        r.numeric
    );
}

fn check_kind(
    what: &str,
    make: impl Fn(&mut Rng, usize, usize) -> Layer,
    out_shape: impl Fn(usize, usize, usize) -> Vec<usize>,
) {
    for case in 0..CASES {
        let mut rng = Rng::new(1000 + case);
        let c = 1 + rng.below(3);
        let h = 2 + 2 * rng.below(3);
        let w = 2 + 2 * rng.below(3);
        let layer = make(&mut rng, c, c);
        let input = random(&[c, h, w], &mut rng);
        let projection = random(&out_shape(c, h, w), &mut rng);
        assert_report(what, case, check_layer(&layer, &input, &projection).unwrap());
    }
}

#[test]
fn conv3x3_gradients() {
    check_kind(
        "Conv3x3",
        |rng, out, inp| Layer::conv3x3(out + 1, inp, rng),
        |c, h, w| vec![c + 1, h, w],
    );
}

#[test]
fn relu_gradients() {
    check_kind("ReLU", |_, _, _| Layer::relu(), |c, h, w| vec![c, h, w]);
}

#[test]
fn maxpool_gradients() {
    check_kind(
        "MaxPool2x2",
        |_, _, _| Layer::max_pool(),
        |c, h, w| vec![c, h / 2, w / 2],
    );
}

#[test]
fn residual_gradients() {
    check_kind(
        "Residual",
        |rng, c, _| {
            Layer::residual(vec![
                Layer::conv3x3(c, c, rng),
                Layer::relu(),
                Layer::conv3x3(c, c, rng),
            ])
        },
        |c, h, w| vec![c, h, w],
    );
}

#[test]
fn gap_gradients() {
    check_kind("GAP", |_, _, _| Layer::global_avg_pool(), |c, _, _| vec![c]);
}

#[test]
fn dense_gradients() {
    for case in 0..CASES {
        let mut rng = Rng::new(2000 + case);
        let n = 1 + rng.below(8);
        let k = 2 + rng.below(4);
        let layer = Layer::dense(k, n, &mut rng);
        let input = random(&[n], &mut rng);
        let projection = random(&[k], &mut rng);
        assert_report("Dense", case, check_layer(&layer, &input, &projection).unwrap());
    }
}

#[test]
fn softmax_gradients() {
    for case in 0..CASES {
        let mut rng = Rng::new(3000 + case);
        let k = 2 + rng.below(5);
        let input = random(&[k], &mut rng);
        let projection = random(&[k], &mut rng);
        assert_report(
            "Softmax",
            case,
            check_layer(&Layer::softmax(), &input, &projection).unwrap(),
        );
    }
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    // the denominator floors at 1e-8
    assert!((relative_error(1e-12, 0.0) - 1e-4).abs() <= f64::EPSILON * 1e-4);
    assert_eq!(relative_error(1.0, 1.0), 0.0);
}
