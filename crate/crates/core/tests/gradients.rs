mod common;

use common::{gradient_error, random_data};
use usvs::nn::{build_classifier, build_regressor, LayerSpec, LossKind, Network, Shape};

fn check(input: Shape, specs: &[LayerSpec], loss: LossKind, what: &str) {
    let net = Network::new(input, specs, loss, 11).unwrap();
    let (x, t) = random_data(&net, 3, 5);
    let err = gradient_error(&net, &x, &t, 400, 2);
    assert!(err < 1e-2, "{what}: relative gradient error {err}");
}

#[test]
fn dense_layer() {
    check(Shape::Flat(7), &[LayerSpec::Dense { neurons: 4 }, LayerSpec::LinearOutput], LossKind::Mse, "dense");
}

#[test]
fn conv_layer() {
    check(
        Shape::Image { c: 2, h: 7, w: 6 },
        &[LayerSpec::Conv2d { filters: 3, kernel: 3 }, LayerSpec::Flatten, LayerSpec::Dense { neurons: 2 }, LayerSpec::LinearOutput],
        LossKind::Mse,
        "conv",
    );
}

#[test]
fn relu_layer() {
    check(
        Shape::Flat(6),
        &[LayerSpec::Dense { neurons: 8 }, LayerSpec::Relu, LayerSpec::Dense { neurons: 3 }, LayerSpec::LinearOutput],
        LossKind::Mse,
        "relu",
    );
}

#[test]
fn maxpool_layer() {
    check(
        Shape::Image { c: 1, h: 9, w: 8 },
        &[
            LayerSpec::Conv2d { filters: 2, kernel: 3 },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { neurons: 2 },
            LayerSpec::LinearOutput,
        ],
        LossKind::Mse,
        "maxpool",
    );
}

#[test]
fn flatten_and_softmax_layers() {
    check(
        Shape::Image { c: 2, h: 3, w: 3 },
        &[LayerSpec::Flatten, LayerSpec::Dense { neurons: 3 }, LayerSpec::Softmax],
        LossKind::CrossEntropy,
        "softmax",
    );
}

#[test]
fn full_classifier_at_toy_size() {
    let net = build_classifier(Shape::Image { c: 1, h: 16, w: 16 }, 4).unwrap();
    let (x, t) = random_data(&net, 2, 8);
    let err = gradient_error(&net, &x, &t, 60, 3);
    assert!(err < 1e-2, "classifier: relative gradient error {err}");
}

#[test]
fn full_regressor_at_toy_size() {
    let net = build_regressor(Shape::Image { c: 1, h: 36, w: 36 }, 4).unwrap();
    let (x, t) = random_data(&net, 2, 9);
    let err = gradient_error(&net, &x, &t, 60, 3);
    assert!(err < 1e-2, "regressor: relative gradient error {err}");
}
