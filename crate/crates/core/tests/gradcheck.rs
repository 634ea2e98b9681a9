mod common;

use common::{grad_case, max_grad_error, softmax_ce_logit_error, GRAD_KINDS};

#[test]
fn every_layer_kind_matches_central_differences() {
    for kind in GRAD_KINDS {
        for seed in 0..20 {
            let (model, x, y) = grad_case(kind, seed);
            let err = max_grad_error(model, &x, &y);
            assert!(err <= 1e-4, "{kind} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn softmax_cross_entropy_logit_gradient() {
    for seed in 0..20 {
        let err = softmax_ce_logit_error(seed);
        assert!(err <= 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    use fcos::model::TrainSession;
    use fcos::tensor::kernels::softmax_cross_entropy;
    use fcos::tensor::Tensor;

    let (mut model, x, y) = grad_case("conv1d", 3);
    model.set_frozen(true);
    let mut s = TrainSession::new();
    let logits = s.forward(&mut model, &x).unwrap();
    let (_, g) = softmax_cross_entropy(logits.data(), &y, 3);
    s.backward(&mut model, &Tensor::new(logits.shape().to_vec(), g).unwrap())
        .unwrap();
    for n in model.nodes() {
        for t in n.params.values() {
            assert!(t.grad().is_none(), "{} got a gradient", n.name());
        }
    }
}
