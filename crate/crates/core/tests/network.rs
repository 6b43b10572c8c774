//! Black-box behavior of the aggregation network across all five variants:
//! shape preservation, output range guarantees, identity initialization,
//! parameter bookkeeping, and input validation.

use a2net_core::autodiff::{no_grad, Shape, Tensor};
use a2net_core::net::{Model, NetError, NetworkConfig, Variant};
use a2net_testkit::{interior_model_input, nudge_heads, tensor_uniform};

fn small(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        variant,
        levels: 2,
        k_encoder: 8,
        k_y: 6,
        k_uv: 5,
        seed: 3,
    }
}

#[test]
fn every_variant_preserves_extent_and_output_range() {
    for variant in Variant::ALL {
        let yuv = variant.expects_yuv();
        for (h, w) in [(16, 16), (24, 40), (8, 64)] {
            let mut model = Model::build(small(variant)).unwrap();
            nudge_heads(&mut model, 0.3, 7);
            let input = interior_model_input(h, w, yuv, 100 + h as u64);
            let out = no_grad(|| model.forward(&input)).unwrap();
            assert_eq!(out.shape(), Shape::new(1, 3, h, w), "{variant:?} at {h}x{w}");
            let plane = h * w;
            for (i, v) in out.data().iter().enumerate() {
                let (lo, hi) = if yuv && i >= plane {
                    (-0.5, 0.5)
                } else {
                    (0.0, 1.0)
                };
                assert!(
                    (lo..=hi).contains(v),
                    "{variant:?}: output {v} outside [{lo}, {hi}]"
                );
            }
        }
    }
}

#[test]
fn fresh_models_reproduce_their_input_bit_for_bit() {
    // Residual heads start at zero and the output clamps are inactive on
    // in-range inputs, so an untrained model is the identity.
    for variant in Variant::ALL {
        let model = Model::build(small(variant)).unwrap();
        let input = interior_model_input(16, 24, variant.expects_yuv(), 42);
        let out = no_grad(|| model.forward(&input)).unwrap();
        assert_eq!(out.data(), input.data(), "{variant:?}");
    }
}

#[test]
fn batched_inputs_run_each_image_independently() {
    let mut model = Model::build(small(Variant::A2Net)).unwrap();
    nudge_heads(&mut model, 0.3, 11);
    let a = interior_model_input(16, 16, true, 1);
    let b = interior_model_input(16, 16, true, 2);
    let mut stacked = a.data().to_vec();
    stacked.extend_from_slice(b.data());
    let batch = Tensor::leaf(Shape::new(2, 3, 16, 16), stacked, false).unwrap();

    let out = no_grad(|| model.forward(&batch)).unwrap();
    let out_a = no_grad(|| model.forward(&a)).unwrap();
    let out_b = no_grad(|| model.forward(&b)).unwrap();
    let half = out.numel() / 2;
    assert_eq!(&out.data()[..half], out_a.data());
    assert_eq!(&out.data()[half..], out_b.data());
}

#[test]
fn rejects_extents_that_do_not_divide_by_the_stride_stack() {
    let model = Model::build(small(Variant::A2Net)).unwrap();
    let bad = tensor_uniform(Shape::new(1, 3, 18, 16), 0.0, 1.0, 5);
    match model.forward(&bad) {
        Err(NetError::Divisibility {
            height: 18,
            width: 16,
            multiple: 4,
        }) => {}
        other => panic!("expected a divisibility error, got {other:?}"),
    }
}

#[test]
fn rejects_inputs_without_three_channels() {
    let model = Model::build(small(Variant::A2Net)).unwrap();
    let bad = tensor_uniform(Shape::new(1, 1, 16, 16), 0.0, 1.0, 5);
    match model.forward(&bad) {
        Err(NetError::InputChannels { got: 1 }) => {}
        other => panic!("expected a channel-count error, got {other:?}"),
    }
}

#[test]
fn rejects_degenerate_configs() {
    let mut cfg = small(Variant::A2Net);
    cfg.levels = 0;
    assert!(matches!(
        Model::build(cfg),
        Err(NetError::InvalidConfig { .. })
    ));
    let mut cfg = small(Variant::A2Net);
    cfg.k_encoder = 0;
    assert!(matches!(
        Model::build(cfg),
        Err(NetError::InvalidConfig { .. })
    ));
}

#[test]
fn set_param_changes_the_forward_pass_and_validates_its_input() {
    let mut model = Model::build(small(Variant::A2NetRgb)).unwrap();
    let input = interior_model_input(16, 16, false, 9);
    let before = no_grad(|| model.forward(&input)).unwrap();

    let numel = model.params().get("decoder.head.bias").unwrap().numel();
    model
        .set_param("decoder.head.bias", vec![0.25; numel])
        .unwrap();
    let after = no_grad(|| model.forward(&input)).unwrap();
    assert_ne!(before.data(), after.data());

    assert!(matches!(
        model.set_param("decoder.head.bias", vec![0.0; numel + 1]),
        Err(NetError::InvalidConfig { .. })
    ));
    assert!(matches!(
        model.set_param("decoder.head.missing", vec![0.0; 4]),
        Err(NetError::UnknownNode { .. })
    ));
}

#[test]
fn builds_are_deterministic_in_the_seed() {
    let a = Model::build(small(Variant::A2Net)).unwrap();
    let b = Model::build(small(Variant::A2Net)).unwrap();
    for (name, t) in a.params() {
        assert_eq!(t.data(), b.params().get(name).unwrap().data(), "{name}");
    }

    let mut other = small(Variant::A2Net);
    other.seed = 4;
    let c = Model::build(other).unwrap();
    let differs = a
        .params()
        .iter()
        .any(|(name, t)| t.data() != c.params().get(name).unwrap().data());
    assert!(differs, "reseeding must change the initialization");
}

#[test]
fn default_parameter_counts_are_exact() {
    let expected = [
        (Variant::A2Net, 403_571),
        (Variant::A2Net32, 463_715),
        (Variant::A2NetRgb, 312_803),
        (Variant::A2NetYuv, 312_803),
        (Variant::General, 257_507),
    ];
    for (variant, count) in expected {
        let model = Model::build(NetworkConfig::new(variant)).unwrap();
        assert_eq!(model.param_count(), count, "{variant:?}");
    }
}

#[test]
fn variant_names_round_trip_through_the_parser() {
    for variant in Variant::ALL {
        assert_eq!(Variant::parse(variant.as_str()), Some(variant));
    }
    assert_eq!(Variant::parse("a2net64"), None);
}
