use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{assign_anchors, AnchorConfig, BBox, LabeledBox};
use crate::image::Planar;
use crate::inputs::{ModelInput, Variant};
use crate::losses::FocalParams;

pub(crate) fn tiny_spec(variant: Variant, num_classes: usize) -> ModelSpec {
    ModelSpec {
        anchor_config: AnchorConfig {
            pyramid_strides: vec![4, 8],
            scales: vec![1.0, 2.0],
            aspect_ratios: vec![0.5, 2.0],
            base_size: 6.0,
        },
        backbone_widths: vec![4, 6, 8],
        convs_per_stage: 1,
        pyramid_width: 6,
        head_depth: 1,
        ..ModelSpec::new(variant, num_classes)
    }
}

fn random_input(variant: Variant, w: usize, h: usize, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = variant.input_channels();
    let data = (0..w * h * c).map(|_| rng.random_range(0.0..1.0)).collect();
    ModelInput::from_planes(variant, Planar::from_vec(w, h, c, data).unwrap()).unwrap()
}

#[test]
fn first_layer_width_follows_variant() {
    let b = build_model(&ModelSpec::new(Variant::Baseline, 3), 0).unwrap();
    let d = build_model(&ModelSpec::new(Variant::Double, 3), 0).unwrap();
    assert_eq!(b.params["backbone.stage0.conv0.weight"].shape[1], 3);
    assert_eq!(d.params["backbone.stage0.conv0.weight"].shape[1], 6);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = ModelSpec::new(Variant::Double, 3);
    s.input_channels = 3;
    assert!(build_model(&s, 0).is_err());
    let mut s = ModelSpec::new(Variant::Baseline, 3);
    s.pyramid_levels = vec![16];
    assert!(matches!(build_model(&s, 0), Err(DetectorError::InvalidSpec(_))));
    let mut s = ModelSpec::new(Variant::Baseline, 0);
    s.num_classes = 0;
    assert!(s.validate().is_err());
}

#[test]
fn initialization_is_deterministic() {
    let spec = ModelSpec::new(Variant::Flow, 3);
    assert_eq!(build_model(&spec, 42).unwrap(), build_model(&spec, 42).unwrap());
    assert_ne!(build_model(&spec, 42).unwrap(), build_model(&spec, 43).unwrap());
}

#[test]
fn parameters_are_f32_representable() {
    let m = build_model(&ModelSpec::new(Variant::Double, 2), 1).unwrap();
    assert!(m.params.values().flat_map(|p| &p.data).all(|&v| v == v as f32 as f64));
}

#[test]
fn initial_foreground_probability_matches_prior() {
    let m = build_model(&ModelSpec::new(Variant::Double, 3), 7).unwrap();
    let out = m.forward(&random_input(Variant::Double, 64, 64, 1)).unwrap();
    let (probs, _) = flatten(&out);
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    assert!((0.005..=0.02).contains(&mean), "{mean}");
}

#[test]
fn output_shapes_follow_strides() {
    let spec = ModelSpec {
        anchor_config: AnchorConfig {
            pyramid_strides: vec![8],
            scales: vec![1.0, 1.5, 2.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            base_size: 16.0,
        },
        pyramid_levels: vec![8],
        ..ModelSpec::new(Variant::Double, 3)
    };
    let m = build_model(&spec, 0).unwrap();
    let out = m.forward(&random_input(Variant::Double, 64, 64, 2)).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!((out[0].width, out[0].height), (8, 8));
    assert_eq!(out[0].cls.len(), 8 * 8 * 27);
    assert_eq!(out[0].reg.len(), 8 * 8 * 36);

    // non-divisible sizes are padded to the anchor grid
    let m = build_model(&ModelSpec::new(Variant::Baseline, 2), 0).unwrap();
    let input = random_input(Variant::Baseline, 50, 30, 3);
    let out = m.forward(&input).unwrap();
    let anchors = m.spec.anchors(50, 30).unwrap();
    let (probs, regs) = flatten(&out);
    assert_eq!(regs.len(), anchors.len());
    assert_eq!(probs.len(), anchors.len() * 2);
    assert_eq!((out[0].width, out[0].height), (14, 8));
}

#[test]
fn zero_input_gives_finite_outputs() {
    let m = build_model(&ModelSpec::new(Variant::Flow, 3), 0).unwrap();
    let input = ModelInput::from_planes(Variant::Flow, Planar::zeros(32, 32, 6)).unwrap();
    let out = m.forward(&input).unwrap();
    assert!(out.iter().all(|o| o.cls.iter().chain(&o.reg).all(|v| v.is_finite())));
}

#[test]
fn channel_mismatch_is_an_error() {
    let m = build_model(&ModelSpec::new(Variant::Baseline, 3), 0).unwrap();
    let input = random_input(Variant::Double, 16, 16, 0);
    assert!(matches!(m.forward(&input), Err(DetectorError::ChannelMismatch { expected: 3, got: 6 })));
}

#[test]
fn forward_is_deterministic() {
    let m = build_model(&ModelSpec::new(Variant::Double, 3), 5).unwrap();
    let input = random_input(Variant::Double, 32, 32, 9);
    assert_eq!(m.forward(&input).unwrap(), m.forward(&input).unwrap());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let spec = tiny_spec(Variant::Double, 2);
    assert!(spec.parameter_count() <= 5000);
    let mut m = build_model(&spec, 3).unwrap();
    // larger head weights so the classification path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in m.params.values_mut() {
        for v in p.data.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let input = random_input(Variant::Double, 32, 32, 6);
    let anchors = m.spec.anchors(32, 32).unwrap();
    let gts = [
        LabeledBox { bbox: BBox::new(3.0, 4.0, 12.0, 20.0).unwrap(), class_id: 1 },
        LabeledBox { bbox: BBox::new(18.0, 16.0, 30.0, 22.0).unwrap(), class_id: 0 },
    ];
    let assignment = assign_anchors(&anchors, &gts, 0.5, 0.4).unwrap();
    let focal = FocalParams::new(2.0, vec![1.3, 0.7]).unwrap();
    let (_, grads) = m.loss_and_gradients(&input, &assignment, &focal, 1.0).unwrap();

    let names: Vec<String> = m.params.keys().cloned().collect();
    let h = 1e-6;
    let mut checked = 0;
    for (ni, name) in names.iter().enumerate() {
        for idx in [0, m.params[name].len() / 2, m.params[name].len() - 1] {
            let mut up = m.clone();
            up.params.get_mut(name).unwrap().data[idx] += h;
            let mut dn = m.clone();
            dn.params.get_mut(name).unwrap().data[idx] -= h;
            let lu = up.loss(&input, &assignment, &focal, 1.0).unwrap().total;
            let ld = dn.loss(&input, &assignment, &focal, 1.0).unwrap().total;
            let num = (lu - ld) / (2.0 * h);
            let ana = grads[name][idx];
            assert!(
                (num - ana).abs() <= 1e-3 * num.abs().max(ana.abs()) + 1e-8,
                "{ni} {name}[{idx}]: numeric {num} analytic {ana}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 3 * names.len());
}

#[test]
fn prediction_thresholds() {
    let m = build_model(&ModelSpec::new(Variant::Double, 3), 0).unwrap();
    let input = random_input(Variant::Double, 64, 64, 1);
    let all = PredictOptions { score_threshold: 1.0, ..Default::default() };
    assert!(m.predict(&input, &all).unwrap().is_empty());
    let untrained = PredictOptions { score_threshold: 0.3, ..Default::default() };
    assert!(m.predict(&input, &untrained).unwrap().len() <= 2);
    let capped = PredictOptions { score_threshold: 0.0, max_detections: 7, ..Default::default() };
    let dets = m.predict(&input, &capped).unwrap();
    assert_eq!(dets.len(), 7);
    assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn transfer_copies_everything_but_a_resized_classifier() {
    let src = build_model(&ModelSpec::new(Variant::Double, 3), 1).unwrap();
    let same = build_model(&ModelSpec::new(Variant::Double, 3), 2).unwrap();
    let t = transfer_weights(&src, &same).unwrap();
    assert_eq!(t.params, src.params);

    let dst = build_model(&ModelSpec::new(Variant::Double, 5), 2).unwrap();
    let t = transfer_weights(&src, &dst).unwrap();
    let classifier = classifier_parameter_names();
    for (name, p) in &t.params {
        if classifier.contains(name) {
            assert_eq!(p, &dst.params[name]);
        } else {
            assert_eq!(p, &src.params[name], "{name}");
        }
    }
    let input = random_input(Variant::Double, 32, 32, 4);
    let a = src.forward(&input).unwrap();
    let b = t.forward(&input).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.reg, y.reg);
    }

    let other = build_model(&ModelSpec::new(Variant::Baseline, 3), 0).unwrap();
    assert!(matches!(transfer_weights(&src, &other), Err(DetectorError::TransferMismatch(_))));
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let mut m = build_model(&tiny_spec(Variant::Flow, 2), 8).unwrap();
    m.step = 17;
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    assert_eq!(&buf[..6], CHECKPOINT_MAGIC);
    assert_eq!(read_checkpoint(&buf[..]).unwrap(), m);
    assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(DetectorError::Checkpoint(_))));
    let mut bad = buf.clone();
    bad[3] = b'X';
    assert!(read_checkpoint(&bad[..]).is_err());
    let mut extra = buf;
    extra.push(0);
    assert!(read_checkpoint(&extra[..]).is_err());
}
