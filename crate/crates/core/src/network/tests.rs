use super::*;
use crate::autodiff::{ConvGeometry, Graph, Mode};
use crate::tensor::Tensor;

fn tiny() -> ModelConfig {
    ModelConfig::desk().with_input_size(16)
}

#[test]
fn build_is_deterministic_per_seed() {
    let a = build_model::<f32>(&ModelConfig::desk(), 42).unwrap();
    let b = build_model::<f32>(&ModelConfig::desk(), 42).unwrap();
    let c = build_model::<f32>(&ModelConfig::desk(), 43).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(!a.bitwise_eq(&c));
    a.validate().unwrap();
}

#[test]
fn desk_parameter_count_is_golden() {
    // Closed form: per level 9*f*(cin + f) + 4f for the two conv-bn pairs.
    let f = [16usize, 32, 64, 128];
    let mut cin = 1;
    let mut skips = Vec::new();
    let mut expected = 0;
    for &x in &f {
        expected += 9 * x * (cin + x) + 4 * x;
        cin += x;
        skips.push(cin);
    }
    expected += 4 * (9 * 256 * cin + 2 * 256);
    let ups = [32usize, 64, 128, 256];
    for l in 0..4 {
        expected += 9 * f[l] * (ups[l] + skips[l] + f[l]) + 4 * f[l];
    }
    expected += 4 * 16 + 4;
    assert_eq!(expected, 3_531_172);
    let w = build_model::<f32>(&ModelConfig::desk(), 1).unwrap();
    assert_eq!(w.parameter_count(), 3_531_172);
    assert_eq!(Layout::of(&ModelConfig::desk()).unwrap().parameter_count(), 3_531_172);
}

#[test]
fn three_levels_and_bad_size_are_rejected() {
    let mut c = ModelConfig::desk();
    c.base_filters.pop();
    assert!(build_model::<f32>(&c, 0).is_err());
    assert!(build_model::<f32>(&ModelConfig::desk().with_input_size(40), 0).is_err());
}

#[test]
fn parameter_names_follow_the_block_structure() {
    let w = build_model::<f32>(&tiny(), 0).unwrap();
    let names: Vec<&str> = w.params.keys().map(String::as_str).collect();
    assert_eq!(names[0], "enc1.conv1.kernel");
    assert!(names.contains(&"bottleneck.branch4.conv.kernel"));
    assert_eq!(names[names.len() - 2..], ["head.kernel", "head.bias"]);
    assert_eq!(w.params["dec1.conv1.kernel"].shape(), [16, 32 + 17, 3, 3]);
    assert_eq!(w.params["bottleneck.branch1.conv.kernel"].shape(), [256, 241, 3, 3]);
    assert_eq!(w.running.len(), 20);
}

fn zero_kernels(w: &mut ModelWeights<f64>) {
    for (name, t) in w.params.iter_mut() {
        if name.ends_with(".kernel") {
            *t = Tensor::zeros(t.shape());
        }
    }
}

#[test]
fn encoder_block_hand_trace_with_zero_kernels() {
    let mut w = build_model::<f64>(&tiny(), 0).unwrap();
    zero_kernels(&mut w);
    let beta1: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.5).collect();
    let beta2: Vec<f64> = (0..16).map(|i| 0.75 - i as f64 * 0.1).collect();
    *w.params.get_mut("enc1.bn1.beta").unwrap() = Tensor::new(vec![16], beta1).unwrap();
    *w.params.get_mut("enc1.bn2.beta").unwrap() = Tensor::new(vec![16], beta2.clone()).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &w, false);
        let x = g.constant(Tensor::zeros(&[2, 1, 16, 16]));
        let mut net = Network::new(&mut g, &vars, &w.running, mode);
        let (features, pooled) = net.encoder_block(0, x).unwrap();
        let f = g.value(features);
        assert_eq!(f.shape(), [2, 17, 16, 16]);
        assert_eq!(g.value(pooled).shape(), [2, 17, 8, 8]);
        // Channel 0 is the input; channel 1 + c is relu(beta2[c]) because a
        // zero kernel feeds a constant into the second batchnorm.
        for n in 0..2 {
            for c in 0..17 {
                let expect = if c == 0 { 0.0 } else { beta2[c - 1].max(0.0) };
                let plane = &f.data()[(n * 17 + c) * 256..(n * 17 + c + 1) * 256];
                assert!(
                    plane.iter().all(|&v| (v - expect).abs() < 1e-12),
                    "{mode:?} channel {c}"
                );
            }
        }
    }
}

#[test]
fn bottleneck_zero_kernels_give_zero_and_keep_size() {
    let mut w = build_model::<f64>(&tiny(), 0).unwrap();
    zero_kernels(&mut w);
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &w, false);
    let x = g.constant(Tensor::from_fn(&[1, 241, 5, 7], |i| (i % 13) as f64));
    let y = Network::new(&mut g, &vars, &w.running, Mode::Eval)
        .bottleneck(x)
        .unwrap();
    assert_eq!(g.value(y).shape(), [1, 256, 5, 7]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn bottleneck_receptive_field_reaches_eight_pixels() {
    let mut w = build_model::<f64>(&tiny(), 7).unwrap();
    // A large shift keeps every relu active so the footprint is the union of
    // the dilated tap patterns.
    for i in 1..=4 {
        let b = w.params.get_mut(&format!("bottleneck.branch{i}.bn.beta")).unwrap();
        *b = Tensor::full(&[256], 100.0);
    }
    let size = 21;
    let c0 = size / 2;
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &w, false);
    let mut probe = vec![0.0; size * size];
    probe[c0 * size + c0] = 1.0;
    let x = g.param(Tensor::zeros(&[1, 241, size, size]));
    let y = Network::new(&mut g, &vars, &w.running, Mode::Eval)
        .bottleneck(x)
        .unwrap();
    let sel = g.constant(Tensor::from_fn(&[1, 256, size, size], |i| probe[i % (size * size)]));
    let picked = g.mul(y, sel).unwrap();
    let root = g.sum(picked);
    let grads = g.backward(root).unwrap();
    let gx = grads.get(x).unwrap();
    let footprint = |dy: isize, dx: isize| -> f64 {
        let (r, c) = ((c0 as isize + dy) as usize, (c0 as isize + dx) as usize);
        (0..241)
            .map(|ch| gx.data()[ch * size * size + r * size + c].abs())
            .sum()
    };
    let taps = |d: isize| [-d, 0, d];
    for dy in -10isize..=10 {
        for dx in -10isize..=10 {
            let reachable = [1isize, 2, 4, 8]
                .iter()
                .any(|&d| taps(d).contains(&dy) && taps(d).contains(&dx));
            assert_eq!(footprint(dy, dx) > 0.0, reachable, "offset ({dy}, {dx})");
        }
    }
    assert!(footprint(8, 0) > 0.0 && footprint(0, -8) > 0.0 && footprint(8, 8) > 0.0);
    assert_eq!(footprint(9, 0), 0.0);
}

#[test]
fn decoder_doubles_resolution_and_walks_channels() {
    let w = build_model::<f64>(&tiny(), 3).unwrap();
    let cfg = tiny();
    for level in 0..4 {
        let s = 16 >> (level + 1);
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &w, false);
        let x = g.constant(Tensor::from_fn(&[1, cfg.decoder_up_channels(level), s, s], |i| {
            ((i * 7) % 11) as f64 * 0.1
        }));
        let skip = g.constant(Tensor::zeros(&[1, cfg.skip_channels(level), 2 * s, 2 * s]));
        let mut net = Network::new(&mut g, &vars, &w.running, Mode::Eval);
        let y = net.decoder_block(level, x, skip).unwrap();
        assert_eq!(g.value(y).shape(), [1, cfg.base_filters[level], 2 * s, 2 * s]);
    }
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &w, false);
    let x = g.constant(Tensor::zeros(&[1, 32, 4, 4]));
    let skip = g.constant(Tensor::zeros(&[1, 17, 6, 6]));
    let err = Network::new(&mut g, &vars, &w.running, Mode::Eval)
        .decoder_block(0, x, skip)
        .unwrap_err();
    assert!(err.to_string().contains("skip is 6x6"));
}

#[test]
fn forward_shape_normalization_and_eval_determinism() {
    let w = build_model::<f32>(&tiny(), 5).unwrap();
    let x = Tensor::from_fn(&[3, 1, 16, 16], |i| ((i * 37) % 101) as f32 / 101.0);
    let p = model_forward(&w, &x, Mode::Eval).unwrap();
    assert_eq!(p.shape(), [3, 4, 16, 16]);
    for n in 0..3 {
        for px in 0..256 {
            let s: f32 = (0..4).map(|k| p.data()[(n * 4 + k) * 256 + px]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
    let q = model_forward(&w, &x, Mode::Eval).unwrap();
    assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let bad = Tensor::<f32>::zeros(&[1, 1, 32, 32]);
    let err = model_forward(&w, &bad, Mode::Eval).unwrap_err();
    assert!(err.to_string().contains("expects 16x16"));
}

#[test]
fn single_conv_commutes_with_horizontal_flip() {
    fn flip_w(t: &Tensor<f64>) -> Tensor<f64> {
        let s = t.shape();
        let w = s[3];
        Tensor::from_fn(s, |i| t.data()[i - i % w + (w - 1 - i % w)])
    }
    let x = Tensor::from_fn(&[2, 3, 9, 11], |i| ((i * 31) % 17) as f64 - 8.0);
    let k = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13) % 7) as f64 * 0.25 - 0.75);
    for dilation in [1, 2] {
        let geom = ConvGeometry::same(3, dilation);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, None, geom).unwrap();
        let (xf, kf) = (g.constant(flip_w(&x)), g.constant(flip_w(&k)));
        let yf = g.conv2d(xf, kf, None, geom).unwrap();
        assert_eq!(flip_w(g.value(y)).data(), g.value(yf).data());
    }
}

#[test]
fn train_forward_reports_running_updates_for_every_layer() {
    let w = build_model::<f32>(&tiny(), 2).unwrap();
    let x = Tensor::from_fn(&[2, 1, 16, 16], |i| (i % 5) as f32);
    let tf = train_forward(&w, &x).unwrap();
    assert_eq!(tf.running.len(), w.running.len());
    assert_eq!(tf.vars.len(), w.params.len());
}

#[test]
fn checkpoint_round_trip_is_bitwise_and_rejects_corruption() {
    let mut w = build_model::<f32>(&tiny(), 9).unwrap();
    w.provenance = Provenance::SourceTrained;
    for (i, st) in w.running.values_mut().enumerate() {
        st.mean = st.mean.map(|_| i as f32 * 0.37);
        st.var = st.var.map(|_| 1.0 + i as f32 * 0.01);
    }
    let ckpt = Checkpoint::weights_only(w.clone());
    let bytes = encode_checkpoint(&ckpt).unwrap();
    assert_eq!(&bytes[..4], b"SGAD");
    let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
    assert!(back.weights.bitwise_eq(&w));
    assert!(back.optimizer.is_none());

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(decode_checkpoint::<f32>(&flipped).is_err());
    assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 5]).is_err());
    let mut vers = bytes.clone();
    vers[4] = 9;
    match decode_checkpoint::<f32>(&vers) {
        Err(crate::Error::Version { found: 9, supported: 1 }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert!(decode_checkpoint::<f64>(&bytes).is_err());
}
