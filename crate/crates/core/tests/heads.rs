use std::sync::Arc;

use lidarpan::heads::{HeadConfig, SemanticNet};
use lidarpan::io::ClassMap;
use lidarpan::loss::{lovasz_class, nll, semantic_loss, semantic_loss_value, target_channels};
use lidarpan::nn::Builder;
use lidarpan::range_ops::build_proximity_grid;
use lidarpan::train::{synthetic_scenes, Model, INPUT_SCALE};
use lidarpan::{snapshot, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map() -> ClassMap {
    ClassMap::preset("synthetic").unwrap()
}

fn net(seed: u64) -> (SemanticNet, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let net = SemanticNet::new(
        &mut Builder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)),
        HeadConfig::tiny(5),
    );
    (net, store)
}

/// Scaled network inputs for a range image with ranges drawn from `lo..hi`.
fn inputs(
    h: usize,
    w: usize,
    lo: f32,
    hi: f32,
    seed: u64,
) -> (
    Tensor<f32>,
    Tensor<f32>,
    Arc<lidarpan::range_ops::ProximityGrid>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let range: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    let grid = build_proximity_grid(&range, &vec![true; n], h, w, (5, 5), 9).unwrap();
    let input = Tensor::from_fn(&[5, h, w], |i| {
        let raw = match i / n {
            0 => range[i % n],
            1 => 0.5,
            _ => range[i % n] * 0.57,
        };
        raw * INPUT_SCALE[i / n]
    });
    let r = Tensor::from_vec(
        &[1, h, w],
        range.iter().map(|v| v * INPUT_SCALE[0]).collect(),
    )
    .unwrap();
    (input, r, Arc::new(grid))
}

fn forward(
    net: &SemanticNet,
    store: &ParamStore<f32>,
    x: &Tensor<f32>,
    r: &Tensor<f32>,
    grid: &Arc<lidarpan::range_ops::ProximityGrid>,
) -> lidarpan::Result<Tensor<f32>> {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let rv = t.leaf(r.clone());
    let out = net.forward(&mut t, store, xv, rv, grid)?;
    Ok(t.value(out).clone())
}

/// Jaccard loss of a mispredicted set: |M| / |fg ∪ M|, zero when empty.
fn jaccard_loss(mispredicted: &[bool], fg: &[bool]) -> f64 {
    let m = mispredicted.iter().filter(|&&v| v).count();
    let u = mispredicted
        .iter()
        .zip(fg)
        .filter(|(a, b)| **a || **b)
        .count();
    if m == 0 {
        0.0
    } else {
        m as f64 / u as f64
    }
}

/// Lovász extension by the layer-cake integral over thresholds.
fn lovasz_oracle(errors: &[f64], fg: &[bool]) -> f64 {
    let mut levels: Vec<f64> = errors.to_vec();
    levels.push(0.0);
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut total = 0.0;
    for pair in levels.windows(2) {
        let above: Vec<bool> = errors.iter().map(|&e| e > pair[0]).collect();
        total += (pair[1] - pair[0]) * jaccard_loss(&above, fg);
    }
    total
}

#[test]
fn logits_match_the_input_extent() {
    let (net, store) = net(1);
    let cfg = HeadConfig::tiny(5);
    for (h, w) in [(64, 256), (32, 128)] {
        let (x, r, grid) = inputs(h, w, 2.0, 40.0, 2);
        let mut t = Tape::new();
        let xv = t.leaf(x);
        let rv = t.leaf(r);
        let vars = net.forward_detailed(&mut t, &store, xv, rv, &grid).unwrap();
        assert_eq!(t.value(vars.logits).shape(), &[5, h, w]);
        for (i, &v) in vars.encoder.iter().enumerate() {
            let s = 4usize << i;
            assert_eq!(t.value(v).shape(), &[cfg.encoder[i + 1], h / s, w / s]);
        }
        for (i, &v) in vars.pyramid.iter().enumerate() {
            let s = 4usize << i;
            assert_eq!(t.value(v).shape(), &[cfg.pyramid, h / s, w / s]);
        }
    }
}

#[test]
fn extents_off_the_stride_are_rejected() {
    let (net, store) = net(1);
    for (h, w) in [(48, 128), (32, 100)] {
        let (x, r, grid) = inputs(h, w, 2.0, 40.0, 3);
        assert!(forward(&net, &store, &x, &r, &grid).is_err());
    }
}

#[test]
fn output_is_finite_out_to_120_metres() {
    let (net, store) = net(4);
    let (x, r, grid) = inputs(32, 128, 80.0, 120.0, 5);
    assert!(forward(&net, &store, &x, &r, &grid).unwrap().all_finite());
}

#[test]
fn zero_input_is_deterministic() {
    let (h, w) = (32, 64);
    let grid = Arc::new(
        build_proximity_grid(&vec![0.0; h * w], &vec![false; h * w], h, w, (5, 5), 9).unwrap(),
    );
    let (x, r) = (Tensor::zeros(&[5, h, w]), Tensor::zeros(&[1, h, w]));
    let a = forward(&net(6).0, &net(6).1, &x, &r, &grid).unwrap();
    let b = forward(&net(6).0, &net(6).1, &x, &r, &grid).unwrap();
    assert!(a.all_finite());
    assert_eq!(a, b);
}

#[test]
fn guidance_rates_stay_below_their_bounds() {
    let (net, store) = net(7);
    let cfg = HeadConfig::tiny(5);
    let (x, r, grid) = inputs(64, 128, 1.0, 120.0, 8);
    let mut t = Tape::new();
    let xv = t.leaf(x);
    let rv = t.leaf(r);
    let vars = net.forward_detailed(&mut t, &store, xv, rv, &grid).unwrap();
    for &ren in &vars.ren {
        let d = net
            .head
            .rdpc32
            .b
            .conv
            .guidance(&mut t, &store, ren)
            .unwrap();
        assert!(t
            .value(d)
            .data()
            .iter()
            .all(|&v| (0.0..=cfg.rdpc_d_max as f32).contains(&v)));
        let d = net
            .head
            .rlsfe4
            .rg
            .conv
            .guidance(&mut t, &store, ren)
            .unwrap();
        assert!(t
            .value(d)
            .data()
            .iter()
            .all(|&v| (0.0..=cfg.rlsfe_d_max as f32).contains(&v)));
    }
}

#[test]
fn every_parameter_receives_a_gradient() {
    // At x32 the widest rates need at least 16 columns to reach a real neighbour.
    let map = map();
    let scene = &synthetic_scenes(1, 64, 512, 9, 9).unwrap()[0];
    let mut model = Model::new(HeadConfig::tiny(5), 10);
    let mut t = Tape::new();
    let x = t.leaf(scene.input.clone());
    let r = t.leaf(scene.range.clone());
    let logits = model
        .net
        .forward(&mut t, &model.store, x, r, &scene.grid)
        .unwrap();
    let loss = semantic_loss(&mut t, logits, &scene.labels.semantic, &map).unwrap();
    assert!(t.value(loss).data()[0] >= 0.0);
    t.backward(loss, Tensor::scalar(1.0)).unwrap();
    model.store.reset_grads();
    t.accumulate_param_grads(&mut model.store).unwrap();
    let dead: Vec<&str> = model
        .store
        .iter()
        .filter(|(_, p)| p.grad.data().iter().all(|&g| g == 0.0))
        .map(|(_, p)| p.name.as_str())
        .collect();
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn snapshot_round_trip_restores_predictions() {
    let scene = &synthetic_scenes(1, 32, 64, 11, 9).unwrap()[0];
    let a = Model::new(HeadConfig::tiny(5), 12);
    let bytes = snapshot::to_bytes(&a.store).unwrap();
    let entries = snapshot::from_bytes(&bytes).unwrap();
    assert_eq!(entries.len(), a.store.len());
    for ((name, value), (_, p)) in entries.iter().zip(a.store.iter()) {
        assert_eq!(name, &p.name);
        assert_eq!(value, &p.value);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    snapshot::save(&a.store, &path).unwrap();
    let mut b = Model::new(HeadConfig::tiny(5), 13);
    assert_ne!(a.logits(scene).unwrap(), b.logits(scene).unwrap());
    snapshot::load_into(&mut b.store, &path).unwrap();
    assert_eq!(a.logits(scene).unwrap(), b.logits(scene).unwrap());
    assert!(snapshot::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn semantic_loss_is_non_negative_and_rewards_the_true_class(seed in any::<u64>(), pixel in 0usize..24, bump in 0.1f32..5.0) {
        let map = map();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4, 6);
        let logits = Tensor::<f32>::uniform(&[5, h, w], -3.0, 3.0, &mut rng);
        let target: Vec<u32> = (0..h * w).map(|_| rng.gen_range(1..6)).collect();
        let before = semantic_loss_value(&logits, &target, &map).unwrap();
        prop_assert!(before >= 0.0);
        let mut raised = logits.clone();
        let ch = map.channel_of(target[pixel]).unwrap();
        raised.data_mut()[ch * h * w + pixel] += bump;
        let after = semantic_loss_value(&raised, &target, &map).unwrap();
        prop_assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn lovasz_matches_the_layer_cake_integral(errors in prop::collection::vec(0.0f64..1.0, 1..7), fg_bits in any::<u8>()) {
        let fg: Vec<bool> = (0..errors.len()).map(|i| fg_bits >> i & 1 == 1).collect();
        let (value, _, _) = lovasz_class(&errors, &fg);
        prop_assert!((value - lovasz_oracle(&errors, &fg)).abs() < 1e-12);
    }
}

#[test]
fn lovasz_two_pixel_binary_case() {
    // One foreground pixel with error 0.8, one background pixel with error 0.3.
    let (value, weights, order) = lovasz_class(&[0.8f64, 0.3], &[true, false]);
    assert_eq!(order, vec![0, 1]);
    assert!((weights[0] - 1.0).abs() < 1e-12);
    assert!(weights[1].abs() < 1e-12);
    assert!((value - 0.8).abs() < 1e-12);
    let (value, _, _) = lovasz_class(&[0.3f64, 0.8], &[true, false]);
    assert!((value - (0.3 * 0.5 + 0.8 * 0.5)).abs() < 1e-12);
}

#[test]
fn analytic_loss_values() {
    let map = map();
    let target: Vec<u32> = vec![1, 2, 3, 4, 5, 1];
    let uniform = Tensor::<f64>::full(&[5, 2, 3], 0.7);
    let (value, _) = nll(&uniform, &target_channels(&target, &map)).unwrap();
    assert!((value - 5f64.ln()).abs() < 1e-12);

    let one_hot = Tensor::<f64>::from_fn(&[5, 2, 3], |i| {
        let ch = map.channel_of(target[i % 6]).unwrap();
        if i / 6 == ch {
            20.0
        } else {
            -20.0
        }
    });
    assert!(semantic_loss_value(&one_hot, &target, &map).unwrap() < 1e-4);
    assert!(semantic_loss_value(&one_hot, &[0; 6], &map).is_err());
}
