use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stormtail_nn::{Architecture, Graph, Model, ModelConfig, StageConfig, Tensor};

fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn scalar_loss(model: &Model, x: &Tensor, r: &[f64]) -> f64 {
    let mut g = Graph::new(&model.params);
    let xv = g.input(x.clone());
    let out = model.forward(&mut g, xv).unwrap();
    let main = g.value(out.main_logits).data();
    let spatial = out.spatial_logits.map(|s| g.value(s).data().to_vec()).unwrap_or_default();
    main.iter().chain(&spatial).zip(r).map(|(a, b)| a * b).sum()
}

#[test]
fn toy_config_matches_finite_differences() {
    let cfg = ModelConfig::small();
    let mut model = Model::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    model.jitter(0.05, &mut rng);
    let x = input(27, 8, 8, 1);
    let r: Vec<f64> = (0..2 * 6 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::new(&model.params);
    let xv = g.input(x.clone());
    let out = model.forward(&mut g, xv).unwrap();
    let grads = g.backward(&[(out.main_logits, &r[..384]), (out.spatial_logits.unwrap(), &r[384..])]);
    let mut pg = model.params.zeros_like();
    g.accumulate_param_grads(&grads, &mut pg);

    let h = 1e-5;
    let ids: Vec<_> = model.params.ids().collect();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..model.params.get(id).len());
        let mut m = model.clone();
        m.params.get_mut(id).data_mut()[j] += h;
        let lp = scalar_loss(&m, &x, &r);
        m.params.get_mut(id).data_mut()[j] -= 2.0 * h;
        let lm = scalar_loss(&m, &x, &r);
        let fd = (lp - lm) / (2.0 * h);
        let a = pg[id.index()][j];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
        println!("{} [{j}]: fd {fd:.6e} analytic {a:.6e} rel {rel:.2e}", model.params.name(id));
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn reference_shapes_and_softmax() {
    let model = Model::new(ModelConfig::reference(), 0).unwrap();
    let x = input(27, 64, 64, 2);
    let mut g = Graph::new(&model.params);
    let xv = g.input(x);
    let out = model.forward(&mut g, xv).unwrap();
    assert_eq!(g.value(out.main_logits).shape(), [6, 64, 64]);
    assert_eq!(g.value(out.spatial_logits.unwrap()).shape(), [6, 64, 64]);
    let strides: Vec<usize> = out.backbone.iter().map(|v| 64 / g.value(*v).dim(1)).collect();
    assert_eq!(strides, vec![4, 8, 16, 32]);
    assert_eq!(g.value(out.spatial_features.unwrap()).shape(), [64, 32, 32]);
    let f = out.fusion.unwrap();
    assert_eq!(g.value(f.o).shape(), [8, 32, 32]);
    let logits = g.value(out.main_logits).data();
    for p in 0..64 * 64 {
        let mx = (0..6).map(|k| logits[k * 4096 + p]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..6).map(|k| (logits[k * 4096 + p] - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let total: f64 = e.iter().map(|v| v / s).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn fusion_tensor_contracts() {
    let cfg = ModelConfig::small();
    let mut model = Model::new(cfg.clone(), 5).unwrap();
    model.jitter(0.1, &mut ChaCha8Rng::seed_from_u64(2));
    let mut g = Graph::new(&model.params);
    let xv = g.input(input(27, 32, 32, 3));
    let out = model.forward(&mut g, xv).unwrap();
    let f = out.fusion.unwrap();
    assert_eq!(g.value(f.z).shape(), [cfg.fusion_dim, 16, 16]);
    assert_eq!(g.value(f.s).shape(), [8, 16, 16]);
    assert_eq!(g.value(f.o).shape(), [2 * cfg.fusion_groups, 16, 16]);
    assert!(g.value(f.s).data().iter().all(|v| v.abs() <= 1.0 + 1e-6));
    assert!(g.value(f.a).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(g.value(f.gates).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let (d, a, o) = (g.value(f.d).data(), g.value(f.a).data(), g.value(f.o).data());
    for i in 0..o.len() {
        assert_eq!(o[i], d[i] * a[i]);
    }
    assert_eq!(g.value(out.embedding).shape(), [16, 32, 32]);
}

#[test]
fn zeroed_offset_generator_equals_identity_resampling() {
    let mut model = Model::new(ModelConfig::small(), 8).unwrap();
    model.jitter(0.1, &mut ChaCha8Rng::seed_from_u64(4));
    for id in model.offset_direction_params() {
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut plain = model.clone();
    plain.config.resample = false;
    let x = input(27, 32, 32, 9);
    let run = |m: &Model| {
        let mut g = Graph::new(&m.params);
        let xv = g.input(x.clone());
        let out = m.forward(&mut g, xv).unwrap();
        g.value(out.main_logits).clone()
    };
    let (a, b) = (run(&model), run(&plain));
    let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-6, "max difference {diff}");
}

#[test]
fn forward_is_deterministic() {
    let model = Model::new(ModelConfig::small(), 1).unwrap();
    let x = input(27, 32, 32, 4);
    let run = || {
        let mut g = Graph::new(&model.params);
        let xv = g.input(x.clone());
        let out = model.forward(&mut g, xv).unwrap();
        g.value(out.main_logits).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::small();
    c.backbone_stages[1].depth = 0;
    assert!(Model::new(c, 0).is_err());
    let mut c = ModelConfig::small();
    c.fusion_groups = 3;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::small();
    c.spatial_resolution_factor = 8;
    assert!(c.validate().is_err());
    let model = Model::new(ModelConfig::small(), 0).unwrap();
    let mut g = Graph::new(&model.params);
    let xv = g.input(input(27, 30, 30, 0));
    assert!(model.forward(&mut g, xv).is_err());
}

#[test]
fn stride_arithmetic() {
    let c = ModelConfig::reference();
    assert_eq!(c.stage_strides(), vec![4, 8, 16, 32]);
    let per_side: Vec<usize> = c.stage_strides().iter().map(|s| 64 / s).collect();
    assert_eq!(per_side, vec![16, 8, 4, 2]);
}

#[test]
fn spatial_branch_factor_one_keeps_resolution() {
    let mut c = ModelConfig::small();
    c.architecture = Architecture::SpatialOnly;
    c.spatial_resolution_factor = 1;
    c.spatial_branch_sr = 2;
    let model = Model::new(c, 0).unwrap();
    let mut g = Graph::new(&model.params);
    let xv = g.input(input(27, 8, 8, 0));
    let out = model.forward(&mut g, xv).unwrap();
    assert_eq!(g.value(out.spatial_features.unwrap()).shape(), [16, 8, 8]);
    assert_eq!(g.value(out.main_logits).shape(), [6, 8, 8]);
    assert!(out.spatial_logits.is_none());
}

#[test]
fn backbone_only_variant() {
    let mut c = ModelConfig::small();
    c.architecture = Architecture::BackboneOnly;
    c.backbone_stages.push(StageConfig::new(32, 1, 2, 2, 1));
    let model = Model::new(c, 0).unwrap();
    let mut g = Graph::new(&model.params);
    let xv = g.input(input(27, 32, 32, 0));
    let out = model.forward(&mut g, xv).unwrap();
    assert_eq!(g.value(out.main_logits).shape(), [6, 32, 32]);
    assert!(out.fusion.is_none() && out.spatial_logits.is_none());
}

#[test]
fn parameter_count_matches_layer_tally() {
    for cfg in [ModelConfig::small(), ModelConfig::reference()] {
        let model = Model::new(cfg, 0).unwrap();
        let tally: usize = model.layer_tally().iter().map(|(_, n)| n).sum();
        assert_eq!(tally, model.num_params());
    }
    // Hand count of one block at d=16, ratio 2, sr 2.
    let model = Model::new(ModelConfig::small(), 0).unwrap();
    let block: usize = model
        .layer_tally()
        .iter()
        .filter(|(n, _)| n.starts_with("stage0.block0."))
        .map(|(_, n)| n)
        .sum();
    let d = 16;
    let hidden = 32;
    let want = 2 * d + 3 * (d * d + d) + (d * d * 4 + d) + 2 * d + (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * 9 + hidden) + (hidden * d + d);
    assert_eq!(block, want);
}
