use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stormtail_core::attribution::Reduction;
use stormtail_core::data::{fit_normalization, generate_synthetic, Sample, SynthConfig};
use stormtail_core::grid::{classify, ThresholdSchema};
use stormtail_core::losses::{ClassStats, LossConfig};
use stormtail_core::Error;
use stormtail_nn::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA_VERSION};
use stormtail_nn::ig::attribute_sample;
use stormtail_nn::predict::{predict, predict_raw_nwp, prepare, Prepared};
use stormtail_nn::train::{overfit_batch, train, RunSpec, TrainConfig};
use stormtail_nn::{Model, ModelConfig, Variant};

fn dataset(n: usize, size: usize, seed: u64) -> (Vec<Sample>, ThresholdSchema) {
    let schema = ThresholdSchema::default();
    let cfg = SynthConfig {
        num_samples: n,
        height: size,
        width: size,
        seed,
        calendar: vec![stormtail_core::data::YearCount { year: 2010, samples: n }],
        ..SynthConfig::default()
    };
    (generate_synthetic(&cfg, &schema).unwrap(), schema)
}

fn setup(variant: Variant, n: usize, size: usize, train_cfg: TrainConfig) -> (RunSpec, Vec<Prepared>, Vec<Sample>) {
    let (samples, schema) = dataset(n, size, 7);
    let refs: Vec<&Sample> = samples.iter().collect();
    let norm = fit_normalization(&refs).unwrap();
    let prepared = prepare(&refs, &norm).unwrap();
    let fields: Vec<_> = samples.iter().map(|s| &s.target_class).collect();
    let stats = ClassStats::from_fields(&fields, 6).unwrap().with_floor(1);
    let spec = RunSpec::new(variant, &ModelConfig::small(), LossConfig::default(), train_cfg, schema, stats).unwrap();
    (spec, prepared, samples)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        seeds: vec![0],
        deterministic: true,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_small_batch() {
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        weight_decay: 0.0,
        ..quick(0)
    };
    let (spec, data, _) = setup(Variant::BackboneWce, 8, 16, cfg);
    let (first, last) = overfit_batch(&spec, 1, &data, 200).unwrap();
    println!("initial {first:.4} final {last:.4}");
    assert!(last < 0.1 * first, "loss went from {first} to {last}");
}

#[test]
fn deterministic_runs_match() {
    let (spec, data, _) = setup(Variant::Dpsformer, 12, 16, quick(2));
    let run = || train(&spec, 3, &data[..8], &data[8..], |_| Ok(())).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_val_loss, b.final_val_loss);
    assert_eq!(a.final_model.params, b.final_model.params);
    assert_eq!(a.log.len(), 4);
    assert!(a.log.iter().all(|r| r.wall_clock_s == 0.0 && r.schema_version == 1));
    assert!(a.log[1].heavy_csi.is_some() && a.log[1].main_loss.is_some());
}

#[test]
fn every_trainable_variant_runs_one_epoch() {
    for v in Variant::ALL.into_iter().filter(|v| v.is_trainable()) {
        let (spec, data, _) = setup(v, 8, 16, quick(1));
        let out = train(&spec, 0, &data[..6], &data[6..], |_| Ok(())).unwrap();
        assert!(out.final_val_loss.unwrap().is_finite(), "{v}");
    }
    let (samples, schema) = dataset(2, 16, 0);
    let fields: Vec<_> = samples.iter().map(|s| &s.target_class).collect();
    let stats = ClassStats::from_fields(&fields, 6).unwrap().with_floor(1);
    assert!(RunSpec::new(Variant::Qm, &ModelConfig::small(), LossConfig::default(), quick(1), schema, stats).is_err());
}

#[test]
fn zero_epochs_returns_initial_model() {
    let (spec, data, _) = setup(Variant::BackboneWce, 6, 16, quick(0));
    let mut calls = 0;
    let out = train(&spec, 5, &data[..4], &data[4..], |_| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 0);
    assert_eq!(out.best_epoch, 0);
    assert!(out.log.is_empty());
    assert_eq!(out.best.params, Model::new(spec.model.clone(), 5).unwrap().params);
}

#[test]
fn non_finite_input_is_reported() {
    let (spec, mut data, _) = setup(Variant::BackboneWce, 6, 16, quick(1));
    data[0].input.data_mut()[0] = f64::NAN;
    let idx_all: Vec<Prepared> = data.clone();
    match train(&spec, 0, &idx_all[..4], &idx_all[4..], |_| Ok(())) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("logits min"), "{msg}"),
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn raw_nwp_equals_classification_of_the_tp_channel() {
    let (samples, schema) = dataset(4, 16, 2);
    let refs: Vec<&Sample> = samples.iter().collect();
    for (p, s) in predict_raw_nwp(&refs, &schema).iter().zip(&samples) {
        assert_eq!(p.classes, classify(&s.nwp_precipitation(), &schema));
    }
}

#[test]
fn checkpoint_round_trip() {
    let (spec, data, samples) = setup(Variant::Dpsformer, 6, 16, quick(1));
    let out = train(&spec, 2, &data[..4], &data[4..], |_| Ok(())).unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind: "checkpoint".into(),
            variant: spec.variant,
            seed: 2,
            epoch: out.best_epoch,
            model: spec.model.clone(),
            normalization: fit_normalization(&refs).unwrap(),
            schema: spec.schema.clone(),
            class_stats: spec.stats.clone(),
            loss: spec.loss.clone(),
            train: spec.train.clone(),
        },
        model: out.best.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.dpsg");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.meta, ckpt.meta);
    for id in out.best.params.ids() {
        let (a, b) = (out.best.params.get(id).data(), back.model.params.get(id).data());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0)));
    }
    let pa = predict(&out.best, &data, None).unwrap();
    let pb = predict(&back.model, &data, None).unwrap();
    let maxdiff = pa
        .iter()
        .zip(&pb)
        .flat_map(|(a, b)| a.probs.data().iter().zip(b.probs.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    assert!(maxdiff < 1e-4, "{maxdiff}");
}

#[test]
fn network_attribution_is_complete() {
    let (spec, data, _) = setup(Variant::Dpsformer, 2, 16, quick(0));
    let mut model = Model::new(spec.model.clone(), 0).unwrap();
    model.jitter(0.05, &mut ChaCha8Rng::seed_from_u64(1));
    let a = attribute_sample(&model, &data[0].input, Reduction::AllPixels, None, &spec.schema, 256)
        .unwrap()
        .unwrap();
    assert_eq!(a.per_channel.len(), 27);
    let gap = a.completeness_gap();
    println!("delta {} gap {gap}", a.output_delta);
    // Bilinear offset sampling is only piecewise smooth, so the quadrature
    // error here is looser than on smooth models.
    assert!(gap <= 5e-2 * a.output_delta.abs().max(1e-3), "gap {gap} vs delta {}", a.output_delta);
}
