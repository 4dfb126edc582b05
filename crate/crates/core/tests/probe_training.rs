use idleak::adapters::{Generator, ToyGenerator};
use idleak::metrics::landmark_error;
use idleak::nn::{OptimizerKind, OptimizerSpec};
use idleak::probes::{
    baseline_predict, evaluate_probe, predict_landmarks_from_image, train_probe, Prediction, ProbeData, ProbeKind,
    ProbeSpec,
};
use idleak::tensor::{ImageTensor, LandmarkSet};
use idleak::toy_face::render_toy_face;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn face(seed: u64) -> (ImageTensor, LandmarkSet) {
    let g = ToyGenerator;
    let (image, lm, _) = render_toy_face(&g.params(&g.sample_latent(seed)).unwrap()).unwrap();
    (image, lm)
}

fn shifted(image: &ImageTensor, lm: &LandmarkSet, dx: i64, dy: i64) -> (ImageTensor, LandmarkSet) {
    let corner = [image.get(0, 0, 0), image.get(0, 0, 1), image.get(0, 0, 2)];
    (image.translate(dx, dy, corner), lm.translated(dx as f64, dy as f64))
}

fn jittered(seeds: std::ops::Range<u64>, rng_seed: u64) -> ProbeData {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    ProbeData::images(
        8,
        seeds.map(|s| {
            let (image, lm) = face(s);
            Ok(shifted(&image, &lm, rng.random_range(-12..=12), rng.random_range(-12..=12)))
        }),
    )
    .unwrap()
}

#[test]
fn image_probe_beats_baseline_and_follows_translation() {
    let spec = ProbeSpec {
        epochs: 25,
        ..ProbeSpec::default_for(ProbeKind::LandmarksFromImage)
    };
    let model = train_probe(&spec, &jittered(0..1200, 1), 2).unwrap();
    assert!(model.training_log.last().unwrap() <= &model.training_log[0]);

    let metrics = evaluate_probe(&model, &jittered(50_000..50_200, 3)).unwrap();
    let err = metrics.landmark_err_pct.unwrap();
    let Prediction::Landmarks(_) = baseline_predict(&model).unwrap() else {
        panic!("landmark baseline expected")
    };
    assert!(err < metrics.baseline, "probe {err} vs baseline {}", metrics.baseline);

    let mut moves = Vec::new();
    for s in 60_000..60_020 {
        let (image, lm) = face(s);
        let (moved, _) = shifted(&image, &lm, 10, 0);
        let a = predict_landmarks_from_image(&model, &image).unwrap().centroid();
        let b = predict_landmarks_from_image(&model, &moved).unwrap().centroid();
        moves.push((b[0] - a[0], b[1] - a[1]));
    }
    let mean_dx = moves.iter().map(|m| m.0).sum::<f64>() / moves.len() as f64;
    let mean_dy = moves.iter().map(|m| m.1).sum::<f64>() / moves.len() as f64;
    assert!((mean_dx - 10.0).abs() < 3.0, "centroid moved {mean_dx} px");
    assert!(mean_dy.abs() < 3.0, "vertical drift {mean_dy} px");

    let flat = ImageTensor::filled(224, 224, idleak::tensor::RangeTag::Unit, [0.5; 3]).unwrap();
    let p = predict_landmarks_from_image(&model, &flat).unwrap();
    assert!(p.to_flat().iter().all(|v| v.is_finite()));
    let (image, lm) = face(70_000);
    assert!(landmark_error(&predict_landmarks_from_image(&model, &image).unwrap(), &lm).unwrap().is_finite());
}

#[test]
fn default_descriptor_recipes_do_not_increase_training_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 400;
    let descriptors: Vec<_> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            idleak::tensor::Descriptor::new(v, "synthetic").unwrap()
        })
        .collect();
    let labels: Vec<bool> = descriptors.iter().map(|d| d.values[0] + 0.5 * d.values[1] > 0.0).collect();
    let landmarks: Vec<LandmarkSet> = descriptors
        .iter()
        .map(|d| face(0).1.translated(20.0 * d.values[2], 20.0 * d.values[3]))
        .collect();
    let hist_spec = idleak::soft_histogram::HistogramSpec::default();
    let histograms: Vec<_> = descriptors
        .iter()
        .map(|d| {
            let row: Vec<f64> = (0..10).map(|k| 1.0 + (d.values[4] * k as f64).sin().abs()).collect();
            let total: f64 = row.iter().sum();
            let row: Vec<f64> = row.iter().map(|v| v / total).collect();
            idleak::soft_histogram::Histogram::from_flat(hist_spec, &row.repeat(3)).unwrap()
        })
        .collect();
    let sets = [
        (ProbeKind::Binary, ProbeData::binary(&descriptors, &labels).unwrap()),
        (ProbeKind::LandmarksFromId, ProbeData::landmarks(&descriptors, &landmarks).unwrap()),
        (ProbeKind::HistogramFromId, ProbeData::histograms(&descriptors, &histograms).unwrap()),
    ];
    for (kind, data) in sets {
        let spec = ProbeSpec {
            epochs: 10,
            ..ProbeSpec::default_for(kind)
        };
        let model = train_probe(&spec, &data, 4).unwrap();
        let log = &model.training_log;
        assert_eq!(log.len(), 10);
        assert!(log[log.len() - 1] <= log[0], "{kind:?}: {log:?}");
        let again = train_probe(&spec, &data, 4).unwrap();
        assert_eq!(again.training_log, model.training_log);
    }
    let adam = OptimizerSpec {
        kind: OptimizerKind::Adam,
        learning_rate: 1e-3,
    };
    let zero = ProbeSpec {
        epochs: 0,
        optimizer: adam,
        ..ProbeSpec::default_for(ProbeKind::Binary)
    };
    let model = train_probe(&zero, &ProbeData::binary(&descriptors, &labels).unwrap(), 4).unwrap();
    assert!(model.training_log.is_empty());
}
