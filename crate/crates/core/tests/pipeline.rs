use std::collections::BTreeMap;
use std::path::PathBuf;

use vesselseg::annot::{filter_labeled, parse_annotations, split_train_val, ClassLabel, Split};
use vesselseg::imgproc::{normalize, synth_vessels, NormalizationStats, Sample};
use vesselseg::metrics::{confusion, evaluate_set, Aggregation};
use vesselseg::nn::{DecoderKind, EncoderConfig, Model, ModelConfig};
use vesselseg::raster::{build_class_mask, downsample_mask, load_mask, save_mask};
use vesselseg::train::{train, TrainConfig};

const ANNOTATIONS: &str = r#"{"id":"b","annotations":[{"type":"blood_vessel","coordinates":[[[0,0],[256,0],[256,256],[0,256]]]}]}
{"id":"a","annotations":[{"type":"glomerulus","coordinates":[[[0,0],[10,0],[0,10]]]}]}
{"id":"c","annotations":[{"type":"blood_vessel","coordinates":[[[0,0],[512,0],[512,512]]]},{"type":"unsure","coordinates":[[[0,0],[512,0],[0,512]]]}]}
"#;

#[test]
fn annotations_to_small_masks() {
    let records = parse_annotations(ANNOTATIONS.as_bytes()).unwrap();
    let images: BTreeMap<String, PathBuf> =
        ["a", "b", "c"].iter().map(|id| (id.to_string(), PathBuf::from(format!("{id}.png")))).collect();
    let index = filter_labeled(&images, &records).unwrap();
    let ids: Vec<&str> = index.entries().iter().map(|e| e.tile_id.as_str()).collect();
    assert_eq!(ids, ["b", "c"]);

    let b = &index.entries()[0].record;
    let full = build_class_mask(b, ClassLabel::BloodVessel, 512, 512).unwrap();
    assert_eq!(full.popcount(), 256 * 256);
    let small = downsample_mask(&full, 128, 128).unwrap();
    assert_eq!(small.popcount(), 64 * 64);

    // the unsure polygon covers the other half and must not leak in
    let c = &index.entries()[1].record;
    let m = downsample_mask(&build_class_mask(c, ClassLabel::BloodVessel, 512, 512).unwrap(), 128, 128).unwrap();
    assert!(m.get(127, 0) && !m.get(0, 127));
    assert_eq!(m.popcount(), 128 * 127 / 2);

    let split = split_train_val(&index, 0.5, 9).unwrap();
    assert_eq!(split.split(Split::Val).count(), 1);
}

#[test]
fn masks_survive_files() {
    let dir = tempfile::tempdir().unwrap();
    for s in synth_vessels(11, 3, 40, 48).unwrap() {
        for ext in ["pgm", "png"] {
            let path = dir.path().join(format!("{}.{ext}", s.tile_id));
            save_mask(&s.mask, &path).unwrap();
            let back = load_mask(&path).unwrap();
            assert_eq!(back, s.mask);
            assert_eq!(confusion(&back, &s.mask).unwrap().dice(), 1.0);
        }
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { stage_widths: vec![4, 8, 8], ..ModelConfig::default().encoder },
        input_size: [3, 32, 32],
        ..ModelConfig::default()
    }
}

fn dataset(seed: u64, n: usize) -> Vec<Sample> {
    let stats = NormalizationStats::IMAGENET;
    synth_vessels(seed, n, 32, 32)
        .unwrap()
        .into_iter()
        .map(|s| Sample { image: normalize(&s.image, &stats), ..s })
        .collect()
}

#[test]
fn short_training_lowers_loss() {
    let data = dataset(21, 6);
    let mut model = Model::new(small_model()).unwrap();
    let cfg = TrainConfig { learning_rate: 3e-3, epochs: 12, batch_size: 3, ..TrainConfig::default() };
    let reports = train(&mut model, &data, &data, &cfg, None, |_| {}).unwrap();
    assert_eq!(reports.len(), 12);
    let (first, last) = (&reports[0], &reports[11]);
    assert!(last.train_loss < first.train_loss, "{} -> {}", first.train_loss, last.train_loss);
    assert!(last.val_loss < first.val_loss);
    let report = evaluate_set(&model, &data, 0.5, Aggregation::Global).unwrap();
    assert!((report.mean_dice - 2.0 * report.mean_iou / (1.0 + report.mean_iou)).abs() < 1e-12);
}

#[test]
fn encoder_transfers_between_decoders() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("unet.bin");
    let unet = Model::new(small_model()).unwrap();
    unet.save_weights(&path).unwrap();
    let mut fpn = Model::new(ModelConfig { decoder: DecoderKind::Fpn, seed: 3, ..small_model() }).unwrap();
    let n = fpn.load_weights_prefix(&path, "encoder.").unwrap();
    assert!(n > 0);
    for (name, t) in unet.params().iter().filter(|(k, _)| k.starts_with("encoder.")) {
        assert_eq!(fpn.params()[name], *t, "{name}");
    }
    // a full load across decoders is refused
    assert!(fpn.load_weights(&path).is_err());
}

#[cfg(feature = "parallel")]
#[test]
fn results_do_not_depend_on_thread_count() {
    let data = dataset(5, 4);
    let cfg = TrainConfig { learning_rate: 1e-3, epochs: 2, batch_size: 2, ..TrainConfig::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut model = Model::new(small_model()).unwrap();
            let reports = train(&mut model, &data, &data, &cfg, None, |_| {}).unwrap();
            (reports, model)
        })
    };
    let (r1, m1) = run(1);
    let (r4, m4) = run(4);
    assert_eq!(r1, r4);
    assert_eq!(m1, m4);
}
