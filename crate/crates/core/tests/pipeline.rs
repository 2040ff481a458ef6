//! Library-level pipeline on a tiny synthetic set: train, explain, evaluate.

use protovit::data::{generate_synthetic_dataset, load_dataset, Dataset, SplitCounts, Split, SyntheticSpec};
use protovit::encoder::EncoderConfig;
use protovit::evaluation::{annotated, cases_from_model, classification_eval, detection_report, default_scales, top_weighted_prototype};
use protovit::explain::{scoring_sheet, topk_prototypes};
use protovit::par::Exec;
use protovit::training::{encode_checkpoint, finetune, pretrain, Checkpoint, TrainConfig};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 1.0,
            resolutions: vec![16, 32],
        },
        resolutions: vec![16, 32],
        epochs_per_resolution: 1,
        finetune_epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

fn tiny_data(dir: &std::path::Path) -> Dataset {
    let spec = SyntheticSpec {
        image_size: 32,
        lesion_radius: [2.0, 4.0],
        lesions_per_image: [1, 2],
        counts: SplitCounts { train: 8, val: 4, test: 6 },
        ..SyntheticSpec::default()
    };
    generate_synthetic_dataset(&spec, dir, Exec::Parallel).unwrap();
    load_dataset(dir).unwrap()
}

fn train(cfg: &TrainConfig, ds: &Dataset, exec: Exec) -> Checkpoint {
    let pre = pretrain(cfg, ds, exec).unwrap();
    finetune(cfg, ds, &pre.checkpoint, exec).unwrap().checkpoint
}

#[test]
fn trained_model_explanations_and_reports_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_data(dir.path());
    let cfg = tiny_config();
    let ck = train(&cfg, &ds, Exec::Parallel);
    let model = &ck.model;
    assert!(model.classifier.weights.data().iter().all(|&w| w >= 0.0));

    for s in &ds.samples {
        let sheet = scoring_sheet(model, &s.image).unwrap();
        let evidence = model.classifier.evidence(&model.infer(&s.image).unwrap().presence.p).unwrap();
        for (k, class) in sheet.classes.iter().enumerate() {
            let resum: f64 = sheet.prototypes.iter().map(|p| p.contributions[&class.name]).sum();
            assert!((resum - class.evidence).abs() <= 1e-5);
            assert!((class.evidence - evidence[k]).abs() <= 1e-5);
            assert!((class.score - (class.evidence.powi(cfg.reg_order as i32) + 1.0).ln()).abs() <= 1e-6);
        }
        let top = topk_prototypes(model, &s.image, 3).unwrap();
        assert!(top.len() <= 3);
        assert!(top.windows(2).all(|w| w[0].presence > w[1].presence || (w[0].presence == w[1].presence && w[0].id < w[1].id)));
    }

    let native = model.at_resolution(model.resolution).unwrap();
    assert_eq!(native.encoder, model.encoder);

    let test = ds.split(Split::Test);
    let lesion = ds.lesion_class().unwrap();
    let proto = top_weighted_prototype(&model.classifier, lesion).unwrap();
    let cases = cases_from_model(model, &annotated(&test), proto, 0.5, Exec::Parallel).unwrap();
    assert_eq!(cases.len(), test.iter().filter(|s| !s.boxes.is_empty()).count());
    let report = detection_report(&cases, &default_scales(), 0.5, 0.0, 0, serde_json::Value::Null, Exec::Parallel).unwrap();
    assert_eq!(report.points.len(), 99);
    assert!(report.points.windows(2).all(|w| w[0].recall <= w[1].recall));
    assert!(report.baseline.points.windows(2).all(|w| w[0].recall <= w[1].recall));

    let eval = classification_eval(model, &test, 20, 1, Exec::Parallel).unwrap();
    assert_eq!(eval.samples, 6);
    let ci = eval.bootstrap.unwrap();
    assert!(ci.bacc.low <= ci.bacc.high);
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_data(dir.path());
    let cfg = tiny_config();
    let a = encode_checkpoint(&train(&cfg, &ds, Exec::Parallel)).unwrap();
    let b = encode_checkpoint(&train(&cfg, &ds, Exec::Sequential)).unwrap();
    assert_eq!(a, b);
}
