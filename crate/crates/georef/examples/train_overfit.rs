//! Training loop in miniature: memorize eight single-category records and
//! watch the refinement metrics respond. Augmentation is disabled so the
//! eight supervised pairs stay fixed; this is the optimization smoke test,
//! not a generalization claim. Also demonstrates checkpoint round-trips.
//!
//! Run with: cargo run --example train_overfit

use georef::evalmetrics::{config_fingerprint, iteration_curve};
use georef::geometry::PerturbLimits;
use georef::model::ModelConfig;
use georef::synthdata::{generate_dataset, GenConfig, NoiseModel};
use georef::trainrefine::{load_checkpoint, save_checkpoint, train, ModelPredictor, TrainConfig};
use std::collections::BTreeMap;
use tempfile::tempdir;

fn main() {
    let mut split_sizes = BTreeMap::new();
    split_sizes.insert("train".to_string(), 8);
    let gen = GenConfig {
        seed: 3,
        n_points: 32,
        instances_per_category: 2,
        split_sizes,
        noise: NoiseModel::none(),
        categories: georef::synthdata::default_categories()[..1].to_vec(),
        ..GenConfig::default()
    };
    let records = generate_dataset(&gen).unwrap().remove("train").unwrap();

    let model = ModelConfig {
        n_points: 32,
        feature_width: 8,
        k_neighbors: 5,
        ..ModelConfig::default()
    };
    // Full-batch memorization: one optimizer step per epoch, fixed inputs.
    let train_cfg = TrainConfig {
        epochs: 150,
        batch_size: 8,
        base_lr: 1e-3,
        seed: 3,
        point_dropout: 0.0,
        noise_sigma: 0.0,
        pert_limits: PerturbLimits::zero(),
        weight_decay: 0.0,
        ..TrainConfig::default()
    };

    let out = train::<f32>(&model, &train_cfg, &records, &records, None).unwrap();
    println!("epoch | train loss | val loss");
    for stats in out.last.history.iter().step_by(30) {
        println!(
            "{:5} | {:10.6} | {:8.6}",
            stats.epoch, stats.train_loss, stats.val_loss
        );
    }
    let last = out.last.history.last().unwrap();
    println!("{:5} | {:10.6} | {:8.6}", last.epoch, last.train_loss, last.val_loss);

    // Training-set metrics before and after one refinement application.
    let fp = config_fingerprint(&model, Some(&train_cfg), "overfit demo");
    let mut best = out.best;
    let mut predictor = ModelPredictor {
        cfg: &model,
        params: &mut best.params,
    };
    let curve = iteration_curve(&mut predictor, &records, 1, &fp).unwrap();
    println!("\niteration | 5deg2cm | 5deg5cm | iou75");
    for (k, rep) in curve.iter().enumerate() {
        println!(
            "{k:9} | {:7.3} | {:7.3} | {:5.3}",
            rep.mean.deg5_cm2, rep.mean.deg5_cm5, rep.mean.iou75
        );
    }

    // Checkpoints round-trip bit-exactly, including optimizer state.
    let dir = tempdir().unwrap();
    save_checkpoint(dir.path(), &best).unwrap();
    let back = load_checkpoint::<f32>(dir.path()).unwrap();
    assert_eq!(back.params, best.params);
    println!("\ncheckpoint round trip: {} arrays, bit-exact", back.params.len());
}
