use georef::geometry::{error_between, PerturbLimits};
use georef::model::{forward, ModelConfig};
use georef::netblocks::ParamSet;
use georef::synthdata::{generate_dataset, stream_rng, GenConfig, NoiseModel, SampleRecord};
use georef::trainrefine::{train, Checkpoint, TrainConfig};
use ndarray::Array2;
use rand::Rng;
use std::collections::BTreeMap;

fn records_with(n_points: usize, cat: usize) -> Vec<SampleRecord> {
    let mut split_sizes = BTreeMap::new();
    split_sizes.insert("train".to_string(), 8);
    let gen = GenConfig {
        seed: 3,
        n_points,
        instances_per_category: 2,
        split_sizes,
        noise: NoiseModel::none(),
        categories: georef::synthdata::default_categories()[cat..cat + 1].to_vec(),
        ..GenConfig::default()
    };
    generate_dataset(&gen).unwrap().remove("train").unwrap()
}

fn main() {
    let records = records_with(32, 2);
    let model = ModelConfig {
        n_points: 32,
        feature_width: 8,
        k_neighbors: 5,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 500,
        batch_size: 8,
        base_lr: 1e-3,
        seed: 3,
        point_dropout: 0.0,
        noise_sigma: 0.0,
        pert_limits: PerturbLimits::zero(),
        weight_decay: 0.0,
        ..TrainConfig::default()
    };

    for head_std in [0.0, 0.01, 0.05] {
        // materialize all params, then re-init the final head layers
        let mut params: ParamSet<f32> = ParamSet::new(3);
        let r0 = &records[0];
        let _ = forward(&model, &mut params, &r0.observed, &r0.prior, &r0.init).unwrap();
        if head_std > 0.0 {
            let mut rng = stream_rng(77, 0);
            for head in ["pred_rot", "pred_ts"] {
                for path in ["path_a", "path_b"] {
                    let name = format!("{head}.{path}.2.w");
                    let shape = params.get(&name).unwrap().dim();
                    let arr = Array2::from_shape_fn(shape, |_| {
                        rng.random_range(-head_std..head_std) as f32
                    });
                    params.set(&name, arr);
                }
            }
        }
        let start = Checkpoint {
            model: model.clone(),
            train: Some(train_cfg.clone()),
            params,
            opt: None,
            epoch: 0,
            step: 0,
            best_val: None,
            history: vec![],
        };
        let out = train::<f32>(&model, &train_cfg, &records, &[], Some(start)).unwrap();
        let mut params = out.last.params;
        let mut worst_dt = 0.0f64;
        let mut mean_dt = 0.0;
        for rec in &records {
            let pred = forward(&model, &mut params, &rec.observed, &rec.prior, &rec.init).unwrap();
            let tgt = error_between(&rec.gt, &rec.init);
            let dt = (pred.translation - tgt.translation).norm();
            worst_dt = worst_dt.max(dt);
            mean_dt += dt / records.len() as f64;
        }
        println!(
            "head_std {head_std:.2}: loss {:.5} -> {:.5} | dt resid mean {:.2} cm, worst {:.2} cm",
            out.last.history[0].train_loss,
            out.last.history.last().unwrap().train_loss,
            mean_dt * 100.0,
            worst_dt * 100.0
        );
    }
}
