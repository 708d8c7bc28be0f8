//! One forward pass of the refinement model: focalize the observed cloud
//! and the posed prior, extract features through the learnable affine
//! transformations, and decode a pose-error prediction.
//!
//! Run with: cargo run --example predict_pose_error

use georef::geometry::{error_between, PerturbLimits};
use georef::model::{forward, ModelConfig};
use georef::netblocks::ParamSet;
use georef::synthdata::{
    build_category_library, default_categories, mean_shape_prior, sample_record, stream_rng,
    NoiseModel,
};
use nalgebra::Vector3;

fn main() {
    let cats = default_categories();
    let mut rng = stream_rng(21, 0);
    let lib = build_category_library(&cats[0], 2, &mut rng).unwrap();
    let cfg = ModelConfig {
        n_points: 64,
        feature_width: 8,
        k_neighbors: 6,
        ..ModelConfig::default()
    };
    let prior = mean_shape_prior(&lib, cfg.n_points).unwrap();
    let rec = sample_record(
        &lib[0],
        &prior,
        Vector3::new(0.2, -0.1, 1.0),
        cfg.n_points,
        &NoiseModel::none(),
        &PerturbLimits::default(),
        &mut rng,
    )
    .unwrap();

    let target = error_between(&rec.gt, &rec.init);
    println!(
        "initial estimate is off by {:.2} deg, {:.1} mm, size error {:.1} mm",
        target.rotation_angle_deg(),
        target.translation.norm() * 1000.0,
        target.size.norm() * 1000.0
    );

    // All affine emitters start at identity and the prediction heads at
    // zero, so an untrained model predicts exactly "no correction".
    let mut params: ParamSet<f32> = ParamSet::new(0);
    let pred = forward(&cfg, &mut params, &rec.observed, &rec.prior, &rec.init).unwrap();
    println!(
        "untrained prediction: {:.4} deg, {:.3} mm (identity by construction)",
        pred.rotation_angle_deg(),
        pred.translation.norm() * 1000.0
    );

    // The same forward runs in f64 for gradient checking.
    let mut params64: ParamSet<f64> = ParamSet::new(0);
    let pred64 = forward(&cfg, &mut params64, &rec.observed, &rec.prior, &rec.init).unwrap();
    println!(
        "f64 forward matches: {:.2e} deg apart",
        (pred.rotation - pred64.rotation).norm()
    );

    println!(
        "\nmodel config: encoder {:?}, fusion {:?}, {} params arrays",
        cfg.encoder,
        cfg.fusion,
        params.len()
    );
}
