//! Walk the standard flag-sweep table: a per-point baseline, the full
//! model, encoder swaps, branch toggles, and the pooled-concat fusion
//! alternative. Every row instantiates and runs a forward pass here; the
//! evaluation suite trains and scores them.
//!
//! Run with: cargo run --example ablation_tour

use georef::evalmetrics::standard_ablation_rows;
use georef::geometry::PerturbLimits;
use georef::model::{forward, ModelConfig};
use georef::netblocks::ParamSet;
use georef::synthdata::{
    build_category_library, default_categories, mean_shape_prior, sample_record, stream_rng,
    NoiseModel,
};
use nalgebra::Vector3;

fn main() {
    let cats = default_categories();
    let mut rng = stream_rng(23, 0);
    let lib = build_category_library(&cats[0], 1, &mut rng).unwrap();
    let prior = mean_shape_prior(&lib, 24).unwrap();
    let rec = sample_record(
        &lib[0],
        &prior,
        Vector3::new(0.0, 0.2, 1.0),
        24,
        &NoiseModel::none(),
        &PerturbLimits::default(),
        &mut rng,
    )
    .unwrap();

    let base = ModelConfig {
        n_points: 24,
        feature_width: 8,
        k_neighbors: 5,
        ..ModelConfig::default()
    };
    let rows = standard_ablation_rows(&base);
    println!("row | encoder          | fusion       | arrays | untrained |dt| (mm)");
    for row in &rows {
        let mut params: ParamSet<f64> = ParamSet::new(23);
        let pred = forward(
            &row.config,
            &mut params,
            &rec.observed,
            &rec.prior,
            &rec.init,
        )
        .unwrap();
        println!(
            "{:3} | {:16} | {:12} | {:6} | {:18.3}",
            row.name,
            format!("{:?}", row.config.encoder),
            format!("{:?}", row.config.fusion),
            params.len(),
            pred.translation.norm() * 1000.0
        );
    }

    // Untrained heads are zero-initialized, so every row starts from the
    // identity error regardless of its flags.
    assert_eq!(rows.len(), 10);
    println!("\nall {} rows instantiate and run forward", rows.len());
}
