//! The point-cloud network blocks: weight-shared per-point layers,
//! graph convolution with feature-space receptive fields, the two-path
//! hybrid-scope layer, and the matrix emitter behind learnable affine
//! transformations.
//!
//! Run with: cargo run --example building_blocks

use georef::netblocks::{
    graph_conv, hs_layer, matrix_net, shared_point_layers, Graph, HsConfig, Lat, MlpOpts,
    ParamSet,
};
use ndarray::{arr2, Array2};

fn main() {
    let mut params: ParamSet<f64> = ParamSet::new(3);
    let mut g = Graph::new(&mut params, false);

    // Six points: a tight cluster of five and one far outlier.
    let pts: Array2<f64> = arr2(&[
        [0.00, 0.01, 0.02, 0.03, 0.04, 5.0],
        [0.00, 0.02, 0.01, 0.03, 0.02, 5.0],
        [0.00, 0.01, 0.03, 0.02, 0.04, 5.0],
    ]);
    let x = g.input(pts.clone());

    // Shared per-point layers: one weight matrix applied to every column.
    let h = shared_point_layers(&mut g, "mlp", x, &[8, 16], MlpOpts::default()).unwrap();
    println!("shared MLP: 3x6 -> {:?}", g.tape.shape(h));

    // Graph convolution aggregates k nearest neighbors; the neighborhood
    // space is independent of the convolved features, so receptive fields
    // can come from feature distance instead of Euclidean distance.
    let (y, neighbors) = graph_conv(&mut g, "gc", x, &pts, 3, 8, MlpOpts::default()).unwrap();
    println!(
        "graph conv: out {:?}, point 0 aggregates {:?} (farthest of k dropped)",
        g.tape.shape(y),
        neighbors[0]
    );

    // The hybrid-scope layer runs two paths: absolute coordinates for
    // translation/size cues, neighborhood convolution for rotation cues.
    let cfg = HsConfig {
        k_neighbors: 3,
        out_channels: 8,
    };
    let (out, _path_a, _path_b, info) =
        hs_layer(&mut g, "hs", x, None, cfg, MlpOpts::default()).unwrap();
    println!(
        "hs layer: out {:?}, feature-space neighborhoods: {}",
        g.tape.shape(out),
        info.feature_space
    );

    // The matrix emitter pools per-point features into an affine transform
    // with an identity residual, so a zero-initialized net emits exactly I.
    match matrix_net(&mut g, "mn", x, 9, false, 4, 3).unwrap() {
        Lat::Point(m) => {
            println!("point LAT at init:\n{:.3}", g.tape.value(m));
        }
        Lat::Feature { .. } => unreachable!("f_lat = 9 requests a point transform"),
    }

    println!("\nparameter store holds {} arrays", params.len());
    for (name, a) in params.iter().take(5) {
        println!("  {name}: {:?}", a.shape());
    }
}
