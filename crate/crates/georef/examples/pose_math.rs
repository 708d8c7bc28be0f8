//! Pose algebra on oriented boxes: composing error corrections, recovering
//! the error between two poses, symmetry-aware rotation metrics, and 3-D
//! IoU of oriented boxes.
//!
//! Run with: cargo run --example pose_math

use georef::geometry::{
    compose_update, error_between, iou3d, iou3d_sampled, random_pose, rot_y_deg,
    rotation_error_deg, rotation_from_axes, PoseError, PoseState, SymmetrySpec,
};
use georef::synthdata::stream_rng;
use nalgebra::Vector3;

fn main() {
    let mut rng = stream_rng(7, 0);

    // Recovering the error between two poses and applying it as a
    // correction is a round trip back to the target pose.
    let init = random_pose(&mut rng);
    let gt = random_pose(&mut rng);
    let err = error_between(&gt, &init);
    let corrected = compose_update(&init, &err).unwrap();
    println!(
        "round trip: rotation residual {:.2e}, translation residual {:.2e}",
        (corrected.rotation - gt.rotation).norm(),
        (corrected.translation - gt.translation).norm()
    );

    // Two noisy direction estimates are enough to build a valid rotation:
    // the first axis is normalized, the second re-orthogonalized.
    let r = rotation_from_axes(
        &Vector3::new(0.9, 0.1, 0.05),
        &Vector3::new(0.1, 1.1, -0.2),
    )
    .unwrap();
    println!(
        "rotation_from_axes: |R R^T - I| = {:.2e}, det = {:.6}",
        (r * r.transpose() - nalgebra::Matrix3::identity()).norm(),
        r.determinant()
    );

    // A can is rotationally symmetric about its vertical axis, so spinning
    // it is not an error; tilting it is.
    let pose = PoseState::identity();
    let spun = compose_update(
        &pose,
        &PoseError::new(rot_y_deg(90.0), Vector3::zeros(), Vector3::zeros()).unwrap(),
    )
    .unwrap();
    let sym = SymmetrySpec::axial_y();
    println!(
        "90 degree spin about the symmetry axis: {:.3} deg (axial), {:.3} deg (exact)",
        rotation_error_deg(&pose.rotation, &spun.rotation, &sym),
        rotation_error_deg(&pose.rotation, &spun.rotation, &SymmetrySpec::None)
    );

    // Oriented-box IoU has an exact evaluation; a Monte Carlo estimate
    // converges to it and serves as an independent cross-check.
    let a = random_pose(&mut rng);
    let mut b = a.clone();
    b.translation += Vector3::new(0.05 * a.size.x, 0.0, 0.0);
    let exact = iou3d(&a, &b);
    let sampled = iou3d_sampled(&a, &b, 200_000, 11);
    println!("iou3d: exact {exact:.4}, monte carlo {sampled:.4}");
}
