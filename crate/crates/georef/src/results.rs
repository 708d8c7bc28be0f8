//! Persistence of refinement outputs: a versioned JSON file carrying each
//! instance's full pose trajectory plus the config fingerprint that
//! produced it. Coordinates survive a round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalmetrics::InstanceResult;
use crate::geometry::{PointCloud, PoseState, SymmetrySpec};
use crate::synthdata::SampleRecord;
use crate::trainrefine::{refine_iterative, ErrorPredictor, TrainError};

pub const RESULTS_FORMAT: &str = "georef-results/1";

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{context}: {source}")]
    Json {
        context: String,
        source: serde_json::Error,
    },
    #[error("incompatible results format {found:?}, expected {RESULTS_FORMAT:?}")]
    Format { found: String },
    #[error("malformed results: {0}")]
    Shape(String),
}

/// One instance's refinement record. `trajectory[0]` is the initial pose
/// and `trajectory[k]` the estimate after k iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceTrajectory {
    pub category: String,
    pub instance_id: String,
    pub symmetry: SymmetrySpec,
    pub gt: PoseState,
    pub trajectory: Vec<PoseState>,
}

impl InstanceTrajectory {
    /// The pose after the last refinement iteration.
    pub fn final_pose(&self) -> &PoseState {
        self.trajectory.last().expect("trajectory is never empty")
    }
}

/// A refinement run over one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsFile {
    pub format: String,
    pub fingerprint: String,
    pub iters: usize,
    pub records: Vec<InstanceTrajectory>,
}

impl ResultsFile {
    /// Wrap trajectories, checking that every record carries `iters` + 1
    /// poses.
    pub fn new(
        fingerprint: String,
        iters: usize,
        records: Vec<InstanceTrajectory>,
    ) -> Result<Self, ResultsError> {
        let file = Self {
            format: RESULTS_FORMAT.to_string(),
            fingerprint,
            iters,
            records,
        };
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<(), ResultsError> {
        if self.format != RESULTS_FORMAT {
            return Err(ResultsError::Format {
                found: self.format.clone(),
            });
        }
        for (i, rec) in self.records.iter().enumerate() {
            if rec.trajectory.len() != self.iters + 1 {
                return Err(ResultsError::Shape(format!(
                    "record {i} has {} poses, expected iters + 1 = {}",
                    rec.trajectory.len(),
                    self.iters + 1
                )));
            }
        }
        Ok(())
    }

    /// Sorted distinct categories present in the records.
    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self.records.iter().map(|r| r.category.clone()).collect();
        cats.sort();
        cats.dedup();
        cats
    }

    /// Predictions as of iteration `k` (0 = initial poses).
    pub fn at_iteration(&self, k: usize) -> Result<Vec<InstanceResult>, ResultsError> {
        if k > self.iters {
            return Err(ResultsError::Shape(format!(
                "iteration {k} out of range, run has {} iterations",
                self.iters
            )));
        }
        Ok(self
            .records
            .iter()
            .map(|r| InstanceResult {
                category: r.category.clone(),
                symmetry: r.symmetry.clone(),
                pred: r.trajectory[k].clone(),
                gt: r.gt.clone(),
            })
            .collect())
    }

    /// Predictions after the last iteration.
    pub fn final_results(&self) -> Vec<InstanceResult> {
        self.at_iteration(self.iters).expect("iters is in range")
    }
}

/// Refine every record and collect the trajectories.
pub fn refine_dataset(
    predictor: &mut dyn ErrorPredictor,
    records: &[SampleRecord],
    iters: usize,
    fingerprint: &str,
) -> Result<ResultsFile, TrainError> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let trajectory =
            refine_iterative(predictor, &rec.observed, &rec.prior, &rec.init, iters)?;
        out.push(InstanceTrajectory {
            category: rec.category.clone(),
            instance_id: rec.instance_id.clone(),
            symmetry: rec.symmetry.clone(),
            gt: rec.gt.clone(),
            trajectory,
        });
    }
    Ok(ResultsFile::new(fingerprint.to_string(), iters, out)
        .expect("trajectories have iters + 1 poses"))
}

/// Results built from a dataset with every prediction set to its ground
/// truth; the degenerate baseline used for pipeline identity checks.
pub fn gt_as_pred(records: &[SampleRecord], fingerprint: &str) -> ResultsFile {
    let records = records
        .iter()
        .map(|r| InstanceTrajectory {
            category: r.category.clone(),
            instance_id: r.instance_id.clone(),
            symmetry: r.symmetry.clone(),
            gt: r.gt.clone(),
            trajectory: vec![r.gt.clone()],
        })
        .collect();
    ResultsFile::new(fingerprint.to_string(), 0, records).expect("single-pose trajectories")
}

pub fn save_results(path: &Path, results: &ResultsFile) -> Result<(), ResultsError> {
    results.validate()?;
    let json = serde_json::to_string_pretty(results).map_err(|source| ResultsError::Json {
        context: "serializing results".into(),
        source,
    })?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_results(path: &Path) -> Result<ResultsFile, ResultsError> {
    let raw = fs::read_to_string(path)?;
    // Check the version tag before strict parsing so an old file reports
    // incompatibility rather than a schema error.
    #[derive(Deserialize)]
    struct FormatOnly {
        format: String,
    }
    let tag: FormatOnly =
        serde_json::from_str(&raw).map_err(|source| ResultsError::Json {
            context: format!("reading format tag from {}", path.display()),
            source,
        })?;
    if tag.format != RESULTS_FORMAT {
        return Err(ResultsError::Format { found: tag.format });
    }
    let file: ResultsFile =
        serde_json::from_str(&raw).map_err(|source| ResultsError::Json {
            context: format!("parsing {}", path.display()),
            source,
        })?;
    file.validate()?;
    Ok(file)
}

/// Sample records rebuilt from trajectories so a results file can seed
/// further refinement; observed/prior clouds are not stored in results
/// files, so this is only available when the caller still has them.
pub fn with_clouds(
    results: &ResultsFile,
    clouds: &[(PointCloud, PointCloud)],
) -> Result<Vec<SampleRecord>, ResultsError> {
    if clouds.len() != results.records.len() {
        return Err(ResultsError::Shape(format!(
            "{} cloud pairs for {} records",
            clouds.len(),
            results.records.len()
        )));
    }
    Ok(results
        .records
        .iter()
        .zip(clouds)
        .map(|(r, (observed, prior))| SampleRecord {
            observed: observed.clone(),
            prior: prior.clone(),
            gt: r.gt.clone(),
            init: r.trajectory.last().expect("non-empty").clone(),
            category: r.category.clone(),
            symmetry: r.symmetry.clone(),
            instance_id: r.instance_id.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmetrics::compute_metrics;
    use crate::geometry::PerturbLimits;
    use crate::synthdata::{
        build_category_library, default_categories, mean_shape_prior, sample_record, stream_rng,
        NoiseModel,
    };
    use crate::trainrefine::OraclePredictor;
    use nalgebra::Vector3;
    use tempfile::tempdir;

    fn test_records(seed: u64, count: usize) -> Vec<SampleRecord> {
        let cats = default_categories();
        let mut rng = stream_rng(seed, 9);
        let lib = build_category_library(&cats[0], 1, &mut rng).unwrap();
        let prior = mean_shape_prior(&lib, 16).unwrap();
        (0..count)
            .map(|_| {
                sample_record(
                    &lib[0],
                    &prior,
                    Vector3::new(0.1, 0.2, 1.0),
                    16,
                    &NoiseModel::none(),
                    &PerturbLimits::default(),
                    &mut rng,
                )
                .unwrap()
            })
            .collect()
    }

    fn oracle_results(records: &[SampleRecord], iters: usize) -> ResultsFile {
        let mut out = Vec::new();
        for rec in records {
            let mut oracle = OraclePredictor { gt: rec.gt.clone() };
            let one = refine_dataset(&mut oracle, std::slice::from_ref(rec), iters, "fp").unwrap();
            out.extend(one.records);
        }
        ResultsFile::new("fp".into(), iters, out).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let records = test_records(1, 5);
        let results = oracle_results(&records, 3);
        let dir = tempdir().unwrap();
        let path = dir.path().join("results.json");
        save_results(&path, &results).unwrap();
        let back = load_results(&path).unwrap();
        assert_eq!(results, back);
    }

    #[test]
    fn old_version_is_rejected() {
        let records = test_records(2, 2);
        let results = oracle_results(&records, 1);
        let dir = tempdir().unwrap();
        let path = dir.path().join("results.json");
        save_results(&path, &results).unwrap();
        let raw = fs::read_to_string(&path)
            .unwrap()
            .replace(RESULTS_FORMAT, "georef-results/0");
        fs::write(&path, raw).unwrap();
        match load_results(&path) {
            Err(ResultsError::Format { found }) => assert_eq!(found, "georef-results/0"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let records = test_records(3, 1);
        let results = oracle_results(&records, 1);
        let dir = tempdir().unwrap();
        let path = dir.path().join("results.json");
        save_results(&path, &results).unwrap();
        let raw = fs::read_to_string(&path)
            .unwrap()
            .replacen("\"iters\"", "\"userdata\": 1, \"iters\"", 1);
        fs::write(&path, raw).unwrap();
        assert!(matches!(load_results(&path), Err(ResultsError::Json { .. })));
    }

    #[test]
    fn trajectory_length_is_iters_plus_one() {
        let records = test_records(4, 3);
        for iters in [0, 1, 4] {
            let results = oracle_results(&records, iters);
            for rec in &results.records {
                assert_eq!(rec.trajectory.len(), iters + 1);
            }
        }
        // mismatched lengths are rejected at construction
        let good = oracle_results(&records, 2);
        let err = ResultsFile::new("fp".into(), 3, good.records).unwrap_err();
        assert!(matches!(err, ResultsError::Shape(_)));
    }

    #[test]
    fn zero_iterations_returns_initial_poses() {
        let records = test_records(5, 4);
        let results = oracle_results(&records, 0);
        for (rec, src) in results.records.iter().zip(&records) {
            assert_eq!(rec.trajectory[0], src.init);
            assert_eq!(*rec.final_pose(), src.init);
        }
    }

    #[test]
    fn gt_as_pred_scores_perfectly() {
        let records = test_records(6, 6);
        let results = gt_as_pred(&records, "fp");
        let report =
            compute_metrics(&results.final_results(), &results.categories(), "fp").unwrap();
        assert_eq!(report.mean.deg5_cm2, 1.0);
        assert_eq!(report.mean.iou75, 1.0);
        assert_eq!(report.mean.cm2, 1.0);
    }

    #[test]
    fn at_iteration_bounds() {
        let records = test_records(7, 2);
        let results = oracle_results(&records, 2);
        assert_eq!(results.at_iteration(0).unwrap().len(), 2);
        assert_eq!(results.at_iteration(2).unwrap().len(), 2);
        assert!(results.at_iteration(3).is_err());
        // oracle reaches gt from iteration 1 onward
        for r in results.at_iteration(1).unwrap() {
            assert!((r.pred.rotation - r.gt.rotation).norm() < 1e-9);
        }
    }
}
