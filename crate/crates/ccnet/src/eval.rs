//! Evaluation over the 10 mel subbands and normalize-then-average ensembling.
//!
//! Scoring only ever reads a prediction's last 10 subbands; the envelope slot
//! of an 11-band prediction exists for training and is ignored here.
//! Ensembling z-scores each member per subband over time first — Pearson is
//! affine-invariant, so normalization cannot change any member's own score,
//! it only equalizes member scales before the average.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, SubjectId};
use crate::tensor::{Mat, ShapeError};
use crate::train::pearson;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction must have 10 or 11 subband rows, got {0}")]
    BadRows(usize),
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("misaligned ensemble members: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Row SD floor below which a subband is mapped to zeros by [`znormalize`].
pub const ZNORM_SD_FLOOR: f64 = 1e-12;

/// One model's output for one recording: 11 x T raw output or a 10 x T
/// mel-only view.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subject_id: SubjectId,
    pub stimulus_id: String,
    pub values: Mat,
}

impl Prediction {
    /// The mel rows: the last 10 subbands.
    pub fn mel_view(&self) -> Result<Mat, EvalError> {
        match self.values.rows() {
            10 => Ok(self.values.clone()),
            11 => Ok(self.values.slice_rows(1, 11)),
            other => Err(EvalError::BadRows(other)),
        }
    }
}

/// Scores for one recording.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingEval {
    pub subject_id: SubjectId,
    pub stimulus_id: String,
    pub subband_r: Vec<f64>,
    pub mean_r: f64,
}

/// Aggregate scores; `subband_r` holds the per-subband means across
/// recordings and `mean_r` their arithmetic mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub subband_r: Vec<f64>,
    pub mean_r: f64,
    pub n_recordings: usize,
    pub per_recording: Vec<RecordingEval>,
}

/// Per-subband Pearson of a prediction against the target mel, mean over the
/// 10 subbands.
pub fn evaluate(pred: &Prediction, target_mel: &Mat) -> Result<RecordingEval, EvalError> {
    let mel = pred.mel_view()?;
    if target_mel.rows() != 10 {
        return Err(EvalError::BadRows(target_mel.rows()));
    }
    if mel.cols() != target_mel.cols() {
        return Err(EvalError::Shape(ShapeError::LengthMismatch {
            left: mel.cols(),
            right: target_mel.cols(),
        }));
    }
    let mut subband_r = Vec::with_capacity(10);
    for s in 0..10 {
        subband_r.push(pearson(mel.row(s), target_mel.row(s))?);
    }
    let mean_r = subband_r.iter().sum::<f64>() / 10.0;
    Ok(RecordingEval {
        subject_id: pred.subject_id.clone(),
        stimulus_id: pred.stimulus_id.clone(),
        subband_r,
        mean_r,
    })
}

/// Evaluates many (prediction, target-mel) pairs; recordings are weighted
/// uniformly.
pub fn evaluate_many(pairs: &[(&Prediction, &Mat)]) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyEnsemble);
    }
    let mut per_recording = Vec::with_capacity(pairs.len());
    for (pred, mel) in pairs {
        per_recording.push(evaluate(pred, mel)?);
    }
    let n = per_recording.len() as f64;
    let mut subband_r = vec![0.0; 10];
    for r in &per_recording {
        for s in 0..10 {
            subband_r[s] += r.subband_r[s] / n;
        }
    }
    let mean_r = subband_r.iter().sum::<f64>() / 10.0;
    Ok(EvalReport {
        subband_r,
        mean_r,
        n_recordings: per_recording.len(),
        per_recording,
    })
}

/// Z-scores each row over time: mean 0, population SD 1; rows with SD below
/// [`ZNORM_SD_FLOOR`] become all-zero.
pub fn znormalize_rows(values: &Mat) -> Mat {
    let mut out = values.clone();
    let n = values.cols() as f64;
    for r in 0..values.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd < ZNORM_SD_FLOOR {
            row.fill(0.0);
        } else {
            for v in row.iter_mut() {
                *v = (*v - mean) / sd;
            }
        }
    }
    out
}

/// [`znormalize_rows`] applied to a prediction.
pub fn znormalize(pred: &Prediction) -> Prediction {
    Prediction {
        subject_id: pred.subject_id.clone(),
        stimulus_id: pred.stimulus_id.clone(),
        values: znormalize_rows(&pred.values),
    }
}

/// Elementwise mean of the z-normalized members, in member order.
///
/// Members must reference the same recording with identical shapes.
pub fn ensemble(members: &[Prediction]) -> Result<Prediction, EvalError> {
    let first = members.first().ok_or(EvalError::EmptyEnsemble)?;
    for m in members {
        if m.subject_id != first.subject_id || m.stimulus_id != first.stimulus_id {
            return Err(EvalError::Misaligned(format!(
                "member for {}/{} mixed with {}/{}",
                m.subject_id, m.stimulus_id, first.subject_id, first.stimulus_id
            )));
        }
        if m.values.rows() != first.values.rows() || m.values.cols() != first.values.cols() {
            return Err(EvalError::Misaligned(format!(
                "member shape {}x{} differs from {}x{}",
                m.values.rows(),
                m.values.cols(),
                first.values.rows(),
                first.values.cols()
            )));
        }
    }
    let mut acc = Mat::zeros(first.values.rows(), first.values.cols());
    for m in members {
        let z = znormalize_rows(&m.values);
        for (a, v) in acc.data_mut().iter_mut().zip(z.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    for a in acc.data_mut() {
        *a *= inv;
    }
    Ok(Prediction {
        subject_id: first.subject_id.clone(),
        stimulus_id: first.stimulus_id.clone(),
        values: acc,
    })
}

/// What goes into an ensemble: the member checkpoint ids, an optional fold
/// grouping, and the normalization applied before averaging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    pub fold_id: Option<u32>,
    pub normalization: String,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.members.is_empty() {
            return Err(EvalError::EmptyEnsemble);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub subject_id: SubjectId,
    pub stimulus_id: String,
    pub rows: usize,
    pub t_samples: usize,
    pub file: String,
}

/// Manifest for a directory of prediction files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub checkpoint_id: String,
    pub normalization: String,
    pub recordings: Vec<PredictionEntry>,
    /// Present when this set is the output of an ensemble.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
}

/// Writes predictions as raw f32 files plus a manifest linking them to their
/// checkpoint and normalization mode; `ensemble` records member provenance
/// when the set is a combined prediction.
pub fn save_predictions(
    dir: &Path,
    preds: &[Prediction],
    checkpoint_id: &str,
    normalization: &str,
    ensemble: Option<&EnsembleSpec>,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(data::io_err(dir))?;
    let mut entries = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        let file = format!("pred_{i:04}.raw");
        data::write_raw_f32(&dir.join(&file), &p.values)?;
        entries.push(PredictionEntry {
            subject_id: p.subject_id.clone(),
            stimulus_id: p.stimulus_id.clone(),
            rows: p.values.rows(),
            t_samples: p.values.cols(),
            file,
        });
    }
    let manifest = PredictionManifest {
        checkpoint_id: checkpoint_id.to_string(),
        normalization: normalization.to_string(),
        recordings: entries,
        ensemble: ensemble.cloned(),
    };
    let mpath = dir.join("manifest");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, body).map_err(data::io_err(&mpath))?;
    Ok(())
}

/// Loads a prediction directory written by [`save_predictions`].
pub fn load_predictions(dir: &Path) -> Result<(Vec<Prediction>, PredictionManifest), DataError> {
    let mpath = dir.join("manifest");
    if !mpath.exists() {
        return Err(DataError::MissingFile(mpath));
    }
    let body = fs::read_to_string(&mpath).map_err(data::io_err(&mpath))?;
    let manifest: PredictionManifest =
        serde_json::from_str(&body).map_err(|e| DataError::Manifest {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
    let mut preds = Vec::with_capacity(manifest.recordings.len());
    for entry in &manifest.recordings {
        let path: PathBuf = dir.join(&entry.file);
        let values = data::read_raw_f32(&path, entry.rows, entry.t_samples)?;
        preds.push(Prediction {
            subject_id: entry.subject_id.clone(),
            stimulus_id: entry.stimulus_id.clone(),
            values,
        });
    }
    Ok((preds, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn pred(values: Mat) -> Prediction {
        Prediction {
            subject_id: SubjectId::Known(1),
            stimulus_id: "S1".into(),
            values,
        }
    }

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let target = rand_mat(10, 40, &mut rng);
        let r = evaluate(&pred(target.clone()), &target).unwrap();
        assert!(r.subband_r.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!((r.mean_r - 1.0).abs() < 1e-6);
    }

    #[test]
    fn anti_prediction_scores_minus_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let target = rand_mat(10, 40, &mut rng);
        let neg = Mat::from_vec(10, 40, target.data().iter().map(|v| -v).collect());
        let r = evaluate(&pred(neg), &target).unwrap();
        assert!((r.mean_r + 1.0).abs() < 1e-6);
    }

    #[test]
    fn half_constant_rows_score_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let target = rand_mat(10, 40, &mut rng);
        let mut values = target.clone();
        for s in 5..10 {
            values.row_mut(s).fill(0.25); // constant rows define r = 0
        }
        let r = evaluate(&pred(values), &target).unwrap();
        assert!((r.mean_r - 0.5).abs() < 1e-6);
    }

    #[test]
    fn eleven_row_predictions_ignore_the_envelope_slot() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let target = rand_mat(10, 30, &mut rng);
        let env = Mat::from_vec(1, 30, vec![f64::NAN; 30]); // poisoned row 0
        let full = Mat::vstack(&env, &target).unwrap();
        let r = evaluate(&pred(full), &target).unwrap();
        assert!(r.mean_r.is_finite());
        assert!((r.mean_r - 1.0).abs() < 1e-6);
    }

    #[test]
    fn znormalize_hand_example_and_guards() {
        let m = Mat::from_vec(1, 3, vec![1., 2., 3.]);
        let z = znormalize_rows(&m);
        assert!((z.get(0, 0) + 1.22474).abs() < 1e-4);
        assert!(z.get(0, 1).abs() < 1e-12);
        assert!((z.get(0, 2) - 1.22474).abs() < 1e-4);
        let c = znormalize_rows(&Mat::from_vec(1, 4, vec![7.; 4]));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn znormalize_is_idempotent_and_score_preserving() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = rand_mat(3, 32, &mut rng);
            let z1 = znormalize_rows(&x);
            let z2 = znormalize_rows(&z1);
            for (a, b) in z1.data().iter().zip(z2.data()) {
                assert!((a - b).abs() < 1e-9);
            }
            let y = rand_mat(3, 32, &mut rng);
            for r in 0..3 {
                let before = pearson(x.row(r), y.row(r)).unwrap();
                let after = pearson(z1.row(r), y.row(r)).unwrap();
                assert!((before - after).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ensemble_of_copies_is_the_znormalized_member() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let p = pred(rand_mat(11, 25, &mut rng));
        let e = ensemble(&[p.clone(), p.clone(), p.clone()]).unwrap();
        let z = znormalize(&p);
        // mean of three identical copies reassociates, so allow fp slack
        for (a, b) in e.values.data().iter().zip(z.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // singleton ensemble is exact
        let single = ensemble(std::slice::from_ref(&p)).unwrap();
        assert_eq!(single.values, z.values);
    }

    #[test]
    fn opposite_members_cancel() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = pred(rand_mat(10, 25, &mut rng));
        let neg = pred(Mat::from_vec(10, 25, a.values.data().iter().map(|v| -v).collect()));
        let e = ensemble(&[a, neg]).unwrap();
        assert!(e.values.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn misaligned_members_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let a = pred(rand_mat(10, 25, &mut rng));
        let mut b = pred(rand_mat(10, 25, &mut rng));
        b.stimulus_id = "OTHER".into();
        assert!(matches!(ensemble(&[a.clone(), b]), Err(EvalError::Misaligned(_))));
        let c = pred(rand_mat(10, 26, &mut rng));
        assert!(matches!(ensemble(&[a, c]), Err(EvalError::Misaligned(_))));
        assert!(matches!(ensemble(&[]), Err(EvalError::EmptyEnsemble)));
    }

    #[test]
    fn ensemble_dominates_member_mean() {
        // members with nonnegative correlations against a fixed target:
        // the ensemble's correlation is at least the members' mean
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let t = 64;
        for _ in 0..100 {
            let target = rand_mat(1, t, &mut rng);
            let n_members = rng.gen_range(2..6);
            let mut members = Vec::new();
            let mut r_sum = 0.0;
            let mut all_nonneg = true;
            for _ in 0..n_members {
                let scale = rng.gen_range(0.2..1.5);
                let noise = rng.gen_range(0.1..1.5);
                let vals: Vec<f64> = (0..t)
                    .map(|i| scale * target.get(0, i) + noise * rng.gen_range(-1.0..1.0))
                    .collect();
                let m = Mat::from_vec(1, t, vals);
                let r = pearson(m.row(0), target.row(0)).unwrap();
                all_nonneg &= r >= 0.0;
                r_sum += r;
                members.push(pred(m));
            }
            if !all_nonneg {
                continue; // property is only claimed for nonnegative members
            }
            let e = ensemble(&members).unwrap();
            let re = pearson(e.values.row(0), target.row(0)).unwrap();
            let mean_r = r_sum / n_members as f64;
            assert!(
                re >= mean_r - 1e-6,
                "ensemble r {re} below member mean {mean_r}"
            );
        }
    }

    #[test]
    fn report_mean_matches_subband_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let t1 = rand_mat(10, 30, &mut rng);
        let t2 = rand_mat(10, 30, &mut rng);
        let p1 = pred(t1.clone());
        let mut p2 = pred(rand_mat(10, 30, &mut rng));
        p2.stimulus_id = "S2".into();
        let report = evaluate_many(&[(&p1, &t1), (&p2, &t2)]).unwrap();
        assert_eq!(report.n_recordings, 2);
        let mean: f64 = report.subband_r.iter().sum::<f64>() / 10.0;
        assert!((report.mean_r - mean).abs() < 1e-9);
        assert_eq!(report.subband_r.len(), 10);
    }

    #[test]
    fn prediction_files_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let dir = tempfile::tempdir().unwrap();
        let mut a = pred(rand_mat(11, 20, &mut rng));
        for v in a.values.data_mut() {
            *v = *v as f32 as f64; // keep f32-representable for bitwise round trip
        }
        let mut b = a.clone();
        b.stimulus_id = "S9".into();
        save_predictions(dir.path(), &[a.clone(), b.clone()], "abc123", "raw", None).unwrap();
        let (loaded, manifest) = load_predictions(dir.path()).unwrap();
        assert_eq!(manifest.checkpoint_id, "abc123");
        assert_eq!(manifest.normalization, "raw");
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0], a);
        assert_eq!(loaded[1], b);
    }

    #[test]
    fn eval_report_serializes_fixed_keys() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let t = rand_mat(10, 30, &mut rng);
        let report = evaluate_many(&[(&pred(t.clone()), &t)]).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("subband_r").unwrap().as_array().unwrap().len() == 10);
        assert!(json.get("mean_r").is_some());
        assert_eq!(json.get("n_recordings").unwrap().as_u64(), Some(1));
    }
}
