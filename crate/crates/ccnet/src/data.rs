//! Recordings on disk, cross-validation folds, windowing and synthetic data.
//!
//! A recording is a directory holding a JSON `manifest` plus three raw
//! little-endian f32 arrays: `eeg.raw` (64 x T, row-major channel-then-time),
//! `mel.raw` (10 x T) and `env.raw` (1 x T). In memory everything is f64, but
//! values always round-trip f32 exactly because they enter the pipeline
//! through the f32 files (or the generator, which rounds through f32).

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Mat, ShapeError};

pub const EEG_CHANNELS: usize = 64;
pub const MEL_BANDS: usize = 10;
pub const ENV_BANDS: usize = 1;
pub const SAMPLE_RATE_HZ: u32 = 64;
/// The audiobook stimulus shared between training and test material; always
/// excluded from validation splits.
pub const SHARED_STIMULUS: &str = "AB1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}: expected {expected} bytes ({rows}x{cols} f32), got {got}")]
    LengthMismatch {
        file: PathBuf,
        expected: usize,
        got: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{file}: contains non-finite values")]
    NonFinite { file: PathBuf },
    #[error("bad manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("bad channel counts in {path}: expected eeg={EEG_CHANNELS} mel={MEL_BANDS} env={ENV_BANDS}")]
    BadChannels { path: PathBuf },
    #[error("window length {len} exceeds recording length {t}")]
    WindowTooLong { len: usize, t: usize },
    #[error("window hop must be >= 1")]
    ZeroHop,
    #[error("empty {split} split for fold {fold_id}")]
    EmptySplit { split: &'static str, fold_id: u32 },
    #[error("invalid fold: {0}")]
    BadFold(String),
    #[error("invalid synth spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Subject identity: a 1-based integer for the training cohort, or an opaque
/// label for held-out test subjects that the fold tables never reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubjectId {
    Known(u32),
    Opaque(String),
}

impl SubjectId {
    pub fn known(&self) -> Option<u32> {
        match self {
            SubjectId::Known(n) => Some(*n),
            SubjectId::Opaque(_) => None,
        }
    }
}

impl std::fmt::Display for SubjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubjectId::Known(n) => write!(f, "{n}"),
            SubjectId::Opaque(s) => write!(f, "{s}"),
        }
    }
}

/// JSON has no literal for infinities, so an infinite SNR (noise off) is
/// stored as the string `"inf"`.
pub(crate) mod f64_maybe_inf {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(n),
            Raw::Text(t) => t.trim().parse::<f64>().map_err(D::Error::custom),
        }
    }
}

/// Generator provenance stored in synthetic manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProvenance {
    pub master_seed: u64,
    pub subject_seed: u64,
    pub recording_seed: u64,
    #[serde(with = "f64_maybe_inf")]
    pub snr_db: f64,
    pub lag_taps: usize,
    pub smooth_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    subject_id: SubjectId,
    stimulus_id: String,
    sample_rate_hz: u32,
    t_samples: usize,
    eeg_channels: usize,
    mel_bands: usize,
    env_bands: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synth: Option<SynthProvenance>,
}

/// One trial: EEG, mel target, envelope, plus identity.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingSample {
    pub subject_id: SubjectId,
    pub stimulus_id: String,
    /// 64 x T
    pub eeg: Mat,
    /// 10 x T
    pub mel: Mat,
    /// 1 x T
    pub envelope: Mat,
    pub synth: Option<SynthProvenance>,
}

impl RecordingSample {
    pub fn t_samples(&self) -> usize {
        self.eeg.cols()
    }

    fn validate(&self) -> Result<(), DataError> {
        let t = self.eeg.cols();
        if self.mel.cols() != t || self.envelope.cols() != t {
            return Err(ShapeError::LengthMismatch {
                left: t,
                right: self.mel.cols().min(self.envelope.cols()),
            }
            .into());
        }
        Ok(())
    }
}

pub(crate) fn write_raw_f32(path: &Path, m: &Mat) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub(crate) fn read_raw_f32(path: &Path, rows: usize, cols: usize) -> Result<Mat, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(DataError::LengthMismatch {
            file: path.to_path_buf(),
            expected,
            got: bytes.len(),
            rows,
            cols,
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(DataError::NonFinite {
            file: path.to_path_buf(),
        });
    }
    Ok(Mat::from_vec(rows, cols, data))
}

/// Writes a recording directory: `manifest`, `eeg.raw`, `mel.raw`, `env.raw`.
pub fn save_recording(dir: &Path, rec: &RecordingSample) -> Result<(), DataError> {
    rec.validate()?;
    if rec.eeg.rows() != EEG_CHANNELS || rec.mel.rows() != MEL_BANDS || rec.envelope.rows() != ENV_BANDS {
        return Err(DataError::BadChannels {
            path: dir.to_path_buf(),
        });
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        subject_id: rec.subject_id.clone(),
        stimulus_id: rec.stimulus_id.clone(),
        sample_rate_hz: SAMPLE_RATE_HZ,
        t_samples: rec.t_samples(),
        eeg_channels: EEG_CHANNELS,
        mel_bands: MEL_BANDS,
        env_bands: ENV_BANDS,
        synth: rec.synth.clone(),
    };
    let mpath = dir.join("manifest");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, body).map_err(io_err(&mpath))?;
    write_raw_f32(&dir.join("eeg.raw"), &rec.eeg)?;
    write_raw_f32(&dir.join("mel.raw"), &rec.mel)?;
    write_raw_f32(&dir.join("env.raw"), &rec.envelope)?;
    Ok(())
}

/// Loads and validates one recording directory.
pub fn load_recording(dir: &Path) -> Result<RecordingSample, DataError> {
    let mpath = dir.join("manifest");
    if !mpath.exists() {
        return Err(DataError::MissingFile(mpath));
    }
    let body = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&body).map_err(|e| DataError::Manifest {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    if manifest.eeg_channels != EEG_CHANNELS
        || manifest.mel_bands != MEL_BANDS
        || manifest.env_bands != ENV_BANDS
    {
        return Err(DataError::BadChannels { path: mpath });
    }
    if manifest.sample_rate_hz != SAMPLE_RATE_HZ {
        return Err(DataError::Manifest {
            path: mpath,
            msg: format!("sample_rate_hz must be {SAMPLE_RATE_HZ}"),
        });
    }
    let t = manifest.t_samples;
    if t < 1 {
        return Err(DataError::Manifest {
            path: mpath,
            msg: "t_samples must be >= 1".into(),
        });
    }
    let rec = RecordingSample {
        subject_id: manifest.subject_id,
        stimulus_id: manifest.stimulus_id,
        eeg: read_raw_f32(&dir.join("eeg.raw"), EEG_CHANNELS, t)?,
        mel: read_raw_f32(&dir.join("mel.raw"), MEL_BANDS, t)?,
        envelope: read_raw_f32(&dir.join("env.raw"), ENV_BANDS, t)?,
        synth: manifest.synth,
    };
    rec.validate()?;
    Ok(rec)
}

/// Loads every recording subdirectory of `dir`, sorted by directory name.
pub fn load_dataset(dir: &Path) -> Result<Vec<RecordingSample>, DataError> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest").exists())
        .collect();
    subdirs.sort();
    subdirs.iter().map(|d| load_recording(d)).collect()
}

/// Stacks envelope on top of mel: row 0 = envelope, rows 1..=10 = mel.
pub fn fuse_targets(envelope: &Mat, mel: &Mat) -> Result<Mat, ShapeError> {
    if envelope.cols() != mel.cols() {
        return Err(ShapeError::LengthMismatch {
            left: envelope.cols(),
            right: mel.cols(),
        });
    }
    Mat::vstack(envelope, mel)
}

/// The mel rows of a fused 11-band target (rows 1..=10).
pub fn mel_of_fused(fused: &Mat) -> Mat {
    assert_eq!(fused.rows(), ENV_BANDS + MEL_BANDS);
    fused.slice_rows(ENV_BANDS, ENV_BANDS + MEL_BANDS)
}

/// Window start offsets: 0, hop, 2*hop, ... while start + len <= t.
pub fn window_starts(t: usize, len: usize, hop: usize) -> Vec<usize> {
    (0..)
        .map(|i| i * hop)
        .take_while(|start| start + len <= t)
        .collect()
}

/// Cuts a recording into `(eeg, fused-target)` window pairs of `len` samples
/// every `hop` samples. `len` greater than the recording is an error unless
/// `allow_short`, which then yields an empty list.
pub fn window(
    rec: &RecordingSample,
    len: usize,
    hop: usize,
    allow_short: bool,
) -> Result<Vec<(Mat, Mat)>, DataError> {
    if hop < 1 {
        return Err(DataError::ZeroHop);
    }
    let t = rec.t_samples();
    if len > t {
        if allow_short {
            return Ok(Vec::new());
        }
        return Err(DataError::WindowTooLong { len, t });
    }
    let fused = fuse_targets(&rec.envelope, &rec.mel)?;
    Ok(window_starts(t, len, hop)
        .into_iter()
        .map(|s| (rec.eeg.slice_cols(s, len), fused.slice_cols(s, len)))
        .collect())
}

/// Train/validation subject split for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_id: u32,
    pub train_subjects: BTreeSet<u32>,
    pub val_subjects: BTreeSet<u32>,
    pub excluded_val_stimuli: BTreeSet<String>,
}

impl FoldSpec {
    /// Builds a fold; the shared stimulus is always excluded from validation.
    pub fn new(
        fold_id: u32,
        train_subjects: BTreeSet<u32>,
        val_subjects: BTreeSet<u32>,
    ) -> Result<FoldSpec, DataError> {
        if train_subjects.is_empty() || val_subjects.is_empty() {
            return Err(DataError::BadFold("train and val subject sets must be non-empty".into()));
        }
        if !train_subjects.is_disjoint(&val_subjects) {
            return Err(DataError::BadFold("train and val subject sets overlap".into()));
        }
        let mut excluded_val_stimuli = BTreeSet::new();
        excluded_val_stimuli.insert(SHARED_STIMULUS.to_string());
        Ok(FoldSpec {
            fold_id,
            train_subjects,
            val_subjects,
            excluded_val_stimuli,
        })
    }

    /// Re-validates a fold read from disk, restoring the shared-stimulus
    /// exclusion if absent.
    pub fn validated(mut self) -> Result<FoldSpec, DataError> {
        if self.train_subjects.is_empty() || self.val_subjects.is_empty() {
            return Err(DataError::BadFold("train and val subject sets must be non-empty".into()));
        }
        if !self.train_subjects.is_disjoint(&self.val_subjects) {
            return Err(DataError::BadFold("train and val subject sets overlap".into()));
        }
        self.excluded_val_stimuli.insert(SHARED_STIMULUS.to_string());
        Ok(self)
    }
}

fn range_set(lo: u32, hi: u32) -> BTreeSet<u32> {
    (lo..=hi).collect()
}

/// The four-fold subject split over the 85-subject cohort:
/// validation subjects 1-26, 27-48, 49-71 and 72-85 respectively, with the
/// remaining subjects training and the shared stimulus excluded from every
/// validation set.
pub fn make_folds() -> Vec<FoldSpec> {
    let all = || range_set(1, 85);
    let folds = [
        (1, range_set(1, 26)),
        (2, range_set(27, 48)),
        (3, range_set(49, 71)),
        (4, range_set(72, 85)),
    ];
    folds
        .into_iter()
        .map(|(id, val)| {
            let train: BTreeSet<u32> = all().difference(&val).copied().collect();
            FoldSpec::new(id, train, val).expect("table folds are valid")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Recordings belonging to one split of a fold.
///
/// Train: every recording of a training subject. Validation: recordings of
/// validation subjects whose stimulus is neither explicitly excluded nor
/// present anywhere in the fold's training material (a stimulus seen in
/// training must stay unseen in validation).
pub fn select_recordings<'a>(
    dataset: &'a [RecordingSample],
    fold: &FoldSpec,
    split: Split,
) -> Result<Vec<&'a RecordingSample>, DataError> {
    let in_set = |rec: &RecordingSample, set: &BTreeSet<u32>| {
        rec.subject_id.known().is_some_and(|n| set.contains(&n))
    };
    let selected: Vec<&RecordingSample> = match split {
        Split::Train => dataset
            .iter()
            .filter(|r| in_set(r, &fold.train_subjects))
            .collect(),
        Split::Val => {
            let train_stimuli: BTreeSet<&str> = dataset
                .iter()
                .filter(|r| in_set(r, &fold.train_subjects))
                .map(|r| r.stimulus_id.as_str())
                .collect();
            dataset
                .iter()
                .filter(|r| {
                    in_set(r, &fold.val_subjects)
                        && !fold.excluded_val_stimuli.contains(&r.stimulus_id)
                        && !train_stimuli.contains(r.stimulus_id.as_str())
                })
                .collect()
        }
    };
    if selected.is_empty() {
        return Err(DataError::EmptySplit {
            split: match split {
                Split::Train => "train",
                Split::Val => "val",
            },
            fold_id: fold.fold_id,
        });
    }
    Ok(selected)
}

/// [`select_recordings`] then [`window`]: the flat window list for a split.
pub fn select_windows(
    dataset: &[RecordingSample],
    fold: &FoldSpec,
    split: Split,
    len: usize,
    hop: usize,
) -> Result<Vec<(Mat, Mat)>, DataError> {
    let recs = select_recordings(dataset, fold, split)?;
    let mut out = Vec::new();
    for rec in recs {
        out.extend(window(rec, len, hop, false)?);
    }
    Ok(out)
}

/// Synthetic dataset shape: `n_subjects * recordings_per_subject` recordings
/// of `t_samples` each, EEG generated as a per-subject spatial mix of lagged
/// mel plus noise at `snr_db` (infinite = noise-free).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub recordings_per_subject: usize,
    pub t_samples: usize,
    #[serde(with = "f64_maybe_inf")]
    pub snr_db: f64,
    pub lag_taps: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_subjects < 1 || self.recordings_per_subject < 1 || self.t_samples < 1 {
            return Err(DataError::BadSpec("counts must be >= 1".into()));
        }
        if self.lag_taps < 1 {
            return Err(DataError::BadSpec("lag_taps must be >= 1".into()));
        }
        if self.snr_db.is_nan() {
            return Err(DataError::BadSpec("snr_db must not be NaN".into()));
        }
        Ok(())
    }
}

/// Moving-average width used to smooth the mel noise.
pub const SYNTH_SMOOTH_LEN: usize = 15;

use crate::hash::fnv1a64;

/// Stable seed derivation for per-subject / per-recording RNG streams.
fn derive_seed(master: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut buf = Vec::with_capacity(tag.len() + 24);
    buf.extend_from_slice(&master.to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    buf.extend_from_slice(&a.to_le_bytes());
    buf.extend_from_slice(&b.to_le_bytes());
    fnv1a64(&buf)
}

fn round_f32(m: &mut Mat) {
    for v in m.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Per-subject 64 x (10 * lag_taps) spatial mixing matrix, standard normal
/// scaled by 1/sqrt(10 * lag_taps), drawn from the subject's seed.
fn subject_mixing(subject_seed: u64, lag_taps: usize) -> Vec<f64> {
    let cols = MEL_BANDS * lag_taps;
    let scale = 1.0 / (cols as f64).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(subject_seed);
    (0..EEG_CHANNELS * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// Generates one synthetic recording.
///
/// mel = moving-average-smoothed uniform noise (positive); envelope = mean of
/// the mel rows; `eeg[c,t] = sum_s sum_l S[c, s*L+l] * mel[s, t-l]` plus
/// Gaussian noise scaled to `snr_db`. All arrays are rounded through f32 so
/// the on-disk format is lossless.
pub fn synth_recording(spec: &SynthSpec, subject: u32, rec_idx: usize) -> RecordingSample {
    let t = spec.t_samples;
    let l = spec.lag_taps;
    let subject_seed = derive_seed(spec.seed, "subject", subject as u64, 0);
    let recording_seed = derive_seed(spec.seed, "recording", subject as u64, rec_idx as u64);
    let mixing = subject_mixing(subject_seed, l);
    let mut rng = ChaCha20Rng::seed_from_u64(recording_seed);

    // smoothed positive noise per mel band
    let mut mel = Mat::zeros(MEL_BANDS, t);
    let half = SYNTH_SMOOTH_LEN / 2;
    for s in 0..MEL_BANDS {
        let raw: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0)).collect();
        let row = mel.row_mut(s);
        for i in 0..t {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(t);
            row[i] = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
    }
    round_f32(&mut mel);

    // envelope = per-sample mean of the mel rows
    let mut envelope = Mat::zeros(ENV_BANDS, t);
    for i in 0..t {
        let mut acc = 0.0;
        for s in 0..MEL_BANDS {
            acc += mel.get(s, i);
        }
        envelope.set(0, i, acc / MEL_BANDS as f64);
    }
    round_f32(&mut envelope);

    // eeg = S * lagged centered mel (causal lags, zero-padded past); the
    // per-row mean is removed before mixing so snr_db measures noise against
    // the informative fluctuations, not the positive offset of the mel rows
    let mut centered = mel.clone();
    for s in 0..MEL_BANDS {
        let row = centered.row_mut(s);
        let mean = row.iter().sum::<f64>() / t as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    let mut eeg = Mat::zeros(EEG_CHANNELS, t);
    for c in 0..EEG_CHANNELS {
        let crow = eeg.row_mut(c);
        for s in 0..MEL_BANDS {
            for lag in 0..l {
                let w = mixing[c * (MEL_BANDS * l) + s * l + lag];
                for i in lag..t {
                    crow[i] += w * centered.get(s, i - lag);
                }
            }
        }
    }
    if spec.snr_db.is_finite() {
        let signal_power =
            eeg.data().iter().map(|v| v * v).sum::<f64>() / eeg.data().len() as f64;
        let noise_power = signal_power / 10f64.powf(spec.snr_db / 10.0);
        let noise_sd = noise_power.sqrt();
        for v in eeg.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise_sd * z;
        }
    }
    round_f32(&mut eeg);

    RecordingSample {
        subject_id: SubjectId::Known(subject),
        stimulus_id: format!("S{subject:03}_{rec_idx:02}"),
        eeg,
        mel,
        envelope,
        synth: Some(SynthProvenance {
            master_seed: spec.seed,
            subject_seed,
            recording_seed,
            snr_db: spec.snr_db,
            lag_taps: l,
            smooth_len: SYNTH_SMOOTH_LEN,
        }),
    }
}

/// Generates the whole dataset in memory (subjects 1..=n, recordings per
/// subject in index order).
pub fn synth_dataset_mem(spec: &SynthSpec) -> Result<Vec<RecordingSample>, DataError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_subjects * spec.recordings_per_subject);
    for subject in 1..=spec.n_subjects as u32 {
        for rec_idx in 0..spec.recordings_per_subject {
            out.push(synth_recording(spec, subject, rec_idx));
        }
    }
    Ok(out)
}

/// Generates the dataset and writes one directory per recording under `out`.
/// Returns the recording directories, in generation order.
pub fn synth_dataset(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>, DataError> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut dirs = Vec::new();
    for subject in 1..=spec.n_subjects as u32 {
        for rec_idx in 0..spec.recordings_per_subject {
            let rec = synth_recording(spec, subject, rec_idx);
            let dir = out.join(format!("sub{subject:03}_rec{rec_idx:02}"));
            save_recording(&dir, &rec)?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}
