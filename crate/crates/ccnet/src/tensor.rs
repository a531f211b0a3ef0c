//! Dense tensor carriers for EEG/mel signals.
//!
//! [`Tensor3`] is the universal signal type: batch x channel x time, row-major
//! with time as the fastest axis so per-channel rows are contiguous slices.
//! [`Mat`] is the 2-D view used for on-disk recordings (rows x time).

use thiserror::Error;

/// Shape violations raised by tensor ops.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("channel mismatch: expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("time axis too short: need at least {need} samples, got {got}")]
    TimeTooShort { need: usize, got: usize },
    #[error("batch/time mismatch: expected {expected:?}, got {got:?}")]
    BatchTimeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input list")]
    EmptyList,
    #[error("expected scalar (1x1x1) tensor, got {got:?}")]
    NotScalar { got: (usize, usize, usize) },
}

/// Batch x channel x time array of `f64`, row-major `[batch][channel][time]`.
///
/// All three dims are at least 1; this is asserted at construction since a
/// zero-sized axis is always a programming error here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    batch: usize,
    channels: usize,
    time: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, channels: usize, time: usize) -> Self {
        assert!(
            batch >= 1 && channels >= 1 && time >= 1,
            "all tensor dims must be >= 1, got ({batch},{channels},{time})"
        );
        Tensor3 {
            batch,
            channels,
            time,
            data: vec![0.0; batch * channels * time],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, time: usize, data: Vec<f64>) -> Self {
        assert!(batch >= 1 && channels >= 1 && time >= 1);
        assert_eq!(data.len(), batch * channels * time, "data length mismatch");
        Tensor3 {
            batch,
            channels,
            time,
            data,
        }
    }

    /// Single-batch tensor from per-channel rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let time = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == time));
        let mut data = Vec::with_capacity(rows.len() * time);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor3::from_vec(1, rows.len(), time, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.time)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, t: usize) -> f64 {
        self.data[(b * self.channels + c) * self.time + t]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, t: usize, v: f64) {
        self.data[(b * self.channels + c) * self.time + t] = v;
    }

    /// Contiguous time row for one (batch, channel).
    #[inline]
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let start = (b * self.channels + c) * self.time;
        &self.data[start..start + self.time]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = (b * self.channels + c) * self.time;
        &mut self.data[start..start + self.time]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar payload of a 1x1x1 tensor.
    pub fn scalar(&self) -> Result<f64, ShapeError> {
        if self.dims() == (1, 1, 1) {
            Ok(self.data[0])
        } else {
            Err(ShapeError::NotScalar { got: self.dims() })
        }
    }

    /// Copies channels `[from, to)` into a new tensor.
    pub fn slice_channels(&self, from: usize, to: usize) -> Tensor3 {
        assert!(from < to && to <= self.channels);
        let mut out = Tensor3::zeros(self.batch, to - from, self.time);
        for b in 0..self.batch {
            for (oc, c) in (from..to).enumerate() {
                out.row_mut(b, oc).copy_from_slice(self.row(b, c));
            }
        }
        out
    }

    /// Extracts one batch item as a batch-1 tensor.
    pub fn batch_item(&self, b: usize) -> Tensor3 {
        assert!(b < self.batch);
        let start = b * self.channels * self.time;
        Tensor3::from_vec(
            1,
            self.channels,
            self.time,
            self.data[start..start + self.channels * self.time].to_vec(),
        )
    }

    /// Copies time samples `[from, from+len)` of every channel.
    pub fn slice_time(&self, from: usize, len: usize) -> Tensor3 {
        assert!(from + len <= self.time && len >= 1);
        let mut out = Tensor3::zeros(self.batch, self.channels, len);
        for b in 0..self.batch {
            for c in 0..self.channels {
                out.row_mut(b, c).copy_from_slice(&self.row(b, c)[from..from + len]);
            }
        }
        out
    }
}

/// 2-D row-major matrix (rows x cols), the shape of on-disk recording arrays
/// and predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1);
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows >= 1 && cols >= 1);
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch-1 tensor view of the matrix (rows become channels).
    pub fn to_tensor3(&self) -> Tensor3 {
        Tensor3::from_vec(1, self.rows, self.cols, self.data.clone())
    }

    /// Collapses a batch-1 tensor back into a matrix.
    pub fn from_tensor3(t: &Tensor3) -> Mat {
        assert_eq!(t.batch(), 1, "only batch-1 tensors convert to Mat");
        Mat::from_vec(t.channels(), t.time(), t.data().to_vec())
    }

    /// Vertical stack: rows of `top` then rows of `bottom`.
    pub fn vstack(top: &Mat, bottom: &Mat) -> Result<Mat, ShapeError> {
        if top.cols != bottom.cols {
            return Err(ShapeError::LengthMismatch {
                left: top.cols,
                right: bottom.cols,
            });
        }
        let mut data = Vec::with_capacity((top.rows + bottom.rows) * top.cols);
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Mat::from_vec(top.rows + bottom.rows, top.cols, data))
    }

    /// Copies rows `[from, to)` into a new matrix.
    pub fn slice_rows(&self, from: usize, to: usize) -> Mat {
        assert!(from < to && to <= self.rows);
        Mat::from_vec(
            to - from,
            self.cols,
            self.data[from * self.cols..to * self.cols].to_vec(),
        )
    }

    /// Copies columns `[from, from+len)` of every row.
    pub fn slice_cols(&self, from: usize, len: usize) -> Mat {
        assert!(from + len <= self.cols && len >= 1);
        let mut out = Mat::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[from..from + len]);
        }
        out
    }
}
