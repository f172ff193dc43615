use std::borrow::Borrow;

use super::{Session, HALF_LEN};
use crate::error::{Error, Result};
use crate::features::{EncodedSession, FeatureLayout, FeaturePipeline, TrackCatalog};
use crate::scalar::Scalar;
use crate::tensor_graph::Matrix;

/// Skip plus three auxiliary targets.
pub const NUM_TASKS: usize = 4;

/// Fixed-length batch. Second-half tensors are session-major: row
/// `b * HALF_LEN + j` is slot `j` of session `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch<T> {
    pub session_ids: Vec<String>,
    /// `HALF_LEN` step matrices, each `[batch × d_trip]`.
    pub first_half: Vec<Matrix<T>>,
    /// `[batch·HALF_LEN × d_doub]`.
    pub second_half: Matrix<T>,
    /// `[batch·HALF_LEN]`, true on real second-half slots.
    pub mask: Vec<bool>,
    /// `[batch·HALF_LEN × NUM_TASKS]` as 0/1; zero where unknown or padded.
    pub targets: Matrix<T>,
    /// Whether every real slot carries ground truth.
    pub has_targets: bool,
    pub first_len: Vec<usize>,
    pub second_len: Vec<usize>,
}

impl<T: Scalar> PaddedBatch<T> {
    pub fn from_encoded<E: Borrow<EncodedSession>>(
        sessions: &[E],
        layout: FeatureLayout,
    ) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = sessions.len();
        let (d_trip, d_doub) = (layout.d_trip(), layout.d_doub());
        let pad_trip = layout.pad_triplet();
        let pad_doub = layout.pad_doublet();
        let mut first_half = vec![Matrix::zeros(n, d_trip); HALF_LEN];
        let mut second_half = Matrix::zeros(n * HALF_LEN, d_doub);
        let mut targets = Matrix::zeros(n * HALF_LEN, NUM_TASKS);
        let mut mask = vec![false; n * HALF_LEN];
        let mut has_targets = true;
        let fill = |dst: &mut [T], src: &[f64]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::of(s);
            }
        };
        for (b, s) in sessions.iter().map(Borrow::borrow).enumerate() {
            if s.first.len() > HALF_LEN || s.second.len() > HALF_LEN || s.second.is_empty() {
                return Err(Error::Validation(format!(
                    "session {} has halves of length ({}, {}), expected at most {HALF_LEN} each",
                    s.session_id,
                    s.first.len(),
                    s.second.len()
                )));
            }
            for (t, step) in first_half.iter_mut().enumerate() {
                let src = s.first.get(t).unwrap_or(&pad_trip);
                if src.len() != d_trip {
                    return Err(Error::Validation(format!(
                        "triplet width {} != {d_trip}",
                        src.len()
                    )));
                }
                fill(step.row_mut(b), src);
            }
            for j in 0..HALF_LEN {
                let row = b * HALF_LEN + j;
                let src = s.second.get(j).unwrap_or(&pad_doub);
                if src.len() != d_doub {
                    return Err(Error::Validation(format!(
                        "doublet width {} != {d_doub}",
                        src.len()
                    )));
                }
                fill(second_half.row_mut(row), src);
                mask[row] = j < s.second.len();
            }
            match &s.targets {
                Some(ts) => {
                    for (j, t) in ts.iter().enumerate() {
                        for (k, &y) in t.iter().enumerate() {
                            targets.set(b * HALF_LEN + j, k, if y { T::one() } else { T::zero() });
                        }
                    }
                }
                None => has_targets = false,
            }
        }
        Ok(Self {
            session_ids: sessions
                .iter()
                .map(|s| s.borrow().session_id.clone())
                .collect(),
            first_half,
            second_half,
            mask,
            targets,
            has_targets,
            first_len: sessions.iter().map(|s| s.borrow().first.len()).collect(),
            second_len: sessions.iter().map(|s| s.borrow().second.len()).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.session_ids.len()
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.mask[b * HALF_LEN..(b + 1) * HALF_LEN]
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Real triplets and doublets of session `b`, as f64, in order.
    pub fn unpad(&self, b: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let to_f64 = |r: &[T]| r.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let first = (0..self.first_len[b])
            .map(|t| to_f64(self.first_half[t].row(b)))
            .collect();
        let second = (0..HALF_LEN)
            .filter(|&j| self.mask[b * HALF_LEN + j])
            .map(|j| to_f64(self.second_half.row(b * HALF_LEN + j)))
            .collect();
        (first, second)
    }
}

/// Encodes and pads `sessions` with a fitted pipeline.
pub fn pad_batch<T: Scalar>(
    sessions: &[Session],
    pipeline: &FeaturePipeline,
    catalog: &TrackCatalog,
) -> Result<PaddedBatch<T>> {
    if sessions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let encoded = sessions
        .iter()
        .map(|s| pipeline.encode_session(s, catalog))
        .collect::<Result<Vec<_>>>()?;
    PaddedBatch::from_encoded(&encoded, pipeline.layout())
}
