//! Multi-source point datasets and the read-only views the model consumes.

mod csv_io;
mod scr;
mod split;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DmspError, Result};
use crate::geometry::GeoPoint;

pub use csv_io::{load_csv, read_csv, save_csv, write_csv};
pub use scr::{generate_scr, FeatureMap, ScrConfig, ScrScene, TruthGrid};
pub use split::{split, SplitIndices, DEFAULT_FRACTIONS};

/// One observation: location, features, target and timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub location: GeoPoint,
    pub features: Vec<f64>,
    pub target: f64,
    pub timestamp: i64,
}

/// All observations of one data source. Every sample shares `feature_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDataset {
    source_id: usize,
    name: String,
    feature_dim: usize,
    samples: Vec<Sample>,
}

impl SourceDataset {
    pub fn new(
        source_id: usize,
        name: impl Into<String>,
        feature_dim: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(DmspError::SchemaViolation(format!(
                "source {source_id} has no samples"
            )));
        }
        for (row, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(DmspError::RaggedFeatures {
                    source_id,
                    row,
                    expected: feature_dim,
                    found: s.features.len(),
                });
            }
            let finite = s.location.is_finite()
                && s.target.is_finite()
                && s.features.iter().all(|f| f.is_finite());
            if !finite {
                return Err(DmspError::Parse {
                    row,
                    message: format!("non-finite value in source {source_id}"),
                });
            }
        }
        Ok(Self {
            source_id,
            name: name.into(),
            feature_dim,
            samples,
        })
    }

    pub fn source_id(&self) -> usize {
        self.source_id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of the samples observed at `timestamp`, in storage order.
    pub fn simultaneous_indices(&self, timestamp: i64) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.timestamp == timestamp)
            .map(|(j, _)| j)
            .collect()
    }

    /// Samples observed at `timestamp`; empty if the timestamp is absent.
    pub fn simultaneous_samples(&self, timestamp: i64) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.timestamp == timestamp)
            .collect()
    }

    /// Sample indices grouped by timestamp.
    pub fn by_timestamp(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (j, s) in self.samples.iter().enumerate() {
            groups.entry(s.timestamp).or_default().push(j);
        }
        groups
    }
}

/// `N >= 1` sources with ids `0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSourceDataset {
    sources: Vec<SourceDataset>,
}

impl MultiSourceDataset {
    pub fn new(sources: Vec<SourceDataset>) -> Result<Self> {
        if sources.is_empty() {
            return Err(DmspError::SchemaViolation("dataset has no sources".into()));
        }
        for (i, s) in sources.iter().enumerate() {
            if s.source_id != i {
                return Err(DmspError::SchemaViolation(format!(
                    "source ids must be 0..{} without gaps, found {} at position {i}",
                    sources.len(),
                    s.source_id
                )));
            }
        }
        Ok(Self { sources })
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[SourceDataset] {
        &self.sources
    }

    pub fn source(&self, id: usize) -> &SourceDataset {
        &self.sources[id]
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.feature_dim).collect()
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.samples.len()).collect()
    }

    pub fn sample(&self, source: usize, index: usize) -> Option<&Sample> {
        self.sources.get(source)?.samples.get(index)
    }

    /// Keeps, per source, the samples at `indices[source]` in the given order.
    /// Sources left empty make the subset invalid.
    pub fn subset(&self, indices: &[Vec<usize>]) -> Result<Self> {
        if indices.len() != self.sources.len() {
            return Err(DmspError::Dimension(format!(
                "subset has {} index lists for {} sources",
                indices.len(),
                self.sources.len()
            )));
        }
        let sources = self
            .sources
            .iter()
            .zip(indices)
            .map(|(src, idx)| {
                let samples = idx
                    .iter()
                    .map(|&j| {
                        src.samples.get(j).cloned().ok_or(DmspError::InvalidMaskTarget {
                            source_id: src.source_id,
                            index: j,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                SourceDataset::new(src.source_id, src.name.clone(), src.feature_dim, samples)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sources })
    }

    /// The same dataset with every location rotated by `theta` about the
    /// origin and then shifted.
    pub fn rigid_motion(&self, theta: f64, shift: GeoPoint) -> Self {
        let mut out = self.clone();
        for src in &mut out.sources {
            for s in &mut src.samples {
                s.location = s.location.rigid_motion(theta, shift);
            }
        }
        out
    }

    /// Replaces one stored target; used to probe for leakage.
    pub fn with_target(&self, source: usize, index: usize, target: f64) -> Result<Self> {
        let mut out = self.clone();
        let s = out
            .sources
            .get_mut(source)
            .and_then(|src| src.samples.get_mut(index))
            .ok_or(DmspError::InvalidMaskTarget {
                source_id: source,
                index,
            })?;
        s.target = target;
        Ok(out)
    }

    pub fn summary(&self) -> String {
        let parts: Vec<String> = self
            .sources
            .iter()
            .map(|s| {
                format!(
                    "source {} ({}): n = {}, p = {}",
                    s.source_id,
                    s.name,
                    s.samples.len(),
                    s.feature_dim
                )
            })
            .collect();
        format!("N = {}; {}", self.sources.len(), parts.join("; "))
    }
}

/// A target as seen by the model: either its value or the mask marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    Observed(f64),
    Masked,
}

impl Observation {
    /// Model input channels `(value, mask flag)`; a masked target reads `(0, 1)`.
    pub fn channels(self) -> (f64, f64) {
        match self {
            Observation::Observed(v) => (v, 0.0),
            Observation::Masked => (0.0, 1.0),
        }
    }
}

/// Read access to a multi-source dataset through which targets may be hidden.
///
/// The model reads sample data only through this trait.
pub trait ObservationStore: Sync {
    fn source_count(&self) -> usize;
    fn feature_dim(&self, source: usize) -> usize;
    fn sample_count(&self, source: usize) -> usize;
    fn location(&self, source: usize, index: usize) -> GeoPoint;
    fn features(&self, source: usize, index: usize) -> &[f64];
    fn timestamp(&self, source: usize, index: usize) -> i64;
    fn observation(&self, source: usize, index: usize) -> Observation;
    /// The hidden sample, if any.
    fn masked(&self) -> Option<(usize, usize)> {
        None
    }
}

impl ObservationStore for MultiSourceDataset {
    fn source_count(&self) -> usize {
        self.sources.len()
    }
    fn feature_dim(&self, source: usize) -> usize {
        self.sources[source].feature_dim
    }
    fn sample_count(&self, source: usize) -> usize {
        self.sources[source].samples.len()
    }
    fn location(&self, source: usize, index: usize) -> GeoPoint {
        self.sources[source].samples[index].location
    }
    fn features(&self, source: usize, index: usize) -> &[f64] {
        &self.sources[source].samples[index].features
    }
    fn timestamp(&self, source: usize, index: usize) -> i64 {
        self.sources[source].samples[index].timestamp
    }
    fn observation(&self, source: usize, index: usize) -> Observation {
        Observation::Observed(self.sources[source].samples[index].target)
    }
}

/// A dataset with exactly one target hidden. Borrowing, O(1) to create.
#[derive(Debug, Clone, Copy)]
pub struct MaskedView<'a> {
    base: &'a MultiSourceDataset,
    source: usize,
    index: usize,
}

impl<'a> MaskedView<'a> {
    pub fn masked_source(&self) -> usize {
        self.source
    }

    pub fn masked_index(&self) -> usize {
        self.index
    }

    /// Drops the mask, giving back the underlying dataset.
    pub fn unmask(self) -> &'a MultiSourceDataset {
        self.base
    }
}

/// Hides the target of sample `index` of source `source_id`.
pub fn mask_target(
    dataset: &MultiSourceDataset,
    source_id: usize,
    index: usize,
) -> Result<MaskedView<'_>> {
    match dataset.sample(source_id, index) {
        Some(_) => Ok(MaskedView {
            base: dataset,
            source: source_id,
            index,
        }),
        None => Err(DmspError::InvalidMaskTarget { source_id, index }),
    }
}

impl ObservationStore for MaskedView<'_> {
    fn source_count(&self) -> usize {
        self.base.source_count()
    }
    fn feature_dim(&self, source: usize) -> usize {
        self.base.sources[source].feature_dim
    }
    fn sample_count(&self, source: usize) -> usize {
        self.base.sources[source].samples.len()
    }
    fn location(&self, source: usize, index: usize) -> GeoPoint {
        self.base.location(source, index)
    }
    fn features(&self, source: usize, index: usize) -> &[f64] {
        self.base.features(source, index)
    }
    fn timestamp(&self, source: usize, index: usize) -> i64 {
        self.base.timestamp(source, index)
    }
    fn observation(&self, source: usize, index: usize) -> Observation {
        if source == self.source && index == self.index {
            Observation::Masked
        } else {
            self.base.observation(source, index)
        }
    }
    fn masked(&self) -> Option<(usize, usize)> {
        Some((self.source, self.index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> MultiSourceDataset {
        let samples = (0..5)
            .map(|j| Sample {
                location: GeoPoint::new(j as f64, 0.0),
                features: vec![j as f64 * 0.5],
                target: 10.0 + j as f64,
                timestamp: (j % 2) as i64,
            })
            .collect();
        MultiSourceDataset::new(vec![SourceDataset::new(0, "a", 1, samples).unwrap()]).unwrap()
    }

    #[test]
    fn mask_hides_only_one_target() {
        let d = toy();
        let v = mask_target(&d, 0, 3).unwrap();
        assert_eq!(v.observation(0, 3), Observation::Masked);
        assert_eq!(v.observation(0, 2), Observation::Observed(12.0));
        assert_eq!(v.features(0, 3), &[1.5]);
        assert_eq!(v.location(0, 3), GeoPoint::new(3.0, 0.0));
        assert_eq!(Observation::Masked.channels(), (0.0, 1.0));
        assert_eq!(v.masked(), Some((0, 3)));
    }

    #[test]
    fn unmask_restores_observations() {
        let d = toy();
        let base = mask_target(&d, 0, 1).unwrap().unmask();
        for j in 0..5 {
            assert_eq!(base.observation(0, j), Observation::Observed(10.0 + j as f64));
        }
        assert_eq!(base, &toy());
    }

    #[test]
    fn invalid_mask_target() {
        let d = toy();
        assert!(matches!(
            mask_target(&d, 0, 5),
            Err(DmspError::InvalidMaskTarget { .. })
        ));
        assert!(mask_target(&d, 1, 0).is_err());
    }

    #[test]
    fn simultaneous_partition() {
        let d = toy();
        let src = d.source(0);
        assert_eq!(src.simultaneous_samples(0).len(), 3);
        assert_eq!(src.simultaneous_samples(1).len(), 2);
        assert!(src.simultaneous_samples(42).is_empty());
        let total: usize = src.by_timestamp().values().map(Vec::len).sum();
        assert_eq!(total, src.len());
    }

    #[test]
    fn all_same_timestamp_returns_everything() {
        let samples = (0..4)
            .map(|j| Sample {
                location: GeoPoint::new(j as f64, 1.0),
                features: vec![],
                target: 0.0,
                timestamp: 7,
            })
            .collect();
        let src = SourceDataset::new(0, "s", 0, samples).unwrap();
        assert_eq!(src.simultaneous_samples(7).len(), 4);
    }

    #[test]
    fn source_ids_must_be_contiguous() {
        let s = SourceDataset::new(
            1,
            "b",
            0,
            vec![Sample {
                location: GeoPoint::new(0.0, 0.0),
                features: vec![],
                target: 0.0,
                timestamp: 0,
            }],
        )
        .unwrap();
        assert!(MultiSourceDataset::new(vec![s]).is_err());
        assert!(MultiSourceDataset::new(vec![]).is_err());
    }
}
