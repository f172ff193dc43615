//! Feature pipeline: min-max scalers, categorical vocabulary, positional
//! feature and fixed-layout assembly of triplet/doublet vectors.
//!
//! Triplet layout (observed first-half events):
//!
//! ```text
//! [ track embedding | track numerics | interaction numerics | interaction flags | context idx | position | is_pad ]
//!   emb_dim           2 + acoustic     3                      4                   1             1          1
//! ```
//!
//! Doublets (second-half events) drop the three interaction blocks. The
//! context slot carries a vocabulary index that the model replaces with a
//! learned embedding row.

use serde::{Deserialize, Serialize};

use crate::dataset::{
    InteractionRecord, Session, TrackRecord, TrackTable, MAX_SESSION_LEN, NUM_TASKS,
};
use crate::error::{Error, Result};
use crate::glove::TrackEmbeddings;

const INTERACTION_NUMERICS: usize = 3;
const INTERACTION_FLAGS: usize = 4;

/// Min-max scaler onto `[0, 1]` with clamping outside the fitted range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: f64,
    pub max: f64,
}

impl Scaler {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        values.into_iter().fold(None, |acc, x| match acc {
            None => Some(Scaler { min: x, max: x }),
            Some(s) => Some(Scaler {
                min: s.min.min(x),
                max: s.max.max(x),
            }),
        })
    }

    /// A constant feature (`max == min`) maps to 0.
    pub fn transform(&self, x: f64) -> f64 {
        let span = self.max - self.min;
        if span <= 0.0 {
            return 0.0;
        }
        ((x - self.min) / span).clamp(0.0, 1.0)
    }
}

/// Sorted token list; index 0 is reserved for unknown and padding.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = tokens.into_iter().map(str::to_string).collect();
        tokens.sort();
        tokens.dedup();
        Self { tokens }
    }

    pub fn index(&self, token: &str) -> usize {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .map_or(0, |i| i + 1)
    }

    /// Number of indices including the reserved one.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Widths of the assembled vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub emb_dim: usize,
    pub acoustic_dim: usize,
}

impl FeatureLayout {
    pub fn track_numerics(&self) -> usize {
        2 + self.acoustic_dim
    }

    /// Slots present in triplets but not doublets.
    pub fn interaction_width(&self) -> usize {
        INTERACTION_NUMERICS + INTERACTION_FLAGS + 1
    }

    pub fn d_doub(&self) -> usize {
        self.emb_dim + self.track_numerics() + 2
    }

    pub fn d_trip(&self) -> usize {
        self.d_doub() + self.interaction_width()
    }

    pub fn triplet_context_col(&self) -> usize {
        self.emb_dim + self.track_numerics() + INTERACTION_NUMERICS + INTERACTION_FLAGS
    }

    pub fn triplet_position_col(&self) -> usize {
        self.triplet_context_col() + 1
    }

    pub fn doublet_position_col(&self) -> usize {
        self.emb_dim + self.track_numerics()
    }

    pub fn pad_triplet(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.d_trip()];
        *v.last_mut().unwrap() = 1.0;
        v
    }

    pub fn pad_doublet(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.d_doub()];
        *v.last_mut().unwrap() = 1.0;
        v
    }
}

/// Position normalized by the longest session length.
pub fn position_feature(position: usize) -> Result<f64> {
    if !(1..=MAX_SESSION_LEN).contains(&position) {
        return Err(Error::Validation(format!(
            "position {position} outside 1..={MAX_SESSION_LEN}"
        )));
    }
    Ok(position as f64 / MAX_SESSION_LEN as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Fitted {
    duration: Scaler,
    release_year: Scaler,
    acoustic: Vec<Scaler>,
    seek_fwd: Scaler,
    seek_back: Scaler,
    hour: Scaler,
    context: Vocabulary,
}

/// Identity of a pipeline's vector layout, used to check ensemble members.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSchema {
    pub layout: FeatureLayout,
    pub context_tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    layout: FeatureLayout,
    fitted: Option<Fitted>,
}

/// Track metadata plus the frozen pretrained track embeddings.
#[derive(Clone, Debug)]
pub struct TrackCatalog {
    pub tracks: TrackTable,
    pub embeddings: Option<TrackEmbeddings>,
}

impl TrackCatalog {
    pub fn new(tracks: TrackTable, embeddings: Option<TrackEmbeddings>) -> Self {
        Self { tracks, embeddings }
    }

    pub fn emb_dim(&self) -> usize {
        self.embeddings.as_ref().map_or(0, |e| e.dim())
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            emb_dim: self.emb_dim(),
            acoustic_dim: self.tracks.acoustic_dim(),
        }
    }

    fn track(&self, track_id: &str) -> Result<&TrackRecord> {
        self.tracks
            .get(track_id)
            .ok_or_else(|| Error::Validation(format!("unknown track_id {track_id:?}")))
    }
}

/// One session turned into unpadded feature sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSession {
    pub session_id: String,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    /// Second-half targets, when interactions are known.
    pub targets: Option<Vec<[bool; NUM_TASKS]>>,
}

impl FeaturePipeline {
    /// An unfitted pipeline with the given layout.
    pub fn new(layout: FeatureLayout) -> Self {
        Self {
            layout,
            fitted: None,
        }
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    pub fn schema(&self) -> PipelineSchema {
        PipelineSchema {
            layout: self.layout,
            context_tokens: self
                .fitted
                .as_ref()
                .map(|f| f.context.tokens().to_vec())
                .unwrap_or_default(),
        }
    }

    pub fn context_vocab_len(&self) -> usize {
        self.fitted.as_ref().map_or(1, |f| f.context.len())
    }

    pub fn context_index(&self, token: &str) -> Result<usize> {
        Ok(self.state()?.context.index(token))
    }

    /// Learns scaler ranges from the tracks and interactions referenced by
    /// `sessions` and the context vocabulary from their tokens.
    pub fn fit(&self, sessions: &[Session], tracks: &TrackTable) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::Validation(
                "cannot fit on an empty training set".into(),
            ));
        }
        if tracks.acoustic_dim() != self.layout.acoustic_dim {
            return Err(Error::Validation(format!(
                "track table has {} acoustic features, layout expects {}",
                tracks.acoustic_dim(),
                self.layout.acoustic_dim
            )));
        }
        let mut used = Vec::new();
        let mut interactions: Vec<&InteractionRecord> = Vec::new();
        for s in sessions {
            for e in &s.events {
                let t = tracks.get(&e.track_id).ok_or_else(|| {
                    Error::Validation(format!("unknown track_id {:?}", e.track_id))
                })?;
                used.push(t);
                interactions.extend(e.interaction.as_ref());
            }
        }
        let fit = |vals: Vec<f64>| Scaler::fit(vals).expect("non-empty");
        let no_interactions =
            || Error::Validation("training sessions carry no interactions".into());
        let scaler_of = |f: &dyn Fn(&InteractionRecord) -> f64| {
            Scaler::fit(interactions.iter().map(|a| f(a))).ok_or_else(no_interactions)
        };
        let fitted = Fitted {
            duration: fit(used.iter().map(|t| t.duration).collect()),
            release_year: fit(used.iter().map(|t| f64::from(t.release_year)).collect()),
            acoustic: (0..self.layout.acoustic_dim)
                .map(|k| fit(used.iter().map(|t| t.acoustic[k]).collect()))
                .collect(),
            seek_fwd: scaler_of(&|a| f64::from(a.seek_fwd_count))?,
            seek_back: scaler_of(&|a| f64::from(a.seek_back_count))?,
            hour: scaler_of(&|a| f64::from(a.hour_of_day))?,
            context: Vocabulary::build(interactions.iter().map(|a| a.context_type.as_str())),
        };
        Ok(Self {
            layout: self.layout,
            fitted: Some(fitted),
        })
    }

    fn state(&self) -> Result<&Fitted> {
        self.fitted
            .as_ref()
            .ok_or_else(|| Error::State("feature pipeline used before fit".into()))
    }

    fn push_track(&self, out: &mut Vec<f64>, track: &TrackRecord, emb: &[f64]) -> Result<()> {
        let f = self.state()?;
        if emb.len() != self.layout.emb_dim {
            return Err(Error::Validation(format!(
                "track embedding has width {}, layout expects {}",
                emb.len(),
                self.layout.emb_dim
            )));
        }
        if track.acoustic.len() != self.layout.acoustic_dim {
            return Err(Error::Validation(format!(
                "track {} has {} acoustic features, layout expects {}",
                track.track_id,
                track.acoustic.len(),
                self.layout.acoustic_dim
            )));
        }
        out.extend_from_slice(emb);
        out.push(f.duration.transform(track.duration));
        out.push(f.release_year.transform(f64::from(track.release_year)));
        out.extend(
            f.acoustic
                .iter()
                .zip(&track.acoustic)
                .map(|(s, &x)| s.transform(x)),
        );
        Ok(())
    }

    pub fn assemble_triplet(
        &self,
        track: &TrackRecord,
        emb: &[f64],
        interaction: &InteractionRecord,
        position: usize,
    ) -> Result<Vec<f64>> {
        let f = self.state()?;
        let mut v = Vec::with_capacity(self.layout.d_trip());
        self.push_track(&mut v, track, emb)?;
        v.push(f.seek_fwd.transform(f64::from(interaction.seek_fwd_count)));
        v.push(
            f.seek_back
                .transform(f64::from(interaction.seek_back_count)),
        );
        v.push(f.hour.transform(f64::from(interaction.hour_of_day)));
        v.extend(
            interaction
                .targets()
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 }),
        );
        v.push(f.context.index(&interaction.context_type) as f64);
        v.push(position_feature(position)?);
        v.push(0.0);
        debug_assert_eq!(v.len(), self.layout.d_trip());
        Ok(v)
    }

    pub fn assemble_doublet(
        &self,
        track: &TrackRecord,
        emb: &[f64],
        position: usize,
    ) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(self.layout.d_doub());
        self.push_track(&mut v, track, emb)?;
        v.push(position_feature(position)?);
        v.push(0.0);
        debug_assert_eq!(v.len(), self.layout.d_doub());
        Ok(v)
    }

    /// Encodes both halves of a session. Tracks absent from the embedding
    /// table get a zero embedding.
    pub fn encode_session(
        &self,
        session: &Session,
        catalog: &TrackCatalog,
    ) -> Result<EncodedSession> {
        self.state()?;
        let zeros = vec![0.0; self.layout.emb_dim];
        let emb_of = |id: &str| -> &[f64] {
            catalog
                .embeddings
                .as_ref()
                .and_then(|e| e.get(id))
                .unwrap_or(&zeros)
        };
        let (first, second) = session.split_halves();
        let first = first
            .iter()
            .map(|e| {
                let a = e.interaction.as_ref().ok_or_else(|| {
                    Error::Validation(format!(
                        "session {} lacks the interaction at position {}",
                        session.session_id, e.position
                    ))
                })?;
                self.assemble_triplet(
                    catalog.track(&e.track_id)?,
                    emb_of(&e.track_id),
                    a,
                    e.position,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = second
            .iter()
            .map(|e| e.interaction.as_ref().map(|a| a.targets()))
            .collect::<Option<Vec<_>>>();
        let second = second
            .iter()
            .map(|e| {
                self.assemble_doublet(catalog.track(&e.track_id)?, emb_of(&e.track_id), e.position)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedSession {
            session_id: session.session_id.clone(),
            first,
            second,
            targets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic, SyntheticConfig};
    use proptest::prelude::*;

    #[test]
    fn scaler_fit_and_transform() {
        let s = Scaler::fit([2.0, 4.0, 10.0]).unwrap();
        assert_eq!(
            s,
            Scaler {
                min: 2.0,
                max: 10.0
            }
        );
        assert_eq!(s.transform(2.0), 0.0);
        assert_eq!(s.transform(6.0), 0.5);
        assert_eq!(s.transform(99.0), 1.0);
        assert_eq!(s.transform(-5.0), 0.0);
        let c = Scaler::fit([5.0, 5.0]).unwrap();
        assert_eq!(c.transform(5.0), 0.0);
        assert_eq!(c.transform(7.0), 0.0);
        assert!(Scaler::fit(std::iter::empty()).is_none());
    }

    #[test]
    fn vocabulary_reserves_zero() {
        let v = Vocabulary::build(["radio", "catalog", "radio"]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.index("catalog"), 1);
        assert_eq!(v.index("radio"), 2);
        assert_eq!(v.index("never-seen"), 0);
    }

    #[test]
    fn position_examples() {
        assert_eq!(position_feature(20).unwrap(), 1.0);
        assert_eq!(position_feature(1).unwrap(), 0.05);
        assert_eq!(position_feature(10).unwrap(), 0.5);
        assert!(position_feature(0).is_err());
        assert!(position_feature(21).is_err());
    }

    fn fixture() -> (FeaturePipeline, TrackCatalog, Vec<Session>) {
        let (tracks, sessions) = gen_synthetic(&SyntheticConfig {
            n_sessions: 20,
            n_tracks: 50,
            acoustic_dim: 3,
            seed: 5,
            label_noise: 0.05,
        })
        .unwrap();
        let catalog = TrackCatalog::new(tracks, None);
        let p = FeaturePipeline::new(catalog.layout())
            .fit(&sessions, &catalog.tracks)
            .unwrap();
        (p, catalog, sessions)
    }

    #[test]
    fn widths_follow_layout() {
        let layout = FeatureLayout {
            emb_dim: 150,
            acoustic_dim: 8,
        };
        assert_eq!(layout.d_doub(), 150 + 10 + 2);
        assert_eq!(layout.d_trip(), layout.d_doub() + 8);
        assert_eq!(
            layout.d_trip() - layout.d_doub(),
            layout.interaction_width()
        );
        assert_eq!(layout.pad_triplet().iter().sum::<f64>(), 1.0);
        assert_eq!(*layout.pad_doublet().last().unwrap(), 1.0);
    }

    #[test]
    fn assembly_is_pure_and_sized() {
        let (p, catalog, sessions) = fixture();
        let e = &sessions[0].events[0];
        let t = catalog.tracks.get(&e.track_id).unwrap();
        let a = e.interaction.as_ref().unwrap();
        let v1 = p.assemble_triplet(t, &[], a, 1).unwrap();
        let v2 = p.assemble_triplet(t, &[], a, 1).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), p.layout().d_trip());
        assert_eq!(*v1.last().unwrap(), 0.0);
        let d = p.assemble_doublet(t, &[], 11).unwrap();
        assert_eq!(
            d.len(),
            p.layout().d_trip() - p.layout().interaction_width()
        );
    }

    #[test]
    fn doublets_of_same_track_differ_only_in_position() {
        let (p, catalog, _) = fixture();
        let t = catalog.tracks.iter().next().unwrap();
        let a = p.assemble_doublet(t, &[], 11).unwrap();
        let b = p.assemble_doublet(t, &[], 12).unwrap();
        let pos = p.layout().doublet_position_col();
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            if i == pos {
                assert_ne!(x, y);
            } else {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn unfitted_pipeline_is_a_state_error() {
        let (p, catalog, sessions) = fixture();
        let raw = FeaturePipeline::new(p.layout());
        let t = catalog.tracks.iter().next().unwrap();
        assert!(matches!(
            raw.assemble_doublet(t, &[], 11),
            Err(Error::State(_))
        ));
        assert!(matches!(
            raw.encode_session(&sessions[0], &catalog),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn unknown_context_maps_to_zero() {
        let (p, catalog, sessions) = fixture();
        let e = &sessions[0].events[0];
        let mut a = e.interaction.clone().unwrap();
        a.context_type = "from-the-future".into();
        let t = catalog.tracks.get(&e.track_id).unwrap();
        let v = p.assemble_triplet(t, &[], &a, 1).unwrap();
        assert_eq!(v[p.layout().triplet_context_col()], 0.0);
    }

    #[test]
    fn fit_rejects_empty_input() {
        let (p, catalog, _) = fixture();
        assert!(p.fit(&[], &catalog.tracks).is_err());
    }

    #[test]
    fn fitted_ranges_hit_zero_and_one() {
        let (p, catalog, sessions) = fixture();
        let enc: Vec<_> = sessions
            .iter()
            .map(|s| p.encode_session(s, &catalog).unwrap())
            .collect();
        let dur_col = p.layout().emb_dim;
        let vals: Vec<f64> = enc
            .iter()
            .flat_map(|e| e.first.iter().chain(&e.second).map(|v| v[dur_col]))
            .collect();
        assert!(vals.contains(&0.0) && vals.contains(&1.0));
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    proptest! {
        #[test]
        fn transform_is_monotone(min in -1e3f64..1e3, span in 0f64..1e3, a in -3e3f64..3e3, b in -3e3f64..3e3) {
            let s = Scaler { min, max: min + span };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.transform(lo) <= s.transform(hi));
            prop_assert!((0.0..=1.0).contains(&s.transform(a)));
            if span > 0.0 {
                prop_assert_eq!(s.transform(min), 0.0);
                prop_assert_eq!(s.transform(min + span), 1.0);
            }
        }
    }
}
