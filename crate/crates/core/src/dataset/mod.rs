//! Session and track data model, CSV ingestion, half splitting, padding and
//! a synthetic generator with a known skip rule.

mod batch;
mod csv_io;
mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{pad_batch, PaddedBatch, NUM_TASKS};
pub use csv_io::{load_sessions, load_tracks, read_sessions, write_sessions, write_tracks};
pub use synthetic::{
    gen_synthetic, generate_corpus, skip_rule, SyntheticConfig, SyntheticCorpus, CONTEXT_TYPES,
};

pub const MIN_SESSION_LEN: usize = 10;
pub const MAX_SESSION_LEN: usize = 20;
/// Slots per half after padding.
pub const HALF_LEN: usize = MAX_SESSION_LEN / 2;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub skipped: bool,
    pub context_switch: bool,
    pub no_pause_before_play: bool,
    pub short_pause_before_play: bool,
    pub seek_fwd_count: u32,
    pub seek_back_count: u32,
    pub hour_of_day: u8,
    pub context_type: String,
}

impl InteractionRecord {
    /// Targets in head order: skip first, then the three auxiliary signals.
    pub fn targets(&self) -> [bool; NUM_TASKS] {
        [
            self.skipped,
            self.context_switch,
            self.no_pause_before_play,
            self.short_pause_before_play,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.hour_of_day > 23 {
            return Err(Error::Validation(format!(
                "hour_of_day {} outside 0..=23",
                self.hour_of_day
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub track_id: String,
    /// Seconds.
    pub duration: f64,
    pub release_year: i32,
    pub acoustic: Vec<f64>,
}

/// Tracks keyed by id. All tracks share one acoustic vector width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackTable {
    tracks: Vec<TrackRecord>,
    index: HashMap<String, usize>,
    acoustic_dim: usize,
}

impl TrackTable {
    pub fn new(tracks: Vec<TrackRecord>) -> Result<Self> {
        let acoustic_dim = tracks.first().map_or(0, |t| t.acoustic.len());
        let mut index = HashMap::with_capacity(tracks.len());
        for (i, t) in tracks.iter().enumerate() {
            if t.acoustic.len() != acoustic_dim {
                return Err(Error::Validation(format!(
                    "track {} has {} acoustic features, expected {acoustic_dim}",
                    t.track_id,
                    t.acoustic.len()
                )));
            }
            if !t.duration.is_finite() || t.acoustic.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "track {} has non-finite features",
                    t.track_id
                )));
            }
            if index.insert(t.track_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate track_id {}",
                    t.track_id
                )));
            }
        }
        Ok(Self {
            tracks,
            index,
            acoustic_dim,
        })
    }

    pub fn get(&self, track_id: &str) -> Option<&TrackRecord> {
        self.index.get(track_id).map(|&i| &self.tracks[i])
    }

    pub fn contains(&self, track_id: &str) -> bool {
        self.index.contains_key(track_id)
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn acoustic_dim(&self) -> usize {
        self.acoustic_dim
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrackRecord> {
        self.tracks.iter()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub track_id: String,
    /// 1-based position within the session.
    pub position: usize,
    pub interaction: Option<InteractionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub events: Vec<Event>,
}

/// Whether second-half interactions are expected (train) or withheld (infer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    Train,
    Infer,
}

impl Session {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of observed events: `ceil(L / 2)`.
    pub fn first_half_len(&self) -> usize {
        self.events.len().div_ceil(2)
    }

    pub fn split_halves(&self) -> (&[Event], &[Event]) {
        split_halves(self)
    }

    /// Ground-truth skips of the second half, if interactions are present.
    pub fn second_half_skips(&self) -> Option<Vec<bool>> {
        self.split_halves()
            .1
            .iter()
            .map(|e| e.interaction.as_ref().map(|i| i.skipped))
            .collect()
    }

    /// Copy with second-half interactions removed, as served at prediction time.
    pub fn withhold_second_half(&self) -> Session {
        let k = self.first_half_len();
        let mut s = self.clone();
        for e in &mut s.events[k..] {
            e.interaction = None;
        }
        s
    }

    pub fn validate(&self, mode: LoadMode) -> Result<()> {
        let len = self.events.len();
        if !(MIN_SESSION_LEN..=MAX_SESSION_LEN).contains(&len) {
            return Err(Error::Validation(format!(
                "session {} has length {len}, expected {MIN_SESSION_LEN}..={MAX_SESSION_LEN}",
                self.session_id
            )));
        }
        let k = self.first_half_len();
        for (i, e) in self.events.iter().enumerate() {
            if e.position != i + 1 {
                return Err(Error::Validation(format!(
                    "session {} positions are not contiguous 1..{len} (found {} at slot {})",
                    self.session_id,
                    e.position,
                    i + 1
                )));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            match &e.interaction {
                Some(a) => a.validate()?,
                None if i < k => {
                    return Err(Error::Validation(format!(
                        "session {} is missing the interaction at first-half position {}",
                        self.session_id, e.position
                    )))
                }
                None if mode == LoadMode::Train => {
                    return Err(Error::Validation(format!(
                    "session {} is missing the interaction at second-half position {} (train mode)",
                    self.session_id, e.position
                )))
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Splits at `ceil(L/2)`: the observed prefix and the prediction suffix.
pub fn split_halves(s: &Session) -> (&[Event], &[Event]) {
    s.events.split_at(s.first_half_len())
}
