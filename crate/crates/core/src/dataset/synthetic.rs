use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Event, InteractionRecord, Session, TrackRecord, TrackTable};
use super::{MAX_SESSION_LEN, MIN_SESSION_LEN};
use crate::error::{Error, Result};

pub const CONTEXT_TYPES: [&str; 6] = [
    "catalog",
    "charts",
    "editorial_playlist",
    "personalized_playlist",
    "radio",
    "user_collection",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_sessions: usize,
    pub n_tracks: usize,
    pub acoustic_dim: usize,
    pub seed: u64,
    /// Probability that a skip label is flipped.
    pub label_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_sessions: 2000,
            n_tracks: 500,
            acoustic_dim: 4,
            seed: 7,
            label_noise: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tracks < 50 {
            return Err(Error::Config(format!(
                "n_tracks must be at least 50, got {}",
                self.n_tracks
            )));
        }
        if self.acoustic_dim < 2 {
            return Err(Error::Config(format!(
                "acoustic_dim must be at least 2, got {}",
                self.acoustic_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise must lie in [0, 1], got {}",
                self.label_noise
            )));
        }
        Ok(())
    }
}

/// Noise-free skip rule: a track is skipped when it points away from the
/// listener's preference.
pub fn skip_rule(preference: &[f64], acoustic: &[f64]) -> bool {
    let dot: f64 = preference.iter().zip(acoustic).map(|(u, a)| u * a).sum();
    dot < 0.0
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn flip(rng: &mut ChaCha8Rng, value: bool, p: f64) -> bool {
    value ^ rng.random_bool(p)
}

/// Generated data plus the latent per-session preferences behind the labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub tracks: TrackTable,
    pub sessions: Vec<Session>,
    pub preferences: Vec<Vec<f64>>,
}

/// Generates tracks with random unit acoustic vectors and sessions whose skips
/// follow [`skip_rule`] for a per-session latent preference, with label noise.
/// Auxiliary targets are noisy functions of the skip label.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(TrackTable, Vec<Session>)> {
    let corpus = generate_corpus(cfg)?;
    Ok((corpus.tracks, corpus.sessions))
}

pub fn generate_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let id_width = cfg.n_tracks.to_string().len().max(4);
    let tracks: Vec<TrackRecord> = (0..cfg.n_tracks)
        .map(|i| TrackRecord {
            track_id: format!("t{i:0id_width$}"),
            duration: (rng.random_range(90.0..480.0f64) * 1000.0).round() / 1000.0,
            release_year: rng.random_range(1950..=2018),
            acoustic: unit_vector(&mut rng, cfg.acoustic_dim),
        })
        .collect();

    let sid_width = cfg.n_sessions.to_string().len().max(6);
    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    let mut preferences = Vec::with_capacity(cfg.n_sessions);
    for s in 0..cfg.n_sessions {
        let preference = unit_vector(&mut rng, cfg.acoustic_dim);
        let len = rng.random_range(MIN_SESSION_LEN..=MAX_SESSION_LEN);
        let hour = rng.random_range(0..24u8);
        let context = CONTEXT_TYPES.choose(&mut rng).unwrap().to_string();
        let events = (1..=len)
            .map(|position| {
                let track = &tracks[rng.random_range(0..tracks.len())];
                let skipped = flip(
                    &mut rng,
                    skip_rule(&preference, &track.acoustic),
                    cfg.label_noise,
                );
                let interaction = InteractionRecord {
                    skipped,
                    context_switch: flip(&mut rng, skipped, 0.35),
                    no_pause_before_play: flip(&mut rng, !skipped, 0.2),
                    short_pause_before_play: flip(&mut rng, skipped, 0.3),
                    seek_fwd_count: if skipped {
                        rng.random_range(0..=3)
                    } else {
                        rng.random_range(0..=1)
                    },
                    seek_back_count: rng.random_range(0..=1),
                    hour_of_day: hour,
                    context_type: context.clone(),
                };
                Event {
                    track_id: track.track_id.clone(),
                    position,
                    interaction: Some(interaction),
                }
            })
            .collect();
        sessions.push(Session {
            session_id: format!("s{s:0sid_width$}"),
            events,
        });
        preferences.push(preference);
    }
    Ok(SyntheticCorpus {
        tracks: TrackTable::new(tracks)?,
        sessions,
        preferences,
    })
}
