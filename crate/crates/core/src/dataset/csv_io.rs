use std::collections::BTreeMap;
use std::path::Path;

use super::{Event, InteractionRecord, LoadMode, Session, TrackRecord, TrackTable};
use crate::error::{Error, Result};

const SESSION_HEADER: [&str; 11] = [
    "session_id",
    "position",
    "track_id",
    "skipped",
    "context_switch",
    "no_pause_before_play",
    "short_pause_before_play",
    "seek_fwd_count",
    "seek_back_count",
    "hour_of_day",
    "context_type",
];

struct Row {
    line: usize,
    session_id: String,
    event: Event,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_num<N: std::str::FromStr>(path: &Path, line: usize, col: &str, raw: &str) -> Result<N> {
    raw.parse()
        .map_err(|_| parse_err(path, line, format!("column {col}: cannot parse {raw:?}")))
}

fn parse_bool(path: &Path, line: usize, col: &str, raw: &str) -> Result<bool> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(parse_err(
            path,
            line,
            format!("column {col}: expected 0 or 1, got {raw:?}"),
        )),
    }
}

fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut reader = open(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(SESSION_HEADER.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!("header must be {}", SESSION_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let f = |i: usize| record.get(i).unwrap_or("");
        let session_id = f(0).to_string();
        if session_id.is_empty() {
            return Err(parse_err(path, line, "empty session_id"));
        }
        let position: usize = parse_num(path, line, "position", f(1))?;
        let track_id = f(2).to_string();
        if track_id.is_empty() {
            return Err(parse_err(path, line, "empty track_id"));
        }
        let interaction_cols: Vec<&str> = (3..11).map(f).collect();
        let interaction = if interaction_cols.iter().all(|c| c.is_empty()) {
            None
        } else if interaction_cols.iter().any(|c| c.is_empty()) {
            return Err(parse_err(
                path,
                line,
                "interaction columns must be all present or all empty",
            ));
        } else {
            let hour: u8 = parse_num(path, line, "hour_of_day", f(9))?;
            if hour > 23 {
                return Err(parse_err(
                    path,
                    line,
                    format!("hour_of_day {hour} outside 0..=23"),
                ));
            }
            Some(InteractionRecord {
                skipped: parse_bool(path, line, "skipped", f(3))?,
                context_switch: parse_bool(path, line, "context_switch", f(4))?,
                no_pause_before_play: parse_bool(path, line, "no_pause_before_play", f(5))?,
                short_pause_before_play: parse_bool(path, line, "short_pause_before_play", f(6))?,
                seek_fwd_count: parse_num(path, line, "seek_fwd_count", f(7))?,
                seek_back_count: parse_num(path, line, "seek_back_count", f(8))?,
                hour_of_day: hour,
                context_type: f(10).to_string(),
            })
        };
        rows.push(Row {
            line,
            session_id,
            event: Event {
                track_id,
                position,
                interaction,
            },
        });
    }
    Ok(rows)
}

fn group(rows: Vec<Row>, mode: LoadMode) -> Result<Vec<Session>> {
    let mut by_id: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for row in rows {
        by_id.entry(row.session_id).or_default().push(row.event);
    }
    let mut sessions = Vec::with_capacity(by_id.len());
    for (session_id, mut events) in by_id {
        events.sort_by_key(|e| e.position);
        let mut session = Session { session_id, events };
        session.validate(mode)?;
        if mode == LoadMode::Infer {
            session = session.withhold_second_half();
        }
        sessions.push(session);
    }
    Ok(sessions)
}

/// Reads `sessions.csv` without resolving track ids. Sessions come back
/// sorted by id, events by position. In infer mode second-half
/// interactions, if present, are dropped.
pub fn read_sessions(path: impl AsRef<Path>, mode: LoadMode) -> Result<Vec<Session>> {
    group(read_rows(path.as_ref())?, mode)
}

/// Reads `sessions.csv` and checks every track id against `tracks`.
pub fn load_sessions(
    path: impl AsRef<Path>,
    tracks: &TrackTable,
    mode: LoadMode,
) -> Result<Vec<Session>> {
    let path = path.as_ref();
    let rows = read_rows(path)?;
    if let Some(row) = rows.iter().find(|r| !tracks.contains(&r.event.track_id)) {
        return Err(Error::UnknownTrack {
            path: path.to_path_buf(),
            line: row.line,
            track_id: row.event.track_id.clone(),
        });
    }
    group(rows, mode)
}

pub fn write_sessions(path: impl AsRef<Path>, sessions: &[Session]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(SESSION_HEADER)?;
    let b = |x: bool| if x { "1" } else { "0" }.to_string();
    for s in sessions {
        for e in &s.events {
            let mut rec = vec![
                s.session_id.clone(),
                e.position.to_string(),
                e.track_id.clone(),
            ];
            match &e.interaction {
                Some(a) => rec.extend([
                    b(a.skipped),
                    b(a.context_switch),
                    b(a.no_pause_before_play),
                    b(a.short_pause_before_play),
                    a.seek_fwd_count.to_string(),
                    a.seek_back_count.to_string(),
                    a.hour_of_day.to_string(),
                    a.context_type.clone(),
                ]),
                None => rec.extend(std::iter::repeat_n(String::new(), 8)),
            }
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn load_tracks(path: impl AsRef<Path>) -> Result<TrackTable> {
    let path = path.as_ref();
    let mut reader = open(path)?;
    let header = reader.headers()?.clone();
    let fixed = ["track_id", "duration", "release_year"];
    if header.len() < 3 || header.iter().take(3).ne(fixed.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            "header must start with track_id,duration,release_year",
        ));
    }
    for (k, name) in header.iter().skip(3).enumerate() {
        if name != format!("acoustic_{k}") {
            return Err(parse_err(
                path,
                1,
                format!("expected column acoustic_{k}, found {name:?}"),
            ));
        }
    }
    let mut tracks = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let track_id = record[0].to_string();
        if track_id.is_empty() {
            return Err(parse_err(path, line, "empty track_id"));
        }
        let duration: f64 = parse_num(path, line, "duration", &record[1])?;
        let release_year: i32 = parse_num(path, line, "release_year", &record[2])?;
        let acoustic = (3..record.len())
            .map(|i| parse_num::<f64>(path, line, &header[i], &record[i]))
            .collect::<Result<Vec<_>>>()?;
        tracks.push(TrackRecord {
            track_id,
            duration,
            release_year,
            acoustic,
        });
    }
    TrackTable::new(tracks).map_err(|e| match e {
        Error::Validation(msg) => parse_err(path, 0, msg),
        other => other,
    })
}

pub fn write_tracks(path: impl AsRef<Path>, tracks: &TrackTable) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    let mut header = vec![
        "track_id".to_string(),
        "duration".into(),
        "release_year".into(),
    ];
    header.extend((0..tracks.acoustic_dim()).map(|k| format!("acoustic_{k}")));
    w.write_record(&header)?;
    for t in tracks.iter() {
        let mut rec = vec![
            t.track_id.clone(),
            t.duration.to_string(),
            t.release_year.to_string(),
        ];
        rec.extend(t.acoustic.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const HEADER: &str = "session_id,position,track_id,skipped,context_switch,no_pause_before_play,short_pause_before_play,seek_fwd_count,seek_back_count,hour_of_day,context_type";

    fn tracks() -> TrackTable {
        TrackTable::new(
            (0..3)
                .map(|i| TrackRecord {
                    track_id: format!("t{i}"),
                    duration: 200.0,
                    release_year: 2000,
                    acoustic: vec![0.1, 0.2],
                })
                .collect(),
        )
        .unwrap()
    }

    fn file_with(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{HEADER}").unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn rows(
        session: &str,
        len: usize,
        full_to: usize,
        track: impl Fn(usize) -> String,
    ) -> Vec<String> {
        (1..=len)
            .map(|p| {
                if p <= full_to {
                    format!("{session},{p},{},1,0,1,0,2,0,13,radio", track(p))
                } else {
                    format!("{session},{p},{},,,,,,,,", track(p))
                }
            })
            .collect()
    }

    #[test]
    fn loads_two_sessions_in_order() {
        // Rows deliberately out of order.
        let mut lines = rows("b", 12, 12, |p| format!("t{}", p % 3));
        lines.extend(rows("a", 10, 10, |_| "t0".into()));
        lines.reverse();
        let f = file_with(&lines);
        let sessions = load_sessions(f.path(), &tracks(), LoadMode::Train).unwrap();
        assert_eq!(sessions.len(), 2);
        assert_eq!(sessions[0].session_id, "a");
        assert_eq!(sessions[1].len(), 12);
        for s in &sessions {
            assert!(s
                .events
                .iter()
                .enumerate()
                .all(|(i, e)| e.position == i + 1));
        }
        let again = load_sessions(f.path(), &tracks(), LoadMode::Train).unwrap();
        assert_eq!(sessions, again);
    }

    #[test]
    fn unknown_track_is_named_with_line() {
        let f = file_with(&rows("a", 10, 10, |p| {
            if p == 4 {
                "zz".into()
            } else {
                "t1".into()
            }
        }));
        match load_sessions(f.path(), &tracks(), LoadMode::Train) {
            Err(Error::UnknownTrack { track_id, line, .. }) => {
                assert_eq!(track_id, "zz");
                assert_eq!(line, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn train_mode_needs_second_half_interactions() {
        let f = file_with(&rows("a", 10, 5, |_| "t0".into()));
        assert!(matches!(
            load_sessions(f.path(), &tracks(), LoadMode::Train),
            Err(Error::Validation(_))
        ));
        let infer = load_sessions(f.path(), &tracks(), LoadMode::Infer).unwrap();
        assert!(infer[0].events[5..].iter().all(|e| e.interaction.is_none()));
    }

    #[test]
    fn infer_mode_drops_second_half_interactions() {
        let f = file_with(&rows("a", 11, 11, |_| "t0".into()));
        let s = load_sessions(f.path(), &tracks(), LoadMode::Infer).unwrap();
        assert!(s[0].events[..6].iter().all(|e| e.interaction.is_some()));
        assert!(s[0].events[6..].iter().all(|e| e.interaction.is_none()));
    }

    #[test]
    fn malformed_row_reports_line() {
        let mut lines = rows("a", 10, 10, |_| "t0".into());
        lines[2] = "a,3,t0,1,0,1,0,x,0,13,radio".into();
        let f = file_with(&lines);
        match load_sessions(f.path(), &tracks(), LoadMode::Train) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("seek_fwd_count"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_length_is_rejected() {
        let f = file_with(&rows("a", 9, 9, |_| "t0".into()));
        assert!(matches!(
            load_sessions(f.path(), &tracks(), LoadMode::Train),
            Err(Error::Validation(_))
        ));
        let f = file_with(&rows("a", 21, 21, |_| "t0".into()));
        assert!(load_sessions(f.path(), &tracks(), LoadMode::Train).is_err());
    }

    #[test]
    fn tracks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tracks.csv");
        let t = tracks();
        write_tracks(&p, &t).unwrap();
        assert_eq!(load_tracks(&p).unwrap(), t);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("track_id,duration,release_year,acoustic_0,acoustic_1\n"));
    }

    #[test]
    fn sessions_round_trip() {
        let f = file_with(&rows("a", 13, 7, |p| format!("t{}", p % 3)));
        let s = load_sessions(f.path(), &tracks(), LoadMode::Infer).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_sessions(&p, &s).unwrap();
        assert_eq!(read_sessions(&p, LoadMode::Infer).unwrap(), s);
    }
}
