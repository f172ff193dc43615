//! Average Accuracy, corpus-level reports, probability-mean ensembles and
//! submission files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use num_traits::{FromPrimitive, Num};

use crate::dataset::{read_sessions, LoadMode, Session, MAX_SESSION_LEN};
use crate::error::{Error, Result};
use crate::features::TrackCatalog;
use crate::optim::Checkpoint;
use crate::scalar::Scalar;

/// `AA = Σ_i A(i)·L(i) / T` with `A(i)` the accuracy over the first `i`
/// predictions. Generic so it can run in exact rational arithmetic.
pub fn average_accuracy_in<R>(pred: &[bool], truth: &[bool]) -> Result<R>
where
    R: Num + Clone + FromPrimitive,
{
    if pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "prediction length {} != truth length {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Validation(
            "average accuracy needs at least one prediction".into(),
        ));
    }
    let conv = |n: usize| R::from_usize(n).expect("small integers are representable");
    let mut correct = 0usize;
    let mut total = R::zero();
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p == t {
            correct += 1;
            total = total + conv(correct) / conv(i + 1);
        }
    }
    Ok(total / conv(pred.len()))
}

pub fn average_accuracy(pred: &[bool], truth: &[bool]) -> Result<f64> {
    average_accuracy_in(pred, truth)
}

/// Per-session breakdown of the metric.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionScore {
    pub session_id: String,
    /// `L(i)`.
    pub correct: Vec<bool>,
    /// `A(i)`.
    pub running: Vec<f64>,
    pub aa: f64,
}

impl SessionScore {
    pub fn new(session_id: String, pred: &[bool], truth: &[bool]) -> Result<Self> {
        let aa = average_accuracy(pred, truth)?;
        let correct: Vec<bool> = pred.iter().zip(truth).map(|(p, t)| p == t).collect();
        let mut hits = 0usize;
        let running = correct
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                hits += usize::from(c);
                hits as f64 / (i + 1) as f64
            })
            .collect();
        Ok(Self {
            session_id,
            correct,
            running,
            aa,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PositionStat {
    pub correct: usize,
    pub total: usize,
}

impl PositionStat {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_aa: f64,
    pub first_position_accuracy: f64,
    /// Index `i` covers the `i+1`-th second-half prediction.
    pub per_position: Vec<PositionStat>,
    pub sessions: Vec<SessionScore>,
}

impl EvalReport {
    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Fraction correct over every prediction regardless of position.
    pub fn overall_accuracy(&self) -> f64 {
        let (c, t) = self
            .per_position
            .iter()
            .fold((0, 0), |(c, t), s| (c + s.correct, t + s.total));
        c as f64 / t as f64
    }

    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        writeln!(out, "sessions={}", self.n_sessions()).unwrap();
        writeln!(out, "mean_aa={:.6}", self.mean_aa).unwrap();
        writeln!(
            out,
            "first_position_accuracy={:.6}",
            self.first_position_accuracy
        )
        .unwrap();
        writeln!(out, "overall_accuracy={:.6}", self.overall_accuracy()).unwrap();
        for (i, s) in self.per_position.iter().enumerate() {
            writeln!(out, "position_{}_accuracy={:.6}", i + 1, s.accuracy()).unwrap();
        }
        out
    }

    /// `position,correct,total,accuracy` CSV.
    pub fn per_position_csv(&self) -> String {
        let mut out = String::from("position,correct,total,accuracy\n");
        for (i, s) in self.per_position.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{:.6}",
                i + 1,
                s.correct,
                s.total,
                s.accuracy()
            )
            .unwrap();
        }
        out
    }

    /// `session_id,aa` CSV.
    pub fn per_session_csv(&self) -> String {
        let mut out = String::from("session_id,aa\n");
        for s in &self.sessions {
            writeln!(out, "{},{:.6}", s.session_id, s.aa).unwrap();
        }
        out
    }
}

/// Unweighted mean AA over sessions matched by id. Every id must appear on
/// both sides exactly once.
pub fn mean_aa(
    preds: &[(String, Vec<bool>)],
    truths: &[(String, Vec<bool>)],
) -> Result<EvalReport> {
    let index: HashMap<&str, &Vec<bool>> = preds.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let truth_ids: HashMap<&str, ()> = truths.iter().map(|(id, _)| (id.as_str(), ())).collect();
    let missing: Vec<&str> = truths
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !index.contains_key(id))
        .collect();
    let extra: Vec<&str> = preds
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !truth_ids.contains_key(id))
        .collect();
    if index.len() != preds.len() || truth_ids.len() != truths.len() {
        return Err(Error::Alignment("duplicate session ids".into()));
    }
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Alignment(format!(
            "missing predictions for [{}]; unknown sessions [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    if truths.is_empty() {
        return Err(Error::Validation("no sessions to evaluate".into()));
    }
    let mut per_position = vec![PositionStat::default(); MAX_SESSION_LEN / 2];
    let mut sessions = Vec::with_capacity(truths.len());
    for (id, truth) in truths {
        let pred = index[id.as_str()];
        let score = SessionScore::new(id.clone(), pred, truth)
            .map_err(|e| Error::Alignment(format!("session {id}: {e}")))?;
        if score.correct.len() > per_position.len() {
            per_position.resize(score.correct.len(), PositionStat::default());
        }
        for (stat, &c) in per_position.iter_mut().zip(&score.correct) {
            stat.total += 1;
            stat.correct += usize::from(c);
        }
        sessions.push(score);
    }
    let mean = sessions.iter().map(|s| s.aa).sum::<f64>() / sessions.len() as f64;
    Ok(EvalReport {
        mean_aa: mean,
        first_position_accuracy: per_position[0].accuracy(),
        per_position,
        sessions,
    })
}

/// Mean of member probabilities that is order-invariant and exact for
/// identical members: `p_min + Σ (p_k − p_min) / N` over sorted values.
pub fn ensemble_mean(probs: &[f64]) -> f64 {
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0];
    lo + sorted.iter().map(|&p| p - lo).sum::<f64>() / sorted.len() as f64
}

/// Checkpoints whose skip probabilities are averaged.
pub struct Ensemble<T> {
    members: Vec<(String, Checkpoint<T>)>,
}

impl<T: Scalar> Ensemble<T> {
    /// Members are `(name, checkpoint)`; all must share the first member's pipeline schema.
    pub fn new(members: Vec<(String, Checkpoint<T>)>) -> Result<Self> {
        let (_, first) = members.first().ok_or_else(|| Error::Ensemble {
            member: "<none>".into(),
            reason: "an ensemble needs at least one member".into(),
        })?;
        let schema = first.pipeline.schema();
        for (name, m) in &members[1..] {
            if m.pipeline.schema() != schema {
                return Err(Error::Ensemble {
                    member: name.clone(),
                    reason: "feature pipeline schema differs from the first member".into(),
                });
            }
            if m.embedding.as_ref().map(|e| &e.sha256)
                != first.embedding.as_ref().map(|e| &e.sha256)
            {
                return Err(Error::Ensemble {
                    member: name.clone(),
                    reason: "trained against a different embedding file".into(),
                });
            }
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[(String, Checkpoint<T>)] {
        &self.members
    }

    /// Averaged skip probabilities per session.
    pub fn predict_probs(
        &self,
        sessions: &[Session],
        catalog: &TrackCatalog,
        batch_size: usize,
    ) -> Result<Vec<(String, Vec<f64>)>> {
        let per_member = self
            .members
            .iter()
            .map(|(_, c)| {
                c.params
                    .predict_sessions(sessions, &c.pipeline, catalog, batch_size)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((0..sessions.len())
            .map(|s| {
                let first = &per_member[0][s];
                let probs = (0..first.probs.len())
                    .map(|j| {
                        let ps: Vec<f64> = per_member.iter().map(|m| m[s].probs[j][0]).collect();
                        ensemble_mean(&ps)
                    })
                    .collect();
                (first.session_id.clone(), probs)
            })
            .collect())
    }

    /// Thresholded (`p̄ >= threshold`) skip predictions per session.
    pub fn predict(
        &self,
        sessions: &[Session],
        catalog: &TrackCatalog,
        threshold: f64,
        batch_size: usize,
    ) -> Result<Vec<(String, Vec<bool>)>> {
        Ok(self
            .predict_probs(sessions, catalog, batch_size)?
            .into_iter()
            .map(|(id, ps)| (id, ps.into_iter().map(|p| p >= threshold).collect()))
            .collect())
    }
}

/// One ensemble prediction for a single session.
pub fn ensemble_predict<T: Scalar>(
    ensemble: &Ensemble<T>,
    session: &Session,
    catalog: &TrackCatalog,
    threshold: f64,
) -> Result<Vec<bool>> {
    let mut out = ensemble.predict(std::slice::from_ref(session), catalog, threshold, 1)?;
    Ok(out.remove(0).1)
}

fn bits(v: &[bool]) -> String {
    v.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// One `0`/`1` line per session, ordered by session id.
pub fn write_submission(path: &Path, preds: &[(String, Vec<bool>)]) -> Result<()> {
    let sorted: BTreeMap<&str, &Vec<bool>> = preds.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let mut out = String::new();
    for p in sorted.values() {
        out.push_str(&bits(p));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `0`/`1` lines. Blank lines are skipped.
pub fn read_submission(path: &Path) -> Result<Vec<Vec<bool>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            line.trim()
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: n + 1,
                        msg: format!("invalid character {other:?}, expected 0 or 1"),
                    }),
                })
                .collect()
        })
        .collect()
}

/// Ground truth as `(session_id, skips)` sorted by id, from either a sessions
/// CSV with second-half interactions or a submission-format file.
pub fn read_truth(path: &Path) -> Result<Vec<(String, Vec<bool>)>> {
    let is_csv = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .starts_with("session_id");
    if is_csv {
        let sessions = read_sessions(path, LoadMode::Train)?;
        return sessions
            .iter()
            .map(|s| {
                Ok((
                    s.session_id.clone(),
                    s.second_half_skips().expect("train mode validated"),
                ))
            })
            .collect();
    }
    Ok(read_submission(path)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| (format!("{i:06}"), v))
        .collect())
}

/// Scores a submission against ground truth. Lines are matched to the truth
/// sessions in ascending session-id order.
pub fn score_submission(truth_path: &Path, submission_path: &Path) -> Result<EvalReport> {
    let truth = read_truth(truth_path)?;
    let sub = read_submission(submission_path)?;
    if sub.len() != truth.len() {
        let missing: Vec<&str> = truth
            .iter()
            .skip(sub.len())
            .map(|(id, _)| id.as_str())
            .collect();
        return Err(Error::Alignment(format!(
            "submission has {} lines, truth has {} sessions{}",
            sub.len(),
            truth.len(),
            if missing.is_empty() {
                String::new()
            } else {
                format!("; missing [{}]", missing.join(", "))
            }
        )));
    }
    for (n, ((id, t), p)) in truth.iter().zip(&sub).enumerate() {
        if t.len() != p.len() {
            return Err(Error::Alignment(format!(
                "line {}: session {id} needs {} predictions, found {}",
                n + 1,
                t.len(),
                p.len()
            )));
        }
    }
    let preds: Vec<(String, Vec<bool>)> = truth.iter().map(|(id, _)| id.clone()).zip(sub).collect();
    mean_aa(&preds, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    #[test]
    fn hand_checked_values() {
        assert_eq!(average_accuracy(&[true; 5], &[true; 5]).unwrap(), 1.0);
        assert_eq!(
            average_accuracy(&[true, false, true], &[false, true, false]).unwrap(),
            0.0
        );
        let r: Ratio<i64> = average_accuracy_in(&[true, false, true], &[true, true, true]).unwrap();
        assert_eq!(r, Ratio::new(5, 9));
        assert!(average_accuracy(&[], &[]).is_err());
        assert!(average_accuracy(&[true], &[true, false]).is_err());
    }

    fn ids(v: Vec<Vec<bool>>) -> Vec<(String, Vec<bool>)> {
        v.into_iter()
            .enumerate()
            .map(|(i, x)| (format!("s{i}"), x))
            .collect()
    }

    #[test]
    fn mean_examples() {
        let truth = ids(vec![vec![true, false], vec![true, true]]);
        let pred = ids(vec![vec![true, false], vec![false, false]]);
        let r = mean_aa(&pred, &truth).unwrap();
        assert_eq!(r.mean_aa, 0.5);
        assert_eq!(r.first_position_accuracy, 0.5);
        let single = mean_aa(&pred[..1], &truth[..1]).unwrap();
        assert_eq!(single.mean_aa, 1.0);
        let err = mean_aa(&pred[..1], &truth).unwrap_err();
        assert!(matches!(err, Error::Alignment(ref m) if m.contains("s1")));
    }

    #[test]
    fn ensemble_mean_rules() {
        assert_eq!(ensemble_mean(&[0.9, 0.1]), 0.5);
        assert!(ensemble_mean(&[0.9, 0.1]) >= 0.5);
        let p = 0.123_456_789_012_345_6;
        assert_eq!(ensemble_mean(&[p; 6]), p);
        let a = [0.3, 0.71, 0.52, 0.08, 0.999];
        let mut b = a;
        b.reverse();
        assert_eq!(ensemble_mean(&a), ensemble_mean(&b));
        assert!((ensemble_mean(&a) - a.iter().sum::<f64>() / 5.0).abs() < 1e-15);
    }

    #[test]
    fn submission_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "0101\n0110x\n").unwrap();
        assert!(matches!(
            read_submission(&bad),
            Err(Error::Parse { line: 2, .. })
        ));

        let truth = dir.path().join("truth.txt");
        std::fs::write(&truth, "01101\n11111\n").unwrap();
        let r = score_submission(&truth, &truth).unwrap();
        assert_eq!(r.mean_aa, 1.0);
        let short = dir.path().join("short.txt");
        std::fs::write(&short, "01101\n").unwrap();
        assert!(matches!(
            score_submission(&truth, &short),
            Err(Error::Alignment(_))
        ));
        let wrong_len = dir.path().join("len.txt");
        std::fs::write(&wrong_len, "01101\n1111\n").unwrap();
        assert!(matches!(
            score_submission(&truth, &wrong_len),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn random_coin_scores_about_a_third() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut sample = |n: usize| (0..n).map(|_| rng.random_bool(0.5)).collect::<Vec<_>>();
        let mut pairs = Vec::new();
        for i in 0..1000 {
            let t = 5 + i % 6;
            pairs.push((format!("s{i}"), sample(t), sample(t)));
        }
        let preds: Vec<_> = pairs
            .iter()
            .map(|(id, p, _)| (id.clone(), p.clone()))
            .collect();
        let truths: Vec<_> = pairs
            .iter()
            .map(|(id, _, t)| (id.clone(), t.clone()))
            .collect();
        let aa = mean_aa(&preds, &truths).unwrap().mean_aa;
        assert!((0.28..=0.38).contains(&aa), "{aa}");
    }

    proptest! {
        #[test]
        fn bounds_and_monotonicity(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..12), flip in 0usize..12) {
            let (p, t): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let aa = average_accuracy(&p, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&aa));
            prop_assert_eq!(aa == 1.0, p == t);
            prop_assert_eq!(aa == 0.0, p.iter().zip(&t).all(|(a, b)| a != b));
            let k = flip % p.len();
            if p[k] != t[k] {
                let mut q = p.clone();
                q[k] = t[k];
                let before: Ratio<i64> = average_accuracy_in(&p, &t).unwrap();
                let after: Ratio<i64> = average_accuracy_in(&q, &t).unwrap();
                prop_assert!(after >= before);
            }
        }
    }
}
