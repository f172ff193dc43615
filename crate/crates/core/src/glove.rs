//! Track embeddings from session co-occurrence: each track is a word and each
//! session a sentence. Weighted least squares on log counts, trained with
//! per-coordinate AdaGrad.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Session;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor_graph::Matrix;

/// Symmetric sparse co-occurrence weights over a sorted track vocabulary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CooccurrenceTable {
    vocab: Vec<String>,
    entries: BTreeMap<(usize, usize), f64>,
}

impl CooccurrenceTable {
    /// Adds `1/d` to `X_ij` and `X_ji` for every pair at distance `d <= window`.
    /// Repeats of one track inside a window produce no diagonal entry.
    pub fn build<S: AsRef<str>>(sequences: &[Vec<S>], window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config(
                "co-occurrence window must be at least 1".into(),
            ));
        }
        let vocab: Vec<String> = sequences
            .iter()
            .flatten()
            .map(|s| s.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut entries = BTreeMap::new();
        for seq in sequences {
            let ids: Vec<usize> = seq.iter().map(|s| index[s.as_ref()]).collect();
            for (a, &i) in ids.iter().enumerate() {
                for (d, &j) in ids[a + 1..].iter().take(window).enumerate() {
                    if i == j {
                        continue;
                    }
                    let w = 1.0 / (d + 1) as f64;
                    *entries.entry((i, j)).or_insert(0.0) += w;
                    *entries.entry((j, i)).or_insert(0.0) += w;
                }
            }
        }
        Ok(Self { vocab, entries })
    }

    /// Builds from the track sequences of `sessions`.
    pub fn from_sessions(sessions: &[Session], window: usize) -> Result<Self> {
        let seqs: Vec<Vec<&str>> = sessions
            .iter()
            .map(|s| s.events.iter().map(|e| e.track_id.as_str()).collect())
            .collect();
        Self::build(&seqs, window)
    }

    /// Entrywise sum over the union of both vocabularies.
    pub fn merge(&self, other: &Self) -> Self {
        let vocab: Vec<String> = self
            .vocab
            .iter()
            .chain(&other.vocab)
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut entries = BTreeMap::new();
        for t in [self, other] {
            for (&(i, j), &x) in &t.entries {
                let key = (index[t.vocab[i].as_str()], index[t.vocab[j].as_str()]);
                *entries.entry(key).or_insert(0.0) += x;
            }
        }
        Self { vocab, entries }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.vocab.binary_search_by(|s| s.as_str().cmp(a)).ok()?;
        let j = self.vocab.binary_search_by(|s| s.as_str().cmp(b)).ok()?;
        self.entries.get(&(i, j)).copied()
    }

    /// Stored `(i, j, X_ij)` triples in index order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &x)| (i, j, x))
    }
}

/// `(x / x_max)^alpha`, capped at 1.
pub fn glove_weight(x: f64, x_max: f64, alpha: f64) -> f64 {
    if x < x_max {
        (x / x_max).powf(alpha)
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GloveConfig {
    #[serde(rename = "dims")]
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    pub x_max: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for GloveConfig {
    fn default() -> Self {
        Self {
            dim: 150,
            window: 5,
            epochs: 25,
            lr: 0.05,
            x_max: 100.0,
            alpha: 0.75,
            seed: 7,
        }
    }
}

/// Main and context vectors with their biases.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub vocab: Vec<String>,
    pub w: Matrix<T>,
    pub w_ctx: Matrix<T>,
    pub b: Vec<T>,
    pub b_ctx: Vec<T>,
}

/// Gradient of one entry's loss term with respect to its four parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryGradient<T> {
    pub w_i: Vec<T>,
    pub w_ctx_j: Vec<T>,
    pub b_i: T,
    pub b_ctx_j: T,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Uniform `(-0.5, 0.5) / dim` init for vectors, zero biases.
    pub fn init(vocab: Vec<String>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.len();
        let scale = 1.0 / dim as f64;
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::of((rng.random::<f64>() - 0.5) * scale))
                .collect()
        };
        let w = Matrix::from_vec(v, dim, draw(v * dim)).expect("sized");
        let w_ctx = Matrix::from_vec(v, dim, draw(v * dim)).expect("sized");
        Self {
            vocab,
            w,
            w_ctx,
            b: vec![T::zero(); v],
            b_ctx: vec![T::zero(); v],
        }
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    fn residual(&self, i: usize, j: usize, x: f64) -> T {
        let dot: T = self
            .w
            .row(i)
            .iter()
            .zip(self.w_ctx.row(j))
            .map(|(&a, &b)| a * b)
            .sum();
        dot + self.b[i] + self.b_ctx[j] - T::of(x.ln())
    }

    /// `f(X_ij) · (w_i·w̃_j + b_i + b̃_j − ln X_ij)²` for one entry.
    pub fn entry_loss(&self, i: usize, j: usize, x: f64, cfg: &GloveConfig) -> T {
        let r = self.residual(i, j, x);
        T::of(glove_weight(x, cfg.x_max, cfg.alpha)) * r * r
    }

    pub fn entry_gradient(
        &self,
        i: usize,
        j: usize,
        x: f64,
        cfg: &GloveConfig,
    ) -> EntryGradient<T> {
        let c = T::of(2.0 * glove_weight(x, cfg.x_max, cfg.alpha)) * self.residual(i, j, x);
        EntryGradient {
            w_i: self.w_ctx.row(j).iter().map(|&v| c * v).collect(),
            w_ctx_j: self.w.row(i).iter().map(|&v| c * v).collect(),
            b_i: c,
            b_ctx_j: c,
        }
    }

    /// Full objective over every stored entry.
    pub fn objective(&self, table: &CooccurrenceTable, cfg: &GloveConfig) -> T {
        table
            .entries()
            .map(|(i, j, x)| self.entry_loss(i, j, x, cfg))
            .sum()
    }

    /// Main and context roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            vocab: self.vocab.clone(),
            w: self.w_ctx.clone(),
            w_ctx: self.w.clone(),
            b: self.b_ctx.clone(),
            b_ctx: self.b.clone(),
        }
    }

    /// Exported vectors `w + w̃`.
    pub fn export(&self) -> TrackEmbeddings {
        let mut sum = self.w.clone();
        sum.add_assign(&self.w_ctx);
        TrackEmbeddings::new(
            self.vocab.clone(),
            self.dim(),
            sum.data().iter().map(|x| x.as_f64()).collect(),
        )
        .expect("sized")
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && self.w_ctx.is_finite()
            && self.b.iter().chain(&self.b_ctx).all(|x| x.is_finite())
    }
}

/// Objective before training followed by the objective after each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct GloveReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// AdaGrad over shuffled nonzero entries. Deterministic given `cfg.seed`.
pub fn train_glove<T: Scalar>(
    table: &CooccurrenceTable,
    cfg: &GloveConfig,
) -> Result<(EmbeddingTable<T>, GloveReport)> {
    if table.is_empty() {
        return Err(Error::Training("co-occurrence table is empty".into()));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("embedding dim must be positive".into()));
    }
    let mut emb = EmbeddingTable::<T>::init(table.vocab().to_vec(), cfg.dim, cfg.seed);
    let v = table.vocab().len();
    let mut sq_w = Matrix::filled(v, cfg.dim, T::one());
    let mut sq_wc = Matrix::filled(v, cfg.dim, T::one());
    let mut sq_b = vec![T::one(); v];
    let mut sq_bc = vec![T::one(); v];
    let lr = T::of(cfg.lr);
    let mut order: Vec<(usize, usize, f64)> = table.entries().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let initial_loss = emb.objective(table, cfg).as_f64();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &(i, j, x) in &order {
            let g = emb.entry_gradient(i, j, x, cfg);
            for (k, (gw, gc)) in g.w_i.iter().zip(&g.w_ctx_j).enumerate() {
                let (sw, sc) = (sq_w.get(i, k), sq_wc.get(j, k));
                emb.w.set(i, k, emb.w.get(i, k) - lr * *gw / sw.sqrt());
                emb.w_ctx
                    .set(j, k, emb.w_ctx.get(j, k) - lr * *gc / sc.sqrt());
                sq_w.set(i, k, sw + *gw * *gw);
                sq_wc.set(j, k, sc + *gc * *gc);
            }
            emb.b[i] -= lr * g.b_i / sq_b[i].sqrt();
            emb.b_ctx[j] -= lr * g.b_ctx_j / sq_bc[j].sqrt();
            sq_b[i] += g.b_i * g.b_i;
            sq_bc[j] += g.b_ctx_j * g.b_ctx_j;
        }
        let loss = emb.objective(table, cfg).as_f64();
        if !loss.is_finite() || !emb.is_finite() {
            return Err(Error::Diverged(format!(
                "glove loss became {loss} in epoch {}",
                epoch + 1
            )));
        }
        log::info!("glove epoch {}: loss {loss:.6}", epoch + 1);
        epoch_losses.push(loss);
    }
    Ok((
        emb,
        GloveReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

/// Frozen pretrained vectors keyed by track id.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackEmbeddings {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl TrackEmbeddings {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Validation(format!(
                "{} embedding values for {} ids of width {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate embedding for {id}")));
            }
        }
        Ok(Self {
            ids,
            dim,
            data,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let (x, y) = (self.get(a)?, self.get(b)?);
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
        let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
        Some(dot / (nx * ny))
    }

    /// Writes `track_id v1 … vd` lines. Values use shortest round-trip formatting.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                write!(out, " {v}").expect("write to String");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let mut fields = line.split_whitespace();
            let id = fields.next().expect("non-empty line");
            let start = data.len();
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| parse_err(n + 1, format!("invalid float {f:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(n + 1, format!("non-finite value {f:?}")));
                }
                data.push(v);
            }
            let width = data.len() - start;
            match dim {
                None if width == 0 => {
                    return Err(parse_err(n + 1, "embedding has no values".into()))
                }
                None => dim = Some(width),
                Some(d) if d != width => {
                    return Err(parse_err(
                        n + 1,
                        format!("expected {d} values, found {width}"),
                    ))
                }
                Some(_) => {}
            }
            ids.push(id.to_string());
        }
        let dim = dim.ok_or_else(|| parse_err(0, "embedding file is empty".into()))?;
        Self::new(ids, dim, data)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(v: &[&[&'static str]]) -> Vec<Vec<&'static str>> {
        v.iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn cooccurrence_examples() {
        let t = CooccurrenceTable::build(&seqs(&[&["A", "B"]]), 5).unwrap();
        assert_eq!(t.get("A", "B"), Some(1.0));
        let t = CooccurrenceTable::build(&seqs(&[&["A", "B", "C"]]), 5).unwrap();
        assert_eq!(t.get("A", "C"), Some(0.5));
        let t = CooccurrenceTable::build(&seqs(&[&["A", "B", "C"]]), 1).unwrap();
        assert_eq!(t.get("A", "C"), None);
        assert_eq!(t.get("B", "C"), Some(1.0));
        assert!(CooccurrenceTable::build(&seqs(&[&["A"]]), 0).is_err());
    }

    #[test]
    fn cooccurrence_is_symmetric_without_diagonal() {
        let t =
            CooccurrenceTable::build(&seqs(&[&["A", "B", "A", "C", "B", "D", "A"]]), 3).unwrap();
        for (i, j, x) in t.entries() {
            assert_ne!(i, j);
            assert_eq!(t.get(&t.vocab()[j], &t.vocab()[i]), Some(x));
        }
    }

    #[test]
    fn merge_is_entrywise_sum() {
        let a = CooccurrenceTable::build(&seqs(&[&["A", "B", "C"]]), 5).unwrap();
        let b = CooccurrenceTable::build(&seqs(&[&["B", "D", "A"]]), 5).unwrap();
        let both =
            CooccurrenceTable::build(&seqs(&[&["A", "B", "C"], &["B", "D", "A"]]), 5).unwrap();
        assert_eq!(a.merge(&b), both);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(glove_weight(100.0, 100.0, 0.75), 1.0);
        assert!((glove_weight(50.0, 100.0, 0.75) - 0.594604).abs() < 1e-6);
        assert_eq!(glove_weight(0.0, 100.0, 0.75), 0.0);
        assert_eq!(glove_weight(500.0, 100.0, 0.75), 1.0);
    }

    fn three_track() -> CooccurrenceTable {
        CooccurrenceTable::build(&seqs(&[&["A", "B", "C", "A", "B"], &["C", "B"]]), 2).unwrap()
    }

    #[test]
    fn objective_invariant_under_swap() {
        let t = three_track();
        let cfg = GloveConfig::default();
        let e = EmbeddingTable::<f64>::init(t.vocab().to_vec(), 4, 3);
        let mut e = e;
        e.b = vec![0.1, -0.2, 0.3];
        e.b_ctx = vec![0.05, 0.4, -0.1];
        let a = e.objective(&t, &cfg);
        let b = e.swapped().objective(&t, &cfg);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn entry_gradient_matches_finite_differences() {
        let t = three_track();
        let cfg = GloveConfig::default();
        let mut e = EmbeddingTable::<f64>::init(t.vocab().to_vec(), 5, 11);
        e.b = vec![0.3, -0.1, 0.2];
        e.b_ctx = vec![-0.2, 0.1, 0.05];
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for (i, j, x) in t.entries() {
            let g = e.entry_gradient(i, j, x, &cfg);
            for k in 0..5 {
                let mut p = e.clone();
                p.w.set(i, k, e.w.get(i, k) + h);
                let mut m = e.clone();
                m.w.set(i, k, e.w.get(i, k) - h);
                let n = (p.entry_loss(i, j, x, &cfg) - m.entry_loss(i, j, x, &cfg)) / (2.0 * h);
                assert!(rel(g.w_i[k], n) < 1e-5, "w_i[{k}] {} vs {n}", g.w_i[k]);
                let mut p = e.clone();
                p.w_ctx.set(j, k, e.w_ctx.get(j, k) + h);
                let mut m = e.clone();
                m.w_ctx.set(j, k, e.w_ctx.get(j, k) - h);
                let n = (p.entry_loss(i, j, x, &cfg) - m.entry_loss(i, j, x, &cfg)) / (2.0 * h);
                assert!(rel(g.w_ctx_j[k], n) < 1e-5);
            }
            let mut p = e.clone();
            p.b[i] += h;
            let mut m = e.clone();
            m.b[i] -= h;
            let n = (p.entry_loss(i, j, x, &cfg) - m.entry_loss(i, j, x, &cfg)) / (2.0 * h);
            assert!(rel(g.b_i, n) < 1e-5);
            let mut p = e.clone();
            p.b_ctx[j] += h;
            let mut m = e.clone();
            m.b_ctx[j] -= h;
            let n = (p.entry_loss(i, j, x, &cfg) - m.entry_loss(i, j, x, &cfg)) / (2.0 * h);
            assert!(rel(g.b_ctx_j, n) < 1e-5);
        }
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let t = three_track();
        let cfg = GloveConfig {
            dim: 8,
            epochs: 30,
            ..GloveConfig::default()
        };
        let (e1, r1) = train_glove::<f64>(&t, &cfg).unwrap();
        let (e2, r2) = train_glove::<f64>(&t, &cfg).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(r1, r2);
        assert!(r1.epoch_losses.last().unwrap() < r1.epoch_losses.first().unwrap());
        assert!(r1.epoch_losses[0] < r1.initial_loss);
    }

    #[test]
    fn single_pair_fits_log_count() {
        let pair: &[&str] = &["A", "B"];
        let t = CooccurrenceTable::build(&seqs(&[pair; 7]), 5).unwrap();
        let cfg = GloveConfig {
            dim: 2,
            epochs: 3000,
            ..GloveConfig::default()
        };
        let (e, _) = train_glove::<f64>(&t, &cfg).unwrap();
        for (i, j, x) in t.entries() {
            let pred: f64 =
                e.w.row(i)
                    .iter()
                    .zip(e.w_ctx.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + e.b[i]
                    + e.b_ctx[j];
            assert!((pred - x.ln()).abs() < 1e-2, "{pred} vs {}", x.ln());
        }
    }

    #[test]
    fn empty_table_is_a_training_error() {
        let t = CooccurrenceTable::build(&seqs(&[&["A"]]), 5).unwrap();
        assert!(matches!(
            train_glove::<f64>(&t, &GloveConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let t = three_track();
        let (e, _) = train_glove::<f64>(
            &t,
            &GloveConfig {
                dim: 6,
                epochs: 5,
                ..GloveConfig::default()
            },
        )
        .unwrap();
        let exported = e.export();
        exported.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.split_whitespace().count() == 7));
        let back = TrackEmbeddings::load(&path).unwrap();
        assert_eq!(back, exported);
        assert_eq!(file_sha256(&path).unwrap().len(), 64);
        assert!(matches!(
            TrackEmbeddings::load(&dir.path().join("missing.txt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "a 1 2\nb 3\n").unwrap();
        assert!(matches!(
            TrackEmbeddings::load(&path),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
