//! Session model: stacked GRUs over first-half triplets, enrichment of each
//! second-half doublet with the session vector, and a multi-task head.

mod params;

pub use params::{
    ensemble_variants, BoundParams, Dense, DenseVars, GruParams, GruVars, ModelConfig, ModelParams,
    VariantConfig, CONTEXT_EMB_DIM,
};

use crate::dataset::{PaddedBatch, Session, HALF_LEN, NUM_TASKS};
use crate::error::{Error, Result};
use crate::features::{FeaturePipeline, TrackCatalog};
use crate::scalar::Scalar;
use crate::tensor_graph::gradcheck::{five_point, GradCheck, FD_STEP};
use crate::tensor_graph::{sigmoid, Activation, BatchNormState, Graph, Matrix, Mode, Var};

/// Loss weight of skip followed by the three auxiliary tasks.
pub const DEFAULT_TASK_WEIGHTS: [f64; NUM_TASKS] = [1.0, 0.2, 0.2, 0.2];

/// One GRU step on a batch of rows. Gates read the previous output:
/// `u = σ(x W_ux + o W_us + b_u)`, `r = σ(x W_rx + o W_rs + b_r)`,
/// `s = tanh(x W_cx + (r ⊙ o) W_cs + b_c)`, `o' = o + u ⊙ (s − o)`.
pub fn gru_step<T: Scalar>(g: &mut Graph<T>, x: Var, o_prev: Var, p: &GruVars) -> Result<Var> {
    let gate = |g: &mut Graph<T>, w_x: Var, w_s: Var, b: Var| -> Result<Var> {
        let xs = g.affine(x, w_x, b)?;
        let os = g.matmul(o_prev, w_s)?;
        let z = g.add(xs, os)?;
        g.activation(z, Activation::Sigmoid)
    };
    let u = gate(g, p.w_ux, p.w_us, p.b_u)?;
    let r = gate(g, p.w_rx, p.w_rs, p.b_r)?;
    let xs = g.affine(x, p.w_cx, p.b_c)?;
    let ro = g.hadamard(r, o_prev)?;
    let ros = g.matmul(ro, p.w_cs)?;
    let z = g.add(xs, ros)?;
    let s = g.activation(z, Activation::Tanh)?;
    let delta = g.sub(s, o_prev)?;
    let step = g.hadamard(u, delta)?;
    g.add(o_prev, step)
}

/// Runs two stacked GRUs from zero state over `steps` (each `[batch × in]`)
/// and concatenates their final outputs into `[batch × 2·hidden]`.
pub fn encode_first_half<T: Scalar>(
    g: &mut Graph<T>,
    steps: &[Var],
    gru1: &GruVars,
    gru2: &GruVars,
) -> Result<Var> {
    let first = *steps.first().ok_or(Error::EmptyBatch)?;
    let batch = g.shape(first).0;
    let h1 = g.shape(gru1.w_us).0;
    let h2 = g.shape(gru2.w_us).0;
    let mut o1 = g.constant(Matrix::zeros(batch, h1));
    let mut o2 = g.constant(Matrix::zeros(batch, h2));
    for &x in steps {
        o1 = gru_step(g, x, o1, gru1)?;
        o2 = gru_step(g, o1, o2, gru2)?;
    }
    g.concat_cols(&[o1, o2])
}

/// `[x_i ; x_half ; x_half ⊙ relu(x_i W + b)]` row by row.
pub fn enrich<T: Scalar>(
    g: &mut Graph<T>,
    doublets: Var,
    x_half: Var,
    proj: &DenseVars,
) -> Result<Var> {
    let z = g.affine(doublets, proj.w, proj.b)?;
    let act = g.activation(z, Activation::Relu)?;
    let gated = g.hadamard(x_half, act)?;
    g.concat_cols(&[doublets, x_half, gated])
}

/// Batchnorm states for the two head layers, borrowed per mode.
pub enum HeadNorm<'a, T> {
    Train([Option<&'a mut BatchNormState<T>>; 2]),
    Infer([Option<&'a BatchNormState<T>>; 2]),
}

/// Two hidden layers (optional batchnorm before the activation) and a
/// 4-unit output. Returns logits; probabilities are their sigmoid.
pub fn classify<T: Scalar>(
    g: &mut Graph<T>,
    enriched: Var,
    bound: &BoundParams,
    activation: Activation,
    norms: HeadNorm<'_, T>,
) -> Result<Var> {
    let layers = [(bound.dense1, bound.bn1), (bound.dense2, bound.bn2)];
    let mut h = enriched;
    match norms {
        HeadNorm::Train(mut states) => {
            for ((dense, bn), state) in layers.into_iter().zip(&mut states) {
                h = g.affine(h, dense.w, dense.b)?;
                if let (Some((gamma, beta)), Some(s)) = (bn, state.as_deref_mut()) {
                    h = g.batchnorm_train(h, gamma, beta, s)?;
                }
                h = g.activation(h, activation)?;
            }
        }
        HeadNorm::Infer(states) => {
            for ((dense, bn), state) in layers.into_iter().zip(states) {
                h = g.affine(h, dense.w, dense.b)?;
                if let (Some((gamma, beta)), Some(s)) = (bn, state) {
                    h = g.batchnorm_infer(h, gamma, beta, s)?;
                }
                h = g.activation(h, activation)?;
            }
        }
    }
    g.affine(h, bound.out.w, bound.out.b)
}

/// Result of a forward pass: bound parameter handles and `[batch·10 × 4]` logits.
pub struct Forward {
    pub bound: BoundParams,
    pub logits: Var,
}

impl<T: Scalar> ModelParams<T> {
    fn check_batch(&self, batch: &PaddedBatch<T>) -> Result<()> {
        let c = &self.config;
        let trip = batch.first_half.first().map_or((0, 0), |m| m.shape());
        if trip.1 != c.d_trip || batch.second_half.cols() != c.d_doub {
            return Err(Error::Shape {
                op: "forward",
                lhs: (c.d_trip, c.d_doub),
                rhs: (trip.1, batch.second_half.cols()),
            });
        }
        Ok(())
    }

    /// Splits the context index out of each step and replaces it by its embedding row.
    fn step_inputs(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        batch: &PaddedBatch<T>,
    ) -> Result<Vec<Var>> {
        let c = &self.config;
        batch
            .first_half
            .iter()
            .map(|step| {
                let n = step.rows();
                let mut numeric = Matrix::zeros(n, c.d_trip - 1);
                let mut idx = Vec::with_capacity(n);
                for r in 0..n {
                    let row = step.row(r);
                    let out = numeric.row_mut(r);
                    out[..c.context_col].copy_from_slice(&row[..c.context_col]);
                    out[c.context_col..].copy_from_slice(&row[c.context_col + 1..]);
                    let k = row[c.context_col].as_f64().round();
                    idx.push(if k >= 0.0 && (k as usize) < c.context_vocab {
                        k as usize
                    } else {
                        0
                    });
                }
                let numeric = g.constant(numeric);
                let ctx = g.gather_rows(bound.context_emb, &idx)?;
                g.concat_cols(&[numeric, ctx])
            })
            .collect()
    }

    fn forward_with(&self, g: &mut Graph<T>, batch: &PaddedBatch<T>) -> Result<(BoundParams, Var)> {
        self.check_batch(batch)?;
        let bound = self.bind(g);
        let steps = self.step_inputs(g, &bound, batch)?;
        let x_half = encode_first_half(g, &steps, &bound.gru1, &bound.gru2)?;
        let repeat: Vec<usize> = (0..batch.batch_size())
            .flat_map(|b| std::iter::repeat_n(b, HALF_LEN))
            .collect();
        let x_half = g.gather_rows(x_half, &repeat)?;
        let doublets = g.constant(batch.second_half.clone());
        let enriched = enrich(g, doublets, x_half, &bound.enrich_proj)?;
        Ok((bound, enriched))
    }

    /// Training-mode pass; batchnorm running statistics are updated.
    pub fn forward_train(&mut self, g: &mut Graph<T>, batch: &PaddedBatch<T>) -> Result<Forward> {
        let (bound, enriched) = self.forward_with(g, batch)?;
        let act = self.config.variant.activation;
        let norms = HeadNorm::Train([self.bn1.as_mut(), self.bn2.as_mut()]);
        let logits = classify(g, enriched, &bound, act, norms)?;
        Ok(Forward { bound, logits })
    }

    /// Inference-mode pass; pure in `self`.
    pub fn forward_infer(&self, g: &mut Graph<T>, batch: &PaddedBatch<T>) -> Result<Forward> {
        let (bound, enriched) = self.forward_with(g, batch)?;
        let act = self.config.variant.activation;
        let norms = HeadNorm::Infer([self.bn1.as_ref(), self.bn2.as_ref()]);
        let logits = classify(g, enriched, &bound, act, norms)?;
        Ok(Forward { bound, logits })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        batch: &PaddedBatch<T>,
        mode: Mode,
    ) -> Result<Forward> {
        match mode {
            Mode::Train => self.forward_train(g, batch),
            Mode::Infer => self.forward_infer(g, batch),
        }
    }

    /// Per-session probabilities over the real second-half slots.
    pub fn predict_batch(&self, batch: &PaddedBatch<T>) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let f = self.forward_infer(&mut g, batch)?;
        let logits = g.value(f.logits);
        Ok((0..batch.batch_size())
            .map(|b| Prediction {
                session_id: batch.session_ids[b].clone(),
                probs: (0..batch.second_len[b])
                    .map(|j| {
                        let row = logits.row(b * HALF_LEN + j);
                        std::array::from_fn(|k| sigmoid(row[k]).as_f64())
                    })
                    .collect(),
            })
            .collect())
    }

    /// Encodes, pads and predicts `sessions` in chunks of `batch_size`.
    pub fn predict_sessions(
        &self,
        sessions: &[Session],
        pipeline: &FeaturePipeline,
        catalog: &TrackCatalog,
        batch_size: usize,
    ) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(sessions.len());
        for chunk in sessions.chunks(batch_size.max(1)) {
            let batch = crate::dataset::pad_batch(chunk, pipeline, catalog)?;
            out.extend(self.predict_batch(&batch)?);
        }
        Ok(out)
    }
}

/// Masked, task-weighted binary cross-entropy averaged over real slots.
pub fn loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    batch: &PaddedBatch<T>,
    task_weights: &[f64; NUM_TASKS],
) -> Result<Var> {
    if !batch.has_targets {
        return Err(Error::Validation("loss needs second-half targets".into()));
    }
    let n_valid = batch.n_valid();
    if n_valid == 0 {
        return Err(Error::DegenerateBatch("mask has no true entries".into()));
    }
    let rows = batch.mask.len();
    let mut weights = Matrix::zeros(rows, NUM_TASKS);
    for (r, &m) in batch.mask.iter().enumerate() {
        if m {
            for (k, &w) in task_weights.iter().enumerate() {
                weights.set(r, k, T::of(w / n_valid as f64));
            }
        }
    }
    g.bce_with_logits(logits, batch.targets.clone(), weights)
}

/// Finite-difference check of the training-mode loss gradient with respect to
/// every parameter entry. Each evaluation runs on a fresh copy of `params`, so
/// batchnorm running statistics do not drift between evaluations.
pub fn check_model_gradients(
    params: &ModelParams<f64>,
    batch: &PaddedBatch<f64>,
    task_weights: &[f64; NUM_TASKS],
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let fw = params.clone().forward_train(&mut g, batch)?;
    let l = loss(&mut g, fw.logits, batch, task_weights)?;
    g.backward(l)?;

    let eval = |k: usize, idx: usize, delta: f64| -> f64 {
        let mut q = params.clone();
        q.params_mut()[k].data_mut()[idx] += delta;
        let mut g = Graph::new();
        let fw = q
            .forward_train(&mut g, batch)
            .expect("forward succeeded at the base point");
        let l =
            loss(&mut g, fw.logits, batch, task_weights).expect("loss succeeded at the base point");
        g.value(l).get(0, 0)
    };
    let mut report = GradCheck::default();
    let named = params.named_params();
    for (k, (&v, (name, m))) in fw.bound.vars().iter().zip(&named).enumerate() {
        for idx in 0..m.data().len() {
            let analytic = g.grad(v).map_or(0.0, |m| m.data()[idx]);
            let numeric = five_point(|d| eval(k, idx, d), FD_STEP);
            report.record(analytic, numeric, || format!("{name}[{idx}]"));
        }
    }
    Ok(report)
}

/// Probabilities for each real second-half position of one session, in task
/// order skip, context switch, no pause, short pause.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub session_id: String,
    pub probs: Vec<[f64; NUM_TASKS]>,
}

impl Prediction {
    pub fn skip_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p[0]).collect()
    }

    /// `p_skip >= threshold` per position.
    pub fn skips(&self, threshold: f64) -> Vec<bool> {
        self.probs.iter().map(|p| p[0] >= threshold).collect()
    }
}

/// Binary skip predictions for the second half of one session.
pub fn predict_session<T: Scalar>(
    session: &Session,
    pipeline: &FeaturePipeline,
    catalog: &TrackCatalog,
    params: &ModelParams<T>,
    threshold: f64,
) -> Result<Vec<bool>> {
    let batch = crate::dataset::pad_batch(std::slice::from_ref(session), pipeline, catalog)?;
    let pred = params.predict_batch(&batch)?;
    Ok(pred[0].skips(threshold))
}
