use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeaturePipeline;
use crate::scalar::Scalar;
use crate::tensor_graph::{Activation, BatchNormState, Graph, Matrix, Var};

/// Architecture knobs that distinguish ensemble members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    /// `relu` or `elu` in the head.
    pub activation: Activation,
    pub hidden_size: usize,
    pub use_batchnorm: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            activation: Activation::Relu,
            hidden_size: 96,
            use_batchnorm: false,
        }
    }
}

impl VariantConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.activation, Activation::Relu | Activation::Elu) {
            return Err(Error::Config(format!(
                "head activation must be relu or elu, got {:?}",
                self.activation
            )));
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be positive".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let act = match self.activation {
            Activation::Elu => "elu",
            _ => "relu",
        };
        let bn = if self.use_batchnorm { "bn" } else { "nobn" };
        format!("{act}-h{}-{bn}", self.hidden_size)
    }
}

/// The six ensemble members drawn from activation × hidden {64, 96} ×
/// batchnorm. ELU already centres activations, so the two ELU-with-batchnorm
/// cells are the ones left out.
pub fn ensemble_variants() -> [VariantConfig; 6] {
    let v = |activation, hidden_size, use_batchnorm| VariantConfig {
        activation,
        hidden_size,
        use_batchnorm,
    };
    [
        v(Activation::Relu, 64, false),
        v(Activation::Relu, 96, false),
        v(Activation::Relu, 64, true),
        v(Activation::Relu, 96, true),
        v(Activation::Elu, 64, false),
        v(Activation::Elu, 96, false),
    ]
}

/// Width of the learned context-type embedding that replaces the index slot.
pub const CONTEXT_EMB_DIM: usize = 8;

/// Every shape the parameters depend on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantConfig,
    pub d_trip: usize,
    pub d_doub: usize,
    /// Column of the context index inside a triplet.
    pub context_col: usize,
    pub context_vocab: usize,
    pub context_dim: usize,
}

impl ModelConfig {
    pub fn for_pipeline(pipeline: &FeaturePipeline, variant: VariantConfig) -> Result<Self> {
        variant.validate()?;
        if !pipeline.is_fitted() {
            return Err(Error::State("model config needs a fitted pipeline".into()));
        }
        let layout = pipeline.layout();
        Ok(Self {
            variant,
            d_trip: layout.d_trip(),
            d_doub: layout.d_doub(),
            context_col: layout.triplet_context_col(),
            context_vocab: pipeline.context_vocab_len(),
            context_dim: CONTEXT_EMB_DIM,
        })
    }

    pub fn hidden(&self) -> usize {
        self.variant.hidden_size
    }

    /// GRU layer-1 input: triplet without the index slot, plus its embedding.
    pub fn gru_input(&self) -> usize {
        self.d_trip - 1 + self.context_dim
    }

    pub fn d_enriched(&self) -> usize {
        self.d_doub + 4 * self.hidden()
    }
}

/// `x · w + b` with `w: [in × out]`, `b: [1 × out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Matrix::zeros(input, output),
            b: Matrix::zeros(1, output),
        }
    }

    fn xavier(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: xavier(input, output, rng),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> DenseVars {
        DenseVars {
            w: g.param(self.w.clone()),
            b: g.param(self.b.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

/// One GRU layer. Input maps are `[input × hidden]`, recurrent maps
/// `[hidden × hidden]`, biases `[1 × hidden]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams<T> {
    pub w_ux: Matrix<T>,
    pub w_us: Matrix<T>,
    pub b_u: Matrix<T>,
    pub w_rx: Matrix<T>,
    pub w_rs: Matrix<T>,
    pub b_r: Matrix<T>,
    pub w_cx: Matrix<T>,
    pub w_cs: Matrix<T>,
    pub b_c: Matrix<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_ux: Var,
    pub w_us: Var,
    pub b_u: Var,
    pub w_rx: Var,
    pub w_rs: Var,
    pub b_r: Var,
    pub w_cx: Var,
    pub w_cs: Var,
    pub b_c: Var,
}

impl<T: Scalar> GruParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ux: Matrix::zeros(input, hidden),
            w_us: Matrix::zeros(hidden, hidden),
            b_u: Matrix::zeros(1, hidden),
            w_rx: Matrix::zeros(input, hidden),
            w_rs: Matrix::zeros(hidden, hidden),
            b_r: Matrix::zeros(1, hidden),
            w_cx: Matrix::zeros(input, hidden),
            w_cs: Matrix::zeros(hidden, hidden),
            b_c: Matrix::zeros(1, hidden),
        }
    }

    fn xavier(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_ux: xavier(input, hidden, rng),
            w_us: xavier(hidden, hidden, rng),
            w_rx: xavier(input, hidden, rng),
            w_rs: xavier(hidden, hidden, rng),
            w_cx: xavier(input, hidden, rng),
            w_cs: xavier(hidden, hidden, rng),
            ..Self::zeros(input, hidden)
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_us.rows()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> GruVars {
        GruVars {
            w_ux: g.param(self.w_ux.clone()),
            w_us: g.param(self.w_us.clone()),
            b_u: g.param(self.b_u.clone()),
            w_rx: g.param(self.w_rx.clone()),
            w_rs: g.param(self.w_rs.clone()),
            b_r: g.param(self.b_r.clone()),
            w_cx: g.param(self.w_cx.clone()),
            w_cs: g.param(self.w_cs.clone()),
            b_c: g.param(self.b_c.clone()),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        for (n, m) in [
            ("w_ux", &self.w_ux),
            ("w_us", &self.w_us),
            ("b_u", &self.b_u),
            ("w_rx", &self.w_rx),
            ("w_rs", &self.w_rs),
            ("b_r", &self.b_r),
            ("w_cx", &self.w_cx),
            ("w_cs", &self.w_cs),
            ("b_c", &self.b_c),
        ] {
            out.push((format!("{prefix}.{n}"), m));
        }
    }

    fn named_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix<T>>) {
        out.extend([
            &mut self.w_ux,
            &mut self.w_us,
            &mut self.b_u,
            &mut self.w_rx,
            &mut self.w_rs,
            &mut self.b_r,
            &mut self.w_cx,
            &mut self.w_cs,
            &mut self.b_c,
        ]);
    }

    fn vars(v: &GruVars, out: &mut Vec<Var>) {
        out.extend([
            v.w_ux, v.w_us, v.b_u, v.w_rx, v.w_rs, v.b_r, v.w_cx, v.w_cs, v.b_c,
        ]);
    }
}

fn xavier<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized")
}

/// All trainable parameters plus batchnorm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub context_emb: Matrix<T>,
    pub gru1: GruParams<T>,
    pub gru2: GruParams<T>,
    /// The projection `d_doub → 2·hidden` inside the enrichment ReLU.
    pub enrich_proj: Dense<T>,
    pub dense1: Dense<T>,
    pub dense2: Dense<T>,
    pub out: Dense<T>,
    pub bn1: Option<BatchNormState<T>>,
    pub bn2: Option<BatchNormState<T>>,
}

/// Graph handles for every trainable parameter, in [`ModelParams::named_params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub context_emb: Var,
    pub gru1: GruVars,
    pub gru2: GruVars,
    pub enrich_proj: DenseVars,
    pub dense1: DenseVars,
    pub bn1: Option<(Var, Var)>,
    pub dense2: DenseVars,
    pub bn2: Option<(Var, Var)>,
    pub out: DenseVars,
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.context_emb];
        GruParams::<f64>::vars(&self.gru1, &mut v);
        GruParams::<f64>::vars(&self.gru2, &mut v);
        v.extend([
            self.enrich_proj.w,
            self.enrich_proj.b,
            self.dense1.w,
            self.dense1.b,
        ]);
        v.extend(self.bn1.iter().flat_map(|&(a, b)| [a, b]));
        v.extend([self.dense2.w, self.dense2.b]);
        v.extend(self.bn2.iter().flat_map(|&(a, b)| [a, b]));
        v.extend([self.out.w, self.out.b]);
        v
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Everything zero except batchnorm gamma, which starts at 1.
    pub fn zeros(config: ModelConfig) -> Self {
        let h = config.hidden();
        let bn = || {
            config
                .variant
                .use_batchnorm
                .then(|| BatchNormState::new(2 * h))
        };
        Self {
            context_emb: Matrix::zeros(config.context_vocab, config.context_dim),
            gru1: GruParams::zeros(config.gru_input(), h),
            gru2: GruParams::zeros(h, h),
            enrich_proj: Dense::zeros(config.d_doub, 2 * h),
            dense1: Dense::zeros(config.d_enriched(), 2 * h),
            dense2: Dense::zeros(2 * h, 2 * h),
            out: Dense::zeros(2 * h, crate::dataset::NUM_TASKS),
            bn1: bn(),
            bn2: bn(),
            config,
        }
    }

    /// Xavier-uniform weights, zero biases. Deterministic given `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden();
        let mut p = Self::zeros(config);
        let c = &p.config;
        p.context_emb = xavier(c.context_vocab, c.context_dim, &mut rng);
        p.gru1 = GruParams::xavier(c.gru_input(), h, &mut rng);
        p.gru2 = GruParams::xavier(h, h, &mut rng);
        p.enrich_proj = Dense::xavier(c.d_doub, 2 * h, &mut rng);
        p.dense1 = Dense::xavier(c.d_enriched(), 2 * h, &mut rng);
        p.dense2 = Dense::xavier(2 * h, 2 * h, &mut rng);
        p.out = Dense::xavier(2 * h, crate::dataset::NUM_TASKS, &mut rng);
        p
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            context_emb: g.param(self.context_emb.clone()),
            gru1: self.gru1.bind(g),
            gru2: self.gru2.bind(g),
            enrich_proj: self.enrich_proj.bind(g),
            dense1: self.dense1.bind(g),
            bn1: self.bn1.as_ref().map(|s| s.bind(g)),
            dense2: self.dense2.bind(g),
            bn2: self.bn2.as_ref().map(|s| s.bind(g)),
            out: self.out.bind(g),
        }
    }

    /// Trainable parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![("context_emb".to_string(), &self.context_emb)];
        self.gru1.named("gru1", &mut out);
        self.gru2.named("gru2", &mut out);
        out.push(("enrich.proj.w".into(), &self.enrich_proj.w));
        out.push(("enrich.proj.b".into(), &self.enrich_proj.b));
        out.push(("head.dense1.w".into(), &self.dense1.w));
        out.push(("head.dense1.b".into(), &self.dense1.b));
        if let Some(bn) = &self.bn1 {
            out.push(("head.bn1.gamma".into(), &bn.gamma));
            out.push(("head.bn1.beta".into(), &bn.beta));
        }
        out.push(("head.dense2.w".into(), &self.dense2.w));
        out.push(("head.dense2.b".into(), &self.dense2.b));
        if let Some(bn) = &self.bn2 {
            out.push(("head.bn2.gamma".into(), &bn.gamma));
            out.push(("head.bn2.beta".into(), &bn.beta));
        }
        out.push(("head.out.w".into(), &self.out.w));
        out.push(("head.out.b".into(), &self.out.b));
        out
    }

    /// Mutable view in [`Self::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.context_emb];
        self.gru1.named_mut(&mut out);
        self.gru2.named_mut(&mut out);
        out.extend([
            &mut self.enrich_proj.w,
            &mut self.enrich_proj.b,
            &mut self.dense1.w,
            &mut self.dense1.b,
        ]);
        if let Some(bn) = &mut self.bn1 {
            out.extend([&mut bn.gamma, &mut bn.beta]);
        }
        out.extend([&mut self.dense2.w, &mut self.dense2.b]);
        if let Some(bn) = &mut self.bn2 {
            out.extend([&mut bn.gamma, &mut bn.beta]);
        }
        out.extend([&mut self.out.w, &mut self.out.b]);
        out
    }

    /// Non-trainable batchnorm running statistics with stable names.
    pub fn named_buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for (name, bn) in [("head.bn1", &self.bn1), ("head.bn2", &self.bn2)] {
            if let Some(bn) = bn {
                out.push((format!("{name}.running_mean"), &bn.running_mean));
                out.push((format!("{name}.running_var"), &bn.running_var));
            }
        }
        out
    }

    /// Mutable view in [`Self::named_buffers`] order.
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for bn in [&mut self.bn1, &mut self.bn2].into_iter().flatten() {
            out.push(&mut bn.running_mean);
            out.push(&mut bn.running_var);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named_params()
            .iter()
            .map(|(_, m)| m.data().len())
            .sum()
    }

    /// Same architecture, different precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let d = |x: &Dense<T>| Dense {
            w: x.w.cast(),
            b: x.b.cast(),
        };
        let gru = |x: &GruParams<T>| GruParams {
            w_ux: x.w_ux.cast(),
            w_us: x.w_us.cast(),
            b_u: x.b_u.cast(),
            w_rx: x.w_rx.cast(),
            w_rs: x.w_rs.cast(),
            b_r: x.b_r.cast(),
            w_cx: x.w_cx.cast(),
            w_cs: x.w_cs.cast(),
            b_c: x.b_c.cast(),
        };
        let bn = |x: &Option<BatchNormState<T>>| {
            x.as_ref().map(|s| BatchNormState {
                running_mean: s.running_mean.iter().map(|v| U::of(v.as_f64())).collect(),
                running_var: s.running_var.iter().map(|v| U::of(v.as_f64())).collect(),
                momentum: U::of(s.momentum.as_f64()),
                epsilon: U::of(s.epsilon.as_f64()),
                gamma: s.gamma.cast(),
                beta: s.beta.cast(),
            })
        };
        ModelParams {
            config: self.config.clone(),
            context_emb: self.context_emb.cast(),
            gru1: gru(&self.gru1),
            gru2: gru(&self.gru2),
            enrich_proj: d(&self.enrich_proj),
            dense1: d(&self.dense1),
            dense2: d(&self.dense2),
            out: d(&self.out),
            bn1: bn(&self.bn1),
            bn2: bn(&self.bn2),
        }
    }
}
