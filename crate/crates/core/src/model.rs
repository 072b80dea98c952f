//! Recurrent captioning models: a maxout-LSTM decoder in three wirings.
//!
//! * `Fc`: a pooled image feature is projected and fed as the first input;
//!   afterwards the previous word's embedding is fed.
//! * `Att2in`: per-location features are attended over each step and the
//!   attention-weighted feature enters only the cell-candidate term.
//! * `Att2all`: the attended feature additionally enters all three gates
//!   and the logit projection.
//!
//! Forward passes record per-step caches so that
//! [`Model::backprop_through_time`] can run reverse-mode through the exact
//! realized rollout given externally supplied per-step logit gradients.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::adam::{GradBuffer, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{
    hadamard_fwd, matvec_bwd_acc, matvec_fwd, maxout2_bwd, maxout2_fwd, sigmoid_bwd, sigmoid_fwd,
    softmax_bwd, softmax_fwd, tanh_bwd, tanh_fwd, Tensor,
};
use crate::vocab::{TokenId, BOS, EOS};

const INIT_RANGE: f64 = 0.08;

/// Model wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Fc,
    Att2in,
    Att2all,
}

impl Arch {
    pub fn uses_attention(self) -> bool {
        !matches!(self, Arch::Fc)
    }

    pub fn tag(self) -> u8 {
        match self {
            Arch::Fc => 0,
            Arch::Att2in => 1,
            Arch::Att2all => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Arch> {
        match tag {
            0 => Ok(Arch::Fc),
            1 => Ok(Arch::Att2in),
            2 => Ok(Arch::Att2all),
            other => Err(Error::Format(format!("unknown model kind tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Fc => "fc",
            Arch::Att2in => "att2in",
            Arch::Att2all => "att2all",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "fc" => Ok(Arch::Fc),
            "att2in" => Ok(Arch::Att2in),
            "att2all" => Ok(Arch::Att2all),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Static shape information for one model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    /// Hidden state width; word and image embeddings share it.
    pub hidden_dim: usize,
    pub feat_dim: usize,
    /// Attention locations; ignored by `Fc`.
    pub n_locations: usize,
    /// Decode-length cap T.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab must include BOS/EOS/UNK (size >= 3)".into()));
        }
        if self.hidden_dim == 0 || self.feat_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("hidden_dim, feat_dim and max_len must be positive".into()));
        }
        if self.arch.uses_attention() && self.n_locations == 0 {
            return Err(Error::Config("attention models need at least one location".into()));
        }
        Ok(())
    }
}

/// Image-side input to one example: a pooled global vector and, for
/// attention models, per-location vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub global: Vec<f64>,
    pub spatial: Vec<Vec<f64>>,
}

impl Features {
    pub fn global_only(global: Vec<f64>) -> Features {
        Features { global, spatial: Vec::new() }
    }
}

/// Decoder state between steps. For attention models it carries the cached
/// per-location projections of the features and the attention weights from
/// the previous step.
#[derive(Debug, Clone)]
pub struct StepState {
    pub h: Tensor,
    pub c: Tensor,
    /// Rows `W_feat . I_i + b` precomputed per location.
    att_pre: Option<Tensor>,
    pub last_alpha: Option<Tensor>,
}

/// Input to one decoder step.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a> {
    /// Raw pooled feature; the model applies its image projection.
    /// Only valid for `Fc` at the first step.
    Image(&'a [f64]),
    Token(TokenId),
}

#[derive(Debug, Clone)]
pub(crate) enum TraceInput {
    Image,
    Token(TokenId),
}

#[derive(Debug, Clone)]
pub(crate) struct AttTrace {
    /// tanh rows, one per location: [n, d].
    pub e: Tensor,
    pub alpha: Tensor,
    pub i_t: Tensor,
}

/// Everything one backward step needs from the corresponding forward step.
#[derive(Debug, Clone)]
pub(crate) struct StepTrace {
    pub input: TraceInput,
    pub x: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Tensor,
    pub gate_i: Tensor,
    pub gate_f: Tensor,
    pub gate_o: Tensor,
    pub winners: Vec<u8>,
    pub g: Tensor,
    pub tanh_c: Tensor,
    pub h: Tensor,
    pub att: Option<AttTrace>,
}

/// How a rollout chooses and feeds tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RolloutMode {
    /// Feed and score the ground-truth sequence.
    Teacher,
    /// Teacher forcing, but each fed word is replaced by a posterior sample
    /// with the given probability (drawn per step).
    Scheduled(f64),
    /// Free-running: each word is sampled from the posterior.
    Sampled,
    /// Free-running argmax; ties break to the lowest token id.
    Greedy,
}

/// One recorded decode: the realized tokens plus everything later passes
/// need (posteriors for the estimators, hidden states for learned baselines,
/// forward caches for backprop).
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub mode: RolloutMode,
    pub tokens: Vec<TokenId>,
    /// log p(chosen token) per step; always <= 0.
    pub logprobs: Vec<f64>,
    pub posteriors: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    /// Hidden state h_t after each step.
    pub hiddens: Vec<Vec<f64>>,
    pub ended_with_eos: bool,
    pub(crate) traces: Vec<StepTrace>,
    pub(crate) features: Features,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// Decoder state as it was just before step `t` (zero-indexed), with the
    /// attention cache rebuilt from the model. Used to branch alternative
    /// continuations off a recorded prefix.
    pub fn state_before(&self, model: &Model, t: usize) -> StepState {
        let tr = &self.traces[t];
        let mut state = model.begin(&self.features).expect("features validated at rollout");
        state.h = tr.h_prev.clone();
        state.c = tr.c_prev.clone();
        state
    }

    /// The input that was fed at step `t` of this rollout.
    pub fn input_at(&self, t: usize) -> StepInput<'_> {
        match self.traces[t].input {
            TraceInput::Image => StepInput::Image(&self.features.global),
            TraceInput::Token(id) => StepInput::Token(id),
        }
    }
}

/// A configured architecture together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Parameter names and shapes for a config, in declaration order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let v = cfg.vocab_size;
    let f = cfg.feat_dim;
    let n = cfg.n_locations;
    let mut shapes: Vec<(&'static str, Vec<usize>)> = vec![
        ("embed", vec![v, d]),
        ("w_ix", vec![d, d]),
        ("w_ih", vec![d, d]),
        ("b_i", vec![d]),
        ("w_fx", vec![d, d]),
        ("w_fh", vec![d, d]),
        ("b_f", vec![d]),
        ("w_ox", vec![d, d]),
        ("w_oh", vec![d, d]),
        ("b_o", vec![d]),
        ("w_zx", vec![2 * d, d]),
        ("w_zh", vec![2 * d, d]),
        ("b_z", vec![2 * d]),
        ("w_s", vec![v, d]),
    ];
    match cfg.arch {
        Arch::Fc => shapes.push(("img_proj", vec![d, f])),
        Arch::Att2in | Arch::Att2all => {
            shapes.push(("w_zi", vec![2 * d, f]));
            shapes.push(("att_w_feat", vec![d, f]));
            shapes.push(("att_w_hid", vec![d, d]));
            shapes.push(("att_b", vec![d]));
            shapes.push(("att_v", vec![d]));
            shapes.push(("att_b_alpha", vec![n]));
            if cfg.arch == Arch::Att2all {
                shapes.push(("w_ii", vec![d, f]));
                shapes.push(("w_fi", vec![d, f]));
                shapes.push(("w_oi", vec![d, f]));
                shapes.push(("w_si", vec![v, f]));
            }
        }
    }
    shapes
}

fn is_bias(name: &str) -> bool {
    name.starts_with("b_") || name.starts_with("att_b")
}

impl Model {
    /// Fresh model: weights uniform in [-0.08, 0.08], biases zero,
    /// h_0 = c_0 = 0 at every rollout.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&cfg) {
            let n: usize = shape.iter().product();
            let data = if is_bias(name) {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect()
            };
            params.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(Model { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Model> {
        cfg.validate()?;
        for (name, shape) in param_shapes(&cfg) {
            if !params.contains(name) || params.param(name).shape() != shape.as_slice() {
                return Err(Error::Format(format!("parameter {name} missing or mis-shaped")));
            }
        }
        Ok(Model { cfg, params })
    }

    fn check_features(&self, features: &Features) -> Result<()> {
        match self.cfg.arch {
            Arch::Fc => {
                if features.global.len() != self.cfg.feat_dim {
                    return Err(Error::Usage(format!(
                        "global feature dim {} != configured {}",
                        features.global.len(),
                        self.cfg.feat_dim
                    )));
                }
            }
            Arch::Att2in | Arch::Att2all => {
                if features.spatial.len() != self.cfg.n_locations {
                    return Err(Error::Usage(format!(
                        "got {} locations, configured {}",
                        features.spatial.len(),
                        self.cfg.n_locations
                    )));
                }
                if features.spatial.iter().any(|v| v.len() != self.cfg.feat_dim) {
                    return Err(Error::Usage("spatial feature dim mismatch".into()));
                }
            }
        }
        Ok(())
    }

    /// Initial decoder state for an example: zero h/c plus, for attention
    /// models, the per-location feature projections.
    pub fn begin(&self, features: &Features) -> Result<StepState> {
        self.check_features(features)?;
        let d = self.cfg.hidden_dim;
        let att_pre = if self.cfg.arch.uses_attention() {
            let w_feat = self.params.param("att_w_feat");
            let b = self.params.param("att_b");
            let n = self.cfg.n_locations;
            let mut pre = Tensor::zeros(&[n, d]);
            for (i, loc) in features.spatial.iter().enumerate() {
                let row = matvec_fwd(w_feat, &Tensor::from_vec(&[self.cfg.feat_dim], loc.clone()));
                for j in 0..d {
                    pre.data_mut()[i * d + j] = row.data()[j] + b.data()[j];
                }
            }
            Some(pre)
        } else {
            None
        };
        Ok(StepState { h: Tensor::zeros(&[d]), c: Tensor::zeros(&[d]), att_pre, last_alpha: None })
    }

    /// What the first step consumes: the projected image for `Fc`,
    /// the BOS embedding for attention models.
    pub fn first_input<'a>(&self, features: &'a Features) -> StepInput<'a> {
        match self.cfg.arch {
            Arch::Fc => StepInput::Image(&features.global),
            _ => StepInput::Token(BOS),
        }
    }

    /// One decoder step; returns the logits and the next state.
    pub fn step(
        &self,
        state: &StepState,
        input: StepInput,
        features: &Features,
    ) -> Result<(Tensor, StepState)> {
        let (logits, state, _) = self.step_traced(state, input, features)?;
        Ok((logits, state))
    }

    pub(crate) fn step_traced(
        &self,
        state: &StepState,
        input: StepInput,
        features: &Features,
    ) -> Result<(Tensor, StepState, StepTrace)> {
        let p = &self.params;
        let d = self.cfg.hidden_dim;

        let (x, trace_input) = match input {
            StepInput::Image(raw) => {
                if self.cfg.arch != Arch::Fc {
                    return Err(Error::Usage("image input is only fed to fc models".into()));
                }
                if raw.len() != self.cfg.feat_dim {
                    return Err(Error::Usage("image feature dim mismatch".into()));
                }
                let feat = Tensor::from_vec(&[raw.len()], raw.to_vec());
                (matvec_fwd(p.param("img_proj"), &feat), TraceInput::Image)
            }
            StepInput::Token(id) => {
                if (id as usize) >= self.cfg.vocab_size {
                    return Err(Error::Usage(format!(
                        "token id {id} out of vocab (size {})",
                        self.cfg.vocab_size
                    )));
                }
                let row = &p.param("embed").data()[(id as usize) * d..(id as usize + 1) * d];
                (Tensor::from_vec(&[d], row.to_vec()), TraceInput::Token(id))
            }
        };

        // Attention: alpha over locations from h_{t-1}, then the weighted
        // feature fed into the selected couplings.
        let att = if self.cfg.arch.uses_attention() {
            let pre = state.att_pre.as_ref().expect("attention state prepared by begin()");
            let n = self.cfg.n_locations;
            let wh = matvec_fwd(p.param("att_w_hid"), &state.h);
            let mut e = Tensor::zeros(&[n, d]);
            let mut scores = Tensor::zeros(&[n]);
            let v = p.param("att_v");
            let b_alpha = p.param("att_b_alpha");
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..d {
                    let t = (pre.data()[i * d + j] + wh.data()[j]).tanh();
                    e.data_mut()[i * d + j] = t;
                    dot += v.data()[j] * t;
                }
                scores.data_mut()[i] = dot + b_alpha.data()[i];
            }
            let alpha = softmax_fwd(&scores);
            let mut i_t = Tensor::zeros(&[self.cfg.feat_dim]);
            for (i, loc) in features.spatial.iter().enumerate() {
                let a = alpha.data()[i];
                for (acc, &f) in i_t.data_mut().iter_mut().zip(loc.iter()) {
                    *acc += a * f;
                }
            }
            i_t.assert_finite("attention pooling");
            Some(AttTrace { e, alpha, i_t })
        } else {
            None
        };

        let gate_pre = |wx: &str, wh: &str, b: &str, wi: Option<&str>| -> Tensor {
            let mut pre = matvec_fwd(p.param(wx), &x);
            pre.axpy(1.0, &matvec_fwd(p.param(wh), &state.h));
            pre.axpy(1.0, p.param(b));
            if let (Some(wi), Some(att)) = (wi, att.as_ref()) {
                pre.axpy(1.0, &matvec_fwd(p.param(wi), &att.i_t));
            }
            pre
        };

        let all_gates = self.cfg.arch == Arch::Att2all;
        let gate_i = sigmoid_fwd(&gate_pre("w_ix", "w_ih", "b_i", all_gates.then_some("w_ii")));
        let gate_f = sigmoid_fwd(&gate_pre("w_fx", "w_fh", "b_f", all_gates.then_some("w_fi")));
        let gate_o = sigmoid_fwd(&gate_pre("w_ox", "w_oh", "b_o", all_gates.then_some("w_oi")));

        let cell_in = self.cfg.arch.uses_attention().then_some("w_zi");
        let z = gate_pre("w_zx", "w_zh", "b_z", cell_in);
        let (g, winners) = maxout2_fwd(&z);

        let mut c = hadamard_fwd(&gate_i, &g);
        c.axpy(1.0, &hadamard_fwd(&gate_f, &state.c));
        let tanh_c = tanh_fwd(&c);
        let h = hadamard_fwd(&gate_o, &tanh_c);

        let mut logits = matvec_fwd(p.param("w_s"), &h);
        if all_gates {
            logits.axpy(1.0, &matvec_fwd(p.param("w_si"), &att.as_ref().unwrap().i_t));
        }
        logits.assert_finite("logit projection");

        let trace = StepTrace {
            input: trace_input,
            x,
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            gate_i,
            gate_f,
            gate_o,
            winners,
            g,
            tanh_c,
            h: h.clone(),
            att: att.clone(),
        };
        let next = StepState {
            h,
            c,
            att_pre: state.att_pre.clone(),
            last_alpha: att.map(|a| a.alpha),
        };
        Ok((logits, next, trace))
    }

    /// Run one full decode under the given mode. `refs` is the ground-truth
    /// token sequence (ending in EOS) and is required for `Teacher` and
    /// `Scheduled`. The rollout stops at the first EOS or at `max_len`.
    pub fn rollout(
        &self,
        features: &Features,
        mode: RolloutMode,
        refs: Option<&[TokenId]>,
        rng: &mut ChaCha12Rng,
    ) -> Result<RolloutRecord> {
        let targets = match mode {
            RolloutMode::Teacher | RolloutMode::Scheduled(_) => {
                let r = refs.ok_or_else(|| {
                    Error::Usage("teacher and scheduled rollouts need a reference sequence".into())
                })?;
                if r.is_empty() {
                    return Err(Error::Usage("reference sequence is empty".into()));
                }
                if let Some(&bad) = r.iter().find(|&&t| (t as usize) >= self.cfg.vocab_size) {
                    return Err(Error::Usage(format!("reference token {bad} out of vocab")));
                }
                Some(r)
            }
            _ => None,
        };
        if let RolloutMode::Scheduled(prob) = mode {
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::Usage(format!("feedback probability {prob} outside [0,1]")));
            }
        }

        let steps = match targets {
            Some(r) => r.len().min(self.cfg.max_len),
            None => self.cfg.max_len,
        };

        let mut state = self.begin(features)?;
        let mut record = RolloutRecord {
            mode,
            tokens: Vec::with_capacity(steps),
            logprobs: Vec::with_capacity(steps),
            posteriors: Vec::with_capacity(steps),
            logits: Vec::with_capacity(steps),
            hiddens: Vec::with_capacity(steps),
            ended_with_eos: false,
            traces: Vec::with_capacity(steps),
            features: features.clone(),
        };

        for t in 0..steps {
            let input = if t == 0 {
                self.first_input(features)
            } else {
                let fed = match mode {
                    RolloutMode::Teacher => targets.unwrap()[t - 1],
                    RolloutMode::Scheduled(prob) => {
                        if rng.random::<f64>() < prob {
                            sample_categorical(&record.posteriors[t - 1], rng)
                        } else {
                            targets.unwrap()[t - 1]
                        }
                    }
                    RolloutMode::Sampled | RolloutMode::Greedy => record.tokens[t - 1],
                };
                StepInput::Token(fed)
            };
            let (logits, next, trace) = self.step_traced(&state, input, features)?;
            let posterior = softmax_fwd(&logits);
            let chosen = match mode {
                RolloutMode::Teacher | RolloutMode::Scheduled(_) => targets.unwrap()[t],
                RolloutMode::Sampled => sample_categorical(posterior.data(), rng),
                RolloutMode::Greedy => argmax_lowest(posterior.data()),
            };
            record.tokens.push(chosen);
            record.logprobs.push(posterior.data()[chosen as usize].ln());
            record.posteriors.push(posterior.into_data());
            record.logits.push(logits.into_data());
            record.hiddens.push(next.h.data().to_vec());
            record.traces.push(trace);
            state = next;
            if chosen == EOS {
                record.ended_with_eos = true;
                break;
            }
        }
        Ok(record)
    }

    /// Greedily complete a sequence from an arbitrary state, starting with
    /// the given input and stopping at EOS or after `budget` tokens.
    pub fn greedy_continue(
        &self,
        features: &Features,
        state: &StepState,
        input: StepInput,
        budget: usize,
    ) -> Result<Vec<TokenId>> {
        let mut state = state.clone();
        let mut input_token: Option<TokenId> = None;
        let mut out = Vec::new();
        for t in 0..budget {
            let inp = if t == 0 { input } else { StepInput::Token(input_token.unwrap()) };
            let (logits, next) = self.step(&state, inp, features)?;
            let posterior = softmax_fwd(&logits);
            let chosen = argmax_lowest(posterior.data());
            out.push(chosen);
            if chosen == EOS {
                break;
            }
            input_token = Some(chosen);
            state = next;
        }
        Ok(out)
    }

    /// Reverse-mode through a recorded rollout, accumulating parameter
    /// gradients into `out`. `logit_grads` supplies dL/ds_t for exactly the
    /// rollout's realized steps.
    pub fn backprop_into(
        &self,
        record: &RolloutRecord,
        logit_grads: &[Vec<f64>],
        out: &mut GradBuffer,
    ) -> Result<()> {
        let len = record.len();
        if logit_grads.len() != len {
            return Err(Error::Usage(format!(
                "got {} logit-gradient rows for a {len}-step rollout",
                logit_grads.len()
            )));
        }
        let p = &self.params;
        let d = self.cfg.hidden_dim;
        let v = self.cfg.vocab_size;
        let f = self.cfg.feat_dim;
        let att_arch = self.cfg.arch.uses_attention();
        let all_gates = self.cfg.arch == Arch::Att2all;

        let mut dh_next = Tensor::zeros(&[d]);
        let mut dc_next = Tensor::zeros(&[d]);

        for t in (0..len).rev() {
            let tr = &record.traces[t];
            if logit_grads[t].len() != v {
                return Err(Error::Usage(format!(
                    "logit gradient row {t} has length {}, vocab is {v}",
                    logit_grads[t].len()
                )));
            }
            let ds = Tensor::from_vec(&[v], logit_grads[t].clone());

            // s = w_s . h (+ w_si . i_t)
            let mut dh = dh_next;
            matvec_bwd_acc(
                p.param("w_s"),
                &tr.h,
                &ds,
                out.entry("w_s", &[v, d]),
                &mut dh,
            );
            let mut d_it = att_arch.then(|| Tensor::zeros(&[f]));
            if all_gates {
                let att = tr.att.as_ref().unwrap();
                matvec_bwd_acc(
                    p.param("w_si"),
                    &att.i_t,
                    &ds,
                    out.entry("w_si", &[v, f]),
                    d_it.as_mut().unwrap(),
                );
            }

            // h = o * tanh(c)
            let d_o = hadamard_fwd(&dh, &tr.tanh_c);
            let d_tanh_c = hadamard_fwd(&dh, &tr.gate_o);
            let mut dc = dc_next;
            dc.axpy(1.0, &tanh_bwd(&tr.tanh_c, &d_tanh_c));

            // c = i*g + f*c_prev
            let d_i = hadamard_fwd(&dc, &tr.g);
            let d_g = hadamard_fwd(&dc, &tr.gate_i);
            let d_f = hadamard_fwd(&dc, &tr.c_prev);
            let dc_prev = hadamard_fwd(&dc, &tr.gate_f);

            let dz = maxout2_bwd(&tr.winners, &d_g, &[2 * d]);
            let dpre_i = sigmoid_bwd(&tr.gate_i, &d_i);
            let dpre_f = sigmoid_bwd(&tr.gate_f, &d_f);
            let dpre_o = sigmoid_bwd(&tr.gate_o, &d_o);

            let mut dx = Tensor::zeros(&[d]);
            let mut dh_prev = Tensor::zeros(&[d]);

            {
                let mut linear = |wx: &str,
                                  wh: &str,
                                  b: &str,
                                  wi: Option<&str>,
                                  dpre: &Tensor,
                                  dx: &mut Tensor,
                                  dh_prev: &mut Tensor,
                                  d_it: &mut Option<Tensor>| {
                    let rows = dpre.shape()[0];
                    matvec_bwd_acc(p.param(wx), &tr.x, dpre, out.entry(wx, &[rows, d]), dx);
                    matvec_bwd_acc(p.param(wh), &tr.h_prev, dpre, out.entry(wh, &[rows, d]), dh_prev);
                    out.entry(b, &[rows]).axpy(1.0, dpre);
                    if let Some(wi) = wi {
                        let att = tr.att.as_ref().unwrap();
                        matvec_bwd_acc(
                            p.param(wi),
                            &att.i_t,
                            dpre,
                            out.entry(wi, &[rows, f]),
                            d_it.as_mut().unwrap(),
                        );
                    }
                };
                linear("w_ix", "w_ih", "b_i", all_gates.then_some("w_ii"), &dpre_i, &mut dx, &mut dh_prev, &mut d_it);
                linear("w_fx", "w_fh", "b_f", all_gates.then_some("w_fi"), &dpre_f, &mut dx, &mut dh_prev, &mut d_it);
                linear("w_ox", "w_oh", "b_o", all_gates.then_some("w_oi"), &dpre_o, &mut dx, &mut dh_prev, &mut d_it);
                linear("w_zx", "w_zh", "b_z", att_arch.then_some("w_zi"), &dz, &mut dx, &mut dh_prev, &mut d_it);
            }

            // Attention backward: i_t = sum_i alpha_i I_i,
            // alpha = softmax(v . e + b_alpha), e_i = tanh(pre_i + W_hid h_prev).
            if let (Some(att), Some(d_it)) = (tr.att.as_ref(), d_it.as_ref()) {
                let n = self.cfg.n_locations;
                let mut d_alpha = Tensor::zeros(&[n]);
                for (i, loc) in record.features.spatial.iter().enumerate() {
                    let mut dot = 0.0;
                    for (a, b) in loc.iter().zip(d_it.data()) {
                        dot += a * b;
                    }
                    d_alpha.data_mut()[i] = dot;
                }
                let d_scores = softmax_bwd(&att.alpha, &d_alpha);
                out.entry("att_b_alpha", &[n]).axpy(1.0, &d_scores);

                let att_v = p.param("att_v");
                let d_att_v = out.entry("att_v", &[d]);
                let mut d_wh_total = Tensor::zeros(&[d]);
                let mut dpre_rows = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    let s = d_scores.data()[i];
                    let e_row = &att.e.data()[i * d..(i + 1) * d];
                    for j in 0..d {
                        let e = e_row[j];
                        d_att_v.data_mut()[j] += s * e;
                        // through tanh
                        let dpre = s * att_v.data()[j] * (1.0 - e * e);
                        dpre_rows.data_mut()[i * d + j] = dpre;
                        d_wh_total.data_mut()[j] += dpre;
                    }
                }
                // pre_i = att_w_feat . I_i + att_b (per location, shared weights)
                {
                    let d_w_feat = out.entry("att_w_feat", &[d, f]);
                    for (i, loc) in record.features.spatial.iter().enumerate() {
                        for j in 0..d {
                            let g = dpre_rows.data()[i * d + j];
                            if g == 0.0 {
                                continue;
                            }
                            let row = &mut d_w_feat.data_mut()[j * f..(j + 1) * f];
                            for (acc, &feat) in row.iter_mut().zip(loc.iter()) {
                                *acc += g * feat;
                            }
                        }
                    }
                }
                {
                    let d_b = out.entry("att_b", &[d]);
                    for i in 0..n {
                        for j in 0..d {
                            d_b.data_mut()[j] += dpre_rows.data()[i * d + j];
                        }
                    }
                }
                // shared W_hid . h_prev term
                matvec_bwd_acc(
                    p.param("att_w_hid"),
                    &tr.h_prev,
                    &d_wh_total,
                    out.entry("att_w_hid", &[d, d]),
                    &mut dh_prev,
                );
            }

            // input embedding / image projection
            match tr.input {
                TraceInput::Token(id) => {
                    let de = out.entry("embed", &[v, d]);
                    let row = &mut de.data_mut()[(id as usize) * d..(id as usize + 1) * d];
                    for (acc, g) in row.iter_mut().zip(dx.data()) {
                        *acc += g;
                    }
                }
                TraceInput::Image => {
                    let feat =
                        Tensor::from_vec(&[record.features.global.len()], record.features.global.clone());
                    let mut d_feat = Tensor::zeros(&[feat.numel()]);
                    matvec_bwd_acc(
                        p.param("img_proj"),
                        &feat,
                        &dx,
                        out.entry("img_proj", &[d, f]),
                        &mut d_feat,
                    );
                }
            }

            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        Ok(())
    }

    /// As [`Model::backprop_into`], accumulating into the model's own
    /// gradient buffers.
    pub fn backprop_through_time(
        &mut self,
        record: &RolloutRecord,
        logit_grads: &[Vec<f64>],
    ) -> Result<()> {
        let mut buf = GradBuffer::new();
        self.backprop_into(record, logit_grads, &mut buf)?;
        self.params.add_gradients(&buf);
        Ok(())
    }
}

/// Sample an index from a probability vector by CDF walk.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha12Rng) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    (probs.len() - 1) as TokenId
}

/// Argmax with ties broken to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best as TokenId
}
