//! Random skip sampling, optimizers, the three-stage schedule and the
//! gradient-check driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{
    association_on_tape, attention_on_tape, loc_conf_on_tape, match_priors, score_list_members,
    tape_deltas, tape_logits, AssocForm, AssocParams, LossBundle, LossWeights, MatchResult, IOU_MATCH,
};
use crate::net::{init_params, Model, NetConfig, Params, StateVars, StepOptions, TemporalMode};
use crate::postproc::{generate_priors, BBox, Kept, Prior, Profile};
use crate::synth::Sequence;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RssSample {
    /// 1-based start frame.
    pub sf: usize,
    pub sp: usize,
    /// 1-based frame indices `sf, sf+sp, ...`.
    pub indices: Vec<usize>,
}

/// `sp ~ U[1, v/seq_len]`, `sf ~ U[1, v - seq_len·sp + 1]`; with `fixed_sp`
/// the skip is forced instead of drawn.
pub fn rss_sample_with(
    v: usize,
    seq_len: usize,
    fixed_sp: Option<usize>,
    rng: &mut dyn RngCore,
) -> Result<RssSample> {
    if seq_len == 0 || v < seq_len {
        return Err(Error::Input(format!(
            "video of {} frames is shorter than seq_len {}",
            v, seq_len
        )));
    }
    let max_sp = v / seq_len;
    let sp = match fixed_sp {
        Some(sp) if sp >= 1 && seq_len * sp <= v => sp,
        Some(sp) => {
            return Err(Error::Input(format!(
                "skip {} does not fit {} frames into {}",
                sp, seq_len, v
            )))
        }
        None => rng.gen_range(1..=max_sp),
    };
    let sf = rng.gen_range(1..=v - seq_len * sp + 1);
    let indices = (0..seq_len).map(|i| sf + i * sp).collect();
    Ok(RssSample { sf, sp, indices })
}

pub fn rss_sample(v: usize, seq_len: usize, rng: &mut dyn RngCore) -> Result<RssSample> {
    rss_sample_with(v, seq_len, None, rng)
}

pub fn sgd_step(p: &mut Tensor, g: &Tensor, lr: f64) {
    p.add_scaled(g, -lr);
}

/// SGD with optional heavy-ball momentum (`v = μv + g; p -= lr·v`); the
/// first step equals plain SGD.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, p: &mut Tensor, g: &Tensor, lr: f64) {
        if self.momentum == 0.0 {
            sgd_step(p, g, lr);
            return;
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.dims()));
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = self.momentum * *vi + gi;
        }
        p.add_scaled(v, -lr);
    }
}

/// `acc = ρ·acc + (1-ρ)·g²; p -= lr·g / (sqrt(acc) + ε)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
    acc: BTreeMap<String, Tensor>,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp {
            rho: 0.9,
            eps: 1e-8,
            acc: BTreeMap::new(),
        }
    }
}

impl RmsProp {
    pub fn step(&mut self, name: &str, p: &mut Tensor, g: &Tensor, lr: f64) {
        let acc = self
            .acc
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.dims()));
        for ((pi, ai), &gi) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
            *ai = self.rho * *ai + (1.0 - self.rho) * gi * gi;
            *pi -= lr * gi / (ai.sqrt() + self.eps);
        }
    }

    pub fn accumulator(&self, name: &str) -> Option<&Tensor> {
        self.acc.get(name)
    }
}

/// Parameters updated by RMSProp; everything else trainable uses SGD.
pub fn uses_rmsprop(name: &str) -> bool {
    name.starts_with("lstm.")
}

/// Trainable set per stage: everything in stage 1, temporal units and
/// heads afterwards.
pub fn stage_trainable(stage: u8) -> fn(&str) -> bool {
    fn all(_: &str) -> bool {
        true
    }
    fn temporal(n: &str) -> bool {
        n.starts_with("lstm.") || n.starts_with("head.")
    }
    if stage == 1 {
        all
    } else {
        temporal
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub seq_len: usize,
    /// SGD learning rate.
    pub lr: f64,
    /// RMSProp learning rate; equals `lr` when unset.
    pub rms_lr: Option<f64>,
    pub epochs: usize,
    pub decay: f64,
    /// Epoch (0-based) from which the decay factor applies.
    pub decay_epoch: usize,
    /// Fixed skip instead of a random one.
    pub skip: Option<usize>,
    pub theta: f64,
    pub k: usize,
    pub dropout: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; off when unset.
    pub clip: Option<f64>,
    pub mode: TemporalMode,
    pub assoc_form: AssocForm,
    pub weights: LossWeights,
    pub profile: Profile,
}

pub const CONFIG_KEYS: &[&str] = &[
    "stage",
    "seq_len",
    "lr",
    "rms_lr",
    "epochs",
    "decay",
    "decay_epoch",
    "skip",
    "theta",
    "k",
    "dropout",
    "momentum",
    "clip",
    "mode",
    "assoc_form",
    "alpha",
    "beta",
    "gamma",
    "xi",
    "profile",
];

impl TrainConfig {
    pub fn for_stage(stage: u8) -> Result<Self> {
        let base = TrainConfig {
            stage,
            seq_len: 8,
            lr: 1e-4,
            rms_lr: None,
            epochs: 40,
            decay: 0.1,
            decay_epoch: 30,
            skip: None,
            theta: 0.1,
            k: 75,
            dropout: 0.1,
            momentum: 0.0,
            clip: None,
            mode: TemporalMode::AcLstm,
            assoc_form: AssocForm::RunningMean,
            weights: LossWeights::default(),
            profile: Profile::Vid,
        };
        match stage {
            1 => Ok(TrainConfig {
                lr: 1e-3,
                epochs: 10,
                decay_epoch: usize::MAX,
                dropout: 0.0,
                mode: TemporalMode::Static,
                ..base
            }),
            2 => Ok(base),
            3 => Ok(TrainConfig {
                lr: 1e-5,
                epochs: 10,
                decay_epoch: usize::MAX,
                skip: Some(1),
                ..base
            }),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", stage))),
        }
    }

    pub fn rms_lr(&self) -> f64 {
        self.rms_lr.unwrap_or(self.lr)
    }

    pub fn lr_factor(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.decay
        } else {
            1.0
        }
    }

    pub fn assoc(&self) -> AssocParams {
        AssocParams {
            k: self.k,
            theta: self.theta,
            profile: self.profile,
            form: self.assoc_form,
        }
    }

    /// Whether the association term is active (stage 3 with `xi > 0`).
    pub fn uses_association(&self) -> bool {
        self.stage == 3 && self.weights.xi > 0.0 && self.mode != TemporalMode::Static
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.rms_lr() >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} outside [0,1)", self.theta)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.stage > 1 && self.mode == TemporalMode::Static {
            return Err(Error::Config("stages 2 and 3 need a temporal mode".into()));
        }
        self.weights.validate()
    }

    /// Applies `key = value` pairs on top of this config.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            let bad = |e: String| Error::Config(format!("{} = {:?}: {}", k, v, e));
            let f = |v: &str| v.parse::<f64>().map_err(|e| bad(e.to_string()));
            let u = |v: &str| v.parse::<usize>().map_err(|e| bad(e.to_string()));
            match k.as_str() {
                "stage" => {
                    let s = u(v)?;
                    if s as u8 != self.stage {
                        return Err(bad(format!("conflicts with stage {}", self.stage)));
                    }
                }
                "seq_len" => self.seq_len = u(v)?,
                "lr" => self.lr = f(v)?,
                "rms_lr" => self.rms_lr = Some(f(v)?),
                "epochs" => self.epochs = u(v)?,
                "decay" => self.decay = f(v)?,
                "decay_epoch" => self.decay_epoch = u(v)?,
                "skip" => self.skip = Some(u(v)?),
                "theta" => self.theta = f(v)?,
                "k" => self.k = u(v)?,
                "dropout" => self.dropout = f(v)?,
                "momentum" => self.momentum = f(v)?,
                "clip" => self.clip = Some(f(v)?),
                "mode" => self.mode = TemporalMode::parse(v)?,
                "assoc_form" => self.assoc_form = AssocForm::parse(v)?,
                "alpha" => self.weights.alpha = f(v)?,
                "beta" => self.weights.beta = f(v)?,
                "gamma" => self.weights.gamma = f(v)?,
                "xi" => self.weights.xi = f(v)?,
                "profile" => self.profile = Profile::parse(v)?,
                _ => return Err(Error::Config(format!("unknown config key {:?}", k))),
            }
        }
        self.validate()
    }

    /// Resolved configuration as `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let opt = |o: Option<f64>| o.map_or("none".to_string(), |v| v.to_string());
        let _ = writeln!(s, "stage = {}", self.stage);
        let _ = writeln!(s, "seq_len = {}", self.seq_len);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "rms_lr = {}", self.rms_lr());
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "decay = {}", self.decay);
        if self.decay_epoch != usize::MAX {
            let _ = writeln!(s, "decay_epoch = {}", self.decay_epoch);
        }
        if let Some(sp) = self.skip {
            let _ = writeln!(s, "skip = {}", sp);
        }
        let _ = writeln!(s, "theta = {}", self.theta);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "clip = {}", opt(self.clip));
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let form = match self.assoc_form {
            AssocForm::RunningMean => "running",
            AssocForm::GlobalMean => "global",
        };
        let _ = writeln!(s, "assoc_form = {}", form);
        let w = &self.weights;
        let _ = writeln!(s, "alpha = {}\nbeta = {}\ngamma = {}\nxi = {}", w.alpha, w.beta, w.gamma, w.xi);
        let _ = writeln!(s, "profile = {}", self.profile.name());
        s
    }
}

/// Parses `key = value` lines; `#` starts a comment. Unknown keys are
/// rejected with their line number.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got {:?}", raw),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !CONFIG_KEYS.contains(&k) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("unknown key {:?}", k),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Ground truth of one frame in the form the losses consume.
#[derive(Clone, Debug)]
pub struct FrameTarget {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    pub matched: MatchResult,
}

impl FrameTarget {
    pub fn new(boxes: Vec<BBox>, classes: Vec<usize>, priors: &[Prior], num_classes: usize) -> Result<Self> {
        if let Some(c) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Input(format!("class {} outside 0..{}", c, num_classes)));
        }
        let matched = match_priors(&boxes, &classes, priors, IOU_MATCH)?;
        Ok(FrameTarget {
            boxes,
            classes,
            matched,
        })
    }

    pub fn from_sequence(seq: &Sequence, frame: usize, priors: &[Prior], num_classes: usize) -> Result<Self> {
        let rows = &seq.gt[frame];
        Self::new(
            rows.iter().map(|r| r.bbox).collect(),
            rows.iter().map(|r| r.class_id).collect(),
            priors,
            num_classes,
        )
    }
}

/// Frame input to the objective: an image, or unified features when the
/// backbone is frozen and shared across evaluations.
pub enum FrameInput<'a> {
    Image(&'a Tensor),
    Features(&'a [Tensor]),
}

/// Everything needed to evaluate the loss of one frame sequence.
pub struct Objective<'a> {
    pub cfg: &'a NetConfig,
    pub priors: &'a [Prior],
    pub weights: LossWeights,
    pub mode: TemporalMode,
    pub dropout: f64,
    /// Association settings; `None` leaves the term out.
    pub assoc: Option<AssocParams>,
}

/// Result of recording a sequence objective on a tape.
pub struct Recorded {
    pub loss: Var,
    pub bundle: LossBundle,
    /// Score-list members per frame (empty without association).
    pub members: Vec<Vec<Kept>>,
}

impl Objective<'_> {
    /// Mean over frames of `(α·loc + β·conf)/M + γ·att`, plus `ξ·L_asso`.
    /// With `members` given, the association selection is taken from it
    /// instead of the current predictions.
    pub fn record(
        &self,
        tape: &mut Tape,
        model: &Model,
        inputs: &[FrameInput],
        targets: &[FrameTarget],
        rng: &mut dyn RngCore,
        members: Option<&[Vec<Kept>]>,
    ) -> Result<Recorded> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::Input(format!(
                "{} frames, {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let n = inputs.len() as f64;
        let w = self.weights;
        let opts = StepOptions {
            mode: self.mode,
            dropout: self.dropout,
        };
        let mut state: Vec<StateVars> = model.zero_state(tape);
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut bundle = LossBundle::default();
        let mut confs = Vec::new();
        let mut chosen = Vec::new();
        for (input, target) in inputs.iter().zip(targets) {
            let f = match input {
                FrameInput::Image(img) => {
                    let x = tape.constant((*img).clone());
                    model.frame(tape, x, &state, opts, rng)?
                }
                FrameInput::Features(feats) => {
                    let vars: Vec<Var> = feats.iter().map(|t| tape.constant(t.clone())).collect();
                    model.frame_from_features(tape, &vars, &state, opts, rng)?
                }
            };
            state = f.state.clone();
            let m = target.matched.num_matched;
            let (lv, cv, lc) = loc_conf_on_tape(tape, self.cfg, &f.loc, &f.conf, &target.matched)?;
            if m > 0 {
                let inv = 1.0 / (m as f64 * n);
                terms.push((lv, w.alpha * inv));
                terms.push((cv, w.beta * inv));
                bundle.loc += lc.loc / m as f64 / n;
                bundle.conf += lc.conf / m as f64 / n;
            }
            if let Some(att) = &f.att {
                if w.gamma > 0.0 {
                    let av = attention_on_tape(tape, att, &target.boxes, self.cfg.input_size)?;
                    bundle.att += tape.value(av).data()[0] / n;
                    terms.push((av, w.gamma / n));
                }
            }
            if let Some(ap) = &self.assoc {
                if members.is_none() {
                    let d = tape_deltas(tape, &f.loc);
                    let l = tape_logits(tape, &f.conf, self.cfg.num_classes);
                    chosen.push(score_list_members(&d, &l, self.priors, self.cfg.num_classes, ap)?);
                }
                confs.push(f.conf.clone());
            }
        }
        if let Some(ap) = &self.assoc {
            let sel = members.map(<[_]>::to_vec).unwrap_or(chosen);
            let (av, value) = association_on_tape(tape, self.cfg, &confs, &sel, ap.form)?;
            bundle.asso = value;
            terms.push((av, w.xi));
            chosen = sel;
        }
        bundle.total = w.alpha * bundle.loc + w.beta * bundle.conf + w.gamma * bundle.att + w.xi * bundle.asso;
        let loss = if terms.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            tape.linear(&terms)?
        };
        Ok(Recorded {
            loss,
            bundle,
            members: chosen,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub bundle: LossBundle,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("epoch,step,L_loc,L_conf,L_att,L_asso,L_total\n");
    for r in rows {
        let b = &r.bundle;
        let _ = writeln!(
            s,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.epoch, r.step, b.loc, b.conf, b.att, b.asso, b.total
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub params: Params,
    pub log: Vec<LossRow>,
    /// Checksums of the frozen parameters before and after.
    pub frozen_checksum: (u64, u64),
}

/// Applies one update with the optimizer split.
struct Optimizers {
    sgd: Sgd,
    rms: RmsProp,
}

impl Optimizers {
    fn apply(
        &mut self,
        params: &mut Params,
        mut grads: BTreeMap<String, Tensor>,
        tc: &TrainConfig,
        epoch: usize,
    ) -> Result<()> {
        if let Some(c) = tc.clip {
            let norm = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > c {
                for g in grads.values_mut() {
                    *g = g.map(|v| v * c / norm);
                }
            }
        }
        let factor = tc.lr_factor(epoch);
        for (name, g) in &grads {
            if !g.all_finite() {
                return Err(Error::Contract(format!("non-finite gradient for {}", name)));
            }
            let p = params.get_mut(name)?;
            if uses_rmsprop(name) {
                self.rms.step(name, p, g, tc.rms_lr() * factor);
            } else {
                self.sgd.step(name, p, g, tc.lr * factor);
            }
        }
        Ok(())
    }
}

/// Runs one training stage. Stage 1 starts from `init` or a fresh
/// initialization; stages 2 and 3 require the previous checkpoint.
pub fn run_stage(
    data: &[Sequence],
    cfg: &NetConfig,
    init: Option<&Params>,
    tc: &TrainConfig,
    seed: u64,
) -> Result<StageOutput> {
    tc.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = match (tc.stage, init) {
        (_, Some(p)) => p.clone(),
        (1, None) => init_params(cfg, &mut rng)?,
        (s, None) => {
            return Err(Error::Precondition(format!(
                "stage {} needs the stage {} checkpoint",
                s,
                s - 1
            )))
        }
    };
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let trainable = stage_trainable(tc.stage);
    let frozen = |n: &str| !trainable(n);
    let before = params.checksum(frozen);
    let priors = generate_priors(cfg);
    let objective = Objective {
        cfg,
        priors: &priors,
        weights: tc.weights,
        mode: tc.mode,
        dropout: tc.dropout,
        assoc: tc.uses_association().then(|| tc.assoc()),
    };
    let mut opt = Optimizers {
        sgd: Sgd::new(tc.momentum),
        rms: RmsProp::default(),
    };
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        // Each step is a list of (video, 0-based frame indices).
        let mut plan: Vec<(usize, Vec<usize>)> = Vec::new();
        if tc.stage == 1 {
            for (v, s) in data.iter().enumerate() {
                for f in 0..s.len() {
                    plan.push((v, vec![f]));
                }
            }
            plan.shuffle(&mut rng);
        } else {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            for v in order {
                let s = rss_sample_with(data[v].len(), tc.seq_len, tc.skip, &mut rng)?;
                plan.push((v, s.indices.iter().map(|i| i - 1).collect()));
            }
        }
        for (v, frames) in plan {
            let seq = &data[v];
            let inputs: Vec<FrameInput> = frames.iter().map(|&f| FrameInput::Image(&seq.frames[f])).collect();
            let targets = frames
                .iter()
                .map(|&f| FrameTarget::from_sequence(seq, f, &priors, cfg.num_classes))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let model = Model::bind(&mut tape, cfg, &params, &trainable);
            let rec = objective.record(&mut tape, &model, &inputs, &targets, &mut rng, None)?;
            if !rec.bundle.total.is_finite() {
                return Err(Error::Contract(format!("non-finite loss at step {}", step + 1)));
            }
            let grads = tape.backward(rec.loss)?.into_named();
            opt.apply(&mut params, grads, tc, epoch)?;
            step += 1;
            log.push(LossRow {
                epoch: epoch + 1,
                step,
                bundle: rec.bundle,
            });
        }
    }
    let after = params.checksum(frozen);
    Ok(StageOutput {
        params,
        log,
        frozen_checksum: (before, after),
    })
}

/// Mean total loss per epoch.
pub fn epoch_means(log: &[LossRow]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in log {
        let e = sums.entry(r.epoch).or_default();
        e.0 += r.bundle.total;
        e.1 += 1;
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub frames: usize,
    pub mode: TemporalMode,
    pub dropout: f64,
    pub with_association: bool,
    pub seed: u64,
    pub h: f64,
    /// Half-width of the uniform offset added to every bias before checking;
    /// zero biases feeding a ReLU over an all-zero field sit exactly on the
    /// kink.
    pub bias_jitter: f64,
}

impl Default for GradCase {
    fn default() -> Self {
        GradCase {
            frames: 2,
            mode: TemporalMode::AcLstm,
            dropout: 0.0,
            with_association: false,
            seed: 0,
            h: 1e-5,
            bias_jitter: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub count: usize,
    pub max_rel_err: f64,
    /// Analytic and numeric values at the worst element.
    pub worst: (f64, f64),
}

/// Floor on the relative-error denominator so exact zeros compare by
/// absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Elements smaller than this fraction of the largest gradient anywhere are
/// judged against that fraction instead of their own magnitude. Rounding
/// in the loss limits central differences to roughly `1e-9` absolute.
pub const REL_ERR_SCALE: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, REL_ERR_FLOOR)
}

pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// A random toy network configuration small enough for exhaustive
/// finite differences.
pub fn toy_config() -> NetConfig {
    NetConfig {
        input_size: 24,
        stem_channels: [2, 3],
        level_channels: [4, 4, 4, 4, 4, 4],
        level_sizes: [6, 5, 4, 3, 2, 1],
        low_channels: 4,
        num_classes: 2,
        priors_per_cell: 1,
    }
}

/// Compares backward against central differences over every scalar of
/// every trainable tensor. Rows are sorted by error, largest first.
/// Dropout masks and the association selection are replayed identically
/// in every evaluation.
pub fn grad_check(
    cfg: &NetConfig,
    params: &Params,
    case: &GradCase,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Vec<GradRow>> {
    let names: Vec<String> = params.names().filter(|n| trainable(n)).cloned().collect();
    let total: usize = names.iter().map(|n| params.get(n).map_or(0, Tensor::len)).sum();
    if total > 5000 {
        return Err(Error::Precondition(format!(
            "{} trainable scalars; finite differences need <= 5000",
            total
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let mut params = params.clone();
    if case.bias_jitter > 0.0 {
        for name in params.names().cloned().collect::<Vec<_>>() {
            if name.ends_with(".bias") {
                for b in params.get_mut(&name)?.data_mut() {
                    *b += rng.gen_range(-case.bias_jitter..case.bias_jitter);
                }
            }
        }
    }
    let params = &params;
    let priors = generate_priors(cfg);
    let n = cfg.input_size;
    let images: Vec<Tensor> = (0..case.frames)
        .map(|_| Tensor::uniform(&[3, n, n], 0.5, &mut rng).map(|v| v + 0.5))
        .collect();
    let targets = (0..case.frames)
        .map(|_| {
            let boxes: Vec<BBox> = (0..2)
                .map(|_| {
                    let (cx, cy) = (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75));
                    BBox::from_center(cx, cy, rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5))
                })
                .collect();
            let classes = (0..2).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
            FrameTarget::new(boxes, classes, &priors, cfg.num_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    let frozen_backbone = !params
        .names()
        .any(|n| trainable(n) && (n.starts_with("backbone") || n.starts_with("unify")));
    // With the backbone frozen the graph under test starts at the unified
    // features, which are drawn directly so every gradient is well scaled.
    let feats: Vec<Vec<Tensor>> = if frozen_backbone {
        let pyr = crate::net::backbone_forward(&images[0], cfg, params)?;
        let shapes: Vec<Vec<usize>> = crate::net::unify_low_channels(&pyr, cfg, params)?
            .levels
            .iter()
            .map(|t| t.dims().to_vec())
            .collect();
        (0..case.frames)
            .map(|_| shapes.iter().map(|d| Tensor::uniform(d, 1.0, &mut rng)).collect())
            .collect()
    } else {
        Vec::new()
    };
    let objective = Objective {
        cfg,
        priors: &priors,
        weights: LossWeights::default(),
        mode: case.mode,
        dropout: case.dropout,
        assoc: case.with_association.then(|| AssocParams {
            theta: 0.3,
            ..AssocParams::default()
        }),
    };
    let mask_seed = case.seed ^ 0xd0;
    let eval = |p: &Params, want: bool, members: Option<&[Vec<Kept>]>| -> Result<(f64, Option<BTreeMap<String, Tensor>>, Vec<Vec<Kept>>)> {
        let mut tape = Tape::new();
        let model = Model::bind(&mut tape, cfg, p, &|n: &str| want && trainable(n));
        let inputs: Vec<FrameInput> = if frozen_backbone {
            feats.iter().map(|f| FrameInput::Features(f)).collect()
        } else {
            images.iter().map(FrameInput::Image).collect()
        };
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let rec = objective.record(&mut tape, &model, &inputs, &targets, &mut mask_rng, members)?;
        let value = tape.value(rec.loss).data()[0];
        let grads = if want {
            Some(tape.backward(rec.loss)?.into_named())
        } else {
            None
        };
        Ok((value, grads, rec.members))
    };
    let (_, grads, members) = eval(params, true, None)?;
    let grads = grads.unwrap_or_default();
    let members = objective.assoc.is_some().then_some(members);
    let scale = grads
        .values()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = REL_ERR_FLOOR.max(REL_ERR_SCALE * scale);
    let mut rows = Vec::with_capacity(names.len());
    let mut work = params.clone();
    for name in &names {
        let len = params.get(name)?.len();
        let zero = Tensor::zeros(params.get(name)?.dims());
        let g = grads.get(name).unwrap_or(&zero);
        let mut worst_err: f64 = 0.0;
        let mut worst = (0.0, 0.0);
        for i in 0..len {
            let orig = params.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + case.h;
            let up = eval(&work, false, members.as_deref())?.0;
            work.get_mut(name)?.data_mut()[i] = orig - case.h;
            let down = eval(&work, false, members.as_deref())?.0;
            work.get_mut(name)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * case.h);
            let e = rel_err_floor(g.data()[i], fd, floor);
            if e > worst_err {
                worst_err = e;
                worst = (g.data()[i], fd);
            }
        }
        rows.push(GradRow {
            name: name.clone(),
            count: len,
            max_rel_err: worst_err,
            worst,
        });
    }
    rows.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err).then(a.name.cmp(&b.name)));
    Ok(rows)
}

pub fn grad_report(rows: &[GradRow]) -> String {
    let mut s = String::from("parameter,count,max_rel_err,analytic,numeric\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.3e},{:.9e},{:.9e}",
            r.name, r.count, r.max_rel_err, r.worst.0, r.worst.1
        );
    }
    s
}
