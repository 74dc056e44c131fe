//! The toy detector: a six-level convolutional pyramid, the shared
//! low/high temporal units built from attentional ConvLSTM cells, and the
//! per-level multibox heads.

mod cell;
mod params;

pub use cell::{ac_lstm_step, AcLstmWeights, CellOutput};
pub use params::Params;

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_LEVELS: usize = 6;
/// Levels `0..LOW_LEVELS` are served by the low unit, the rest by the high unit.
pub const LOW_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Widths of the two stem convolutions ahead of level 0.
    pub stem_channels: [usize; 2],
    pub level_channels: [usize; NUM_LEVELS],
    pub level_sizes: [usize; NUM_LEVELS],
    /// Unified width of levels 0..3 feeding the low unit.
    pub low_channels: usize,
    pub num_classes: usize,
    pub priors_per_cell: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: 96,
            stem_channels: [16, 16],
            level_channels: [32, 64, 32, 16, 16, 16],
            level_sizes: [24, 12, 6, 3, 2, 1],
            low_channels: 64,
            num_classes: 4,
            priors_per_cell: 2,
        }
    }
}

impl NetConfig {
    /// Narrower widths with the same six-level geometry, sized so the full
    /// three-stage schedule trains in minutes on one CPU core.
    pub fn compact() -> Self {
        NetConfig {
            stem_channels: [8, 16],
            level_channels: [16, 32, 16, 16, 16, 16],
            low_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % 4 != 0 || self.level_sizes[0] * 4 != self.input_size {
            return Err(Error::Config(format!(
                "level 0 side {} must be input side {} / 4",
                self.level_sizes[0], self.input_size
            )));
        }
        if self.level_sizes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "level sizes {:?} must strictly decrease",
                self.level_sizes
            )));
        }
        let high = self.level_channels[LOW_LEVELS];
        if self.level_channels[LOW_LEVELS..].iter().any(|&c| c != high) {
            return Err(Error::Config(format!(
                "high levels must share one width, got {:?}",
                &self.level_channels[LOW_LEVELS..]
            )));
        }
        if self.num_classes == 0 || self.priors_per_cell == 0 || self.low_channels < 4 || high < 4
        {
            return Err(Error::Config("class, prior and unit widths must be positive".into()));
        }
        Ok(())
    }

    pub fn high_channels(&self) -> usize {
        self.level_channels[LOW_LEVELS]
    }

    pub fn unit_channels(&self, unit: Unit) -> usize {
        match unit {
            Unit::Low => self.low_channels,
            Unit::High => self.high_channels(),
        }
    }

    /// Channel count of the map a level's head reads.
    pub fn hidden_channels(&self, level: usize) -> usize {
        self.unit_channels(Unit::of(level))
    }

    pub fn num_priors(&self) -> usize {
        self.level_sizes
            .iter()
            .map(|s| self.priors_per_cell * s * s)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Low,
    High,
}

impl Unit {
    pub fn of(level: usize) -> Unit {
        if level < LOW_LEVELS {
            Unit::Low
        } else {
            Unit::High
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Unit::Low => "low",
            Unit::High => "high",
        }
    }
}

/// How the pyramid is carried through time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    /// Heads read the unified pyramid directly (the single-frame detector).
    Static,
    /// ConvLSTM units without the attention gate.
    ConvLstm,
    /// Attentional ConvLSTM units.
    AcLstm,
}

impl TemporalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(TemporalMode::Static),
            "convlstm" => Ok(TemporalMode::ConvLstm),
            "aclstm" => Ok(TemporalMode::AcLstm),
            _ => Err(Error::Config(format!("unknown temporal mode {:?}", s))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TemporalMode::Static => "static",
            TemporalMode::ConvLstm => "convlstm",
            TemporalMode::AcLstm => "aclstm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelState {
    pub h: Tensor,
    pub s: Tensor,
}

/// Per-level hidden state and memory. Levels `0..3` belong to the low unit,
/// `3..6` to the high unit; each level keeps its own resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalState {
    pub levels: Vec<LevelState>,
}

impl TemporalState {
    pub fn zeros(cfg: &NetConfig) -> Self {
        let levels = (0..NUM_LEVELS)
            .map(|l| {
                let dims = [cfg.hidden_channels(l), cfg.level_sizes[l], cfg.level_sizes[l]];
                LevelState {
                    h: Tensor::zeros(&dims),
                    s: Tensor::zeros(&dims),
                }
            })
            .collect();
        TemporalState { levels }
    }
}

/// One `[1,S,S]` map per level, values in (0,1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub maps: Vec<Tensor>,
}

/// Raw per-level head outputs: `loc[l]` is `[P*4, S, S]`, `conf[l]` is
/// `[P*(K+1), S, S]`, channel `p*4+j` / `p*(K+1)+c` for prior `p` of a cell.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub loc: Vec<Tensor>,
    pub conf: Vec<Tensor>,
}

impl HeadOutput {
    /// Per-prior deltas in prior order (level, row, column, prior).
    pub fn deltas(&self, cfg: &NetConfig) -> Vec<[f64; 4]> {
        let mut out = Vec::with_capacity(cfg.num_priors());
        for (l, t) in self.loc.iter().enumerate() {
            let s = cfg.level_sizes[l];
            let plane = s * s;
            for cell in 0..plane {
                for p in 0..cfg.priors_per_cell {
                    let mut d = [0.0; 4];
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj = t.data()[(p * 4 + j) * plane + cell];
                    }
                    out.push(d);
                }
            }
        }
        out
    }

    /// Per-prior class logits (index 0 is background) in prior order.
    pub fn logits(&self, cfg: &NetConfig) -> Vec<Vec<f64>> {
        let k1 = cfg.num_classes + 1;
        let mut out = Vec::with_capacity(cfg.num_priors());
        for (l, t) in self.conf.iter().enumerate() {
            let s = cfg.level_sizes[l];
            let plane = s * s;
            for cell in 0..plane {
                for p in 0..cfg.priors_per_cell {
                    out.push((0..k1).map(|c| t.data()[(p * k1 + c) * plane + cell]).collect());
                }
            }
        }
        out
    }
}

/// Scatters per-prior values back to per-level head layout (inverse of
/// [`HeadOutput::deltas`]/[`HeadOutput::logits`]).
pub(crate) fn scatter_priors(cfg: &NetConfig, per_prior: &[Vec<f64>], width: usize) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(NUM_LEVELS);
    let mut idx = 0;
    for &s in &cfg.level_sizes {
        let plane = s * s;
        let mut t = Tensor::zeros(&[cfg.priors_per_cell * width, s, s]);
        for cell in 0..plane {
            for p in 0..cfg.priors_per_cell {
                for j in 0..width {
                    t.data_mut()[(p * width + j) * plane + cell] = per_prior[idx][j];
                }
                idx += 1;
            }
        }
        out.push(t);
    }
    out
}

fn conv_shape(cout: usize, cin: usize, k: usize) -> [usize; 4] {
    [cout, cin, k, k]
}

/// Every parameter name with its dims, in creation order.
pub fn param_shapes(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    let conv = |v: &mut Vec<(String, Vec<usize>)>, name: String, cout, cin, k| {
        v.push((format!("{}.weight", name), conv_shape(cout, cin, k).to_vec()));
        v.push((format!("{}.bias", name), vec![cout]));
    };
    let mut cin = 3;
    let widths = cfg.stem_channels.iter().chain(cfg.level_channels.iter());
    for (i, &c) in widths.enumerate() {
        conv(&mut v, format!("backbone.{}", i), c, cin, 3);
        cin = c;
    }
    for l in 0..LOW_LEVELS {
        conv(&mut v, format!("unify.{}", l), cfg.low_channels, cfg.level_channels[l], 1);
    }
    for unit in [Unit::Low, Unit::High] {
        let cu = cfg.unit_channels(unit);
        let p = format!("lstm.{}", unit.name());
        conv(&mut v, format!("{}.att1", p), cu / 2, 2 * cu, 3);
        conv(&mut v, format!("{}.att2", p), cu / 4, cu / 2, 3);
        conv(&mut v, format!("{}.att3", p), 1, cu / 4, 3);
        for g in ["i", "f", "o", "c"] {
            conv(&mut v, format!("{}.gate_{}", p, g), cu, 2 * cu, 3);
        }
    }
    let k1 = cfg.num_classes + 1;
    for l in 0..NUM_LEVELS {
        let cu = cfg.hidden_channels(l);
        conv(&mut v, format!("head.{}.loc", l), cfg.priors_per_cell * 4, cu, 3);
        conv(&mut v, format!("head.{}.conf", l), cfg.priors_per_cell * k1, cu, 3);
    }
    v
}

/// Random initialization: uniform with variance `2/fan_in` for relu layers
/// and `1/fan_in` elsewhere, zero biases except the forget gate's (1.0).
pub fn init_params(cfg: &NetConfig, rng: &mut dyn RngCore) -> Result<Params> {
    cfg.validate()?;
    let mut params = Params::new();
    for (name, dims) in param_shapes(cfg) {
        let t = if name.ends_with(".bias") {
            let v = if name.contains("gate_f") { 1.0 } else { 0.0 };
            Tensor::full(&dims, v)
        } else {
            let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
            let relu = name.starts_with("backbone") || name.contains("att1") || name.contains("att2");
            let var = if relu { 2.0 / fan_in } else { 1.0 / fan_in };
            let scale = (3.0 * var).sqrt();
            let mut t = Tensor::zeros(&dims);
            for x in t.data_mut() {
                *x = rng.gen_range(-scale..scale);
            }
            t
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// File holding the network geometry inside a checkpoint directory.
pub const NET_FILE: &str = "net.json";

/// Writes the parameters and the geometry they belong to.
pub fn save_checkpoint(dir: impl AsRef<std::path::Path>, cfg: &NetConfig, params: &Params) -> Result<()> {
    let dir = dir.as_ref();
    params.save(dir)?;
    std::fs::write(dir.join(NET_FILE), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// Reads a checkpoint and checks every parameter shape against its geometry.
pub fn load_checkpoint(dir: impl AsRef<std::path::Path>) -> Result<(NetConfig, Params)> {
    let dir = dir.as_ref();
    let path = dir.join(NET_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Precondition(format!("{}: {}", path.display(), e)))?;
    let cfg: NetConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    let params = Params::load(dir)?;
    for (name, dims) in param_shapes(&cfg) {
        let got = params.get(&name)?.dims();
        if got != dims.as_slice() {
            return Err(Error::shape("load_checkpoint", format!("{}: {:?} vs {:?}", name, got, dims)));
        }
    }
    Ok((cfg, params))
}

/// Runtime knobs of one forward step.
#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub mode: TemporalMode,
    /// Inverted-dropout rate on the attention-weighted input; 0 disables.
    pub dropout: f64,
}

impl StepOptions {
    pub fn inference(mode: TemporalMode) -> Self {
        StepOptions { mode, dropout: 0.0 }
    }
}

/// Tape handles for one level's recurrent state.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub s: Var,
}

/// Tape handles produced by one frame.
#[derive(Clone, Debug)]
pub struct FrameVars {
    pub loc: Vec<Var>,
    pub conf: Vec<Var>,
    /// Present in `AcLstm` mode only.
    pub att: Option<Vec<Var>>,
    pub state: Vec<StateVars>,
}

/// Parameters bound onto a tape, trainable ones as named params and the rest
/// as constants.
pub struct Model<'c> {
    cfg: &'c NetConfig,
    vars: BTreeMap<String, Var>,
}

impl<'c> Model<'c> {
    pub fn bind(
        tape: &mut Tape,
        cfg: &'c NetConfig,
        params: &Params,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(name.clone(), t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Model { cfg, vars }
    }

    pub fn cfg(&self) -> &NetConfig {
        self.cfg
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {}", name)))
    }

    fn conv(&self, tape: &mut Tape, name: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{}.weight", name))?;
        let b = self.var(&format!("{}.bias", name))?;
        tape.conv2d(x, w, b, 1, pad)
    }

    pub fn backbone(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let n = self.cfg.input_size;
        let dims = tape.value(image).dims();
        if dims != [3, n, n] {
            return Err(Error::shape(
                "backbone_forward",
                format!("expected image [3,{},{}], got {:?}", n, n, dims),
            ));
        }
        let mut x = image;
        // Stem: conv at full and half resolution, each followed by a 2x
        // bilinear reduction (equivalent to 2x2 average pooling).
        let mut side = n;
        for i in 0..2 {
            let c = self.conv(tape, &format!("backbone.{}", i), x, 1)?;
            let r = tape.relu(c);
            side /= 2;
            x = tape.resize(r, side, side)?;
        }
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for l in 0..NUM_LEVELS {
            let s = self.cfg.level_sizes[l];
            if tape.value(x).dims()[1] != s {
                x = tape.resize(x, s, s)?;
            }
            let c = self.conv(tape, &format!("backbone.{}", l + 2), x, 1)?;
            x = tape.relu(c);
            levels.push(x);
        }
        Ok(levels)
    }

    /// Projects levels 0..3 to the low unit width with 1x1 convolutions;
    /// high levels already share one width and pass through.
    pub fn unify(&self, tape: &mut Tape, pyramid: &[Var]) -> Result<Vec<Var>> {
        pyramid
            .iter()
            .enumerate()
            .map(|(l, &x)| {
                if l < LOW_LEVELS {
                    self.conv(tape, &format!("unify.{}", l), x, 0)
                } else {
                    Ok(x)
                }
            })
            .collect()
    }

    /// Binds one unit's cell weights.
    pub fn cell_vars(&self, unit: Unit) -> Result<cell::CellVars> {
        cell::CellVars::from_model(self, unit)
    }

    /// Both temporal units over all six levels; returns hidden maps, new
    /// state and (in `AcLstm` mode) the attention maps.
    pub fn hltu(
        &self,
        tape: &mut Tape,
        feats: &[Var],
        state: &[StateVars],
        opts: StepOptions,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<Var>, Vec<StateVars>, Option<Vec<Var>>)> {
        if feats.len() != NUM_LEVELS || state.len() != NUM_LEVELS {
            return Err(Error::shape(
                "hltu_forward",
                format!("{} levels and {} states", feats.len(), state.len()),
            ));
        }
        let low = self.cell_vars(Unit::Low)?;
        let high = self.cell_vars(Unit::High)?;
        let attention = opts.mode == TemporalMode::AcLstm;
        let mut hidden = Vec::with_capacity(NUM_LEVELS);
        let mut new_state = Vec::with_capacity(NUM_LEVELS);
        let mut att = Vec::with_capacity(NUM_LEVELS);
        for l in 0..NUM_LEVELS {
            let w = if l < LOW_LEVELS { &low } else { &high };
            let xs = tape.value(feats[l]).dims().to_vec();
            let hs = tape.value(state[l].h).dims().to_vec();
            if xs != hs {
                return Err(Error::shape(
                    "hltu_forward",
                    format!("level {} features {:?} vs state {:?}", l, xs, hs),
                ));
            }
            let (h, s, a) =
                cell::step_on_tape(tape, w, feats[l], state[l], opts.dropout, rng, attention)?;
            hidden.push(h);
            new_state.push(StateVars { h, s });
            att.push(a);
        }
        Ok((hidden, new_state, attention.then_some(att)))
    }

    pub fn heads(&self, tape: &mut Tape, hidden: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut loc = Vec::with_capacity(NUM_LEVELS);
        let mut conf = Vec::with_capacity(NUM_LEVELS);
        for (l, &h) in hidden.iter().enumerate() {
            loc.push(self.conv(tape, &format!("head.{}.loc", l), h, 1)?);
            conf.push(self.conv(tape, &format!("head.{}.conf", l), h, 1)?);
        }
        Ok((loc, conf))
    }

    /// Puts a zero state for every level on the tape.
    pub fn zero_state(&self, tape: &mut Tape) -> Vec<StateVars> {
        TemporalState::zeros(self.cfg)
            .levels
            .into_iter()
            .map(|ls| StateVars {
                h: tape.constant(ls.h),
                s: tape.constant(ls.s),
            })
            .collect()
    }

    /// One full frame: backbone, unification, temporal units, heads.
    /// In `Static` mode the state is passed through untouched.
    pub fn frame(
        &self,
        tape: &mut Tape,
        image: Var,
        state: &[StateVars],
        opts: StepOptions,
        rng: &mut dyn RngCore,
    ) -> Result<FrameVars> {
        let pyramid = self.backbone(tape, image)?;
        let feats = self.unify(tape, &pyramid)?;
        self.frame_from_features(tape, &feats, state, opts, rng)
    }

    /// [`Model::frame`] from already unified features.
    pub fn frame_from_features(
        &self,
        tape: &mut Tape,
        feats: &[Var],
        state: &[StateVars],
        opts: StepOptions,
        rng: &mut dyn RngCore,
    ) -> Result<FrameVars> {
        let feats = feats.to_vec();
        let (hidden, state, att) = match opts.mode {
            TemporalMode::Static => (feats, state.to_vec(), None),
            _ => self.hltu(tape, &feats, state, opts, rng)?,
        };
        let (loc, conf) = self.heads(tape, &hidden)?;
        Ok(FrameVars {
            loc,
            conf,
            att,
            state,
        })
    }
}

fn frozen(_: &str) -> bool {
    false
}

pub fn backbone_forward(image: &Tensor, cfg: &NetConfig, params: &Params) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let model = Model::bind(&mut tape, cfg, params, &frozen);
    let x = tape.constant(image.clone());
    let levels = model.backbone(&mut tape, x)?;
    Ok(FeaturePyramid {
        levels: levels.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

pub fn unify_low_channels(
    pyramid: &FeaturePyramid,
    cfg: &NetConfig,
    params: &Params,
) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let model = Model::bind(&mut tape, cfg, params, &frozen);
    let vars: Vec<Var> = pyramid.levels.iter().map(|t| tape.constant(t.clone())).collect();
    let out = model.unify(&mut tape, &vars)?;
    Ok(FeaturePyramid {
        levels: out.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Runs both temporal units over a (unified) pyramid.
pub fn hltu_forward(
    pyramid: &FeaturePyramid,
    state: &TemporalState,
    cfg: &NetConfig,
    params: &Params,
    opts: StepOptions,
    rng: &mut dyn RngCore,
) -> Result<(Vec<Tensor>, TemporalState, AttentionMaps)> {
    let mut tape = Tape::new();
    let model = Model::bind(&mut tape, cfg, params, &frozen);
    let feats: Vec<Var> = pyramid.levels.iter().map(|t| tape.constant(t.clone())).collect();
    let sv: Vec<StateVars> = state
        .levels
        .iter()
        .map(|ls| StateVars {
            h: tape.constant(ls.h.clone()),
            s: tape.constant(ls.s.clone()),
        })
        .collect();
    let (hidden, ns, att) = model.hltu(&mut tape, &feats, &sv, opts, rng)?;
    let hidden = hidden.iter().map(|&v| tape.value(v).clone()).collect();
    let new_state = TemporalState {
        levels: ns
            .iter()
            .map(|s| LevelState {
                h: tape.value(s.h).clone(),
                s: tape.value(s.s).clone(),
            })
            .collect(),
    };
    let maps = match att {
        Some(a) => a.iter().map(|&v| tape.value(v).clone()).collect(),
        None => (0..NUM_LEVELS)
            .map(|l| Tensor::full(&[1, cfg.level_sizes[l], cfg.level_sizes[l]], 1.0))
            .collect(),
    };
    Ok((hidden, new_state, AttentionMaps { maps }))
}

pub fn head_forward(hidden: &[Tensor], cfg: &NetConfig, params: &Params) -> Result<HeadOutput> {
    let mut tape = Tape::new();
    let model = Model::bind(&mut tape, cfg, params, &frozen);
    let vars: Vec<Var> = hidden.iter().map(|t| tape.constant(t.clone())).collect();
    let (loc, conf) = model.heads(&mut tape, &vars)?;
    Ok(HeadOutput {
        loc: loc.iter().map(|&v| tape.value(v).clone()).collect(),
        conf: conf.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Output of one inference step.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub head: HeadOutput,
    /// Attention maps; all-ones maps outside `AcLstm` mode.
    pub att: AttentionMaps,
}

/// Stateful frame-by-frame runner for inference.
pub struct Detector {
    cfg: NetConfig,
    params: Params,
    mode: TemporalMode,
    state: TemporalState,
}

impl Detector {
    pub fn new(cfg: NetConfig, params: Params, mode: TemporalMode) -> Result<Self> {
        cfg.validate()?;
        let state = TemporalState::zeros(&cfg);
        Ok(Detector {
            cfg,
            params,
            mode,
            state,
        })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn mode(&self) -> TemporalMode {
        self.mode
    }

    pub fn reset(&mut self) {
        self.state = TemporalState::zeros(&self.cfg);
    }

    pub fn state(&self) -> &TemporalState {
        &self.state
    }

    pub fn step(&mut self, image: &Tensor) -> Result<FrameOutput> {
        let mut tape = Tape::new();
        let model = Model::bind(&mut tape, &self.cfg, &self.params, &frozen);
        let img = tape.constant(image.clone());
        let sv: Vec<StateVars> = self
            .state
            .levels
            .iter()
            .map(|ls| StateVars {
                h: tape.constant(ls.h.clone()),
                s: tape.constant(ls.s.clone()),
            })
            .collect();
        // Dropout is off at inference, so no randomness is drawn.
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let fv = model.frame(&mut tape, img, &sv, StepOptions::inference(self.mode), &mut rng)?;
        if self.mode != TemporalMode::Static {
            self.state = TemporalState {
                levels: fv
                    .state
                    .iter()
                    .map(|s| LevelState {
                        h: tape.value(s.h).clone(),
                        s: tape.value(s.s).clone(),
                    })
                    .collect(),
            };
        }
        let head = HeadOutput {
            loc: fv.loc.iter().map(|&v| tape.value(v).clone()).collect(),
            conf: fv.conf.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        let maps = match &fv.att {
            Some(a) => a.iter().map(|&v| tape.value(v).clone()).collect(),
            None => (0..NUM_LEVELS)
                .map(|l| Tensor::full(&[1, self.cfg.level_sizes[l], self.cfg.level_sizes[l]], 1.0))
                .collect(),
        };
        Ok(FrameOutput {
            head,
            att: AttentionMaps { maps },
        })
    }
}
