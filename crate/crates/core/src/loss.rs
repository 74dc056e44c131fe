//! Training objective: multibox localization/confidence terms with hard
//! negative mining, the attention-map BCE and the self-supervised
//! score-list association term.

use crate::error::{Error, Result};
use crate::net::{scatter_priors, NetConfig};
use crate::postproc::{decode, encode, iou, softmax, BBox, Detection, Kept, Prior, Profile};
use crate::tensor::{bilinear_resize, Tape, Tensor, Var};

pub const IOU_MATCH: f64 = 0.5;
pub const NEG_POS_RATIO: usize = 3;
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// 0 = background, `c + 1` = class `c`.
    pub labels: Vec<usize>,
    /// Encoded offsets for matched priors, zeros elsewhere.
    pub targets: Vec<[f64; 4]>,
    pub matched_gt: Vec<Option<usize>>,
    pub num_matched: usize,
}

/// Each prior takes its best GT when the IoU reaches `iou_match`; each GT
/// then claims its best prior regardless of threshold, skipping priors
/// already claimed by an earlier GT. Ties go to the lowest index.
pub fn match_priors(
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    priors: &[Prior],
    iou_match: f64,
) -> Result<MatchResult> {
    if gt_boxes.len() != gt_classes.len() {
        return Err(Error::shape(
            "match_priors",
            format!("{} boxes, {} classes", gt_boxes.len(), gt_classes.len()),
        ));
    }
    let pboxes: Vec<BBox> = priors.iter().map(Prior::bbox).collect();
    let mut matched_gt = vec![None; priors.len()];
    for (p, pb) in pboxes.iter().enumerate() {
        let mut best = (0.0, None);
        for (g, gb) in gt_boxes.iter().enumerate() {
            let o = iou(pb, gb);
            if o > best.0 {
                best = (o, Some(g));
            }
        }
        if best.0 >= iou_match {
            matched_gt[p] = best.1;
        }
    }
    let mut claimed = vec![false; priors.len()];
    for (g, gb) in gt_boxes.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, None);
        for (p, pb) in pboxes.iter().enumerate() {
            let o = iou(pb, gb);
            if !claimed[p] && o > best.0 {
                best = (o, Some(p));
            }
        }
        if let (_, Some(p)) = best {
            matched_gt[p] = Some(g);
            claimed[p] = true;
        }
    }
    let mut labels = vec![0; priors.len()];
    let mut targets = vec![[0.0; 4]; priors.len()];
    let mut num_matched = 0;
    for p in 0..priors.len() {
        if let Some(g) = matched_gt[p] {
            labels[p] = gt_classes[g] + 1;
            targets[p] = encode(&priors[p], &gt_boxes[g]);
            num_matched += 1;
        }
    }
    Ok(MatchResult {
        labels,
        targets,
        matched_gt,
        num_matched,
    })
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Summed localization and confidence losses with their gradients with
/// respect to every prior's deltas and logits.
#[derive(Clone, Debug)]
pub struct LocConf {
    pub loc: f64,
    pub conf: f64,
    pub grad_deltas: Vec<Vec<f64>>,
    pub grad_logits: Vec<Vec<f64>>,
}

/// Smooth-L1 over matched priors plus softmax cross-entropy over matched
/// priors and the `neg_pos_ratio * M` negatives with the largest background
/// loss. Both are sums; normalization by `M` happens in [`total_loss`].
pub fn loc_conf_loss(
    deltas: &[[f64; 4]],
    logits: &[Vec<f64>],
    m: &MatchResult,
    neg_pos_ratio: usize,
) -> Result<LocConf> {
    let n = m.labels.len();
    if deltas.len() != n || logits.len() != n {
        return Err(Error::shape(
            "loc_conf_loss",
            format!("{} priors, {} deltas, {} logits", n, deltas.len(), logits.len()),
        ));
    }
    let k1 = logits.first().map_or(1, Vec::len);
    let mut out = LocConf {
        loc: 0.0,
        conf: 0.0,
        grad_deltas: vec![vec![0.0; 4]; n],
        grad_logits: vec![vec![0.0; k1]; n],
    };
    if m.num_matched == 0 {
        return Ok(out);
    }
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    let add_ce = |p: usize, label: usize, out: &mut LocConf| {
        out.conf -= probs[p][label].max(f64::MIN_POSITIVE).ln();
        for c in 0..k1 {
            out.grad_logits[p][c] = probs[p][c] - if c == label { 1.0 } else { 0.0 };
        }
    };
    let mut negatives = Vec::new();
    for p in 0..n {
        if m.labels[p] > 0 {
            for j in 0..4 {
                let (v, g) = smooth_l1(deltas[p][j] - m.targets[p][j]);
                out.loc += v;
                out.grad_deltas[p][j] = g;
            }
            add_ce(p, m.labels[p], &mut out);
        } else {
            negatives.push(p);
        }
    }
    let bg_loss: Vec<f64> = negatives.iter().map(|&p| -probs[p][0].ln()).collect();
    let mut order: Vec<usize> = (0..negatives.len()).collect();
    order.sort_by(|&a, &b| bg_loss[b].total_cmp(&bg_loss[a]).then(a.cmp(&b)));
    for &i in order.iter().take(neg_pos_ratio * m.num_matched) {
        add_ce(negatives[i], 0, &mut out);
    }
    Ok(out)
}

/// Ground-truth attention mask at `size x size` pixel centers: 1 inside any
/// box (edges included), 0 elsewhere.
pub fn attention_target(gt_boxes: &[BBox], size: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, size, size]);
    for y in 0..size {
        let v = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            if gt_boxes.iter().any(|b| b.contains_point(u, v)) {
                t.data_mut()[y * size + x] = 1.0;
            }
        }
    }
    t
}

/// Mean BCE of a prediction against a {0,1} target and its gradient.
fn mean_bce(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.dims());
    let mut total = 0.0;
    for (i, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        if p > BCE_EPS && p < 1.0 - BCE_EPS {
            grad.data_mut()[i] = (pc - y) / (pc * (1.0 - pc)) / n;
        }
    }
    (total / n, grad)
}

/// Sum over levels of the mean BCE between each attention map, upsampled
/// to the input resolution, and the GT mask.
pub fn attention_loss(maps: &[Tensor], gt_boxes: &[BBox], input_size: usize) -> Result<f64> {
    let target = attention_target(gt_boxes, input_size);
    let mut total = 0.0;
    for m in maps {
        let up = bilinear_resize(m, input_size, input_size)?;
        total += mean_bce(&up, &target).0;
    }
    Ok(total)
}

/// Per-class sums of the top `k` post-NMS scores strictly above `theta`.
pub fn score_list(dets: &[Detection], k: usize, theta: f64, num_classes: usize) -> Vec<f64> {
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    for d in dets {
        if d.score > theta && d.class_id < num_classes {
            per[d.class_id].push(d.score);
        }
    }
    per.into_iter()
        .map(|mut s| {
            s.sort_by(|a, b| b.total_cmp(a));
            s.iter().take(k).sum()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssocForm {
    /// Deviation of each frame from the mean of the frames before it.
    RunningMean,
    /// Deviation of each frame from the whole-sequence mean.
    GlobalMean,
}

impl AssocForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "running" => Ok(AssocForm::RunningMean),
            "global" => Ok(AssocForm::GlobalMean),
            _ => Err(Error::Config(format!("unknown association form {:?}", s))),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Association loss over a sequence of score lists and its (sub)gradient
/// with respect to every list entry.
pub fn association_loss_grad(lists: &[Vec<f64>], form: AssocForm) -> (f64, Vec<Vec<f64>>) {
    let t_len = lists.len();
    let width = lists.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; width]; t_len];
    if t_len < 2 {
        return (0.0, grad);
    }
    let inv = 1.0 / t_len as f64;
    let mut total = 0.0;
    match form {
        AssocForm::RunningMean => {
            // Incremental means keep identical lists at exactly zero loss.
            let mut mean = lists[0].clone();
            for t in 1..t_len {
                for c in 0..width {
                    let d = lists[t][c] - mean[c];
                    total += d.abs();
                    let s = sign(d) * inv;
                    grad[t][c] += s;
                    for g in grad.iter_mut().take(t) {
                        g[c] -= s / t as f64;
                    }
                }
                for c in 0..width {
                    mean[c] += (lists[t][c] - mean[c]) / (t + 1) as f64;
                }
            }
        }
        AssocForm::GlobalMean => {
            for c in 0..width {
                let mut mean = 0.0;
                for (t, l) in lists.iter().enumerate() {
                    mean += (l[c] - mean) / (t + 1) as f64;
                }
                let signs: Vec<f64> = lists.iter().map(|l| sign(l[c] - mean)).collect();
                let sbar = signs.iter().sum::<f64>() * inv;
                for t in 0..t_len {
                    total += (lists[t][c] - mean).abs();
                    grad[t][c] = (signs[t] - sbar) * inv;
                }
            }
        }
    }
    (total * inv, grad)
}

pub fn association_loss(lists: &[Vec<f64>], form: AssocForm) -> f64 {
    association_loss_grad(lists, form).0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            xi: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("xi", self.xi),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {} = {} must be >= 0", n, v)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub loc: f64,
    pub conf: f64,
    pub att: f64,
    pub asso: f64,
    pub total: f64,
}

/// `(α·loc + β·conf)/M + γ·att + ξ·asso`, the first part taken as 0 when
/// nothing matched.
pub fn total_loss(
    loc: f64,
    conf: f64,
    att: f64,
    asso: f64,
    num_matched: usize,
    w: &LossWeights,
) -> Result<LossBundle> {
    w.validate()?;
    let det = if num_matched == 0 {
        0.0
    } else {
        (w.alpha * loc + w.beta * conf) / num_matched as f64
    };
    let total = det + w.gamma * att + w.xi * asso;
    if !total.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {}", total)));
    }
    Ok(LossBundle {
        loc,
        conf,
        att,
        asso,
        total,
    })
}

fn per_prior(tape: &Tape, vars: &[Var], width: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for &v in vars {
        let t = tape.value(v);
        let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
        let plane = h * w;
        let ppc = c / width;
        for cell in 0..plane {
            for p in 0..ppc {
                out.push((0..width).map(|j| t.data()[(p * width + j) * plane + cell]).collect());
            }
        }
    }
    out
}

/// Reads per-prior deltas off the loc head vars.
pub fn tape_deltas(tape: &Tape, loc: &[Var]) -> Vec<[f64; 4]> {
    per_prior(tape, loc, 4)
        .into_iter()
        .map(|v| [v[0], v[1], v[2], v[3]])
        .collect()
}

/// Reads per-prior logits off the conf head vars.
pub fn tape_logits(tape: &Tape, conf: &[Var], num_classes: usize) -> Vec<Vec<f64>> {
    per_prior(tape, conf, num_classes + 1)
}

/// Records the summed localization and confidence losses on the tape.
/// Returns `(loc, conf)` nodes.
pub fn loc_conf_on_tape(
    tape: &mut Tape,
    cfg: &NetConfig,
    loc: &[Var],
    conf: &[Var],
    m: &MatchResult,
) -> Result<(Var, Var, LocConf)> {
    let deltas = tape_deltas(tape, loc);
    let logits = tape_logits(tape, conf, cfg.num_classes);
    let lc = loc_conf_loss(&deltas, &logits, m, NEG_POS_RATIO)?;
    let gl = scatter_priors(cfg, &lc.grad_deltas, 4);
    let gc = scatter_priors(cfg, &lc.grad_logits, cfg.num_classes + 1);
    let lv = tape.fused(lc.loc, loc.iter().copied().zip(gl).collect())?;
    let cv = tape.fused(lc.conf, conf.iter().copied().zip(gc).collect())?;
    Ok((lv, cv, lc))
}

/// Records the attention loss on the tape through differentiable upsampling.
pub fn attention_on_tape(
    tape: &mut Tape,
    att: &[Var],
    gt_boxes: &[BBox],
    input_size: usize,
) -> Result<Var> {
    let target = attention_target(gt_boxes, input_size);
    let mut terms = Vec::with_capacity(att.len());
    for &a in att {
        let up = tape.resize(a, input_size, input_size)?;
        let (v, g) = mean_bce(tape.value(up), &target);
        terms.push((tape.fused(v, vec![(up, g)])?, 1.0));
    }
    tape.linear(&terms)
}

/// Settings for the score lists feeding the association term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssocParams {
    pub k: usize,
    pub theta: f64,
    pub profile: Profile,
    pub form: AssocForm,
}

impl Default for AssocParams {
    fn default() -> Self {
        AssocParams {
            k: 75,
            theta: 0.1,
            profile: Profile::Vid,
            form: AssocForm::RunningMean,
        }
    }
}

/// Post-NMS survivors of one frame that enter its score list: per class
/// the top `k` of those strictly above `theta`.
pub fn score_list_members(
    deltas: &[[f64; 4]],
    logits: &[Vec<f64>],
    priors: &[Prior],
    num_classes: usize,
    p: &AssocParams,
) -> Result<Vec<Kept>> {
    let boxes = decode(priors, deltas)?;
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    let kept = crate::postproc::select_per_class(
        &probs,
        &boxes,
        num_classes,
        p.theta,
        p.profile.nms_iou(),
        p.profile.keep_top(),
    );
    // Survivors come out per class in descending score order.
    let mut taken = vec![0usize; num_classes];
    Ok(kept
        .into_iter()
        .filter(|k| {
            taken[k.class_id] += 1;
            taken[k.class_id] <= p.k
        })
        .collect())
}

/// Records the association loss of a sequence on the tape. Selection (NMS,
/// top-k) is treated as fixed; gradients reach the selected softmax scores.
pub fn association_on_tape(
    tape: &mut Tape,
    cfg: &NetConfig,
    conf_per_frame: &[Vec<Var>],
    members: &[Vec<Kept>],
    form: AssocForm,
) -> Result<(Var, f64)> {
    let k = cfg.num_classes;
    let logits: Vec<Vec<Vec<f64>>> = conf_per_frame
        .iter()
        .map(|conf| tape_logits(tape, conf, k))
        .collect();
    let lists: Vec<Vec<f64>> = members
        .iter()
        .zip(&logits)
        .map(|(m, l)| {
            let mut sl = vec![0.0; k];
            for kp in m {
                sl[kp.class_id] += softmax(&l[kp.prior])[kp.class_id + 1];
            }
            sl
        })
        .collect();
    let (value, gsl) = association_loss_grad(&lists, form);
    let mut local = Vec::new();
    for (t, conf) in conf_per_frame.iter().enumerate() {
        let logits = &logits[t];
        let mut gl = vec![vec![0.0; k + 1]; logits.len()];
        for kp in &members[t] {
            let g = gsl[t][kp.class_id];
            if g == 0.0 {
                continue;
            }
            let probs = softmax(&logits[kp.prior]);
            let c = kp.class_id + 1;
            for j in 0..=k {
                let d = if j == c { 1.0 } else { 0.0 };
                gl[kp.prior][j] += g * probs[c] * (d - probs[j]);
            }
        }
        for (v, g) in conf.iter().copied().zip(scatter_priors(cfg, &gl, k + 1)) {
            local.push((v, g));
        }
    }
    Ok((tape.fused(value, local)?, value))
}
