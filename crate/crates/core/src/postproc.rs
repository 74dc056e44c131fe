//! Prior boxes, box coding, IoU, per-class NMS and per-frame detection
//! assembly.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{AttentionMaps, Detector, HeadOutput, NetConfig, TemporalMode};
use crate::tensor::Tensor;
use crate::ota::attention_vector;

/// Center-offset and log-size variances of the box coding.
pub const VARIANCES: [f64; 2] = [0.1, 0.2];

/// Corner-form box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clamp_unit(&self) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, 1.0),
            self.y1.clamp(0.0, 1.0),
            self.x2.clamp(0.0, 1.0),
            self.y2.clamp(0.0, 1.0),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// Intersection over union; 0 when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || a.area() <= 0.0 || b.area() <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Prior box in center form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Prior {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Two square priors per cell: scale `s_l` and `sqrt(s_l * s_{l+1})`, with
/// scales spaced linearly from 0.1 to 0.9 over the six levels. Order is
/// (level, row, column, prior), matching [`HeadOutput::deltas`].
pub fn generate_priors(cfg: &NetConfig) -> Vec<Prior> {
    let n = cfg.level_sizes.len();
    let scale = |l: usize| 0.1 + 0.8 * l as f64 / (n - 1) as f64;
    let mut priors = Vec::with_capacity(cfg.num_priors());
    for (l, &s) in cfg.level_sizes.iter().enumerate() {
        let sizes = [scale(l), (scale(l) * scale(l + 1)).sqrt()];
        for y in 0..s {
            for x in 0..s {
                let cx = (x as f64 + 0.5) / s as f64;
                let cy = (y as f64 + 0.5) / s as f64;
                for p in 0..cfg.priors_per_cell {
                    let side = sizes[p % 2];
                    priors.push(Prior {
                        cx,
                        cy,
                        w: side,
                        h: side,
                    });
                }
            }
        }
    }
    priors
}

/// Offsets of `gt` relative to `prior`.
pub fn encode(prior: &Prior, gt: &BBox) -> [f64; 4] {
    let (cx, cy) = gt.center();
    [
        (cx - prior.cx) / (VARIANCES[0] * prior.w),
        (cy - prior.cy) / (VARIANCES[0] * prior.h),
        (gt.width() / prior.w).ln() / VARIANCES[1],
        (gt.height() / prior.h).ln() / VARIANCES[1],
    ]
}

/// Inverse of [`encode`] without clamping.
pub fn decode_raw(prior: &Prior, d: &[f64; 4]) -> BBox {
    let cx = prior.cx + d[0] * VARIANCES[0] * prior.w;
    let cy = prior.cy + d[1] * VARIANCES[0] * prior.h;
    let w = prior.w * (d[2] * VARIANCES[1]).exp();
    let h = prior.h * (d[3] * VARIANCES[1]).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Decodes every prior's deltas, clamped to the unit square.
pub fn decode(priors: &[Prior], deltas: &[[f64; 4]]) -> Result<Vec<BBox>> {
    if priors.len() != deltas.len() {
        return Err(Error::shape(
            "decode",
            format!("{} priors, {} deltas", priors.len(), deltas.len()),
        ));
    }
    Ok(priors
        .iter()
        .zip(deltas)
        .map(|(p, d)| decode_raw(p, d).clamp_unit())
        .collect())
}

/// Greedy suppression over candidates `(score, box)`. Returns kept input
/// indices in descending score order, ties broken by input order.
pub fn nms(cands: &[(f64, BBox)], iou_thresh: f64, keep_top: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].0.total_cmp(&cands[a].0).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= keep_top {
            break;
        }
        if kept.iter().all(|&k| iou(&cands[k].1, &cands[i].1) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Vid,
    Mot,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vid" => Ok(Profile::Vid),
            "mot" => Ok(Profile::Mot),
            _ => Err(Error::Config(format!("unknown dataset profile {:?}", s))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Vid => "vid",
            Profile::Mot => "mot",
        }
    }

    pub fn nms_iou(self) -> f64 {
        match self {
            Profile::Vid => 0.45,
            Profile::Mot => 0.3,
        }
    }

    pub fn keep_top(self) -> usize {
        match self {
            Profile::Vid => 200,
            Profile::Mot => 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Object class, `0..num_classes` (background excluded).
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    pub av: Option<Vec<f64>>,
    /// Track identity, -1 when unassigned.
    pub id: i64,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// A candidate kept by NMS, with the prior it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kept {
    pub prior: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Per class: softmax scores strictly above `conf_thresh`, NMS at
/// `iou_thresh`, at most `keep_top` survivors. Classes are visited in order.
pub fn select_per_class(
    probs: &[Vec<f64>],
    boxes: &[BBox],
    num_classes: usize,
    conf_thresh: f64,
    iou_thresh: f64,
    keep_top: usize,
) -> Vec<Kept> {
    let mut out = Vec::new();
    for c in 0..num_classes {
        let idx: Vec<usize> = (0..probs.len())
            .filter(|&p| probs[p][c + 1] > conf_thresh)
            .collect();
        let cands: Vec<(f64, BBox)> = idx.iter().map(|&p| (probs[p][c + 1], boxes[p])).collect();
        for k in nms(&cands, iou_thresh, keep_top) {
            out.push(Kept {
                prior: idx[k],
                class_id: c,
                score: cands[k].0,
                bbox: cands[k].1,
            });
        }
    }
    out
}

/// Full per-frame decoding: boxes, scores, per-class NMS, attention vectors.
pub fn detect(
    head: &HeadOutput,
    att: Option<&AttentionMaps>,
    cfg: &NetConfig,
    priors: &[Prior],
    conf_thresh: f64,
    profile: Profile,
) -> Result<Vec<Detection>> {
    let boxes = decode(priors, &head.deltas(cfg))?;
    let probs: Vec<Vec<f64>> = head.logits(cfg).iter().map(|l| softmax(l)).collect();
    let kept = select_per_class(
        &probs,
        &boxes,
        cfg.num_classes,
        conf_thresh,
        profile.nms_iou(),
        profile.keep_top(),
    );
    kept.into_iter()
        .map(|k| {
            let av = match att {
                Some(a) => Some(attention_vector(a, &k.bbox)?),
                None => None,
            };
            Ok(Detection {
                class_id: k.class_id,
                score: k.score,
                bbox: k.bbox,
                av,
                id: -1,
            })
        })
        .collect()
}

/// Runs the detector over one sequence from a fresh state. Attention
/// vectors are attached only in `AcLstm` mode.
pub fn detect_sequence(
    detector: &mut Detector,
    frames: &[Tensor],
    conf_thresh: f64,
    profile: Profile,
) -> Result<Vec<Vec<Detection>>> {
    detector.reset();
    let priors = generate_priors(detector.cfg());
    frames
        .iter()
        .map(|f| {
            let out = detector.step(f)?;
            let att = (detector.mode() == TemporalMode::AcLstm).then_some(&out.att);
            detect(&out.head, att, detector.cfg(), &priors, conf_thresh, profile)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    frame: usize,
    class: usize,
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    id: i64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    av: Option<Vec<f64>>,
}

/// One JSON object per detection: `{frame, class, score, box, id, av?}`.
pub fn write_detections_jsonl<W: Write>(mut w: W, frames: &[(usize, Vec<Detection>)]) -> Result<()> {
    for (frame, dets) in frames {
        for d in dets {
            let rec = DetectionRecord {
                frame: *frame,
                class: d.class_id,
                score: d.score,
                bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
                id: d.id,
                av: d.av.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads detections grouped by frame, frames in ascending order.
pub fn read_detections_jsonl<R: BufRead>(r: R) -> Result<Vec<(usize, Vec<Detection>)>> {
    let mut by_frame: std::collections::BTreeMap<usize, Vec<Detection>> = Default::default();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let [x1, y1, x2, y2] = rec.bbox;
        by_frame.entry(rec.frame).or_default().push(Detection {
            class_id: rec.class,
            score: rec.score,
            bbox: BBox::new(x1, y1, x2, y2),
            av: rec.av,
            id: rec.id,
        });
    }
    Ok(by_frame.into_iter().collect())
}
