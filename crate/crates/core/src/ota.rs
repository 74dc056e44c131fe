//! Online tubelet analysis: identity assignment from attention-vector
//! cosine similarity combined with IoU against each tubelet's newest box.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::net::{AttentionMaps, LOW_LEVELS};
use crate::postproc::{iou, BBox, Detection};

/// Samples per side taken from each map; three low-level maps give 3·7·7 = 147.
pub const AV_GRID: usize = 7;
pub const AV_LEN: usize = LOW_LEVELS * AV_GRID * AV_GRID;

fn sample_axis(lo: f64, hi: f64, n_map: usize, j: usize) -> (usize, usize, f64) {
    let u = lo + (j as f64 + 0.5) / AV_GRID as f64 * (hi - lo);
    let src = (u * n_map as f64 - 0.5).clamp(0.0, (n_map - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_map - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear 7x7 samples of the selected maps over `region`, concatenated in
/// the given level order. Sample centers follow the align-corners-false
/// convention, so for the whole-image region this equals resizing each map
/// to 7x7.
pub fn attention_vector_levels(
    att: &AttentionMaps,
    region: &BBox,
    levels: &[usize],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(levels.len() * AV_GRID * AV_GRID);
    for &l in levels {
        let m = att
            .maps
            .get(l)
            .ok_or_else(|| Error::Contract(format!("attention map for level {} missing", l)))?;
        let (c, h, w) = m.chw()?;
        if c != 1 {
            return Err(Error::Contract(format!("attention map {} has {} channels", l, c)));
        }
        let d = m.data();
        for gy in 0..AV_GRID {
            let (y0, y1, fy) = sample_axis(region.y1, region.y2, h, gy);
            for gx in 0..AV_GRID {
                let (x0, x1, fx) = sample_axis(region.x1, region.x2, w, gx);
                let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
                let bot = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

/// The 147-d attention vector of an object: the three low-level maps sampled
/// over its box.
pub fn attention_vector(att: &AttentionMaps, region: &BBox) -> Result<Vec<f64>> {
    if att.maps.len() < LOW_LEVELS {
        return Err(Error::Contract(format!(
            "need {} low-level attention maps, got {}",
            LOW_LEVELS,
            att.maps.len()
        )));
    }
    attention_vector_levels(att, region, &[0, 1, 2])
}

/// Cosine similarity; 0 when either vector is all zero.
pub fn attention_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "attention vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tubelet {
    pub id: i64,
    pub class_id: usize,
    /// Newest first, never empty.
    pub objs: VecDeque<Detection>,
    pub last_seen: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    /// `exp(iou) * mean cosine`.
    AttentionIou,
    /// `exp(iou)`, attention ignored.
    IouOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerParams {
    /// Match threshold `T`.
    pub match_threshold: f64,
    /// Tubelet generation score `G`.
    pub gen_score: f64,
    pub tub_len_max: usize,
    /// Frames a tubelet survives without a match.
    pub max_miss: usize,
    pub similarity: SimilarityKind,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            match_threshold: 1.0,
            gen_score: 0.3,
            tub_len_max: 10,
            max_miss: 10,
            similarity: SimilarityKind::AttentionIou,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        if self.match_threshold <= 0.0 {
            return Err(Error::Config(format!("T = {} must be > 0", self.match_threshold)));
        }
        if !(self.gen_score > 0.0 && self.gen_score <= 1.0) {
            return Err(Error::Config(format!("G = {} must be in (0,1]", self.gen_score)));
        }
        if self.tub_len_max == 0 {
            return Err(Error::Config("tub_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// `exp(o) * as` with `o` the IoU against the newest member and `as` the
/// mean cosine over all members (taken as 1 in IoU-only mode).
pub fn tubelet_similarity(obj: &Detection, tub: &Tubelet, kind: SimilarityKind) -> Result<f64> {
    let newest = tub
        .objs
        .front()
        .ok_or_else(|| Error::Contract(format!("tubelet {} is empty", tub.id)))?;
    let o = iou(&obj.bbox, &newest.bbox);
    let appearance = match kind {
        SimilarityKind::IouOnly => 1.0,
        SimilarityKind::AttentionIou => {
            let av = obj
                .av
                .as_ref()
                .ok_or_else(|| Error::Contract("detection lacks an attention vector".into()))?;
            let mut total = 0.0;
            for m in &tub.objs {
                let mv = m
                    .av
                    .as_ref()
                    .ok_or_else(|| Error::Contract("tubelet member lacks an attention vector".into()))?;
                total += attention_similarity(av, mv)?;
            }
            total / tub.objs.len() as f64
        }
    };
    Ok(o.exp() * appearance)
}

/// Per-stream tracker state: class-partitioned tubelets and the id counter.
#[derive(Clone, Debug)]
pub struct Tracker {
    params: TrackerParams,
    tubs: BTreeMap<usize, Vec<Tubelet>>,
    next_id: i64,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Result<Self> {
        params.validate()?;
        Ok(Tracker {
            params,
            tubs: BTreeMap::new(),
            next_id: 0,
        })
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    pub fn tubelets(&self, class_id: usize) -> &[Tubelet] {
        self.tubs.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_tubelets(&self) -> impl Iterator<Item = &Tubelet> {
        self.tubs.values().flatten()
    }

    /// Seeds a tubelet directly (tests and resumed streams). Advances the id
    /// counter past `id`.
    pub fn insert_tubelet(&mut self, tub: Tubelet) {
        self.next_id = self.next_id.max(tub.id + 1);
        self.tubs.entry(tub.class_id).or_default().push(tub);
    }

    /// Assigns identities to one frame's detections and updates the
    /// tubelets. Returns the detections in input order with `id` set.
    pub fn update(&mut self, dets: &[Detection], frame: usize) -> Result<Vec<Detection>> {
        let mut out: Vec<Detection> = dets.to_vec();
        for d in out.iter_mut() {
            d.id = -1;
        }
        let mut classes: Vec<usize> = out.iter().map(|d| d.class_id).collect();
        classes.extend(self.tubs.keys().copied());
        classes.sort_unstable();
        classes.dedup();

        for cls in classes {
            // Objects of this class by descending confidence, stable.
            let mut order: Vec<usize> = (0..out.len()).filter(|&i| out[i].class_id == cls).collect();
            order.sort_by(|&a, &b| out[b].score.total_cmp(&out[a].score));

            let tubs = self.tubs.entry(cls).or_default();
            let mut best: Vec<Option<(usize, f64)>> = vec![None; order.len()];
            if !tubs.is_empty() {
                for (oi, &di) in order.iter().enumerate() {
                    let mut s_max = 0.0;
                    let mut cand = None;
                    for (ti, tub) in tubs.iter().enumerate() {
                        let s = tubelet_similarity(&out[di], tub, self.params.similarity)?;
                        if s > s_max {
                            s_max = s;
                            cand = Some(ti);
                        }
                    }
                    if let Some(ti) = cand {
                        if s_max > self.params.match_threshold {
                            best[oi] = Some((ti, s_max));
                        }
                    }
                }
                // One claimant per tubelet: the highest similarity, earliest on ties.
                for ti in 0..tubs.len() {
                    let claim: Vec<usize> = (0..order.len())
                        .filter(|&oi| matches!(best[oi], Some((t, _)) if t == ti))
                        .collect();
                    if claim.len() > 1 {
                        let mut keep = claim[0];
                        for &oi in &claim[1..] {
                            if best[oi].unwrap().1 > best[keep].unwrap().1 {
                                keep = oi;
                            }
                        }
                        for &oi in &claim {
                            if oi != keep {
                                best[oi] = None;
                            }
                        }
                    }
                }
            }

            let mut matched = vec![false; tubs.len()];
            let mut spawned = Vec::new();
            for (oi, &di) in order.iter().enumerate() {
                match best[oi] {
                    Some((ti, _)) => {
                        out[di].id = tubs[ti].id;
                        matched[ti] = true;
                        let tub = &mut tubs[ti];
                        tub.objs.push_front(out[di].clone());
                        tub.objs.truncate(self.params.tub_len_max);
                        tub.last_seen = frame;
                    }
                    None => {
                        if out[di].score > self.params.gen_score {
                            out[di].id = self.next_id;
                            self.next_id += 1;
                            spawned.push(Tubelet {
                                id: out[di].id,
                                class_id: cls,
                                objs: VecDeque::from([out[di].clone()]),
                                last_seen: frame,
                            });
                        }
                    }
                }
            }
            let max_miss = self.params.max_miss;
            tubs.retain(|t| frame.saturating_sub(t.last_seen) <= max_miss);
            tubs.extend(spawned);
        }
        self.tubs.retain(|_, v| !v.is_empty());
        Ok(out)
    }
}

/// Splits per-class detection lists and runs one tracker step; convenience
/// form of [`Tracker::update`].
pub fn ota_update(
    tracker: &mut Tracker,
    frame_dets: &[Detection],
    frame: usize,
) -> Result<Vec<Detection>> {
    tracker.update(frame_dets, frame)
}

/// Tracks one sequence through a fresh tracker; frame `i` of the input is
/// tracker frame `i`.
pub fn track_sequence(dets: &[Vec<Detection>], params: &TrackerParams) -> Result<Vec<Vec<Detection>>> {
    let mut tracker = Tracker::new(params.clone())?;
    dets.iter()
        .enumerate()
        .map(|(f, d)| tracker.update(d, f))
        .collect()
}
