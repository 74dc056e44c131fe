//! Detection mAP and CLEAR-MOT tracking metrics, plus the MOTChallenge
//! result-file format they consume.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::postproc::{iou, BBox, Detection};
use crate::synth::{GtObject, Sequence, CANVAS};

/// One MOTChallenge row. Frames and ids are 1-based; the box is in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct MotRow {
    pub frame: usize,
    pub id: i64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub conf: f64,
}

impl MotRow {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.left, self.top, self.left + self.width, self.top + self.height)
    }
}

/// `frame,id,bb_left,bb_top,bb_width,bb_height,conf,-1,-1,-1`; boxes with
/// three decimals, confidence with six.
pub fn format_mot_csv(rows: &[MotRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.6},-1,-1,-1",
            r.frame, r.id, r.left, r.top, r.width, r.height, r.conf
        );
    }
    s
}

/// Parses rows with at least the ten MOTChallenge fields; extra trailing
/// columns (such as a class column) are ignored.
pub fn parse_mot_csv(text: &str) -> Result<Vec<MotRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() < 10 {
            return Err(bad(format!("expected at least 10 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{:?}: {}", s, e)));
        let frame: usize = f[0].parse().map_err(|e| bad(format!("frame {:?}: {}", f[0], e)))?;
        let id: i64 = f[1].parse().map_err(|e| bad(format!("id {:?}: {}", f[1], e)))?;
        if frame == 0 {
            return Err(bad("frames are 1-based".into()));
        }
        let row = MotRow {
            frame,
            id,
            left: num(f[2])?,
            top: num(f[3])?,
            width: num(f[4])?,
            height: num(f[5])?,
            conf: num(f[6])?,
        };
        if !(row.width >= 0.0 && row.height >= 0.0) {
            return Err(bad("negative box size".into()));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MotReport {
    pub mota: f64,
    pub motp: f64,
    /// Fractions of GT trajectories tracked >= 80% / < 20% of their frames.
    pub mt: f64,
    pub ml: f64,
    pub false_pos: usize,
    pub false_neg: usize,
    pub ids: usize,
    pub num_gt: usize,
    pub num_tracks: usize,
    pub matches: usize,
    pub iou_sum: f64,
    pub mt_count: usize,
    pub ml_count: usize,
}

impl MotReport {
    /// Recomputes the ratio fields from the raw counts.
    fn finish(mut self) -> Self {
        self.mota = if self.num_gt == 0 {
            if self.false_pos == 0 {
                1.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            1.0 - (self.false_pos + self.false_neg + self.ids) as f64 / self.num_gt as f64
        };
        self.motp = if self.matches == 0 {
            0.0
        } else {
            self.iou_sum / self.matches as f64
        };
        let t = self.num_tracks.max(1) as f64;
        self.mt = self.mt_count as f64 / t;
        self.ml = self.ml_count as f64 / t;
        self
    }

    /// Pools raw counts over several videos.
    pub fn aggregate(reports: &[MotReport]) -> MotReport {
        let mut a = MotReport::default();
        for r in reports {
            a.false_pos += r.false_pos;
            a.false_neg += r.false_neg;
            a.ids += r.ids;
            a.num_gt += r.num_gt;
            a.num_tracks += r.num_tracks;
            a.matches += r.matches;
            a.iou_sum += r.iou_sum;
            a.mt_count += r.mt_count;
            a.ml_count += r.ml_count;
        }
        a.finish()
    }
}

fn group_by_frame(rows: &[MotRow]) -> BTreeMap<usize, Vec<&MotRow>> {
    let mut m: BTreeMap<usize, Vec<&MotRow>> = BTreeMap::new();
    for r in rows {
        m.entry(r.frame).or_default().push(r);
    }
    m
}

/// One frame's matching: pairs `(gt index, hyp index, iou)`.
/// Kept correspondences come first, then greedy by IoU descending (ties by
/// GT then hypothesis order), all gated at `gate`.
pub fn match_frame(
    gts: &[&MotRow],
    hyps: &[&MotRow],
    last: &BTreeMap<i64, i64>,
    gate: f64,
) -> Vec<(usize, usize, f64)> {
    let mut used_g = vec![false; gts.len()];
    let mut used_h = vec![false; hyps.len()];
    let mut out = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        if let Some(&hid) = last.get(&g.id) {
            if let Some(hi) = hyps.iter().position(|h| h.id == hid) {
                let o = iou(&g.bbox(), &hyps[hi].bbox());
                if !used_h[hi] && o >= gate {
                    used_g[gi] = true;
                    used_h[hi] = true;
                    out.push((gi, hi, o));
                }
            }
        }
    }
    let mut pairs = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for (hi, h) in hyps.iter().enumerate() {
            if used_g[gi] || used_h[hi] {
                continue;
            }
            let o = iou(&g.bbox(), &h.bbox());
            if o >= gate {
                pairs.push((gi, hi, o));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    for (gi, hi, o) in pairs {
        if !used_g[gi] && !used_h[hi] {
            used_g[gi] = true;
            used_h[hi] = true;
            out.push((gi, hi, o));
        }
    }
    out
}

/// CLEAR-MOT over one video. Hypotheses with negative ids are ignored.
/// An identity switch is counted whenever a GT track is matched to a
/// different hypothesis id than the one it was last matched to.
pub fn mot_metrics(hyp: &[MotRow], gt: &[MotRow], gate: f64) -> MotReport {
    mot_metrics_with(hyp, gt, gate, match_frame)
}

/// [`mot_metrics`] with a pluggable per-frame matcher (used by reference
/// implementations in tests).
pub fn mot_metrics_with(
    hyp: &[MotRow],
    gt: &[MotRow],
    gate: f64,
    matcher: impl Fn(&[&MotRow], &[&MotRow], &BTreeMap<i64, i64>, f64) -> Vec<(usize, usize, f64)>,
) -> MotReport {
    let hyp: Vec<MotRow> = hyp.iter().filter(|h| h.id >= 0).cloned().collect();
    let gf = group_by_frame(gt);
    let hf = group_by_frame(&hyp);
    let frames: BTreeSet<usize> = gf.keys().chain(hf.keys()).copied().collect();
    let mut last: BTreeMap<i64, i64> = BTreeMap::new();
    let mut present: BTreeMap<i64, usize> = BTreeMap::new();
    let mut tracked: BTreeMap<i64, usize> = BTreeMap::new();
    let mut r = MotReport::default();
    let empty = Vec::new();
    for f in frames {
        let gs = gf.get(&f).unwrap_or(&empty);
        let hs = hf.get(&f).unwrap_or(&empty);
        let m = matcher(gs, hs, &last, gate);
        for g in gs {
            *present.entry(g.id).or_default() += 1;
        }
        for &(gi, hi, o) in &m {
            let gid = gs[gi].id;
            let hid = hs[hi].id;
            if let Some(&prev) = last.get(&gid) {
                if prev != hid {
                    r.ids += 1;
                }
            }
            last.insert(gid, hid);
            *tracked.entry(gid).or_default() += 1;
            r.iou_sum += o;
        }
        r.matches += m.len();
        r.false_pos += hs.len() - m.len();
        r.false_neg += gs.len() - m.len();
        r.num_gt += gs.len();
    }
    r.num_tracks = present.len();
    for (id, &n) in &present {
        let frac = tracked.get(id).copied().unwrap_or(0) as f64 / n as f64;
        if frac >= 0.8 {
            r.mt_count += 1;
        }
        if frac < 0.2 {
            r.ml_count += 1;
        }
    }
    r.finish()
}

/// Column order: Video, MOTA, MOTP, MT, ML, FP, FN, IDS.
pub fn mot_table(rows: &[(String, MotReport)]) -> String {
    let mut s = format!(
        "{:<12} {:>8} {:>8} {:>7} {:>7} {:>6} {:>6} {:>5}\n",
        "Video", "MOTA", "MOTP", "MT", "ML", "FP", "FN", "IDS"
    );
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>8.4} {:>8.4} {:>6.1}% {:>6.1}% {:>6} {:>6} {:>5}",
            name,
            r.mota,
            r.motp,
            100.0 * r.mt,
            100.0 * r.ml,
            r.false_pos,
            r.false_neg,
            r.ids
        );
    }
    s
}

pub fn mot_csv(rows: &[(String, MotReport)]) -> String {
    let mut s = String::from("video,MOTA,MOTP,MT,ML,FP,FN,IDS\n");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            name, r.mota, r.motp, r.mt, r.ml, r.false_pos, r.false_neg, r.ids
        );
    }
    s
}

/// A scored detection for mAP: class, confidence, box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
}

/// All-points interpolated average precision from a ranked TP/FP list.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        prec.push(ctp as f64 / (ctp + cfp) as f64);
        rec.push(ctp as f64 / num_gt as f64);
    }
    // Precision envelope, then area under the recall steps.
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..rec.len() {
        if rec[i] > prev_r {
            ap += (rec[i] - prev_r) * prec[i];
            prev_r = rec[i];
        }
    }
    ap
}

/// VOC-style mAP. Per class, detections are ranked by score over all
/// frames (ties by frame then input order); each takes the highest-IoU GT
/// of its frame and counts as a true positive when that IoU reaches
/// `iou_thresh` and the GT is still unclaimed.
/// Tracked detections as MOT rows: frame `i` becomes `i + 1`, tracker id
/// `k` becomes `k + 1`, and untracked detections are dropped.
pub fn tracks_to_mot(frames: &[Vec<Detection>]) -> Vec<MotRow> {
    let n = CANVAS as f64;
    let mut rows = Vec::new();
    for (f, dets) in frames.iter().enumerate() {
        for d in dets.iter().filter(|d| d.id >= 0) {
            rows.push(MotRow {
                frame: f + 1,
                id: d.id + 1,
                left: d.bbox.x1 * n,
                top: d.bbox.y1 * n,
                width: d.bbox.width() * n,
                height: d.bbox.height() * n,
                conf: d.score,
            });
        }
    }
    rows
}

pub fn gt_to_mot(gt: &[Vec<GtObject>]) -> Vec<MotRow> {
    let n = CANVAS as f64;
    gt.iter()
        .enumerate()
        .flat_map(|(f, objs)| {
            objs.iter().map(move |g| MotRow {
                frame: f + 1,
                id: g.id as i64 + 1,
                left: g.bbox.x1 * n,
                top: g.bbox.y1 * n,
                width: g.bbox.width() * n,
                height: g.bbox.height() * n,
                conf: 1.0,
            })
        })
        .collect()
}

/// mAP over whole sequences: per-frame detections against each
/// sequence's ground truth, pooled across sequences.
pub fn sequence_map(
    dets: &[Vec<Vec<Detection>>],
    seqs: &[Sequence],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<MapReport> {
    if dets.len() != seqs.len() {
        return Err(Error::Input(format!("{} detection runs vs {} sequences", dets.len(), seqs.len())));
    }
    let mut all_dets = Vec::new();
    let mut all_gts = Vec::new();
    for (run, seq) in dets.iter().zip(seqs) {
        if run.len() != seq.gt.len() {
            return Err(Error::Input(format!("{} detection frames vs {} frames", run.len(), seq.gt.len())));
        }
        for (fd, fg) in run.iter().zip(&seq.gt) {
            all_dets.push(
                fd.iter()
                    .map(|d| ScoredBox {
                        class_id: d.class_id,
                        score: d.score,
                        bbox: d.bbox,
                    })
                    .collect(),
            );
            all_gts.push(fg.iter().map(|g| (g.class_id, g.bbox)).collect());
        }
    }
    voc_map(&all_dets, &all_gts, num_classes, iou_thresh)
}

pub fn voc_map(
    dets: &[Vec<ScoredBox>],
    gts: &[Vec<(usize, BBox)>],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<MapReport> {
    if dets.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} detection frames vs {} ground-truth frames",
            dets.len(),
            gts.len()
        )));
    }
    let mut ap = vec![None; num_classes];
    for (c, slot) in ap.iter_mut().enumerate() {
        let num_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.0 == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (f, ds) in dets.iter().enumerate() {
            for (i, d) in ds.iter().enumerate() {
                if d.class_id == c {
                    ranked.push((f, i));
                }
            }
        }
        ranked.sort_by(|a, b| {
            dets[b.0][b.1]
                .score
                .total_cmp(&dets[a.0][a.1].score)
                .then(a.cmp(b))
        });
        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = Vec::with_capacity(ranked.len());
        for (f, i) in ranked {
            let d = &dets[f][i];
            let mut best = (f64::NEG_INFINITY, None);
            for (gi, g) in gts[f].iter().enumerate() {
                if g.0 != c {
                    continue;
                }
                let o = iou(&d.bbox, &g.1);
                if o > best.0 {
                    best = (o, Some(gi));
                }
            }
            let hit = match best {
                (o, Some(gi)) if o >= iou_thresh && !claimed[f][gi] => {
                    claimed[f][gi] = true;
                    true
                }
                _ => false,
            };
            tp.push(hit);
        }
        *slot = Some(average_precision(&tp, num_gt));
    }
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MapReport { ap, map })
}

pub fn map_table(report: &MapReport, class_names: &[&str]) -> String {
    let mut s = format!("{:<10} {:>8}\n", "class", "AP");
    for (c, ap) in report.ap.iter().enumerate() {
        let name = class_names.get(c).copied().unwrap_or("?");
        match ap {
            Some(v) => {
                let _ = writeln!(s, "{:<10} {:>8.4}", name, v);
            }
            None => {
                let _ = writeln!(s, "{:<10} {:>8}", name, "-");
            }
        }
    }
    let _ = writeln!(s, "{:<10} {:>8.4}", "mAP", report.map);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(frame: usize, id: i64, left: f64, top: f64) -> MotRow {
        MotRow {
            frame,
            id,
            left,
            top,
            width: 10.0,
            height: 10.0,
            conf: 1.0,
        }
    }

    #[test]
    fn perfect_tracking() {
        let gt: Vec<MotRow> = (1..=10)
            .flat_map(|f| [row(f, 1, f as f64, 0.0), row(f, 2, 50.0, f as f64)])
            .collect();
        let hyp: Vec<MotRow> = gt.iter().map(|r| MotRow { id: r.id + 10, ..r.clone() }).collect();
        let r = mot_metrics(&hyp, &gt, 0.5);
        assert_eq!((r.mota, r.ids, r.false_pos, r.false_neg), (1.0, 0, 0, 0));
        assert_eq!(r.mt, 1.0);
        assert_eq!(r.ml, 0.0);
        assert!((r.motp - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_switch() {
        let gt: Vec<MotRow> = (1..=6).map(|f| row(f, 1, 0.0, 0.0)).collect();
        let hyp: Vec<MotRow> = (1..=6).map(|f| row(f, if f <= 3 { 4 } else { 9 }, 0.0, 0.0)).collect();
        let r = mot_metrics(&hyp, &gt, 0.5);
        assert_eq!(r.ids, 1);
        assert!((r.mota - (1.0 - 1.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn persistence_beats_greedy() {
        // Frame 2: hypothesis 8 overlaps GT 1 better, but 7 is still gated.
        let gt = vec![row(1, 1, 0.0, 0.0), row(2, 1, 0.0, 0.0)];
        let hyp = vec![row(1, 7, 0.0, 0.0), row(2, 7, 2.0, 0.0), row(2, 8, 0.5, 0.0)];
        let r = mot_metrics(&hyp, &gt, 0.5);
        assert_eq!((r.ids, r.false_pos), (0, 1));
    }

    #[test]
    fn negative_ids_ignored_and_empty_gt() {
        let gt = vec![row(1, 1, 0.0, 0.0)];
        let hyp = vec![row(1, -1, 0.0, 0.0)];
        let r = mot_metrics(&hyp, &gt, 0.5);
        assert_eq!((r.false_pos, r.false_neg), (0, 1));
        assert_eq!(r.ml, 1.0);
        assert_eq!(mot_metrics(&[], &[], 0.5).mota, 1.0);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let rows = vec![
            MotRow {
                frame: 3,
                id: 2,
                left: 1.25,
                top: 2.5,
                width: 10.0,
                height: 20.125,
                conf: 0.875,
            },
            row(4, 1, 0.0, 0.0),
        ];
        let text = format_mot_csv(&rows);
        assert_eq!(text.lines().next().unwrap(), "3,2,1.250,2.500,10.000,20.125,0.875000,-1,-1,-1");
        assert_eq!(parse_mot_csv(&text).unwrap(), rows);
        let err = parse_mot_csv("1,1,0,0,1,1,1,-1,-1,-1\n2,x,0,0,1,1,1,-1,-1,-1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_mot_csv("1,1,0,0\n").is_err());
        // Extra class column accepted.
        assert_eq!(parse_mot_csv("1,1,0,0,1,1,1,-1,-1,-1,3\n").unwrap().len(), 1);
    }

    #[test]
    fn table_column_order() {
        let t = mot_table(&[("v".into(), MotReport::default().finish())]);
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["Video", "MOTA", "MOTP", "MT", "ML", "FP", "FN", "IDS"]);
        assert!(mot_csv(&[]).starts_with("video,MOTA,MOTP,MT,ML,FP,FN,IDS"));
    }

    fn sb(c: usize, score: f64, b: BBox) -> ScoredBox {
        ScoredBox {
            class_id: c,
            score,
            bbox: b,
        }
    }

    #[test]
    fn map_cases() {
        let g = BBox::new(0.1, 0.1, 0.5, 0.5);
        let near = BBox::new(0.1, 0.1, 0.5, 0.46);
        assert!(iou(&g, &near) > 0.85);
        let r = voc_map(&[vec![sb(0, 0.9, near)]], &[vec![(0, g)]], 2, 0.5).unwrap();
        assert_eq!(r.ap, vec![Some(1.0), None]);
        assert_eq!(r.map, 1.0);
        let r = voc_map(&[vec![]], &[vec![(0, g)]], 1, 0.5).unwrap();
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn map_hand_trace() {
        // Ranked TP, FP, TP over 2 GT: precision 1, 1/2, 2/3; recall 1/2, 1/2, 1.
        // Envelope: 1, 2/3, 2/3 -> AP = 0.5*1 + 0.5*2/3.
        let a = BBox::new(0.0, 0.0, 0.2, 0.2);
        let b = BBox::new(0.5, 0.5, 0.7, 0.7);
        let miss = BBox::new(0.8, 0.0, 0.9, 0.1);
        let dets = vec![vec![sb(0, 0.9, a), sb(0, 0.8, miss)], vec![sb(0, 0.7, b)]];
        let gts = vec![vec![(0, a)], vec![(0, b)]];
        let r = voc_map(&dets, &gts, 1, 0.5).unwrap();
        assert!((r.map - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        // A duplicate of a claimed GT is a false positive.
        let dup = vec![vec![sb(0, 0.9, a), sb(0, 0.8, a)], vec![]];
        let r = voc_map(&dup, &[vec![(0, a)], vec![]], 1, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
    }

    #[test]
    fn mota_formula() {
        let r = MotReport {
            false_pos: 10,
            false_neg: 20,
            ids: 5,
            num_gt: 100,
            ..MotReport::default()
        }
        .finish();
        assert!((r.mota - 0.65).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn spurious_hypothesis_adds_fp(shift in 0.0f64..3.0, n in 2usize..8, far in 200.0f64..300.0) {
            let gt: Vec<MotRow> = (1..=n).map(|f| row(f, 1, f as f64, 0.0)).collect();
            let hyp: Vec<MotRow> = (1..=n).map(|f| row(f, 5, f as f64 + shift, 0.0)).collect();
            let base = mot_metrics(&hyp, &gt, 0.5);
            let mut more = hyp.clone();
            more.push(row(1, 6, far, far));
            let r = mot_metrics(&more, &gt, 0.5);
            prop_assert_eq!(r.false_pos, base.false_pos + 1);
            prop_assert!(r.mota <= base.mota);
            let relabeled: Vec<MotRow> = hyp.iter().map(|h| MotRow { id: h.id + 100, ..h.clone() }).collect();
            let rr = mot_metrics(&relabeled, &gt, 0.5);
            prop_assert_eq!(rr.motp, base.motp);
            prop_assert_eq!(rr.mota, base.mota);
        }
    }
}
