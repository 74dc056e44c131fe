//! Moving textured shapes on a noisy background, with ground truth boxes,
//! classes and identities.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::postproc::{iou, BBox};
use crate::tensor::{read_tnsr, write_tnsr, Tensor};

pub const CANVAS: usize = 96;
pub const NUM_CLASSES: usize = 4;
const MIN_SIDE: f64 = 4.0;

/// Class `c` is drawn as `Shape::ALL[c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; NUM_CLASSES] = [Shape::Square, Shape::Disc, Shape::Triangle, Shape::Diamond];

    /// Membership of box-relative coordinates `(u, v) ∈ [0,1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => true,
            Shape::Disc => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Triangle => v >= (2.0 * u - 1.0).abs(),
            Shape::Diamond => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pattern {
    Solid,
    /// Vertical stripes of the given width in pixels.
    Stripes(f64),
    Checker(f64),
    /// Concentric rings of the given width.
    Rings(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub pattern: Pattern,
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
}

impl Texture {
    /// Color at object-local pixel offsets from the box center.
    fn color(&self, dx: f64, dy: f64) -> [f64; 3] {
        let alt = match self.pattern {
            Pattern::Solid => false,
            Pattern::Stripes(p) => (dx / p).floor().rem_euclid(2.0) == 1.0,
            Pattern::Checker(p) => ((dx / p).floor() + (dy / p).floor()).rem_euclid(2.0) == 1.0,
            Pattern::Rings(p) => ((dx * dx + dy * dy).sqrt() / p).floor().rem_euclid(2.0) == 1.0,
        };
        if alt {
            self.secondary
        } else {
            self.primary
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub texture: Texture,
    /// Box center and size at frame 0, pixels.
    pub center: (f64, f64),
    pub size: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Multiplicative size change per frame.
    pub scale_rate: f64,
    /// Bounce off the canvas edges instead of leaving it.
    pub bounce: bool,
    /// Frames (0-based) in which the object is drawn at low contrast.
    pub faded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub num_frames: usize,
    pub objects: Vec<ObjectSpec>,
    pub background: [f64; 3],
    /// Amplitude of per-pixel uniform noise, redrawn every frame.
    pub noise: f64,
    /// Number of static background blobs that are not objects.
    pub clutter: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    /// 0-based identity, constant over the sequence.
    pub id: usize,
    pub class_id: usize,
    /// Normalized to the unit square.
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Tensor>,
    pub gt: Vec<Vec<GtObject>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::Config("scene needs at least one frame".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id >= NUM_CLASSES {
                return Err(Error::Config(format!("object {} has class {}", i, o.class_id)));
            }
            if o.size.0 < MIN_SIDE || o.size.1 < MIN_SIDE {
                return Err(Error::Config(format!("object {} smaller than {} px", i, MIN_SIDE)));
            }
            if o.size.0 > CANVAS as f64 / 2.0 || o.size.1 > CANVAS as f64 / 2.0 {
                return Err(Error::Config(format!("object {} wider than half the canvas", i)));
            }
            if !(o.scale_rate > 0.0) {
                return Err(Error::Config(format!("object {} scale rate must be > 0", i)));
            }
        }
        Ok(())
    }
}

/// Object boxes (pixels) for every frame. Sizes are kept in
/// `[MIN_SIDE, CANVAS/2]`; bouncing objects reflect off the edges, others
/// are clipped to the canvas.
fn trajectories(spec: &SceneSpec) -> Vec<Vec<BBox>> {
    let n = CANVAS as f64;
    spec.objects
        .iter()
        .map(|o| {
            let (mut cx, mut cy) = o.center;
            let (mut vx, mut vy) = o.velocity;
            let (mut w, mut h) = o.size;
            let mut out = Vec::with_capacity(spec.num_frames);
            for _ in 0..spec.num_frames {
                out.push(BBox::from_center(cx, cy, w, h));
                w = (w * o.scale_rate).clamp(MIN_SIDE, n / 2.0);
                h = (h * o.scale_rate).clamp(MIN_SIDE, n / 2.0);
                cx += vx;
                cy += vy;
                if o.bounce {
                    if cx - w / 2.0 < 0.0 || cx + w / 2.0 > n {
                        vx = -vx;
                        cx = cx.clamp(w / 2.0, n - w / 2.0);
                    }
                    if cy - h / 2.0 < 0.0 || cy + h / 2.0 > n {
                        vy = -vy;
                        cy = cy.clamp(h / 2.0, n - h / 2.0);
                    }
                }
            }
            out
        })
        .collect()
}

fn clip_px(b: &BBox) -> BBox {
    let n = CANVAS as f64;
    BBox::new(b.x1.clamp(0.0, n), b.y1.clamp(0.0, n), b.x2.clamp(0.0, n), b.y2.clamp(0.0, n))
}

fn paint(img: &mut [f64], x: usize, y: usize, c: [f64; 3], alpha: f64) {
    let plane = CANVAS * CANVAS;
    for ch in 0..3 {
        let v = &mut img[ch * plane + y * CANVAS + x];
        *v = (1.0 - alpha) * *v + alpha * c[ch];
    }
}

/// Renders the scene. Values are rounded through f32 so a sequence written
/// to disk reads back bit-identical.
pub fn gen_sequence(spec: &SceneSpec) -> Result<Sequence> {
    spec.validate()?;
    let n = CANVAS as f64;
    let plane = CANVAS * CANVAS;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Static background: base color, a soft gradient and clutter blobs.
    let tilt: [f64; 3] = [0; 3].map(|_| rng.gen_range(-0.08..0.08));
    let mut base = vec![0.0; 3 * plane];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let g = (x as f64 + y as f64) / (2.0 * n) - 0.5;
            for ch in 0..3 {
                base[ch * plane + y * CANVAS + x] = spec.background[ch] + tilt[ch] * g;
            }
        }
    }
    for _ in 0..spec.clutter {
        let r = rng.gen_range(1.5..4.0);
        let (bx, by) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
        let c: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.0..1.0));
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let (dx, dy) = (x as f64 + 0.5 - bx, y as f64 + 0.5 - by);
                if dx * dx + dy * dy <= r * r {
                    paint(&mut base, x, y, c, 0.6);
                }
            }
        }
    }

    let tracks = trajectories(spec);
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut gt = Vec::with_capacity(spec.num_frames);
    for f in 0..spec.num_frames {
        let mut img = base.clone();
        let mut rows = Vec::new();
        for (id, o) in spec.objects.iter().enumerate() {
            let b = tracks[id][f];
            let shape = Shape::ALL[o.class_id];
            let alpha = if o.faded.contains(&f) { 0.3 } else { 1.0 };
            let (cx, cy) = b.center();
            let x0 = b.x1.floor().max(0.0) as usize;
            let y0 = b.y1.floor().max(0.0) as usize;
            let x1 = (b.x2.ceil() as usize).min(CANVAS);
            let y1 = (b.y2.ceil() as usize).min(CANVAS);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let u = (px - b.x1) / b.width();
                    let v = (py - b.y1) / b.height();
                    if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && shape.contains(u, v) {
                        paint(&mut img, x, y, o.texture.color(px - cx, py - cy), alpha);
                    }
                }
            }
            let clipped = clip_px(&b);
            if clipped.width() >= MIN_SIDE && clipped.height() >= MIN_SIDE {
                rows.push(GtObject {
                    id,
                    class_id: o.class_id,
                    bbox: BBox::new(clipped.x1 / n, clipped.y1 / n, clipped.x2 / n, clipped.y2 / n),
                });
            }
        }
        if spec.noise > 0.0 {
            for v in img.iter_mut() {
                *v += rng.gen_range(-spec.noise..spec.noise);
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0) as f32 as f64;
        }
        frames.push(Tensor::new(vec![3, CANVAS, CANVAS], img)?);
        gt.push(rows);
    }
    Ok(Sequence { frames, gt })
}

fn palette_color(rng: &mut ChaCha8Rng, avoid: [f64; 3]) -> [f64; 3] {
    loop {
        let c: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.0..1.0));
        let d: f64 = c.iter().zip(&avoid).map(|(a, b)| (a - b).abs()).sum();
        if d > 0.9 {
            return c;
        }
    }
}

fn random_texture(rng: &mut ChaCha8Rng, background: [f64; 3]) -> Texture {
    let period = rng.gen_range(3.0..6.0);
    let pattern = match rng.gen_range(0..4) {
        0 => Pattern::Solid,
        1 => Pattern::Stripes(period),
        2 => Pattern::Checker(period),
        _ => Pattern::Rings(period),
    };
    let primary = palette_color(rng, background);
    let secondary = palette_color(rng, primary);
    Texture {
        pattern,
        primary,
        secondary,
    }
}

/// A training/evaluation scene: 1–3 bouncing objects with random classes,
/// textures and motion, background clutter, per-frame noise and occasional
/// low-contrast frames.
pub fn random_scene(seed: u64, num_frames: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let background: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.25..0.6));
    let count = rng.gen_range(1..=3);
    let objects = (0..count)
        .map(|_| {
            let side = rng.gen_range(14.0..34.0);
            let aspect: f64 = rng.gen_range(0.8..1.25);
            let size = (side * aspect.sqrt(), side / aspect.sqrt());
            let faded = (0..num_frames).filter(|_| rng.gen_bool(0.1)).collect();
            ObjectSpec {
                class_id: rng.gen_range(0..NUM_CLASSES),
                texture: random_texture(&mut rng, background),
                center: (rng.gen_range(20.0..76.0), rng.gen_range(20.0..76.0)),
                size,
                velocity: (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                scale_rate: rng.gen_range(0.98..1.02),
                bounce: true,
                faded,
            }
        })
        .collect();
    SceneSpec {
        num_frames,
        objects,
        background,
        noise: 0.12,
        clutter: rng.gen_range(2..8),
        seed,
    }
}

/// One object whose size changes continuously by a factor of about 2.5
/// over the sequence.
pub fn scale_change_scene(seed: u64, num_frames: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1e);
    let background: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.25..0.6));
    let growing = rng.gen_bool(0.5);
    let rate = 2.5f64.powf(1.0 / num_frames.max(1) as f64);
    let (start, rate) = if growing { (14.0, rate) } else { (40.0, 1.0 / rate) };
    SceneSpec {
        num_frames,
        objects: vec![ObjectSpec {
            class_id: rng.gen_range(0..NUM_CLASSES),
            texture: random_texture(&mut rng, background),
            center: (48.0, 48.0),
            size: (start, start),
            velocity: (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
            scale_rate: rate,
            bounce: true,
            faded: Vec::new(),
        }],
        background,
        noise: 0.08,
        clutter: 3,
        seed,
    }
}

/// Two objects of one class with different textures moving towards each
/// other on nearly the same line, overlapping around the middle frame.
pub fn crossing_pair_scene(seed: u64, num_frames: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc055);
    let background: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.25..0.6));
    let class_id = rng.gen_range(0..NUM_CLASSES);
    let side = rng.gen_range(20.0..28.0);
    let y = rng.gen_range(36.0..60.0);
    let dy = rng.gen_range(-3.0..3.0);
    let mid = (num_frames as f64 - 1.0) / 2.0;
    let speed = rng.gen_range(56.0..68.0) / num_frames.max(2) as f64;
    let first = random_texture(&mut rng, background);
    let mut second = random_texture(&mut rng, background);
    // Force distinct appearance: different pattern family and colors.
    while std::mem::discriminant(&second.pattern) == std::mem::discriminant(&first.pattern) {
        second = random_texture(&mut rng, background);
    }
    let obj = |tex: Texture, dir: f64, yy: f64| ObjectSpec {
        class_id,
        texture: tex,
        center: (48.0 - dir * speed * mid, yy),
        size: (side, side),
        velocity: (dir * speed, 0.0),
        scale_rate: 1.0,
        bounce: false,
        faded: Vec::new(),
    };
    SceneSpec {
        num_frames,
        objects: vec![obj(first, 1.0, y - dy / 2.0), obj(second, -1.0, y + dy / 2.0)],
        background,
        noise: 0.08,
        clutter: 3,
        seed,
    }
}

/// Highest IoU between the two first objects over the sequence.
pub fn max_pair_iou(seq: &Sequence) -> f64 {
    seq.gt
        .iter()
        .filter_map(|rows| match rows.as_slice() {
            [a, b, ..] => Some(iou(&a.bbox, &b.bbox)),
            _ => None,
        })
        .fold(0.0, f64::max)
}

/// `frame,id,bb_left,bb_top,bb_width,bb_height,conf,-1,-1,-1,class` with
/// 1-based frames and ids and pixel coordinates.
pub fn gt_to_csv(gt: &[Vec<GtObject>]) -> String {
    let n = CANVAS as f64;
    let mut s = String::new();
    for (f, rows) in gt.iter().enumerate() {
        for r in rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},1,-1,-1,-1,{}",
                f + 1,
                r.id + 1,
                r.bbox.x1 * n,
                r.bbox.y1 * n,
                r.bbox.width() * n,
                r.bbox.height() * n,
                r.class_id
            );
        }
    }
    s
}

pub fn gt_from_csv(text: &str, num_frames: usize) -> Result<Vec<Vec<GtObject>>> {
    let n = CANVAS as f64;
    let mut gt = vec![Vec::new(); num_frames];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 11 {
            return Err(bad(format!("expected 11 fields, got {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{:?}: {}", s, e)));
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{:?}: {}", s, e)));
        let frame = int(f[0])?;
        let id = int(f[1])?;
        if frame == 0 || frame > num_frames || id == 0 {
            return Err(bad(format!("frame {} / id {} out of range", frame, id)));
        }
        let (l, t, w, h) = (num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?);
        gt[frame - 1].push(GtObject {
            id: id - 1,
            class_id: int(f[10])?,
            bbox: BBox::new(l / n, t / n, (l + w) / n, (t + h) / n),
        });
    }
    Ok(gt)
}

pub fn frame_file(frame: usize) -> String {
    format!("{:06}.tnsr", frame + 1)
}

/// Writes `frames/NNNNNN.tnsr` (1-based) and `gt.csv` under `dir`.
pub fn write_sequence(seq: &Sequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    for (i, f) in seq.frames.iter().enumerate() {
        write_tnsr(f, frames.join(frame_file(i)))?;
    }
    fs::write(dir.join("gt.csv"), gt_to_csv(&seq.gt))?;
    Ok(())
}

pub fn read_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir.join("frames"))
        .map_err(|e| Error::Input(format!("{}: no frames directory: {}", dir.display(), e)))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".tnsr"))
        .collect();
    names.sort();
    for (i, n) in names.iter().enumerate() {
        if *n != frame_file(i) {
            return Err(Error::Input(format!("frame files not contiguous at {}", n)));
        }
    }
    let frames = names
        .iter()
        .map(|n| read_tnsr(dir.join("frames").join(n)))
        .collect::<Result<Vec<_>>>()?;
    let gt_text = fs::read_to_string(dir.join("gt.csv")).unwrap_or_default();
    let gt = gt_from_csv(&gt_text, frames.len())?;
    Ok(Sequence { frames, gt })
}

/// A dataset is either one sequence directory or a directory of them
/// (visited in name order).
pub fn sequence_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if root.join("frames").is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Input(format!("{}: {}", root.display(), e)))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("frames").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("{}: no sequences found", root.display())));
    }
    Ok(dirs)
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    sequence_dirs(root)?.iter().map(read_sequence).collect()
}

pub fn write_dataset(seqs: &[Sequence], root: impl AsRef<Path>) -> Result<()> {
    for (i, s) in seqs.iter().enumerate() {
        write_sequence(s, root.as_ref().join(format!("seq_{:03}", i)))?;
    }
    Ok(())
}
