//! Procedural glyph-face dataset: 7 expression classes drawn as anti-aliased
//! line art over a 68-point landmark template, with parameterized occluders
//! that corrupt both pixels and landmark confidences. Generation is a pure
//! function of config + seed.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, format_kv, get_parsed, parse_kv, KvMap};
use crate::error::{OadnError, Result};
use crate::landmark::{Landmark, LandmarkSet, NUM_LANDMARKS};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 7;

/// Per-class geometry ranges (lo, hi) for mouth curvature, mouth openness,
/// eye openness and eyebrow angle/height. Classes overlap in single
/// dimensions but every pair is disjoint in at least one, and top-face vs
/// bottom-face cues are redundant enough to survive partial occlusion.
pub const CLASS_GEOMETRY: [(&str, [(f64, f64); 4]); NUM_CLASSES] = [
    // Every pair of classes is separable from the mouth params alone
    // (curve, open) AND from the eye/brow params alone (eye, brow), with a
    // >= 0.15 margin between the ranges, so occluding either half of the
    // face still leaves every class identifiable from the visible half.
    ("neutral", [(-0.10, 0.05), (0.00, 0.10), (0.45, 0.60), (-0.05, 0.10)]),
    ("smile", [(0.60, 0.85), (0.25, 0.40), (0.45, 0.60), (0.30, 0.50)]),
    ("frown", [(-0.85, -0.60), (0.00, 0.10), (0.15, 0.30), (-0.40, -0.20)]),
    ("startled", [(-0.10, 0.05), (0.85, 1.00), (0.80, 0.95), (0.70, 0.90)]),
    ("cross", [(-0.45, -0.25), (0.00, 0.10), (0.15, 0.30), (-0.85, -0.60)]),
    ("averse", [(-0.45, -0.25), (0.25, 0.40), (0.15, 0.30), (-0.05, 0.10)]),
    ("worried", [(-0.10, 0.05), (0.55, 0.70), (0.80, 0.95), (0.30, 0.50)]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceSpec {
    pub class_id: usize,
    pub mouth_curve: f64,
    pub mouth_open: f64,
    pub eye_open: f64,
    pub brow: f64,
    pub jitter_seed: u64,
}

impl FaceSpec {
    pub fn geometry(&self) -> [f64; 4] {
        [self.mouth_curve, self.mouth_open, self.eye_open, self.brow]
    }
}

pub fn sample_spec(class_id: usize, rng: &mut ChaCha8Rng) -> Result<FaceSpec> {
    if class_id >= NUM_CLASSES {
        return Err(OadnError::Config(format!(
            "class {class_id} >= {NUM_CLASSES}"
        )));
    }
    let r = CLASS_GEOMETRY[class_id].1;
    Ok(FaceSpec {
        class_id,
        mouth_curve: rng.random_range(r[0].0..r[0].1),
        mouth_open: rng.random_range(r[1].0..r[1].1),
        eye_open: rng.random_range(r[2].0..r[2].1),
        brow: rng.random_range(r[3].0..r[3].1),
        jitter_seed: rng.random(),
    })
}

/// Canonical 68-point layout (64x64 reference scale) deformed by the
/// geometry params, before jitter.
fn template_landmarks(spec: &FaceSpec) -> Vec<(f64, f64)> {
    let (cx, cy) = (32.0, 33.0);
    let (fw, fh) = (20.0, 24.0);
    let mut pts = vec![(0.0, 0.0); NUM_LANDMARKS];

    // jaw 0..=16: lower face arc, ears to chin
    for i in 0..=16 {
        let phi = std::f64::consts::PI * i as f64 / 16.0;
        pts[i] = (cx - fw * phi.cos(), cy - 4.0 + (fh + 4.0) * phi.sin());
    }

    // brows 17..=21 (image-left / subject-right), 22..=26 mirrored.
    // positive brow raises the whole brow and the inner end further.
    let b = spec.brow;
    for j in 0..5 {
        let w = j as f64 / 4.0; // 0 at outer end, 1 at inner end
        let x = cx - 15.0 + 10.0 * w;
        let y = cy - 13.0 - 2.0 * b - 3.0 * b * w;
        pts[17 + j] = (x, y);
        pts[26 - j] = (2.0 * cx - x, y);
    }

    // eyes: 36..=41 right (image-left), 42..=47 left
    let eh = 2.6 * spec.eye_open.max(0.05);
    let eye = |ex: f64, ey: f64| {
        [
            (ex - 4.5, ey),
            (ex - 2.0, ey - eh),
            (ex + 2.0, ey - eh),
            (ex + 4.5, ey),
            (ex + 2.0, ey + eh),
            (ex - 2.0, ey + eh),
        ]
    };
    for (j, p) in eye(cx - 9.0, cy - 6.0).into_iter().enumerate() {
        pts[36 + j] = p;
    }
    // mirror so 42 is the inner corner and 45 the outer one
    let right = eye(cx - 9.0, cy - 6.0);
    let flip = |p: (f64, f64)| (2.0 * cx - p.0, p.1);
    pts[42] = flip(right[3]);
    pts[43] = flip(right[2]);
    pts[44] = flip(right[1]);
    pts[45] = flip(right[0]);
    pts[46] = flip(right[5]);
    pts[47] = flip(right[4]);

    // nose bridge 27..=30 and nostril row 31..=35
    for j in 0..4 {
        pts[27 + j] = (cx, cy - 8.0 + 3.6 * j as f64);
    }
    for j in 0..5 {
        pts[31 + j] = (cx - 4.0 + 2.0 * j as f64, cy + 7.0);
    }

    // mouth: corners lift with curvature, lips separate with openness
    let my = cy + 14.0;
    let corner_y = my - 3.5 * spec.mouth_curve;
    let gap = 1.2 + 4.5 * spec.mouth_open;
    let (yu, yl) = (my - gap / 2.0, my + gap / 2.0);
    pts[48] = (cx - 7.0, corner_y);
    pts[54] = (cx + 7.0, corner_y);
    pts[49] = (cx - 4.7, (yu + corner_y) / 2.0 - 0.3);
    pts[50] = (cx - 2.2, yu - 0.3);
    pts[51] = (cx, yu - 0.4);
    pts[52] = (cx + 2.2, yu - 0.3);
    pts[53] = (cx + 4.7, (yu + corner_y) / 2.0 - 0.3);
    pts[55] = (cx + 4.7, (yl + corner_y) / 2.0 + 0.3);
    pts[56] = (cx + 2.2, yl + 0.3);
    pts[57] = (cx, yl + 0.4);
    pts[58] = (cx - 2.2, yl + 0.3);
    pts[59] = (cx - 4.7, (yl + corner_y) / 2.0 + 0.3);
    pts[60] = (cx - 5.2, my - 2.8 * spec.mouth_curve);
    pts[61] = (cx - 2.0, yu + 0.4);
    pts[62] = (cx, yu + 0.5);
    pts[63] = (cx + 2.0, yu + 0.4);
    pts[64] = (cx + 5.2, my - 2.8 * spec.mouth_curve);
    pts[65] = (cx + 2.0, yl - 0.4);
    pts[66] = (cx, yl - 0.5);
    pts[67] = (cx - 2.0, yl - 0.4);

    pts
}

struct Jitter {
    dx: f64,
    dy: f64,
    scale: f64,
    noise: Vec<(f64, f64)>,
}

impl Jitter {
    fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Jitter {
            dx: rng.random_range(-1.5..1.5),
            dy: rng.random_range(-1.5..1.5),
            scale: rng.random_range(0.95..1.05),
            noise: (0..NUM_LANDMARKS)
                .map(|_| (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)))
                .collect(),
        }
    }

    fn global(&self, p: (f64, f64), s: f64) -> (f64, f64) {
        let (cx, cy) = (32.0 * s, 33.0 * s);
        (
            (p.0 * s - cx) * self.scale + cx + self.dx * s,
            (p.1 * s - cy) * self.scale + cy + self.dy * s,
        )
    }
}

fn draw_segment(img: &mut [f64], size: usize, a: (f64, f64), b: (f64, f64), gain: f64) {
    let x0 = (a.0.min(b.0).floor() as isize - 2).max(0) as usize;
    let x1 = ((a.0.max(b.0).ceil() as isize + 2).max(0) as usize).min(size.saturating_sub(1));
    let y0 = (a.1.min(b.1).floor() as isize - 2).max(0) as usize;
    let y1 = ((a.1.max(b.1).ceil() as isize + 2).max(0) as usize).min(size.saturating_sub(1));
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (vx * vx + vy * vy).max(1e-12);
    for r in y0..=y1 {
        for c in x0..=x1 {
            let (px, py) = (c as f64, r as f64);
            let t = (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0);
            let (dx, dy) = (px - (a.0 + t * vx), py - (a.1 + t * vy));
            let dist = (dx * dx + dy * dy).sqrt();
            let v = (1.25 - dist / gain).clamp(0.0, 1.0);
            let cell = &mut img[r * size + c];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

fn draw_chain(img: &mut [f64], size: usize, pts: &[(f64, f64)], closed: bool, gain: f64) {
    for w in pts.windows(2) {
        draw_segment(img, size, w[0], w[1], gain);
    }
    if closed && pts.len() > 2 {
        draw_segment(img, size, pts[pts.len() - 1], pts[0], gain);
    }
}

/// Renders one face. Deterministic for a fixed spec (including its jitter
/// seed); landmark confidences are left at 1.0 for the caller to assign.
pub fn generate_face(spec: &FaceSpec, size: usize) -> Result<(Tensor, LandmarkSet)> {
    let s = size as f64 / 64.0;
    let jitter = Jitter::sample(spec.jitter_seed);
    let template = template_landmarks(spec);
    let landmarks: Vec<(f64, f64)> = template
        .iter()
        .zip(&jitter.noise)
        .map(|(&p, &(nx, ny))| {
            let g = jitter.global(p, s);
            (g.0 + nx * s, g.1 + ny * s)
        })
        .collect();

    let mut img = vec![0.0; size * size];
    let gain = 0.9 * s.max(0.75);
    let seg = |r: std::ops::RangeInclusive<usize>| -> Vec<(f64, f64)> {
        r.map(|i| landmarks[i]).collect()
    };
    draw_chain(&mut img, size, &seg(0..=16), false, gain);
    // forehead arc (not a landmark chain): upper face ellipse under the
    // same global transform
    let arc: Vec<(f64, f64)> = (0..=12)
        .map(|i| {
            let phi = std::f64::consts::PI * (1.0 + i as f64 / 12.0);
            jitter.global((32.0 - 20.0 * phi.cos(), 33.0 - 4.0 + 22.0 * phi.sin()), s)
        })
        .collect();
    draw_chain(&mut img, size, &arc, false, gain);
    draw_chain(&mut img, size, &seg(17..=21), false, gain);
    draw_chain(&mut img, size, &seg(22..=26), false, gain);
    draw_chain(&mut img, size, &seg(27..=30), false, gain);
    draw_chain(&mut img, size, &seg(31..=35), false, gain);
    draw_chain(&mut img, size, &seg(36..=41), true, gain);
    draw_chain(&mut img, size, &seg(42..=47), true, gain);
    draw_chain(&mut img, size, &seg(48..=59), true, gain);
    draw_chain(&mut img, size, &seg(60..=67), true, gain);

    let points = landmarks
        .into_iter()
        .map(|(x, y)| Landmark { x, y, conf: 1.0 })
        .collect();
    Ok((
        Tensor::new(vec![size, size], img)?,
        LandmarkSet::new(points, (size, size))?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccluderShape {
    Rectangle,
    Ellipse,
    Band,
}

impl OccluderShape {
    fn name(&self) -> &'static str {
        match self {
            OccluderShape::Rectangle => "rectangle",
            OccluderShape::Ellipse => "ellipse",
            OccluderShape::Band => "band",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(OccluderShape::Rectangle),
            "ellipse" => Ok(OccluderShape::Ellipse),
            "band" => Ok(OccluderShape::Band),
            _ => Err(OadnError::Format(format!("unknown occluder shape {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccluderFill {
    Gray,
    Noise,
    Stripes,
}

impl OccluderFill {
    fn name(&self) -> &'static str {
        match self {
            OccluderFill::Gray => "gray",
            OccluderFill::Noise => "noise",
            OccluderFill::Stripes => "stripes",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(OccluderFill::Gray),
            "noise" => Ok(OccluderFill::Noise),
            "stripes" => Ok(OccluderFill::Stripes),
            _ => Err(OadnError::Format(format!("unknown occluder fill {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccluderSpec {
    pub shapes: Vec<OccluderShape>,
    pub fills: Vec<OccluderFill>,
    /// Occluder area as a fraction of the face bounding box.
    pub min_frac: f64,
    pub max_frac: f64,
    pub probability: f64,
}

impl Default for OccluderSpec {
    fn default() -> Self {
        OccluderSpec {
            shapes: vec![
                OccluderShape::Rectangle,
                OccluderShape::Ellipse,
                OccluderShape::Band,
            ],
            fills: vec![OccluderFill::Gray, OccluderFill::Noise, OccluderFill::Stripes],
            min_frac: 0.15,
            max_frac: 0.45,
            probability: 1.0,
        }
    }
}

/// Pixel bounding box, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccluderInfo {
    pub bbox: BBox,
    pub shape: OccluderShape,
    pub fill: OccluderFill,
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    /// H x W grayscale, values in [0,1].
    pub image: Tensor,
    pub label: usize,
    pub landmarks: LandmarkSet,
    pub occluder: Option<OccluderInfo>,
}

fn face_bbox(lms: &LandmarkSet) -> (f64, f64, f64, f64) {
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &lms.points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    (x0, y0, x1, y1)
}

fn paint_occluder(image: &mut Tensor, info: &OccluderInfo, rng: &mut ChaCha8Rng) {
    let size = image.shape()[1];
    let b = info.bbox;
    // stripe fill = parallel bright arcs sharing one curvature, same width
    // and falloff as the face's own line art; the curvature range matches
    // the mouth/brow curves so the stripes read as plausible face strokes
    let sx = (b.x0 + b.x1) as f64 / 2.0 + rng.random_range(-2.0..2.0);
    let sy = rng.random_range(b.y0 as f64..(b.y1 as f64).max(b.y0 as f64 + 1.0));
    let mag = rng.random_range(0.02..0.04);
    let a = if rng.random_range(0.0..1.0) < 0.5 { mag } else { -mag };
    let spacing = rng.random_range(2.5..4.0);
    let n_strokes = 2 + rng.random_range(0..2usize);
    let strokes: Vec<(f64, f64, f64)> = (0..n_strokes)
        .map(|k| (sx, sy + k as f64 * spacing, a))
        .collect();
    let (ecx, ecy) = (
        (b.x0 + b.x1) as f64 / 2.0,
        (b.y0 + b.y1) as f64 / 2.0,
    );
    let (erx, ery) = (
        ((b.x1 - b.x0) as f64 / 2.0).max(0.5),
        ((b.y1 - b.y0) as f64 / 2.0).max(0.5),
    );
    for r in b.y0..b.y1.min(image.shape()[0]) {
        for c in b.x0..b.x1.min(size) {
            if info.shape == OccluderShape::Ellipse {
                let dx = (c as f64 + 0.5 - ecx) / erx;
                let dy = (r as f64 + 0.5 - ecy) / ery;
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            // faces are bright strokes on a dark field, so the non-gray
            // fills mimic stroke-like clutter a clean-trained net will
            // mistake for facial features
            image.data_mut()[r * size + c] = match info.fill {
                OccluderFill::Gray => 0.5,
                OccluderFill::Noise => {
                    if rng.random_range(0.0..1.0) < 0.25 {
                        rng.random_range(0.75..1.0)
                    } else {
                        rng.random_range(0.0..0.15)
                    }
                }
                OccluderFill::Stripes => {
                    let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                    let mut v: f64 = 0.0;
                    for &(sx, sy, a) in &strokes {
                        let d = (y - (sy + a * (x - sx) * (x - sx))).abs();
                        v = v.max((1.25 - d).clamp(0.0, 1.0));
                    }
                    v.max(0.05)
                }
            };
        }
    }
}

/// Confidence bands: occluded landmarks fall strictly below 0.3, visible
/// ones sit at or above 0.7, straddling the T = 0.6 default with margin.
pub const OCCLUDED_CONF_MAX: f64 = 0.3;
pub const VISIBLE_CONF_MIN: f64 = 0.7;

pub fn assign_clean_confidences(lms: &mut LandmarkSet, rng: &mut ChaCha8Rng) {
    for p in &mut lms.points {
        p.conf = rng.random_range(VISIBLE_CONF_MIN..1.0);
    }
}

/// Paints the occluder at a fixed bbox and depresses the confidence of every
/// landmark whose coordinates fall inside it.
pub fn apply_occlusion_at(record: &mut SampleRecord, info: OccluderInfo, rng: &mut ChaCha8Rng) {
    paint_occluder(&mut record.image, &info, rng);
    for p in &mut record.landmarks.points {
        if info.bbox.contains(p.x, p.y) {
            p.conf = rng.random_range(0.0..OCCLUDED_CONF_MAX * 0.999);
        }
    }
    record.occluder = Some(info);
}

/// Samples an occluder per the spec (or leaves the record clean when the
/// probability coin says so) and applies it.
pub fn apply_occlusion(record: &mut SampleRecord, spec: &OccluderSpec, rng: &mut ChaCha8Rng) {
    if spec.probability <= 0.0 || rng.random_range(0.0..1.0) >= spec.probability {
        return;
    }
    let (h, w) = (record.image.shape()[0], record.image.shape()[1]);
    let (fx0, fy0, fx1, fy1) = face_bbox(&record.landmarks);
    let face_area = ((fx1 - fx0) * (fy1 - fy0)).max(1.0);
    let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
    let fill = spec.fills[rng.random_range(0..spec.fills.len())];
    let frac = rng.random_range(spec.min_frac..spec.max_frac);
    let area = frac * face_area;
    let (bw, bh) = match shape {
        OccluderShape::Band => {
            let bw = fx1 - fx0;
            (bw, (area / bw).max(2.0))
        }
        _ => {
            let aspect = rng.random_range(0.5..2.0);
            let bw = (area * aspect).sqrt();
            (bw, area / bw)
        }
    };
    // center on an informative region (eyes/brows or mouth) with jitter so
    // occlusions actually threaten the class signal rather than landing on
    // blank cheek/forehead area; the bbox always intersects the face
    let anchor = if rng.random_range(0.0..1.0) < 0.5 {
        rng.random_range(17..48) // brows + eyes
    } else {
        rng.random_range(48..68) // mouth
    };
    let (ax, ay) = {
        let p = &record.landmarks.points[anchor];
        (p.x, p.y)
    };
    let cx = (ax + rng.random_range(-3.0..3.0)).clamp(fx0, fx1);
    let cy = (ay + rng.random_range(-3.0..3.0)).clamp(fy0, fy1);
    let clampi = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
    let bbox = BBox {
        x0: clampi(cx - bw / 2.0, w - 1),
        y0: clampi(cy - bh / 2.0, h - 1),
        x1: clampi(cx + bw / 2.0, w).max(1),
        y1: clampi(cy + bh / 2.0, h).max(1),
    };
    apply_occlusion_at(record, OccluderInfo { bbox, shape, fill }, rng);
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub occlude_train: f64,
    pub occlude_test: f64,
    pub image_size: usize,
    pub seed: u64,
    pub occluder: OccluderSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: NUM_CLASSES,
            train_per_class: 200,
            test_per_class: 50,
            occlude_train: 0.0,
            occlude_test: 1.0,
            image_size: 64,
            seed: 7,
            occluder: OccluderSpec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

fn generate_record(
    class_id: usize,
    image_size: usize,
    occlusion: &OccluderSpec,
    occlude_prob: f64,
    seed: u64,
) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = sample_spec(class_id, &mut rng)?;
    let (image, mut landmarks) = generate_face(&spec, image_size)?;
    assign_clean_confidences(&mut landmarks, &mut rng);
    let mut record = SampleRecord {
        image,
        label: class_id,
        landmarks,
        occluder: None,
    };
    let spec = OccluderSpec {
        probability: occlude_prob,
        ..occlusion.clone()
    };
    apply_occlusion(&mut record, &spec, &mut rng);
    Ok(record)
}

fn generate_split(
    cfg: &DatasetConfig,
    split: &str,
    per_class: usize,
    occlude_prob: f64,
) -> Result<Vec<SampleRecord>> {
    // round-robin over classes keeps any prefix roughly balanced
    (0..per_class * cfg.classes)
        .map(|i| {
            let class_id = i % cfg.classes;
            let seed = derive_seed(cfg.seed, &format!("{split}/{i}"));
            generate_record(class_id, cfg.image_size, &cfg.occluder, occlude_prob, seed)
        })
        .collect()
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(OadnError::Config("per-class counts must be >= 1".into()));
    }
    if cfg.classes == 0 || cfg.classes > NUM_CLASSES {
        return Err(OadnError::Config(format!(
            "classes must be in 1..={NUM_CLASSES}"
        )));
    }
    Ok(Dataset {
        train: generate_split(cfg, "train", cfg.train_per_class, cfg.occlude_train)?,
        test: generate_split(cfg, "test", cfg.test_per_class, cfg.occlude_test)?,
        config: cfg.clone(),
    })
}

impl DatasetConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("classes".into(), self.classes.to_string());
        kv.insert("train_per_class".into(), self.train_per_class.to_string());
        kv.insert("test_per_class".into(), self.test_per_class.to_string());
        kv.insert("occlude_train".into(), self.occlude_train.to_string());
        kv.insert("occlude_test".into(), self.occlude_test.to_string());
        kv.insert("image_size".into(), self.image_size.to_string());
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("occluder_min_frac".into(), self.occluder.min_frac.to_string());
        kv.insert("occluder_max_frac".into(), self.occluder.max_frac.to_string());
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = DatasetConfig {
            classes: get_parsed(kv, "classes")?,
            train_per_class: get_parsed(kv, "train_per_class")?,
            test_per_class: get_parsed(kv, "test_per_class")?,
            occlude_train: get_parsed(kv, "occlude_train")?,
            occlude_test: get_parsed(kv, "occlude_test")?,
            image_size: get_parsed(kv, "image_size")?,
            seed: get_parsed(kv, "seed")?,
            occluder: OccluderSpec::default(),
        };
        cfg.occluder.min_frac = get_parsed(kv, "occluder_min_frac")?;
        cfg.occluder.max_frac = get_parsed(kv, "occluder_max_frac")?;
        Ok(cfg)
    }
}

fn split_file_stems(split: &str) -> [String; 4] {
    [
        format!("{split}.images.bin"),
        format!("{split}.landmarks.txt"),
        format!("{split}.labels.txt"),
        format!("{split}.occluders.txt"),
    ]
}

fn save_split(dir: &Path, split: &str, records: &[SampleRecord]) -> Result<()> {
    let [images_f, lms_f, labels_f, occ_f] = split_file_stems(split);
    let n = records.len();
    let (h, w) = (records[0].image.shape()[0], records[0].image.shape()[1]);
    let mut stacked = Vec::with_capacity(n * h * w);
    let mut lms_text = String::new();
    let mut labels_text = String::new();
    let mut occ_text = String::new();
    for r in records {
        stacked.extend_from_slice(r.image.data());
        lms_text.push_str(&r.landmarks.to_record());
        labels_text.push_str(&format!("{}\n", r.label));
        match &r.occluder {
            None => occ_text.push_str("none\n"),
            Some(o) => occ_text.push_str(&format!(
                "{} {} {} {} {} {}\n",
                o.bbox.x0,
                o.bbox.y0,
                o.bbox.x1,
                o.bbox.y1,
                o.shape.name(),
                o.fill.name()
            )),
        }
    }
    let images = Tensor::new(vec![n, h, w], stacked)?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| OadnError::io(format!("writing {}", path.display()), e))
    };
    write(&images_f, &images.to_bytes())?;
    write(&lms_f, lms_text.as_bytes())?;
    write(&labels_f, labels_text.as_bytes())?;
    write(&occ_f, occ_text.as_bytes())
}

fn load_split(dir: &Path, split: &str, image_size: usize) -> Result<Vec<SampleRecord>> {
    let [images_f, lms_f, labels_f, occ_f] = split_file_stems(split);
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| OadnError::io(format!("reading {}", path.display()), e))
    };
    let images = Tensor::from_bytes(&read(&images_f)?)?;
    let [n, h, w] = *images.shape() else {
        return Err(OadnError::Format(format!(
            "{images_f}: expected [n,h,w], got {:?}",
            images.shape()
        )));
    };
    if h != image_size || w != image_size {
        return Err(OadnError::Format(format!(
            "{images_f}: image size {h}x{w} does not match manifest {image_size}"
        )));
    }
    let lms_text = String::from_utf8(read(&lms_f)?)
        .map_err(|e| OadnError::Format(format!("{lms_f}: {e}")))?;
    let lms_lines: Vec<&str> = lms_text.lines().collect();
    let labels_text = String::from_utf8(read(&labels_f)?)
        .map_err(|e| OadnError::Format(format!("{labels_f}: {e}")))?;
    let occ_text = String::from_utf8(read(&occ_f)?)
        .map_err(|e| OadnError::Format(format!("{occ_f}: {e}")))?;
    if lms_lines.len() != n * NUM_LANDMARKS {
        return Err(OadnError::Format(format!(
            "{lms_f}: expected {} lines, got {}",
            n * NUM_LANDMARKS,
            lms_lines.len()
        )));
    }
    let mut records = Vec::with_capacity(n);
    let labels: Vec<&str> = labels_text.lines().collect();
    let occs: Vec<&str> = occ_text.lines().collect();
    if labels.len() != n || occs.len() != n {
        return Err(OadnError::Format(format!(
            "{split}: label/occluder line counts do not match {n} records"
        )));
    }
    for i in 0..n {
        let image = Tensor::new(
            vec![h, w],
            images.data()[i * h * w..(i + 1) * h * w].to_vec(),
        )?;
        let landmarks = LandmarkSet::parse_record(
            &lms_lines[i * NUM_LANDMARKS..(i + 1) * NUM_LANDMARKS],
            (h, w),
        )?;
        let label: usize = labels[i]
            .trim()
            .parse()
            .map_err(|e| OadnError::Format(format!("{labels_f} line {}: {e}", i + 1)))?;
        let occluder = match occs[i].trim() {
            "none" => None,
            line => {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 6 {
                    return Err(OadnError::Format(format!("{occ_f} line {}: {line:?}", i + 1)));
                }
                let num = |s: &str| -> Result<usize> {
                    s.parse()
                        .map_err(|e| OadnError::Format(format!("{occ_f}: {s:?}: {e}")))
                };
                Some(OccluderInfo {
                    bbox: BBox {
                        x0: num(parts[0])?,
                        y0: num(parts[1])?,
                        x1: num(parts[2])?,
                        y1: num(parts[3])?,
                    },
                    shape: OccluderShape::parse(parts[4])?,
                    fill: OccluderFill::parse(parts[5])?,
                })
            }
        };
        records.push(SampleRecord {
            image,
            label,
            landmarks,
            occluder,
        });
    }
    Ok(records)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| OadnError::io(format!("creating {}", dir.display()), e))?;
    let kv = ds.config.to_kv();
    let manifest = format_kv(&kv);
    let path = dir.join("manifest.txt");
    fs::write(&path, &manifest)
        .map_err(|e| OadnError::io(format!("writing {}", path.display()), e))?;
    save_split(dir, "train", &ds.train)?;
    save_split(dir, "test", &ds.test)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&path)
        .map_err(|e| OadnError::io(format!("reading {}", path.display()), e))?;
    let config = DatasetConfig::from_kv(&parse_kv(&manifest)?)?;
    Ok(Dataset {
        train: load_split(dir, "train", config.image_size)?,
        test: load_split(dir, "test", config.image_size)?,
        config,
    })
}

/// The invariant every generated record satisfies: landmarks inside an
/// applied occluder bbox have conf < 0.3, all others conf >= 0.7.
pub fn confidence_invariant_holds(record: &SampleRecord) -> bool {
    record.landmarks.points.iter().all(|p| match &record.occluder {
        Some(o) if o.bbox.contains(p.x, p.y) => p.conf < OCCLUDED_CONF_MAX,
        _ => p.conf >= VISIBLE_CONF_MIN,
    })
}
