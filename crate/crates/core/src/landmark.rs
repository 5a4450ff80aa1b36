//! Landmark-guided attention: 68 detected points with confidences are mapped
//! to 24 interest points, thresholded, and rendered as a stack of Gaussian
//! attention maps at feature-map resolution. Occluded points get all-zero
//! maps, so the regions they cover cannot influence the attention branch.

use crate::error::{OadnError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_LANDMARKS: usize = 68;
pub const NUM_INTEREST_POINTS: usize = 24;

/// Gaussian width in pixels at a 224x224 reference scale, scaled
/// proportionally with the actual image size.
pub const SIGMA_AT_224: f64 = 7.0;

pub fn default_sigma(image_size: (usize, usize)) -> f64 {
    SIGMA_AT_224 * image_size.0.min(image_size.1) as f64 / 224.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub conf: f64,
}

/// The 68 detected points of one face. Coordinates may fall outside the
/// image (detectors do that); the heatmap renderer clips.
#[derive(Debug, Clone)]
pub struct LandmarkSet {
    pub points: Vec<Landmark>,
    /// (H, W) in pixels.
    pub image_size: (usize, usize),
}

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>, image_size: (usize, usize)) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(OadnError::Shape(format!(
                "landmark set needs {NUM_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.conf) {
                return Err(OadnError::Config(format!(
                    "landmark {i} confidence {} outside [0,1]",
                    p.conf
                )));
            }
        }
        Ok(LandmarkSet { points, image_size })
    }

    /// Mirrors x-coordinates and permutes indices per the flip table, so
    /// left/right-symmetric landmarks swap roles.
    pub fn flipped(&self, perm: &FlipTable) -> LandmarkSet {
        let w = self.image_size.1 as f64;
        let points = perm
            .0
            .iter()
            .map(|&src| {
                let p = self.points[src];
                Landmark {
                    x: (w - 1.0) - p.x,
                    y: p.y,
                    conf: p.conf,
                }
            })
            .collect();
        LandmarkSet {
            points,
            image_size: self.image_size,
        }
    }

    /// One record: 68 lines of `x y conf`.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            s.push_str(&format!("{} {} {}\n", p.x, p.y, p.conf));
        }
        s
    }

    pub fn parse_record(lines: &[&str], image_size: (usize, usize)) -> Result<Self> {
        if lines.len() != NUM_LANDMARKS {
            return Err(OadnError::Format(format!(
                "landmark record needs {NUM_LANDMARKS} lines, got {}",
                lines.len()
            )));
        }
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for line in lines {
            let mut it = line.split_whitespace();
            let mut next = || -> Result<f64> {
                it.next()
                    .ok_or_else(|| OadnError::Format(format!("short landmark line: {line:?}")))?
                    .parse()
                    .map_err(|e| OadnError::Format(format!("bad landmark number in {line:?}: {e}")))
            };
            points.push(Landmark {
                x: next()?,
                y: next()?,
                conf: next()?,
            });
        }
        LandmarkSet::new(points, image_size)
    }
}

/// Horizontal-flip index permutation over the 68 landmarks.
#[derive(Debug, Clone)]
pub struct FlipTable(pub Vec<usize>);

impl FlipTable {
    pub fn parse(text: &str) -> Result<Self> {
        let perm: Vec<usize> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.parse::<usize>()
                    .map_err(|e| OadnError::Format(format!("flip table line {l:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if perm.len() != NUM_LANDMARKS {
            return Err(OadnError::Format(format!(
                "flip table needs {NUM_LANDMARKS} entries, got {}",
                perm.len()
            )));
        }
        let mut seen = vec![false; NUM_LANDMARKS];
        for &i in &perm {
            if i >= NUM_LANDMARKS || seen[i] {
                return Err(OadnError::Format("flip table is not a permutation".into()));
            }
            seen[i] = true;
        }
        Ok(FlipTable(perm))
    }

    pub fn default_table() -> Self {
        FlipTable::parse(include_str!("../data/landmark_flip.txt"))
            .expect("bundled flip table is valid")
    }
}

#[derive(Debug, Clone)]
pub enum PointRule {
    Select(usize),
    Recompute(Vec<usize>),
}

/// Which landmarks make up each of the 24 interest points. Shipped as a
/// plain-text data file so the choice stays auditable and swappable.
#[derive(Debug, Clone)]
pub struct PointMapping {
    pub rules: Vec<PointRule>,
}

impl PointMapping {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let kind = it.next().unwrap();
            let idx: Vec<usize> = it
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| OadnError::Format(format!("mapping line {line:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            for &i in &idx {
                if i >= NUM_LANDMARKS {
                    return Err(OadnError::Config(format!(
                        "mapping references landmark {i} >= {NUM_LANDMARKS}"
                    )));
                }
            }
            match kind {
                "select" if idx.len() == 1 => rules.push(PointRule::Select(idx[0])),
                "recompute" if !idx.is_empty() => rules.push(PointRule::Recompute(idx)),
                _ => {
                    return Err(OadnError::Format(format!(
                        "bad mapping line: {line:?}"
                    )))
                }
            }
        }
        if rules.len() != NUM_INTEREST_POINTS {
            return Err(OadnError::Config(format!(
                "mapping needs {NUM_INTEREST_POINTS} points, got {}",
                rules.len()
            )));
        }
        Ok(PointMapping { rules })
    }

    pub fn default_mapping() -> Self {
        PointMapping::parse(include_str!("../data/interest_points.txt"))
            .expect("bundled interest point mapping is valid")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InterestPoint {
    pub x: f64,
    pub y: f64,
    pub conf: f64,
    pub visible: bool,
}

#[derive(Debug, Clone)]
pub struct InterestPointSet {
    pub points: Vec<InterestPoint>,
    pub threshold_used: f64,
}

/// Derives the 24 interest points. Selected points copy their source
/// landmark; recomputed points take the coordinate mean and the minimum
/// confidence of their constituents. All points start visible.
pub fn compute_interest_points(
    lms: &LandmarkSet,
    mapping: &PointMapping,
) -> Result<InterestPointSet> {
    let points = mapping
        .rules
        .iter()
        .map(|rule| match rule {
            PointRule::Select(i) => {
                let p = lms.points[*i];
                InterestPoint {
                    x: p.x,
                    y: p.y,
                    conf: p.conf,
                    visible: true,
                }
            }
            PointRule::Recompute(idx) => {
                let n = idx.len() as f64;
                let (mut x, mut y, mut conf) = (0.0, 0.0, f64::INFINITY);
                for &i in idx {
                    let p = lms.points[i];
                    x += p.x;
                    y += p.y;
                    conf = conf.min(p.conf);
                }
                InterestPoint {
                    x: x / n,
                    y: y / n,
                    conf,
                    visible: true,
                }
            }
        })
        .collect();
    Ok(InterestPointSet {
        points,
        threshold_used: 0.0,
    })
}

/// Confidence thresholding: a point stays visible iff `conf >= t`
/// (boundary inclusive). Coordinates are retained for provenance.
pub fn threshold_points(pts: &InterestPointSet, t: f64) -> Result<InterestPointSet> {
    if !(0.0..=1.0).contains(&t) {
        return Err(OadnError::Config(format!("threshold {t} outside [0,1]")));
    }
    let points = pts
        .points
        .iter()
        .map(|p| InterestPoint {
            visible: p.conf >= t,
            ..*p
        })
        .collect();
    Ok(InterestPointSet {
        points,
        threshold_used: t,
    })
}

/// Unit-peak 2D Gaussian centered at `(x, y)`, evaluated on the pixel grid.
pub fn render_heatmap(point: (f64, f64), image_size: (usize, usize), sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(OadnError::Config(format!("sigma {sigma} must be > 0")));
    }
    let (h, w) = image_size;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let dy = r as f64 - point.1;
        for c in 0..w {
            let dx = c as f64 - point.0;
            data.push((-(dx * dx + dy * dy) * inv).exp());
        }
    }
    Tensor::new(vec![h, w], data)
}

/// Bilinear downsampling, align-corners-false: output pixel centers map to
/// `(i + 0.5) * scale - 0.5` in input coordinates, edges clamped.
pub fn downsample_map(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let [h, w] = *map.shape() else {
        return Err(OadnError::Shape(format!(
            "downsample_map expects [h,w], got {:?}",
            map.shape()
        )));
    };
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(OadnError::Shape("downsample target has a zero dim".into()));
    }
    if th > h || tw > w {
        return Err(OadnError::Shape(format!(
            "downsample target ({th},{tw}) exceeds source ({h},{w})"
        )));
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let src = map.data();
    let mut out = Vec::with_capacity(th * tw);
    for r in 0..th {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for c in 0..tw {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    Tensor::new(vec![th, tw], out)
}

/// The 24 attention maps at feature resolution. Invisible points get
/// identically-zero maps.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub maps: Vec<Tensor>,
    pub sigma: f64,
}

impl AttentionStack {
    pub fn feat_size(&self) -> (usize, usize) {
        let s = self.maps[0].shape();
        (s[0], s[1])
    }
}

pub fn build_attention_stack(
    pts: &InterestPointSet,
    image_size: (usize, usize),
    feat_size: (usize, usize),
    sigma: f64,
) -> Result<AttentionStack> {
    let maps = pts
        .points
        .iter()
        .map(|p| {
            if p.visible {
                let full = render_heatmap((p.x, p.y), image_size, sigma)?;
                downsample_map(&full, feat_size)
            } else {
                Ok(Tensor::zeros(&[feat_size.0, feat_size.1]))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionStack { maps, sigma })
}

/// Gates the feature map by each attention map: `F_i = F * A_i` with the
/// single-channel map broadcast over channels. Returns the M gated maps.
pub fn modulate(tape: &mut Tape, feat: Var, stack: &AttentionStack) -> Result<Vec<Var>> {
    let fs = tape.value(feat).shape().to_vec();
    let (h_f, w_f) = stack.feat_size();
    if fs.len() != 3 || fs[1] != h_f || fs[2] != w_f {
        return Err(OadnError::Shape(format!(
            "modulate: feature {:?} vs attention ({h_f},{w_f})",
            fs
        )));
    }
    stack
        .maps
        .iter()
        .map(|m| {
            let a = tape.leaf(m.clone(), false);
            tape.elementwise_mul(feat, a)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_set(conf: f64) -> LandmarkSet {
        let points = (0..NUM_LANDMARKS)
            .map(|i| Landmark {
                x: (i % 8) as f64 * 8.0,
                y: (i / 8) as f64 * 7.0,
                conf,
            })
            .collect();
        LandmarkSet::new(points, (64, 64)).unwrap()
    }

    #[test]
    fn selected_points_copy_their_landmark() {
        let lms = uniform_set(0.8);
        let mapping = PointMapping::default_mapping();
        let pts = compute_interest_points(&lms, &mapping).unwrap();
        assert_eq!(pts.points.len(), NUM_INTEREST_POINTS);
        for (rule, p) in mapping.rules.iter().zip(&pts.points) {
            if let PointRule::Select(i) = rule {
                let src = lms.points[*i];
                assert_eq!((p.x, p.y, p.conf), (src.x, src.y, src.conf));
            }
        }
    }

    #[test]
    fn recomputed_point_takes_mean_and_min_conf() {
        let mut lms = uniform_set(0.9);
        lms.points[1] = Landmark { x: 0.0, y: 0.0, conf: 0.9 };
        lms.points[31] = Landmark { x: 10.0, y: 20.0, conf: 0.4 };
        let mapping = PointMapping::parse(
            &(std::iter::repeat_n("select 0", 23)
                .chain(std::iter::once("recompute 1 31"))
                .collect::<Vec<_>>()
                .join("\n")),
        )
        .unwrap();
        let pts = compute_interest_points(&lms, &mapping).unwrap();
        let p = pts.points[23];
        assert_eq!((p.x, p.y), (5.0, 10.0));
        assert_eq!(p.conf, 0.4);
    }

    #[test]
    fn mapping_rejects_out_of_range_index() {
        let text = std::iter::repeat_n("select 68", 24)
            .collect::<Vec<_>>()
            .join("\n");
        assert!(matches!(
            PointMapping::parse(&text),
            Err(OadnError::Config(_))
        ));
    }

    #[test]
    fn threshold_is_inclusive() {
        let lms = uniform_set(0.6);
        let pts = compute_interest_points(&lms, &PointMapping::default_mapping()).unwrap();
        let out = threshold_points(&pts, 0.6).unwrap();
        assert!(out.points.iter().all(|p| p.visible));
        let out = threshold_points(&pts, 0.6000001).unwrap();
        assert!(out.points.iter().all(|p| !p.visible));
    }

    #[test]
    fn threshold_cases_from_default() {
        let mk = |conf: f64| {
            let lms = uniform_set(conf);
            compute_interest_points(&lms, &PointMapping::default_mapping()).unwrap()
        };
        assert!(threshold_points(&mk(0.7), 0.6).unwrap().points[0].visible);
        assert!(!threshold_points(&mk(0.59), 0.6).unwrap().points[0].visible);
    }

    #[test]
    fn heatmap_peak_distance_and_symmetry() {
        let sigma = 3.0;
        let m = render_heatmap((8.0, 8.0), (17, 17), sigma).unwrap();
        assert_eq!(m.data()[8 * 17 + 8], 1.0);
        // one sigma away along an axis
        let v = m.data()[8 * 17 + 11];
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        // radial symmetry
        assert_eq!(m.data()[8 * 17 + 5], m.data()[8 * 17 + 11]);
        assert_eq!(m.data()[5 * 17 + 8], m.data()[11 * 17 + 8]);
    }

    #[test]
    fn heatmap_outside_image_is_near_zero_tail() {
        let m = render_heatmap((-50.0, -50.0), (16, 16), 2.0).unwrap();
        assert!(m.data().iter().all(|&v| v >= 0.0 && v < 1e-100));
    }

    #[test]
    fn downsample_preserves_constants_and_zeros() {
        let c = Tensor::full(&[8, 8], 0.37);
        let d = downsample_map(&c, (3, 5)).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
        let z = Tensor::zeros(&[8, 8]);
        let d = downsample_map(&z, (2, 2)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_4x4_to_2x2_matches_interpolation_oracle() {
        let data: Vec<f64> = (0..16).map(|i| (i * i) as f64 * 0.1).collect();
        let m = Tensor::new(vec![4, 4], data.clone()).unwrap();
        let d = downsample_map(&m, (2, 2)).unwrap();
        // oracle: scale 2, sample at (i+0.5)*2-0.5 = {0.5, 2.5}
        let sample = |fy: f64, fx: f64| {
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            let at = |r: usize, c: usize| data[r * 4 + c];
            at(y0, x0) * (1.0 - wy) * (1.0 - wx)
                + at(y0, x0 + 1) * (1.0 - wy) * wx
                + at(y0 + 1, x0) * wy * (1.0 - wx)
                + at(y0 + 1, x0 + 1) * wy * wx
        };
        let expected = [sample(0.5, 0.5), sample(0.5, 2.5), sample(2.5, 0.5), sample(2.5, 2.5)];
        for (got, want) in d.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_rejects_zero_target() {
        let m = Tensor::zeros(&[4, 4]);
        assert!(downsample_map(&m, (0, 2)).is_err());
    }

    #[test]
    fn stack_zeroes_invisible_points() {
        let lms = uniform_set(0.2);
        let pts = compute_interest_points(&lms, &PointMapping::default_mapping()).unwrap();
        let pts = threshold_points(&pts, 0.6).unwrap();
        let stack = build_attention_stack(&pts, (64, 64), (8, 8), 2.0).unwrap();
        assert_eq!(stack.maps.len(), NUM_INTEREST_POINTS);
        assert!(stack
            .maps
            .iter()
            .all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stack_all_visible_has_no_zero_map() {
        let lms = uniform_set(0.95);
        let pts = compute_interest_points(&lms, &PointMapping::default_mapping()).unwrap();
        let pts = threshold_points(&pts, 0.6).unwrap();
        let stack = build_attention_stack(&pts, (64, 64), (8, 8), 2.0).unwrap();
        for m in &stack.maps {
            assert!(m.data().iter().any(|&v| v > 0.0));
            assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn modulate_gates_features() {
        let mut tape = Tape::new();
        let feat = tape.leaf(Tensor::full(&[2, 2, 2], 2.0), false);
        let stack = AttentionStack {
            maps: vec![Tensor::full(&[2, 2], 0.5), Tensor::zeros(&[2, 2])],
            sigma: 2.0,
        };
        let gated = modulate(&mut tape, feat, &stack).unwrap();
        assert!(tape.value(gated[0]).data().iter().all(|&v| v == 1.0));
        assert!(tape.value(gated[1]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flip_table_is_an_involution_and_flip_preserves_confs() {
        let table = FlipTable::default_table();
        for i in 0..NUM_LANDMARKS {
            assert_eq!(table.0[table.0[i]], i, "flip table not an involution at {i}");
        }
        let mut lms = uniform_set(0.8);
        lms.points[36].conf = 0.1;
        let flipped = lms.flipped(&table);
        assert_eq!(flipped.points[45].conf, 0.1);
        assert_eq!(flipped.points[45].x, 63.0 - lms.points[36].x);
        let back = flipped.flipped(&table);
        for (a, b) in lms.points.iter().zip(&back.points) {
            assert!((a.x - b.x).abs() < 1e-12 && a.y == b.y && a.conf == b.conf);
        }
    }

    #[test]
    fn landmark_record_round_trip() {
        let lms = uniform_set(0.73);
        let text = lms.to_record();
        let lines: Vec<&str> = text.lines().collect();
        let back = LandmarkSet::parse_record(&lines, (64, 64)).unwrap();
        for (a, b) in lms.points.iter().zip(&back.points) {
            assert_eq!((a.x, a.y, a.conf), (b.x, b.y, b.conf));
        }
    }
}
