//! Point and box geometry shared by every other module.
//!
//! Coordinate convention: `y` is up. A box's size is `(l, h, w)` with `l`
//! along its local x axis, `h` along y and `w` along its local z axis; `yaw`
//! rotates the box about the y axis, so the bird-view footprint lives in the
//! x/z plane.

use crate::error::{bail, Result};

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IouMode {
    /// Ignores yaw (ScanNet-style evaluation).
    #[default]
    AxisAligned,
    /// Bird-view polygon intersection times vertical overlap.
    Oriented,
}

impl Box3D {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64, class_id: usize, score: f64) -> Result<Self> {
        let b = Self {
            center,
            size,
            yaw,
            class_id,
            score,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn axis_aligned(center: Point3, size: [f64; 3], class_id: usize) -> Result<Self> {
        Self::new(center, size, 0.0, class_id, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            bail!(Argument, "box size must be positive, got {:?}", self.size);
        }
        if self.center.iter().any(|c| !c.is_finite()) || !self.yaw.is_finite() {
            bail!(Argument, "box has non-finite center or yaw");
        }
        if !(0.0..=1.0).contains(&self.score) {
            bail!(Argument, "box score {} outside [0, 1]", self.score);
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// The `(x, y, z, l, h, w)` parameterization.
    pub fn params6(&self) -> [f64; 6] {
        let [x, y, z] = self.center;
        let [l, h, w] = self.size;
        [x, y, z, l, h, w]
    }

    fn local_xz(&self, p: &Point3) -> (f64, f64, f64) {
        let dx = p[0] - self.center[0];
        let dz = p[2] - self.center[2];
        let (s, c) = self.yaw.sin_cos();
        (c * dx - s * dz, p[1] - self.center[1], s * dx + c * dz)
    }

    fn to_world(&self, lx: f64, ly: f64, lz: f64) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * lx + s * lz,
            self.center[1] + ly,
            self.center[2] - s * lx + c * lz,
        ]
    }

    /// Bird-view footprint as a counter-clockwise polygon in (x, z).
    fn footprint(&self) -> Vec<[f64; 2]> {
        let (hl, hw) = (self.size[0] / 2.0, self.size[2] / 2.0);
        let poly: Vec<[f64; 2]> = [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)]
            .iter()
            .map(|&(lx, lz)| {
                let p = self.to_world(lx, 0.0, lz);
                [p[0], p[2]]
            })
            .collect();
        if signed_area(&poly) < 0.0 {
            poly.into_iter().rev().collect()
        } else {
            poly
        }
    }
}

/// The eight corners of the yaw-rotated cuboid.
pub fn box_corners(b: &Box3D) -> [Point3; 8] {
    let [hl, hh, hw] = b.size.map(|s| s / 2.0);
    let mut out = [[0.0; 3]; 8];
    let mut i = 0;
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out[i] = b.to_world(sx * hl, sy * hh, sz * hw);
                i += 1;
            }
        }
    }
    out
}

/// Inclusive containment test in the box frame.
pub fn point_in_box(p: &Point3, b: &Box3D) -> bool {
    point_in_box_eps(p, b, 0.0)
}

/// Containment with every half-extent inflated by `eps`.
pub fn point_in_box_eps(p: &Point3, b: &Box3D, eps: f64) -> bool {
    let (lx, ly, lz) = b.local_xz(p);
    lx.abs() <= b.size[0] / 2.0 + eps && ly.abs() <= b.size[1] / 2.0 + eps && lz.abs() <= b.size[2] / 2.0 + eps
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest point sampling starting at `seed_index`; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Point3], count: usize, seed_index: usize) -> Result<Vec<usize>> {
    if count == 0 || count > points.len() {
        bail!(
            Argument,
            "cannot sample {count} of {} points",
            points.len()
        );
    }
    if seed_index >= points.len() {
        bail!(Argument, "seed index {seed_index} out of range");
    }
    let mut chosen = Vec::with_capacity(count);
    chosen.push(seed_index);
    let mut min_d: Vec<f64> = points.iter().map(|p| dist2(p, &points[seed_index])).collect();
    while chosen.len() < count {
        let mut best = 0;
        for i in 1..points.len() {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        chosen.push(best);
        let pb = points[best];
        for (d, p) in min_d.iter_mut().zip(points) {
            let nd = dist2(p, &pb);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

fn interval_overlap(c1: f64, s1: f64, c2: f64, s2: f64) -> f64 {
    let lo = (c1 - s1 / 2.0).max(c2 - s2 / 2.0);
    let hi = (c1 + s1 / 2.0).min(c2 + s2 / 2.0);
    (hi - lo).max(0.0)
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn intersection_volume(a: &Box3D, b: &Box3D, mode: IouMode) -> f64 {
    let dy = interval_overlap(a.center[1], a.size[1], b.center[1], b.size[1]);
    if dy == 0.0 {
        return 0.0;
    }
    match mode {
        IouMode::AxisAligned => {
            dy * interval_overlap(a.center[0], a.size[0], b.center[0], b.size[0])
                * interval_overlap(a.center[2], a.size[2], b.center[2], b.size[2])
        }
        IouMode::Oriented => {
            let poly = clip_polygon(&a.footprint(), &b.footprint());
            if poly.len() < 3 {
                0.0
            } else {
                dy * signed_area(&poly).abs()
            }
        }
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou_3d(a: &Box3D, b: &Box3D, mode: IouMode) -> Result<f64> {
    for bx in [a, b] {
        if bx.size.iter().any(|&s| !(s > 0.0)) {
            bail!(Argument, "degenerate box size {:?}", bx.size);
        }
    }
    Ok(iou_unchecked(a, b, mode))
}

pub(crate) fn iou_unchecked(a: &Box3D, b: &Box3D, mode: IouMode) -> f64 {
    let inter = intersection_volume(a, b, mode);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices in descending-score order, score ties by lowest index.
pub fn score_order(boxes: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    order
}

/// Greedy non-maximum suppression. A box is dropped iff its IoU with an
/// already kept box exceeds `iou_threshold`. Boxes must be valid.
pub fn nms(boxes: &[Box3D], iou_threshold: f64, mode: IouMode) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(boxes) {
        if kept
            .iter()
            .all(|&k| iou_unchecked(&boxes[i], &boxes[k], mode) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// NMS run independently per class; output in descending-score order.
pub fn nms_per_class(boxes: &[Box3D], iou_threshold: f64, mode: IouMode) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(boxes) {
        if kept.iter().all(|&k| {
            boxes[k].class_id != boxes[i].class_id || iou_unchecked(&boxes[i], &boxes[k], mode) <= iou_threshold
        }) {
            kept.push(i);
        }
    }
    kept
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn bx(c: Point3, s: [f64; 3]) -> Box3D {
        Box3D::axis_aligned(c, s, 0).unwrap()
    }

    #[test]
    fn fps_examples() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 2]);
        assert_eq!(farthest_point_sample(&pts, 1, 1).unwrap(), vec![1]);
        let mut all = farthest_point_sample(&pts, 3, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(farthest_point_sample(&pts, 4, 0).is_err());
        assert!(farthest_point_sample(&pts, 1, 3).is_err());
    }

    #[test]
    fn fps_ties_go_to_lowest_index() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn iou_examples() {
        let a = bx([0.0; 3], [2.0; 3]);
        assert_eq!(iou_3d(&a, &a, IouMode::AxisAligned).unwrap(), 1.0);
        let far = bx([10.0, 0.0, 0.0], [2.0; 3]);
        assert_eq!(iou_3d(&a, &far, IouMode::AxisAligned).unwrap(), 0.0);
        let b = bx([1.0, 0.0, 0.0], [2.0; 3]);
        let v = iou_3d(&a, &b, IouMode::AxisAligned).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        let o = iou_3d(&a, &b, IouMode::Oriented).unwrap();
        assert!((o - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate_boxes() {
        let a = bx([0.0; 3], [1.0; 3]);
        let mut bad = a;
        bad.size[1] = 0.0;
        assert!(iou_3d(&a, &bad, IouMode::AxisAligned).is_err());
        assert!(Box3D::axis_aligned([0.0; 3], [1.0, -1.0, 1.0], 0).is_err());
    }

    #[test]
    fn oriented_iou_of_rotated_square_against_itself_axis_aligned() {
        // Unit square footprint rotated by 45°: intersection octagon area 2(√2 − 1).
        let a = bx([0.0; 3], [1.0; 3]);
        let mut b = a;
        b.yaw = PI / 4.0;
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        assert!((iou_3d(&a, &b, IouMode::Oriented).unwrap() - expected).abs() < 1e-12);
        assert_eq!(iou_3d(&a, &b, IouMode::AxisAligned).unwrap(), 1.0);
    }

    #[test]
    fn nms_examples() {
        let mut a = bx([0.0; 3], [1.0; 3]);
        a.score = 0.8;
        let mut b = a;
        b.score = 0.9;
        assert_eq!(nms(&[a], 0.25, IouMode::AxisAligned), vec![0]);
        assert_eq!(nms(&[a, b], 0.25, IouMode::AxisAligned), vec![1]);
        let mut c = bx([5.0, 0.0, 0.0], [1.0; 3]);
        c.score = 0.1;
        assert_eq!(nms(&[a, c], 0.0, IouMode::AxisAligned), vec![0, 1]);
        assert!(nms(&[], 0.25, IouMode::AxisAligned).is_empty());
    }

    #[test]
    fn nms_keeps_iou_exactly_at_threshold() {
        let mut a = bx([0.0; 3], [2.0; 3]);
        a.score = 0.9;
        let mut b = bx([1.0, 0.0, 0.0], [2.0; 3]);
        b.score = 0.5;
        assert_eq!(nms(&[a, b], 1.0 / 3.0, IouMode::AxisAligned), vec![0, 1]);
        assert_eq!(nms(&[a, b], 0.33, IouMode::AxisAligned), vec![0]);
    }

    #[test]
    fn corners_examples() {
        let b = bx([0.0; 3], [2.0; 3]);
        for c in box_corners(&b) {
            assert!(c.iter().all(|v| (v.abs() - 1.0).abs() < 1e-15));
        }
        let mut r = bx([0.0; 3], [2.0, 2.0, 4.0]);
        r.yaw = FRAC_PI_2;
        let cs = box_corners(&r);
        let xmax = cs.iter().map(|c| c[0].abs()).fold(0.0, f64::max);
        let zmax = cs.iter().map(|c| c[2].abs()).fold(0.0, f64::max);
        assert!((xmax - 2.0).abs() < 1e-12 && (zmax - 1.0).abs() < 1e-12);

        let mut p = r;
        p.yaw = TAU;
        r.yaw = 0.0;
        for (a, b) in box_corners(&p).iter().zip(box_corners(&r).iter()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_in_box_examples() {
        let b = bx([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]);
        assert!(point_in_box(&b.center, &b));
        assert!(point_in_box(&[2.0, 2.0, 3.0], &b));
        assert!(point_in_box(&[2.0, 4.0, 6.0], &b));
        assert!(!point_in_box(&[2.0 + 1e-9, 2.0, 3.0], &b));
    }

    fn nms_oracle(boxes: &[Box3D], thr: f64) -> Vec<usize> {
        // Repeatedly take the best remaining box and delete everything it suppresses.
        let mut alive: Vec<usize> = (0..boxes.len()).collect();
        let mut kept = vec![];
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if boxes[i].score > boxes[best].score || (boxes[i].score == boxes[best].score && i < best) {
                    best = i;
                }
            }
            kept.push(best);
            alive.retain(|&i| i != best && iou_unchecked(&boxes[i], &boxes[best], IouMode::AxisAligned) <= thr);
        }
        kept
    }

    fn fps_oracle(pts: &[Point3], count: usize, seed: usize) -> Vec<usize> {
        let mut chosen = vec![seed];
        while chosen.len() < count {
            let mut best = None::<(usize, f64)>;
            for i in 0..pts.len() {
                let d = chosen.iter().map(|&c| dist2(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((i, d));
                }
            }
            chosen.push(best.unwrap().0);
        }
        chosen
    }

    #[test]
    fn fps_and_nms_match_brute_force_oracles() {
        let mut rng = rng_from_seed(9);
        for _ in 0..100 {
            let n = rng.random_range(1..=64);
            let pts: Vec<Point3> = (0..n)
                .map(|_| [0, 0, 0].map(|_: i32| (rng.random_range(0..8) as f64) * 0.5))
                .collect();
            let count = rng.random_range(1..=n);
            let seed = rng.random_range(0..n);
            assert_eq!(farthest_point_sample(&pts, count, seed).unwrap(), fps_oracle(&pts, count, seed));

            let m = rng.random_range(0..=32);
            let boxes: Vec<Box3D> = (0..m)
                .map(|_| {
                    let c = [0, 0, 0].map(|_: i32| rng.random_range(0.0..3.0));
                    let s = [0, 0, 0].map(|_: i32| rng.random_range(0.3..2.0));
                    let score = (rng.random_range(0..5) as f64) / 4.0;
                    Box3D::new(c, s, 0.0, 0, score).unwrap()
                })
                .collect();
            let thr = rng.random_range(0.0..0.6);
            assert_eq!(nms(&boxes, thr, IouMode::AxisAligned), nms_oracle(&boxes, thr));
        }
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            prop::array::uniform3(-3.0..3.0f64),
            prop::array::uniform3(0.1..3.0f64),
            -PI..PI,
        )
            .prop_map(|(c, s, yaw)| Box3D::new(c, s, yaw, 0, 1.0).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_unit_and_scale_invariant(a in arb_box(), b in arb_box(), s in 0.1..10.0f64) {
            for mode in [IouMode::AxisAligned, IouMode::Oriented] {
                let ab = iou_3d(&a, &b, mode).unwrap();
                let ba = iou_3d(&b, &a, mode).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert!((iou_3d(&a, &a, mode).unwrap() - 1.0).abs() < 1e-12);
                let scale = |x: &Box3D| Box3D { center: x.center.map(|v| v * s), size: x.size.map(|v| v * s), ..*x };
                let scaled = iou_3d(&scale(&a), &scale(&b), mode).unwrap();
                prop_assert!((scaled - ab).abs() < 1e-12, "{} vs {}", scaled, ab);
            }
        }

        #[test]
        fn point_in_box_rigid_invariance(
            b in arb_box(),
            local in prop::array::uniform3(-0.6..0.6f64),
            shift in prop::array::uniform3(-5.0..5.0f64),
            rot in -PI..PI,
        ) {
            let p = b.to_world(local[0] * b.size[0] * 1.5, local[1] * b.size[1] * 1.5, local[2] * b.size[2] * 1.5);
            let (s, c) = rot.sin_cos();
            let move_pt = |q: Point3| {
                let x = q[0];
                let z = q[2];
                [c * x + s * z + shift[0], q[1] + shift[1], -s * x + c * z + shift[2]]
            };
            let moved = Box3D { center: move_pt(b.center), yaw: b.yaw + rot, ..b };
            let q = move_pt(p);
            // Skip points within 1e-9 of a face where rounding may flip the answer.
            let (lx, ly, lz) = b.local_xz(&p);
            let margin = [lx.abs() - b.size[0] / 2.0, ly.abs() - b.size[1] / 2.0, lz.abs() - b.size[2] / 2.0];
            prop_assume!(margin.iter().all(|m| m.abs() > 1e-9));
            prop_assert_eq!(point_in_box(&p, &b), point_in_box(&q, &moved));
        }

        #[test]
        fn nms_output_has_no_pair_above_threshold(
            boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..20),
            thr in 0.0..1.0f64,
        ) {
            let boxes: Vec<Box3D> = boxes.into_iter().map(|(b, s)| Box3D { score: s, ..b }).collect();
            let kept = nms(&boxes, thr, IouMode::Oriented);
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(iou_unchecked(&boxes[a], &boxes[b], IouMode::Oriented) <= thr);
                }
            }
            for w in kept.windows(2) {
                prop_assert!(boxes[w[0]].score >= boxes[w[1]].score);
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }
}
