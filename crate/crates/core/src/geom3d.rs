//! Oriented 3D box geometry: rotated BEV IoU, 3D IoU, composite L1 distance,
//! and greedy NMS, shared by the matcher, target assignment, and evaluation.
//!
//! Rotated-rectangle intersection is computed exactly via Sutherland–Hodgman
//! polygon clipping followed by the shoelace formula. All functions here are
//! pure and safe to call concurrently.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wraps an angle into the half-open interval (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a % two_pi;
    if r <= -PI {
        r += two_pi;
    } else if r > PI {
        r -= two_pi;
    }
    r
}

/// An oriented 3D bounding box in the grid frame (meters).
///
/// `dx`/`dy`/`dz` are the full extents (length, width, height) and must be
/// strictly positive; `yaw` is normalized into (−π, π] on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, dx: f64, dy: f64, dz: f64, yaw: f64) -> Self {
        assert!(
            dx > 0.0 && dy > 0.0 && dz > 0.0,
            "box dims must be strictly positive: ({dx}, {dy}, {dz})"
        );
        Self {
            cx,
            cy,
            cz,
            dx,
            dy,
            dz,
            yaw: wrap_angle(yaw),
        }
    }

    /// BEV footprint area.
    pub fn footprint_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    /// Counter-clockwise corners of the yaw-rotated BEV footprint.
    pub fn footprint_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hx = 0.5 * self.dx;
        let hy = 0.5 * self.dy;
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        local.map(|[x, y]| [self.cx + x * c - y * s, self.cy + x * s + y * c])
    }

    /// True if the (x, y) point lies inside (or on the boundary of) the
    /// BEV footprint.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let px = x - self.cx;
        let py = y - self.cy;
        // rotate into the box frame
        let ux = px * c + py * s;
        let uy = -px * s + py * c;
        ux.abs() <= 0.5 * self.dx && uy.abs() <= 0.5 * self.dy
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.cz - 0.5 * self.dz, self.cz + 0.5 * self.dz)
    }
}

/// A box with detector confidence attached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub box3d: Box3D,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(box3d: Box3D, score: f64) -> Self {
        assert!((0.0..=1.0).contains(&score), "score must be in [0,1]: {score}");
        Self { box3d, score }
    }
}

fn cross_sign(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn line_intersection(a: [f64; 2], b: [f64; 2], p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let dp = cross_sign(a, b, p);
    let dq = cross_sign(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Clips a polygon against a convex CCW clip polygon (Sutherland–Hodgman).
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = cross_sign(a, b, p) >= 0.0;
            let q_in = cross_sign(a, b, q) >= 0.0;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                output.push(line_intersection(a, b, p, q));
            }
        }
    }
    output
}

fn shoelace_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

fn footprints_equal(a: &Box3D, b: &Box3D) -> bool {
    a.cx == b.cx && a.cy == b.cy && a.dx == b.dx && a.dy == b.dy && a.yaw == b.yaw
}

/// BEV intersection area of two oriented footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let clipped = clip_polygon(&a.footprint_corners(), &b.footprint_corners());
    shoelace_area(&clipped).max(0.0)
}

/// Rotated BEV IoU of the two footprints, in [0, 1].
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    if footprints_equal(a, b) {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = a.footprint_area() + b.footprint_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: BEV intersection area times vertical overlap over union volume.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if footprints_equal(a, b) && a.cz == b.cz && a.dz == b.dz {
        return 1.0;
    }
    let (a_lo, a_hi) = a.z_range();
    let (b_lo, b_hi) = b.z_range();
    let z_overlap = (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0);
    if z_overlap == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * z_overlap;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Composite L1 distance over centers, dimensions, and wrapped yaw difference.
pub fn box_l1(a: &Box3D, b: &Box3D) -> f64 {
    (a.cx - b.cx).abs()
        + (a.cy - b.cy).abs()
        + (a.cz - b.cz).abs()
        + (a.dx - b.dx).abs()
        + (a.dy - b.dy).abs()
        + (a.dz - b.dz).abs()
        + wrap_angle(a.yaw - b.yaw).abs()
}

/// Greedy NMS on BEV IoU, descending score, ties broken by ascending
/// (cx, cy) for determinism.
pub fn nms(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<ScoredBox> {
    assert!(
        iou_thresh > 0.0 && iou_thresh < 1.0,
        "iou_thresh must be in (0,1): {iou_thresh}"
    );
    let mut order: Vec<&ScoredBox> = boxes.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.box3d.cx.total_cmp(&b.box3d.cx))
            .then(a.box3d.cy.total_cmp(&b.box3d.cy))
    });
    let mut kept: Vec<ScoredBox> = Vec::new();
    for cand in order {
        if kept
            .iter()
            .all(|k| bev_iou(&k.box3d, &cand.box3d) < iou_thresh)
        {
            kept.push(*cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, dx: f64, dy: f64, yaw: f64) -> Box3D {
        Box3D::new(cx, cy, 1.0, dx, dy, 2.0, yaw)
    }

    /// Monte Carlo IoU estimate by uniform point sampling over the joint
    /// bounding region; independent of the clipping path.
    pub fn monte_carlo_bev_iou(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
        let corners: Vec<[f64; 2]> = a
            .footprint_corners()
            .iter()
            .chain(b.footprint_corners().iter())
            .copied()
            .collect();
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for c in &corners {
            x0 = x0.min(c[0]);
            y0 = y0.min(c[1]);
            x1 = x1.max(c[0]);
            y1 = y1.max(c[1]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut both, mut either) = (0u64, 0u64);
        for _ in 0..samples {
            let x = rng.gen_range(x0..x1);
            let y = rng.gen_range(y0..y1);
            let ia = a.footprint_contains(x, y);
            let ib = b.footprint_contains(x, y);
            if ia && ib {
                both += 1;
            }
            if ia || ib {
                either += 1;
            }
        }
        if either == 0 {
            0.0
        } else {
            both as f64 / either as f64
        }
    }

    #[test]
    fn iou_identity() {
        let a = bx(3.0, -2.0, 4.2, 1.9, 0.73);
        assert_eq!(bev_iou(&a, &a), 1.0);
        assert_eq!(iou_3d(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(100.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(bev_iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_axis_aligned_closed_form() {
        // 2x2 squares offset by 1 along x: intersection 2, union 6.
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_square_rotated_quarter_pi() {
        // square vs itself rotated by 45 degrees: IoU = 1/sqrt(2)
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = bx(0.0, 0.0, 2.0, 2.0, PI / 4.0);
        let expect = 1.0 / 2.0f64.sqrt();
        assert!((bev_iou(&a, &b) - expect).abs() < 1e-9);
        let mc = monte_carlo_bev_iou(&a, &b, 1_000_000, 7);
        assert!((bev_iou(&a, &b) - mc).abs() < 0.01);
    }

    #[test]
    fn iou_3d_stacked_cubes() {
        // identical 2x2 footprints, vertical ranges [0,2] and [1,3]
        let a = Box3D::new(0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0);
        let b = Box3D::new(0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 0.0);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_3d_no_vertical_overlap() {
        let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        let b = Box3D::new(0.0, 0.0, 10.0, 2.0, 2.0, 2.0, 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn l1_identity_and_offset() {
        let a = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        assert_eq!(box_l1(&a, &a), 0.0);
        let b = bx(1.0, 0.0, 4.0, 2.0, 0.0);
        assert!((box_l1(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l1_yaw_wraps() {
        let a = bx(0.0, 0.0, 4.0, 2.0, PI - 0.1);
        let b = bx(0.0, 0.0, 4.0, 2.0, -PI + 0.1);
        assert!((box_l1(&a, &b) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn nms_single_box() {
        let b = ScoredBox::new(bx(0.0, 0.0, 2.0, 2.0, 0.0), 0.9);
        assert_eq!(nms(&[b], 0.5), vec![b]);
    }

    #[test]
    fn nms_suppresses_duplicate() {
        let hi = ScoredBox::new(bx(0.0, 0.0, 2.0, 2.0, 0.0), 0.9);
        let lo = ScoredBox::new(bx(0.0, 0.0, 2.0, 2.0, 0.0), 0.8);
        assert_eq!(nms(&[lo, hi], 0.5), vec![hi]);
    }

    #[test]
    fn nms_keeps_disjoint() {
        let boxes = [
            ScoredBox::new(bx(0.0, 0.0, 2.0, 2.0, 0.0), 0.9),
            ScoredBox::new(bx(10.0, 0.0, 2.0, 2.0, 0.0), 0.8),
            ScoredBox::new(bx(0.0, 10.0, 2.0, 2.0, 0.0), 0.7),
        ];
        assert_eq!(nms(&boxes, 0.5).len(), 3);
    }

    #[test]
    fn monte_carlo_oracle_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..20 {
            let a = bx(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(-PI..PI),
            );
            let b = bx(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(-PI..PI),
            );
            let mc = monte_carlo_bev_iou(&a, &b, 200_000, 1000 + case);
            assert!(
                (bev_iou(&a, &b) - mc).abs() < 0.02,
                "case {case}: exact {} vs mc {}",
                bev_iou(&a, &b),
                mc
            );
        }
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -5.0..5.0f64,
            -5.0..5.0f64,
            -1.0..1.0f64,
            0.2..6.0f64,
            0.2..6.0f64,
            0.5..3.0f64,
            -PI..PI,
        )
            .prop_map(|(cx, cy, cz, dx, dy, dz, yaw)| Box3D::new(cx, cy, cz, dx, dy, dz, yaw))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = bev_iou(&a, &b);
            let ba = bev_iou(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9);
            let ab3 = iou_3d(&a, &b);
            let ba3 = iou_3d(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab3));
            prop_assert!((ab3 - ba3).abs() < 1e-9);
        }

        #[test]
        fn iou_rigid_invariant(a in arb_box(), b in arb_box(),
                               tx in -10.0..10.0f64, ty in -10.0..10.0f64,
                               phi in -PI..PI) {
            let transform = |v: &Box3D| {
                let (s, c) = phi.sin_cos();
                Box3D::new(
                    v.cx * c - v.cy * s + tx,
                    v.cx * s + v.cy * c + ty,
                    v.cz, v.dx, v.dy, v.dz,
                    v.yaw + phi,
                )
            };
            let before = bev_iou(&a, &b);
            let after = bev_iou(&transform(&a), &transform(&b));
            prop_assert!((before - after).abs() < 1e-9, "{before} vs {after}");
            let before3 = iou_3d(&a, &b);
            let after3 = iou_3d(&transform(&a), &transform(&b));
            prop_assert!((before3 - after3).abs() < 1e-9);
        }

        #[test]
        fn l1_triangle_inequality(a in arb_box(), b in arb_box(), c in arb_box()) {
            prop_assert!(box_l1(&a, &c) <= box_l1(&a, &b) + box_l1(&b, &c) + 1e-9);
        }

        #[test]
        fn nms_pairwise_below_threshold_and_idempotent(
            seed in 0u64..1000, n in 1usize..12, thresh in 0.05..0.95f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes: Vec<ScoredBox> = (0..n)
                .map(|_| {
                    ScoredBox::new(
                        Box3D::new(
                            rng.gen_range(-4.0..4.0),
                            rng.gen_range(-4.0..4.0),
                            1.0,
                            rng.gen_range(0.5..4.0),
                            rng.gen_range(0.5..4.0),
                            2.0,
                            rng.gen_range(-PI..PI),
                        ),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let kept = nms(&boxes, thresh);
            for i in 0..kept.len() {
                for j in (i + 1)..kept.len() {
                    prop_assert!(bev_iou(&kept[i].box3d, &kept[j].box3d) < thresh);
                }
            }
            prop_assert_eq!(nms(&kept, thresh), kept.clone());
        }
    }
}
