//! Box representations, IoU/GIoU, and the pair-overlap predicate used by
//! losses, matching, and evaluation.
//!
//! The canonical in-memory form is a normalized center box (cx, cy, w, h),
//! matching the sigmoid range of the box heads. Degenerate (zero-area)
//! boxes score IoU 0 rather than NaN so matching and evaluation stay total.

use serde::{Deserialize, Serialize};

/// Normalized center-form box: all coordinates relative to image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form (x1, y1, x2, y2) with x1 <= x2, y1 <= y2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxN {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_corners(self) -> Corners {
        Corners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    /// Clamp into the unit square, preserving validity.
    pub fn clamped(self) -> BoxN {
        let c = self.to_corners();
        let x1 = c.x1.clamp(0.0, 1.0);
        let y1 = c.y1.clamp(0.0, 1.0);
        let x2 = c.x2.clamp(0.0, 1.0);
        let y2 = c.y2.clamp(0.0, 1.0);
        Corners { x1, y1, x2, y2 }.to_center()
    }

    pub fn as_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl Corners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_center(self) -> BoxN {
        BoxN {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Intersection over union of two corner boxes; 0 when either box has zero
/// area or the boxes are disjoint.
pub fn iou(a: Corners, b: Corners) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union. Lies in (-1, 1]; equals IoU when the hull has no slack.
pub fn giou(a: Corners, b: Corners) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let hull_w = a.x2.max(b.x2) - a.x1.min(b.x1);
    let hull_h = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = hull_w * hull_h;
    if union <= 0.0 && hull <= 0.0 {
        return 0.0;
    }
    let iou_v = if union <= 0.0 { 0.0 } else { inter / union };
    if hull <= 0.0 {
        return iou_v;
    }
    iou_v - (hull - union.max(0.0)) / hull
}

/// True when both the human and the object box clear the IoU threshold
/// against their ground-truth counterparts.
pub fn pair_match(
    pred_h: Corners,
    pred_o: Corners,
    gt_h: Corners,
    gt_o: Corners,
    threshold: f64,
) -> bool {
    iou(pred_h, gt_h) >= threshold && iou(pred_o, gt_o) >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exact IoU oracle for integer-corner boxes: count covered grid cells.
    fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
        let x0 = a[0].min(b[0]);
        let y0 = a[1].min(b[1]);
        let x1 = a[2].max(b[2]);
        let y1 = a[3].max(b[3]);
        let mut inter = 0i64;
        let mut union = 0i64;
        for x in x0..x1 {
            for y in y0..y1 {
                let in_a = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
                let in_b = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn corners_from_ints(b: [i64; 4]) -> Corners {
        Corners::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64)
    }

    #[test]
    fn convert_full_image_box() {
        let b = BoxN::new(0.5, 0.5, 1.0, 1.0).to_corners();
        assert_eq!(b, Corners::new(0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn convert_hand_algebra_case() {
        let b = BoxN::new(0.25, 0.25, 0.5, 0.5).to_corners();
        assert!((b.x1 - 0.0).abs() < 1e-12);
        assert!((b.y1 - 0.0).abs() < 1e-12);
        assert!((b.x2 - 0.5).abs() < 1e-12);
        assert!((b.y2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iou_identity_disjoint_and_fraction() {
        let a = Corners::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(a, a), 1.0);
        let far = Corners::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(a, far), 0.0);
        // overlap 1x1 = 1, union 4+4-1 = 7
        let b = Corners::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(a, b) - 1.0 / 7.0).abs() < 1e-12);
        assert!((raster_iou([0, 0, 2, 2], [1, 1, 3, 3]) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_zero_area_is_zero() {
        let a = Corners::new(0.2, 0.2, 0.2, 0.6);
        let b = Corners::new(0.1, 0.1, 0.5, 0.5);
        assert_eq!(iou(a, b), 0.0);
        assert_eq!(iou(b, a), 0.0);
    }

    #[test]
    fn giou_hand_cases() {
        let a = Corners::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(a, a), 1.0);
        // disjoint: IoU 0, hull 3, union 2 -> -1/3
        let b = Corners::new(2.0, 0.0, 3.0, 1.0);
        assert!((giou(a, b) + 1.0 / 3.0).abs() < 1e-12);
        // nested: hull equals the outer box, giou == iou
        let inner = Corners::new(0.25, 0.25, 0.75, 0.75);
        assert!((giou(a, inner) - iou(a, inner)).abs() < 1e-12);
    }

    #[test]
    fn pair_match_conjunction() {
        let h = Corners::new(0.0, 0.0, 1.0, 1.0);
        let o = Corners::new(2.0, 0.0, 3.0, 1.0);
        assert!(pair_match(h, o, h, o, 0.5));
        // human IoU ~0.6, object IoU ~0.4 -> false
        let ph = Corners::new(0.0, 0.0, 1.0, 0.75);
        let po = Corners::new(2.0, 0.0, 3.0, 0.4);
        assert!(iou(ph, h) > 0.5 && iou(po, o) < 0.5);
        assert!(!pair_match(ph, po, h, o, 0.5));
    }

    #[test]
    fn iou_and_pair_match_agree_with_raster_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for _ in 0..1000 {
            let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x1 = rng.gen_range(0..30i64);
                let y1 = rng.gen_range(0..30i64);
                let x2 = x1 + rng.gen_range(1..20i64);
                let y2 = y1 + rng.gen_range(1..20i64);
                [x1, y1, x2, y2]
            };
            let (ah, ao, bh, bo) = (
                rand_box(&mut rng),
                rand_box(&mut rng),
                rand_box(&mut rng),
                rand_box(&mut rng),
            );
            let iou_h = iou(corners_from_ints(ah), corners_from_ints(bh));
            let iou_o = iou(corners_from_ints(ao), corners_from_ints(bo));
            assert!((iou_h - raster_iou(ah, bh)).abs() < 1e-12);
            assert!((iou_o - raster_iou(ao, bo)).abs() < 1e-12);
            let expect = raster_iou(ah, bh) >= 0.5 && raster_iou(ao, bo) >= 0.5;
            assert_eq!(
                pair_match(
                    corners_from_ints(ah),
                    corners_from_ints(ao),
                    corners_from_ints(bh),
                    corners_from_ints(bo),
                    0.5
                ),
                expect
            );
            checked += 1;
        }
        assert_eq!(checked, 1000);
    }

    proptest! {
        #[test]
        fn round_trip_center_corner(cx in 0.0..1.0f64, cy in 0.0..1.0f64,
                                    w in 0.01..1.0f64, h in 0.01..1.0f64) {
            let b = BoxN::new(cx, cy, w, h);
            let r = b.to_corners().to_center();
            prop_assert!((r.cx - b.cx).abs() < 1e-9);
            prop_assert!((r.cy - b.cy).abs() < 1e-9);
            prop_assert!((r.w - b.w).abs() < 1e-9);
            prop_assert!((r.h - b.h).abs() < 1e-9);
        }

        #[test]
        fn iou_giou_symmetric_bounded_and_invariant(
            ax in 0.0..0.6f64, ay in 0.0..0.6f64, aw in 0.05..0.4f64, ah in 0.05..0.4f64,
            bx in 0.0..0.6f64, by in 0.0..0.6f64, bw in 0.05..0.4f64, bh in 0.05..0.4f64,
            tx in -0.2..0.2f64, ty in -0.2..0.2f64, s in 0.5..2.0f64,
        ) {
            let a = Corners::new(ax, ay, ax + aw, ay + ah);
            let b = Corners::new(bx, by, bx + bw, by + bh);
            let (i, g) = (iou(a, b), giou(a, b));
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(g > -1.0 && g <= 1.0 + 1e-12);
            prop_assert!(g <= i + 1e-12);
            prop_assert!((iou(b, a) - i).abs() < 1e-12);
            prop_assert!((giou(b, a) - g).abs() < 1e-12);
            // joint translation + uniform scaling invariance
            let tf = |c: Corners| Corners::new(
                (c.x1 + tx) * s, (c.y1 + ty) * s, (c.x2 + tx) * s, (c.y2 + ty) * s);
            prop_assert!((iou(tf(a), tf(b)) - i).abs() < 1e-9);
            prop_assert!((giou(tf(a), tf(b)) - g).abs() < 1e-9);
        }
    }
}
