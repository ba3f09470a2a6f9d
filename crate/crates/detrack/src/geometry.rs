//! Box algebra, overlap metrics, window functions and positional encodings.
//!
//! All boxes are axis-aligned in center-size form `(cx, cy, w, h)`, normalized
//! to the search-region side length, so every loss and noise scale downstream
//! is scale-free.

/// Smallest side length a clamped box may have.
pub const MIN_BOX_SIDE: f64 = 1e-4;

/// Normalized bounding box in center-size parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// Corner form `(x0, y0, x1, y1)`.
    pub fn to_xyxy(&self) -> [f64; 4] {
        [
            self.cx - self.w * 0.5,
            self.cy - self.h * 0.5,
            self.cx + self.w * 0.5,
            self.cy + self.h * 0.5,
        ]
    }

    pub fn from_xyxy(c: [f64; 4]) -> Self {
        BBox {
            cx: (c[0] + c[2]) * 0.5,
            cy: (c[1] + c[3]) * 0.5,
            w: c[2] - c[0],
            h: c[3] - c[1],
        }
    }

    /// Clamp into the unit square with a minimum side length.
    pub fn clamped(&self) -> BBox {
        BBox {
            cx: self.cx.clamp(0.0, 1.0),
            cy: self.cy.clamp(0.0, 1.0),
            w: self.w.clamp(MIN_BOX_SIDE, 1.0),
            h: self.h.clamp(MIN_BOX_SIDE, 1.0),
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let c = self.to_xyxy();
        x >= c[0] && x <= c[2] && y >= c[1] && y <= c[3]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Token grid of the search region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub height_tokens: usize,
    pub width_tokens: usize,
    pub patch_size: usize,
}

impl GridSpec {
    pub fn n_tokens(&self) -> usize {
        self.height_tokens * self.width_tokens
    }
}

/// Intersection over union of two boxes. Degenerate (zero-area) inputs give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ca = a.to_xyxy();
    let cb = b.to_xyxy();
    let ix = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let iy = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`, in (-1, 1].
///
/// A degenerate box is treated as a point: zero intersection, union equal to
/// the other box's area, enclosing box still well defined.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let ca = a.to_xyxy();
    let cb = b.to_xyxy();
    let ix = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let iy = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let i = if union <= 0.0 { 0.0 } else { inter / union };
    let ex = ca[2].max(cb[2]) - ca[0].min(cb[0]);
    let ey = ca[3].max(cb[3]) - ca[1].min(cb[1]);
    let enclosing = ex * ey;
    if enclosing <= 0.0 {
        return i;
    }
    i - (enclosing - union.max(0.0)) / enclosing
}

/// Hanning window of length `n`: `w[i] = 0.5 - 0.5 cos(2 pi i / (n - 1))`.
///
/// `n = 1` returns `[1.0]` so the penalty is a no-op at degenerate sizes.
pub fn hanning_window(n: usize) -> Vec<f64> {
    assert!(n >= 1, "hanning_window needs n >= 1");
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Sine-cosine embedding of a 4-d box, `dim` must be divisible by 8.
///
/// Each coordinate gets `dim / 8` frequencies with interleaved sin/cos pairs,
/// coordinate blocks ordered `cx, cy, w, h`.
pub fn sincos_box_embedding(b: &BBox, dim: usize) -> Vec<f64> {
    assert!(
        dim % 8 == 0 && dim > 0,
        "sincos_box_embedding dim must be a positive multiple of 8, got {}",
        dim
    );
    let n_freq = dim / 8;
    let mut out = Vec::with_capacity(dim);
    for &v in &[b.cx, b.cy, b.w, b.h] {
        for k in 0..n_freq {
            let denom = 10000f64.powf(k as f64 / n_freq as f64);
            let angle = v * std::f64::consts::TAU / denom;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    out
}

/// Normalized centers of all grid tokens in row-major order.
///
/// Token `(r, c)` has center `((c + 0.5) / W, (r + 0.5) / H)`.
pub fn token_centers(g: &GridSpec) -> Vec<(f64, f64)> {
    let (h, w) = (g.height_tokens, g.width_tokens);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Pixel-counting IoU oracle on a `res`-squared grid over [0, span]^2.
    fn raster_iou(a: &BBox, b: &BBox, res: usize, span: f64) -> f64 {
        let ca = a.to_xyxy();
        let cb = b.to_xyxy();
        let step = span / res as f64;
        let (mut inter, mut union) = (0u64, 0u64);
        for r in 0..res {
            let y = (r as f64 + 0.5) * step;
            for c in 0..res {
                let x = (c as f64 + 0.5) * step;
                let in_a = x >= ca[0] && x <= ca[2] && y >= ca[1] && y <= ca[3];
                let in_b = x >= cb[0] && x <= cb[2] && y >= cb[1] && y <= cb[3];
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

    fn random_box<R: Rng>(rng: &mut R) -> BBox {
        let w = rng.gen_range(0.05..0.6);
        let h = rng.gen_range(0.05..0.6);
        BBox::new(
            rng.gen_range(w / 2.0..1.0 - w / 2.0),
            rng.gen_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
        )
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(0.4, 0.4, 0.2, 0.3);
        assert!(close(iou(&a, &a), 1.0, 1e-12));
        let b = BBox::new(0.9, 0.9, 0.1, 0.1);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_worked_example_one_seventh() {
        // xyxy (0,0,2,2) vs (1,1,3,3): intersection 1, union 7.
        let a = BBox::from_xyxy([0.0, 0.0, 2.0, 2.0]);
        let b = BBox::from_xyxy([1.0, 1.0, 3.0, 3.0]);
        assert!(close(iou(&a, &b), 1.0 / 7.0, 1e-12));
        // Cross-check against the rasterization oracle on a 1000^2 grid.
        assert!(close(raster_iou(&a, &b, 1000, 4.0), 1.0 / 7.0, 5e-3));
    }

    #[test]
    fn iou_degenerate_box_is_zero() {
        let a = BBox::new(0.5, 0.5, 0.0, 0.0);
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(iou(&a, &a), 0.0);
    }

    #[test]
    fn giou_identity_touching_and_far() {
        let a = BBox::new(0.3, 0.3, 0.2, 0.2);
        assert!(close(giou(&a, &a), 1.0, 1e-12));
        // Touching squares: IoU 0, enclosing area equals union area.
        let p = BBox::from_xyxy([0.0, 0.0, 2.0, 2.0]);
        let q = BBox::from_xyxy([2.0, 0.0, 4.0, 2.0]);
        assert!(close(giou(&p, &q), 0.0, 1e-12));
        // Far apart boxes tend to -1.
        let far_a = BBox::new(0.001, 0.001, 0.001, 0.001);
        let far_b = BBox::new(0.999, 0.999, 0.001, 0.001);
        assert!(giou(&far_a, &far_b) < -0.9);
    }

    #[test]
    fn giou_degenerate_box_is_defined() {
        let point = BBox::new(0.9, 0.9, 0.0, 0.0);
        let b = BBox::new(0.2, 0.2, 0.2, 0.2);
        let g = giou(&point, &b);
        assert!(g.is_finite() && g < 0.0 && g > -1.0);
    }

    #[test]
    fn iou_giou_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let i = iou(&a, &b);
            assert!((0.0..=1.0).contains(&i));
            assert!(close(i, iou(&b, &a), 1e-15));
            let g = giou(&a, &b);
            assert!(g <= i + 1e-12);
            assert!(g > -1.0 && g <= 1.0);
        }
    }

    #[test]
    fn iou_matches_raster_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let exact = iou(&a, &b);
            let raster = raster_iou(&a, &b, 512, 1.0);
            assert!(
                close(exact, raster, 5e-3),
                "iou {} vs raster {}",
                exact,
                raster
            );
        }
    }

    #[test]
    fn xyxy_examples() {
        let b = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(b.to_xyxy(), [0.0, 0.0, 1.0, 1.0]);
        let b = BBox::new(0.25, 0.25, 0.5, 0.5);
        assert_eq!(b.to_xyxy(), [0.0, 0.0, 0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn xyxy_roundtrip(cx in 0.0f64..1.0, cy in 0.0f64..1.0,
                          w in 0.001f64..1.0, h in 0.001f64..1.0) {
            let b = BBox::new(cx, cy, w, h);
            let back = BBox::from_xyxy(b.to_xyxy());
            prop_assert!(close(back.cx, b.cx, 1e-12));
            prop_assert!(close(back.cy, b.cy, 1e-12));
            prop_assert!(close(back.w, b.w, 1e-12));
            prop_assert!(close(back.h, b.h, 1e-12));
        }
    }

    #[test]
    fn hanning_small_cases() {
        assert_eq!(hanning_window(1), vec![1.0]);
        let w3 = hanning_window(3);
        assert!(close(w3[0], 0.0, 1e-12) && close(w3[1], 1.0, 1e-12) && close(w3[2], 0.0, 1e-12));
        let w5 = hanning_window(5);
        let expect = [0.0, 0.5, 1.0, 0.5, 0.0];
        for (a, e) in w5.iter().zip(expect.iter()) {
            assert!(close(*a, *e, 1e-12));
        }
    }

    #[test]
    fn hanning_symmetry_and_bounds() {
        for n in 2..=64 {
            let w = hanning_window(n);
            assert!(close(w[0], 0.0, 1e-12) && close(w[n - 1], 0.0, 1e-12));
            for i in 0..n {
                assert!((0.0..=1.0 + 1e-12).contains(&w[i]));
                assert!(close(w[i], w[n - 1 - i], 1e-12));
            }
        }
    }

    #[test]
    fn sincos_embedding_basics() {
        let zero = BBox::new(0.0, 0.0, 0.0, 0.0);
        let e = sincos_box_embedding(&zero, 32);
        for pair in e.chunks(2) {
            assert!(close(pair[0], 0.0, 1e-12)); // sin
            assert!(close(pair[1], 1.0, 1e-12)); // cos
        }
        let b = BBox::new(0.3, 0.4, 0.2, 0.1);
        assert_eq!(sincos_box_embedding(&b, 32), sincos_box_embedding(&b, 32));
        let b2 = BBox::new(0.31, 0.4, 0.2, 0.1);
        assert_ne!(sincos_box_embedding(&b, 32), sincos_box_embedding(&b2, 32));
        for v in sincos_box_embedding(&b, 64) {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    #[should_panic(expected = "multiple of 8")]
    fn sincos_embedding_bad_dim() {
        let _ = sincos_box_embedding(&BBox::new(0.5, 0.5, 0.5, 0.5), 12);
    }

    #[test]
    fn token_centers_examples() {
        let g1 = GridSpec { height_tokens: 1, width_tokens: 1, patch_size: 8 };
        assert_eq!(token_centers(&g1), vec![(0.5, 0.5)]);
        let g2 = GridSpec { height_tokens: 2, width_tokens: 2, patch_size: 8 };
        assert_eq!(
            token_centers(&g2),
            vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
        );
        let g3 = GridSpec { height_tokens: 5, width_tokens: 7, patch_size: 8 };
        assert_eq!(token_centers(&g3).len(), 35);
    }

    #[test]
    fn clamp_produces_valid_boxes() {
        let b = BBox::new(-0.3, 1.4, 2.0, 0.0).clamped();
        assert!(b.cx >= 0.0 && b.cx <= 1.0 && b.cy >= 0.0 && b.cy <= 1.0);
        assert!(b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0);
    }
}
