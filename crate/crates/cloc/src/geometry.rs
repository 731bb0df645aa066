//! Bounding boxes, IoU, and the sinusoidal positional encoding that turns
//! box corners into prompt tokens.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("coordinate {value} outside [0,1] at position {index}")]
    CoordinateOutOfRange { index: usize, value: f64 },
    #[error("degenerate box: x2 < x1 or y2 < y1 in ({0}, {1}, {2}, {3})")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("non-finite coordinate at position {0}")]
    NonFinite(usize),
    #[error("prompt token width must be even, got {0}")]
    OddDimension(usize),
}

/// Axis-aligned box in normalized corner form: (x1, y1) top-left,
/// (x2, y2) bottom-right, all coordinates in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Validate a raw 4-tuple into a box, enforcing ordering and range.
pub fn validate_box(raw: [f64; 4]) -> Result<BoundingBox, GeometryError> {
    for (i, &v) in raw.iter().enumerate() {
        if !v.is_finite() {
            return Err(GeometryError::NonFinite(i));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(GeometryError::CoordinateOutOfRange { index: i, value: v });
        }
    }
    let [x1, y1, x2, y2] = raw;
    if x2 < x1 || y2 < y1 {
        return Err(GeometryError::DegenerateBox(x1, y1, x2, y2));
    }
    Ok(BoundingBox { x1, y1, x2, y2 })
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Repair a raw prediction into a valid box: reorder corners if flipped
    /// and clamp everything to [0, 1]. Used on regression-head outputs,
    /// which are unconstrained.
    pub fn clamp_from_raw(raw: [f64; 4]) -> BoundingBox {
        let cl = |v: f64| {
            if v.is_nan() {
                0.0
            } else {
                v.clamp(0.0, 1.0)
            }
        };
        let (mut x1, mut y1, mut x2, mut y2) = (cl(raw[0]), cl(raw[1]), cl(raw[2]), cl(raw[3]));
        if x2 < x1 {
            std::mem::swap(&mut x1, &mut x2);
        }
        if y2 < y1 {
            std::mem::swap(&mut y1, &mut y2);
        }
        BoundingBox { x1, y1, x2, y2 }
    }
}

/// Intersection over union. Identical boxes score 1 even at zero area, so
/// self-IoU is total; otherwise a zero-area union scores 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
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

/// Two prompt tokens (one per box corner) of width `d_v`, each the
/// concatenation of sinusoidal encodings of the corner's x and y.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPromptTokens {
    pub tokens: Array2<f64>,
}

/// Sinusoidal encoding of a scalar in [0,1] into `dim` values, interleaved
/// [sin(w0 t), cos(w0 t), sin(w1 t), ...] with frequencies geometrically
/// spaced from 1 to 1e4.
fn encode_scalar(t: f64, dim: usize, out: &mut [f64]) {
    let pairs = dim / 2;
    for k in 0..pairs {
        let exponent = if pairs > 1 {
            k as f64 / (pairs - 1) as f64
        } else {
            0.0
        };
        let freq = 10_000.0_f64.powf(exponent);
        out[2 * k] = (freq * t).sin();
        out[2 * k + 1] = (freq * t).cos();
    }
}

/// Encode a box as two prompt tokens of width `d_v` (must be even, >= 4).
/// Deterministic in the box and width; every component lies in [-1, 1].
pub fn encode_box_prompt(b: &BoundingBox, d_v: usize) -> Result<BoxPromptTokens, GeometryError> {
    if d_v % 2 != 0 || d_v < 4 {
        return Err(GeometryError::OddDimension(d_v));
    }
    let half = d_v / 2;
    let mut tokens = Array2::zeros((2, d_v));
    let corners = [(b.x1, b.y1), (b.x2, b.y2)];
    for (row, &(x, y)) in corners.iter().enumerate() {
        let mut buf = vec![0.0; d_v];
        encode_scalar(x, half, &mut buf[..half]);
        encode_scalar(y, half, &mut buf[half..]);
        for (col, &v) in buf.iter().enumerate() {
            tokens[[row, col]] = v;
        }
    }
    Ok(BoxPromptTokens { tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        validate_box([x1, y1, x2, y2]).unwrap()
    }

    #[test]
    fn validate_accepts_full_image_box() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(b.area(), 1.0);
    }

    #[test]
    fn validate_rejects_flipped_corners() {
        assert!(matches!(
            validate_box([0.2, 0.3, 0.1, 0.5]),
            Err(GeometryError::DegenerateBox(..))
        ));
    }

    #[test]
    fn validate_rejects_out_of_range() {
        assert!(matches!(
            validate_box([-0.1, 0.0, 0.5, 0.5]),
            Err(GeometryError::CoordinateOutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            validate_box([0.0, 0.0, 1.5, 0.5]),
            Err(GeometryError::CoordinateOutOfRange { index: 2, .. })
        ));
        assert!(matches!(
            validate_box([0.0, f64::NAN, 0.5, 0.5]),
            Err(GeometryError::NonFinite(1))
        ));
    }

    #[test]
    fn quarter_area_box() {
        let b = bx(0.25, 0.25, 0.75, 0.75);
        assert!((b.area() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn iou_disjoint_and_half_overlap() {
        let a = bx(0.0, 0.0, 0.5, 0.5);
        let b = bx(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
        // hand computation: inter = 0.5, union = 1.0
        let c = bx(0.0, 0.0, 1.0, 1.0);
        let d = bx(0.0, 0.0, 0.5, 1.0);
        assert!((iou(&c, &d) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn iou_zero_area_conventions() {
        let p = bx(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 1.0);
        let q = bx(0.4, 0.4, 0.4, 0.4);
        assert_eq!(iou(&p, &q), 0.0);
    }

    #[test]
    fn clamp_from_raw_repairs_predictions() {
        let b = BoundingBox::clamp_from_raw([1.4, -0.2, 0.3, 0.6]);
        assert_eq!(b, bx(0.3, 0.0, 1.0, 0.6));
        let n = BoundingBox::clamp_from_raw([f64::NAN, 0.1, 0.5, 0.5]);
        assert!(validate_box(n.as_array()).is_ok());
    }

    #[test]
    fn prompt_tokens_deterministic_and_bounded() {
        let b = bx(0.1, 0.2, 0.6, 0.9);
        let t1 = encode_box_prompt(&b, 16).unwrap();
        let t2 = encode_box_prompt(&b, 16).unwrap();
        assert_eq!(t1, t2);
        for &v in t1.tokens.iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
        assert!(matches!(
            encode_box_prompt(&b, 7),
            Err(GeometryError::OddDimension(7))
        ));
    }

    #[test]
    fn prompt_tokens_zero_box_pattern() {
        // first corner of the zero box is (0,0): sin 0 / cos 0 alternate
        let b = bx(0.0, 0.0, 0.0, 0.0);
        let t = encode_box_prompt(&b, 8).unwrap();
        for k in 0..4 {
            assert_eq!(t.tokens[[0, 2 * k]], 0.0);
            assert_eq!(t.tokens[[0, 2 * k + 1]], 1.0);
        }
    }

    #[test]
    fn prompt_tokens_distinct_on_coordinate_grid() {
        // scan a 100x100 grid of top-left corners; encodings must be
        // pairwise distinct at working precision
        let mut seen = std::collections::HashSet::new();
        for i in 0..100 {
            for j in 0..100 {
                let x = i as f64 / 100.0;
                let y = j as f64 / 100.0;
                let b = bx(x, y, 1.0, 1.0);
                let t = encode_box_prompt(&b, 8).unwrap();
                let key: Vec<u64> = t.tokens.iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(key), "collision at ({x}, {y})");
            }
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_self_unit(
            ax1 in 0.0..0.5, ay1 in 0.0..0.5, aw in 0.01..0.5, ah in 0.01..0.5,
            bx1 in 0.0..0.5, by1 in 0.0..0.5, bw in 0.01..0.5, bh in 0.01..0.5,
        ) {
            let a = bx(ax1, ay1, ax1 + aw, ay1 + ah);
            let b = bx(bx1, by1, bx1 + bw, by1 + bh);
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            if v == 1.0 {
                prop_assert_eq!(a, b);
            }
        }
    }
}
