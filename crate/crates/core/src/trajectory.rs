//! Pen trajectories and the per-point feature rows fed to the encoder.
//!
//! The pipeline is `normalize -> resample -> featurize`. Coordinates are
//! kept as `f64` regardless of the network scalar; features are converted
//! when a batch is assembled.

use serde::{Deserialize, Serialize};

/// Default arc-length spacing of [`resample`], in normalized units.
pub const DEFAULT_SPACING: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("empty trajectory")]
    Empty,
    #[error("zero-extent trajectory")]
    ZeroExtent,
    #[error("point {index}: stroke ids must start at 1 and never decrease")]
    StrokeOrder { index: usize },
    #[error("point {index}: non-finite coordinate")]
    NonFinite { index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One digitizer sample; `stroke` is the 1-based stroke index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenPoint {
    pub x: f64,
    pub y: f64,
    pub stroke: u32,
}

impl PenPoint {
    pub fn new(x: f64, y: f64, stroke: u32) -> Self {
        PenPoint { x, y, stroke }
    }
}

/// Ordered pen points grouped into strokes by non-decreasing stroke ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    points: Vec<PenPoint>,
}

impl RawTrajectory {
    pub fn new(points: Vec<PenPoint>) -> Result<Self, TrajectoryError> {
        if points.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        let mut prev = 1;
        for (index, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(TrajectoryError::NonFinite { index });
            }
            if p.stroke < prev || p.stroke == 0 {
                return Err(TrajectoryError::StrokeOrder { index });
            }
            prev = p.stroke;
        }
        Ok(RawTrajectory { points })
    }

    /// Builds from `[x, y, stroke]` triples as they appear in dataset records
    /// and request bodies.
    pub fn from_triples(triples: &[[f64; 3]]) -> Result<Self, TrajectoryError> {
        let points = triples
            .iter()
            .enumerate()
            .map(|(index, t)| {
                let s = t[2];
                if s.fract() != 0.0 || s < 1.0 || s > u32::MAX as f64 {
                    return Err(TrajectoryError::StrokeOrder { index });
                }
                Ok(PenPoint::new(t[0], t[1], s as u32))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(points)
    }

    /// Strokes given as separate polylines; stroke ids are assigned 1, 2, ...
    pub fn from_strokes<I, S>(strokes: I) -> Result<Self, TrajectoryError>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = (f64, f64)>,
    {
        let mut points = Vec::new();
        let mut id = 0;
        for stroke in strokes {
            let before = points.len();
            for (x, y) in stroke {
                points.push(PenPoint::new(x, y, id + 1));
            }
            if points.len() > before {
                id += 1;
            }
        }
        Self::new(points)
    }

    pub fn to_triples(&self) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .map(|p| [p.x, p.y, p.stroke as f64])
            .collect()
    }

    pub fn points(&self) -> &[PenPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Consecutive runs of equal stroke id.
    pub fn strokes(&self) -> impl Iterator<Item = &[PenPoint]> {
        self.points.chunk_by(|a, b| a.stroke == b.stroke)
    }

    pub fn stroke_count(&self) -> usize {
        self.strokes().count()
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (
                f64::INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
            ),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }

    /// Applies `f` to every coordinate, keeping stroke ids.
    pub fn map_points(&self, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> RawTrajectory {
        RawTrajectory {
            points: self
                .points
                .iter()
                .map(|p| {
                    let (x, y) = f(p.x, p.y);
                    PenPoint::new(x, y, p.stroke)
                })
                .collect(),
        }
    }
}

/// Centers the bounding box on the origin and scales its larger side to 1.
pub fn normalize(t: &RawTrajectory) -> Result<RawTrajectory, TrajectoryError> {
    let (x0, y0, x1, y1) = t.bounds();
    let side = (x1 - x0).max(y1 - y0);
    if side <= 0.0 {
        return Err(TrajectoryError::ZeroExtent);
    }
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    Ok(t.map_points(|x, y| ((x - cx) / side, (y - cy) / side)))
}

/// Re-spaces every stroke at uniform arc-length intervals no longer than
/// `spacing`, by linear interpolation. Endpoints of each stroke are kept.
pub fn resample(t: &RawTrajectory, spacing: f64) -> Result<RawTrajectory, TrajectoryError> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(TrajectoryError::InvalidArgument(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    let mut out = Vec::with_capacity(t.len());
    for stroke in t.strokes() {
        let id = stroke[0].stroke;
        let mut cumulative = Vec::with_capacity(stroke.len());
        let mut total = 0.0;
        cumulative.push(0.0);
        for w in stroke.windows(2) {
            total += (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
            cumulative.push(total);
        }
        if total == 0.0 {
            // Single point or a pen resting in place: one sample.
            out.push(PenPoint::new(stroke[0].x, stroke[0].y, id));
            continue;
        }
        let segments = (total / spacing).ceil().max(1.0) as usize;
        let mut seg = 0;
        for k in 0..=segments {
            let target = total * k as f64 / segments as f64;
            while seg + 2 < cumulative.len() && cumulative[seg + 1] < target {
                seg += 1;
            }
            let (a, b) = (stroke[seg], stroke[seg + 1]);
            let span = cumulative[seg + 1] - cumulative[seg];
            let frac = if span > 0.0 {
                ((target - cumulative[seg]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (x, y) = if k == segments {
                let last = stroke[stroke.len() - 1];
                (last.x, last.y)
            } else {
                (a.x + frac * (b.x - a.x), a.y + frac * (b.y - a.y))
            };
            out.push(PenPoint::new(x, y, id));
        }
    }
    RawTrajectory::new(out)
}

/// Six features per point: position, forward difference, pen-down and
/// pen-up flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    rows: Vec<[f64; 6]>,
}

impl FeatureSequence {
    pub const DIM: usize = 6;

    pub fn rows(&self) -> &[[f64; 6]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Row `i` is `[x_i, y_i, x_{i+1}-x_i, y_{i+1}-y_i, down, up]` where `down`
/// marks that point `i+1` continues the same stroke. The last row has zero
/// differences and the pen-up flag.
pub fn featurize(t: &RawTrajectory) -> Result<FeatureSequence, TrajectoryError> {
    let pts = t.points();
    if pts.is_empty() {
        return Err(TrajectoryError::InvalidArgument("empty trajectory".into()));
    }
    let rows = pts
        .iter()
        .enumerate()
        .map(|(i, p)| match pts.get(i + 1) {
            Some(next) => {
                let same = next.stroke == p.stroke;
                [
                    p.x,
                    p.y,
                    next.x - p.x,
                    next.y - p.y,
                    if same { 1.0 } else { 0.0 },
                    if same { 0.0 } else { 1.0 },
                ]
            }
            None => [p.x, p.y, 0.0, 0.0, 0.0, 1.0],
        })
        .collect();
    Ok(FeatureSequence { rows })
}

/// The full front end: normalize, resample at `spacing`, featurize.
/// Returns the resampled trajectory alongside its features so callers can
/// relate encoder frames back to drawn points.
pub fn preprocess(
    t: &RawTrajectory,
    spacing: f64,
) -> Result<(RawTrajectory, FeatureSequence), TrajectoryError> {
    let resampled = resample(&normalize(t)?, spacing)?;
    let features = featurize(&resampled)?;
    Ok((resampled, features))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn traj(pts: &[(f64, f64, u32)]) -> RawTrajectory {
        RawTrajectory::new(
            pts.iter()
                .map(|&(x, y, s)| PenPoint::new(x, y, s))
                .collect(),
        )
        .unwrap()
    }

    fn coords(t: &RawTrajectory) -> Vec<(f64, f64)> {
        t.points().iter().map(|p| (p.x, p.y)).collect()
    }

    #[test]
    fn rejects_decreasing_stroke_ids() {
        let err = RawTrajectory::new(vec![PenPoint::new(0.0, 0.0, 2), PenPoint::new(1.0, 0.0, 1)])
            .unwrap_err();
        assert_eq!(err, TrajectoryError::StrokeOrder { index: 1 });
        assert_eq!(
            RawTrajectory::new(vec![]).unwrap_err(),
            TrajectoryError::Empty
        );
    }

    #[test]
    fn square_corners_normalize_to_half_unit() {
        let t = traj(&[
            (0.0, 0.0, 1),
            (0.0, 200.0, 1),
            (200.0, 200.0, 1),
            (200.0, 0.0, 1),
        ]);
        let n = normalize(&t).unwrap();
        assert_eq!(
            coords(&n),
            vec![(-0.5, -0.5), (-0.5, 0.5), (0.5, 0.5), (0.5, -0.5)]
        );
    }

    #[test]
    fn normalize_is_idempotent() {
        let t = traj(&[(3.0, 1.0, 1), (7.0, 4.0, 1), (5.0, 9.0, 2)]);
        let once = normalize(&t).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in coords(&once).iter().zip(coords(&twice)) {
            assert!((a.0 - b.0).abs() < 1e-15 && (a.1 - b.1).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_preserves_aspect() {
        let t = traj(&[(0.0, 0.0, 1), (100.0, 50.0, 1)]);
        let (x0, y0, x1, y1) = normalize(&t).unwrap().bounds();
        assert_eq!(x1 - x0, 1.0);
        assert_eq!(y1 - y0, 0.5);
    }

    #[test]
    fn normalize_rejects_single_location() {
        let t = traj(&[(4.0, 4.0, 1), (4.0, 4.0, 1), (4.0, 4.0, 2)]);
        assert_eq!(normalize(&t).unwrap_err(), TrajectoryError::ZeroExtent);
        assert_eq!(
            TrajectoryError::ZeroExtent.to_string(),
            "zero-extent trajectory"
        );
    }

    #[test]
    fn resample_two_point_stroke() {
        let t = traj(&[(0.0, 0.0, 1), (0.0, 1.0, 1)]);
        let r = resample(&t, 0.25).unwrap();
        let ys: Vec<f64> = r.points().iter().map(|p| p.y).collect();
        assert_eq!(ys, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(r.points().iter().all(|p| p.x == 0.0));
    }

    #[test]
    fn resample_leaves_single_point_stroke() {
        let t = traj(&[(0.1, 0.2, 1), (0.0, 0.0, 2), (0.5, 0.0, 2)]);
        let r = resample(&t, 0.1).unwrap();
        assert_eq!(r.points()[0], PenPoint::new(0.1, 0.2, 1));
        assert_eq!(r.stroke_count(), 2);
    }

    #[test]
    fn resample_with_large_spacing_keeps_endpoints_only() {
        let t = traj(&[(0.0, 0.0, 1), (0.1, 0.0, 1), (0.2, 0.1, 1)]);
        let r = resample(&t, 5.0).unwrap();
        assert_eq!(coords(&r), vec![(0.0, 0.0), (0.2, 0.1)]);
    }

    #[test]
    fn resample_rejects_nonpositive_spacing() {
        let t = traj(&[(0.0, 0.0, 1), (1.0, 0.0, 1)]);
        assert!(matches!(
            resample(&t, 0.0),
            Err(TrajectoryError::InvalidArgument(_))
        ));
        assert!(matches!(
            resample(&t, -1.0),
            Err(TrajectoryError::InvalidArgument(_))
        ));
    }

    #[test]
    fn featurize_rows() {
        let t = traj(&[(0.0, 0.0, 1), (1.0, 1.0, 1), (2.0, 0.0, 2)]);
        let f = featurize(&t).unwrap();
        assert_eq!(f.rows()[0], [0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(f.rows()[1], [1.0, 1.0, 1.0, -1.0, 0.0, 1.0]);
        assert_eq!(f.rows()[2], [2.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    fn arb_trajectory() -> impl Strategy<Value = RawTrajectory> {
        prop::collection::vec(
            prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..8),
            1..5,
        )
        .prop_filter_map("needs extent", |strokes| {
            let t = RawTrajectory::from_strokes(strokes).ok()?;
            let (x0, y0, x1, y1) = t.bounds();
            ((x1 - x0).max(y1 - y0) > 1e-3).then_some(t)
        })
    }

    proptest! {
        #[test]
        fn translation_does_not_change_features(t in arb_trajectory(), dx in -1e3f64..1e3, dy in -1e3f64..1e3) {
            let moved = t.map_points(|x, y| (x + dx, y + dy));
            let a = featurize(&normalize(&t).unwrap()).unwrap();
            let b = featurize(&normalize(&moved).unwrap()).unwrap();
            for (ra, rb) in a.rows().iter().zip(b.rows()) {
                for k in 0..6 {
                    prop_assert!((ra[k] - rb[k]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn feature_flags_and_stroke_sums(t in arb_trajectory(), spacing in 0.02f64..0.5) {
            let r = resample(&normalize(&t).unwrap(), spacing).unwrap();
            let f = featurize(&r).unwrap();
            prop_assert_eq!(f.len(), r.len());
            prop_assert_eq!(r.stroke_count(), t.stroke_count());
            let ups = f.rows().iter().filter(|row| row[5] == 1.0).count();
            prop_assert_eq!(ups, r.stroke_count());
            for row in f.rows() {
                prop_assert_eq!(row[4] + row[5], 1.0);
            }
            // Differences inside a stroke telescope to last minus first.
            let mut start = 0;
            for stroke in r.strokes() {
                let n = stroke.len();
                let (sx, sy) = f.rows()[start..start + n - 1]
                    .iter()
                    .fold((0.0, 0.0), |(a, b), row| (a + row[2], b + row[3]));
                prop_assert!((sx - (stroke[n - 1].x - stroke[0].x)).abs() < 1e-9);
                prop_assert!((sy - (stroke[n - 1].y - stroke[0].y)).abs() < 1e-9);
                start += n;
            }
        }

        #[test]
        fn resampled_gaps_never_exceed_spacing(t in arb_trajectory(), spacing in 0.02f64..0.5) {
            let n = normalize(&t).unwrap();
            let r = resample(&n, spacing).unwrap();
            for stroke in r.strokes() {
                for w in stroke.windows(2) {
                    prop_assert!((w[1].x - w[0].x).hypot(w[1].y - w[0].y) <= spacing + 1e-9);
                }
            }
            // Endpoints survive.
            for (orig, new) in n.strokes().zip(r.strokes()) {
                prop_assert_eq!(orig[0], new[0]);
                if orig.iter().any(|p| (p.x, p.y) != (orig[0].x, orig[0].y)) {
                    prop_assert_eq!(orig[orig.len() - 1], new[new.len() - 1]);
                }
            }
        }
    }
}
