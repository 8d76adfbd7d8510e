//! Segmented point clouds, per-part transforms and the Chamfer distance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Smallest per-axis scale produced by [`canonicalize_part`].
pub const SCALE_FLOOR: f64 = 1e-8;

/// Minimum number of points a present part receives when a shape is resampled.
pub const MIN_POINTS_PER_PART: usize = 8;

/// A point cloud with one semantic part label per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentedCloud {
    points: Vec<Point>,
    labels: Vec<usize>,
    class_id: String,
    m: usize,
}

impl SegmentedCloud {
    pub fn new(points: Vec<Point>, labels: Vec<usize>, class_id: impl Into<String>, m: usize) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::LengthMismatch(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::LabelOutOfRange { label, m });
        }
        if let Some(index) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { points, labels, class_id: class_id.into(), m })
    }

    /// Builds a cloud from per-part point lists; part `j` gets label `j`.
    pub fn from_parts(parts: &[Vec<Point>], class_id: impl Into<String>) -> Result<Self> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (j, part) in parts.iter().enumerate() {
            points.extend_from_slice(part);
            labels.extend(std::iter::repeat_n(j, part.len()));
        }
        Self::new(points, labels, class_id, parts.len())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_id(&self) -> &str {
        &self.class_id
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn part(&self, j: usize) -> Vec<Point> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == j)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn parts(&self) -> Vec<Vec<Point>> {
        let mut parts = vec![Vec::new(); self.m];
        for (p, &l) in self.points.iter().zip(&self.labels) {
            parts[l].push(*p);
        }
        parts
    }

    pub fn part_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.m];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn present(&self) -> Vec<bool> {
        self.part_sizes().into_iter().map(|n| n > 0).collect()
    }

    /// Canonicalizes every present part, returning the canonical parts and the transform set.
    pub fn canonical_parts(&self) -> (Vec<Vec<Point>>, TransformSet) {
        let parts = self.parts();
        let mut canon = Vec::with_capacity(self.m);
        let mut set = TransformSet::absent(self.m);
        for (j, part) in parts.iter().enumerate() {
            match canonicalize_part(part) {
                Ok((c, t)) => {
                    canon.push(c);
                    set.transforms[j] = t;
                    set.present[j] = true;
                }
                Err(_) => canon.push(Vec::new()),
            }
        }
        (canon, set)
    }

    pub fn translated(&self, offset: Point) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        Self { points, ..self.clone() }
    }
}

/// Per-part shift and positive per-axis scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartTransform {
    pub shift: Point,
    pub scale: Point,
}

impl PartTransform {
    pub const IDENTITY: PartTransform = PartTransform { shift: [0.0; 3], scale: [1.0; 3] };

    pub fn new(shift: Point, scale: Point) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || shift.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid transform shift {shift:?} scale {scale:?}")));
        }
        Ok(Self { shift, scale })
    }

    pub fn log_scale(&self) -> Point {
        self.scale.map(f64::ln)
    }

    /// `[shift, log scale]` as a flat 6-vector.
    pub fn to_features(&self) -> [f64; 6] {
        let l = self.log_scale();
        [self.shift[0], self.shift[1], self.shift[2], l[0], l[1], l[2]]
    }

    pub fn from_features(f: &[f64]) -> Self {
        Self { shift: [f[0], f[1], f[2]], scale: [f[3].exp(), f[4].exp(), f[5].exp()] }
    }
}

/// One transform per semantic part with a presence mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    pub transforms: Vec<PartTransform>,
    pub present: Vec<bool>,
}

impl TransformSet {
    pub fn absent(m: usize) -> Self {
        Self { transforms: vec![PartTransform::IDENTITY; m], present: vec![false; m] }
    }

    pub fn m(&self) -> usize {
        self.transforms.len()
    }
}

/// Shifts a part to zero per-axis mean and scales it to unit per-axis
/// (population) standard deviation.
pub fn canonicalize_part(points: &[Point]) -> Result<(Vec<Point>, PartTransform)> {
    if points.is_empty() {
        return Err(Error::EmptyPart);
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    mean = mean.map(|s| s / n);
    let mut var = [0.0; 3];
    for p in points {
        for a in 0..3 {
            let d = p[a] - mean[a];
            var[a] += d * d;
        }
    }
    let scale = var.map(|v| (v / n).sqrt().max(SCALE_FLOOR));
    let canonical = points
        .iter()
        .map(|p| std::array::from_fn(|a| (p[a] - mean[a]) / scale[a]))
        .collect();
    Ok((canonical, PartTransform { shift: mean, scale }))
}

pub fn apply_transform(canonical: &[Point], transform: &PartTransform) -> Vec<Point> {
    canonical
        .iter()
        .map(|p| std::array::from_fn(|a| transform.scale[a] * p[a] + transform.shift[a]))
        .collect()
}

/// Maps a part into `[-0.5, 0.5]` independently along each axis.
pub fn unit_cube_canonicalize(points: &[Point]) -> Result<Vec<Point>> {
    if points.is_empty() {
        return Err(Error::EmptyPart);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mid: Point = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
    let extent: Point = std::array::from_fn(|a| (hi[a] - lo[a]).max(SCALE_FLOOR));
    Ok(points
        .iter()
        .map(|p| std::array::from_fn(|a| (p[a] - mid[a]) / extent[a]))
        .collect())
}

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of points sorted by x, used for pruned nearest-neighbour sweeps.
struct SweepIndex {
    sorted: Vec<Point>,
}

impl SweepIndex {
    fn new(points: &[Point]) -> Self {
        let mut sorted = points.to_vec();
        sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
        Self { sorted }
    }

    fn nearest_sq(&self, q: &Point) -> f64 {
        let s = &self.sorted;
        let start = s.partition_point(|p| p[0] < q[0]);
        let mut best = f64::INFINITY;
        let mut hi = start;
        let mut lo = start;
        loop {
            let mut advanced = false;
            if hi < s.len() {
                let dx = s[hi][0] - q[0];
                if dx * dx <= best {
                    best = best.min(sq_dist(&s[hi], q));
                    hi += 1;
                    advanced = true;
                } else {
                    hi = s.len();
                }
            }
            if lo > 0 {
                let dx = q[0] - s[lo - 1][0];
                if dx * dx <= best {
                    best = best.min(sq_dist(&s[lo - 1], q));
                    lo -= 1;
                    advanced = true;
                } else {
                    lo = 0;
                }
            }
            if !advanced {
                return best;
            }
        }
    }
}

fn mean_nearest_sq(from: &[Point], to: &[Point]) -> f64 {
    let index = SweepIndex::new(to);
    from.iter().map(|p| index.nearest_sq(p)).sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance: mean squared distance from each point to its
/// nearest neighbour in the other set, summed over both directions.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(mean_nearest_sq(a, b) + mean_nearest_sq(b, a))
}

/// Points of `from` ordered by their distance to the set `to`, truncated to `k`.
pub fn nearest_to_set(from: &[Point], to: &[Point], k: usize) -> Vec<Point> {
    let index = SweepIndex::new(to);
    let mut scored: Vec<(f64, usize)> = from.iter().enumerate().map(|(i, p)| (index.nearest_sq(p), i)).collect();
    scored.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    scored.into_iter().take(k).map(|(_, i)| from[i]).collect()
}

/// Per-part point counts for a fixed budget: every present part gets at least
/// [`MIN_POINTS_PER_PART`], the rest is split proportionally to part size by
/// largest remainder.
pub fn allocate_budget(sizes: &[usize], budget: usize) -> Result<Vec<usize>> {
    let present = sizes.iter().filter(|&&n| n > 0).count();
    if present == 0 {
        return Err(Error::EmptySet);
    }
    if budget < present * MIN_POINTS_PER_PART {
        return Err(Error::InvalidArgument(format!(
            "point budget {budget} too small for {present} parts"
        )));
    }
    let spare = budget - present * MIN_POINTS_PER_PART;
    let total: usize = sizes.iter().sum();
    let mut counts: Vec<usize> = Vec::with_capacity(sizes.len());
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    let mut assigned = 0;
    for (j, &n) in sizes.iter().enumerate() {
        if n == 0 {
            counts.push(0);
            continue;
        }
        let exact = spare as f64 * n as f64 / total as f64;
        let floor = exact.floor() as usize;
        counts.push(MIN_POINTS_PER_PART + floor);
        assigned += floor;
        remainders.push((exact - floor as f64, j));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, j) in remainders.iter().take(spare - assigned) {
        counts[j] += 1;
    }
    Ok(counts)
}

/// Resamples a shape to exactly `budget` points, drawing each part's points
/// uniformly with replacement.
pub fn resample_cloud<R: Rng + ?Sized>(cloud: &SegmentedCloud, budget: usize, rng: &mut R) -> Result<SegmentedCloud> {
    let counts = allocate_budget(&cloud.part_sizes(), budget)?;
    let parts = cloud.parts();
    let mut points = Vec::with_capacity(budget);
    let mut labels = Vec::with_capacity(budget);
    for (j, (part, &count)) in parts.iter().zip(&counts).enumerate() {
        for _ in 0..count {
            points.push(part[rng.random_range(0..part.len())]);
            labels.push(j);
        }
    }
    SegmentedCloud::new(points, labels, cloud.class_id.clone(), cloud.m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
        let mut ab = 0.0;
        for p in a {
            let mut best = f64::INFINITY;
            for q in b {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            ab += best;
        }
        let mut ba = 0.0;
        for q in b {
            let mut best = f64::INFINITY;
            for p in a {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            ba += best;
        }
        ab / a.len() as f64 + ba / b.len() as f64
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Point> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random_range(lo..hi))).collect()
    }

    #[test]
    fn canonicalize_zero_mean_line() {
        let (canon, t) = canonicalize_part(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(canon, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(t.shift, [0.0; 3]);
        assert_eq!(t.scale, [1.0, SCALE_FLOOR, SCALE_FLOOR]);
    }

    #[test]
    fn canonicalize_symmetric_pair() {
        let (canon, t) = canonicalize_part(&[[2.0; 3], [4.0; 3]]).unwrap();
        assert_eq!(t.shift, [3.0; 3]);
        assert_eq!(t.scale, [1.0; 3]);
        assert_eq!(canon, vec![[-1.0; 3], [1.0; 3]]);
    }

    #[test]
    fn canonicalize_empty_is_error() {
        let err = canonicalize_part(&[]).unwrap_err();
        assert_eq!(err.to_string(), "empty part");
    }

    #[test]
    fn canonicalize_round_trip_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..512)
            .map(|_| [rng.random_range(-2.0..1.0), rng.random_range(0.5..0.7), rng.random_range(3.0..9.0)])
            .collect();
        let (canon, t) = canonicalize_part(&pts).unwrap();
        let back = apply_transform(&canon, &t);
        let err = pts
            .iter()
            .zip(&back)
            .flat_map(|(p, q)| (0..3).map(move |a| (p[a] - q[a]).abs()))
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "round trip error {err}");
    }

    #[test]
    fn apply_transform_examples() {
        let pts = vec![[0.3, -1.0, 2.0]];
        assert_eq!(apply_transform(&pts, &PartTransform::IDENTITY), pts);
        let t = PartTransform::new([1.0, 2.0, 3.0], [2.0; 3]).unwrap();
        assert_eq!(apply_transform(&[[1.0; 3]], &t), vec![[3.0, 4.0, 5.0]]);
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_points(&mut rng, 64, -1.0, 1.0);
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        assert!(matches!(chamfer(&[], &x), Err(Error::EmptySet)));
    }

    #[test]
    fn chamfer_matches_brute_force_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_points(&mut rng, 128, -1.0, 1.0);
            let b = random_points(&mut rng, 128, -0.5, 1.5);
            let fast = chamfer(&a, &b).unwrap();
            let slow = brute_chamfer(&a, &b);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn unit_cube_fits_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_points(&mut rng, 100, 2.0, 7.0);
        let c = unit_cube_canonicalize(&pts).unwrap();
        for a in 0..3 {
            let lo = c.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            let hi = c.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
            assert!((lo + 0.5).abs() < 1e-12 && (hi - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cloud_validation() {
        let err = SegmentedCloud::new(vec![[0.0; 3]], vec![2], "c", 2).unwrap_err();
        assert!(err.to_string().starts_with("label out of range"));
        let err = SegmentedCloud::new(vec![[f64::NAN, 0.0, 0.0]], vec![0], "c", 2).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0 }));
        assert!(SegmentedCloud::new(vec![[0.0; 3]], vec![], "c", 2).is_err());
    }

    #[test]
    fn budget_allocation_respects_minimum_and_total() {
        let counts = allocate_budget(&[1000, 3, 0, 200], 128).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 128);
        assert_eq!(counts[2], 0);
        assert!(counts[1] >= MIN_POINTS_PER_PART);
        assert!(counts[0] > counts[3]);
        assert!(allocate_budget(&[5, 5], 10).is_err());
    }

    #[test]
    fn resample_hits_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts = vec![random_points(&mut rng, 50, 0.0, 1.0), Vec::new(), random_points(&mut rng, 10, 0.0, 1.0)];
        let cloud = SegmentedCloud::from_parts(&parts, "toy").unwrap();
        let r = resample_cloud(&cloud, 64, &mut rng).unwrap();
        assert_eq!(r.len(), 64);
        assert_eq!(r.part_sizes()[1], 0);
        assert!(r.part(2).iter().all(|p| parts[2].contains(p)));
    }

    proptest! {
        #[test]
        fn canonical_statistics_and_round_trip(
            pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 4..200)
        ) {
            let (canon, t) = canonicalize_part(&pts).unwrap();
            let n = canon.len() as f64;
            for a in 0..3 {
                if t.scale[a] > 1e-3 {
                    let mean = canon.iter().map(|p| p[a]).sum::<f64>() / n;
                    let var = canon.iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / n;
                    prop_assert!(mean.abs() < 1e-6);
                    prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
                }
            }
            let back = apply_transform(&canon, &t);
            for (p, q) in pts.iter().zip(&back) {
                for a in 0..3 {
                    prop_assert!((p[a] - q[a]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn chamfer_symmetric_nonnegative(
            a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..20),
            b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..20),
        ) {
            let ab = chamfer(&a, &b).unwrap();
            let ba = chamfer(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((ab - brute_chamfer(&a, &b)).abs() < 1e-9);
            let mut shuffled = a.clone();
            shuffled.reverse();
            prop_assert_eq!(chamfer(&a, &shuffled).unwrap(), 0.0);
        }
    }
}
