//! Part-level generation metrics (MMD-P, COV-P, 1NNA-P) and the SNAP
//! connectivity score.
//!
//! Set metrics compare part clouds after unit-cube canonicalization and
//! resampling to a common point count; all distances are Chamfer.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{chamfer, nearest_to_set, unit_cube_canonicalize, Point, SegmentedCloud};
use crate::error::{Error, Result};

pub const DEFAULT_N_SNAP: usize = 30;
/// Per-part point count for the set metrics at desk scale.
pub const DEFAULT_METRIC_POINTS: usize = 128;

/// Canonicalized clouds of one part from generated and reference shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct PartSetPair {
    pub part: usize,
    pub generated: Vec<Vec<Point>>,
    pub reference: Vec<Vec<Point>>,
}

fn resample_points<R: Rng + ?Sized>(points: &[Point], n: usize, rng: &mut R) -> Vec<Point> {
    if points.len() == n {
        return points.to_vec();
    }
    (0..n).map(|_| points[rng.random_range(0..points.len())]).collect()
}

fn prepare<R: Rng + ?Sized>(shapes: &[SegmentedCloud], part: usize, n_points: usize, rng: &mut R) -> Result<Vec<Vec<Point>>> {
    let mut out = Vec::new();
    for s in shapes {
        let p = s.part(part);
        if !p.is_empty() {
            out.push(resample_points(&unit_cube_canonicalize(&p)?, n_points, rng));
        }
    }
    Ok(out)
}

impl PartSetPair {
    /// Collects part `part` from every shape that has it.
    pub fn from_shapes<R: Rng + ?Sized>(generated: &[SegmentedCloud], reference: &[SegmentedCloud], part: usize, n_points: usize, rng: &mut R) -> Result<Self> {
        if n_points == 0 {
            return Err(Error::InvalidArgument("n_points must be positive".into()));
        }
        let generated = prepare(generated, part, n_points, rng)?;
        let reference = prepare(reference, part, n_points, rng)?;
        Ok(Self { part, generated, reference })
    }

    fn check(&self) -> Result<()> {
        if self.reference.is_empty() || self.generated.is_empty() {
            return Err(Error::EmptySet);
        }
        Ok(())
    }
}

/// `d[i][k] = chamfer(a[i], b[k])`.
pub fn chamfer_matrix(a: &[Vec<Point>], b: &[Vec<Point>]) -> Result<Vec<Vec<f64>>> {
    a.iter().map(|x| b.iter().map(|y| chamfer(x, y)).collect()).collect()
}

/// Index of the smallest value; the first one on ties.
fn argmin(xs: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    xs.enumerate().fold(None, |best, (i, v)| match best {
        Some((_, b)) if v >= b => best,
        _ => Some((i, v)),
    })
}

/// Mean over reference clouds of the distance to the closest generated one.
pub fn mmd_p(pair: &PartSetPair) -> Result<f64> {
    pair.check()?;
    let d = chamfer_matrix(&pair.reference, &pair.generated)?;
    Ok(d.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).sum::<f64>() / d.len() as f64)
}

/// Fraction of reference clouds that are the nearest reference of some generated cloud.
pub fn cov_p(pair: &PartSetPair) -> Result<f64> {
    pair.check()?;
    let d = chamfer_matrix(&pair.generated, &pair.reference)?;
    let mut hit = vec![false; pair.reference.len()];
    for row in &d {
        hit[argmin(row.iter().copied()).unwrap().0] = true;
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / hit.len() as f64)
}

/// Leave-one-out 1-NN accuracy over generated ∪ reference (generated first);
/// 0.5 means indistinguishable.
pub fn one_nna_p(pair: &PartSetPair) -> Result<f64> {
    pair.check()?;
    let all: Vec<Vec<Point>> = pair.generated.iter().chain(&pair.reference).cloned().collect();
    let ng = pair.generated.len();
    let d = chamfer_matrix(&all, &all)?;
    let correct = (0..all.len())
        .filter(|&i| {
            let (nn, _) = argmin(d[i].iter().enumerate().map(|(k, &v)| if k == i { f64::INFINITY } else { v })).unwrap();
            (nn < ng) == (i < ng)
        })
        .count();
    Ok(correct as f64 / all.len() as f64)
}

/// Which parts each part is expected to touch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    pub connections: Vec<Connection>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connection {
    pub part: usize,
    /// The connection counts as made through the closest of these.
    pub partners: Vec<usize>,
}

pub const CHAIR_PARTS: [&str; 4] = ["back", "seat", "leg", "arm"];

impl ConnectionSpec {
    pub fn new(connections: Vec<(usize, Vec<usize>)>) -> Self {
        Self { connections: connections.into_iter().map(|(part, partners)| Connection { part, partners }).collect() }
    }

    /// Back to legs or seat, seat to legs, arms to back or seat.
    pub fn chair() -> Self {
        Self::new(vec![(0, vec![2, 1]), (1, vec![2]), (3, vec![0, 1])])
    }

    /// One connection per `[a, b]` pair, `a` to `b`.
    pub fn from_pairs(pairs: &[[usize; 2]]) -> Self {
        Self::new(pairs.iter().map(|p| (p[0], vec![p[1]])).collect())
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        for c in &self.connections {
            if c.part >= m || c.partners.iter().any(|&k| k >= m) {
                return Err(Error::InvalidArgument(format!("connection for part {} names a part outside 0..{m}", c.part)));
            }
            if c.partners.is_empty() {
                return Err(Error::InvalidArgument(format!("connection for part {} has no partners", c.part)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SnapScore {
    /// Mean over scored connections; `None` if every connection was skipped.
    pub value: Option<f64>,
    pub scored: usize,
    pub skipped: usize,
    /// Connections where a part had fewer than `n_snap` points.
    pub short: usize,
}

impl SnapScore {
    fn sum(&self) -> f64 {
        self.value.map_or(0.0, |v| v * self.scored as f64)
    }

    /// Pools connections from several shapes.
    pub fn merge(scores: &[SnapScore]) -> SnapScore {
        let scored = scores.iter().map(|s| s.scored).sum::<usize>();
        let total = scores.iter().map(SnapScore::sum).sum::<f64>();
        SnapScore {
            value: (scored > 0).then(|| total / scored as f64),
            scored,
            skipped: scores.iter().map(|s| s.skipped).sum(),
            short: scores.iter().map(|s| s.short).sum(),
        }
    }
}

/// Chamfer between the `n_snap` points of each part nearest the other.
pub fn snap_pair(a: &[Point], b: &[Point], n_snap: usize) -> Result<f64> {
    chamfer(&nearest_to_set(a, b, n_snap), &nearest_to_set(b, a, n_snap))
}

/// Local connectivity of one shape. Connections whose part is missing, or
/// with no present partner, are skipped and counted.
pub fn snap(shape: &SegmentedCloud, spec: &ConnectionSpec, n_snap: usize) -> Result<SnapScore> {
    spec.validate(shape.m())?;
    if n_snap == 0 {
        return Err(Error::InvalidArgument("n_snap must be positive".into()));
    }
    let parts = shape.parts();
    let mut out = SnapScore::default();
    let mut total = 0.0;
    for c in &spec.connections {
        let sj = &parts[c.part];
        let present: Vec<&Vec<Point>> = c.partners.iter().map(|&k| &parts[k]).filter(|p| !p.is_empty()).collect();
        if sj.is_empty() || present.is_empty() {
            out.skipped += 1;
            continue;
        }
        if sj.len() < n_snap || present.iter().any(|p| p.len() < n_snap) {
            out.short += 1;
        }
        let mut best = f64::INFINITY;
        for sk in present {
            best = best.min(snap_pair(sk, sj, n_snap)?);
        }
        total += best;
        out.scored += 1;
    }
    out.value = (out.scored > 0).then(|| total / out.scored as f64);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartScores {
    pub part: usize,
    pub n_reference: usize,
    pub n_generated: usize,
    pub mmd: f64,
    pub cov: f64,
    pub one_nna: f64,
}

/// Raw metric values; see [`CategoryReport::scaled`] for table units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub parts: Vec<PartScores>,
    /// Averages weighted by reference part counts.
    pub mmd: f64,
    pub cov: f64,
    pub one_nna: f64,
    pub snap: SnapScore,
}

/// MMD ×10², COV %, 1NNA %, SNAP ×10².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledScores {
    pub mmd_e2: f64,
    pub cov_pct: f64,
    pub one_nna_pct: f64,
    pub snap_e2: Option<f64>,
}

impl CategoryReport {
    pub fn scaled(&self) -> ScaledScores {
        ScaledScores { mmd_e2: self.mmd * 1e2, cov_pct: self.cov * 1e2, one_nna_pct: self.one_nna * 1e2, snap_e2: self.snap.value.map(|v| v * 1e2) }
    }
}

impl fmt::Display for CategoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>6} {:>6} {:>10} {:>8} {:>8}", "part", "n_ref", "n_gen", "MMD-P", "COV-P", "1NNA-P")?;
        for p in &self.parts {
            writeln!(f, "{:>6} {:>6} {:>6} {:>10.3} {:>8.2} {:>8.2}", p.part, p.n_reference, p.n_generated, p.mmd * 1e2, p.cov * 1e2, p.one_nna * 1e2)?;
        }
        let s = self.scaled();
        writeln!(f, "{:>6} {:>6} {:>6} {:>10.3} {:>8.2} {:>8.2}", "all", "", "", s.mmd_e2, s.cov_pct, s.one_nna_pct)?;
        match s.snap_e2 {
            Some(v) => write!(f, "SNAP x1e2: {v:.3} ({} connections, {} skipped)", self.snap.scored, self.snap.skipped),
            None => write!(f, "SNAP: no scorable connections ({} skipped)", self.snap.skipped),
        }
    }
}

/// Full report for one category. Parts absent from every reference shape are
/// left out; a part present in the reference but never generated is an error.
pub fn evaluate_category<R: Rng + ?Sized>(
    generated: &[SegmentedCloud],
    reference: &[SegmentedCloud],
    spec: &ConnectionSpec,
    n_points: usize,
    n_snap: usize,
    rng: &mut R,
) -> Result<CategoryReport> {
    let m = reference.first().ok_or(Error::EmptySet)?.m();
    if generated.is_empty() {
        return Err(Error::EmptySet);
    }
    if generated.iter().chain(reference).any(|s| s.m() != m) {
        return Err(Error::InvalidArgument("all shapes must have the same part count".into()));
    }
    let mut parts = Vec::new();
    for j in 0..m {
        let pair = PartSetPair::from_shapes(generated, reference, j, n_points, rng)?;
        if pair.reference.is_empty() {
            continue;
        }
        if pair.generated.is_empty() {
            return Err(Error::InvalidArgument(format!("part {j} never appears in the generated shapes")));
        }
        parts.push(PartScores {
            part: j,
            n_reference: pair.reference.len(),
            n_generated: pair.generated.len(),
            mmd: mmd_p(&pair)?,
            cov: cov_p(&pair)?,
            one_nna: one_nna_p(&pair)?,
        });
    }
    let weight: f64 = parts.iter().map(|p| p.n_reference as f64).sum();
    let avg = |f: fn(&PartScores) -> f64| parts.iter().map(|p| f(p) * p.n_reference as f64).sum::<f64>() / weight;
    let snaps: Vec<SnapScore> = generated.iter().map(|s| snap(s, spec, n_snap)).collect::<Result<_>>()?;
    Ok(CategoryReport { mmd: avg(|p| p.mmd), cov: avg(|p| p.cov), one_nna: avg(|p| p.one_nna), snap: SnapScore::merge(&snaps), parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sq_dist;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
        let one = |x: &[Point], y: &[Point]| {
            let mut s = 0.0;
            for p in x {
                let mut best = f64::INFINITY;
                for q in y {
                    best = best.min(sq_dist(p, q));
                }
                s += best;
            }
            s / x.len() as f64
        };
        one(a, b) + one(b, a)
    }

    fn brute_mmd(g: &[Vec<Point>], r: &[Vec<Point>]) -> f64 {
        let mut s = 0.0;
        for x in r {
            let mut best = f64::INFINITY;
            for y in g {
                best = best.min(brute_chamfer(x, y));
            }
            s += best;
        }
        s / r.len() as f64
    }

    fn brute_cov(g: &[Vec<Point>], r: &[Vec<Point>]) -> f64 {
        let mut hit = vec![false; r.len()];
        for y in g {
            let mut best = (0, f64::INFINITY);
            for (k, x) in r.iter().enumerate() {
                let d = brute_chamfer(y, x);
                if d < best.1 {
                    best = (k, d);
                }
            }
            hit[best.0] = true;
        }
        hit.iter().filter(|&&h| h).count() as f64 / r.len() as f64
    }

    fn brute_1nna(g: &[Vec<Point>], r: &[Vec<Point>]) -> f64 {
        let all: Vec<(&Vec<Point>, bool)> = g.iter().map(|c| (c, true)).chain(r.iter().map(|c| (c, false))).collect();
        let mut correct = 0;
        for (i, (x, lx)) in all.iter().enumerate() {
            let mut best = (usize::MAX, f64::INFINITY);
            for (k, (y, _)) in all.iter().enumerate() {
                if k != i {
                    let d = brute_chamfer(x, y);
                    if d < best.1 {
                        best = (k, d);
                    }
                }
            }
            if all[best.0].1 == *lx {
                correct += 1;
            }
        }
        correct as f64 / all.len() as f64
    }

    fn brute_snap(a: &[Point], b: &[Point], n: usize) -> f64 {
        let near = |x: &[Point], y: &[Point]| {
            let mut v: Vec<(f64, usize)> =
                x.iter().enumerate().map(|(i, p)| (y.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min), i)).collect();
            v.sort_by(|s, t| s.0.total_cmp(&t.0).then(s.1.cmp(&t.1)));
            v.iter().take(n).map(|&(_, i)| x[i]).collect::<Vec<_>>()
        };
        brute_chamfer(&near(a, b), &near(b, a))
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, offset: f64) -> Vec<Point> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>() + offset)).collect()
    }

    fn square(n: usize, x0: f64) -> Vec<Point> {
        let mut out = Vec::new();
        for i in 0..n {
            for k in 0..n {
                out.push([x0 + i as f64 / (n - 1) as f64, k as f64 / (n - 1) as f64, 0.0]);
            }
        }
        out
    }

    #[test]
    fn set_metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..3 {
            let g: Vec<_> = (0..10 + trial).map(|_| cloud(&mut rng, 12, 0.0)).collect();
            let r: Vec<_> = (0..10).map(|_| cloud(&mut rng, 12, 0.1)).collect();
            let pair = PartSetPair { part: 0, generated: g.clone(), reference: r.clone() };
            assert_eq!(mmd_p(&pair).unwrap(), brute_mmd(&g, &r));
            assert_eq!(cov_p(&pair).unwrap(), brute_cov(&g, &r));
            assert_eq!(one_nna_p(&pair).unwrap(), brute_1nna(&g, &r));
        }
    }

    #[test]
    fn trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r: Vec<_> = (0..6).map(|_| cloud(&mut rng, 10, 0.0)).collect();
        let same = PartSetPair { part: 0, generated: r.clone(), reference: r.clone() };
        assert_eq!(mmd_p(&same).unwrap(), 0.0);
        assert_eq!(cov_p(&same).unwrap(), 1.0);
        let junk = PartSetPair { part: 0, generated: vec![cloud(&mut rng, 10, 5.0), r[0].clone()], reference: vec![r[0].clone()] };
        assert_eq!(mmd_p(&junk).unwrap(), 0.0);
        let collapsed = PartSetPair { part: 0, generated: vec![r[2].clone(); 5], reference: r.clone() };
        assert!(cov_p(&collapsed).unwrap() <= 1.0 / 6.0);
        let far: Vec<_> = r.iter().map(|c| c.iter().map(|p| [p[0] + 50.0, p[1], p[2]]).collect()).collect();
        assert_eq!(one_nna_p(&PartSetPair { part: 0, generated: far, reference: r.clone() }).unwrap(), 1.0);
        assert!(mmd_p(&PartSetPair { part: 0, generated: vec![], reference: r }).is_err());
    }

    #[test]
    fn one_nna_is_near_half_for_a_split_pool() {
        let mut accs = Vec::new();
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool: Vec<_> = (0..100).map(|_| cloud(&mut rng, 16, 0.0)).collect();
            let r = pool.split_off(50);
            accs.push(one_nna_p(&PartSetPair { part: 0, generated: pool, reference: r }).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((0.35..=0.65).contains(&mean), "{accs:?}");
    }

    #[test]
    fn snap_matches_brute_force_and_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = cloud(&mut rng, 20, 0.0);
            let b = cloud(&mut rng, 15, 0.7);
            assert!((snap_pair(&a, &b, 7).unwrap() - brute_snap(&a, &b, 7)).abs() < 1e-9);
        }
        let touching = SegmentedCloud::from_parts(&[square(10, 0.0), square(10, 1.0)], "x").unwrap();
        let apart = SegmentedCloud::from_parts(&[square(10, 0.0), square(10, 1.5)], "x").unwrap();
        let spec = ConnectionSpec::from_pairs(&[[0, 1]]);
        let s0 = snap(&touching, &spec, 30).unwrap().value.unwrap();
        let s1 = snap(&apart, &spec, 30).unwrap().value.unwrap();
        assert!(s0 < s1, "{s0} {s1}");
        let dup = SegmentedCloud::from_parts(&[square(6, 0.0), square(6, 0.0)], "x").unwrap();
        assert_eq!(snap(&dup, &spec, 30).unwrap().value, Some(0.0));
    }

    #[test]
    fn snap_skips_missing_partners() {
        let shape = SegmentedCloud::from_parts(&[square(4, 0.0), vec![], square(4, 1.0), vec![]], "x").unwrap();
        let s = snap(&shape, &ConnectionSpec::chair(), 30).unwrap();
        // back->{leg, seat} scores via the legs; seat and arm are missing.
        assert_eq!((s.scored, s.skipped, s.short), (1, 2, 1));
        assert!(snap(&shape, &ConnectionSpec::from_pairs(&[[0, 9]]), 30).is_err());
        let merged = SnapScore::merge(&[s, SnapScore { value: Some(3.0), scored: 3, skipped: 0, short: 0 }]);
        assert_eq!(merged.scored, 4);
        assert!((merged.value.unwrap() - (s.value.unwrap() + 9.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn chair_spec_is_exact() {
        let c = ConnectionSpec::chair();
        let name = |j: usize| CHAIR_PARTS[j];
        let described: Vec<(&str, Vec<&str>)> = c.connections.iter().map(|c| (name(c.part), c.partners.iter().map(|&k| name(k)).collect())).collect();
        assert_eq!(described, vec![("back", vec!["leg", "seat"]), ("seat", vec!["leg"]), ("arm", vec!["back", "seat"])]);
    }

    #[test]
    fn category_report_weights_by_reference_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng, with_second: bool| {
            let second = if with_second { cloud(rng, 12, 1.0) } else { vec![] };
            SegmentedCloud::from_parts(&[cloud(rng, 12, 0.0), second], "x").unwrap()
        };
        let reference: Vec<_> = (0..6).map(|i| mk(&mut rng, i < 2)).collect();
        let generated: Vec<_> = (0..5).map(|_| mk(&mut rng, true)).collect();
        let spec = ConnectionSpec::from_pairs(&[[0, 1]]);
        let rep = evaluate_category(&generated, &reference, &spec, 12, 30, &mut rng).unwrap();
        assert_eq!(rep.parts.iter().map(|p| p.n_reference).collect::<Vec<_>>(), vec![6, 2]);
        let want = (rep.parts[0].mmd * 6.0 + rep.parts[1].mmd * 2.0) / 8.0;
        assert!((rep.mmd - want).abs() < 1e-15);
        assert_eq!(rep.snap.scored, 5);
        let s = rep.scaled();
        assert!((s.cov_pct - rep.cov * 100.0).abs() < 1e-12);
        assert!(rep.to_string().contains("MMD-P"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn snap_is_translation_invariant(seed in 0u64..1000, dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = SegmentedCloud::from_parts(&[cloud(&mut rng, 40, 0.0), cloud(&mut rng, 40, 0.9)], "x").unwrap();
            let spec = ConnectionSpec::from_pairs(&[[0, 1]]);
            let a = snap(&shape, &spec, 30).unwrap().value.unwrap();
            let b = snap(&shape.translated([dx, dy, 0.0]), &spec, 30).unwrap().value.unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }

        #[test]
        fn snap_grows_when_a_part_moves_away(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, 40, 0.0);
            let b = cloud(&mut rng, 40, 0.9);
            let moved: Vec<Point> = b.iter().map(|p| [p[0] + 0.5, p[1] + 0.5, p[2] + 0.5]).collect();
            let spec = ConnectionSpec::from_pairs(&[[0, 1]]);
            let s0 = snap(&SegmentedCloud::from_parts(&[a.clone(), b], "x").unwrap(), &spec, 30).unwrap().value.unwrap();
            let s1 = snap(&SegmentedCloud::from_parts(&[a, moved], "x").unwrap(), &spec, 30).unwrap().value.unwrap();
            prop_assert!(s1 > s0);
        }

        #[test]
        fn metrics_are_bounded(seed in 0u64..1000, ng in 1usize..8, nr in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<_> = (0..ng).map(|_| cloud(&mut rng, 8, 0.0)).collect();
            let r: Vec<_> = (0..nr).map(|_| cloud(&mut rng, 8, 0.0)).collect();
            let pair = PartSetPair { part: 0, generated: g, reference: r };
            let cov = cov_p(&pair).unwrap();
            let nna = one_nna_p(&pair).unwrap();
            prop_assert!(mmd_p(&pair).unwrap() >= 0.0);
            prop_assert!((0.0..=1.0).contains(&cov) && (0.0..=1.0).contains(&nna));
            prop_assert!(cov <= ng as f64 / nr as f64 + 1e-12);
        }
    }
}
