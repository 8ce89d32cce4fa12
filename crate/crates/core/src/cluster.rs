//! k-means over radiologist-recommended (level, width) windows.
//!
//! Samples are put into a canonical (level, width) order before seeding, so
//! the result depends only on the multiset of samples and the seed.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::windowing::WindowSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSample {
    pub level: f64,
    pub width: f64,
}

impl WindowSample {
    pub fn new(level: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !level.is_finite() || !width.is_finite() {
            return Err(Error::InvalidArgument(format!("bad window sample ({level}, {width})")));
        }
        Ok(Self { level, width })
    }

    fn point(&self) -> [f64; 2] {
        [self.level, self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<WindowSpec>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    /// Centroids ordered by ascending level.
    pub fn sorted_centroids(&self) -> Vec<WindowSpec> {
        let mut c = self.centroids.clone();
        c.sort_by(|a, b| a.level().total_cmp(&b.level()).then(a.width().total_cmp(&b.width())));
        c
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { k: 3, seed: 0, max_iter: 300, tol: 1e-6 }
    }
}

#[inline]
fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dl = a[0] - b[0];
    let dw = a[1] - b[1];
    dl * dl + dw * dw
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point coincides with a centroid already; take the first uncovered one
            Err(_) => d2.iter().position(|&d| d > 0.0).unwrap_or(0),
        };
        let c = points[next];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    centroids
}

pub fn cluster_windows(samples: &[WindowSample], params: KMeansParams) -> Result<KMeansResult> {
    let KMeansParams { k, seed, max_iter, tol } = params;
    if samples.is_empty() {
        return Err(Error::Empty("window samples"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (samples[a].point(), samples[b].point());
        pa[0].total_cmp(&pb[0]).then(pa[1].total_cmp(&pb[1]))
    });
    let points: Vec<[f64; 2]> = order.iter().map(|&i| samples[i].point()).collect();
    let distinct = 1 + points.windows(2).filter(|w| w[0] != w[1]).count();
    if k > distinct {
        return Err(Error::TooFewDistinct { k, distinct });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(&points, k, &mut rng);
    let mut assign = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < max_iter.max(1) {
        iterations += 1;
        let mut inertia = 0.0;
        for (a, &p) in assign.iter_mut().zip(&points) {
            let (j, d) = nearest(p, &centroids);
            *a = j;
            inertia += d;
        }
        history.push(inertia);

        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (&a, &p) in assign.iter().zip(&points) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        let mut movement = 0.0f64;
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            let new = if counts[j] > 0 {
                [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64]
            } else {
                // farthest sample from its own centroid, lowest index on ties
                let mut far = (usize::MAX, -1.0);
                for (i, (&a, &p)) in assign.iter().zip(&points).enumerate() {
                    let d = dist2(p, centroids[a]);
                    if !taken[i] && d > far.1 {
                        far = (i, d);
                    }
                }
                taken[far.0] = true;
                points[far.0]
            };
            movement = movement.max(dist2(new, centroids[j]).sqrt());
            centroids[j] = new;
        }
        if movement < tol {
            break;
        }
    }

    let mut inertia = 0.0;
    for (a, &p) in assign.iter_mut().zip(&points) {
        let (j, d) = nearest(p, &centroids);
        *a = j;
        inertia += d;
    }
    if history.last().map_or(true, |&h| inertia < h) {
        history.push(inertia);
    }

    let mut assignments = vec![0usize; samples.len()];
    for (sorted_idx, &orig) in order.iter().enumerate() {
        assignments[orig] = assign[sorted_idx];
    }
    let centroids = centroids
        .into_iter()
        .map(|c| WindowSpec::new(c[0], c[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(KMeansResult { centroids, assignments, inertia, iterations, inertia_history: history })
}

/// Parses `level,width` lines; blank lines and `#` comments are skipped.
pub fn parse_samples(text: &str) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (l, w) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `level,width`", n + 1)))?;
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("line {}: bad number {s:?}", n + 1)))
        };
        out.push(WindowSample::new(num(l)?, num(w)?)?);
    }
    Ok(out)
}

/// Gaussian blobs around the given centres, used for recovery checks and demos.
pub fn synthetic_blobs(centres: &[WindowSpec], per_blob: usize, sigma: f64, seed: u64) -> Vec<WindowSample> {
    let normal = rand_distr::Normal::new(0.0, sigma).expect("sigma must be finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(centres.len() * per_blob);
    for c in centres {
        for _ in 0..per_blob {
            let level = c.level() + normal.sample(&mut rng);
            let width = (c.width() + normal.sample(&mut rng)).max(1.0);
            out.push(WindowSample { level, width });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::default_views;

    fn s(l: f64, w: f64) -> WindowSample {
        WindowSample::new(l, w).unwrap()
    }

    #[test]
    fn k1_is_mean() {
        let pts = vec![s(0.0, 10.0), s(10.0, 30.0), s(-4.0, 2.0)];
        let r = cluster_windows(&pts, KMeansParams { k: 1, ..Default::default() }).unwrap();
        assert!((r.centroids[0].level() - 2.0).abs() < 1e-12);
        assert!((r.centroids[0].width() - 14.0).abs() < 1e-12);
        assert!(r.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn exact_cover() {
        let pts = vec![s(0.0, 1.0), s(5.0, 1.0), s(0.0, 9.0), s(100.0, 100.0)];
        let r = cluster_windows(&pts, KMeansParams { k: 4, seed: 3, ..Default::default() }).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn errors() {
        assert!(matches!(cluster_windows(&[], KMeansParams::default()), Err(Error::Empty(_))));
        let pts = vec![s(1.0, 1.0), s(1.0, 1.0), s(2.0, 2.0)];
        assert!(matches!(
            cluster_windows(&pts, KMeansParams { k: 3, ..Default::default() }),
            Err(Error::TooFewDistinct { k: 3, distinct: 2 })
        ));
    }

    #[test]
    fn recovers_planted_windows() {
        let centres = default_views().windows().to_vec();
        let pts = synthetic_blobs(&centres, 200, 10.0, 0);
        let r = cluster_windows(&pts, KMeansParams { k: 3, seed: 0, ..Default::default() }).unwrap();
        for c in &centres {
            let best = r
                .centroids
                .iter()
                .map(|g| ((g.level() - c.level()).powi(2) + (g.width() - c.width()).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 15.0, "{c} recovered at distance {best}");
        }
        assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn parses_sample_text() {
        let pts = parse_samples("# comment\n50,449\n\n-505, 1980\n").unwrap();
        assert_eq!(pts, vec![s(50.0, 449.0), s(-505.0, 1980.0)]);
        assert!(parse_samples("1;2").is_err());
        assert!(parse_samples("1,-2").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn nearest_assignment_and_monotone_inertia(
                raw in proptest::collection::vec((-1000.0f64..1000.0, 1.0f64..3000.0), 5..60),
                k in 1usize..5,
                seed in 0u64..100,
            ) {
                let pts: Vec<_> = raw.iter().map(|&(l, w)| s(l, w)).collect();
                let r = cluster_windows(&pts, KMeansParams { k, seed, ..Default::default() }).unwrap();
                prop_assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
                let cents: Vec<[f64; 2]> = r.centroids.iter().map(|c| [c.level(), c.width()]).collect();
                for (p, &a) in pts.iter().zip(&r.assignments) {
                    prop_assert_eq!(nearest(p.point(), &cents).0, a);
                }
            }

            #[test]
            fn permutation_invariant(
                raw in proptest::collection::vec((-1000.0f64..1000.0, 1.0f64..3000.0), 5..40),
                seed in 0u64..100,
                rot in 0usize..40,
            ) {
                let pts: Vec<_> = raw.iter().map(|&(l, w)| s(l, w)).collect();
                let mut perm = pts.clone();
                perm.rotate_left(rot % pts.len());
                perm.reverse();
                let p = KMeansParams { k: 3.min(pts.len()), seed, ..Default::default() };
                let a = cluster_windows(&pts, p).unwrap();
                let b = cluster_windows(&perm, p).unwrap();
                prop_assert_eq!(a.sorted_centroids(), b.sorted_centroids());
                prop_assert_eq!(a.inertia, b.inertia);
            }
        }
    }
}
