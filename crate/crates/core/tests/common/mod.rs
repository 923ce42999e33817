//! Independent reference implementations and synthetic fixtures shared by
//! the integration tests and the acceptance target.
//!
//! Nothing here calls into the library's algorithms; only `DpRng` is used,
//! to jitter fixtures reproducibly.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use privicl::rng::DpRng;

/// Workspace root (the directory holding `crates/`).
pub fn workspace_root() -> PathBuf {
    let here = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    here.ancestors()
        .find(|p| p.join("crates").is_dir() && p.join("Cargo.toml").is_file())
        .expect("workspace root above the crate")
        .to_path_buf()
}

pub fn core_fixture(name: &str) -> PathBuf {
    workspace_root()
        .join("crates/core/tests/fixtures")
        .join(name)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

/// `P(i) ∝ exp(eps * s_i / (2 * sens))`.
pub fn softmax(scores: &[f64], eps: f64, sens: f64) -> Vec<f64> {
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores
        .iter()
        .map(|s| (eps * (s - top) / (2.0 * sens)).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Fraction of (member, non-member) pairs ordered correctly; ties count half.
pub fn brute_auroc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &m in members {
        for &n in nonmembers {
            if m > n {
                wins += 1.0;
            } else if m == n {
                wins += 0.5;
            }
        }
    }
    wins / (members.len() * nonmembers.len()) as f64
}

/// Gaussian mechanism epsilon minimized over `points` log-spaced orders in
/// `[lo, hi]`, using the direct point conversion at each order.
pub fn gaussian_eps_fine(
    sigma: f64,
    sensitivity: f64,
    delta: f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> f64 {
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .map(|alpha| {
            let rho = alpha * sensitivity * sensitivity / (2.0 * sigma * sigma);
            rho + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0)
        })
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

/// Leaves as sorted index lists, sorted among themselves; empty leaves dropped.
pub type Partition = Vec<Vec<usize>>;

pub fn canonical(leaves: impl IntoIterator<Item = Vec<usize>>) -> Partition {
    let mut out: Partition = leaves
        .into_iter()
        .filter(|l| !l.is_empty())
        .map(|mut l| {
            l.sort_unstable();
            l
        })
        .collect();
    out.sort();
    out
}

/// Deterministic axis-aligned recursive splitter.
///
/// Candidate thresholds sit at the centers of `beta`-wide bins covering
/// `[lo, hi]` in each dimension; a threshold scores
/// `-(band_weight * points_in_bin + imbalance_weight * |left - right|)` and the
/// best one is taken. Every tied best split is explored, and a split with an
/// empty side may either be kept or undone, so the result is the set of all
/// partitions the exact algorithm can produce.
pub struct Splitter<'a> {
    pub points: &'a [Vec<f64>],
    pub lo: f64,
    pub hi: f64,
    pub beta: f64,
    pub depth: usize,
    pub band_weight: f64,
    pub imbalance_weight: f64,
}

impl Splitter<'_> {
    fn bins(&self) -> usize {
        (((self.hi - self.lo) / self.beta) * (1.0 + 1e-12)).floor() as usize
    }

    fn in_bin(&self, x: f64, b: usize) -> bool {
        let start = self.lo + b as f64 * self.beta;
        let end = self.lo + (b + 1) as f64 * self.beta;
        if b + 1 == self.bins() {
            x >= start
        } else if b == 0 {
            x < end
        } else {
            x >= start && x < end
        }
    }

    fn best_splits(&self, members: &[usize]) -> BTreeSet<(Vec<usize>, Vec<usize>)> {
        let dim = self.points[0].len();
        let mut best = f64::NEG_INFINITY;
        let mut out = BTreeSet::new();
        for d in 0..dim {
            for b in 0..self.bins() {
                let thr = self.lo + (b as f64 + 0.5) * self.beta;
                let (left, right): (Vec<usize>, Vec<usize>) =
                    members.iter().partition(|&&i| self.points[i][d] <= thr);
                let band = members
                    .iter()
                    .filter(|&&i| self.in_bin(self.points[i][d], b))
                    .count();
                let s = -(self.band_weight * band as f64
                    + self.imbalance_weight * left.len().abs_diff(right.len()) as f64);
                if s > best {
                    best = s;
                    out.clear();
                }
                if s == best {
                    out.insert((left, right));
                }
            }
        }
        out
    }

    fn node(&self, members: Vec<usize>, level: usize) -> BTreeSet<Partition> {
        if members.is_empty() {
            return BTreeSet::from([Vec::new()]);
        }
        if level == self.depth {
            return BTreeSet::from([vec![members]]);
        }
        let mut out = BTreeSet::new();
        for (left, right) in self.best_splits(&members) {
            if left.is_empty() || right.is_empty() {
                out.insert(vec![members.clone()]);
            }
            let ls = self.node(left, level + 1);
            let rs = self.node(right, level + 1);
            for l in &ls {
                for r in &rs {
                    out.insert(canonical(l.iter().chain(r).cloned()));
                }
            }
        }
        out
    }

    pub fn partitions(&self) -> BTreeSet<Partition> {
        self.node((0..self.points.len()).collect(), 0)
    }
}

pub fn mean_of(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; points[0].len()];
    for &i in members {
        for (a, x) in m.iter_mut().zip(&points[i]) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= members.len() as f64);
    m
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the row closest to `target`, ties to the lowest index.
pub fn argmin_dist(target: &[f64], rows: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if sq_dist(target, r) < sq_dist(target, &rows[best]) {
            best = i;
        }
    }
    best
}

/// Non-private aggregation: cluster with the exact splitter, order clusters
/// by size (largest first), map each of the first `k` means to its nearest
/// public point and drop repeats. Returns every admissible output.
pub fn cluster_argmin(
    private: &[Vec<f64>],
    public: &[Vec<f64>],
    beta: f64,
    depth: usize,
    k: usize,
) -> BTreeSet<Vec<usize>> {
    let all: Vec<Vec<f64>> = private.iter().chain(public).cloned().collect();
    let splitter = Splitter {
        points: &all,
        lo: -1.0,
        hi: 1.0,
        beta,
        depth,
        band_weight: 1.0,
        imbalance_weight: 1.0,
    };
    let mut out = BTreeSet::new();
    for mut part in splitter.partitions() {
        part.sort_by_key(|l| std::cmp::Reverse(l.len()));
        let mut chosen = Vec::new();
        for leaf in part.iter().take(k) {
            let j = argmin_dist(&mean_of(&all, leaf), public);
            if !chosen.contains(&j) {
                chosen.push(j);
            }
        }
        out.insert(chosen);
    }
    out
}

/// Best 2-partition by within-group squared error, by enumeration.
pub fn best_two_partition(points: &[Vec<f64>]) -> (Vec<usize>, Vec<usize>) {
    let n = points.len();
    assert!((2..=16).contains(&n));
    let sse = |g: &[usize]| -> f64 {
        let m = mean_of(points, g);
        g.iter().map(|&i| sq_dist(&points[i], &m)).sum()
    };
    let mut best = (f64::INFINITY, Vec::new(), Vec::new());
    // Point 0 always in the first group.
    for mask in 0..(1u32 << (n - 1)) {
        let (mut a, mut b) = (vec![0], Vec::new());
        for i in 1..n {
            if mask >> (i - 1) & 1 == 1 {
                b.push(i);
            } else {
                a.push(i);
            }
        }
        if b.is_empty() {
            continue;
        }
        let cost = sse(&a) + sse(&b);
        if cost < best.0 {
            best = (cost, a, b);
        }
    }
    (best.1, best.2)
}

fn jitter(rng: &mut DpRng, center: &[f64], spread: f64) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + spread * (2.0 * rng.uniform() - 1.0))
        .collect()
}

/// Named point sets in `[0, 1]^d` for clustering equivalence checks, with the
/// depth to run them at.
pub struct ClusterFixture {
    pub name: &'static str,
    pub points: Vec<Vec<f64>>,
    pub depth: u32,
    pub beta: f64,
}

pub fn cluster_fixtures() -> Vec<ClusterFixture> {
    let mut rng = DpRng::new(4242);
    let mut groups = |centers: &[(&[f64], usize)], spread: f64| -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for (c, n) in centers {
            for _ in 0..*n {
                pts.push(jitter(&mut rng, c, spread));
            }
        }
        pts
    };
    vec![
        ClusterFixture {
            name: "1d-two-groups",
            points: groups(&[(&[0.1], 8), (&[0.9], 8)], 0.0),
            depth: 1,
            beta: 0.25,
        },
        ClusterFixture {
            name: "1d-three-groups",
            points: groups(&[(&[0.13], 50), (&[0.52], 30), (&[0.87], 20)], 0.02),
            depth: 2,
            beta: 0.1,
        },
        ClusterFixture {
            name: "1d-five-groups",
            points: groups(
                &[
                    (&[0.05], 12),
                    (&[0.27], 25),
                    (&[0.46], 9),
                    (&[0.71], 30),
                    (&[0.93], 14),
                ],
                0.015,
            ),
            depth: 3,
            beta: 0.1,
        },
        ClusterFixture {
            name: "2d-two-blobs",
            points: groups(&[(&[0.2, 0.2], 16), (&[0.8, 0.8], 16)], 0.05),
            depth: 1,
            beta: 0.1,
        },
        ClusterFixture {
            name: "2d-four-blobs",
            points: groups(
                &[
                    (&[0.15, 0.15], 50),
                    (&[0.15, 0.85], 50),
                    (&[0.85, 0.15], 50),
                    (&[0.85, 0.85], 50),
                ],
                0.06,
            ),
            depth: 2,
            beta: 0.1,
        },
    ]
}

/// Unit vector along axis `i` in `d` dimensions.
pub fn axis(i: usize, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Private embeddings: 60 near e1 and 40 near e2 in 8 dimensions, unit norm,
/// with off-axis coordinates in (0.005, 0.045) so each group sits inside one
/// 0.1-wide bin per coordinate. Public embeddings: exactly e1, exactly e2,
/// and two decoys on other axes.
pub fn two_cluster_embeddings() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    const D: usize = 8;
    let mut rng = DpRng::new(77);
    let mut private = Vec::new();
    for (axis_i, n) in [(0, 60), (1, 40)] {
        for _ in 0..n {
            let v: Vec<f64> = (0..D)
                .map(|j| {
                    if j == axis_i {
                        1.0
                    } else {
                        0.005 + 0.04 * rng.uniform()
                    }
                })
                .collect();
            private.push(normalized(v));
        }
    }
    let public = vec![axis(0, D), axis(1, D), axis(4, D), axis(6, D)];
    (private, public)
}

/// Two tight blobs of six points each, far apart, interleaved by index.
pub fn two_blob_points() -> Vec<Vec<f64>> {
    let mut rng = DpRng::new(9);
    (0..12)
        .map(|i| {
            let c: &[f64] = if i % 2 == 0 {
                &[-0.6, -0.5]
            } else {
                &[0.55, 0.6]
            };
            jitter(&mut rng, c, 0.08)
        })
        .collect()
}
