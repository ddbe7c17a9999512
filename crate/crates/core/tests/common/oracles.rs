//! Independent reference implementations used as test oracles. They work on
//! plain pixel sets and slices rather than the library types, and favour
//! obviousness over speed.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

pub type PixelSet = BTreeSet<(usize, usize)>;

/// Area window plus "contains at least three others" rejection, computed
/// with set operations over every ordered pair.
pub fn brute_force_dual_filter(
    masks: &[PixelSet],
    image_area: usize,
    alpha: f64,
    beta: f64,
    overlap: f64,
) -> Vec<usize> {
    let mut keep = Vec::new();
    for (j, mj) in masks.iter().enumerate() {
        let a = mj.len() as f64;
        if a < alpha * image_area as f64 || a > beta * image_area as f64 {
            continue;
        }
        let mut inside = 0;
        for (k, mk) in masks.iter().enumerate() {
            if k == j || mk.is_empty() {
                continue;
            }
            let shared = mk.intersection(mj).count() as f64;
            if shared >= overlap * mk.len() as f64 {
                inside += 1;
            }
        }
        if inside < 3 {
            keep.push(j);
        }
    }
    keep
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = i;
    while parent[c] != r {
        let n = parent[c];
        parent[c] = r;
        c = n;
    }
    r
}

/// DBSCAN by union-find over core points. Border points join the cluster of
/// their lowest-index core neighbour.
pub fn reference_dbscan(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let close = |i: usize, j: usize| {
        let (dx, dy) = (points[i][0] - points[j][0], points[i][1] - points[j][1]);
        (dx * dx + dy * dy).sqrt() <= eps
    };
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| close(i, j)).count() >= min_pts)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if core[i] && core[j] && close(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut out = vec![None; n];
    for i in 0..n {
        if core[i] {
            out[i] = Some(find(&mut parent, i));
        } else if let Some(c) = (0..n).find(|&j| core[j] && close(i, j)) {
            out[i] = Some(find(&mut parent, c));
        }
    }
    out
}

/// True when both labelings induce the same partition and the same noise.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut ab: HashMap<usize, usize> = HashMap::new();
    let mut ba: HashMap<usize, usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *ab.entry(*x).or_insert(*y) != *y || *ba.entry(*y).or_insert(*x) != *x {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

/// `mask \ erode(mask)` with a 4-connected cross, outside the image counting
/// as background.
pub fn erosion_boundary(bits: &[u8], w: usize, h: usize) -> PixelSet {
    let on = |x: i64, y: i64| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && bits[y as usize * w + x as usize] != 0
    };
    let mut out = PixelSet::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let eroded = on(x, y) && on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1);
            if on(x, y) && !eroded {
                out.insert((x as usize, y as usize));
            }
        }
    }
    out
}

/// Gaussian KDE evaluated on a dense lattice; returns `(argmax, max)`.
pub fn dense_kde_argmax(samples: &[f64], h: f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let c = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut best = (lo, f64::MIN);
    for i in 0..n {
        let z = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let f: f64 = samples.iter().map(|s| c * (-(z - s) * (z - s) / (2.0 * h * h)).exp()).sum();
        if f > best.1 {
            best = (z, f);
        }
    }
    best
}

/// Silverman's rule with the sample standard deviation and the
/// linear-interpolated interquartile range.
pub fn silverman(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let q = |p: f64| {
        let pos = p * (n - 1.0);
        let (i, f) = (pos.floor() as usize, pos.fract());
        if i + 1 < s.len() {
            s[i] * (1.0 - f) + s[i + 1] * f
        } else {
            s[i]
        }
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Random mask family: rectangles, discs, scattered blobs and nested groups,
/// sized to straddle the area thresholds.
pub fn random_mask_set<R: Rng>(rng: &mut R, w: usize, h: usize) -> Vec<PixelSet> {
    let n = rng.random_range(1..=10);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = rng.random_range(0..4);
        let mut s = PixelSet::new();
        match kind {
            0 => {
                let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
                let (x1, y1) = (rng.random_range(x0..w) + 1, rng.random_range(y0..h) + 1);
                for y in y0..y1 {
                    for x in x0..x1 {
                        s.insert((x, y));
                    }
                }
            }
            1 => {
                let (cx, cy) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
                let r = rng.random_range(1.0..(w.min(h) as f64 / 2.0));
                for y in 0..h {
                    for x in 0..w {
                        if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                            s.insert((x, y));
                        }
                    }
                }
            }
            2 => {
                for _ in 0..rng.random_range(1..200) {
                    s.insert((rng.random_range(0..w), rng.random_range(0..h)));
                }
            }
            _ => {
                // Container with small rectangles inside it.
                let (x0, y0) = (rng.random_range(0..w / 2), rng.random_range(0..h / 2));
                let (cw, ch) = (rng.random_range(8..=w / 2), rng.random_range(8..=h / 2));
                for y in y0..y0 + ch {
                    for x in x0..x0 + cw {
                        s.insert((x, y));
                    }
                }
                for _ in 0..rng.random_range(0..5) {
                    let (ix, iy) = (rng.random_range(x0..x0 + cw - 2), rng.random_range(y0..y0 + ch - 2));
                    let mut inner = PixelSet::new();
                    for y in iy..(iy + 3).min(y0 + ch + 1) {
                        for x in ix..(ix + 3).min(x0 + cw + 1) {
                            inner.insert((x, y));
                        }
                    }
                    out.push(inner);
                }
            }
        }
        if !s.is_empty() {
            out.push(s);
        }
    }
    if out.is_empty() {
        out.push([(0, 0)].into_iter().collect());
    }
    out
}

pub fn to_bits(s: &PixelSet, w: usize, h: usize) -> Vec<u8> {
    let mut bits = vec![0u8; w * h];
    for &(x, y) in s {
        bits[y * w + x] = 1;
    }
    bits
}
