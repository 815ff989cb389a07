//! Synthetic branching-tube volumes with exact ground truth.
//!
//! A phantom is a binary tree of capsules: a trunk entering along the first
//! axis, bifurcating `depth` times with shrinking radius. Each branch keeps
//! its rasterized centerline so tree-aware metrics have something to count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

const MAX_ATTEMPTS: usize = 200;
const CURVE_SEGMENTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Set per case by the dataset generator; not part of the serialized config.
    #[serde(skip)]
    pub seed: u64,
    pub grid: [usize; 3],
    pub trunk_radius: f64,
    pub depth: usize,
    /// Bifurcation half-angle bounds in radians.
    pub branch_angle_range: [f64; 2],
    pub radius_decay: f64,
    pub segment_length_range: [f64; 2],
    /// Maximum sideways bend of a branch midpoint, as a fraction of its length. 0 = straight.
    pub curvature: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            grid: [32, 32, 32],
            trunk_radius: 2.5,
            depth: 3,
            branch_angle_range: [0.35, 0.75],
            radius_decay: 0.7,
            segment_length_range: [5.0, 9.0],
            curvature: 0.0,
            noise_sigma: 0.1,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::PhantomConfig(m));
        if self.grid.iter().any(|&g| g < 4) {
            return bad(format!("grid {:?} smaller than 4 voxels", self.grid));
        }
        if !(self.trunk_radius >= 1.0) {
            return bad(format!("trunk_radius {} < 1", self.trunk_radius));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay < 1.0) {
            return bad(format!("radius_decay {} outside (0,1)", self.radius_decay));
        }
        let leaf = self.trunk_radius * self.radius_decay.powi(self.depth as i32);
        if leaf < 0.5 {
            return bad(format!("radius after {} generations is {leaf:.3} < 0.5", self.depth));
        }
        let [a0, a1] = self.branch_angle_range;
        if !(0.0 <= a0 && a0 <= a1 && a1 < std::f64::consts::FRAC_PI_2) {
            return bad(format!("branch_angle_range {:?}", self.branch_angle_range));
        }
        let [l0, l1] = self.segment_length_range;
        if !(2.0 <= l0 && l0 <= l1) {
            return bad(format!("segment_length_range {:?}", self.segment_length_range));
        }
        if !(self.curvature >= 0.0 && self.curvature <= 0.5) {
            return bad(format!("curvature {} outside [0, 0.5]", self.curvature));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: usize,
    pub parent: Option<usize>,
    pub generation: usize,
    pub radius: f64,
    /// 26-connected voxel chain from the branch origin to its tip.
    pub centerline: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTree {
    pub mask: Mask,
    /// Network input: blurred mask plus Gaussian noise.
    pub volume: Volume<f32>,
    pub branches: Vec<Branch>,
}

impl PhantomTree {
    pub fn dims(&self) -> [usize; 3] {
        self.mask.dims()
    }

    pub fn centerline_length(&self) -> usize {
        self.branches.iter().map(|b| b.centerline.len()).sum()
    }
}

/// Geometry of one branch before rasterization.
#[derive(Debug, Clone)]
struct Segment {
    parent: Option<usize>,
    generation: usize,
    radius: f64,
    polyline: Vec<[f64; 3]>,
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn mul(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    mul(a, 1.0 / dot(a, a).sqrt())
}

/// Random unit vector orthogonal to `d`.
fn perpendicular(d: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let r = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let p = sub(r, mul(d, dot(r, d)));
        if dot(p, p) > 1e-4 {
            return normalize(p);
        }
    }
}

fn sample(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Distance from `p` to the segment `a`-`b`.
pub(crate) fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = add(a, mul(ab, t));
    let d = sub(p, q);
    dot(d, d).sqrt()
}

fn fits(polyline: &[[f64; 3]], radius: f64, grid: [usize; 3]) -> bool {
    polyline.iter().all(|p| {
        (0..3).all(|a| p[a] - radius >= 0.0 && p[a] + radius <= (grid[a] - 1) as f64)
    })
}

fn branch_polyline(start: [f64; 3], dir: [f64; 3], len: f64, curvature: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let end = add(start, mul(dir, len));
    if curvature <= 0.0 {
        return vec![start, end];
    }
    let side = perpendicular(dir, rng);
    let bend = rng.random_range(-1.0..1.0) * curvature * len;
    let ctrl = add(mul(add(start, end), 0.5), mul(side, bend));
    (0..=CURVE_SEGMENTS)
        .map(|i| {
            let t = i as f64 / CURVE_SEGMENTS as f64;
            let u = 1.0 - t;
            add(add(mul(start, u * u), mul(ctrl, 2.0 * u * t)), mul(end, t * t))
        })
        .collect()
}

fn try_build(cfg: &PhantomConfig, rng: &mut impl Rng) -> Option<Vec<Segment>> {
    let g = cfg.grid;
    let r0 = cfg.trunk_radius;
    let start = [r0 + 1.0, (g[1] / 2) as f64, (g[2] / 2) as f64];
    let dir = [1.0, 0.0, 0.0];
    let len = sample(cfg.segment_length_range, rng);
    let trunk = branch_polyline(start, dir, len, cfg.curvature, rng);
    if !fits(&trunk, r0, g) {
        return None;
    }
    let mut segs = vec![Segment {
        parent: None,
        generation: 0,
        radius: r0,
        polyline: trunk,
    }];
    // Breadth-first so ids grow with generation.
    let mut frontier = vec![(0usize, dir)];
    for generation in 1..=cfg.depth {
        let mut next = Vec::new();
        for (pid, pdir) in frontier {
            let tip = *segs[pid].polyline.last().unwrap();
            let radius = segs[pid].radius * cfg.radius_decay;
            let side = perpendicular(pdir, rng);
            for sign in [1.0, -1.0] {
                let theta = sample(cfg.branch_angle_range, rng);
                let d = normalize(add(mul(pdir, theta.cos()), mul(side, sign * theta.sin())));
                let len = sample(cfg.segment_length_range, rng);
                let poly = branch_polyline(tip, d, len, cfg.curvature, rng);
                if !fits(&poly, radius, g) {
                    return None;
                }
                segs.push(Segment {
                    parent: Some(pid),
                    generation,
                    radius,
                    polyline: poly,
                });
                next.push((segs.len() - 1, d));
            }
        }
        frontier = next;
    }
    Some(segs)
}

fn round_point(p: [f64; 3]) -> [usize; 3] {
    [p[0].round() as usize, p[1].round() as usize, p[2].round() as usize]
}

/// Rasterizes a polyline into a 26-connected voxel chain.
fn chain(polyline: &[[f64; 3]]) -> Vec<[usize; 3]> {
    let mut out: Vec<[usize; 3]> = Vec::new();
    for w in polyline.windows(2) {
        let (a, b) = (w[0], w[1]);
        let delta = sub(b, a);
        let steps = delta.iter().fold(0.0f64, |m, v| m.max(v.abs())).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let p = round_point(add(a, mul(delta, s as f64 / steps as f64)));
            if out.last() != Some(&p) {
                out.push(p);
            }
        }
    }
    out
}

/// Builds a phantom; deterministic in `cfg.seed`.
pub fn generate(cfg: &PhantomConfig) -> Result<PhantomTree> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let segs = (0..MAX_ATTEMPTS)
        .find_map(|_| try_build(cfg, &mut rng))
        .ok_or(Error::TreeExceedsGrid {
            attempts: MAX_ATTEMPTS,
        })?;

    let mut mask = Mask::zeros(cfg.grid);
    let mut branches: Vec<Branch> = Vec::with_capacity(segs.len());
    for (id, seg) in segs.iter().enumerate() {
        rasterize_tube(&mut mask, &seg.polyline, seg.radius);
        let mut line = chain(&seg.polyline);
        if let Some(pid) = seg.parent {
            // The origin voxel is the parent's tip; start one step past it.
            if line.first() == branches[pid].centerline.last() {
                line.remove(0);
            }
        }
        for &p in &line {
            mask.set(p, 1);
        }
        branches.push(Branch {
            id,
            parent: seg.parent,
            generation: seg.generation,
            radius: seg.radius,
            centerline: line,
        });
    }
    let volume = intensity(&mask, cfg.noise_sigma, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(PhantomTree {
        mask,
        volume,
        branches,
    })
}

/// Sets every voxel whose centre lies within `radius` of the polyline.
pub(crate) fn rasterize_tube(mask: &mut Mask, polyline: &[[f64; 3]], radius: f64) {
    let dims = mask.dims();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in polyline {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] - radius);
            hi[a] = hi[a].max(p[a] + radius);
        }
    }
    let range = |a: usize| {
        let l = lo[a].ceil().max(0.0) as usize;
        let h = (hi[a].floor() as isize).min(dims[a] as isize - 1);
        l..(h + 1).max(l as isize) as usize
    };
    for x in range(0) {
        for y in range(1) {
            for z in range(2) {
                let p = [x as f64, y as f64, z as f64];
                let inside = polyline
                    .windows(2)
                    .any(|w| segment_distance(p, w[0], w[1]) <= radius);
                if inside {
                    mask.set([x, y, z], 1);
                }
            }
        }
    }
}

/// Mask blurred by a zero-padded 3x3x3 box filter plus N(0, sigma) noise.
pub fn intensity(mask: &Mask, sigma: f64, seed: u64) -> Volume<f32> {
    let dims = mask.dims();
    let mut out = Volume::<f32>::zeros(dims);
    for i in 0..mask.len() {
        let p = mask.coord(i);
        let mut acc = 0u32;
        for off in crate::tensor::CUBE_OFFSETS {
            let q = [
                p[0] as isize + off[0],
                p[1] as isize + off[1],
                p[2] as isize + off[2],
            ];
            if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < dims[a]) {
                acc += mask.get([q[0] as usize, q[1] as usize, q[2] as usize]) as u32;
            }
        }
        out.data_mut()[i] = acc as f32 / 27.0;
    }
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    out
}

/// Deterministic shuffled partition of `0..n` by `ratios` (largest-remainder rounding).
pub fn split(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if ratios.is_empty() || ratios.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::invalid("split", format!("bad ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split", format!("ratios sum to {total}, not 1")));
    }
    if n == 0 {
        return Err(Error::EmptySplit("no items to split".into()));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(counts.len());
    let mut at = 0;
    for c in counts {
        let mut part = idx[at..at + c].to_vec();
        part.sort_unstable();
        out.push(part);
        at += c;
    }
    Ok(out)
}

/// Axis flips drawn from `seed`.
pub fn flip_draw(seed: u64) -> [bool; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.random(), rng.random(), rng.random()]
}

/// Applies the same seeded axis flips to a volume and its mask.
pub fn random_flip_augment(volume: &Volume<f32>, mask: &Mask, seed: u64) -> Result<(Volume<f32>, Mask)> {
    flip_with(volume, mask, flip_draw(seed))
}

pub fn flip_with(volume: &Volume<f32>, mask: &Mask, axes: [bool; 3]) -> Result<(Volume<f32>, Mask)> {
    if volume.dims() != mask.dims() {
        return Err(Error::shape(
            "random_flip_augment",
            format!("{:?} vs {:?}", volume.dims(), mask.dims()),
        ));
    }
    let (mut v, mut m) = (volume.clone(), mask.clone());
    for (a, &f) in axes.iter().enumerate() {
        if f {
            v = v.flip(a);
            m = m.flip(a);
        }
    }
    Ok((v, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adjacent26(a: [usize; 3], b: [usize; 3]) -> bool {
        a != b && (0..3).all(|i| a[i].abs_diff(b[i]) <= 1)
    }

    #[test]
    fn depth_zero_is_single_trunk() {
        let t = generate(&PhantomConfig {
            depth: 0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(t.branches.len(), 1);
        assert_eq!(t.branches[0].parent, None);
    }

    #[test]
    fn binary_tree_branch_count() {
        let t = generate(&PhantomConfig::default()).unwrap();
        assert_eq!(t.branches.len(), 15);
        for b in &t.branches[1..] {
            let p = &t.branches[b.parent.unwrap()];
            assert_eq!(b.generation, p.generation + 1);
            assert!(b.radius <= p.radius);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = PhantomConfig {
            seed: 11,
            curvature: 0.2,
            ..Default::default()
        };
        let (a, b) = (generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_eq!(a, b);
        let c = generate(&PhantomConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn centerlines_are_connected_chains_inside_mask() {
        for seed in 0..5 {
            let t = generate(&PhantomConfig {
                seed,
                curvature: if seed % 2 == 0 { 0.0 } else { 0.3 },
                ..Default::default()
            })
            .unwrap();
            for b in &t.branches {
                assert!(!b.centerline.is_empty());
                for w in b.centerline.windows(2) {
                    assert!(adjacent26(w[0], w[1]), "{w:?}");
                }
                for &p in &b.centerline {
                    assert_eq!(t.mask.get(p), 1);
                }
                if let Some(pid) = b.parent {
                    let first = b.centerline[0];
                    assert!(t.branches[pid].centerline.iter().any(|&q| adjacent26(first, q)));
                }
            }
        }
    }

    #[test]
    fn straight_trunk_matches_cylinder_volume() {
        // A capsule of radius 3 and axis length 20: pi r^2 L in the barrel,
        // plus one full sphere in the two caps.
        let cfg = PhantomConfig {
            grid: [32, 16, 16],
            trunk_radius: 3.0,
            depth: 0,
            segment_length_range: [20.0, 20.0],
            ..Default::default()
        };
        let t = generate(&cfg).unwrap();
        let pi = std::f64::consts::PI;
        let barrel = pi * 9.0 * 20.0;
        let caps = 4.0 / 3.0 * pi * 27.0;
        // Trunk runs from x = r + 1 = 4 to x = 24; count 20 barrel slices.
        let in_barrel = t
            .mask
            .foreground()
            .iter()
            .filter(|p| (4..24).contains(&p[0]))
            .count() as f64;
        assert!((in_barrel - barrel).abs() / barrel <= 0.10, "{in_barrel} vs {barrel:.1}");
        let total = t.mask.count() as f64;
        assert!((total - barrel - caps).abs() / (barrel + caps) <= 0.10, "{total}");
    }

    #[test]
    fn rejects_radius_underflow_and_tiny_grids() {
        let cfg = PhantomConfig {
            trunk_radius: 1.0,
            radius_decay: 0.5,
            depth: 2,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::PhantomConfig(_))));
        let cfg = PhantomConfig {
            grid: [8, 8, 8],
            segment_length_range: [30.0, 30.0],
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::TreeExceedsGrid { .. })));
    }

    #[test]
    fn split_counts_and_determinism() {
        let s = split(10, &[0.8, 0.2], 3).unwrap();
        assert_eq!((s[0].len(), s[1].len()), (8, 2));
        let mut all: Vec<usize> = s.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s, split(10, &[0.8, 0.2], 3).unwrap());
        let t = split(10, &[1.0, 0.0], 3).unwrap();
        assert_eq!(t[0].len(), 10);
        assert!(t[1].is_empty());
        let d = split(20, &[0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!(d.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 2, 2]);
        assert!(matches!(split(0, &[1.0], 0), Err(Error::EmptySplit(_))));
        assert!(split(5, &[0.5, 0.4], 0).is_err());
    }

    #[test]
    fn flip_augment_properties() {
        let t = generate(&PhantomConfig::default()).unwrap();
        let (v, m) = flip_with(&t.volume, &t.mask, [false; 3]).unwrap();
        assert_eq!((&v, &m), (&t.volume, &t.mask));
        for seed in 0..8 {
            let (v1, m1) = random_flip_augment(&t.volume, &t.mask, seed).unwrap();
            assert_eq!(m1.count(), t.mask.count());
            let (v2, m2) = random_flip_augment(&v1, &m1, seed).unwrap();
            assert_eq!((v2, m2), (t.volume.clone(), t.mask.clone()));
        }
        let bad = Volume::<f32>::zeros([4, 4, 4]);
        assert!(random_flip_augment(&bad, &t.mask, 0).is_err());
    }
}
