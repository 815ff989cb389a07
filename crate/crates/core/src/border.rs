//! Border refinement: find the voxels a coarse mask cannot represent after
//! one down/up-sampling round trip, describe each by two-scale 3x3x3
//! neighbourhoods plus a learned global vector, and re-predict them.
//!
//! Layers follow the backbone scales, finest first. A layer's "adjacent"
//! layer is the next coarser one, except for the coarsest layer, which
//! borrows from the next finer one.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::SCALES;
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{sigmoid_value, Graph, ParamId, ParamStore, Real, Tensor, Var, CUBE_OFFSETS};
use crate::volume::{Mask, Volume};

/// Voxels where a binary mask differs from its max-pool/nearest-upsample reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct BvpSet {
    pub layer: usize,
    /// Row-major order; exactly the nonzero voxels of `diff`.
    pub points: Vec<[usize; 3]>,
    pub down: Mask,
    pub up: Mask,
    pub diff: Mask,
}

pub fn detect_bvp(mask: &Mask, layer: usize) -> Result<BvpSet> {
    if !mask.is_binary() {
        return Err(Error::invalid("detect_bvp", "mask must hold only 0 and 1"));
    }
    let down = mask.max_pool2()?;
    let up = down.upsample2();
    let diff = Volume::new(
        mask.dims(),
        mask.data().iter().zip(up.data()).map(|(&a, &b)| a.abs_diff(b)).collect(),
    )?;
    let points = diff.foreground();
    Ok(BvpSet {
        layer,
        points,
        down,
        up,
        diff,
    })
}

/// Where training points come from at each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BvpSource {
    /// Border points of the ground truth only.
    Gt,
    /// Border points of the binarized coarse prediction only.
    Prediction,
    /// Union of both.
    Union,
}

/// Sorted, deduplicated training points for one layer and sample.
pub fn training_points(gt: &Mask, prediction: &Mask, source: BvpSource, layer: usize) -> Result<Vec<[usize; 3]>> {
    let mut pts = match source {
        BvpSource::Gt => detect_bvp(gt, layer)?.points,
        BvpSource::Prediction => detect_bvp(prediction, layer)?.points,
        BvpSource::Union => {
            let mut a = detect_bvp(gt, layer)?.points;
            a.extend(detect_bvp(prediction, layer)?.points);
            a
        }
    };
    pts.sort_unstable();
    pts.dedup();
    Ok(pts)
}

/// Flattened 3x3x3 neighbourhood of `p` in `features: [C, H, W, D]`,
/// offset-major then channel, zero outside the volume.
pub fn gather_cube<R: Real>(features: &Tensor<R>, p: [usize; 3], include_center: bool) -> Result<Vec<R>> {
    let s = features.shape();
    let &[c, h, w, d] = s else {
        return Err(Error::shape("gather_cube", format!("expected [C, H, W, D], got {s:?}")));
    };
    if p[0] >= h || p[1] >= w || p[2] >= d {
        return Err(Error::invalid("gather_cube", format!("centroid {p:?} outside {:?}", [h, w, d])));
    }
    let mut out = Vec::with_capacity(27 * c);
    for (i, off) in CUBE_OFFSETS.iter().enumerate() {
        if i == 13 && !include_center {
            continue;
        }
        let q = [
            p[0] as isize + off[0],
            p[1] as isize + off[1],
            p[2] as isize + off[2],
        ];
        let inside = q[0] >= 0 && q[1] >= 0 && q[2] >= 0 && q[0] < h as isize && q[1] < w as isize && q[2] < d as isize;
        for ch in 0..c {
            out.push(if inside {
                let lin = ((q[0] as usize * w) + q[1] as usize) * d + q[2] as usize;
                features.data()[ch * h * w * d + lin]
            } else {
                R::zero()
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Coarser,
    Finer,
}

pub fn adjacent_coord(p: [usize; 3], dir: Direction) -> [usize; 3] {
    match dir {
        Direction::Coarser => p.map(|v| v / 2),
        Direction::Finer => p.map(|v| v * 2),
    }
}

/// Adjacent layer index and direction for `layer`.
pub fn adjacent_layer(layer: usize) -> (usize, Direction) {
    if layer + 1 < SCALES {
        (layer + 1, Direction::Coarser)
    } else {
        (layer - 1, Direction::Finer)
    }
}

/// `l1 * coarse + l2 * centroid + l3 * fine + l4 * global`; every `lambda` is a `[1]` tensor.
pub fn fuse<R: Real>(
    g: &mut Graph<R>,
    coarse: Var,
    centroid: Var,
    fine: Var,
    global: Var,
    lambda: [Var; 4],
) -> Result<Var> {
    let shape = g.shape(coarse).to_vec();
    for v in [centroid, fine, global] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::shape("fuse", format!("{shape:?} vs {:?}", g.shape(v))));
        }
    }
    let mut acc = g.scale_by(coarse, lambda[0])?;
    for (v, l) in [(centroid, lambda[1]), (fine, lambda[2]), (global, lambda[3])] {
        let t = g.scale_by(v, l)?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Fixed sinusoidal code of `p / dims`: for each axis and frequency
/// `2^k`, `sin(2^k pi u)` then `cos(2^k pi u)`. Length `6 * frequencies`.
pub fn sinusoidal_code(p: [usize; 3], dims: [usize; 3], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * frequencies);
    for a in 0..3 {
        let u = p[a] as f64 / dims[a] as f64;
        for k in 0..frequencies {
            let t = (1u64 << k) as f64 * PI * u;
            out.push(t.sin());
            out.push(t.cos());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlcfConfig {
    /// Fusion width per layer, finest first.
    pub dims: Vec<usize>,
    pub pe_frequencies: usize,
    pub train_bvp: BvpSource,
    /// Train the backbone alone first, then the refinement with the backbone frozen.
    pub two_stage: bool,
}

impl Default for GlcfConfig {
    fn default() -> Self {
        GlcfConfig {
            dims: vec![16, 32, 64, 128],
            pe_frequencies: 4,
            train_bvp: BvpSource::Union,
            two_stage: false,
        }
    }
}

impl GlcfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != SCALES || self.dims.contains(&0) {
            return Err(Error::Config(format!(
                "glcf: need {SCALES} positive fusion widths, got {:?}",
                self.dims
            )));
        }
        if self.pe_frequencies == 0 || self.pe_frequencies > 16 {
            return Err(Error::Config(format!("glcf: pe_frequencies {} outside 1..=16", self.pe_frequencies)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Dense {
    fn new<R: Real>(store: &mut ParamStore<R>, name: &str, k: usize, j: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Dense {
            weight: store.add(format!("{name}.weight"), init::fan_in(&[j, k], k, 1.0, rng)),
            bias: bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[j]))),
        }
    }

    fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = self.bias.map(|b| g.param(store, b)).transpose()?;
        g.linear(x, w, b)
    }
}

/// Parameters of one refinement layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GlcfLayer {
    pub layer: usize,
    pub dim: usize,
    fine: Dense,
    coarse: Dense,
    centroid: Dense,
    global_embed: ParamId,
    global: Dense,
    /// Raw fusion scalars; `lambda_k = sigmoid(r_k)`.
    pub fusion: [ParamId; 4],
    position: Dense,
    hidden: Dense,
    out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Glcf {
    pub config: GlcfConfig,
    pub layers: Vec<GlcfLayer>,
}

impl Glcf {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        config: GlcfConfig,
        stage_channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if stage_channels.len() != SCALES {
            return Err(Error::Config(format!("glcf: need {SCALES} stage widths")));
        }
        let pe_width = 6 * config.pe_frequencies;
        let mut layers = Vec::with_capacity(SCALES);
        for l in 0..SCALES {
            let d = config.dims[l];
            let c = stage_channels[l];
            let (adj, _) = adjacent_layer(l);
            let ca = stage_channels[adj];
            let p = format!("glcf{l}");
            layers.push(GlcfLayer {
                layer: l,
                dim: d,
                fine: Dense::new(store, &format!("{p}.fine"), 26 * c, d, true, rng),
                coarse: Dense::new(store, &format!("{p}.coarse"), 27 * ca, d, true, rng),
                centroid: Dense::new(store, &format!("{p}.centroid"), c, d, true, rng),
                global_embed: store.add(format!("{p}.global_embed"), init::normal(&[1, d], 1.0, rng)),
                global: Dense::new(store, &format!("{p}.global"), d, d, true, rng),
                fusion: [0, 1, 2, 3].map(|k| store.add(format!("{p}.fusion{k}"), Tensor::zeros(&[1]))),
                position: Dense::new(store, &format!("{p}.position"), pe_width, d, false, rng),
                hidden: Dense::new(store, &format!("{p}.head.hidden"), d, d, true, rng),
                out: Dense::new(store, &format!("{p}.head.out"), d, 1, true, rng),
            });
        }
        Ok(Glcf { config, layers })
    }

    /// Current `sigmoid(r_k)` of a layer.
    pub fn lambdas<R: Real>(&self, store: &ParamStore<R>, layer: usize) -> [R; 4] {
        self.layers[layer].fusion.map(|id| sigmoid_value(store.get(id).item()))
    }

    /// Learned projection of the sinusoidal code: `[P, d]`.
    pub fn position_embed<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        layer: usize,
        points: &[[usize; 3]],
        dims: [usize; 3],
    ) -> Result<Var> {
        let f = self.config.pe_frequencies;
        let code: Vec<R> = points
            .iter()
            .flat_map(|&p| sinusoidal_code(p, dims, f))
            .map(R::lit)
            .collect();
        let code = g.constant(Tensor::new(&[points.len(), 6 * f], code)?)?;
        self.layers[layer].position.forward(g, store, code)
    }

    /// Logits `[P, 1]` for the points of one layer, `points[b]` belonging to
    /// sample `b`. `features` are the decoder features of every scale.
    /// Returns `None` when no sample has points.
    pub fn refine_layer<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        features: &[Var],
        layer: usize,
        points: &[Vec<[usize; 3]>],
    ) -> Result<Option<Var>> {
        if features.len() != SCALES {
            return Err(Error::shape("refine_points", format!("{} feature maps", features.len())));
        }
        let lp = &self.layers[layer];
        let (adj, dir) = adjacent_layer(layer);
        let fshape = g.shape(features[layer]).to_vec();
        let dims = [fshape[2], fshape[3], fshape[4]];
        let mut fine_parts = Vec::new();
        let mut coarse_parts = Vec::new();
        let mut centre_parts = Vec::new();
        let mut pe_parts = Vec::new();
        for (b, pts) in points.iter().enumerate() {
            if pts.is_empty() {
                continue;
            }
            let adj_pts: Vec<[usize; 3]> = pts.iter().map(|&p| adjacent_coord(p, dir)).collect();
            fine_parts.push(g.gather_cube(features[layer], b, pts, false)?);
            coarse_parts.push(g.gather_cube(features[adj], b, &adj_pts, true)?);
            centre_parts.push(g.gather_points(features[layer], b, pts)?);
            pe_parts.push(self.position_embed(g, store, layer, pts, dims)?);
        }
        if fine_parts.is_empty() {
            return Ok(None);
        }
        let rows: usize = points.iter().map(Vec::len).sum();
        let fine = g.concat_rows(&fine_parts)?;
        let coarse = g.concat_rows(&coarse_parts)?;
        let centre = g.concat_rows(&centre_parts)?;
        let pe = g.concat_rows(&pe_parts)?;

        let f_fg = lp.fine.forward(g, store, fine)?;
        let f_cg = lp.coarse.forward(g, store, coarse)?;
        let f_ct = lp.centroid.forward(g, store, centre)?;
        let embed = g.param(store, lp.global_embed)?;
        let f_g = lp.global.forward(g, store, embed)?;
        let f_g = g.reshape(f_g, &[lp.dim])?;
        let f_g = g.broadcast_rows(f_g, rows)?;
        let mut lambda = [f_g; 4];
        for (k, id) in lp.fusion.iter().enumerate() {
            let r = g.param(store, *id)?;
            lambda[k] = g.sigmoid(r)?;
        }
        let fused = fuse(g, f_cg, f_ct, f_fg, f_g, lambda)?;
        let h = g.add(fused, pe)?;
        let h = lp.hidden.forward(g, store, h)?;
        let h = g.gelu(h)?;
        Ok(Some(lp.out.forward(g, store, h)?))
    }

    /// [`Glcf::refine_layer`] for every layer; `points[l][b]`.
    pub fn refine_points<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        features: &[Var],
        points: &[Vec<Vec<[usize; 3]>>],
    ) -> Result<Vec<Option<Var>>> {
        (0..SCALES)
            .map(|l| self.refine_layer(g, store, features, l, &points[l]))
            .collect()
    }
}

/// Binarized coarse mask with the refined decision written at each BVP.
pub fn render(
    coarse: &Volume<f32>,
    refined_logits: &[f32],
    points: &[[usize; 3]],
    tau: f32,
) -> Result<Mask> {
    if refined_logits.len() != points.len() {
        return Err(Error::shape(
            "render",
            format!("{} logits for {} points", refined_logits.len(), points.len()),
        ));
    }
    let mut out = coarse.map(|p| u8::from(p >= tau));
    for (&p, &z) in points.iter().zip(refined_logits) {
        if !out.contains(p) {
            return Err(Error::invalid("render", format!("point {p:?} outside {:?}", out.dims())));
        }
        out.set(p, u8::from(sigmoid_value(z) >= tau));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_aligned_block_have_no_bvp() {
        let m = Mask::zeros([8, 8, 8]);
        assert!(detect_bvp(&m, 0).unwrap().points.is_empty());
        let mut m = Mask::zeros([8, 8, 8]);
        for i in 0..8 {
            m.set([2 + i / 4, 4 + (i / 2) % 2, 6 + i % 2], 1);
        }
        let b = detect_bvp(&m, 0).unwrap();
        assert!(b.points.is_empty());
        assert_eq!(b.up, m);
    }

    #[test]
    fn single_voxel_gives_seven_points() {
        let mut m = Mask::zeros([4, 4, 4]);
        m.set([0, 0, 0], 1);
        let b = detect_bvp(&m, 2).unwrap();
        assert_eq!(b.layer, 2);
        assert_eq!(b.points.len(), 7);
        assert!(!b.points.contains(&[0, 0, 0]));
        assert!(b.points.iter().all(|p| p.iter().all(|&v| v < 2)));
    }

    #[test]
    fn detect_rejects_bad_masks() {
        assert!(detect_bvp(&Mask::zeros([3, 4, 4]), 0).is_err());
        let mut m = Mask::zeros([4, 4, 4]);
        m.set([1, 1, 1], 2);
        assert!(detect_bvp(&m, 0).is_err());
    }

    #[test]
    fn cube_gather_cases() {
        let f = Tensor::full(&[2, 5, 5, 5], 3.0f64);
        let v = gather_cube(&f, [2, 2, 2], false).unwrap();
        assert_eq!(v.len(), 52);
        assert!(v.iter().all(|&x| x == 3.0));
        assert_eq!(gather_cube(&f, [2, 2, 2], true).unwrap().len(), 54);
        let corner = gather_cube(&f, [0, 0, 0], false).unwrap();
        assert_eq!(corner.iter().filter(|&&x| x != 0.0).count(), 7 * 2);
        assert!(gather_cube(&f, [5, 0, 0], true).is_err());
    }

    #[test]
    fn adjacent_coords() {
        assert_eq!(adjacent_coord([5, 7, 9], Direction::Coarser), [2, 3, 4]);
        assert_eq!(adjacent_coord([2, 3, 4], Direction::Finer), [4, 6, 8]);
        let p = [3, 0, 11];
        assert_eq!(adjacent_coord(adjacent_coord(p, Direction::Finer), Direction::Coarser), p);
        assert_eq!(adjacent_layer(0), (1, Direction::Coarser));
        assert_eq!(adjacent_layer(3), (2, Direction::Finer));
    }

    #[test]
    fn fuse_with_fixed_lambdas() {
        let mut g = Graph::<f64>::new();
        let v = |g: &mut Graph<f64>, s: f64| g.constant(Tensor::from_fn(&[2, 3], |i| s * (i as f64 + 1.0))).unwrap();
        let (cg, ct, fg, gl) = (v(&mut g, 1.0), v(&mut g, 10.0), v(&mut g, 100.0), v(&mut g, -2.0));
        let zero = g.constant(Tensor::scalar(0.0)).unwrap();
        let one = g.constant(Tensor::scalar(1.0)).unwrap();
        let out = fuse(&mut g, cg, ct, fg, gl, [zero, zero, zero, one]).unwrap();
        assert_eq!(g.value(out), g.value(gl));
        let out = fuse(&mut g, cg, ct, fg, gl, [zero; 4]).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn render_overrides_only_points() {
        let coarse = Volume::new([2, 2, 2], vec![0.9, 0.1, 0.6, 0.4, 0.0, 1.0, 0.5, 0.49]).unwrap();
        let plain = render(&coarse, &[], &[], 0.5).unwrap();
        assert_eq!(plain.data(), &[1, 0, 1, 0, 0, 1, 1, 0]);
        let r = render(&coarse, &[f32::INFINITY, f32::NEG_INFINITY], &[[0, 0, 1], [0, 0, 0]], 0.5).unwrap();
        assert_eq!(r.data(), &[0, 1, 1, 0, 0, 1, 1, 0]);
        assert!(render(&coarse, &[1.0], &[[2, 0, 0]], 0.5).is_err());
    }

    #[test]
    fn sinusoidal_code_layout() {
        let c = sinusoidal_code([0, 4, 8], [16, 16, 16], 2);
        assert_eq!(c.len(), 12);
        assert_eq!(&c[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((c[4] - (PI / 4.0).sin()).abs() < 1e-15);
    }
}
