//! Backbone plus border refinement: one training step and full inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, SCALES};
use crate::border::{detect_bvp, render, training_points, BvpSet, Glcf, GlcfConfig};
use crate::error::{Error, Result};
use crate::losses::{border_loss, ordinary_loss, LossWeights};
use crate::tensor::{AdamState, AdamW, Graph, ParamStore, Real, Tensor, Var};
use crate::volume::{binarize, Mask, Volume};

/// Parameter-name prefix of the refinement stage.
pub const REFINEMENT_PREFIX: &str = "glcf";

pub fn is_refinement_param(name: &str) -> bool {
    name.starts_with(REFINEMENT_PREFIX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub glcf: Glcf,
}

/// Which losses drive an update and which parameters move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Both losses, all parameters.
    Joint,
    /// Coarse heads only, backbone parameters only.
    Coarse,
    /// Border loss only, refinement parameters only.
    Refine,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub ordinary: f64,
    pub border: f64,
    pub total: f64,
    /// Border points across layers and samples.
    pub points: usize,
}

/// Graph handles of one forward pass with losses attached.
pub struct ForwardLosses {
    pub ordinary: Var,
    pub border: Var,
    pub total: Var,
    pub points: usize,
}

impl Model {
    /// Initializes every parameter from `seed`.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        backbone: BackboneConfig,
        glcf: GlcfConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = backbone.stage_channels.clone();
        let backbone = Backbone::new(store, backbone, &mut rng)?;
        let glcf = Glcf::new(store, glcf, &channels, &mut rng)?;
        Ok(Model { backbone, glcf })
    }

    /// Builds the losses of a batch on `g`. Border points are taken from
    /// the configured source at every scale, targets are the ground truth
    /// at those points.
    #[allow(clippy::too_many_arguments)]
    pub fn losses<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        volumes: &[&Volume<f32>],
        masks: &[&Mask],
        weights: &LossWeights,
        tau: f32,
        phase: Phase,
    ) -> Result<ForwardLosses> {
        let n = volumes.len();
        if n == 0 || masks.len() != n {
            return Err(Error::invalid("train_step", format!("{n} volumes, {} masks", masks.len())));
        }
        let x = g.constant(batch_tensor(volumes)?)?;
        let coarse = self.backbone.forward(g, store, x)?;

        let mut gts: Vec<Vec<Mask>> = vec![masks.iter().map(|&m| m.clone()).collect()];
        for l in 1..SCALES {
            let next = gts[l - 1].iter().map(Mask::max_pool2).collect::<Result<Vec<_>>>()?;
            gts.push(next);
        }
        let targets: Vec<Tensor<R>> = gts.iter().map(|ms| mask_tensor(ms)).collect::<Result<_>>()?;
        let ordinary = ordinary_loss(g, &coarse.probs, &targets, weights)?;

        let mut point_probs = vec![None; SCALES];
        let mut point_targets = vec![Tensor::zeros(&[0, 1]); SCALES];
        let mut count = 0;
        if phase != Phase::Coarse {
            let mut points = Vec::with_capacity(SCALES);
            for l in 0..SCALES {
                let probs = g.value(coarse.probs[l]);
                let dims = gts[l][0].dims();
                let per = dims.iter().product::<usize>();
                let mut layer_pts = Vec::with_capacity(n);
                let mut tv = Vec::new();
                for b in 0..n {
                    let p: Vec<f32> = probs.data()[b * per..(b + 1) * per]
                        .iter()
                        .map(|v| v.to_f32().unwrap())
                        .collect();
                    let pred = binarize(&p, dims, tau)?;
                    let pts = training_points(&gts[l][b], &pred, self.glcf.config.train_bvp, l)?;
                    tv.extend(pts.iter().map(|&q| R::lit(f64::from(gts[l][b].get(q)))));
                    layer_pts.push(pts);
                }
                count += tv.len();
                point_targets[l] = Tensor::new(&[tv.len(), 1], tv)?;
                points.push(layer_pts);
            }
            let logits = self.glcf.refine_points(g, store, &coarse.features, &points)?;
            for (l, z) in logits.into_iter().enumerate() {
                point_probs[l] = z.map(|z| g.sigmoid(z)).transpose()?;
            }
        }
        let border = border_loss(g, &point_probs, &point_targets, weights)?;
        let total = match phase {
            Phase::Joint => g.add(ordinary, border)?,
            Phase::Coarse => ordinary,
            Phase::Refine => border,
        };
        Ok(ForwardLosses {
            ordinary,
            border,
            total,
            points: count,
        })
    }

    /// One optimizer update on a batch.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &self,
        store: &mut ParamStore<f32>,
        adam: &mut AdamState<f32>,
        opt: &AdamW,
        weights: &LossWeights,
        tau: f32,
        volumes: &[&Volume<f32>],
        masks: &[&Mask],
        phase: Phase,
    ) -> Result<StepLosses> {
        let mut g = Graph::new();
        let f = self.losses(&mut g, store, volumes, masks, weights, tau, phase)?;
        let grads = g.backward(f.total)?;
        opt.step(store, &grads, adam, |_, name| match phase {
            Phase::Joint => true,
            Phase::Coarse => !is_refinement_param(name),
            Phase::Refine => is_refinement_param(name),
        })?;
        Ok(StepLosses {
            ordinary: f64::from(g.value(f.ordinary).item()),
            border: f64::from(g.value(f.border).item()),
            total: f64::from(g.value(f.total).item()),
            points: f.points,
        })
    }

    /// Coarse forward, border detection on the binarized full-resolution
    /// output, refinement of those points and rendering.
    pub fn predict(&self, store: &ParamStore<f32>, volume: &Volume<f32>, tau: f32) -> Result<Prediction> {
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(&[volume])?)?;
        let coarse = self.backbone.forward(&mut g, store, x)?;
        let mut scale_probs = Vec::with_capacity(SCALES);
        let mut dims = volume.dims();
        for l in 0..SCALES {
            scale_probs.push(Volume::new(dims, g.value(coarse.probs[l]).data().to_vec())?);
            dims = dims.map(|d| d / 2);
        }
        let coarse_mask = binarize(scale_probs[0].data(), volume.dims(), tau)?;
        let bvp = detect_bvp(&coarse_mask, 0)?;
        let logits = self
            .glcf
            .refine_layer(&mut g, store, &coarse.features, 0, std::slice::from_ref(&bvp.points))?;
        let refined_logits = logits.map(|z| g.value(z).data().to_vec()).unwrap_or_default();
        let mask = render(&scale_probs[0], &refined_logits, &bvp.points, tau)?;
        Ok(Prediction {
            scale_probs,
            coarse_mask,
            bvp,
            refined_logits,
            mask,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Coarse probabilities per scale, finest first.
    pub scale_probs: Vec<Volume<f32>>,
    /// Full-resolution coarse output at the threshold.
    pub coarse_mask: Mask,
    /// Border points of `coarse_mask`.
    pub bvp: BvpSet,
    pub refined_logits: Vec<f32>,
    /// Rendered output.
    pub mask: Mask,
}

/// Stacks single-channel volumes into `[N, 1, H, W, D]`.
pub fn batch_tensor<R: Real>(volumes: &[&Volume<f32>]) -> Result<Tensor<R>> {
    let dims = volumes
        .first()
        .ok_or_else(|| Error::invalid("batch", "empty batch"))?
        .dims();
    let mut data = Vec::with_capacity(volumes.len() * dims.iter().product::<usize>());
    for v in volumes {
        if v.dims() != dims {
            return Err(Error::shape("batch", format!("{:?} vs {dims:?}", v.dims())));
        }
        data.extend(v.data().iter().map(|&x| R::lit(f64::from(x))));
    }
    Tensor::new(&[volumes.len(), 1, dims[0], dims[1], dims[2]], data)
}

fn mask_tensor<R: Real>(masks: &[Mask]) -> Result<Tensor<R>> {
    let dims = masks[0].dims();
    let data = masks
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| R::lit(f64::from(v))))
        .collect();
    Tensor::new(&[masks.len(), 1, dims[0], dims[1], dims[2]], data)
}
