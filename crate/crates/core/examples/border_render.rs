//! Rendering in isolation: a blurred coarse probability map is thresholded,
//! its border points are re-decided by logits, and only those voxels change.

use fabr::border::{detect_bvp, render};
use fabr::metrics::{border_accuracy, iou};
use fabr::phantom::{generate, PhantomConfig};
use fabr::volume::{binarize, Volume};

fn main() -> fabr::Result<()> {
    let tree = generate(&PhantomConfig { seed: 9, ..PhantomConfig::default() })?;
    let gt = &tree.mask;
    // the phantom's own blurred volume stands in for a coarse prediction
    let coarse: Volume<f32> = tree.volume.map(|v| v.clamp(0.0, 1.0));
    let tau = 0.5;
    let coarse_mask = binarize(coarse.data(), coarse.dims(), tau)?;
    let bvp = detect_bvp(&coarse_mask, 0)?;

    // an oracle refiner that knows the answer, and one that is always unsure
    let oracle: Vec<f32> = bvp.points.iter().map(|&p| if gt.get(p) == 1 { 4.0 } else { -4.0 }).collect();
    let unsure = vec![-0.1; bvp.points.len()];
    for (name, logits) in [("oracle", &oracle), ("always background", &unsure)] {
        let out = render(&coarse, logits, &bvp.points, tau)?;
        let changed = out.data().iter().zip(coarse_mask.data()).filter(|(a, b)| a != b).count();
        println!(
            "{name:>17}: {} border points, {changed} voxels changed, border accuracy {:.4} -> {:.4}, iou {:.4} -> {:.4}",
            bvp.points.len(),
            border_accuracy(&coarse_mask, gt, &bvp.points)?.unwrap_or(f64::NAN),
            border_accuracy(&out, gt, &bvp.points)?.unwrap_or(f64::NAN),
            iou(&coarse_mask, gt)?,
            iou(&out, gt)?
        );
    }
    Ok(())
}
