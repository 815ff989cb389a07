//! Tree-completeness metrics for degraded versions of a phantom mask.

use fabr::metrics::{evaluate, to_csv, BranchPartition};
use fabr::phantom::{generate, PhantomConfig};

fn main() -> fabr::Result<()> {
    let tree = generate(&PhantomConfig { seed: 12, ..PhantomConfig::default() })?;
    let gt = &tree.mask;
    let part = BranchPartition::new(gt, &tree.branches);

    // drop the deepest branch region
    let deepest = tree.branches.iter().max_by_key(|b| b.generation).map(|b| b.id).unwrap_or(0);
    let slot = part.ids.iter().position(|&id| id == deepest).unwrap_or(0);
    let mut erased = gt.clone();
    for &p in &part.regions[slot] {
        erased.set(p, 0);
    }
    // one-voxel dilation along the first axis
    let mut dilated = gt.clone();
    for p in gt.foreground() {
        if p[0] + 1 < gt.dims()[0] {
            dilated.set([p[0] + 1, p[1], p[2]], 1);
        }
    }

    let reports = vec![
        evaluate("ground_truth", gt, gt, &tree.branches)?,
        evaluate("erased_branch", &erased, gt, &tree.branches)?,
        evaluate("dilated", &dilated, gt, &tree.branches)?,
    ];
    print!("{}", to_csv(&reports));
    for b in reports[1].branches.iter().filter(|b| !b.detected) {
        println!(
            "erased_branch  branch {:>2}: region {:>4} voxels, covered {:.3}, detected {}",
            b.branch_id, b.region_voxels, b.branch_iou, b.detected
        );
    }
    Ok(())
}
