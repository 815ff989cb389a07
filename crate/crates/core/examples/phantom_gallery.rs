//! Generates a few phantom trees and prints their structure plus a
//! maximum-intensity projection of each mask.

use fabr::phantom::{generate, PhantomConfig};

fn main() -> fabr::Result<()> {
    for seed in [1u64, 2, 3] {
        let cfg = PhantomConfig {
            seed,
            curvature: if seed == 3 { 0.3 } else { 0.0 },
            ..PhantomConfig::default()
        };
        let tree = generate(&cfg)?;
        let [h, w, d] = tree.dims();
        println!(
            "seed {seed}: {} branches, {} foreground voxels, centerline length {}",
            tree.branches.len(),
            tree.mask.count(),
            tree.centerline_length()
        );
        for b in &tree.branches {
            println!(
                "  branch {:>2} parent {:>4} generation {} radius {:.2} length {}",
                b.id,
                b.parent.map_or("-".to_string(), |p| p.to_string()),
                b.generation,
                b.radius,
                b.centerline.len()
            );
        }
        // project along the last axis, every other row to keep it short
        for x in (0..h).step_by(2) {
            let row: String = (0..w)
                .map(|y| if (0..d).any(|z| tree.mask.get([x, y, z]) == 1) { '#' } else { '.' })
                .collect();
            println!("  {row}");
        }
        println!();
    }
    Ok(())
}
