//! Border points of a few masks: where a mask differs from its
//! max-pool then nearest-upsample reconstruction, at every scale.

use fabr::border::detect_bvp;
use fabr::phantom::{generate, PhantomConfig};
use fabr::pipeline::{format_bvp, mask_pyramid_bvp};
use fabr::volume::Mask;

fn cube(dims: [usize; 3], lo: usize, size: usize) -> Mask {
    let mut m = Mask::zeros(dims);
    for x in lo..lo + size {
        for y in lo..lo + size {
            for z in lo..lo + size {
                m.set([x, y, z], 1);
            }
        }
    }
    m
}

fn main() -> fabr::Result<()> {
    let mut single = Mask::zeros([8, 8, 8]);
    single.set([3, 3, 3], 1);
    println!("single voxel: {:?}", detect_bvp(&single, 0)?.points);
    println!("aligned 4^3 cube: {} points", detect_bvp(&cube([16; 3], 4, 4), 0)?.points.len());
    for s in [4, 8, 12] {
        println!("offset {s}^3 cube: {} points", detect_bvp(&cube([16; 3], 1, s), 0)?.points.len());
    }

    let tree = generate(&PhantomConfig { seed: 4, ..PhantomConfig::default() })?;
    let sets = mask_pyramid_bvp(&tree.mask)?;
    for s in &sets {
        println!("phantom layer {} ({:?}): {} border points", s.layer, s.diff.dims(), s.points.len());
    }
    let text = format_bvp(&sets);
    println!("first lines of the dump:");
    for line in text.lines().take(5) {
        println!("  {line}");
    }
    Ok(())
}
