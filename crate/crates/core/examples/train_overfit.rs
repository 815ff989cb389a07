//! Fits the full model to one phantom and reports coarse and rendered
//! Dice as training progresses. Pass a step count to change the default of 200.

use std::time::Instant;

use fabr::config::RunConfig;
use fabr::dataset::generate_case;
use fabr::metrics::dice;
use fabr::model::Phase;
use fabr::pipeline::Trainer;

fn main() -> fabr::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = RunConfig::with_seed(7);
    let case = generate_case(&cfg, 0)?;
    let mut trainer = Trainer::new(&cfg)?;
    println!("{} parameters, {} foreground voxels", trainer.store.num_elements(), case.mask.count());
    let start = Instant::now();
    for step in 1..=steps {
        let l = trainer.step_on(&[&case], Phase::Joint)?;
        if step % 25 == 0 {
            let p = trainer.predict(&case.volume)?;
            println!(
                "step {step:>4}  {:>5.1}s  ordinary {:.4}  border {:.4}  points {:>5}  dice coarse {:.4} rendered {:.4}",
                start.elapsed().as_secs_f64(),
                l.ordinary,
                l.border,
                l.points,
                dice(&p.coarse_mask, &case.mask)?,
                dice(&p.mask, &case.mask)?
            );
        }
    }
    Ok(())
}
