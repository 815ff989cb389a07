//! Dataset generation, a short training run, checkpointing and evaluation,
//! all in a temporary directory. The same steps the CLI performs.

use fabr::config::RunConfig;
use fabr::dataset::generate_dataset;
use fabr::pipeline::{evaluate_checkpoint, train, TrainOptions};

fn main() -> fabr::Result<()> {
    let dir = std::env::temp_dir().join(format!("fabr-end-to-end-{}", std::process::id()));
    let mut cfg = RunConfig::with_seed(5);
    cfg.paths.dataset = dir.join("data");
    cfg.paths.run_dir = dir.join("run");
    cfg.optim.epochs = 12;
    let m = generate_dataset(&cfg, 10, &cfg.paths.dataset)?;
    println!("dataset: {} cases, split {:?}", m.cases.len(), m.split);
    let s = train(&cfg, TrainOptions { verbose: true, ..TrainOptions::default() })?;
    let last = s.checkpoints.last().expect("at least one epoch");
    let e = evaluate_checkpoint(&cfg, last, "all", &dir.join("eval"), false)?;
    println!(
        "{} cases: coarse iou {:.4} dlr {:.4} | rendered iou {:.4} dlr {:.4} | border accuracy {:.4} -> {:.4}",
        e.cases, e.coarse.iou, e.coarse.dlr, e.rendered.iou, e.rendered.dlr, e.border_accuracy_coarse, e.border_accuracy_rendered
    );
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
