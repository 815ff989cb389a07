//! Acceptance suite. Each test prints one `[PASS]` or `[FAIL]` line to
//! stderr (visible without `--nocapture`) and then asserts. Tests hold a
//! shared lock so the timed ones are not slowed by the others.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use fabr::backbone::BackboneConfig;
use fabr::border::detect_bvp;
use fabr::config::RunConfig;
use fabr::dataset::{generate_cases, Case};
use fabr::fuzzy::{fuzzy_or, gmf_membership, rho_for_sigma, FuzzyAttention, FuzzyConfig, GateMode, GmfParams};
use fabr::gradcheck::run_standard_suite;
use fabr::metrics::{amr, dbr, dice, dlr, iou, precision, BranchPartition};
use fabr::model::{Phase, Prediction};
use fabr::phantom::{generate, Branch};
use fabr::pipeline::{evaluate_case, fit, Trainer};
use fabr::tensor::{Graph, ParamStore, Tensor};
use fabr::volume::{Mask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

#[test]
fn gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let results = run_standard_suite().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e} > {:.0e})", r.name, r.max_rel_err, r.tolerance))
        .collect();
    let worst_smooth = results.iter().filter(|r| !r.kinked).map(|r| r.max_rel_err).fold(0.0, f64::max);
    let worst_kinked = results.iter().filter(|r| r.kinked).map(|r| r.max_rel_err).fold(0.0, f64::max);
    report(
        "gradient suite",
        failed.is_empty() && secs <= 120.0,
        &format!(
            "{} cases, {} failed {:?}, worst smooth {worst_smooth:.2e} (tol 1e-5), worst kinked {worst_kinked:.2e} (tol 1e-3), {secs:.1}s (limit 120s)",
            results.len(),
            failed.len(),
            failed
        ),
    );
}

#[test]
fn fuzzy_invariants() {
    let _g = serial();
    const TOL: f64 = 1e-6;
    let (m, c) = (4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 3]; // permutation, shift, dominance violation
    let mut out_of_range = 0;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..c * 8).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mu: Vec<f64> = (0..m * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..m * c).map(|_| rng.random_range(0.05..3.0)).collect();
        let shift = rng.random_range(-5.0..5.0);
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |v: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&i| v[i * c..(i + 1) * c].to_vec()).collect() };

        let run = |x: &[f64], mu: &[f64], sigma: &[f64]| {
            let mut store = ParamStore::<f64>::new();
            let p = GmfParams {
                mu: store.add("mu", Tensor::new(&[m, c], mu.to_vec()).unwrap()),
                rho: store.add(
                    "rho",
                    Tensor::new(&[m, c], sigma.iter().map(|&s| rho_for_sigma(s)).collect()).unwrap(),
                ),
                m,
                channels: c,
            };
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(&[1, c, 2, 2, 2], x.to_vec()).unwrap()).unwrap();
            let members = gmf_membership(&mut g, &store, xv, &p).unwrap();
            let alpha = fuzzy_or(&mut g, members).unwrap();
            (g.value(members).data().to_vec(), g.value(alpha).data().to_vec())
        };
        let (members, alpha) = run(&x, &mu, &sigma);
        out_of_range += alpha.iter().filter(|a| !(0.0..=1.0).contains(*a)).count();

        let (_, alpha_p) = run(&x, &permute(&mu), &permute(&sigma));
        let d = alpha.iter().zip(&alpha_p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst[0] = worst[0].max(d);

        let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let mus: Vec<f64> = mu.iter().map(|v| v + shift).collect();
        let (members_s, _) = run(&xs, &mus, &sigma);
        let d = members.iter().zip(&members_s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst[1] = worst[1].max(d);

        // members: [1, m, c, 8]; alpha: [1, c, 8]
        for i in 0..m {
            for (j, a) in alpha.iter().enumerate() {
                worst[2] = worst[2].max(members[i * c * 8 + j] - a);
            }
        }
    }

    // the full skip module keeps alpha in [0, 1] as well
    let mut module_out = 0;
    for trial in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let mut r = ChaCha8Rng::seed_from_u64(trial);
        let fa = FuzzyAttention::new(&mut store, "fa", 8, FuzzyConfig::default(), &mut r).unwrap();
        let mut g = Graph::new();
        let e = g.input(Tensor::from_fn(&[1, 8, 4, 4, 4], |_| r.random_range(-3.0..3.0))).unwrap();
        let d = g.input(Tensor::from_fn(&[1, 8, 4, 4, 4], |_| r.random_range(-3.0..3.0))).unwrap();
        let out = fa.forward(&mut g, &store, e, d).unwrap();
        module_out += g.value(out.alpha.unwrap()).data().iter().filter(|a| !(0.0..=1.0).contains(*a)).count();
    }

    // distinct centers per channel give distinct alpha at one position
    let mut store = ParamStore::<f64>::new();
    let p = GmfParams {
        mu: store.add("mu", Tensor::new(&[1, 2], vec![0.0, 3.0]).unwrap()),
        rho: store.add("rho", Tensor::full(&[1, 2], rho_for_sigma(1.0))),
        m: 1,
        channels: 2,
    };
    let mut g = Graph::new();
    let xv = g.input(Tensor::new(&[1, 2, 1, 1, 1], vec![0.5, 0.5]).unwrap()).unwrap();
    let mem = gmf_membership(&mut g, &store, xv, &p).unwrap();
    let a = fuzzy_or(&mut g, mem).unwrap();
    let a = g.value(a).data();
    let specific = (a[0] - a[1]).abs() > 0.1;

    let pass = out_of_range == 0 && module_out == 0 && worst.iter().all(|&w| w <= TOL) && specific;
    report(
        "fuzzy invariants",
        pass,
        &format!(
            "1000 inputs: alpha outside [0,1] {out_of_range} (module {module_out}), permutation {:.1e}, shift {:.1e}, dominance {:.1e} (tol 1e-6), channel-specific {specific}",
            worst[0], worst[1], worst[2].max(0.0)
        ),
    );
}

/// Independent border-point reference: a voxel is a border point when its
/// value differs from the maximum of its aligned 2x2x2 block.
fn brute_force_bvp(m: &Mask) -> Vec<[usize; 3]> {
    let [h, w, d] = m.dims();
    let mut out = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let mut block = 0;
                for dx in 0..2 {
                    for dy in 0..2 {
                        for dz in 0..2 {
                            let q = [(x & !1) + dx, (y & !1) + dy, (z & !1) + dz];
                            if q[0] < h && q[1] < w && q[2] < d {
                                block = block.max(m.get(q));
                            }
                        }
                    }
                }
                if block != m.get([x, y, z]) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

#[test]
fn bvp_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatched = 0;
    for i in 0..100 {
        let density = [0.02, 0.1, 0.3, 0.5, 0.8][i % 5];
        let data = (0..16 * 16 * 16).map(|_| u8::from(rng.random_bool(density))).collect();
        let m = Volume::new([16; 3], data).unwrap();
        let got = detect_bvp(&m, 0).unwrap();
        let want = brute_force_bvp(&m);
        let diff_ok = got.diff.foreground() == want;
        if got.points != want || !diff_ok {
            mismatched += 1;
        }
    }

    let mut aligned = Mask::zeros([16; 3]);
    for i in 0..8 {
        aligned.set([4 + (i >> 2), 6 + ((i >> 1) & 1), 10 + (i & 1)], 1);
    }
    let aligned_ok = detect_bvp(&aligned, 0).unwrap().points.is_empty();

    let mut single = Mask::zeros([16; 3]);
    single.set([5, 8, 3], 1);
    let pts = detect_bvp(&single, 0).unwrap().points;
    let mut block: Vec<[usize; 3]> = (0..8).map(|i| [4 + (i >> 2), 8 + ((i >> 1) & 1), 2 + (i & 1)]).collect();
    block.retain(|&p| p != [5, 8, 3]);
    let single_ok = pts == block;

    report(
        "BVP oracle",
        mismatched == 0 && aligned_ok && single_ok,
        &format!("100 random 16^3 masks, {mismatched} mismatches; aligned block empty {aligned_ok}; single voxel gives its 7 block mates {single_ok}"),
    );
}

fn branch(id: usize, parent: Option<usize>, centerline: Vec<[usize; 3]>) -> Branch {
    Branch {
        id,
        parent,
        generation: usize::from(parent.is_some()),
        radius: 1.0,
        centerline,
    }
}

fn from_points(dims: [usize; 3], pts: &[[usize; 3]]) -> Mask {
    let mut m = Mask::zeros(dims);
    for &p in pts {
        m.set(p, 1);
    }
    m
}

#[test]
fn metrics_oracle() {
    let _g = serial();
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let dims = [16, 16, 16];

    // overlap: gt 3 voxels, pred 2 voxels, 1 shared
    let gt = from_points(dims, &[[0, 0, 0], [0, 0, 1], [0, 0, 2]]);
    let pred = from_points(dims, &[[0, 0, 2], [5, 5, 5]]);
    checks.push(("iou 1/4", iou(&pred, &gt).unwrap() == 0.25));
    checks.push(("precision 1/2", precision(&pred, &gt).unwrap().value == 0.5));
    checks.push(("amr 2/3", amr(&pred, &gt).unwrap() == 2.0 / 3.0));
    checks.push(("identical iou 1", iou(&gt, &gt).unwrap() == 1.0 && amr(&gt, &gt).unwrap() == 0.0));
    checks.push(("empty pred amr 1", amr(&Mask::zeros(dims), &gt).unwrap() == 1.0));

    // half of a slab covered
    let slab: Vec<[usize; 3]> = (0..16).flat_map(|x| (0..4).map(move |y| [x, y, 7])).collect();
    let half = from_points(dims, &slab[..32]);
    checks.push(("half mask amr 0.5", amr(&half, &from_points(dims, &slab)).unwrap() == 0.5));

    // 60 centerline voxels over two branches, 12 missed
    let trunk: Vec<[usize; 3]> = (0..16).flat_map(|x| [[x, 2, 2], [x, 3, 3]]).take(30).collect();
    let side: Vec<[usize; 3]> = (0..15).flat_map(|x| [[x, 10, 10], [x, 11, 11]]).collect();
    let branches = vec![branch(0, None, trunk.clone()), branch(1, Some(0), side.clone())];
    let all: Vec<[usize; 3]> = trunk.iter().chain(&side).copied().collect();
    assert_eq!(all.len(), 60);
    let mut covered = all.clone();
    covered.drain(5..17);
    checks.push(("dlr 48/60", dlr(&from_points(dims, &covered), &branches).unwrap() == 0.8));

    // two-branch tree with one branch erased from the prediction
    let stem: Vec<[usize; 3]> = (0..8).map(|x| [x, 8, 8]).collect();
    let arm: Vec<[usize; 3]> = (8..15).map(|x| [x, 8 + (x - 7), 8]).collect();
    let tree = vec![branch(0, None, stem.clone()), branch(1, Some(0), arm.clone())];
    let mut gt_pts = Vec::new();
    for c in stem.iter().chain(&arm) {
        for dz in 0..3 {
            gt_pts.push([c[0], c[1], c[2] + dz - 1]);
        }
    }
    let gt = from_points(dims, &gt_pts);
    let part = BranchPartition::new(&gt, &tree);
    let mut erased = gt.clone();
    for &p in &part.regions[1] {
        erased.set(p, 0);
    }
    checks.push(("erased branch dbr 0.5", dbr(&erased, &gt, &tree).unwrap() == 0.5));
    checks.push(("full tree dbr 1", dbr(&gt, &gt, &tree).unwrap() == 1.0));
    checks.push(("erased branch dlr 8/15", dlr(&erased, &tree).unwrap() == 8.0 / 15.0));

    // nested predictions on phantoms
    let mut monotone = true;
    for s in 0..20u64 {
        let cfg = fabr::phantom::PhantomConfig {
            seed: 500 + s,
            ..Default::default()
        };
        let t = generate(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut order = t.mask.foreground();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut pred = Mask::zeros(t.dims());
        let mut last = (0.0, 0.0);
        for chunk in order.chunks(order.len() / 10 + 1) {
            for &p in chunk {
                pred.set(p, 1);
            }
            let now = (dlr(&pred, &t.branches).unwrap(), dbr(&pred, &t.mask, &t.branches).unwrap());
            monotone &= now.0 >= last.0 && now.1 >= last.1;
            last = now;
        }
    }
    checks.push(("dlr/dbr monotone over 20 nested sequences", monotone));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        "metrics oracle",
        failed.is_empty(),
        &format!("{} checks, failed {failed:?}", checks.len()),
    );
}

#[test]
fn overfit_single_phantom() {
    let _g = serial();
    let mut cfg = RunConfig::with_seed(7);
    cfg.phantom.seed = 7;
    let t = generate(&cfg.phantom).unwrap();
    let case = Case {
        id: "overfit".into(),
        volume: t.volume,
        mask: t.mask,
        branches: t.branches,
    };
    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut best = (0.0, 0);
    for step in 1..=500 {
        trainer.step_on(&[&case], Phase::Joint).unwrap();
        if step % 25 == 0 {
            let p = trainer.predict(&case.volume).unwrap();
            let d = dice(&p.mask, &case.mask).unwrap();
            if d > best.0 {
                best = (d, step);
            }
            if d >= 0.95 {
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "overfit",
        best.0 >= 0.95 && secs <= 600.0,
        &format!(
            "32^3 phantom, lr {}, full-resolution Dice {:.4} at step {} (need 0.95 within 500), {secs:.0}s (limit 600s)",
            cfg.optim.lr, best.0, best.1
        ),
    );
}

struct SeedRun {
    seed: u64,
    fuzzy_ba: (f64, f64),
    fuzzy_dlr: f64,
    identity_dlr: f64,
    predictions: Vec<(Case, Prediction)>,
}

const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard desk training on 16 phantoms per seed, with fuzzy and with
/// identity gating, evaluated on 10 held-out phantoms.
fn ablation() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        ABLATION_SEEDS
            .iter()
            .map(|&seed| {
                let cfg = RunConfig::with_seed(seed);
                let train = generate_cases(&cfg, 0..16).unwrap();
                let held = generate_cases(&cfg, 16..26).unwrap();
                let (fuzzy, _) = fit(&cfg, &train, &[]).unwrap();
                let mut id_cfg = cfg.clone();
                id_cfg.backbone = BackboneConfig {
                    gate: GateMode::Identity,
                    ..cfg.backbone.clone()
                };
                let (identity, _) = fit(&id_cfg, &train, &[]).unwrap();

                let evals: Vec<_> = held.iter().map(|c| evaluate_case(&fuzzy, c).unwrap()).collect();
                let id_evals: Vec<_> = held.iter().map(|c| evaluate_case(&identity, c).unwrap()).collect();
                let ba = |f: fn(&fabr::pipeline::CaseEval) -> Option<f64>| mean(evals.iter().filter_map(f));
                let run = SeedRun {
                    seed,
                    fuzzy_ba: (ba(|e| e.border_accuracy_coarse), ba(|e| e.border_accuracy_rendered)),
                    fuzzy_dlr: mean(evals.iter().map(|e| e.rendered.dlr)),
                    identity_dlr: mean(id_evals.iter().map(|e| e.rendered.dlr)),
                    predictions: held
                        .into_iter()
                        .map(|c| {
                            let p = fuzzy.predict(&c.volume).unwrap();
                            (c, p)
                        })
                        .collect(),
                };
                let _ = writeln!(
                    std::io::stderr(),
                    "       seed {seed}: border accuracy {:.4} -> {:.4}, DLR fuzzy {:.4} vs identity {:.4}",
                    run.fuzzy_ba.0,
                    run.fuzzy_ba.1,
                    run.fuzzy_dlr,
                    run.identity_dlr
                );
                run
            })
            .collect()
    })
}

#[test]
fn glcf_ablation() {
    let _g = serial();
    let runs = ablation();
    let coarse = mean(runs.iter().map(|r| r.fuzzy_ba.0));
    let rendered = mean(runs.iter().map(|r| r.fuzzy_ba.1));
    let fuzzy = mean(runs.iter().map(|r| r.fuzzy_dlr));
    let identity = mean(runs.iter().map(|r| r.identity_dlr));
    let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    report(
        "GLCF ablation",
        rendered >= coarse && fuzzy >= identity,
        &format!(
            "seeds {seeds:?}, 10 held-out phantoms each: border accuracy {coarse:.4} -> {rendered:.4} ({:+.4}); DLR fuzzy {fuzzy:.4} vs identity {identity:.4} ({:+.4})",
            rendered - coarse,
            fuzzy - identity
        ),
    );
}

#[test]
fn render_locality() {
    let _g = serial();
    let mut cases = 0;
    let mut violations = 0;
    let mut changed = 0;
    for run in ablation() {
        let tau = RunConfig::with_seed(run.seed).tau;
        for (_, p) in &run.predictions {
            cases += 1;
            let coarse = p.scale_probs[0].map(|v| u8::from(v >= tau));
            if coarse != p.coarse_mask || p.mask.dims() != coarse.dims() {
                violations += 1;
                continue;
            }
            for i in 0..coarse.len() {
                let q = coarse.coord(i);
                let on_bvp = p.bvp.diff.get(q) == 1;
                if coarse.data()[i] != p.mask.data()[i] {
                    changed += 1;
                    if !on_bvp {
                        violations += 1;
                    }
                }
            }
        }
    }
    report(
        "render locality",
        violations == 0 && cases > 0,
        &format!("{cases} eval cases, {changed} voxels changed by rendering, {violations} outside the border set"),
    );
}

fn run_bin(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_fabr"))
        .args(args)
        .env_remove("FABR_THREADS")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_bin(&["phantom-gen", "--seed", "31", "--n", "4", "--out", path(&data)]);
    let mut ckpts = Vec::new();
    let mut masks = Vec::new();
    for r in ["a", "b"] {
        let run = dir.path().join(r);
        run_bin(&[
            "--deterministic", "train", "--seed", "31", "--dataset", path(&data), "--run-dir", path(&run), "--epochs", "2", "-q",
        ]);
        ckpts.push(std::fs::read(run.join("epoch_002.ckpt")).unwrap());
        let out = dir.path().join(format!("{r}.msk"));
        run_bin(&[
            "--deterministic",
            "infer",
            "--seed",
            "31",
            "--checkpoint",
            path(&dir.path().join("a").join("epoch_002.ckpt")),
            "--volume",
            path(&data.join("case_000.vol")),
            "--out",
            path(&out),
        ]);
        masks.push(std::fs::read(out).unwrap());
    }
    let same_ckpt = ckpts[0] == ckpts[1];
    let same_mask = masks[0] == masks[1];
    report(
        "determinism",
        same_ckpt && same_mask,
        &format!(
            "epoch-2 checkpoints identical {same_ckpt} ({} bytes); infer outputs identical {same_mask}",
            ckpts[0].len()
        ),
    );
}
