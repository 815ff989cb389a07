//! Gaussian memberships, the fuzzy OR, and the full skip-connection
//! module on random features.

use fabr::fuzzy::{fuzzy_or, gmf_membership, rho_for_sigma, FuzzyAttention, FuzzyConfig, GateMode, GmfParams};
use fabr::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fabr::Result<()> {
    // two channels, three membership functions each
    let mut store = ParamStore::<f64>::new();
    let p = GmfParams {
        mu: store.add("mu", Tensor::new(&[3, 2], vec![-1.0, 0.0, 0.0, 2.0, 1.0, 4.0])?),
        rho: store.add("rho", Tensor::full(&[3, 2], rho_for_sigma(0.5))),
        m: 3,
        channels: 2,
    };
    let xs: Vec<f64> = (0..9).map(|i| -2.0 + 0.75 * i as f64).collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[1, 2, 9, 1, 1], [xs.clone(), xs.clone()].concat())?)?;
    let members = gmf_membership(&mut g, &store, x, &p)?;
    let alpha = fuzzy_or(&mut g, members)?;
    let a = g.value(alpha).data();
    println!("   x    alpha(ch0)  alpha(ch1)");
    for (i, v) in xs.iter().enumerate() {
        println!("{v:>5.2}   {:>9.4}   {:>9.4}", a[i], a[9 + i]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for gate in [GateMode::Fuzzy, GateMode::Identity] {
        let mut store = ParamStore::<f32>::new();
        let cfg = FuzzyConfig { gate, ..FuzzyConfig::default() };
        let module = FuzzyAttention::new(&mut store, "skip", 8, cfg, &mut rng)?;
        let mut g = Graph::new();
        let e = g.input(Tensor::from_fn(&[1, 8, 4, 4, 4], |_| rng.random_range(-2.0..2.0)))?;
        let d = g.input(Tensor::from_fn(&[1, 8, 4, 4, 4], |_| rng.random_range(-2.0..2.0)))?;
        let out = module.forward(&mut g, &store, e, d)?;
        let summary = match out.alpha {
            Some(a) => {
                let v = g.value(a).data();
                let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(l, h), &x| (l.min(x), h.max(x)));
                format!("alpha in [{lo:.3}, {hi:.3}]")
            }
            None => "no attention map".to_string(),
        };
        println!("{gate:?} gate: {} parameters, {summary}", store.num_elements());
    }
    Ok(())
}
