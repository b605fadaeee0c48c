use pcp_tdma::simengine::{Engine, InitialPeriodPolicy, SimConfig};
use pcp_tdma::topology::generate_grid;

fn main() {
    let topo = generate_grid(4, 4).unwrap();
    let mut hist: std::collections::BTreeMap<u32, u32> = Default::default();
    for seed in 0..200u64 {
        let mut e =
            Engine::new(SimConfig::new(topo.clone(), InitialPeriodPolicy::DoubleMaxDegree, seed))
                .unwrap();
        match e.run_to_convergence() {
            Ok(()) => *hist.entry(e.metrics().unwrap().final_period).or_default() += 1,
            Err(err) => println!("seed {seed}: ERR {err}"),
        }
    }
    println!("{hist:?}");
}
