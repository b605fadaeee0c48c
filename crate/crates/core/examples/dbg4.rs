use pcp_tdma::simengine::{Engine, InitialPeriodPolicy, SimConfig};
use pcp_tdma::topology::generate_grid;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pick: Option<u64> = args.get(1).map(|s| s.parse().unwrap());
    let topo = generate_grid(4, 4).unwrap();
    for seed in 0..200u64 {
        if pick.is_some_and(|p| p != seed) {
            continue;
        }
        let mut e =
            Engine::new(SimConfig::new(topo.clone(), InitialPeriodPolicy::DoubleMaxDegree, seed))
                .unwrap();
        match e.run_to_convergence() {
            Ok(()) => {
                let m = e.metrics().unwrap();
                if m.final_period >= 5 || pick.is_some() {
                    println!("seed {seed}: P_f={} conv={}", m.final_period, m.convergence_slots);
                }
            }
            Err(err) => println!("seed {seed}: ERR {err}"),
        }
    }
}
