use pcp_tdma::simengine::{Engine, InitialPeriodPolicy, SimConfig};
use pcp_tdma::topology::{generate_grid, generate_line};

fn sweep(name: &str, topo: pcp_tdma::topology::Topology) {
    let mut worst = 0;
    let mut worst_seed = 0;
    let mut slots = Vec::new();
    for seed in 0..20u64 {
        let mut engine =
            Engine::new(SimConfig::new(topo.clone(), InitialPeriodPolicy::DoubleMaxDegree, seed))
                .unwrap();
        match engine.run_to_convergence() {
            Ok(()) => {
                let p = engine.metrics().unwrap().final_period;
                slots.push(engine.metrics().unwrap().convergence_slots);
                if p > worst {
                    worst = p;
                    worst_seed = seed;
                }
            }
            Err(e) => println!("{name} seed {seed}: ERR {e}"),
        }
    }
    let maxslot = slots.iter().copied().max().unwrap_or(0);
    println!("{name}: worst P_f = {worst} (seed {worst_seed}), max conv slot {maxslot}");
}

fn main() {
    sweep("line16", generate_line(16).unwrap());
    sweep("grid4x4", generate_grid(4, 4).unwrap());
}
