use pcp_tdma::simengine::{Engine, InitialPeriodPolicy, SimConfig};
use pcp_tdma::topology::generate_grid;
fn main() {
    let topo = generate_grid(4, 4).unwrap();
    let mut e =
        Engine::new(SimConfig::new(topo, InitialPeriodPolicy::DoubleMaxDegree, 163)).unwrap();
    e.run_to_convergence().unwrap();
    for ep in &e.trace().episodes {
        println!("{ep:?}");
    }
    println!("final sf: {:?}", e.trace().final_superframe.as_ref().map(|s| s.period()));
    let reg = e.registry();
    for (link, slot) in reg.reserved_links() {
        if slot >= 7 {
            let feas = reg.feasible_slots(link, 8);
            println!("link {:?} slot {} feasible {:?}", link, slot, feas);
        }
    }
}
// (dump moved into main above)
