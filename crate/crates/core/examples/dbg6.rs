use pcp_tdma::simengine::{Engine, InitialPeriodPolicy, SimConfig};
use pcp_tdma::topology::generate_fixed_degree;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let deg: u32 = args[1].parse().unwrap();
    let seed: u64 = args[2].parse().unwrap();
    let topo = generate_fixed_degree(50, deg, seed).unwrap();
    let mut e = Engine::new(SimConfig::new(
        topo,
        InitialPeriodPolicy::ThirdMaxDegreePlusFive,
        seed,
    ))
    .unwrap();
    match e.run_to_convergence() {
        Ok(()) => {
            let m = e.metrics().unwrap();
            println!(
                "deg {deg} seed {seed}: P_f={} conv={} resv/link={:.2} grt={}",
                m.final_period, m.convergence_slots, m.resv_per_link_mean, m.grt_count
            );
        }
        Err(err) => println!("deg {deg} seed {seed}: ERR {err:?}"),
    }
}
