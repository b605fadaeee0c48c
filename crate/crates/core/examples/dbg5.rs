use pcp_tdma::simengine::{Engine, InitialPeriodPolicy, SimConfig};
use pcp_tdma::topology::generate_fixed_degree;
fn main() {
    for deg in [5u32, 15] {
        let mut convs = Vec::new();
        let mut resv = Vec::new();
        let mut grts = Vec::new();
        let mut pfs = Vec::new();
        for seed in 0..20u64 {
            let topo = generate_fixed_degree(50, deg, seed).unwrap();
            let mut cfg = SimConfig::new(topo, InitialPeriodPolicy::ThirdMaxDegreePlusFive, seed);
            cfg.part2 = false;
            let mut e = Engine::new(cfg).unwrap();
            match e.run_to_convergence() {
                Ok(()) => {
                    let m = e.metrics().unwrap();
                    convs.push(m.part1_convergence_slots as f64);
                    resv.push(m.part1_resv_per_link_mean);
                    grts.push(m.part1_grt_count as f64);
                    pfs.push(m.final_period);
                }
                Err(err) => println!("deg {deg} seed {seed}: ERR {err:?}"),
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "deg {deg}: part1_conv mean={:.1} resv/link mean={:.2} grt mean={:.0} P_f={:?}",
            mean(&convs), mean(&resv), mean(&grts), pfs
        );
    }
}
