// Dev-only: audit a saved checkpoint against fresh eval sets.
use granusim::dict::{build_dictionary, DictMode};
use granusim::model::Network;
use granusim::probes::hard_example_audit;
use granusim::rng;
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = PathBuf::from(&args[1]);
    let master: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(42);
    let net = Network::load(&ckpt).unwrap();
    let params = net.params_snapshot.clone();
    let dict_seed = rng::derive_seed(master, rng::tag::DICT, 0, 0);
    let dict = build_dictionary(&params, DictMode::StandardBasis, dict_seed).unwrap();
    let audit = hard_example_audit(
        &net,
        &dict,
        &params,
        8,
        rng::derive_seed(master, rng::tag::AUDIT, net.variant as u64, 0),
    )
    .unwrap();
    println!("{}", serde_json::to_string_pretty(&audit).unwrap());
}
