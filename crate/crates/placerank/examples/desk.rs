//! Runs the synthetic benchmark for the seeds given on the command line and
//! prints one JSON document per seed.
//!
//! `cargo run --release --example desk -- 1 2 3`

use placerank::desk::{run_seed, Variant};
use placerank::Config;

fn main() -> placerank::Result<()> {
    let config = match std::env::var("PLACERANK_CONFIG") {
        Ok(p) => Config::load(p.as_ref())?,
        Err(_) => Config::desk(),
    };
    if std::env::args().nth(1).as_deref() == Some("--print-config") {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let variants = match std::env::var("DESK_VARIANTS").as_deref() {
        Ok("full") => vec![Variant::Full],
        _ => Variant::ALL.to_vec(),
    };
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    for seed in if seeds.is_empty() { vec![config.seed] } else { seeds } {
        let run = run_seed(&config, seed, &variants, 1, &mut |name, l| {
            eprintln!(
                "seed {seed} {name} {} epoch {} triplet {:.4} ce {:.4} val {:?}",
                l.stage.as_str(),
                l.epoch,
                l.triplet_loss,
                l.ce_loss,
                l.recall.recall
            )
        })?;
        println!("{}", serde_json::to_string(&run)?);
    }
    Ok(())
}
