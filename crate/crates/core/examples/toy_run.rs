//! Trains one mode of the default toy configuration and prints each epoch.
//!
//! cargo run --release -p tpskg --example toy_run -- full 0

use tpskg::{generate_dataset, Mode, Model, RunConfig, Trainer};

fn main() -> tpskg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode: Mode = args.get(1).map_or("full", String::as_str).parse()?;
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = RunConfig {
        seed,
        ..RunConfig::toy(mode)
    };
    let (train, test) = generate_dataset(&cfg.dataset())?;
    let mut trainer = Trainer::new(Model::<f32>::new(&cfg.model(), mode)?, cfg.train())?;
    trainer.threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    trainer.record_wall_time = true;
    trainer.run(&train, &test, |_, m| {
        println!("{}", serde_json::to_string(m).expect("metrics serialize"));
        Ok(())
    })?;
    Ok(())
}
