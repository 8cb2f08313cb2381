// Temporary step timing probe.
use puppetflow::checkpoint::TrainState;
use puppetflow::config::RunConfig;
use puppetflow::dataset::{make_dataset, LoadedDataset};
use puppetflow::train::train_step;

#[test]
#[ignore]
fn time_default_step() {
    let dir = std::env::temp_dir().join(format!("pf_bench_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    make_dataset(2, 8, 64, &dir.join("data"), 5).unwrap();
    let ds = LoadedDataset::load(&dir.join("data/manifest.json")).unwrap();
    let cfg = RunConfig { steps: 6, ..RunConfig::default() };
    let mut state = TrainState::new(cfg).unwrap();
    // warmup
    train_step(&mut state, &ds).unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..5 {
        train_step(&mut state, &ds).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / 5.0;
    eprintln!("mean step time: {:.3}s -> 5000 steps ~ {:.1} min", dt, dt * 5000.0 / 60.0);
    std::fs::remove_dir_all(&dir).unwrap();
}
