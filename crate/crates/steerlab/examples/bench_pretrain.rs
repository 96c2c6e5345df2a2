use std::time::Instant;
use steerlab::model::{headroom_report, train_base_model, ModelConfig, PretrainOptions};
use steerlab::tasks::default_suite;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let cfg = ModelConfig::default();
    let suite = default_suite();
    let opts = PretrainOptions { steps, batch_size: 16, log_every: 200, ..Default::default() };
    let t0 = Instant::now();
    let (model, loss) = train_base_model(&cfg, &suite, 42, &opts).unwrap();
    let train_dt = t0.elapsed().as_secs_f64();
    let report = headroom_report(&model, &suite, 100, 7, 0.10, 0.95).unwrap();
    println!("steps {} in {:.1}s ({:.3}s/step), final loss {:.4}", steps, train_dt, train_dt / steps as f64, loss);
    println!("{}", report);
    println!("pass: {}", report.pass());
}
