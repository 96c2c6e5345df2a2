use std::time::Instant;
use steerlab::model::{tape_logits, ModelConfig, ModelVars};
use steerlab::rng::stream;
use steerlab::tape::Tape;
use steerlab::tensor::Tensor;
use rand::Rng;

fn main() {
    let cfg = ModelConfig::default();
    let model = steerlab::model::FrozenModel::random(cfg, 1).unwrap();
    let weights = model.weights().clone();
    let mut rng = stream(1, "bench", &[]);
    let tokens: Vec<usize> = (0..15).map(|_| rng.gen::<usize>() % 64).collect();
    let rows: Vec<usize> = (10..14).collect();
    let targets: Vec<usize> = (0..4).map(|_| rng.gen::<usize>() % 64).collect();

    for round in 0..3 {
        let reps = 30;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let vars = ModelVars::leaves(&mut tape, &weights);
            let logits = tape_logits(&mut tape, &vars, &cfg, &tokens).unwrap();
            let picked = tape.gather_rows(logits, &rows).unwrap();
            let loss = tape.cross_entropy_mean(picked, &targets).unwrap();
            let mut bw = tape.backward(loss).unwrap();
            let _g: Vec<Vec<f64>> = vars.all().iter().map(|&v| bw.take_grad(v, &tape)).collect();
        }
        println!("round {round}: fwd+bwd+take {:.1}ms/seq", t0.elapsed().as_secs_f64()/reps as f64*1e3);
    }
}
