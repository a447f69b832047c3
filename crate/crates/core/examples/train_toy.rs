//! Train the narrow baseline on a small synthetic set and report per-tag
//! accuracy. Pass a step count to train longer.
//!
//! `cargo run --release --example train_toy -- 600`

use dfcr::data::{synthesize, Dataset, DatasetSpec};
use dfcr::model::{Model, ModelConfig};
use dfcr::train::{evaluate, train, TrainConfig, TrainOptions};

fn main() -> dfcr::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = ModelConfig::baseline().with_toy_widths();
    let charset = cfg.charset()?;
    let spec = |n, seed| DatasetSpec { length: (3, 8), ..DatasetSpec::balanced(n, seed) };
    let train_set = Dataset::from_samples(&synthesize(&spec(1500, 1))?, cfg.input_size, 1, &charset)?;
    let test_set = Dataset::from_samples(&synthesize(&spec(300, 2))?, cfg.input_size, 1, &charset)?;

    let mut model = Model::<f32>::new(cfg)?;
    println!("{} parameters, {} frames per image", model.num_params(), model.frames());
    let tc = TrainConfig { steps, eval_every: steps / 3, ..TrainConfig::toy() };
    let opts = TrainOptions { eval_set: Some(&test_set), ..Default::default() };
    let report = train(&mut model, &train_set, &tc, &opts)?;
    for (step, eval) in &report.evals {
        println!("step {step}: overall {:.1}%", 100.0 * eval.total.accuracy());
    }
    print!("{}", evaluate(&mut model, &test_set, 64)?);
    Ok(())
}
