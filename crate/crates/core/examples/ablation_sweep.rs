//! Both ablation grids on a reduced budget, printed as CSV tables.
//!
//! `cargo run --release --example ablation_sweep -- 100`

use dfcr::data::DatasetSpec;
use dfcr::model::ModelConfig;
use dfcr::train::{ablation_csv, component_grid, placement_grid, run_ablation, AblationData, TrainConfig};

fn main() -> dfcr::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let spec = |n, seed| DatasetSpec { length: (3, 8), ..DatasetSpec::balanced(n, seed) };
    let mut data = AblationData::new(&spec(800, 1), &spec(150, 2))?;
    let base = ModelConfig::default().with_toy_widths();
    let tc = TrainConfig { steps, ..TrainConfig::toy() };
    for (name, rows) in [("placement", placement_grid(&base)), ("component", component_grid(&base))] {
        println!("# {name}");
        print!("{}", ablation_csv(&run_ablation(&rows, &mut data, &tc, true)));
    }
    Ok(())
}
