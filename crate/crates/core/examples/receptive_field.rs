//! Input sampling locations behind one unit of the last deformable layer,
//! two convolution levels deep, written as `layer,tap,row,col` CSV.
//!
//! `cargo run --release --example receptive_field -- [checkpoint] > trace.csv`

use dfcr::data::{render_sample, Distortion};
use dfcr::model::{Model, ModelConfig};
use dfcr::nn::{trace_sampling_locations, write_trace_csv, TraceLayer, TraceUnit};

fn main() -> dfcr::Result<()> {
    let mut model = match std::env::args().nth(1) {
        Some(p) => Model::<f32>::load(p)?,
        None => Model::<f32>::new(ModelConfig::default().with_toy_widths())?,
    };
    let sample = render_sample("8675309", Distortion::Curved, 3, model.config().input_size)?;
    let stack = model.trace_stack(&sample.image)?;
    let target = *model.config().deformable_set.iter().next_back().unwrap_or(&5);
    let (layer, (h, w)) = stack
        .iter()
        .enumerate()
        .find_map(|(i, l)| match l {
            TraceLayer::Conv { id, out_extent, .. } if *id == target => Some((i, *out_extent)),
            _ => None,
        })
        .expect("layer present");
    let unit = TraceUnit { layer, channel: 0, row: h / 2, col: w / 2 };
    let points = trace_sampling_locations(&stack, unit, 2)?;
    eprintln!("conv{target} unit ({}, {}) of {h}x{w}: {} sampling locations", unit.row, unit.col, points.len());
    write_trace_csv(&mut std::io::stdout().lock(), &points)?;
    Ok(())
}
