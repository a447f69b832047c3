//! Save a model, load it back (also widened to f64) and confirm the
//! predictions are unchanged.

use dfcr::model::{Model, ModelConfig};
use dfcr::nn::Mode;
use dfcr::Tensor;

fn main() -> dfcr::Result<()> {
    let dir = std::env::temp_dir().join("dfcr-checkpoint-example");
    let path = dir.join("model.ckpt");
    let mut model = Model::<f32>::new(ModelConfig::default().with_toy_widths())?;
    let image = Tensor::full(&model.input_shape(1), 0.5f32);
    model.logits(&image, Mode::Train)?;
    model.set_step(42);
    model.save(&path)?;
    println!("wrote {} ({} bytes, {} parameters)", path.display(), std::fs::metadata(&path)?.len(), model.num_params());

    let mut back = Model::<f32>::load(&path)?;
    let same = back.logits(&image, Mode::Eval)? == model.logits(&image, Mode::Eval)?;
    println!("step {} restored, identical logits: {same}", back.step());

    let mut wide = Model::<f64>::load(&path)?;
    let wide_image = Tensor::full(&wide.input_shape(1), 0.5f64);
    let a = wide.logits(&wide_image, Mode::Eval)?;
    let b = model.logits(&image, Mode::Eval)?;
    let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - *y as f64).abs()));
    println!("f64 copy differs from f32 by at most {diff:.1e}");
    Ok(())
}
