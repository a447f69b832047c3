//! Deformable convolution next to a standard one: zero offsets reproduce the
//! rigid output, a constant offset of one row shifts the receptive field,
//! and fractional offsets blend neighbouring pixels bilinearly.

use dfcr::nn::{bilinear_sample, conv2d, deform_conv2d, make_offset_branch, ConvGeom, ConvKernel};
use dfcr::Tensor;

fn main() -> dfcr::Result<()> {
    // 1x1x5x5 ramp image and a 3x3 box filter
    let x = Tensor::from_data(&[1, 1, 5, 5], (0..25).map(|v| v as f64).collect())?;
    let mut k = ConvKernel::<f64>::zeros(1, 1, ConvGeom::same3());
    k.weight = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);

    let branch = make_offset_branch(&k);
    let off = conv2d(&x, &branch)?;
    let rigid = conv2d(&x, &k)?;
    let zero = deform_conv2d(&x, &k, &off)?;
    println!("offset field {:?}, max |deform - conv| with zero offsets: {:.1e}", off.shape(), zero.max_abs_diff(&rigid));

    let mut shift = Tensor::zeros(off.shape());
    for t in 0..9 {
        let plane = &mut shift.data_mut()[2 * t * 25..(2 * t + 1) * 25];
        plane.iter_mut().for_each(|v| *v = 1.0);
    }
    let down = deform_conv2d(&x, &k, &shift)?;
    println!("center with every tap one row down: {:.3} (rigid {:.3})", down.get(&[0, 0, 2, 2]), rigid.get(&[0, 0, 2, 2]));

    let plane = Tensor::from_data(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0])?;
    for p in [(0.0, 0.0), (0.5, 0.5), (0.25, 1.0), (1.5, 0.0)] {
        println!("bilinear at {p:?} = {:.3}", bilinear_sample(&plane, p)?.data()[0]);
    }
    Ok(())
}
