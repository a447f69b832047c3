//! CTC on a small problem: forward-backward loss against brute-force path
//! enumeration, the gradient with respect to the logits, and greedy decoding.

use dfcr::ctc::{ctc_brute_force, ctc_loss, ctc_loss_with_grad, greedy_decode, oracle_sweep, Charset, OracleLimits};
use dfcr::Tensor;

fn main() -> dfcr::Result<()> {
    let charset = Charset::new("ab", false)?;
    let label = charset.encode("abb")?;
    let logits = Tensor::from_data(
        &[6, 3],
        vec![
            0.1, 2.0, -1.0, //
            1.5, 0.3, 0.0, //
            -0.5, 0.2, 1.8, //
            2.0, -1.0, 0.1, //
            0.0, 0.1, 2.2, //
            1.0, 0.0, 0.3,
        ],
    )?;
    println!("label {:?} needs at least {} frames", label.indices(), label.min_frames());
    println!("forward-backward loss {:.12}", ctc_loss(&logits, &label)?);
    println!("brute-force loss      {:.12}", ctc_brute_force(&logits, &label)?);

    let (_, grad) = ctc_loss_with_grad(&logits, &label)?;
    for t in 0..6 {
        let row: Vec<String> = grad.data()[t * 3..t * 3 + 3].iter().map(|g| format!("{g:+.3}")).collect();
        println!("d loss / d logits[{t}] = [{}]", row.join(", "));
    }
    println!("greedy decode: {:?}", charset.decode(&greedy_decode(&logits)?));

    let sweep = oracle_sweep(200, 1, OracleLimits::default())?;
    println!("{} random instances, max disagreement {:.1e}", sweep.instances, sweep.max_abs_diff);
    Ok(())
}
