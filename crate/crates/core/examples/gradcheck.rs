//! Finite-difference check of every differentiable primitive, then of a
//! small hand-written objective on the tape.
//!
//!     cargo run --example gradcheck

use tapmim::numerics::{grad_check, primitive_suite, Tensor};

fn main() -> tapmim::Result<()> {
    for (name, report) in primitive_suite(0)? {
        println!("{name:>14}  max rel {:.2e} over {} coords", report.max_rel_error, report.coordinates);
    }

    // softmax(x W) summed against a fixed weighting
    let x = Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin());
    let w = Tensor::from_fn(&[4, 5], |i| (i as f32 * 0.11).cos());
    let mix = Tensor::from_fn(&[3, 5], |i| i as f32 / 15.0);
    let report = grad_check(
        |tape, v| {
            let z = tape.matmul(v[0], v[1])?;
            let s = tape.softmax_rows(z)?;
            let m = tape.constant(mix.clone());
            let p = tape.mul(s, m)?;
            tape.sum(p)
        },
        &[x, w],
        8,
        1,
    )?;
    println!("custom objective: max rel {:.2e}", report.max_rel_error);
    Ok(())
}
