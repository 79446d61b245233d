//! Random masks, the three target kinds and hybrid blending.
//!
//!     cargo run --example masking_and_targets

use tapmim::data::{synthesize, SyntheticSpec};
use tapmim::masking::{sample_rng, MaskStrategy, RandomMasking};
use tapmim::model::patchify;
use tapmim::targets::{blend, hog_target, pixel_target, progressive_alphas};

fn main() -> tapmim::Result<()> {
    let strategy = RandomMasking { ratio: 0.75 };
    let plan = strategy.sample(196, &mut sample_rng(0, 0, 0))?;
    println!("224px / 16px patches: {} masked, {} visible", plan.masked().len(), plan.visible().len());

    let data = synthesize(&SyntheticSpec {
        n_samples: 4,
        image_size: 16,
        n_classes: 4,
        seed: 1,
    })?;
    let images = data.images();
    let raw = pixel_target(images, 4, false)?;
    let norm = pixel_target(images, 4, true)?;
    let hog = hog_target(images, 4)?;
    println!("pixel {:?}, normalised {:?}, hog {:?}", raw.shape(), norm.shape(), hog.shape());

    let plan = strategy.sample(16, &mut sample_rng(0, 0, 1))?;
    println!("16 patches, {}", plan.to_text().trim_end().replace('\n', "; "));

    // stand-in reconstruction: the inverted image
    let flipped = images.map(|v| 1.0 - v);
    for alpha in progressive_alphas(3) {
        let t = blend(images, &flipped, alpha)?;
        let p = patchify(&t, 4)?;
        println!("alpha {alpha:.3}: first target value {:.4}", p.data()[0]);
    }
    Ok(())
}
