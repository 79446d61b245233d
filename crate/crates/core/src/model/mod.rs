//! Vision Transformer encoder with intermediate taps, and one lightweight
//! Transformer decoder per tap plus the primary decoder on the final block.

mod config;
mod forward;
mod params;

pub use config::{default_decoder_dim, default_taps, parse_taps, DecoderId, ModelConfig, LN_EPS};
pub use forward::{
    all_visible, decoder_forward, encode_full, encoder_forward, head_forward, patchify, unpatchify, Binder,
    EncoderOutput,
};
pub use params::{
    decoder_prefix, encoder_block_prefix, exempt_from_decay, init_head, init_params, init_tensor, param_specs,
    reinit_last_k, Init, Params, INIT_STD,
};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::masking::{gather_visible, sample_mask, MaskPlan};
    use crate::numerics::{Tape, Tensor};

    fn rand_images(b: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 3, size, size], |_| rng.gen_range(0.0..1.0))
    }

    fn tiny() -> ModelConfig {
        ModelConfig::small(16, 4, 16, 2, 2).with_taps(vec![1])
    }

    #[test]
    fn patchify_geometry_and_inverse() {
        let img = rand_images(2, 32, 0);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[2, 16, 192]);
        assert!(unpatchify(&p, 8, 3).unwrap().bit_eq(&img));

        let big = Tensor::zeros(&[1, 3, 224, 224]);
        assert_eq!(patchify(&big, 16).unwrap().shape(), &[1, 196, 768]);
        assert!(patchify(&Tensor::zeros(&[1, 3, 30, 30]), 8).is_err());
    }

    #[test]
    fn patch_layout_is_raster_and_channel_major() {
        // 1 image, 2 channels, 4x4, patch 2: pixel value encodes (c, y, x)
        let img = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f32);
        let p = patchify(&img, 2).unwrap();
        // patch 1 = top-right block; channel 0 rows y=0,1 x=2,3 then channel 1
        assert_eq!(p.row(1), &[2., 3., 6., 7., 18., 19., 22., 23.]);
        // patch 2 = bottom-left block
        assert_eq!(&p.row(2)[..4], &[8., 9., 12., 13.]);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c = ModelConfig::vit_base();
        let (d, n, pd, h) = (768usize, 196usize, 768usize, 3072usize);
        let (dd, dh, t) = (512usize, 2048usize, 768usize);
        let block = |d: usize, h: usize| 4 * (d * d + d) + 4 * d + (d * h + h) + (h * d + d);
        let encoder = pd * d + d + n * d + 12 * block(d, h) + 2 * d;
        let decoder = d * dd + dd + dd + n * dd + 4 * block(dd, dh) + 2 * dd + dd * t + t;
        let expected = encoder + 4 * decoder;
        let counted: usize = param_specs(&c).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        assert_eq!(counted, expected);
        // encoder alone: ViT-B/16 without class token or head
        assert_eq!(encoder, 85_797_120);
    }

    fn encode_masked(params: &Params, c: &ModelConfig, images: &Tensor, plans: &[MaskPlan], analysis: bool) -> (Tape, EncoderOutput) {
        let patches = patchify(images, c.patch_size).unwrap();
        let vis = gather_visible(&patches, plans).unwrap();
        let idx: Vec<Vec<usize>> = plans.iter().map(|p| p.visible().to_vec()).collect();
        let mut tape = Tape::new();
        let mut b = Binder::new(params);
        let out = encoder_forward(&mut tape, &mut b, c, &vis, &idx, analysis).unwrap();
        (tape, out)
    }

    fn plans(c: &ModelConfig, b: usize, seed: u64) -> Vec<MaskPlan> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b).map(|_| sample_mask(c.n_patches(), c.mask_ratio, &mut rng).unwrap()).collect()
    }

    #[test]
    fn encoder_structure() {
        let c = tiny();
        let p = init_params(&c, 0).unwrap();
        let imgs = rand_images(2, 16, 1);
        let pl = plans(&c, 2, 2);
        let (tape, out) = encode_masked(&p, &c, &imgs, &pl, true);
        assert_eq!(out.tap_tokens.len(), 1);
        let tap = tape.value(out.tap_tokens[&1]);
        assert_eq!(tap.shape(), &[2 * 4, 16]);
        assert!(!tap.bit_eq(tape.value(out.final_tokens)));
        assert_eq!(out.attn_probs.len(), 2);
        for a in &out.attn_probs {
            assert_eq!(a.shape(), &[2, 2, 4, 4]);
            for r in 0..a.rows() {
                let s: f32 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() <= 1e-5);
            }
        }
        let (_, quiet) = encode_masked(&p, &c, &imgs, &pl, false);
        assert!(quiet.attn_probs.is_empty());
    }

    #[test]
    fn zeroed_output_projections_make_blocks_identity() {
        let c = ModelConfig::small(16, 4, 16, 3, 2).with_taps(vec![1, 2]);
        let mut p = init_params(&c, 0).unwrap();
        for i in 1..=3 {
            for n in ["attn.wo", "attn.bo", "mlp.w2", "mlp.b2"] {
                let t = p.get_mut(&format!("encoder.block{i}.{n}")).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let imgs = rand_images(1, 16, 3);
        let pl = plans(&c, 1, 4);
        let (tape, out) = encode_masked(&p, &c, &imgs, &pl, false);
        // embedding + positional signal, computed independently
        let patches = gather_visible(&patchify(&imgs, 4).unwrap(), &pl).unwrap();
        let w = p.get("encoder.patch_embed.w").unwrap();
        let pos = p.get("encoder.pos_embed").unwrap();
        let mut expected = vec![0.0f32; 4 * 16];
        for t in 0..4 {
            for j in 0..16 {
                let mut acc = 0.0;
                for k in 0..48 {
                    acc += patches.row(t)[k] * w.row(k)[j];
                }
                expected[t * 16 + j] = acc + pos.row(pl[0].visible()[t])[j];
            }
        }
        for i in [1, 2] {
            let tap = tape.value(out.tap_tokens[&i]);
            let diff = tap.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-6, "tap {i}: {diff}");
        }
    }

    #[test]
    fn later_taps_depend_on_earlier_blocks() {
        let c = ModelConfig::small(16, 4, 16, 3, 2).with_taps(vec![1, 2]);
        let p = init_params(&c, 0).unwrap();
        let imgs = rand_images(1, 16, 5);
        let pl = plans(&c, 1, 6);
        let (t0, o0) = encode_masked(&p, &c, &imgs, &pl, false);
        let mut q = p.clone();
        q.get_mut("encoder.block1.mlp.w1").unwrap().data_mut()[0] += 0.5;
        let (t1, o1) = encode_masked(&q, &c, &imgs, &pl, false);
        assert!(!t0.value(o0.tap_tokens[&2]).bit_eq(t1.value(o1.tap_tokens[&2])));
    }

    fn decode(p: &Params, c: &ModelConfig, id: DecoderId, tokens: &Tensor, pl: &[MaskPlan]) -> Tensor {
        let mut tape = Tape::new();
        let mut b = Binder::new(p);
        let x = tape.constant(tokens.clone());
        let y = decoder_forward(&mut tape, &mut b, c, id, x, pl).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn decoder_shapes_and_independence() {
        let c = ModelConfig::small(8, 4, 16, 3, 2).with_taps(vec![1, 2]);
        let p = init_params(&c, 0).unwrap();
        let pl = vec![MaskPlan::from_visible(4, vec![2], 0.75).unwrap(); 3];
        let tokens = Tensor::from_fn(&[3, 16], |i| (i as f32 * 0.37).sin());
        let a = decode(&p, &c, DecoderId::Tap(1), &tokens, &pl);
        let b = decode(&p, &c, DecoderId::Tap(2), &tokens, &pl);
        assert_eq!(a.shape(), &[3, 4, 48]);
        assert!(!a.bit_eq(&b));

        let mut shared = c.clone();
        shared.shared_decoder = true;
        let p = init_params(&shared, 0).unwrap();
        let a = decode(&p, &shared, DecoderId::Tap(1), &tokens, &pl);
        let b = decode(&p, &shared, DecoderId::Tap(2), &tokens, &pl);
        assert!(a.bit_eq(&b));

        let mut tape = Tape::new();
        let mut bind = Binder::new(&p);
        let x = tape.constant(tokens);
        assert!(decoder_forward(&mut tape, &mut bind, &shared, DecoderId::Tap(3), x, &pl).is_err());
    }

    #[test]
    fn tap_decoder_loss_has_no_gradient_on_other_decoders() {
        let c = ModelConfig::small(8, 4, 16, 3, 2).with_taps(vec![1, 2]);
        let p = init_params(&c, 0).unwrap();
        let pl = vec![MaskPlan::from_visible(4, vec![0], 0.75).unwrap(); 2];
        let mut tape = Tape::new();
        let mut b = Binder::new(&p);
        let x = tape.constant(Tensor::from_fn(&[2, 16], |i| i as f32 * 0.01));
        let y = decoder_forward(&mut tape, &mut b, &c, DecoderId::Tap(1), x, &pl).unwrap();
        // make sure the other decoder is bound on the same tape
        let _ = decoder_forward(&mut tape, &mut b, &c, DecoderId::Tap(2), x, &pl).unwrap();
        let loss = tape.mean(y).unwrap();
        let g = tape.backward(loss).unwrap();
        for (name, &v) in b.bound() {
            let grad = g.get_or_zeros(v);
            if name.starts_with("decoder.tap2.") {
                assert!(grad.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        let w = b.bound().find(|(n, _)| n.as_str() == "decoder.tap1.pred.w").map(|(_, &v)| v).unwrap();
        assert!(g.get(w).unwrap().data().iter().any(|&x| x != 0.0));
    }
}
