//! Linear CKA against a brute-force HSIC computation, and its invariances.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapmim::analysis::{cka_profile, cross_cka, head_similarity, linear_cka};
use tapmim::model::{init_params, ModelConfig};
use tapmim::numerics::Tensor;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}

/// HSIC with explicit n x n Gram and centring matrices.
fn hsic(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.rows();
    let gram = |t: &Tensor| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| t.row(i).iter().zip(t.row(j)).map(|(a, b)| *a as f64 * *b as f64).sum()).collect())
            .collect()
    };
    let h: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64).collect())
        .collect();
    let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
    };
    let khlh = mul(&mul(&mul(&gram(x), &h), &gram(y)), &h);
    (0..n).map(|i| khlh[i][i]).sum::<f64>() / ((n - 1) * (n - 1)) as f64
}

fn oracle(x: &Tensor, y: &Tensor) -> f64 {
    hsic(x, y) / (hsic(x, x) * hsic(y, y)).sqrt()
}

#[test]
fn matches_brute_force_hsic_on_50_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for k in 0..50 {
        let x = random(8, 5, &mut rng);
        let y = random(8, 5, &mut rng);
        let got = linear_cka(&x, &y).unwrap();
        let want = oracle(&x, &y);
        assert!((got - want).abs() <= 1e-5, "pair {k}: {got} vs {want}");
    }
}

#[test]
fn self_similarity_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(10, 6, &mut rng);
    assert_eq!(linear_cka(&x, &x).unwrap(), 1.0);
}

/// Random orthogonal matrix by Gram-Schmidt in f64.
fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-3 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

fn rotate(x: &Tensor, q: &[Vec<f64>]) -> Tensor {
    let d = x.last_dim();
    Tensor::from_fn(&[x.rows(), d], |i| {
        let (r, c) = (i / d, i % d);
        (0..d).map(|k| x.row(r)[k] as f64 * q[k][c]).sum::<f64>() as f32
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(9, 4, &mut rng);
        let y = random(9, 7, &mut rng);
        let (a, b) = (linear_cka(&x, &y).unwrap(), linear_cka(&y, &x).unwrap());
        prop_assert!((a - b).abs() <= 1e-6);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&a));
    }

    #[test]
    fn invariant_to_rotation_and_scale(seed in any::<u64>(), scale in prop_oneof![-50.0f32..-0.05, 0.05f32..50.0]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(12, 5, &mut rng);
        let y = random(12, 6, &mut rng);
        let base = linear_cka(&x, &y).unwrap();
        let q = orthogonal(5, &mut rng);
        let rotated = linear_cka(&rotate(&x, &q), &y).unwrap();
        let scaled = linear_cka(&x, &y.map(|v| v * scale)).unwrap();
        prop_assert!((base - rotated).abs() <= 1e-5, "{} vs {}", base, rotated);
        prop_assert!((base - scaled).abs() <= 1e-5, "{} vs {}", base, scaled);
    }
}

fn images(n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    Tensor::from_fn(&[n, 3, 16, 16], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn profile_ends_at_one_and_cross_model_agrees() {
    let c = ModelConfig::small(16, 4, 32, 4, 2);
    let p = init_params(&c, 1).unwrap();
    let imgs = images(12);
    let prof = cka_profile(&p, &c, &imgs).unwrap();
    assert_eq!(prof.len(), 4);
    assert_eq!(prof.last().unwrap().1, 1.0);

    // same model on both sides: the diagonal layer is exactly similar
    let cross = cross_cka((&p, &c), (&p, &c), 2, &imgs).unwrap();
    assert_eq!(cross[1].1, 1.0);
    let best = cross.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    assert_eq!(best, 2);

    // independent initialisations never coincide
    let q = init_params(&c, 2).unwrap();
    for (_, s) in cross_cka((&p, &c), (&q, &c), 4, &imgs).unwrap() {
        assert!(s < 1.0);
    }
}

#[test]
fn head_similarity_is_symmetric_with_unit_diagonal() {
    let c = ModelConfig::small(16, 4, 32, 2, 4);
    let p = init_params(&c, 3).unwrap();
    let sims = head_similarity(&p, &c, &images(6)).unwrap();
    assert_eq!(sims.len(), 2);
    for s in &sims {
        for i in 0..4 {
            assert!((s.matrix[i][i] - 1.0).abs() <= 1e-6);
            for j in 0..4 {
                assert_eq!(s.matrix[i][j], s.matrix[j][i]);
                assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s.matrix[i][j]));
            }
        }
    }

    // copying one head's query and key columns into another makes them identical
    let mut dup = p.clone();
    let dh = 8;
    for w in ["wq", "wk", "bq", "bk"] {
        let name = format!("encoder.block1.attn.{w}");
        let t = dup.get_mut(&name).unwrap();
        let cols = t.last_dim();
        let rows = t.len() / cols;
        let data = t.data_mut();
        for r in 0..rows {
            for k in 0..dh {
                data[r * cols + dh + k] = data[r * cols + k];
            }
        }
    }
    let sims = head_similarity(&dup, &c, &images(6)).unwrap();
    assert!((sims[0].matrix[0][1] - 1.0).abs() <= 1e-5, "{}", sims[0].matrix[0][1]);
}
