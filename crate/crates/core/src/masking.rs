//! Random patch masking and the row selections built on top of it.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Partition of the patch indices of one image into visible and masked sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    n_patches: usize,
    visible: Vec<usize>,
    masked: Vec<usize>,
    ratio: f32,
}

impl MaskPlan {
    /// Builds a plan from its visible set; everything else is masked.
    pub fn from_visible(n_patches: usize, mut visible: Vec<usize>, ratio: f32) -> Result<Self> {
        visible.sort_unstable();
        visible.dedup();
        if let Some(&bad) = visible.iter().find(|&&i| i >= n_patches) {
            return Err(Error::Invalid(format!(
                "patch index {bad} out of range for {n_patches} patches"
            )));
        }
        let mut is_visible = vec![false; n_patches];
        for &v in &visible {
            is_visible[v] = true;
        }
        let masked: Vec<usize> = (0..n_patches).filter(|&i| !is_visible[i]).collect();
        if visible.is_empty() || masked.is_empty() {
            return Err(Error::Invalid(format!(
                "mask plan needs at least one visible and one masked patch \
                 ({} visible of {n_patches})",
                visible.len()
            )));
        }
        Ok(MaskPlan {
            n_patches,
            visible,
            masked,
            ratio,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn ratio(&self) -> f32 {
        self.ratio
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    /// Two-line text form: `visible: ...` and `masked: ...`.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        format!("visible: {}\nmasked: {}\n", join(&self.visible), join(&self.masked))
    }

    pub fn from_text(text: &str, ratio: f32) -> Result<Self> {
        let mut visible = None;
        let mut masked = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::Invalid(format!("malformed mask line `{line}`")))?;
            let idx = rest
                .split_whitespace()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Invalid(format!("bad index in `{line}`: {e}")))?;
            match key.trim() {
                "visible" => visible = Some(idx),
                "masked" => masked = Some(idx),
                other => return Err(Error::Invalid(format!("unknown mask field `{other}`"))),
            }
        }
        let (visible, masked) = match (visible, masked) {
            (Some(v), Some(m)) => (v, m),
            _ => return Err(Error::Invalid("mask text needs visible and masked lines".into())),
        };
        let n = visible.len() + masked.len();
        let plan = MaskPlan::from_visible(n, visible, ratio)?;
        if plan.masked != masked {
            return Err(Error::Invalid("visible and masked lists do not partition the patches".into()));
        }
        Ok(plan)
    }
}

/// Number of masked patches for a ratio, rounding half away from zero.
pub fn masked_count(n_patches: usize, ratio: f32) -> usize {
    (ratio as f64 * n_patches as f64).round() as usize
}

/// Uniformly random mask with `round(ratio * n)` masked patches.
pub fn sample_mask<R: Rng + ?Sized>(n_patches: usize, ratio: f32, rng: &mut R) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("mask ratio must lie in (0,1), got {ratio}")));
    }
    let n_masked = masked_count(n_patches, ratio);
    if n_masked == 0 || n_masked >= n_patches {
        return Err(Error::Invalid(format!(
            "mask ratio {ratio} on {n_patches} patches leaves an empty side"
        )));
    }
    let visible = sample(rng, n_patches, n_patches - n_masked).into_vec();
    MaskPlan::from_visible(n_patches, visible, ratio)
}

/// How masks are drawn. Only uniform random masking is provided.
pub trait MaskStrategy {
    fn sample(&self, n_patches: usize, rng: &mut ChaCha8Rng) -> Result<MaskPlan>;
}

#[derive(Clone, Copy, Debug)]
pub struct RandomMasking {
    pub ratio: f32,
}

impl MaskStrategy for RandomMasking {
    fn sample(&self, n_patches: usize, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
        sample_mask(n_patches, self.ratio, rng)
    }
}

/// splitmix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Per-sample generator for `(seed, epoch, sample_index)`.
pub fn sample_rng(seed: u64, epoch: u64, sample_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, sample_index]))
}

fn check_batch(shape: &[usize], plans: &[MaskPlan]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || shape[0] != plans.len() {
        return Err(Error::shape("mask gather", shape, &[plans.len()]));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    for p in plans {
        if p.n_patches != n {
            return Err(Error::Invalid(format!(
                "mask plan covers {} patches, tensor has {n}",
                p.n_patches
            )));
        }
    }
    Ok((b, n, d))
}

fn select_rows(plans: &[MaskPlan], n: usize, pick: impl Fn(&MaskPlan) -> &[usize]) -> Result<Vec<usize>> {
    let k = pick(&plans[0]).len();
    let mut rows = Vec::with_capacity(plans.len() * k);
    for (b, p) in plans.iter().enumerate() {
        let sel = pick(p);
        if sel.len() != k {
            return Err(Error::Invalid("mask plans in a batch must select equal counts".into()));
        }
        rows.extend(sel.iter().map(|&i| b * n + i));
    }
    Ok(rows)
}

/// Flat row indices `b * N + i` of the visible patches, in ascending order per sample.
pub fn visible_rows(plans: &[MaskPlan]) -> Result<Vec<usize>> {
    let n = plans.first().ok_or_else(|| Error::Invalid("empty batch".into()))?.n_patches;
    select_rows(plans, n, |p| p.visible())
}

/// Flat row indices `b * N + i` of the masked patches.
pub fn masked_rows(plans: &[MaskPlan]) -> Result<Vec<usize>> {
    let n = plans.first().ok_or_else(|| Error::Invalid("empty batch".into()))?.n_patches;
    select_rows(plans, n, |p| p.masked())
}

fn gather(t: &Tensor, plans: &[MaskPlan], pick: impl Fn(&MaskPlan) -> &[usize]) -> Result<Tensor> {
    let (b, n, d) = check_batch(t.shape(), plans)?;
    let rows = select_rows(plans, n, pick)?;
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        out.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![b, rows.len() / b, d], out)
}

/// `[B, N, D] -> [B, |visible|, D]`.
pub fn gather_visible(t: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
    gather(t, plans, |p| p.visible())
}

/// `[B, N, D] -> [B, |masked|, D]`: the masked-position selection applied to targets.
pub fn extract_masked(t: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
    gather(t, plans, |p| p.masked())
}

/// Differentiable [`gather_visible`]; `x` is `[B, N, D]` or `[B*N, D]`.
/// The result is `[B * |visible|, D]` and gradients scatter to the source rows.
pub fn gather_visible_var(tape: &mut Tape, x: Var, plans: &[MaskPlan]) -> Result<Var> {
    let rows = visible_rows(plans)?;
    let expected = plans.len() * plans[0].n_patches;
    if tape.value(x).rows() != expected {
        return Err(Error::shape("gather_visible", tape.shape(x), &[expected]));
    }
    tape.index_rows(x, rows)
}
