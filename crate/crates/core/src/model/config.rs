use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Architecture hyperparameters of the encoder and its decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f32,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    /// 1-based encoder blocks that feed an extra decoder. The final block is
    /// implicit and never listed.
    pub tap_indices: Vec<usize>,
    pub mask_ratio: f32,
    /// Output width of every decoder.
    pub target_dim: usize,
    /// One decoder parameter set serves every tap and the final block.
    pub shared_decoder: bool,
    /// Pixel predictions are per-patch standardised rather than raw values.
    pub norm_pix_targets: bool,
}

pub const LN_EPS: f32 = 1e-6;

impl ModelConfig {
    /// Small configuration with the default decoder sizing and tap rule;
    /// decoders predict raw patches.
    pub fn small(image_size: usize, patch_size: usize, embed_dim: usize, depth: usize, num_heads: usize) -> Self {
        let decoder_heads = num_heads;
        let decoder_dim = default_decoder_dim(embed_dim, decoder_heads);
        ModelConfig {
            image_size,
            patch_size,
            in_chans: 3,
            embed_dim,
            depth,
            num_heads,
            mlp_ratio: 4.0,
            decoder_dim,
            decoder_depth: 4,
            decoder_heads,
            tap_indices: default_taps(depth),
            mask_ratio: 0.75,
            target_dim: 3 * patch_size * patch_size,
            shared_decoder: false,
            norm_pix_targets: true,
        }
    }

    /// ViT-B/16 at 224 pixels with the 6/8/10 taps and a 512-wide decoder.
    pub fn vit_base() -> Self {
        ModelConfig {
            decoder_dim: 512,
            decoder_heads: 16,
            ..Self::small(224, 16, 768, 12, 12)
        }
    }

    pub fn with_taps(mut self, taps: Vec<usize>) -> Self {
        self.tap_indices = taps;
        self
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_chans * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f32 * self.mlp_ratio).round() as usize
    }

    pub fn decoder_mlp_hidden(&self) -> usize {
        (self.decoder_dim as f32 * self.mlp_ratio).round() as usize
    }

    /// Decoder ids in forward order: taps ascending, then the final block.
    pub fn decoder_ids(&self) -> Vec<DecoderId> {
        self.tap_indices
            .iter()
            .map(|&t| DecoderId::Tap(t))
            .chain(std::iter::once(DecoderId::Final))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.in_chans == 0 {
            return fail("depth, embed_dim and in_chans must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return fail(format!(
                "decoder_dim {} is not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.decoder_depth == 0 || self.target_dim == 0 {
            return fail("decoder_depth and target_dim must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return fail(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail(format!("mask_ratio must lie in (0,1), got {}", self.mask_ratio));
        }
        for w in self.tap_indices.windows(2) {
            if w[0] >= w[1] {
                return fail(format!("tap_indices must be strictly increasing: {:?}", self.tap_indices));
            }
        }
        if let Some(&t) = self.tap_indices.iter().find(|&&t| t == 0 || t >= self.depth) {
            return fail(format!("tap index {t} must lie in 1..{}", self.depth));
        }
        Ok(())
    }

    /// `key = value` lines, the same keys accepted by [`ModelConfig::set`].
    pub fn to_text(&self) -> String {
        let taps = self.tap_indices.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "image_size = {}\npatch_size = {}\nin_chans = {}\nembed_dim = {}\ndepth = {}\n\
             num_heads = {}\nmlp_ratio = {}\ndecoder_dim = {}\ndecoder_depth = {}\n\
             decoder_heads = {}\ntaps = {}\nmask_ratio = {}\ntarget_dim = {}\n\
             shared_decoder = {}\nnorm_pix_targets = {}\n",
            self.image_size,
            self.patch_size,
            self.in_chans,
            self.embed_dim,
            self.depth,
            self.num_heads,
            self.mlp_ratio,
            self.decoder_dim,
            self.decoder_depth,
            self.decoder_heads,
            taps,
            self.mask_ratio,
            self.target_dim,
            self.shared_decoder,
            self.norm_pix_targets,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::small(32, 8, 64, 4, 4);
        let mut seen = 0usize;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            if !cfg.set(k.trim(), v.trim()).map_err(|e| Error::ConfigLine { line: i + 1, msg: e.to_string() })? {
                return Err(Error::ConfigLine {
                    line: i + 1,
                    msg: format!("unknown model key `{}`", k.trim()),
                });
            }
            seen += 1;
        }
        if seen < 15 {
            return Err(Error::Config(format!("model config lists {seen} of 15 keys")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from text. Returns `Ok(false)` when the key is not a
    /// model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "in_chans" => self.in_chans = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "num_heads" => self.num_heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "decoder_dim" => self.decoder_dim = num(key, value)?,
            "decoder_depth" => self.decoder_depth = num(key, value)?,
            "decoder_heads" => self.decoder_heads = num(key, value)?,
            "taps" => self.tap_indices = parse_taps(value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "target_dim" => self.target_dim = num(key, value)?,
            "shared_decoder" => self.shared_decoder = num(key, value)?,
            "norm_pix_targets" => self.norm_pix_targets = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses `6,8,10`; empty text or `none` means no taps.
pub fn parse_taps(value: &str) -> Result<Vec<usize>> {
    let v = value.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad tap index `{s}`")))
        })
        .collect()
}

/// Half the encoder width, rounded to a multiple of the decoder head count.
pub fn default_decoder_dim(embed_dim: usize, heads: usize) -> usize {
    let half = embed_dim as f64 / 2.0;
    let units = (half / heads as f64).round().max(1.0) as usize;
    units * heads
}

/// Taps at `depth * {1/2, 2/3, 5/6}` rounded to the nearest block, dropping
/// duplicates and anything outside `1..depth`. Depth 12 gives 6, 8, 10.
pub fn default_taps(depth: usize) -> Vec<usize> {
    let mut taps: Vec<usize> = [1.0 / 2.0, 2.0 / 3.0, 5.0 / 6.0]
        .iter()
        .map(|f| (depth as f64 * f).round() as usize)
        .filter(|&t| t >= 1 && t < depth)
        .collect();
    taps.dedup();
    taps
}

/// Identifies one decoder: an intermediate tap or the final block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DecoderId {
    Tap(usize),
    Final,
}

impl fmt::Display for DecoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderId::Tap(i) => write!(f, "tap{i}"),
            DecoderId::Final => write!(f, "final"),
        }
    }
}

impl FromStr for DecoderId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "final" {
            return Ok(DecoderId::Final);
        }
        s.strip_prefix("tap")
            .and_then(|n| n.parse().ok())
            .map(DecoderId::Tap)
            .ok_or_else(|| Error::Invalid(format!("unknown decoder id `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tap_rule() {
        assert_eq!(default_taps(12), vec![6, 8, 10]);
        assert_eq!(default_taps(4), vec![2, 3]);
        assert_eq!(default_taps(8), vec![4, 5, 7]);
        assert_eq!(default_taps(1), Vec::<usize>::new());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::small(32, 8, 64, 4, 4).validate().is_ok());
        assert!(ModelConfig::small(30, 8, 64, 4, 4).validate().is_err());
        assert!(ModelConfig::small(32, 8, 64, 4, 3).validate().is_err());
        assert!(ModelConfig::small(32, 8, 64, 4, 4).with_taps(vec![3, 2]).validate().is_err());
        assert!(ModelConfig::small(32, 8, 64, 4, 4).with_taps(vec![4]).validate().is_err());
        assert!(ModelConfig::small(32, 8, 64, 4, 4).with_taps(vec![0]).validate().is_err());
        assert_eq!(ModelConfig::vit_base().decoder_depth, 4);
        assert_eq!(ModelConfig::vit_base().tap_indices, vec![6, 8, 10]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::small(16, 4, 16, 2, 2).with_taps(vec![1]);
        c.shared_decoder = true;
        c.mlp_ratio = 2.5;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        let bad = c.to_text().replace("depth = 2", "depht = 2");
        assert!(matches!(ModelConfig::from_text(&bad), Err(Error::ConfigLine { line: 5, .. })));
    }

    #[test]
    fn decoder_id_text() {
        for id in [DecoderId::Tap(6), DecoderId::Final] {
            assert_eq!(id.to_string().parse::<DecoderId>().unwrap(), id);
        }
        assert!("dec".parse::<DecoderId>().is_err());
    }
}
