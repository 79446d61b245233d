//! Image datasets: a directory of PPM files with `labels.tsv`, or a
//! deterministic synthetic set of class-dependent textures.

use std::f32::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::ppm::{read_ppm, write_ppm};
use crate::masking::mix_seed;
use crate::numerics::Tensor;

pub const LABELS_FILE: &str = "labels.tsv";

/// In-memory images `[n, 3, S, S]` with optional class labels.
///
/// `ids` are the sample indices in the original collection, so subsets keep
/// addressing the right rows of a feature file.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Option<Vec<usize>>,
    ids: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::Invalid(format!("dataset images must be [n, 3, S, S], got {s:?}")));
        }
        let n = s[0];
        let n_classes = match &labels {
            Some(l) if l.len() != n => {
                return Err(Error::Invalid(format!("{} labels for {n} images", l.len())));
            }
            Some(l) => l.iter().max().map_or(0, |m| m + 1),
            None => 0,
        };
        Ok(Dataset {
            images,
            labels,
            ids: (0..n).collect(),
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// One image `[3, S, S]`.
    pub fn image(&self, i: usize) -> Tensor {
        let per = self.per_image();
        let s = self.image_size();
        Tensor::new(vec![3, s, s], self.images.data()[i * per..(i + 1) * per].to_vec()).unwrap()
    }

    fn per_image(&self) -> usize {
        self.images.len() / self.len()
    }

    /// Stacked images `[B, 3, S, S]` of the given local indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per = self.per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let s = self.image_size();
        Tensor::new(vec![indices.len(), 3, s, s], data).unwrap()
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let l = self.labels.as_ref().ok_or_else(|| Error::Config("dataset has no labels".into()))?;
        Ok(indices.iter().map(|&i| l[i]).collect())
    }

    /// Original sample ids of the given local indices.
    pub fn batch_ids(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.ids[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.batch(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            ids: self.batch_ids(indices),
            n_classes: self.n_classes,
        }
    }

    /// The first `len - tail` samples and the last `tail`.
    pub fn split_tail(&self, tail: usize) -> Result<(Dataset, Dataset)> {
        if tail == 0 || tail >= self.len() {
            return Err(Error::Config(format!("cannot hold out {tail} of {} samples", self.len())));
        }
        let cut = self.len() - tail;
        let head: Vec<usize> = (0..cut).collect();
        let rest: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head), self.subset(&rest)))
    }

    /// Writes `img_00000.ppm`, ... and `labels.tsv` (when labelled).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tsv = String::new();
        for i in 0..self.len() {
            let name = format!("img_{i:05}.ppm");
            write_ppm(&self.image(i), &dir.join(&name))?;
            if let Some(l) = &self.labels {
                writeln!(tsv, "{name}\t{}", l[i]).unwrap();
            }
        }
        if self.labels.is_some() {
            let p = dir.join(LABELS_FILE);
            std::fs::write(&p, tsv).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Loads the images listed in `labels.tsv`, in file order, or every
    /// `*.ppm` in name order when there is no label file.
    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let tsv = dir.join(LABELS_FILE);
        let (names, labels) = if tsv.exists() {
            let text = std::fs::read_to_string(&tsv).map_err(|e| Error::io(&tsv, e))?;
            let mut names = Vec::new();
            let mut labels = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |msg: &str| Error::Format {
                    path: tsv.clone(),
                    msg: format!("line {}: {msg}", i + 1),
                };
                let (name, class) = line.split_once('\t').ok_or_else(|| bad("expected `filename<TAB>class`"))?;
                labels.push(class.trim().parse().map_err(|_| bad("class is not a non-negative integer"))?);
                names.push(name.to_string());
            }
            (names, Some(labels))
        } else {
            let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut names = Vec::new();
            for entry in rd {
                let entry = entry.map_err(|e| Error::io(dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.ends_with(".ppm") {
                    names.push(name);
                }
            }
            names.sort();
            (names, None)
        };
        if names.is_empty() {
            return Err(Error::Config(format!("no images in {}", dir.display())));
        }
        let first = read_ppm(&dir.join(&names[0]))?;
        let mut data = Vec::with_capacity(first.len() * names.len());
        data.extend_from_slice(first.data());
        for name in &names[1..] {
            let img = read_ppm(&dir.join(name))?;
            if img.shape() != first.shape() {
                return Err(Error::Config(format!(
                    "{name} is {:?} but {} is {:?}",
                    img.shape(),
                    names[0],
                    first.shape()
                )));
            }
            data.extend_from_slice(img.data());
        }
        let mut shape = vec![names.len()];
        shape.extend_from_slice(first.shape());
        Dataset::new(Tensor::new(shape, data)?, labels)
    }
}

/// Parameters of the synthetic texture set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub seed: u64,
}

const PALETTE: [[f32; 3]; 8] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.9, 0.8, 0.2],
    [0.8, 0.3, 0.9],
    [0.2, 0.85, 0.85],
    [0.95, 0.55, 0.15],
    [0.55, 0.55, 0.55],
];

/// Class-dependent textures: a low-contrast grating whose orientation
/// encodes the class, over a random background colour, overlaid with a
/// shape whose tint and form lean towards the class. Phase, frequency,
/// position, size, orientation and colour are jittered and pixel noise is
/// added, so neither cue alone is perfectly reliable. Values are
/// quantised to multiples of 1/255 so the set survives a PPM round trip.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if spec.n_samples == 0 || spec.image_size < 4 {
        return Err(Error::Config("synthetic data needs samples and images of at least 4x4".into()));
    }
    let s = spec.image_size;
    let plane = s * s;
    let mut data = vec![0.0f32; spec.n_samples * 3 * plane];
    let mut labels = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x5917, i as u64]));
        let class = i % spec.n_classes;
        labels.push(class);

        let step = PI / spec.n_classes as f32;
        let theta = class as f32 * step + rng.gen_range(-0.3..0.3) * step;
        let freq = rng.gen_range(1.0..2.0) / s as f32;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let contrast = rng.gen_range(0.08..0.16);
        let (ct, st) = (theta.cos(), theta.sin());
        let background: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));

        let tint = PALETTE[if rng.gen_bool(0.75) { class % PALETTE.len() } else { rng.gen_range(0..PALETTE.len()) }];
        let square = if rng.gen_bool(0.75) { class % 2 == 0 } else { rng.gen_bool(0.5) };
        let radius = rng.gen_range(0.2..0.32) * s as f32;
        let cx = rng.gen_range(radius..s as f32 - radius);
        let cy = rng.gen_range(radius..s as f32 - radius);

        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let g = contrast * (2.0 * PI * freq * (fx * ct + fy * st) + phase).sin();
                let (dx, dy) = (fx - cx, fy - cy);
                let inside = if square {
                    dx.abs() <= radius && dy.abs() <= radius
                } else {
                    dx * dx + dy * dy <= radius * radius
                };
                for c in 0..3 {
                    let ground = background[c] + g;
                    let base = if inside { 0.4 * ground + 0.6 * tint[c] } else { ground };
                    let v = base + rng.gen_range(-0.02..0.02);
                    img[c * plane + y * s + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![spec.n_samples, 3, s, s], data)?, Some(labels))
}
