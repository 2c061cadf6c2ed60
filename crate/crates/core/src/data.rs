//! Datasets: normalization, rotation, fold partitioning, the synthetic
//! texture-with-vacuoles generator, and manifest files.

pub mod pnm;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use pnm::image_dims;

pub const FOLDS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// One 1x1xHxW tensor per sample.
    pub images: Vec<Tensor4>,
    pub labels: Vec<usize>,
    pub fold: Vec<usize>,
    /// Samples sharing a group id (an image and its rotations) always land
    /// in the same fold.
    pub group: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    /// Dataset where every sample is its own group, all in fold 0.
    pub fn new(images: Vec<Tensor4>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::usage(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let n = images.len();
        Ok(LabeledDataset {
            images,
            labels,
            fold: vec![0; n],
            group: (0..n).collect(),
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn fold_sizes(&self) -> [usize; FOLDS] {
        let mut sizes = [0; FOLDS];
        for &f in &self.fold {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let n = self.class_names.len().max(self.labels.iter().max().map_or(0, |m| m + 1));
        let mut counts = vec![0; n];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Subset by indices, keeping fold and group.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            fold: idx.iter().map(|&i| self.fold[i]).collect(),
            group: idx.iter().map(|&i| self.group[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Intensities 0..=255 to [-1, 1] as v / 127.5 - 1.
pub fn normalize(raw: &[f64], rows: usize, cols: usize) -> Result<Tensor4> {
    if raw.len() != rows * cols {
        return Err(Error::usage(format!(
            "{} intensities for a {rows}x{cols} image",
            raw.len()
        )));
    }
    if let Some(bad) = raw.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::usage(format!("intensity {bad} outside 0..=255")));
    }
    Tensor4::from_vec(image_dims(rows, cols), raw.iter().map(|v| v / 127.5 - 1.0).collect())
}

/// 90° counter-clockwise rotation of every plane: new[r][c] = old[c][n-1-r].
pub fn rotate90(img: &Tensor4) -> Result<Tensor4> {
    let d = img.dims();
    if d.rows != d.cols {
        return Err(Error::usage(format!("rotation needs square planes, got {d}")));
    }
    let n = d.rows;
    let mut out = img.zeros_like();
    for b in 0..d.batch {
        for ch in 0..d.channels {
            for r in 0..n {
                for c in 0..n {
                    out.set(b, ch, r, c, img.get(b, ch, c, n - 1 - r));
                }
            }
        }
    }
    Ok(out)
}

/// The image at 0°, 90°, 180° and 270°.
pub fn rotate4(img: &Tensor4) -> Result<[Tensor4; 4]> {
    let r1 = rotate90(img)?;
    let r2 = rotate90(&r1)?;
    let r3 = rotate90(&r2)?;
    Ok([img.clone(), r1, r2, r3])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn contains(self, fold: usize) -> bool {
        match self {
            Role::Test => fold == 0,
            Role::Val => fold == 1,
            Role::Train => fold >= 2,
        }
    }
}

/// Assign six folds. Groups are visited in a seeded random order, largest
/// first, and each goes to the currently smallest fold (lowest index on
/// ties). With singleton groups this is plain round-robin.
pub fn split_folds(dataset: &LabeledDataset, seed: u64) -> LabeledDataset {
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &g) in dataset.group.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = members.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    let mut sizes = [0usize; FOLDS];
    let mut out = dataset.clone();
    for g in &groups {
        let f = (0..FOLDS).min_by_key(|&f| (sizes[f], f)).expect("six folds");
        sizes[f] += g.len();
        for &i in g {
            out.fold[i] = f;
        }
    }
    out
}

pub fn select(dataset: &LabeledDataset, role: Role) -> LabeledDataset {
    let idx: Vec<usize> = (0..dataset.len()).filter(|&i| role.contains(dataset.fold[i])).collect();
    dataset.subset(&idx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_normal: usize,
    /// Abnormal source images; each yields four rotated samples.
    pub n_abnormal: usize,
    pub vacuole_count: (usize, usize),
    pub vacuole_radius: (usize, usize),
    /// Disc brightness in normalized units, -1..=1.
    pub vacuole_intensity: f64,
    /// Value-noise lattice spacing in pixels.
    pub grain_scale: usize,
    /// Background amplitude in normalized units, 0..=1.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 32,
            n_normal: 894,
            n_abnormal: 105,
            vacuole_count: (1, 3),
            vacuole_radius: (1, 2),
            vacuole_intensity: 1.0,
            grain_scale: 4,
            contrast: 0.6,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.image_size < 4 {
            return bad(format!("image_size must be >= 4, got {}", self.image_size));
        }
        let (cmin, cmax) = self.vacuole_count;
        let (rmin, rmax) = self.vacuole_radius;
        if cmin > cmax {
            return bad(format!("vacuole_count range {cmin},{cmax} is reversed"));
        }
        if rmin > rmax {
            return bad(format!("vacuole_radius range {rmin},{rmax} is reversed"));
        }
        if cmax > 0 && (rmin == 0 || 2 * rmax + 1 > self.image_size) {
            return bad(format!(
                "vacuole_radius {rmin},{rmax} must be >= 1 and fit a {0}x{0} image",
                self.image_size
            ));
        }
        if !(-1.0..=1.0).contains(&self.vacuole_intensity) {
            return bad(format!("vacuole_intensity must lie in [-1, 1], got {}", self.vacuole_intensity));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return bad(format!("contrast must lie in [0, 1], got {}", self.contrast));
        }
        if self.grain_scale == 0 {
            return bad("grain_scale must be >= 1".into());
        }
        if self.n_normal == 0 && self.n_abnormal == 0 {
            return bad("dataset would be empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Disc {
    pub row: usize,
    pub col: usize,
    pub radius: usize,
}

impl Disc {
    pub fn covers(&self, r: usize, c: usize) -> bool {
        let dr = r as i64 - self.row as i64;
        let dc = c as i64 - self.col as i64;
        dr * dr + dc * dc <= (self.radius * self.radius) as i64
    }

    /// Position after [`rotate90`] of an n x n image.
    pub fn rotated(&self, n: usize) -> Disc {
        Disc {
            row: n - 1 - self.col,
            col: self.row,
            radius: self.radius,
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in [-1, 1]: a random lattice every `grain` pixels, smoothstep
/// bilinear in between.
fn value_noise<R: Rng>(n: usize, grain: usize, rng: &mut R) -> Vec<f64> {
    let cells = n / grain + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        let (gy, ty) = (r / grain, smoothstep((r % grain) as f64 / grain as f64));
        for c in 0..n {
            let (gx, tx) = (c / grain, smoothstep((c % grain) as f64 / grain as f64));
            let at = |y: usize, x: usize| lattice[y * cells + x];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bottom = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

const PLACEMENT_ATTEMPTS: usize = 1000;

fn place_discs<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Vec<Disc>> {
    let n = spec.image_size;
    let k = rng.gen_range(spec.vacuole_count.0..=spec.vacuole_count.1);
    let mut discs: Vec<Disc> = Vec::with_capacity(k);
    let mut attempts = 0;
    while discs.len() < k {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {k} non-overlapping discs in a {n}x{n} image"
            )));
        }
        let radius = rng.gen_range(spec.vacuole_radius.0..=spec.vacuole_radius.1);
        let row = rng.gen_range(radius..n - radius);
        let col = rng.gen_range(radius..n - radius);
        let fits = discs.iter().all(|d| {
            let dr = d.row as f64 - row as f64;
            let dc = d.col as f64 - col as f64;
            (dr * dr + dc * dc).sqrt() >= (d.radius + radius + 1) as f64
        });
        if fits {
            discs.push(Disc { row, col, radius });
        }
    }
    Ok(discs)
}

fn render<R: Rng>(spec: &SynthSpec, discs: &[Disc], rng: &mut R) -> Result<Tensor4> {
    let n = spec.image_size;
    let noise = value_noise(n, spec.grain_scale, rng);
    let disc_level = 127.5 * (1.0 + spec.vacuole_intensity);
    let raw: Vec<f64> = noise
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (r, c) = (i / n, i % n);
            let level = if discs.iter().any(|d| d.covers(r, c)) {
                disc_level
            } else {
                127.5 * (1.0 + spec.contrast * v)
            };
            level.round().clamp(0.0, 255.0)
        })
        .collect();
    normalize(&raw, n, n)
}

pub fn class_names() -> Vec<String> {
    vec!["normal".into(), "vacuoles".into()]
}

/// Synthetic dataset plus the disc layout of every sample.
pub fn generate_synthetic_with_discs(spec: &SynthSpec) -> Result<(LabeledDataset, Vec<Vec<Disc>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size;
    let total = spec.n_normal + 4 * spec.n_abnormal;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut group = Vec::with_capacity(total);
    let mut layouts = Vec::with_capacity(total);
    for g in 0..spec.n_normal {
        images.push(render(spec, &[], &mut rng)?);
        labels.push(0);
        group.push(g);
        layouts.push(Vec::new());
    }
    for a in 0..spec.n_abnormal {
        let mut discs = place_discs(spec, &mut rng)?;
        let img = render(spec, &discs, &mut rng)?;
        for rotated in rotate4(&img)? {
            images.push(rotated);
            labels.push(1);
            group.push(spec.n_normal + a);
            layouts.push(discs.clone());
            discs = discs.iter().map(|d| d.rotated(n)).collect();
        }
    }
    let fold = vec![0; total];
    let ds = LabeledDataset {
        images,
        labels,
        fold,
        group,
        class_names: class_names(),
    };
    Ok((split_folds(&ds, spec.seed), layouts))
}

/// Normal textures (class 0) and textures with bright discs (class 1, each
/// source image present in four rotations), already split into folds.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<LabeledDataset> {
    Ok(generate_synthetic_with_discs(spec)?.0)
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Write every image as PGM plus a manifest of `path\tlabel\tfold` lines.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, img) in ds.images.iter().enumerate() {
        let name = format!("img_{i:05}.pgm");
        pnm::write_pgm(dir.join(&name), img)?;
        writeln!(manifest, "{name}\t{}\t{}", ds.labels[i], ds.fold[i]).expect("string write");
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Load a manifest; image paths are relative to the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut fold = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = || Error::config(format!("{}:{}: expected path<TAB>label<TAB>fold", path.display(), n + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let label: usize = parts[1].parse().map_err(|_| bad())?;
        let f: usize = parts[2].parse().map_err(|_| bad())?;
        if f >= FOLDS {
            return Err(Error::config(format!("{}:{}: fold {f} out of range", path.display(), n + 1)));
        }
        images.push(pnm::read_pgm(base.join(parts[0]))?);
        labels.push(label);
        fold.push(f);
    }
    let mut names = class_names();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    names.extend((names.len()..classes).map(|k| format!("class{k}")));
    let mut ds = LabeledDataset::new(images, labels, names)?;
    ds.fold = fold;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            image_size: 16,
            n_normal: 10,
            n_abnormal: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn normalize_endpoints() {
        let t = normalize(&[0.0, 255.0, 127.5], 1, 3).unwrap();
        assert_eq!(t.data(), &[-1.0, 1.0, 0.0]);
        assert!(normalize(&[256.0], 1, 1).is_err());
        assert!(normalize(&[-0.5], 1, 1).is_err());
        assert!(normalize(&[1.0, 2.0], 1, 1).is_err());
    }

    #[test]
    fn rotate_two_by_two() {
        let t = Tensor4::from_vec(image_dims(2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = rotate4(&t).unwrap();
        assert_eq!(r[0], t);
        assert_eq!(r[1].data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rotate90(&r[3]).unwrap(), t);
        assert!(rotate90(&Tensor4::zeros(image_dims(2, 3)).unwrap()).is_err());
    }

    #[test]
    fn twelve_samples_split_two_per_fold() {
        let imgs = (0..12).map(|_| Tensor4::zeros(image_dims(2, 2)).unwrap()).collect();
        let ds = LabeledDataset::new(imgs, vec![0; 12], class_names()).unwrap();
        let ds = split_folds(&ds, 5);
        assert_eq!(ds.fold_sizes(), [2; 6]);
        assert_eq!(select(&ds, Role::Train).len(), 8);
        assert_eq!(select(&ds, Role::Val).len(), 2);
        assert_eq!(select(&ds, Role::Test).len(), 2);
    }

    #[test]
    fn paper_sized_split() {
        let imgs = vec![Tensor4::zeros(image_dims(1, 1)).unwrap(); 6588];
        let ds = split_folds(&LabeledDataset::new(imgs, vec![0; 6588], vec![]).unwrap(), 1);
        assert_eq!(ds.fold_sizes(), [1098; 6]);
    }

    #[test]
    fn generator_counts_and_determinism() {
        let spec = tiny_spec();
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 10 + 12);
        assert_eq!(a.class_counts(), vec![10, 12]);
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        let b = generate_synthetic(&SynthSpec { seed: 7, ..spec }).unwrap();
        assert_ne!(a.images, b.images);
        for img in &a.images {
            let (lo, hi) = img.min_max();
            assert!(lo >= -1.0 && hi <= 1.0);
        }
    }

    #[test]
    fn rotations_share_a_fold() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if ds.group[i] == ds.group[j] {
                    assert_eq!(ds.fold[i], ds.fold[j]);
                }
            }
        }
        let sizes = ds.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn discs_are_drawn_where_recorded() {
        let spec = tiny_spec();
        let (ds, layouts) = generate_synthetic_with_discs(&spec).unwrap();
        for (i, discs) in layouts.iter().enumerate() {
            assert_eq!(discs.is_empty(), ds.labels[i] == 0);
            for d in discs {
                assert_eq!(ds.images[i].get(0, 0, d.row, d.col), 1.0);
                assert_eq!(ds.images[i].get(0, 0, d.row + d.radius, d.col), 1.0);
            }
        }
    }

    #[test]
    fn impossible_layout_is_generation_error() {
        let spec = SynthSpec {
            image_size: 8,
            n_normal: 0,
            n_abnormal: 1,
            vacuole_count: (9, 9),
            vacuole_radius: (3, 3),
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = SynthSpec::default();
        for bad in [
            SynthSpec { vacuole_radius: (0, 2), ..base.clone() },
            SynthSpec { vacuole_radius: (2, 1), ..base.clone() },
            SynthSpec { contrast: 1.5, ..base.clone() },
            SynthSpec { grain_scale: 0, ..base.clone() },
            SynthSpec { image_size: 2, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert!(SynthSpec { vacuole_count: (0, 0), vacuole_radius: (0, 0), ..base }.validate().is_ok());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_manifest(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.fold, ds.fold);
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert_eq!(a, b);
        }
    }
}
