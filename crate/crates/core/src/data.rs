//! Synthetic SAR-like chips, PGM I/O, JSON-lines manifests and flip augmentation.
//!
//! A class is a rigid constellation of point scatterers. A sample rotates the
//! constellation to a random azimuth, jitters amplitudes, splats Gaussian
//! point-spread functions onto a faint clutter floor, multiplies by speckle
//! and rescales to `[0, 1]` by the image maximum.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Scatterer positions are scaled by this before mapping to pixels so a
/// rotated corner (radius sqrt 2) still lands inside the image.
const FOOTPRINT: f64 = 0.65;
const MAX_SPEC_ATTEMPTS: usize = 10_000;
/// Azimuth grid used by the rotation-invariant class distance.
const SIGNATURE_ANGLES: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub scatterers: Vec<Scatterer>,
    /// Gaussian point-spread width in pixels.
    pub psf_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub azimuth: f64,
    /// Log-space standard deviation of the per-scatterer amplitude factor.
    pub jitter_sigma: f64,
    pub speckle: bool,
    /// Looks averaged into the speckle field (1 = single-look exponential).
    pub looks: usize,
    /// Constant backscatter floor added before speckle.
    pub clutter: f64,
    pub seed: u64,
}

impl SampleParams {
    pub fn noiseless(azimuth: f64) -> Self {
        SampleParams {
            azimuth,
            jitter_sigma: 0.0,
            speckle: false,
            looks: 1,
            clutter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub min_scatterers: usize,
    pub max_scatterers: usize,
    pub psf_sigma_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub jitter_sigma: f64,
    pub speckle: bool,
    pub looks: usize,
    pub clutter: f64,
    /// Azimuths are drawn uniformly from `[0, azimuth_span)`.
    pub azimuth_span: f64,
    /// Minimum rotation- and mirror-invariant template distance between classes.
    pub min_class_distance: f64,
    pub train_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 10,
            per_class: 100,
            size: 32,
            seed: 7,
            min_scatterers: 3,
            max_scatterers: 8,
            psf_sigma_range: (0.7, 2.0),
            amplitude_range: (0.3, 1.0),
            jitter_sigma: 0.15,
            speckle: true,
            looks: 4,
            clutter: 0.05,
            azimuth_span: 2.0 * PI,
            min_class_distance: 0.5,
            train_fraction: 0.7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("generator: need at least 2 classes".into()));
        }
        if !self.size.is_power_of_two() || self.size < 4 {
            return Err(Error::Config(format!("generator: size {} is not a power of two >= 4", self.size)));
        }
        if self.per_class < 2 {
            return Err(Error::Config("generator: per_class must be at least 2".into()));
        }
        if self.min_scatterers == 0 || self.min_scatterers > self.max_scatterers {
            return Err(Error::Config("generator: need 1 <= min_scatterers <= max_scatterers".into()));
        }
        let (s0, s1) = self.psf_sigma_range;
        let (a0, a1) = self.amplitude_range;
        if !(s0 > 0.0 && s0 <= s1) || !(a0 > 0.0 && a0 <= a1) {
            return Err(Error::Config("generator: psf_sigma_range / amplitude_range invalid".into()));
        }
        if !(self.jitter_sigma >= 0.0) || self.looks == 0 || !(self.clutter >= 0.0) {
            return Err(Error::Config("generator: jitter_sigma, looks or clutter out of range".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("generator: train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, size, size]`, values in `[0, 1]`.
    pub image: Tensor,
    pub class: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn indices(&self, class: usize, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].class == class && self.samples[i].split == split)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub class: usize,
    pub split: Split,
}

fn to_pixels(x: f64, y: f64, size: usize) -> (f64, f64) {
    let half = size as f64 / 2.0;
    let px = half - 0.5 + x * FOOTPRINT * half;
    let py = half - 0.5 - y * FOOTPRINT * half;
    (px, py)
}

/// Multiplicative speckle: mean of `looks` unit-mean exponentials per pixel.
pub fn speckle_field(rng: &mut Rng, size: usize, looks: usize) -> Vec<f64> {
    (0..size * size)
        .map(|_| (0..looks).map(|_| rng.exponential()).sum::<f64>() / looks as f64)
        .collect()
}

pub fn render_sample(spec: &ClassSpec, params: &SampleParams, size: usize) -> Tensor {
    let mut rng = Rng::new(params.seed);
    let (s, c) = params.azimuth.sin_cos();
    let two_var = 2.0 * spec.psf_sigma * spec.psf_sigma;
    let reach = (4.0 * spec.psf_sigma).ceil() as isize;
    let mut img = vec![params.clutter; size * size];
    for sc in &spec.scatterers {
        let amp = sc.amplitude * (params.jitter_sigma * rng.standard_normal()).exp();
        let (px, py) = to_pixels(c * sc.x - s * sc.y, s * sc.x + c * sc.y, size);
        let (cx, cy) = (px.round() as isize, py.round() as isize);
        for row in (cy - reach).max(0)..=(cy + reach).min(size as isize - 1) {
            for col in (cx - reach).max(0)..=(cx + reach).min(size as isize - 1) {
                let d2 = (col as f64 - px).powi(2) + (row as f64 - py).powi(2);
                img[row as usize * size + col as usize] += amp * (-d2 / two_var).exp();
            }
        }
    }
    if params.speckle {
        let field = speckle_field(&mut rng, size, params.looks);
        img.iter_mut().zip(field).for_each(|(v, f)| *v *= f);
    }
    let peak = img.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        img.iter_mut().for_each(|v| *v /= peak);
    }
    Tensor::new(&[1, size, size], img).expect("size matches")
}

fn random_spec(rng: &mut Rng, class_id: usize, cfg: &GeneratorConfig) -> ClassSpec {
    let n = cfg.min_scatterers + rng.below(cfg.max_scatterers - cfg.min_scatterers + 1);
    let scatterers = (0..n)
        .map(|_| Scatterer {
            x: rng.uniform_range(-1.0, 1.0),
            y: rng.uniform_range(-1.0, 1.0),
            amplitude: rng.uniform_range(cfg.amplitude_range.0, cfg.amplitude_range.1),
        })
        .collect();
    ClassSpec {
        class_id,
        scatterers,
        psf_sigma: rng.uniform_range(cfg.psf_sigma_range.0, cfg.psf_sigma_range.1),
    }
}

fn unit(t: Tensor) -> Vec<f64> {
    let n = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    t.data().iter().map(|v| v / n.max(1e-300)).collect()
}

fn mirrored(spec: &ClassSpec) -> ClassSpec {
    let mut m = spec.clone();
    m.scatterers.iter_mut().for_each(|s| s.x = -s.x);
    m
}

/// Smallest distance between unit-norm noiseless templates of `a` and any
/// rotation (on a fixed grid) or mirror image of `b`.
pub fn class_distance(a: &ClassSpec, b: &ClassSpec, size: usize) -> f64 {
    let ta = unit(render_sample(a, &SampleParams::noiseless(0.0), size));
    let mut best = f64::INFINITY;
    for variant in [b.clone(), mirrored(b)] {
        for k in 0..SIGNATURE_ANGLES {
            let theta = 2.0 * PI * k as f64 / SIGNATURE_ANGLES as f64;
            let tb = unit(render_sample(&variant, &SampleParams::noiseless(theta), size));
            let d = ta.iter().zip(&tb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Class constellations with pairwise [`class_distance`] at least `min_class_distance`.
pub fn gen_class_specs(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Vec<ClassSpec>> {
    let mut specs: Vec<ClassSpec> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0;
    while specs.len() < cfg.num_classes {
        attempts += 1;
        if attempts > MAX_SPEC_ATTEMPTS {
            return Err(Error::Data(format!(
                "class generation gave up after {MAX_SPEC_ATTEMPTS} attempts with {} of {} classes; \
                 min_class_distance {} is too strict",
                specs.len(),
                cfg.num_classes,
                cfg.min_class_distance
            )));
        }
        let cand = random_spec(rng, specs.len(), cfg);
        if specs.iter().all(|s| class_distance(s, &cand, cfg.size) >= cfg.min_class_distance) {
            specs.push(cand);
        }
    }
    Ok(specs)
}

/// Generates `num_classes * per_class` samples with a stratified seeded train/test split.
pub fn gen_dataset(cfg: &GeneratorConfig) -> Result<(Dataset, Vec<ClassSpec>)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let specs = gen_class_specs(cfg, &mut root.derive(0))?;
    let n_train = ((cfg.per_class as f64 * cfg.train_fraction).round() as usize).clamp(1, cfg.per_class - 1);
    let mut plan = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    let mut split_rng = root.derive(1);
    for spec in &specs {
        let order = split_rng.permutation(cfg.per_class);
        for i in 0..cfg.per_class {
            let split = if order[i] < n_train { Split::Train } else { Split::Test };
            plan.push((spec.class_id, i, split));
        }
    }
    let samples = plan
        .par_iter()
        .map(|&(class, i, split)| {
            let mut rng = root.derive(2 + (class * cfg.per_class + i) as u64);
            let params = SampleParams {
                azimuth: rng.uniform() * cfg.azimuth_span,
                jitter_sigma: cfg.jitter_sigma,
                speckle: cfg.speckle,
                looks: cfg.looks,
                clutter: cfg.clutter,
                seed: rng.next_u64(),
            };
            Sample {
                image: render_sample(&specs[class], &params, cfg.size),
                class,
                split,
            }
        })
        .collect();
    Ok((
        Dataset {
            size: cfg.size,
            num_classes: cfg.num_classes,
            samples,
        },
        specs,
    ))
}

// ---------------------------------------------------------------------------
// PGM

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

/// Parses a binary 8-bit PGM. Returns `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments before each header number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(start, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(pos, format!("maxval {maxval} unsupported, only 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let need = width * height;
    if bytes.len() - pos < need {
        return Err(format_err(bytes.len(), format!("payload truncated: {} of {need} bytes", bytes.len() - pos)));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

/// Loads a PGM as a `[1, H, W]` tensor scaled to `[0, 1]`.
pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, px) = parse_pgm(&bytes).map_err(|e| match e {
        Error::Format { offset, reason } => Error::Format {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })?;
    Tensor::new(&[1, h, w], px.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Center crop or zero pad a `[1, H, W]` image to `[1, size, size]`.
pub fn fit_to_size(img: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w) = match img.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::shape("fit_to_size", format!("expected [1, H, W], got {s:?}"))),
    };
    let mut out = Tensor::zeros(&[1, size, size]);
    // Offset of the output window in source coordinates (negative = padding).
    let oy = (h as isize - size as isize) / 2;
    let ox = (w as isize - size as isize) / 2;
    for r in 0..size {
        let sr = r as isize + oy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for c in 0..size {
            let sc = c as isize + ox;
            if sc >= 0 && sc < w as isize {
                out.data_mut()[r * size + c] = img.data()[sr as usize * w + sc as usize];
            }
        }
    }
    Ok(out)
}

pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::shape("encode_pgm", format!("expected [1, H, W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifest

/// Writes every sample as `class_XX/NNNNN.pgm` under `dir` plus `manifest.jsonl`.
/// Returns the manifest entries in sample order.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(data.samples.len());
    let mut manifest = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let rel = format!("class_{:02}/{i:05}.pgm", s.class);
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, encode_pgm(&s.image)?)?;
        let entry = ManifestEntry {
            path: rel,
            class: s.class,
            split: s.split,
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.push(b'\n');
        entries.push(entry);
    }
    let tmp = dir.join("manifest.jsonl.tmp");
    fs::File::create(&tmp)?.write_all(&manifest)?;
    fs::rename(&tmp, dir.join("manifest.jsonl"))?;
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// Loads a manifest and its images, fitting each image to `size`.
/// Class ids must be `0..K` with every class present in both splits.
pub fn load_manifest(path: &Path, size: usize) -> Result<Dataset> {
    let entries = read_manifest(path)?;
    let root: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let samples = entries
        .par_iter()
        .map(|e| {
            let img = load_pgm(&root.join(&e.path))?;
            Ok(Sample {
                image: fit_to_size(&img, size)?,
                class: e.class,
                split: e.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let num_classes = samples.iter().map(|s| s.class + 1).max().unwrap_or(0);
    let data = Dataset {
        size,
        num_classes,
        samples,
    };
    for c in 0..num_classes {
        for split in [Split::Train, Split::Test] {
            if data.indices(c, split).is_empty() {
                return Err(Error::Data(format!("{}: class {c} has no {split:?} samples", path.display())));
            }
        }
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// Augmentation

pub fn hflip(x: &Tensor) -> Tensor {
    let w = x.shape().last().copied().unwrap_or(1).max(1);
    let mut out = x.clone();
    out.data_mut().chunks_mut(w).for_each(<[f64]>::reverse);
    out
}

/// Mirrors columns with probability `p`; always consumes exactly one uniform draw.
pub fn hflip_augment(x: &Tensor, rng: &mut Rng, p: f64) -> Tensor {
    if rng.uniform() < p {
        hflip(x)
    } else {
        x.clone()
    }
}
