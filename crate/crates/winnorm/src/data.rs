//! Synthetic multi-site shape benchmark and procedural corruptions.
//!
//! Each site renders the same shape-classification task with its own
//! appearance: background level and texture, foreground intensity range,
//! contrast, channel mixing and noise. Geometry (and therefore the label)
//! is drawn from a site-independent stream, so styles never leak into the
//! labels and the shift between sites is purely appearance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{RngStream};
use crate::tensor::{read_wt4, write_wt4, Tensor4};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;

/// Shape classes; the binary variant keeps the first two.
pub const CLASS_NAMES: [&str; 4] = ["disk", "square", "triangle", "cross"];

/// Appearance parameters of one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteStyle {
    pub background: f64,
    pub texture_freq: f64,
    pub texture_amp: f64,
    pub fg_lo: f64,
    pub fg_hi: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub channel_mix: [[f64; 3]; 3],
}

/// The five hand-set sites. Site A is the default training site; B-E
/// exercise bright/dark backgrounds, low/high contrast and two channel
/// mixes.
pub fn default_styles() -> BTreeMap<String, SiteStyle> {
    let mut m = BTreeMap::new();
    m.insert(
        "A".into(),
        SiteStyle {
            background: 0.20,
            texture_freq: 2.0,
            texture_amp: 0.04,
            fg_lo: 0.65,
            fg_hi: 0.90,
            contrast: 1.0,
            noise_sigma: 0.02,
            channel_mix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        },
    );
    m.insert(
        "B".into(),
        SiteStyle {
            background: 0.55,
            texture_freq: 5.0,
            texture_amp: 0.08,
            fg_lo: 0.78,
            fg_hi: 0.98,
            contrast: 0.55,
            noise_sigma: 0.05,
            channel_mix: [[0.9, 0.1, 0.0], [0.1, 0.8, 0.1], [0.0, 0.1, 0.9]],
        },
    );
    m.insert(
        "C".into(),
        SiteStyle {
            background: 0.06,
            texture_freq: 1.0,
            texture_amp: 0.03,
            fg_lo: 0.35,
            fg_hi: 0.55,
            contrast: 1.35,
            noise_sigma: 0.08,
            channel_mix: [[0.7, 0.0, 0.3], [0.0, 0.9, 0.1], [0.2, 0.1, 0.7]],
        },
    );
    m.insert(
        "D".into(),
        SiteStyle {
            background: 0.42,
            texture_freq: 8.0,
            texture_amp: 0.10,
            fg_lo: 0.82,
            fg_hi: 1.0,
            contrast: 0.8,
            noise_sigma: 0.01,
            channel_mix: [[0.8, 0.2, 0.0], [0.2, 0.6, 0.2], [0.1, 0.2, 0.7]],
        },
    );
    m.insert(
        "E".into(),
        SiteStyle {
            background: 0.30,
            texture_freq: 3.0,
            texture_amp: 0.06,
            fg_lo: 0.55,
            fg_hi: 0.80,
            contrast: 0.40,
            noise_sigma: 0.12,
            channel_mix: [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]],
        },
    );
    m
}

/// Geometry nuisances of one rendered shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub rotation: f64,
}

/// One rendered sample.
#[derive(Clone, Debug)]
pub struct ShapeSample {
    /// 3 x 32 x 32 pixels in [0, 1], row-major per channel.
    pub image: Vec<f32>,
    pub label: usize,
    pub site: String,
    pub geometry: Geometry,
}

/// One split as a packed tensor plus labels.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather a batch by index list.
    pub fn gather(&self, idx: &[usize]) -> SplitData {
        let (_, c, h, w) = self.images.dims();
        let mut images = Tensor4::zeros((idx.len(), c, h, w));
        let plane = c * h * w;
        for (row, &i) in idx.iter().enumerate() {
            let src = &self.images.data()[i * plane..(i + 1) * plane];
            images.data_mut()[row * plane..(row + 1) * plane].copy_from_slice(src);
        }
        SplitData { images, labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

/// Everything generated for one site.
#[derive(Clone, Debug)]
pub struct SiteDataset {
    pub site: String,
    pub style: SiteStyle,
    pub train: SplitData,
    pub test: SplitData,
}

/// The full benchmark.
#[derive(Clone, Debug)]
pub struct ShapeBench {
    pub seed: u64,
    pub binary: bool,
    pub classes: Vec<String>,
    pub sites: Vec<SiteDataset>,
}

impl ShapeBench {
    pub fn site(&self, name: &str) -> Option<&SiteDataset> {
        self.sites.iter().find(|s| s.site == name)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn rotate(x: f64, y: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

/// Signed distance (in pixels, negative inside) to the class shape.
fn shape_sdf(class: usize, px: f64, py: f64, geo: &Geometry) -> f64 {
    let (x, y) = rotate(px - geo.cx, py - geo.cy, geo.rotation);
    let r = geo.scale;
    match class {
        // disk
        0 => (x * x + y * y).sqrt() - r,
        // square with inradius 0.85 r
        1 => x.abs().max(y.abs()) - 0.85 * r,
        // equilateral triangle: intersection of three half planes with
        // inradius 0.58 r
        2 => {
            let rin = 0.58 * r;
            let mut d = f64::NEG_INFINITY;
            for k in 0..3 {
                let ang = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                d = d.max(x * ang.cos() + y * ang.sin() - rin);
            }
            d
        }
        // cross: union of two bars
        3 => {
            let bar = 0.34 * r;
            let d1 = (x.abs() - r).max(y.abs() - bar);
            let d2 = (x.abs() - bar).max(y.abs() - r);
            d1.min(d2)
        }
        _ => unreachable!("class out of range"),
    }
}

fn draw_geometry(rng: &mut RngStream) -> Geometry {
    let side = IMAGE_SIDE as f64;
    Geometry {
        cx: side / 2.0 + (rng.uniform() - 0.5) * 8.0,
        cy: side / 2.0 + (rng.uniform() - 0.5) * 8.0,
        scale: 6.0 + 5.0 * rng.uniform(),
        rotation: rng.uniform() * 2.0 * std::f64::consts::PI,
    }
}

/// Render one sample: geometry first (label-relevant, site-independent),
/// then the site style on top.
fn render_sample(
    class: usize,
    geo: &Geometry,
    style: &SiteStyle,
    style_rng: &mut RngStream,
) -> Vec<f32> {
    let side = IMAGE_SIDE;
    let fg = style.fg_lo + (style.fg_hi - style.fg_lo) * style_rng.uniform();
    let phases: Vec<(f64, f64)> =
        (0..CHANNELS).map(|_| (style_rng.uniform() * 6.28, style_rng.uniform() * 6.28)).collect();

    // Coverage mask with a one-pixel soft edge.
    let mut coverage = vec![0.0f64; side * side];
    for y in 0..side {
        for x in 0..side {
            let d = shape_sdf(class, x as f64 + 0.5, y as f64 + 0.5, geo);
            coverage[y * side + x] = (0.5 - d).clamp(0.0, 1.0);
        }
    }

    let mut chans = vec![0.0f64; CHANNELS * side * side];
    for c in 0..CHANNELS {
        let (p1, p2) = phases[c];
        for y in 0..side {
            for x in 0..side {
                let tex = style.texture_amp
                    * (2.0 * std::f64::consts::PI * style.texture_freq * x as f64 / side as f64
                        + p1)
                        .sin()
                    * (2.0 * std::f64::consts::PI * style.texture_freq * y as f64 / side as f64
                        + p2)
                        .sin();
                let bg = style.background + tex;
                let cov = coverage[y * side + x];
                let v = bg * (1.0 - cov) + fg * cov;
                // Contrast around mid-gray.
                chans[(c * side + y) * side + x] = 0.5 + (v - 0.5) * style.contrast;
            }
        }
    }

    // Channel mixing, then per-pixel noise, then clamp.
    let mut out = vec![0.0f32; CHANNELS * side * side];
    for y in 0..side {
        for x in 0..side {
            let i = y * side + x;
            let rgb = [chans[i], chans[side * side + i], chans[2 * side * side + i]];
            for c in 0..CHANNELS {
                let mixed: f64 =
                    (0..3).map(|j| style.channel_mix[c][j] * rgb[j]).sum::<f64>();
                let noisy = mixed + style.noise_sigma * style_rng.normal();
                out[(c * side + y) * side + x] = noisy.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn site_word(site: &str) -> u64 {
    site.bytes().fold(0u64, |acc, b| acc.wrapping_mul(257).wrapping_add(b as u64))
}

/// Generate one class-balanced split for one site. Geometry streams are
/// keyed by (seed, split, index) only, so two sites generated with the
/// same seed get identical geometry and labels under different styles.
pub fn gen_site_dataset(
    seed: u64,
    site: &str,
    style: &SiteStyle,
    split: &str,
    n_per_class: usize,
    num_classes: usize,
) -> Result<Vec<ShapeSample>> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    if !(2..=CLASS_NAMES.len()).contains(&num_classes) {
        return Err(Error::InvalidConfig(format!("num_classes {num_classes} unsupported")));
    }
    let split_word = site_word(split);
    let total = n_per_class * num_classes;
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % num_classes;
        let mut geom_rng = RngStream::derived(seed, "geometry", &[split_word, i as u64]);
        let mut style_rng =
            RngStream::derived(seed, "style", &[site_word(site), split_word, i as u64]);
        let geo = draw_geometry(&mut geom_rng);
        let image = render_sample(class, &geo, style, &mut style_rng);
        samples.push(ShapeSample { image, label: class, site: site.to_string(), geometry: geo });
    }
    Ok(samples)
}

fn pack(samples: &[ShapeSample]) -> SplitData {
    let n = samples.len();
    let mut images = Tensor4::zeros((n, CHANNELS, IMAGE_SIDE, IMAGE_SIDE));
    let plane = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
    for (i, s) in samples.iter().enumerate() {
        images.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(&s.image);
    }
    SplitData { images, labels: samples.iter().map(|s| s.label).collect() }
}

/// Generate the full benchmark for the named sites.
pub fn gen_benchmark(
    seed: u64,
    sites: &[String],
    n_train_per_class: usize,
    n_test_per_class: usize,
    binary: bool,
) -> Result<ShapeBench> {
    let styles = default_styles();
    let num_classes = if binary { 2 } else { CLASS_NAMES.len() };
    let classes: Vec<String> = CLASS_NAMES[..num_classes].iter().map(|s| s.to_string()).collect();
    let mut out = Vec::new();
    for site in sites {
        let style = styles
            .get(site)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown site {site}; have A-E")))?;
        let train = pack(&gen_site_dataset(seed, site, style, "train", n_train_per_class, num_classes)?);
        let test = pack(&gen_site_dataset(seed, site, style, "test", n_test_per_class, num_classes)?);
        out.push(SiteDataset { site: site.clone(), style: style.clone(), train, test });
    }
    Ok(ShapeBench { seed, binary, classes, sites: out })
}

/// Merge the train/test splits of several sites (the pooled-reference
/// protocol): sample i of each site interleaves in site order.
pub fn merge_sites(bench: &ShapeBench, sites: &[String]) -> Result<(SplitData, SplitData)> {
    let mut train_samples: Vec<(Tensor4<f32>, Vec<usize>)> = Vec::new();
    let mut test_samples = Vec::new();
    for name in sites {
        let site = bench
            .site(name)
            .ok_or_else(|| Error::InvalidConfig(format!("site {name} not in dataset")))?;
        train_samples.push((site.train.images.clone(), site.train.labels.clone()));
        test_samples.push((site.test.images.clone(), site.test.labels.clone()));
    }
    let concat = |parts: &[(Tensor4<f32>, Vec<usize>)]| -> Result<SplitData> {
        let total: usize = parts.iter().map(|(_, l)| l.len()).sum();
        let (_, c, h, w) = parts[0].0.dims();
        let mut images = Tensor4::zeros((total, c, h, w));
        let mut labels = Vec::with_capacity(total);
        let plane = c * h * w;
        let mut row = 0;
        for (img, lab) in parts {
            images.data_mut()[row * plane..(row + lab.len()) * plane]
                .copy_from_slice(img.data());
            labels.extend_from_slice(lab);
            row += lab.len();
        }
        Ok(SplitData { images, labels })
    };
    Ok((concat(&train_samples)?, concat(&test_samples)?))
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    BoxBlur,
    Contrast,
    Brightness,
    Pixelate,
}

pub const CORRUPTION_KINDS: [CorruptionKind; 5] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::BoxBlur,
    CorruptionKind::Contrast,
    CorruptionKind::Brightness,
    CorruptionKind::Pixelate,
];

/// One corruption with a severity in 1..=5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

/// Frozen severity tables. Calibrated once so severity 5 costs the plain
/// baseline well over 20 accuracy points, then fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityTables {
    pub gaussian_noise_sigma: [f64; 5],
    pub box_blur_kernel: [usize; 5],
    pub contrast_multiplier: [f64; 5],
    pub brightness_shift: [f64; 5],
    pub pixelate_factor: [usize; 5],
}

impl Default for SeverityTables {
    fn default() -> Self {
        SeverityTables {
            gaussian_noise_sigma: [0.04, 0.08, 0.12, 0.16, 0.20],
            box_blur_kernel: [3, 5, 7, 9, 11],
            contrast_multiplier: [0.75, 0.55, 0.40, 0.30, 0.20],
            brightness_shift: [0.10, 0.20, 0.30, 0.40, 0.50],
            pixelate_factor: [2, 4, 8, 16, 32],
        }
    }
}

impl SeverityTables {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&body)?)
    }
}

fn box_blur(chan: &[f32], side: usize, kernel: usize) -> Vec<f32> {
    let r = (kernel / 2) as isize;
    let mut out = vec![0.0f32; side * side];
    for y in 0..side as isize {
        for x in 0..side as isize {
            let mut acc = 0.0f64;
            for dy in -r..=r {
                for dx in -r..=r {
                    // Clamp to edge.
                    let sy = (y + dy).clamp(0, side as isize - 1) as usize;
                    let sx = (x + dx).clamp(0, side as isize - 1) as usize;
                    acc += chan[sy * side + sx] as f64;
                }
            }
            out[y as usize * side + x as usize] =
                (acc / ((kernel * kernel) as f64)) as f32;
        }
    }
    out
}

fn pixelate(chan: &[f32], side: usize, factor: usize) -> Vec<f32> {
    let factor = factor.min(side);
    let blocks = side.div_ceil(factor);
    let mut out = vec![0.0f32; side * side];
    for by in 0..blocks {
        for bx in 0..blocks {
            let y0 = by * factor;
            let x0 = bx * factor;
            let y1 = (y0 + factor).min(side);
            let x1 = (x0 + factor).min(side);
            let mut acc = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += chan[y * side + x] as f64;
                }
            }
            let mean = (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32;
            for y in y0..y1 {
                for x in x0..x1 {
                    out[y * side + x] = mean;
                }
            }
        }
    }
    out
}

/// Corrupt one image (1, C, H, W). Deterministic given the rng state and
/// spec; output clamped to [0, 1].
pub fn corrupt(
    image: &Tensor4<f32>,
    spec: CorruptionSpec,
    tables: &SeverityTables,
    rng: &mut RngStream,
) -> Result<Tensor4<f32>> {
    let (n, c, h, w) = image.dims();
    if n != 1 || h != w {
        return Err(Error::shape("corrupt", format!("want (1,C,S,S), got {:?}", image.dims())));
    }
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::InvalidConfig(format!("severity {} outside 1..=5", spec.severity)));
    }
    let s = (spec.severity - 1) as usize;
    let side = h;
    let mut out = image.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = tables.gaussian_noise_sigma[s];
            for v in out.data_mut() {
                *v = (*v as f64 + sigma * rng.normal()).clamp(0.0, 1.0) as f32;
            }
        }
        CorruptionKind::BoxBlur => {
            let kernel = tables.box_blur_kernel[s];
            for ci in 0..c {
                let base = ci * side * side;
                let blurred = box_blur(&image.data()[base..base + side * side], side, kernel);
                out.data_mut()[base..base + side * side].copy_from_slice(&blurred);
            }
        }
        CorruptionKind::Contrast => {
            let m = tables.contrast_multiplier[s];
            for v in out.data_mut() {
                *v = (0.5 + (*v as f64 - 0.5) * m).clamp(0.0, 1.0) as f32;
            }
        }
        CorruptionKind::Brightness => {
            let shift = tables.brightness_shift[s];
            for v in out.data_mut() {
                *v = (*v as f64 + shift).clamp(0.0, 1.0) as f32;
            }
        }
        CorruptionKind::Pixelate => {
            let factor = tables.pixelate_factor[s];
            for ci in 0..c {
                let base = ci * side * side;
                let px = pixelate(&image.data()[base..base + side * side], side, factor);
                out.data_mut()[base..base + side * side].copy_from_slice(&px);
            }
        }
    }
    Ok(out)
}

/// Apply one corruption to a whole split with per-image derived streams.
pub fn corrupt_split(
    split: &SplitData,
    spec: CorruptionSpec,
    tables: &SeverityTables,
    seed: u64,
) -> Result<SplitData> {
    let (n, c, h, w) = split.images.dims();
    let mut images = Tensor4::zeros((n, c, h, w));
    let plane = c * h * w;
    for i in 0..n {
        let one = Tensor4::new(
            (1, c, h, w),
            split.images.data()[i * plane..(i + 1) * plane].to_vec(),
        )?;
        let mut rng = RngStream::derived(seed, "corrupt", &[
            spec.kind as u64,
            spec.severity as u64,
            i as u64,
        ]);
        let done = corrupt(&one, spec, tables, &mut rng)?;
        images.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(done.data());
    }
    Ok(SplitData { images, labels: split.labels.clone() })
}

// ---------------------------------------------------------------------------
// Training-time augmentation: horizontal flip and pad-4 random crop.
// ---------------------------------------------------------------------------

/// In-place augmentation of a gathered batch, drawing from the data
/// stream: each image flips with probability 1/2 and shifts by a random
/// offset of a zero-padded 4-pixel border.
pub fn augment_batch(batch: &mut SplitData, rng: &mut RngStream) {
    let (n, c, h, w) = batch.images.dims();
    let pad = 4usize;
    for i in 0..n {
        let flip = rng.uniform() < 0.5;
        let dy = rng.uniform_int(2 * pad + 1) as isize - pad as isize;
        let dx = rng.uniform_int(2 * pad + 1) as isize - pad as isize;
        if !flip && dx == 0 && dy == 0 {
            continue;
        }
        let plane = c * h * w;
        let src: Vec<f32> = batch.images.data()[i * plane..(i + 1) * plane].to_vec();
        let dst = &mut batch.images.data_mut()[i * plane..(i + 1) * plane];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    let v = if sx >= 0 && sx < w as isize && sy >= 0 && sy < h as isize {
                        src[(ci * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                    dst[(ci * h + y) * w + x] = v;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// On-disk layout: manifest.json + one WT4 per (site, split) + label CSVs.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SiteManifest {
    name: String,
    style: SiteStyle,
    train_count: usize,
    test_count: usize,
    train_file: String,
    test_file: String,
    train_labels: String,
    test_labels: String,
    train_sha256: String,
    test_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    binary: bool,
    classes: Vec<String>,
    sites: Vec<SiteManifest>,
}

/// Hex-encoded SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

fn write_labels_csv(path: &Path, labels: &[usize], classes: &[String]) -> Result<()> {
    let mut body = String::from("index,label,class\n");
    for (i, &l) in labels.iter().enumerate() {
        body.push_str(&format!("{i},{l},{}\n", classes[l]));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut labels = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if lineno == 0 {
            if line != "index,label,class" {
                return Err(Error::Integrity(format!("{}: bad label header", path.display())));
            }
            continue;
        }
        let mut parts = line.split(',');
        let _idx = parts.next();
        let label = parts
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Integrity(format!("{}: bad label line {lineno}", path.display())))?;
        labels.push(label);
    }
    Ok(labels)
}

pub fn write_dataset(dir: &Path, bench: &ShapeBench) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut sites = Vec::new();
    for site in &bench.sites {
        let train_file = format!("{}_train.wt4", site.site);
        let test_file = format!("{}_test.wt4", site.site);
        let train_labels = format!("{}_train_labels.csv", site.site);
        let test_labels = format!("{}_test_labels.csv", site.site);
        write_wt4(&dir.join(&train_file), &site.train.images)?;
        write_wt4(&dir.join(&test_file), &site.test.images)?;
        write_labels_csv(&dir.join(&train_labels), &site.train.labels, &bench.classes)?;
        write_labels_csv(&dir.join(&test_labels), &site.test.labels, &bench.classes)?;
        sites.push(SiteManifest {
            name: site.site.clone(),
            style: site.style.clone(),
            train_count: site.train.len(),
            test_count: site.test.len(),
            train_sha256: sha256_file(&dir.join(&train_file))?,
            test_sha256: sha256_file(&dir.join(&test_file))?,
            train_file,
            test_file,
            train_labels,
            test_labels,
        });
    }
    let manifest = DatasetManifest {
        seed: bench.seed,
        binary: bench.binary,
        classes: bench.classes.clone(),
        sites,
    };
    SeverityTables::default().write_json(&dir.join("corruptions.json"))?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(dir.display().to_string(), e))
}

pub fn read_dataset(dir: &Path) -> Result<ShapeBench> {
    let manifest_path = dir.join("manifest.json");
    let body = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&body)?;
    let mut sites = Vec::new();
    for site in &manifest.sites {
        for (file, sha) in [(&site.train_file, &site.train_sha256), (&site.test_file, &site.test_sha256)] {
            let path = dir.join(file);
            if !path.exists() {
                return Err(Error::Integrity(format!("missing tensor file {file}")));
            }
            let got = sha256_file(&path)?;
            if &got != sha {
                return Err(Error::Integrity(format!("checksum mismatch for {file}")));
            }
        }
        let train_images = read_wt4(&dir.join(&site.train_file))?;
        let test_images = read_wt4(&dir.join(&site.test_file))?;
        let train_labels = read_labels_csv(&dir.join(&site.train_labels))?;
        let test_labels = read_labels_csv(&dir.join(&site.test_labels))?;
        if train_images.n() != site.train_count || train_labels.len() != site.train_count {
            return Err(Error::Integrity(format!("{}: train count mismatch", site.name)));
        }
        if test_images.n() != site.test_count || test_labels.len() != site.test_count {
            return Err(Error::Integrity(format!("{}: test count mismatch", site.name)));
        }
        if let Some(&bad) = train_labels.iter().chain(&test_labels).find(|&&l| l >= manifest.classes.len()) {
            return Err(Error::Integrity(format!("label {bad} out of range")));
        }
        sites.push(SiteDataset {
            site: site.name.clone(),
            style: site.style.clone(),
            train: SplitData { images: train_images, labels: train_labels },
            test: SplitData { images: test_images, labels: test_labels },
        });
    }
    Ok(ShapeBench {
        seed: manifest.seed,
        binary: manifest.binary,
        classes: manifest.classes,
        sites,
    })
}
