//! Seeded synthetic scenes: flat-colored shapes with hard edges on a
//! textured background, one shape kind per foreground class.

mod spec;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

pub use spec::{SceneSpec, ShapeKind};

use crate::config::{parse_lines, ConfigError, KeyValue};
use crate::par;
use crate::tensor::io::{HfgtError, HfgtTensor};
use crate::tensor::Tensor;
use crate::IGNORE_LABEL;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] HfgtError),
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sample has no foreground pixels")]
    BackgroundOnly,
    #[error("dataset is empty")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub size: usize,
    /// `[3, size, size]`, channel-major, values in `[0, 1]`.
    pub image: Vec<f64>,
    /// `[size, size]`, class index or [`IGNORE_LABEL`].
    pub labels: Vec<u16>,
}

impl SegSample {
    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.size, self.size], self.image.clone()).expect("consistent sample")
    }
}

pub fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Foreground classes come in pairs sharing a hue and texture and differing
/// only slightly in brightness, so telling a pair apart takes shape context.
pub fn base_color(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.45, 0.45, 0.45];
    }
    let pairs = num_classes / 2; // ceil((C - 1) / 2)
    let pair = (class - 1) / 2;
    let v = if (class - 1).is_multiple_of(2) { 0.62 } else { 0.68 };
    hsv_to_rgb(360.0 * pair as f64 / pairs.max(1) as f64, 0.55, v)
}

/// `(cycles per image, orientation)` of a class texture.
fn texture(class: usize) -> (f64, f64) {
    if class == 0 {
        return (2.0, 0.3);
    }
    let pair = ((class - 1) / 2) as f64;
    (3.0 + pair, 0.9 * pair + 0.5)
}

fn in_bounds(s: usize, x: i64, y: i64) -> Option<usize> {
    (x >= 0 && y >= 0 && (x as usize) < s && (y as usize) < s).then(|| y as usize * s + x as usize)
}

/// Pixels whose centers satisfy `inside`.
fn raster(s: usize, inside: impl Fn(f64, f64) -> bool) -> Vec<usize> {
    let mut out = Vec::new();
    for y in 0..s {
        for x in 0..s {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                out.push(y * s + x);
            }
        }
    }
    out
}

/// Bresenham line from `p0` to `p1`, `width` pixels thick across the minor
/// axis. Returns the covered pixels and the number of steps along the
/// major axis.
pub fn thin_line_pixels(s: usize, p0: (i64, i64), p1: (i64, i64), width: usize) -> (Vec<usize>, usize) {
    let (dx, dy) = ((p1.0 - p0.0).abs(), -(p1.1 - p0.1).abs());
    let (sx, sy) = (if p0.0 < p1.0 { 1 } else { -1 }, if p0.1 < p1.1 { 1 } else { -1 });
    let x_major = dx >= -dy;
    let mut err = dx + dy;
    let (mut x, mut y) = p0;
    let mut out = Vec::new();
    let mut steps = 0;
    loop {
        steps += 1;
        for k in 0..width as i64 {
            let (px, py) = if x_major { (x, y + k) } else { (x + k, y) };
            if let Some(i) = in_bounds(s, px, py) {
                out.push(i);
            }
        }
        if (x, y) == p1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out.sort_unstable();
    out.dedup();
    (out, steps)
}

fn draw_shape(rng: &mut Xoshiro256StarStar, kind: ShapeKind, s: usize) -> Vec<usize> {
    let sf = s as f64;
    let mut uni = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    match kind {
        ShapeKind::Disk => {
            let (r, cx, cy) = (uni(sf / 12.0, sf / 5.0), uni(0.0, sf), uni(0.0, sf));
            raster(s, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
        }
        ShapeKind::Rectangle => {
            let (w, h) = (uni(sf / 8.0, sf / 3.0), uni(sf / 8.0, sf / 3.0));
            let (x0, y0) = (uni(0.0, sf - w), uni(0.0, sf - h));
            raster(s, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
        }
        ShapeKind::Triangle => {
            let (cx, cy, r) = (uni(0.0, sf), uni(0.0, sf), uni(sf / 7.0, sf / 4.0));
            let a0 = uni(0.0, 2.0 * PI);
            let v: Vec<(f64, f64)> = (0..3)
                .map(|i| {
                    let a = a0 + 2.0 * PI * i as f64 / 3.0 + uni(-0.4, 0.4);
                    let rr = r * uni(0.7, 1.0);
                    (cx + rr * a.cos(), cy + rr * a.sin())
                })
                .collect();
            let edge = |p: (f64, f64), q: (f64, f64), x: f64, y: f64| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
            raster(s, |x, y| {
                let e = [edge(v[0], v[1], x, y), edge(v[1], v[2], x, y), edge(v[2], v[0], x, y)];
                e.iter().all(|&t| t >= 0.0) || e.iter().all(|&t| t <= 0.0)
            })
        }
        ShapeKind::ThinLine => {
            let len = uni(sf / 4.0, 3.0 * sf / 4.0);
            let a = uni(0.0, PI);
            let (x0, y0) = (uni(0.0, sf), uni(0.0, sf));
            let p0 = (x0 as i64, y0 as i64);
            let p1 = ((x0 + len * a.cos()) as i64, (y0 + len * a.sin()) as i64);
            let width = if rng.gen_bool(0.5) { 1 } else { 2 };
            thin_line_pixels(s, p0, p1, width).0
        }
        ShapeKind::Ring => {
            let (r, cx, cy) = (uni(sf / 8.0, sf / 4.0), uni(0.0, sf), uni(0.0, sf));
            let t = if rng.gen_bool(0.5) { 2.0 } else { 3.0 };
            raster(s, |x, y| {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= r * r && d2 >= (r - t) * (r - t)
            })
        }
    }
}

fn pick_class(rng: &mut Xoshiro256StarStar, spec: &SceneSpec) -> usize {
    let fg: Vec<usize> = (1..spec.num_classes).collect();
    match spec.thin_line_class() {
        Some(thin) if fg.len() > 1 => {
            if rng.gen::<f64>() < spec.thin_line_prob {
                thin
            } else {
                let others: Vec<usize> = fg.into_iter().filter(|&c| c != thin).collect();
                others[rng.gen_range(0..others.len())]
            }
        }
        _ => fg[rng.gen_range(0..fg.len())],
    }
}

/// Draws one scene; the result depends only on `(seed, spec)`.
pub fn generate_sample(seed: u64, spec: &SceneSpec) -> SegSample {
    let s = spec.image_size;
    let c = spec.num_classes;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut labels = vec![0u16; s * s];
    let mut phase = vec![rng.gen_range(0.0..2.0 * PI); s * s];
    let count = rng.gen_range(spec.shapes_min..=spec.shapes_max);
    for _ in 0..count {
        let class = pick_class(&mut rng, spec);
        let kind = spec.kind_of(class).expect("foreground class");
        let p = rng.gen_range(0.0..2.0 * PI);
        // redraw shapes that land entirely off-canvas
        for _ in 0..32 {
            let px = draw_shape(&mut rng, kind, s);
            if !px.is_empty() {
                for i in px {
                    labels[i] = class as u16;
                    phase[i] = p;
                }
                break;
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut image = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let k = labels[i] as usize;
            let base = base_color(k, c);
            let (freq, angle) = texture(k);
            let arg = 2.0 * PI * freq * (x as f64 * angle.cos() + y as f64 * angle.sin()) / s as f64 + phase[i];
            let t = spec.texture_amp * arg.sin();
            for ch in 0..3 {
                let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image[ch * s * s + i] = (base[ch] + t + n).clamp(0.0, 1.0);
            }
        }
    }
    let b = spec.ignore_border_px;
    for y in 0..s {
        for x in 0..s {
            if x < b || y < b || x >= s - b || y >= s - b {
                labels[y * s + x] = IGNORE_LABEL;
            }
        }
    }
    SegSample { size: s, image, labels }
}

/// Majority foreground class (ties to the lowest index).
pub fn classification_view(sample: &SegSample, num_classes: usize) -> Result<(Vec<f64>, u16), DataError> {
    let mut counts = vec![0usize; num_classes];
    for &l in &sample.labels {
        if l != IGNORE_LABEL && (l as usize) < num_classes {
            counts[l as usize] += 1;
        }
    }
    let (mut best, mut best_n) = (0, 0);
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n > best_n {
            best = c;
            best_n = n;
        }
    }
    if best_n == 0 {
        return Err(DataError::BackgroundOnly);
    }
    Ok((sample.image.clone(), best as u16))
}

pub fn image_file(i: usize) -> String {
    format!("image_{i:05}.hfgt")
}

pub fn label_file(i: usize) -> String {
    format!("label_{i:05}.hfgt")
}

/// Writes `n` samples with seeds `base_seed..base_seed + n` plus a manifest
/// holding the spec and the file list. Returns the manifest path.
pub fn generate_dataset(n: usize, base_seed: u64, spec: &SceneSpec, out_dir: &Path) -> Result<PathBuf, DataError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let samples = par::map(n, |i| generate_sample(base_seed.wrapping_add(i as u64), spec));
    let mut manifest = format!("# synthetic scenes: n={n} base_seed={base_seed}\n");
    manifest.push_str(&spec.to_text());
    let s = spec.image_size;
    for (i, sample) in samples.into_iter().enumerate() {
        let (img, lab) = (image_file(i), label_file(i));
        HfgtTensor::f64(&[3, s, s], sample.image).save(&out_dir.join(&img))?;
        HfgtTensor::u16(&[s, s], sample.labels).save(&out_dir.join(&lab))?;
        let _ = writeln!(manifest, "{i}\t{img}\t{lab}");
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn generate(n: usize, base_seed: u64, spec: &SceneSpec) -> Dataset {
        Dataset {
            spec: spec.clone(),
            samples: par::map(n, |i| generate_sample(base_seed.wrapping_add(i as u64), spec)),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads a directory written by [`generate_dataset`].
    pub fn load(dir: &Path) -> Result<Dataset, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut spec_lines = String::new();
        let mut files = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.contains('\t') {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 3 {
                    return Err(DataError::Manifest {
                        path: path.clone(),
                        line: i + 1,
                        msg: "expected index, image file, label file".into(),
                    });
                }
                files.push((cols[1].to_string(), cols[2].to_string()));
            } else {
                spec_lines.push_str(line);
                spec_lines.push('\n');
            }
        }
        let mut spec = SceneSpec::default();
        for (k, v) in parse_lines(&spec_lines)? {
            spec.set(&k, &v)?;
        }
        spec.validate()?;
        let s = spec.image_size;
        let mut samples = Vec::with_capacity(files.len());
        for (img, lab) in files {
            let (dims, image) = HfgtTensor::load(&dir.join(&img))?.into_f64()?;
            let (ldims, labels) = HfgtTensor::load(&dir.join(&lab))?.into_u16()?;
            if dims != [3, s, s] || ldims != [s, s] {
                return Err(DataError::Manifest {
                    path: dir.join(&img),
                    line: 0,
                    msg: format!("shapes {dims:?} / {ldims:?} do not match image_size {s}"),
                });
            }
            samples.push(SegSample { size: s, image, labels });
        }
        Ok(Dataset { spec, samples })
    }
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, S, S]`.
    pub images: Tensor,
    /// `B * S * S` labels, row-major per sample.
    pub labels: Vec<u16>,
    pub size: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks samples, mirroring left-right those with `flip[i]` set.
pub fn make_batch(samples: &[&SegSample], flip: &[bool]) -> Batch {
    let s = samples[0].size;
    let plane = s * s;
    let mut images = Vec::with_capacity(samples.len() * 3 * plane);
    let mut labels = Vec::with_capacity(samples.len() * plane);
    for (k, sample) in samples.iter().enumerate() {
        let f = flip.get(k).copied().unwrap_or(false);
        let col = |x: usize| if f { s - 1 - x } else { x };
        for ch in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    images.push(sample.image[ch * plane + y * s + col(x)]);
                }
            }
        }
        for y in 0..s {
            for x in 0..s {
                labels.push(sample.labels[y * s + col(x)]);
            }
        }
    }
    Batch {
        images: Tensor::new(&[samples.len(), 3, s, s], images).expect("stacked batch"),
        labels,
        size: s,
    }
}
