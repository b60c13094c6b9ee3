//! Synthetic biased-dataset generators, the inverted-test split, bias
//! diagnostics, and dataset serialization.
//!
//! Each generator plants an easy-to-learn bias attribute that nearly
//! determines the target label: a foreground color, a whole-image
//! corruption, or a high-margin tabular dimension. Bias-conflicting
//! samples (bias label != target) are the scarce minority controlled by
//! `bias_ratio`; the test split mirrors the ratio so shortcut-reliant
//! models fail there.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::rng::Rng;

const DATASET_MAGIC: &[u8; 4] = b"CFN1";
const DATASET_VERSION: u32 = 1;

/// Stream-id bases keeping per-sample draws, per-class shape masks, and
/// bias-label draws on disjoint RNG streams.
const SAMPLE_STREAM_BASE: u64 = 0;
const MASK_STREAM_BASE: u64 = 1 << 40;
const BIAS_STREAM_BASE: u64 = 1 << 41;

/// Ten maximally spread hues (36-degree steps, full saturation/value).
pub const PALETTE: [[f32; 3]; 10] = [
    [1.0, 0.0, 0.0],
    [1.0, 0.6, 0.0],
    [0.8, 1.0, 0.0],
    [0.2, 1.0, 0.0],
    [0.0, 1.0, 0.4],
    [0.0, 1.0, 1.0],
    [0.0, 0.4, 1.0],
    [0.2, 0.0, 1.0],
    [0.8, 0.0, 1.0],
    [1.0, 0.0, 0.6],
];

/// Foreground density of the per-class shape masks.
const MASK_DENSITY: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Color-painted shape masks on a 3-channel grid.
    ColorGrid,
    /// Grayscale shape masks with a per-bias whole-image corruption.
    CorruptGrid,
    /// Tabular: hard one-hot signal dims plus one easy high-margin bias dim.
    GaussianBias,
}

impl DatasetKind {
    fn tag(self) -> u8 {
        match self {
            DatasetKind::ColorGrid => 0,
            DatasetKind::CorruptGrid => 1,
            DatasetKind::GaussianBias => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DatasetKind::ColorGrid),
            1 => Ok(DatasetKind::CorruptGrid),
            2 => Ok(DatasetKind::GaussianBias),
            other => Err(Error::Format(format!("unknown dataset kind tag {other}"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetKind::ColorGrid => "colorgrid",
            DatasetKind::CorruptGrid => "corruptgrid",
            DatasetKind::GaussianBias => "gaussianbias",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "colorgrid" => Ok(DatasetKind::ColorGrid),
            "corruptgrid" => Ok(DatasetKind::CorruptGrid),
            "gaussianbias" => Ok(DatasetKind::GaussianBias),
            other => Err(Error::Config(format!("unknown dataset kind '{other}'"))),
        }
    }
}

/// One sample: features, target label, bias-attribute label, and the
/// alignment flag (`aligned == (bias == y)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f32>,
    pub y: u16,
    pub bias: u16,
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasedDataset {
    pub samples: Vec<Sample>,
    pub class_count: usize,
    pub input_dim: usize,
    /// Fraction of bias-conflicting samples.
    pub bias_ratio: f64,
    pub kind: DatasetKind,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub class_count: usize,
    /// Grid side length for the image kinds.
    pub grid: usize,
    /// Fraction of bias-conflicting samples, in [0, 1].
    pub bias_ratio: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            kind: DatasetKind::ColorGrid,
            n: 10_000,
            class_count: 10,
            grid: 14,
            bias_ratio: 0.01,
            noise_std: 0.25,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias_ratio) {
            return Err(Error::Config(format!(
                "bias_ratio must be in [0, 1], got {}",
                self.bias_ratio
            )));
        }
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.n < self.class_count {
            return Err(Error::Config(format!(
                "n ({}) must be >= class_count ({})",
                self.n, self.class_count
            )));
        }
        if self.kind != DatasetKind::GaussianBias && self.grid < 3 {
            return Err(Error::Config(format!("grid must be >= 3, got {}", self.grid)));
        }
        if self.kind == DatasetKind::ColorGrid && self.class_count > PALETTE.len() {
            return Err(Error::Config(format!(
                "colorgrid supports at most {} classes",
                PALETTE.len()
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            DatasetKind::ColorGrid => 3 * self.grid * self.grid,
            DatasetKind::CorruptGrid => self.grid * self.grid,
            DatasetKind::GaussianBias => self.class_count + 1,
        }
    }
}

/// Generates a dataset with exactly `round(n * bias_ratio)` conflicting
/// samples.
pub fn generate(cfg: &GenConfig) -> Result<BiasedDataset> {
    let bc = (cfg.n as f64 * cfg.bias_ratio).round() as usize;
    generate_with_bc_count(cfg, bc)
}

/// Generates with an explicit bias-conflicting count; the pool builder
/// behind `generate` and the split protocol's mirrored test sets.
pub fn generate_with_bc_count(cfg: &GenConfig, bc_count: usize) -> Result<BiasedDataset> {
    cfg.validate()?;
    if bc_count > cfg.n {
        return Err(Error::Config(format!(
            "conflicting count {bc_count} exceeds n {}",
            cfg.n
        )));
    }
    let c = cfg.class_count;
    let masks = match cfg.kind {
        DatasetKind::GaussianBias => Vec::new(),
        _ => (0..c).map(|cls| shape_mask(cfg, cls)).collect(),
    };
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        // Round-robin classes keep per-class counts balanced within +/-1;
        // the first bc_count samples are the conflicting ones, spread
        // evenly over classes by the same round-robin.
        let y = (i % c) as u16;
        let conflicting = i < bc_count;
        let bias = if conflicting {
            let mut r = Rng::new(cfg.seed, BIAS_STREAM_BASE + i as u64);
            let draw = r.below(c - 1) as u16;
            if draw >= y {
                draw + 1
            } else {
                draw
            }
        } else {
            y
        };
        let mut r = Rng::new(cfg.seed, SAMPLE_STREAM_BASE + i as u64);
        let x = match cfg.kind {
            DatasetKind::ColorGrid => render_color(cfg, &masks[y as usize], bias, &mut r),
            DatasetKind::CorruptGrid => render_corrupt(cfg, &masks[y as usize], bias, &mut r),
            DatasetKind::GaussianBias => render_gaussian(cfg, y, bias, &mut r),
        };
        samples.push(Sample {
            x,
            y,
            bias,
            aligned: !conflicting,
        });
    }
    Ok(BiasedDataset {
        samples,
        class_count: c,
        input_dim: cfg.input_dim(),
        bias_ratio: bc_count as f64 / cfg.n as f64,
        kind: cfg.kind,
    })
}

/// Fixed pseudo-random binary shape mask for one class.
fn shape_mask(cfg: &GenConfig, class: usize) -> Vec<bool> {
    let mut r = Rng::new(cfg.seed, MASK_STREAM_BASE + class as u64);
    (0..cfg.grid * cfg.grid)
        .map(|_| r.uniform() < MASK_DENSITY)
        .collect()
}

/// Mask shifted by (dx, dy); pixels shifted off the grid are dropped.
fn jittered(mask: &[bool], grid: usize, dx: isize, dy: isize) -> Vec<bool> {
    let mut out = vec![false; grid * grid];
    for yy in 0..grid as isize {
        for xx in 0..grid as isize {
            let sx = xx - dx;
            let sy = yy - dy;
            if sx >= 0 && sx < grid as isize && sy >= 0 && sy < grid as isize {
                out[(yy * grid as isize + xx) as usize] =
                    mask[(sy * grid as isize + sx) as usize];
            }
        }
    }
    out
}

/// Draw order per sample: jitter dx, jitter dy, then noise. Keeping the
/// order fixed makes every sample a pure function of (seed, index).
fn draw_jitter(r: &mut Rng) -> (isize, isize) {
    let dx = r.below(3) as isize - 1;
    let dy = r.below(3) as isize - 1;
    (dx, dy)
}

fn render_color(cfg: &GenConfig, mask: &[bool], bias: u16, r: &mut Rng) -> Vec<f32> {
    let g2 = cfg.grid * cfg.grid;
    let (dx, dy) = draw_jitter(r);
    let m = jittered(mask, cfg.grid, dx, dy);
    let color = PALETTE[bias as usize];
    let mut x = vec![0.0f32; 3 * g2];
    for (pix, &on) in m.iter().enumerate() {
        if on {
            for ch in 0..3 {
                x[ch * g2 + pix] = color[ch];
            }
        }
    }
    add_noise(&mut x, cfg.noise_std, r);
    x
}

fn render_corrupt(cfg: &GenConfig, mask: &[bool], bias: u16, r: &mut Rng) -> Vec<f32> {
    let grid = cfg.grid;
    let (dx, dy) = draw_jitter(r);
    let m = jittered(mask, grid, dx, dy);
    let mut x: Vec<f32> = m.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect();
    corrupt(&mut x, grid, bias as usize % 10);
    add_noise(&mut x, cfg.noise_std, r);
    x
}

/// Deterministic whole-image corruption selected by the bias label:
/// blurs, brightness/contrast shifts, and structured additive patterns.
fn corrupt(x: &mut [f32], grid: usize, which: usize) {
    match which {
        0 => box_blur(x, grid),
        1 => {
            box_blur(x, grid);
            box_blur(x, grid);
        }
        2 => {
            for v in x.iter_mut() {
                *v += 0.4;
            }
        }
        3 => {
            for v in x.iter_mut() {
                *v -= 0.4;
            }
        }
        4 => {
            for v in x.iter_mut() {
                *v = 0.5 + (*v - 0.5) * 1.6;
            }
        }
        5 => {
            for v in x.iter_mut() {
                *v = 0.5 + (*v - 0.5) * 0.5;
            }
        }
        6 => add_wave(x, grid, 1.0, 0.0),
        7 => add_wave(x, grid, 0.0, 1.0),
        8 => add_wave(x, grid, 1.0, 1.0),
        _ => {
            for yy in 0..grid {
                for xx in 0..grid {
                    if (xx / 2 + yy / 2) % 2 == 0 {
                        x[yy * grid + xx] += 0.4;
                    }
                }
            }
        }
    }
}

fn box_blur(x: &mut [f32], grid: usize) {
    let src = x.to_vec();
    for yy in 0..grid as isize {
        for xx in 0..grid as isize {
            let mut acc = 0.0f32;
            let mut cnt = 0.0f32;
            for oy in -1..=1 {
                for ox in -1..=1 {
                    let sx = xx + ox;
                    let sy = yy + oy;
                    if sx >= 0 && sx < grid as isize && sy >= 0 && sy < grid as isize {
                        acc += src[(sy * grid as isize + sx) as usize];
                        cnt += 1.0;
                    }
                }
            }
            x[(yy * grid as isize + xx) as usize] = acc / cnt;
        }
    }
}

fn add_wave(x: &mut [f32], grid: usize, fx: f32, fy: f32) {
    for yy in 0..grid {
        for xx in 0..grid {
            let phase =
                2.0 * std::f32::consts::PI * (fx * xx as f32 + fy * yy as f32) / 4.0;
            x[yy * grid + xx] += 0.4 * phase.sin();
        }
    }
}

/// Hard signal: one-hot class mean with unit margin. Easy bias: a single
/// dimension stepping 6 noise-sigmas per bias label.
const GAUSSIAN_HARD_MARGIN: f64 = 1.0;
const GAUSSIAN_EASY_STEP_SIGMAS: f64 = 6.0;

fn render_gaussian(cfg: &GenConfig, y: u16, bias: u16, r: &mut Rng) -> Vec<f32> {
    let c = cfg.class_count;
    let sigma = if cfg.noise_std > 0.0 { cfg.noise_std } else { 1.0 };
    let mut x = Vec::with_capacity(c + 1);
    for j in 0..c {
        let mean = if j == y as usize { GAUSSIAN_HARD_MARGIN } else { 0.0 };
        x.push((mean + r.normal(0.0, sigma)) as f32);
    }
    let easy = bias as f64 * GAUSSIAN_EASY_STEP_SIGMAS * sigma + r.normal(0.0, sigma);
    x.push(easy as f32);
    x
}

fn add_noise(x: &mut [f32], std: f64, r: &mut Rng) {
    if std == 0.0 {
        return;
    }
    for v in x.iter_mut() {
        *v += r.normal(0.0, std) as f32;
    }
}

/// Bayes accuracy of the signal dimensions alone for the tabular
/// generator: P(argmax_j x_j == y) with one-hot means and isotropic noise,
/// integrated by Simpson's rule.
pub fn gaussian_signal_bayes_rate(class_count: usize, noise_std: f64) -> f64 {
    let sigma = if noise_std > 0.0 { noise_std } else { 1.0 };
    let m = GAUSSIAN_HARD_MARGIN / sigma;
    // acc = Int phi(t) Phi(t + m)^(C-1) dt
    let lo = -10.0;
    let hi = 10.0 + m;
    let steps = 4000; // even
    let h = (hi - lo) / steps as f64;
    let f = |t: f64| -> f64 {
        let phi = (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi * std_normal_cdf(t + m).powi(class_count as i32 - 1)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..steps {
        let t = lo + i as f64 * h;
        acc += f(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Abramowitz-Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Partitions `ds` into train/test where the test alignment ratio mirrors
/// the train ratio (the inverted-test protocol). Selection is class
/// balanced within each alignment group; `rng` only shuffles candidate
/// order, never counts.
pub fn split_protocol(
    ds: &BiasedDataset,
    rng: &mut Rng,
    test_fraction: f64,
) -> Result<(BiasedDataset, BiasedDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = ds.samples.len();
    if n == 0 {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let test_n = (n as f64 * test_fraction).round() as usize;
    let train_n = n - test_n;
    if test_n == 0 || train_n == 0 {
        return Err(Error::Config("split leaves an empty side".into()));
    }
    let r = ds.bias_ratio;
    let test_bc = (test_n as f64 * (1.0 - r)).round() as usize;
    let test_ba = test_n - test_bc;
    let train_bc = (train_n as f64 * r).round() as usize;

    // Per-class candidate lists per alignment group, shuffled, then
    // interleaved round-robin so any prefix stays class balanced.
    let interleave = |aligned: bool, rng: &mut Rng| -> Vec<usize> {
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
        for (i, s) in ds.samples.iter().enumerate() {
            if s.aligned == aligned {
                per_class[s.y as usize].push(i);
            }
        }
        for list in &mut per_class {
            rng.shuffle(list);
        }
        let mut out = Vec::new();
        let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
        for depth in 0..longest {
            for list in &per_class {
                if let Some(&idx) = list.get(depth) {
                    out.push(idx);
                }
            }
        }
        out
    };
    let bc_pool = interleave(false, rng);
    let ba_pool = interleave(true, rng);
    if bc_pool.len() < test_bc + train_bc {
        return Err(Error::Config(format!(
            "insufficient bias-conflicting samples: need {} for test and {} for train, have {}",
            test_bc,
            train_bc,
            bc_pool.len()
        )));
    }
    if ba_pool.len() < test_ba {
        return Err(Error::Config(format!(
            "insufficient bias-aligned samples: need {test_ba}, have {}",
            ba_pool.len()
        )));
    }

    let mut in_test = vec![false; n];
    for &i in bc_pool.iter().take(test_bc) {
        in_test[i] = true;
    }
    for &i in ba_pool.iter().take(test_ba) {
        in_test[i] = true;
    }
    let mut train_samples = Vec::with_capacity(train_n);
    let mut test_samples = Vec::with_capacity(test_n);
    for (i, s) in ds.samples.iter().enumerate() {
        if in_test[i] {
            test_samples.push(s.clone());
        } else {
            train_samples.push(s.clone());
        }
    }
    let make = |samples: Vec<Sample>| -> BiasedDataset {
        let bc = samples.iter().filter(|s| !s.aligned).count();
        let ratio = bc as f64 / samples.len() as f64;
        BiasedDataset {
            samples,
            class_count: ds.class_count,
            input_dim: ds.input_dim,
            bias_ratio: ratio,
            kind: ds.kind,
        }
    };
    Ok((make(train_samples), make(test_samples)))
}

/// Empirical conditional entropy H(y | bias) in nats, with 0 ln 0 := 0.
pub fn conditional_entropy(ds: &BiasedDataset) -> f64 {
    if ds.samples.is_empty() {
        return 0.0;
    }
    let c = ds.class_count;
    let mut counts = vec![0usize; c * c]; // [bias][y]
    for s in &ds.samples {
        counts[s.bias as usize * c + s.y as usize] += 1;
    }
    let n = ds.samples.len() as f64;
    let mut h = 0.0;
    for b in 0..c {
        let nb: usize = counts[b * c..(b + 1) * c].iter().sum();
        if nb == 0 {
            continue;
        }
        let pb = nb as f64 / n;
        let mut hy = 0.0;
        for y in 0..c {
            let nyb = counts[b * c + y];
            if nyb == 0 {
                continue;
            }
            let p = nyb as f64 / nb as f64;
            hy -= p * p.ln();
        }
        h += pb * hy;
    }
    h
}

/// Writes the dataset format: magic `CFN1`, version, counts, then per
/// sample the f32 features and u16 labels.
pub fn save(ds: &BiasedDataset, path: &Path) -> Result<()> {
    if ds.samples.is_empty() {
        return Err(Error::Config("refusing to save an empty dataset".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    w.write_u32::<LittleEndian>(ds.samples.len() as u32)?;
    w.write_u32::<LittleEndian>(ds.input_dim as u32)?;
    w.write_u16::<LittleEndian>(ds.class_count as u16)?;
    w.write_u8(ds.kind.tag())?;
    w.write_f32::<LittleEndian>(ds.bias_ratio as f32)?;
    for s in &ds.samples {
        if s.x.len() != ds.input_dim {
            return Err(Error::shape("dataset_save", "sample width mismatch"));
        }
        for v in &s.x {
            w.write_f32::<LittleEndian>(*v)?;
        }
        w.write_u16::<LittleEndian>(s.y)?;
        w.write_u16::<LittleEndian>(s.bias)?;
        w.write_u8(u8::from(s.aligned))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BiasedDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("dataset truncated before magic".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad dataset magic {magic:?}, expected {DATASET_MAGIC:?}"
        )));
    }
    let version = trunc(r.read_u32::<LittleEndian>())?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = trunc(r.read_u32::<LittleEndian>())? as usize;
    let input_dim = trunc(r.read_u32::<LittleEndian>())? as usize;
    let class_count = trunc(r.read_u16::<LittleEndian>())? as usize;
    let kind = DatasetKind::from_tag(trunc(r.read_u8())?)?;
    let bias_ratio = trunc(r.read_f32::<LittleEndian>())? as f64;
    if n == 0 || input_dim == 0 || class_count == 0 {
        return Err(Error::Format("dataset header has zero counts".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = vec![0.0f32; input_dim];
        for v in &mut x {
            *v = trunc(r.read_f32::<LittleEndian>())?;
        }
        let y = trunc(r.read_u16::<LittleEndian>())?;
        let bias = trunc(r.read_u16::<LittleEndian>())?;
        let aligned = match trunc(r.read_u8())? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Format(format!(
                    "invalid aligned flag {other} in dataset"
                )))
            }
        };
        if y as usize >= class_count || bias as usize >= class_count {
            return Err(Error::Format("label out of range in dataset".into()));
        }
        if aligned != (bias == y) {
            return Err(Error::Format("aligned flag inconsistent with labels".into()));
        }
        samples.push(Sample { x, y, bias, aligned });
    }
    Ok(BiasedDataset {
        samples,
        class_count,
        input_dim,
        bias_ratio,
        kind,
    })
}

fn trunc<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|_| Error::Format("dataset truncated".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, ratio: f64) -> GenConfig {
        GenConfig {
            n,
            bias_ratio: ratio,
            grid: 8,
            ..GenConfig::default()
        }
    }

    #[test]
    fn conflicting_count_is_exact_rounding() {
        let ds = generate(&cfg(1000, 0.01)).unwrap();
        let bc = ds.samples.iter().filter(|s| !s.aligned).count();
        assert_eq!(bc, 10);
        assert_eq!(ds.samples.len() - bc, 990);
        // The published 1%-ratio counts (54509/491 of 55000) deviate from
        // exact rounding; this generator uses round(n * ratio) = 550.
        let big = (55_000f64 * 0.01).round() as usize;
        assert_eq!(big, 550);
    }

    #[test]
    fn per_class_counts_balanced() {
        let ds = generate(&cfg(1003, 0.05)).unwrap();
        let mut counts = vec![0usize; ds.class_count];
        for s in &ds.samples {
            counts[s.y as usize] += 1;
        }
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn aligned_flag_matches_labels() {
        let ds = generate(&cfg(500, 0.2)).unwrap();
        for s in &ds.samples {
            assert_eq!(s.aligned, s.bias == s.y);
        }
    }

    #[test]
    fn noise_free_same_class_duplicates_exist() {
        // With zero noise, x depends only on (class, bias, jitter); nine
        // jitter offsets mean any ten aligned samples of one class must
        // contain an identical pair.
        let mut c = cfg(200, 0.0);
        c.noise_std = 0.0;
        let ds = generate(&c).unwrap();
        let class0: Vec<&Sample> = ds.samples.iter().filter(|s| s.y == 0).collect();
        assert!(class0.len() >= 10);
        let mut found = false;
        'outer: for i in 0..class0.len() {
            for j in i + 1..class0.len() {
                if class0[i].x == class0[j].x {
                    found = true;
                    break 'outer;
                }
            }
        }
        assert!(found, "no identical pair among noise-free aligned samples");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&cfg(300, 0.05)).unwrap();
        let b = generate(&cfg(300, 0.05)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_and_gaussian_kinds_generate() {
        for kind in [DatasetKind::CorruptGrid, DatasetKind::GaussianBias] {
            let mut c = cfg(120, 0.1);
            c.kind = kind;
            let ds = generate(&c).unwrap();
            assert_eq!(ds.samples.len(), 120);
            assert_eq!(ds.input_dim, c.input_dim());
            assert!(ds
                .samples
                .iter()
                .all(|s| s.x.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn split_mirrors_ratio() {
        // Pool sized so train keeps 1% conflicting while the test side is
        // 99% conflicting.
        let n_train = 1000;
        let n_test = 200;
        let train_bc = 10;
        let test_bc = 198;
        let mut c = cfg(n_train + n_test, 0.01);
        c.bias_ratio = train_bc as f64 / n_train as f64;
        let pool = generate_with_bc_count(&c, train_bc + test_bc).unwrap();
        // Carry the train-side target ratio on the pool.
        let pool = BiasedDataset {
            bias_ratio: 0.01,
            ..pool
        };
        let mut rng = Rng::new(1, 0);
        let (train, test) =
            split_protocol(&pool, &mut rng, n_test as f64 / (n_train + n_test) as f64)
                .unwrap();
        assert_eq!(train.samples.len(), n_train);
        assert_eq!(test.samples.len(), n_test);
        let train_bc_got = train.samples.iter().filter(|s| !s.aligned).count();
        let test_bc_got = test.samples.iter().filter(|s| !s.aligned).count();
        assert_eq!(train_bc_got, train_bc);
        assert_eq!(test_bc_got, test_bc);
    }

    #[test]
    fn split_fifty_fifty_stays_balanced() {
        let ds = generate(&cfg(1000, 0.5)).unwrap();
        let mut rng = Rng::new(2, 0);
        let (train, test) = split_protocol(&ds, &mut rng, 0.5).unwrap();
        for side in [&train, &test] {
            let bc = side.samples.iter().filter(|s| !s.aligned).count();
            assert_eq!(bc, side.samples.len() / 2);
        }
    }

    #[test]
    fn split_is_disjoint_partition() {
        let ds = generate(&cfg(400, 0.5)).unwrap();
        let mut rng = Rng::new(3, 0);
        let (train, test) = split_protocol(&ds, &mut rng, 0.25).unwrap();
        assert_eq!(train.samples.len() + test.samples.len(), 400);
        // Features are unique with noise on, so containment checks work
        // through them.
        let mut seen: Vec<&Vec<f32>> = train.samples.iter().map(|s| &s.x).collect();
        for s in &test.samples {
            assert!(!seen.contains(&&s.x));
            seen.push(&s.x);
        }
    }

    #[test]
    fn split_rejects_insufficient_groups() {
        let ds = generate(&cfg(1000, 0.01)).unwrap();
        let mut rng = Rng::new(4, 0);
        // Mirrored test side would need ~99% conflicting samples.
        assert!(split_protocol(&ds, &mut rng, 0.5).is_err());
    }

    #[test]
    fn entropy_zero_at_perfect_correlation() {
        let ds = generate(&cfg(500, 0.0)).unwrap();
        assert_eq!(conditional_entropy(&ds), 0.0);
    }

    #[test]
    fn entropy_near_ln_c_for_independent_bias() {
        // Conflicting fraction (C-1)/C with uniform off-label bias makes
        // bias independent of y.
        let mut c = cfg(100_000, 0.9);
        c.kind = DatasetKind::GaussianBias;
        let ds = generate(&c).unwrap();
        let h = conditional_entropy(&ds);
        assert!((h - 10f64.ln()).abs() < 0.01, "H = {h}");
    }

    #[test]
    fn entropy_matches_direct_tabulation_oracle() {
        let ds = generate(&cfg(2000, 0.05)).unwrap();
        // Independent plug-in computation over the joint table.
        let c = ds.class_count;
        let n = ds.samples.len() as f64;
        let mut joint = vec![vec![0f64; c]; c];
        for s in &ds.samples {
            joint[s.bias as usize][s.y as usize] += 1.0;
        }
        let mut expected = 0.0;
        for b in 0..c {
            let nb: f64 = joint[b].iter().sum();
            if nb == 0.0 {
                continue;
            }
            for y in 0..c {
                if joint[b][y] > 0.0 {
                    let p_by = joint[b][y] / n;
                    let p_y_given_b = joint[b][y] / nb;
                    expected -= p_by * p_y_given_b.ln();
                }
            }
        }
        assert!((conditional_entropy(&ds) - expected).abs() < 1e-12);
    }

    #[test]
    fn entropy_monotone_in_ratio() {
        let mut last = -1.0;
        for ratio in [0.0, 0.05, 0.2, 0.5, 0.9] {
            let mut c = cfg(20_000, ratio);
            c.kind = DatasetKind::GaussianBias;
            let h = conditional_entropy(&generate(&c).unwrap());
            assert!(h >= last - 1e-9, "ratio {ratio}: {h} < {last}");
            last = h;
        }
    }

    #[test]
    fn color_probe_separates_aligned_samples() {
        // Mean channel values recover the bias color essentially
        // perfectly; the bias must be easy to learn.
        let ds = generate(&GenConfig {
            n: 2000,
            bias_ratio: 0.01,
            ..GenConfig::default()
        })
        .unwrap();
        let g2 = ds.input_dim / 3;
        let feats: Vec<([f64; 3], u16, bool)> = ds
            .samples
            .iter()
            .map(|s| {
                let mut m = [0.0f64; 3];
                for ch in 0..3 {
                    m[ch] = s.x[ch * g2..(ch + 1) * g2]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>()
                        / g2 as f64;
                }
                (m, s.bias, s.aligned)
            })
            .collect();
        // Centroids from aligned samples only.
        let mut centroids = vec![[0.0f64; 3]; ds.class_count];
        let mut counts = vec![0usize; ds.class_count];
        for (m, bias, aligned) in &feats {
            if *aligned {
                for ch in 0..3 {
                    centroids[*bias as usize][ch] += m[ch];
                }
                counts[*bias as usize] += 1;
            }
        }
        for (cent, &cnt) in centroids.iter_mut().zip(&counts) {
            for ch in 0..3 {
                cent[ch] /= cnt as f64;
            }
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for (m, bias, aligned) in &feats {
            if !*aligned {
                continue;
            }
            total += 1;
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, cent) in centroids.iter().enumerate() {
                let d: f64 = (0..3).map(|ch| (m[ch] - cent[ch]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best == *bias as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.99, "color probe accuracy {acc}");
    }

    #[test]
    fn gaussian_bayes_rate_matches_two_class_closed_form() {
        // C = 2: accuracy = Phi(margin / (sigma * sqrt(2))).
        let rate = gaussian_signal_bayes_rate(2, 1.0);
        let expected = std_normal_cdf(1.0 / std::f64::consts::SQRT_2);
        assert!((rate - expected).abs() < 1e-6, "{rate} vs {expected}");
    }

    #[test]
    fn save_load_round_trip_is_structural_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.cfn1");
        let ds = generate(&cfg(150, 0.1)).unwrap();
        save(&ds, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(ds.samples, loaded.samples);
        assert_eq!(ds.class_count, loaded.class_count);
        assert_eq!(ds.input_dim, loaded.input_dim);
        assert_eq!(ds.kind, loaded.kind);
    }

    #[test]
    fn save_rejects_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = BiasedDataset {
            samples: Vec::new(),
            class_count: 10,
            input_dim: 4,
            bias_ratio: 0.0,
            kind: DatasetKind::ColorGrid,
        };
        assert!(save(&ds, &dir.path().join("empty.cfn1")).is_err());
    }

    #[test]
    fn load_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.cfn1");
        let ds = generate(&cfg(50, 0.1)).unwrap();
        save(&ds, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'Z';
        let bad = dir.path().join("bad.cfn1");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load(&bad), Err(Error::Format(_))));

        let orig = std::fs::read(&path).unwrap();
        let truncpath = dir.path().join("trunc.cfn1");
        std::fs::write(&truncpath, &orig[..orig.len() - 3]).unwrap();
        assert!(matches!(load(&truncpath), Err(Error::Format(_))));
    }
}
