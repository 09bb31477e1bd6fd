//! Synthetic scribble-supervised segmentation data. Each sample is a
//! cardiac-like arrangement of four classes: background (0), an elliptical
//! ring (1), the disk it encloses (2), and an adjacent blob clipped to the
//! background (3). Scribbles are one-pixel-wide random walks confined to
//! their region, so they agree with the dense mask by construction.
//!
//! Everything here is a pure function of (parameters, seed): generation,
//! augmentation, and corruption derive per-sample ChaCha streams and never
//! touch a global RNG.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, ScribbleMask};
use crate::rng::derive_rng;
use crate::tensor::Tensor;
use crate::tnsr;

/// Tag separating the generator's seed space from other consumers of the
/// same root seed.
const SEED_TAG_SAMPLE: u64 = 0x01;

const MANIFEST_VERSION: u32 = 1;
const SHAPE_FAMILY: &str = "ring-disk-blob";

/// The generator draws exactly these anatomies, so K is fixed.
pub const GENERATED_CLASSES: usize = 4;

/// Fraction of the image the scribbles cover, by construction: walks stop at
/// a per-class pixel budget that sums to the midpoint of this band.
const COVERAGE_BAND: (f64, f64) = (0.01, 0.05);

/// Per-class base intensities; the out-of-distribution set shifts every
/// class mean by at least 0.15 and widens texture and noise.
const MEANS_IN_DIST: [f64; 4] = [0.15, 0.40, 0.90, 0.65];
const MEANS_OOD: [f64; 4] = [0.42, 0.65, 0.70, 0.88];
const MEAN_JITTER: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How to corrupt an image: additive Gaussian noise with `sigma` in
/// intensity units, or Gaussian blur with `sigma` as a fraction of the image
/// width (std in pixels = sigma * W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptKind {
    Noise,
    Blur,
}

/// One sample: intensities in [0,1], sparse scribble annotation, and the
/// dense ground truth the scribble was drawn inside.
#[derive(Debug, Clone, PartialEq)]
pub struct ScribbleSample {
    pub id: String,
    /// [1, H, W]
    pub image: Tensor,
    pub scribble: ScribbleMask,
    pub mask: LabelMap,
}

impl ScribbleSample {
    /// Checks every cross-field invariant; `read` runs this on each loaded
    /// sample and `generate` on each fresh one.
    pub fn validate(&self, num_classes: usize, height: usize, width: usize) -> Result<()> {
        let fail = |detail: String| Err(Error::Dataset(format!("sample {}: {detail}", self.id)));
        if self.image.shape() != [1, height, width] {
            return fail(format!(
                "image shape {:?} is not [1, {height}, {width}]",
                self.image.shape()
            ));
        }
        if self.mask.height() != height || self.mask.width() != width {
            return fail("mask extents disagree with the image".into());
        }
        if self.scribble.height() != height
            || self.scribble.width() != width
            || self.scribble.num_classes() != num_classes
        {
            return fail("scribble extents or class count disagree with the image".into());
        }
        if !self.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return fail("intensities stray outside [0, 1]".into());
        }
        if let Some(&bad) = self
            .mask
            .data()
            .iter()
            .find(|&&v| usize::from(v) >= num_classes)
        {
            return fail(format!("mask value {bad} is not a class id below {num_classes}"));
        }
        for (i, (&s, &m)) in self
            .scribble
            .labels()
            .data()
            .iter()
            .zip(self.mask.data())
            .enumerate()
        {
            if s != self.scribble.sentinel() && s != m {
                return fail(format!(
                    "scribble says class {s} but the mask says {m} at pixel {i}"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: PathBuf,
    pub scribble: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub shape_family: String,
    pub ood: bool,
    pub splits: SplitIds,
    pub samples: Vec<SampleEntry>,
}

/// A manifest plus its loaded samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    samples: Vec<ScribbleSample>,
    index: HashMap<String, usize>,
}

impl Dataset {
    fn assemble(manifest: DatasetManifest, samples: Vec<ScribbleSample>) -> Self {
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Dataset {
            manifest,
            samples,
            index,
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn samples(&self) -> &[ScribbleSample] {
        &self.samples
    }

    pub fn get(&self, id: &str) -> Option<&ScribbleSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn split(&self, split: Split) -> Vec<&ScribbleSample> {
        let ids = match split {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
        };
        ids.iter()
            .map(|id| self.get(id).expect("manifest ids are validated"))
            .collect()
    }

    /// Replace every image through `f`, leaving labels untouched.
    pub fn map_samples(
        &self,
        mut f: impl FnMut(&ScribbleSample) -> Result<ScribbleSample>,
    ) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(&mut f)
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::assemble(self.manifest.clone(), samples))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub ood: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            n_samples: 280,
            height: 64,
            width: 64,
            num_classes: GENERATED_CLASSES,
            ood: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != GENERATED_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "the synthetic anatomy defines exactly {GENERATED_CLASSES} classes, got {}",
                self.num_classes
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidConfig(format!(
                "image extents {}x{} leave no room for the structures; need at least 16x16",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Axis-aligned-after-rotation ellipse membership test.
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, ax: f64, ay: f64, theta: f64) -> Self {
        Ellipse {
            cx,
            cy,
            ax,
            ay,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        }
    }

    /// Normalized squared radius; <= 1 means inside.
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.ax;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.ay;
        u * u + v * v
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.rho2(x, y) <= 1.0
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Paint the dense class map for one geometry draw. The blob only claims
/// background pixels, so it hugs the ring without breaking it.
fn paint_mask(rng: &mut impl Rng, h: usize, w: usize, ood: bool) -> LabelMap {
    let m = h.min(w) as f64;
    let cx = w as f64 / 2.0 + uniform(rng, -0.08, 0.08) * w as f64;
    let cy = h as f64 / 2.0 + uniform(rng, -0.08, 0.08) * h as f64;
    let r_out = uniform(rng, 0.18, 0.26) * m;
    let ecc = if ood {
        uniform(rng, 0.18, 0.32)
    } else {
        uniform(rng, 0.0, 0.12)
    };
    let theta = uniform(rng, 0.0, PI);
    let inner_ratio = uniform(rng, 0.45, 0.62);
    let outer = Ellipse::new(cx, cy, r_out * (1.0 + ecc), r_out * (1.0 - ecc), theta);
    let inner = Ellipse::new(
        cx,
        cy,
        outer.ax * inner_ratio,
        outer.ay * inner_ratio,
        theta,
    );

    let phi = uniform(rng, 0.0, 2.0 * PI);
    let dist = r_out * uniform(rng, 1.35, 1.65);
    let r_blob = r_out * uniform(rng, 0.45, 0.70);
    let becc = uniform(rng, 0.0, 0.20);
    let btheta = uniform(rng, 0.0, PI);
    let blob = Ellipse::new(
        cx + dist * phi.cos(),
        cy + dist * phi.sin(),
        r_blob * (1.0 + becc),
        r_blob * (1.0 - becc),
        btheta,
    );

    let mut mask = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let class = if inner.contains(fx, fy) {
                2
            } else if outer.contains(fx, fy) {
                1
            } else if blob.contains(fx, fy) {
                3
            } else {
                0
            };
            mask.set(y, x, class);
        }
    }
    mask
}

fn region_pixels(mask: &LabelMap, num_classes: usize) -> Vec<Vec<usize>> {
    let mut regions = vec![Vec::new(); num_classes];
    for (i, &c) in mask.data().iter().enumerate() {
        regions[usize::from(c)].push(i);
    }
    regions
}

/// A region pixel the walk has not scribbled yet. Rejection-samples for
/// randomness, then falls back to a scan, so it always finds one as long as
/// the caller keeps target <= region size.
fn unvisited_pixel(
    rng: &mut impl Rng,
    scribble: &LabelMap,
    region: &[usize],
    sentinel: u8,
    width: usize,
) -> usize {
    let open = |p: usize| scribble.get(p / width, p % width) == sentinel;
    for _ in 0..100 {
        let p = region[rng.random_range(0..region.len())];
        if open(p) {
            return p;
        }
    }
    region
        .iter()
        .copied()
        .find(|&p| open(p))
        .expect("walk budget never exceeds the region size")
}

/// Random walk inside one region, marking pixels until `target` distinct
/// ones are scribbled. Walks that box themselves in or stop finding fresh
/// pixels teleport to an unvisited region pixel, so the budget is always
/// met and only pixels of `class` are ever marked.
fn scribble_walk(
    rng: &mut impl Rng,
    mask: &LabelMap,
    scribble: &mut LabelMap,
    region: &[usize],
    class: u8,
    target: usize,
    sentinel: u8,
) {
    let (h, w) = (mask.height(), mask.width());
    let mut marked = 0;
    let mut pos = unvisited_pixel(rng, scribble, region, sentinel, w);
    let mut since_mark = 0;
    let mut dirs: [(i64, i64); 8] = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    while marked < target {
        let (r, c) = (pos / w, pos % w);
        if scribble.get(r, c) == sentinel {
            scribble.set(r, c, class);
            marked += 1;
            since_mark = 0;
        } else {
            since_mark += 1;
        }
        if marked >= target {
            break;
        }
        if since_mark > 50 {
            pos = unvisited_pixel(rng, scribble, region, sentinel, w);
            since_mark = 0;
            continue;
        }
        dirs.shuffle(rng);
        let mut moved = false;
        for (dr, dc) in dirs {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if mask.get(nr, nc) == class {
                pos = nr * w + nc;
                moved = true;
                break;
            }
        }
        if !moved {
            pos = unvisited_pixel(rng, scribble, region, sentinel, w);
            since_mark = 0;
        }
    }
}

fn generate_sample(cfg: &GeneratorConfig, index: usize) -> Result<ScribbleSample> {
    let (h, w, k) = (cfg.height, cfg.width, cfg.num_classes);
    let mut rng = derive_rng(cfg.seed, &[SEED_TAG_SAMPLE, cfg.ood as u64, index as u64]);
    let id = format!("s{index:03}");

    // Redraw the geometry until every class has enough pixels to annotate.
    let min_region = 8.max(h * w / 200);
    let mut mask = None;
    for _ in 0..100 {
        let candidate = paint_mask(&mut rng, h, w, cfg.ood);
        let regions = region_pixels(&candidate, k);
        if regions.iter().all(|r| r.len() >= min_region) {
            mask = Some((candidate, regions));
            break;
        }
    }
    let (mask, regions) = mask.ok_or_else(|| {
        Error::Dataset(format!(
            "sample {id}: no geometry draw placed all {k} classes after 100 attempts"
        ))
    })?;

    // Class intensities: per-sample jittered means, low-frequency texture on
    // the background, i.i.d. pixel noise everywhere, then clamp to [0, 1].
    let base = if cfg.ood { MEANS_OOD } else { MEANS_IN_DIST };
    let means: Vec<f64> = base
        .iter()
        .map(|&b| b + uniform(&mut rng, -MEAN_JITTER, MEAN_JITTER))
        .collect();
    let (tex_amp, noise_std) = if cfg.ood {
        ((0.03, 0.06), 0.04)
    } else {
        ((0.01, 0.03), 0.02)
    };
    struct Wave {
        amp: f64,
        fx: f64,
        fy: f64,
        phase: f64,
    }
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            amp: uniform(&mut rng, tex_amp.0, tex_amp.1),
            fx: rng.random_range(1..=4) as f64,
            fy: rng.random_range(1..=4) as f64,
            phase: uniform(&mut rng, 0.0, 2.0 * PI),
        })
        .collect();
    let normal = Normal::new(0.0, noise_std).expect("finite std");

    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let class = usize::from(mask.get(y, x));
            let mut v = means[class];
            if class == 0 {
                for wave in &waves {
                    let arg = 2.0 * PI * (wave.fx * x as f64 / w as f64
                        + wave.fy * y as f64 / h as f64)
                        + wave.phase;
                    v += wave.amp * arg.sin();
                }
            }
            v += normal.sample(&mut rng);
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    let image = Tensor::new(vec![1, h, w], pixels)?;

    // Scribble budget: the class targets sum to the midpoint of the coverage
    // band; each is capped by its region so the walk always terminates.
    let total = ((COVERAGE_BAND.0 + COVERAGE_BAND.1) / 2.0 * (h * w) as f64).round() as usize;
    let bg_target = ((total as f64) * 0.35).round() as usize;
    let fg_target = (total - bg_target) / (k - 1);
    let mut scribble_labels = LabelMap::filled(h, w, k as u8);
    for (class, region) in regions.iter().enumerate() {
        let want = if class == 0 { bg_target } else { fg_target };
        let target = want.clamp(2, region.len());
        scribble_walk(
            &mut rng,
            &mask,
            &mut scribble_labels,
            region,
            class as u8,
            target,
            k as u8,
        );
    }
    let scribble = ScribbleMask::new(scribble_labels, k)?;

    let sample = ScribbleSample {
        id,
        image,
        scribble,
        mask,
    };
    sample.validate(k, h, w)?;
    Ok(sample)
}

/// Generate a full dataset split 5/7 train, 1/7 val, 1/7 test over sample
/// order, so the default 280 samples land on 200/40/40.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.n_samples)
        .map(|i| generate_sample(cfg, i))
        .collect::<Result<Vec<_>>>()?;

    let n = cfg.n_samples;
    let n_train = ((n as f64 * 5.0 / 7.0).round() as usize).clamp(1, n);
    let n_val = ((n as f64 / 7.0).round() as usize).min(n - n_train);
    let ids = |range: std::ops::Range<usize>| {
        range.map(|i| samples[i].id.clone()).collect::<Vec<_>>()
    };
    let splits = SplitIds {
        train: ids(0..n_train),
        val: ids(n_train..n_train + n_val),
        test: ids(n_train + n_val..n),
    };
    let entries = samples
        .iter()
        .map(|s| SampleEntry {
            id: s.id.clone(),
            image: PathBuf::from(format!("samples/{}.img.tnsr", s.id)),
            scribble: PathBuf::from(format!("samples/{}.scr.tnsr", s.id)),
            mask: PathBuf::from(format!("samples/{}.msk.tnsr", s.id)),
        })
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_classes: cfg.num_classes,
        height: cfg.height,
        width: cfg.width,
        seed: cfg.seed,
        shape_family: SHAPE_FAMILY.into(),
        ood: cfg.ood,
        splits,
        samples: entries,
    };
    Ok(Dataset::assemble(manifest, samples))
}

// Clockwise quarter turn: output (r, c) of shape [w, h] reads input
// (h - 1 - c, r).
fn rotate90_indices(h: usize) -> impl Fn(usize, usize) -> (usize, usize) {
    move |r, c| (h - 1 - c, r)
}

fn rotate_map(map: &LabelMap) -> LabelMap {
    let (h, w) = (map.height(), map.width());
    let src = rotate90_indices(h);
    let mut out = LabelMap::filled(w, h, 0);
    for r in 0..w {
        for c in 0..h {
            let (sr, sc) = src(r, c);
            out.set(r, c, map.get(sr, sc));
        }
    }
    out
}

fn rotate_image(image: &Tensor) -> Tensor {
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = rotate90_indices(h);
    let mut data = Vec::with_capacity(image.numel());
    for k in 0..ch {
        for r in 0..w {
            for c in 0..h {
                let (sr, sc) = src(r, c);
                data.push(image.data()[(k * h + sr) * w + sc]);
            }
        }
    }
    Tensor::new(vec![ch, w, h], data).expect("rotation preserves element count")
}

fn flip_map(map: &LabelMap) -> LabelMap {
    let (h, w) = (map.height(), map.width());
    let mut out = LabelMap::filled(h, w, 0);
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, map.get(r, w - 1 - c));
        }
    }
    out
}

fn flip_image(image: &Tensor) -> Tensor {
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut data = Vec::with_capacity(image.numel());
    for k in 0..ch {
        for r in 0..h {
            for c in 0..w {
                data.push(image.data()[(k * h + r) * w + (w - 1 - c)]);
            }
        }
    }
    Tensor::new(vec![ch, h, w], data).expect("flip preserves element count")
}

/// Apply `rot_k` clockwise quarter turns then an optional horizontal flip,
/// jointly to image, scribble, and mask.
pub fn augment_with(sample: &ScribbleSample, rot_k: usize, flip: bool) -> ScribbleSample {
    let mut image = sample.image.clone();
    let mut scribble = sample.scribble.labels().clone();
    let mut mask = sample.mask.clone();
    for _ in 0..rot_k % 4 {
        image = rotate_image(&image);
        scribble = rotate_map(&scribble);
        mask = rotate_map(&mask);
    }
    if flip {
        image = flip_image(&image);
        scribble = flip_map(&scribble);
        mask = flip_map(&mask);
    }
    ScribbleSample {
        id: sample.id.clone(),
        image,
        scribble: ScribbleMask::new(scribble, sample.scribble.num_classes())
            .expect("augmentation permutes pixels and cannot invent labels"),
        mask,
    }
}

/// Random rotation and flip, the training-time augmentation.
pub fn augment(sample: &ScribbleSample, rng: &mut impl Rng) -> ScribbleSample {
    let rot_k = rng.random_range(0..4);
    let flip = rng.random_range(0..2) == 1;
    augment_with(sample, rot_k, flip)
}

/// Symmetric-padded separable Gaussian blur. The kernel is normalized and
/// even, so the image mean is preserved exactly up to rounding.
fn gaussian_blur(image: &Tensor, std_px: f64) -> Tensor {
    let radius = (3.0 * std_px).ceil() as i64;
    if radius == 0 {
        return image.clone();
    }
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * std_px * std_px)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);

    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let reflect = |mut i: i64, n: i64| -> usize {
        while i < 0 || i >= n {
            if i < 0 {
                i = -1 - i;
            } else {
                i = 2 * n - 1 - i;
            }
        }
        i as usize
    };

    let mut rows = vec![0.0; image.numel()];
    for k in 0..ch {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (j, &g) in kernel.iter().enumerate() {
                    let cc = reflect(c as i64 + j as i64 - radius, w as i64);
                    acc += g * image.data()[(k * h + r) * w + cc];
                }
                rows[(k * h + r) * w + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; image.numel()];
    for k in 0..ch {
        for c in 0..w {
            for r in 0..h {
                let mut acc = 0.0;
                for (j, &g) in kernel.iter().enumerate() {
                    let rr = reflect(r as i64 + j as i64 - radius, h as i64);
                    acc += g * rows[(k * h + rr) * w + c];
                }
                out[(k * h + r) * w + c] = acc;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("blur preserves shape")
}

/// Corrupt one sample's image; labels are untouched.
pub fn corrupt(
    sample: &ScribbleSample,
    kind: CorruptKind,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<ScribbleSample> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "corruption sigma must be positive and finite, got {sigma}"
        )));
    }
    let image = match kind {
        CorruptKind::Noise => {
            let normal = Normal::new(0.0, sigma).expect("finite std");
            sample
                .image
                .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        }
        CorruptKind::Blur => {
            let std_px = sigma * sample.image.shape()[2] as f64;
            gaussian_blur(&sample.image, std_px)
        }
    };
    Ok(ScribbleSample {
        id: sample.id.clone(),
        image,
        scribble: sample.scribble.clone(),
        mask: sample.mask.clone(),
    })
}

/// Mean intensity per class, pooled over every sample's mask. The distance
/// between in-distribution and OOD means is the measurable appearance shift.
pub fn per_class_mean_intensity(dataset: &Dataset) -> Vec<f64> {
    let k = dataset.manifest.num_classes;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for sample in dataset.samples() {
        for (&v, &c) in sample.image.data().iter().zip(sample.mask.data()) {
            sums[usize::from(c)] += v;
            counts[usize::from(c)] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect()
}

/// Write `manifest.json` plus one TNSR file per image, scribble, and mask.
pub fn write(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(dir, e))?;
    for (sample, entry) in dataset.samples().iter().zip(&dataset.manifest.samples) {
        tnsr::write_f64(&dir.join(&entry.image), &sample.image)?;
        tnsr::write_labels(&dir.join(&entry.scribble), sample.scribble.labels())?;
        tnsr::write_labels(&dir.join(&entry.mask), &sample.mask)?;
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::format(&path, format!("cannot encode manifest: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Load a dataset directory, validating the manifest and every sample.
pub fn read(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&path, format!("manifest is not valid JSON: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }

    let mut seen = HashSet::new();
    for entry in &manifest.samples {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::Dataset(format!(
                "sample id {:?} appears twice in the manifest",
                entry.id
            )));
        }
    }
    let mut split_seen = HashSet::new();
    for id in manifest
        .splits
        .train
        .iter()
        .chain(&manifest.splits.val)
        .chain(&manifest.splits.test)
    {
        if !seen.contains(id.as_str()) {
            return Err(Error::Dataset(format!(
                "split references unknown sample id {id:?}"
            )));
        }
        if !split_seen.insert(id.as_str()) {
            return Err(Error::Dataset(format!(
                "sample id {id:?} appears in more than one split"
            )));
        }
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let with_id = |e: Error| Error::Dataset(format!("sample {}: {e}", entry.id));
        let image = tnsr::read_f64(&dir.join(&entry.image)).map_err(with_id)?;
        let scribble_labels = tnsr::read_labels(&dir.join(&entry.scribble)).map_err(with_id)?;
        let mask = tnsr::read_labels(&dir.join(&entry.mask)).map_err(with_id)?;
        let scribble =
            ScribbleMask::new(scribble_labels, manifest.num_classes).map_err(with_id)?;
        let sample = ScribbleSample {
            id: entry.id.clone(),
            image,
            scribble,
            mask,
        };
        sample.validate(manifest.num_classes, manifest.height, manifest.width)?;
        samples.push(sample);
    }
    Ok(Dataset::assemble(manifest, samples))
}
