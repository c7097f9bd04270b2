//! Seeded synthetic hyperspectral scenes with controllable class
//! separability.
//!
//! A scene is built in fixed stages, each drawing from its own substream of
//! the scene seed, so the result is bit-identical for identical configs:
//! random sites partition the image into contiguous nearest-site regions;
//! each region gets a class; each class gets a smooth spectral signature (a
//! mixture of Gaussian bumps over the band index); every pixel's spectrum
//! is its class signature under a multiplicative brightness jitter plus
//! additive Gaussian noise; finally an optional box blur smooths each band
//! spatially.
//!
//! Separability is steered by `signature_separation`: class signatures are
//! a shared base curve plus `separation · delta_c` with unit-norm per-class
//! deltas, so pairwise signature distances scale linearly with the knob and
//! collapse to zero when it is zero.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::data::{HyperCube, LabelMap, UNLABELED};
use crate::error::{Error, Result};
use crate::seed::{mix, rng_from};

/// Everything that determines a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub class_count: usize,
    /// Expected region diameter in pixels; smaller means more, finer blobs.
    pub region_granularity: f64,
    /// Scales the pairwise spectral distance between class signatures.
    pub signature_separation: f64,
    /// Standard deviation of the additive per-band Gaussian noise.
    pub noise_std: f64,
    /// Box blur radius applied per band after rendering; 0 disables.
    pub spatial_blur: usize,
    /// Log-scale sigma of the multiplicative per-pixel brightness jitter;
    /// gives patches spatial texture beyond single-pixel spectra.
    pub brightness_jitter: f64,
    /// Region-class weight of class 0 relative to weight 1 for the others;
    /// values above 1 skew the scene toward a majority class.
    pub majority_weight: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 128,
            width: 128,
            bands: 42,
            class_count: 4,
            region_granularity: 24.0,
            signature_separation: 0.35,
            noise_std: 0.20,
            spatial_blur: 1,
            brightness_jitter: 0.05,
            majority_weight: 1.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::invalid("scene dims must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::invalid("class_count must be >= 2"));
        }
        if self.class_count > UNLABELED as usize {
            return Err(Error::invalid(format!(
                "class_count must be <= {}",
                UNLABELED
            )));
        }
        if !(self.region_granularity.is_finite() && self.region_granularity > 0.0) {
            return Err(Error::invalid("region_granularity must be positive"));
        }
        for (name, v) in [
            ("signature_separation", self.signature_separation),
            ("noise_std", self.noise_std),
            ("brightness_jitter", self.brightness_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.majority_weight.is_finite() && self.majority_weight > 0.0) {
            return Err(Error::invalid("majority_weight must be positive"));
        }
        Ok(())
    }
}

// Stage substreams of the scene seed.
const SITE_STREAM: u64 = 1;
const CLASS_STREAM: u64 = 2;
const SIGNATURE_STREAM: u64 = 3;
const PIXEL_STREAM: u64 = 4;

/// One Gaussian bump over the band index.
#[derive(Debug, Clone, Copy)]
struct Bump {
    amplitude: f64,
    center: f64,
    width: f64,
}

impl Bump {
    fn eval(&self, m: usize) -> f64 {
        let d = (m as f64 - self.center) / self.width;
        self.amplitude * (-0.5 * d * d).exp()
    }

    /// Largest |second derivative|, attained at the bump center.
    fn curvature_bound(&self) -> f64 {
        self.amplitude.abs() / (self.width * self.width)
    }
}

/// Per-class spectral signatures plus their derived smoothness bound.
#[derive(Debug, Clone)]
pub struct SceneSignatures {
    /// `class_count` curves of `bands` values each.
    pub per_class: Vec<Vec<f64>>,
    /// Upper bound on every signature's discrete second difference
    /// `|sig[m+1] − 2·sig[m] + sig[m−1]|`.
    pub smoothness_bound: f64,
}

/// Generates the class signatures a config implies (the same curves
/// [`generate_scene`] uses).
pub fn class_signatures(cfg: &SceneConfig) -> Result<SceneSignatures> {
    cfg.validate()?;
    let mut rng = rng_from(mix(cfg.seed, &[SIGNATURE_STREAM]));
    let bands = cfg.bands as f64;

    // Shared base curve: two broad bumps over a constant floor.
    let base_bumps: Vec<Bump> = (0..2)
        .map(|_| Bump {
            amplitude: rng.random_range(0.3..0.6),
            center: rng.random_range(0.0..bands),
            width: rng.random_range(bands / 8.0..bands / 4.0).max(1.0),
        })
        .collect();
    let floor = 0.2;

    let mut per_class = Vec::with_capacity(cfg.class_count);
    let mut delta_curvatures = Vec::with_capacity(cfg.class_count);
    for _ in 0..cfg.class_count {
        // Unit-norm delta from 2 or 3 narrow bumps; pairwise signature
        // distances then scale exactly with signature_separation.
        let (delta, curvature) = loop {
            let bump_count = rng.random_range(2..=3);
            let bumps: Vec<Bump> = (0..bump_count)
                .map(|_| Bump {
                    amplitude: rng.random_range(-1.0..1.0),
                    center: rng.random_range(0.0..bands),
                    width: rng.random_range(bands / 12.0..bands / 5.0).max(1.0),
                })
                .collect();
            let raw: Vec<f64> = (0..cfg.bands)
                .map(|m| bumps.iter().map(|b| b.eval(m)).sum())
                .collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                let curvature: f64 = bumps.iter().map(Bump::curvature_bound).sum::<f64>() / norm;
                break (raw.into_iter().map(|v| v / norm).collect::<Vec<f64>>(), curvature);
            }
        };
        let signature: Vec<f64> = (0..cfg.bands)
            .map(|m| {
                floor
                    + base_bumps.iter().map(|b| b.eval(m)).sum::<f64>()
                    + cfg.signature_separation * delta[m]
            })
            .collect();
        per_class.push(signature);
        delta_curvatures.push(curvature);
    }

    let base_curvature: f64 = base_bumps.iter().map(Bump::curvature_bound).sum();
    let worst_delta = delta_curvatures.iter().cloned().fold(0.0, f64::max);
    Ok(SceneSignatures {
        per_class,
        smoothness_bound: base_curvature + cfg.signature_separation * worst_delta,
    })
}

/// Generates a fully labeled scene. Identical configs give bit-identical
/// results; every pixel is labeled.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(HyperCube, LabelMap)> {
    cfg.validate()?;
    let (height, width, bands) = (cfg.height, cfg.width, cfg.bands);
    let pixel_count = height * width;

    // Stage 1: region sites. Expected region area is a disk of the
    // configured diameter, so the site count is image area over disk area.
    let mut site_rng = rng_from(mix(cfg.seed, &[SITE_STREAM]));
    let site_count = ((4.0 * pixel_count as f64)
        / (std::f64::consts::PI * cfg.region_granularity * cfg.region_granularity))
        .ceil()
        .max(1.0) as usize;
    let site_count = site_count.min(pixel_count);
    let sites: Vec<(f64, f64)> = (0..site_count)
        .map(|_| {
            (
                site_rng.random_range(0.0..height as f64),
                site_rng.random_range(0.0..width as f64),
            )
        })
        .collect();

    // Stage 2: one class per region, optionally skewed toward class 0.
    let mut class_rng = rng_from(mix(cfg.seed, &[CLASS_STREAM]));
    let mut weights = vec![1.0; cfg.class_count];
    weights[0] = cfg.majority_weight;
    let class_dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::invalid(format!("invalid class weights: {e}")))?;
    let site_classes: Vec<u8> = (0..site_count)
        .map(|_| class_dist.sample(&mut class_rng) as u8)
        .collect();

    // Stage 3: spectral signatures.
    let signatures = class_signatures(cfg)?;

    // Label every pixel by its nearest site (ties to the lowest index).
    let labels = LabelMap::from_fn(height, width, |row, col| {
        let py = row as f64 + 0.5;
        let px = col as f64 + 0.5;
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (idx, &(sy, sx)) in sites.iter().enumerate() {
            let d = (py - sy) * (py - sy) + (px - sx) * (px - sx);
            if d < best_dist {
                best_dist = d;
                best = idx;
            }
        }
        site_classes[best]
    })?;

    // Stage 4: render spectra pixel by pixel, row-major; per pixel one
    // jitter draw then one noise draw per band, a fixed documented order.
    let mut pixel_rng = rng_from(mix(cfg.seed, &[PIXEL_STREAM]));
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let jitter = if cfg.brightness_jitter > 0.0 {
        Some(LogNormal::new(0.0, cfg.brightness_jitter).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut values = vec![0.0; pixel_count * bands];
    for row in 0..height {
        for col in 0..width {
            let signature = &signatures.per_class[labels.get(row, col) as usize];
            let gain = jitter.as_ref().map_or(1.0, |j| j.sample(&mut pixel_rng));
            for (m, &sig) in signature.iter().enumerate() {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut pixel_rng));
                values[(m * height + row) * width + col] = gain * sig + n;
            }
        }
    }

    // Stage 5: spatial smoothing.
    if cfg.spatial_blur > 0 {
        box_blur_bands(&mut values, height, width, bands, cfg.spatial_blur);
    }

    let cube = HyperCube::new(height, width, bands, values)?;
    Ok((cube, labels))
}

/// Separable box blur over each band image, clamped at the borders (the
/// window shrinks rather than wrapping or padding).
fn box_blur_bands(values: &mut [f64], height: usize, width: usize, bands: usize, radius: usize) {
    let plane = height * width;
    let mut scratch = vec![0.0; plane];
    for band in 0..bands {
        let img = &mut values[band * plane..(band + 1) * plane];
        // Horizontal pass into scratch.
        for row in 0..height {
            for col in 0..width {
                let lo = col.saturating_sub(radius);
                let hi = (col + radius).min(width - 1);
                let sum: f64 = img[row * width + lo..=row * width + hi].iter().sum();
                scratch[row * width + col] = sum / (hi - lo + 1) as f64;
            }
        }
        // Vertical pass back into the band.
        for col in 0..width {
            for row in 0..height {
                let lo = row.saturating_sub(radius);
                let hi = (row + radius).min(height - 1);
                let mut sum = 0.0;
                for r in lo..=hi {
                    sum += scratch[r * width + col];
                }
                img[row * width + col] = sum / (hi - lo + 1) as f64;
            }
        }
    }
}

/// Seed substream for the difficulty subsample, fixed so the score is a
/// pure function of the scene.
const DIFFICULTY_SEED: u64 = 0x5ce2e_d1ff;

/// Number of pixels the difficulty score samples.
const DIFFICULTY_SAMPLE: usize = 1000;

/// Model-free separability score in [0, 1]: leave-one-out accuracy of a
/// 1-nearest-centroid spectral classifier on a seeded subsample of up to
/// 1000 labeled pixels. Near 1 the scene is trivially separable per pixel;
/// near 1/C it is hopeless.
pub fn scene_difficulty(cube: &HyperCube, labels: &LabelMap) -> Result<f64> {
    if cube.height() != labels.height() || cube.width() != labels.width() {
        return Err(Error::shape(format!(
            "cube is {}x{} but label map is {}x{}",
            cube.height(),
            cube.width(),
            labels.height(),
            labels.width()
        )));
    }
    let labeled: Vec<(usize, usize)> = (0..cube.height())
        .flat_map(|r| (0..cube.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| labels.get(r, c) != UNLABELED)
        .collect();
    if labeled.is_empty() {
        return Err(Error::invalid("label map has no labeled pixels"));
    }
    let mut rng: ChaCha8Rng = rng_from(mix(DIFFICULTY_SEED, &[cube.height() as u64, cube.width() as u64]));
    let take = DIFFICULTY_SAMPLE.min(labeled.len());
    let chosen = index_sample(&mut rng, labeled.len(), take);

    let bands = cube.bands();
    let spectra: Vec<Vec<f64>> = chosen
        .iter()
        .map(|i| {
            let (r, c) = labeled[i];
            (0..bands).map(|m| cube.get(r, c, m)).collect()
        })
        .collect();
    let classes: Vec<usize> = chosen.iter().map(|i| labels.get(labeled[i].0, labeled[i].1) as usize).collect();
    let class_count = classes.iter().max().unwrap() + 1;

    let mut sums = vec![vec![0.0; bands]; class_count];
    let mut counts = vec![0usize; class_count];
    for (spectrum, &class) in spectra.iter().zip(&classes) {
        for (s, v) in sums[class].iter_mut().zip(spectrum) {
            *s += v;
        }
        counts[class] += 1;
    }

    let mut correct = 0usize;
    for (spectrum, &own) in spectra.iter().zip(&classes) {
        let mut best = None;
        let mut best_dist = f64::INFINITY;
        for class in 0..class_count {
            // Leave the sample itself out of its own class centroid.
            let n = counts[class] - usize::from(class == own);
            if n == 0 {
                continue;
            }
            let inv = 1.0 / n as f64;
            let mut dist = 0.0;
            for (m, &v) in spectrum.iter().enumerate() {
                let centroid = (sums[class][m] - if class == own { v } else { 0.0 }) * inv;
                let d = v - centroid;
                dist += d * d;
            }
            if dist < best_dist {
                best_dist = dist;
                best = Some(class);
            }
        }
        if best == Some(own) {
            correct += 1;
        }
    }
    Ok(correct as f64 / spectra.len() as f64)
}
