//! Hyperspectral cube and label I/O, normalization, patch extraction, and
//! stratified train/test splitting.
//!
//! A cube stores one `f64` per (row, col, band) with the band index slowest
//! in memory, matching the file order, so each band is a contiguous `H·W`
//! image. Patches follow the crate's spectral-first `(b, s, s)` convention.
//!
//! Patch pools are deliberately lazy: a pool records the coordinates and
//! class of every eligible pixel and cuts the actual patch tensor out of
//! the source cube on demand. Materializing every patch of even a modest
//! scene would need gigabytes; training materializes only the selected
//! training samples, and evaluation streams the rest one at a time.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::optim::TrainSample;
use crate::seed::{mix, rng_from};
use crate::tensor::Tensor3;

/// Label value marking pixels outside every class.
pub const UNLABELED: u8 = 255;

const CUBE_MAGIC: &[u8; 7] = b"HSCUBE1";
const LABEL_MAGIC: &[u8; 6] = b"HSLBL1";

/// On-disk element type of a cube file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A hyperspectral image: `bands` spectral responses per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    /// Band-slowest layout: value (row, col, band) at `band·H·W + row·W + col`.
    values: Vec<f64>,
    band_names: Option<Vec<String>>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::invalid(format!(
                "cube dims must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if values.len() != expected {
            return Err(Error::shape(format!(
                "cube storage holds {} values, {height}x{width}x{bands} needs {expected}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("cube values must be finite"));
        }
        Ok(HyperCube {
            height,
            width,
            bands,
            values,
            band_names: None,
        })
    }

    /// Builds a cube by evaluating `f(row, col, band)` everywhere.
    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * bands);
        for m in 0..bands {
            for r in 0..height {
                for c in 0..width {
                    values.push(f(r, c, m));
                }
            }
        }
        HyperCube::new(height, width, bands, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.values[(band * self.height + row) * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The contiguous `H·W` image of one band.
    pub fn band(&self, band: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.values[band * plane..(band + 1) * plane]
    }

    /// Optional band labels; not carried by the binary format.
    pub fn band_names(&self) -> Option<&[String]> {
        self.band_names.as_deref()
    }

    pub fn set_band_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.bands {
            return Err(Error::shape(format!(
                "{} band names for {} bands",
                names.len(),
                self.bands
            )));
        }
        self.band_names = Some(names);
        Ok(())
    }
}

/// Per-pixel class annotations for a cube of the same height and width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "label map dims must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label storage holds {} entries, {height}x{width} needs {}",
                labels.len(),
                height * width
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                labels.push(f(r, c));
            }
        }
        LabelMap::new(height, width, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Largest class id present, ignoring unlabeled pixels.
    pub fn max_class_id(&self) -> Option<u8> {
        self.labels.iter().filter(|&&l| l != UNLABELED).max().copied()
    }
}

/// Writes a cube: magic `HSCUBE1`, little-endian u32 height/width/bands, a
/// dtype tag byte, then the values band-slowest, row, column.
pub fn save_cube(cube: &HyperCube, path: &Path, dtype: Dtype) -> Result<()> {
    let mut bytes =
        Vec::with_capacity(7 + 12 + 1 + cube.values.len() * dtype.size());
    bytes.extend_from_slice(CUBE_MAGIC);
    for dim in [cube.height, cube.width, cube.bands] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    bytes.push(dtype.tag());
    match dtype {
        Dtype::F32 => {
            for &v in &cube.values {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in &cube.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `HSCUBE1` file.
pub fn load_cube(path: &Path) -> Result<HyperCube> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = ByteReader::new(path, &bytes);
    let magic = reader.take(7, "magic")?;
    if magic != CUBE_MAGIC {
        return Err(reader.format_at(
            0,
            format!(
                "unrecognized magic {:?}, expected HSCUBE1",
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let height = reader.read_u32("height")? as usize;
    let width = reader.read_u32("width")? as usize;
    let bands = reader.read_u32("bands")? as usize;
    let tag_at = reader.offset;
    let tag = reader.read_u8("dtype tag")?;
    let dtype = Dtype::from_tag(tag)
        .ok_or_else(|| reader.format_at(tag_at, format!("unknown dtype tag {tag}")))?;
    let count = height
        .checked_mul(width)
        .and_then(|p| p.checked_mul(bands))
        .ok_or_else(|| reader.format_at(7, "header dims overflow".to_string()))?;
    let payload_at = reader.offset;
    let expected = count * dtype.size();
    let actual = bytes.len() - payload_at;
    if actual != expected {
        return Err(reader.format_at(
            payload_at,
            format!("header {height}x{width}x{bands} needs {expected} payload bytes, found {actual}"),
        ));
    }
    let raw = reader.take(expected, "values")?;
    let values: Vec<f64> = match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    reader.expect_end()?;
    HyperCube::new(height, width, bands, values)
        .map_err(|e| reader.format_at(payload_at, e.to_string()))
}

/// Writes a label map: magic `HSLBL1`, little-endian u32 height/width, then
/// one u8 class id per pixel row-major (255 = unlabeled).
pub fn save_labels(map: &LabelMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(6 + 8 + map.labels.len());
    bytes.extend_from_slice(LABEL_MAGIC);
    for dim in [map.height, map.width] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&map.labels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `HSLBL1` file.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = ByteReader::new(path, &bytes);
    let magic = reader.take(6, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(reader.format_at(
            0,
            format!(
                "unrecognized magic {:?}, expected HSLBL1",
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let height = reader.read_u32("height")? as usize;
    let width = reader.read_u32("width")? as usize;
    let count = height
        .checked_mul(width)
        .ok_or_else(|| reader.format_at(6, "header dims overflow".to_string()))?;
    let payload_at = reader.offset;
    let actual = bytes.len() - payload_at;
    if actual != count {
        return Err(reader.format_at(
            payload_at,
            format!("header {height}x{width} needs {count} payload bytes, found {actual}"),
        ));
    }
    let labels = reader.take(count, "labels")?.to_vec();
    reader.expect_end()?;
    LabelMap::new(height, width, labels).map_err(|e| reader.format_at(payload_at, e.to_string()))
}

/// Reads a headerless band-sequential float32 file (all of band 0's `H·W`
/// values row-major, then band 1, ...), the layout raw exports commonly use.
pub fn read_raw_f32(path: &Path, height: usize, width: usize, bands: usize) -> Result<HyperCube> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = height * width * bands * 4;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!(
                "{height}x{width}x{bands} float32 raw needs {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    HyperCube::new(height, width, bands, values)
}

/// Rescales each band to [0, 1] by its own min and max over all pixels.
/// A constant band maps to all zeros. Applying this twice equals applying
/// it once, bit-exactly: a normalized non-constant band has min 0, max 1,
/// so the second pass divides by exactly 1.
pub fn normalize_bandwise(cube: &HyperCube) -> HyperCube {
    let mut out = cube.clone();
    let plane = cube.height * cube.width;
    for m in 0..cube.bands {
        let band = &mut out.values[m * plane..(m + 1) * plane];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in band.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            band.fill(0.0);
        } else {
            let span = hi - lo;
            for v in band.iter_mut() {
                *v = (*v - lo) / span;
            }
        }
    }
    out
}

/// Margin of border pixels a patch of side `s` cannot center on.
pub fn patch_margin(patch_side: usize) -> usize {
    patch_side / 2
}

fn check_patch_side(patch_side: usize) -> Result<()> {
    if patch_side == 0 || patch_side % 2 == 0 {
        return Err(Error::invalid(format!(
            "patch side must be odd and positive, got {patch_side}"
        )));
    }
    Ok(())
}

/// Cuts the `(bands, s, s)` patch centered at `(row, col)` out of a cube.
/// Only interior pixels, at least `⌊s/2⌋` from every border, are eligible.
pub fn extract_patch(cube: &HyperCube, row: usize, col: usize, patch_side: usize) -> Result<Tensor3> {
    check_patch_side(patch_side)?;
    let margin = patch_margin(patch_side);
    if row < margin || col < margin || row + margin >= cube.height || col + margin >= cube.width {
        return Err(Error::invalid(format!(
            "pixel ({row}, {col}) lies within the {margin}-pixel border margin of a {}x{} image, \
             so no side-{patch_side} patch fits",
            cube.height, cube.width
        )));
    }
    let top = row - margin;
    let left = col - margin;
    let mut values = Vec::with_capacity(cube.bands * patch_side * patch_side);
    for m in 0..cube.bands {
        let band = cube.band(m);
        for j in 0..patch_side {
            let row_start = (top + j) * cube.width + left;
            values.extend_from_slice(&band[row_start..row_start + patch_side]);
        }
    }
    Tensor3::new((cube.bands, patch_side, patch_side), values)
}

/// One labeled training/evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    /// `(bands, s, s)`, spectral mode first.
    pub tensor: Tensor3,
    /// One-hot over the pool's classes.
    pub label: Vec<f64>,
    /// Center pixel (row, col) within its source cube.
    pub origin: (usize, usize),
}

impl TrainSample for PatchTensor {
    fn input(&self) -> &Tensor3 {
        &self.tensor
    }
    fn target(&self) -> &[f64] {
        &self.label
    }
}

/// A pool entry: where a patch comes from and its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolEntry {
    /// Index into the pool's cube list.
    pub cube: usize,
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
}

/// Every eligible labeled pixel across one or more cubes, with patches cut
/// out lazily via [`SamplePool::materialize`].
#[derive(Debug, Clone)]
pub struct SamplePool<'a> {
    cubes: Vec<&'a HyperCube>,
    patch_side: usize,
    class_count: usize,
    entries: Vec<PoolEntry>,
}

impl<'a> SamplePool<'a> {
    /// Scans each (cube, labels) pair in order and records every labeled
    /// pixel at least `⌊s/2⌋` from the borders, row-major.
    pub fn aggregate(
        pairs: &[(&'a HyperCube, &'a LabelMap)],
        patch_side: usize,
        class_count: usize,
    ) -> Result<Self> {
        check_patch_side(patch_side)?;
        if class_count < 2 {
            return Err(Error::invalid("class_count must be >= 2"));
        }
        if class_count > UNLABELED as usize {
            return Err(Error::invalid(format!(
                "class_count must be <= {}, got {class_count}",
                UNLABELED
            )));
        }
        let margin = patch_margin(patch_side);
        if pairs.is_empty() {
            return Err(Error::invalid("pool needs at least one (cube, labels) pair"));
        }
        let bands = pairs[0].0.bands;
        let mut cubes = Vec::with_capacity(pairs.len());
        let mut entries = Vec::new();
        for (cube_index, (cube, labels)) in pairs.iter().enumerate() {
            if cube.bands != bands {
                return Err(Error::shape(format!(
                    "cube {cube_index} has {} bands but cube 0 has {bands}; \
                     pooled cubes must share a band layout",
                    cube.bands
                )));
            }
            if cube.height != labels.height() || cube.width != labels.width() {
                return Err(Error::shape(format!(
                    "cube {cube_index} is {}x{} but its label map is {}x{}",
                    cube.height,
                    cube.width,
                    labels.height(),
                    labels.width()
                )));
            }
            if cube.height > 2 * margin && cube.width > 2 * margin {
                for row in margin..cube.height - margin {
                    for col in margin..cube.width - margin {
                        let label = labels.get(row, col);
                        if label == UNLABELED {
                            continue;
                        }
                        let class_id = label as usize;
                        if class_id >= class_count {
                            return Err(Error::invalid(format!(
                                "pixel ({row}, {col}) in cube {cube_index} has class {class_id}, \
                                 but only {class_count} classes exist"
                            )));
                        }
                        entries.push(PoolEntry {
                            cube: cube_index,
                            row,
                            col,
                            class_id,
                        });
                    }
                }
            }
            cubes.push(*cube);
        }
        Ok(SamplePool {
            cubes,
            patch_side,
            class_count,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Band count shared by every cube in the pool.
    pub fn band_count(&self) -> usize {
        self.cubes[0].bands()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Eligible samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for entry in &self.entries {
            counts[entry.class_id] += 1;
        }
        counts
    }

    /// Cuts out the patch for one entry.
    pub fn materialize(&self, index: usize) -> Result<PatchTensor> {
        let entry = self.entries.get(index).ok_or_else(|| {
            Error::invalid(format!(
                "pool index {index} out of range, pool has {} entries",
                self.entries.len()
            ))
        })?;
        let tensor = extract_patch(self.cubes[entry.cube], entry.row, entry.col, self.patch_side)?;
        let mut label = vec![0.0; self.class_count];
        label[entry.class_id] = 1.0;
        Ok(PatchTensor {
            tensor,
            label,
            origin: (entry.row, entry.col),
        })
    }

    /// Materializes every entry; intended for small pools. Large pools
    /// should stream via [`SamplePool::materialize`].
    pub fn materialize_all(&self) -> Result<Vec<PatchTensor>> {
        (0..self.len()).map(|i| self.materialize(i)).collect()
    }
}

/// Single-cube convenience over [`SamplePool::aggregate`].
pub fn build_sample_pool<'a>(
    cube: &'a HyperCube,
    labels: &'a LabelMap,
    patch_side: usize,
    class_count: usize,
) -> Result<SamplePool<'a>> {
    SamplePool::aggregate(&[(cube, labels)], patch_side, class_count)
}

/// How to cut one stratified train/test split out of a pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    /// Training samples drawn per class (TS).
    pub samples_per_class: usize,
    pub seed: u64,
    /// Which hold-out repetition this is; mixed into the seed.
    pub repeat_index: u64,
}

/// Pool indices of one split. `train` is in its final permuted order;
/// `test` is ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws `samples_per_class` training samples per class without
/// replacement, deterministically from `(seed, repeat_index)`; everything
/// else becomes the test set. The combined training list is then permuted
/// so samples are not grouped by class.
pub fn split_indices(pool: &SamplePool, spec: &SplitSpec) -> Result<SplitIndices> {
    if spec.samples_per_class == 0 {
        return Err(Error::invalid("samples_per_class must be >= 1"));
    }
    let mut rng = rng_from(mix(spec.seed, &[spec.repeat_index]));
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.class_count()];
    for (index, entry) in pool.entries().iter().enumerate() {
        by_class[entry.class_id].push(index);
    }
    let mut train = Vec::with_capacity(pool.class_count() * spec.samples_per_class);
    let mut test = Vec::new();
    for (class, mut indices) in by_class.into_iter().enumerate() {
        if indices.len() < spec.samples_per_class {
            return Err(Error::InsufficientSamples {
                class,
                available: indices.len(),
                required: spec.samples_per_class,
            });
        }
        indices.shuffle(&mut rng);
        train.extend_from_slice(&indices[..spec.samples_per_class]);
        test.extend_from_slice(&indices[spec.samples_per_class..]);
    }
    train.shuffle(&mut rng);
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Splits and materializes the training patches (in permuted order),
/// leaving the test set as pool indices for streaming evaluation.
pub fn split_train_test(pool: &SamplePool, spec: &SplitSpec) -> Result<(Vec<PatchTensor>, Vec<usize>)> {
    let indices = split_indices(pool, spec)?;
    let train = indices
        .train
        .iter()
        .map(|&i| pool.materialize(i))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, indices.test))
}
