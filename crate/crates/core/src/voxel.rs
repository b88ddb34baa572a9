//! 3D voxel volumes: raw-file ingestion, synthesis, and physical labels.
//!
//! Volumes are dense grids of values in `[0, 1]`, stored x-fastest
//! (index = `x + nx*(y + ny*z)`), matching common raw micro-CT exports.
//! In binary volumes the convention is `1.0` = pore (void), `0.0` = solid,
//! so porosity equals the mean voxel value.
//!
//! Synthetic volumes are thresholded, box-smoothed Gaussian fields; their
//! permeability label is a scaled Kozeny-Carman proxy of the measured
//! porosity and specific surface.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Pseudo-millidarcy per voxel² for the synthetic permeability proxy.
/// The fixed ×1000 brings labels into a realistic mD order of magnitude.
pub const PSEUDO_MD_PER_VOXEL_SQ: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("{path}: file is {actual} bytes, dims {dims:?} require {expected}")]
    FileSizeMismatch {
        path: PathBuf,
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("operation requires a binary volume")]
    NotBinary,
    #[error("specific surface must be positive, got {0}")]
    ZeroSurface(f64),
    #[error("porosity must lie in [0, 1), got {0}")]
    InvalidPorosity(f64),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("{0}: sidecar has no labels")]
    MissingLabels(PathBuf),
    #[error("{0}")]
    InvalidVolume(String),
}

/// Raw byte encodings for volume files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Byte 0 → 0.0 (solid), any nonzero → 1.0 (pore).
    U8Binary,
    /// Byte v → v / 255.
    U8Grayscale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelKind {
    Binary,
    Grayscale,
}

/// A dense 3D voxel grid with values in `[0, 1]`, stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    data: Vec<f32>,
    kind: VoxelKind,
    voxel_size: f64,
}

impl Volume3D {
    pub fn binary(dims: [usize; 3], data: Vec<f32>) -> Result<Self, VoxelError> {
        Self::new(dims, data, VoxelKind::Binary)
    }

    pub fn grayscale(dims: [usize; 3], data: Vec<f32>) -> Result<Self, VoxelError> {
        Self::new(dims, data, VoxelKind::Grayscale)
    }

    pub fn new(dims: [usize; 3], data: Vec<f32>, kind: VoxelKind) -> Result<Self, VoxelError> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(VoxelError::InvalidVolume(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        for &v in &data {
            if !(0.0..=1.0).contains(&v) {
                return Err(VoxelError::InvalidVolume(format!(
                    "voxel value {v} outside [0, 1]"
                )));
            }
            if kind == VoxelKind::Binary && v != 0.0 && v != 1.0 {
                return Err(VoxelError::InvalidVolume(format!(
                    "binary volume contains non-{{0,1}} value {v}"
                )));
            }
        }
        Ok(Self {
            dims,
            data,
            kind,
            voxel_size: 1.0,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn kind(&self) -> VoxelKind {
        self.kind
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Swaps pore and solid (v → 1 − v); used by the ingest `--invert` switch.
    pub fn inverted(&self) -> Volume3D {
        let data = self.data.iter().map(|v| 1.0 - v).collect();
        Volume3D {
            dims: self.dims,
            data,
            kind: self.kind,
            voxel_size: self.voxel_size,
        }
    }

    /// Reorders axes so that new axis `a` is old axis `perm[a]`.
    pub fn permute_axes(&self, perm: [usize; 3]) -> Volume3D {
        let nd = [
            self.dims[perm[0]],
            self.dims[perm[1]],
            self.dims[perm[2]],
        ];
        let mut data = vec![0.0f32; self.data.len()];
        for nz in 0..nd[2] {
            for ny in 0..nd[1] {
                for nx in 0..nd[0] {
                    let mut old = [0usize; 3];
                    old[perm[0]] = nx;
                    old[perm[1]] = ny;
                    old[perm[2]] = nz;
                    data[nx + nd[0] * (ny + nd[1] * nz)] = self.get(old[0], old[1], old[2]);
                }
            }
        }
        Volume3D {
            dims: nd,
            data,
            kind: self.kind,
            voxel_size: self.voxel_size,
        }
    }
}

/// Physical labels of a core: porosity as a fraction, permeability in
/// (pseudo-)millidarcy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreLabels {
    pub porosity: f64,
    #[serde(rename = "permeability_mD")]
    pub permeability_md: f64,
}

/// Recipe for a synthetic porous volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    /// Box-filter radius in voxels; 0 means thresholded white noise.
    pub correlation_length: usize,
    /// Desired pore fraction, strictly inside (0, 1).
    pub target_porosity: f64,
    pub seed: u64,
    /// Kozeny constant used for the permeability label.
    #[serde(default = "default_kozeny_constant")]
    pub kozeny_constant: f64,
}

fn default_kozeny_constant() -> f64 {
    5.0
}

/// Loads a headerless unsigned-8-bit raw volume, x-fastest voxel order.
pub fn load_raw_volume(
    path: &Path,
    dims: [usize; 3],
    encoding: Encoding,
) -> Result<Volume3D, VoxelError> {
    let expected = dims[0] * dims[1] * dims[2];
    let meta = fs::metadata(path)?;
    if meta.len() != expected as u64 {
        return Err(VoxelError::FileSizeMismatch {
            path: path.to_path_buf(),
            dims,
            expected,
            actual: meta.len() as usize,
        });
    }
    let mut bytes = Vec::with_capacity(expected);
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected {
        return Err(VoxelError::FileSizeMismatch {
            path: path.to_path_buf(),
            dims,
            expected,
            actual: bytes.len(),
        });
    }
    decode_raw(&bytes, dims, encoding)
}

/// Decodes raw voxel bytes without touching the filesystem.
pub fn decode_raw(
    bytes: &[u8],
    dims: [usize; 3],
    encoding: Encoding,
) -> Result<Volume3D, VoxelError> {
    let (data, kind): (Vec<f32>, _) = match encoding {
        Encoding::U8Binary => (
            bytes
                .iter()
                .map(|&b| if b == 0 { 0.0 } else { 1.0 })
                .collect(),
            VoxelKind::Binary,
        ),
        Encoding::U8Grayscale => (
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
            VoxelKind::Grayscale,
        ),
    };
    Volume3D::new(dims, data, kind)
}

/// Encodes a volume back to raw bytes (inverse of [`decode_raw`]).
pub fn encode_raw(volume: &Volume3D) -> Vec<u8> {
    match volume.kind() {
        VoxelKind::Binary => volume
            .data()
            .iter()
            .map(|&v| if v == 0.0 { 0u8 } else { 255 })
            .collect(),
        VoxelKind::Grayscale => volume
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect(),
    }
}

/// Pore fraction of a binary volume: voxels equal to 1.0 over all voxels.
pub fn porosity(volume: &Volume3D) -> Result<f64, VoxelError> {
    if volume.kind() != VoxelKind::Binary {
        return Err(VoxelError::NotBinary);
    }
    let pores = volume.data().iter().filter(|&&v| v == 1.0).count();
    Ok(pores as f64 / volume.voxel_count() as f64)
}

/// Solid–pore interface density: face-adjacent differing pairs over voxel
/// count. Faces on the volume boundary are not counted.
pub fn specific_surface(volume: &Volume3D) -> Result<f64, VoxelError> {
    if volume.kind() != VoxelKind::Binary {
        return Err(VoxelError::NotBinary);
    }
    let [nx, ny, nz] = volume.dims();
    let data = volume.data();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut faces = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = data[idx(x, y, z)];
                if x + 1 < nx && data[idx(x + 1, y, z)] != v {
                    faces += 1;
                }
                if y + 1 < ny && data[idx(x, y + 1, z)] != v {
                    faces += 1;
                }
                if z + 1 < nz && data[idx(x, y, z + 1)] != v {
                    faces += 1;
                }
            }
        }
    }
    Ok(faces as f64 / volume.voxel_count() as f64)
}

/// Kozeny-Carman permeability proxy k = φ³ / (c·S²·(1−φ)²), in voxel².
/// Multiply by [`PSEUDO_MD_PER_VOXEL_SQ`] for label units.
pub fn kozeny_carman(porosity: f64, surface: f64, c: f64) -> Result<f64, VoxelError> {
    if !(0.0..1.0).contains(&porosity) {
        return Err(VoxelError::InvalidPorosity(porosity));
    }
    if surface <= 0.0 {
        return Err(VoxelError::ZeroSurface(surface));
    }
    if c <= 0.0 {
        return Err(VoxelError::InvalidSpec(format!(
            "kozeny constant must be positive, got {c}"
        )));
    }
    Ok(porosity.powi(3) / (c * surface * surface * (1.0 - porosity).powi(2)))
}

/// Generates a labeled synthetic binary volume: an i.i.d. standard-normal
/// field smoothed by a separable box filter of radius `correlation_length`,
/// thresholded at the empirical quantile so the pore count is exactly
/// `round(target_porosity · n)` (clamped to keep both phases present).
/// Deterministic per seed.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Volume3D, CoreLabels), VoxelError> {
    if spec.dims.iter().any(|&d| d < 8) {
        return Err(VoxelError::InvalidSpec(format!(
            "dims must each be >= 8, got {:?}",
            spec.dims
        )));
    }
    if !(spec.target_porosity > 0.0 && spec.target_porosity < 1.0) {
        return Err(VoxelError::InvalidSpec(format!(
            "target porosity must lie strictly inside (0, 1), got {}",
            spec.target_porosity
        )));
    }
    if spec.kozeny_constant <= 0.0 {
        return Err(VoxelError::InvalidSpec(format!(
            "kozeny constant must be positive, got {}",
            spec.kozeny_constant
        )));
    }

    let n = spec.dims[0] * spec.dims[1] * spec.dims[2];
    let mut rng = seed::rng(spec.seed, "synth_field", 0);
    let mut field: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for axis in 0..3 {
        box_filter_axis(&mut field, spec.dims, axis, spec.correlation_length);
    }

    // Rank voxels by field value (ties by index) and open the top-k as pore.
    let pores = ((spec.target_porosity * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        field[b as usize]
            .total_cmp(&field[a as usize])
            .then(a.cmp(&b))
    });
    let mut data = vec![0.0f32; n];
    for &i in &order[..pores] {
        data[i as usize] = 1.0;
    }

    let volume = Volume3D::binary(spec.dims, data)?;
    let phi = porosity(&volume)?;
    let surface = specific_surface(&volume)?;
    let permeability_md = kozeny_carman(phi, surface, spec.kozeny_constant)? * PSEUDO_MD_PER_VOXEL_SQ;
    Ok((
        volume,
        CoreLabels {
            porosity: phi,
            permeability_md,
        },
    ))
}

/// In-place box filter of radius `r` along one axis, windows truncated at
/// the volume boundary. Uses per-line prefix sums.
fn box_filter_axis(field: &mut [f64], dims: [usize; 3], axis: usize, r: usize) {
    if r == 0 {
        return;
    }
    let [nx, ny, nz] = dims;
    let (len, stride, lines) = match axis {
        0 => (nx, 1, [(ny, nx), (nz, nx * ny)]),
        1 => (ny, nx, [(nx, 1), (nz, nx * ny)]),
        _ => (nz, nx * ny, [(nx, 1), (ny, nx)]),
    };
    let mut prefix = vec![0.0f64; len + 1];
    let mut line = vec![0.0f64; len];
    for a in 0..lines[0].0 {
        for b in 0..lines[1].0 {
            let base = a * lines[0].1 + b * lines[1].1;
            for i in 0..len {
                line[i] = field[base + i * stride];
                prefix[i + 1] = prefix[i] + line[i];
            }
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                let sum = prefix[hi + 1] - prefix[lo];
                field[base + i * stride] = sum / (hi - lo + 1) as f64;
            }
        }
    }
}

/// Sidecar metadata stored next to a raw volume (`X.raw` pairs with `X.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub kind: VoxelKind,
    pub voxel_size: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub labels: Option<CoreLabels>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub synth: Option<SynthSpec>,
}

/// Writes `base.raw` plus the `base.json` sidecar.
pub fn save_volume(
    base: &Path,
    volume: &Volume3D,
    labels: Option<&CoreLabels>,
    synth: Option<&SynthSpec>,
) -> Result<(), VoxelError> {
    let meta = VolumeMeta {
        dims: volume.dims(),
        kind: volume.kind(),
        voxel_size: volume.voxel_size(),
        labels: labels.copied(),
        synth: synth.cloned(),
    };
    fs::File::create(base.with_extension("raw"))?.write_all(&encode_raw(volume))?;
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(base.with_extension("json"), json + "\n")?;
    Ok(())
}

/// Loads a volume from its `base.raw` + `base.json` pair.
pub fn load_volume(base: &Path) -> Result<(Volume3D, VolumeMeta), VoxelError> {
    let meta: VolumeMeta = serde_json::from_str(&fs::read_to_string(base.with_extension("json"))?)?;
    let encoding = match meta.kind {
        VoxelKind::Binary => Encoding::U8Binary,
        VoxelKind::Grayscale => Encoding::U8Grayscale,
    };
    let volume = load_raw_volume(&base.with_extension("raw"), meta.dims, encoding)?;
    Ok((volume, meta))
}

/// Loads a volume whose sidecar must carry labels.
pub fn load_labeled_volume(base: &Path) -> Result<(Volume3D, CoreLabels), VoxelError> {
    let (volume, meta) = load_volume(base)?;
    let labels = meta
        .labels
        .ok_or_else(|| VoxelError::MissingLabels(base.to_path_buf()))?;
    Ok((volume, labels))
}
