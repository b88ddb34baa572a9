//! Sub-cube sampling, masking, and dataset assembly.
//!
//! Sub-cubes (default 10×10×10) are drawn uniformly with replacement from
//! source volumes. For self-supervised restoration a fraction of each
//! sub-cube's voxels is replaced by a fill value outside the binary value
//! set; the original values become the restoration target. Supervised
//! samples pair unmasked sub-cubes with their source core's labels, and the
//! supervised split assigns whole cores to one side so no core leaks across.
//!
//! All builders are pure functions of `(inputs, seed)`; per-volume and
//! per-sample random streams are derived with [`crate::seed::derive`], so
//! building in parallel changes nothing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::seed;
use crate::voxel::{CoreLabels, Volume3D};

const CACHE_MAGIC: &[u8; 4] = b"CTDS";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("edge {edge} exceeds a volume dimension {dims:?}")]
    EdgeTooLarge { edge: usize, dims: [usize; 3] },
    #[error("dataset build needs at least one volume and one sample per volume")]
    EmptyInput,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid mask spec: {0}")]
    InvalidMaskSpec(String),
    #[error("{path}: cache io error: {source}")]
    CacheIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    CacheFormat { path: PathBuf, reason: String },
}

/// A sub-cube cut from a source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SubCube {
    pub edge: usize,
    pub values: Vec<f32>,
    pub origin: [usize; 3],
    pub core_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Exact-count random voxels, sampled without replacement.
    #[default]
    Voxel,
    /// Random axis-aligned rectangles on random z-slices, accumulated until
    /// the quota is reached; the last rectangle is trimmed to hit it exactly.
    Patch,
}

/// Masking scheme: which fraction of a sub-cube to hide and with what value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub rate: f64,
    pub mode: MaskMode,
    /// Fill value for masked voxels; 0.5 sits outside the binary value set
    /// so the model can tell masked from observed voxels.
    pub mask_value: f32,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            rate: 0.2,
            mode: MaskMode::Voxel,
            mask_value: 0.5,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(SamplerError::InvalidMaskSpec(format!(
                "rate must lie in [0, 1], got {}",
                self.rate
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_value) {
            return Err(SamplerError::InvalidMaskSpec(format!(
                "mask value must lie in [0, 1], got {}",
                self.mask_value
            )));
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> MaskSpec {
        MaskSpec { seed, ..*self }
    }
}

/// A masked sub-cube: model input, restoration target, and the hidden
/// voxel indices (sorted ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub mask: Vec<usize>,
}

/// An unmasked sub-cube with its core's `(porosity, permeability)` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedSample {
    pub input: Vec<f32>,
    pub target: [f64; 2],
    pub core_id: usize,
}

/// Train/test split rule. `Random` splits at sample level for SSL data and
/// at core level for supervised data; `FirstCores` assigns the first k
/// source volumes/cores wholesale to the training side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Random(f64),
    FirstCores(usize),
}

/// Draws `count` sub-cubes with origins uniform over the valid offsets,
/// with replacement. Deterministic per seed.
pub fn sample_subcubes(
    volume: &Volume3D,
    count: usize,
    edge: usize,
    seed: u64,
) -> Result<Vec<SubCube>, SamplerError> {
    let dims = volume.dims();
    if edge == 0 || edge > dims[0] || edge > dims[1] || edge > dims[2] {
        return Err(SamplerError::EdgeTooLarge { edge, dims });
    }
    let mut rng = seed::rng(seed, "origins", 0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let origin = [
            rng.gen_range(0..=dims[0] - edge),
            rng.gen_range(0..=dims[1] - edge),
            rng.gen_range(0..=dims[2] - edge),
        ];
        out.push(cut_subcube(volume, origin, edge, 0));
    }
    Ok(out)
}

fn cut_subcube(volume: &Volume3D, origin: [usize; 3], edge: usize, core_id: usize) -> SubCube {
    let mut values = Vec::with_capacity(edge * edge * edge);
    for dz in 0..edge {
        for dy in 0..edge {
            for dx in 0..edge {
                values.push(volume.get(origin[0] + dx, origin[1] + dy, origin[2] + dz));
            }
        }
    }
    SubCube {
        edge,
        values,
        origin,
        core_id,
    }
}

/// Masks `round(rate · edge³)` voxels of a sub-cube. The spec must be
/// valid ([`MaskSpec::validate`]); rates 0 and 1 are legal edge cases.
pub fn apply_mask(sub: &SubCube, spec: &MaskSpec) -> MaskedSample {
    assert!(spec.validate().is_ok(), "apply_mask requires a valid MaskSpec");
    let n = sub.values.len();
    let quota = (spec.rate * n as f64).round() as usize;
    let mut rng = seed::rng(spec.seed, "mask", 0);

    let mut mask: Vec<usize> = match spec.mode {
        MaskMode::Voxel => rand::seq::index::sample(&mut rng, n, quota).into_vec(),
        MaskMode::Patch => {
            let e = sub.edge;
            let mut chosen = vec![false; n];
            let mut picked = Vec::with_capacity(quota);
            while picked.len() < quota {
                let z = rng.gen_range(0..e);
                let x0 = rng.gen_range(0..e);
                let x1 = rng.gen_range(x0..e);
                let y0 = rng.gen_range(0..e);
                let y1 = rng.gen_range(y0..e);
                'rect: for y in y0..=y1 {
                    for x in x0..=x1 {
                        let i = x + e * (y + e * z);
                        if !chosen[i] {
                            chosen[i] = true;
                            picked.push(i);
                            if picked.len() == quota {
                                break 'rect;
                            }
                        }
                    }
                }
            }
            picked
        }
    };
    mask.sort_unstable();

    let target = sub.values.clone();
    let mut input = target.clone();
    for &i in &mask {
        input[i] = spec.mask_value;
    }
    MaskedSample {
        input,
        target,
        mask,
    }
}

/// Samples and masks sub-cubes from each volume, then splits into train and
/// test sets. `Random(0.5)` gives the equally-dispensed default.
pub fn build_ssl_dataset(
    volumes: &[Volume3D],
    per_volume: usize,
    edge: usize,
    spec: &MaskSpec,
    split: Split,
    dataset_seed: u64,
    mode: ExecMode,
) -> Result<(Vec<MaskedSample>, Vec<MaskedSample>), SamplerError> {
    if volumes.is_empty() || per_volume == 0 {
        return Err(SamplerError::EmptyInput);
    }
    spec.validate()?;

    let per_volume_samples: Vec<Result<Vec<MaskedSample>, SamplerError>> =
        exec::indexed_map(mode, volumes.len(), |i| {
            let subs = sample_subcubes(
                &volumes[i],
                per_volume,
                edge,
                seed::derive(dataset_seed, "ssl_volume", i as u64),
            )?;
            Ok(subs
                .iter()
                .enumerate()
                .map(|(j, sub)| {
                    let sample_index = (i * per_volume + j) as u64;
                    apply_mask(sub, &spec.with_seed(seed::derive(spec.seed, "sample", sample_index)))
                })
                .collect())
        });

    let mut samples = Vec::with_capacity(volumes.len() * per_volume);
    let mut volume_of = Vec::with_capacity(volumes.len() * per_volume);
    for (i, r) in per_volume_samples.into_iter().enumerate() {
        for s in r? {
            samples.push(s);
            volume_of.push(i);
        }
    }

    match split {
        Split::Random(frac) => {
            if !(0.0..=1.0).contains(&frac) {
                return Err(SamplerError::InvalidSplit(format!(
                    "fraction must lie in [0, 1], got {frac}"
                )));
            }
            let n = samples.len();
            let n_train = (frac * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            shuffle(&mut order, &mut seed::rng(dataset_seed, "ssl_split", 0));
            let mut train = Vec::with_capacity(n_train);
            let mut test = Vec::with_capacity(n - n_train);
            let mut pool: Vec<Option<MaskedSample>> = samples.into_iter().map(Some).collect();
            for (rank, &i) in order.iter().enumerate() {
                let s = pool[i].take().expect("each index drawn once");
                if rank < n_train {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
            Ok((train, test))
        }
        Split::FirstCores(k) => {
            if k == 0 || k >= volumes.len() {
                return Err(SamplerError::InvalidSplit(format!(
                    "first-cores split needs 1 <= k < {}, got {k}",
                    volumes.len()
                )));
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (s, &v) in samples.into_iter().zip(&volume_of) {
                if v < k {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
            Ok((train, test))
        }
    }
}

/// Samples labeled sub-cubes from each core and splits at core level, so
/// the train and test core-id sets are disjoint.
pub fn build_supervised_dataset(
    cores: &[(Volume3D, CoreLabels)],
    per_core: usize,
    edge: usize,
    split: Split,
    dataset_seed: u64,
    mode: ExecMode,
) -> Result<(Vec<SupervisedSample>, Vec<SupervisedSample>), SamplerError> {
    if cores.is_empty() || per_core == 0 {
        return Err(SamplerError::EmptyInput);
    }
    let train_cores: Vec<bool> = match split {
        Split::FirstCores(k) => {
            if k == 0 || k >= cores.len() {
                return Err(SamplerError::InvalidSplit(format!(
                    "first-cores split needs 1 <= k < {}, got {k}",
                    cores.len()
                )));
            }
            (0..cores.len()).map(|i| i < k).collect()
        }
        Split::Random(frac) => {
            if !(0.0..=1.0).contains(&frac) {
                return Err(SamplerError::InvalidSplit(format!(
                    "fraction must lie in [0, 1], got {frac}"
                )));
            }
            let n_train = (frac * cores.len() as f64).round() as usize;
            if n_train == 0 || n_train == cores.len() {
                return Err(SamplerError::InvalidSplit(format!(
                    "random core split {frac} leaves an empty side for {} cores",
                    cores.len()
                )));
            }
            let mut order: Vec<usize> = (0..cores.len()).collect();
            shuffle(&mut order, &mut seed::rng(dataset_seed, "core_split", 0));
            let mut is_train = vec![false; cores.len()];
            for &c in &order[..n_train] {
                is_train[c] = true;
            }
            is_train
        }
    };

    let per_core_samples: Vec<Result<Vec<SupervisedSample>, SamplerError>> =
        exec::indexed_map(mode, cores.len(), |i| {
            let (volume, labels) = &cores[i];
            let subs = sample_subcubes(
                volume,
                per_core,
                edge,
                seed::derive(dataset_seed, "sup_volume", i as u64),
            )?;
            Ok(subs
                .into_iter()
                .map(|sub| SupervisedSample {
                    input: sub.values,
                    target: [labels.porosity, labels.permeability_md],
                    core_id: i,
                })
                .collect())
        });

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, r) in per_core_samples.into_iter().enumerate() {
        let dst = if train_cores[i] { &mut train } else { &mut test };
        dst.extend(r?);
    }
    Ok((train, test))
}

/// Fisher-Yates with the crate's seeded RNG.
fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// A deserialized dataset cache file.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetCache {
    Ssl {
        edge: usize,
        mask_value: f32,
        samples: Vec<MaskedSample>,
    },
    Supervised {
        edge: usize,
        samples: Vec<SupervisedSample>,
    },
}

fn cache_io(path: &Path) -> impl Fn(std::io::Error) -> SamplerError + '_ {
    move |source| SamplerError::CacheIo {
        path: path.to_path_buf(),
        source,
    }
}

fn cache_format(path: &Path, reason: impl Into<String>) -> SamplerError {
    SamplerError::CacheFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes an SSL dataset cache. Inputs are not stored: they are
/// reconstructed from target, mask and `mask_value` on read, so every
/// sample must use the same mask length and fill value.
pub fn write_ssl_cache(
    path: &Path,
    edge: usize,
    mask_value: f32,
    samples: &[MaskedSample],
) -> Result<(), SamplerError> {
    let volume = edge * edge * edge;
    let mask_len = samples.first().map_or(0, |s| s.mask.len());
    for s in samples {
        if s.target.len() != volume || s.mask.len() != mask_len {
            return Err(cache_format(path, "ragged sample; cache records are fixed-size"));
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(cache_io(path))?);
    let io = cache_io(path);
    w.write_all(CACHE_MAGIC).map_err(&io)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION).map_err(&io)?;
    w.write_u64::<LittleEndian>(samples.len() as u64).map_err(&io)?;
    w.write_u32::<LittleEndian>(edge as u32).map_err(&io)?;
    w.write_u8(0).map_err(&io)?;
    w.write_u32::<LittleEndian>(mask_len as u32).map_err(&io)?;
    w.write_f32::<LittleEndian>(mask_value).map_err(&io)?;
    for s in samples {
        for &v in &s.target {
            w.write_f32::<LittleEndian>(v).map_err(&io)?;
        }
        for &i in &s.mask {
            w.write_u32::<LittleEndian>(i as u32).map_err(&io)?;
        }
    }
    w.flush().map_err(&io)
}

/// Writes a supervised dataset cache (targets stored as f32).
pub fn write_supervised_cache(
    path: &Path,
    edge: usize,
    samples: &[SupervisedSample],
) -> Result<(), SamplerError> {
    let volume = edge * edge * edge;
    for s in samples {
        if s.input.len() != volume {
            return Err(cache_format(path, "ragged sample; cache records are fixed-size"));
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(cache_io(path))?);
    let io = cache_io(path);
    w.write_all(CACHE_MAGIC).map_err(&io)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION).map_err(&io)?;
    w.write_u64::<LittleEndian>(samples.len() as u64).map_err(&io)?;
    w.write_u32::<LittleEndian>(edge as u32).map_err(&io)?;
    w.write_u8(1).map_err(&io)?;
    for s in samples {
        for &v in &s.input {
            w.write_f32::<LittleEndian>(v).map_err(&io)?;
        }
        w.write_f32::<LittleEndian>(s.target[0] as f32).map_err(&io)?;
        w.write_f32::<LittleEndian>(s.target[1] as f32).map_err(&io)?;
        w.write_u32::<LittleEndian>(s.core_id as u32).map_err(&io)?;
    }
    w.flush().map_err(&io)
}

/// Reads a dataset cache written by [`write_ssl_cache`] or
/// [`write_supervised_cache`].
pub fn read_cache(path: &Path) -> Result<DatasetCache, SamplerError> {
    let mut r = BufReader::new(File::open(path).map_err(cache_io(path))?);
    let io = cache_io(path);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&io)?;
    if &magic != CACHE_MAGIC {
        return Err(cache_format(path, format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(&io)?;
    if version != CACHE_VERSION {
        return Err(cache_format(path, format!("unsupported version {version}")));
    }
    let count = r.read_u64::<LittleEndian>().map_err(&io)? as usize;
    let edge = r.read_u32::<LittleEndian>().map_err(&io)? as usize;
    let kind = r.read_u8().map_err(&io)?;
    let volume = edge * edge * edge;
    let truncated = |_| cache_format(path, "truncated cache file");
    match kind {
        0 => {
            let mask_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mask_value = r.read_f32::<LittleEndian>().map_err(truncated)?;
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let mut target = vec![0.0f32; volume];
                r.read_f32_into::<LittleEndian>(&mut target).map_err(truncated)?;
                let mut mask = Vec::with_capacity(mask_len);
                for _ in 0..mask_len {
                    let i = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
                    if i >= volume {
                        return Err(cache_format(path, format!("mask index {i} out of range")));
                    }
                    mask.push(i);
                }
                let mut input = target.clone();
                for &i in &mask {
                    input[i] = mask_value;
                }
                samples.push(MaskedSample {
                    input,
                    target,
                    mask,
                });
            }
            Ok(DatasetCache::Ssl {
                edge,
                mask_value,
                samples,
            })
        }
        1 => {
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let mut input = vec![0.0f32; volume];
                r.read_f32_into::<LittleEndian>(&mut input).map_err(truncated)?;
                let porosity = r.read_f32::<LittleEndian>().map_err(truncated)? as f64;
                let permeability = r.read_f32::<LittleEndian>().map_err(truncated)? as f64;
                let core_id = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
                samples.push(SupervisedSample {
                    input,
                    target: [porosity, permeability],
                    core_id,
                });
            }
            Ok(DatasetCache::Supervised { edge, samples })
        }
        other => Err(cache_format(path, format!("unknown record kind {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{generate_synthetic, SynthSpec};
    use proptest::prelude::*;

    fn test_volume(seed: u64) -> Volume3D {
        generate_synthetic(&SynthSpec {
            dims: [32, 32, 32],
            correlation_length: 1,
            target_porosity: 0.3,
            seed,
            kozeny_constant: 5.0,
        })
        .unwrap()
        .0
    }

    fn labeled(seed: u64) -> (Volume3D, CoreLabels) {
        generate_synthetic(&SynthSpec {
            dims: [16, 16, 16],
            correlation_length: 1,
            target_porosity: 0.2 + 0.02 * seed as f64,
            seed,
            kozeny_constant: 5.0,
        })
        .unwrap()
    }

    #[test]
    fn origins_stay_in_bounds() {
        let v = test_volume(1);
        for sub in sample_subcubes(&v, 500, 10, 9).unwrap() {
            for c in sub.origin {
                assert!(c <= 22);
            }
        }
    }

    #[test]
    fn zero_count_gives_empty_list() {
        assert!(sample_subcubes(&test_volume(1), 0, 10, 9).unwrap().is_empty());
    }

    #[test]
    fn sampling_is_deterministic() {
        let v = test_volume(2);
        let a = sample_subcubes(&v, 20, 10, 9).unwrap();
        let b = sample_subcubes(&v, 20, 10, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_edge_is_rejected() {
        assert!(matches!(
            sample_subcubes(&test_volume(1), 1, 33, 0),
            Err(SamplerError::EdgeTooLarge { .. })
        ));
    }

    #[test]
    fn subcube_values_match_source_voxels() {
        let v = test_volume(3);
        for sub in sample_subcubes(&v, 10, 4, 5).unwrap() {
            for dz in 0..4 {
                for dy in 0..4 {
                    for dx in 0..4 {
                        let got = sub.values[dx + 4 * (dy + 4 * dz)];
                        let want =
                            v.get(sub.origin[0] + dx, sub.origin[1] + dy, sub.origin[2] + dz);
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    fn any_subcube(edge: usize, seed: u64) -> SubCube {
        let v = test_volume(seed);
        sample_subcubes(&v, 1, edge, seed).unwrap().pop().unwrap()
    }

    #[test]
    fn default_rate_masks_exactly_200_voxels() {
        let sub = any_subcube(10, 4);
        let m = apply_mask(&sub, &MaskSpec::default());
        assert_eq!(m.mask.len(), 200);
        check_mask_invariants(&sub, &m, 0.5);
    }

    #[test]
    fn rate_zero_and_one_are_legal() {
        let sub = any_subcube(10, 4);
        let none = apply_mask(&sub, &MaskSpec { rate: 0.0, ..Default::default() });
        assert!(none.mask.is_empty());
        assert_eq!(none.input, none.target);

        let all = apply_mask(&sub, &MaskSpec { rate: 1.0, ..Default::default() });
        assert_eq!(all.mask.len(), 1000);
        assert!(all.input.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn patch_mode_hits_quota_exactly() {
        let sub = any_subcube(10, 6);
        let spec = MaskSpec {
            mode: MaskMode::Patch,
            seed: 11,
            ..Default::default()
        };
        let m = apply_mask(&sub, &spec);
        assert_eq!(m.mask.len(), 200);
        check_mask_invariants(&sub, &m, 0.5);
    }

    #[test]
    fn masking_is_deterministic() {
        let sub = any_subcube(10, 7);
        let spec = MaskSpec { seed: 3, ..Default::default() };
        assert_eq!(apply_mask(&sub, &spec), apply_mask(&sub, &spec));
    }

    fn check_mask_invariants(sub: &SubCube, m: &MaskedSample, mask_value: f32) {
        let masked: std::collections::HashSet<usize> = m.mask.iter().copied().collect();
        assert_eq!(masked.len(), m.mask.len(), "mask indices must be distinct");
        for i in 0..sub.values.len() {
            assert_eq!(m.target[i], sub.values[i]);
            if masked.contains(&i) {
                assert_eq!(m.input[i], mask_value);
            } else {
                assert_eq!(m.input[i], m.target[i]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn mask_count_matches_rounded_rate(
            rate in 0.0f64..=1.0,
            edge in 4usize..=8,
            mode in prop::sample::select(vec![MaskMode::Voxel, MaskMode::Patch]),
            seed in any::<u64>(),
        ) {
            let sub = any_subcube(edge, 1);
            let spec = MaskSpec { rate, mode, mask_value: 0.5, seed };
            let m = apply_mask(&sub, &spec);
            let n = (edge * edge * edge) as f64;
            prop_assert_eq!(m.mask.len(), (rate * n).round() as usize);
            check_mask_invariants(&sub, &m, 0.5);
        }
    }

    #[test]
    fn ssl_split_half_is_equal() {
        let v = test_volume(5);
        let (train, test) = build_ssl_dataset(
            &[v],
            100,
            10,
            &MaskSpec::default(),
            Split::Random(0.5),
            42,
            ExecMode::Auto,
        )
        .unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(test.len(), 50);
    }

    #[test]
    fn ssl_split_one_keeps_everything_in_train() {
        let v = test_volume(5);
        let (train, test) = build_ssl_dataset(
            &[v],
            20,
            10,
            &MaskSpec::default(),
            Split::Random(1.0),
            42,
            ExecMode::Auto,
        )
        .unwrap();
        assert_eq!(train.len(), 20);
        assert!(test.is_empty());
    }

    #[test]
    fn ssl_empty_inputs_are_rejected() {
        let v = test_volume(5);
        assert!(matches!(
            build_ssl_dataset(&[], 10, 10, &MaskSpec::default(), Split::Random(0.5), 1, ExecMode::Auto),
            Err(SamplerError::EmptyInput)
        ));
        assert!(matches!(
            build_ssl_dataset(&[v], 0, 10, &MaskSpec::default(), Split::Random(0.5), 1, ExecMode::Auto),
            Err(SamplerError::EmptyInput)
        ));
    }

    #[test]
    fn ssl_build_is_pure_in_seed_and_modes_agree() {
        let vols = vec![test_volume(5), test_volume(6)];
        let build = |mode| {
            build_ssl_dataset(&vols, 30, 10, &MaskSpec::default(), Split::Random(0.5), 9, mode)
                .unwrap()
        };
        let a = build(ExecMode::Sequential);
        let b = build(ExecMode::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn supervised_first_k_keeps_core_sides_disjoint() {
        let cores: Vec<_> = (0..11).map(labeled).collect();
        let (train, test) =
            build_supervised_dataset(&cores, 100, 10, Split::FirstCores(6), 3, ExecMode::Auto)
                .unwrap();
        assert_eq!(train.len() + test.len(), 1100);
        assert!(train.iter().all(|s| s.core_id < 6));
        assert!(test.iter().all(|s| s.core_id >= 6));
        for s in &train {
            assert_eq!(s.target, [cores[s.core_id].1.porosity, cores[s.core_id].1.permeability_md]);
        }
    }

    #[test]
    fn supervised_split_cannot_leave_empty_test() {
        let cores: Vec<_> = (0..3).map(labeled).collect();
        assert!(matches!(
            build_supervised_dataset(&cores, 10, 10, Split::FirstCores(3), 3, ExecMode::Auto),
            Err(SamplerError::InvalidSplit(_))
        ));
    }

    #[test]
    fn cache_roundtrip_ssl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ctds");
        let v = test_volume(8);
        let (train, _) = build_ssl_dataset(
            &[v],
            20,
            10,
            &MaskSpec::default(),
            Split::Random(1.0),
            4,
            ExecMode::Auto,
        )
        .unwrap();
        write_ssl_cache(&path, 10, 0.5, &train).unwrap();
        match read_cache(&path).unwrap() {
            DatasetCache::Ssl { edge, mask_value, samples } => {
                assert_eq!(edge, 10);
                assert_eq!(mask_value, 0.5);
                assert_eq!(samples, train);
            }
            other => panic!("wrong cache kind: {other:?}"),
        }
    }

    #[test]
    fn cache_roundtrip_supervised_quantizes_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ctds");
        let cores: Vec<_> = (0..2).map(labeled).collect();
        let (train, _) =
            build_supervised_dataset(&cores, 5, 8, Split::FirstCores(1), 2, ExecMode::Auto)
                .unwrap();
        write_supervised_cache(&path, 8, &train).unwrap();
        match read_cache(&path).unwrap() {
            DatasetCache::Supervised { edge, samples } => {
                assert_eq!(edge, 8);
                assert_eq!(samples.len(), train.len());
                for (got, want) in samples.iter().zip(&train) {
                    assert_eq!(got.input, want.input);
                    assert_eq!(got.core_id, want.core_id);
                    assert_eq!(got.target[0], want.target[0] as f32 as f64);
                    assert_eq!(got.target[1], want.target[1] as f32 as f64);
                }
            }
            other => panic!("wrong cache kind: {other:?}"),
        }
    }

    #[test]
    fn cache_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ctds");
        std::fs::write(&bad, b"XXTD\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_cache(&bad),
            Err(SamplerError::CacheFormat { .. })
        ));

        let path = dir.path().join("trunc.ctds");
        let v = test_volume(8);
        let (train, _) = build_ssl_dataset(
            &[v],
            4,
            10,
            &MaskSpec::default(),
            Split::Random(1.0),
            4,
            ExecMode::Auto,
        )
        .unwrap();
        write_ssl_cache(&path, 10, 0.5, &train).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            read_cache(&path),
            Err(SamplerError::CacheFormat { .. })
        ));
    }
}
