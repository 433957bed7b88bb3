//! Synthetic two-class point clouds normalised into `[0.1, 0.9]^d`, and
//! their binary file format.
//!
//! File layout (little-endian): magic `ADDS`, `u32` version, `u32` n,
//! `u32` d, then n records of d `f64` values followed by a `u32` label.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::CleanExample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"ADDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Gauss2,
    Moons,
    Rings,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Gauss2 => "gauss2",
            DatasetKind::Moons => "moons",
            DatasetKind::Rings => "rings",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss2" => Ok(DatasetKind::Gauss2),
            "moons" => Ok(DatasetKind::Moons),
            "rings" => Ok(DatasetKind::Rings),
            other => Err(Error::UnknownDataset(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    pub dim: usize,
    pub points: Vec<CleanExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.points.iter().map(|p| p.label + 1).max().unwrap_or(0).max(2)
    }

    /// All points as an `[n, d]` matrix.
    pub fn features(&self) -> Tensor {
        self.gather(&(0..self.len()).collect::<Vec<_>>()).0
    }

    pub fn labels(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.label).collect()
    }

    /// Selected rows and their labels.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let data = idx.iter().flat_map(|&i| self.points[i].x0.iter().copied()).collect();
        let labels = idx.iter().map(|&i| self.points[i].label).collect();
        (Tensor::from_parts(vec![idx.len(), self.dim], data), labels)
    }

    /// First `n` points (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            points: self.points.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid(format!("dataset `{}` is empty", self.name)));
        }
        for p in &self.points {
            if p.x0.len() != self.dim || p.x0.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("dataset `{}` has a point outside [0,1]^{}", self.name, self.dim)));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for p in &self.points {
            for v in &p.x0 {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(p.label as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads the binary format; name, split and seed are not stored in it.
    pub fn read_from<R: Read>(mut r: R, name: &str, split: Split) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Malformed("dataset header".into()))?;
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Malformed("dataset header".into()))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let n = word()? as usize;
        let dim = word()? as usize;
        let mut points = Vec::with_capacity(n);
        let mut buf8 = [0u8; 8];
        let mut buf4 = [0u8; 4];
        for i in 0..n {
            let mut x0 = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut buf8).map_err(|_| Error::Malformed(format!("dataset record {i} truncated")))?;
                x0.push(f64::from_le_bytes(buf8));
            }
            r.read_exact(&mut buf4).map_err(|_| Error::Malformed(format!("dataset record {i} truncated")))?;
            points.push(CleanExample {
                x0,
                label: u32::from_le_bytes(buf4) as usize,
            });
        }
        let ds = Dataset {
            name: name.to_owned(),
            split,
            seed: 0,
            dim,
            points,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        Self::read_from(std::fs::File::open(path)?, name, split)
    }
}

/// Generates the named distribution and splits it 80/20 into train/test.
///
/// Labels alternate before splitting, so each split is class-balanced to
/// within one example. Coordinates are min-max normalised over the whole
/// sample into `[0.1, 0.9]`.
pub fn gen_dataset(kind: DatasetKind, n: usize, dim: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n < 2 || dim < 2 {
        return Err(Error::invalid(format!("need n >= 2 and d >= 2, got n = {n}, d = {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    let raw: Vec<(Vec<f64>, usize)> = (0..n)
        .map(|i| {
            let label = i % 2;
            let x = match kind {
                DatasetKind::Gauss2 => gauss2_point(label, dim, &mut normal),
                DatasetKind::Moons => moons_point(label, dim, &mut normal),
                DatasetKind::Rings => rings_point(label, dim, &mut normal),
            };
            (x, label)
        })
        .collect();

    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for (x, _) in &raw {
        for j in 0..dim {
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
    }
    let points: Vec<CleanExample> = raw
        .into_iter()
        .map(|(x, label)| CleanExample {
            x0: x
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let span = hi[j] - lo[j];
                    if span > 0.0 {
                        0.1 + 0.8 * (v - lo[j]) / span
                    } else {
                        0.5
                    }
                })
                .collect(),
            label,
        })
        .collect();

    let n_train = ((n * 4) / 5).max(1);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut train: Vec<CleanExample> = points[..n_train].to_vec();
    let mut test: Vec<CleanExample> = points[n_train..].to_vec();
    train.shuffle(&mut shuffle_rng);
    test.shuffle(&mut shuffle_rng);
    let make = |points, split| Dataset {
        name: kind.name().to_owned(),
        split,
        seed,
        dim,
        points,
    };
    Ok((make(train, Split::Train), make(test, Split::Test)))
}

/// Two isotropic Gaussians (std 0.5) with means at `±1.5` along the unit
/// diagonal: the classes are separated by six standard deviations.
fn gauss2_point(label: usize, dim: usize, normal: &mut impl FnMut() -> f64) -> Vec<f64> {
    let sign = if label == 0 { -1.0 } else { 1.0 };
    let offset = sign * 1.5 / (dim as f64).sqrt();
    (0..dim).map(|_| offset + 0.5 * normal()).collect()
}

fn moons_point(label: usize, dim: usize, normal: &mut impl FnMut() -> f64) -> Vec<f64> {
    // Angle from a squashed normal keeps the generator on one rng stream.
    let u = 0.5 + 0.5 * (normal() / 2.0).tanh();
    let theta = std::f64::consts::PI * u;
    let (x, y) = if label == 0 {
        (theta.cos(), theta.sin())
    } else {
        (1.0 - theta.cos(), 0.5 - theta.sin())
    };
    let mut p = vec![x + 0.1 * normal(), y + 0.1 * normal()];
    p.extend((2..dim).map(|_| 0.1 * normal()));
    p
}

fn rings_point(label: usize, dim: usize, normal: &mut impl FnMut() -> f64) -> Vec<f64> {
    let radius = if label == 0 { 1.0 } else { 2.0 };
    let (a, b) = (normal(), normal());
    let norm = (a * a + b * b).sqrt().max(1e-12);
    let mut p = vec![radius * a / norm + 0.1 * normal(), radius * b / norm + 0.1 * normal()];
    p.extend((2..dim).map(|_| 0.1 * normal()));
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_byte_identical() {
        for kind in [DatasetKind::Gauss2, DatasetKind::Moons, DatasetKind::Rings] {
            let (a, b) = gen_dataset(kind, 50, 3, 7).unwrap();
            let (c, d) = gen_dataset(kind, 50, 3, 7).unwrap();
            assert_eq!(a.to_bytes(), c.to_bytes());
            assert_eq!(b.to_bytes(), d.to_bytes());
            assert_eq!(a.len(), 40);
            assert_eq!(b.len(), 10);
            a.validate().unwrap();
        }
    }

    #[test]
    fn splits_are_balanced() {
        for n in [2, 3, 11, 100, 257] {
            let (train, test) = gen_dataset(DatasetKind::Gauss2, n, 2, 1).unwrap();
            for ds in [&train, &test] {
                let ones = ds.labels().iter().filter(|&&y| y == 1).count() as i64;
                let zeros = ds.len() as i64 - ones;
                assert!((ones - zeros).abs() <= 1, "n={n}");
            }
        }
        let (train, test) = gen_dataset(DatasetKind::Gauss2, 2, 2, 1).unwrap();
        let mut labels = [train.labels(), test.labels()].concat();
        labels.sort();
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn coordinates_stay_in_margin_box() {
        let (train, test) = gen_dataset(DatasetKind::Rings, 200, 4, 3).unwrap();
        for p in train.points.iter().chain(&test.points) {
            assert!(p.x0.iter().all(|v| (0.1 - 1e-12..=0.9 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn preconditions_and_names() {
        assert!(gen_dataset(DatasetKind::Gauss2, 1, 2, 0).is_err());
        assert!(gen_dataset(DatasetKind::Gauss2, 10, 1, 0).is_err());
        assert!(matches!("spirals".parse::<DatasetKind>(), Err(Error::UnknownDataset(_))));
        assert_eq!("moons".parse::<DatasetKind>().unwrap(), DatasetKind::Moons);
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let (train, _) = gen_dataset(DatasetKind::Moons, 20, 2, 9).unwrap();
        let bytes = train.to_bytes();
        let back = Dataset::read_from(&bytes[..], "moons", Split::Train).unwrap();
        assert_eq!(back.points, train.points);
        assert!(matches!(Dataset::read_from(&bytes[..bytes.len() - 3], "m", Split::Train), Err(Error::Malformed(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::read_from(&bad[..], "m", Split::Train), Err(Error::BadMagic { .. })));
    }
}
