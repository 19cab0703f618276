//! Trajectory datasets: sampling, striding across scales, measurement noise
//! and a binary file format.
//!
//! # File layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic       8 bytes   b"HITSDSET"
//! version     u32       1
//! name_len    u32       byte length of the system name
//! name        [u8]      UTF-8 system name
//! split       u8        0 = train, 1 = validate, 2 = test
//! dim         u32       state dimension D
//! p           u64       steps per trajectory (p + 1 states)
//! n           u64       trajectory count
//! dt          f64
//! noise       f64       noise fraction
//! seed        u64
//! n records:  t0 f64, then (p + 1) * D f64 states, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{reference_trajectory, Region, SystemSpec};
use crate::rng::{substream, Domain};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"HITSDSET";
const FORMAT_VERSION: u32 = 1;

/// Uniformly sampled states `x(t0), x(t0 + dt), ..., x(t0 + p dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    /// `states` is row-major with `dim` columns and at least two rows.
    pub fn new(t0: f64, dt: f64, dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.len() % dim != 0 || states.len() / dim < 2 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 2 states of dimension {dim}, got {} values",
                states.len()
            )));
        }
        if let Some(i) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::diverged("trajectory data", i / dim));
        }
        Ok(Trajectory { t0, dt, dim, states })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored states, `p + 1`.
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of steps `p`.
    pub fn steps(&self) -> usize {
        self.len() - 1
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.dim), &self.states).expect("consistent shape")
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.t0 + i as f64 * self.dt).collect()
    }

    /// CSV with columns `time,x0,...`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let cols: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        writeln!(w, "time,{}", cols.join(","))?;
        for (t, row) in self.times().iter().zip(self.states.chunks_exact(self.dim)) {
            write!(w, "{t}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Keep states `0, s, 2s, ...`.
    fn strided(&self, s: usize) -> Trajectory {
        let states = self
            .states
            .chunks_exact(self.dim)
            .step_by(s)
            .take(self.steps() / s + 1)
            .flatten()
            .copied()
            .collect();
        Trajectory {
            t0: self.t0,
            dt: self.dt * s as f64,
            dim: self.dim,
            states,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validate,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validate => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Validate),
            2 => Ok(Split::Test),
            other => Err(Error::Truncated(format!("unknown split code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: String,
    pub trajectories: Vec<Trajectory>,
    pub noise_fraction: f64,
    pub seed: u64,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        system: &str,
        trajectories: Vec<Trajectory>,
        seed: u64,
        split: Split,
    ) -> Result<Self> {
        let ds = Dataset {
            system: system.to_string(),
            trajectories,
            noise_fraction: 0.0,
            seed,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .trajectories
            .first()
            .ok_or_else(|| Error::invalid("dataset needs at least one trajectory"))?;
        for (i, tr) in self.trajectories.iter().enumerate() {
            if tr.dim != first.dim || tr.dt != first.dt {
                return Err(Error::Inconsistent(format!(
                    "trajectory {i} has dim {} / dt {}, expected {} / {}",
                    tr.dim, tr.dt, first.dim, first.dt
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.trajectories[0].dt
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].dim
    }

    /// Shortest trajectory step count.
    pub fn steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::steps).min().unwrap_or(0)
    }

    /// First state of every trajectory stacked as rows.
    pub fn initial_states(&self) -> Array2<f64> {
        let d = self.dim();
        let flat: Vec<f64> = self
            .trajectories
            .iter()
            .flat_map(|t| t.state(0).iter().copied())
            .collect();
        Array2::from_shape_vec((self.len(), d), flat).expect("consistent shape")
    }

    /// Write the binary format described in the module docs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let p = self.steps();
        if self.trajectories.iter().any(|t| t.steps() != p) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "dataset files require equal-length trajectories",
            ));
        }
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.system.len() as u32)?;
        w.write_all(self.system.as_bytes())?;
        w.write_u8(self.split.code())?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u64::<LittleEndian>(p as u64)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_f64::<LittleEndian>(self.dt())?;
        w.write_f64::<LittleEndian>(self.noise_fraction)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        for tr in &self.trajectories {
            w.write_f64::<LittleEndian>(tr.t0)?;
            for &v in &tr.states {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let trunc = |e: std::io::Error| Error::Truncated(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(Error::VersionMismatch {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let name_len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if name_len > 4096 {
            return Err(Error::Truncated(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(trunc)?;
        let system = String::from_utf8(name).map_err(|e| Error::Truncated(e.to_string()))?;
        let split = Split::from_code(r.read_u8().map_err(trunc)?)?;
        let dim = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let p = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
        let dt = r.read_f64::<LittleEndian>().map_err(trunc)?;
        let noise_fraction = r.read_f64::<LittleEndian>().map_err(trunc)?;
        let seed = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let mut trajectories = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let t0 = r.read_f64::<LittleEndian>().map_err(trunc)?;
            let mut states = vec![0.0; (p + 1) * dim];
            r.read_f64_into::<LittleEndian>(&mut states).map_err(trunc)?;
            trajectories.push(Trajectory::new(t0, dt, dim, states)?);
        }
        let mut ds = Dataset::new(&system, trajectories, seed, split)?;
        ds.noise_fraction = noise_fraction;
        Ok(ds)
    }
}

/// `n` i.i.d. uniform points in `region` (rejection-sampled when the region
/// carries a radius bound). Point `i` is drawn from its own substream.
pub fn sample_initial_conditions(region: &Region, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    region.validate()?;
    if n == 0 {
        return Err(Error::invalid("need at least one initial condition"));
    }
    if let Some(r) = region.max_radius {
        let nearest: f64 = region
            .bounds
            .iter()
            .map(|&(lo, hi)| if lo > 0.0 { lo * lo } else if hi < 0.0 { hi * hi } else { 0.0 })
            .sum();
        if nearest > r * r {
            return Err(Error::invalid("region box does not intersect its radius bound"));
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = substream(seed, Domain::InitialConditions, i as u64);
            loop {
                let x: Vec<f64> = region
                    .bounds
                    .iter()
                    .map(|&(lo, hi)| if lo == hi { lo } else { rng.random_range(lo..hi) })
                    .collect();
                if region.contains(&x) {
                    break x;
                }
            }
        })
        .collect())
}

/// Options for [`build_dataset_with`].
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub split: Split,
    /// Simulated time discarded before recording starts.
    pub burn_in: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            split: Split::Train,
            burn_in: 0.0,
        }
    }
}

/// `n` reference trajectories of `p` steps from initial states sampled in `region`.
pub fn build_dataset(
    system: &SystemSpec,
    region: &Region,
    dt: f64,
    p: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    build_dataset_with(system, region, dt, p, n, seed, BuildOptions::default())
}

pub fn build_dataset_with(
    system: &SystemSpec,
    region: &Region,
    dt: f64,
    p: usize,
    n: usize,
    seed: u64,
    opts: BuildOptions,
) -> Result<Dataset> {
    if region.dim() != system.dim {
        return Err(Error::invalid(format!(
            "region has {} axes, system '{}' has dimension {}",
            region.dim(),
            system.name,
            system.dim
        )));
    }
    if !(dt > 0.0) || p == 0 {
        return Err(Error::invalid(format!("need dt > 0 and p >= 1, got dt={dt}, p={p}")));
    }
    if !(opts.burn_in >= 0.0) {
        return Err(Error::invalid("burn-in must be non-negative"));
    }
    let x0s = sample_initial_conditions(region, n, seed)?;
    let burn_steps = (opts.burn_in / dt).round() as usize;
    let trajectories = x0s
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let tag = |e: Error| match e {
                Error::Divergence { context, step } => Error::Divergence {
                    context: format!("{context}, trajectory {i}"),
                    step,
                },
                other => other,
            };
            let start = if burn_steps > 0 {
                let warm = reference_trajectory(system, x0, dt, burn_steps).map_err(tag)?;
                warm.state(burn_steps).to_vec()
            } else {
                x0.clone()
            };
            reference_trajectory(system, &start, dt, p).map_err(tag)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(&system.name, trajectories, seed, opts.split)
}

/// Every `s`-th state of each trajectory; `dt` scales by `s`.
pub fn stride(ds: &Dataset, s: usize) -> Result<Dataset> {
    if s == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if let Some(i) = ds.trajectories.iter().position(|t| t.steps() < s) {
        return Err(Error::invalid(format!(
            "stride {s} exceeds trajectory {i} with {} steps",
            ds.trajectories[i].steps()
        )));
    }
    Ok(Dataset {
        trajectories: ds.trajectories.iter().map(|t| t.strided(s)).collect(),
        ..ds.clone()
    })
}

/// Per-component population variance over every state of every trajectory.
pub fn component_variance(ds: &Dataset) -> Vec<f64> {
    let d = ds.dim();
    let mut count = 0usize;
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for tr in &ds.trajectories {
        for row in tr.states.chunks_exact(d) {
            count += 1;
            for k in 0..d {
                let delta = row[k] - mean[k];
                mean[k] += delta / count as f64;
                m2[k] += delta * (row[k] - mean[k]);
            }
        }
    }
    m2.into_iter().map(|v| v / count as f64).collect()
}

/// Add zero-mean Gaussian noise whose variance per component is `fraction`
/// times that component's empirical variance over the whole dataset.
pub fn add_noise(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction >= 0.0) || !fraction.is_finite() {
        return Err(Error::invalid(format!("noise fraction must be >= 0, got {fraction}")));
    }
    if fraction == 0.0 {
        return Ok(ds.clone());
    }
    let d = ds.dim();
    let std: Vec<f64> = component_variance(ds)
        .into_iter()
        .map(|v| (fraction * v).sqrt())
        .collect();
    let trajectories = ds
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let mut rng = substream(seed, Domain::Noise, i as u64);
            let mut states = tr.states.clone();
            for row in states.chunks_exact_mut(d) {
                for (v, s) in row.iter_mut().zip(&std) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += s * z;
                }
            }
            Trajectory::new(tr.t0, tr.dt, d, states)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        trajectories,
        noise_fraction: fraction,
        seed,
        ..ds.clone()
    })
}
