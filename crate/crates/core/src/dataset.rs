//! Force/displacement datasets in grid layout.

use std::path::Path;

use nfem_fem::{newton_solve, GridMesh, SolverOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::problem::{Problem, ProblemKind};
use crate::rng::substream;
use crate::{CoreError, Result};

const MAGIC: &[u8] = b"NFEMDS1\n";
/// Fraction of redrawn load cases above which generation gives up.
const MAX_REDRAW_RATE: f64 = 0.2;

/// One load case: force and displacement grids, `nodes × dim` values each,
/// channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub f: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Samples whose force components all lie within `±threshold` are noised, N.
    pub threshold: f64,
    /// Standard deviation of the multiplicative perturbation.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Problem name; not part of the file format, empty after loading.
    pub problem_id: String,
    pub grid_shape: Vec<usize>,
    pub dim: usize,
    pub samples: Vec<Sample>,
    pub force_range: (f64, f64),
    pub seed: u64,
    pub noise: Option<NoiseSpec>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.grid_shape.iter().product()
    }

    /// Entries of one grid vector.
    pub fn grid_len(&self) -> usize {
        self.node_count() * self.dim
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            problem_id: self.problem_id.clone(),
            grid_shape: self.grid_shape.clone(),
            dim: self.dim,
            samples: Vec::new(),
            force_range: self.force_range,
            seed: self.seed,
            noise: self.noise,
        }
    }
}

/// Node carrying the largest force in a grid, or `None` for a zero field.
pub fn excited_node(f: &[f64], dim: usize) -> Option<usize> {
    let mut best = None;
    let mut best_norm = 0.0;
    for (n, comp) in f.chunks_exact(dim).enumerate() {
        let norm: f64 = comp.iter().map(|v| v * v).sum();
        if norm > best_norm {
            best_norm = norm;
            best = Some(n);
        }
    }
    best
}

/// Random point load on one of the mesh's load nodes, as a DOF vector.
pub fn generate_load_case(
    mesh: &GridMesh,
    force_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let nodes = mesh.load_nodes();
    if nodes.is_empty() {
        return Err(CoreError::Invalid("mesh has no load nodes".into()));
    }
    let (lo, hi) = force_range;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(CoreError::Invalid(format!("invalid force range ({lo}, {hi})")));
    }
    let node = nodes[rng.random_range(0..nodes.len())];
    let c = mesh
        .compact_index(node)
        .ok_or_else(|| CoreError::Invalid(format!("load node {node} is inactive")))?;
    let dim = mesh.dim();
    let mut f = vec![0.0; mesh.dof_count()];
    for v in &mut f[c * dim..(c + 1) * dim] {
        *v = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerationReport {
    /// Load cases discarded because Newton did not converge.
    pub redraws: usize,
    pub newton_iterations: usize,
}

/// Solves `count` random load cases. Case `i` draws from its own stream of
/// `seed`, so the result does not depend on scheduling.
pub fn generate_dataset(
    problem: &Problem,
    count: usize,
    force_range: (f64, f64),
    seed: u64,
) -> Result<(SampleSet, GenerationReport)> {
    if count == 0 {
        return Err(CoreError::Invalid("sample count must be at least 1".into()));
    }
    let limit = (MAX_REDRAW_RATE * count as f64).floor() as usize;
    let opts = SolverOptions::default();
    let mesh = problem.mesh();
    let cases: Vec<Result<(Sample, usize, usize)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let mut redraws = 0;
            loop {
                let f = generate_load_case(mesh, force_range, &mut rng)?;
                match newton_solve(mesh, problem.material(), &f, &opts) {
                    Ok(sol) => {
                        let sample = Sample {
                            f: problem.embed(&f)?,
                            u: problem.embed(&sol.u)?,
                        };
                        return Ok((sample, redraws, sol.newton_iterations));
                    }
                    Err(_) if redraws < limit => redraws += 1,
                    Err(_) => {
                        return Err(CoreError::RedrawLimit {
                            redraws: redraws + 1,
                            count,
                        })
                    }
                }
            }
        })
        .collect();
    let mut report = GenerationReport::default();
    let mut samples = Vec::with_capacity(count);
    for case in cases {
        let (s, r, it) = case?;
        report.redraws += r;
        report.newton_iterations += it;
        samples.push(s);
    }
    if report.redraws > limit {
        return Err(CoreError::RedrawLimit {
            redraws: report.redraws,
            count,
        });
    }
    let set = SampleSet {
        problem_id: problem.kind().name().to_string(),
        grid_shape: problem.grid_shape().to_vec(),
        dim: problem.dim(),
        samples,
        force_range,
        seed,
        noise: None,
    };
    Ok((set, report))
}

/// Places L-shape samples given over the 80 active nodes into the padded
/// 16×8 grid.
pub fn embed_lshape(active: &[Sample]) -> Result<Vec<Sample>> {
    let l = Problem::standard(ProblemKind::Lshape2d)?;
    active
        .iter()
        .map(|s| {
            Ok(Sample {
                f: l.embed(&s.f)?,
                u: l.embed(&s.u)?,
            })
        })
        .collect()
}

/// Inverse of [`embed_lshape`].
pub fn extract_lshape(grid: &[Sample]) -> Result<Vec<Sample>> {
    let l = Problem::standard(ProblemKind::Lshape2d)?;
    grid.iter()
        .map(|s| {
            Ok(Sample {
                f: l.extract(&s.f)?,
                u: l.extract(&s.u)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingStrategy {
    /// Raster order of the structured grid.
    Preferred,
    /// Corners, then edges, then faces, then interior nodes.
    GmshLike,
    Random(u64),
}

impl OrderingStrategy {
    pub fn label(&self) -> String {
        match self {
            Self::Preferred => "preferred".into(),
            Self::GmshLike => "gmsh-like".into(),
            Self::Random(seed) => format!("random({seed})"),
        }
    }
}

/// Bijection from node index to raster slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingMap {
    pub permutation: Vec<usize>,
    pub strategy: Option<OrderingStrategy>,
}

impl OrderingMap {
    pub fn build(strategy: OrderingStrategy, grid_shape: &[usize]) -> Self {
        let n: usize = grid_shape.iter().product();
        let permutation = match strategy {
            OrderingStrategy::Preferred => (0..n).collect(),
            OrderingStrategy::GmshLike => {
                let extremes = |node: usize| {
                    let mut rest = node;
                    let mut count = 0;
                    for &e in grid_shape.iter().rev() {
                        let i = rest % e;
                        rest /= e;
                        if i == 0 || i + 1 == e {
                            count += 1;
                        }
                    }
                    count
                };
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by_key(|&node| (std::cmp::Reverse(extremes(node)), node));
                let mut perm = vec![0; n];
                for (slot, &node) in order.iter().enumerate() {
                    perm[node] = slot;
                }
                perm
            }
            OrderingStrategy::Random(seed) => {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                perm
            }
        };
        Self {
            permutation,
            strategy: Some(strategy),
        }
    }

    pub fn from_permutation(permutation: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(CoreError::Invalid("ordering is not a bijection".into()));
            }
        }
        Ok(Self {
            permutation,
            strategy: None,
        })
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.permutation.len()];
        for (node, &slot) in self.permutation.iter().enumerate() {
            inv[slot] = node;
        }
        Self {
            permutation: inv,
            strategy: None,
        }
    }

    /// Moves the `dim` values of node `n` to slot `permutation[n]`.
    pub fn apply<T: Copy + Default>(&self, values: &[T], dim: usize) -> Result<Vec<T>> {
        if values.len() != self.permutation.len() * dim {
            return Err(CoreError::Invalid(format!(
                "ordering covers {} nodes, grid has {} values for dim {dim}",
                self.permutation.len(),
                values.len()
            )));
        }
        let mut out = vec![T::default(); values.len()];
        for (node, &slot) in self.permutation.iter().enumerate() {
            out[slot * dim..(slot + 1) * dim].copy_from_slice(&values[node * dim..(node + 1) * dim]);
        }
        Ok(out)
    }
}

/// Permutes the node axis of every force and displacement grid.
pub fn apply_ordering(set: &SampleSet, map: &OrderingMap) -> Result<SampleSet> {
    if map.permutation.len() != set.node_count() {
        return Err(CoreError::Invalid(format!(
            "ordering covers {} nodes, dataset has {}",
            map.permutation.len(),
            set.node_count()
        )));
    }
    let samples = set
        .samples
        .iter()
        .map(|s| {
            Ok(Sample {
                f: map.apply(&s.f, set.dim)?,
                u: map.apply(&s.u, set.dim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(set.with_samples(samples))
}

/// Multiplies every displacement by `1 + η`, `η ~ N(0, level²)` per DOF,
/// for samples whose force components all lie within `±threshold`.
pub fn inject_noise(set: &SampleSet, threshold: f64, level: f64, seed: u64) -> Result<SampleSet> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CoreError::Invalid(format!(
            "noise level must lie in (0, 1), got {level}"
        )));
    }
    let normal = Normal::new(0.0, level).map_err(|e| CoreError::Invalid(e.to_string()))?;
    let samples = set
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let peak = s.f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > threshold {
                return s.clone();
            }
            let mut rng = substream(seed, i as u64);
            Sample {
                f: s.f.clone(),
                u: s.u.iter().map(|u| u * (1.0 + normal.sample(&mut rng))).collect(),
            }
        })
        .collect();
    let mut out = set.with_samples(samples);
    out.noise = Some(NoiseSpec { threshold, level });
    Ok(out)
}

/// Uniform random partition into `(train, test)` with
/// `round(len · test_fraction)` test samples. Both parts keep the original
/// relative order.
pub fn split_dataset(set: &SampleSet, test_fraction: f64, seed: u64) -> Result<(SampleSet, SampleSet)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CoreError::Invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = set.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(CoreError::Invalid(format!(
            "splitting {n} samples at {test_fraction} leaves an empty part"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &idx[..n_test] {
        is_test[i] = true;
    }
    let pick = |want: bool| {
        set.samples
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want)
            .map(|(s, _)| s.clone())
            .collect()
    };
    Ok((set.with_samples(pick(false)), set.with_samples(pick(true))))
}

/// Serializes to the binary dataset format.
pub fn encode_dataset(set: &SampleSet) -> Result<Vec<u8>> {
    let len = set.grid_len();
    if let Some(bad) = set.samples.iter().position(|s| s.f.len() != len || s.u.len() != len) {
        return Err(CoreError::Invalid(format!(
            "sample {bad} does not match grid {:?} x {}",
            set.grid_shape, set.dim
        )));
    }
    let mut out = MAGIC.to_vec();
    out.extend((set.dim as u32).to_le_bytes());
    out.extend((set.grid_shape.len() as u32).to_le_bytes());
    for &e in &set.grid_shape {
        out.extend((e as u32).to_le_bytes());
    }
    out.extend((set.samples.len() as u64).to_le_bytes());
    out.extend(set.force_range.0.to_le_bytes());
    out.extend(set.force_range.1.to_le_bytes());
    out.extend(set.seed.to_le_bytes());
    match set.noise {
        Some(n) => {
            out.push(1);
            out.extend(n.threshold.to_le_bytes());
            out.extend(n.level.to_le_bytes());
        }
        None => out.push(0),
    }
    for s in &set.samples {
        for v in s.f.iter().chain(&s.u) {
            out.extend(v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CoreError::Format("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SampleSet> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CoreError::Format("missing NFEMDS1 magic or unsupported version".into()));
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(CoreError::Format("file is truncated".into()));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader {
        buf: payload,
        pos: MAGIC.len(),
    };
    let dim = r.u32()? as usize;
    let rank = r.u32()? as usize;
    if !(2..=3).contains(&dim) || rank != dim {
        return Err(CoreError::Format(format!("unsupported dim {dim} / rank {rank}")));
    }
    let grid_shape = (0..rank)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = r.u64()? as usize;
    let force_range = (r.f64()?, r.f64()?);
    let seed = r.u64()?;
    let noise = match r.u8()? {
        0 => None,
        1 => Some(NoiseSpec {
            threshold: r.f64()?,
            level: r.f64()?,
        }),
        other => return Err(CoreError::Format(format!("bad noise flag {other}"))),
    };
    let len = grid_shape.iter().product::<usize>() * dim;
    let expected = count
        .checked_mul(2 * len * 8)
        .and_then(|b| b.checked_add(r.pos))
        .ok_or_else(|| CoreError::Format("sample count overflows".into()))?;
    if expected != payload.len() {
        return Err(CoreError::Format(format!(
            "expected {} bytes for {count} samples, found {}",
            expected + 4,
            bytes.len()
        )));
    }
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(&payload[MAGIC.len()..]);
    if stored != computed {
        return Err(CoreError::Checksum { stored, computed });
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let f = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let u = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        samples.push(Sample { f, u });
    }
    Ok(SampleSet {
        problem_id: String::new(),
        grid_shape,
        dim,
        samples,
        force_range,
        seed,
        noise,
    })
}

pub fn save_dataset(set: &SampleSet, path: &Path) -> Result<()> {
    let bytes = encode_dataset(set)?;
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<SampleSet> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_dataset(&bytes)
}

/// Loads a dataset and rejects it unless its grid matches `grid_shape`.
pub fn load_dataset_for(path: &Path, grid_shape: &[usize]) -> Result<SampleSet> {
    let set = load_dataset(path)?;
    if set.grid_shape != grid_shape {
        return Err(CoreError::Format(format!(
            "dataset grid {:?} does not match expected {grid_shape:?}",
            set.grid_shape
        )));
    }
    Ok(set)
}
