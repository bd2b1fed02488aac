//! Synthetic datasets, member/non-member splits and balanced query sets.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// How the points of a synthetic dataset were generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub kind: String,
    pub components: usize,
    pub separation: f64,
    /// Component means in raw (unstandardized) coordinates.
    pub means: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Per-coordinate affine map `standardized = (raw - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Sample mean and (n - 1)-normalized standard deviation of `rows`.
    fn fit<'a>(rows: impl Iterator<Item = &'a Vec<f64>> + Clone, dim: usize) -> Self {
        let n = rows.clone().count() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = if n > 1.0 { (s / (n - 1.0)).sqrt() } else { 0.0 };
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, standardized: &[f64]) -> Vec<f64> {
        standardized.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    /// Standardized points.
    pub points: Vec<Vec<f64>>,
    pub generator: GeneratorParams,
    pub standardization: Standardization,
}

/// Component means with all pairwise distances equal to `separation` where
/// the geometry allows it: scaled basis vectors when `components <= dim`,
/// otherwise evenly spaced on a line (dim 1) or on a circle in the first two
/// coordinates with adjacent chords of length `separation`.
pub fn mixture_means(components: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if components == 1 {
        return vec![vec![0.0; dim]];
    }
    if components <= dim {
        let r = separation / std::f64::consts::SQRT_2;
        return (0..components)
            .map(|k| {
                let mut m = vec![0.0; dim];
                m[k] = r;
                m
            })
            .collect();
    }
    if dim == 1 {
        return (0..components).map(|k| vec![k as f64 * separation]).collect();
    }
    let radius = separation / (2.0 * (std::f64::consts::PI / components as f64).sin());
    (0..components)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / components as f64;
            let mut m = vec![0.0; dim];
            m[0] = radius * angle.cos();
            m[1] = radius * angle.sin();
            m
        })
        .collect()
}

/// `n` points from an equal-weight mixture of unit-covariance Gaussians,
/// assigned to components round-robin and standardized over all points.
pub fn make_gaussian_mixture(
    n: usize,
    components: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || components == 0 || dim == 0 {
        return Err(Error::invalid("n, components and dim must all be positive"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::invalid("separation must be positive"));
    }
    let means = mixture_means(components, dim, separation);
    let mut rng = rng_for(seed, &[stream::DATA]);
    let raw: Vec<Vec<f64>> = (0..n)
        .map(|i| means[i % components].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut ds = Dataset {
        name: format!("gmm{components}_d{dim}_n{n}"),
        dim,
        points: raw,
        generator: GeneratorParams { kind: "gaussian_mixture".into(), components, separation, means, seed },
        standardization: Standardization::identity(dim),
    };
    let all: Vec<usize> = (0..n).collect();
    ds.standardize_on(&all)?;
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mixture component that generated point `i`.
    pub fn component_of(&self, i: usize) -> usize {
        i % self.generator.components
    }

    pub fn raw_points(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| self.standardization.invert(p)).collect()
    }

    /// Re-fits the standardization on the points at `ids` only (the member
    /// split), and re-expresses every point under it.
    pub fn standardize_on(&mut self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("cannot standardize on an empty subset"));
        }
        if let Some(bad) = ids.iter().find(|i| **i >= self.len()) {
            return Err(Error::invalid(format!("point id {bad} out of range")));
        }
        let raw = self.raw_points();
        let fitted = Standardization::fit(ids.iter().map(|&i| &raw[i]), self.dim);
        self.points = raw.iter().map(|p| fitted.apply(p)).collect();
        self.standardization = fitted;
        Ok(())
    }

    pub fn select(&self, ids: &[usize]) -> Vec<Vec<f64>> {
        ids.iter().map(|&i| self.points[i].clone()).collect()
    }
}

/// Member/non-member pools and the balanced query subsets drawn from them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub member_ids: Vec<usize>,
    pub nonmember_ids: Vec<usize>,
    pub query_member_ids: Vec<usize>,
    pub query_nonmember_ids: Vec<usize>,
    pub seed: u64,
}

/// Random disjoint member/non-member pools of a dataset with `n` points, plus
/// `query_size / 2` queries from each pool.
pub fn split(n: usize, member_count: usize, query_size: usize, seed: u64) -> Result<SplitSpec> {
    if member_count == 0 {
        return Err(Error::invalid("member_count must be positive"));
    }
    if query_size == 0 || !query_size.is_multiple_of(2) {
        return Err(Error::invalid(format!("query_size must be even and positive, got {query_size}")));
    }
    let half = query_size / 2;
    if member_count + half > n {
        return Err(Error::invalid(format!(
            "need {member_count} members + {half} non-member queries but only {n} points"
        )));
    }
    if half > member_count {
        return Err(Error::invalid(format!("cannot draw {half} member queries from {member_count} members")));
    }
    let mut rng = rng_for(seed, &[stream::SPLIT]);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let nonmember_ids = ids.split_off(member_count);
    let member_ids = ids;
    let mut qm = member_ids.clone();
    qm.shuffle(&mut rng);
    qm.truncate(half);
    let mut qn = nonmember_ids.clone();
    qn.shuffle(&mut rng);
    qn.truncate(half);
    Ok(SplitSpec { member_ids, nonmember_ids, query_member_ids: qm, query_nonmember_ids: qn, seed })
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let members: HashSet<_> = self.member_ids.iter().collect();
        let nonmembers: HashSet<_> = self.nonmember_ids.iter().collect();
        if !members.is_disjoint(&nonmembers) {
            return Err(Error::invalid("member and non-member pools overlap"));
        }
        if self.query_member_ids.len() != self.query_nonmember_ids.len() {
            return Err(Error::invalid("query set is not balanced"));
        }
        if !self.query_member_ids.iter().all(|i| members.contains(i))
            || !self.query_nonmember_ids.iter().all(|i| nonmembers.contains(i))
        {
            return Err(Error::invalid("query ids are not drawn from their pools"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub id: u64,
    pub x: Vec<f64>,
    pub is_member: bool,
}

/// Query samples with ground-truth membership; members first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    pub samples: Vec<QuerySample>,
}

impl QuerySet {
    pub fn from_split(dataset: &Dataset, split: &SplitSpec) -> Self {
        let members = split.query_member_ids.iter().map(|&i| (i, true));
        let nonmembers = split.query_nonmember_ids.iter().map(|&i| (i, false));
        Self {
            samples: members
                .chain(nonmembers)
                .map(|(i, is_member)| QuerySample { id: i as u64, x: dataset.points[i].clone(), is_member })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.is_member).collect()
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    dim: usize,
    generator: GeneratorParams,
    standardization: Standardization,
}

/// Writes the standardized points as CSV (`x0,x1,...`) plus a
/// `<file>.meta.json` sidecar with generator and standardization parameters.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..dataset.dim).map(|i| format!("x{i}")))?;
    for p in &dataset.points {
        w.write_record(p.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = DatasetMeta {
        name: dataset.name.clone(),
        dim: dataset.dim,
        generator: dataset.generator.clone(),
        standardization: dataset.standardization.clone(),
    };
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(mp, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mp = meta_path(path);
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?)?;
    let points = read_points(path)?;
    if let Some(bad) = points.iter().find(|p| p.len() != meta.dim) {
        return Err(Error::invalid(format!("row with {} columns in a dim-{} dataset", bad.len(), meta.dim)));
    }
    Ok(Dataset {
        name: meta.name,
        dim: meta.dim,
        points,
        generator: meta.generator,
        standardization: meta.standardization,
    })
}

/// Reads a headered CSV of numeric rows.
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("non-numeric field {f:?} in {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_points(points: &[Vec<f64>], path: &Path) -> Result<()> {
    let dim = points.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..dim).map(|i| format!("x{i}")))?;
    for p in points {
        w.write_record(p.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column_stats(points: &[Vec<f64>], j: usize) -> (f64, f64) {
        let n = points.len() as f64;
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn single_component_is_standardized() {
        let ds = make_gaussian_mixture(500, 1, 3, 1.0, 4).unwrap();
        for j in 0..3 {
            let (m, s) = column_stats(&ds.points, j);
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn round_robin_assignment() {
        let ds = make_gaussian_mixture(4, 2, 2, 30.0, 1).unwrap();
        let mut counts = [0; 2];
        for i in 0..ds.len() {
            counts[ds.component_of(i)] += 1;
        }
        assert_eq!(counts, [2, 2]);
        // Far-apart components: each raw point sits next to its own mean.
        let raw = ds.raw_points();
        for (i, p) in raw.iter().enumerate() {
            let d = |m: &Vec<f64>| p.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let k = ds.component_of(i);
            assert!(d(&ds.generator.means[k]) < d(&ds.generator.means[1 - k]));
        }
    }

    #[test]
    fn mean_geometry() {
        for (k, d) in [(2, 2), (4, 8), (4, 2), (3, 1)] {
            let ms = mixture_means(k, d, 5.0);
            for i in 0..k {
                for j in (i + 1)..k {
                    let dist: f64 =
                        ms[i].iter().zip(&ms[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    if k <= d {
                        assert!((dist - 5.0).abs() < 1e-12);
                    } else {
                        assert!(dist >= 5.0 - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kmeans_recovers_separated_centers() {
        let ds = make_gaussian_mixture(1000, 2, 2, 10.0, 3).unwrap();
        let truth: Vec<Vec<f64>> = ds.generator.means.iter().map(|m| ds.standardization.apply(m)).collect();
        // Lloyd's algorithm from the two extreme points along x0 - x1.
        let key = |p: &Vec<f64>| p[0] - p[1];
        let mut centers = [
            ds.points.iter().max_by(|a, b| key(a).total_cmp(&key(b))).unwrap().clone(),
            ds.points.iter().min_by(|a, b| key(a).total_cmp(&key(b))).unwrap().clone(),
        ];
        for _ in 0..50 {
            let mut sums = vec![vec![0.0; 2]; 2];
            let mut counts = [0usize; 2];
            for p in &ds.points {
                let d: Vec<f64> =
                    centers.iter().map(|c| c.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum()).collect();
                let k = (d[1] < d[0]) as usize;
                counts[k] += 1;
                sums[k][0] += p[0];
                sums[k][1] += p[1];
            }
            for k in 0..2 {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        for t in &truth {
            let best = centers
                .iter()
                .map(|c| c.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.5, "center {t:?} missed by {best}");
        }
    }

    #[test]
    fn invalid_generator_arguments() {
        assert!(make_gaussian_mixture(0, 1, 1, 1.0, 0).is_err());
        assert!(make_gaussian_mixture(5, 0, 1, 1.0, 0).is_err());
        assert!(make_gaussian_mixture(5, 1, 0, 1.0, 0).is_err());
        assert!(make_gaussian_mixture(5, 2, 2, 0.0, 0).is_err());
    }

    #[test]
    fn member_standardization() {
        let mut ds = make_gaussian_mixture(300, 4, 8, 4.0, 2).unwrap();
        let s = split(ds.len(), 64, 128, 9).unwrap();
        ds.standardize_on(&s.member_ids).unwrap();
        let members = ds.select(&s.member_ids);
        for j in 0..8 {
            let (m, sd) = column_stats(&members, j);
            assert!(m.abs() < 1e-9, "{m}");
            assert!((sd - 1.0).abs() < 1e-9, "{sd}");
        }
    }

    #[test]
    fn split_edge_cases() {
        let s = split(10, 3, 2, 0).unwrap();
        assert_eq!(s.query_member_ids.len(), 1);
        assert_eq!(s.query_nonmember_ids.len(), 1);
        assert_eq!(s, split(10, 3, 2, 0).unwrap());
        assert!(split(10, 9, 4, 0).is_err());
        assert!(split(10, 3, 3, 0).is_err());
        assert!(split(10, 1, 4, 0).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = make_gaussian_mixture(20, 2, 3, 2.0, 5).unwrap();
        write_dataset(&ds, &path).unwrap();
        assert!(dir.path().join("data.csv.meta.json").exists());
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_balanced(
            n in 4usize..300,
            member_frac in 0.1f64..0.8,
            query_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let member_count = ((n as f64 * member_frac) as usize).max(1);
            let max_half = member_count.min(n - member_count);
            prop_assume!(max_half >= 1);
            let half = 1 + ((max_half - 1) as f64 * query_frac) as usize;
            let s = split(n, member_count, 2 * half, seed).unwrap();
            s.validate().unwrap();
            prop_assert_eq!(s.member_ids.len() + s.nonmember_ids.len(), n);
            prop_assert_eq!(s.query_member_ids.len(), half);
            let qm: HashSet<_> = s.query_member_ids.iter().collect();
            prop_assert!(s.query_nonmember_ids.iter().all(|i| !qm.contains(i)));
        }
    }
}
