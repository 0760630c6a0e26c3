//! Empirical random variables.
//!
//! An [`Ensemble`] of `N` equal-weight points in `R^d` stands for a random
//! variable `X ∈ L^q(Ω)`: the sample index plays the role of `ω`, so every
//! expectation is a plain average. Functions that depend on `X` only through
//! its law must therefore be invariant under any permutation of the samples.

use std::io::{Read, Write};

use crate::error::{MfgError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    dim: usize,
    data: Vec<f64>,
    q: f64,
}

impl Ensemble {
    /// Builds an ensemble from row-major sample data (`N * dim` values).
    pub fn new(dim: usize, data: Vec<f64>, q: f64) -> Result<Self> {
        if dim == 0 {
            return Err(MfgError::InvalidEnsemble("dimension must be positive".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(MfgError::InvalidEnsemble(format!(
                "{} values do not form a non-empty set of {dim}-dimensional samples",
                data.len()
            )));
        }
        if !(q >= 1.0 && q.is_finite()) {
            return Err(MfgError::InvalidEnsemble(format!("moment exponent q = {q} must be >= 1")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MfgError::InvalidEnsemble(format!("sample {} has a non-finite coordinate", pos / dim)));
        }
        Ok(Self { dim, data, q })
    }

    /// One-dimensional ensemble with the default exponent `q = 2`.
    pub fn from_scalars(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values, 2.0)
    }

    pub fn from_points(points: &[Vec<f64>], q: f64) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(MfgError::InvalidEnsemble("points of mixed dimension".into()));
        }
        Self::new(dim, points.concat(), q)
    }

    /// Same law everywhere: `n` copies of `point`.
    pub fn constant(point: &[f64], n: usize, q: f64) -> Result<Self> {
        Self::new(point.len(), point.repeat(n), q)
    }

    pub fn zeros_like(&self) -> Self {
        Self { dim: self.dim, data: vec![0.0; self.data.len()], q: self.q }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn with_q(mut self, q: f64) -> Self {
        self.q = q;
        self
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Scalar value of sample `i` for one-dimensional ensembles.
    pub fn scalar(&self, i: usize) -> f64 {
        self.data[i * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut acc = vec![0.0; self.dim];
        for s in self.samples() {
            for (a, v) in acc.iter_mut().zip(s) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// `E|X|^r` with the Euclidean norm on `R^d`.
    pub fn moment(&self, r: f64) -> f64 {
        let total: f64 = self.samples().map(|s| norm(s).powf(r)).sum();
        total / self.len() as f64
    }

    /// `‖X‖_{L^q}` using the ensemble's own exponent.
    pub fn lq_norm(&self) -> f64 {
        self.moment(self.q).powf(1.0 / self.q)
    }

    /// Samplewise map producing an ensemble of possibly different dimension.
    pub fn map_samples<F>(&self, out_dim: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[f64]) -> Vec<f64>,
    {
        let mut data = Vec::with_capacity(self.len() * out_dim);
        for (i, s) in self.samples().enumerate() {
            let v = f(i, s);
            debug_assert_eq!(v.len(), out_dim);
            data.extend(v);
        }
        Self::new(out_dim, data, self.q)
    }

    /// `a·self + b·other`, samplewise. Both ensembles must share shape.
    pub fn axpby(&self, a: f64, other: &Ensemble, b: f64) -> Self {
        assert_eq!(self.data.len(), other.data.len(), "ensemble shapes differ");
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Self { dim: self.dim, data, q: self.q }
    }

    /// `‖self − other‖_{L^q}` for ensembles paired by index.
    pub fn lq_distance(&self, other: &Ensemble) -> f64 {
        self.axpby(1.0, other, -1.0).lq_norm()
    }

    /// Reorders samples: sample `i` of the result is sample `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.len());
        let mut data = Vec::with_capacity(self.data.len());
        for &j in perm {
            data.extend_from_slice(self.sample(j));
        }
        Self { dim: self.dim, data, q: self.q }
    }

    /// Lexicographically sorted copy (the canonical representative of the law).
    pub fn sorted(&self) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.sample(a)
                .iter()
                .zip(self.sample(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        self.permuted(&idx)
    }

    /// Smallest and largest coordinate for one-dimensional ensembles.
    pub fn hull_1d(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((0..self.dim).map(|k| format!("x{k}")))?;
        for s in self.samples() {
            w.write_record(s.iter().map(|v| fmt_f64(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, q: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let dim = r.headers()?.len();
        let mut data = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| MfgError::InvalidEnsemble(format!("cannot parse '{field}' as a number")))?;
                data.push(v);
            }
        }
        Self::new(dim, data, q)
    }
}

/// State/velocity pairs `(X, Z)` sharing one sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedEnsemble {
    states: Ensemble,
    velocities: Ensemble,
}

impl PairedEnsemble {
    pub fn new(states: Ensemble, velocities: Ensemble) -> Result<Self> {
        if states.dim() != velocities.dim() || states.len() != velocities.len() {
            return Err(MfgError::InvalidEnsemble("paired marginals must share dimension and sample count".into()));
        }
        Ok(Self { states, velocities })
    }

    pub fn states(&self) -> &Ensemble {
        &self.states
    }

    pub fn velocities(&self) -> &Ensemble {
        &self.velocities
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.dim()
    }

    /// Applies one permutation to both marginals, which preserves the joint law.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { states: self.states.permuted(perm), velocities: self.velocities.permuted(perm) }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.dim();
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..d).map(|k| format!("x{k}")).chain((0..d).map(|k| format!("z{k}"))).collect();
        w.write_record(&header)?;
        for (x, z) in self.states.samples().zip(self.velocities.samples()) {
            w.write_record(x.iter().chain(z).map(|v| fmt_f64(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, q: f64) -> Result<Self> {
        let all = Ensemble::read_csv(reader, q)?;
        if all.dim() % 2 != 0 {
            return Err(MfgError::InvalidEnsemble("paired CSV needs an even column count".into()));
        }
        let d = all.dim() / 2;
        let states = all.map_samples(d, |_, s| s[..d].to_vec())?;
        let velocities = all.map_samples(d, |_, s| s[d..].to_vec())?;
        Self::new(states, velocities)
    }
}

pub fn moment(e: &Ensemble, r: f64) -> f64 {
    e.moment(r)
}

pub fn mean(e: &Ensemble) -> Vec<f64> {
    e.mean()
}

/// Exact order-`r` Wasserstein distance between two one-dimensional empirical laws.
///
/// Sorted samples give the optimal coupling. For unequal sample counts the two
/// quantile functions are aligned on the union of their breakpoints `i/N_a`
/// and `j/N_b`.
pub fn wasserstein_1d(a: &Ensemble, b: &Ensemble, r: f64) -> Result<f64> {
    for e in [a, b] {
        if e.dim() != 1 {
            return Err(MfgError::UnsupportedDimension { dim: e.dim(), context: "wasserstein_1d" });
        }
    }
    let mut xs = a.as_slice().to_vec();
    let mut ys = b.as_slice().to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);

    if xs.len() == ys.len() {
        let total: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs().powf(r)).sum();
        return Ok((total / xs.len() as f64).powf(1.0 / r));
    }

    let (na, nb) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut level = 0.0f64;
    let mut total = 0.0;
    while i < na && j < nb {
        // Breakpoints compared exactly in integer arithmetic: (i+1)/na vs (j+1)/nb.
        let lhs = (i + 1) * nb;
        let rhs = (j + 1) * na;
        let next = if lhs <= rhs { (i + 1) as f64 / na as f64 } else { (j + 1) as f64 / nb as f64 };
        total += (next - level) * (xs[i] - ys[j]).abs().powf(r);
        level = next;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    Ok(total.powf(1.0 / r))
}

/// Distance between ensembles of any dimension.
///
/// Exact Wasserstein for `d = 1`. For `d > 1` this is a proxy: the Euclidean
/// distance between the vectors (mean, per-coordinate second moments).
pub fn law_distance(a: &Ensemble, b: &Ensemble, r: f64) -> Result<f64> {
    if a.dim() == 1 && b.dim() == 1 {
        return wasserstein_1d(a, b, r);
    }
    if a.dim() != b.dim() {
        return Err(MfgError::InvalidEnsemble("law distance between different dimensions".into()));
    }
    Ok(moment_vector_distance(a, b))
}

pub fn moment_vector_distance(a: &Ensemble, b: &Ensemble) -> f64 {
    let signature = |e: &Ensemble| {
        let mut v = e.mean();
        for k in 0..e.dim() {
            let m2 = e.samples().map(|s| s[k] * s[k]).sum::<f64>() / e.len() as f64;
            v.push(m2);
        }
        v
    };
    norm(&signature(a).iter().zip(signature(b)).map(|(x, y)| x - y).collect::<Vec<_>>())
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lossless decimal rendering used by every CSV writer (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn e1(v: &[f64]) -> Ensemble {
        Ensemble::from_scalars(v.to_vec()).unwrap()
    }

    #[test]
    fn moment_examples() {
        assert_eq!(e1(&[1.0, -1.0]).moment(2.0), 1.0);
        assert_eq!(e1(&[0.0]).moment(3.5), 0.0);
        assert_eq!(e1(&[1.0, 2.0, 3.0]).moment(1.0), 2.0);
    }

    #[test]
    fn mean_examples() {
        assert_eq!(e1(&[1.0, 2.0, 3.0]).mean(), vec![2.0]);
        let e = Ensemble::from_points(&[vec![0.0, 1.0], vec![2.0, 3.0]], 2.0).unwrap();
        assert_eq!(e.mean(), vec![1.0, 2.0]);
        assert_eq!(e1(&[-5.0]).mean(), vec![-5.0]);
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&e1(&[0.0]), &e1(&[1.0]), 1.0).unwrap(), 1.0);
        let a = e1(&[0.3, -2.0, 7.0]);
        assert_eq!(wasserstein_1d(&a, &a, 2.0).unwrap(), 0.0);
        assert_abs_diff_eq!(wasserstein_1d(&e1(&[0.0, 2.0]), &e1(&[1.0, 3.0]), 2.0).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn wasserstein_unequal_counts_matches_replicated_samples() {
        // {0, 1} against {0, 0.5, 1, 1.5}: replicating the first ensemble twice
        // gives equal counts with the same law.
        let a = e1(&[0.0, 1.0]);
        let b = e1(&[0.0, 0.5, 1.0, 1.5]);
        let a2 = e1(&[0.0, 0.0, 1.0, 1.0]);
        let w = wasserstein_1d(&a, &b, 2.0).unwrap();
        let w2 = wasserstein_1d(&a2, &b, 2.0).unwrap();
        assert_abs_diff_eq!(w, w2, epsilon = 1e-15);
    }

    #[test]
    fn wasserstein_rejects_higher_dimension() {
        let e = Ensemble::from_points(&[vec![0.0, 1.0]], 2.0).unwrap();
        assert!(matches!(wasserstein_1d(&e, &e, 1.0), Err(MfgError::UnsupportedDimension { dim: 2, .. })));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(Ensemble::from_scalars(vec![]).is_err());
        assert!(Ensemble::from_scalars(vec![1.0, f64::NAN]).is_err());
        assert!(Ensemble::new(1, vec![1.0], 0.5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let e = Ensemble::from_points(&[vec![0.1, -1.0 / 3.0], vec![2.5e-17, 4.0]], 2.0).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1\n"));
        assert_eq!(Ensemble::read_csv(buf.as_slice(), 2.0).unwrap(), e);

        let p = PairedEnsemble::new(e.clone(), e.axpby(2.0, &e, 0.0)).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("x0,x1,z0,z1\n"));
        assert_eq!(PairedEnsemble::read_csv(buf.as_slice(), 2.0).unwrap(), p);
    }

    fn cloud(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn wasserstein_is_a_metric(a in cloud(12), b in cloud(12), c in cloud(12), r in 1.0f64..3.0) {
            let (a, b, c) = (e1(&a), e1(&b), e1(&c));
            let ab = wasserstein_1d(&a, &b, r).unwrap();
            let ba = wasserstein_1d(&b, &a, r).unwrap();
            let ac = wasserstein_1d(&a, &c, r).unwrap();
            let cb = wasserstein_1d(&c, &b, r).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            prop_assert!(ab <= ac + cb + 1e-9);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn wasserstein_zero_on_equal_sorted_lists(a in cloud(9), seed in 0u64..1000) {
            let e = e1(&a);
            let mut perm: Vec<usize> = (0..e.len()).collect();
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(wasserstein_1d(&e, &e.permuted(&perm), 2.0).unwrap(), 0.0);
            prop_assert_eq!(e.sorted(), e.permuted(&perm).sorted());
        }
    }
}
