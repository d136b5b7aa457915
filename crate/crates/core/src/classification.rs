//! Posterior class probabilities, modal assignment and agreement metrics.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fit::FittedModel;

const ROW_TOLERANCE: f64 = 1e-12;
pub const EXHAUSTIVE_ALIGNMENT_MAX: usize = 6;

/// n×K matrix of posterior class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    probs: DMatrix<f64>,
}

impl PosteriorMatrix {
    /// Rows must be points of the simplex (within 1e-12).
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        if probs.ncols() == 0 {
            return invalid("posterior matrix needs at least one class");
        }
        for (i, row) in probs.row_iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
                return invalid(format!("posterior row {} has an entry outside [0, 1]", i + 1));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOLERANCE * probs.ncols() as f64 {
                return invalid(format!("posterior row {} sums to {s}", i + 1));
            }
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return invalid("posterior rows have different lengths");
        }
        Self::new(DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn classes(&self) -> usize {
        self.probs.ncols()
    }
}

/// Class labels in `1..=classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl Assignment {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l == 0 || l > classes) {
            return invalid(format!("label {bad} outside 1..={classes}"));
        }
        Ok(Self { labels, classes, seed: 0 })
    }

    /// From 0-based class indices.
    pub fn from_zero_based(labels: &[usize], classes: usize) -> Result<Self> {
        Self::new(labels.iter().map(|l| l + 1).collect(), classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l - 1] += 1;
        }
        c
    }
}

/// The converged responsibilities of a fit.
pub fn posterior_matrix(fitted: &FittedModel) -> PosteriorMatrix {
    PosteriorMatrix {
        probs: fitted.responsibilities.clone(),
    }
}

/// Highest-posterior class per row; exact ties are broken uniformly at
/// random from a stream seeded by `seed`.
pub fn modal_assignment(post: &PosteriorMatrix, seed: u64) -> Assignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = post.classes();
    let mut ties = Vec::with_capacity(k);
    let labels = post
        .probs
        .row_iter()
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ties.clear();
            ties.extend((0..k).filter(|&j| row[j] == best));
            let pick = if ties.len() == 1 { ties[0] } else { ties[rng.random_range(0..ties.len())] };
            pick + 1
        })
        .collect();
    Assignment {
        labels,
        classes: k,
        seed,
    }
}

fn confusion(a: &Assignment, b: &Assignment) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; b.classes]; a.classes];
    for (x, y) in a.labels.iter().zip(&b.labels) {
        m[x - 1][y - 1] += 1;
    }
    m
}

fn check_pair(a: &Assignment, b: &Assignment) -> Result<()> {
    if a.classes != b.classes {
        return invalid(format!("assignments have different class counts ({} vs {})", a.classes, b.classes));
    }
    if a.len() != b.len() {
        return invalid(format!("assignments have different lengths ({} vs {})", a.len(), b.len()));
    }
    if a.is_empty() {
        return invalid("assignments are empty");
    }
    Ok(())
}

fn for_each_permutation(k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(p: &mut Vec<usize>, used: &mut [bool], f: &mut impl FnMut(&[usize])) {
        if p.len() == used.len() {
            f(p);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                p.push(j);
                rec(p, used, f);
                p.pop();
                used[j] = false;
            }
        }
    }
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], f);
}

/// Mapping `perm[label_b - 1] = label_a - 1` that maximizes agreement.
/// Exhaustive up to six classes, greedy on the confusion table above.
pub fn align_labels(a: &Assignment, b: &Assignment) -> Result<Vec<usize>> {
    check_pair(a, b)?;
    let k = a.classes;
    let m = confusion(a, b);
    if k <= EXHAUSTIVE_ALIGNMENT_MAX {
        let mut best = (0usize, (0..k).collect::<Vec<_>>());
        let mut first = true;
        for_each_permutation(k, &mut |p: &[usize]| {
            let hits: usize = (0..k).map(|j| m[p[j]][j]).sum();
            if first || hits > best.0 {
                best = (hits, p.to_vec());
                first = false;
            }
        });
        return Ok(best.1);
    }
    let mut perm = vec![usize::MAX; k];
    let mut row_used = vec![false; k];
    for _ in 0..k {
        let mut pick = (0, 0, None::<usize>);
        for (i, row) in m.iter().enumerate() {
            if row_used[i] {
                continue;
            }
            for (j, &v) in row.iter().enumerate() {
                if perm[j] == usize::MAX && pick.2.is_none_or(|b| v > b) {
                    pick = (i, j, Some(v));
                }
            }
        }
        row_used[pick.0] = true;
        perm[pick.1] = pick.0;
    }
    Ok(perm)
}

fn relabel(b: &Assignment, perm: &[usize]) -> Assignment {
    Assignment {
        labels: b.labels.iter().map(|l| perm[l - 1] + 1).collect(),
        classes: b.classes,
        seed: b.seed,
    }
}

/// Share of individuals whose labels agree after the best relabeling of
/// `assigned`.
pub fn accuracy(assigned: &Assignment, truth: &Assignment) -> Result<f64> {
    let perm = align_labels(truth, assigned)?;
    let aligned = relabel(assigned, &perm);
    let hits = aligned.labels.iter().zip(&truth.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Normalized entropy `1 + sum p ln p / (n ln K)`; 1 for complete
/// separation, 0 for none.
pub fn entropy(post: &PosteriorMatrix) -> Result<f64> {
    let k = post.classes();
    if k < 2 {
        return invalid("entropy is undefined for a single class");
    }
    let n = post.n();
    if n == 0 {
        return invalid("entropy needs at least one individual");
    }
    let s: f64 = post.probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum();
    Ok((1.0 + s / (n as f64 * (k as f64).ln())).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementBand {
    Poor,
    Slight,
    Fair,
    Moderate,
    Substantial,
    AlmostPerfect,
}

impl AgreementBand {
    pub fn from_kappa(kappa: f64) -> Self {
        match kappa {
            k if k < 0.0 => Self::Poor,
            k if k <= 0.20 => Self::Slight,
            k if k <= 0.40 => Self::Fair,
            k if k <= 0.60 => Self::Moderate,
            k if k <= 0.80 => Self::Substantial,
            _ => Self::AlmostPerfect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub kappa: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub band: AgreementBand,
}

/// Cohen's kappa between two clusterings after label alignment, with a
/// large-sample Wald interval. Used as a stand-in for latent kappa.
pub fn kappa_agreement(a: &Assignment, b: &Assignment) -> Result<Kappa> {
    check_pair(a, b)?;
    for (name, x) in [("first", a), ("second", b)] {
        if x.counts().iter().filter(|c| **c > 0).count() < 2 {
            return invalid(format!("kappa is undefined: the {name} assignment uses a single class"));
        }
    }
    let perm = align_labels(a, b)?;
    let b = relabel(b, &perm);
    let n = a.len() as f64;
    let m = confusion(a, &b);
    let k = a.classes;
    let po = (0..k).map(|j| m[j][j]).sum::<usize>() as f64 / n;
    let ra: Vec<f64> = a.counts().iter().map(|&c| c as f64 / n).collect();
    let rb: Vec<f64> = b.counts().iter().map(|&c| c as f64 / n).collect();
    let pe: f64 = ra.iter().zip(&rb).map(|(x, y)| x * y).sum();
    if pe >= 1.0 {
        return invalid("kappa is undefined when chance agreement is 1");
    }
    let kappa = (po - pe) / (1.0 - pe);
    let se = (po * (1.0 - po) / (n * (1.0 - pe).powi(2))).sqrt();
    let z = crate::inference::WALD_Z;
    Ok(Kappa {
        kappa,
        se,
        lower: kappa - z * se,
        upper: kappa + z * se,
        band: AgreementBand::from_kappa(kappa),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(rows: &[[f64; 2]]) -> PosteriorMatrix {
        PosteriorMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&post(&[[1.0, 0.0], [0.0, 1.0]])).unwrap(), 1.0);
        assert!(entropy(&post(&[[0.5, 0.5], [0.5, 0.5]])).unwrap().abs() < 1e-12);
        assert!((entropy(&post(&[[1.0, 0.0], [0.5, 0.5]])).unwrap() - 0.5).abs() < 1e-12);
        let one = PosteriorMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(entropy(&one).is_err());
    }

    #[test]
    fn rejects_non_simplex_rows() {
        assert!(PosteriorMatrix::from_rows(&[vec![0.7, 0.7]]).is_err());
        assert!(PosteriorMatrix::from_rows(&[vec![1.2, -0.2]]).is_err());
    }

    #[test]
    fn modal_and_ties() {
        let a = modal_assignment(&post(&[[0.9, 0.1], [0.2, 0.8]]), 1);
        assert_eq!(a.labels, vec![1, 2]);
        let ties = post(&vec![[0.5, 0.5]; 10_000]);
        let a = modal_assignment(&ties, 3);
        let share = a.labels.iter().filter(|l| **l == 1).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&share), "{share}");
        assert_eq!(a, modal_assignment(&ties, 3));
    }

    #[test]
    fn accuracy_handles_switching() {
        let t = Assignment::new(vec![1, 1, 2, 2, 2], 2).unwrap();
        let s = Assignment::new(vec![2, 2, 1, 1, 1], 2).unwrap();
        assert_eq!(accuracy(&s, &t).unwrap(), 1.0);
        let s3 = Assignment::new(vec![1, 1, 2, 2, 3], 3).unwrap();
        assert!(accuracy(&s3, &t).is_err());
    }

    #[test]
    fn greedy_alignment_above_six() {
        let k = 8;
        let t = Assignment::new((0..80).map(|i| i % k + 1).collect(), k).unwrap();
        let s = Assignment::new(t.labels.iter().map(|l| l % k + 1).collect(), k).unwrap();
        assert_eq!(accuracy(&s, &t).unwrap(), 1.0);
    }

    #[test]
    fn kappa_table() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, y, c) in [(1, 1, 45), (1, 2, 5), (2, 1, 5), (2, 2, 45)] {
            for _ in 0..c {
                a.push(x);
                b.push(y);
            }
        }
        let a = Assignment::new(a, 2).unwrap();
        let b = Assignment::new(b, 2).unwrap();
        let k = kappa_agreement(&a, &b).unwrap();
        assert!((k.kappa - 0.8).abs() < 1e-12);
        assert_eq!(k.band, AgreementBand::Substantial);
        assert!(k.lower < 0.8 && k.upper > 0.8);
        assert_eq!(kappa_agreement(&a, &a).unwrap().kappa, 1.0);
        let one = Assignment::new(vec![1; 100], 2).unwrap();
        assert!(kappa_agreement(&one, &a).is_err());
    }
}
