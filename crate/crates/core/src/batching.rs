//! Random batch divisions, super-batches, interaction coefficients and the
//! exhaustive partition enumerator used as a brute-force oracle.
//!
//! A partition assigns every particle `k` of species `i` a batch label
//! `r < b_i`. Labels matter: the super-batch `C_r` collects the `r`-th batch
//! of every species, and cross-species interactions stay inside it. Species
//! with fewer batches simply have no member in the higher super-batches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BatchLayout;

/// Default cap on the number of joint partitions an enumeration may visit.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeciesPartition {
    batch_size: usize,
    labels: Vec<u32>,
    /// Block `r` is `members[r * p..(r + 1) * p]`, ascending particle index.
    members: Vec<usize>,
}

impl SpeciesPartition {
    fn from_labels(labels: Vec<u32>, batch_size: usize) -> Self {
        let batches = labels.len() / batch_size;
        let mut fill = vec![0usize; batches];
        let mut members = vec![0usize; labels.len()];
        for (k, &r) in labels.iter().enumerate() {
            let r = r as usize;
            members[r * batch_size + fill[r]] = k;
            fill[r] += 1;
        }
        SpeciesPartition {
            batch_size,
            labels,
            members,
        }
    }

    pub fn label(&self, k: usize) -> usize {
        self.labels[k] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn batch_count(&self) -> usize {
        self.labels.len() / self.batch_size
    }

    /// Members of batch `r`, or an empty slice when `r` is past the last batch.
    pub fn batch(&self, r: usize) -> &[usize] {
        if r < self.batch_count() {
            &self.members[r * self.batch_size..(r + 1) * self.batch_size]
        } else {
            &[]
        }
    }
}

/// One random division of every species into labeled batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    species: Vec<SpeciesPartition>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    assignments: Vec<Vec<u32>>,
}

impl Serialize for Partition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PartitionRepr {
            assignments: self.species.iter().map(|sp| sp.labels.clone()).collect(),
        }
        .serialize(s)
    }
}

impl Partition {
    /// Rebuilds a partition from per-species assignment arrays (0-based labels),
    /// checking that every batch has exactly `p_i` members.
    pub fn from_assignments(layout: &BatchLayout, assignments: Vec<Vec<u32>>) -> Result<Self> {
        if assignments.len() != layout.species_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} assignment arrays for {} species",
                assignments.len(),
                layout.species_count()
            )));
        }
        let mut species = Vec::with_capacity(assignments.len());
        for (i, labels) in assignments.into_iter().enumerate() {
            let (n, p) = (layout.particles[i], layout.batch_sizes[i]);
            let b = n / p;
            if labels.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "species {} has {} labels, expected {n}",
                    i + 1,
                    labels.len()
                )));
            }
            let mut counts = vec![0usize; b];
            for &r in &labels {
                let r = r as usize;
                if r >= b {
                    return Err(Error::IndexOutOfRange(format!("batch label {r} for species {} with {b} batches", i + 1)));
                }
                counts[r] += 1;
            }
            if counts.iter().any(|&c| c != p) {
                return Err(Error::InvalidState(format!("species {} batches are not all of size {p}", i + 1)));
            }
            species.push(SpeciesPartition::from_labels(labels, p));
        }
        Ok(Partition { species })
    }

    /// Parses the JSON form produced by serializing a partition.
    pub fn from_json(layout: &BatchLayout, text: &str) -> Result<Self> {
        let repr: PartitionRepr = serde_json::from_str(text)?;
        Partition::from_assignments(layout, repr.assignments)
    }

    pub fn species(&self, i: usize) -> &SpeciesPartition {
        &self.species[i]
    }

    pub fn species_count(&self) -> usize {
        self.species.len()
    }

    /// Batch label (super-batch index) of particle `k` of species `i`.
    pub fn label(&self, i: usize, k: usize) -> usize {
        self.species[i].label(k)
    }

    /// Members of `C_{j,r}`; empty for `r >= b_j`.
    pub fn batch(&self, j: usize, r: usize) -> &[usize] {
        self.species[j].batch(r)
    }

    /// Members of the super-batch `C_r` as `(species, particle)` pairs.
    pub fn super_batch(&self, r: usize) -> Vec<(usize, usize)> {
        self.species
            .iter()
            .enumerate()
            .flat_map(|(i, sp)| sp.batch(r).iter().map(move |&k| (i, k)))
            .collect()
    }

    pub fn super_batch_count(&self) -> usize {
        self.species.iter().map(|s| s.batch_count()).max().unwrap_or(0)
    }
}

/// `alpha_ij = 1/(N_j - delta_ij)` and `beta_ij = b_i / ((p_j - delta_ij) min(b_i, b_j))`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientTable {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

pub fn interaction_coefficients(layout: &BatchLayout) -> CoefficientTable {
    let n = layout.species_count();
    let b = layout.batch_counts();
    let mut alpha = vec![vec![0.0; n]; n];
    let mut beta = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let delta = usize::from(i == j);
            alpha[i][j] = 1.0 / (layout.particles[j] - delta) as f64;
            beta[i][j] = b[i] as f64 / ((layout.batch_sizes[j] - delta) as f64 * b[i].min(b[j]) as f64);
        }
    }
    CoefficientTable { alpha, beta }
}

/// Single-species batch weights `1/(p_j - delta_ij)` without the
/// `b_i / min(b_i, b_j)` correction. Experimental: exists only as a negative
/// control showing that the correction is required for consistency.
pub fn legacy_coefficients(layout: &BatchLayout) -> CoefficientTable {
    let mut table = interaction_coefficients(layout);
    let n = layout.species_count();
    for i in 0..n {
        for j in 0..n {
            let delta = usize::from(i == j);
            table.beta[i][j] = 1.0 / (layout.batch_sizes[j] - delta) as f64;
        }
    }
    table
}

/// Draws a uniform random labeled partition for every species: an unbiased
/// Fisher-Yates shuffle of `0..N_i` chunked into consecutive blocks of `p_i`.
pub fn sample_partition<R: Rng + ?Sized>(layout: &BatchLayout, rng: &mut R) -> Partition {
    let species = layout
        .particles
        .iter()
        .zip(&layout.batch_sizes)
        .map(|(&n, &p)| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let mut labels = vec![0u32; n];
            for (pos, &k) in perm.iter().enumerate() {
                labels[k] = (pos / p) as u32;
            }
            SpeciesPartition::from_labels(labels, p)
        })
        .collect();
    Partition { species }
}

/// `I_i^k(j, l)`: whether `(i, k)` and `(j, l)` share a super-batch.
/// Self-pairs report `false`.
pub fn inclusion_indicator(partition: &Partition, (i, k): (usize, usize), (j, l): (usize, usize)) -> Result<bool> {
    let n = partition.species_count();
    if i >= n || j >= n {
        return Err(Error::IndexOutOfRange(format!("species {i} or {j} of {n}")));
    }
    let (ni, nj) = (partition.species[i].labels.len(), partition.species[j].labels.len());
    if k >= ni || l >= nj {
        return Err(Error::IndexOutOfRange(format!("particle ({i}, {k}) or ({j}, {l})")));
    }
    if (i, k) == (j, l) {
        return Ok(false);
    }
    Ok(partition.label(i, k) == partition.label(j, l))
}

/// Number of labeled partitions of one species, `N! / (p!)^b`, or `None` on
/// overflow.
pub fn species_partition_count(n: usize, p: usize) -> Option<u128> {
    let mut total: u128 = 1;
    let mut remaining = n;
    while remaining > 0 {
        total = total.checked_mul(binomial(remaining, p)?)?;
        remaining -= p;
    }
    Some(total)
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    let mut acc: u128 = 1;
    for t in 0..k {
        acc = acc.checked_mul((n - t) as u128)? / (t as u128 + 1);
    }
    Some(acc)
}

/// Total number of joint labeled partitions, `prod_i N_i! / (p_i!)^{b_i}`.
pub fn joint_partition_count(layout: &BatchLayout) -> Option<u128> {
    layout
        .particles
        .iter()
        .zip(&layout.batch_sizes)
        .try_fold(1u128, |acc, (&n, &p)| acc.checked_mul(species_partition_count(n, p)?))
}

fn species_label_sequences(n: usize, p: usize) -> Vec<Vec<u32>> {
    fn recurse(pos: usize, remaining: &mut [usize], current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>, n: usize) {
        if pos == n {
            out.push(current.clone());
            return;
        }
        for r in 0..remaining.len() {
            if remaining[r] > 0 {
                remaining[r] -= 1;
                current.push(r as u32);
                recurse(pos + 1, remaining, current, out, n);
                current.pop();
                remaining[r] += 1;
            }
        }
    }
    let mut remaining = vec![p; n / p];
    let mut out = Vec::new();
    recurse(0, &mut remaining, &mut Vec::with_capacity(n), &mut out, n);
    out
}

/// Every joint labeled partition exactly once, each with weight `1 / len`.
pub struct PartitionEnumeration {
    per_species: Vec<Vec<SpeciesPartition>>,
    odometer: Vec<usize>,
    remaining: usize,
    total: usize,
}

impl PartitionEnumeration {
    pub fn total(&self) -> usize {
        self.total
    }

    /// Uniform weight of one partition.
    pub fn weight(&self) -> f64 {
        1.0 / self.total as f64
    }
}

impl Iterator for PartitionEnumeration {
    type Item = Partition;

    fn next(&mut self) -> Option<Partition> {
        if self.remaining == 0 {
            return None;
        }
        let item = Partition {
            species: self
                .odometer
                .iter()
                .zip(&self.per_species)
                .map(|(&idx, list)| list[idx].clone())
                .collect(),
        };
        self.remaining -= 1;
        for (digit, list) in self.odometer.iter_mut().zip(&self.per_species).rev() {
            *digit += 1;
            if *digit < list.len() {
                break;
            }
            *digit = 0;
        }
        Some(item)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for PartitionEnumeration {}

pub fn enumerate_partitions(layout: &BatchLayout) -> Result<PartitionEnumeration> {
    enumerate_partitions_capped(layout, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_partitions_capped(layout: &BatchLayout, cap: u64) -> Result<PartitionEnumeration> {
    let count = joint_partition_count(layout);
    match count {
        Some(c) if c <= cap as u128 => {}
        _ => {
            return Err(Error::TooLargeToEnumerate {
                count: count.map_or_else(|| "more than 2^128".to_string(), |c| c.to_string()),
                cap,
            })
        }
    }
    let per_species: Vec<Vec<SpeciesPartition>> = layout
        .particles
        .iter()
        .zip(&layout.batch_sizes)
        .map(|(&n, &p)| {
            species_label_sequences(n, p)
                .into_iter()
                .map(|labels| SpeciesPartition::from_labels(labels, p))
                .collect()
        })
        .collect();
    let total = per_species.iter().map(Vec::len).product();
    Ok(PartitionEnumeration {
        odometer: vec![0; per_species.len()],
        per_species,
        remaining: total,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn layout(n: &[usize], p: &[usize]) -> BatchLayout {
        BatchLayout::new(n.to_vec(), p.to_vec()).unwrap()
    }

    #[test]
    fn single_species_alpha() {
        let t = interaction_coefficients(&layout(&[100], &[2]));
        assert_eq!(t.alpha[0][0], 1.0 / 99.0);
        assert_eq!(t.beta[0][0], 1.0);
    }

    #[test]
    fn multi_species_beta_correction() {
        let t = interaction_coefficients(&layout(&[4, 6], &[2, 2]));
        assert_eq!(t.beta[1][0], 0.75);
        assert_eq!(t.beta[0][1], 0.5);
        assert_eq!(t.beta[1][1], 1.0);
        assert_eq!(t.alpha[0][1], 1.0 / 6.0);
        assert_eq!(t.alpha[1][1], 1.0 / 5.0);
    }

    #[test]
    fn equal_batch_counts_reduce_to_inverse_batch_size() {
        let l = layout(&[6, 9, 12], &[2, 3, 4]);
        let t = interaction_coefficients(&l);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j {
                    1.0 / (l.batch_sizes[i] - 1) as f64
                } else {
                    1.0 / l.batch_sizes[j] as f64
                };
                assert_eq!(t.beta[i][j], expected);
            }
        }
    }

    #[test]
    fn counts_match_multinomials() {
        assert_eq!(enumerate_partitions(&layout(&[4], &[2])).unwrap().count(), 6);
        assert_eq!(enumerate_partitions(&layout(&[4, 4], &[2, 2])).unwrap().count(), 36);
        assert_eq!(enumerate_partitions(&layout(&[4, 6], &[2, 2])).unwrap().count(), 540);
        assert_eq!(joint_partition_count(&layout(&[6], &[2])), Some(90));
    }

    #[test]
    fn enumeration_refuses_large_layouts() {
        let err = enumerate_partitions(&layout(&[12, 12], &[2, 2])).err().unwrap();
        assert!(matches!(err, Error::TooLargeToEnumerate { .. }));
        assert!(enumerate_partitions(&layout(&[400], &[2])).is_err());
    }

    #[test]
    fn enumeration_visits_each_partition_once() {
        let l = layout(&[4, 6], &[2, 2]);
        let mut seen = std::collections::HashSet::new();
        for part in enumerate_partitions(&l).unwrap() {
            assert!(seen.insert((part.species(0).labels().to_vec(), part.species(1).labels().to_vec())));
        }
        assert_eq!(seen.len(), 540);
    }

    #[test]
    fn full_batch_is_unique() {
        let l = layout(&[5], &[5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let part = sample_partition(&l, &mut rng);
        assert_eq!(part.batch(0, 0), &[0, 1, 2, 3, 4]);
        assert_eq!(enumerate_partitions(&l).unwrap().count(), 1);
    }

    #[test]
    fn sampling_is_uniform_over_ordered_partitions() {
        let l = layout(&[4], &[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut freq: HashMap<Vec<u32>, usize> = HashMap::new();
        let samples = 100_000;
        for _ in 0..samples {
            *freq.entry(sample_partition(&l, &mut rng).species(0).labels().to_vec()).or_default() += 1;
        }
        assert_eq!(freq.len(), 6);
        let expected = samples as f64 / 6.0;
        let chi2: f64 = freq.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 5 degrees of freedom; 99.9% quantile is 20.5
        assert!(chi2 < 20.5, "chi-square {chi2}");
        for &c in freq.values() {
            assert!((c as f64 / samples as f64 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn marginal_label_probability_is_inverse_batch_count() {
        let l = layout(&[6, 4], &[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = 60_000;
        let mut hits = [0usize; 3];
        for _ in 0..samples {
            hits[sample_partition(&l, &mut rng).label(0, 2)] += 1;
        }
        for h in hits {
            assert!((h as f64 / samples as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let l = layout(&[10, 6], &[2, 3]);
        let a = sample_partition(&l, &mut ChaCha8Rng::seed_from_u64(99));
        let b = sample_partition(&l, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
    }

    #[test]
    fn indicator_cases() {
        let l = layout(&[4, 2], &[2, 2]);
        let part = Partition::from_assignments(&l, vec![vec![0, 1, 0, 1], vec![0, 0]]).unwrap();
        assert!(inclusion_indicator(&part, (0, 0), (0, 2)).unwrap());
        assert!(inclusion_indicator(&part, (0, 0), (1, 1)).unwrap());
        // label 1 exceeds b_2 = 1: C_{2,1} is empty
        assert!(!inclusion_indicator(&part, (0, 1), (1, 0)).unwrap());
        assert!(!inclusion_indicator(&part, (0, 0), (0, 0)).unwrap());
        assert!(inclusion_indicator(&part, (0, 9), (0, 0)).is_err());
        assert_eq!(part.super_batch(1), vec![(0, 1), (0, 3)]);
        assert_eq!(part.super_batch_count(), 2);
    }

    #[test]
    fn same_species_inclusion_mean_by_enumeration() {
        let l = layout(&[4], &[2]);
        let e = enumerate_partitions(&l).unwrap();
        let w = e.weight();
        let mean: f64 = e.map(|p| f64::from(u8::from(inclusion_indicator(&p, (0, 0), (0, 3)).unwrap())) * w).sum();
        assert!((mean - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn json_roundtrip_and_rejection() {
        let l = layout(&[4, 6], &[2, 3]);
        let part = sample_partition(&l, &mut ChaCha8Rng::seed_from_u64(3));
        let text = serde_json::to_string(&part).unwrap();
        assert!(text.starts_with("{\"assignments\":"));
        assert_eq!(Partition::from_json(&l, &text).unwrap(), part);
        assert!(Partition::from_assignments(&l, vec![vec![0, 0, 0, 1], vec![0, 0, 0, 1, 1, 1]]).is_err());
    }
}
