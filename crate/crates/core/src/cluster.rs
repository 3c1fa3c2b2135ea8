//! Clipping of field matrices, diagonal cluster extraction and per-block
//! statistics (cluster counts, noise and signal-to-noise ratio).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::FieldMatrix;

/// Boolean `L×L` matrix `B[i][j] = values[i][j] ≥ θ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClippedMatrix {
    pub size: usize,
    pub bits: Vec<bool>,
    /// Threshold, stored as bits so the struct stays `Eq`.
    theta_bits: u64,
}

impl ClippedMatrix {
    pub fn from_bits(size: usize, bits: Vec<bool>, theta: f64) -> Self {
        assert_eq!(bits.len(), size * size, "clipped matrix must be square");
        ClippedMatrix {
            size,
            bits,
            theta_bits: theta.to_bits(),
        }
    }

    pub fn theta(&self) -> f64 {
        f64::from_bits(self.theta_bits)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `true` when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &ClippedMatrix) -> bool {
        self.size == other.size && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::config("theta", format!("threshold {theta} is outside (0, 1]")));
    }
    Ok(())
}

/// Thresholds a normalized field matrix; elements equal to θ survive.
pub fn clip(matrix: &FieldMatrix, theta: f64) -> Result<ClippedMatrix> {
    clip_values(&matrix.values, matrix.size, theta)
}

pub fn clip_values(values: &[f64], size: usize, theta: f64) -> Result<ClippedMatrix> {
    check_theta(theta)?;
    if values.len() != size * size {
        return Err(Error::Input("clip expects a square matrix".into()));
    }
    Ok(ClippedMatrix::from_bits(
        size,
        values.iter().map(|&v| v >= theta).collect(),
        theta,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub theta: f64,
    /// Label sets, each sorted ascending; ordered by smallest member.
    pub clusters: Vec<Vec<usize>>,
    pub diag: usize,
    pub noise: usize,
    pub total_true: usize,
    /// Label order placing every cluster as a contiguous diagonal block,
    /// followed by the remaining labels in index order.
    pub permutation: Vec<usize>,
    /// Coordinates `(row, column)` of the noise elements.
    pub noise_coords: Vec<(usize, usize)>,
}

impl ClusterReport {
    pub fn in_cluster_true(&self) -> usize {
        self.total_true - self.noise
    }

    /// Labels covered by some cluster.
    pub fn recognized_labels(&self) -> BTreeSet<usize> {
        self.clusters.iter().flatten().copied().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Extracts diagonal clusters from a clipped matrix.
///
/// Labels `i ≠ j` are joined when both `B[i][j]` and `B[j][i]` hold. A label
/// is active when `B[i][i]` holds or it has such a mutual edge. Clusters are
/// the connected components of active labels; a singleton whose diagonal is
/// false is dropped. Set elements outside every `S×S` cluster block count as
/// noise.
pub fn extract_clusters(b: &ClippedMatrix) -> ClusterReport {
    let l = b.size;
    let mutual = |i: usize, j: usize| i != j && b.get(i, j) && b.get(j, i);
    let active: Vec<bool> = (0..l).map(|i| b.get(i, i) || (0..l).any(|j| mutual(i, j))).collect();

    let mut comp = vec![usize::MAX; l];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for start in 0..l {
        if !active[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for j in 0..l {
                if comp[j] == usize::MAX && mutual(i, j) {
                    comp[j] = id;
                    members.push(j);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    // a diagonal-less singleton has no mutual edge, so it was never active
    let kept: Vec<Vec<usize>> = clusters
        .into_iter()
        .filter(|c| c.len() > 1 || b.get(c[0], c[0]))
        .collect();
    let mut block_of = vec![usize::MAX; l];
    for (new_id, c) in kept.iter().enumerate() {
        for &i in c {
            block_of[i] = new_id;
        }
    }

    let diag = (0..l).filter(|&i| b.get(i, i)).count();
    let mut noise_coords = Vec::new();
    let mut total_true = 0;
    for i in 0..l {
        for j in 0..l {
            if !b.get(i, j) {
                continue;
            }
            total_true += 1;
            if block_of[i] == usize::MAX || block_of[i] != block_of[j] {
                noise_coords.push((i, j));
            }
        }
    }
    let mut permutation: Vec<usize> = kept.iter().flatten().copied().collect();
    permutation.extend((0..l).filter(|&i| block_of[i] == usize::MAX));

    ClusterReport {
        theta: b.theta(),
        clusters: kept,
        diag,
        noise: noise_coords.len(),
        total_true,
        permutation,
        noise_coords,
    }
}

/// Jaccard index `|A∩B| / |A∪B|` of two label sets; 1 when both are empty.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Expected external noise per matrix element: `H·n̄/L²`.
pub fn noise_per_element(heads: usize, mean_noise: f64, labels: usize) -> f64 {
    heads as f64 * mean_noise / (labels * labels) as f64
}

/// Internal cluster noise per label: `N_label·(C_s − 1)/L`.
pub fn internal_noise(n_label: f64, cluster_size: f64, labels: usize) -> f64 {
    n_label * (cluster_size - 1.0) / labels as f64
}

/// `N_label / (N_noise + N_inter)`; infinite when both noise terms vanish.
pub fn signal_to_noise(n_label: f64, n_noise: f64, n_inter: f64) -> f64 {
    let denom = n_noise + n_inter;
    if denom > 0.0 {
        n_label / denom
    } else {
        f64::INFINITY
    }
}

/// One row of per-block statistics, averaged over the block's heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub block: usize,
    pub attn_acc: f64,
    pub n_c: f64,
    pub c_s: f64,
    pub diag: f64,
    pub n: f64,
    pub n_label: f64,
    pub n_noise: f64,
    pub n_inter: f64,
    pub snr: f64,
}

/// Aggregates one report per head of a probed block.
pub fn block_statistics(reports: &[ClusterReport], labels: usize, attn_acc: f64, block: usize) -> Result<StatsRow> {
    if reports.is_empty() {
        return Err(Error::Input("block statistics need at least one head".into()));
    }
    let h = reports.len() as f64;
    let total_clusters: usize = reports.iter().map(|r| r.clusters.len()).sum();
    if total_clusters == 0 {
        return Err(Error::Numeric(
            "no clusters in any head; average cluster size is undefined".into(),
        ));
    }
    let membership: usize = reports.iter().flat_map(|r| r.clusters.iter()).map(Vec::len).sum();
    let total_noise: usize = reports.iter().map(|r| r.noise).sum();
    let c_s = membership as f64 / total_clusters as f64;
    let n = total_noise as f64 / h;
    let n_label = membership as f64 / labels as f64;
    let n_noise = noise_per_element(reports.len(), n, labels);
    let n_inter = internal_noise(n_label, c_s, labels);
    Ok(StatsRow {
        block,
        attn_acc,
        n_c: total_clusters as f64 / h,
        c_s,
        diag: reports.iter().map(|r| r.diag).sum::<usize>() as f64 / h,
        n,
        n_label,
        n_noise,
        n_inter,
        snr: signal_to_noise(n_label, n_noise, n_inter),
    })
}

/// How many (head, cluster) pairs contain each label.
pub fn label_coverage(reports: &[ClusterReport], labels: usize) -> Vec<usize> {
    let mut count = vec![0; labels];
    for c in reports.iter().flat_map(|r| r.clusters.iter()) {
        for &i in c {
            count[i] += 1;
        }
    }
    count
}

pub const STATS_HEADER: &str = "Block,Attn.Acc.,N_c,C_s,Diag,n,N_label,N_noise,N_inter,SNR";

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut s = String::from(STATS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.block, r.attn_acc, r.n_c, r.c_s, r.diag, r.n, r.n_label, r.n_noise, r.n_inter, r.snr
        );
    }
    s
}

pub fn write_stats_csv(path: impl AsRef<Path>, rows: &[StatsRow]) -> Result<()> {
    std::fs::write(path, stats_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_coords(l: usize, coords: &[(usize, usize)]) -> ClippedMatrix {
        let mut bits = vec![false; l * l];
        for &(i, j) in coords {
            bits[i * l + j] = true;
        }
        ClippedMatrix::from_bits(l, bits, 0.3)
    }

    #[test]
    fn identity_gives_singletons() {
        let b = from_coords(100, &(0..100).map(|i| (i, i)).collect::<Vec<_>>());
        let r = extract_clusters(&b);
        assert_eq!(r.clusters.len(), 100);
        assert!(r.clusters.iter().all(|c| c.len() == 1));
        assert_eq!(r.diag, 100);
        assert_eq!(r.noise, 0);
    }

    #[test]
    fn hand_evaluated_example() {
        let b = from_coords(10, &[(1, 1), (2, 2), (1, 2), (2, 1), (5, 9)]);
        let r = extract_clusters(&b);
        assert_eq!(r.clusters, vec![vec![1, 2]]);
        assert_eq!(r.diag, 2);
        assert_eq!(r.noise, 1);
        assert_eq!(r.noise_coords, vec![(5, 9)]);
        assert_eq!(r.permutation[..2], [1, 2]);
        assert_eq!(r.permutation.len(), 10);
    }

    #[test]
    fn mutual_pair_without_diagonal_still_clusters() {
        let r = extract_clusters(&from_coords(4, &[(0, 3), (3, 0)]));
        assert_eq!(r.clusters, vec![vec![0, 3]]);
        assert_eq!(r.diag, 0);
        assert_eq!(r.noise, 0);
    }

    #[test]
    fn clip_threshold_edges() {
        let mut v = vec![-0.5; 9];
        v[4] = 1.0;
        v[0] = 0.3;
        let b = clip_values(&v, 3, 0.3).unwrap();
        assert!(b.get(0, 0));
        assert_eq!(b.count_true(), 2);
        assert_eq!(clip_values(&v, 3, 1.0).unwrap().count_true(), 1);
        v[0] = -0.3;
        assert_eq!(clip_values(&v, 3, 0.3).unwrap().count_true(), 1);
        assert!(clip_values(&v, 3, 0.0).is_err());
        assert!(clip_values(&v, 3, 1.2).is_err());
    }

    #[test]
    fn table_identities() {
        assert!((noise_per_element(4, 12.5, 100) - 0.005).abs() < 1e-15);
        assert!((internal_noise(2.9, 1.21, 100) - 0.00609).abs() < 1e-12);
        assert!((signal_to_noise(1.5, 0.005, 0.0004) - 277.777_777).abs() < 1e-3);
        assert!((noise_per_element(32, 139.3, 100) - 0.4458).abs() < 1e-4);
    }

    #[test]
    fn block_statistics_errors_without_clusters() {
        let empty = extract_clusters(&from_coords(5, &[(0, 1)]));
        assert!(block_statistics(&[empty], 5, 0.5, 1).is_err());
        assert!(block_statistics(&[], 5, 0.5, 1).is_err());
    }

    #[test]
    fn coverage_of_single_identity_head() {
        let b = from_coords(6, &(0..6).map(|i| (i, i)).collect::<Vec<_>>());
        let r = extract_clusters(&b);
        let cov = label_coverage(std::slice::from_ref(&r), 6);
        assert_eq!(cov, vec![1; 6]);
        let row = block_statistics(&[r], 6, 1.0, 1).unwrap();
        assert_eq!(row.n_label, 1.0);
        assert_eq!(row.snr, f64::INFINITY);
    }

    #[test]
    fn disjoint_specialists_cover_each_label_once() {
        let l = 12;
        let reports: Vec<ClusterReport> = (0..4)
            .map(|h| extract_clusters(&from_coords(l, &(3 * h..3 * h + 3).map(|i| (i, i)).collect::<Vec<_>>())))
            .collect();
        let cov = label_coverage(&reports, l);
        assert_eq!(cov.iter().max(), Some(&1));
        let row = block_statistics(&reports, l, 0.0, 1).unwrap();
        assert_eq!(row.n_label, cov.iter().sum::<usize>() as f64 / l as f64);
    }

    /// Clusters via Warshall closure of the mutual relation.
    fn oracle(b: &ClippedMatrix) -> (Vec<Vec<usize>>, usize) {
        let l = b.size;
        let mut reach = vec![vec![false; l]; l];
        for i in 0..l {
            for j in 0..l {
                reach[i][j] = i == j || (b.get(i, j) && b.get(j, i));
            }
        }
        for k in 0..l {
            for i in 0..l {
                for j in 0..l {
                    reach[i][j] |= reach[i][k] && reach[k][j];
                }
            }
        }
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for i in 0..l {
            let comp: Vec<usize> = (0..l).filter(|&j| reach[i][j]).collect();
            let keep = comp.len() > 1 || b.get(i, i);
            if keep && comp[0] == i {
                clusters.push(comp);
            }
        }
        let inside = |i: usize, j: usize| clusters.iter().any(|c| c.contains(&i) && c.contains(&j));
        let noise = (0..l * l).filter(|&x| b.bits[x] && !inside(x / l, x % l)).count();
        (clusters, noise)
    }

    #[test]
    fn every_4x4_matrix_matches_closure_oracle() {
        for mask in 0u32..1 << 16 {
            let bits = (0..16).map(|k| mask >> k & 1 == 1).collect();
            let b = ClippedMatrix::from_bits(4, bits, 0.5);
            let r = extract_clusters(&b);
            let (clusters, noise) = oracle(&b);
            assert_eq!(r.clusters, clusters, "mask {mask:#06x}");
            assert_eq!(r.noise, noise, "mask {mask:#06x}");
        }
    }

    #[test]
    fn jaccard_index() {
        let a: BTreeSet<usize> = [1, 2, 3].into();
        let b: BTreeSet<usize> = [2, 3, 4, 5].into();
        assert_eq!(jaccard(&a, &b), 0.4);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 1.0);
        assert_eq!(jaccard(&a, &a), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn clustering_conserves_true_elements(
            l in 1usize..24,
            seed in proptest::collection::vec(0.0f64..1.0, 576),
            theta in 0.05f64..1.0,
        ) {
            let values = &seed[..l * l];
            let b = clip_values(values, l, theta).unwrap();
            let r = extract_clusters(&b);
            let block: usize = r.clusters.iter().map(|c| c.len() * c.len()).sum();
            proptest::prop_assert_eq!(r.total_true, b.count_true());
            proptest::prop_assert_eq!(r.in_cluster_true() + r.noise, r.total_true);
            proptest::prop_assert!(r.in_cluster_true() <= block);
            let mut perm = r.permutation.clone();
            perm.sort_unstable();
            proptest::prop_assert_eq!(perm, (0..l).collect::<Vec<_>>());
            // raising θ never adds set elements
            let tighter = clip_values(values, l, (theta + 0.1).min(1.0)).unwrap();
            proptest::prop_assert!(tighter.is_subset_of(&b));
        }
    }

    #[test]
    fn csv_header_order() {
        let csv = stats_csv(&[]);
        assert_eq!(csv.trim(), STATS_HEADER);
    }
}
