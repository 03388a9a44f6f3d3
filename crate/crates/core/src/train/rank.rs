use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1-based ranks in ascending order; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim("spearman_rho", format!("lengths {} and {} differ", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("spearman_rho needs at least two observations".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let integral = |r: &[f64]| r.iter().all(|v| v.fract() == 0.0);
    if integral(&rx) && integral(&ry) {
        // without ties the closed form is exact in floating point
        let n = xs.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        return Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
    }
    let mean = (xs.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mean, b - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("spearman_rho of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub methods: Vec<String>,
    /// `rho[i][j]` between `methods[i]` and `methods[j]`.
    pub rho: Vec<Vec<f64>>,
    /// Presentation order from average-linkage clustering of the rows.
    pub order: Vec<usize>,
}

impl CorrelationMatrix {
    /// The matrix with rows and columns permuted into clustering order.
    pub fn sorted(&self) -> Self {
        let o = &self.order;
        Self {
            methods: o.iter().map(|&i| self.methods[i].clone()).collect(),
            rho: o.iter().map(|&i| o.iter().map(|&j| self.rho[i][j]).collect()).collect(),
            order: (0..o.len()).collect(),
        }
    }
}

pub fn importance_correlation_matrix(weights: &[(String, Vec<f64>)]) -> Result<CorrelationMatrix> {
    let Some((_, first)) = weights.first() else {
        return Err(Error::InvalidArgument("no importance vectors to compare".into()));
    };
    if let Some((name, w)) = weights.iter().find(|(_, w)| w.len() != first.len()) {
        return Err(Error::dim(
            "importance_correlation_matrix",
            format!("{name} has {} channels, expected {}", w.len(), first.len()),
        ));
    }
    let n = weights.len();
    let mut rho = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = spearman_rho(&weights[i].1, &weights[j].1)?;
            rho[i][j] = r;
            rho[j][i] = r;
        }
    }
    let order = average_linkage_order(&rho);
    Ok(CorrelationMatrix { methods: weights.iter().map(|(m, _)| m.clone()).collect(), rho, order })
}

/// Leaf order of the UPGMA dendrogram over the rows of `points` under
/// Euclidean distance. At each merge the closest pair joins (lowest indices
/// on ties) and the cluster holding the smaller original index goes first.
pub fn average_linkage_order(points: &[Vec<f64>]) -> Vec<usize> {
    let n = points.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(&points[i], &points[j])).collect()).collect();
    let mut clusters: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    for _ in 1..n {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            for j in i + 1..n {
                if clusters[i].is_some() && clusters[j].is_some() && d[i][j] < best.0 {
                    best = (d[i][j], i, j);
                }
            }
        }
        let (_, a, b) = best;
        let (ca, cb) = (clusters[a].take().unwrap(), clusters[b].take().unwrap());
        let (na, nb) = (ca.len() as f64, cb.len() as f64);
        for k in 0..n {
            if clusters[k].is_some() {
                let merged = (na * d[a][k] + nb * d[b][k]) / (na + nb);
                d[a][k] = merged;
                d[k][a] = merged;
            }
        }
        let joined = if ca.iter().min() <= cb.iter().min() { [ca, cb].concat() } else { [cb, ca].concat() };
        clusters[a] = Some(joined);
    }
    clusters.into_iter().flatten().next().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn closed_form_on_all_permutations_of_four() {
        let base = [1.0, 2.0, 3.0, 4.0];
        let perms = permutations(4);
        assert_eq!(perms.len(), 24);
        for p in perms {
            let ys: Vec<f64> = p.iter().map(|&i| (i + 1) as f64).collect();
            let d2: f64 = base.iter().zip(&ys).map(|(a, b)| (a - b).powi(2)).sum();
            let oracle = 1.0 - 6.0 * d2 / (4.0 * 15.0);
            assert_eq!(spearman_rho(&base, &ys).unwrap(), oracle, "{p:?}");
        }
    }

    #[test]
    fn reference_values() {
        assert_eq!(spearman_rho(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap(), 0.8);
        assert_eq!(spearman_rho(&[0.3, 0.1, 0.9], &[0.3, 0.1, 0.9]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&[0.3, 0.1, 0.9], &[-0.3, -0.1, -0.9]).unwrap(), -1.0);
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 0.0]), vec![3.5, 2.0, 3.5, 1.0]);
        // scipy.stats.spearmanr([1, 2, 2, 3], [1, 2, 3, 4]) = 0.9486832980505138
        let r = spearman_rho(&[1., 2., 2., 3.], &[1., 2., 3., 4.]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-15);
    }

    #[test]
    fn error_cases() {
        assert!(spearman_rho(&[1.0, 2.0], &[1.0]).is_err());
        assert!(matches!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
        let bad = [("a".to_string(), vec![1.0, 2.0]), ("b".to_string(), vec![1.0, 2.0, 3.0])];
        assert!(importance_correlation_matrix(&bad).is_err());
    }

    #[test]
    fn small_matrices() {
        let one = importance_correlation_matrix(&[("dcmix".into(), vec![0.8, 0.1, 0.2])]).unwrap();
        assert_eq!(one.rho, vec![vec![1.0]]);
        let two = importance_correlation_matrix(&[("a".into(), vec![3.0, 1.0, 2.0]), ("b".into(), vec![30.0, 10.0, 20.0])])
            .unwrap();
        assert_eq!(two.rho[0][1], 1.0);
        assert_eq!(two.rho[1][0], 1.0);
    }

    #[test]
    fn clustering_groups_similar_rows() {
        // rows 0 and 2 are near each other, as are 1 and 3
        let pts = vec![vec![0.0, 0.0], vec![10.0, 10.0], vec![0.1, 0.0], vec![10.0, 10.2]];
        assert_eq!(average_linkage_order(&pts), vec![0, 2, 1, 3]);
    }

    proptest! {
        #[test]
        fn matrix_matches_pairwise_oracle(
            vecs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 3)
        ) {
            let named: Vec<(String, Vec<f64>)> = vecs.iter().enumerate().map(|(i, v)| (format!("m{i}"), v.clone())).collect();
            let m = importance_correlation_matrix(&named).unwrap();
            for i in 0..3 {
                prop_assert_eq!(m.rho[i][i], 1.0);
                for j in 0..3 {
                    prop_assert_eq!(m.rho[i][j], m.rho[j][i]);
                    if i != j {
                        prop_assert_eq!(m.rho[i][j], spearman_rho(&vecs[i], &vecs[j]).unwrap());
                    }
                }
            }
            let mut o = m.order.clone();
            o.sort_unstable();
            prop_assert_eq!(o, vec![0, 1, 2]);
        }

        #[test]
        fn monotone_maps_give_unit_magnitude(xs in prop::collection::btree_set(-1000i32..1000, 2..12)) {
            let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
            let up: Vec<f64> = xs.iter().map(|v| v.powi(3) + 1.0).collect();
            let down: Vec<f64> = xs.iter().map(|v| -v).collect();
            prop_assert_eq!(spearman_rho(&xs, &up).unwrap(), 1.0);
            prop_assert_eq!(spearman_rho(&xs, &down).unwrap(), -1.0);
        }
    }
}
