//! Synthetic table generators: categorical data sampled from known tree
//! models, and exact-count constructions whose empirical distribution
//! factorizes along the tree. Used by tests, benches, and demo runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::schema::{ColumnKind, ColumnMeta, TableData};

fn categorical_meta(name: &str, domain: usize) -> ColumnMeta {
    assert!(domain <= 10, "synthetic domains stay single-digit so codes sort");
    ColumnMeta {
        name: name.to_string(),
        kind: ColumnKind::Categorical,
        domain_size: domain,
        bin_edges: Vec::new(),
        dictionary: (0..domain).map(|c| c.to_string()).collect(),
        lo: 0.0,
        hi: 0.0,
        missing_code: None,
    }
}

/// A known tree over categorical columns, sampled row by row. Child columns
/// follow `(parent + offset) mod domain` with probability `1 - noise`, else
/// uniform; the root marginal is mildly non-uniform.
#[derive(Debug, Clone)]
pub struct TreeTableSpec {
    pub name: String,
    pub domains: Vec<usize>,
    pub parent: Vec<Option<usize>>,
    pub root: usize,
    pub noise: f64,
}

impl TreeTableSpec {
    pub fn chain(name: &str, domains: &[usize], noise: f64) -> Self {
        let parent = (0..domains.len())
            .map(|i| if i == 0 { None } else { Some(i - 1) })
            .collect();
        TreeTableSpec {
            name: name.to_string(),
            domains: domains.to_vec(),
            parent,
            root: 0,
            noise,
        }
    }

    /// Random tree shape with 4..=6 columns and domains 3..=6.
    pub fn random(name: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ncols = rng.random_range(4..=6usize);
        let domains: Vec<usize> = (0..ncols).map(|_| rng.random_range(3..=6)).collect();
        let parent: Vec<Option<usize>> = (0..ncols)
            .map(|i| if i == 0 { None } else { Some(rng.random_range(0..i)) })
            .collect();
        let noise = 0.15 + rng.random_range(0..20) as f64 / 100.0;
        TreeTableSpec { name: name.to_string(), domains, parent, root: 0, noise }
    }

    pub fn column_names(&self) -> Vec<String> {
        (0..self.domains.len()).map(|i| format!("c{i}")).collect()
    }

    pub fn generate(&self, rows: usize, seed: u64) -> TableData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.domains.len();
        let order = sample_order(&self.parent, self.root);
        let root_marginal: Vec<f64> = {
            let w: Vec<f64> = (0..self.domains[self.root]).map(|i| 2.0 + (i % 3) as f64).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        };

        let mut cells: Vec<Vec<u32>> = vec![Vec::with_capacity(rows); n];
        let mut row = vec![0u32; n];
        for _ in 0..rows {
            for &node in &order {
                let d = self.domains[node];
                row[node] = match self.parent[node] {
                    None => sample_discrete(&mut rng, &root_marginal) as u32,
                    Some(p) => {
                        let aligned = ((row[p] as usize + node) % d) as u32;
                        if rng.random::<f64>() < 1.0 - self.noise {
                            aligned
                        } else {
                            rng.random_range(0..d) as u32
                        }
                    }
                };
            }
            for (col, &v) in row.iter().enumerate() {
                cells[col].push(v);
            }
        }

        let columns = self
            .column_names()
            .iter()
            .zip(&self.domains)
            .map(|(name, &d)| categorical_meta(name, d))
            .collect();
        TableData::from_encoded(&self.name, columns, cells).expect("synthetic table is valid")
    }
}

fn sample_order(parent: &[Option<usize>], root: usize) -> Vec<usize> {
    let n = parent.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (node, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(node);
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        queue.extend(children[u].iter().copied());
    }
    order
}

fn sample_discrete(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let mut u: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Exact-count construction: cell counts are products of positive integer
/// edge potentials, so the empirical distribution factorizes along the tree
/// exactly and an unsmoothed fit reproduces every cell count bit-for-bit
/// (up to float roundoff).
#[derive(Debug, Clone)]
pub struct ExactTreeSpec {
    pub name: String,
    pub domains: Vec<usize>,
    pub parent: Vec<Option<usize>>,
    pub root: usize,
    root_weights: Vec<u64>,
    /// edge_weights[node][parent_value][node_value], for non-root nodes
    edge_weights: Vec<Vec<Vec<u64>>>,
}

impl ExactTreeSpec {
    pub fn chain(name: &str, domains: &[usize], seed: u64) -> Self {
        let parent: Vec<Option<usize>> =
            (0..domains.len()).map(|i| if i == 0 { None } else { Some(i - 1) }).collect();
        Self::new(name, domains, parent, 0, seed)
    }

    pub fn new(
        name: &str,
        domains: &[usize],
        parent: Vec<Option<usize>>,
        root: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root_weights = (0..domains[root]).map(|_| rng.random_range(1..=4u64)).collect();
        let edge_weights = (0..domains.len())
            .map(|node| match parent[node] {
                None => Vec::new(),
                Some(p) => (0..domains[p])
                    .map(|pv| {
                        (0..domains[node])
                            .map(|nv| {
                                // diagonal boost keeps tree edges the MI maximizers
                                let base = rng.random_range(1..=2u64);
                                if nv == (pv + node) % domains[node] {
                                    base + 6
                                } else {
                                    base
                                }
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect();
        ExactTreeSpec {
            name: name.to_string(),
            domains: domains.to_vec(),
            parent,
            root,
            root_weights,
            edge_weights,
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        (0..self.domains.len()).map(|i| format!("c{i}")).collect()
    }

    /// The exact count of one full assignment.
    pub fn cell_count(&self, assignment: &[usize]) -> u64 {
        let mut c = self.root_weights[assignment[self.root]];
        for (node, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                c *= self.edge_weights[node][assignment[*p]][assignment[node]];
            }
        }
        c
    }

    pub fn generate(&self) -> TableData {
        let n = self.domains.len();
        let mut cells: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut assignment = vec![0usize; n];
        loop {
            let count = self.cell_count(&assignment);
            for _ in 0..count {
                for (col, &v) in assignment.iter().enumerate() {
                    cells[col].push(v as u32);
                }
            }
            // odometer over assignments
            let mut k = 0;
            loop {
                assignment[k] += 1;
                if assignment[k] < self.domains[k] {
                    break;
                }
                assignment[k] = 0;
                k += 1;
                if k == n {
                    let columns = self
                        .column_names()
                        .iter()
                        .zip(&self.domains)
                        .map(|(name, &d)| categorical_meta(name, d))
                        .collect();
                    return TableData::from_encoded(&self.name, columns, cells)
                        .expect("synthetic table is valid");
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_table_deterministic() {
        let spec = TreeTableSpec::chain("t", &[3, 4], 0.3);
        assert_eq!(spec.generate(100, 7), spec.generate(100, 7));
    }

    #[test]
    fn exact_tree_counts_match_cells() {
        let spec = ExactTreeSpec::chain("t", &[3, 3], 5);
        let t = spec.generate();
        let mut count00 = 0;
        for r in 0..t.row_count {
            if t.codes(0)[r] == 0 && t.codes(1)[r] == 0 {
                count00 += 1;
            }
        }
        assert_eq!(count00, spec.cell_count(&[0, 0]));
    }
}
