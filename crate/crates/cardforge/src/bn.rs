//! Tree-structured Bayesian networks: Chow-Liu structure learning,
//! closed-form CPD fitting, topological CPD indexing, and variable-elimination
//! inference for selectivity and COUNT estimation.

use serde::{Deserialize, Serialize};

use crate::error::{CardError, Result};
use crate::exec;
use crate::query::{
    featurize_leaves, to_dnf, Pred, PredicateIndicator, DEFAULT_MAX_DNF_TERMS,
};
use crate::schema::{ColumnMeta, TableData};
use crate::util::{now_secs, Matrix, UnionFind};

/// Hard cap on DNF terms when the union upper bound is requested instead of
/// full inclusion-exclusion.
const UNION_BOUND_TERM_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cpd {
    /// Probability vector over the root's domain.
    Root(Vec<f64>),
    /// P(node = row | parent = col); every column sums to 1.
    Child(Matrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub node: usize,
    pub children: Vec<usize>,
}

/// A fitted tree Bayesian network over one table's encoded columns.
///
/// Carries the column metadata it was trained under, so featurization and
/// estimation need no access to the rows. `index` is empty until
/// `index_topologically` runs; inference requires it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeBayesNet {
    pub table: String,
    pub node_columns: Vec<String>,
    pub metas: Vec<ColumnMeta>,
    pub parent: Vec<Option<usize>>,
    pub root: usize,
    pub cpds: Vec<Cpd>,
    pub row_count: usize,
    /// Topological order (root first) with per-entry child lists; inference
    /// walks this array instead of traversing the tree.
    pub index: Vec<IndexEntry>,
    pub timestamp: i64,
}

impl TreeBayesNet {
    pub fn node_of(&self, column: &str) -> Option<usize> {
        self.node_columns.iter().position(|c| c == column)
    }

    pub fn domain_size(&self, node: usize) -> usize {
        self.metas[node].domain_size
    }

    pub fn is_indexed(&self) -> bool {
        !self.index.is_empty()
    }

    /// Marginal distribution of every node, propagated root-down.
    pub fn node_marginals(&self) -> Result<Vec<Vec<f64>>> {
        let order = topological_order(&self.parent, self.root)?;
        let mut marginals: Vec<Vec<f64>> = vec![Vec::new(); self.node_columns.len()];
        for node in order {
            marginals[node] = match &self.cpds[node] {
                Cpd::Root(v) => v.clone(),
                Cpd::Child(m) => {
                    let parent = self.parent[node].expect("non-root has parent");
                    let pm = &marginals[parent];
                    (0..m.rows)
                        .map(|r| (0..m.cols).map(|c| m.get(r, c) * pm[c]).sum())
                        .collect()
                }
            };
        }
        Ok(marginals)
    }

    /// Mutual information of a non-root node with its parent, from the
    /// fitted CPDs (no data access).
    pub fn edge_mutual_information(&self, node: usize) -> Result<f64> {
        let parent = self.parent[node]
            .ok_or_else(|| CardError::Invalid("root has no incident edge".into()))?;
        let m = match &self.cpds[node] {
            Cpd::Child(m) => m,
            Cpd::Root(_) => return Err(CardError::Model("root CPD on non-root node".into())),
        };
        let marginals = self.node_marginals()?;
        let pm = &marginals[parent];
        let nm = &marginals[node];
        let mut mi = 0.0;
        for c in 0..m.cols {
            for r in 0..m.rows {
                let joint = m.get(r, c) * pm[c];
                if joint > 0.0 && nm[r] > 0.0 && pm[c] > 0.0 {
                    mi += joint * (joint / (nm[r] * pm[c])).ln();
                }
            }
        }
        Ok(mi.max(0.0))
    }
}

// ---------------------------------------------------------------------------
// Structure learning
// ---------------------------------------------------------------------------

/// Empirical mutual information of two encoded columns, in nats.
pub fn mutual_information(table: &TableData, a: &str, b: &str) -> Result<f64> {
    let (ia, ma) = table.column(a)?;
    let (ib, mb) = table.column(b)?;
    Ok(mi_from_codes(
        table.codes(ia),
        table.codes(ib),
        ma.domain_size,
        mb.domain_size,
    ))
}

fn mi_from_codes(xa: &[u32], xb: &[u32], da: usize, db: usize) -> f64 {
    let n = xa.len();
    if n == 0 {
        return 0.0;
    }
    let mut joint = vec![0u64; da * db];
    let mut ca = vec![0u64; da];
    let mut cb = vec![0u64; db];
    for (&a, &b) in xa.iter().zip(xb) {
        joint[a as usize * db + b as usize] += 1;
        ca[a as usize] += 1;
        cb[b as usize] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for a in 0..da {
        if ca[a] == 0 {
            continue;
        }
        for b in 0..db {
            let j = joint[a * db + b];
            if j == 0 {
                continue;
            }
            let pj = j as f64 / nf;
            mi += pj * ((j as f64 * nf) / (ca[a] as f64 * cb[b] as f64)).ln();
        }
    }
    mi.max(0.0)
}

/// All pairwise MI values (i < j), sequential.
pub fn pairwise_mi_seq(table: &TableData) -> Vec<(usize, usize, f64)> {
    let pairs = column_pairs(table.columns.len());
    exec::map_collect_seq(&pairs, |&(i, j)| (i, j, pair_mi(table, i, j)))
}

/// All pairwise MI values (i < j); data-parallel when the `parallel`
/// feature is enabled, with identical output either way.
pub fn pairwise_mi(table: &TableData) -> Vec<(usize, usize, f64)> {
    let pairs = column_pairs(table.columns.len());
    exec::map_collect(&pairs, |&(i, j)| (i, j, pair_mi(table, i, j)))
}

fn column_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    pairs
}

fn pair_mi(table: &TableData, i: usize, j: usize) -> f64 {
    mi_from_codes(
        table.codes(i),
        table.codes(j),
        table.columns[i].domain_size,
        table.columns[j].domain_size,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub parent: Vec<Option<usize>>,
    pub root: usize,
}

/// Chow-Liu structure: maximum spanning tree over pairwise MI (Kruskal,
/// ties broken by the smaller (i, j) column-index pair), rooted at the node
/// with the largest summed MI over its incident tree edges.
pub fn learn_structure(table: &TableData) -> Result<Structure> {
    let n = table.columns.len();
    if n == 0 {
        return Err(CardError::Invalid("table has no columns".into()));
    }
    if table.row_count == 0 {
        return Err(CardError::Invalid("cannot learn structure from zero rows".into()));
    }
    if let Some(bad) = table.columns.iter().find(|c| !c.kind.is_modelable()) {
        return Err(CardError::Invalid(format!(
            "unsupported column {} must be excluded before training",
            bad.name
        )));
    }
    if n == 1 {
        return Ok(Structure { parent: vec![None], root: 0 });
    }

    let mut edges = pairwise_mi(table);
    edges.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut uf = UnionFind::new(n);
    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut taken = 0;
    for (i, j, w) in edges {
        if uf.union(i, j) {
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
            taken += 1;
            if taken == n - 1 {
                break;
            }
        }
    }

    let root = (0..n)
        .max_by(|&a, &b| {
            let sa: f64 = adjacency[a].iter().map(|(_, w)| w).sum();
            let sb: f64 = adjacency[b].iter().map(|(_, w)| w).sum();
            sa.total_cmp(&sb).then(b.cmp(&a))
        })
        .unwrap();

    // Orient edges away from the root.
    let mut parent = vec![None; n];
    let mut visited = vec![false; n];
    let mut queue = std::collections::VecDeque::from([root]);
    visited[root] = true;
    while let Some(u) = queue.pop_front() {
        let mut next: Vec<usize> = adjacency[u].iter().map(|&(v, _)| v).collect();
        next.sort_unstable();
        for v in next {
            if !visited[v] {
                visited[v] = true;
                parent[v] = Some(u);
                queue.push_back(v);
            }
        }
    }
    Ok(Structure { parent, root })
}

// ---------------------------------------------------------------------------
// Parameter fitting
// ---------------------------------------------------------------------------

/// Closed-form maximum-likelihood CPDs with Laplace smoothing `alpha`.
/// All variables are fully observed, so counting is the EM fixed point.
pub fn fit_cpds(table: &TableData, structure: &Structure, alpha: f64) -> Result<TreeBayesNet> {
    let n = table.columns.len();
    if table.row_count == 0 {
        return Err(CardError::Invalid("cannot fit CPDs on zero rows".into()));
    }
    if structure.parent.len() != n {
        return Err(CardError::Invalid("structure does not match table".into()));
    }
    let rows = table.row_count as f64;
    let mut cpds = Vec::with_capacity(n);
    for node in 0..n {
        let d = table.columns[node].domain_size;
        match structure.parent[node] {
            None => {
                let mut counts = vec![0u64; d];
                for &c in table.codes(node) {
                    counts[c as usize] += 1;
                }
                let denom = rows + alpha * d as f64;
                cpds.push(Cpd::Root(
                    counts.iter().map(|&c| (c as f64 + alpha) / denom).collect(),
                ));
            }
            Some(p) => {
                let dp = table.columns[p].domain_size;
                let mut joint = Matrix::zeros(d, dp);
                let mut pcount = vec![0.0f64; dp];
                for (&c, &pc) in table.codes(node).iter().zip(table.codes(p)) {
                    joint.add_at(c as usize, pc as usize, 1.0);
                    pcount[pc as usize] += 1.0;
                }
                let mut m = Matrix::zeros(d, dp);
                for col in 0..dp {
                    let denom = pcount[col] + alpha * d as f64;
                    for row in 0..d {
                        let v = if denom > 0.0 {
                            (joint.get(row, col) + alpha) / denom
                        } else {
                            // unsmoothed and unseen parent value: uniform
                            1.0 / d as f64
                        };
                        m.set(row, col, v);
                    }
                }
                cpds.push(Cpd::Child(m));
            }
        }
    }
    Ok(TreeBayesNet {
        table: table.name.clone(),
        node_columns: table.columns.iter().map(|c| c.name.clone()).collect(),
        metas: table.columns.clone(),
        parent: structure.parent.clone(),
        root: structure.root,
        cpds,
        row_count: table.row_count,
        index: Vec::new(),
        timestamp: now_secs(),
    })
}

pub fn train(table: &TableData, alpha: f64) -> Result<TreeBayesNet> {
    let structure = learn_structure(table)?;
    let bn = fit_cpds(table, &structure, alpha)?;
    index_topologically(bn)
}

// ---------------------------------------------------------------------------
// Indexing
// ---------------------------------------------------------------------------

fn topological_order(parent: &[Option<usize>], root: usize) -> Result<Vec<usize>> {
    let n = parent.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (node, p) in parent.iter().enumerate() {
        match p {
            Some(p) => {
                if *p >= n {
                    return Err(CardError::Model("parent link out of range".into()));
                }
                children[*p].push(node);
            }
            None => {
                if node != root {
                    return Err(CardError::Model("multiple roots in parent map".into()));
                }
            }
        }
    }
    if parent[root].is_some() {
        return Err(CardError::Model("root has a parent".into()));
    }
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::from([root]);
    let mut visited = vec![false; n];
    visited[root] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &c in &children[u] {
            if visited[c] {
                return Err(CardError::Model("cycle detected in parent links".into()));
            }
            visited[c] = true;
            queue.push_back(c);
        }
    }
    if order.len() != n {
        return Err(CardError::Model("cycle detected in parent links".into()));
    }
    Ok(order)
}

/// Build the flat topological index (root first, parent before child, child
/// lists inline) so inference needs no tree traversal.
pub fn index_topologically(mut bn: TreeBayesNet) -> Result<TreeBayesNet> {
    let order = topological_order(&bn.parent, bn.root)?;
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); bn.parent.len()];
    for (node, p) in bn.parent.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(node);
        }
    }
    bn.index = order
        .into_iter()
        .map(|node| IndexEntry { node, children: children[node].clone() })
        .collect();
    Ok(bn)
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Probability of a conjunction given per-column indicators; unconstrained
/// columns are implicitly all-ones. Bottom-up message passing over the
/// topological index.
pub fn prob_conjunction(bn: &TreeBayesNet, indicators: &[PredicateIndicator]) -> Result<f64> {
    if !bn.is_indexed() {
        return Err(CardError::Invalid(
            "network is not indexed; run index_topologically first".into(),
        ));
    }
    let n = bn.node_columns.len();
    let mut masks: Vec<Option<&[f64]>> = vec![None; n];
    for ind in indicators {
        let node = bn.node_of(&ind.column).ok_or_else(|| CardError::UnknownColumn {
            table: bn.table.clone(),
            column: ind.column.clone(),
        })?;
        if ind.mask.len() != bn.domain_size(node) {
            return Err(CardError::Invalid(format!(
                "indicator length {} does not match domain {} of column {}",
                ind.mask.len(),
                bn.domain_size(node),
                ind.column
            )));
        }
        masks[node] = Some(ind.mask.as_slice());
    }

    // messages[node]: vector over the parent's domain, filled leaf-first
    let mut messages: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut result = 0.0;
    for entry in bn.index.iter().rev() {
        let node = entry.node;
        let d = bn.domain_size(node);
        let mut vec_node: Vec<f64> = match masks[node] {
            Some(m) => m.to_vec(),
            None => vec![1.0; d],
        };
        for &child in &entry.children {
            let msg = messages[child].take().expect("child processed before parent");
            for (v, m) in vec_node.iter_mut().zip(&msg) {
                *v *= m;
            }
        }
        match &bn.cpds[node] {
            Cpd::Root(p) => {
                result = p.iter().zip(&vec_node).map(|(p, v)| p * v).sum();
            }
            Cpd::Child(m) => {
                messages[node] = Some(m.col_dot(&vec_node));
            }
        }
    }
    Ok(result.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy)]
pub struct SelectivityOpts {
    pub max_dnf_terms: usize,
    /// On DNF blowup, fall back to the union upper bound
    /// min(1, sum of clause selectivities) instead of erroring.
    pub union_bound_on_blowup: bool,
}

impl Default for SelectivityOpts {
    fn default() -> Self {
        SelectivityOpts { max_dnf_terms: DEFAULT_MAX_DNF_TERMS, union_bound_on_blowup: false }
    }
}

/// Selectivity of an arbitrary predicate via DNF + inclusion-exclusion.
/// Same-column leaves inside an intersection multiply their masks.
pub fn selectivity(bn: &TreeBayesNet, pred: &Pred) -> Result<f64> {
    selectivity_opts(bn, pred, SelectivityOpts::default())
}

pub fn selectivity_opts(bn: &TreeBayesNet, pred: &Pred, opts: SelectivityOpts) -> Result<f64> {
    let clauses = match to_dnf(pred, opts.max_dnf_terms) {
        Ok(c) => c,
        Err(CardError::DnfBlowup { .. }) if opts.union_bound_on_blowup => {
            let clauses = to_dnf(pred, UNION_BOUND_TERM_CAP)?;
            let mut total = 0.0;
            for clause in &clauses {
                total += clause_probability(bn, &[clause])?;
                if total >= 1.0 {
                    return Ok(1.0);
                }
            }
            return Ok(total.min(1.0));
        }
        Err(e) => return Err(e),
    };
    let m = clauses.len();
    if m == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for subset in 1u64..(1 << m) {
        let members: Vec<&Vec<_>> =
            (0..m).filter(|i| subset >> i & 1 == 1).map(|i| &clauses[i]).collect();
        let p = clause_probability(bn, &members)?;
        if members.len() % 2 == 1 {
            total += p;
        } else {
            total -= p;
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

fn clause_probability(
    bn: &TreeBayesNet,
    clauses: &[&Vec<crate::query::PredLeaf>],
) -> Result<f64> {
    let leaves: Vec<&crate::query::PredLeaf> =
        clauses.iter().flat_map(|c| c.iter()).collect();
    let indicators = featurize_leaves(&leaves, &bn.table, &bn.metas)?;
    prob_conjunction(bn, &indicators)
}

/// COUNT estimate: selectivity times the training row count.
pub fn estimate_count(bn: &TreeBayesNet, pred: &Pred) -> Result<f64> {
    Ok(selectivity(bn, pred)? * bn.row_count as f64)
}

pub fn estimate_count_opts(bn: &TreeBayesNet, pred: &Pred, opts: SelectivityOpts) -> Result<f64> {
    Ok(selectivity_opts(bn, pred, opts)? * bn.row_count as f64)
}

/// Filtered per-bucket counts over a modeled join-bucket column: entry b is
/// the COUNT estimate of `pred AND key in bucket b`. Dictionary entries that
/// do not name a bucket id (the missing marker) are skipped.
pub fn bucket_distribution(bn: &TreeBayesNet, key_column: &str, pred: &Pred) -> Result<Vec<f64>> {
    let node = bn.node_of(key_column).ok_or_else(|| CardError::UnknownColumn {
        table: bn.table.clone(),
        column: key_column.to_string(),
    })?;
    let meta = &bn.metas[node];
    let bucket_codes: Vec<usize> = (0..meta.domain_size)
        .filter(|&c| meta.dictionary.get(c).map(String::as_str) != Some(""))
        .collect();

    let clauses = to_dnf(pred, DEFAULT_MAX_DNF_TERMS)?;
    if clauses.len() != 1 {
        return Err(CardError::Invalid(
            "bucket distribution requires a conjunctive predicate".into(),
        ));
    }
    let leaves: Vec<&crate::query::PredLeaf> = clauses[0].iter().collect();
    let mut indicators = featurize_leaves(&leaves, &bn.table, &bn.metas)?;
    let key_slot = match indicators.iter().position(|i| i.column == *key_column) {
        Some(i) => i,
        None => {
            indicators.push(PredicateIndicator {
                column: key_column.to_string(),
                mask: vec![1.0; meta.domain_size],
            });
            indicators.len() - 1
        }
    };
    let base_key_mask = indicators[key_slot].mask.clone();

    let rows = bn.row_count as f64;
    let counts = exec::map_collect(&bucket_codes, |&code| {
        let mut local = indicators.clone();
        let mut mask = vec![0.0; meta.domain_size];
        mask[code] = base_key_mask[code];
        local[key_slot].mask = mask;
        prob_conjunction(bn, &local).map(|p| p * rows)
    });
    counts.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::parse;
    use crate::schema::load_csv_reader;
    use crate::synth;
    use std::collections::BTreeMap;

    fn csv_table(body: &str) -> TableData {
        load_csv_reader(body.as_bytes(), "t", &BTreeMap::new()).unwrap()
    }

    #[test]
    fn mi_with_itself_is_entropy() {
        // 4 equiprobable codes
        let body = "x\n".to_string() + &"a\nb\nc\nd\n".repeat(25);
        let t = csv_table(&body);
        let mi = mutual_information(&t, "x", "x").unwrap();
        assert!((mi - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_of_independent_balanced_columns_is_zero() {
        let t = csv_table("x,y\n0,0\n0,1\n1,0\n1,1\n");
        let mi = mutual_information(&t, "x", "y").unwrap();
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn mi_of_functional_dependency_is_entropy() {
        // col2 = col3 + 2 over 8 distinct values, uniform
        let mut body = String::from("col2,col3\n");
        for _ in 0..10 {
            for v in 0..8 {
                body.push_str(&format!("{},{}\n", v + 2, v));
            }
        }
        let t = csv_table(&body);
        let mi = mutual_information(&t, "col2", "col3").unwrap();
        assert!((mi - 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn structure_two_columns_single_edge() {
        let t = csv_table("x,y\n0,0\n0,1\n1,0\n1,1\n");
        let s = learn_structure(&t).unwrap();
        let edges = s.parent.iter().filter(|p| p.is_some()).count();
        assert_eq!(edges, 1);
    }

    /// All-equal chain data ties every pairwise MI; the declared tie-break
    /// (smaller column-index pair first) makes Kruskal deterministic: it
    /// takes (0,1) then (0,2), a star at the first column.
    #[test]
    fn structure_deterministic_under_ties() {
        let mut body = String::from("x,y,z\n");
        for _ in 0..5 {
            for v in 0..4 {
                body.push_str(&format!("{v},{v},{v}\n"));
            }
        }
        let t = csv_table(&body);
        let s = learn_structure(&t).unwrap();
        let s2 = learn_structure(&t).unwrap();
        assert_eq!(s, s2);
        assert_eq!(s.root, 0);
        assert_eq!(s.parent, vec![None, Some(0), Some(0)]);
        // any tree is exact on mutually determined columns
        let bn = train(&t, 0.0).unwrap();
        let q = parse("SELECT COUNT(*) FROM t WHERE y = 2 AND z = 2").unwrap();
        let est = estimate_count(&bn, &q.predicate).unwrap();
        assert!((est - 5.0).abs() < 1e-9);
    }

    #[test]
    fn structure_root_can_have_multiple_children() {
        // y and z both follow x but are conditionally independent given x
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut body = String::from("x,y,z\n");
        for _ in 0..2000 {
            let x = rng.random_range(0..2);
            let y = if rng.random_range(0..10) < 9 { x } else { 1 - x };
            let z = if rng.random_range(0..10) < 9 { x } else { 1 - x };
            body.push_str(&format!("{x},{y},{z}\n"));
        }
        let t = csv_table(&body);
        let s = learn_structure(&t).unwrap();
        assert_eq!(s.root, 0);
        assert_eq!(s.parent, vec![None, Some(0), Some(0)]);
    }

    #[test]
    fn fit_root_marginal_unsmoothed() {
        let body = "x\n".to_string() + &"0\n".repeat(7) + &"1\n".repeat(3);
        let t = csv_table(&body);
        let s = learn_structure(&t).unwrap();
        let bn = fit_cpds(&t, &s, 0.0).unwrap();
        match &bn.cpds[0] {
            Cpd::Root(v) => {
                assert!((v[0] - 0.7).abs() < 1e-12);
                assert!((v[1] - 0.3).abs() < 1e-12);
            }
            _ => panic!("expected root"),
        }
    }

    #[test]
    fn fit_unseen_parent_value_smoothed_uniform() {
        // y has domain {0,1}; parent x has a third value never observed
        // jointly thanks to alpha=1 smoothing check on all columns.
        let t = csv_table("x,y\n0,0\n0,1\n1,0\n1,1\n2,0\n2,1\n");
        let s = Structure { parent: vec![None, Some(0)], root: 0 };
        let bn = fit_cpds(&t, &s, 1.0).unwrap();
        match &bn.cpds[1] {
            Cpd::Child(m) => {
                for c in 0..3 {
                    assert!((m.col_sum(c) - 1.0).abs() < 1e-12);
                }
            }
            _ => panic!("expected child"),
        }
    }

    #[test]
    fn fit_deterministic_child_is_identity() {
        let mut body = String::from("p,c\n");
        for _ in 0..5 {
            for v in 0..3 {
                body.push_str(&format!("{v},{v}\n"));
            }
        }
        let t = csv_table(&body);
        let s = Structure { parent: vec![None, Some(0)], root: 0 };
        let bn = fit_cpds(&t, &s, 0.0).unwrap();
        match &bn.cpds[1] {
            Cpd::Child(m) => {
                for r in 0..3 {
                    for c in 0..3 {
                        let want = if r == c { 1.0 } else { 0.0 };
                        assert!((m.get(r, c) - want).abs() < 1e-12);
                    }
                }
            }
            _ => panic!("expected child"),
        }
    }

    #[test]
    fn fit_zero_rows_errors() {
        let t = csv_table("x\n1\n");
        let t = t.take_rows(&[]);
        let s = Structure { parent: vec![None], root: 0 };
        assert!(fit_cpds(&t, &s, 1.0).is_err());
    }

    #[test]
    fn index_orders_parent_before_child() {
        let t = csv_table("a,b,c\n0,0,0\n1,1,1\n");
        let s = Structure { parent: vec![Some(1), None, Some(0)], root: 1 };
        let bn = index_topologically(fit_cpds(&t, &s, 1.0).unwrap()).unwrap();
        let pos: Vec<usize> =
            (0..3).map(|n| bn.index.iter().position(|e| e.node == n).unwrap()).collect();
        assert_eq!(bn.index[0].node, 1);
        assert!(pos[1] < pos[0]);
        assert!(pos[0] < pos[2]);
        assert!(bn.index.iter().find(|e| e.node == 2).unwrap().children.is_empty());
    }

    #[test]
    fn index_single_node() {
        let t = csv_table("a\n0\n1\n");
        let bn = train(&t, 1.0).unwrap();
        assert_eq!(bn.index.len(), 1);
        assert_eq!(bn.index[0].node, bn.root);
    }

    #[test]
    fn index_detects_cycle() {
        let t = csv_table("a,b\n0,0\n1,1\n");
        let s = Structure { parent: vec![None, Some(0)], root: 0 };
        let mut bn = fit_cpds(&t, &s, 1.0).unwrap();
        bn.parent = vec![Some(1), Some(0)];
        assert!(index_topologically(bn).is_err());
    }

    #[test]
    fn prob_all_ones_is_one() {
        let t = csv_table("a,b\n0,0\n0,1\n1,0\n1,1\n");
        let bn = train(&t, 1.0).unwrap();
        let inds = vec![
            PredicateIndicator { column: "a".into(), mask: vec![1.0, 1.0] },
            PredicateIndicator { column: "b".into(), mask: vec![1.0, 1.0] },
        ];
        assert!((prob_conjunction(&bn, &inds).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prob_zero_mask_is_zero() {
        let t = csv_table("a,b\n0,0\n0,1\n1,0\n1,1\n");
        let bn = train(&t, 1.0).unwrap();
        let inds = vec![PredicateIndicator { column: "a".into(), mask: vec![0.0, 0.0] }];
        assert_eq!(prob_conjunction(&bn, &inds).unwrap(), 0.0);
    }

    #[test]
    fn prob_requires_index() {
        let t = csv_table("a,b\n0,0\n1,1\n");
        let s = learn_structure(&t).unwrap();
        let bn = fit_cpds(&t, &s, 1.0).unwrap();
        assert!(prob_conjunction(&bn, &[]).is_err());
    }

    #[test]
    fn prob_mask_length_mismatch_errors() {
        let t = csv_table("a,b\n0,0\n1,1\n");
        let bn = train(&t, 1.0).unwrap();
        let inds = vec![PredicateIndicator { column: "a".into(), mask: vec![1.0] }];
        assert!(prob_conjunction(&bn, &inds).is_err());
    }

    #[test]
    fn exact_on_tree_generated_data() {
        // cell counts factorize along the chain exactly, so an unsmoothed
        // fit over the recovered structure reproduces every scan count
        let spec = synth::ExactTreeSpec::chain("t", &[3, 4, 2, 3], 21);
        let table = spec.generate();
        let s = learn_structure(&table).unwrap();
        let mut edges: Vec<(usize, usize)> = s
            .parent
            .iter()
            .enumerate()
            .filter_map(|(n, p)| p.map(|p| (n.min(p), n.max(p))))
            .collect();
        edges.sort_unstable();
        assert_eq!(edges, vec![(0, 1), (1, 2), (2, 3)]);
        let bn = train(&table, 0.0).unwrap();
        // every conjunctive query over explicit codes matches the scan
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let ncols = rng.random_range(1..=4usize);
            let mut cols: Vec<usize> = (0..4).collect();
            for i in 0..ncols {
                let j = rng.random_range(i..4);
                cols.swap(i, j);
            }
            let cols = &cols[..ncols];
            let mut sql = format!("SELECT COUNT(*) FROM t WHERE ");
            for (k, &c) in cols.iter().enumerate() {
                if k > 0 {
                    sql.push_str(" AND ");
                }
                let code = rng.random_range(0..table.columns[c].domain_size);
                sql.push_str(&format!(
                    "{} = '{}'",
                    table.columns[c].name, table.columns[c].dictionary[code]
                ));
            }
            let q = parse(&sql).unwrap();
            let est = estimate_count(&bn, &q.predicate).unwrap();
            let truth =
                crate::query::compile_pred(&q.predicate, &table).unwrap().count(&table) as f64;
            assert!(
                (est - truth).abs() <= 1e-9 * truth.max(1.0),
                "{sql}: est {est} truth {truth}"
            );
        }
    }

    #[test]
    fn selectivity_inclusion_exclusion() {
        // uniform 4-code column
        let body = "x\n".to_string() + &"0\n1\n2\n3\n".repeat(50);
        let t = csv_table(&body);
        let bn = train(&t, 0.0).unwrap();
        let q = parse("SELECT COUNT(*) FROM t WHERE x = '0' OR x = '1'").unwrap();
        let sel = selectivity(&bn, &q.predicate).unwrap();
        assert!((sel - 0.5).abs() < 1e-12);
    }

    #[test]
    fn selectivity_tautology() {
        let body = "x\n".to_string()
            + &(0..100).map(|i| format!("{i}.0\n")).collect::<String>();
        let t = csv_table(&body);
        let bn = train(&t, 0.0).unwrap();
        let q = parse("SELECT COUNT(*) FROM t WHERE x <= 100 OR x > 0").unwrap();
        let sel = selectivity(&bn, &q.predicate).unwrap();
        assert!((sel - 1.0).abs() < 1e-9);
    }

    #[test]
    fn selectivity_two_term_consistency() {
        let spec = synth::TreeTableSpec::chain("t", &[4, 4, 4], 0.4);
        let table = spec.generate(2000, 17);
        let bn = train(&table, 0.0).unwrap();
        let qa = parse("SELECT COUNT(*) FROM t WHERE c0 = '1'").unwrap();
        let qb = parse("SELECT COUNT(*) FROM t WHERE c1 = '2'").unwrap();
        let qor = parse("SELECT COUNT(*) FROM t WHERE c0 = '1' OR c1 = '2'").unwrap();
        let qand = parse("SELECT COUNT(*) FROM t WHERE c0 = '1' AND c1 = '2'").unwrap();
        let (sa, sb) = (
            selectivity(&bn, &qa.predicate).unwrap(),
            selectivity(&bn, &qb.predicate).unwrap(),
        );
        let (sor, sand) = (
            selectivity(&bn, &qor.predicate).unwrap(),
            selectivity(&bn, &qand.predicate).unwrap(),
        );
        assert!((sor - (sa + sb - sand)).abs() < 1e-9);
    }

    #[test]
    fn count_empty_predicate_is_row_count() {
        let body = "x\n".to_string() + &"0\n1\n".repeat(2500);
        let t = csv_table(&body);
        let bn = train(&t, 1.0).unwrap();
        let q = parse("SELECT COUNT(*) FROM t").unwrap();
        assert!((estimate_count(&bn, &q.predicate).unwrap() - 5000.0).abs() < 1e-9);
    }

    #[test]
    fn count_contradiction_is_zero() {
        let t = csv_table("x\n0\n1\n");
        let bn = train(&t, 0.0).unwrap();
        let q = parse("SELECT COUNT(*) FROM t WHERE x = '0' AND x = '1'").unwrap();
        assert_eq!(estimate_count(&bn, &q.predicate).unwrap(), 0.0);
    }

    #[test]
    fn adding_conjunct_never_increases_probability() {
        let spec = synth::TreeTableSpec::chain("t", &[3, 3, 3, 3], 0.3);
        let table = spec.generate(500, 23);
        let bn = train(&table, 1.0).unwrap();
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let c1 = rng.random_range(0..4);
            let mut c2 = rng.random_range(0..4);
            while c2 == c1 {
                c2 = rng.random_range(0..4);
            }
            let v1 = rng.random_range(0..3);
            let v2 = rng.random_range(0..3);
            let q1 = parse(&format!("SELECT COUNT(*) FROM t WHERE c{c1} = '{v1}'")).unwrap();
            let q2 = parse(&format!(
                "SELECT COUNT(*) FROM t WHERE c{c1} = '{v1}' AND c{c2} = '{v2}'"
            ))
            .unwrap();
            let p1 = selectivity(&bn, &q1.predicate).unwrap();
            let p2 = selectivity(&bn, &q2.predicate).unwrap();
            assert!(p2 <= p1 + 1e-12);
        }
    }

    #[test]
    fn partition_counts_sum_to_row_count() {
        let spec = synth::TreeTableSpec::chain("t", &[5, 3], 0.4);
        let table = spec.generate(1234, 4);
        let bn = train(&table, 1.0).unwrap();
        let mut total = 0.0;
        for v in 0..5 {
            let q = parse(&format!("SELECT COUNT(*) FROM t WHERE c0 = '{v}'")).unwrap();
            total += estimate_count(&bn, &q.predicate).unwrap();
        }
        assert!((total - 1234.0).abs() < 1e-6 * 1234.0);
    }

    #[test]
    fn cpd_columns_sum_to_one() {
        let spec = synth::TreeTableSpec::chain("t", &[4, 6, 3], 0.25);
        let table = spec.generate(800, 12);
        for alpha in [0.0, 0.5, 1.0] {
            let bn = train(&table, alpha).unwrap();
            for cpd in &bn.cpds {
                match cpd {
                    Cpd::Root(v) => {
                        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6)
                    }
                    Cpd::Child(m) => {
                        for c in 0..m.cols {
                            assert!((m.col_sum(c) - 1.0).abs() < 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bucket_distribution_partitions_count() {
        // a key column named like a bucket column, ids 0..4
        let mut body = String::from("__bucket_0,f\n");
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            body.push_str(&format!(
                "{},{}\n",
                rng.random_range(0..4),
                rng.random_range(0..3)
            ));
        }
        let t = csv_table(&body);
        let bn = train(&t, 0.0).unwrap();
        let none = parse("SELECT COUNT(*) FROM t").unwrap();
        let d = bucket_distribution(&bn, "__bucket_0", &none.predicate).unwrap();
        assert_eq!(d.len(), 4);
        assert!((d.iter().sum::<f64>() - 500.0).abs() < 1e-6);

        let contradiction =
            parse("SELECT COUNT(*) FROM t WHERE f = '0' AND f = '1'").unwrap();
        let z = bucket_distribution(&bn, "__bucket_0", &contradiction.predicate).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        let filtered = parse("SELECT COUNT(*) FROM t WHERE f = '0'").unwrap();
        let fd = bucket_distribution(&bn, "__bucket_0", &filtered.predicate).unwrap();
        let total = estimate_count(&bn, &filtered.predicate).unwrap();
        assert!(fd.iter().sum::<f64>() <= total * (1.0 + 1e-6));
    }

    #[test]
    fn bucket_distribution_single_bucket() {
        let body = "__bucket_0,f\n".to_string() + &"0,1\n0,2\n0,1\n".repeat(10);
        let t = csv_table(&body);
        let bn = train(&t, 0.0).unwrap();
        let q = parse("SELECT COUNT(*) FROM t WHERE f = '1'").unwrap();
        let d = bucket_distribution(&bn, "__bucket_0", &q.predicate).unwrap();
        let est = estimate_count(&bn, &q.predicate).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0] - est).abs() < 1e-9);
    }
}
