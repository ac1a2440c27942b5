//! Join-size bound estimation over equi-height join buckets: bucket
//! construction, per-bucket statistics, factor-graph assembly for acyclic
//! join queries, and leaf-to-root bound inference that combines per-table
//! filtered bucket distributions with unfiltered max-multiplicity caps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bn::{self, TreeBayesNet};
use crate::error::{CardError, Result};
use crate::exec;
use crate::query::{Pred, PredLeaf, QuerySpec};
use crate::schema::{ColumnKind, ColumnMeta, JoinSchema, TableData};
use crate::util::UnionFind;

pub const DEFAULT_BUCKET_COUNT: usize = 200;

pub fn bucket_column_name(class: usize) -> String {
    format!("__bucket_{class}")
}

/// Equi-height buckets over the joint value domain of one key class.
/// Bucket b covers `(uppers[b-1], uppers[b]]` with `low` opening the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinBucketSpec {
    pub key_class: usize,
    pub low: i64,
    pub uppers: Vec<i64>,
}

impl JoinBucketSpec {
    pub fn bucket_count(&self) -> usize {
        self.uppers.len()
    }

    /// Bucket id for a key value; out-of-range values clamp to the nearest
    /// terminal bucket and report `true`.
    pub fn bucket_of(&self, v: i64) -> (usize, bool) {
        if v < self.low {
            return (0, true);
        }
        let idx = self.uppers.partition_point(|u| *u < v);
        if idx >= self.uppers.len() {
            (self.uppers.len() - 1, true)
        } else {
            (idx, false)
        }
    }
}

/// Per-table, per-class bucket statistics from an exact scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub table: String,
    pub key_class: usize,
    pub cnt: Vec<u64>,
    /// Max multiplicity of any single key value within the bucket; empty
    /// buckets carry 1.
    pub maxdeg: Vec<u64>,
    /// Key values that fell outside the spec's range (clamped, counted).
    pub out_of_range: u64,
}

/// Exact joint bucket counts of two key classes within one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    pub table: String,
    pub class_a: usize,
    pub class_b: usize,
    /// Row-major `[bucket_a][bucket_b]` counts.
    pub counts: Vec<Vec<u64>>,
}

/// Bipartite query graph: one variable per key class, one factor per table.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub classes: Vec<usize>,
    pub factors: Vec<FactorNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorNode {
    pub table: String,
    pub classes: Vec<usize>,
}

/// Equi-height boundaries over the multiset union of all member columns'
/// key values; duplicates collapse, so at most `b` buckets come back.
pub fn build_join_buckets(
    members: &[(&TableData, &str)],
    key_class: usize,
    b: usize,
) -> Result<JoinBucketSpec> {
    if b == 0 {
        return Err(CardError::Invalid("bucket count must be >= 1".into()));
    }
    let mut values: Vec<i64> = Vec::new();
    for (table, column) in members {
        let (idx, _) = table.column(column)?;
        for v in table.key_values(idx)?.into_iter().flatten() {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(CardError::Invalid("empty key value union".into()));
    }
    values.sort_unstable();
    let n = values.len();
    let mut uppers = Vec::with_capacity(b);
    for i in 1..=b {
        let rank = (i * n).div_ceil(b).min(n) - 1;
        let v = values[rank];
        if uppers.last() != Some(&v) {
            uppers.push(v);
        }
    }
    Ok(JoinBucketSpec { key_class, low: values[0], uppers })
}

/// Per-bucket row counts and max key multiplicity from an exact scan.
pub fn collect_bucket_stats(
    table: &TableData,
    key: &str,
    spec: &JoinBucketSpec,
) -> Result<BucketStats> {
    let (idx, _) = table.column(key)?;
    let b = spec.bucket_count();
    let mut cnt = vec![0u64; b];
    let mut out_of_range = 0u64;
    let mut per_value: BTreeMap<i64, u64> = BTreeMap::new();
    for v in table.key_values(idx)?.into_iter().flatten() {
        let (bucket, clamped) = spec.bucket_of(v);
        cnt[bucket] += 1;
        if clamped {
            out_of_range += 1;
        }
        *per_value.entry(v).or_insert(0) += 1;
    }
    let mut maxdeg = vec![1u64; b];
    for (v, m) in per_value {
        let (bucket, _) = spec.bucket_of(v);
        if m > maxdeg[bucket] {
            maxdeg[bucket] = m;
        }
    }
    Ok(BucketStats { table: table.name.clone(), key_class: spec.key_class, cnt, maxdeg, out_of_range })
}

/// Exact joint bucket counts for two keys of one table.
pub fn collect_pair_counts(
    table: &TableData,
    key_a: &str,
    spec_a: &JoinBucketSpec,
    key_b: &str,
    spec_b: &JoinBucketSpec,
) -> Result<PairCounts> {
    let (ia, _) = table.column(key_a)?;
    let (ib, _) = table.column(key_b)?;
    let va = table.key_values(ia)?;
    let vb = table.key_values(ib)?;
    let mut counts = vec![vec![0u64; spec_b.bucket_count()]; spec_a.bucket_count()];
    for (a, b) in va.into_iter().zip(vb) {
        if let (Some(a), Some(b)) = (a, b) {
            counts[spec_a.bucket_of(a).0][spec_b.bucket_of(b).0] += 1;
        }
    }
    Ok(PairCounts {
        table: table.name.clone(),
        class_a: spec_a.key_class,
        class_b: spec_b.key_class,
        counts,
    })
}

/// Append a Categorical `__bucket_<class>` column holding each row's bucket
/// id, so the table's network models filter-vs-key correlation. The
/// dictionary always covers all ids 0..B-1; missing keys encode as "".
pub fn attach_bucket_column(
    table: &TableData,
    key: &str,
    spec: &JoinBucketSpec,
) -> Result<TableData> {
    let (idx, _) = table.column(key)?;
    let keys = table.key_values(idx)?;
    let b = spec.bucket_count();
    let has_missing = keys.iter().any(Option::is_none);
    let mut dictionary: Vec<String> = (0..b).map(|i| i.to_string()).collect();
    if has_missing {
        dictionary.push(String::new());
    }
    dictionary.sort();
    let code_of_id: BTreeMap<&str, u32> =
        dictionary.iter().enumerate().map(|(c, d)| (d.as_str(), c as u32)).collect();
    let ids: Vec<String> = (0..b).map(|i| i.to_string()).collect();
    let codes: Vec<u32> = keys
        .iter()
        .map(|k| match k {
            Some(v) => code_of_id[ids[spec.bucket_of(*v).0].as_str()],
            None => code_of_id[""],
        })
        .collect();
    let meta = ColumnMeta {
        name: bucket_column_name(spec.key_class),
        kind: ColumnKind::Categorical,
        domain_size: dictionary.len(),
        bin_edges: Vec::new(),
        dictionary,
        lo: 0.0,
        hi: 0.0,
        missing_code: None,
    };
    table.with_extra_column(meta, codes)
}

/// Chow-Liu tree over a table's bucket-id columns; with two keys the exact
/// 2D joint is retained, with more the joint factors into per-edge
/// conditionals.
pub fn reduce_key_dimensions(table: &TableData, keys: &[&str]) -> Result<TreeBayesNet> {
    if keys.len() < 2 {
        return Err(CardError::Invalid("dimension reduction needs at least two keys".into()));
    }
    let projected = table.project_named(keys)?;
    bn::train(&projected, 0.0)
}

/// Assemble the query's factor graph and reject cyclic or disconnected
/// (cross-product) topologies.
pub fn build_factor_graph(query: &QuerySpec, schema: &JoinSchema) -> Result<FactorGraph> {
    if query.tables.len() < 2 {
        return Err(CardError::Invalid("join estimation requires at least two tables".into()));
    }
    let mut table_classes: BTreeMap<String, Vec<usize>> =
        query.tables.iter().map(|t| (t.clone(), Vec::new())).collect();
    let mut classes: Vec<usize> = Vec::new();
    for join in &query.joins {
        let cl = schema
            .class_of(&join.left.0, &join.left.1)
            .ok_or_else(|| CardError::Invalid(format!(
                "join {}.{} not in collected schema",
                join.left.0, join.left.1
            )))?;
        let cr = schema.class_of(&join.right.0, &join.right.1);
        if cr != Some(cl) {
            return Err(CardError::Invalid(format!(
                "join {}.{} = {}.{} spans two key classes",
                join.left.0, join.left.1, join.right.0, join.right.1
            )));
        }
        for (t, _) in [&join.left, &join.right] {
            let list = table_classes.get_mut(t).ok_or_else(|| {
                CardError::Invalid(format!("joined table {t} not in FROM list"))
            })?;
            if !list.contains(&cl) {
                list.push(cl);
            }
        }
        if !classes.contains(&cl) {
            classes.push(cl);
        }
    }
    classes.sort_unstable();
    let factors: Vec<FactorNode> = table_classes
        .into_iter()
        .map(|(table, mut cls)| {
            cls.sort_unstable();
            FactorNode { table, classes: cls }
        })
        .collect();
    if let Some(f) = factors.iter().find(|f| f.classes.is_empty()) {
        return Err(CardError::Invalid(format!(
            "table {} has no join condition (cross products unsupported)",
            f.table
        )));
    }

    // Tree check over the bipartite (class + factor) node set.
    let nclasses = classes.len();
    let nodes = nclasses + factors.len();
    let mut uf = UnionFind::new(nodes);
    let mut edges = 0usize;
    let mut components = nodes;
    for (fi, f) in factors.iter().enumerate() {
        for c in &f.classes {
            let ci = classes.binary_search(c).expect("class interned");
            edges += 1;
            if uf.union(ci, nclasses + fi) {
                components -= 1;
            }
        }
    }
    if components != 1 {
        return Err(CardError::Invalid("join graph is disconnected".into()));
    }
    if edges != nodes - 1 {
        return Err(CardError::Invalid("cyclic join unsupported".into()));
    }
    Ok(FactorGraph { classes, factors })
}

/// Everything the bound inference needs, keyed per table and key class.
pub struct JoinContext<'a> {
    pub schema: &'a JoinSchema,
    pub specs: &'a BTreeMap<usize, JoinBucketSpec>,
    pub stats: &'a BTreeMap<(String, usize), BucketStats>,
    pub pairs: &'a BTreeMap<(String, usize, usize), PairCounts>,
    /// Networks trained with bucket columns attached; required only for
    /// filtered tables.
    pub bns: &'a BTreeMap<String, TreeBayesNet>,
}

impl<'a> JoinContext<'a> {
    fn stats_for(&self, table: &str, class: usize) -> Result<&BucketStats> {
        self.stats.get(&(table.to_string(), class)).ok_or_else(|| {
            CardError::Invalid(format!("missing bucket stats for {table} on class {class}"))
        })
    }

    fn bn_for(&self, table: &str) -> Result<&TreeBayesNet> {
        self.bns
            .get(table)
            .ok_or_else(|| CardError::Invalid(format!("missing model for filtered table {table}")))
    }
}

/// Upper-bound join-size estimate over the tree-shaped factor graph.
///
/// Single key class, tables `T_1..T_n`:
/// `sum_b min_i [ c_i(b) * prod_{j != i} maxdeg_j(b) ]` where `c_i` is the
/// filtered bucket distribution (exact scan counts when unfiltered).
/// Multi-class queries eliminate leaf variables first; each elimination
/// folds a subtree through its connecting table's pairwise bucket joint,
/// keeping per-(bucket,bucket) bounds so the result stays a bound whenever
/// the inputs are exact.
pub fn estimate_join_size(query: &QuerySpec, ctx: &JoinContext) -> Result<f64> {
    let graph = build_factor_graph(query, ctx.schema)?;
    let filters = per_table_filters(query, ctx, &graph)?;
    let eval = Evaluator { ctx, graph: &graph, filters };
    let root = graph.classes[0];
    eval.eliminate_root(root)
}

fn per_table_filters<'q>(
    query: &'q QuerySpec,
    ctx: &JoinContext,
    graph: &FactorGraph,
) -> Result<BTreeMap<String, Vec<PredLeaf>>> {
    let mut filters = BTreeMap::new();
    for f in &graph.factors {
        let leaves = match ctx.bns.get(&f.table) {
            Some(bn) => query.leaves_for(&f.table, |col| bn.node_of(col).is_some())?,
            None => query.leaves_for(&f.table, |_| false)?,
        };
        filters.insert(f.table.clone(), leaves);
    }
    Ok(filters)
}

struct Evaluator<'a> {
    ctx: &'a JoinContext<'a>,
    graph: &'a FactorGraph,
    filters: BTreeMap<String, Vec<PredLeaf>>,
}

impl<'a> Evaluator<'a> {
    fn incident_factors(&self, class: usize) -> Vec<usize> {
        (0..self.graph.factors.len())
            .filter(|&i| self.graph.factors[i].classes.contains(&class))
            .collect()
    }

    fn bucket_count(&self, class: usize) -> Result<usize> {
        Ok(self
            .ctx
            .specs
            .get(&class)
            .ok_or_else(|| CardError::Invalid(format!("missing bucket spec for class {class}")))?
            .bucket_count())
    }

    fn eliminate_root(&self, root: usize) -> Result<f64> {
        let branches = self.branch_messages(root, None)?;
        let b = self.bucket_count(root)?;
        let mut total = 0.0;
        for bucket in 0..b {
            total += min_combination(&branches, bucket);
        }
        Ok(total.max(0.0))
    }

    /// (U, D) over `class`'s buckets for the subtree hanging below it,
    /// excluding `parent_factor`.
    fn eliminate_var(
        &self,
        class: usize,
        parent_factor: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let branches = self.branch_messages(class, Some(parent_factor))?;
        let b = self.bucket_count(class)?;
        let mut upper = vec![0.0; b];
        let mut degree = vec![1.0; b];
        for bucket in 0..b {
            upper[bucket] = min_combination(&branches, bucket);
            degree[bucket] = branches.iter().map(|(_, d)| d[bucket]).product();
        }
        Ok((upper, degree))
    }

    fn branch_messages(
        &self,
        class: usize,
        parent_factor: Option<usize>,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut out = Vec::new();
        for fi in self.incident_factors(class) {
            if Some(fi) == parent_factor {
                continue;
            }
            out.push(self.factor_message(fi, class)?);
        }
        if out.is_empty() {
            return Err(CardError::Invalid("dangling key class in factor graph".into()));
        }
        Ok(out)
    }

    /// (count, maxdeg) vectors a factor sends up to `up_class`.
    fn factor_message(&self, fi: usize, up_class: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let factor = &self.graph.factors[fi];
        let table = &factor.table;
        let down: Vec<usize> =
            factor.classes.iter().copied().filter(|c| *c != up_class).collect();
        let up_stats = self.ctx.stats_for(table, up_class)?;
        let up_maxdeg: Vec<f64> = up_stats.maxdeg.iter().map(|&d| d as f64).collect();

        match down.len() {
            0 => Ok((self.filtered_counts(table, up_class)?, up_maxdeg)),
            1 => {
                let v = down[0];
                let (sub_upper, sub_degree) = self.eliminate_var(v, fi)?;
                let joint = self.joint_counts(table, v, up_class)?;
                let v_maxdeg: Vec<f64> =
                    self.ctx.stats_for(table, v)?.maxdeg.iter().map(|&d| d as f64).collect();
                let bv = sub_upper.len();
                let bu = up_maxdeg.len();
                let mut count = vec![0.0; bu];
                let mut degree = vec![1.0; bu];
                for c in 0..bu {
                    let mut acc = 0.0;
                    let mut dmax = 0.0f64;
                    for b in 0..bv {
                        let j = joint[b][c];
                        if j <= 0.0 {
                            continue;
                        }
                        let via_table = j * sub_degree[b];
                        let via_subtree = sub_upper[b] * v_maxdeg[b].min(j);
                        acc += via_table.min(via_subtree);
                        dmax = dmax.max(sub_degree[b]);
                    }
                    count[c] = acc;
                    degree[c] = up_maxdeg[c] * dmax.max(1.0);
                }
                Ok((count, degree))
            }
            _ => Err(CardError::Invalid(format!(
                "table {table} joins on more than two key classes in one query; unsupported"
            ))),
        }
    }

    /// Per-bucket counts of a table on one class: exact scan counts when the
    /// table carries no filter, else the network's filtered distribution.
    fn filtered_counts(&self, table: &str, class: usize) -> Result<Vec<f64>> {
        let leaves = &self.filters[table];
        if leaves.is_empty() {
            let stats = self.ctx.stats_for(table, class)?;
            return Ok(stats.cnt.iter().map(|&c| c as f64).collect());
        }
        let bn = self.ctx.bn_for(table)?;
        let pred = leaves_pred(leaves);
        bn::bucket_distribution(bn, &bucket_column_name(class), &pred)
    }

    /// Joint bucket counts over (class_v, class_up): exact pair counts when
    /// unfiltered, else conditional distributions from the table's network.
    fn joint_counts(&self, table: &str, class_v: usize, class_up: usize) -> Result<Vec<Vec<f64>>> {
        let leaves = &self.filters[table];
        if leaves.is_empty() {
            let (lo, hi) = (class_v.min(class_up), class_v.max(class_up));
            let pair = self
                .ctx
                .pairs
                .get(&(table.to_string(), lo, hi))
                .ok_or_else(|| {
                    CardError::Invalid(format!(
                        "missing pair counts for {table} on classes {lo},{hi}"
                    ))
                })?;
            let transpose = pair.class_a != class_v;
            let (bv, bu) = if transpose {
                (pair.counts.first().map_or(0, Vec::len), pair.counts.len())
            } else {
                (pair.counts.len(), pair.counts.first().map_or(0, Vec::len))
            };
            let mut out = vec![vec![0.0; bu]; bv];
            for (a, row) in pair.counts.iter().enumerate() {
                for (b, &c) in row.iter().enumerate() {
                    if transpose {
                        out[b][a] = c as f64;
                    } else {
                        out[a][b] = c as f64;
                    }
                }
            }
            return Ok(out);
        }
        let bn = self.ctx.bn_for(table)?;
        let bv = self.bucket_count(class_v)?;
        let v_col = bucket_column_name(class_v);
        let up_col = bucket_column_name(class_up);
        let rows = exec::map_indexed(bv, |b| {
            let mut leaves_b: Vec<PredLeaf> = self.filters[table].clone();
            leaves_b.push(bucket_pin_leaf(&v_col, b));
            bn::bucket_distribution(bn, &up_col, &leaves_pred(&leaves_b))
        });
        rows.into_iter().collect()
    }
}

fn min_combination(branches: &[(Vec<f64>, Vec<f64>)], bucket: usize) -> f64 {
    let mut best = f64::INFINITY;
    for (i, (count, _)) in branches.iter().enumerate() {
        let mut bound = count[bucket];
        for (j, (_, degree)) in branches.iter().enumerate() {
            if j != i {
                bound *= degree[bucket];
            }
        }
        best = best.min(bound);
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

fn leaves_pred(leaves: &[PredLeaf]) -> Pred {
    match leaves.len() {
        0 => Pred::True,
        1 => Pred::Leaf(leaves[0].clone()),
        _ => Pred::And(leaves.iter().cloned().map(Pred::Leaf).collect()),
    }
}

fn bucket_pin_leaf(column: &str, bucket: usize) -> PredLeaf {
    PredLeaf {
        col: crate::query::ColRef { table: None, column: column.to_string() },
        op: crate::query::CmpOp::Eq,
        args: vec![crate::query::Literal::Text(bucket.to_string())],
        negated: false,
    }
}

/// Merge adjacent buckets pairwise; counts add, max degrees take the max.
/// Supports the monotone-refinement property test.
pub fn coarsen_spec(spec: &JoinBucketSpec) -> JoinBucketSpec {
    let uppers: Vec<i64> = spec
        .uppers
        .chunks(2)
        .map(|pair| *pair.last().unwrap())
        .collect();
    JoinBucketSpec { key_class: spec.key_class, low: spec.low, uppers }
}

pub fn coarsen_stats(stats: &BucketStats) -> BucketStats {
    let fold = |v: &[u64], f: fn(u64, u64) -> u64, empty: u64| -> Vec<u64> {
        v.chunks(2).map(|pair| pair.iter().copied().fold(empty, f)).collect()
    };
    BucketStats {
        table: stats.table.clone(),
        key_class: stats.key_class,
        cnt: fold(&stats.cnt, |a, b| a + b, 0),
        maxdeg: fold(&stats.maxdeg, u64::max, 1),
        out_of_range: stats.out_of_range,
    }
}

pub fn coarsen_pairs(pairs: &PairCounts) -> PairCounts {
    let counts: Vec<Vec<u64>> = pairs
        .counts
        .chunks(2)
        .map(|rows| {
            let width = rows[0].len();
            let mut merged_row: Vec<u64> = vec![0; width];
            for row in rows {
                for (m, &c) in merged_row.iter_mut().zip(row) {
                    *m += c;
                }
            }
            merged_row.chunks(2).map(|p| p.iter().sum()).collect()
        })
        .collect();
    PairCounts {
        table: pairs.table.clone(),
        class_a: pairs.class_a,
        class_b: pairs.class_b,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::parse;
    use crate::schema::{collect_join_schema, load_csv_reader};

    fn csv_table(name: &str, body: &str) -> TableData {
        load_csv_reader(body.as_bytes(), name, &std::collections::BTreeMap::new()).unwrap()
    }

    #[test]
    fn buckets_distinct_keys_are_singletons() {
        let body = "k\n".to_string()
            + &(1..=200).map(|i| format!("{i}\n")).collect::<String>();
        let t = csv_table("A", &body);
        let spec = build_join_buckets(&[(&t, "k")], 0, 200).unwrap();
        assert_eq!(spec.bucket_count(), 200);
        assert_eq!(spec.uppers, (1..=200).collect::<Vec<i64>>());
    }

    #[test]
    fn buckets_collapse_on_equal_keys() {
        let body = "k\n".to_string() + &"7\n".repeat(50);
        let t = csv_table("A", &body);
        let spec = build_join_buckets(&[(&t, "k")], 0, 8).unwrap();
        assert_eq!(spec.bucket_count(), 1);
    }

    #[test]
    fn buckets_split_union_evenly() {
        // two tables with disjoint ranges, 100 values each
        let a = csv_table(
            "A",
            &("k\n".to_string() + &(0..100).map(|i| format!("{i}\n")).collect::<String>()),
        );
        let b = csv_table(
            "B",
            &("k\n".to_string() + &(1000..1100).map(|i| format!("{i}\n")).collect::<String>()),
        );
        let spec = build_join_buckets(&[(&a, "k"), (&b, "k")], 0, 4).unwrap();
        assert_eq!(spec.bucket_count(), 4);
        let stats_a = collect_bucket_stats(&a, "k", &spec).unwrap();
        let stats_b = collect_bucket_stats(&b, "k", &spec).unwrap();
        let mut mass = vec![0u64; 4];
        for i in 0..4 {
            mass[i] = stats_a.cnt[i] + stats_b.cnt[i];
        }
        assert_eq!(mass.iter().sum::<u64>(), 200);
        assert!(mass.iter().all(|&m| m == 50), "{mass:?}");
    }

    #[test]
    fn bucket_stats_unique_keys_have_maxdeg_one() {
        let body = "k\n".to_string()
            + &(1..=100).map(|i| format!("{i}\n")).collect::<String>();
        let t = csv_table("A", &body);
        let spec = build_join_buckets(&[(&t, "k")], 0, 10).unwrap();
        let stats = collect_bucket_stats(&t, "k", &spec).unwrap();
        assert!(stats.maxdeg.iter().all(|&d| d == 1));
        assert_eq!(stats.cnt.iter().sum::<u64>(), 100);
    }

    #[test]
    fn bucket_stats_repeated_value() {
        let body = "k\n".to_string() + &"3\n".repeat(7);
        let t = csv_table("A", &body);
        let spec = build_join_buckets(&[(&t, "k")], 0, 4).unwrap();
        let stats = collect_bucket_stats(&t, "k", &spec).unwrap();
        assert_eq!(stats.cnt, vec![7]);
        assert_eq!(stats.maxdeg, vec![7]);
    }

    #[test]
    fn bucket_stats_match_brute_force() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let mut body = String::from("k\n");
        let values: Vec<i64> = (0..500).map(|_| rng.random_range(0..80)).collect();
        for v in &values {
            body.push_str(&format!("{v}\n"));
        }
        let t = csv_table("A", &body);
        let spec = build_join_buckets(&[(&t, "k")], 0, 16).unwrap();
        let stats = collect_bucket_stats(&t, "k", &spec).unwrap();
        for b in 0..spec.bucket_count() {
            let in_bucket: Vec<i64> =
                values.iter().copied().filter(|&v| spec.bucket_of(v).0 == b).collect();
            assert_eq!(stats.cnt[b], in_bucket.len() as u64, "bucket {b}");
            let mut mult: BTreeMap<i64, u64> = BTreeMap::new();
            for v in in_bucket {
                *mult.entry(v).or_insert(0) += 1;
            }
            let brute = mult.values().copied().max().unwrap_or(1).max(1);
            assert_eq!(stats.maxdeg[b], brute, "bucket {b}");
        }
    }

    #[test]
    fn bucket_stats_clamp_out_of_range() {
        let t1 = csv_table("A", "k\n10\n11\n12\n");
        let spec = build_join_buckets(&[(&t1, "k")], 0, 4).unwrap();
        let t2 = csv_table("B", "k\n5\n11\n99\n");
        let stats = collect_bucket_stats(&t2, "k", &spec).unwrap();
        assert_eq!(stats.out_of_range, 2);
        assert_eq!(stats.cnt.iter().sum::<u64>(), 3);
    }

    #[test]
    fn attached_column_matches_mapping() {
        let t = csv_table("A", "k,f\n1,a\n5,b\n9,a\n5,b\n");
        let spec = build_join_buckets(&[(&t, "k")], 0, 3).unwrap();
        let with = attach_bucket_column(&t, "k", &spec).unwrap();
        let col = with.column(&bucket_column_name(0)).unwrap().0;
        let keys = t.key_values(0).unwrap();
        for row in 0..t.row_count {
            let want = spec.bucket_of(keys[row].unwrap()).0.to_string();
            assert_eq!(with.decode(col, row), want);
        }
        // histogram of attached column equals cnt
        let stats = collect_bucket_stats(&t, "k", &spec).unwrap();
        let meta = &with.columns[col];
        let mut hist = vec![0u64; spec.bucket_count()];
        for row in 0..with.row_count {
            let id: usize = with.decode(col, row).parse().unwrap();
            hist[id] += 1;
        }
        let _ = meta;
        assert_eq!(hist, stats.cnt);
    }

    #[test]
    fn attached_column_constant_key() {
        let t = csv_table("A", "k\n4\n4\n4\n");
        let spec = build_join_buckets(&[(&t, "k")], 0, 5).unwrap();
        let with = attach_bucket_column(&t, "k", &spec).unwrap();
        let col = with.column(&bucket_column_name(0)).unwrap().0;
        for row in 0..3 {
            assert_eq!(with.decode(col, row), "0");
        }
    }

    #[test]
    fn reduce_two_keys_exact_joint() {
        // balanced construction: every key value appears 100 times, so the
        // equi-height buckets are exactly the key values
        let mut body = String::from("k1,k2\n");
        let mut joint = vec![vec![0u64; 4]; 4];
        for i in 0..400usize {
            let a = i % 4;
            let b = (a + (i / 4) % 2) % 4;
            joint[a][b] += 1;
            body.push_str(&format!("{a},{b}\n"));
        }
        let t = csv_table("F", &body);
        let sa = build_join_buckets(&[(&t, "k1")], 0, 4).unwrap();
        let sb = build_join_buckets(&[(&t, "k2")], 1, 4).unwrap();
        let with = attach_bucket_column(
            &attach_bucket_column(&t, "k1", &sa).unwrap(),
            "k2",
            &sb,
        )
        .unwrap();
        let tree =
            reduce_key_dimensions(&with, &[&bucket_column_name(0), &bucket_column_name(1)])
                .unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let q = parse(&format!(
                    "SELECT COUNT(*) FROM F WHERE __bucket_0 = '{a}' AND __bucket_1 = '{b}'"
                ))
                .unwrap();
                let est = bn::estimate_count(&tree, &q.predicate).unwrap();
                assert!(
                    (est - joint[a][b] as f64).abs() < 1e-9 * (joint[a][b] as f64).max(1.0),
                    "cell ({a},{b}): est {est}, truth {}",
                    joint[a][b]
                );
            }
        }
    }

    #[test]
    fn reduce_three_independent_keys_keeps_marginals() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let mut body = String::from("k1,k2,k3\n");
        for _ in 0..10_000 {
            body.push_str(&format!(
                "{},{},{}\n",
                rng.random_range(0..5),
                rng.random_range(0..5),
                rng.random_range(0..5)
            ));
        }
        let t = csv_table("F", &body);
        let mut with = t.clone();
        for (i, k) in ["k1", "k2", "k3"].iter().enumerate() {
            let spec = build_join_buckets(&[(&t, k)], i, 5).unwrap();
            with = attach_bucket_column(&with, k, &spec).unwrap();
        }
        let cols: Vec<String> = (0..3).map(bucket_column_name).collect();
        let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let tree = reduce_key_dimensions(&with, &refs).unwrap();
        let marginals = tree.node_marginals().unwrap();
        for (node, col) in cols.iter().enumerate() {
            let (idx, meta) = with.column(col).unwrap();
            let mut emp = vec![0.0; meta.domain_size];
            for &c in with.codes(idx) {
                emp[c as usize] += 1.0 / with.row_count as f64;
            }
            let learned = &marginals[tree.node_of(col).unwrap()];
            for v in 0..meta.domain_size {
                assert!(
                    (learned[v] - emp[v]).abs() < 0.05,
                    "node {node} value {v}: {} vs {}",
                    learned[v],
                    emp[v]
                );
            }
        }
    }

    #[test]
    fn reduce_functional_keys_is_star_and_exact() {
        let mut body = String::from("k1,k2,k3\n");
        for _ in 0..20 {
            for v in 0..5 {
                body.push_str(&format!("{},{},{}\n", v, (v + 1) % 5, (v + 2) % 5));
            }
        }
        let t = csv_table("F", &body);
        let mut with = t.clone();
        for (i, k) in ["k1", "k2", "k3"].iter().enumerate() {
            let spec = build_join_buckets(&[(&t, k)], i, 5).unwrap();
            with = attach_bucket_column(&with, k, &spec).unwrap();
        }
        let cols: Vec<String> = (0..3).map(bucket_column_name).collect();
        let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let tree = reduce_key_dimensions(&with, &refs).unwrap();
        // deterministic star under the tie-break
        assert_eq!(tree.root, 0);
        assert_eq!(tree.parent, vec![None, Some(0), Some(0)]);
        // tree joint equals empirical joint on deterministic data
        for v in 0..5 {
            let q = parse(&format!(
                "SELECT COUNT(*) FROM F WHERE __bucket_0 = '{}' AND __bucket_1 = '{}' AND __bucket_2 = '{}'",
                v,
                (v + 1) % 5,
                (v + 2) % 5
            ))
            .unwrap();
            let est = bn::estimate_count(&tree, &q.predicate).unwrap();
            assert!((est - 20.0).abs() < 1e-9 * 20.0);
        }
    }

    #[test]
    fn reduce_requires_two_keys() {
        let t = csv_table("F", "k\n1\n");
        assert!(reduce_key_dimensions(&t, &["k"]).is_err());
    }

    fn schema_for(queries: &[&str], tables: &[&TableData]) -> JoinSchema {
        let parsed: Vec<QuerySpec> = queries.iter().map(|q| parse(q).unwrap()).collect();
        collect_join_schema(&parsed, tables).unwrap()
    }

    #[test]
    fn factor_graph_two_tables() {
        let a = csv_table("A", "x\n1\n");
        let b = csv_table("B", "y\n1\n");
        let sql = "SELECT COUNT(*) FROM A, B WHERE A.x = B.y";
        let schema = schema_for(&[sql], &[&a, &b]);
        let graph = build_factor_graph(&parse(sql).unwrap(), &schema).unwrap();
        assert_eq!(graph.classes.len(), 1);
        assert_eq!(graph.factors.len(), 2);
    }

    #[test]
    fn factor_graph_star() {
        let f = csv_table("F", "k1,k2\n1,1\n");
        let d1 = csv_table("D1", "k\n1\n");
        let d2 = csv_table("D2", "k\n1\n");
        let sql = "SELECT COUNT(*) FROM F, D1, D2 WHERE F.k1 = D1.k AND F.k2 = D2.k";
        let schema = schema_for(&[sql], &[&f, &d1, &d2]);
        let graph = build_factor_graph(&parse(sql).unwrap(), &schema).unwrap();
        assert_eq!(graph.classes.len(), 2);
        assert_eq!(graph.factors.len(), 3);
    }

    #[test]
    fn factor_graph_rejects_triangle() {
        let a = csv_table("A", "x,y\n1,1\n");
        let b = csv_table("B", "x,z\n1,1\n");
        let c = csv_table("C", "y,z\n1,1\n");
        let sql =
            "SELECT COUNT(*) FROM A, B, C WHERE A.x = B.x AND A.y = C.y AND B.z = C.z";
        let schema = schema_for(&[sql], &[&a, &b, &c]);
        let err = build_factor_graph(&parse(sql).unwrap(), &schema).unwrap_err();
        assert!(err.to_string().contains("cyclic join unsupported"));
    }

    /// Exact PK-FK join with one bucket per key value reproduces the truth.
    #[test]
    fn pk_fk_exact_when_buckets_are_singletons() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let pk_body = "k\n".to_string()
            + &(0..50).map(|i| format!("{i}\n")).collect::<String>();
        let mut fk_body = String::from("k\n");
        let mut truth = 0u64;
        let mut fk_count = vec![0u64; 50];
        for _ in 0..400 {
            let k = rng.random_range(0..50usize);
            fk_count[k] += 1;
            fk_body.push_str(&format!("{k}\n"));
        }
        for &c in &fk_count {
            truth += c;
        }
        let pk = csv_table("P", &pk_body);
        let fk = csv_table("F", &fk_body);
        let sql = "SELECT COUNT(*) FROM P, F WHERE P.k = F.k";
        let schema = schema_for(&[sql], &[&pk, &fk]);
        let spec = build_join_buckets(&[(&pk, "k"), (&fk, "k")], 0, 64).unwrap();
        let mut specs = BTreeMap::new();
        specs.insert(0, spec.clone());
        let mut stats = BTreeMap::new();
        stats.insert(("P".to_string(), 0), collect_bucket_stats(&pk, "k", &spec).unwrap());
        stats.insert(("F".to_string(), 0), collect_bucket_stats(&fk, "k", &spec).unwrap());
        let pairs = BTreeMap::new();
        let bns = BTreeMap::new();
        let ctx = JoinContext { schema: &schema, specs: &specs, stats: &stats, pairs: &pairs, bns: &bns };
        let est = estimate_join_size(&parse(sql).unwrap(), &ctx).unwrap();
        assert!((est - truth as f64).abs() < 1e-9, "est {est} truth {truth}");
    }

    #[test]
    fn single_bucket_degenerates_to_whole_table_formula() {
        let a = csv_table("A", "k\n1\n1\n2\n");
        let b = csv_table("B", "k\n1\n2\n2\n2\n");
        let sql = "SELECT COUNT(*) FROM A, B WHERE A.k = B.k";
        let schema = schema_for(&[sql], &[&a, &b]);
        let spec = build_join_buckets(&[(&a, "k"), (&b, "k")], 0, 1).unwrap();
        let mut specs = BTreeMap::new();
        specs.insert(0, spec.clone());
        let mut stats = BTreeMap::new();
        let sa = collect_bucket_stats(&a, "k", &spec).unwrap();
        let sb = collect_bucket_stats(&b, "k", &spec).unwrap();
        stats.insert(("A".to_string(), 0), sa.clone());
        stats.insert(("B".to_string(), 0), sb.clone());
        let pairs = BTreeMap::new();
        let bns = BTreeMap::new();
        let ctx = JoinContext { schema: &schema, specs: &specs, stats: &stats, pairs: &pairs, bns: &bns };
        let est = estimate_join_size(&parse(sql).unwrap(), &ctx).unwrap();
        let want =
            (sa.cnt[0] as f64 * sb.maxdeg[0] as f64).min(sb.cnt[0] as f64 * sa.maxdeg[0] as f64);
        assert_eq!(est, want);
    }

    #[test]
    fn zero_count_vector_forces_zero() {
        let a = csv_table("A", "k,f\n1,x\n2,x\n");
        let b = csv_table("B", "k\n1\n2\n");
        let sql = "SELECT COUNT(*) FROM A, B WHERE A.k = B.k AND A.f = 'zzz'";
        let schema = schema_for(&["SELECT COUNT(*) FROM A, B WHERE A.k = B.k"], &[&a, &b]);
        let spec = build_join_buckets(&[(&a, "k"), (&b, "k")], 0, 4).unwrap();
        let mut specs = BTreeMap::new();
        specs.insert(0, spec.clone());
        let mut stats = BTreeMap::new();
        stats.insert(("A".to_string(), 0), collect_bucket_stats(&a, "k", &spec).unwrap());
        stats.insert(("B".to_string(), 0), collect_bucket_stats(&b, "k", &spec).unwrap());
        let a_bucketed = attach_bucket_column(&a, "k", &spec).unwrap();
        let mut bns = BTreeMap::new();
        bns.insert("A".to_string(), bn::train(&a_bucketed, 0.0).unwrap());
        let pairs = BTreeMap::new();
        let ctx = JoinContext { schema: &schema, specs: &specs, stats: &stats, pairs: &pairs, bns: &bns };
        let est = estimate_join_size(&parse(sql).unwrap(), &ctx).unwrap();
        assert_eq!(est, 0.0);
    }
}
