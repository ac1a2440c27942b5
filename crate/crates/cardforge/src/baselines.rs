//! Traditional estimators and exact oracles: histogram selectivity under
//! attribute-value independence, the classical uniform join estimator,
//! sample scaling, the GEE distinct-value estimator, and brute-force truth.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CardError, Result};
use crate::exec;
use crate::ndv::FrequencyProfile;
use crate::query::{compile_table_filter, leaf_mask, Pred, QuerySpec};
use crate::schema::{ColumnMeta, TableData};

/// Per-column value histograms over the encoded domain, built at ingest.
/// For continuous columns the encoding is already equi-height, so bin
/// populations are near-uniform by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub table: String,
    pub row_count: usize,
    pub schema_digest: String,
    pub columns: Vec<ColumnMeta>,
    /// counts[i][code] = rows of column i holding that code
    pub counts: Vec<Vec<u64>>,
    /// Exact distinct counts per column (missing excluded).
    pub ndv: Vec<u64>,
}

pub fn build_table_stats(table: &TableData) -> TableStats {
    let mut counts = Vec::with_capacity(table.columns.len());
    let mut ndv = Vec::with_capacity(table.columns.len());
    for (i, meta) in table.columns.iter().enumerate() {
        let mut c = vec![0u64; meta.domain_size];
        for &code in table.codes(i) {
            c[code as usize] += 1;
        }
        counts.push(c);
        let mut distinct = std::collections::HashSet::new();
        for row in 0..table.row_count {
            if let Some(k) = table.distinct_key(i, row) {
                distinct.insert(k);
            }
        }
        ndv.push(distinct.len() as u64);
    }
    TableStats {
        table: table.name.clone(),
        row_count: table.row_count,
        schema_digest: table.schema_digest(),
        columns: table.columns.clone(),
        counts: counts.clone(),
        ndv,
    }
}

impl TableStats {
    pub fn column_ndv(&self, column: &str) -> Result<u64> {
        let i = self
            .columns
            .iter()
            .position(|c| c.name == column)
            .ok_or_else(|| CardError::UnknownColumn {
                table: self.table.clone(),
                column: column.to_string(),
            })?;
        Ok(self.ndv[i])
    }
}

/// Selectivity under attribute-value independence: per-leaf selectivity from
/// the column histogram; AND multiplies, OR applies inclusion-exclusion
/// under independence, NOT complements.
pub fn histogram_selectivity(stats: &TableStats, pred: &Pred) -> Result<f64> {
    let sel = match pred {
        Pred::True => 1.0,
        Pred::Leaf(leaf) => {
            let i = stats
                .columns
                .iter()
                .position(|c| c.name == leaf.col.column)
                .ok_or_else(|| CardError::UnknownColumn {
                    table: stats.table.clone(),
                    column: leaf.col.column.clone(),
                })?;
            let mask = leaf_mask(leaf, &stats.columns[i])?;
            let total: u64 = stats.counts[i].iter().sum();
            if total == 0 {
                0.0
            } else {
                mask.iter()
                    .zip(&stats.counts[i])
                    .map(|(m, &c)| m * c as f64)
                    .sum::<f64>()
                    / total as f64
            }
        }
        Pred::And(children) => {
            let mut s = 1.0;
            for c in children {
                s *= histogram_selectivity(stats, c)?;
            }
            s
        }
        Pred::Or(children) => {
            let mut none = 1.0;
            for c in children {
                none *= 1.0 - histogram_selectivity(stats, c)?;
            }
            1.0 - none
        }
        Pred::Not(inner) => 1.0 - histogram_selectivity(stats, inner)?,
    };
    Ok(sel.clamp(0.0, 1.0))
}

/// Classical uniformity estimator |A|*|B| / max(ndv_A, ndv_B), composed
/// pairwise along the query's join list. `filtered_rows` scales each
/// table's row count by its filter selectivity first.
pub fn histogram_join_size(
    query: &QuerySpec,
    stats: &HashMap<String, TableStats>,
    filtered_rows: &HashMap<String, f64>,
) -> Result<f64> {
    if query.joins.is_empty() {
        return Err(CardError::Invalid("query has no join conditions".into()));
    }
    let rows = |t: &str| -> Result<f64> {
        filtered_rows
            .get(t)
            .copied()
            .or_else(|| stats.get(t).map(|s| s.row_count as f64))
            .ok_or_else(|| CardError::Invalid(format!("no stats for table {t}")))
    };
    let mut joined: Vec<&str> = Vec::new();
    let mut size = 0.0;
    for (i, join) in query.joins.iter().enumerate() {
        let (lt, lc) = (&join.left.0, &join.left.1);
        let (rt, rc) = (&join.right.0, &join.right.1);
        let ndv_l = stats
            .get(lt)
            .ok_or_else(|| CardError::Invalid(format!("no stats for table {lt}")))?
            .column_ndv(lc)?;
        let ndv_r = stats
            .get(rt)
            .ok_or_else(|| CardError::Invalid(format!("no stats for table {rt}")))?
            .column_ndv(rc)?;
        let denom = ndv_l.max(ndv_r).max(1) as f64;
        if i == 0 {
            size = rows(lt)? * rows(rt)? / denom;
            joined.push(lt);
            joined.push(rt);
        } else {
            // extend by whichever side is new
            let newcomer = if joined.contains(&lt.as_str()) { rt } else { lt };
            size = size * rows(newcomer)? / denom;
            joined.push(newcomer);
        }
    }
    Ok(size.max(0.0))
}

/// Scale matching sample rows by the sampling rate; zero matches clamp to 1.
pub fn sample_count(sample: &TableData, rate: f64, pred: &Pred) -> Result<f64> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(CardError::Invalid("sampling rate must be in (0, 1]".into()));
    }
    let compiled = crate::query::compile_pred(pred, sample)?;
    let matches = compiled.count(sample);
    if matches == 0 {
        Ok(1.0)
    } else {
        Ok(matches as f64 / rate)
    }
}

/// Guaranteed-error estimator: sqrt(N/n) * f[0] + sum of the rest.
pub fn gee_ndv(profile: &FrequencyProfile) -> f64 {
    let scale = (profile.population as f64 / profile.n as f64).sqrt();
    scale * profile.f[0] as f64
        + profile.f[1..].iter().map(|&c| c as f64).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Exact oracles
// ---------------------------------------------------------------------------

/// Exact COUNT by full scan.
pub fn true_count(table: &TableData, pred: &Pred) -> Result<u64> {
    let compiled = crate::query::compile_pred(pred, table)?;
    let rows: Vec<usize> = (0..table.row_count).collect();
    let hits = exec::map_collect(&rows, |&r| compiled.matches(table, r) as u64);
    Ok(hits.iter().sum())
}

pub fn true_count_seq(table: &TableData, pred: &Pred) -> Result<u64> {
    let compiled = crate::query::compile_pred(pred, table)?;
    Ok(compiled.count(table))
}

/// Exact NDV of a column under a filter (missing values excluded).
pub fn true_ndv(table: &TableData, column: &str, pred: &Pred) -> Result<u64> {
    let (idx, _) = table.column(column)?;
    let compiled = crate::query::compile_pred(pred, table)?;
    let mut distinct = std::collections::HashSet::new();
    for row in 0..table.row_count {
        if compiled.matches(table, row) {
            if let Some(k) = table.distinct_key(idx, row) {
                distinct.insert(k);
            }
        }
    }
    Ok(distinct.len() as u64)
}

/// Exact join size of an acyclic equi-join query with per-table filters,
/// computed by hash-join-style elimination over the join tree. This is the
/// ground truth for the acceptance suite.
pub fn true_join_size(query: &QuerySpec, tables: &[&TableData]) -> Result<u64> {
    let lookup = |name: &str| -> Result<&TableData> {
        tables
            .iter()
            .copied()
            .find(|t| t.name == name)
            .ok_or_else(|| CardError::Invalid(format!("table {name} not provided")))
    };
    if query.tables.len() == 1 {
        return true_count(lookup(&query.tables[0])?, &query.predicate);
    }
    if query.joins.is_empty() {
        return Err(CardError::Invalid("multi-table query without joins".into()));
    }

    // Per-table surviving row ids under the filters.
    let mut alive: HashMap<String, Vec<usize>> = HashMap::new();
    for name in &query.tables {
        let t = lookup(name)?;
        let filter = compile_table_filter(query, t)?;
        alive.insert(
            name.clone(),
            (0..t.row_count).filter(|&r| filter.matches(t, r)).collect(),
        );
    }

    // Eliminate tables leaf-first along the join tree, carrying per-key-value
    // weights: weight(v) = number of joined sub-rows with that key value.
    #[derive(Clone)]
    struct Pending {
        // weights multiplying each row, keyed by (key-column, per-value map)
        factors: Vec<(String, HashMap<i64, f64>)>,
    }

    let mut joins: Vec<(usize, (String, String), (String, String))> =
        query.joins.iter().enumerate().map(|(i, j)| (i, j.left.clone(), j.right.clone())).collect();
    let mut pendings: HashMap<String, Pending> = query
        .tables
        .iter()
        .map(|t| (t.clone(), Pending { factors: Vec::new() }))
        .collect();

    // Count of joins each table still participates in.
    let degree = |joins: &Vec<(usize, (String, String), (String, String))>, t: &str| {
        joins.iter().filter(|(_, l, r)| l.0 == t || r.0 == t).count()
    };

    while let Some(pos) = (0..joins.len()).find(|&i| {
        let (_, l, r) = &joins[i];
        degree(&joins, &l.0) == 1 || degree(&joins, &r.0) == 1
    }) {
        let (_, l, r) = joins.remove(pos);
        // eliminate the leaf side into the other
        let (leaf, keep) = if degree(&joins, &l.0) == 0 && degree(&joins, &r.0) > 0 {
            (l, r)
        } else if degree(&joins, &r.0) == 0 && degree(&joins, &l.0) > 0 {
            (r, l)
        } else {
            // final join: both now leaves
            (l, r)
        };
        let leaf_pending = pendings.remove(&leaf.0).expect("pending leaf");
        let leaf_table = lookup(&leaf.0)?;
        let (leaf_col, _) = leaf_table.column(&leaf.1)?;
        let leaf_keys = leaf_table.key_values(leaf_col)?;
        let mut weight_by_value: HashMap<i64, f64> = HashMap::new();
        for &row in &alive[&leaf.0] {
            if let Some(v) = leaf_keys[row] {
                let mut w = 1.0;
                for (col, map) in &leaf_pending.factors {
                    let (ci, _) = leaf_table.column(col)?;
                    let kv = leaf_table.key_values(ci)?;
                    w *= match kv[row] {
                        Some(x) => map.get(&x).copied().unwrap_or(0.0),
                        None => 0.0,
                    };
                }
                if w > 0.0 {
                    *weight_by_value.entry(v).or_insert(0.0) += w;
                }
            }
        }
        if joins.is_empty() && !pendings.contains_key(&keep.0) {
            return Err(CardError::Invalid("join graph is not a tree".into()));
        }
        let keep_pending = pendings.get_mut(&keep.0).expect("pending keep side");
        keep_pending.factors.push((keep.1.clone(), weight_by_value));
        if joins.is_empty() {
            // all joins folded into `keep`: total the weights
            let keep_table = lookup(&keep.0)?;
            let mut total = 0.0;
            for &row in &alive[&keep.0] {
                let mut w = 1.0;
                for (col, map) in &keep_pending.factors {
                    let (ci, _) = keep_table.column(col)?;
                    let kv = keep_table.key_values(ci)?;
                    w *= match kv[row] {
                        Some(x) => map.get(&x).copied().unwrap_or(0.0),
                        None => 0.0,
                    };
                }
                total += w;
            }
            return Ok(total.round() as u64);
        }
    }
    Err(CardError::Invalid("cyclic join unsupported".into()))
}

/// Independent nested-loop join oracle for 2 or 3 tables; cross-checks the
/// hash-join path on small instances.
pub fn nested_loop_join_size(query: &QuerySpec, tables: &[&TableData]) -> Result<u64> {
    let lookup = |name: &str| -> Result<&TableData> {
        tables
            .iter()
            .copied()
            .find(|t| t.name == name)
            .ok_or_else(|| CardError::Invalid(format!("table {name} not provided")))
    };
    let ordered: Vec<&TableData> =
        query.tables.iter().map(|t| lookup(t)).collect::<Result<_>>()?;
    if ordered.len() > 3 {
        return Err(CardError::Invalid("nested-loop oracle supports up to 3 tables".into()));
    }
    let filters: Vec<_> = ordered
        .iter()
        .map(|t| compile_table_filter(query, t))
        .collect::<Result<_>>()?;
    // resolve join conditions to (table idx, col idx) pairs
    let mut conds = Vec::new();
    for j in &query.joins {
        let ti = |t: &str| query.tables.iter().position(|x| x == t).unwrap();
        let (lt, lc) = (ti(&j.left.0), ordered[ti(&j.left.0)].column(&j.left.1)?.0);
        let (rt, rc) = (ti(&j.right.0), ordered[ti(&j.right.0)].column(&j.right.1)?.0);
        conds.push(((lt, lc), (rt, rc)));
    }
    let keys: Vec<Vec<Vec<Option<i64>>>> = ordered
        .iter()
        .map(|t| {
            (0..t.columns.len())
                .map(|c| t.key_values(c).unwrap_or_default())
                .collect()
        })
        .collect();

    let mut count = 0u64;
    let mut rows = vec![0usize; ordered.len()];
    fn recurse(
        depth: usize,
        ordered: &[&TableData],
        filters: &[crate::query::CompiledPred],
        conds: &[((usize, usize), (usize, usize))],
        keys: &[Vec<Vec<Option<i64>>>],
        rows: &mut Vec<usize>,
        count: &mut u64,
    ) {
        if depth == ordered.len() {
            *count += 1;
            return;
        }
        'next: for r in 0..ordered[depth].row_count {
            if !filters[depth].matches(ordered[depth], r) {
                continue;
            }
            rows[depth] = r;
            for &((lt, lc), (rt, rc)) in conds {
                if lt.max(rt) == depth {
                    let lv = &keys[lt][lc];
                    let rv = &keys[rt][rc];
                    let (a, b) = (lv[rows[lt]], rv[rows[rt]]);
                    match (a, b) {
                        (Some(x), Some(y)) if x == y => {}
                        _ => continue 'next,
                    }
                }
            }
            recurse(depth + 1, ordered, filters, conds, keys, rows, count);
        }
    }
    recurse(0, &ordered, &filters, &conds, &keys, &mut rows, &mut count);
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::parse;
    use crate::schema::load_csv_reader;
    use std::collections::BTreeMap;

    fn csv_table(name: &str, body: &str) -> TableData {
        load_csv_reader(body.as_bytes(), name, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn histogram_single_column_exact() {
        let t = csv_table("t", &("x\n".to_string() + &"0\n0\n0\n1\n".repeat(25)));
        let stats = build_table_stats(&t);
        let q = parse("SELECT COUNT(*) FROM t WHERE x = '0'").unwrap();
        let sel = histogram_selectivity(&stats, &q.predicate).unwrap();
        assert!((sel - 0.75).abs() < 1e-12);
    }

    #[test]
    fn histogram_empty_predicate_is_one() {
        let t = csv_table("t", "x\n1\n2\n");
        let stats = build_table_stats(&t);
        let q = parse("SELECT COUNT(*) FROM t").unwrap();
        assert_eq!(histogram_selectivity(&stats, &q.predicate).unwrap(), 1.0);
    }

    #[test]
    fn histogram_underestimates_correlated_conjunction() {
        // col2 = col3 + 2: joint selectivity equals the single-column one,
        // but independence multiplies them.
        let mut body = String::from("col2,col3\n");
        for _ in 0..25 {
            for v in [-1i64, 1, 3, 5] {
                body.push_str(&format!("{},{}\n", v, v - 2));
            }
        }
        let t = csv_table("t", &body);
        let stats = build_table_stats(&t);
        let q = parse("SELECT COUNT(*) FROM t WHERE col2 > 0 AND col3 > 0").unwrap();
        let avi = histogram_selectivity(&stats, &q.predicate).unwrap();
        let truth = true_count(&t, &q.predicate).unwrap() as f64 / t.row_count as f64;
        assert!(avi < truth, "avi {avi} truth {truth}");
    }

    #[test]
    fn join_uniform_pk_fk_exact() {
        let pk = csv_table("P", &("k\n".to_string() + &(0..20).map(|i| format!("{i}\n")).collect::<String>()));
        // each key appears exactly 3 times
        let mut fk_body = String::from("k\n");
        for i in 0..20 {
            for _ in 0..3 {
                fk_body.push_str(&format!("{i}\n"));
            }
        }
        let fk = csv_table("F", &fk_body);
        let sql = "SELECT COUNT(*) FROM P, F WHERE P.k = F.k";
        let q = parse(sql).unwrap();
        let mut stats = HashMap::new();
        stats.insert("P".to_string(), build_table_stats(&pk));
        stats.insert("F".to_string(), build_table_stats(&fk));
        let est = histogram_join_size(&q, &stats, &HashMap::new()).unwrap();
        let truth = true_join_size(&q, &[&pk, &fk]).unwrap();
        assert!((est - truth as f64).abs() < 1e-9);
    }

    #[test]
    fn join_skewed_keys_underestimated() {
        // both sides concentrate on key 0; uniformity misses the hot spot
        let skewed = |name: &str| {
            let body = "k\n".to_string()
                + &"0\n".repeat(30)
                + &(1..=20).map(|i| format!("{i}\n")).collect::<String>();
            csv_table(name, &body)
        };
        let a = skewed("A");
        let b = skewed("B");
        let sql = "SELECT COUNT(*) FROM A, B WHERE A.k = B.k";
        let q = parse(sql).unwrap();
        let mut stats = HashMap::new();
        stats.insert("A".to_string(), build_table_stats(&a));
        stats.insert("B".to_string(), build_table_stats(&b));
        let est = histogram_join_size(&q, &stats, &HashMap::new()).unwrap();
        let truth = true_join_size(&q, &[&a, &b]).unwrap() as f64;
        assert_eq!(truth, 920.0);
        assert!(est < truth, "est {est} truth {truth}");
    }

    #[test]
    fn join_empty_table_is_zero() {
        let pk = csv_table("P", "k\n1\n");
        let pk = TableData::take_rows(&pk, &[]);
        let fk = csv_table("F", "k\n1\n1\n");
        let sql = "SELECT COUNT(*) FROM P, F WHERE P.k = F.k";
        let q = parse(sql).unwrap();
        let mut stats = HashMap::new();
        stats.insert("P".to_string(), build_table_stats(&pk));
        stats.insert("F".to_string(), build_table_stats(&fk));
        let est = histogram_join_size(&q, &stats, &HashMap::new()).unwrap();
        assert_eq!(est, 0.0);
        assert_eq!(true_join_size(&q, &[&pk, &fk]).unwrap(), 0);
    }

    #[test]
    fn sample_count_full_rate_exact() {
        let t = csv_table("t", &("x\n".to_string() + &"0\n1\n".repeat(50)));
        let q = parse("SELECT COUNT(*) FROM t WHERE x = '1'").unwrap();
        let est = sample_count(&t, 1.0, &q.predicate).unwrap();
        assert_eq!(est, 50.0);
    }

    #[test]
    fn sample_count_zero_matches_clamps_to_one() {
        let t = csv_table("t", "x\n0\n1\n");
        let q = parse("SELECT COUNT(*) FROM t WHERE x = '9'").unwrap();
        assert_eq!(sample_count(&t, 0.5, &q.predicate).unwrap(), 1.0);
    }

    #[test]
    fn sample_count_mean_near_truth() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let mut body = String::from("x\n");
        for _ in 0..10_000 {
            body.push_str(&format!("{}\n", rng.random_range(0..10)));
        }
        let t = csv_table("t", &body);
        let q = parse("SELECT COUNT(*) FROM t WHERE x = '3'").unwrap();
        let truth = true_count(&t, &q.predicate).unwrap() as f64;
        let mut total = 0.0;
        let trials = 100;
        for trial in 0..trials {
            let sample = t.sample(100, 1000 + trial);
            total += sample_count(&sample, 0.01, &q.predicate).unwrap();
        }
        let mean = total / trials as f64;
        assert!(
            (mean - truth).abs() / truth < 0.10,
            "mean {mean} truth {truth}"
        );
    }

    #[test]
    fn gee_full_scan_is_exact() {
        let p = crate::ndv::frequency_profile(&[1, 1, 2, 3], 4, 4).unwrap();
        assert_eq!(gee_ndv(&p), 3.0);
    }

    #[test]
    fn gee_all_singletons_scales_by_sqrt() {
        let values: Vec<u64> = (0..25).collect();
        let p = crate::ndv::frequency_profile(&values, 4, 100).unwrap();
        assert!((gee_ndv(&p) - 2.0 * 25.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_empty_predicate_counts_rows() {
        let t = csv_table("t", "x\n1\n2\n3\n");
        let q = parse("SELECT COUNT(*) FROM t").unwrap();
        assert_eq!(true_count(&t, &q.predicate).unwrap(), 3);
        assert_eq!(true_count_seq(&t, &q.predicate).unwrap(), 3);
    }

    #[test]
    fn oracle_join_no_matching_keys_is_zero() {
        let a = csv_table("A", "k\n1\n2\n");
        let b = csv_table("B", "k\n3\n4\n");
        let q = parse("SELECT COUNT(*) FROM A, B WHERE A.k = B.k").unwrap();
        assert_eq!(true_join_size(&q, &[&a, &b]).unwrap(), 0);
    }

    #[test]
    fn join_oracles_agree_on_random_instances() {
        use rand::Rng;
        use rand::SeedableRng;
        for seed in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mk = |name: &str, rng: &mut rand_chacha::ChaCha8Rng| {
                let rows = rng.random_range(20..120);
                let dom = rng.random_range(3..15);
                let mut body = String::from("k,f\n");
                for _ in 0..rows {
                    body.push_str(&format!(
                        "{},{}\n",
                        rng.random_range(0..dom),
                        rng.random_range(0..3)
                    ));
                }
                csv_table(name, &body)
            };
            let a = mk("A", &mut rng);
            let b = mk("B", &mut rng);
            let c = mk("C", &mut rng);
            let three = seed % 2 == 0;
            let sql = if three {
                "SELECT COUNT(*) FROM A, B, C WHERE A.k = B.k AND B.k = C.k AND A.f = '1'"
            } else {
                "SELECT COUNT(*) FROM A, B WHERE A.k = B.k AND B.f = '0'"
            };
            let q = parse(sql).unwrap();
            let tables: Vec<&TableData> =
                if three { vec![&a, &b, &c] } else { vec![&a, &b] };
            let hash = true_join_size(&q, &tables).unwrap();
            let nested = nested_loop_join_size(&q, &tables).unwrap();
            assert_eq!(hash, nested, "seed {seed}");
        }
    }

    #[test]
    fn true_ndv_counts_distinct_under_filter() {
        let t = csv_table("t", "x,y\n1,a\n2,a\n2,b\n3,b\n");
        let q = parse("SELECT COUNT(DISTINCT x) FROM t WHERE y = 'a'").unwrap();
        assert_eq!(true_ndv(&t, "x", &q.predicate).unwrap(), 2);
        let all = parse("SELECT COUNT(DISTINCT x) FROM t").unwrap();
        assert_eq!(true_ndv(&t, "x", &all.predicate).unwrap(), 3);
    }
}
