//! Restricted-SQL parsing and predicate featurization.
//!
//! Grammar (see `docs/grammar.md`):
//!   SELECT COUNT(*) | COUNT(DISTINCT col) FROM t1 [, t2 ...]
//!   [WHERE pred] [GROUP BY col [, col ...]]
//! with predicates over =, !=/<>, <, <=, >, >=, IN, BETWEEN combined by
//! AND/OR/NOT and parentheses. Equality between two column references at a
//! top-level AND position is a join condition.

use serde::{Deserialize, Serialize};

use crate::error::{CardError, Result};
use crate::schema::{ColumnKind, ColumnMeta, TableData};

pub const DEFAULT_MAX_DNF_TERMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
    Between,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    Num(f64),
    Text(String),
}

impl Literal {
    fn as_num(&self) -> Option<f64> {
        match self {
            Literal::Num(x) => Some(*x),
            Literal::Text(s) => s.parse().ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColRef {
    pub table: Option<String>,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredLeaf {
    pub col: ColRef,
    pub op: CmpOp,
    pub args: Vec<Literal>,
    /// Set only for IN/BETWEEN under NOT; other ops flip directly.
    pub negated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Pred {
    True,
    Leaf(PredLeaf),
    And(Vec<Pred>),
    Or(Vec<Pred>),
    Not(Box<Pred>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggKind {
    Count,
    CountDistinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agg {
    pub kind: AggKind,
    pub distinct_target: Option<ColRef>,
    pub group_keys: Vec<ColRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinCond {
    pub left: (String, String),
    pub right: (String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub tables: Vec<String>,
    pub predicate: Pred,
    pub joins: Vec<JoinCond>,
    pub agg: Agg,
}

impl QuerySpec {
    pub fn is_multi_table(&self) -> bool {
        self.tables.len() > 1
    }

    /// Conjunction leaves constrained to one table, for per-table featurization
    /// of join queries. Requires a conjunctive predicate. Unqualified columns
    /// resolve via `has_column` when the query spans several tables.
    pub fn leaves_for(
        &self,
        table_name: &str,
        has_column: impl Fn(&str) -> bool,
    ) -> Result<Vec<PredLeaf>> {
        let all = conjunction_leaves(&self.predicate)?;
        let mut out = Vec::new();
        for leaf in all {
            match &leaf.col.table {
                Some(t) if t == table_name => out.push(leaf.clone()),
                Some(_) => {}
                None => {
                    if self.tables.len() == 1 || has_column(&leaf.col.column) {
                        out.push(leaf.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn leaves_for_table(&self, table: &TableData) -> Result<Vec<PredLeaf>> {
        self.leaves_for(&table.name, |col| table.column_index(col).is_some())
    }
}

/// Flatten a predicate into conjunction leaves; errors when OR/NOT survive.
pub fn conjunction_leaves(pred: &Pred) -> Result<Vec<&PredLeaf>> {
    fn walk<'a>(p: &'a Pred, out: &mut Vec<&'a PredLeaf>) -> Result<()> {
        match p {
            Pred::True => Ok(()),
            Pred::Leaf(l) => {
                out.push(l);
                Ok(())
            }
            Pred::And(children) => {
                for c in children {
                    walk(c, out)?;
                }
                Ok(())
            }
            _ => Err(CardError::Invalid(
                "predicate is not conjunctive; apply to_dnf first".into(),
            )),
        }
    }
    let mut out = Vec::new();
    walk(pred, &mut out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Str(String),
    Punct(&'static str),
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

fn lex(sql: &str) -> Result<Lexer> {
    let bytes = sql.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        match c {
            '(' | ')' | ',' | '.' | '*' => {
                let p = match c {
                    '(' => "(",
                    ')' => ")",
                    ',' => ",",
                    '.' => ".",
                    _ => "*",
                };
                toks.push((Tok::Punct(p), start));
                i += 1;
            }
            '=' => {
                toks.push((Tok::Punct("="), start));
                i += 1;
            }
            '!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    toks.push((Tok::Punct("!="), start));
                    i += 2;
                } else {
                    return Err(parse_err(start, "expected `!=`"));
                }
            }
            '<' => match bytes.get(i + 1) {
                Some(&b'=') => {
                    toks.push((Tok::Punct("<="), start));
                    i += 2;
                }
                Some(&b'>') => {
                    toks.push((Tok::Punct("!="), start));
                    i += 2;
                }
                _ => {
                    toks.push((Tok::Punct("<"), start));
                    i += 1;
                }
            },
            '>' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    toks.push((Tok::Punct(">="), start));
                    i += 2;
                } else {
                    toks.push((Tok::Punct(">"), start));
                    i += 1;
                }
            }
            '\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match bytes.get(i) {
                        None => return Err(parse_err(start, "unterminated string literal")),
                        Some(&b'\'') => {
                            if bytes.get(i + 1) == Some(&b'\'') {
                                s.push('\'');
                                i += 2;
                            } else {
                                i += 1;
                                break;
                            }
                        }
                        Some(&b) => {
                            s.push(b as char);
                            i += 1;
                        }
                    }
                }
                toks.push((Tok::Str(s), start));
            }
            _ if c.is_ascii_digit()
                || (c == '-' && bytes.get(i + 1).map_or(false, |b| b.is_ascii_digit())) =>
            {
                let mut j = i + 1;
                while j < bytes.len()
                    && (bytes[j].is_ascii_digit()
                        || bytes[j] == b'.'
                        || bytes[j] == b'e'
                        || bytes[j] == b'E'
                        || ((bytes[j] == b'+' || bytes[j] == b'-')
                            && (bytes[j - 1] == b'e' || bytes[j - 1] == b'E')))
                {
                    j += 1;
                }
                let text = &sql[i..j];
                let v: f64 = text
                    .parse()
                    .map_err(|_| parse_err(start, &format!("bad number `{text}`")))?;
                toks.push((Tok::Num(v), start));
                i = j;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i + 1;
                while j < bytes.len()
                    && ((bytes[j] as char).is_ascii_alphanumeric() || bytes[j] == b'_')
                {
                    j += 1;
                }
                toks.push((Tok::Ident(sql[i..j].to_string()), start));
                i = j;
            }
            other => return Err(parse_err(start, &format!("unexpected character `{other}`"))),
        }
    }
    Ok(Lexer { toks, pos: 0 })
}

fn parse_err(pos: usize, msg: &str) -> CardError {
    CardError::Parse { pos, msg: msg.to_string() }
}

impl Lexer {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map(|(_, p)| *p).unwrap_or(usize::MAX.min(0) + self.end())
    }

    fn end(&self) -> usize {
        self.toks.last().map(|(_, p)| *p + 1).unwrap_or(0)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if let Some(Tok::Ident(s)) = self.peek() {
            if s.eq_ignore_ascii_case(kw) {
                self.pos += 1;
                return true;
            }
        }
        false
    }

    fn expect_kw(&mut self, kw: &str) -> Result<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(parse_err(self.here(), &format!("expected `{kw}`")))
        }
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if let Some(Tok::Punct(q)) = self.peek() {
            if *q == p {
                self.pos += 1;
                return true;
            }
        }
        false
    }

    fn expect_punct(&mut self, p: &str) -> Result<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            Err(parse_err(self.here(), &format!("expected `{p}`")))
        }
    }

    fn expect_ident(&mut self) -> Result<String> {
        let pos = self.here();
        match self.next() {
            Some(Tok::Ident(s)) => {
                if is_keyword(&s) {
                    Err(parse_err(pos, &format!("unexpected keyword `{s}`")))
                } else {
                    Ok(s)
                }
            }
            _ => Err(parse_err(pos, "expected identifier")),
        }
    }
}

fn is_keyword(s: &str) -> bool {
    const KW: [&str; 12] = [
        "select", "count", "distinct", "from", "where", "group", "by", "and", "or", "not", "in",
        "between",
    ];
    KW.iter().any(|k| s.eq_ignore_ascii_case(k))
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

/// Pre-extraction predicate node: column-to-column comparisons still present.
enum RawPred {
    Leaf(PredLeaf),
    ColCmp { left: ColRef, right: ColRef, pos: usize },
    And(Vec<RawPred>),
    Or(Vec<RawPred>),
    Not(Box<RawPred>),
}

pub fn parse(sql: &str) -> Result<QuerySpec> {
    let mut lx = lex(sql)?;
    lx.expect_kw("SELECT")?;
    lx.expect_kw("COUNT")?;
    lx.expect_punct("(")?;
    let agg = if lx.eat_punct("*") {
        Agg { kind: AggKind::Count, distinct_target: None, group_keys: Vec::new() }
    } else {
        lx.expect_kw("DISTINCT")?;
        let col = parse_colref(&mut lx)?;
        Agg { kind: AggKind::CountDistinct, distinct_target: Some(col), group_keys: Vec::new() }
    };
    lx.expect_punct(")")?;
    lx.expect_kw("FROM")?;
    let mut tables = vec![lx.expect_ident()?];
    while lx.eat_punct(",") {
        tables.push(lx.expect_ident()?);
    }
    {
        let mut seen = std::collections::BTreeSet::new();
        for t in &tables {
            if !seen.insert(t.clone()) {
                return Err(parse_err(0, &format!("table `{t}` listed twice")));
            }
        }
    }

    let raw = if lx.eat_kw("WHERE") { Some(parse_or(&mut lx)?) } else { None };

    let mut agg = agg;
    if lx.eat_kw("GROUP") {
        lx.expect_kw("BY")?;
        agg.group_keys.push(parse_colref(&mut lx)?);
        while lx.eat_punct(",") {
            agg.group_keys.push(parse_colref(&mut lx)?);
        }
    }
    if let Some(t) = lx.peek() {
        return Err(parse_err(lx.here(), &format!("trailing input `{t:?}`")));
    }

    let (predicate, joins) = match raw {
        None => (Pred::True, Vec::new()),
        Some(raw) => split_joins(raw, &tables)?,
    };
    let predicate = push_not_down(predicate, false);
    Ok(QuerySpec { tables, predicate, joins, agg })
}

fn parse_colref(lx: &mut Lexer) -> Result<ColRef> {
    let first = lx.expect_ident()?;
    if lx.eat_punct(".") {
        let col = lx.expect_ident()?;
        Ok(ColRef { table: Some(first), column: col })
    } else {
        Ok(ColRef { table: None, column: first })
    }
}

fn parse_or(lx: &mut Lexer) -> Result<RawPred> {
    let mut terms = vec![parse_and(lx)?];
    while lx.eat_kw("OR") {
        terms.push(parse_and(lx)?);
    }
    Ok(if terms.len() == 1 { terms.pop().unwrap() } else { RawPred::Or(terms) })
}

fn parse_and(lx: &mut Lexer) -> Result<RawPred> {
    let mut terms = vec![parse_unary(lx)?];
    while lx.eat_kw("AND") {
        terms.push(parse_unary(lx)?);
    }
    Ok(if terms.len() == 1 { terms.pop().unwrap() } else { RawPred::And(terms) })
}

fn parse_unary(lx: &mut Lexer) -> Result<RawPred> {
    if lx.eat_kw("NOT") {
        return Ok(RawPred::Not(Box::new(parse_unary(lx)?)));
    }
    if lx.eat_punct("(") {
        let inner = parse_or(lx)?;
        lx.expect_punct(")")?;
        return Ok(inner);
    }
    parse_comparison(lx)
}

fn parse_literal(lx: &mut Lexer) -> Result<Literal> {
    let pos = lx.here();
    match lx.next() {
        Some(Tok::Num(v)) => Ok(Literal::Num(v)),
        Some(Tok::Str(s)) => Ok(Literal::Text(s)),
        _ => Err(parse_err(pos, "expected literal")),
    }
}

fn parse_comparison(lx: &mut Lexer) -> Result<RawPred> {
    let pos = lx.here();
    let col = parse_colref(lx)?;
    if lx.eat_kw("NOT") {
        lx.expect_kw("IN")?;
        return parse_in(lx, col, true);
    }
    if lx.eat_kw("IN") {
        return parse_in(lx, col, false);
    }
    if lx.eat_kw("BETWEEN") {
        let lo = parse_literal(lx)?;
        lx.expect_kw("AND")?;
        let hi = parse_literal(lx)?;
        return Ok(RawPred::Leaf(PredLeaf {
            col,
            op: CmpOp::Between,
            args: vec![lo, hi],
            negated: false,
        }));
    }
    let op = match lx.next() {
        Some(Tok::Punct("=")) => CmpOp::Eq,
        Some(Tok::Punct("!=")) => CmpOp::Ne,
        Some(Tok::Punct("<")) => CmpOp::Lt,
        Some(Tok::Punct("<=")) => CmpOp::Le,
        Some(Tok::Punct(">")) => CmpOp::Gt,
        Some(Tok::Punct(">=")) => CmpOp::Ge,
        _ => return Err(parse_err(pos, "expected comparison operator")),
    };
    // Right side: literal or column reference (potential join).
    match lx.peek() {
        Some(Tok::Ident(_)) => {
            let right = parse_colref(lx)?;
            if op != CmpOp::Eq {
                return Err(parse_err(pos, "only equality is supported between columns"));
            }
            Ok(RawPred::ColCmp { left: col, right, pos })
        }
        _ => {
            let lit = parse_literal(lx)?;
            Ok(RawPred::Leaf(PredLeaf { col, op, args: vec![lit], negated: false }))
        }
    }
}

fn parse_in(lx: &mut Lexer, col: ColRef, negated: bool) -> Result<RawPred> {
    lx.expect_punct("(")?;
    let mut args = vec![parse_literal(lx)?];
    while lx.eat_punct(",") {
        args.push(parse_literal(lx)?);
    }
    lx.expect_punct(")")?;
    Ok(RawPred::Leaf(PredLeaf { col, op: CmpOp::In, args, negated }))
}

/// Separate top-level column=column conjuncts into join conditions.
fn split_joins(raw: RawPred, tables: &[String]) -> Result<(Pred, Vec<JoinCond>)> {
    let conjuncts = match raw {
        RawPred::And(terms) => terms,
        other => vec![other],
    };
    let mut joins = Vec::new();
    let mut filters = Vec::new();
    for term in conjuncts {
        match term {
            RawPred::ColCmp { left, right, pos } => {
                let l = resolve_table(&left, tables, pos)?;
                let r = resolve_table(&right, tables, pos)?;
                if l.0 == r.0 {
                    return Err(parse_err(pos, "join condition references one table twice"));
                }
                joins.push(JoinCond { left: l, right: r });
            }
            other => filters.push(lower(other)?),
        }
    }
    let pred = match filters.len() {
        0 => Pred::True,
        1 => filters.pop().unwrap(),
        _ => Pred::And(filters),
    };
    Ok((pred, joins))
}

fn resolve_table(col: &ColRef, tables: &[String], pos: usize) -> Result<(String, String)> {
    match &col.table {
        Some(t) => {
            if tables.iter().any(|x| x == t) {
                Ok((t.clone(), col.column.clone()))
            } else {
                Err(parse_err(pos, &format!("table `{t}` not in FROM list")))
            }
        }
        None => {
            if tables.len() == 1 {
                Ok((tables[0].clone(), col.column.clone()))
            } else {
                Err(parse_err(pos, &format!("column `{}` must be table-qualified", col.column)))
            }
        }
    }
}

fn lower(raw: RawPred) -> Result<Pred> {
    match raw {
        RawPred::Leaf(l) => Ok(Pred::Leaf(l)),
        RawPred::ColCmp { pos, .. } => Err(parse_err(
            pos,
            "column-to-column comparison must be a top-level AND conjunct",
        )),
        RawPred::And(v) => Ok(Pred::And(v.into_iter().map(lower).collect::<Result<_>>()?)),
        RawPred::Or(v) => Ok(Pred::Or(v.into_iter().map(lower).collect::<Result<_>>()?)),
        RawPred::Not(inner) => Ok(Pred::Not(Box::new(lower(*inner)?))),
    }
}

/// Push NOT to the leaves. Ordered operators flip; IN/BETWEEN toggle the
/// leaf's negated flag (their masks complement).
fn push_not_down(pred: Pred, negate: bool) -> Pred {
    match pred {
        Pred::True => Pred::True,
        Pred::Leaf(mut leaf) => {
            if negate {
                leaf = negate_leaf(leaf);
            }
            Pred::Leaf(leaf)
        }
        Pred::And(children) => {
            let mapped: Vec<Pred> =
                children.into_iter().map(|c| push_not_down(c, negate)).collect();
            if negate {
                Pred::Or(mapped)
            } else {
                Pred::And(mapped)
            }
        }
        Pred::Or(children) => {
            let mapped: Vec<Pred> =
                children.into_iter().map(|c| push_not_down(c, negate)).collect();
            if negate {
                Pred::And(mapped)
            } else {
                Pred::Or(mapped)
            }
        }
        Pred::Not(inner) => push_not_down(*inner, !negate),
    }
}

pub fn negate_leaf(mut leaf: PredLeaf) -> PredLeaf {
    leaf.op = match leaf.op {
        CmpOp::Eq => CmpOp::Ne,
        CmpOp::Ne => CmpOp::Eq,
        CmpOp::Lt => CmpOp::Ge,
        CmpOp::Ge => CmpOp::Lt,
        CmpOp::Gt => CmpOp::Le,
        CmpOp::Le => CmpOp::Gt,
        CmpOp::In | CmpOp::Between => {
            leaf.negated = !leaf.negated;
            leaf.op
        }
    };
    leaf
}

// ---------------------------------------------------------------------------
// DNF
// ---------------------------------------------------------------------------

/// Disjunctive normal form: each clause is a conjunction of leaves.
/// Errors with `DnfBlowup` when the clause count would exceed `max_terms`.
pub fn to_dnf(pred: &Pred, max_terms: usize) -> Result<Vec<Vec<PredLeaf>>> {
    fn go(pred: &Pred, cap: usize) -> Result<Vec<Vec<PredLeaf>>> {
        match pred {
            Pred::True => Ok(vec![Vec::new()]),
            Pred::Leaf(l) => Ok(vec![vec![l.clone()]]),
            Pred::Not(inner) => match inner.as_ref() {
                Pred::Leaf(l) => Ok(vec![vec![negate_leaf(l.clone())]]),
                _ => Err(CardError::Invalid("NOT not pushed to leaves".into())),
            },
            Pred::Or(children) => {
                let mut clauses = Vec::new();
                for c in children {
                    clauses.extend(go(c, cap)?);
                    if clauses.len() > cap {
                        return Err(CardError::DnfBlowup { terms: clauses.len(), max_terms: cap });
                    }
                }
                Ok(clauses)
            }
            Pred::And(children) => {
                let mut acc: Vec<Vec<PredLeaf>> = vec![Vec::new()];
                for c in children {
                    let rhs = go(c, cap)?;
                    let mut next = Vec::with_capacity(acc.len() * rhs.len());
                    for a in &acc {
                        for b in &rhs {
                            let mut clause = a.clone();
                            clause.extend(b.iter().cloned());
                            next.push(clause);
                            if next.len() > cap {
                                return Err(CardError::DnfBlowup {
                                    terms: next.len(),
                                    max_terms: cap,
                                });
                            }
                        }
                    }
                    acc = next;
                }
                Ok(acc)
            }
        }
    }
    go(pred, max_terms)
}

// ---------------------------------------------------------------------------
// Featurization
// ---------------------------------------------------------------------------

/// Per-column bin indicator in [0,1]; all-ones means unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateIndicator {
    pub column: String,
    pub mask: Vec<f64>,
}

/// Featurize a conjunctive query against one table's schema. One indicator
/// per constrained column; repeated leaves on a column multiply elementwise.
pub fn featurize(spec: &QuerySpec, table: &TableData) -> Result<Vec<PredicateIndicator>> {
    let leaves = spec.leaves_for_table(table)?;
    let refs: Vec<&PredLeaf> = leaves.iter().collect();
    featurize_leaves(&refs, &table.name, &table.columns)
}

/// Featurize against schema metadata only; this is what model payloads use,
/// so estimation never needs the underlying rows.
pub fn featurize_leaves(
    leaves: &[&PredLeaf],
    table: &str,
    metas: &[ColumnMeta],
) -> Result<Vec<PredicateIndicator>> {
    let mut by_column: Vec<(usize, Vec<f64>)> = Vec::new();
    for leaf in leaves {
        let idx = metas
            .iter()
            .position(|m| m.name == leaf.col.column)
            .ok_or_else(|| CardError::UnknownColumn {
                table: table.to_string(),
                column: leaf.col.column.clone(),
            })?;
        let mask = leaf_mask(leaf, &metas[idx])?;
        match by_column.iter_mut().find(|(i, _)| *i == idx) {
            Some((_, existing)) => {
                for (e, m) in existing.iter_mut().zip(&mask) {
                    *e *= m;
                }
            }
            None => by_column.push((idx, mask)),
        }
    }
    Ok(by_column
        .into_iter()
        .map(|(i, mask)| PredicateIndicator { column: metas[i].name.clone(), mask })
        .collect())
}

/// Mask for a single leaf over the column's encoded domain.
pub fn leaf_mask(leaf: &PredLeaf, meta: &ColumnMeta) -> Result<Vec<f64>> {
    let mut mask = match meta.kind {
        ColumnKind::Continuous => continuous_mask(leaf, meta)?,
        ColumnKind::Binary | ColumnKind::Categorical => dictionary_mask(leaf, meta)?,
        ColumnKind::Unsupported => {
            return Err(CardError::Invalid(format!(
                "predicate on unsupported column {}",
                meta.name
            )))
        }
    };
    if leaf.negated {
        for m in &mut mask {
            *m = 1.0 - *m;
        }
    }
    Ok(mask)
}

fn dictionary_mask(leaf: &PredLeaf, meta: &ColumnMeta) -> Result<Vec<f64>> {
    let dict = &meta.dictionary;
    let matches_eq = |raw: &str, lit: &Literal| -> bool {
        match lit {
            Literal::Text(s) => raw == s,
            Literal::Num(x) => raw.parse::<f64>().map(|v| v == *x).unwrap_or(false),
        }
    };
    match leaf.op {
        CmpOp::Eq | CmpOp::In => {
            let mask = dict
                .iter()
                .map(|raw| {
                    if leaf.args.iter().any(|lit| matches_eq(raw, lit)) { 1.0 } else { 0.0 }
                })
                .collect();
            Ok(mask)
        }
        CmpOp::Ne => {
            let lit = &leaf.args[0];
            Ok(dict.iter().map(|raw| if matches_eq(raw, lit) { 0.0 } else { 1.0 }).collect())
        }
        CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge | CmpOp::Between => {
            // Range ops apply when the dictionary holds numbers; codes that
            // fail to parse (including missing "") never match.
            let parsed: Vec<Option<f64>> = dict.iter().map(|d| d.parse().ok()).collect();
            if parsed.iter().all(Option::is_none) {
                return Err(CardError::Invalid(format!(
                    "range predicate on non-numeric column {}",
                    meta.name
                )));
            }
            let lo_hi = range_bounds(leaf)?;
            Ok(parsed
                .iter()
                .map(|v| match v {
                    Some(x) => {
                        if value_in_range(*x, leaf.op, &lo_hi) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    None => 0.0,
                })
                .collect())
        }
    }
}

fn range_bounds(leaf: &PredLeaf) -> Result<(f64, f64)> {
    let num = |i: usize| -> Result<f64> {
        leaf.args
            .get(i)
            .and_then(Literal::as_num)
            .ok_or_else(|| CardError::Invalid("range predicate requires numeric literal".into()))
    };
    Ok(match leaf.op {
        CmpOp::Between => (num(0)?, num(1)?),
        _ => {
            let x = num(0)?;
            (x, x)
        }
    })
}

fn value_in_range(v: f64, op: CmpOp, bounds: &(f64, f64)) -> bool {
    match op {
        CmpOp::Lt => v < bounds.0,
        CmpOp::Le => v <= bounds.0,
        CmpOp::Gt => v > bounds.0,
        CmpOp::Ge => v >= bounds.0,
        CmpOp::Between => v >= bounds.0 && v <= bounds.1,
        _ => unreachable!(),
    }
}

fn continuous_mask(leaf: &PredLeaf, meta: &ColumnMeta) -> Result<Vec<f64>> {
    // Interval of values selected by the leaf; fractional coverage of partly
    // overlapped bins assumes values are uniform within a bin.
    let (lo, hi) = match leaf.op {
        CmpOp::Lt | CmpOp::Le => (f64::NEG_INFINITY, range_bounds(leaf)?.0),
        CmpOp::Gt | CmpOp::Ge => (range_bounds(leaf)?.0, f64::INFINITY),
        CmpOp::Between => range_bounds(leaf)?,
        CmpOp::Eq => {
            let x = range_bounds(leaf)?.0;
            (x, x)
        }
        CmpOp::Ne => {
            // complement of a zero-width interval: everything
            let mut mask = vec![1.0; meta.domain_size];
            if let Some(mc) = meta.missing_code {
                mask[mc as usize] = 1.0;
            }
            return Ok(mask);
        }
        CmpOp::In => {
            // points carry zero mass under the uniform-within-bin model
            return Ok(vec![0.0; meta.domain_size]);
        }
    };
    let mut mask = vec![0.0; meta.domain_size];
    for bin in 0..meta.value_bins() {
        let (left, right) = meta.bin_range(bin);
        let width = right - left;
        let frac = if width <= 0.0 {
            // degenerate bin: a single value
            if left >= lo && left <= hi {
                1.0
            } else {
                0.0
            }
        } else {
            let cov = (hi.min(right) - lo.max(left)).max(0.0);
            (cov / width).clamp(0.0, 1.0)
        };
        mask[bin] = frac;
    }
    if let Some(mc) = meta.missing_code {
        mask[mc as usize] = 0.0;
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Ground-truth evaluation
// ---------------------------------------------------------------------------

/// Predicate compiled against one table for exact row evaluation. Dictionary
/// leaves test code membership (same semantics as their masks); continuous
/// leaves compare raw values.
pub struct CompiledPred {
    node: CompiledNode,
}

enum CompiledNode {
    True,
    CodeSet { col: usize, member: Vec<bool> },
    NumCmp { col: usize, op: CmpOp, bounds: (f64, f64), negated: bool },
    And(Vec<CompiledNode>),
    Or(Vec<CompiledNode>),
}

pub fn compile_pred(pred: &Pred, table: &TableData) -> Result<CompiledPred> {
    Ok(CompiledPred { node: compile_node(pred, table)? })
}

/// Compile only this table's leaves of a conjunctive multi-table predicate.
pub fn compile_table_filter(spec: &QuerySpec, table: &TableData) -> Result<CompiledPred> {
    let leaves = spec.leaves_for_table(table)?;
    let nodes = leaves
        .iter()
        .map(|l| compile_leaf(l, table))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompiledPred {
        node: if nodes.is_empty() { CompiledNode::True } else { CompiledNode::And(nodes) },
    })
}

fn compile_node(pred: &Pred, table: &TableData) -> Result<CompiledNode> {
    match pred {
        Pred::True => Ok(CompiledNode::True),
        Pred::Leaf(l) => compile_leaf(l, table),
        Pred::And(cs) => Ok(CompiledNode::And(
            cs.iter().map(|c| compile_node(c, table)).collect::<Result<_>>()?,
        )),
        Pred::Or(cs) => Ok(CompiledNode::Or(
            cs.iter().map(|c| compile_node(c, table)).collect::<Result<_>>()?,
        )),
        Pred::Not(inner) => match inner.as_ref() {
            Pred::Leaf(l) => compile_leaf(&negate_leaf(l.clone()), table),
            _ => Err(CardError::Invalid("NOT not pushed to leaves".into())),
        },
    }
}

fn compile_leaf(leaf: &PredLeaf, table: &TableData) -> Result<CompiledNode> {
    let (idx, meta) = table.column(&leaf.col.column)?;
    match meta.kind {
        ColumnKind::Continuous => {
            let bounds = match leaf.op {
                CmpOp::In => (f64::NAN, f64::NAN),
                _ => range_bounds(leaf)?,
            };
            Ok(CompiledNode::NumCmp { col: idx, op: leaf.op, bounds, negated: leaf.negated })
        }
        _ => {
            let mask = leaf_mask(leaf, meta)?;
            Ok(CompiledNode::CodeSet { col: idx, member: mask.iter().map(|&m| m == 1.0).collect() })
        }
    }
}

impl CompiledPred {
    pub fn matches(&self, table: &TableData, row: usize) -> bool {
        eval_node(&self.node, table, row)
    }

    pub fn count(&self, table: &TableData) -> u64 {
        (0..table.row_count).filter(|&r| self.matches(table, r)).count() as u64
    }
}

fn eval_node(node: &CompiledNode, table: &TableData, row: usize) -> bool {
    match node {
        CompiledNode::True => true,
        CompiledNode::CodeSet { col, member } => {
            member[table.codes(*col)[row] as usize]
        }
        CompiledNode::NumCmp { col, op, bounds, negated } => {
            let v = table.raw_numeric(*col).map(|r| r[row]).unwrap_or(f64::NAN);
            let hit = if v.is_nan() {
                false
            } else {
                match op {
                    CmpOp::Eq => v == bounds.0,
                    CmpOp::Ne => v != bounds.0,
                    CmpOp::In => false,
                    _ => value_in_range(v, *op, bounds),
                }
            };
            hit != *negated
        }
        CompiledNode::And(cs) => cs.iter().all(|c| eval_node(c, table, row)),
        CompiledNode::Or(cs) => cs.iter().any(|c| eval_node(c, table, row)),
    }
}
