//! Hamming-distance retrieval over packed codes, ranking metrics, top-K
//! annotation metrics, and a linear one-vs-rest classifier for codes.

mod annotate;
mod svm;

pub use annotate::{annotate_top_k, overall_metrics, AnnotationMetrics};
pub use svm::{classify_features, classify_on_codes, LinearClassifier, SvmConfig};

use std::fmt::Write as _;
use std::io::Write;

use crate::binarizer::BinaryCodeSet;
use crate::datasets::LabelSet;
use crate::error::{Error, Result};
use crate::par;

/// One packed code row with its bit length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Code<'a> {
    pub words: &'a [u64],
    pub bits: usize,
}

impl BinaryCodeSet {
    pub fn code(&self, i: usize) -> Code<'_> {
        Code {
            words: self.row(i),
            bits: self.code_length(),
        }
    }
}

/// Number of differing bits, ignoring anything past the code length.
pub fn hamming_distance(a: Code<'_>, b: Code<'_>) -> Result<u32> {
    if a.bits != b.bits || a.words.len() != b.words.len() || a.words.len() != a.bits.div_ceil(64) {
        return Err(Error::Usage(format!(
            "cannot compare codes of length {} and {}",
            a.bits, b.bits
        )));
    }
    let tail = match a.bits % 64 {
        0 => !0u64,
        r => (1u64 << r) - 1,
    };
    let last = a.words.len() - 1;
    Ok(a.words
        .iter()
        .zip(b.words)
        .enumerate()
        .map(|(i, (x, y))| {
            let d = x ^ y;
            (if i == last { d & tail } else { d }).count_ones()
        })
        .sum())
}

#[inline]
fn packed_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Which database items count as true neighbours of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relevance {
    /// Identical class index.
    SameClass,
    /// At least one shared positive label.
    ShareAny,
}

/// Labelled database of codes.
#[derive(Debug, Clone)]
pub struct HammingIndex {
    codes: BinaryCodeSet,
    labels: LabelSet,
    masks: Vec<u128>,
}

impl HammingIndex {
    pub fn new(codes: BinaryCodeSet, labels: LabelSet) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} codes but {} labels",
                codes.len(),
                labels.len()
            )));
        }
        let masks = labels.masks()?;
        Ok(Self {
            codes,
            labels,
            masks,
        })
    }

    pub fn codes(&self) -> &BinaryCodeSet {
        &self.codes
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn relevance(&self) -> Relevance {
        match self.labels {
            LabelSet::Multiclass { .. } => Relevance::SameClass,
            LabelSet::Multilabel { .. } => Relevance::ShareAny,
        }
    }

    /// Database indices in ascending `(distance, index)` order, with
    /// distances. Uses a counting sort over the `L + 1` possible distances.
    fn order(&self, query: &[u64], skip: Option<usize>) -> (Vec<usize>, Vec<u32>) {
        let l = self.codes.code_length();
        let dist: Vec<u32> = (0..self.len())
            .map(|j| packed_distance(query, self.codes.row(j)))
            .collect();
        let mut start = vec![0usize; l + 2];
        for (j, &d) in dist.iter().enumerate() {
            if Some(j) != skip {
                start[d as usize + 1] += 1;
            }
        }
        for d in 1..start.len() {
            start[d] += start[d - 1];
        }
        let total = start[l + 1];
        let mut order = vec![0usize; total];
        for (j, &d) in dist.iter().enumerate() {
            if Some(j) != skip {
                order[start[d as usize]] = j;
                start[d as usize] += 1;
            }
        }
        (order, dist)
    }

    fn check_queries(&self, queries: &BinaryCodeSet, labels: &LabelSet) -> Result<Vec<u128>> {
        if queries.code_length() != self.codes.code_length() {
            return Err(Error::Usage(format!(
                "query codes have {} bits, database codes {}",
                queries.code_length(),
                self.codes.code_length()
            )));
        }
        if queries.len() != labels.len() || labels.kind() != self.labels.kind() {
            return Err(Error::Usage(
                "query labels must match the query count and the database label kind".into(),
            ));
        }
        if labels.classes() != self.labels.classes() {
            return Err(Error::Usage(format!(
                "query labels have {} classes, database {}",
                labels.classes(),
                self.labels.classes()
            )));
        }
        labels.masks()
    }
}

/// How queries relate to the database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuerySource {
    /// Queries are a separate set; nothing is excluded.
    #[default]
    Separate,
    /// Query `i` is database row `i` and is left out of its own ranking.
    Database,
}

/// Full ranking of the database for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedRetrieval {
    pub query: usize,
    /// `(database index, distance)`, ascending by distance then index.
    pub entries: Vec<(usize, u32)>,
    pub relevant: Vec<bool>,
}

impl RankedRetrieval {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_source(index: &HammingIndex, queries: &BinaryCodeSet, source: QuerySource) -> Result<()> {
    if source == QuerySource::Database && queries.len() != index.len() {
        return Err(Error::Usage(
            "queries drawn from the database must cover it row for row".into(),
        ));
    }
    Ok(())
}

/// Ranks the whole database for every query. Memory grows with
/// `queries x database`; prefer [`evaluate_retrieval`] at scale.
pub fn rank_all(
    index: &HammingIndex,
    queries: &BinaryCodeSet,
    query_labels: &LabelSet,
    source: QuerySource,
) -> Result<Vec<RankedRetrieval>> {
    let qmasks = index.check_queries(queries, query_labels)?;
    check_source(index, queries, source)?;
    Ok(par::map_range(queries.len(), |q| {
        let skip = (source == QuerySource::Database).then_some(q);
        let (order, dist) = index.order(queries.row(q), skip);
        RankedRetrieval {
            query: q,
            relevant: order.iter().map(|&j| qmasks[q] & index.masks[j] != 0).collect(),
            entries: order.into_iter().map(|j| (j, dist[j])).collect(),
        }
    }))
}

/// Mean average precision plus how many queries were skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSummary {
    pub map: f64,
    pub evaluated: usize,
    /// Queries with no relevant item; excluded from the mean.
    pub without_relevant: usize,
}

fn average_precision(relevant: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hits, mut sum) = (0usize, 0.0f64);
    for (k, r) in relevant.enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn summarize(aps: impl Iterator<Item = Option<f64>>) -> Result<MapSummary> {
    let (mut sum, mut evaluated, mut without) = (0.0, 0usize, 0usize);
    for ap in aps {
        match ap {
            Some(v) => {
                sum += v;
                evaluated += 1;
            }
            None => without += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::Usage(if without == 0 {
            "mAP needs at least one query".into()
        } else {
            format!("none of the {without} queries has a relevant item")
        }));
    }
    if without > 0 {
        log::warn!("{without} queries without relevant items were excluded from mAP");
    }
    Ok(MapSummary {
        map: sum / evaluated as f64,
        evaluated,
        without_relevant: without,
    })
}

/// mAP over full rankings. Queries without any relevant item are excluded
/// and counted.
pub fn mean_average_precision(rankings: &[RankedRetrieval]) -> Result<MapSummary> {
    summarize(rankings.iter().map(|r| average_precision(r.relevant.iter().copied())))
}

fn clamp_k(k: usize, len: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Usage("precision@k needs k >= 1".into()));
    }
    if k > len {
        log::warn!("precision@{k} exceeds the ranking length {len}; using {len}");
    }
    Ok(k.min(len))
}

/// Mean over queries of (relevant items in the top `k`) / `k`.
pub fn precision_at_k(rankings: &[RankedRetrieval], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Usage("precision@k needs at least one query".into()));
    }
    let k = clamp_k(k, rankings.iter().map(RankedRetrieval::len).min().unwrap_or(0))?;
    if k == 0 {
        return Err(Error::Usage("rankings are empty".into()));
    }
    let total: f64 = rankings
        .iter()
        .map(|r| r.relevant[..k].iter().filter(|&&b| b).count() as f64 / k as f64)
        .sum();
    Ok(total / rankings.len() as f64)
}

/// Retrieval metrics computed without materialising rankings.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub map: MapSummary,
    /// `(k, precision@k)` in the order requested.
    pub precision: Vec<(usize, f64)>,
}

/// Streams every query through the ranking and reduces it to AP and the
/// requested precision@k values.
pub fn evaluate_retrieval(
    index: &HammingIndex,
    queries: &BinaryCodeSet,
    query_labels: &LabelSet,
    source: QuerySource,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let qmasks = index.check_queries(queries, query_labels)?;
    check_source(index, queries, source)?;
    if queries.is_empty() {
        return Err(Error::Usage("no queries".into()));
    }
    let db_len = index.len() - usize::from(source == QuerySource::Database);
    let ks: Vec<usize> = ks
        .iter()
        .map(|&k| clamp_k(k, db_len))
        .collect::<Result<_>>()?;
    let per_query = par::map_range(queries.len(), |q| {
        let skip = (source == QuerySource::Database).then_some(q);
        let (order, _) = index.order(queries.row(q), skip);
        let rel: Vec<bool> = order.iter().map(|&j| qmasks[q] & index.masks[j] != 0).collect();
        let p: Vec<f64> = ks
            .iter()
            .map(|&k| rel[..k].iter().filter(|&&b| b).count() as f64 / k as f64)
            .collect();
        (average_precision(rel.into_iter()), p)
    });
    let map = summarize(per_query.iter().map(|(ap, _)| *ap))?;
    let precision = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, per_query.iter().map(|(_, p)| p[i]).sum::<f64>() / queries.len() as f64))
        .collect();
    Ok(RetrievalReport { map, precision })
}

/// `query_id<TAB>rank<TAB>db_id<TAB>distance<TAB>relevant` rows, keeping at
/// most `top` entries per query.
pub fn write_rankings_tsv<W: Write>(
    rankings: &[RankedRetrieval],
    top: Option<usize>,
    mut w: W,
) -> Result<()> {
    let mut s = String::from("query_id\trank\tdb_id\tdistance\trelevant\n");
    for r in rankings {
        let n = top.unwrap_or(r.len()).min(r.len());
        for (rank, ((db, d), rel)) in r.entries[..n].iter().zip(&r.relevant).enumerate() {
            writeln!(s, "{}\t{}\t{db}\t{d}\t{}", r.query, rank + 1, u8::from(*rel)).expect("string write");
        }
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// `metric,code_length,value` table.
pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (&'a str, usize, f64)>) -> String {
    let mut s = String::from("metric,code_length,value\n");
    for (m, l, v) in rows {
        writeln!(s, "{m},{l},{v:.6}").expect("string write");
    }
    s
}
