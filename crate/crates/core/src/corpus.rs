//! Query preparation: cleaning, deduplication, evaluation-leakage screening
//! and SFT mixing.

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::text;

/// One raw input row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default)]
    pub source: String,
}

/// A cleaned query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft_answer: Option<String>,
    #[serde(default)]
    pub source: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), sft_answer: None, source: String::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CleaningRules {
    /// Minimum number of whitespace tokens a cleaned query must keep.
    pub min_words: usize,
}

impl Default for CleaningRules {
    fn default() -> Self {
        Self { min_words: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    EmptyAfterClean,
    BelowMinLength,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub kept: usize,
    pub rejected_empty: usize,
    pub rejected_noise: usize,
    pub deduped: usize,
    pub leaked: usize,
}

impl CleanReport {
    pub fn total(&self) -> usize {
        self.kept + self.rejected_empty + self.rejected_noise + self.deduped + self.leaked
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorpusError {
    #[error("record {index} has an empty id")]
    EmptyId { index: usize },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("threshold {0} outside its allowed range")]
    BadThreshold(f64),
    #[error("sft ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("sft ratio {0} requested but no sft pairs were supplied")]
    NoSftPairs(f64),
    #[error("sft pair `{0}` has no answer")]
    MissingSftAnswer(String),
}

static MD_IMAGE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"!\[[^\]]*\]\([^)]*\)").unwrap());
static HTML_TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<(?:/?[A-Za-z][^<>]*|!--[^>]*--)>").unwrap());
static URL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(?:https?|ftp)://\S*").unwrap());

fn clean_pass(input: &str) -> String {
    let s = MD_IMAGE.replace_all(input, " ");
    let s = HTML_TAG.replace_all(&s, " ");
    let s = URL.replace_all(&s, " ");

    let mut flat = String::with_capacity(s.len());
    for ch in s.chars() {
        if ch == '\n' {
            flat.push('\n');
        } else if ch.is_whitespace() {
            flat.push(' ');
        } else if !ch.is_control() {
            flat.push(ch);
        }
    }

    let mut lines: Vec<String> = Vec::new();
    for line in flat.split('\n') {
        let collapsed = line.split(' ').filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ");
        // at most one blank line between paragraphs
        if collapsed.is_empty() && lines.last().is_some_and(|l| l.is_empty()) {
            continue;
        }
        lines.push(collapsed);
    }
    while lines.first().is_some_and(|l| l.is_empty()) {
        lines.remove(0);
    }
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

/// Strips URLs, markdown images, HTML tags and control characters, then
/// normalizes whitespace. Applied until a fixpoint so the result is stable
/// under re-cleaning.
pub fn clean_text(input: &str) -> String {
    let mut cur = clean_pass(input);
    loop {
        let next = clean_pass(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

pub fn clean_record(raw: &RawRecord, rules: &CleaningRules) -> Result<Query, Rejection> {
    let text = clean_text(&raw.text);
    if text.is_empty() {
        return Err(Rejection::EmptyAfterClean);
    }
    if text.split_whitespace().count() < rules.min_words {
        return Err(Rejection::BelowMinLength);
    }
    let sft_answer = raw.answer.as_deref().map(clean_text).filter(|a| !a.is_empty());
    Ok(Query { id: raw.id.clone(), text, sft_answer, source: raw.source.clone() })
}

fn check_ids(raws: &[RawRecord]) -> Result<(), CorpusError> {
    let mut seen = HashSet::with_capacity(raws.len());
    for (index, r) in raws.iter().enumerate() {
        if r.id.is_empty() {
            return Err(CorpusError::EmptyId { index });
        }
        if !seen.insert(r.id.as_str()) {
            return Err(CorpusError::DuplicateId(r.id.clone()));
        }
    }
    Ok(())
}

/// Keeps the first occurrence of every query and drops later exact
/// (normalized) duplicates and word-3-gram near-duplicates whose Jaccard
/// index against an already kept query reaches `near_dup_threshold`.
pub fn dedupe(queries: Vec<Query>, near_dup_threshold: f64) -> Result<(Vec<Query>, usize), CorpusError> {
    if !(0.0..=1.0).contains(&near_dup_threshold) {
        return Err(CorpusError::BadThreshold(near_dup_threshold));
    }
    let mut kept: Vec<Query> = Vec::new();
    let mut kept_shingles: Vec<HashSet<String>> = Vec::new();
    let mut exact: HashSet<String> = HashSet::new();
    let mut postings: HashMap<String, Vec<usize>> = HashMap::new();
    let mut dropped = 0usize;

    for q in queries {
        let norm = text::normalize(&q.text);
        if exact.contains(&norm) {
            dropped += 1;
            continue;
        }
        let sh = text::shingles3(&q.text);
        let near_dup = if near_dup_threshold <= 0.0 {
            !kept.is_empty()
        } else {
            let mut candidates: Vec<usize> = sh.iter().filter_map(|g| postings.get(g)).flatten().copied().collect();
            candidates.sort_unstable();
            candidates.dedup();
            candidates
                .into_iter()
                .any(|i| text::jaccard(&sh, &kept_shingles[i]).is_some_and(|j| j >= near_dup_threshold))
        };
        if near_dup {
            dropped += 1;
            continue;
        }
        let idx = kept.len();
        for g in &sh {
            postings.entry(g.clone()).or_default().push(idx);
        }
        exact.insert(norm);
        kept_shingles.push(sh);
        kept.push(q);
    }
    Ok((kept, dropped))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageEntry {
    pub normalized: String,
    pub shingles: HashSet<String>,
}

/// Normalized word-3-gram sets of evaluation queries that must not appear in
/// training data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeakageIndex {
    pub entries: Vec<LeakageEntry>,
    pub rule: &'static str,
}

pub const LEAKAGE_RULE: &str = "lowercase-whitespace-word3";

impl LeakageIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One entry per evaluation query, duplicates included. Blank evaluation
/// queries produce an inert entry that never matches.
pub fn build_leakage_index<S: AsRef<str>>(eval_queries: &[S]) -> LeakageIndex {
    LeakageIndex {
        entries: eval_queries
            .iter()
            .map(|q| LeakageEntry { normalized: text::normalize(q.as_ref()), shingles: text::shingles3(q.as_ref()) })
            .collect(),
        rule: LEAKAGE_RULE,
    }
}

/// True when `query` is too close to any evaluation query.
pub fn is_leaked(query: &str, index: &LeakageIndex, threshold: f64) -> bool {
    let norm = text::normalize(query);
    let padded = format!(" {norm} ");
    let sh = text::shingles3(query);
    index.entries.iter().filter(|e| !e.normalized.is_empty()).any(|e| {
        padded.contains(&format!(" {} ", e.normalized))
            || text::jaccard(&sh, &e.shingles).is_some_and(|j| j >= threshold)
    })
}

pub fn filter_leakage(
    queries: Vec<Query>,
    index: &LeakageIndex,
    threshold: f64,
) -> Result<(Vec<Query>, Vec<Query>), CorpusError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CorpusError::BadThreshold(threshold));
    }
    if index.is_empty() {
        return Ok((queries, Vec::new()));
    }
    let flags: Vec<bool> = queries.par_iter().map(|q| is_leaked(&q.text, index, threshold)).collect();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (q, leaked) in queries.into_iter().zip(flags) {
        if leaked {
            removed.push(q);
        } else {
            kept.push(q);
        }
    }
    Ok((kept, removed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Ptr,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedQuery {
    pub kind: ItemKind,
    pub query: Query,
}

/// Interleaves SFT pairs into the PTR queries so that SFT items make up
/// `ratio` of the output. All PTR queries are kept; the number of SFT items is
/// `round(ratio * |ptr| / (1 - ratio))`, capped by the supply. `ratio == 1`
/// returns the SFT pairs alone.
pub fn mix_sft(
    ptr_queries: Vec<Query>,
    sft_pairs: Vec<Query>,
    ratio: f64,
    seed: u64,
) -> Result<Vec<MixedQuery>, CorpusError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CorpusError::BadRatio(ratio));
    }
    if ratio > 0.0 && sft_pairs.is_empty() {
        return Err(CorpusError::NoSftPairs(ratio));
    }
    if let Some(q) = sft_pairs.iter().find(|q| q.sft_answer.is_none()) {
        return Err(CorpusError::MissingSftAnswer(q.id.clone()));
    }
    let wrap = |kind| move |query| MixedQuery { kind, query };
    if ratio == 0.0 {
        return Ok(ptr_queries.into_iter().map(wrap(ItemKind::Ptr)).collect());
    }
    if ratio == 1.0 {
        return Ok(sft_pairs.into_iter().map(wrap(ItemKind::Sft)).collect());
    }

    let wanted = (ratio * ptr_queries.len() as f64 / (1.0 - ratio)).round() as usize;
    let k = wanted.min(sft_pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pick: Vec<usize> = (0..sft_pairs.len()).collect();
    pick.shuffle(&mut rng);
    let mut pick: Vec<usize> = pick.into_iter().take(k).collect();
    pick.sort_unstable();
    let pick: HashSet<usize> = pick.into_iter().collect();
    let mut sft_iter = sft_pairs.into_iter().enumerate().filter(|(i, _)| pick.contains(i)).map(|(_, q)| q);

    let total = ptr_queries.len() + k;
    let mut slots: Vec<usize> = (0..total).collect();
    slots.shuffle(&mut rng);
    let sft_slots: HashSet<usize> = slots.into_iter().take(k).collect();

    let mut ptr_iter = ptr_queries.into_iter();
    let mut out = Vec::with_capacity(total);
    for slot in 0..total {
        let item = if sft_slots.contains(&slot) {
            sft_iter.next().map(wrap(ItemKind::Sft))
        } else {
            ptr_iter.next().map(wrap(ItemKind::Ptr))
        };
        out.extend(item);
    }
    Ok(out)
}

/// Thresholds for [`prepare`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorpusConfig {
    pub rules: CleaningRules,
    pub near_dup_threshold: f64,
    pub leakage_threshold: f64,
    pub sft_ratio: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { rules: CleaningRules::default(), near_dup_threshold: 0.9, leakage_threshold: 0.5, sft_ratio: 0.2 }
    }
}

/// Clean → dedupe → leakage filter over one ingest batch.
pub fn prepare(
    raws: &[RawRecord],
    cfg: &CorpusConfig,
    index: &LeakageIndex,
) -> Result<(Vec<Query>, CleanReport), CorpusError> {
    check_ids(raws)?;
    let mut report = CleanReport::default();
    let mut cleaned = Vec::with_capacity(raws.len());
    for outcome in raws.par_iter().map(|r| clean_record(r, &cfg.rules)).collect::<Vec<_>>() {
        match outcome {
            Ok(q) => cleaned.push(q),
            Err(Rejection::EmptyAfterClean) => report.rejected_empty += 1,
            Err(Rejection::BelowMinLength) => report.rejected_noise += 1,
        }
    }
    let (unique, deduped) = dedupe(cleaned, cfg.near_dup_threshold)?;
    report.deduped = deduped;
    let (kept, leaked) = filter_leakage(unique, index, cfg.leakage_threshold)?;
    report.leaked = leaked.len();
    report.kept = kept.len();
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(id: &str, text: &str) -> RawRecord {
        RawRecord { id: id.into(), text: text.into(), answer: None, source: "t".into() }
    }

    fn q(id: &str, text: &str) -> Query {
        Query::new(id, text)
    }

    #[test]
    fn strips_url() {
        let out = clean_record(&raw("1", "What is 2+2? see http://a.b/img.png"), &CleaningRules::default());
        assert_eq!(out.unwrap().text, "What is 2+2? see");
    }

    #[test]
    fn whitespace_only_is_empty() {
        let out = clean_record(&raw("1", "   "), &CleaningRules::default());
        assert_eq!(out, Err(Rejection::EmptyAfterClean));
    }

    #[test]
    fn tabs_collapse() {
        let rules = CleaningRules { min_words: 2 };
        assert_eq!(clean_record(&raw("1", "hi\t\tthere "), &rules).unwrap().text, "hi there");
        // the default three-word floor rejects it
        assert_eq!(clean_record(&raw("1", "hi\t\tthere "), &CleaningRules::default()), Err(Rejection::BelowMinLength));
    }

    #[test]
    fn strips_markup_and_controls() {
        let s = clean_text("<p>Look ![cat](http://x/c.png) here</p>\u{7}\r\n\n\n\nnext  line");
        assert_eq!(s, "Look here\n\nnext line");
    }

    #[test]
    fn links_inside_markup_are_removed() {
        assert_eq!(clean_text("go <a href=\"x\">https://evil.example/</a> now"), "go now");
        assert_eq!(clean_text("a < b and c > d"), "a < b and c > d");
    }

    #[test]
    fn dedupe_examples() {
        let (k, d) = dedupe(vec![q("1", "A b c"), q("2", "a B c")], 1.0).unwrap();
        assert_eq!((k.len(), d), (1, 1));
        assert_eq!(k[0].id, "1");

        let (k, _) = dedupe(vec![q("1", "red green blue yellow"), q("2", "cyan magenta black white")], 0.9).unwrap();
        assert_eq!(k.len(), 2);

        // shared 4 of 6 distinct 3-grams: 0.667 >= 0.5
        let (k, d) =
            dedupe(vec![q("1", "the cat sat on the mat today"), q("2", "the cat sat on the mat tonight")], 0.5)
                .unwrap();
        assert_eq!((k.len(), d), (1, 1));
        assert!(dedupe(vec![], 1.5).is_err());
    }

    #[test]
    fn leakage_index_examples() {
        assert_eq!(build_leakage_index::<&str>(&[]).len(), 0);
        let idx = build_leakage_index(&["what is gravity"]);
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.entries[0].shingles, HashSet::from(["what is gravity".to_string()]));
        assert_eq!(build_leakage_index(&["x y z", "x y z"]).len(), 2);
    }

    #[test]
    fn leakage_filter_examples() {
        let idx = build_leakage_index(&["What is the boiling point of water"]);
        let (kept, removed) = filter_leakage(
            vec![
                q("1", "what is the boiling point of water"),
                q("2", "describe photosynthesis in plants"),
                q("3", "Explain: what is the boiling point of water at altitude?"),
            ],
            &idx,
            0.5,
        )
        .unwrap();
        assert_eq!(removed.iter().map(|q| q.id.as_str()).collect::<Vec<_>>(), ["1", "3"]);
        assert_eq!(kept.len(), 1);
        assert!(filter_leakage(vec![], &idx, 0.0).is_err());
    }

    #[test]
    fn toy_corpus_with_one_plant() {
        let eval = "which planet has the most moons";
        let mut corpus: Vec<Query> =
            (0..9).map(|i| q(&i.to_string(), &format!("topic{i} alpha{i} beta{i} gamma{i}"))).collect();
        corpus.insert(4, q("plant", eval));
        // brute force: only the plant overlaps the eval 3-grams at all
        let idx = build_leakage_index(&[eval]);
        for c in &corpus {
            let j = text::jaccard(&text::shingles3(&c.text), &idx.entries[0].shingles).unwrap();
            assert_eq!(j >= 0.5, c.id == "plant");
        }
        let (kept, removed) = filter_leakage(corpus, &idx, 0.5).unwrap();
        assert_eq!(removed.len(), 1);
        assert_eq!(kept.len(), 9);
    }

    fn sft(n: usize) -> Vec<Query> {
        (0..n)
            .map(|i| Query {
                sft_answer: Some(format!("answer {i}")),
                ..q(&format!("s{i}"), &format!("sft question {i}"))
            })
            .collect()
    }

    fn ptr(n: usize) -> Vec<Query> {
        (0..n).map(|i| q(&format!("p{i}"), &format!("ptr question {i}"))).collect()
    }

    #[test]
    fn mix_examples() {
        let out = mix_sft(ptr(5), sft(3), 0.0, 1).unwrap();
        assert!(out.iter().all(|m| m.kind == ItemKind::Ptr));
        assert_eq!(out.iter().map(|m| m.query.clone()).collect::<Vec<_>>(), ptr(5));

        let out = mix_sft(ptr(5), sft(3), 1.0, 1).unwrap();
        assert_eq!(out.iter().map(|m| m.query.clone()).collect::<Vec<_>>(), sft(3));

        let out = mix_sft(ptr(90), sft(10), 0.1, 42).unwrap();
        assert_eq!(out.len(), 100);
        assert_eq!(out.iter().filter(|m| m.kind == ItemKind::Sft).count(), 10);
        // interleaved, not appended
        assert!(out[..90].iter().any(|m| m.kind == ItemKind::Sft));
        assert_eq!(out, mix_sft(ptr(90), sft(10), 0.1, 42).unwrap());

        assert_eq!(mix_sft(ptr(3), vec![], 0.2, 0), Err(CorpusError::NoSftPairs(0.2)));
        assert_eq!(mix_sft(ptr(3), ptr(1), 0.2, 0), Err(CorpusError::MissingSftAnswer("p0".into())));
    }

    #[test]
    fn prepare_rejects_duplicate_ids() {
        let raws = vec![raw("a", "one two three"), raw("a", "four five six")];
        assert_eq!(
            prepare(&raws, &CorpusConfig::default(), &LeakageIndex::default()),
            Err(CorpusError::DuplicateId("a".into()))
        );
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(s in "(?s)[a-zA-Z <>/:!\\[\\]()\t\r\n\u{1}.h-tpf]{0,60}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once);
        }

        #[test]
        fn report_counts_sum(texts in proptest::collection::vec("[a-c ]{0,12}", 0..40)) {
            let raws: Vec<RawRecord> = texts.iter().enumerate().map(|(i, t)| raw(&i.to_string(), t)).collect();
            let idx = build_leakage_index(&["a b c"]);
            let (kept, report) = prepare(&raws, &CorpusConfig::default(), &idx).unwrap();
            prop_assert_eq!(report.total(), raws.len());
            prop_assert_eq!(report.kept, kept.len());
        }

        #[test]
        fn dedupe_ignores_repeated_suffix(texts in proptest::collection::vec("[a-d]( [a-d]){0,5}", 0..20)) {
            let qs: Vec<Query> = texts.iter().enumerate().map(|(i, t)| q(&i.to_string(), t)).collect();
            let doubled: Vec<Query> = qs.iter().chain(qs.iter()).cloned().collect();
            let (a, _) = dedupe(qs, 0.7).unwrap();
            let (b, _) = dedupe(doubled, 0.7).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn empty_index_removes_nothing(texts in proptest::collection::vec("[a-z ]{1,20}", 0..20)) {
            let qs: Vec<Query> = texts.iter().enumerate().map(|(i, t)| q(&i.to_string(), t)).collect();
            let (kept, removed) = filter_leakage(qs.clone(), &build_leakage_index::<&str>(&[]), 0.5).unwrap();
            prop_assert!(removed.is_empty());
            prop_assert_eq!(kept, qs);
        }
    }
}
