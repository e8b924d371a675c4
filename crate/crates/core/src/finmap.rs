//! Structured market descriptions: the two-level attribute taxonomy, schema
//! validation, rule-based aggregation of consecutive documents and the
//! tokenizer that turns a document into the denoiser's condition sequence.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Daily,
    Periodic,
}

/// One taxonomy category: its key and `(abbreviation, item name)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Category {
    pub name: &'static str,
    pub items: &'static [(&'static str, &'static str)],
}

pub const DAILY_TAXONOMY: &[Category] = &[
    Category { name: "Liquidity", items: &[("CBO", "Central Bank Ops"), ("FR", "Funding Rates"), ("NCD", "NCD Market")] },
    Category { name: "Sentiment", items: &[("MS", "Market Sentiment"), ("EC", "Equity Correlation")] },
    Category { name: "RatesBonds", items: &[("CBT", "Cash Bond Trends"), ("FP", "Futures Perf."), ("DF", "Driving Factors")] },
    Category { name: "CreditBonds", items: &[("OP", "Overall Perf."), ("TC", "Trading Char.")] },
    Category { name: "Derivatives", items: &[("IRS", "Int. Rate Swaps"), ("VOL", "Volatility")] },
    Category { name: "External", items: &[("FX", "FX Market"), ("OR", "Overseas Rates"), ("PM", "Precious Metals")] },
    Category { name: "Events", items: &[("ME", "Major Events"), ("EM", "Expectation Mgmt")] },
];

pub const PERIODIC_TAXONOMY: &[Category] = &[
    Category { name: "EconomicTheme", items: &[("MET", "Macro-Economic Theme")] },
    Category {
        name: "EconomicEnvironment",
        items: &[("EP", "Economic Period"), ("MP", "Monetary Policy"), ("IE", "International Env."), ("ETP", "External Policies")],
    },
    Category { name: "KeyPrices", items: &[("OCP", "Open/Close Prices"), ("SP", "Support Price"), ("RP", "Resistance Price")] },
    Category { name: "TechnicalTrends", items: &[("MT", "Moving Tendency"), ("PL", "Periodic Lines")] },
    Category { name: "CyclicalFactors", items: &[("HSP", "Hist. Same Period"), ("SE", "Seasonal Effect"), ("CE", "Calendar Effect")] },
    Category { name: "Events&Timeline", items: &[("EVT", "Crucial Events"), ("ED", "Events Development"), ("ET", "Expected Trend"), ("EI", "Event Impact")] },
    Category { name: "MarketSentiment", items: &[("IS", "Initial Sentiment"), ("MS", "Middle Sentiment"), ("ES", "End Sentiment")] },
    Category { name: "RiskAnalysis", items: &[("UR", "Upside Risk"), ("DR", "Downside Risk"), ("OR", "Other Risk")] },
];

pub fn taxonomy(level: Level) -> &'static [Category] {
    match level {
        Level::Daily => DAILY_TAXONOMY,
        Level::Periodic => PERIODIC_TAXONOMY,
    }
}

pub fn item_count(level: Level) -> usize {
    taxonomy(level).iter().map(|c| c.items.len()).sum()
}

fn known(level: Level, category: &str, item: &str) -> (bool, bool) {
    match taxonomy(level).iter().find(|c| c.name == category) {
        None => (false, false),
        Some(c) => (true, c.items.iter().any(|(abbr, _)| *abbr == item)),
    }
}

/// Half-open date range `[start, end)` over ISO dates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub start: String,
    pub end: String,
}

impl Span {
    pub fn new(start: impl Into<String>, end: impl Into<String>) -> Self {
        Self { start: start.into(), end: end.into() }
    }
}

pub type Attributes = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinMapDocument {
    pub level: Level,
    pub span: Span,
    /// Trading days covered; daily documents cover one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub days: Option<usize>,
    #[serde(default)]
    pub attributes: Attributes,
}

impl FinMapDocument {
    pub fn new(level: Level, span: Span) -> Self {
        let days = (level == Level::Daily).then_some(1);
        Self { level, span, days, attributes: BTreeMap::new() }
    }

    pub fn with(mut self, category: &str, item: &str, value: impl Into<String>) -> Self {
        self.set(category, item, value);
        self
    }

    pub fn set(&mut self, category: &str, item: &str, value: impl Into<String>) {
        self.attributes.entry(category.to_string()).or_default().insert(item.to_string(), value.into());
    }

    pub fn get(&self, category: &str, item: &str) -> Option<&str> {
        self.attributes.get(category)?.get(item).map(String::as_str)
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.attribute_count() == 0
    }

    pub fn day_count(&self) -> usize {
        self.days.unwrap_or(match self.level {
            Level::Daily => 1,
            Level::Periodic => 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    UnknownCategory(String),
    UnknownItem { category: String, item: String },
    InvertedSpan { start: String, end: String },
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::UnknownCategory(c) => write!(f, "unknown category {c}"),
            Self::UnknownItem { category, item } => write!(f, "unknown item {item} in {category}"),
            Self::InvertedSpan { start, end } => write!(f, "span end {end} precedes start {start}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Fraction of the level's items present.
    pub coverage: f64,
    /// Known items absent from the document, as `Category.ITEM`.
    pub missing: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn is_empty_document(&self) -> bool {
        self.coverage == 0.0
    }
}

pub fn validate(doc: &FinMapDocument) -> ValidationReport {
    let mut violations = Vec::new();
    if doc.span.end < doc.span.start {
        violations.push(Violation::InvertedSpan { start: doc.span.start.clone(), end: doc.span.end.clone() });
    }
    let mut present = 0usize;
    for (cat, items) in &doc.attributes {
        for item in items.keys() {
            match known(doc.level, cat, item) {
                (false, _) => {
                    if !violations.contains(&Violation::UnknownCategory(cat.clone())) {
                        violations.push(Violation::UnknownCategory(cat.clone()));
                    }
                }
                (true, false) => violations.push(Violation::UnknownItem { category: cat.clone(), item: item.clone() }),
                (true, true) => present += 1,
            }
        }
        if items.is_empty() && !known(doc.level, cat, "").0 {
            violations.push(Violation::UnknownCategory(cat.clone()));
        }
    }
    let missing = taxonomy(doc.level)
        .iter()
        .flat_map(|c| c.items.iter().map(move |(abbr, _)| (c.name, *abbr)))
        .filter(|(c, i)| doc.get(c, i).is_none())
        .map(|(c, i)| format!("{c}.{i}"))
        .collect();
    ValidationReport { violations, coverage: present as f64 / item_count(doc.level) as f64, missing }
}

/// Splits free text into candidate number tokens; only tokens that parse
/// completely (after dropping a trailing period) count.
pub fn numbers_in(text: &str) -> Vec<(f64, &str)> {
    text.split(|c: char| c.is_whitespace() || matches!(c, ',' | ';' | '(' | ')'))
        .map(|w| w.strip_suffix('.').unwrap_or(w))
        .filter(|w| !w.is_empty())
        .filter_map(|w| w.parse::<f64>().ok().filter(|x| x.is_finite()).map(|x| (x, w)))
        .collect()
}

/// Number text following `key` in `text`, e.g. `open 101.2`.
pub fn keyword_number<'a>(text: &'a str, key: &str) -> Option<(f64, &'a str)> {
    let mut words = text.split(|c: char| c.is_whitespace() || matches!(c, ',' | ';' | ':' | '(' | ')')).filter(|w| !w.is_empty());
    while let Some(w) = words.next() {
        if w.eq_ignore_ascii_case(key) {
            let next = words.next()?;
            let next = next.strip_suffix('.').unwrap_or(next);
            return next.parse::<f64>().ok().map(|x| (x, next));
        }
    }
    None
}

/// Per-item character budget for concatenated free text.
pub const TEXT_BUDGET: usize = 600;

/// Daily source items feeding each periodic free-text item.
const DAILY_SOURCES: &[((&str, &str), &[(&str, &str)])] = &[
    (("EconomicEnvironment", "EP"), &[("RatesBonds", "CBT")]),
    (("EconomicEnvironment", "MP"), &[("Liquidity", "CBO"), ("Liquidity", "FR"), ("Liquidity", "NCD")]),
    (("EconomicEnvironment", "IE"), &[("External", "FX"), ("External", "OR"), ("External", "PM")]),
    (("TechnicalTrends", "MT"), &[("RatesBonds", "FP")]),
    (("TechnicalTrends", "PL"), &[("Derivatives", "IRS"), ("Derivatives", "VOL")]),
    (("Events&Timeline", "ET"), &[("Events", "EM")]),
    (("RiskAnalysis", "OR"), &[("CreditBonds", "OP"), ("CreditBonds", "TC")]),
];

fn start_sentiment(doc: &FinMapDocument) -> Option<&str> {
    match doc.level {
        Level::Daily => doc.get("Sentiment", "MS"),
        Level::Periodic => doc.get("MarketSentiment", "IS"),
    }
}

fn end_sentiment(doc: &FinMapDocument) -> Option<&str> {
    match doc.level {
        Level::Daily => doc.get("Sentiment", "MS"),
        Level::Periodic => doc.get("MarketSentiment", "ES"),
    }
}

fn theme(doc: &FinMapDocument) -> Option<&str> {
    match doc.level {
        Level::Daily => doc.get("RatesBonds", "DF"),
        Level::Periodic => doc.get("EconomicTheme", "MET"),
    }
}

fn open_close(doc: &FinMapDocument) -> (Option<(f64, &str)>, Option<(f64, &str)>) {
    let src = match doc.level {
        Level::Daily => doc.get("RatesBonds", "FP"),
        Level::Periodic => doc.get("KeyPrices", "OCP"),
    };
    src.map(|s| (keyword_number(s, "open"), keyword_number(s, "close"))).unwrap_or((None, None))
}

fn support_candidates(doc: &FinMapDocument) -> Vec<(f64, &str)> {
    match doc.level {
        Level::Daily => doc.get("RatesBonds", "FP").and_then(|s| keyword_number(s, "low")).into_iter().collect(),
        Level::Periodic => doc.get("KeyPrices", "SP").map(numbers_in).unwrap_or_default(),
    }
}

fn resistance_candidates(doc: &FinMapDocument) -> Vec<(f64, &str)> {
    match doc.level {
        Level::Daily => doc.get("RatesBonds", "FP").and_then(|s| keyword_number(s, "high")).into_iter().collect(),
        Level::Periodic => doc.get("KeyPrices", "RP").map(numbers_in).unwrap_or_default(),
    }
}

fn events(doc: &FinMapDocument, category_item: (&str, &str)) -> Option<String> {
    match doc.level {
        Level::Daily => {
            let src = match category_item.1 {
                "EVT" => doc.get("Events", "ME"),
                _ => None,
            }?;
            Some(format!("[{}] {src}", doc.span.start))
        }
        Level::Periodic => doc.get(category_item.0, category_item.1).map(str::to_string),
    }
}

fn truncate(mut s: String, budget: usize) -> String {
    if s.chars().count() > budget {
        s = s.chars().take(budget).collect();
    }
    s
}

/// Merges consecutive documents into one periodic document over `target`.
///
/// Children must be all daily or all periodic and tile `target` exactly.
/// Key prices take the first open, last close, lowest support and highest
/// resistance; sentiment takes the first child's start, the middle child's
/// start and the last child's end; events are concatenated in order; other
/// text is concatenated with span labels and cut to [`TEXT_BUDGET`].
pub fn aggregate(children: &[FinMapDocument], target: &Span) -> Result<FinMapDocument> {
    let first = children.first().ok_or(Error::EmptyBatch)?;
    if children.iter().any(|c| c.level != first.level) {
        return Err(Error::MixedLevels);
    }
    let mut sorted: Vec<&FinMapDocument> = children.iter().collect();
    sorted.sort_by(|a, b| a.span.cmp(&b.span));
    let mut cursor = target.start.clone();
    for c in &sorted {
        if c.span.start > cursor {
            return Err(Error::SpanGap(cursor, c.span.start.clone()));
        }
        if c.span.start < cursor {
            return Err(Error::SpanOverlap(c.span.start.clone(), cursor));
        }
        cursor = c.span.end.clone();
    }
    if cursor < target.end {
        return Err(Error::SpanGap(cursor, target.end.clone()));
    }
    if cursor > target.end {
        return Err(Error::SpanOverlap(target.end.clone(), cursor));
    }
    let days = sorted.iter().map(|c| c.day_count()).sum();
    if sorted.len() == 1 && first.level == Level::Periodic {
        let mut out = sorted[0].clone();
        out.span = target.clone();
        out.days = Some(days);
        return Ok(out);
    }

    let mut out = FinMapDocument::new(Level::Periodic, target.clone());
    out.days = Some(days);
    let n = sorted.len();

    let mut themes: Vec<&str> = Vec::new();
    for c in &sorted {
        if let Some(t) = theme(c) {
            themes.push(t);
        }
    }
    if let Some(t) = mode(&themes) {
        out.set("EconomicTheme", "MET", t);
    }

    let open = sorted.iter().find_map(|c| open_close(c).0);
    let close = sorted.iter().rev().find_map(|c| open_close(c).1);
    match (open, close) {
        (Some((_, o)), Some((_, c))) => out.set("KeyPrices", "OCP", format!("open {o} close {c}")),
        (Some((_, o)), None) => out.set("KeyPrices", "OCP", format!("open {o}")),
        (None, Some((_, c))) => out.set("KeyPrices", "OCP", format!("close {c}")),
        (None, None) => {}
    }
    let supports: Vec<(f64, &str)> = sorted.iter().flat_map(|c| support_candidates(c)).collect();
    if let Some((_, s)) = supports.iter().fold(None::<(f64, &str)>, |acc, &(x, s)| match acc {
        Some((y, _)) if y <= x => acc,
        _ => Some((x, s)),
    }) {
        out.set("KeyPrices", "SP", s);
    }
    let resistances: Vec<(f64, &str)> = sorted.iter().flat_map(|c| resistance_candidates(c)).collect();
    if let Some((_, r)) = resistances.iter().fold(None::<(f64, &str)>, |acc, &(x, s)| match acc {
        Some((y, _)) if y >= x => acc,
        _ => Some((x, s)),
    }) {
        out.set("KeyPrices", "RP", r);
    }

    if let Some(s) = start_sentiment(sorted[0]) {
        out.set("MarketSentiment", "IS", s);
    }
    if let Some(s) = start_sentiment(sorted[n / 2]) {
        out.set("MarketSentiment", "MS", s);
    }
    if let Some(s) = end_sentiment(sorted[n - 1]) {
        out.set("MarketSentiment", "ES", s);
    }

    let event_items: &[&str] = match first.level {
        Level::Daily => &["EVT"],
        Level::Periodic => &["EVT", "ED", "EI"],
    };
    for item in event_items {
        let parts: Vec<String> = sorted.iter().filter_map(|c| events(c, ("Events&Timeline", item))).collect();
        if !parts.is_empty() {
            out.set("Events&Timeline", item, parts.join("; "));
        }
    }

    match first.level {
        Level::Daily => {
            for ((cat, item), sources) in DAILY_SOURCES {
                let parts: Vec<String> = sorted
                    .iter()
                    .filter_map(|c| {
                        let text: Vec<&str> = sources.iter().filter_map(|(sc, si)| c.get(sc, si)).collect();
                        (!text.is_empty()).then(|| format!("[{}] {}", c.span.start, text.join(" ")))
                    })
                    .collect();
                if !parts.is_empty() {
                    out.set(cat, item, truncate(parts.join(" "), TEXT_BUDGET));
                }
            }
        }
        Level::Periodic => {
            let handled = ["MET", "OCP", "SP", "RP", "IS", "MS", "ES", "EVT", "ED", "EI"];
            for cat in PERIODIC_TAXONOMY {
                for (item, _) in cat.items {
                    if handled.contains(item) {
                        continue;
                    }
                    let parts: Vec<String> =
                        sorted.iter().filter_map(|c| c.get(cat.name, item).map(|v| format!("[{}..{}] {v}", c.span.start, c.span.end))).collect();
                    if !parts.is_empty() {
                        out.set(cat.name, item, truncate(parts.join(" "), TEXT_BUDGET));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Most frequent value; ties go to the earliest.
fn mode<'a>(values: &[&'a str]) -> Option<&'a str> {
    let mut best: Option<(&str, usize)> = None;
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            continue;
        }
        let count = values.iter().filter(|w| *w == v).count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((v, count));
        }
    }
    best.map(|(v, _)| v)
}

pub const PAD_TOKEN: u32 = 0;
pub const NULL_TOKEN: u32 = 1;
pub const UNK_TOKEN: u32 = 2;
pub const TRUNC_TOKEN: u32 = 3;

/// Decimal magnitude classes `10^-4 .. 10^5` used for number tokens.
pub const NUMBER_BUCKETS: i32 = 10;
const BUCKET_OFFSET: i32 = 4;

/// Sign and magnitude class of `x`, e.g. `101.3 → "<num:+6>"`.
pub fn number_token(x: f64) -> String {
    if x == 0.0 {
        return "<num:0>".into();
    }
    let k = (libm::floor(libm::log10(libm::fabs(x))) as i32 + BUCKET_OFFSET).clamp(0, NUMBER_BUCKETS - 1);
    format!("<num:{}{k}>", if x < 0.0 { '-' } else { '+' })
}

fn number_text(tok: &str) -> Option<String> {
    let body = tok.strip_prefix("<num:")?.strip_suffix('>')?;
    if body == "0" {
        return Some("0".into());
    }
    let (sign, k) = body.split_at(1);
    let k: i32 = k.parse().ok()?;
    Some(format!("{}1e{}", if sign == "-" { "-" } else { "" }, k - BUCKET_OFFSET))
}

fn level_tag(level: Level) -> &'static str {
    match level {
        Level::Daily => "<daily>",
        Level::Periodic => "<periodic>",
    }
}

fn fixed_tokens() -> Vec<String> {
    let mut t: Vec<String> = ["<pad>", "<null>", "<unk>", "<trunc>", "<daily>", "<periodic>"].iter().map(|s| s.to_string()).collect();
    for level in [Level::Daily, Level::Periodic] {
        for c in taxonomy(level) {
            let tag = format!("<cat:{}>", c.name);
            if !t.contains(&tag) {
                t.push(tag);
            }
            for (abbr, _) in c.items {
                t.push(format!("<item:{}.{abbr}>", c.name));
            }
        }
    }
    t.push("<num:0>".into());
    for sign in ['+', '-'] {
        for k in 0..NUMBER_BUCKETS {
            t.push(format!("<num:{sign}{k}>"));
        }
    }
    t
}

fn value_words(value: &str) -> impl Iterator<Item = &str> {
    value.split_whitespace()
}

/// Token strings with stable ids: reserved markers, taxonomy tags, number
/// buckets, then words learned from a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Fixed tokens plus the `max_words` most frequent words (ties broken
    /// alphabetically) seen at least `min_count` times.
    pub fn build(docs: &[FinMapDocument], max_words: usize, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in docs {
            for items in d.attributes.values() {
                for v in items.values() {
                    for w in value_words(v).filter(|w| w.parse::<f64>().is_err()) {
                        *counts.entry(w).or_default() += 1;
                    }
                }
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = fixed_tokens();
        let fixed = tokens.len();
        for (w, _) in words {
            if tokens.len() - fixed >= max_words {
                break;
            }
            if !w.starts_with('<') {
                tokens.push(w.to_string());
            }
        }
        Self::from_parts(tokens)
    }

    /// Rebuilds from a saved token list; the list must start with the fixed tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let fixed = fixed_tokens();
        if tokens.len() < fixed.len() || tokens[..fixed.len()] != fixed[..] {
            return Err(Error::InvalidConfig("vocabulary does not start with the reserved tokens".into()));
        }
        let v = Self::from_parts(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::InvalidConfig("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }

    fn from_parts(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_TOKEN)
    }

    /// `[level, (category, item, value pieces…)*]` in taxonomy order, cut to
    /// `n_max` tokens with a trailing truncation marker. Attributes outside
    /// the taxonomy are skipped. An empty document yields the null token.
    pub fn tokenize(&self, doc: &FinMapDocument, n_max: usize) -> Vec<u32> {
        if doc.is_empty() {
            return vec![NULL_TOKEN];
        }
        let mut out = vec![self.id_or_unk(level_tag(doc.level))];
        for c in taxonomy(doc.level) {
            for (abbr, _) in c.items {
                let Some(v) = doc.get(c.name, abbr) else { continue };
                out.push(self.id_or_unk(&format!("<cat:{}>", c.name)));
                out.push(self.id_or_unk(&format!("<item:{}.{abbr}>", c.name)));
                for w in value_words(v) {
                    let id = match w.parse::<f64>() {
                        Ok(x) if x.is_finite() => self.id_or_unk(&number_token(x)),
                        _ => self.id_or_unk(w),
                    };
                    out.push(id);
                }
            }
        }
        if out.len() > n_max {
            out.truncate(n_max.saturating_sub(1));
            out.push(TRUNC_TOKEN);
        }
        out
    }

    /// Inverse of [`Self::tokenize`] up to word canonicalization: unknown
    /// words read back as `<unk>` and numbers as their magnitude class.
    pub fn detokenize(&self, ids: &[u32]) -> Result<FinMapDocument> {
        let tok = |id: u32| self.token(id).ok_or(Error::UnknownToken(id));
        let mut doc = FinMapDocument::new(Level::Daily, Span::new("", ""));
        doc.days = None;
        if ids == [NULL_TOKEN] || ids.is_empty() {
            return Ok(doc);
        }
        doc.level = match tok(ids[0])? {
            "<periodic>" => Level::Periodic,
            "<daily>" => Level::Daily,
            _ => return Err(Error::ShapeMismatch("token sequence does not start with a level tag".into())),
        };
        let mut current: Option<(String, String)> = None;
        let mut words: Vec<String> = Vec::new();
        let flush = |doc: &mut FinMapDocument, cur: &Option<(String, String)>, words: &mut Vec<String>| {
            if let Some((c, i)) = cur {
                doc.set(c, i, words.join(" "));
            }
            words.clear();
        };
        for &id in &ids[1..] {
            let t = tok(id)?;
            if t.starts_with("<cat:") || t == "<trunc>" {
                continue;
            }
            if let Some(rest) = t.strip_prefix("<item:").and_then(|r| r.strip_suffix('>')) {
                flush(&mut doc, &current, &mut words);
                let (c, i) = rest.rsplit_once('.').ok_or(Error::UnknownToken(id))?;
                current = Some((c.to_string(), i.to_string()));
            } else if let Some(n) = number_text(t) {
                words.push(n);
            } else {
                words.push(t.to_string());
            }
        }
        flush(&mut doc, &current, &mut words);
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn daily(date: &str, next: &str, fp: &str, sentiment: &str, event: &str) -> FinMapDocument {
        FinMapDocument::new(Level::Daily, Span::new(date, next))
            .with("RatesBonds", "FP", fp)
            .with("Sentiment", "MS", sentiment)
            .with("Events", "ME", event)
            .with("RatesBonds", "DF", "supply pressure")
    }

    #[test]
    fn cardinalities() {
        assert_eq!((DAILY_TAXONOMY.len(), item_count(Level::Daily)), (7, 17));
        assert_eq!((PERIODIC_TAXONOMY.len(), item_count(Level::Periodic)), (8, 23));
    }

    #[test]
    fn validation_cases() {
        let ok = FinMapDocument::new(Level::Daily, Span::new("2025-12-26", "2025-12-29")).with("Liquidity", "CBO", "net injection");
        let r = validate(&ok);
        assert!(r.is_valid());
        assert!((r.coverage - 1.0 / 17.0).abs() < 1e-15);
        let bad = ok.clone().with("Liquidity", "XYZ", "?");
        assert_eq!(validate(&bad).violations, vec![Violation::UnknownItem { category: "Liquidity".into(), item: "XYZ".into() }]);
        let empty = FinMapDocument::new(Level::Periodic, Span::new("2024-12-02", "2024-12-09"));
        let r = validate(&empty);
        assert!(r.is_valid() && r.is_empty_document());
        assert_eq!(r.missing.len(), 23);
        let wrong_level = FinMapDocument::new(Level::Periodic, Span::new("a", "b")).with("Liquidity", "CBO", "x");
        assert_eq!(validate(&wrong_level).violations, vec![Violation::UnknownCategory("Liquidity".into())]);
    }

    #[test]
    fn number_scanning() {
        let sp = "Futures: 102.70 (20DMA), 102.55 (Nov consolidation low). Cash: 2.65% psychological.";
        let xs: Vec<&str> = numbers_in(sp).iter().map(|(_, s)| *s).collect();
        assert_eq!(xs, vec!["102.70", "102.55"]);
        assert_eq!(keyword_number("open 100.10 close 100.35", "close"), Some((100.35, "100.35")));
        assert_eq!(keyword_number("open n/a", "open"), None);
    }

    #[test]
    fn two_eight_day_periodics_merge() {
        let a = FinMapDocument::new(Level::Periodic, Span::new("2024-12-02", "2024-12-12"))
            .with("KeyPrices", "SP", "102.70")
            .with("KeyPrices", "OCP", "open 102.85 close 102.80")
            .with("MarketSentiment", "IS", "optimistic")
            .with("MarketSentiment", "ES", "cautious");
        let mut a = a;
        a.days = Some(8);
        let mut b = FinMapDocument::new(Level::Periodic, Span::new("2024-12-12", "2024-12-24"))
            .with("KeyPrices", "SP", "102.55")
            .with("KeyPrices", "OCP", "open 102.81 close 102.92")
            .with("MarketSentiment", "IS", "wait-and-see")
            .with("MarketSentiment", "ES", "improved");
        b.days = Some(8);
        let out = aggregate(&[b.clone(), a.clone()], &Span::new("2024-12-02", "2024-12-24")).unwrap();
        assert_eq!(out.days, Some(16));
        assert_eq!(out.get("KeyPrices", "SP"), Some("102.55"));
        assert_eq!(out.get("KeyPrices", "OCP"), Some("open 102.85 close 102.92"));
        assert_eq!(out.get("MarketSentiment", "IS"), Some("optimistic"));
        assert_eq!(out.get("MarketSentiment", "MS"), Some("wait-and-see"));
        assert_eq!(out.get("MarketSentiment", "ES"), Some("improved"));
    }

    #[test]
    fn singleton_is_relabeled() {
        let a = FinMapDocument::new(Level::Periodic, Span::new("2024-12-02", "2024-12-12")).with("EconomicTheme", "MET", "x");
        let out = aggregate(core::slice::from_ref(&a), &Span::new("2024-12-02", "2024-12-12")).unwrap();
        assert_eq!(out.attributes, a.attributes);
    }

    #[test]
    fn span_errors() {
        let d1 = daily("2024-01-02", "2024-01-03", "open 1 close 2", "calm", "e");
        let d2 = daily("2024-01-04", "2024-01-05", "open 1 close 2", "calm", "e");
        let target = Span::new("2024-01-02", "2024-01-05");
        assert!(matches!(aggregate(&[d1.clone(), d2.clone()], &target), Err(Error::SpanGap(_, _))));
        let d3 = daily("2024-01-02", "2024-01-04", "open 1", "calm", "e");
        assert!(matches!(aggregate(&[d1.clone(), d3], &Span::new("2024-01-02", "2024-01-04")), Err(Error::SpanOverlap(_, _))));
        let p = FinMapDocument::new(Level::Periodic, Span::new("2024-01-03", "2024-01-04"));
        assert_eq!(aggregate(&[d1, p], &Span::new("2024-01-02", "2024-01-04")), Err(Error::MixedLevels));
    }

    #[test]
    fn aggregation_is_associative_for_structural_rules() {
        let days = ["2024-03-01", "2024-03-04", "2024-03-05", "2024-03-06", "2024-03-07"];
        let fps = [
            "open 100.10 close 100.20 high 100.30 low 99.90",
            "open 100.20 close 100.05 high 100.40 low 99.95",
            "open 100.05 close 100.50 high 100.60 low 99.80",
            "open 100.50 close 100.45 high 100.55 low 100.00",
        ];
        let moods = ["bullish", "steady", "nervous", "bearish"];
        let ds: Vec<FinMapDocument> = (0..4).map(|i| daily(days[i], days[i + 1], fps[i], moods[i], &format!("event{i}"))).collect();
        let full = Span::new(days[0], days[4]);
        let direct = aggregate(&ds, &full).unwrap();
        let left = aggregate(&ds[..2], &Span::new(days[0], days[2])).unwrap();
        let right = aggregate(&ds[2..], &Span::new(days[2], days[4])).unwrap();
        let nested = aggregate(&[left, right], &full).unwrap();
        for (c, i) in [
            ("KeyPrices", "OCP"),
            ("KeyPrices", "SP"),
            ("KeyPrices", "RP"),
            ("MarketSentiment", "IS"),
            ("MarketSentiment", "MS"),
            ("MarketSentiment", "ES"),
            ("Events&Timeline", "EVT"),
            ("EconomicTheme", "MET"),
        ] {
            assert_eq!(direct.get(c, i), nested.get(c, i), "{c}.{i}");
        }
        assert_eq!(direct.get("KeyPrices", "OCP"), Some("open 100.10 close 100.45"));
        assert_eq!(direct.get("KeyPrices", "SP"), Some("99.80"));
        assert_eq!(direct.get("KeyPrices", "RP"), Some("100.60"));
        assert_eq!(direct.get("MarketSentiment", "MS"), Some("nervous"));
        assert_eq!(direct.days, Some(4));
        assert!(validate(&direct).is_valid());
    }

    #[test]
    fn tokenizer_round_trip() {
        let doc = daily("2024-03-01", "2024-03-04", "open 100.10 close -3", "bullish drift", "policy meeting");
        let vocab = Vocabulary::build(core::slice::from_ref(&doc), 100, 1);
        let ids = vocab.tokenize(&doc, 64);
        assert_eq!(ids, vocab.tokenize(&doc, 64));
        assert_eq!(vocab.token(ids[0]), Some("<daily>"));
        let back = vocab.detokenize(&ids).unwrap();
        let keys = |d: &FinMapDocument| d.attributes.iter().map(|(c, m)| (c.clone(), m.keys().cloned().collect::<Vec<_>>())).collect::<Vec<_>>();
        assert_eq!(keys(&back), keys(&doc));
        assert_eq!(back.get("RatesBonds", "FP"), Some("open 1e2 close -1e0"));
        assert_eq!(back.get("Sentiment", "MS"), Some("bullish drift"));
        let empty = FinMapDocument::new(Level::Daily, Span::new("a", "b"));
        assert_eq!(vocab.tokenize(&empty, 8), vec![NULL_TOKEN]);
        let cut = vocab.tokenize(&doc, 5);
        assert_eq!(cut.len(), 5);
        assert_eq!(*cut.last().unwrap(), TRUNC_TOKEN);
        assert_eq!(Vocabulary::from_tokens(vocab.tokens().to_vec()).unwrap(), vocab);
    }

    #[test]
    fn number_buckets() {
        assert_eq!(number_token(101.3), "<num:+6>");
        assert_eq!(number_token(-0.05), "<num:-2>");
        assert_eq!(number_token(0.0), "<num:0>");
        assert_eq!(number_token(1e12), "<num:+9>");
    }
}
