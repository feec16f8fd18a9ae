//! Interaction logs and everything derived from them: dataset loading,
//! iterative core filtering, seeded forget/retain splits, a synthetic
//! corpus with a planted forget cluster, prompt templating, and the
//! query-building protocol shared by training and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::sha256_hex;
use crate::error::UcanError;
use crate::rng::substream_indexed;
use crate::Result;

pub type UserId = u32;
pub type ItemId = u32;

/// One user/item interaction. Ratings are dropped at load time; only the
/// ordering signal matters downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub user: UserId,
    pub item: ItemId,
    pub ts: i64,
}

/// Canonically ordered event list over a dense id vocabulary.
///
/// `n_users`/`n_items` describe the id space, not the set of ids present:
/// sub-logs produced by splitting keep the parent vocabulary so both sides
/// stay mutually comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub events: Vec<Event>,
    pub n_users: u32,
    pub n_items: u32,
}

impl InteractionLog {
    /// Builds a log in canonical `(user, ts, item)` order.
    pub fn new(mut events: Vec<Event>, n_users: u32, n_items: u32) -> Result<Self> {
        for e in &events {
            if e.user >= n_users || e.item >= n_items {
                return Err(UcanError::Data(format!(
                    "event ({}, {}) outside vocabulary {}x{}",
                    e.user, e.item, n_users, n_items
                )));
            }
        }
        events.sort_unstable_by_key(|e| (e.user, e.ts, e.item));
        Ok(InteractionLog { events, n_users, n_items })
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events grouped per user, in canonical order. Users without events
    /// yield empty slices.
    pub fn by_user(&self) -> Vec<&[Event]> {
        let mut out = Vec::with_capacity(self.n_users as usize);
        let mut start = 0usize;
        for user in 0..self.n_users {
            let mut end = start;
            while end < self.events.len() && self.events[end].user == user {
                end += 1;
            }
            out.push(&self.events[start..end]);
            start = end;
        }
        out
    }

    /// 16-hex-char content hash over the canonical event stream.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(16 + self.events.len() * 16);
        bytes.extend_from_slice(&self.n_users.to_le_bytes());
        bytes.extend_from_slice(&self.n_items.to_le_bytes());
        for e in &self.events {
            bytes.extend_from_slice(&e.user.to_le_bytes());
            bytes.extend_from_slice(&e.item.to_le_bytes());
            bytes.extend_from_slice(&e.ts.to_le_bytes());
        }
        let mut h = sha256_hex(&bytes);
        h.truncate(16);
        h
    }
}

// ── Loading ──────────────────────────────────────────────────────────────

/// Loads a ratings file of tab-separated `user item rating timestamp` rows
/// and re-indexes ids densely (ascending original id order).
pub fn load_ml100k(path: &Path) -> Result<InteractionLog> {
    load_ml100k_with_titles(path, None)
}

/// Like [`load_ml100k`], but when a pipe-separated title metadata file is
/// supplied, drops events whose item lacks a non-empty title there.
pub fn load_ml100k_with_titles(path: &Path, titles: Option<&Path>) -> Result<InteractionLog> {
    let text = fs::read_to_string(path)?;
    let mut raw: Vec<(u32, u32, i64)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(UcanError::Parse {
                line: idx + 1,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let user: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(idx, "user id", fields[0]))?;
        let item: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(idx, "item id", fields[1]))?;
        let _rating: f32 = fields[2]
            .parse()
            .map_err(|_| parse_err(idx, "rating", fields[2]))?;
        let ts: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(idx, "timestamp", fields[3]))?;
        raw.push((user, item, ts));
    }

    if let Some(titles_path) = titles {
        let titled = load_title_ids(titles_path)?;
        raw.retain(|(_, item, _)| titled.contains(item));
    }
    if raw.is_empty() {
        return Err(UcanError::Data(format!("{}: empty interaction log", path.display())));
    }
    reindex(raw)
}

fn parse_err(idx: usize, what: &str, tok: &str) -> UcanError {
    UcanError::Parse { line: idx + 1, msg: format!("bad {what} {tok:?}") }
}

/// Item ids carrying a non-empty title in a pipe-separated metadata file.
fn load_title_ids(path: &Path) -> Result<BTreeSet<u32>> {
    let text = fs::read_to_string(path)?;
    let mut ids = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '|');
        let id_tok = parts.next().unwrap_or("");
        let title = parts.next().unwrap_or("");
        let id: u32 = id_tok
            .parse()
            .map_err(|_| parse_err(idx, "item id", id_tok))?;
        if !title.trim().is_empty() {
            ids.insert(id);
        }
    }
    Ok(ids)
}

/// Maps arbitrary ids onto dense ranges (ascending original order) and
/// canonically sorts.
fn reindex(raw: Vec<(u32, u32, i64)>) -> Result<InteractionLog> {
    let users: BTreeSet<u32> = raw.iter().map(|r| r.0).collect();
    let items: BTreeSet<u32> = raw.iter().map(|r| r.1).collect();
    let user_map: BTreeMap<u32, u32> =
        users.iter().enumerate().map(|(i, u)| (*u, i as u32)).collect();
    let item_map: BTreeMap<u32, u32> =
        items.iter().enumerate().map(|(i, v)| (*v, i as u32)).collect();
    let events = raw
        .into_iter()
        .map(|(u, i, ts)| Event { user: user_map[&u], item: item_map[&i], ts })
        .collect();
    InteractionLog::new(events, user_map.len() as u32, item_map.len() as u32)
}

// ── Core filtering ───────────────────────────────────────────────────────

/// Iteratively drops users and items with fewer than five events until the
/// log is stable, then re-indexes. May legitimately return an empty log.
pub fn five_core_filter(log: &InteractionLog) -> InteractionLog {
    let mut kept: Vec<(u32, u32, i64)> =
        log.events.iter().map(|e| (e.user, e.item, e.ts)).collect();
    loop {
        let mut user_count: BTreeMap<u32, usize> = BTreeMap::new();
        let mut item_count: BTreeMap<u32, usize> = BTreeMap::new();
        for (u, i, _) in &kept {
            *user_count.entry(*u).or_default() += 1;
            *item_count.entry(*i).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|(u, i, _)| user_count[u] >= 5 && item_count[i] >= 5);
        if kept.len() == before {
            break;
        }
    }
    if kept.is_empty() {
        return InteractionLog { events: Vec::new(), n_users: 0, n_items: 0 };
    }
    reindex(kept).expect("reindex of non-empty filtered log")
}

// ── Forget/retain splitting ──────────────────────────────────────────────

/// Split parameters; the same pair always reproduces the same split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub forget_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { forget_fraction: 0.25, seed: 0 }
    }
}

/// Positions (into a user's canonical event sequence) designated as forget
/// side. Shared verbatim by the splitter and the synthetic generator so the
/// planted cluster always lands exactly on the forget side.
fn forget_positions(n: usize, fraction: f64, seed: u64, user: UserId) -> Vec<usize> {
    let k = (fraction * n as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream_indexed(seed, "split", user as u64));
    let mut chosen = idx[..k.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Partitions each user's events into forget and retain sides by seeded
/// subsampling of `floor(fraction * n)` events per user. Both sides keep
/// the parent vocabulary.
pub fn forget_retain_split(
    log: &InteractionLog,
    spec: &SplitSpec,
) -> Result<(InteractionLog, InteractionLog)> {
    if !(0.0..=1.0).contains(&spec.forget_fraction) {
        return Err(UcanError::Config(format!(
            "forget_fraction must be in [0,1], got {}",
            spec.forget_fraction
        )));
    }
    let mut forget = Vec::new();
    let mut retain = Vec::new();
    for events in log.by_user() {
        if events.is_empty() {
            continue;
        }
        let user = events[0].user;
        let positions = forget_positions(events.len(), spec.forget_fraction, spec.seed, user);
        let mut is_forget = vec![false; events.len()];
        for p in positions {
            is_forget[p] = true;
        }
        for (e, f) in events.iter().zip(is_forget) {
            if f {
                forget.push(*e);
            } else {
                retain.push(*e);
            }
        }
    }
    Ok((
        InteractionLog::new(forget, log.n_users, log.n_items)?,
        InteractionLog::new(retain, log.n_users, log.n_items)?,
    ))
}

// ── Split manifest ───────────────────────────────────────────────────────

/// Side tag used in split manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Forget,
    Retain,
}

impl Side {
    fn letter(self) -> char {
        match self {
            Side::Forget => 'F',
            Side::Retain => 'R',
        }
    }
}

/// Renders the manifest body: one `user item timestamp side` line per
/// event, canonically ordered. Both sides must share a vocabulary.
pub fn render_split_manifest(forget: &InteractionLog, retain: &InteractionLog) -> Result<String> {
    if forget.n_users != retain.n_users || forget.n_items != retain.n_items {
        return Err(UcanError::Data("split sides disagree on vocabulary".into()));
    }
    let mut rows: Vec<(Event, Side)> = forget
        .events
        .iter()
        .map(|e| (*e, Side::Forget))
        .chain(retain.events.iter().map(|e| (*e, Side::Retain)))
        .collect();
    rows.sort_unstable_by_key(|(e, _)| (e.user, e.ts, e.item));
    let mut out = String::new();
    for (e, side) in rows {
        out.push_str(&format!("{} {} {} {}\n", e.user, e.item, e.ts, side.letter()));
    }
    Ok(out)
}

pub fn write_split_manifest(
    path: &Path,
    forget: &InteractionLog,
    retain: &InteractionLog,
) -> Result<()> {
    fs::write(path, render_split_manifest(forget, retain)?)?;
    Ok(())
}

/// Parses a manifest body back into tagged events.
pub fn parse_split_manifest(text: &str) -> Result<Vec<(Event, Side)>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(UcanError::Parse {
                line: idx + 1,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let user: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(idx, "user id", fields[0]))?;
        let item: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(idx, "item id", fields[1]))?;
        let ts: i64 = fields[2]
            .parse()
            .map_err(|_| parse_err(idx, "timestamp", fields[2]))?;
        let side = match fields[3] {
            "F" => Side::Forget,
            "R" => Side::Retain,
            other => {
                return Err(UcanError::Parse {
                    line: idx + 1,
                    msg: format!("bad side tag {other:?} (expected F or R)"),
                })
            }
        };
        rows.push((Event { user, item, ts }, side));
    }
    if rows.is_empty() {
        return Err(UcanError::Data("empty split manifest".into()));
    }
    Ok(rows)
}

/// Reads a manifest file and rebuilds both sides over the given vocabulary.
pub fn read_split_manifest(
    path: &Path,
    n_users: u32,
    n_items: u32,
) -> Result<(InteractionLog, InteractionLog)> {
    let text = fs::read_to_string(path)?;
    let rows = parse_split_manifest(&text)?;
    let mut forget = Vec::new();
    let mut retain = Vec::new();
    for (e, side) in rows {
        match side {
            Side::Forget => forget.push(e),
            Side::Retain => retain.push(e),
        }
    }
    Ok((
        InteractionLog::new(forget, n_users, n_items)?,
        InteractionLog::new(retain, n_users, n_items)?,
    ))
}

/// 16-hex-char hash of the manifest body, used for checkpoint lineage.
pub fn manifest_hash(text: &str) -> String {
    let mut h = sha256_hex(text.as_bytes());
    h.truncate(16);
    h
}

// ── Synthetic corpus ─────────────────────────────────────────────────────

/// Number of contiguous item blocks general interest is split into; also
/// the number of forget-cluster subgroups.
const SYNTH_GROUPS: u32 = 5;

/// Generates a synthetic corpus with a planted forget cluster.
///
/// The last fifth of the item vocabulary is reserved as the cluster
/// (when `cluster_fraction > 0`); the rest splits into contiguous interest
/// blocks. Each user belongs to one block and one cluster subgroup. The
/// generator replays the splitter's own seeded position sampling, so
/// [`forget_retain_split`] with the returned [`SplitSpec`] tags exactly the
/// planted cluster events as forget side.
pub fn generate_synthetic(
    n_users: u32,
    n_items: u32,
    seed: u64,
    cluster_fraction: f64,
) -> Result<(InteractionLog, SplitSpec)> {
    if n_users == 0 {
        return Err(UcanError::Config("synthetic corpus needs at least 1 user".into()));
    }
    if !(0.0..=1.0).contains(&cluster_fraction) {
        return Err(UcanError::Config(format!(
            "cluster_fraction must be in [0,1], got {cluster_fraction}"
        )));
    }
    let min_items = if cluster_fraction > 0.0 { 2 * SYNTH_GROUPS * 2 } else { SYNTH_GROUPS };
    if n_items < min_items {
        return Err(UcanError::Config(format!(
            "synthetic corpus needs at least {min_items} items, got {n_items}"
        )));
    }

    let cluster_size = if cluster_fraction > 0.0 { n_items / 5 } else { 0 };
    let general = n_items - cluster_size;
    let block_bounds = |g: u32, total: u32, base: u32| {
        let lo = base + g * total / SYNTH_GROUPS;
        let hi = base + (g + 1) * total / SYNTH_GROUPS;
        (lo, hi)
    };

    let mut events = Vec::new();
    for user in 0..n_users {
        let n_u = {
            let mut rng = substream_indexed(seed, "synth_len", user as u64);
            14 + rng.gen_range(0..5usize)
        };
        let mut is_forget = vec![false; n_u];
        for p in forget_positions(n_u, cluster_fraction, seed, user) {
            is_forget[p] = true;
        }
        let g = user % SYNTH_GROUPS;
        let (blo, bhi) = block_bounds(g, general, 0);
        let (clo, chi) = block_bounds(g, cluster_size, general);
        let mut rng = substream_indexed(seed, "synth_items", user as u64);
        for (pos, forget) in is_forget.iter().enumerate() {
            let item = if *forget {
                rng.gen_range(clo..chi)
            } else {
                rng.gen_range(blo..bhi)
            };
            events.push(Event { user, item, ts: pos as i64 });
        }
    }
    let log = InteractionLog::new(events, n_users, n_items)?;
    Ok((log, SplitSpec { forget_fraction: cluster_fraction, seed }))
}

// ── Templating ───────────────────────────────────────────────────────────

/// Prompt template: fixed prefix tokens from a reserved range, then item
/// tokens offset past the reserved ids, right-padded with token 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSpec {
    pub n_reserved: u32,
    pub prefix: Vec<u32>,
    pub max_len: usize,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        TemplateSpec { n_reserved: 4, prefix: vec![1, 2, 3], max_len: 16 }
    }
}

impl TemplateSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_reserved == 0 {
            return Err(UcanError::Config("n_reserved must be >= 1 (token 0 pads)".into()));
        }
        if self.prefix.len() + 1 > self.max_len {
            return Err(UcanError::Config(format!(
                "max_len {} leaves no room for history after a {}-token prefix",
                self.max_len,
                self.prefix.len()
            )));
        }
        if self.prefix.iter().any(|t| *t == 0 || *t >= self.n_reserved) {
            return Err(UcanError::Config(
                "prefix tokens must be reserved ids in [1, n_reserved)".into(),
            ));
        }
        Ok(())
    }

    /// Token-space size for an item vocabulary.
    pub fn vocab_size(&self, n_items: u32) -> usize {
        self.n_reserved as usize + n_items as usize
    }

    pub fn item_token(&self, item: ItemId) -> u32 {
        self.n_reserved + item
    }
}

/// Fixed-width token rows with a validity mask and per-row target items.
///
/// Every row keeps at least one mask-1 position; the mask marks history
/// item tokens only (prefix and padding are excluded from pooling and from
/// masked statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    pub targets: Vec<ItemId>,
}

impl TokenBatch {
    #[inline]
    pub fn token(&self, row: usize, col: usize) -> u32 {
        self.tokens[row * self.cols + col]
    }

    #[inline]
    pub fn masked(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.cols + col] == 1
    }
}

/// Renders `(history, target)` pairs into a fixed-width [`TokenBatch`].
/// Histories longer than the template window keep their most recent items.
pub fn templatize(
    rows: &[(Vec<ItemId>, ItemId)],
    spec: &TemplateSpec,
    n_items: u32,
) -> Result<TokenBatch> {
    spec.validate()?;
    if rows.is_empty() {
        return Err(UcanError::Data("templatize: no rows".into()));
    }
    let cols = spec.max_len;
    let cap = cols - spec.prefix.len();
    let mut tokens = Vec::with_capacity(rows.len() * cols);
    let mut mask = Vec::with_capacity(rows.len() * cols);
    let mut targets = Vec::with_capacity(rows.len());
    for (idx, (hist, target)) in rows.iter().enumerate() {
        if hist.is_empty() {
            return Err(UcanError::Data(format!("templatize: row {idx} has empty history")));
        }
        if *target >= n_items || hist.iter().any(|i| *i >= n_items) {
            return Err(UcanError::Data(format!(
                "templatize: row {idx} references an item outside vocabulary {n_items}"
            )));
        }
        for t in &spec.prefix {
            tokens.push(*t);
            mask.push(0);
        }
        let recent = &hist[hist.len().saturating_sub(cap)..];
        for item in recent {
            tokens.push(spec.item_token(*item));
            mask.push(1);
        }
        for _ in 0..cap - recent.len() {
            tokens.push(0);
            mask.push(0);
        }
        targets.push(*target);
    }
    Ok(TokenBatch { rows: rows.len(), cols, tokens, mask, targets })
}

/// Splits query rows into fixed-size token batches. Padding is fixed-width,
/// so any chunking yields identical per-row content.
pub fn templatize_chunked(
    rows: &[(Vec<ItemId>, ItemId)],
    spec: &TemplateSpec,
    n_items: u32,
    batch_size: usize,
) -> Result<Vec<TokenBatch>> {
    if batch_size == 0 {
        return Err(UcanError::Config("batch_size must be >= 1".into()));
    }
    rows.chunks(batch_size)
        .map(|chunk| templatize(chunk, spec, n_items))
        .collect()
}

// ── Evaluation protocol ──────────────────────────────────────────────────

/// Queries derived from a tagged split.
///
/// Training always excludes each user's final retain event (the holdout);
/// forget queries probe memorized forget events; the retain query predicts
/// the holdout from everything before it. Signal rows carry one side's
/// items per user for activation statistics.
#[derive(Debug, Clone, Default)]
pub struct ProtocolQueries {
    pub train_pairs: Vec<(Vec<ItemId>, ItemId)>,
    pub forget_queries: Vec<(Vec<ItemId>, ItemId)>,
    pub retain_queries: Vec<(Vec<ItemId>, ItemId)>,
    pub forget_rows: Vec<Vec<ItemId>>,
    pub retain_rows: Vec<Vec<ItemId>>,
}

/// Builds the training and evaluation queries from a tagged split.
pub fn build_protocol(
    forget: &InteractionLog,
    retain: &InteractionLog,
) -> Result<ProtocolQueries> {
    if forget.n_users != retain.n_users || forget.n_items != retain.n_items {
        return Err(UcanError::Data("split sides disagree on vocabulary".into()));
    }
    let mut out = ProtocolQueries::default();
    let forget_by_user = forget.by_user();
    let retain_by_user = retain.by_user();
    for user in 0..forget.n_users as usize {
        let mut seq: Vec<(Event, Side)> = forget_by_user[user]
            .iter()
            .map(|e| (*e, Side::Forget))
            .chain(retain_by_user[user].iter().map(|e| (*e, Side::Retain)))
            .collect();
        if seq.is_empty() {
            continue;
        }
        seq.sort_unstable_by_key(|(e, _)| (e.ts, e.item));

        let holdout = seq.iter().rposition(|(_, s)| *s == Side::Retain);
        let train_seq: Vec<(ItemId, Side)> = seq
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != holdout)
            .map(|(_, (e, s))| (e.item, *s))
            .collect();

        for k in 1..train_seq.len() {
            let hist: Vec<ItemId> = train_seq[..k].iter().map(|(i, _)| *i).collect();
            out.train_pairs.push((hist.clone(), train_seq[k].0));
            if train_seq[k].1 == Side::Forget {
                out.forget_queries.push((hist, train_seq[k].0));
            }
        }
        if let Some(h) = holdout {
            if h >= 1 {
                let hist: Vec<ItemId> = seq[..h].iter().map(|(e, _)| e.item).collect();
                out.retain_queries.push((hist, seq[h].0.item));
            }
        }

        let f_items: Vec<ItemId> = forget_by_user[user].iter().map(|e| e.item).collect();
        if !f_items.is_empty() {
            out.forget_rows.push(f_items);
        }
        let r_items: Vec<ItemId> = seq
            .iter()
            .enumerate()
            .filter(|(i, (_, s))| *s == Side::Retain && Some(*i) != holdout)
            .map(|(_, (e, _))| e.item)
            .collect();
        if !r_items.is_empty() {
            out.retain_rows.push(r_items);
        }
    }
    Ok(out)
}
