//! Triple store: vocabularies, adjacency indexes, reverse-relation
//! augmentation, Bernoulli corruption sampling, and relation categories.

mod load;

pub use load::{load_triples, ColumnOrder, RawTriple};

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::Rng;

use crate::error::Error;
use crate::fingerprint::Fnv64;
use crate::Result;

/// Dense index of an interned entity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct EntityId(pub u32);

impl EntityId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Dense relation index. Parity encodes direction: even ids are forward
/// relations, odd ids their reverses, so `reverse` is an xor and is an
/// involution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct RelationId(pub u32);

impl RelationId {
    /// Forward id for the `raw`-th interned relation label.
    #[inline]
    pub fn forward(raw: u32) -> Self {
        RelationId(raw * 2)
    }

    #[inline]
    pub fn reverse(self) -> Self {
        RelationId(self.0 ^ 1)
    }

    #[inline]
    pub fn is_reverse(self) -> bool {
        self.0 & 1 == 1
    }

    /// Index of the underlying relation label.
    #[inline]
    pub fn base(self) -> u32 {
        self.0 >> 1
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A fact `(head, relation, tail)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Named subset of the triple store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Relation category from train-split tails-per-head / heads-per-tail means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum RelationCategory {
    OneToOne,
    OneToN,
    NToOne,
    NToN,
}

impl RelationCategory {
    pub const ALL: [RelationCategory; 4] = [
        RelationCategory::OneToOne,
        RelationCategory::OneToN,
        RelationCategory::NToOne,
        RelationCategory::NToN,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RelationCategory::OneToOne => "1-to-1",
            RelationCategory::OneToN => "1-to-N",
            RelationCategory::NToOne => "N-to-1",
            RelationCategory::NToN => "N-to-N",
        }
    }
}

/// Mean tails-per-head / heads-per-tail boundary between "1" and "N".
pub const CATEGORY_THRESHOLD: f64 = 1.5;

/// Upper bound on entity re-draws in corruption sampling.
pub const MAX_CORRUPTION_ATTEMPTS: usize = 1000;

/// Interned label table with dense ids in first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Vocab::default()
    }

    pub fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }

    pub fn lookup(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    pub fn resolve(&self, id: u32) -> &str {
        &self.labels[id as usize]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }
}

/// Per-relation train statistics driving Bernoulli sampling and categories.
#[derive(Debug, Clone, Copy, Default)]
pub struct RelationStats {
    /// Mean number of tails per distinct head.
    pub tph: f64,
    /// Mean number of heads per distinct tail.
    pub hpt: f64,
    /// Train triples carrying this relation.
    pub triples: usize,
}

/// Summary emitted by [`build_graph`]; rendered as the plain-text load report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LoadReport {
    pub entity_count: usize,
    pub relation_count: usize,
    pub train_raw: usize,
    pub train_kept: usize,
    pub valid_raw: usize,
    pub valid_kept: usize,
    pub test_raw: usize,
    pub test_kept: usize,
    pub duplicates_removed: usize,
    /// Entities that never occur in the train split (embeddings stay at
    /// initialization; evaluation still ranks them).
    pub entities_unseen_in_train: usize,
    /// Relations that never occur in the train split.
    pub relations_unseen_in_train: usize,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "load report")?;
        writeln!(f, "  entities:  {}", self.entity_count)?;
        writeln!(f, "  relations: {}", self.relation_count)?;
        writeln!(
            f,
            "  train: {} kept ({} raw, {} duplicate lines dropped)",
            self.train_kept,
            self.train_raw,
            self.train_raw - self.train_kept
        )?;
        writeln!(
            f,
            "  valid: {} kept ({} raw)",
            self.valid_kept, self.valid_raw
        )?;
        writeln!(
            f,
            "  test:  {} kept ({} raw)",
            self.test_kept, self.test_raw
        )?;
        writeln!(
            f,
            "  duplicates removed (all splits): {}",
            self.duplicates_removed
        )?;
        writeln!(
            f,
            "  unseen in train: {} entities, {} relations (kept at initialization)",
            self.entities_unseen_in_train, self.relations_unseen_in_train
        )?;
        write!(
            f,
            "  bernoulli tph/hpt statistics are computed on the train split as stored \
             (after reverse augmentation when enabled)"
        )
    }
}

/// Immutable-after-construction triple store with adjacency and membership
/// indexes. Safe to share read-only across worker threads.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    augmented: bool,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    /// Outgoing train edges per entity, in train order.
    out_index: Vec<Vec<(RelationId, EntityId)>>,
    /// All facts across the three splits, for filtered evaluation and
    /// corruption-sample rejection.
    membership: HashSet<Triple>,
    /// Indexed by `RelationId::index()`.
    stats: Vec<RelationStats>,
}

/// Interns vocabularies over the union of the splits, deduplicates within
/// each split, and builds the adjacency and membership indexes.
pub fn build_graph(
    train: &[RawTriple],
    valid: &[RawTriple],
    test: &[RawTriple],
) -> (KnowledgeGraph, LoadReport) {
    let mut g = KnowledgeGraph {
        entities: Vocab::new(),
        relations: Vocab::new(),
        augmented: false,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        out_index: Vec::new(),
        membership: HashSet::new(),
        stats: Vec::new(),
    };

    let mut duplicates = 0usize;
    for (raw, split) in [
        (train, Split::Train),
        (valid, Split::Valid),
        (test, Split::Test),
    ] {
        let mut seen = HashSet::with_capacity(raw.len());
        for (h, r, t) in raw {
            let triple = Triple::new(
                EntityId(g.entities.intern(h)),
                RelationId::forward(g.relations.intern(r)),
                EntityId(g.entities.intern(t)),
            );
            if !seen.insert(triple) {
                duplicates += 1;
                continue;
            }
            g.split_mut(split).push(triple);
        }
    }

    let mut train_entities = HashSet::new();
    let mut train_relations = HashSet::new();
    for t in &g.train {
        train_entities.insert(t.head);
        train_entities.insert(t.tail);
        train_relations.insert(t.relation.base());
    }
    let report = LoadReport {
        entity_count: g.entities.len(),
        relation_count: g.relations.len(),
        train_raw: train.len(),
        train_kept: g.train.len(),
        valid_raw: valid.len(),
        valid_kept: g.valid.len(),
        test_raw: test.len(),
        test_kept: g.test.len(),
        duplicates_removed: duplicates,
        entities_unseen_in_train: g.entities.len() - train_entities.len(),
        relations_unseen_in_train: g.relations.len() - train_relations.len(),
    };

    g.rebuild_indexes();
    (g, report)
}

impl KnowledgeGraph {
    fn split_mut(&mut self, split: Split) -> &mut Vec<Triple> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Number of relations in the vocabulary: doubled once reverse
    /// augmentation has run.
    pub fn relation_count(&self) -> usize {
        if self.augmented {
            self.relations.len() * 2
        } else {
            self.relations.len()
        }
    }

    /// Size of the relation id space (forward and reverse slots), regardless
    /// of augmentation. Parameter tables are sized by this.
    pub fn relation_slot_count(&self) -> usize {
        self.relations.len() * 2
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        self.entities.resolve(e.0)
    }

    /// Renders a relation id, marking reverses with a `^-1` suffix.
    pub fn relation_label(&self, r: RelationId) -> String {
        let base = self.relations.resolve(r.base());
        if r.is_reverse() {
            format!("{base}^-1")
        } else {
            base.to_owned()
        }
    }

    pub fn lookup_entity(&self, label: &str) -> Option<EntityId> {
        self.entities.lookup(label).map(EntityId)
    }

    /// Resolves a relation label; a `^-1` suffix selects the reverse.
    pub fn lookup_relation(&self, label: &str) -> Option<RelationId> {
        if let Some(base) = label.strip_suffix("^-1") {
            return self
                .relations
                .lookup(base)
                .map(|raw| RelationId::forward(raw).reverse());
        }
        self.relations.lookup(label).map(RelationId::forward)
    }

    /// Entity labels ranked by edit distance to `label`, for error messages.
    pub fn nearest_entity_labels(&self, label: &str, k: usize) -> Vec<String> {
        nearest_labels(self.entities.labels(), label, k)
    }

    pub fn nearest_relation_labels(&self, label: &str, k: usize) -> Vec<String> {
        nearest_labels(self.relations.labels(), label, k)
    }

    /// Outgoing train edges of `e`, in insertion order.
    pub fn out_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_index[e.index()]
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.membership.contains(triple)
    }

    pub fn relation_stats(&self, r: RelationId) -> RelationStats {
        self.stats.get(r.index()).copied().unwrap_or_default()
    }

    /// Adds `(t, r^-1, h)` to train for every train triple `(h, r, t)`; the
    /// relation vocabulary doubles and valid/test are untouched.
    pub fn add_reverse_relations(&mut self) -> Result<()> {
        if self.augmented {
            return Err(Error::Contract(
                "graph already augmented with reverse relations".into(),
            ));
        }
        let reversed: Vec<Triple> = self
            .train
            .iter()
            .map(|t| Triple::new(t.tail, t.relation.reverse(), t.head))
            .collect();
        self.train.extend(reversed);
        self.augmented = true;
        self.rebuild_indexes();
        Ok(())
    }

    fn rebuild_indexes(&mut self) {
        let n = self.entities.len();
        let mut out = vec![Vec::new(); n];
        for t in &self.train {
            out[t.head.index()].push((t.relation, t.tail));
        }
        self.out_index = out;

        self.membership.clear();
        let all: Vec<Triple> = [Split::Train, Split::Valid, Split::Test]
            .into_iter()
            .flat_map(|s| self.split(s).to_vec())
            .collect();
        self.membership.extend(all);

        self.recompute_stats();
    }

    fn recompute_stats(&mut self) {
        let slots = self.relation_slot_count();
        let mut count = vec![0usize; slots];
        let mut heads: Vec<HashSet<EntityId>> = vec![HashSet::new(); slots];
        let mut tails: Vec<HashSet<EntityId>> = vec![HashSet::new(); slots];
        for t in &self.train {
            let i = t.relation.index();
            count[i] += 1;
            heads[i].insert(t.head);
            tails[i].insert(t.tail);
        }
        self.stats = (0..slots)
            .map(|i| {
                if count[i] == 0 {
                    RelationStats::default()
                } else {
                    RelationStats {
                        tph: count[i] as f64 / heads[i].len() as f64,
                        hpt: count[i] as f64 / tails[i].len() as f64,
                        triples: count[i],
                    }
                }
            })
            .collect();
    }

    /// Replaces the head with probability `tph/(tph+hpt)` (else the tail) by
    /// a uniform entity, re-drawing until the result is not a known fact in
    /// any split.
    pub fn corrupt_triple<R: Rng + ?Sized>(&self, triple: &Triple, rng: &mut R) -> Result<Triple> {
        let stats = self.relation_stats(triple.relation);
        if stats.triples == 0 {
            return Err(Error::Contract(format!(
                "relation {} has no train statistics for corruption",
                self.relation_label(triple.relation)
            )));
        }
        let p_head = stats.tph / (stats.tph + stats.hpt);
        let replace_head = rng.random_bool(p_head);
        let n = self.entity_count() as u32;
        for _ in 0..MAX_CORRUPTION_ATTEMPTS {
            let e = EntityId(rng.random_range(0..n));
            let candidate = if replace_head {
                Triple::new(e, triple.relation, triple.tail)
            } else {
                Triple::new(triple.head, triple.relation, e)
            };
            if !self.membership.contains(&candidate) {
                return Ok(candidate);
            }
        }
        Err(Error::SamplingExhausted {
            relation: self.relation_label(triple.relation),
            attempts: MAX_CORRUPTION_ATTEMPTS,
        })
    }

    /// Classifies a relation from train statistics; threshold
    /// [`CATEGORY_THRESHOLD`] on the tph/hpt means.
    pub fn relation_category(&self, r: RelationId) -> Result<RelationCategory> {
        let stats = self.relation_stats(r);
        if stats.triples == 0 {
            return Err(Error::CategoryUnavailable {
                relation: self.relation_label(r),
            });
        }
        let many_tails = stats.tph >= CATEGORY_THRESHOLD;
        let many_heads = stats.hpt >= CATEGORY_THRESHOLD;
        Ok(match (many_tails, many_heads) {
            (false, false) => RelationCategory::OneToOne,
            (true, false) => RelationCategory::OneToN,
            (false, true) => RelationCategory::NToOne,
            (true, true) => RelationCategory::NToN,
        })
    }

    /// Deterministic hash over vocabularies, augmentation state, and all
    /// splits; caches and checkpoints embed it.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update_u64(self.entities.len() as u64);
        for label in self.entities.labels() {
            h.update_str(label);
        }
        h.update_u64(self.relations.len() as u64);
        for label in self.relations.labels() {
            h.update_str(label);
        }
        h.update(&[self.augmented as u8]);
        for split in [Split::Train, Split::Valid, Split::Test] {
            let triples = self.split(split);
            h.update_u64(triples.len() as u64);
            for t in triples {
                h.update_u32(t.head.0);
                h.update_u32(t.relation.0);
                h.update_u32(t.tail.0);
            }
        }
        h.finish()
    }

    /// Hash of the vocabularies alone, for checkpoint sidecars.
    pub fn vocab_fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for label in self.entities.labels() {
            h.update_str(label);
        }
        h.update_u64(u64::MAX);
        for label in self.relations.labels() {
            h.update_str(label);
        }
        h.finish()
    }
}

fn nearest_labels<'a>(labels: impl Iterator<Item = &'a str>, query: &str, k: usize) -> Vec<String> {
    let mut scored: Vec<(usize, &str)> = labels.map(|l| (edit_distance(l, query), l)).collect();
    scored.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    scored
        .into_iter()
        .take(k)
        .map(|(_, l)| l.to_owned())
        .collect()
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
