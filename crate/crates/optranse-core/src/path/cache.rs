//! Versioned binary container for precomputed path sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "OPTE" | u32 version | u64 graph fingerprint
//! u8 max_steps | u64 degree_cap | f64 reliability_floor | u64 capped_expansions
//! stats:  u64 n | n * (path, u64 count)
//!         u64 m | m * (u32 relation, path, u64 count)
//! train:  u64 n | n * path_set            (aligned with graph train order)
//! eval:   u64 n | n * (u8 side, u32 anchor, u32 relation,
//!                      u32 k | k * (u32 candidate, path_set))
//! path:      u8 len | len * u32 relation id
//! path_set:  u8 steps | steps * (u32 k | k * (path, f64 reliability, f64 confidence))
//! ```
//!
//! Maps are written in ascending key order, so rebuilding an unchanged graph
//! produces a byte-identical file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::Error;
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Split};
use crate::Result;

use super::{
    build_path_stats, candidate_head_sets, candidate_tail_sets, filtered_path_set, PathConfig,
    PathInstance, PathSet, PathStats, RelationPath,
};

const MAGIC: &[u8; 4] = b"OPTE";
const VERSION: u32 = 1;

/// Which side of a test triple is open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum Side {
    Head,
    Tail,
}

impl Side {
    pub fn label(self) -> &'static str {
        match self {
            Side::Head => "head",
            Side::Tail => "tail",
        }
    }
}

/// Key of one ranking query: the fixed entity, the relation, and which side
/// is being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EvalQuery {
    pub side: Side,
    pub anchor: EntityId,
    pub relation: RelationId,
}

impl EvalQuery {
    /// Completes the query with a candidate entity.
    pub fn complete(&self, candidate: EntityId) -> crate::kg::Triple {
        match self.side {
            Side::Tail => crate::kg::Triple::new(self.anchor, self.relation, candidate),
            Side::Head => crate::kg::Triple::new(candidate, self.relation, self.anchor),
        }
    }
}

/// Precomputed path statistics and per-query path sets, tied to a graph
/// fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCache {
    pub fingerprint: u64,
    pub config: PathConfig,
    pub capped_expansions: u64,
    pub stats: PathStats,
    /// Path set per train triple, aligned with `graph.train()` order.
    pub train_sets: Vec<PathSet>,
    /// For each ranking query, the candidates that have at least one
    /// retained path, in ascending entity order.
    pub eval_sets: BTreeMap<EvalQuery, Vec<(EntityId, PathSet)>>,
}

impl PathCache {
    /// Mines statistics and path sets for training triples and for the
    /// ranking queries of the given splits. Parallel over triples/queries;
    /// deterministic output.
    pub fn build(graph: &KnowledgeGraph, cfg: &PathConfig, eval_splits: &[Split]) -> Result<Self> {
        if !graph.is_augmented() {
            return Err(Error::Contract(
                "path cache requires a reverse-augmented graph".into(),
            ));
        }
        if cfg.max_steps == 0 || cfg.max_steps > super::MAX_PATH_STEPS {
            return Err(Error::Config(format!(
                "max_steps must be in 1..={}, got {}",
                super::MAX_PATH_STEPS,
                cfg.max_steps
            )));
        }
        let stats = build_path_stats(graph, cfg);

        let capped: u64 = (0..graph.entity_count() as u32)
            .into_par_iter()
            .map(|e| super::path_types_from(graph, EntityId(e), cfg).1)
            .sum();

        let train_sets: Vec<PathSet> = graph
            .train()
            .par_iter()
            .map(|t| filtered_path_set(graph, &stats, t.head, t.relation, t.tail, cfg, true))
            .collect();

        let mut queries: Vec<EvalQuery> = Vec::new();
        for &split in eval_splits {
            for t in graph.split(split) {
                queries.push(EvalQuery {
                    side: Side::Tail,
                    anchor: t.head,
                    relation: t.relation,
                });
                queries.push(EvalQuery {
                    side: Side::Head,
                    anchor: t.tail,
                    relation: t.relation,
                });
            }
        }
        queries.sort_unstable();
        queries.dedup();

        let entries: Vec<(EvalQuery, Vec<(EntityId, PathSet)>)> = queries
            .into_par_iter()
            .map(|q| {
                let sets = match q.side {
                    Side::Tail => candidate_tail_sets(graph, &stats, q.anchor, q.relation, cfg),
                    Side::Head => candidate_head_sets(graph, &stats, q.relation, q.anchor, cfg),
                };
                (q, sets)
            })
            .collect();

        Ok(PathCache {
            fingerprint: graph.fingerprint(),
            config: cfg.clone(),
            capped_expansions: capped,
            stats,
            train_sets,
            eval_sets: entries.into_iter().collect(),
        })
    }

    /// Path set for the i-th train triple.
    pub fn train_set(&self, index: usize) -> &PathSet {
        &self.train_sets[index]
    }

    /// Candidate path sets for a ranking query, if the query was indexed.
    pub fn eval_candidates(&self, query: &EvalQuery) -> Option<&[(EntityId, PathSet)]> {
        self.eval_sets.get(query).map(Vec::as_slice)
    }

    /// Errors unless the cache was built from exactly this graph.
    pub fn check_fingerprint(&self, graph: &KnowledgeGraph) -> Result<()> {
        let expected = graph.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        self.encode(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    /// Reads only the header fingerprint, for cheap staleness checks.
    pub fn peek_fingerprint(path: &Path) -> Result<u64> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; 16];
        f.read_exact(&mut header).map_err(|_| Error::Format {
            path: path.to_owned(),
            message: "file too short for a cache header".into(),
        })?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format {
                path: path.to_owned(),
                message: "bad magic bytes (not a path cache)".into(),
            });
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format {
                path: path.to_owned(),
                message: format!("unsupported cache version {version}"),
            });
        }
        Ok(u64::from_le_bytes(header[8..16].try_into().unwrap()))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = io::Cursor::new(bytes.as_slice());
        Self::decode(&mut cursor).map_err(|message| Error::Format {
            path: path.to_owned(),
            message,
        })
    }

    fn encode<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        w.write_all(&[self.config.max_steps as u8])?;
        w.write_all(&(self.config.degree_cap as u64).to_le_bytes())?;
        w.write_all(&self.config.reliability_floor.to_le_bytes())?;
        w.write_all(&self.capped_expansions.to_le_bytes())?;

        w.write_all(&(self.stats.pair_count.len() as u64).to_le_bytes())?;
        for (p, &count) in &self.stats.pair_count {
            encode_path(w, p)?;
            w.write_all(&count.to_le_bytes())?;
        }
        w.write_all(&(self.stats.co_count.len() as u64).to_le_bytes())?;
        for ((r, p), &count) in &self.stats.co_count {
            w.write_all(&r.0.to_le_bytes())?;
            encode_path(w, p)?;
            w.write_all(&count.to_le_bytes())?;
        }

        w.write_all(&(self.train_sets.len() as u64).to_le_bytes())?;
        for set in &self.train_sets {
            encode_set(w, set)?;
        }

        w.write_all(&(self.eval_sets.len() as u64).to_le_bytes())?;
        for (q, candidates) in &self.eval_sets {
            w.write_all(&[match q.side {
                Side::Head => 0u8,
                Side::Tail => 1u8,
            }])?;
            w.write_all(&q.anchor.0.to_le_bytes())?;
            w.write_all(&q.relation.0.to_le_bytes())?;
            w.write_all(&(candidates.len() as u32).to_le_bytes())?;
            for (c, set) in candidates {
                w.write_all(&c.0.to_le_bytes())?;
                encode_set(w, set)?;
            }
        }
        Ok(())
    }

    fn decode<R: Read>(r: &mut R) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err("bad magic bytes (not a path cache)".into());
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(format!("unsupported cache version {version}"));
        }
        let fingerprint = read_u64(r)?;
        let max_steps = read_u8(r)? as usize;
        let degree_cap = read_u64(r)? as usize;
        let reliability_floor = read_f64(r)?;
        let capped_expansions = read_u64(r)?;

        let mut stats = PathStats::default();
        let n_pairs = read_u64(r)?;
        for _ in 0..n_pairs {
            let p = decode_path(r)?;
            let count = read_u64(r)?;
            stats.pair_count.insert(p, count);
        }
        let n_co = read_u64(r)?;
        for _ in 0..n_co {
            let rel = RelationId(read_u32(r)?);
            let p = decode_path(r)?;
            let count = read_u64(r)?;
            stats.co_count.insert((rel, p), count);
        }

        let n_train = read_u64(r)?;
        let mut train_sets = Vec::with_capacity(n_train as usize);
        for _ in 0..n_train {
            train_sets.push(decode_set(r)?);
        }

        let n_queries = read_u64(r)?;
        let mut eval_sets = BTreeMap::new();
        for _ in 0..n_queries {
            let side = match read_u8(r)? {
                0 => Side::Head,
                1 => Side::Tail,
                other => return Err(format!("bad side tag {other}")),
            };
            let anchor = EntityId(read_u32(r)?);
            let relation = RelationId(read_u32(r)?);
            let k = read_u32(r)?;
            let mut candidates = Vec::with_capacity(k as usize);
            for _ in 0..k {
                let c = EntityId(read_u32(r)?);
                candidates.push((c, decode_set(r)?));
            }
            eval_sets.insert(
                EvalQuery {
                    side,
                    anchor,
                    relation,
                },
                candidates,
            );
        }

        Ok(PathCache {
            fingerprint,
            config: PathConfig {
                max_steps,
                degree_cap,
                reliability_floor,
            },
            capped_expansions,
            stats,
            train_sets,
            eval_sets,
        })
    }
}

fn encode_path<W: Write>(w: &mut W, p: &RelationPath) -> io::Result<()> {
    w.write_all(&[p.len() as u8])?;
    for r in p.relations() {
        w.write_all(&r.0.to_le_bytes())?;
    }
    Ok(())
}

fn encode_set<W: Write>(w: &mut W, set: &PathSet) -> io::Result<()> {
    w.write_all(&[set.max_steps() as u8])?;
    for step in 1..=set.max_steps() {
        let insts = set.step(step);
        w.write_all(&(insts.len() as u32).to_le_bytes())?;
        for inst in insts {
            encode_path(w, &inst.path)?;
            w.write_all(&inst.reliability.to_le_bytes())?;
            w.write_all(&inst.confidence.to_le_bytes())?;
        }
    }
    Ok(())
}

fn decode_path<R: Read>(r: &mut R) -> std::result::Result<RelationPath, String> {
    let len = read_u8(r)? as usize;
    if len == 0 || len > super::MAX_PATH_STEPS {
        return Err(format!("bad path length {len}"));
    }
    let mut rels = Vec::with_capacity(len);
    for _ in 0..len {
        rels.push(RelationId(read_u32(r)?));
    }
    Ok(RelationPath::new(rels))
}

fn decode_set<R: Read>(r: &mut R) -> std::result::Result<PathSet, String> {
    let steps = read_u8(r)? as usize;
    let mut set = PathSet::empty(steps);
    for step in 1..=steps {
        let k = read_u32(r)?;
        for _ in 0..k {
            let path = decode_path(r)?;
            if path.len() != step {
                return Err(format!(
                    "path of length {} stored under step {step}",
                    path.len()
                ));
            }
            let reliability = read_f64(r)?;
            let confidence = read_f64(r)?;
            set.insert(PathInstance {
                path,
                reliability,
                confidence,
            });
        }
    }
    Ok(set)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> std::result::Result<(), String> {
    r.read_exact(buf)
        .map_err(|_| "unexpected end of file".to_string())
}

fn read_u8<R: Read>(r: &mut R) -> std::result::Result<u8, String> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::result::Result<f64, String> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
