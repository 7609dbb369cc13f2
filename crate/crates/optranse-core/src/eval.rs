//! Link-prediction evaluation: rank every entity as a candidate completion
//! of each held-out triple under the pooled energy, then aggregate raw and
//! filtered Mean Rank, Hits@k, and a relation-category table.

use rayon::prelude::*;

use crate::error::Error;
use crate::kg::{EntityId, KnowledgeGraph, RelationCategory, Split, Triple};
use crate::model::{final_energy, triple_energy, ModelParams, TransitionCache};
use crate::path::{EvalQuery, PathCache, PathSet, Side};
use crate::Result;

/// Raw keeps every candidate; Filtered removes candidates (other than the
/// target) whose completed triple is a known fact in any split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    Raw,
    Filtered,
}

/// Ranks of the true entity for one side of one test triple.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RankResult {
    pub triple: Triple,
    pub side: Side,
    pub raw_rank: usize,
    pub filtered_rank: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalConfig {
    pub hits_k: usize,
    /// Omit filtered columns from the text report.
    pub raw_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hits_k: 10,
            raw_only: false,
        }
    }
}

/// Pooled energy of every candidate completion of `query`, in entity-id
/// order. Candidates without cached paths score by the direct term alone,
/// which is exactly the infinite-sentinel fallback.
pub fn score_candidates(
    params: &ModelParams,
    cache: &TransitionCache,
    graph: &KnowledgeGraph,
    path_cache: &PathCache,
    query: &EvalQuery,
) -> Result<Vec<f64>> {
    let with_paths: &[(EntityId, PathSet)] = path_cache.eval_candidates(query).unwrap_or(&[]);
    let mut scores = Vec::with_capacity(graph.entity_count());
    let mut cursor = 0usize;
    for e in 0..graph.entity_count() as u32 {
        let candidate = EntityId(e);
        // `with_paths` is sorted by entity id; advance a cursor instead of
        // searching.
        while cursor < with_paths.len() && with_paths[cursor].0 < candidate {
            cursor += 1;
        }
        let triple = query.complete(candidate);
        let score = if cursor < with_paths.len() && with_paths[cursor].0 == candidate {
            final_energy(
                params,
                cache,
                triple.head,
                triple.relation,
                triple.tail,
                &with_paths[cursor].1,
            )?
            .final_energy
        } else {
            triple_energy(params, triple.head, triple.relation, triple.tail)
        };
        scores.push(score);
    }
    Ok(scores)
}

/// Rank of `target` among the candidates: one plus the number of surviving
/// candidates with strictly smaller score. Ties never hurt the target.
pub fn rank_of(
    scores: &[f64],
    target: EntityId,
    graph: &KnowledgeGraph,
    query: &EvalQuery,
    mode: RankMode,
) -> usize {
    let target_score = scores[target.index()];
    let mut below = 0usize;
    for (i, &score) in scores.iter().enumerate() {
        let candidate = EntityId(i as u32);
        if candidate == target {
            continue;
        }
        if mode == RankMode::Filtered && graph.contains(&query.complete(candidate)) {
            continue;
        }
        if score < target_score {
            below += 1;
        }
    }
    1 + below
}

/// Head- and tail-side ranks for every triple of the split, in input order.
pub fn rank_split(
    params: &ModelParams,
    cache: &TransitionCache,
    graph: &KnowledgeGraph,
    path_cache: &PathCache,
    split: Split,
) -> Result<Vec<RankResult>> {
    let triples = graph.split(split);
    if triples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let per_triple: Result<Vec<[RankResult; 2]>> = triples
        .par_iter()
        .map(|t| {
            let mut out = Vec::with_capacity(2);
            for side in [Side::Tail, Side::Head] {
                let (query, target) = match side {
                    Side::Tail => (
                        EvalQuery {
                            side,
                            anchor: t.head,
                            relation: t.relation,
                        },
                        t.tail,
                    ),
                    Side::Head => (
                        EvalQuery {
                            side,
                            anchor: t.tail,
                            relation: t.relation,
                        },
                        t.head,
                    ),
                };
                let scores = score_candidates(params, cache, graph, path_cache, &query)?;
                out.push(RankResult {
                    triple: *t,
                    side,
                    raw_rank: rank_of(&scores, target, graph, &query, RankMode::Raw),
                    filtered_rank: rank_of(&scores, target, graph, &query, RankMode::Filtered),
                });
            }
            Ok([out.remove(0), out.remove(0)])
        })
        .collect();
    Ok(per_triple?.into_iter().flatten().collect())
}

/// One cell of the per-category table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CategoryCell {
    pub side: Side,
    pub category: RelationCategory,
    pub count: usize,
    pub hits_filtered_pct: f64,
}

/// Aggregated link-prediction metrics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub triples: usize,
    pub hits_k: usize,
    pub mean_rank_raw: f64,
    pub mean_rank_filtered: f64,
    pub hits_raw_pct: f64,
    pub hits_filtered_pct: f64,
    /// Auxiliary mean reciprocal rank; not a headline metric here.
    pub mrr_raw: f64,
    pub mrr_filtered: f64,
    pub per_category: Vec<CategoryCell>,
    /// Test relations missing train statistics, defaulted to N-to-N.
    pub defaulted_categories: usize,
    /// Ranking queries that had no cached path sets (scored direct-only).
    pub queries_without_cached_paths: usize,
    pub raw_only: bool,
}

/// Folds per-triple rank results into an [`EvalReport`].
pub fn aggregate(
    graph: &KnowledgeGraph,
    path_cache: &PathCache,
    results: &[RankResult],
    config: &EvalConfig,
) -> EvalReport {
    let n = results.len() as f64;
    let mut mr_raw = 0.0;
    let mut mr_filt = 0.0;
    let mut hits_raw = 0usize;
    let mut hits_filt = 0usize;
    let mut mrr_raw = 0.0;
    let mut mrr_filt = 0.0;
    let mut cat_count = [[0usize; 4]; 2];
    let mut cat_hits = [[0usize; 4]; 2];
    let mut defaulted = 0usize;
    let mut missing_queries = 0usize;

    for r in results {
        mr_raw += r.raw_rank as f64;
        mr_filt += r.filtered_rank as f64;
        mrr_raw += 1.0 / r.raw_rank as f64;
        mrr_filt += 1.0 / r.filtered_rank as f64;
        if r.raw_rank <= config.hits_k {
            hits_raw += 1;
        }
        if r.filtered_rank <= config.hits_k {
            hits_filt += 1;
        }
        let category = match graph.relation_category(r.triple.relation) {
            Ok(c) => c,
            Err(_) => {
                defaulted += 1;
                RelationCategory::NToN
            }
        };
        let side_idx = match r.side {
            Side::Head => 0,
            Side::Tail => 1,
        };
        let cat_idx = RelationCategory::ALL
            .iter()
            .position(|&c| c == category)
            .unwrap();
        cat_count[side_idx][cat_idx] += 1;
        if r.filtered_rank <= config.hits_k {
            cat_hits[side_idx][cat_idx] += 1;
        }
        let (anchor, side) = match r.side {
            Side::Tail => (r.triple.head, Side::Tail),
            Side::Head => (r.triple.tail, Side::Head),
        };
        let query = EvalQuery {
            side,
            anchor,
            relation: r.triple.relation,
        };
        if path_cache.eval_candidates(&query).is_none() {
            missing_queries += 1;
        }
    }

    let mut per_category = Vec::with_capacity(8);
    for (side_idx, side) in [Side::Head, Side::Tail].into_iter().enumerate() {
        for (cat_idx, &category) in RelationCategory::ALL.iter().enumerate() {
            let count = cat_count[side_idx][cat_idx];
            let pct = if count == 0 {
                0.0
            } else {
                100.0 * cat_hits[side_idx][cat_idx] as f64 / count as f64
            };
            per_category.push(CategoryCell {
                side,
                category,
                count,
                hits_filtered_pct: pct,
            });
        }
    }

    EvalReport {
        triples: results.len() / 2,
        hits_k: config.hits_k,
        mean_rank_raw: mr_raw / n,
        mean_rank_filtered: mr_filt / n,
        hits_raw_pct: 100.0 * hits_raw as f64 / n,
        hits_filtered_pct: 100.0 * hits_filt as f64 / n,
        mrr_raw: mrr_raw / n,
        mrr_filtered: mrr_filt / n,
        per_category,
        defaulted_categories: defaulted,
        queries_without_cached_paths: missing_queries,
        raw_only: config.raw_only,
    }
}

/// Ranks a split and aggregates the report.
pub fn evaluate(
    params: &ModelParams,
    cache: &TransitionCache,
    graph: &KnowledgeGraph,
    path_cache: &PathCache,
    split: Split,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let results = rank_split(params, cache, graph, path_cache, split)?;
    Ok(aggregate(graph, path_cache, &results, config))
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("link prediction report\n");
        out.push_str(
            "  tie rule: rank = 1 + candidates with strictly smaller score (ties favor the target)\n",
        );
        out.push_str(
            "  paths: mined from train edges only; candidates without cached paths score direct-only\n",
        );
        out.push_str(&format!(
            "  categories: train tph/hpt means, threshold {}\n",
            crate::kg::CATEGORY_THRESHOLD
        ));
        out.push_str(&format!(
            "  test triples: {} ({} ranking queries, {} without cached paths)\n",
            self.triples,
            self.triples * 2,
            self.queries_without_cached_paths
        ));
        if self.defaulted_categories > 0 {
            out.push_str(&format!(
                "  note: {} results used the N-to-N default for relations without train stats\n",
                self.defaulted_categories
            ));
        }
        out.push('\n');
        if self.raw_only {
            out.push_str(&format!("  {:<18} {:>10}\n", "metric", "raw"));
            out.push_str(&format!(
                "  {:<18} {:>10.1}\n",
                "mean rank", self.mean_rank_raw
            ));
            out.push_str(&format!(
                "  {:<18} {:>10.1}\n",
                format!("hits@{} (%)", self.hits_k),
                self.hits_raw_pct
            ));
            out.push_str(&format!("  {:<18} {:>10.4}\n", "mrr", self.mrr_raw));
            return out;
        }
        out.push_str(&format!(
            "  {:<18} {:>10} {:>10}\n",
            "metric", "raw", "filtered"
        ));
        out.push_str(&format!(
            "  {:<18} {:>10.1} {:>10.1}\n",
            "mean rank", self.mean_rank_raw, self.mean_rank_filtered
        ));
        out.push_str(&format!(
            "  {:<18} {:>10.1} {:>10.1}\n",
            format!("hits@{} (%)", self.hits_k),
            self.hits_raw_pct,
            self.hits_filtered_pct
        ));
        out.push_str(&format!(
            "  {:<18} {:>10.4} {:>10.4}\n",
            "mrr", self.mrr_raw, self.mrr_filtered
        ));
        out.push('\n');
        out.push_str(&format!(
            "  filtered hits@{} by relation category (%)\n",
            self.hits_k
        ));
        out.push_str(&format!(
            "  {:<16} {:>8} {:>8} {:>8} {:>8}\n",
            "side", "1-to-1", "1-to-N", "N-to-1", "N-to-N"
        ));
        for side in [Side::Head, Side::Tail] {
            let cells: Vec<&CategoryCell> = self
                .per_category
                .iter()
                .filter(|c| c.side == side)
                .collect();
            out.push_str(&format!(
                "  {:<16} {:>8.1} {:>8.1} {:>8.1} {:>8.1}\n",
                format!("predict {}", side.label()),
                cells[0].hits_filtered_pct,
                cells[1].hits_filtered_pct,
                cells[2].hits_filtered_pct,
                cells[3].hits_filtered_pct
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_graph, RawTriple};
    use crate::model::{init_params, MMode, Norm};
    use crate::path::PathConfig;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    fn toy() -> (KnowledgeGraph, PathCache) {
        let train: Vec<RawTriple> = [
            ("a", "r1", "b"),
            ("b", "r2", "c"),
            ("a", "r3", "c"),
            ("c", "r1", "d"),
            ("d", "r2", "e"),
            ("c", "r3", "e"),
            ("e", "r1", "f"),
        ]
        .iter()
        .map(|&(h, r, t)| (h.into(), r.into(), t.into()))
        .collect();
        let test: Vec<RawTriple> = vec![("a".into(), "r3".into(), "c".into())];
        let (mut g, _) = build_graph(&train, &[], &test);
        g.add_reverse_relations().unwrap();
        let cache = PathCache::build(&g, &PathConfig::default(), &[Split::Test]).unwrap();
        (g, cache)
    }

    fn model_for(g: &KnowledgeGraph, seed: u64) -> (ModelParams, TransitionCache) {
        let mut rng = StdRng::seed_from_u64(seed);
        let params = init_params(g, 5, Norm::L1, &mut rng);
        let cache = TransitionCache::new(&params, MMode::Derived, &BTreeSet::new()).unwrap();
        (params, cache)
    }

    #[test]
    fn rank_of_hand_counted_example() {
        // Six candidates; three outscore the target, two of those are known
        // facts. Raw rank 4, filtered rank 2.
        let train: Vec<RawTriple> = vec![
            ("e0".into(), "r".into(), "e1".into()),
            ("e0".into(), "r".into(), "e2".into()),
            ("e3".into(), "r".into(), "e4".into()),
            ("e5".into(), "r".into(), "e0".into()),
        ];
        let (g, _) = build_graph(&train, &[], &[]);
        let query = EvalQuery {
            side: Side::Tail,
            anchor: g.lookup_entity("e0").unwrap(),
            relation: g.lookup_relation("r").unwrap(),
        };
        // Scores by entity id: e0..e5. Target is e4 (score 0.5); e1, e2, e3
        // score below it; (e0, r, e1) and (e0, r, e2) are known facts.
        let scores = [0.9, 0.1, 0.2, 0.3, 0.5, 0.6];
        let target = g.lookup_entity("e4").unwrap();
        assert_eq!(rank_of(&scores, target, &g, &query, RankMode::Raw), 4);
        assert_eq!(rank_of(&scores, target, &g, &query, RankMode::Filtered), 2);
    }

    #[test]
    fn unique_minimum_ranks_first_everywhere() {
        let (g, _) = build_graph(&[("a".into(), "r".into(), "b".into())], &[], &[]);
        let query = EvalQuery {
            side: Side::Tail,
            anchor: g.lookup_entity("a").unwrap(),
            relation: g.lookup_relation("r").unwrap(),
        };
        let scores = [0.4, 0.1];
        let target = g.lookup_entity("b").unwrap();
        assert_eq!(rank_of(&scores, target, &g, &query, RankMode::Raw), 1);
        assert_eq!(rank_of(&scores, target, &g, &query, RankMode::Filtered), 1);
    }

    #[test]
    fn all_equal_scores_rank_one() {
        let (g, _) = build_graph(&[("a".into(), "r".into(), "b".into())], &[], &[]);
        let query = EvalQuery {
            side: Side::Tail,
            anchor: g.lookup_entity("a").unwrap(),
            relation: g.lookup_relation("r").unwrap(),
        };
        let scores = [0.5, 0.5];
        let target = g.lookup_entity("a").unwrap();
        assert_eq!(rank_of(&scores, target, &g, &query, RankMode::Raw), 1);
    }

    #[test]
    fn filtered_never_exceeds_raw() {
        let (g, path_cache) = toy();
        let (params, cache) = model_for(&g, 8);
        let results = rank_split(&params, &cache, &g, &path_cache, Split::Test).unwrap();
        for r in &results {
            assert!(r.filtered_rank <= r.raw_rank);
            assert!(r.raw_rank >= 1 && r.raw_rank <= g.entity_count());
        }
    }

    #[test]
    fn perfect_single_triple_metrics() {
        let (g, path_cache) = toy();
        let (mut params, _) = model_for(&g, 9);
        // Shape the parameters so the test triple is a clear winner on both
        // sides: identity projections, r3 = c - a exactly.
        for m in params.w1.iter_mut().chain(params.w2.iter_mut()) {
            m.fill_with_identity();
        }
        let a = g.lookup_entity("a").unwrap();
        let c = g.lookup_entity("c").unwrap();
        let r3 = g.lookup_relation("r3").unwrap();
        let delta = params.entities[c.index()].clone() - params.entities[a.index()].clone();
        params.relations[r3.index()] = delta;
        let cache = TransitionCache::new(&params, MMode::Derived, &BTreeSet::new()).unwrap();
        let report = evaluate(
            &params,
            &cache,
            &g,
            &path_cache,
            Split::Test,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(report.mean_rank_filtered, 1.0);
        assert_eq!(report.hits_filtered_pct, 100.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_pure() {
        let (g, path_cache) = toy();
        let (params, cache) = model_for(&g, 10);
        let r1 = rank_split(&params, &cache, &g, &path_cache, Split::Test).unwrap();
        let r2 = rank_split(&params, &cache, &g, &path_cache, Split::Test).unwrap();
        let pairs: Vec<(usize, usize)> = r1.iter().map(|r| (r.raw_rank, r.filtered_rank)).collect();
        let pairs2: Vec<(usize, usize)> =
            r2.iter().map(|r| (r.raw_rank, r.filtered_rank)).collect();
        assert_eq!(pairs, pairs2);
    }

    #[test]
    fn hits_is_monotone_in_k() {
        let (g, path_cache) = toy();
        let (params, cache) = model_for(&g, 11);
        let results = rank_split(&params, &cache, &g, &path_cache, Split::Test).unwrap();
        let mut last = 0.0;
        for k in [1, 2, 5, 10, 50] {
            let report = aggregate(
                &g,
                &path_cache,
                &results,
                &EvalConfig {
                    hits_k: k,
                    raw_only: false,
                },
            );
            assert!(report.hits_filtered_pct >= last);
            last = report.hits_filtered_pct;
        }
    }

    #[test]
    fn category_cells_sum_to_split_size_per_side() {
        let (g, path_cache) = toy();
        let (params, cache) = model_for(&g, 12);
        let results = rank_split(&params, &cache, &g, &path_cache, Split::Test).unwrap();
        let report = aggregate(&g, &path_cache, &results, &EvalConfig::default());
        for side in [Side::Head, Side::Tail] {
            let total: usize = report
                .per_category
                .iter()
                .filter(|c| c.side == side)
                .map(|c| c.count)
                .sum();
            assert_eq!(total, report.triples);
        }
    }

    #[test]
    fn empty_split_is_a_contract_error() {
        let (g, path_cache) = {
            let (mut g, _) = build_graph(&[("a".into(), "r".into(), "b".into())], &[], &[]);
            g.add_reverse_relations().unwrap();
            let c = PathCache::build(&g, &PathConfig::default(), &[]).unwrap();
            (g, c)
        };
        let (params, cache) = model_for(&g, 13);
        assert!(matches!(
            rank_split(&params, &cache, &g, &path_cache, Split::Test),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn candidate_scores_use_pooled_energy_for_true_entities() {
        let (g, path_cache) = toy();
        let (params, cache) = model_for(&g, 14);
        let t = g.split(Split::Test)[0];
        let query = EvalQuery {
            side: Side::Tail,
            anchor: t.head,
            relation: t.relation,
        };
        let scores = score_candidates(&params, &cache, &g, &path_cache, &query).unwrap();
        let sets = path_cache.eval_candidates(&query).unwrap();
        let set = sets
            .iter()
            .find(|(c, _)| *c == t.tail)
            .map(|(_, s)| s)
            .expect("true tail has path evidence");
        let expected = final_energy(&params, &cache, t.head, t.relation, t.tail, set)
            .unwrap()
            .final_energy;
        assert_eq!(scores[t.tail.index()], expected);
    }

    #[test]
    fn render_text_contains_disclosures() {
        let (g, path_cache) = toy();
        let (params, cache) = model_for(&g, 15);
        let report = evaluate(
            &params,
            &cache,
            &g,
            &path_cache,
            Split::Test,
            &EvalConfig::default(),
        )
        .unwrap();
        let text = report.render_text();
        assert!(text.contains("tie rule"));
        assert!(text.contains("train edges only"));
        assert!(text.contains("threshold 1.5"));
        assert!(text.contains("predict head"));

        let raw_only = evaluate(
            &params,
            &cache,
            &g,
            &path_cache,
            Split::Test,
            &EvalConfig {
                hits_k: 10,
                raw_only: true,
            },
        )
        .unwrap();
        let text = raw_only.render_text();
        assert!(!text.contains("filtered"));
    }
}
