"""Ranking construction, MRR / Hits@K under raw and time-aware filtered
settings, ablation modes, clue statistics, and per-query explanations.

Ranking semantics: by default the first stage's candidate entities outrank
all non-candidates, each group sorted by the second stage's score
(descending, ties by entity id ascending). A "pure" mode ranks every
entity by score alone. Queries whose clue sequence is empty fall back to
the first stage's path scores inside the candidate group.

The time-aware filtered setting removes only competitors that form a true
fact at exactly the predicted timestep; the classical time-ignorant
filtered setting is deliberately not implemented.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import stage1 as s1
from . import stage2 as s2
from .stage1 import Query, Stage1Params
from .stage2 import Stage2Params
from .tkg import DatasetBundle, TemporalKG

MODES = ("full", "stage1_only", "stage2_only")


@dataclass
class RankingRecord:
    query: Query
    mode: str
    direction: str  # "object" or "subject" (inverse-converted)
    rank_raw: int
    rank_filtered: int
    n_candidates: int
    used_fallback: bool = False
    topk: list[tuple[int, float]] = field(default_factory=list)


def final_ranking(
    candidates: list[tuple[int, float]],
    p: np.ndarray,
    restrict_mode: str = "candidates_first",
) -> np.ndarray:
    """Total order over all entities.

    candidates_first: candidate entities (sorted by p desc, id asc) ahead of
    all others (same sort); pure: everything by p desc, id asc. An empty
    candidate list falls back to pure ordering.
    """
    if restrict_mode not in ("candidates_first", "pure"):
        raise ValueError(f"unknown restrict mode {restrict_mode!r}")
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    n = p.shape[0]
    group = np.ones(n, dtype=np.int8)
    if restrict_mode == "candidates_first" and candidates:
        group[[e for e, _ in candidates]] = 0
    return np.lexsort((np.arange(n), -p, group))


def _rank_with_filter(
    e_o: int, group: np.ndarray, score: np.ndarray, filter_mask: np.ndarray | None
) -> tuple[int, int]:
    """Raw and time-filtered 1-based rank of e_o under the lexicographic
    order (group asc, score desc, id asc), without materializing it."""
    ids = np.arange(score.shape[0])
    g_o, s_o = group[e_o], score[e_o]
    better = (group < g_o) | (
        (group == g_o) & ((score > s_o) | ((score == s_o) & (ids < e_o)))
    )
    raw = 1 + int(better.sum())
    if filter_mask is None:
        return raw, raw
    return raw, raw - int((better & filter_mask).sum())


def time_aware_filter(query: Query, ordering: np.ndarray, true_objects: set[int]) -> int:
    """Rank of the answer in `ordering` after removing every other entity
    that forms a true fact (e_s, r_q, *, t_s) anywhere in the dataset."""
    rank = 0
    for e in ordering:
        e = int(e)
        if e == query.e_o:
            return rank + 1
        if e not in true_objects:
            rank += 1
    raise ValueError("ordering does not contain the answer")


def metrics(records: list[RankingRecord], setting: str = "raw") -> dict[str, float]:
    """MRR and Hits@{1,10} over ranking records."""
    if not records:
        raise ValueError("no records to aggregate")
    if setting == "raw":
        ranks = np.array([r.rank_raw for r in records], dtype=np.float64)
    elif setting == "time_filtered":
        ranks = np.array([r.rank_filtered for r in records], dtype=np.float64)
    else:
        raise ValueError(f"unknown setting {setting!r}")
    return {
        "mrr": float((1.0 / ranks).mean()),
        "hits1": float((ranks <= 1).mean()),
        "hits10": float((ranks <= 10).mean()),
        "n_queries": int(ranks.shape[0]),
    }


class TimeFilterIndex:
    """(subject, relation, time) -> true objects across all splits."""

    def __init__(self, bundle: DatasetBundle):
        self._map: dict[tuple[int, int, int], set[int]] = {}
        for arr in (bundle.train, bundle.valid, bundle.test):
            for s, r, o, t in arr.tolist():
                self._map.setdefault((s, r, t), set()).add(o)

    def true_objects(self, query: Query) -> set[int]:
        return self._map.get((query.e_s, query.r_q, query.t_s), set())

    def mask(self, query: Query, n_entities: int) -> np.ndarray | None:
        objs = self.true_objects(query)
        if not objs:
            return None
        mask = np.zeros(n_entities, dtype=bool)
        mask[list(objs)] = True
        if query.e_o is not None:
            mask[query.e_o] = False
        return mask if mask.any() else None


def repetitive_clue_facts(
    kg: TemporalKG, query: Query, window: int = 0
) -> list[tuple[int, int, int, int]]:
    """1-hop facts repeating the query pattern (e_s, r_q, *) before t_s."""
    t_lo = query.t_s - window if window > 0 else 0
    if query.t_s == 0:
        return []
    rr, oo, tt = kg.outgoing_arrays(query.e_s, t_lo, query.t_s - 1)
    sel = rr == query.r_q
    return sorted(
        {(query.e_s, query.r_q, int(o), int(t)) for o, t in zip(oo[sel], tt[sel])},
        key=lambda f: (f[3], f[0], f[1], f[2]),
    )


@dataclass
class QueryOutcome:
    """Everything one mode produced for one query."""

    candidates: list[tuple[int, float]]
    scores: np.ndarray | None  # stage-2 sigmoid scores over all entities
    sequence: s2.ClueGraphSequence | None
    beams: list | None
    used_fallback: bool


def run_full_query(
    kg: TemporalKG,
    query: Query,
    params1: Stage1Params,
    params2: Stage2Params,
    cfg,
    rng: np.random.Generator,
) -> QueryOutcome:
    """Both stages end to end for one query (inference, no tape)."""
    m = s1.adaptive_window(kg, query, cfg.m_mode, cfg.pattern_k, cfg.fixed_m, cfg.m_max)
    beams = s1.randomized_beam_search(
        kg, query, params1, cfg.beam_size, cfg.mu, cfg.max_steps,
        cfg.delta, m, cfg.action_cap, rng, cfg.strict_delta_step0,
    )
    candidates = s1.stage1_rank(beams)
    paths = s2.paths_from_beams(beams, query)
    facts = s2.derive_clue_facts(paths, kg, query.t_s, cfg.clue_window)
    seq = s2.build_sequence(facts, query, cfg.seq_len)
    h = s2.encode_sequence(query, seq, params2, cfg.rgcn_layers)
    p = s2.score_entities(h, params2).data[0]
    return QueryOutcome(candidates, p, seq, beams, used_fallback=len(seq) == 0)


def run_stage1_query(
    kg: TemporalKG, query: Query, params1: Stage1Params, cfg, rng: np.random.Generator
) -> QueryOutcome:
    m = s1.adaptive_window(kg, query, cfg.m_mode, cfg.pattern_k, cfg.fixed_m, cfg.m_max)
    beams = s1.randomized_beam_search(
        kg, query, params1, cfg.beam_size, cfg.mu, cfg.max_steps,
        cfg.delta, m, cfg.action_cap, rng, cfg.strict_delta_step0,
    )
    return QueryOutcome(s1.stage1_rank(beams), None, None, beams, used_fallback=True)


def run_stage2_query(
    kg: TemporalKG, query: Query, params2: Stage2Params, cfg
) -> QueryOutcome:
    """Ablation: repetitive 1-hop clues feed stage 2 directly, no policy."""
    facts = repetitive_clue_facts(kg, query, cfg.clue_window)
    seq = s2.build_sequence(facts, query, cfg.seq_len)
    h = s2.encode_sequence(query, seq, params2, cfg.rgcn_layers)
    p = s2.score_entities(h, params2).data[0]
    candidates = sorted({f[2] for f in facts})
    cand_scored = [(e, float(p[e])) for e in candidates]
    return QueryOutcome(cand_scored, p, seq, None, used_fallback=False)


def outcome_order_arrays(
    outcome: QueryOutcome, n_entities: int, restrict_mode: str = "candidates_first"
) -> tuple[np.ndarray, np.ndarray]:
    """(group, score) arrays realizing the ranking semantics: candidates in
    group 0 when restricting, stage-2 scores everywhere, except that
    score-less outcomes (stage-1 only) and empty-sequence fallbacks rank
    the candidate group by stage-1 path score."""
    group = np.ones(n_entities, dtype=np.int8)
    score = (
        np.asarray(outcome.scores, dtype=np.float64).copy()
        if outcome.scores is not None
        else np.zeros(n_entities, dtype=np.float64)
    )
    if restrict_mode == "candidates_first" and outcome.candidates:
        for e, _ in outcome.candidates:
            group[e] = 0
        if outcome.used_fallback or outcome.scores is None:
            for e, s in outcome.candidates:
                score[e] = s
    return group, score


def outcome_ordering(
    outcome: QueryOutcome, n_entities: int, restrict_mode: str = "candidates_first"
) -> np.ndarray:
    group, score = outcome_order_arrays(outcome, n_entities, restrict_mode)
    return np.lexsort((np.arange(n_entities), -score, group))


def record_for_outcome(
    query: Query,
    mode: str,
    direction: str,
    outcome: QueryOutcome,
    n_entities: int,
    filter_index: TimeFilterIndex | None,
    restrict_mode: str = "candidates_first",
    topk: int = 10,
) -> RankingRecord:
    """Rank the answer for one query outcome under raw and time-filtered
    settings."""
    group, score = outcome_order_arrays(outcome, n_entities, restrict_mode)
    fmask = filter_index.mask(query, n_entities) if filter_index is not None else None
    raw, filt = _rank_with_filter(query.e_o, group, score, fmask)
    order = np.lexsort((np.arange(n_entities), -score, group))
    top = [(int(e), float(score[e])) for e in order[:topk]]
    return RankingRecord(
        query=query,
        mode=mode,
        direction=direction,
        rank_raw=raw,
        rank_filtered=filt,
        n_candidates=len(outcome.candidates),
        used_fallback=outcome.used_fallback,
        topk=top,
    )


def build_queries(bundle: DatasetBundle, split: str) -> list[Query]:
    """One object-prediction query per (augmented) split fact; subject
    queries are present via the inverse-converted facts."""
    if not bundle.augmented:
        raise ValueError("query construction expects an inverse-augmented bundle")
    arr = bundle.split(split)
    return [Query(int(s), int(r), int(t), int(o)) for s, r, o, t in arr.tolist()]


def query_rng(seed: int, split: str, index: int) -> np.random.Generator:
    code = {"train": 0, "valid": 1, "test": 2}[split]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, code, index])))


@dataclass
class EvalResult:
    records: dict[str, list[RankingRecord]]  # mode -> records
    rollout_traces: list[dict] = field(default_factory=list)
    reasoning_traces: list[dict] = field(default_factory=list)

    def metric_rows(self) -> list[dict]:
        rows = []
        for mode, recs in self.records.items():
            if not recs:
                continue
            groups = {"both": recs}
            for direction in ("object", "subject"):
                sub = [r for r in recs if r.direction == direction]
                if sub:
                    groups[direction] = sub
            for direction, sub in groups.items():
                for setting in ("raw", "time_filtered"):
                    row = {"mode": mode, "direction": direction, "setting": setting}
                    row.update(metrics(sub, setting))
                    rows.append(row)
        return rows


def _trace_from_beams(query: Query, beams, m: int) -> dict:
    return {
        "query": {"subject": query.e_s, "relation": query.r_q, "time": query.t_s, "answer": query.e_o},
        "window_m": m,
        "beams": [
            {
                "actions": [[a.r, a.e, a.t] for a in b.actions],
                "self_loop": [bool(a.self_loop) for a in b.actions],
                "cum_log_prob": float(b.cum_log_prob),
            }
            for b in beams
        ],
    }


def _trace_from_sequence(query: Query, outcome: QueryOutcome, topk: int = 5) -> dict:
    seq = outcome.sequence
    graphs = []
    if seq is not None:
        for g in seq.graphs:
            graphs.append(
                {
                    "time": int(g.t),
                    "edges": [[int(s), int(r), int(o)] for s, r, o in zip(g.src, g.rel, g.dst)],
                }
            )
    top = []
    if outcome.scores is not None:
        order = np.argsort(-outcome.scores, kind="stable")[:topk]
        top = [{"entity": int(e), "score": float(outcome.scores[e])} for e in order]
    return {
        "query": {"subject": query.e_s, "relation": query.r_q, "time": query.t_s, "answer": query.e_o},
        "sequence": graphs,
        "stage2_topk": top,
        "used_stage1_fallback": bool(outcome.used_fallback),
    }


_EVAL_CTX: dict | None = None


def _eval_indices(ctx: dict, indices) -> EvalResult:
    kg, queries, cfg = ctx["kg"], ctx["queries"], ctx["cfg"]
    params1, params2 = ctx["params1"], ctx["params2"]
    filter_index, restrict = ctx["filter_index"], ctx["restrict"]
    modes, split, seed = ctx["modes"], ctx["split"], ctx["seed"]
    n_ent, base = ctx["n_ent"], ctx["base"]
    result = EvalResult(records={mode: [] for mode in modes})
    for qi in indices:
        query = queries[int(qi)]
        direction = "object" if query.r_q < base else "subject"
        rng = query_rng(seed, split, int(qi))
        for mode in modes:
            if mode == "full":
                outcome = run_full_query(kg, query, params1, params2, cfg, rng)
            elif mode == "stage1_only":
                outcome = run_stage1_query(kg, query, params1, cfg, rng)
            else:
                outcome = run_stage2_query(kg, query, params2, cfg)
            result.records[mode].append(
                record_for_outcome(query, mode, direction, outcome, n_ent, filter_index, restrict)
            )
            if ctx["collect_traces"] and mode == "full":
                m = s1.adaptive_window(kg, query, cfg.m_mode, cfg.pattern_k, cfg.fixed_m, cfg.m_max)
                result.rollout_traces.append(_trace_from_beams(query, outcome.beams, m))
                result.reasoning_traces.append(_trace_from_sequence(query, outcome))
    return result


def _eval_chunk(indices) -> EvalResult:
    return _eval_indices(_EVAL_CTX, indices)


def evaluate(
    kg: TemporalKG,
    bundle: DatasetBundle,
    params1: Stage1Params | None,
    params2: Stage2Params | None,
    cfg,
    split: str = "test",
    modes: tuple[str, ...] = MODES,
    sample: int = 0,
    seed: int = 0,
    subset_mask: np.ndarray | None = None,
    collect_traces: bool = False,
    filter_index: TimeFilterIndex | None = None,
    workers: int = 1,
) -> EvalResult:
    """Rank every query of a split under the requested modes.

    `sample` caps the number of queries (deterministic subsample); a boolean
    `subset_mask` over the split restricts which queries participate.
    Queries are independent, so workers > 1 fans the loop out over forked
    processes; per-query rng seeding keeps the result identical either way.
    """
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode in ("full", "stage1_only") and params1 is None:
            raise ValueError(f"mode {mode!r} needs stage-1 parameters")
        if mode in ("full", "stage2_only") and params2 is None:
            raise ValueError(f"mode {mode!r} needs stage-2 parameters")
    queries = build_queries(bundle, split)
    indices = np.arange(len(queries))
    if subset_mask is not None:
        if subset_mask.shape[0] != len(queries):
            raise ValueError("subset mask length mismatch")
        indices = indices[subset_mask]
    if sample > 0 and indices.shape[0] > sample:
        srng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 997])))
        indices = np.sort(srng.choice(indices, size=sample, replace=False))
    if filter_index is None:
        filter_index = TimeFilterIndex(bundle)
    ctx = {
        "kg": kg,
        "queries": queries,
        "cfg": cfg,
        "params1": params1,
        "params2": params2,
        "filter_index": filter_index,
        "restrict": "candidates_first" if cfg.candidates_first else "pure",
        "modes": modes,
        "split": split,
        "seed": seed,
        "n_ent": bundle.num_entities,
        "base": bundle.num_base_relations,
        "collect_traces": collect_traces,
    }
    if workers <= 1 or indices.shape[0] < 2 * workers:
        return _eval_indices(ctx, indices)

    import multiprocessing as mp

    global _EVAL_CTX
    _EVAL_CTX = ctx
    try:
        chunks = [c for c in np.array_split(indices, workers) if c.size]
        with mp.get_context("fork").Pool(len(chunks)) as pool:
            parts = pool.map(_eval_chunk, [c.tolist() for c in chunks])
    finally:
        _EVAL_CTX = None
    merged = EvalResult(records={mode: [] for mode in modes})
    for part in parts:
        for mode in modes:
            merged.records[mode].extend(part.records[mode])
        merged.rollout_traces.extend(part.rollout_traces)
        merged.reasoning_traces.extend(part.reasoning_traces)
    return merged


# ---------------------------------------------------------------------------
# clue statistics over exported traces


def clue_category_stats(reasoning_traces: list[dict]) -> dict[str, float]:
    """Fractions of clue facts consumed by stage 2 that repeat the query
    pattern (same subject and relation) versus everything else."""
    repetitive = 0
    total = 0
    for trace in reasoning_traces:
        q = trace["query"]
        for graph in trace["sequence"]:
            for s, r, o in graph["edges"]:
                total += 1
                if s == q["subject"] and r == q["relation"]:
                    repetitive += 1
    if total == 0:
        return {"repetitive_fraction": 0.0, "non_repetitive_fraction": 0.0, "n_clue_facts": 0}
    return {
        "repetitive_fraction": repetitive / total,
        "non_repetitive_fraction": (total - repetitive) / total,
        "n_clue_facts": total,
    }


def clue_graph_export(rollout_traces: list[dict]) -> list[tuple[int, int, int]]:
    """(clue relation -> query relation, count) pairs over non-repetitive
    1-hop paths, ordered by count descending then relation ids."""
    counts: dict[tuple[int, int], int] = {}
    for trace in rollout_traces:
        r_q = trace["query"]["relation"]
        for beam in trace["beams"]:
            if len(beam["actions"]) != 1:
                raise ValueError("clue-graph export expects 1-hop traces")
            if beam["self_loop"][0]:
                continue
            r_clue = beam["actions"][0][0]
            if r_clue == r_q:
                continue
            key = (r_clue, r_q)
            counts[key] = counts.get(key, 0) + 1
    return sorted(
        ((rc, rq, n) for (rc, rq), n in counts.items()),
        key=lambda row: (-row[2], row[0], row[1]),
    )


# ---------------------------------------------------------------------------
# explanations

EXPLAIN_SCHEMA = {
    "type": "object",
    "required": [
        "query",
        "window_m",
        "stage1_candidates",
        "clue_sequence",
        "stage2_topk",
        "prediction",
        "used_stage1_fallback",
    ],
    "properties": {
        "query": {
            "type": "object",
            "required": ["subject", "relation", "time"],
            "properties": {
                "subject": {"type": "integer"},
                "relation": {"type": "integer"},
                "time": {"type": "integer"},
                "answer": {"type": ["integer", "null"]},
            },
        },
        "window_m": {"type": "integer"},
        "stage1_candidates": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["entity", "path_score", "best_path"],
                "properties": {
                    "entity": {"type": "integer"},
                    "path_score": {"type": "number"},
                    "best_path": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "integer"}},
                    },
                },
            },
        },
        "clue_sequence": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["time", "edges"],
                "properties": {
                    "time": {"type": "integer"},
                    "edges": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
                },
            },
        },
        "stage2_topk": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["entity", "score"],
                "properties": {"entity": {"type": "integer"}, "score": {"type": "number"}},
            },
        },
        "prediction": {"type": "integer"},
        "used_stage1_fallback": {"type": "boolean"},
    },
}


def explain(
    kg: TemporalKG,
    query: Query,
    params1: Stage1Params,
    params2: Stage2Params,
    cfg,
    rng: np.random.Generator,
    topk: int = 5,
) -> dict:
    """Per-query reasoning narrative: top candidates with their best paths,
    the clue-graph sequence, final scores, and the predicted answer."""
    if not 0 <= query.e_s < kg.num_entities:
        raise ValueError(f"unknown entity id {query.e_s}")
    if not 0 <= query.r_q < kg.vocab.extended_count:
        raise ValueError(f"unknown relation id {query.r_q}")
    m = s1.adaptive_window(kg, query, cfg.m_mode, cfg.pattern_k, cfg.fixed_m, cfg.m_max)
    outcome = run_full_query(kg, query, params1, params2, cfg, rng)
    best_paths: dict[int, tuple[float, list]] = {}
    for beam in outcome.beams:
        cur = best_paths.get(beam.destination)
        if cur is None or beam.cum_log_prob > cur[0]:
            best_paths[beam.destination] = (
                beam.cum_log_prob,
                [[a.r, a.e, a.t] for a in beam.actions],
            )
    cands = [
        {"entity": int(e), "path_score": float(s), "best_path": best_paths[e][1]}
        for e, s in outcome.candidates[:topk]
    ]
    seq_trace = _trace_from_sequence(query, outcome, topk=topk)
    restrict = "candidates_first" if cfg.candidates_first else "pure"
    order = outcome_ordering(outcome, kg.num_entities, restrict)
    return {
        "query": {"subject": query.e_s, "relation": query.r_q, "time": query.t_s, "answer": query.e_o},
        "window_m": int(m),
        "stage1_candidates": cands,
        "clue_sequence": seq_trace["sequence"],
        "stage2_topk": seq_trace["stage2_topk"],
        "prediction": int(order[0]),
        "used_stage1_fallback": bool(outcome.used_fallback),
    }
