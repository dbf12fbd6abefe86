"""Temporal reasoning: clue facts from searched paths, per-timestep clue
graphs, a relation-aware GCN over each graph, a GRU over the graph
sequence, and the entity decoder.

The decoder emits one logit per entity. Reported scores and the beam-level
reward use the sigmoid of those logits; the training loss applies softmax
normalization to the same logits so that it is a proper cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cells
from .autodiff import Tensor
from .stage1 import Query
from .tkg import TemporalKG


@dataclass(frozen=True)
class ClueGraph:
    """Labeled edges active at one timestep, in deterministic (s,r,o) order."""

    t: int
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray

    @property
    def nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.src, self.dst]))

    def num_edges(self) -> int:
        return int(self.src.shape[0])


@dataclass
class ClueGraphSequence:
    query: Query
    graphs: list[ClueGraph]  # strictly increasing t, all < query.t_s

    def __len__(self) -> int:
        return len(self.graphs)


@dataclass
class Stage2Params:
    entity: Tensor  # (|E|, d) -- independent from stage 1
    relation: Tensor  # (2R+2, d)
    rgcn_rel: list[Tensor]  # per layer: ((2R+2)*d, d) row blocks, one per relation
    rgcn_loop: list[Tensor]  # per layer: (d, d)
    rgcn_basis: list[tuple[Tensor, Tensor] | None]  # optional (basis (nb*d, d), coef (2R+2, nb))
    gru: cells.GruParams
    wmlp: Tensor  # (d_H, |E|)

    @staticmethod
    def init(
        rng: np.random.Generator,
        num_entities: int,
        num_relations_ext: int,
        d: int,
        d_gru: int,
        rgcn_layers: int,
        num_bases: int = 0,
        dtype=np.float64,
    ) -> "Stage2Params":
        rel_w, loop_w, basis = [], [], []
        for _ in range(rgcn_layers):
            loop_w.append(ad.parameter(cells.uniform_init(rng, d, (d, d), dtype)))
            if num_bases > 0:
                b = ad.parameter(cells.uniform_init(rng, d, (num_bases * d, d), dtype))
                c = ad.parameter(cells.uniform_init(rng, num_bases, (num_relations_ext, num_bases), dtype))
                basis.append((b, c))
                rel_w.append(None)  # type: ignore[arg-type]
            else:
                rel_w.append(ad.parameter(cells.uniform_init(rng, d, (num_relations_ext * d, d), dtype)))
                basis.append(None)
        return Stage2Params(
            entity=ad.parameter(cells.uniform_init(rng, d, (num_entities, d), dtype)),
            relation=ad.parameter(cells.uniform_init(rng, d, (num_relations_ext, d), dtype)),
            rgcn_rel=rel_w,
            rgcn_loop=loop_w,
            rgcn_basis=basis,
            gru=cells.init_gru(rng, 3 * d, d_gru, dtype),
            wmlp=ad.parameter(cells.uniform_init(rng, d_gru, (d_gru, num_entities), dtype)),
        )

    def named(self) -> dict[str, Tensor]:
        out = {
            "entity": self.entity,
            "relation": self.relation,
            "wmlp": self.wmlp,
            "gru.wx_zr": self.gru.wx_zr,
            "gru.wh_zr": self.gru.wh_zr,
            "gru.b_zr": self.gru.b_zr,
            "gru.wx_n": self.gru.wx_n,
            "gru.wh_n": self.gru.wh_n,
            "gru.b_n": self.gru.b_n,
        }
        for i, (w, loop, bas) in enumerate(zip(self.rgcn_rel, self.rgcn_loop, self.rgcn_basis)):
            out[f"rgcn{i}.loop"] = loop
            if bas is None:
                out[f"rgcn{i}.rel"] = w
            else:
                out[f"rgcn{i}.basis"] = bas[0]
                out[f"rgcn{i}.coef"] = bas[1]
        return out

    @property
    def dim(self) -> int:
        return self.entity.shape[1]


CluePath = list[tuple[int, int, int]]  # hops (source, relation, destination)


def derive_clue_facts(
    paths: list[CluePath], kg: TemporalKG, t_s: int, window: int = 0
) -> list[tuple[int, int, int, int]]:
    """Map every non-self-loop hop (a, r, b) of every path to all facts
    (a, r, b, t) with t < t_s (and t >= t_s - window when window > 0).
    De-duplicated, sorted by (t, s, r, o)."""
    t_lo = t_s - window if window > 0 else 0
    out: set[tuple[int, int, int, int]] = set()
    seen_hops: set[tuple[int, int, int]] = set()
    for path in paths:
        for a, r, b in path:
            if r == kg.vocab.self_loop or (a, r, b) in seen_hops:
                continue
            seen_hops.add((a, r, b))
            rr, oo, tt = kg.outgoing_arrays(a, t_lo, t_s - 1)
            for t in tt[(rr == r) & (oo == b)]:
                out.add((a, r, b, int(t)))
    return sorted(out, key=lambda f: (f[3], f[0], f[1], f[2]))


def paths_from_beams(beams, query: Query) -> list[CluePath]:
    """Beam action lists as (source, relation, destination) hop triples."""
    out = []
    for beam in beams:
        hops: CluePath = []
        src = query.e_s
        for act in beam.actions:
            hops.append((src, act.r, act.e))
            src = act.e
        out.append(hops)
    return out


def build_sequence(
    clue_facts: list[tuple[int, int, int, int]], query: Query, L: int = 10
) -> ClueGraphSequence:
    """Group clue facts by timestep and keep the L most recent non-empty
    graphs in ascending time order."""
    if L < 1:
        raise ValueError("L must be >= 1")
    by_t: dict[int, list[tuple[int, int, int]]] = {}
    for s, r, o, t in clue_facts:
        if t >= query.t_s:
            raise ValueError("clue fact at or after query time")
        by_t.setdefault(t, []).append((s, r, o))
    times = sorted(by_t)[-L:]
    graphs = []
    for t in times:
        edges = sorted(by_t[t])
        arr = np.array(edges, dtype=np.int64).reshape(-1, 3)
        graphs.append(ClueGraph(t=t, src=arr[:, 0], rel=arr[:, 1], dst=arr[:, 2]))
    return ClueGraphSequence(query=query, graphs=graphs)


def _relation_block(params: Stage2Params, layer: int, r: int, d: int) -> Tensor:
    bas = params.rgcn_basis[layer]
    if bas is None:
        return ad.narrow(params.rgcn_rel[layer], 0, r * d, d)
    basis, coef = bas
    nb = coef.shape[1]
    w: Tensor | None = None
    for b in range(nb):
        piece = ad.smul(ad.pick(coef, r, b), ad.narrow(basis, 0, b * d, d))
        w = piece if w is None else w + piece
    return w


def rgcn_forward(
    graph: ClueGraph, params: Stage2Params, omega: int, nodes: np.ndarray | None = None
) -> tuple[np.ndarray, Tensor]:
    """omega relation-aware conv layers over one clue graph.

    Messages into o average W_r h_s over ALL incoming edges (parallel edges
    count); every node adds its self-loop transform; ReLU between layers.
    Returns (global node ids, per-node embeddings in that order). `nodes`
    overrides the node set (must cover every edge endpoint).
    """
    if nodes is None:
        nodes = graph.nodes
    else:
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    local = {int(e): i for i, e in enumerate(nodes)}
    n = nodes.shape[0]
    d = params.dim
    src_l = np.array([local[int(s)] for s in graph.src], dtype=np.int64)
    dst_l = np.array([local[int(o)] for o in graph.dst], dtype=np.int64)
    indeg = np.bincount(dst_l, minlength=n).astype(np.float64)
    inv_deg = np.where(indeg > 0, 1.0 / np.maximum(indeg, 1.0), 0.0)

    h = ad.embedding_lookup(params.entity, nodes)
    rel_ids = np.unique(graph.rel)
    for layer in range(omega):
        msgs, dsts = [], []
        for r in rel_ids:
            sel = graph.rel == r
            if not sel.any():
                continue
            w_r = _relation_block(params, layer, int(r), d)
            msgs.append(ad.matmul(ad.gather_rows(h, src_l[sel]), w_r))
            dsts.append(dst_l[sel])
        loop = ad.matmul(h, params.rgcn_loop[layer])
        if msgs:
            agg = ad.index_sum_rows(ad.concat(msgs, axis=0), np.concatenate(dsts), n)
            agg = ad.scale_rows(agg, inv_deg)
            h = ad.relu(agg + loop)
        else:
            h = ad.relu(loop)
    return nodes, h


def graph_embedding(node_embeddings: Tensor) -> Tensor:
    """Mean pool over the entities appearing in the graph."""
    return ad.mean_rows(node_embeddings)


def encode_sequence(query: Query, sequence: ClueGraphSequence, params: Stage2Params, omega: int) -> Tensor:
    """GRU over [subject-embedding, graph-embedding, relation-embedding]
    inputs in time order, from a zero initial state. Empty sequence -> 0."""
    d_gru = params.gru.hidden
    dtype = params.entity.data.dtype
    h = ad.zeros((1, d_gru), dtype)
    if not sequence.graphs:
        return h
    e_s = ad.embedding_lookup(params.entity, [query.e_s])
    r_q = ad.embedding_lookup(params.relation, [query.r_q])
    for graph in sequence.graphs:
        _, node_h = rgcn_forward(graph, params, omega)
        g = graph_embedding(node_h)
        h = cells.gru_cell(ad.concat([e_s, g, r_q]), h, params.gru)
    return h


def score_logits(h_final: Tensor, params: Stage2Params) -> Tensor:
    return ad.matmul(h_final, params.wmlp)


def score_entities(h_final: Tensor, params: Stage2Params) -> Tensor:
    """Per-entity scores in (0,1): sigmoid of the decoder logits."""
    return ad.sigmoid(score_logits(h_final, params))


def sigmoid_scores(logits: Tensor) -> np.ndarray:
    """Untaped sigmoid of a logits row (rewards are constants to the tape)."""
    return np.exp(-np.logaddexp(0.0, -logits.data))[0]


def ce_loss(logits: Tensor, e_o: int) -> Tensor:
    """Softmax cross-entropy of the true entity against all logits."""
    if not 0 <= e_o < logits.shape[1]:
        raise ValueError("target entity outside vocabulary")
    return ad.neg(ad.pick(ad.log_softmax_row(logits), 0, e_o))


def beam_reward(p, e_i: int) -> float:
    """Beam-level reward: the sigmoid score of the beam's destination."""
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    return float(data.reshape(-1)[e_i])
