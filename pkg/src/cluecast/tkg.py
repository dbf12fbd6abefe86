"""Temporal knowledge-graph data model: quadruple datasets, inverse-fact
augmentation, time-sorted adjacency indexes, and history-coverage statistics.

Facts are (subject, relation, object, time) with 0-based integer ids and
integer timesteps (raw times already divided by the dataset's time gap).
The relation vocabulary is extended: ids [0, R) are base relations,
[R, 2R) their inverses, 2R is the self-loop marker and 2R+1 the dummy
start relation used by the path encoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)


class Quadruple(NamedTuple):
    s: int
    r: int
    o: int
    t: int


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class RelationVocab:
    """Extended relation-id layout over a base vocabulary of size R."""

    base_count: int

    @property
    def extended_count(self) -> int:
        return 2 * self.base_count + 2

    @property
    def self_loop(self) -> int:
        return 2 * self.base_count

    @property
    def dummy_start(self) -> int:
        return 2 * self.base_count + 1

    def inverse(self, r: int) -> int:
        if r >= 2 * self.base_count:
            raise ValueError(f"relation {r} has no inverse (special id)")
        return r + self.base_count if r < self.base_count else r - self.base_count


def _as_quad_array(quads) -> np.ndarray:
    arr = np.asarray(quads, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an (n,4) quadruple array, got shape {arr.shape}")
    return arr


class TemporalKG:
    """Immutable fact store with a per-subject, time-sorted adjacency index.

    Facts are kept sorted by (subject, time, relation, object); the slice
    for one subject is therefore time-ascending, so half-open time windows
    are two binary searches.
    """

    def __init__(self, quads, num_entities: int, num_base_relations: int):
        arr = _as_quad_array(quads)
        self.num_entities = int(num_entities)
        self.num_base_relations = int(num_base_relations)
        self.vocab = RelationVocab(self.num_base_relations)
        if arr.shape[0]:
            if arr[:, 0].min() < 0 or arr[:, 0].max() >= self.num_entities:
                raise ValidationError("subject id out of range")
            if arr[:, 2].min() < 0 or arr[:, 2].max() >= self.num_entities:
                raise ValidationError("object id out of range")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= self.vocab.extended_count:
                raise ValidationError("relation id out of range")
            if arr[:, 3].min() < 0:
                raise ValidationError("negative timestep")
        order = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 3], arr[:, 0]))
        arr = np.ascontiguousarray(arr[order])
        self.s = np.ascontiguousarray(arr[:, 0])
        self.r = np.ascontiguousarray(arr[:, 1])
        self.o = np.ascontiguousarray(arr[:, 2])
        self.t = np.ascontiguousarray(arr[:, 3])
        self.ent_ptr = np.zeros(self.num_entities + 1, dtype=np.int64)
        counts = np.bincount(self.s, minlength=self.num_entities)
        np.cumsum(counts, out=self.ent_ptr[1:])
        self.max_time = int(self.t.max()) if self.t.size else 0

    def __len__(self) -> int:
        return self.s.shape[0]

    def quadruples(self):
        for i in range(len(self)):
            yield Quadruple(int(self.s[i]), int(self.r[i]), int(self.o[i]), int(self.t[i]))

    def subject_slice(self, e: int) -> tuple[int, int]:
        return int(self.ent_ptr[e]), int(self.ent_ptr[e + 1])

    def outgoing_arrays(
        self,
        e: int,
        t_lo: int,
        t_hi: int,
        *,
        t_prev: int = 0,
        delta: int = 0,
        apply_delta: bool = False,
        cap: int = 0,
        dedup: bool = False,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if t_lo > t_hi or e < 0 or e >= self.num_entities:
            z = np.empty(0, dtype=np.int64)
            return z, z.copy(), z.copy()
        lo, hi = self.subject_slice(e)
        return kernels.admissible_actions(
            self.r[lo:hi], self.o[lo:hi], self.t[lo:hi],
            t_lo, t_hi, t_prev, delta, apply_delta, cap, dedup,
        )


def outgoing_facts(kg: TemporalKG, e: int, t_lo: int, t_hi: int) -> list[tuple[int, int, int]]:
    """All (r', e', t') with (e, r', e', t') in kg and t_lo <= t' <= t_hi,
    ordered by (time desc, relation asc, object asc). Unknown entity -> []."""
    if t_lo > t_hi:
        raise ValueError("t_lo must be <= t_hi")
    r, o, t = kg.outgoing_arrays(e, t_lo, t_hi)
    return list(zip(r.tolist(), o.tolist(), t.tolist()))


def last_pattern_times(kg: TemporalKG, e_s: int, r_q: int, t_s: int, k: int = 1) -> int | None:
    """k-th most recent distinct timestep t' < t_s at which (e_s, r_q, *)
    occurs; None when the pattern occurred fewer than k times."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if e_s < 0 or e_s >= kg.num_entities:
        return None
    lo, hi = kg.subject_slice(e_s)
    i1 = lo + int(np.searchsorted(kg.t[lo:hi], t_s, side="left"))
    mask = kg.r[lo:i1] == r_q
    if not mask.any():
        return None
    times = np.unique(kg.t[lo:i1][mask])
    if times.size < k:
        return None
    return int(times[-k])


@dataclass
class DatasetBundle:
    """Train/valid/test quadruple splits plus vocabulary sizes.

    `tags` optionally labels each fact per split (synthetic data: the index
    of the generating rule, or -1 for noise); `paired` marks facts that
    belong to a planted lag-ambiguous pair.
    """

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    num_entities: int
    num_base_relations: int
    time_gap: int = 1
    augmented: bool = False
    tags: dict[str, np.ndarray] | None = None
    paired: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise KeyError(name)
        return getattr(self, name)

    @property
    def vocab(self) -> RelationVocab:
        return RelationVocab(self.num_base_relations)

    def all_facts(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test], axis=0)


def _parse_split(path: str | Path, time_gap: int) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 4:
                raise ParseError(f"{path}:{lineno}: expected 4 tab-separated integers, got {raw!r}")
            try:
                s, r, o, t = (int(parts[i]) for i in range(4))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer field ({exc})") from None
            if min(s, r, o, t) < 0:
                raise ParseError(f"{path}:{lineno}: negative id or time")
            rows.append((s, r, o, t // time_gap))
    if not rows:
        raise ParseError(f"{path}: empty split")
    return np.array(rows, dtype=np.int64)


def _read_stat_file(path: str | Path) -> tuple[int, int]:
    text = Path(path).read_text(encoding="utf-8").split()
    if len(text) < 2:
        raise ParseError(f"{path}: stat file needs at least `num_entities num_relations`")
    return int(text[0]), int(text[1])


def load_dataset(
    train_path: str | Path,
    valid_path: str | Path,
    test_path: str | Path,
    time_gap: int = 1,
    stat_path: str | Path | None = None,
) -> DatasetBundle:
    """Load tab-separated quadruple splits.

    Vocabulary sizes default to 1 + max observed id per column across all
    splits; a stat file (`num_entities<TAB>num_relations`) overrides them,
    and ids exceeding declared sizes raise a ValidationError.
    """
    if time_gap < 1:
        raise ValueError("time_gap must be >= 1")
    splits = {
        "train": _parse_split(train_path, time_gap),
        "valid": _parse_split(valid_path, time_gap),
        "test": _parse_split(test_path, time_gap),
    }
    max_ent = max(int(max(a[:, 0].max(), a[:, 2].max())) for a in splits.values())
    max_rel = max(int(a[:, 1].max()) for a in splits.values())
    if stat_path is not None:
        num_entities, num_relations = _read_stat_file(stat_path)
        if max_ent >= num_entities:
            raise ValidationError(f"entity id {max_ent} exceeds declared vocab {num_entities}")
        if max_rel >= num_relations:
            raise ValidationError(f"relation id {max_rel} exceeds declared vocab {num_relations}")
    else:
        num_entities, num_relations = max_ent + 1, max_rel + 1
    if int(splits["train"][:, 3].max()) >= int(splits["valid"][:, 3].min()) or (
        int(splits["valid"][:, 3].min()) > int(splits["test"][:, 3].min())
    ):
        logger.warning("split time ordering violated (expected max train < min valid <= min test)")
    return DatasetBundle(
        train=splits["train"],
        valid=splits["valid"],
        test=splits["test"],
        num_entities=num_entities,
        num_base_relations=num_relations,
        time_gap=time_gap,
    )


def augment_inverse(bundle: DatasetBundle) -> DatasetBundle:
    """Append (o, r+R, s, t) for every (s, r, o, t); doubles every split.

    Tag/paired arrays, when present, are duplicated so the inverse fact
    inherits its source's labels.
    """
    if bundle.augmented:
        raise ValueError("bundle is already inverse-augmented")
    R = bundle.num_base_relations

    def aug(arr: np.ndarray) -> np.ndarray:
        inv = arr[:, [2, 1, 0, 3]].copy()
        inv[:, 1] += R
        return np.concatenate([arr, inv], axis=0)

    new = replace(
        bundle,
        train=aug(bundle.train),
        valid=aug(bundle.valid),
        test=aug(bundle.test),
        augmented=True,
    )
    if bundle.tags is not None:
        new.tags = {k: np.concatenate([v, v]) for k, v in bundle.tags.items()}
    if bundle.paired is not None:
        new.paired = {k: np.concatenate([v, v]) for k, v in bundle.paired.items()}
    return new


def build_kg(bundle: DatasetBundle, splits=("train", "valid", "test")) -> TemporalKG:
    """History graph over the selected (augmented) splits. Queries stay
    causal because every lookup is windowed strictly below its own t_s."""
    if not bundle.augmented:
        raise ValueError("build_kg expects an inverse-augmented bundle")
    facts = np.concatenate([bundle.split(s) for s in splits], axis=0)
    return TemporalKG(facts, bundle.num_entities, bundle.num_base_relations)


# ---------------------------------------------------------------------------
# history-coverage statistics


def _pair_key(a: np.ndarray, b: np.ndarray, base: int) -> np.ndarray:
    key = a.astype(np.int64) * base + b
    if a.size and key.max() < 0:
        raise OverflowError("pair key overflow")
    return key


def _min_time_lookup(keys: np.ndarray, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique keys (sorted) and the minimum time observed per key."""
    order = np.argsort(keys, kind="stable")
    ks, ts = keys[order], times[order]
    first = np.empty(ks.size, dtype=bool)
    if ks.size:
        first[0] = True
        first[1:] = ks[1:] != ks[:-1]
    idx = np.flatnonzero(first)
    mins = np.minimum.reduceat(ts, idx) if ks.size else ts
    return ks[idx], mins


def _lookup_min(uniq: np.ndarray, mins: np.ndarray, query_keys: np.ndarray) -> np.ndarray:
    """Min time per query key, or a large sentinel when the key is absent."""
    pos = np.searchsorted(uniq, query_keys)
    pos_c = np.minimum(pos, max(uniq.size - 1, 0))
    found = uniq.size > 0
    hit = (uniq[pos_c] == query_keys) if found else np.zeros(query_keys.size, dtype=bool)
    out = np.full(query_keys.size, np.iinfo(np.int64).max, dtype=np.int64)
    if found:
        out[hit] = mins[pos_c[hit]]
    return out


def build_neighbor_csr(facts: np.ndarray, num_entities: int):
    """CSR of unique out-neighbors per entity with min edge time, sorted by
    neighbor id (feeds the 2-hop kernels)."""
    s, o, t = facts[:, 0], facts[:, 2], facts[:, 3]
    key = _pair_key(s, o, num_entities)
    uniq, mins = _min_time_lookup(key, t)
    src = uniq // num_entities
    nbr = uniq % num_entities
    ptr = np.zeros(num_entities + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_entities), out=ptr[1:])
    return ptr, nbr.astype(np.int64), mins.astype(np.int64)


def coverage_stats(
    bundle: DatasetBundle, two_hop_delta: int | None = None
) -> dict[str, float]:
    """Fractions of training queries answerable from history: by a repeat of
    the exact (s, r, o) pattern, by any 1-hop edge s->o, and by 1- or 2-hop
    paths (all over the inverse-augmented graph, hop times strictly before
    the query). `two_hop_delta` additionally requires the two hop times to
    lie within delta of each other (slower, exploratory path).
    """
    if not bundle.augmented:
        raise ValueError("coverage_stats expects an inverse-augmented bundle")
    facts = bundle.train
    n_ent = bundle.num_entities
    n_rel = bundle.vocab.extended_count
    qs, qr, qo, qt = (np.ascontiguousarray(facts[:, i]) for i in range(4))

    triple_key = _pair_key(_pair_key(qs, qr, n_rel), qo, n_ent)
    uniq3, mins3 = _min_time_lookup(triple_key, qt)
    repetitive = _lookup_min(uniq3, mins3, triple_key) < qt

    pair_key = _pair_key(qs, qo, n_ent)
    uniq2, mins2 = _min_time_lookup(pair_key, qt)
    any1 = _lookup_min(uniq2, mins2, pair_key) < qt

    if two_hop_delta is None:
        ptr, nbr, tmin = build_neighbor_csr(facts, n_ent)
        two = kernels.two_hop_exists(ptr, nbr, tmin, qs, qo, qt)
    else:
        pk = _pair_key(facts[:, 0], facts[:, 2], n_ent)
        order = np.argsort(pk, kind="stable")
        pk_s, t_s = pk[order], facts[:, 3][order]
        first = np.empty(pk_s.size, dtype=bool)
        first[0] = True
        first[1:] = pk_s[1:] != pk_s[:-1]
        starts = np.flatnonzero(first)
        uniq_pairs = pk_s[starts]
        time_ptr = np.concatenate([starts, [pk_s.size]]).astype(np.int64)
        # times within each pair group must be ascending for the search
        tv = t_s.copy()
        for i in range(starts.size):
            a, b = time_ptr[i], time_ptr[i + 1]
            tv[a:b] = np.sort(tv[a:b])
        src = (uniq_pairs // n_ent).astype(np.int64)
        pair_nbr = (uniq_pairs % n_ent).astype(np.int64)
        pair_ptr = np.zeros(n_ent + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n_ent), out=pair_ptr[1:])
        two = kernels.two_hop_exists_delta(
            pair_ptr, pair_nbr, time_ptr, tv, qs, qo, qt, int(two_hop_delta)
        )

    upto2 = any1 | two
    n = float(facts.shape[0])
    return {
        "frac_repetitive_1hop": float(repetitive.sum()) / n,
        "frac_any_1hop": float(any1.sum()) / n,
        "frac_upto_2hop": float(upto2.sum()) / n,
    }
