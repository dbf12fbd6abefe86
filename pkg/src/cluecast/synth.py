"""Synthetic temporal-KG generator with planted cause->effect rules.

Each rule (r_cause, r_effect, lag, fire_prob) fires on every generated fact
whose relation is r_cause: with probability fire_prob it emits the fact
(s, r_effect, o, t + lag). Uniform noise facts seed the process and rules
may chain through effect facts. When two rules share a cause relation but
differ in lag, the generator can additionally plant "pair" instances (same
subject, two objects, offset so both effects land on one timestep) whose
answers are distinguishable only through the hop timestamps; those effect
facts are flagged `paired` so evaluations can isolate the lag-ambiguous
subset.

Determinism: one PCG64 stream from the seed drives everything, so equal
configs produce byte-identical bundles.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tkg import DatasetBundle

NOISE_TAG = -1


@dataclass(frozen=True)
class Rule:
    r_cause: int
    r_effect: int
    lag: int
    fire_prob: float


@dataclass
class SynthConfig:
    num_entities: int = 200
    num_relations: int = 6
    num_timesteps: int = 60
    rules: list[tuple[int, int, int, float]] = field(default_factory=list)
    noise_facts_per_step: int = 20
    pairs_per_step: int = 0
    # event streams repeat: each noise slot re-emits an earlier triple with
    # this probability instead of drawing a fresh uniform one
    repeat_prob: float = 0.0
    seed: int = 0

    def rule_objects(self) -> list[Rule]:
        return [Rule(int(r[0]), int(r[1]), int(r[2]), float(r[3])) for r in self.rules]


def _validate(cfg: SynthConfig) -> list[Rule]:
    rules = cfg.rule_objects()
    for rule in rules:
        if rule.lag < 1:
            raise ValueError(f"rule lag must be >= 1, got {rule.lag}")
        if not 0.0 <= rule.fire_prob <= 1.0:
            raise ValueError(f"fire_prob must be in [0,1], got {rule.fire_prob}")
        for rid in (rule.r_cause, rule.r_effect):
            if not 0 <= rid < cfg.num_relations:
                raise ValueError(f"rule relation {rid} outside vocab")
    if cfg.num_entities < 2 or cfg.num_timesteps < 3:
        raise ValueError("need >= 2 entities and >= 3 timesteps")
    return rules


def lag_pair_groups(rules: list[Rule]) -> list[tuple[int, int]]:
    """Indices (i, j) of rule pairs sharing r_cause with different lags."""
    groups = []
    for i in range(len(rules)):
        for j in range(i + 1, len(rules)):
            if rules[i].r_cause == rules[j].r_cause and rules[i].lag != rules[j].lag:
                groups.append((i, j))
    return groups


def generate_synthetic(cfg: SynthConfig) -> DatasetBundle:
    """Build a train/valid/test bundle (80/10/10 of timesteps, in time order).

    Per-fact tags carry the generating rule index (NOISE_TAG for noise and
    planted causes); `paired` flags effect facts whose planted counterpart
    with the other lag also fired. Raises when the test split would hold no
    queries.
    """
    rules = _validate(cfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    pair_groups = lag_pair_groups(rules)
    if cfg.pairs_per_step > 0 and not pair_groups:
        raise ValueError("pairs_per_step set but no two rules share a cause relation")

    rules_by_cause: dict[int, list[int]] = {}
    for idx, rule in enumerate(rules):
        rules_by_cause.setdefault(rule.r_cause, []).append(idx)

    T = cfg.num_timesteps
    facts: list[tuple[int, int, int, int]] = []
    tags: list[int] = []
    paired: list[bool] = []
    # facts waiting to materialize: per timestep, (s, r, o, tag, plant_id, plant_role)
    incoming: list[list[tuple[int, int, int, int, int, int]]] = [[] for _ in range(T)]
    # plant bookkeeping: plant_id -> [early_rule, late_rule, early_effect_fi, late_effect_fi]
    plants: list[list[int]] = []

    def emit(s: int, r: int, o: int, t: int, tag: int) -> int:
        facts.append((s, r, o, t))
        tags.append(tag)
        paired.append(False)
        return len(facts) - 1

    if not 0.0 <= cfg.repeat_prob <= 1.0:
        raise ValueError("repeat_prob must be in [0,1]")
    triple_pool: list[tuple[int, int, int]] = []
    group_cycle = 0
    for t in range(T):
        materialized: list[tuple[int, int, int]] = []  # (fact index, plant_id, plant_role)
        for _ in range(cfg.noise_facts_per_step):
            if triple_pool and rng.random() < cfg.repeat_prob:
                s, r, o = triple_pool[int(rng.integers(len(triple_pool)))]
            else:
                s = int(rng.integers(cfg.num_entities))
                r = int(rng.integers(cfg.num_relations))
                o = int(rng.integers(cfg.num_entities))
                triple_pool.append((s, r, o))
            materialized.append((emit(s, r, o, t, NOISE_TAG), -1, -1))
        for _ in range(cfg.pairs_per_step):
            gi, gj = pair_groups[group_cycle % len(pair_groups)]
            group_cycle += 1
            early, late = (gi, gj) if rules[gi].lag < rules[gj].lag else (gj, gi)
            t_eff = t + rules[late].lag
            s = int(rng.integers(cfg.num_entities))
            pick = rng.choice(cfg.num_entities, size=2, replace=False)
            o_a, o_b = int(pick[0]), int(pick[1])
            if t_eff >= T:
                continue
            plant_id = len(plants)
            plants.append([early, late, -1, -1])
            rc = rules[early].r_cause
            # late-lag cause materializes now, early-lag cause is delayed so
            # both designated effects land together at t_eff
            materialized.append((emit(s, rc, o_b, t, NOISE_TAG), plant_id, 1))
            incoming[t_eff - rules[early].lag].append((s, rc, o_a, NOISE_TAG, plant_id, 0))
        for s, r, o, tag, plant_id, role in incoming[t]:
            materialized.append((emit(s, r, o, t, tag), plant_id, role))
        for fi, plant_id, role in materialized:
            s, r, o, _ = facts[fi]
            for ridx in rules_by_cause.get(r, ()):
                rule = rules[ridx]
                t_eff = t + rule.lag
                fired = rng.random() < rule.fire_prob
                # planted causes fire only their designated rule: firing the
                # sibling rule too would leave a timestamp-free shortcut
                # (effect-relation co-occurrence) that defeats the pair's
                # purpose of being decidable only through hop timestamps
                is_plant_cause = plant_id >= 0 and role < 2
                if is_plant_cause and ridx != plants[plant_id][role]:
                    continue
                if t_eff >= T or not fired:
                    continue
                eff_plant, eff_role = (plant_id, role + 2) if is_plant_cause else (-1, -1)
                incoming[t_eff].append((s, rule.r_effect, o, ridx, eff_plant, eff_role))
        # record which designated plant effects materialized this step
        for fi, plant_id, role in materialized:
            if plant_id >= 0 and role >= 2:
                plants[plant_id][role] = fi

    for early_rule, late_rule, fi_a, fi_b in plants:
        if fi_a >= 0 and fi_b >= 0:
            paired[fi_a] = True
            paired[fi_b] = True

    quads = np.array(facts, dtype=np.int64).reshape(-1, 4)
    tag_arr = np.array(tags, dtype=np.int64)
    paired_arr = np.array(paired, dtype=bool)

    t_train = max(int(T * 0.8), 1)
    t_valid = max(int(T * 0.9), t_train + 1)
    masks = {
        "train": quads[:, 3] < t_train,
        "valid": (quads[:, 3] >= t_train) & (quads[:, 3] < t_valid),
        "test": quads[:, 3] >= t_valid,
    }
    split_quads, split_tags, split_paired = {}, {}, {}
    for name, mask in masks.items():
        sub = quads[mask]
        order = np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0], sub[:, 3]))
        split_quads[name] = np.ascontiguousarray(sub[order])
        split_tags[name] = tag_arr[mask][order]
        split_paired[name] = paired_arr[mask][order]
    if split_quads["test"].shape[0] == 0:
        raise ValueError("config produced zero test queries")

    return DatasetBundle(
        train=split_quads["train"],
        valid=split_quads["valid"],
        test=split_quads["test"],
        num_entities=cfg.num_entities,
        num_base_relations=cfg.num_relations,
        time_gap=1,
        tags=split_tags,
        paired=split_paired,
        meta={"synth_config": asdict(cfg), "pair_groups": pair_groups},
    )
