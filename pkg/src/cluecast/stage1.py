"""Clue searching: the time-constrained path MDP, the semantic policy
network, randomized beam search, terminal rewards, and the policy-gradient
update.

The agent starts at the query subject and walks time-constrained outgoing
edges. An action (r', e', t') at state (e_i, t_i) is admissible when the
fact (e_i, r', e', t') lies strictly before the query time, within the
adaptive window m of it, and (from step 1 on) within delta of the previous
action's timestamp; a self-loop is always available for early termination.
The policy scores actions from the LSTM encoding of the relation-entity
path walked so far -- timestamps are deliberately not encoded here, that is
the second stage's job.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import cells
from .autodiff import Tensor
from .tkg import TemporalKG, last_pattern_times


@dataclass(frozen=True)
class Query:
    e_s: int
    r_q: int
    t_s: int
    e_o: int | None = None


class ActionCand(NamedTuple):
    r: int
    e: int
    t: int
    self_loop: bool = False


@dataclass(frozen=True)
class AgentState:
    e_i: int
    t_i: int
    step: int
    query: Query


@dataclass
class Stage1Params:
    entity: Tensor  # (|E|, d)
    relation: Tensor  # (2R+2, d)
    lstm: list[cells.LstmLayer]
    w1: Tensor  # (2d + d_h, d_mlp)
    w2: Tensor  # (2d, d_mlp)

    @staticmethod
    def init(
        rng: np.random.Generator,
        num_entities: int,
        num_relations_ext: int,
        d: int,
        d_h: int,
        d_mlp: int,
        lstm_layers: int,
        dtype=np.float64,
    ) -> "Stage1Params":
        return Stage1Params(
            entity=ad.parameter(cells.uniform_init(rng, d, (num_entities, d), dtype)),
            relation=ad.parameter(cells.uniform_init(rng, d, (num_relations_ext, d), dtype)),
            lstm=cells.init_lstm(rng, 2 * d, d_h, lstm_layers, dtype),
            w1=ad.parameter(cells.uniform_init(rng, 2 * d + d_h, (2 * d + d_h, d_mlp), dtype)),
            w2=ad.parameter(cells.uniform_init(rng, 2 * d, (2 * d, d_mlp), dtype)),
        )

    def named(self) -> dict[str, Tensor]:
        out = {"entity": self.entity, "relation": self.relation, "w1": self.w1, "w2": self.w2}
        for i, layer in enumerate(self.lstm):
            out[f"lstm{i}.wx"] = layer.wx
            out[f"lstm{i}.wh"] = layer.wh
            out[f"lstm{i}.b"] = layer.b
        return out

    @property
    def dim(self) -> int:
        return self.entity.shape[1]


@dataclass
class BeamEntry:
    """One candidate clue path: actions taken, their summed log-likelihood,
    the LSTM stacks as of scoring its last action, and (while training) the
    per-step log-prob tensors feeding the policy gradient."""

    e_i: int
    t_i: int
    actions: list[ActionCand]
    cum_log_prob: float
    prev_rnn_state: list[tuple[Tensor, Tensor]]
    logp_terms: list[Tensor] = field(default_factory=list)

    @property
    def destination(self) -> int:
        return self.e_i


def adaptive_window(
    kg: TemporalKG,
    query: Query,
    mode: str = "pattern",
    pattern_k: int = 1,
    fixed_m: int = 50,
    m_max: int = 0,
) -> int:
    """Window length m: timesteps the agent may reach back from t_s.

    `pattern` mode follows the k-th most recent prior occurrence of the
    query pattern (e_s, r_q, *); if the pattern never occurred the window
    falls back to the full history, capped by m_max when set.
    """
    if mode == "fixed":
        m = fixed_m
    elif mode == "pattern":
        t_hit = last_pattern_times(kg, query.e_s, query.r_q, query.t_s, pattern_k)
        m = query.t_s if t_hit is None else query.t_s - t_hit
    else:
        raise ValueError(f"unknown window mode {mode!r}")
    if m_max > 0:
        m = min(m, m_max)
    return m


def enumerate_actions(
    kg: TemporalKG,
    state: AgentState,
    m: int,
    delta: int,
    cap: int = 0,
    strict_delta_step0: bool = False,
) -> list[ActionCand]:
    """Admissible actions at `state` plus exactly one self-loop.

    Real actions satisfy t' <= t_s - 1, t_s - t' <= m and (from step 1, or
    at all steps in strict mode) |t' - t_i| <= delta. When more than `cap`
    remain, the `cap` most recent by (time desc, relation asc, object asc)
    are kept; the self-loop is kept in addition. cap <= 0 disables the
    truncation.
    """
    q = state.query
    apply_delta = state.step >= 1 or strict_delta_step0
    r, o, t = kg.outgoing_arrays(
        state.e_i,
        q.t_s - m,
        q.t_s - 1,
        t_prev=state.t_i,
        delta=delta,
        apply_delta=apply_delta,
        cap=cap,
        dedup=True,
    )
    out = [ActionCand(int(r[i]), int(o[i]), int(t[i])) for i in range(r.shape[0])]
    out.append(ActionCand(kg.vocab.self_loop, state.e_i, state.t_i, True))
    return out


def action_embedding(params: Stage1Params, action: ActionCand) -> Tensor:
    return ad.concat(
        [ad.embedding_lookup(params.relation, [action.r]), ad.embedding_lookup(params.entity, [action.e])]
    )


def encode_step(
    prev_state: list[tuple[Tensor, Tensor]] | None,
    action_emb: Tensor,
    params: Stage1Params,
) -> list[tuple[Tensor, Tensor]]:
    """One stacked-LSTM step; `prev_state` None means the zero start state
    (the first call consumes the dummy-start action embedding)."""
    if prev_state is None:
        prev_state = cells.lstm_zero_state(params.lstm, dtype=action_emb.data.dtype)
    return cells.lstm_stack_step(action_emb, prev_state, params.lstm)


def start_state(params: Stage1Params, query: Query, dummy_relation: int) -> list[tuple[Tensor, Tensor]]:
    emb = ad.concat(
        [ad.embedding_lookup(params.relation, [dummy_relation]), ad.embedding_lookup(params.entity, [query.e_s])]
    )
    return encode_step(None, emb, params)


def action_log_probs(
    query: Query,
    e_i: int,
    h_top: Tensor,
    actions: list[ActionCand],
    params: Stage1Params,
) -> Tensor:
    """Log of the policy distribution over `actions` as a (1, n) tensor."""
    if not actions:
        raise ValueError("need at least one action")
    r_ids = [a.r for a in actions]
    e_ids = [a.e for a in actions]
    a_mat = ad.concat(
        [ad.embedding_lookup(params.relation, r_ids), ad.embedding_lookup(params.entity, e_ids)]
    )
    feat = ad.concat(
        [
            ad.embedding_lookup(params.entity, [e_i]),
            h_top,
            ad.embedding_lookup(params.relation, [query.r_q]),
        ]
    )
    hidden = ad.relu(ad.matmul(feat, params.w1))
    scores = ad.matmul(ad.matmul(a_mat, params.w2), ad.transpose2d(hidden))
    return ad.log_softmax_row(ad.transpose2d(scores))


def action_distribution(
    query: Query, e_i: int, h_top: Tensor, actions: list[ActionCand], params: Stage1Params
) -> np.ndarray:
    """Probability vector over `actions` (sums to 1)."""
    return np.exp(action_log_probs(query, e_i, h_top, actions, params).data[0])


def _pick_sequence(pool: list, keys: list[tuple], budget: int, mu: float, rng: np.random.Generator) -> list[int]:
    """Sequential without-replacement picks: arg-best remaining with
    probability mu, else uniformly random remaining. Returns pool indices."""
    remaining = sorted(range(len(pool)), key=lambda i: keys[i])
    picked = []
    while remaining and len(picked) < budget:
        if rng.random() < mu:
            idx = 0
        else:
            idx = int(rng.integers(len(remaining)))
        picked.append(remaining.pop(idx))
    return picked


def randomized_beam_search(
    kg: TemporalKG,
    query: Query,
    params: Stage1Params,
    B: int,
    mu: float,
    I: int,
    delta: int,
    m: int,
    cap: int,
    rng: np.random.Generator,
    strict_delta_step0: bool = False,
) -> list[BeamEntry]:
    """Search up to B clue paths of length I.

    Step 0 scores the subject's admissible actions and picks up to B 1-hop
    paths with the mu-randomized strategy; each later step expands every
    beam with its B most likely actions into a pool of at most B*B
    extensions and picks B of those the same way. Path score is the sum of
    step log-probabilities. Deterministic given the rng state; with mu=1
    the output is rng-independent.
    """
    if B < 1 or I < 1 or not 0.0 <= mu <= 1.0:
        raise ValueError("need B >= 1, I >= 1, mu in [0,1]")
    root = start_state(params, query, kg.vocab.dummy_start)
    acts0 = enumerate_actions(
        kg, AgentState(query.e_s, query.t_s, 0, query), m, delta, cap, strict_delta_step0
    )
    logp0 = action_log_probs(query, query.e_s, root[-1][0], acts0, params)
    lp0 = logp0.data[0]
    keys = [(-lp0[k], a.r, a.e, -a.t) for k, a in enumerate(acts0)]
    beams: list[BeamEntry] = []
    for k in _pick_sequence(acts0, keys, B, mu, rng):
        a = acts0[k]
        beams.append(
            BeamEntry(
                e_i=a.e,
                t_i=a.t,
                actions=[a],
                cum_log_prob=float(lp0[k]),
                prev_rnn_state=root,
                logp_terms=[ad.pick(logp0, 0, k)],
            )
        )

    for step in range(1, I):
        pool: list[tuple[BeamEntry, ActionCand, float, Tensor, int, list]] = []
        pool_keys: list[tuple] = []
        for b_idx, beam in enumerate(beams):
            new_state = encode_step(beam.prev_rnn_state, action_embedding(params, beam.actions[-1]), params)
            state = AgentState(beam.e_i, beam.t_i, step, query)
            acts = enumerate_actions(kg, state, m, delta, cap, strict_delta_step0)
            logp = action_log_probs(query, beam.e_i, new_state[-1][0], acts, params)
            lp = logp.data[0]
            local = sorted(range(len(acts)), key=lambda k: (-lp[k], acts[k].r, acts[k].e, -acts[k].t))
            for k in local[: min(B, len(acts))]:
                cum = beam.cum_log_prob + float(lp[k])
                pool.append((beam, acts[k], cum, logp, k, new_state))
                pool_keys.append((-cum, acts[k].r, acts[k].e, -acts[k].t, b_idx))
        next_beams = []
        for pi in _pick_sequence(pool, pool_keys, B, mu, rng):
            beam, act, cum, logp, k, new_state = pool[pi]
            next_beams.append(
                BeamEntry(
                    e_i=act.e,
                    t_i=act.t,
                    actions=beam.actions + [act],
                    cum_log_prob=cum,
                    prev_rnn_state=new_state,
                    logp_terms=beam.logp_terms + [ad.pick(logp, 0, k)],
                )
            )
        beams = next_beams
    return beams


def terminal_reward(beam: BeamEntry, e_o: int, stage2_score: float | None, phase: str) -> float:
    """Binary hit reward, plus the second stage's score of the destination
    during joint training."""
    if beam.destination != e_o:
        return 0.0
    if phase == "pretrain":
        return 1.0
    if phase == "joint":
        if stage2_score is None:
            raise ValueError("joint-phase reward requires a stage-2 score")
        return 1.0 + float(stage2_score)
    raise ValueError(f"unknown phase {phase!r}")


@dataclass
class BaselineState:
    value: float = 0.0
    decay: float = 0.9

    def update(self, batch_mean: float) -> "BaselineState":
        return BaselineState(self.decay * self.value + (1.0 - self.decay) * batch_mean, self.decay)


def reinforce_update(
    rollouts: list[tuple[BeamEntry, float]],
    baseline: BaselineState,
    params: Stage1Params,
    tape: ad.Tape,
) -> tuple[float, dict[str, np.ndarray], BaselineState]:
    """Backpropagate the surrogate -(1/N) sum (R - b) * sum_k log pi.

    Gradients accumulate into the parameter .grad buffers (and are also
    returned by name); the baseline is an exponential moving average of the
    batch-mean reward, updated after use.
    """
    if not rollouts:
        raise ValueError("no rollouts")
    n = len(rollouts)
    b = baseline.value
    loss: Tensor | None = None
    for beam, reward in rollouts:
        path_logp = beam.logp_terms[0]
        for term in beam.logp_terms[1:]:
            path_logp = path_logp + term
        contrib = ad.scale(path_logp, -(reward - b) / n)
        loss = contrib if loss is None else loss + contrib
    tape.backward(loss)
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.named().items()
    }
    new_baseline = baseline.update(sum(r for _, r in rollouts) / n)
    return loss.item(), grads, new_baseline


def stage1_rank(beams: list[BeamEntry]) -> list[tuple[int, float]]:
    """Candidate entities by best path score (max over paths per entity),
    descending, ties broken by entity id ascending."""
    if not beams:
        raise ValueError("no beams to rank")
    best: dict[int, float] = {}
    for beam in beams:
        e = beam.destination
        if e not in best or beam.cum_log_prob > best[e]:
            best[e] = beam.cum_log_prob
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))


def replay_log_prob(
    kg: TemporalKG,
    query: Query,
    actions: list[ActionCand],
    params: Stage1Params,
    m: int,
    delta: int,
    cap: int = 0,
    strict_delta_step0: bool = False,
) -> Tensor:
    """Sum of step log-probabilities of a fixed action sequence (the
    REINFORCE surrogate per rollout, re-evaluable for gradient checks)."""
    state: list[tuple[Tensor, Tensor]] | None = None
    e_i, t_i = query.e_s, query.t_s
    total: Tensor | None = None
    for step, act in enumerate(actions):
        if state is None:
            state = start_state(params, query, kg.vocab.dummy_start)
        else:
            state = encode_step(state, action_embedding(params, actions[step - 1]), params)
        acts = enumerate_actions(kg, AgentState(e_i, t_i, step, query), m, delta, cap, strict_delta_step0)
        try:
            k = acts.index(act)
        except ValueError:
            raise ValueError(f"action {act} not admissible at step {step}") from None
        logp = ad.pick(action_log_probs(query, e_i, state[-1][0], acts, params), 0, k)
        total = logp if total is None else total + logp
        e_i, t_i = act.e, act.t
    if total is None:
        raise ValueError("empty action sequence")
    return total
