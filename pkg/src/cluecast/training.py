"""Training schedule: policy pretraining on binary reward, reasoner
training with the policy frozen, then joint training; Adam updates with
global-norm gradient clipping, early stopping on validation MRR, and
deterministic, resumable checkpoints.

Determinism contract (64-bit, single thread): the phase shuffle stream is
seeded from (seed, phase); each rollout owns an rng seeded from (seed,
split, query-index); gradients accumulate in query order. Identical config
and seed therefore reproduce checkpoints bit for bit, and a mid-phase
resume continues the uninterrupted run exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import cells
from . import evaluation as ev
from . import stage1 as s1
from . import stage2 as s2
from .autodiff import Tensor
from .checkpoint import Checkpoint, CheckpointError, float_from_meta, float_to_meta
from .fileio import parse_kv_file
from .stage1 import BaselineState, Query, Stage1Params
from .stage2 import Stage2Params
from .tkg import DatasetBundle, augment_inverse, build_kg

logger = logging.getLogger(__name__)

PHASES = ("pretrain", "stage2", "joint")


@dataclass
class TrainConfig:
    """Every knob of both stages; file format is flat key = value lines."""

    d: int = 200
    d_mlp: int = 200
    lstm_hidden: int = 200
    lstm_layers: int = 2
    gru_hidden: int = 200
    beam_size: int = 32  # 64 works better on very dense event streams
    mu: float = 0.3
    max_steps: int = 1
    delta: int = 3
    m_mode: str = "pattern"
    pattern_k: int = 1
    fixed_m: int = 50
    m_max: int = 0  # 0 = uncapped fallback window
    action_cap: int = 200
    strict_delta_step0: bool = False
    seq_len: int = 10
    rgcn_layers: int = 2
    num_bases: int = 0
    clue_window: int = 0  # 0 = full history
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 128
    epochs_pretrain: int = 30
    epochs_stage2: int = 30
    epochs_joint: int = 20
    patience: int = 5
    baseline_decay: float = 0.9
    queries_per_epoch: int = 0  # 0 = all
    val_sample: int = 500  # queries per validation pass, 0 = all
    joint_alternation: str = "batch"  # or "epoch"
    candidates_first: bool = True
    seed: int = 0
    precision: str = "float64"
    workers: int = 1

    def __post_init__(self):
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")
        if self.joint_alternation not in ("batch", "epoch"):
            raise ValueError("joint_alternation must be batch or epoch")
        for name in (
            "d", "d_mlp", "lstm_hidden", "lstm_layers", "gru_hidden", "beam_size",
            "max_steps", "seq_len", "rgcn_layers", "batch_size",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0,1]")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def canonical(self) -> dict[str, str]:
        out = {}
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            out[f.name] = str(getattr(self, f.name))
        return out

    def config_hash(self) -> str:
        text = "".join(f"{k}={v}\n" for k, v in self.canonical().items())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            ftype = fields[key].type
            if ftype in ("int", int):
                kwargs[key] = int(raw)
            elif ftype in ("float", float):
                kwargs[key] = float(raw)
            elif ftype in ("bool", bool):
                low = str(raw).strip().lower()
                if low not in ("true", "false", "1", "0"):
                    raise ValueError(f"config key {key!r} expects a boolean, got {raw!r}")
                kwargs[key] = low in ("true", "1")
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> "TrainConfig":
        mapping = parse_kv_file(path)
        if overrides:
            mapping.update(overrides)
        return cls.from_mapping(mapping)


class Adam:
    """Adam over a named parameter dict, applied in sorted-name order."""

    def __init__(self, named: dict[str, Tensor], lr: float, beta1: float, beta2: float, eps: float):
        self.named = dict(named)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.named.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.named.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in sorted(self.named):
            p = self.named[name]
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.named.values():
            p.zero_grad()


def clip_gradients(named: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    for p in named.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in named.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# model state and checkpoint plumbing


@dataclass
class TrainState:
    cfg: TrainConfig
    params1: Stage1Params
    params2: Stage2Params
    adam1: Adam
    adam2: Adam
    baseline: BaselineState
    rng: np.random.Generator
    phase: str = "init"
    phases_done: list[str] = field(default_factory=list)
    epoch: int = 0
    best_val: float = -1.0
    bad_epochs: int = 0
    best_snapshot: dict[str, np.ndarray] | None = None
    num_entities: int = 0
    num_rel_ext: int = 0

    def named_all(self) -> dict[str, Tensor]:
        out = {f"stage1/{k}": v for k, v in self.params1.named().items()}
        out.update({f"stage2/{k}": v for k, v in self.params2.named().items()})
        return out


def init_state(cfg: TrainConfig, num_entities: int, num_rel_ext: int) -> TrainState:
    rng_init = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 11])))
    params1 = Stage1Params.init(
        rng_init, num_entities, num_rel_ext, cfg.d, cfg.lstm_hidden, cfg.d_mlp,
        cfg.lstm_layers, cfg.dtype,
    )
    params2 = Stage2Params.init(
        rng_init, num_entities, num_rel_ext, cfg.d, cfg.gru_hidden, cfg.rgcn_layers,
        cfg.num_bases, cfg.dtype,
    )
    return TrainState(
        cfg=cfg,
        params1=params1,
        params2=params2,
        adam1=Adam(params1.named(), cfg.lr_stage1, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        adam2=Adam(params2.named(), cfg.lr_stage2, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        baseline=BaselineState(0.0, cfg.baseline_decay),
        rng=np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 13]))),
        num_entities=num_entities,
        num_rel_ext=num_rel_ext,
    )


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.named_all().items():
        tensors[name] = p.data
    for prefix, adam in (("adam1", state.adam1), ("adam2", state.adam2)):
        scope = "stage1" if prefix == "adam1" else "stage2"
        for k in adam.named:
            tensors[f"{prefix}/m/{scope}/{k}"] = adam.m[k]
            tensors[f"{prefix}/v/{scope}/{k}"] = adam.v[k]
    if state.best_snapshot is not None:
        for name, arr in state.best_snapshot.items():
            tensors[f"best/{name}"] = arr
    meta = {
        "format": "cluecast-train",
        "phase": state.phase,
        "phases_done": list(state.phases_done),
        "epoch": state.epoch,
        "config_hash": state.cfg.config_hash(),
        "config": state.cfg.canonical(),
        "baseline": float_to_meta(state.baseline.value),
        "adam1_step": state.adam1.t,
        "adam2_step": state.adam2.t,
        "rng_state": state.rng.bit_generator.state,
        "best_val": float_to_meta(state.best_val),
        "bad_epochs": state.bad_epochs,
        "has_best": state.best_snapshot is not None,
        "num_entities": state.num_entities,
        "num_rel_ext": state.num_rel_ext,
    }
    return Checkpoint(meta=meta, tensors=tensors)


def _params_from_tensors(cfg: TrainConfig, tensors: dict[str, np.ndarray], prefix: str,
                         num_entities: int, num_rel_ext: int) -> tuple[Stage1Params, Stage2Params]:
    def take(name):
        key = f"{prefix}{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {key!r}")
        return ad.parameter(tensors[key].copy())

    lstm = []
    for i in range(cfg.lstm_layers):
        lstm.append(
            cells.LstmLayer(
                wx=take(f"stage1/lstm{i}.wx"), wh=take(f"stage1/lstm{i}.wh"), b=take(f"stage1/lstm{i}.b")
            )
        )
    params1 = Stage1Params(
        entity=take("stage1/entity"), relation=take("stage1/relation"),
        lstm=lstm, w1=take("stage1/w1"), w2=take("stage1/w2"),
    )
    rel_w, loop_w, basis = [], [], []
    for i in range(cfg.rgcn_layers):
        loop_w.append(take(f"stage2/rgcn{i}.loop"))
        if cfg.num_bases > 0:
            basis.append((take(f"stage2/rgcn{i}.basis"), take(f"stage2/rgcn{i}.coef")))
            rel_w.append(None)
        else:
            rel_w.append(take(f"stage2/rgcn{i}.rel"))
            basis.append(None)
    params2 = Stage2Params(
        entity=take("stage2/entity"),
        relation=take("stage2/relation"),
        rgcn_rel=rel_w,
        rgcn_loop=loop_w,
        rgcn_basis=basis,
        gru=cells.GruParams(
            wx_zr=take("stage2/gru.wx_zr"), wh_zr=take("stage2/gru.wh_zr"), b_zr=take("stage2/gru.b_zr"),
            wx_n=take("stage2/gru.wx_n"), wh_n=take("stage2/gru.wh_n"), b_n=take("stage2/gru.b_n"),
        ),
        wmlp=take("stage2/wmlp"),
    )
    return params1, params2


def state_from_checkpoint(cfg: TrainConfig, ckpt: Checkpoint, check_hash: bool = True) -> TrainState:
    meta = ckpt.meta
    if check_hash and meta.get("config_hash") != cfg.config_hash():
        raise CheckpointError("config hash mismatch: refusing to resume with a different config")
    num_entities = int(meta["num_entities"])
    num_rel_ext = int(meta["num_rel_ext"])
    params1, params2 = _params_from_tensors(cfg, ckpt.tensors, "", num_entities, num_rel_ext)
    adam1 = Adam(params1.named(), cfg.lr_stage1, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    adam2 = Adam(params2.named(), cfg.lr_stage2, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    adam1.t = int(meta["adam1_step"])
    adam2.t = int(meta["adam2_step"])
    for prefix, adam, scope in (("adam1", adam1, "stage1"), ("adam2", adam2, "stage2")):
        for k in adam.named:
            mkey, vkey = f"{prefix}/m/{scope}/{k}", f"{prefix}/v/{scope}/{k}"
            if mkey in ckpt.tensors:
                adam.m[k] = ckpt.tensors[mkey].copy()
                adam.v[k] = ckpt.tensors[vkey].copy()
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(
        cfg=cfg,
        params1=params1,
        params2=params2,
        adam1=adam1,
        adam2=adam2,
        baseline=BaselineState(float_from_meta(meta["baseline"]), cfg.baseline_decay),
        rng=rng,
        phase=meta["phase"],
        phases_done=list(meta["phases_done"]),
        epoch=int(meta["epoch"]),
        best_val=float_from_meta(meta["best_val"]),
        bad_epochs=int(meta["bad_epochs"]),
        num_entities=num_entities,
        num_rel_ext=num_rel_ext,
    )
    if meta.get("has_best"):
        state.best_snapshot = {
            name[len("best/") :]: arr.copy()
            for name, arr in ckpt.tensors.items()
            if name.startswith("best/")
        }
    return state


def params_from_checkpoint(cfg: TrainConfig, ckpt: Checkpoint) -> tuple[Stage1Params, Stage2Params]:
    return _params_from_tensors(
        cfg, ckpt.tensors, "", int(ckpt.meta["num_entities"]), int(ckpt.meta["num_rel_ext"])
    )


# ---------------------------------------------------------------------------
# training phases


def prepare_bundle(bundle: DatasetBundle) -> DatasetBundle:
    return bundle if bundle.augmented else augment_inverse(bundle)


def _snapshot(state: TrainState) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in state.named_all().items()}


def _restore_snapshot(state: TrainState, snap: dict[str, np.ndarray]) -> None:
    for name, p in state.named_all().items():
        p.data[...] = snap[name]


def _val_mrr(state: TrainState, kg, bundle, mode: str) -> float:
    recs = ev.evaluate(
        kg, bundle, state.params1, state.params2, state.cfg,
        split="valid", modes=(mode,), sample=state.cfg.val_sample, seed=state.cfg.seed,
    ).records[mode]
    return ev.metrics(recs)["mrr"]


def _early_stop_update(state: TrainState, val: float) -> bool:
    """Track the best validation score; True when patience ran out."""
    if val > state.best_val + 1e-12:
        state.best_val = val
        state.bad_epochs = 0
        state.best_snapshot = _snapshot(state)
        return False
    state.bad_epochs += 1
    return state.cfg.patience > 0 and state.bad_epochs >= state.cfg.patience


def _epoch_queries(state: TrainState, n: int) -> np.ndarray:
    perm = state.rng.permutation(n)
    if state.cfg.queries_per_epoch > 0:
        perm = perm[: state.cfg.queries_per_epoch]
    return perm


def _batches(order: np.ndarray, size: int):
    for i in range(0, order.shape[0], size):
        yield order[i : i + size]


def _search_query(kg, query: Query, state: TrainState, qi: int, split: str = "train"):
    cfg = state.cfg
    rng = ev.query_rng(cfg.seed, split, int(qi))
    m = s1.adaptive_window(kg, query, cfg.m_mode, cfg.pattern_k, cfg.fixed_m, cfg.m_max)
    return s1.randomized_beam_search(
        kg, query, state.params1, cfg.beam_size, cfg.mu, cfg.max_steps,
        cfg.delta, m, cfg.action_cap, rng, cfg.strict_delta_step0,
    )


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what}; aborting training")


def _finalize(state: TrainState, done: set[str]) -> Checkpoint:
    """Restore the best-validation snapshot and mark the phase complete."""
    if state.best_snapshot is not None:
        _restore_snapshot(state, state.best_snapshot)
    state.phases_done = sorted(set(state.phases_done) | done)
    state.best_snapshot = None
    state.best_val, state.bad_epochs = -1.0, 0
    return state_to_checkpoint(state)


def pretrain_stage1(
    cfg: TrainConfig,
    bundle: DatasetBundle,
    resume: Checkpoint | None = None,
    epochs: int | None = None,
    log_cb=None,
    finalize: bool = True,
) -> Checkpoint:
    """Policy-gradient pretraining with the binary terminal reward only.

    `finalize=False` returns a mid-phase checkpoint (best-snapshot intact,
    phase tag pending) that `resume` continues bit-exactly.
    """
    bundle = prepare_bundle(bundle)
    kg = build_kg(bundle)
    queries = ev.build_queries(bundle, "train")
    if resume is not None:
        state = state_from_checkpoint(cfg, resume)
        if state.phase != "pretrain":
            raise CheckpointError(f"cannot resume pretraining from phase {state.phase!r}")
    else:
        state = init_state(cfg, bundle.num_entities, bundle.vocab.extended_count)
        state.phase = "pretrain"
    tags = bundle.tags.get("train") if bundle.tags is not None else None
    n_epochs = cfg.epochs_pretrain if epochs is None else epochs
    stop = False
    while state.epoch < n_epochs and not stop:
        t0 = time.perf_counter()
        order = _epoch_queries(state, len(queries))
        reward_sum, n_rollouts, hit_sum, n_q, loss_last = 0.0, 0, 0, 0, 0.0
        rule_hits, rule_n = 0, 0
        for batch in _batches(order, cfg.batch_size):
            rollouts = []
            with ad.Tape() as tape:
                for qi in batch:
                    query = queries[int(qi)]
                    beams = _search_query(kg, query, state, int(qi))
                    hit = any(b.destination == query.e_o for b in beams)
                    hit_sum += hit
                    n_q += 1
                    if tags is not None and tags[int(qi)] >= 0:
                        rule_hits += hit
                        rule_n += 1
                    for beam in beams:
                        rollouts.append((beam, s1.terminal_reward(beam, query.e_o, None, "pretrain")))
                loss_last, _, state.baseline = s1.reinforce_update(
                    rollouts, state.baseline, state.params1, tape
                )
            _check_finite(loss_last, "policy surrogate loss")
            reward_sum += sum(r for _, r in rollouts)
            n_rollouts += len(rollouts)
            clip_gradients(state.params1.named(), cfg.grad_clip)
            state.adam1.step()
            state.adam1.zero_grad()
        state.epoch += 1
        val = _val_mrr(state, kg, bundle, "stage1_only") if cfg.patience > 0 else -1.0
        stop = _early_stop_update(state, val) if cfg.patience > 0 else False
        line = {
            "phase": "pretrain",
            "epoch": state.epoch,
            "loss": loss_last,
            "mean_reward": reward_sum / max(n_rollouts, 1),
            "hit_rate": hit_sum / max(n_q, 1),
            "hit_rate_rule": rule_hits / rule_n if rule_n else None,
            "val_mrr": val,
            "wall_time": time.perf_counter() - t0,
        }
        logger.info("pretrain epoch %d: hit_rate=%.3f val_mrr=%.4f", state.epoch, line["hit_rate"], val)
        if log_cb:
            log_cb(line)
    if not finalize:
        return state_to_checkpoint(state)
    return _finalize(state, {"pretrain"})


def _stage2_forward(kg, query: Query, beams, state: TrainState):
    cfg = state.cfg
    paths = s2.paths_from_beams(beams, query)
    facts = s2.derive_clue_facts(paths, kg, query.t_s, cfg.clue_window)
    seq = s2.build_sequence(facts, query, cfg.seq_len)
    h = s2.encode_sequence(query, seq, state.params2, cfg.rgcn_layers)
    return s2.score_logits(h, state.params2), seq


def train_stage2_frozen(
    cfg: TrainConfig,
    bundle: DatasetBundle,
    start: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    epochs: int | None = None,
    log_cb=None,
    finalize: bool = True,
) -> Checkpoint:
    """Cross-entropy training of the reasoner; stage-1 parameters frozen.

    The policy and the per-query rollout rngs are fixed, so each query's
    clue sequence is computed once and cached across epochs.
    """
    bundle = prepare_bundle(bundle)
    kg = build_kg(bundle)
    queries = ev.build_queries(bundle, "train")
    if resume is not None:
        state = state_from_checkpoint(cfg, resume)
        if state.phase != "stage2":
            raise CheckpointError(f"cannot resume stage-2 training from phase {state.phase!r}")
    else:
        if start is None:
            raise ValueError("need a starting checkpoint (or a resume checkpoint)")
        if "pretrain" not in start.meta.get("phases_done", []):
            raise CheckpointError("stage-2 training expects a pretrained stage-1 checkpoint")
        state = state_from_checkpoint(cfg, start)
        state.phase = "stage2"
        state.epoch = 0
        state.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 17])))
    frozen_before = {k: v.data.copy() for k, v in state.params1.named().items()}
    seq_cache: dict[int, s2.ClueGraphSequence] = {}

    def sequence_for(qi: int) -> s2.ClueGraphSequence:
        if qi not in seq_cache:
            query = queries[qi]
            beams = _search_query(kg, query, state, qi)
            paths = s2.paths_from_beams(beams, query)
            facts = s2.derive_clue_facts(paths, kg, query.t_s, cfg.clue_window)
            seq_cache[qi] = s2.build_sequence(facts, query, cfg.seq_len)
        return seq_cache[qi]

    n_epochs = cfg.epochs_stage2 if epochs is None else epochs
    stop = False
    while state.epoch < n_epochs and not stop:
        t0 = time.perf_counter()
        order = _epoch_queries(state, len(queries))
        loss_sum, n_q = 0.0, 0
        for batch in _batches(order, cfg.batch_size):
            with ad.Tape() as tape:
                total = None
                for qi in batch:
                    query = queries[int(qi)]
                    seq = sequence_for(int(qi))
                    h = s2.encode_sequence(query, seq, state.params2, cfg.rgcn_layers)
                    loss_q = s2.ce_loss(s2.score_logits(h, state.params2), query.e_o)
                    total = loss_q if total is None else total + loss_q
                batch_loss = ad.scale(total, 1.0 / len(batch))
                tape.backward(batch_loss)
            _check_finite(batch_loss.item(), "cross-entropy loss")
            loss_sum += batch_loss.item() * len(batch)
            n_q += len(batch)
            clip_gradients(state.params2.named(), cfg.grad_clip)
            state.adam2.step()
            state.adam2.zero_grad()
        state.epoch += 1
        val = _val_mrr(state, kg, bundle, "full") if cfg.patience > 0 else -1.0
        stop = _early_stop_update(state, val) if cfg.patience > 0 else False
        line = {
            "phase": "stage2",
            "epoch": state.epoch,
            "loss": loss_sum / max(n_q, 1),
            "mean_reward": None,
            "hit_rate": None,
            "val_mrr": val,
            "wall_time": time.perf_counter() - t0,
        }
        logger.info("stage2 epoch %d: loss=%.4f val_mrr=%.4f", state.epoch, line["loss"], val)
        if log_cb:
            log_cb(line)
    for k, v in state.params1.named().items():
        if not np.array_equal(v.data, frozen_before[k]):
            raise RuntimeError(f"frozen stage-1 parameter {k!r} changed during stage-2 training")
    if not finalize:
        return state_to_checkpoint(state)
    return _finalize(state, {"pretrain", "stage2"})


def train_joint(
    cfg: TrainConfig,
    bundle: DatasetBundle,
    start: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    epochs: int | None = None,
    log_cb=None,
    force: bool = False,
    finalize: bool = True,
) -> Checkpoint:
    """Alternating joint training: a reasoner cross-entropy step and a
    policy step whose reward adds the reasoner's score of correct
    destinations (both per batch, or per epoch when configured)."""
    bundle = prepare_bundle(bundle)
    kg = build_kg(bundle)
    queries = ev.build_queries(bundle, "train")
    if resume is not None:
        state = state_from_checkpoint(cfg, resume)
        if state.phase != "joint":
            raise CheckpointError(f"cannot resume joint training from phase {state.phase!r}")
    else:
        if start is None:
            raise ValueError("need a starting checkpoint (or a resume checkpoint)")
        done = start.meta.get("phases_done", [])
        if not force and not {"pretrain", "stage2"}.issubset(done):
            raise CheckpointError(
                "joint training expects pretrain and stage-2 phases to be done (use force to override)"
            )
        state = state_from_checkpoint(cfg, start)
        state.phase = "joint"
        state.epoch = 0
        state.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 19])))

    n_epochs = cfg.epochs_joint if epochs is None else epochs
    stop = False
    while state.epoch < n_epochs and not stop:
        t0 = time.perf_counter()
        order = _epoch_queries(state, len(queries))
        loss_sum, n_q, reward_sum, n_rollouts = 0.0, 0, 0.0, 0
        update_stage2 = True
        update_stage1 = True
        if cfg.joint_alternation == "epoch":
            update_stage2 = state.epoch % 2 == 0
            update_stage1 = not update_stage2
        for batch in _batches(order, cfg.batch_size):
            rollouts = []
            with ad.Tape() as tape:
                total = None
                for qi in batch:
                    query = queries[int(qi)]
                    beams = _search_query(kg, query, state, int(qi))
                    logits, _ = _stage2_forward(kg, query, beams, state)
                    loss_q = s2.ce_loss(logits, query.e_o)
                    total = loss_q if total is None else total + loss_q
                    p_row = s2.sigmoid_scores(logits)
                    for beam in beams:
                        reward = s1.terminal_reward(
                            beam, query.e_o, s2.beam_reward(p_row, beam.destination), "joint"
                        )
                        rollouts.append((beam, reward))
                batch_loss = ad.scale(total, 1.0 / len(batch))
                if update_stage2:
                    tape.backward(batch_loss)
                    clip_gradients(state.params2.named(), cfg.grad_clip)
                    state.adam2.step()
                    state.adam2.zero_grad()
                if update_stage1:
                    surrogate, _, state.baseline = s1.reinforce_update(
                        rollouts, state.baseline, state.params1, tape
                    )
                    _check_finite(surrogate, "policy surrogate loss")
                    clip_gradients(state.params1.named(), cfg.grad_clip)
                    state.adam1.step()
                    state.adam1.zero_grad()
            _check_finite(batch_loss.item(), "cross-entropy loss")
            loss_sum += batch_loss.item() * len(batch)
            n_q += len(batch)
            reward_sum += sum(r for _, r in rollouts)
            n_rollouts += len(rollouts)
        state.epoch += 1
        val = _val_mrr(state, kg, bundle, "full") if cfg.patience > 0 else -1.0
        stop = _early_stop_update(state, val) if cfg.patience > 0 else False
        line = {
            "phase": "joint",
            "epoch": state.epoch,
            "loss": loss_sum / max(n_q, 1),
            "mean_reward": reward_sum / max(n_rollouts, 1),
            "hit_rate": None,
            "val_mrr": val,
            "wall_time": time.perf_counter() - t0,
        }
        logger.info("joint epoch %d: loss=%.4f val_mrr=%.4f", state.epoch, line["loss"], val)
        if log_cb:
            log_cb(line)
    if not finalize:
        return state_to_checkpoint(state)
    return _finalize(state, {"joint"})
