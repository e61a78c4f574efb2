"""Prompt-only optimization against the frozen backbone.

AdamW with decoupled weight decay updates the factor triple (or, for
the vanilla baseline, the raw prompt matrix) while the backbone digest
stays fixed.  Synthetic classification tasks stand in for real
benchmarks: each labeling rule is a deterministic function of the token
ids, chosen so that a prompt steering frozen random features can
actually solve it.  The loop keeps batch shuffling, task generation,
and initialization on separate named seed streams so trajectories are
bit-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from . import prompt as pr
from .backbone import FrozenBackbone, digest, forward_batch

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "SyntheticTask",
    "Dataset",
    "TrainResult",
    "TASK_RULES",
    "loss",
    "adamw_update",
    "generate_dataset",
    "few_shot_subsample",
    "train_step",
    "train_loop",
    "gradcheck",
    "write_metrics",
]

TASK_RULES = ("token-presence", "majority-class", "prefix-parity")
PRESENCE_TOKEN = 0  # the id whose presence defines the token-presence label


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.3
    weight_decay: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        # 0 is allowed: a zero-rate step is the documented way to probe
        # the loss of a frozen configuration through the same code path
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"adam betas must lie in [0, 1), got {b}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class OptimizerState:
    """First/second moments per parameter plus one shared step counter."""

    def __init__(self) -> None:
        self.step = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def float_count(self) -> int:
        return sum(m.size + v.size for m, v in self.moments.values())


@dataclass(frozen=True)
class SyntheticTask:
    rule: str = "token-presence"
    vocab_size: int = 64
    seq_len: int = 8
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.rule not in TASK_RULES:
            raise ValueError(f"unknown task rule {self.rule!r}, expected one of {TASK_RULES}")
        if self.vocab_size < 2 or self.seq_len < 1 or self.n_classes < 2:
            raise ValueError("task needs vocab_size >= 2, seq_len >= 1, n_classes >= 2")
        if self.rule in ("token-presence", "prefix-parity") and self.n_classes != 2:
            raise ValueError(f"rule {self.rule!r} is binary, got n_classes={self.n_classes}")


@dataclass
class Dataset:
    ids: np.ndarray  # (n, seq_len) int token ids
    labels: np.ndarray  # (n,) int class labels

    def __len__(self) -> int:
        return self.ids.shape[0]


def label_of(task: SyntheticTask, ids: np.ndarray) -> int:
    """The deterministic label of one id sequence under the task rule."""
    if task.rule == "token-presence":
        return int(np.any(ids == PRESENCE_TOKEN))
    if task.rule == "majority-class":
        counts = np.bincount(ids % task.n_classes, minlength=task.n_classes)
        return int(np.argmax(counts))  # ties resolve to the lowest class
    half = (task.seq_len + 1) // 2
    return int(np.sum(ids[:half]) % 2)


def generate_dataset(task: SyntheticTask, n: int, split: int = 0) -> Dataset:
    """n labeled sequences; ``split`` selects an independent stream so
    train and held-out draws never overlap."""
    rng = np.random.default_rng([task.seed, split, 0x7A5])
    if task.rule == "token-presence":
        # balanced by construction: sample presence-free sequences, then
        # plant the marker token in half of them.  Plant count varies per
        # example (1 .. seq_len/2 occurrences) so the positive class spans
        # easy and hard instances; the label is still recomputed from the
        # rule itself below.
        ids = rng.integers(1, task.vocab_size, size=(n, task.seq_len))
        plant_max = max(1, task.seq_len // 2)
        counts = rng.integers(1, plant_max + 1, size=n)
        for i in range(n // 2):
            slots = rng.choice(task.seq_len, size=counts[i], replace=False)
            ids[i, slots] = PRESENCE_TOKEN
        ids = ids[rng.permutation(n)]
        labels = np.array([label_of(task, row) for row in ids], dtype=np.int64)
    elif task.rule == "majority-class":
        ids = rng.integers(0, task.vocab_size, size=(n, task.seq_len))
        # tilt each sequence toward a chosen class so majorities are clear
        target = rng.integers(0, task.n_classes, size=n)
        n_tilt = task.seq_len // 2 + 1
        for i in range(n):
            slots = rng.choice(task.seq_len, size=n_tilt, replace=False)
            vals = rng.integers(0, task.vocab_size, size=n_tilt)
            ids[i, slots] = vals - (vals % task.n_classes) + target[i]
        ids = np.minimum(ids, task.vocab_size - 1)
        labels = np.array([label_of(task, row) for row in ids], dtype=np.int64)
    else:  # prefix-parity
        ids = rng.integers(0, task.vocab_size, size=(n, task.seq_len))
        labels = np.array([label_of(task, row) for row in ids], dtype=np.int64)
    return Dataset(ids=ids, labels=labels)


def few_shot_subsample(data: Dataset, k: int, seed: int) -> Dataset:
    """k examples stratified over labels as evenly as class counts allow."""
    n = len(data)
    if not 1 <= k <= n:
        raise ValueError(f"subsample size k={k} outside [1, {n}]")
    rng = np.random.default_rng([seed, 0x5AB])
    classes = np.unique(data.labels)
    pools = {c: rng.permutation(np.nonzero(data.labels == c)[0]) for c in classes}
    quota = {int(c): 0 for c in classes}
    remaining = k
    while remaining > 0:
        progressed = False
        for c in sorted(quota):
            if remaining == 0:
                break
            if quota[c] < len(pools[c]):
                quota[c] += 1
                remaining -= 1
                progressed = True
        if not progressed:  # unreachable when k <= n, kept as a guard
            raise RuntimeError("could not fill subsample quota")
    chosen = np.concatenate([pools[c][: quota[int(c)]] for c in classes])
    chosen = chosen[rng.permutation(chosen.shape[0])]
    return Dataset(ids=data.ids[chosen].copy(), labels=data.labels[chosen].copy())


def loss(logits: eg.Node, labels) -> eg.Node:
    """Softmax cross-entropy, mean over the batch."""
    return eg.cross_entropy(logits, labels)


def adamw_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
) -> None:
    """One decoupled-decay step, in place on the parameter arrays."""
    state.step += 1
    t = state.step
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} mismatches parameter {name} {theta.shape}")
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(theta), np.zeros_like(theta))
        m, v = state.moments[name]
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * g
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * g * g
        mhat = m / (1.0 - cfg.adam_beta1**t)
        vhat = v / (1.0 - cfg.adam_beta2**t)
        theta -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_epsilon)
        theta -= cfg.learning_rate * cfg.weight_decay * theta


def _embed_batch(bb: FrozenBackbone, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, seq = ids.shape
    e = np.zeros((n, bb.config.m, bb.config.d))
    e[:, :seq, :] = bb.embedding[ids]
    return e, np.full(n, seq, dtype=np.int64)


def _lamp_forward(dp, mode, pool, w_sa, bb, e_stack, lengths, trainable=True):
    lv = pr.leaves(dp, trainable=trainable)
    w_node = None
    if pool.mode == "self-attention":
        w_node = eg.parameter(w_sa.w_sa) if trainable else eg.constant(w_sa.w_sa)
    pooled = pr.apply_pool(pr.reconstruct(lv, mode), pool, w_node)
    logits = forward_batch(bb, pooled, e_stack, lengths)
    return logits, lv, w_node


def train_step(
    dp: pr.DecomposedPrompt,
    pool: pr.PoolConfig,
    bb: FrozenBackbone,
    batch: Dataset,
    state: OptimizerState,
    cfg: TrainConfig,
    mode: str = "verbatim",
    w_sa: pr.SelfAttnPoolParams | None = None,
) -> tuple[float, float]:
    """One forward/backward/update on the factor triple; returns the
    batch loss and accuracy."""
    if len(batch) == 0:
        raise ValueError("train_step needs a non-empty batch")
    e_stack, lengths = _embed_batch(bb, batch.ids)
    logits, lv, w_node = _lamp_forward(dp, mode, pool, w_sa, bb, e_stack, lengths)
    out = loss(logits, batch.labels)
    eg.backward(out)
    params = {"u": dp.u, "q": dp.q, "v": dp.v}
    grads = {"u": lv.u.grad, "q": lv.q.grad.reshape(-1), "v": lv.v.grad}
    if w_node is not None:
        params["w_sa"] = w_sa.w_sa
        grads["w_sa"] = w_node.grad
    adamw_update(params, grads, state, cfg)
    acc = float(np.mean(np.argmax(logits.value, axis=1) == batch.labels))
    return float(out.value[0, 0]), acc


def _pt_train_step(matrix, pool, bb, batch, state, cfg):
    e_stack, lengths = _embed_batch(bb, batch.ids)
    p_node = eg.parameter(matrix)
    logits = forward_batch(bb, p_node, e_stack, lengths)
    out = loss(logits, batch.labels)
    eg.backward(out)
    adamw_update({"prompt": matrix}, {"prompt": p_node.grad}, state, cfg)
    acc = float(np.mean(np.argmax(logits.value, axis=1) == batch.labels))
    return float(out.value[0, 0]), acc


def _evaluate(prompt_value: np.ndarray, bb: FrozenBackbone, data: Dataset, chunk: int = 256):
    total, correct = 0.0, 0
    for start in range(0, len(data), chunk):
        part = Dataset(ids=data.ids[start : start + chunk], labels=data.labels[start : start + chunk])
        e_stack, lengths = _embed_batch(bb, part.ids)
        logits = forward_batch(bb, prompt_value, e_stack, lengths)
        total += float(loss(logits, part.labels).value[0, 0]) * len(part)
        correct += int(np.sum(np.argmax(logits.value, axis=1) == part.labels))
    return total / len(data), correct / len(data)


@dataclass
class TrainResult:
    records: list[dict]
    method: str
    mode: str
    pool: pr.PoolConfig
    trainable_params: int
    dp: pr.DecomposedPrompt | None
    pt_matrix: np.ndarray | None
    w_sa: pr.SelfAttnPoolParams | None
    digest_before: str
    digest_after: str
    optimizer_floats: int = 0
    final_train_loss: float = field(default=float("nan"))
    final_heldout_accuracy: float = field(default=float("nan"))

    def checkpoint_prompt(self) -> pr.DecomposedPrompt:
        """Factor triple to serialize: the trained triple for lamp, a
        full-rank factorization of the trained matrix for vanilla-pt."""
        if self.dp is not None:
            return self.dp
        sp = pr.SourcePrompt(tokens=self.pt_matrix)
        return pr.decompose(sp, min(sp.l, sp.d))

    def checkpoint_mode(self) -> str:
        # balanced U diag(Q) V^T reproduces the raw matrix exactly,
        # which is what a vanilla-pt checkpoint must round-trip to
        return self.mode if self.dp is not None else "balanced"


def _record(epoch, split, loss_v, acc, n_params, wall_ms):
    # field order is the on-disk contract; keep it exactly as listed
    return {
        "epoch": int(epoch),
        "split": split,
        "loss": float(loss_v),
        "accuracy": float(acc),
        "trainable_params": int(n_params),
        "wall_ms": float(wall_ms),
    }


def write_metrics(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def train_loop(
    task: SyntheticTask,
    method: str,
    cfg: TrainConfig,
    pool: pr.PoolConfig,
    bb: FrozenBackbone,
    *,
    l: int = 100,
    r: int = 8,
    top_k: int = 5000,
    mode: str = "verbatim",
    n_train: int = 200,
    n_heldout: int = 200,
    data: tuple[Dataset, Dataset] | None = None,
    record_wall_time: bool = False,
) -> TrainResult:
    """Full prompt-tuning run; returns per-epoch metrics for both splits.

    ``method`` is "lamp" (train the factor triple) or "vanilla-pt"
    (train the raw l x d prompt; pooling does not apply).  With
    ``record_wall_time`` off, wall_ms is logged as 0.0 so metrics files
    are byte-reproducible.
    """
    if method not in ("lamp", "vanilla-pt"):
        raise ValueError(f"unknown method {method!r}, expected 'lamp' or 'vanilla-pt'")
    if mode not in pr.RECONSTRUCT_MODES:
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    pool.validate_for_length(l)
    if task.vocab_size != bb.config.vocab_size:
        raise ValueError(
            f"task vocabulary {task.vocab_size} mismatches backbone {bb.config.vocab_size}"
        )
    if task.seq_len > bb.config.m:
        raise ValueError(f"task sequences ({task.seq_len}) exceed backbone length m={bb.config.m}")

    d_before = digest(bb)
    train_data, held_data = data if data is not None else (
        generate_dataset(task, n_train, split=0),
        generate_dataset(task, n_heldout, split=1),
    )

    # synthetic vocabulary: the backbone embedding table, most frequent first
    vocab = pr.make_vocab(bb.embedding)
    eff_top_k = min(top_k, bb.config.vocab_size)
    sp = pr.init_source_prompt(vocab, l=l, top_k=eff_top_k, seed=cfg.seed)

    dp: pr.DecomposedPrompt | None = None
    pt_matrix: np.ndarray | None = None
    w_sa: pr.SelfAttnPoolParams | None = None
    if method == "lamp":
        dp = pr.decompose(sp, r)
        n_params = pr.lamp_param_count(l, bb.config.d, r)
        if pool.mode == "self-attention":
            w_sa = pr.init_self_attn_pool(bb.config.d, l, pool.p, seed=cfg.seed)
            n_params += w_sa.w_sa.size
    else:
        pt_matrix = sp.tokens.copy()
        n_params = pr.vanilla_pt_param_count(l, bb.config.d)

    def current_prompt() -> np.ndarray:
        if method == "vanilla-pt":
            return pt_matrix
        lv = pr.leaves(dp, trainable=False)
        w_node = eg.constant(w_sa.w_sa) if w_sa is not None else None
        return pr.apply_pool(pr.reconstruct(lv, mode), pool, w_node).value

    state = OptimizerState()
    shuffle_rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    records: list[dict] = []

    def log_eval(epoch: int, wall_ms: float) -> tuple[float, float]:
        pv = current_prompt()
        tr_loss, tr_acc = _evaluate(pv, bb, train_data)
        he_loss, he_acc = _evaluate(pv, bb, held_data)
        records.append(_record(epoch, "train", tr_loss, tr_acc, n_params, wall_ms))
        records.append(_record(epoch, "heldout", he_loss, he_acc, n_params, wall_ms))
        return he_loss, he_acc

    log_eval(0, 0.0)
    final_train_loss = records[0]["loss"]
    final_held_acc = records[1]["accuracy"]

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_data))
        ep_loss, ep_acc, n_batches = 0.0, 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            batch = Dataset(ids=train_data.ids[sel], labels=train_data.labels[sel])
            if method == "lamp":
                b_loss, b_acc = train_step(dp, pool, bb, batch, state, cfg, mode, w_sa)
            else:
                b_loss, b_acc = _pt_train_step(pt_matrix, pool, bb, batch, state, cfg)
            ep_loss += b_loss
            ep_acc += b_acc
            n_batches += 1
        pv = current_prompt()
        he_loss, he_acc = _evaluate(pv, bb, held_data)
        wall = (time.perf_counter() - t0) * 1000.0 if record_wall_time else 0.0
        final_train_loss = ep_loss / n_batches
        final_held_acc = he_acc
        records.append(_record(epoch, "train", final_train_loss, ep_acc / n_batches, n_params, wall))
        records.append(_record(epoch, "heldout", he_loss, he_acc, n_params, wall))

    d_after = digest(bb)
    return TrainResult(
        records=records,
        method=method,
        mode=mode,
        pool=pool,
        trainable_params=n_params,
        dp=dp,
        pt_matrix=pt_matrix,
        w_sa=w_sa,
        digest_before=d_before,
        digest_after=d_after,
        optimizer_floats=state.float_count(),
        final_train_loss=final_train_loss,
        final_heldout_accuracy=final_held_acc,
    )


def gradcheck(
    dp: pr.DecomposedPrompt,
    pool: pr.PoolConfig,
    bb: FrozenBackbone,
    batch: Dataset,
    mode: str = "verbatim",
    w_sa: pr.SelfAttnPoolParams | None = None,
    n_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> dict[str, float]:
    """Analytic vs. central-difference gradients through the whole chain.

    Samples up to ``n_coords`` coordinates per parameter group and
    returns the max relative error of each; the accepted bar is 1e-4.
    """
    e_stack, lengths = _embed_batch(bb, batch.ids)
    logits, lv, w_node = _lamp_forward(dp, mode, pool, w_sa, bb, e_stack, lengths)
    eg.backward(loss(logits, batch.labels))

    groups: dict[str, tuple[np.ndarray, np.ndarray]] = {
        "u": (dp.u, lv.u.grad),
        "q": (dp.q, lv.q.grad.reshape(-1)),
        "v": (dp.v, lv.v.grad),
    }
    if w_node is not None:
        groups["w_sa"] = (w_sa.w_sa, w_node.grad)

    def loss_at() -> float:
        lg, _, _ = _lamp_forward(dp, mode, pool, w_sa, bb, e_stack, lengths, trainable=False)
        return float(loss(lg, batch.labels).value[0, 0])

    rng = np.random.default_rng([seed, 0xFD])
    report: dict[str, float] = {}
    for name, (theta, analytic) in groups.items():
        flat = theta.reshape(-1)
        aflat = analytic.reshape(-1)
        take = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=take, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = loss_at()
            flat[c] = orig - step
            fm = loss_at()
            flat[c] = orig
            num = (fp - fm) / (2.0 * step)
            rel = abs(aflat[c] - num) / max(abs(aflat[c]), abs(num), 1e-5)
            worst = max(worst, rel)
        report[name] = worst
    return report
