"""Cost accounting and prompt-geometry statistics.

Costs are analytic counts (parameters, optimizer floats, quadratic
attention units), not measured memory: measured numbers would mostly
reflect interpreter overheads at this scale.  The geometry side exports
exact prompt coordinates and summary statistics (pairwise spread,
per-axis extents, numerical rank) instead of a stochastic 2-D
projection, so every reported figure is reproducible and testable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .prompt import lamp_param_count, vanilla_pt_param_count
from .svd import svd

__all__ = [
    "CostReport",
    "cost_report",
    "DispersionStats",
    "dispersion_stats",
    "export_embeddings",
]


@dataclass(frozen=True)
class CostReport:
    method: str
    trainable_params: int
    pt_params: int
    ratio: float  # pt_params / trainable_params, 2 decimal places
    optimizer_state_floats: int  # two moments per trainable parameter
    prompt_rows_fed_to_model: int
    attention_cost_units: int  # (prompt rows + m)^2 * d

    def to_json(self) -> str:
        return json.dumps(
            {
                "method": self.method,
                "trainable_params": self.trainable_params,
                "pt_params": self.pt_params,
                "ratio": self.ratio,
                "optimizer_state_floats": self.optimizer_state_floats,
                "prompt_rows_fed_to_model": self.prompt_rows_fed_to_model,
                "attention_cost_units": self.attention_cost_units,
            }
        )


def cost_report(
    l: int, d: int, r: int, p: int = 1, m: int = 0, method: str = "lamp", sa_pool: bool = False
) -> CostReport:
    """Analytic training-cost summary for one configuration.

    The low-rank method feeds l/p pooled rows to the model; the vanilla
    baseline always feeds all l rows and ignores p in its own row count.
    The ratio field is the vanilla-to-method parameter multiple either
    way, which is what makes the two reports comparable.  With
    ``sa_pool`` the learnable pooling matrix W_sa (d x l/p) joins the
    trainable count, keeping this report equal to what the optimizer
    actually tracks.
    """
    if min(l, d, r) < 1 or p < 1 or m < 0:
        raise ValueError(f"invalid cost config l={l} d={d} r={r} p={p} m={m}")
    if l % p != 0:
        raise ValueError(f"pooling block p={p} does not divide prompt length l={l}")
    pt = vanilla_pt_param_count(l, d)
    if method == "lamp":
        trainable = lamp_param_count(l, d, r)
        rows = l // p
        if sa_pool:
            trainable += d * rows
    elif method == "vanilla-pt":
        trainable = pt
        rows = l
    else:
        raise ValueError(f"unknown method {method!r}")
    return CostReport(
        method=method,
        trainable_params=trainable,
        pt_params=pt,
        ratio=round(pt / trainable, 2),
        optimizer_state_floats=2 * trainable,
        prompt_rows_fed_to_model=rows,
        attention_cost_units=(rows + m) ** 2 * d,
    )


@dataclass(frozen=True)
class DispersionStats:
    mean_pairwise_distance: float
    axis_min: np.ndarray  # (d,) per-axis minima
    axis_max: np.ndarray  # (d,) per-axis maxima
    axis_extent: np.ndarray  # (d,) widths, max - min
    rank: int  # singular values above 1e-8 * sigma_1


def dispersion_stats(tokens: np.ndarray) -> DispersionStats:
    """Exact spread statistics of a token-embedding matrix."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 2:
        raise ValueError(f"dispersion needs at least 2 rows, got shape {tokens.shape}")
    n = tokens.shape[0]
    sq = np.einsum("ij,ij->i", tokens, tokens)
    gram = tokens @ tokens.T
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    iu = np.triu_indices(n, k=1)
    mean_dist = float(np.mean(np.sqrt(np.maximum(d2[iu], 0.0))))
    s = svd(tokens).s
    rank = int(np.sum(s > 1e-8 * s[0])) if s[0] > 0 else 0
    amin = tokens.min(axis=0)
    amax = tokens.max(axis=0)
    return DispersionStats(
        mean_pairwise_distance=mean_dist,
        axis_min=amin,
        axis_max=amax,
        axis_extent=amax - amin,
        rank=rank,
    )


def export_embeddings(tokens: np.ndarray, path) -> None:
    """One token per line, comma-separated, 17 significant digits (the
    shortest width that round-trips 64-bit floats)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValueError(f"expected a token matrix, got shape {tokens.shape}")
    with open(path, "w") as fh:
        for row in tokens:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
