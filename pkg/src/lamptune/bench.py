"""Step-time benchmark across pooling block sizes.

Times one full forward + backward on a fixed batch, repeated; we report
the median, which is robust to the occasional scheduler hiccup that a
mean would absorb.  No optimizer update runs, so every iteration does
identical work.
"""

from __future__ import annotations

import time

import numpy as np

from . import engine as eg
from . import prompt as pr
from .backbone import FrozenBackbone
from .trainer import _embed_batch, _lamp_forward, generate_dataset, loss

__all__ = ["bench_pool_blocks"]

WARMUP_ITERS = 3


def bench_pool_blocks(cfg, bb: FrozenBackbone, blocks: list[int], iters: int) -> list[dict]:
    """Median forward+backward milliseconds per pooling block size.

    ``cfg`` is an ExperimentConfig; the prompt factors and the batch are
    fixed across blocks so only the pooled row count varies.
    """
    vocab = pr.make_vocab(bb.embedding)
    eff_top_k = min(cfg.prompt.top_k, bb.config.vocab_size)
    sp = pr.init_source_prompt(vocab, l=cfg.prompt.l, top_k=eff_top_k, seed=cfg.seed)
    dp = pr.decompose(sp, cfg.prompt.r)
    data = generate_dataset(cfg.task, cfg.train.batch_size)
    e_stack, lengths = _embed_batch(bb, data.ids)

    rows = []
    for p in blocks:
        pool = pr.PoolConfig(mode="average", p=p)
        pool.validate_for_length(cfg.prompt.l)

        def step() -> None:
            logits, _, _ = _lamp_forward(dp, cfg.prompt.mode, pool, None, bb, e_stack, lengths)
            eg.backward(loss(logits, data.labels))

        for _ in range(WARMUP_ITERS):
            step()
        samples = np.empty(iters)
        for i in range(iters):
            t0 = time.perf_counter()
            step()
            samples[i] = (time.perf_counter() - t0) * 1000.0
        rows.append(
            {
                "p": int(p),
                "prompt_rows": cfg.prompt.l // p,
                "median_ms": float(np.median(samples)),
            }
        )
    return rows
