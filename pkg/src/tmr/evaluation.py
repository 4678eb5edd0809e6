"""Filtered link-prediction ranking from beam search, MRR and Hits@k."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np
import torch

from .env import Environment, beam_infer
from .graph import FeatureStore, MultiModalKG
from .policy import Reasoner
from .rules import RuleIndex


def metrics(ranks: Sequence[int]) -> dict[str, float]:
    """MRR, Hits@1 and Hits@10 as fractions in [0, 1]."""
    r = np.asarray(list(ranks), dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks to summarise")
    if (r < 1).any():
        raise ValueError("ranks must be >= 1")
    return {"mrr": float(np.mean(1.0 / r)), "hits1": float(np.mean(r <= 1)), "hits10": float(np.mean(r <= 10))}


def unreached_rank(n_entities: int, reached: int) -> int:
    """Expected rank of a target placed at random among the unscored candidates."""
    return max(reached + 1, math.ceil((n_entities + reached) / 2))


def rank_from_scores(
    ranked: Sequence[tuple[int, float]], target: int, n_entities: int, filtered: Iterable[int] = ()
) -> int:
    """1 + number of kept candidates scoring strictly higher than the target.

    Candidates in ``filtered`` (other known answers) are dropped first; the
    target itself is never filtered.
    """
    drop = set(filtered) - {target}
    kept = [(e, s) for e, s in ranked if e not in drop]
    scores = dict(kept)
    if target not in scores:
        return unreached_rank(n_entities - len(drop), len(kept))
    return 1 + sum(1 for _, s in kept if s > scores[target])


def known_tails(known: np.ndarray) -> dict[tuple[int, int], set[int]]:
    out: dict[tuple[int, int], set[int]] = defaultdict(set)
    for h, r, t in np.asarray(known).reshape(-1, 3).tolist():
        out[(h, r)].add(t)
    return out


def rank_query(
    model: Reasoner, enc, env: Environment, query: tuple[int, int, int], beam_width: int,
    tails: dict[tuple[int, int], set[int]] | None = None, filtered: bool = True,
) -> int:
    e_s, r_q, target = query
    ranked = beam_infer(model, enc, env, e_s, r_q, beam_width)
    other = tails.get((e_s, r_q), set()) if (tails is not None and filtered) else set()
    return rank_from_scores(ranked, target, env.kg.num_entities, other)


@torch.no_grad()
def evaluate(
    model: Reasoner,
    kg: MultiModalKG,
    features: FeatureStore,
    queries: np.ndarray,
    known: np.ndarray | None = None,
    index: RuleIndex | None = None,
    beam_width: int = 32,
    pretrained: torch.Tensor | None = None,
    filtered: bool = True,
) -> dict:
    """Rank every (e_s, r_q, target) query on ``kg``; returns metrics plus the raw ranks."""
    cfg = model.cfg
    q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    if len(q) == 0:
        raise ValueError("no queries to evaluate")
    was_training = model.training
    model.eval()
    env = Environment(kg, index, cfg.L, cfg.max_actions, cfg.x, cfg.cap_per_relation, cfg.augmentation_on)
    enc = model.encode_graph(kg, features, sorted(set(q[:, 1].tolist())), pretrained)
    tails = known_tails(known if known is not None else q)
    ranks = [rank_query(model, enc, env, tuple(row), beam_width, tails, filtered) for row in q.tolist()]
    model.train(was_training)
    return {**metrics(ranks), "ranks": ranks, "unreached_rule": "ceil((|E| + reached) / 2)"}


def format_table(rows: dict[str, dict], title: str = "") -> str:
    """Plain-text table of MRR / Hits@1 / Hits@10 in percent, one row per model."""
    width = max([len(n) for n in rows] + [5])
    lines = [title] if title else []
    lines.append(f"{'Model':<{width}}  {'MRR':>6}  {'Hits@1':>6}  {'Hits@10':>7}")
    lines.append("-" * (width + 25))
    for name, m in rows.items():
        lines.append(f"{name:<{width}}  {100 * m['mrr']:6.1f}  {100 * m['hits1']:6.1f}  {100 * m['hits10']:7.1f}")
    return "\n".join(lines)
