"""Bottom-up chain-rule mining, confidence scoring and rule-derived actions."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import torch

from .graph import MultiModalKG

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Rule:
    body: tuple[int, ...]
    head: int
    confidence: float
    pos: int
    neg: int

    def sort_key(self):
        return (-self.confidence, len(self.body), self.body)


class RuleIndex:
    """Rules grouped by head relation, best first."""

    def __init__(self, rules: Iterable[Rule] = ()):
        self.by_head: dict[int, list[Rule]] = {}
        for rule in rules:
            self.by_head.setdefault(rule.head, []).append(rule)
        for head in self.by_head:
            self.by_head[head].sort(key=Rule.sort_key)

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_head.values())

    def __iter__(self):
        for head in sorted(self.by_head):
            yield from self.by_head[head]

    def rules_for(self, head: int) -> list[Rule]:
        return self.by_head.get(head, [])

    def heads(self) -> list[int]:
        return sorted(self.by_head)

    def save(self, path: str | Path, kg: MultiModalKG) -> None:
        names = kg.relations.names
        with Path(path).open("w", encoding="utf-8", newline="\n") as f:
            for r in self:
                body = ",".join(names[b] for b in r.body)
                f.write(f"{r.confidence:.6f}\t{r.pos}\t{r.neg}\t{names[r.head]}\t{body}\n")

    @classmethod
    def load(cls, path: str | Path, kg: MultiModalKG) -> "RuleIndex":
        ids = kg.relations.ids
        rules = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                conf, pos, neg, head, body = line.split("\t")
                rules.append(Rule(tuple(ids[b] for b in body.split(",")), ids[head], float(conf), int(pos), int(neg)))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad rule line {line!r}") from exc
        return cls(rules)


class _Groundings:
    """Sparse per-relation adjacency for counting body-path endpoint pairs."""

    def __init__(self, kg: MultiModalKG):
        self.kg = kg
        n = kg.num_entities
        self.n = n
        trip = kg.triplets
        self.adj = {}
        for r in range(kg.num_relations):
            rows = trip[trip[:, 1] == r]
            self.adj[r] = sp.csr_matrix(
                (np.ones(len(rows), dtype=np.int32), (rows[:, 0], rows[:, 2])), shape=(n, n), dtype=np.int32
            )
        keys = trip[:, 0] * n + trip[:, 2]
        order = np.argsort(keys, kind="stable")
        self.fact_keys = keys[order]
        self.fact_rels = trip[order, 1]

    def reach(self, body: Sequence[int], start: sp.csr_matrix | None = None) -> sp.csr_matrix:
        m = start
        for r in body:
            m = self.adj[r] if m is None else (m @ self.adj[r])
            m.data[:] = 1
            m.eliminate_zeros()
        return m

    def pairs(self, m: sp.csr_matrix) -> np.ndarray:
        """Sorted unique endpoint keys ``a * n + b`` with ``a != b``."""
        coo = m.tocoo()
        keep = coo.row != coo.col
        return np.unique(coo.row[keep].astype(np.int64) * self.n + coo.col[keep])

    def head_counts(self, keys: np.ndarray) -> np.ndarray:
        """Per relation, how many of the endpoint pairs are connected by a fact."""
        hit = np.isin(self.fact_keys, keys, assume_unique=False)
        return np.bincount(self.fact_rels[hit], minlength=self.kg.num_relations)


def rule_confidence(kg: MultiModalKG, body: Sequence[int], head: int, _g: _Groundings | None = None) -> tuple[int, int, float]:
    """(pos, neg, conf) over distinct endpoint pairs (e1 != eN) of the body path.

    A pair is positive when ``(e1, head, eN)`` is a fact. With no groundings
    the confidence is 0.
    """
    g = _g or _Groundings(kg)
    keys = g.pairs(g.reach(body))
    if len(keys) == 0:
        return 0, 0, 0.0
    pos = int(g.head_counts(keys)[head])
    neg = len(keys) - pos
    return pos, neg, pos / (pos + neg)


def _trivial(body: Sequence[int], head: int, inverse_of: np.ndarray) -> bool:
    if tuple(body) == (head,):
        return True
    return any(inverse_of[a] == b for a, b in zip(body, body[1:]))


def mine_rules(
    kg: MultiModalKG,
    max_body_len: int = 3,
    min_support: int = 2,
    min_conf: float = 0.1,
    mode: str = "exhaustive",
    n_samples: int = 2000,
    seed: int = 0,
) -> RuleIndex:
    """Mine chain rules ``r1 ∘ … ∘ rk ⇒ h`` with exact (pos, neg) counts.

    ``exhaustive`` enumerates every body up to ``max_body_len``. ``sample``
    collects candidate bodies bottom-up from random walks between the ends of
    sampled facts, then scores each candidate exactly. Bodies that immediately
    backtrack (``r`` then ``r_inv``) and the identity rule are skipped.
    """
    if max_body_len < 1:
        raise ValueError("max_body_len must be >= 1")
    g = _Groundings(kg)
    inv = kg.inverse_of
    rels = sorted(kg.relation_set())
    rules: list[Rule] = []

    def score(body, m):
        keys = g.pairs(m)
        if len(keys) < min_support:
            return
        counts = g.head_counts(keys)
        for head in np.nonzero(counts >= min_support)[0].tolist():
            if _trivial(body, head, inv):
                continue
            pos = int(counts[head])
            conf = pos / len(keys)
            if conf >= min_conf:
                rules.append(Rule(tuple(body), head, conf, pos, len(keys) - pos))

    if mode == "exhaustive":
        def grow(body, m):
            score(body, m)
            if len(body) == max_body_len:
                return
            for r in rels:
                if inv[body[-1]] == r:
                    continue
                nm = g.reach([r], m)
                if nm.nnz:
                    grow(body + [r], nm)

        for r in rels:
            grow([r], g.adj[r])
    elif mode == "sample":
        for body in sorted(_sample_bodies(kg, max_body_len, n_samples, seed)):
            score(list(body), g.reach(body))
    else:
        raise ValueError(f"unknown mining mode {mode!r}")
    log.info("mined %d rules from %s", len(rules), kg)
    return RuleIndex(rules)


def _sample_bodies(kg: MultiModalKG, max_len: int, n_samples: int, seed: int) -> set[tuple[int, ...]]:
    """Relation sequences of random walks from a fact's head that end at its tail."""
    rng = np.random.default_rng(seed)
    inv = kg.inverse_of
    found = set()
    facts = kg.triplets
    for _ in range(n_samples):
        h, r, t = facts[rng.integers(len(facts))].tolist()
        e, body = h, []
        for _ in range(max_len):
            nxt = [(rr, ee) for rr, ee in kg.outgoing(e) if (e, rr, ee) not in ((h, r, t), (t, inv[r], h))]
            if not nxt:
                break
            rr, ee = nxt[rng.integers(len(nxt))]
            body.append(rr)
            e = ee
            if e == t:
                found.add(tuple(body))
                break
    return found


# -- action augmentation --------------------------------------------------------


def select_additional_relations(
    state_embedding: torch.Tensor,
    table: torch.Tensor,
    x: int,
    mlp: torch.nn.Module | None = None,
    candidates: Sequence[int] | None = None,
) -> tuple[list[int], torch.Tensor]:
    """Top-``x`` relations by attention ``softmax(mlp(s) · U^T)``.

    Ties go to the lower relation id. ``candidates`` restricts the ranking (not
    the softmax) to a subset of relation ids.
    """
    if x < 1:
        raise ValueError("x must be >= 1")
    query = mlp(state_embedding) if mlp is not None else state_embedding
    w = torch.softmax(table @ query, dim=-1)
    pool = range(len(w)) if candidates is None else candidates
    vals = w.detach().cpu().tolist()
    ranked = sorted(pool, key=lambda r: (-vals[r], r))
    return ranked[:x], w


def _walk(kg: MultiModalKG, start: int, body: Sequence[int], banned: frozenset) -> set[int]:
    frontier = {start}
    for r in body:
        nxt = set()
        for e in frontier:
            nxt.update(t for t in kg.tails(e, r) if (e, r, t) not in banned)
        frontier = nxt
        if not frontier:
            break
    return frontier


def derive_facts(
    kg: MultiModalKG, e_l: int, r_prime: int, index: RuleIndex, banned: frozenset = frozenset()
) -> list[int]:
    """Tails ``e'`` with ``(e_l, r_prime, e')`` derived by the best applicable rule.

    Rules for ``r_prime`` are tried best first; the first one whose body walk
    from ``e_l`` yields a new fact wins. Facts already in the graph, self
    loops and walks through ``banned`` edges are excluded.
    """
    for rule in index.rules_for(r_prime):
        tails = _walk(kg, e_l, rule.body, banned)
        tails = sorted(t for t in tails if t != e_l and not kg.has(e_l, r_prime, t))
        if tails:
            return tails
    return []


def derived_actions(
    kg: MultiModalKG,
    e_l: int,
    relations: Sequence[int],
    index: RuleIndex,
    cap_per_relation: int = 10,
    banned: frozenset = frozenset(),
) -> list[tuple[int, int]]:
    """Rule-derived (relation, entity) pairs for the chosen relations, in relation order."""
    out = []
    for r in relations:
        out.extend((r, t) for t in derive_facts(kg, e_l, r, index, banned)[:cap_per_relation])
    return out


def augment_actions(
    kg: MultiModalKG,
    e_l: int,
    state_embedding: torch.Tensor,
    table: torch.Tensor,
    index: RuleIndex,
    x: int = 3,
    cap_per_relation: int = 10,
    mlp: torch.nn.Module | None = None,
    banned: frozenset = frozenset(),
) -> list[tuple[int, int]]:
    """Select additional relations for the state, then derive their tails from rules."""
    if len(index) == 0:
        return []
    rels, _ = select_additional_relations(state_embedding, table, x, mlp)
    return derived_actions(kg, e_l, rels, index, cap_per_relation, banned)
