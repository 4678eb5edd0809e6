"""Dataset construction: inductive graph pairs, query partitions and planted-rule graphs."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import MultiModalKG, RelationVocab, save_triples, write_triples

log = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    """The sampler could not reach the requested graph size."""


@dataclass
class GraphCounts:
    entities: int
    relations: int
    triplets: int

    @classmethod
    def of(cls, kg: MultiModalKG) -> "GraphCounts":
        canon = kg.canonical_triplets()
        return cls(kg.num_entities, len(np.unique(canon[:, 1])) if len(canon) else 0, len(canon))


@dataclass
class SplitReport:
    train: GraphCounts
    ind_test: GraphCounts
    fraction: float
    target_fraction: float
    n_roots: int
    k_hops: int
    per_hop_cap: int
    dropped_test_triplets: int = 0
    attempts: int = 1

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class InductivePair:
    train_graph: MultiModalKG
    ind_test_graph: MultiModalKG
    report: SplitReport


def _neighbors(kg: MultiModalKG) -> list[np.ndarray]:
    ptr, adj = kg._out_ptr, kg._out
    return [np.unique(adj[ptr[e]: ptr[e + 1], 1]) for e in range(kg.num_entities)]


def _root_ball(neigh: list[np.ndarray], root: int, k_hops: int, cap: int, rng: np.random.Generator) -> set[int]:
    seen = {root}
    frontier = [root]
    for _ in range(k_hops):
        cand = set()
        for e in frontier:
            cand.update(neigh[e].tolist())
        cand = sorted(cand - seen)
        if len(cand) > cap:
            cand = sorted(rng.choice(cand, size=cap, replace=False).tolist())
        seen.update(cand)
        frontier = cand
        if not frontier:
            break
    return seen


def _induced(kg: MultiModalKG, nodes: set[int], allowed: np.ndarray | None = None) -> np.ndarray:
    mask = np.zeros(kg.num_entities, dtype=bool)
    mask[list(nodes)] = True
    canon = kg.canonical_triplets()
    keep = mask[canon[:, 0]] & mask[canon[:, 2]]
    if allowed is not None:
        keep &= allowed
    return canon[keep]


class _BallSampler:
    """Union of capped k-hop balls around a root prefix.

    Balls are drawn with a per-root generator so the sampled node set grows
    monotonically with the number of roots, which lets the caller search over
    the root count.
    """

    def __init__(self, kg, neigh, candidates, k_hops, cap, seed, allowed=None):
        self.kg, self.neigh, self.k_hops, self.cap = kg, neigh, k_hops, cap
        self.allowed = allowed
        rng = np.random.default_rng([seed, 17])
        self.order = rng.permutation(np.asarray(candidates, dtype=np.int64))
        self.seed = seed
        self._balls: list[set[int]] = []

    def nodes(self, n_roots: int) -> set[int]:
        while len(self._balls) < min(n_roots, len(self.order)):
            root = int(self.order[len(self._balls)])
            rng = np.random.default_rng([self.seed, root, self.cap])
            ball = _root_ball(self.neigh, root, self.k_hops, self.cap, rng)
            if self.allowed is not None:
                ball &= self.allowed
            self._balls.append(ball)
        out: set[int] = set()
        for b in self._balls[:n_roots]:
            out |= b
        return out

    def triplets(self, n_roots: int) -> np.ndarray:
        return _induced(self.kg, self.nodes(n_roots))


def _search_roots(
    sampler: _BallSampler, target: float, lo_ok: float, hi_ok: float, start: int
) -> tuple[int, np.ndarray] | None:
    """Root count whose induced triplet count is nearest ``target`` inside [lo_ok, hi_ok]."""
    n_max = len(sampler.order)
    count = lambda n: len(sampler.triplets(n))
    lo, hi = 0, max(1, min(start, n_max))
    while count(hi) < target:
        if hi == n_max:
            trip = sampler.triplets(hi)
            return (hi, trip) if len(trip) >= lo_ok else None
        lo, hi = hi, min(2 * hi, n_max)
    # count(lo) < target <= count(hi), with count(0) taken as 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(mid) >= target:
            hi = mid
        else:
            lo = mid
    # hi is the fewest roots reaching the target; hi - 1 may land closer to it
    best = None
    for n in (hi, hi - 1):
        if n >= 1:
            trip = sampler.triplets(n)
            if lo_ok <= len(trip) <= hi_ok and (best is None or abs(len(trip) - target) < abs(len(best[1]) - target)):
                best = (n, trip)
    return best


def sample_inductive_pair(
    kg: MultiModalKG,
    n_roots: int = 10,
    k_hops: int = 2,
    per_hop_cap: int = 50,
    target_fraction: float = 0.1,
    seed: int = 0,
    tolerance: float = 0.2,
    max_attempts: int = 8,
) -> InductivePair:
    """Sample disjoint train / ind_test graphs from ``kg``.

    The train graph is the induced subgraph of capped k-hop balls around
    uniformly drawn roots, sized to ``target_fraction`` of the canonical
    triplets within ``tolerance`` (relative). The test graph is drawn the same
    way from what remains once the train entities are removed; test triplets
    whose relation never occurs in the train graph are dropped.
    """
    if kg.num_entities == 0 or len(kg.triplets) == 0:
        raise ValueError("cannot sample from an empty graph")
    if n_roots < 1 or k_hops < 1 or not 0 < target_fraction < 1:
        raise ValueError("need n_roots >= 1, k_hops >= 1 and 0 < target_fraction < 1")
    total = len(kg.canonical_triplets())
    target = target_fraction * total
    lo_ok, hi_ok = target * (1 - tolerance), target * (1 + tolerance)
    neigh = _neighbors(kg)
    active = [e for e in range(kg.num_entities) if kg.out_degree(e) > 0]

    cap, found, attempts = per_hop_cap, None, 0
    tried = []
    for attempts in range(1, max_attempts + 1):
        sampler = _BallSampler(kg, neigh, active, k_hops, cap, seed)
        found = _search_roots(sampler, target, lo_ok, hi_ok, n_roots)
        if found is not None:
            break
        tried.append(cap)
        # overshooting balls are too coarse: shrink the cap; undershoot: widen it
        reach = len(sampler.triplets(len(sampler.order)))
        cap = max(1, cap // 2) if reach >= lo_ok else cap * 2
    if found is None:
        raise SamplingError(
            f"could not sample {target_fraction:.0%} of {total} triplets within ±{tolerance:.0%} "
            f"after {attempts} attempts (per-hop caps tried: {tried})"
        )
    roots_used, train_trip = found
    train_nodes = set(np.unique(train_trip[:, [0, 2]]).tolist())

    remaining = np.ones(kg.num_entities, dtype=bool)
    remaining[list(train_nodes)] = False
    rest_active = [e for e in active if remaining[e]]
    if not rest_active:
        raise SamplingError("train graph consumed every connected entity; nothing left for ind_test")
    rest_neigh = [n[remaining[n]] if remaining[i] else n[:0] for i, n in enumerate(neigh)]
    test_sampler = _BallSampler(kg, rest_neigh, rest_active, k_hops, cap, seed + 1)
    test_trip = test_sampler.triplets(roots_used)
    train_rels = set(train_trip[:, 1].tolist())
    keep = np.array([r in train_rels for r in test_trip[:, 1].tolist()], dtype=bool)
    dropped = int((~keep).sum())
    test_trip = test_trip[keep] if len(test_trip) else test_trip
    if len(test_trip) == 0:
        raise SamplingError("ind_test graph is empty after relation filtering")

    train_g, test_g = kg.subgraph(train_trip), kg.subgraph(test_trip)
    report = SplitReport(
        train=GraphCounts.of(train_g),
        ind_test=GraphCounts.of(test_g),
        fraction=len(train_trip) / total,
        target_fraction=target_fraction,
        n_roots=roots_used,
        k_hops=k_hops,
        per_hop_cap=cap,
        dropped_test_triplets=dropped,
        attempts=attempts,
    )
    log.info("sampled inductive pair: %s", report)
    return InductivePair(train_g, test_g, report)


def verify_pair(pair: InductivePair) -> list[str]:
    """Violations of entity disjointness and relation containment (empty when valid)."""
    out = []
    shared = sorted(set(pair.train_graph.entity_names) & set(pair.ind_test_graph.entity_names))
    out += [f"entity {e!r} appears in both graphs" for e in shared]
    names = pair.train_graph.relations.names
    train_rels = {names[r] for r in pair.train_graph.relation_set()}
    test_rels = {pair.ind_test_graph.relations.names[r] for r in pair.ind_test_graph.relation_set()}
    out += [f"relation {r!r} appears in ind_test but not in train" for r in sorted(test_rels - train_rels)]
    for name, g, counts in (("train", pair.train_graph, pair.report.train), ("ind_test", pair.ind_test_graph, pair.report.ind_test)):
        if GraphCounts.of(g) != counts:
            out.append(f"{name} report counts {counts} disagree with graph {GraphCounts.of(g)}")
    return out


def split_queries(triplets: np.ndarray, seed: int, fractions=(0.7, 0.1, 0.2)) -> tuple[np.ndarray, ...]:
    """Shuffle canonical triplets into (facts, valid, test) partitions."""
    trip = np.asarray(triplets).reshape(-1, 3)
    perm = np.random.default_rng(seed).permutation(len(trip))
    n_a = int(round(fractions[0] * len(trip)))
    n_b = int(round(fractions[1] * len(trip)))
    parts = perm[:n_a], perm[n_a: n_a + n_b], perm[n_a + n_b:]
    return tuple(trip[np.sort(p)] for p in parts)


def write_inductive_pair(pair: InductivePair, out: str | Path, seed: int = 0) -> None:
    """Write train.tsv, ind_test.tsv, the ind_test query partition and report.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_triples(pair.train_graph, out / "train.tsv")
    save_triples(pair.ind_test_graph, out / "ind_test.tsv")
    g = pair.ind_test_graph
    facts, valid, test = split_queries(g.canonical_triplets(), seed)
    rn, en = g.relations.names, g.entity_names
    for name, part in (("ind_test_facts", facts), ("ind_test_valid", valid), ("ind_test_test", test)):
        write_triples(out / f"{name}.tsv", [(en[h], rn[r], en[t]) for h, r, t in part.tolist()])
    report = pair.report.to_json()
    report["query_partition"] = {"facts": len(facts), "valid": len(valid), "test": len(test), "convention": "70/10/20"}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")


# -- synthetic graphs ---------------------------------------------------------


def make_random_mkg(n_entities: int, n_relations: int, n_triplets: int, seed: int) -> MultiModalKG:
    """Uniform random multigraph with exactly ``n_triplets`` distinct canonical facts."""
    rng = np.random.default_rng(seed)
    vocab = RelationVocab(f"r{i}" for i in range(n_relations))
    canon = np.array([vocab.ids[f"r{i}"] for i in range(n_relations)])
    facts: set[tuple[int, int, int]] = set()
    while len(facts) < n_triplets:
        k = n_triplets - len(facts)
        h = rng.integers(0, n_entities, k)
        t = rng.integers(0, n_entities, k)
        r = canon[rng.integers(0, n_relations, k)]
        for row in zip(h.tolist(), r.tolist(), t.tolist()):
            if row[0] != row[2] and len(facts) < n_triplets:
                facts.add(row)
    rows = np.array(sorted(facts), dtype=np.int64)
    names = [f"e{i}" for i in range(n_entities)]
    used = np.unique(rows[:, [0, 2]])
    full = MultiModalKG(names, vocab, rows)
    return full.subgraph(full.canonical_triplets()) if len(used) < n_entities else full


@dataclass(frozen=True)
class PlantedRule:
    """A chain rule ``body[0] ∘ … ∘ body[-1] ⇒ head`` to plant with exact grounding counts."""

    body: tuple[int, ...]
    head: int
    support: int
    violations: int = 0


@dataclass
class PlantedGraph:
    kg: MultiModalKG
    # canonical (head, relation, tail) ids of each planted head fact, per rule
    head_facts: list[np.ndarray] = field(default_factory=list)
    # body edges of each positive grounding, per rule: (support, len(body), 3)
    body_edges: list[np.ndarray] = field(default_factory=list)


def make_planted_mkg(
    n_entities: int,
    n_relations: int,
    planted_rules: Sequence[PlantedRule],
    noise_triplets: int = 0,
    seed: int = 0,
) -> PlantedGraph:
    """Graph in which each planted rule has exactly ``support`` positive groundings.

    Every grounding uses a fresh chain of distinct entities, so with no noise
    the rule's confidence is ``support / (support + violations)``. Noise facts
    are drawn uniformly over all entities and relations.
    """
    rng = np.random.default_rng(seed)
    vocab = RelationVocab(f"r{i}" for i in range(n_relations))
    rel = np.array([vocab.ids[f"r{i}"] for i in range(n_relations)])
    need = sum((p.support + p.violations) * (len(p.body) + 1) for p in planted_rules)
    for p in planted_rules:
        if not 1 <= len(p.body) <= 3:
            raise ValueError("planted rule bodies must have length 1..3")
        if not all(0 <= r < n_relations for r in (*p.body, p.head)):
            raise ValueError("planted rule references an unknown relation")
        if p.support < 0 or p.violations < 0:
            raise ValueError("support and violations must be non-negative")
    if need > n_entities:
        raise ValueError(f"infeasible plant: {need} chain entities needed but only {n_entities} available")

    pool = rng.permutation(n_entities)
    cursor = 0
    facts: set[tuple[int, int, int]] = set()
    heads, bodies = [], []
    for p in planted_rules:
        hf, be = [], []
        for g in range(p.support + p.violations):
            chain = pool[cursor: cursor + len(p.body) + 1].tolist()
            cursor += len(p.body) + 1
            edges = [(chain[i], int(rel[b]), chain[i + 1]) for i, b in enumerate(p.body)]
            facts.update(edges)
            if g < p.support:
                head = (chain[0], int(rel[p.head]), chain[-1])
                facts.add(head)
                hf.append(head)
                be.append(edges)
        heads.append(np.array(hf, dtype=np.int64).reshape(-1, 3))
        bodies.append(np.array(be, dtype=np.int64).reshape(-1, len(p.body), 3))
    added = 0
    while added < noise_triplets:
        h, t = rng.integers(0, n_entities, 2).tolist()
        row = (h, int(rel[rng.integers(0, n_relations)]), t)
        if h != t and row not in facts:
            facts.add(row)
            added += 1
    rows = np.array(sorted(facts), dtype=np.int64).reshape(-1, 3)
    kg = MultiModalKG([f"e{i}" for i in range(n_entities)], vocab, rows)
    return PlantedGraph(kg, heads, bodies)


@dataclass
class QuerySplit:
    graph: MultiModalKG
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    known: np.ndarray  # all true facts, for filtered ranking


def holdout_queries(
    kg: MultiModalKG, queries: np.ndarray, seed: int, valid_frac: float = 0.1, test_frac: float = 0.2
) -> QuerySplit:
    """Split query facts into train/valid/test and remove held-out facts from the graph.

    The returned graph shares entity ids with ``kg`` (entities left isolated are kept).
    """
    q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    perm = np.random.default_rng(seed).permutation(len(q))
    n_test = int(round(test_frac * len(q)))
    n_valid = int(round(valid_frac * len(q)))
    test, valid, train = q[np.sort(perm[:n_test])], q[np.sort(perm[n_test: n_test + n_valid])], q[np.sort(perm[n_test + n_valid:])]
    held = {tuple(t) for t in np.concatenate([valid, test]).tolist()}
    canon = kg.canonical_triplets()
    keep = np.array([tuple(t) not in held for t in canon.tolist()], dtype=bool)
    graph = MultiModalKG(kg.entity_names, kg.relations, canon[keep])
    return QuerySplit(graph, train, valid, test, canon)


def make_sparse_planted_mkg(
    n_chains: int = 50,
    n_relations: int = 6,
    sparsity: float = 0.3,
    noise_fraction: float = 0.1,
    seed: int = 0,
) -> PlantedGraph:
    """Planted ``r1 ∘ r2 ⇒ r0`` graph where a fraction of ``r1`` body edges is deleted.

    Each deleted ``r1(x, y)`` stays derivable through ``r3 ∘ r4 ∘ r5 ⇒ r1``, a
    detour longer than three hops, so only rule-derived actions recover it
    within a three-step budget.
    """
    if n_relations < 6:
        raise ValueError("the sparse probe needs at least 6 relations")
    rng = np.random.default_rng(seed)
    vocab = RelationVocab(f"r{i}" for i in range(n_relations))
    R = [vocab.ids[f"r{i}"] for i in range(n_relations)]
    n_entities = n_chains * 5
    pool = rng.permutation(n_entities + int(n_chains * 0.5)).tolist()
    facts, heads, bodies = set(), [], []
    deleted = set(rng.choice(n_chains, size=int(round(sparsity * n_chains)), replace=False).tolist())
    for c in range(n_chains):
        x, y, z, a, b = pool[5 * c: 5 * c + 5]
        body = [(x, R[1], y), (y, R[2], z)]
        detour = [(x, R[3], a), (a, R[4], b), (b, R[5], y)]
        facts.update(detour)
        facts.add(body[1])
        if c not in deleted:
            facts.add(body[0])
        facts.add((x, R[0], z))
        heads.append((x, R[0], z))
        bodies.append(body)
    n_all = len(pool)
    target = int(round(noise_fraction * len(facts)))
    added = 0
    while added < target:
        h, t = rng.integers(0, n_all, 2).tolist()
        row = (pool[h], R[int(rng.integers(0, n_relations))], pool[t])
        if h != t and row not in facts:
            facts.add(row)
            added += 1
    rows = np.array(sorted(facts), dtype=np.int64)
    kg = MultiModalKG([f"e{i}" for i in range(n_all)], vocab, rows)
    return PlantedGraph(kg, [np.array(heads, dtype=np.int64)], [np.array(bodies, dtype=np.int64)])
