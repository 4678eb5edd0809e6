"""Multi-modal knowledge graph storage: triplets, adjacency and entity features."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

INVERSE_SUFFIX = "_inv"


class GraphParseError(ValueError):
    """Raised when a triple file contains a malformed line."""


class FeatureError(ValueError):
    """Raised when a feature file does not cover the graph."""


def inverse_name(name: str) -> str:
    if name.endswith(INVERSE_SUFFIX):
        return name[: -len(INVERSE_SUFFIX)]
    return name + INVERSE_SUFFIX


class RelationVocab:
    """Relation symbol table closed under inversion.

    Every relation ``r`` is paired with ``r_inv``; ids are assigned in order of
    first appearance, with the partner allocated immediately after.
    """

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.ids: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        if name in self.ids:
            return self.ids[name]
        for n in (name, inverse_name(name)):
            self.ids[n] = len(self.names)
            self.names.append(n)
        return self.ids[name]

    def __len__(self) -> int:
        return len(self.names)

    @cached_property
    def inverse_of(self) -> np.ndarray:
        return np.array([self.ids[inverse_name(n)] for n in self.names], dtype=np.int64)

    def is_canonical(self, rel: int) -> bool:
        """True for the member of an inverse pair that is not the ``_inv`` form."""
        return not self.names[rel].endswith(INVERSE_SUFFIX)


class MultiModalKG:
    """Immutable directed multigraph with eager inverse-relation closure.

    ``triplets`` is an ``(n, 3)`` int array of (head, relation, tail), sorted and
    duplicate free, containing both directions of every fact.
    """

    def __init__(
        self,
        entity_names: Sequence[str],
        relations: RelationVocab,
        triplets: np.ndarray,
    ):
        self.entity_names = list(entity_names)
        self.entity_ids = {n: i for i, n in enumerate(self.entity_names)}
        if len(self.entity_ids) != len(self.entity_names):
            raise ValueError("duplicate entity names")
        self.relations = relations
        trip = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        if len(trip):
            inv = relations.inverse_of
            closed = np.concatenate([trip, np.stack([trip[:, 2], inv[trip[:, 1]], trip[:, 0]], 1)])
            trip = np.unique(closed, axis=0)
            if trip[:, [0, 2]].max() >= len(self.entity_names) or trip.min() < 0:
                raise ValueError("triplet references an unknown entity")
            if trip[:, 1].max() >= len(relations):
                raise ValueError("triplet references an unknown relation")
        self.triplets = trip
        self.triplets.setflags(write=False)
        self._fact_set = {tuple(t) for t in trip.tolist()}

        # CSR adjacency; out sorted by (relation, tail), in by (relation, head)
        n = len(self.entity_names)
        out_order = np.lexsort((trip[:, 2], trip[:, 1], trip[:, 0]))
        in_order = np.lexsort((trip[:, 0], trip[:, 1], trip[:, 2]))
        self._out = trip[out_order][:, [1, 2]]
        self._in = trip[in_order][:, [1, 0]]
        self._out_ptr = np.searchsorted(trip[out_order][:, 0], np.arange(n + 1))
        self._in_ptr = np.searchsorted(trip[in_order][:, 2], np.arange(n + 1))

    # -- construction -----------------------------------------------------

    @classmethod
    def from_named_triples(
        cls,
        triples: Iterable[tuple[str, str, str]],
        relations: RelationVocab | None = None,
        entity_names: Sequence[str] | None = None,
    ) -> "MultiModalKG":
        relations = relations if relations is not None else RelationVocab()
        names = list(entity_names) if entity_names is not None else []
        ids = {n: i for i, n in enumerate(names)}
        rows = []
        for h, r, t in triples:
            for e in (h, t):
                if e not in ids:
                    ids[e] = len(names)
                    names.append(e)
            rows.append((ids[h], relations.add(r), ids[t]))
        return cls(names, relations, np.array(rows, dtype=np.int64).reshape(-1, 3))

    def subgraph(self, triplets: np.ndarray, keep_isolated: Sequence[int] = ()) -> "MultiModalKG":
        """Re-index a subset of this graph's triplets; the relation vocabulary is shared."""
        trip = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        used = np.unique(np.concatenate([trip[:, 0], trip[:, 2], np.asarray(keep_isolated, dtype=np.int64)]))
        remap = np.full(self.num_entities, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        new = np.stack([remap[trip[:, 0]], trip[:, 1], remap[trip[:, 2]]], 1)
        return MultiModalKG([self.entity_names[i] for i in used], self.relations, new)

    # -- queries ----------------------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def inverse_of(self) -> np.ndarray:
        return self.relations.inverse_of

    def relation_id(self, name: str) -> int:
        return self.relations.ids[name]

    def entity_id(self, name: str) -> int:
        return self.entity_ids[name]

    def _check(self, e: int) -> None:
        if not 0 <= e < self.num_entities:
            raise KeyError(f"unknown entity id {e}")

    def outgoing(self, e: int) -> list[tuple[int, int]]:
        """(relation, tail) pairs leaving ``e``, sorted by relation then tail."""
        self._check(e)
        return [tuple(x) for x in self._out[self._out_ptr[e]: self._out_ptr[e + 1]].tolist()]

    def incoming(self, e: int) -> list[tuple[int, int]]:
        """(relation, head) pairs entering ``e``, sorted by relation then head."""
        self._check(e)
        return [tuple(x) for x in self._in[self._in_ptr[e]: self._in_ptr[e + 1]].tolist()]

    def out_degree(self, e: int) -> int:
        return int(self._out_ptr[e + 1] - self._out_ptr[e])

    def has(self, h: int, r: int, t: int) -> bool:
        return (h, r, t) in self._fact_set

    def tails(self, h: int, r: int) -> list[int]:
        lo, hi = self._out_ptr[h], self._out_ptr[h + 1]
        seg = self._out[lo:hi]
        a, b = np.searchsorted(seg[:, 0], [r, r + 1])
        return seg[a:b, 1].tolist()

    def relation_set(self) -> set[int]:
        return set(np.unique(self.triplets[:, 1]).tolist())

    def canonical_triplets(self) -> np.ndarray:
        """One direction per fact: the triplets whose relation is not an ``_inv`` form."""
        mask = np.array([self.relations.is_canonical(r) for r in range(self.num_relations)], dtype=bool)
        return self.triplets[mask[self.triplets[:, 1]]] if len(self.triplets) else self.triplets

    def named_triples(self) -> list[tuple[str, str, str]]:
        rn, en = self.relations.names, self.entity_names
        return [(en[h], rn[r], en[t]) for h, r, t in self.canonical_triplets().tolist()]

    @cached_property
    def edge_index(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(heads, relations, tails) as long tensors over all closed triplets."""
        t = torch.tensor(np.array(self.triplets), dtype=torch.long).reshape(-1, 3)
        return t[:, 0].contiguous(), t[:, 1].contiguous(), t[:, 2].contiguous()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for row in sorted(self.named_triples()):
            h.update("\t".join(row).encode())
            h.update(b"\n")
        return h.hexdigest()[:16]

    def __repr__(self) -> str:
        return f"MultiModalKG(entities={self.num_entities}, relations={self.num_relations}, triplets={len(self.triplets)})"


def parse_triples(lines: Iterable[str], source: str = "<input>") -> list[tuple[str, str, str]]:
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(p.strip() for p in parts):
            raise GraphParseError(f"{source}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}")
        out.append(tuple(p.strip() for p in parts))
    return out


def read_triples(path: str | Path) -> list[tuple[str, str, str]]:
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        return parse_triples(f, str(path))


def load_triples(path: str | Path, relations: RelationVocab | None = None) -> MultiModalKG:
    """Load a tab-separated triple file and apply the inverse-relation closure."""
    return MultiModalKG.from_named_triples(read_triples(path), relations)


def write_triples(path: str | Path, triples: Iterable[tuple[str, str, str]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for h, r, t in triples:
            f.write(f"{h}\t{r}\t{t}\n")


def save_triples(kg: MultiModalKG, path: str | Path) -> None:
    write_triples(path, kg.named_triples())


def triples_to_ids(kg: MultiModalKG, triples: Iterable[tuple[str, str, str]]) -> np.ndarray:
    """Map named triples onto ``kg``'s ids; unknown symbols raise ``KeyError``."""
    rows = [(kg.entity_ids[h], kg.relations.ids[r], kg.entity_ids[t]) for h, r, t in triples]
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


# -- features ---------------------------------------------------------------


@dataclass(frozen=True)
class FeatureStore:
    """Per-entity image and text vectors, rows aligned with entity ids."""

    image: np.ndarray
    text: np.ndarray
    entity_order: tuple[str, ...]

    def __post_init__(self):
        if self.image.ndim != 2 or self.text.ndim != 2:
            raise FeatureError("feature blocks must be 2-D")
        if not (len(self.image) == len(self.text) == len(self.entity_order)):
            raise FeatureError("feature blocks disagree on the number of rows")
        if not (np.isfinite(self.image).all() and np.isfinite(self.text).all()):
            raise FeatureError("non-finite feature values")

    @property
    def d_i(self) -> int:
        return self.image.shape[1]

    @property
    def d_t(self) -> int:
        return self.text.shape[1]

    def align(self, kg: MultiModalKG) -> "FeatureStore":
        """Reorder rows to ``kg``'s entity ids; every entity must be present."""
        index = {n: i for i, n in enumerate(self.entity_order)}
        missing = [n for n in kg.entity_names if n not in index]
        if missing:
            raise FeatureError(f"no features for entity {missing[0]!r} ({len(missing)} missing)")
        rows = np.array([index[n] for n in kg.entity_names], dtype=np.int64)
        return FeatureStore(self.image[rows], self.text[rows], tuple(kg.entity_names))

    def tensors(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.as_tensor(self.image, dtype=dtype), torch.as_tensor(self.text, dtype=dtype)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_features(store: FeatureStore, path: str | Path) -> None:
    path = Path(path)
    block = np.concatenate([store.image, store.text], axis=1).astype("<f4")
    path.write_bytes(block.tobytes(order="C"))
    meta = {"d_i": store.d_i, "d_t": store.d_t, "n": len(store.entity_order), "entity_order": list(store.entity_order)}
    _sidecar(path).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def load_features(kg: MultiModalKG, path: str | Path) -> FeatureStore:
    """Read a little-endian float32 blob plus JSON sidecar and align it to ``kg``."""
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    d_i, d_t, n = int(meta["d_i"]), int(meta["d_t"]), int(meta["n"])
    order = meta["entity_order"]
    if len(order) != n:
        raise FeatureError(f"sidecar lists {len(order)} entities but n={n}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != n * (d_i + d_t):
        raise FeatureError(f"blob holds {raw.size} floats, expected n*(d_i+d_t)={n * (d_i + d_t)}")
    if n < kg.num_entities:
        raise FeatureError(f"feature file has {n} rows but the graph has {kg.num_entities} entities")
    block = raw.reshape(n, d_i + d_t).astype(np.float32)
    store = FeatureStore(block[:, :d_i].copy(), block[:, d_i:].copy(), tuple(order))
    return store.align(kg)


def _name_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}\x00{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def synth_features(kg: MultiModalKG, seed: int, d_i: int, d_t: int) -> FeatureStore:
    """Deterministic stand-in features, uniform in [-1, 1], keyed by (seed, entity name)."""
    if d_i < 1 or d_t < 1:
        raise ValueError("feature dimensions must be >= 1")
    image = np.empty((kg.num_entities, d_i), dtype=np.float32)
    text = np.empty((kg.num_entities, d_t), dtype=np.float32)
    for i, name in enumerate(kg.entity_names):
        rng = np.random.default_rng(_name_seed(seed, name))
        image[i] = rng.uniform(-1.0, 1.0, d_i)
        text[i] = rng.uniform(-1.0, 1.0, d_t)
    return FeatureStore(image, text, tuple(kg.entity_names))
