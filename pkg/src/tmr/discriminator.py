"""Demonstration sampling, counterfactual filtering and the two-level discriminator.

Relation-level packages ``ν`` hold one summed relation embedding per path;
entity-level packages ``κ`` hold the fused features of every state a path
visits. Both are fixed-size concatenations over ``N`` slots with zero padding.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .graph import MultiModalKG
from .rules import RuleIndex

log = logging.getLogger(__name__)

_EPS = 1e-7


@dataclass(frozen=True)
class DemoPath:
    relations: tuple[int, ...]
    entities: tuple[int, ...]  # len(relations) + 1, starting at the head

    def sort_key(self):
        return (len(self.relations), self.relations, self.entities)

    def padded(self, L: int, stop: int) -> "DemoPath":
        """STOP self-loops appended until the path has exactly ``L`` steps."""
        k = L - len(self.relations)
        return DemoPath(self.relations + (stop,) * k, self.entities + (self.entities[-1],) * k)


def _simple_paths(kg: MultiModalKG, h: int, t: int, L: int, skip: tuple[int, int, int]) -> list[DemoPath]:
    out = []

    def dfs(e, rels, ents):
        if e == t and rels:
            out.append(DemoPath(tuple(rels), tuple(ents)))
            return
        if len(rels) == L:
            return
        for r, nxt in kg.outgoing(e):
            if (e, r, nxt) == skip or nxt in ents:
                continue
            dfs(nxt, rels + [r], ents + [nxt])

    dfs(h, [], [h])
    return out


def sample_demonstrations(
    kg: MultiModalKG,
    r_q: int,
    N: int = 5,
    L: int = 3,
    facts: np.ndarray | None = None,
    index: RuleIndex | None = None,
) -> list[DemoPath]:
    """The ``N`` shortest alternative paths between the ends of ``r_q`` facts.

    Paths are simple, have at most ``L`` hops and never use the fact's own
    edge. Ties are broken by relation sequence, then entity sequence. With an
    ``index``, paths whose relation sequence is a mined rule body for ``r_q``
    are preferred; if none match, all paths are eligible.
    """
    if N < 1 or L < 1:
        raise ValueError("N and L must be >= 1")
    trip = kg.triplets if facts is None else np.asarray(facts).reshape(-1, 3)
    trip = trip[trip[:, 1] == r_q]
    if len(trip) == 0:
        raise ValueError(f"no facts with relation {r_q}")
    paths: set[DemoPath] = set()
    for h, r, t in trip.tolist():
        paths.update(_simple_paths(kg, h, t, L, (h, r, t)))
    if index is not None:
        bodies = {rule.body for rule in index.rules_for(r_q)}
        ruled = {p for p in paths if p.relations in bodies}
        paths = ruled or paths
    return sorted(paths, key=DemoPath.sort_key)[:N]


class DemoCache:
    """Demonstrations keyed by (graph fingerprint, r_q, N, L), optionally persisted as JSON."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.data: dict[str, list] = {}
        if self.path and self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))

    @staticmethod
    def key(kg: MultiModalKG, r_q: int, N: int, L: int) -> str:
        return f"{kg.fingerprint()}|{kg.relations.names[r_q]}|{N}|{L}"

    def get(self, kg, r_q, N, L, facts=None, index=None) -> list[DemoPath]:
        k = self.key(kg, r_q, N, L)
        if k not in self.data:
            try:
                demos = sample_demonstrations(kg, r_q, N, L, facts, index)
            except ValueError:
                demos = []
            self.data[k] = [[list(p.relations), list(p.entities)] for p in demos]
            if self.path:
                self.path.write_text(json.dumps(self.data, sort_keys=True), encoding="utf-8")
        return [DemoPath(tuple(r), tuple(e)) for r, e in self.data[k]]


# -- discriminator ----------------------------------------------------------------


class Discriminator(nn.Module):
    """Convolutional semantic head, relation-level critic and entity-level classifier.

    ``kappa_dim`` is the per-path width of entity packages.
    """

    def __init__(self, n_relations: int, d: int, N: int, kappa_dim: int, channels: int = 8, stride: int | None = None):
        super().__init__()
        self.d, self.N = d, N
        self.stride = stride or d
        self.relation_table = nn.Parameter(torch.empty(n_relations + 1, d).uniform_(-d ** -0.5, d ** -0.5))
        self.conv = nn.Conv1d(1, channels, kernel_size=d, stride=self.stride)
        windows = (N * d - d) // self.stride + 1
        self.w_1 = nn.Linear(channels * windows, d)
        self.w_2 = nn.Linear(d, d)
        self.w_s1 = nn.Linear(d, d)
        self.w_s2 = nn.Linear(d, 1)
        self.w_e = nn.Linear(N * kappa_dim, 1)
        self.kappa_dim = kappa_dim

    def path_embedding(self, relations: torch.Tensor) -> torch.Tensor:
        """Sum of relation embeddings along each path: (..., L) -> (..., d)."""
        return self.relation_table[relations].sum(-2)

    def semantic(self, mu: torch.Tensor) -> torch.Tensor:
        return conv_semantic(mu, self)

    def relation_score(self, nu: torch.Tensor) -> torch.Tensor:
        return discriminate_relation(nu, self)

    def entity_score(self, kappa: torch.Tensor) -> torch.Tensor:
        return discriminate_entity(kappa, self)


def conv_semantic(mu: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    """``c_1 = W_2 ReLU(W_1 ReLU(Conv(μ, ω)))`` for packages of shape (..., N·d)."""
    lead = mu.shape[:-1]
    x = torch.relu(disc.conv(mu.reshape(-1, 1, mu.shape[-1])))
    x = torch.relu(disc.w_1(x.flatten(1)))
    return disc.w_2(x).reshape(*lead, -1)


def package_query_correlation(c_1: torch.Tensor, u_rq: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid((c_1 * u_rq).sum(-1))


def discriminate_relation(nu: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    c = conv_semantic(nu, disc)
    return torch.sigmoid(disc.w_s2(torch.relu(disc.w_s1(c)))).squeeze(-1)


def discriminate_entity(kappa: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    return torch.sigmoid(disc.w_e(torch.tanh(kappa))).squeeze(-1)


def package(slots: torch.Tensor, N: int) -> torch.Tensor:
    """Concatenate up to ``N`` slot vectors (k, w) into one (N·w,) package, zero padded."""
    k, w = slots.shape
    if k > N:
        raise ValueError(f"{k} paths do not fit in {N} slots")
    return torch.cat([slots, slots.new_zeros(N - k, w)]).reshape(-1)


def tile(rows: torch.Tensor, occupied: int, N: int) -> torch.Tensor:
    """Per-row packages with each row repeated in the first ``occupied`` slots: (B, w) -> (B, N·w)."""
    B, w = rows.shape
    slots = rows[:, None, :].expand(B, occupied, w)
    return torch.cat([slots, rows.new_zeros(B, N - occupied, w)], 1).reshape(B, -1)


@dataclass
class FilterResult:
    kept: list[int]
    fallback: bool
    t_full: float
    t_without: list[float]


def counterfactual_filter(slots: torch.Tensor, u_rq: torch.Tensor, disc: Discriminator) -> FilterResult:
    """Leave-one-out filtering of path slots (k, d) by their effect on query correlation.

    A path is kept when zeroing its slot strictly lowers the correlation score.
    If nothing survives, every path is kept and ``fallback`` is set.
    """
    k = slots.shape[0]
    if k == 0:
        raise ValueError("counterfactual filtering needs at least one path")
    with torch.no_grad():
        full = package(slots, disc.N)
        variants = [full]
        for i in range(k):
            s = slots.clone()
            s[i] = 0
            variants.append(package(s, disc.N))
        t = package_query_correlation(conv_semantic(torch.stack(variants), disc), u_rq)
    t_full, t_wo = float(t[0]), t[1:].tolist()
    kept = [i for i in range(k) if t_full - t_wo[i] > 0]
    if not kept:
        log.debug("counterfactual filter removed every demonstration; keeping all %d", k)
        return FilterResult(list(range(k)), True, t_full, t_wo)
    return FilterResult(kept, False, t_full, t_wo)


# -- rewards and critic losses --------------------------------------------------------


def adaptive_reward(
    d_rel: torch.Tensor,
    d_rel_noise: torch.Tensor,
    d_ent: torch.Tensor,
    d_ent_noise: torch.Tensor,
    alpha: float,
    mode: str = "adaptive",
) -> torch.Tensor:
    """``α R_e + (1 − α) R_r`` with ``R_x = max(D(x) − D(noise), 0)``.

    ``relation_only`` and ``entity_only`` return a single level.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    r_r = torch.clamp(d_rel - d_rel_noise, min=0.0)
    r_e = torch.clamp(d_ent - d_ent_noise, min=0.0)
    if mode == "relation_only":
        return r_r
    if mode == "entity_only":
        return r_e
    return alpha * r_e + (1 - alpha) * r_r


def gradient_penalty(disc: Discriminator, nu_p: torch.Tensor, nu_omega: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean of ``(‖∇D(p̂)‖₂ − 1)²`` at ``p̂ = ε ν_P + (1 − ε) ν_Ω``."""
    p_hat = (eps[:, None] * nu_p + (1 - eps[:, None]) * nu_omega).detach().requires_grad_(True)
    score = discriminate_relation(p_hat, disc)
    (grad,) = torch.autograd.grad(score.sum(), p_hat, create_graph=True)
    return ((grad.norm(dim=-1) - 1) ** 2).mean()


def critic_loss_relation(
    disc: Discriminator, nu_p: torch.Tensor, nu_omega: torch.Tensor, lam: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """``D(ν_P) − D(ν_Ω) + λ (‖∇D(p̂)‖₂ − 1)²`` averaged over the batch."""
    nu_omega = nu_omega.expand_as(nu_p)
    diff = discriminate_relation(nu_p, disc).mean() - discriminate_relation(nu_omega, disc).mean()
    if lam == 0:
        return diff
    eps = torch.rand(nu_p.shape[0], generator=generator, dtype=nu_p.dtype)
    return diff + lam * gradient_penalty(disc, nu_p, nu_omega, eps)


def entity_bce(d_omega: torch.Tensor, d_p: torch.Tensor) -> torch.Tensor:
    d_omega = d_omega.clamp(_EPS, 1 - _EPS)
    d_p = d_p.clamp(_EPS, 1 - _EPS)
    return -(torch.log(d_omega) + torch.log(1 - d_p))


def critic_loss_entity(disc: Discriminator, kappa_p: torch.Tensor, kappa_omega: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy with demonstrations as positives, averaged over the batch."""
    d_p = discriminate_entity(kappa_p, disc)
    d_o = discriminate_entity(kappa_omega, disc).expand_as(d_p)
    return entity_bce(d_o, d_p).mean()


def noise_like(x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    return torch.rand(x.shape, generator=generator, dtype=x.dtype)


@dataclass
class Demonstrations:
    """Filtered demonstrations of one query relation, ready for packaging."""

    r_q: int
    paths: list[DemoPath]  # Ω, padded to L steps
    relations: torch.Tensor  # (N', L)
    fallback: bool

    @property
    def occupied(self) -> int:
        return len(self.paths)


def build_demonstrations(disc: Discriminator, paths: Sequence[DemoPath], r_q: int, L: int, stop: int) -> Demonstrations | None:
    """Pad, embed and counterfactually filter a demonstration set; None when empty."""
    if not paths:
        return None
    padded = [p.padded(L, stop) for p in paths]
    rels = torch.tensor([p.relations for p in padded], dtype=torch.long)
    res = counterfactual_filter(disc.path_embedding(rels).detach(), disc.relation_table[r_q].detach(), disc)
    return Demonstrations(r_q, [padded[i] for i in res.kept], rels[res.kept], res.fallback)
