"""Policy network: state features, action scoring, sampling and REINFORCE updates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .config import TrainConfig
from .graph import FeatureStore, MultiModalKG
from .tair import TairEncoder
from .ugan import UGAN, AuxProjector, HistoryEncoder, fuse


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class GraphEncoding:
    """Per-batch encodings of one graph under each query relation in play."""

    kg: MultiModalKG
    entity: torch.Tensor  # (Q, E, d)
    relation: torch.Tensor  # (Q, R + 1, d), last row is STOP
    query_index: dict[int, int]
    aux: torch.Tensor  # (E, d_x)
    pretrained: torch.Tensor | None = None

    def rows(self, r_q: torch.Tensor) -> torch.Tensor:
        return torch.tensor([self.query_index[int(r)] for r in r_q.tolist()], dtype=torch.long)


@dataclass
class WalkState:
    """Batched walk state; one row per episode."""

    source: torch.Tensor
    query: torch.Tensor
    qrow: torch.Tensor
    entity: torch.Tensor
    lstm: tuple[torch.Tensor, torch.Tensor]
    context: torch.Tensor  # (B, l + 1, d_y)
    aux: torch.Tensor  # (B, l + 1, d_x)
    step: int = 0

    def select(self, idx: torch.Tensor) -> "WalkState":
        return WalkState(
            self.source[idx], self.query[idx], self.qrow[idx], self.entity[idx],
            (self.lstm[0][idx], self.lstm[1][idx]), self.context[idx], self.aux[idx], self.step,
        )


class Reasoner(nn.Module):
    """Policy over (relation, entity) actions conditioned on fused multi-modal features.

    ``n_relations`` is the graph's relation count; one extra id is reserved for STOP.
    """

    def __init__(self, n_relations: int, cfg: TrainConfig, d_pretrained: int = 0):
        super().__init__()
        d, d_s, d_x, j = cfg.d, cfg.d_s, cfg.dx, cfg.jj
        self.n_relations = n_relations
        self.stop = n_relations
        self.cfg = cfg
        self.d = d
        self.d_pretrained = d_pretrained
        if cfg.tair_on:
            self.tair = TairEncoder(n_relations + 1, d, cfg.tair_layers, neighbor_state=cfg.neighbor_state)
        else:
            self.tair = None
            self.relation_table = nn.Parameter(torch.empty(n_relations + 1, d).uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d)))
            self.entity_proj = nn.Linear(d_x, d, bias=False)
        self.aux_proj = AuxProjector(cfg.d_t, cfg.d_i, d_x)
        self.history = HistoryEncoder(d, d_s)
        self.d_y = d_s + 2 * d + d_pretrained
        self.ugan = UGAN(d_x, self.d_y, d, j) if cfg.ugan_on else None
        self.z_dim = j if cfg.ugan_on else self.d_y + d_x
        self.w = nn.Linear(self.z_dim, 2 * d, bias=False)
        self.selector = nn.Sequential(nn.Linear(self.d_y, d), nn.Tanh(), nn.Linear(d, d))

    # -- graph level -------------------------------------------------------

    def encode_graph(
        self, kg: MultiModalKG, features: FeatureStore, query_relations: Sequence[int], pretrained: torch.Tensor | None = None
    ) -> GraphEncoding:
        dtype = self.w.weight.dtype
        image, text = features.tensors(dtype)
        aux = self.aux_proj(text, image)
        rels = sorted({int(r) for r in query_relations})
        if self.tair is not None:
            encoded = [self.tair(kg, r) for r in rels]
            ent = torch.stack([e for e, _ in encoded])
            rel = torch.stack([t for _, t in encoded])
        else:
            ent = self.entity_proj(aux)[None].expand(len(rels), -1, -1)
            rel = self.relation_table[None].expand(len(rels), -1, -1)
        if self.d_pretrained and pretrained is None:
            raise ValueError("this model was built with a pretrained entity table; pass it in")
        return GraphEncoding(kg, ent, rel, {r: i for i, r in enumerate(rels)}, aux, pretrained)

    # -- walk level --------------------------------------------------------

    def _context_row(self, enc: GraphEncoding, st_qrow, query, entity, h) -> torch.Tensor:
        parts = [h, enc.entity[st_qrow, entity], enc.relation[st_qrow, query]]
        if enc.pretrained is not None and self.d_pretrained:
            parts.append(enc.pretrained[entity].to(h.dtype))
        return torch.cat(parts, dim=-1)

    def start(self, enc: GraphEncoding, source: torch.Tensor, query: torch.Tensor) -> WalkState:
        source = torch.as_tensor(source, dtype=torch.long)
        query = torch.as_tensor(query, dtype=torch.long)
        qrow = enc.rows(query)
        lstm = self.history.start(enc.entity[qrow, source])
        ctx = self._context_row(enc, qrow, query, source, lstm[0])
        return WalkState(source, query, qrow, source, lstm, ctx[:, None], enc.aux[source][:, None], 0)

    def advance(self, enc: GraphEncoding, st: WalkState, relation: torch.Tensor, entity: torch.Tensor) -> WalkState:
        relation = torch.as_tensor(relation, dtype=torch.long)
        entity = torch.as_tensor(entity, dtype=torch.long)
        lstm = self.history.advance(st.lstm, enc.relation[st.qrow, relation], enc.entity[st.qrow, entity])
        ctx = self._context_row(enc, st.qrow, st.query, entity, lstm[0])
        return WalkState(
            st.source, st.query, st.qrow, entity, lstm,
            torch.cat([st.context, ctx[:, None]], 1), torch.cat([st.aux, enc.aux[entity][:, None]], 1), st.step + 1,
        )

    def features(self, st: WalkState) -> torch.Tensor:
        """Complementary feature Z of each row's current state."""
        return fuse(self.ugan, st.aux, st.context)

    def relation_attention(self, enc: GraphEncoding, st: WalkState) -> torch.Tensor:
        """Attention over real relations (STOP excluded) for picking augmented relations."""
        query = self.selector(st.context[:, -1])
        table = enc.relation[st.qrow, : self.n_relations]
        return torch.softmax(torch.einsum("brd,bd->br", table, query), dim=-1)

    def action_embeddings(self, enc: GraphEncoding, st: WalkState, rel: torch.Tensor, ent: torch.Tensor) -> torch.Tensor:
        q = st.qrow[:, None].expand_as(rel)
        return torch.cat([enc.relation[q, rel], enc.entity[q, ent]], dim=-1)

    def log_probs(self, enc, st, z, rel, ent, mask) -> torch.Tensor:
        """Masked log-softmax over each row's padded action list."""
        return score_actions(z, self.action_embeddings(enc, st, rel, ent), self.w.weight, mask, log=True)


def score_actions(
    z: torch.Tensor, actions: torch.Tensor, w: torch.Tensor, mask: torch.Tensor | None = None, log: bool = False
) -> torch.Tensor:
    """``softmax(A · (W ReLU(Z)))`` over the action axis.

    ``z`` is (..., z_dim), ``actions`` is (..., A, a_dim) and ``w`` is (a_dim, z_dim).
    """
    query = torch.relu(z) @ w.T
    logits = (actions @ query[..., None]).squeeze(-1)
    if mask is not None:
        logits = logits.masked_fill(~mask, -math.inf)
    return torch.log_softmax(logits, -1) if log else torch.softmax(logits, -1)


def sample_action(probs: torch.Tensor, generator: torch.Generator | None = None, greedy: bool = False) -> torch.Tensor:
    """Categorical draw per row, or argmax with the lowest index winning ties."""
    if greedy:
        return torch.argmax(probs, dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


def gumbel_top_k(weights: torch.Tensor, k: int, generator: torch.Generator, allowed: torch.Tensor | None = None) -> torch.Tensor:
    """Sample ``k`` distinct indices per row without replacement, proportional to ``weights``."""
    u = torch.rand(weights.shape, generator=generator, dtype=weights.dtype).clamp_(1e-12, 1 - 1e-12)
    keys = torch.log(weights.clamp_min(1e-30)) - torch.log(-torch.log(u))
    if allowed is not None:
        keys = keys.masked_fill(~allowed, -math.inf)
    return torch.topk(keys, k, dim=-1).indices


class ReinforceUpdater:
    """REINFORCE with a moving-average baseline, gradient clipping and SGD (or Adam)."""

    def __init__(self, params, lr: float, decay: float = 0.95, clip: float = 5.0, optimizer: str = "sgd"):
        self.params = [p for p in params if p.requires_grad]
        opt = torch.optim.SGD if optimizer == "sgd" else torch.optim.Adam
        self.optimizer = opt(self.params, lr=lr)
        self.decay = decay
        self.clip = clip
        self.baseline: float | None = None

    def step(self, log_probs: torch.Tensor, rewards: torch.Tensor) -> float:
        """One ascent step on ``mean((R - b) * sum_t log π)``; returns the surrogate loss."""
        rewards = rewards.detach().to(log_probs.dtype)
        if not torch.isfinite(rewards).all():
            raise DivergenceError("non-finite reward")
        b = self.baseline if self.baseline is not None else float(rewards.mean())
        loss = -((rewards - b) * log_probs).mean()
        self.optimizer.zero_grad()
        loss.backward()
        grads = [p.grad for p in self.params if p.grad is not None]
        if any(not torch.isfinite(g).all() for g in grads):
            raise DivergenceError(f"non-finite policy gradient (loss={float(loss)})")
        if self.clip:
            torch.nn.utils.clip_grad_norm_(self.params, self.clip)
        self.optimizer.step()
        mean = float(rewards.mean())
        self.baseline = mean if self.baseline is None else self.decay * self.baseline + (1 - self.decay) * mean
        return float(loss.detach())

    def state_dict(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(), "baseline": self.baseline}

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.baseline = state["baseline"]


def reinforce_update(updater: ReinforceUpdater, log_probs: torch.Tensor, rewards: torch.Tensor) -> float:
    return updater.step(log_probs, rewards)
