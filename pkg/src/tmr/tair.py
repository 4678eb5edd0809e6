"""Entity-independent entity encoder built only from relations and graph topology.

Entities are first initialised from the embeddings of their incident relations
(weighted by correlation with the query relation), then refined by K layers of
query-attentive message passing. No parameter is ever indexed by entity id.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .graph import MultiModalKG


def _uniform(*shape: int, fan: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan)
    return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))


def segment_softmax(scores: torch.Tensor, segment: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Softmax of ``scores`` within groups given by ``segment`` ids."""
    if scores.numel() == 0:
        return scores
    seg_max = torch.full((n_segments,), -math.inf, dtype=scores.dtype).scatter_reduce(
        0, segment, scores, reduce="amax", include_self=True
    )
    ex = torch.exp(scores - seg_max[segment].detach())
    denom = torch.zeros(n_segments, dtype=scores.dtype).index_add(0, segment, ex)
    return ex / denom[segment]


def relation_query_attention(neighbor_relations: torch.Tensor, r_q: int, table: torch.Tensor) -> torch.Tensor:
    """Softmax over ``exp(u_r · u_rq)`` for one entity's incident relations."""
    if len(neighbor_relations) == 0:
        raise ValueError("attention over an empty neighbour set; handle isolated entities first")
    return torch.softmax(table[neighbor_relations] @ table[r_q], dim=0)


def _incident(kg: MultiModalKG):
    """Incident-edge view: (entity, relation, is_outgoing) for every edge end."""
    heads, rels, tails = kg.edge_index
    ent = torch.cat([tails, heads])
    rel = torch.cat([rels, rels])
    out = torch.cat([torch.zeros_like(rels, dtype=torch.bool), torch.ones_like(rels, dtype=torch.bool)])
    return ent, rel, out


def init_entities(
    kg: MultiModalKG, r_q: int, table: torch.Tensor, w_in: torch.Tensor, w_out: torch.Tensor, attentive: bool = True
) -> torch.Tensor:
    """Coarse embeddings ``h^0`` for every entity (zero rows for isolated ones)."""
    n, d = kg.num_entities, table.shape[1]
    ent, rel, is_out = _incident(kg)
    u = table[rel]
    if attentive:
        alpha = segment_softmax(u @ table[r_q], ent, n)
    else:
        alpha = torch.ones(len(ent), dtype=table.dtype)
    proj = torch.where(is_out[:, None], u @ w_out.T, u @ w_in.T)
    total = torch.zeros(n, d, dtype=table.dtype).index_add(0, ent, alpha[:, None] * proj)
    count = torch.zeros(n, dtype=table.dtype).index_add(0, ent, torch.ones(len(ent), dtype=table.dtype))
    return total / count.clamp(min=1.0)[:, None]


def init_entity(
    kg: MultiModalKG, e: int, r_q: int, table: torch.Tensor, w_in: torch.Tensor, w_out: torch.Tensor, attentive: bool = True
) -> torch.Tensor:
    """``h^0`` for a single entity, computed from its adjacency lists."""
    inc = [r for r, _ in kg.incoming(e)]
    out = [r for r, _ in kg.outgoing(e)]
    if not inc and not out:
        return torch.zeros(table.shape[1], dtype=table.dtype)
    rels = torch.tensor(inc + out, dtype=torch.long)
    alpha = relation_query_attention(rels, r_q, table) if attentive else torch.ones(len(rels), dtype=table.dtype)
    u = table[rels]
    terms = torch.cat([u[: len(inc)] @ w_in.T, u[len(inc):] @ w_out.T])
    return (alpha[:, None] * terms).sum(0) / len(rels)


def triplet_attention(
    h_i: torch.Tensor, h_j: torch.Tensor, u_r: torch.Tensor, u_rq: torch.Tensor,
    w_1: torch.Tensor, w_2: torch.Tensor, b: torch.Tensor,
) -> torch.Tensor:
    """Sigmoid gate ``σ(W2 σ(W1 [h_i ⊕ h_j ⊕ u_r ⊕ u_rq]) + b)``; leading dims broadcast."""
    u_rq = u_rq.expand_as(u_r)
    c = torch.sigmoid(torch.cat([h_i, h_j, u_r, u_rq], dim=-1) @ w_1.T)
    return torch.sigmoid(c @ w_2.T + b).squeeze(-1)


def update_relations(table: torch.Tensor, w_r: torch.Tensor) -> torch.Tensor:
    return table @ w_r.T


class TairLayer(nn.Module):
    def __init__(self, d: int, attn_hidden: int | None = None):
        super().__init__()
        a = attn_hidden or d
        self.w_self = _uniform(d, d, fan=d)
        self.w_in = _uniform(d, d, fan=d)
        self.w_out = _uniform(d, d, fan=d)
        self.w_1 = _uniform(a, 4 * d, fan=d)
        self.w_2 = _uniform(1, a, fan=d)
        self.b = _uniform(1, fan=d)
        self.w_r = _uniform(d, d, fan=d)

    def forward(self, kg: MultiModalKG, h: torch.Tensor, table: torch.Tensor, r_q: int, neighbor_state: bool = False) -> torch.Tensor:
        heads, rels, tails = kg.edge_index
        u = table[rels]
        u_rq = table[r_q]
        msg = torch.zeros_like(h)
        # an edge (h, r, t) is outgoing for its head and incoming for its tail
        for center, other, weight in ((heads, tails, self.w_out), (tails, heads, self.w_in)):
            alpha = triplet_attention(h[center], h[other], u, u_rq, self.w_1, self.w_2, self.b)
            state = h[other] if neighbor_state else h[center]
            agg = torch.zeros_like(h).index_add(0, center, alpha[:, None] * state * u)
            msg = msg + agg @ weight.T
        return torch.tanh(h @ self.w_self.T + msg)


def gnn_layer(
    kg: MultiModalKG, h: torch.Tensor, table: torch.Tensor, r_q: int, layer: TairLayer, neighbor_state: bool = False
) -> torch.Tensor:
    return layer(kg, h, table, r_q, neighbor_state)


class TairEncoder(nn.Module):
    """Relation table plus initializer and ``n_layers`` message-passing layers.

    ``n_relations`` counts every relation id the caller will look up,
    including any sentinel such as STOP.
    """

    def __init__(
        self,
        n_relations: int,
        d: int,
        n_layers: int = 3,
        attentive_init: bool = True,
        neighbor_state: bool = False,
        attn_hidden: int | None = None,
    ):
        super().__init__()
        if n_layers < 1:
            raise ValueError("TAIR needs at least one layer")
        self.d = d
        self.attentive_init = attentive_init
        self.neighbor_state = neighbor_state
        self.relation_table = _uniform(n_relations, d, fan=d)
        self.w_in = _uniform(d, d, fan=d)
        self.w_out = _uniform(d, d, fan=d)
        self.layers = nn.ModuleList(TairLayer(d, attn_hidden) for _ in range(n_layers))

    def forward(self, kg: MultiModalKG, r_q: int, n_layers: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Entity states and relation table after ``n_layers`` (default: all) layers."""
        table = self.relation_table
        h = init_entities(kg, r_q, table, self.w_in, self.w_out, self.attentive_init)
        for layer in self.layers[: n_layers or len(self.layers)]:
            h = layer(kg, h, table, r_q, self.neighbor_state)
            table = update_relations(table, layer.w_r)
        return h, table


def encode(kg: MultiModalKG, r_q: int, K: int, encoder: TairEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    if K < 1:
        raise ValueError("K must be >= 1")
    return encoder(kg, r_q, K)
