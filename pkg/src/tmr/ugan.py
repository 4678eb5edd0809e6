"""Gated bilinear fusion of context features with multi-modal auxiliary features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


def _uniform(*shape: int, fan: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan)
    return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))


class HistoryEncoder(nn.Module):
    """LSTM over the interleaved path tokens e_s, r_0, e_1, r_1, ..., e_l."""

    def __init__(self, d_in: int, d_s: int):
        super().__init__()
        self.cell = nn.LSTMCell(d_in, d_s)
        self.d_s = d_s

    def start(self, source: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        zeros = source.new_zeros(source.shape[0], self.d_s)
        return self.cell(source, (zeros, zeros))

    def advance(self, state, relation: torch.Tensor, entity: torch.Tensor):
        return self.cell(entity, self.cell(relation, state))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Final hidden state for token sequences of shape (batch, steps, d_in)."""
        state = self.start(tokens[:, 0])
        for t in range(1, tokens.shape[1]):
            state = self.cell(tokens[:, t], state)
        return state[0]


def encode_history(encoder: HistoryEncoder, tokens: torch.Tensor) -> torch.Tensor:
    """History vector b_l for one prefix given as (steps, d_in) token embeddings."""
    return encoder(tokens[None])[0]


@dataclass
class FusionParts:
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    b_l: torch.Tensor
    b_r: torch.Tensor
    gate: torch.Tensor
    g_s: torch.Tensor
    v_hat: torch.Tensor


class UGAN(nn.Module):
    """Attention fusion followed by the irrelevance-filtration gate.

    Inputs are row groups ``X`` (m, d_x) and ``Y`` (m, d_y), optionally with
    leading batch dimensions; the output ``Z`` has shape (..., m, j).
    """

    def __init__(self, d_x: int, d_y: int, d: int, j: int):
        super().__init__()
        self.w_q = _uniform(d_x, d, fan=d_x)
        self.w_k = _uniform(d_y, d, fan=d_y)
        self.w_v = _uniform(d_y, d, fan=d_y)
        self.w_kl = _uniform(d, j, fan=d)
        self.w_ql = _uniform(d, j, fan=d)
        self.w_vr = _uniform(d, j, fan=d)
        self.w_qr = _uniform(d, j, fan=d)
        self.w_m = _uniform(j, d, fan=j)
        self.w_gl = _uniform(d, 1, fan=d)
        self.j = j

    def parts(self, x: torch.Tensor, y: torch.Tensor) -> FusionParts:
        if x.shape[-2] != y.shape[-2]:
            raise ValueError(f"X has {x.shape[-2]} rows but Y has {y.shape[-2]}")
        q, k, v = x @ self.w_q, y @ self.w_k, y @ self.w_v
        b_l = (k @ self.w_kl) * (q @ self.w_ql)
        b_r = (v @ self.w_vr) * (q @ self.w_qr)
        gate = torch.sigmoid(b_l @ self.w_m)
        # (m, d) x (d, m) attention map between gated keys and gated queries
        g_s = torch.softmax((gate * k) @ ((1 - gate) * q).transpose(-1, -2), dim=-1)
        weight = (g_s @ k) @ self.w_gl
        v_hat = weight * b_r
        return FusionParts(q, k, v, b_l, b_r, gate, g_s, v_hat)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        p = self.parts(x, y)
        return irrelevance_filtration(p.b_r, p.v_hat)


def attention_fusion(x: torch.Tensor, y: torch.Tensor, ugan: UGAN) -> tuple[torch.Tensor, torch.Tensor]:
    """Attended features ``V̂`` and the value-side bilinear map ``B^r``."""
    p = ugan.parts(x, y)
    return p.v_hat, p.b_r


def irrelevance_filtration(b_r: torch.Tensor, v_hat: torch.Tensor) -> torch.Tensor:
    u = b_r * v_hat
    return torch.sigmoid(u) * u


class AuxProjector(nn.Module):
    """Maps raw text and image vectors to one auxiliary row ``[f_t W_t ; f_i W_i]``."""

    def __init__(self, d_t: int, d_i: int, d_x: int):
        super().__init__()
        if d_x % 2:
            raise ValueError("d_x must be even: text and image each take half")
        self.w_t = _uniform(d_t, d_x // 2, fan=d_t)
        self.w_i = _uniform(d_i, d_x // 2, fan=d_i)

    def forward(self, text: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        return torch.cat([text @ self.w_t, image @ self.w_i], dim=-1)


def fuse(ugan: UGAN | None, aux_rows: torch.Tensor, context_rows: torch.Tensor) -> torch.Tensor:
    """Complementary feature of the last row; plain concatenation when ``ugan`` is None."""
    if ugan is None:
        return torch.cat([context_rows[..., -1, :], aux_rows[..., -1, :]], dim=-1)
    return ugan(aux_rows, context_rows)[..., -1, :]
