"""Reasoning MDP: states, joint action spaces, transitions, rollouts and beam inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import torch

from .graph import MultiModalKG
from .policy import GraphEncoding, Reasoner, WalkState, gumbel_top_k, sample_action
from .rules import RuleIndex, derive_facts

ORIGINAL, AUGMENTED, STOP = "original", "augmented", "stop"
_KIND_CODE = {ORIGINAL: 0, AUGMENTED: 1, STOP: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


class IllegalActionError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    relation: int
    entity: int
    kind: str = ORIGINAL


@dataclass(frozen=True)
class ReasonerState:
    e_l: int
    e_s: int
    r_q: int
    step: int = 0
    history: tuple[tuple[int, int], ...] = ()


@dataclass
class Trajectory:
    e_s: int
    r_q: int
    target: int | None
    actions: list[Action]
    terminal: int
    log_probs: list[float] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.target is not None and self.terminal == self.target

    @property
    def relations(self) -> list[int]:
        return [a.relation for a in self.actions]


class Environment:
    """Stateless MDP over one graph; augmented actions come from a rule index.

    ``banned`` holds (h, r, t) edges hidden from the agent, such as a training
    query's own fact and its inverse.
    """

    def __init__(
        self,
        kg: MultiModalKG,
        index: RuleIndex | None = None,
        L: int = 3,
        max_actions: int = 200,
        x: int = 3,
        cap_per_relation: int = 10,
        augmentation: bool = True,
        banned: Iterable[tuple[int, int, int]] = (),
    ):
        if L < 1:
            raise ValueError("L must be >= 1")
        if max_actions < 1:
            raise ValueError("max_actions must be >= 1")
        self.kg = kg
        self.index = index if index is not None else RuleIndex()
        self.L = L
        self.max_actions = max_actions
        self.x = x
        self.cap = cap_per_relation
        self.augmentation = augmentation and len(self.index) > 0
        self.banned = frozenset(banned)
        self.stop = kg.num_relations
        self._originals = lru_cache(maxsize=None)(self._originals_uncached)
        self._derived = lru_cache(maxsize=None)(self._derived_uncached)

    @property
    def rule_heads(self) -> list[int]:
        return self.index.heads()

    def start(self, e_s: int, r_q: int) -> ReasonerState:
        self.kg._check(e_s)
        return ReasonerState(e_s, e_s, r_q)

    def _originals_uncached(self, e: int) -> tuple[Action, ...]:
        return tuple(Action(r, t) for r, t in self.kg.outgoing(e) if (e, r, t) not in self.banned)

    def _derived_uncached(self, e: int, r: int) -> tuple[Action, ...]:
        tails = derive_facts(self.kg, e, r, self.index, self.banned)[: self.cap]
        return tuple(Action(r, t, AUGMENTED) for t in tails)

    def action_space(self, state: ReasonerState, aug_relations: Sequence[int] | None = None) -> list[Action]:
        """Originals, then rule-derived actions for ``aug_relations``, then STOP.

        With augmentation on and ``aug_relations`` None, every rule head is used.
        """
        if state.step >= self.L:
            raise IllegalActionError("episode already reached the step budget")
        acts = list(self._originals(state.e_l))
        if self.augmentation:
            rels = self.rule_heads if aug_relations is None else aug_relations
            seen = {(a.relation, a.entity) for a in acts}
            for r in rels:
                for a in self._derived(state.e_l, int(r)):
                    if (a.relation, a.entity) not in seen:
                        seen.add((a.relation, a.entity))
                        acts.append(a)
        acts = acts[: self.max_actions - 1]
        acts.append(Action(self.stop, state.e_l, STOP))
        return acts

    def step(self, state: ReasonerState, action: Action) -> ReasonerState:
        if state.step >= self.L:
            raise IllegalActionError("episode already reached the step budget")
        e = state.e_l
        if action.kind == STOP:
            ok = action.relation == self.stop and action.entity == e
        elif action.kind == ORIGINAL:
            ok = self.kg.has(e, action.relation, action.entity) and (e, action.relation, action.entity) not in self.banned
        elif action.kind == AUGMENTED:
            ok = self.augmentation and action in self._derived(e, action.relation)
        else:
            ok = False
        if not ok:
            raise IllegalActionError(f"{action} is not available at entity {e}")
        return ReasonerState(action.entity, state.e_s, state.r_q, state.step + 1, state.history + ((action.relation, action.entity),))


def replay(env: Environment, e_s: int, r_q: int, actions: Sequence[Action]) -> ReasonerState:
    state = env.start(e_s, r_q)
    for a in actions:
        state = env.step(state, a)
    return state


# -- batched policy rollouts ------------------------------------------------------


@dataclass
class RolloutBatch:
    sources: torch.Tensor
    queries: torch.Tensor
    targets: torch.Tensor | None
    relations: torch.Tensor  # (B, L)
    entities: torch.Tensor  # (B, L + 1), column 0 is the source
    kinds: torch.Tensor  # (B, L) codes: 0 original, 1 augmented, 2 stop
    log_prob: torch.Tensor  # (B,), differentiable
    step_log_probs: torch.Tensor  # (B, L), detached
    z: torch.Tensor  # (B, L + 1, z_dim), detached fused features per visited state

    @property
    def terminal(self) -> torch.Tensor:
        return self.entities[:, -1]

    def success(self) -> torch.Tensor:
        return self.terminal == self.targets

    def trajectories(self) -> list[Trajectory]:
        out = []
        for b in range(len(self.sources)):
            acts = [
                Action(int(r), int(e), _CODE_KIND[int(k)])
                for r, e, k in zip(self.relations[b], self.entities[b, 1:], self.kinds[b])
            ]
            target = None if self.targets is None else int(self.targets[b])
            out.append(Trajectory(int(self.sources[b]), int(self.queries[b]), target, acts, int(self.entities[b, -1]), self.step_log_probs[b].tolist()))
        return out


def _choose_aug_relations(model, enc, env, st, generator, greedy) -> tuple[list[list[int]] | None, torch.Tensor | None]:
    """Per-row augmented relations and the attention weights they were drawn from."""
    if not env.augmentation:
        return None, None
    w = model.relation_attention(enc, st)
    allowed = torch.zeros(w.shape[-1], dtype=torch.bool)
    allowed[env.rule_heads] = True
    k = min(env.x, int(allowed.sum()))
    if greedy:
        keys = w.detach().masked_fill(~allowed, -1.0)
        # stable sort: ties go to the lower relation id
        picked = torch.sort(keys, dim=-1, descending=True, stable=True).indices[:, :k]
    else:
        picked = gumbel_top_k(w.detach(), k, generator, allowed.expand_as(w))
    return picked.tolist(), w


def _pad_actions(spaces: list[list[Action]]):
    a = max(len(s) for s in spaces)
    rel = torch.zeros(len(spaces), a, dtype=torch.long)
    ent = torch.zeros(len(spaces), a, dtype=torch.long)
    kind = torch.zeros(len(spaces), a, dtype=torch.long)
    mask = torch.zeros(len(spaces), a, dtype=torch.bool)
    for b, acts in enumerate(spaces):
        n = len(acts)
        rel[b, :n] = torch.tensor([x.relation for x in acts])
        ent[b, :n] = torch.tensor([x.entity for x in acts])
        kind[b, :n] = torch.tensor([_KIND_CODE[x.kind] for x in acts])
        mask[b, :n] = True
    return rel, ent, kind, mask


def expand(model: Reasoner, enc: GraphEncoding, env: Environment, st: WalkState, states: list[ReasonerState], generator=None, greedy=False):
    """Action tensors and masked log-probabilities for every row of a walk state.

    Returns (rel, ent, kind, mask, logp, z) where ``logp`` already includes
    ``log w[r']`` for augmented actions, so it is the log-probability of taking the
    action including the choice of its relation.
    """
    z = model.features(st)
    aug, w = _choose_aug_relations(model, enc, env, st, generator, greedy)
    spaces = [env.action_space(s, None if aug is None else aug[b]) for b, s in enumerate(states)]
    rel, ent, kind, mask = _pad_actions(spaces)
    logp = model.log_probs(enc, st, z, rel, ent, mask)
    if w is not None:
        is_aug = kind == 1
        rel_w = torch.log(w.gather(1, rel.clamp(max=w.shape[1] - 1)).clamp_min(1e-30))
        logp = logp + torch.where(is_aug & mask, rel_w, torch.zeros_like(logp))
    return rel, ent, kind, mask, logp, z


def rollout_batch(
    model: Reasoner,
    enc: GraphEncoding,
    env: Environment,
    sources: Sequence[int],
    queries: Sequence[int],
    targets: Sequence[int] | None = None,
    generator: torch.Generator | None = None,
    greedy: bool = False,
) -> RolloutBatch:
    """Sample one length-L trajectory per (source, query) row; STOP pads early endings."""
    src = torch.as_tensor(list(sources), dtype=torch.long)
    qry = torch.as_tensor(list(queries), dtype=torch.long)
    st = model.start(enc, src, qry)
    states = [env.start(int(e), int(r)) for e, r in zip(src, qry)]
    rels, ents, kinds, step_lp, zs = [], [src], [], [], []
    total = torch.zeros(len(src), dtype=enc.entity.dtype)
    rows = torch.arange(len(src))
    for _ in range(env.L):
        rel, ent, kind, mask, logp, z = expand(model, enc, env, st, states, generator, greedy)
        idx = sample_action(logp.detach().exp(), generator, greedy)
        lp = logp[rows, idx]
        total = total + lp
        r, e, k = rel[rows, idx], ent[rows, idx], kind[rows, idx]
        states = [
            ReasonerState(int(e[b]), s.e_s, s.r_q, s.step + 1, s.history + ((int(r[b]), int(e[b])),))
            for b, s in enumerate(states)
        ]
        st = model.advance(enc, st, r, e)
        rels.append(r), ents.append(e), kinds.append(k), step_lp.append(lp.detach()), zs.append(z.detach())
    zs.append(model.features(st).detach())
    tgt = None if targets is None else torch.as_tensor(list(targets), dtype=torch.long)
    return RolloutBatch(
        src, qry, tgt, torch.stack(rels, 1), torch.stack(ents, 1), torch.stack(kinds, 1), total,
        torch.stack(step_lp, 1), torch.stack(zs, 1),
    )


def rollout(model, enc, env, e_s: int, r_q: int, target: int | None = None, generator=None, greedy=False) -> Trajectory:
    return rollout_batch(model, enc, env, [e_s], [r_q], None if target is None else [target], generator, greedy).trajectories()[0]


@torch.no_grad()
def beam_infer(model: Reasoner, enc: GraphEncoding, env: Environment, e_s: int, r_q: int, beam_width: int) -> list[tuple[int, float]]:
    """Terminal entities of the top ``beam_width`` paths, deduplicated by best score, best first.

    Ties between equal scores are broken by beam order then action order, so
    the result is deterministic.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    st = model.start(enc, torch.tensor([e_s]), torch.tensor([r_q]))
    states = [env.start(e_s, r_q)]
    scores = torch.zeros(1, dtype=torch.float64)
    for _ in range(env.L):
        rel, ent, kind, mask, logp, _ = expand(model, enc, env, st, states, greedy=True)
        cand = (scores[:, None] + logp.double()).masked_fill(~mask, -float("inf"))
        flat = cand.flatten()
        n = min(beam_width, int(mask.sum()))
        order = torch.sort(flat, descending=True, stable=True).indices[:n]
        beam, col = order // cand.shape[1], order % cand.shape[1]
        r, e = rel[beam, col], ent[beam, col]
        states = [
            ReasonerState(int(e[i]), states[b].e_s, r_q, states[b].step + 1, states[b].history + ((int(r[i]), int(e[i])),))
            for i, b in enumerate(beam.tolist())
        ]
        st = model.advance(enc, st.select(beam), r, e)
        scores = flat[order]
    best: dict[int, float] = {}
    for s, ent_id in zip(scores.tolist(), [s.e_l for s in states]):
        if ent_id not in best:
            best[ent_id] = s
    return sorted(best.items(), key=lambda kv: -kv[1])
