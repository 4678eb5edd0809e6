"""Adversarial training loop, checkpoints, metrics logging and ablation runs."""

from __future__ import annotations

import copy
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .discriminator import (
    DemoCache,
    Demonstrations,
    Discriminator,
    build_demonstrations,
    adaptive_reward,
    critic_loss_entity,
    critic_loss_relation,
    discriminate_entity,
    discriminate_relation,
    noise_like,
    package,
    tile,
)
from .env import Environment, rollout_batch
from .evaluation import evaluate
from .graph import FeatureStore, MultiModalKG
from .policy import DivergenceError, Reasoner, ReinforceUpdater
from .rules import RuleIndex, mine_rules

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1

VARIANTS: dict[str, dict] = {
    "TMR": {},
    "w/o TAIR": {"tair_on": False},
    "w/o UGAN": {"ugan_on": False},
    "w/o RARL": {"reward_mode": "zero_one", "augmentation_on": False},
    "TMR-R": {"reward_mode": "entity_only"},
    "TMR-E": {"reward_mode": "relation_only"},
    "TMR-AA": {"augmentation_on": False},
}


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainData:
    graph: MultiModalKG
    features: FeatureStore
    train: np.ndarray
    valid: np.ndarray
    known: np.ndarray
    test: np.ndarray | None = None
    # graph the test queries are answered on; defaults to ``graph``
    test_graph: MultiModalKG | None = None
    test_features: FeatureStore | None = None
    pretrained: torch.Tensor | None = None

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64).reshape(-1, 3)
        self.valid = np.asarray(self.valid, dtype=np.int64).reshape(-1, 3)
        if len(self.train) == 0:
            raise ValueError("no training queries")


def without_facts(kg: MultiModalKG, facts: np.ndarray) -> MultiModalKG:
    """Same entity ids, with the given facts and their inverses removed."""
    inv = kg.inverse_of
    f = np.asarray(facts, dtype=np.int64).reshape(-1, 3)
    drop = {tuple(t) for t in f.tolist()} | {(t, int(inv[r]), h) for h, r, t in f.tolist()}
    keep = np.array([tuple(t) not in drop for t in kg.triplets.tolist()], dtype=bool)
    return MultiModalKG(kg.entity_names, kg.relations, kg.triplets[keep])


@dataclass
class EpochStats:
    loss_r: float = 0.0
    loss_e: float = 0.0
    rewards: list = field(default_factory=list)


class Trainer:
    """Policy versus two-level critic; ``critic_steps`` critic updates per policy update."""

    def __init__(self, data: TrainData, cfg: TrainConfig, rules: RuleIndex | None = None, out: str | Path | None = None):
        self.data, self.cfg = data, cfg
        self.out = Path(out) if out else None
        if self.out:
            self.out.mkdir(parents=True, exist_ok=True)
        kg = data.graph
        self.rules = rules if rules is not None else mine_rules(kg, cfg.rule_max_len, cfg.rule_min_support, cfg.rule_min_conf)
        torch.manual_seed(cfg.seed)
        d_pre = 0 if data.pretrained is None else int(data.pretrained.shape[1])
        self.model = Reasoner(kg.num_relations, cfg, d_pre)
        self.disc = Discriminator(kg.num_relations, cfg.d, cfg.N, (cfg.L + 1) * self.model.z_dim, cfg.conv_channels)
        self.updater = ReinforceUpdater(self.model.parameters(), cfg.lr, cfg.baseline_decay, cfg.grad_clip, cfg.optimizer)
        self.critic_opt = torch.optim.Adam(self.disc.parameters(), lr=cfg.critic_lr)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.best: tuple[float, int, dict] | None = None
        self.demo_cache = DemoCache()
        self.history: list[dict] = []
        self._fallback_logged: set[int] = set()

    # -- rewards -------------------------------------------------------------

    def _demonstrations(self, r_q: int) -> Demonstrations | None:
        cfg = self.cfg
        paths = self.demo_cache.get(self.data.graph, r_q, cfg.N, cfg.L, self.data.train, self.rules)
        demo = build_demonstrations(self.disc, paths, r_q, cfg.L, self.data.graph.num_relations)
        if demo is not None and demo.fallback and r_q not in self._fallback_logged:
            self._fallback_logged.add(r_q)
            log.warning("counterfactual filter kept no demonstration for %s; using all %d",
                        self.data.graph.relations.names[r_q], len(demo.paths))
        return demo

    @torch.no_grad()
    def _demo_kappa(self, enc, demo: Demonstrations) -> torch.Tensor:
        """Entity package of the demonstrations: fused features along each replayed path."""
        ents = torch.tensor([p.entities for p in demo.paths], dtype=torch.long)
        st = self.model.start(enc, ents[:, 0], torch.full((len(ents),), demo.r_q, dtype=torch.long))
        zs = [self.model.features(st)]
        for t in range(self.cfg.L):
            st = self.model.advance(enc, st, demo.relations[:, t], ents[:, t + 1])
            zs.append(self.model.features(st))
        return package(torch.stack(zs, 1).flatten(1), self.cfg.N)

    def _critic_and_reward(self, enc, rb, rows: torch.Tensor, demo: Demonstrations, stats: EpochStats) -> torch.Tensor:
        cfg, disc = self.cfg, self.disc
        k = demo.occupied
        kappa_o = self._demo_kappa(enc, demo)
        kappa_p = tile(rb.z[rows].flatten(1), k, cfg.N)
        rel_p = rb.relations[rows]
        for _ in range(cfg.critic_steps):
            nu_o = package(disc.path_embedding(demo.relations), cfg.N)
            nu_p = tile(disc.path_embedding(rel_p), k, cfg.N)
            loss_r = critic_loss_relation(disc, nu_p, nu_o, cfg.lam, self.gen)
            loss_e = critic_loss_entity(disc, kappa_p, kappa_o)
            loss = loss_r + loss_e
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite critic loss (relation {float(loss_r)}, entity {float(loss_e)})")
            self.critic_opt.zero_grad()
            loss.backward()
            self.critic_opt.step()
            stats.loss_r, stats.loss_e = float(loss_r.detach()), float(loss_e.detach())
        with torch.no_grad():
            nu_p = tile(disc.path_embedding(rel_p), k, cfg.N)
            d_r = discriminate_relation(nu_p, disc)
            d_r_noise = discriminate_relation(noise_like(nu_p[0], self.gen), disc)
            d_e = discriminate_entity(kappa_p, disc)
            d_e_noise = discriminate_entity(noise_like(kappa_p[0], self.gen), disc)
            return adaptive_reward(d_r, d_r_noise, d_e, d_e_noise, cfg.alpha, cfg.reward_mode)

    def rewards(self, enc, rb, stats: EpochStats) -> torch.Tensor:
        hit = rb.success().to(rb.log_prob.dtype)
        if self.cfg.reward_mode == "zero_one":
            return hit
        out = hit.clone()
        for r_q in sorted(set(rb.queries.tolist())):
            rows = torch.nonzero(rb.queries == r_q).squeeze(-1)
            demo = self._demonstrations(r_q)
            if demo is None:
                # nothing to imitate for this relation: fall back to the terminal hit reward
                continue
            out[rows] = self._critic_and_reward(enc, rb, rows, demo, stats).to(out.dtype)
        return out

    # -- loop ----------------------------------------------------------------

    def _policy_step(self, batch: np.ndarray, stats: EpochStats) -> None:
        cfg = self.cfg
        q = np.repeat(batch, cfg.rollouts, axis=0)
        kg = without_facts(self.data.graph, batch)
        env = Environment(kg, self.rules, cfg.L, cfg.max_actions, cfg.x, cfg.cap_per_relation, cfg.augmentation_on)
        enc = self.model.encode_graph(kg, self.data.features, sorted(set(q[:, 1].tolist())), self.data.pretrained)
        rb = rollout_batch(self.model, enc, env, q[:, 0], q[:, 1], q[:, 2], self.gen)
        enc_d = _detached(enc)
        reward = self.rewards(enc_d, rb, stats)
        self.updater.step(rb.log_prob, reward)
        stats.rewards.extend(reward.tolist())

    def train_epoch(self) -> dict:
        stats = EpochStats()
        train = self.data.train
        perm = self.rng.permutation(len(train))
        for i in range(0, len(perm), self.cfg.batch_size):
            self._policy_step(train[np.sort(perm[i: i + self.cfg.batch_size])], stats)
        self.epoch += 1
        row = {"epoch": self.epoch, "split": "valid", "mrr": None, "hits1": None, "hits10": None,
               "loss_r": stats.loss_r, "loss_e": stats.loss_e, "mean_reward": float(np.mean(stats.rewards))}
        if len(self.data.valid) and (self.epoch % self.cfg.eval_every == 0 or self.epoch == self.cfg.epochs):
            m = self.evaluate(self.data.valid, self.data.test_graph, self.data.test_features)
            row.update(mrr=m["mrr"], hits1=m["hits1"], hits10=m["hits10"])
            if self.best is None or m["mrr"] > self.best[0]:
                self.best = (m["mrr"], self.epoch, copy.deepcopy(self.model.state_dict()))
        return row

    def fit(self, epochs: int | None = None, log_path: str | Path | None = None) -> list[dict]:
        """Run until ``epochs`` (default: config) total epochs, appending one JSON line per epoch."""
        target = epochs if epochs is not None else self.cfg.epochs
        log_path = Path(log_path) if log_path else (self.out / "metrics.jsonl" if self.out else None)
        last_good = self.snapshot()
        while self.epoch < target:
            try:
                row = self.train_epoch()
            except DivergenceError as exc:
                path = None
                if self.out:
                    path = self.out / "last_good.ckpt"
                    path.write_bytes(last_good)
                raise TrainingDiverged(f"epoch {self.epoch + 1}: {exc}", path) from exc
            self.history.append(row)
            log.info("epoch %d %s", self.epoch, row)
            if log_path:
                with open(log_path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(row) + "\n")
            last_good = self.snapshot()
        if self.out:
            (self.out / "model.ckpt").write_bytes(last_good)
            if self.best is not None:
                current = copy.deepcopy(self.model.state_dict())
                self.model.load_state_dict(self.best[2])
                (self.out / "best.ckpt").write_bytes(self.snapshot())
                self.model.load_state_dict(current)
        return self.history

    def evaluate(self, queries: np.ndarray, kg: MultiModalKG | None = None, features: FeatureStore | None = None) -> dict:
        return evaluate(
            self.model, kg or self.data.graph, features or self.data.features, queries, self.data.known,
            self.rules, self.cfg.beam_width, self.data.pretrained,
        )

    def evaluate_test(self, best: bool = False) -> dict:
        """Test metrics of the current weights, or of the best validation epoch when ``best``."""
        if self.data.test is None:
            raise ValueError("no test queries")
        if not best or self.best is None:
            return self.evaluate(self.data.test, self.data.test_graph, self.data.test_features)
        current = copy.deepcopy(self.model.state_dict())
        self.model.load_state_dict(self.best[2])
        try:
            return self.evaluate(self.data.test, self.data.test_graph, self.data.test_features)
        finally:
            self.model.load_state_dict(current)

    # -- checkpoints -------------------------------------------------------------

    def snapshot(self) -> bytes:
        """Serialize the full training state into one zip container."""
        buf = io.BytesIO()
        state = self.model.state_dict()
        segments = {"tair": {}, "ugan": {}, "policy": {}}
        for k, v in state.items():
            head = k.split(".", 1)[0]
            segments[head if head in ("tair", "ugan") else "policy"][k] = v
        rules_txt = io.StringIO()
        for r in self.rules:
            names = self.data.graph.relations.names
            rules_txt.write(f"{r.confidence!r}\t{r.pos}\t{r.neg}\t{names[r.head]}\t{','.join(names[b] for b in r.body)}\n")
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "epoch": self.epoch,
            "config": self.cfg.to_json(),
            "relations": self.data.graph.relations.names,
            "d_pretrained": self.model.d_pretrained,
            "best_epoch": None if self.best is None else self.best[1],
            "best_mrr": None if self.best is None else self.best[0],
            "segments": ["tair", "ugan", "policy", "discriminator"],
        }
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as z:
            z.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
            for name, seg in segments.items():
                z.writestr(f"{name}.pt", _to_bytes(seg))
            z.writestr("discriminator.pt", _to_bytes(self.disc.state_dict()))
            z.writestr("optim.pt", _to_bytes({"policy": self.updater.state_dict(), "critic": self.critic_opt.state_dict()}))
            z.writestr("rng.pt", _to_bytes({"torch": self.gen.get_state(), "numpy": self.rng.bit_generator.state}))
            z.writestr("rules.tsv", rules_txt.getvalue())
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.snapshot())

    @classmethod
    def resume(cls, path: str | Path, data: TrainData, out: str | Path | None = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; continuing reproduces an uninterrupted run."""
        ck = read_checkpoint(path)
        trainer = cls(data, ck.config, ck.rules, out)
        trainer.model.load_state_dict(ck.model_state)
        trainer.disc.load_state_dict(ck.disc_state)
        trainer.updater.load_state_dict(ck.optim["policy"])
        trainer.critic_opt.load_state_dict(ck.optim["critic"])
        trainer.gen.set_state(ck.rng["torch"])
        trainer.rng.bit_generator.state = ck.rng["numpy"]
        trainer.epoch = ck.manifest["epoch"]
        return trainer


def _to_bytes(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _from_bytes(raw: bytes):
    return torch.load(io.BytesIO(raw), weights_only=False)


def _detached(enc):
    """Encoding copy cut from the policy graph, for critic-side replays."""
    return type(enc)(enc.kg, enc.entity.detach(), enc.relation.detach(), enc.query_index, enc.aux.detach(), enc.pretrained)


@dataclass
class Checkpoint:
    manifest: dict
    config: TrainConfig
    model_state: dict
    disc_state: dict
    optim: dict
    rng: dict
    rules_text: str
    rules: RuleIndex | None = None


def read_checkpoint(path: str | Path, kg: MultiModalKG | None = None) -> Checkpoint:
    with zipfile.ZipFile(path) as z:
        manifest = json.loads(z.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')}")
        state = {}
        for seg in ("tair", "ugan", "policy"):
            state.update(_from_bytes(z.read(f"{seg}.pt")))
        ck = Checkpoint(
            manifest, TrainConfig.from_dict(manifest["config"]), state, _from_bytes(z.read("discriminator.pt")),
            _from_bytes(z.read("optim.pt")), _from_bytes(z.read("rng.pt")), z.read("rules.tsv").decode("utf-8"),
        )
    ids = (kg.relations.ids if kg is not None else {n: i for i, n in enumerate(manifest["relations"])})
    from .rules import Rule

    rules = []
    for line in ck.rules_text.splitlines():
        conf, pos, neg, head, body = line.split("\t")
        rules.append(Rule(tuple(ids[b] for b in body.split(",")), ids[head], float(conf), int(pos), int(neg)))
    ck.rules = RuleIndex(rules)
    return ck


def load_model(path: str | Path, kg: MultiModalKG | None = None) -> tuple[Reasoner, Checkpoint]:
    """Policy network and checkpoint contents; ``kg`` must share the checkpoint's relation vocabulary."""
    ck = read_checkpoint(path, kg)
    if kg is not None and kg.relations.names[: len(ck.manifest["relations"])] != ck.manifest["relations"]:
        raise ValueError("graph relation vocabulary does not match the checkpoint")
    model = Reasoner(len(ck.manifest["relations"]), ck.config, ck.manifest["d_pretrained"])
    model.load_state_dict(ck.model_state)
    return model, ck


def train(data: TrainData, cfg: TrainConfig, out: str | Path | None = None, rules: RuleIndex | None = None) -> Trainer:
    trainer = Trainer(data, cfg, rules, out)
    trainer.fit()
    return trainer


def run_ablation(data: TrainData, cfg: TrainConfig, variants: list[str] | str, out: str | Path | None = None) -> dict[str, dict]:
    """Train the full model plus each variant on the same data; returns name -> test metrics.

    The full TMR row is always included and comes first. Test metrics use the
    weights of the best validation epoch.
    """
    names = [variants] if isinstance(variants, str) else list(variants)
    for v in names:
        if v not in VARIANTS:
            raise KeyError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    rows = {}
    rules = mine_rules(data.graph, cfg.rule_max_len, cfg.rule_min_support, cfg.rule_min_conf)
    for name in ["TMR"] + [v for v in names if v != "TMR"]:
        sub = None if out is None else Path(out) / name.replace("/", "_").replace(" ", "_")
        trainer = train(data, cfg.replace(**VARIANTS[name]), sub, rules)
        m = trainer.evaluate_test(best=True) if data.test is not None else trainer.evaluate(data.valid, data.test_graph, data.test_features)
        rows[name] = {k: m[k] for k in ("mrr", "hits1", "hits10")}
    return rows
