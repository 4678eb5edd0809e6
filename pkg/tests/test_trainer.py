import json
import zipfile

import numpy as np
import pytest
import torch

from tmr.config import ConfigError, TrainConfig, desk_config
from tmr.datasets import PlantedRule, holdout_queries, make_planted_mkg
from tmr.graph import synth_features
from tmr.policy import DivergenceError
from tmr.trainer import (
    VARIANTS,
    EpochStats,
    TrainData,
    Trainer,
    TrainingDiverged,
    load_model,
    read_checkpoint,
    run_ablation,
    train,
    without_facts,
)


def _data(seed=0):
    pg = make_planted_mkg(60, 4, [PlantedRule((1, 2), 0, 20)], noise_triplets=4, seed=seed)
    qs = holdout_queries(pg.kg, pg.head_facts[0], seed)
    feats = synth_features(qs.graph, seed, 8, 8)
    return TrainData(qs.graph, feats, qs.train, qs.valid, qs.known, qs.test)


def _cfg(**kw):
    base = dict(epochs=2, batch_size=8, rollouts=2, beam_width=4, critic_steps=2)
    base.update(kw)
    return desk_config(**base)


def test_config_defaults_and_validation(tmp_path):
    cfg = TrainConfig()
    assert (cfg.L, cfg.N, cfg.x, cfg.alpha, cfg.lam, cfg.critic_steps, cfg.tair_layers) == (3, 5, 3, 0.4, 10.0, 5, 3)
    assert (cfg.d, cfg.d_s, cfg.d_t, cfg.d_i) == (200, 200, 1000, 4096)
    with pytest.raises(ConfigError, match="alpha"):
        TrainConfig(alpha=2.0)
    with pytest.raises(ConfigError, match="reward_mode"):
        TrainConfig(reward_mode="other")
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_cfg().to_json()))
    assert TrainConfig.load(p) == _cfg()
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        TrainConfig.load(p)


def test_variant_switches():
    assert VARIANTS["TMR-AA"] == {"augmentation_on": False}
    assert VARIANTS["TMR-R"] == {"reward_mode": "entity_only"}
    assert VARIANTS["TMR-E"] == {"reward_mode": "relation_only"}
    assert VARIANTS["w/o RARL"]["reward_mode"] == "zero_one"
    assert VARIANTS["w/o TAIR"] == {"tair_on": False} and VARIANTS["w/o UGAN"] == {"ugan_on": False}


def test_without_facts_keeps_ids():
    data = _data()
    kg = data.graph
    batch = data.train[:3]
    masked = without_facts(kg, batch)
    assert masked.entity_names == kg.entity_names
    assert len(masked.triplets) == len(kg.triplets) - 6
    for h, r, t in batch.tolist():
        assert not masked.has(h, r, t) and not masked.has(t, int(kg.inverse_of[r]), h)


@pytest.mark.parametrize("mode", ["adaptive", "zero_one", "relation_only", "entity_only"])
def test_reward_ranges(mode):
    data = _data()
    tr = Trainer(data, _cfg(reward_mode=mode))
    stats = EpochStats()
    tr._policy_step(data.train[:8], stats)
    r = np.array(stats.rewards)
    assert len(r) == 16
    if mode == "zero_one":
        assert set(r.tolist()) <= {0.0, 1.0}
    else:
        assert tr._demonstrations(int(data.train[0, 1])) is not None
        assert np.all((r >= 0) & (r < 1))


def test_fit_logs_and_is_deterministic(tmp_path):
    data = _data()
    a = train(data, _cfg(), tmp_path / "a")
    b = train(data, _cfg(), tmp_path / "b")
    log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert log_a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rows = [json.loads(line) for line in log_a.decode().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"epoch", "split", "mrr", "hits1", "hits10", "loss_r", "loss_e", "mean_reward"}
    for name in ("model.ckpt", "best.ckpt"):
        assert (tmp_path / "a" / name).exists()
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_resume_matches_uninterrupted_run(tmp_path):
    data = _data(1)
    full = Trainer(data, _cfg(epochs=3))
    full.fit()
    part = Trainer(data, _cfg(epochs=3))
    part.fit(1)
    part.save(tmp_path / "mid.ckpt")
    resumed = Trainer.resume(tmp_path / "mid.ckpt", data)
    assert resumed.epoch == 1
    resumed.fit()
    assert resumed.history == full.history[1:]
    sf, sr = full.model.state_dict(), resumed.model.state_dict()
    assert all(torch.equal(sf[k], sr[k]) for k in sf)
    df, dr = full.disc.state_dict(), resumed.disc.state_dict()
    assert all(torch.equal(df[k], dr[k]) for k in df)


def test_checkpoint_layout_and_model_loading(tmp_path):
    data = _data()
    tr = Trainer(data, _cfg(epochs=1))
    tr.fit()
    tr.save(tmp_path / "m.ckpt")
    with zipfile.ZipFile(tmp_path / "m.ckpt") as z:
        names = set(z.namelist())
        manifest = json.loads(z.read("manifest.json"))
    assert {"manifest.json", "tair.pt", "ugan.pt", "policy.pt", "discriminator.pt", "optim.pt", "rng.pt", "rules.tsv"} <= names
    assert manifest["epoch"] == 1 and manifest["relations"] == data.graph.relations.names
    ck = read_checkpoint(tmp_path / "m.ckpt", data.graph)
    assert list(ck.rules) == list(tr.rules)
    model, _ = load_model(tmp_path / "m.ckpt", data.graph)
    a = tr.evaluate(data.valid)
    from tmr.evaluation import evaluate

    b = evaluate(model, data.graph, data.features, data.valid, data.known, ck.rules, tr.cfg.beam_width)
    assert a["ranks"] == b["ranks"]


def test_divergence_writes_last_good_checkpoint(tmp_path, monkeypatch):
    data = _data()
    tr = Trainer(data, _cfg(epochs=3), out=tmp_path)
    tr.fit(1)

    def boom(*_):
        raise DivergenceError("non-finite policy gradient")

    monkeypatch.setattr(tr.updater, "step", boom)
    with pytest.raises(TrainingDiverged) as info:
        tr.fit()
    assert info.value.checkpoint == tmp_path / "last_good.ckpt"
    assert read_checkpoint(info.value.checkpoint).manifest["epoch"] == 1


def test_best_epoch_evaluation_restores_weights():
    data = _data()
    tr = Trainer(data, _cfg(epochs=2))
    tr.fit()
    before = {k: v.clone() for k, v in tr.model.state_dict().items()}
    tr.evaluate_test(best=True)
    assert all(torch.equal(before[k], v) for k, v in tr.model.state_dict().items())


def test_ablation_table_has_baseline_row():
    data = _data()
    rows = run_ablation(data, _cfg(epochs=1), ["TMR-AA"])
    assert list(rows) == ["TMR", "TMR-AA"]
    assert all(0 <= r["mrr"] <= 1 for r in rows.values())
    with pytest.raises(KeyError):
        run_ablation(data, _cfg(epochs=1), ["nope"])
