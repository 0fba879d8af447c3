import json

import pytest

from robustfusion import harness
from robustfusion.corruption import CorruptionSpec, benchmark_ladder
from robustfusion.detector import TrainSchedule
from robustfusion.harness import (
    ConfigError, DatasetConfig, ExperimentConfig, ResultRow, ResultStore, load_config, load_results,
    run_experiment, save_config, toy_config,
)

TINY = dict(
    dataset=DatasetConfig(train_frames=8, eval_frames=4),
    schedule=TrainSchedule(epochs=1, lr_stages=((1, 1e-3),), pretrain_epochs=1, batch_size=4),
)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    cfg = toy_config(str(out), **TINY)
    return cfg, run_experiment(cfg)


class TestRunExperiment:
    def test_coverage(self, tiny_run):
        cfg, res = tiny_run
        n_models = (len(cfg.variants) + len(cfg.augmented)) * len(cfg.seeds)
        assert len(res.rows) == n_models * (1 + len(cfg.ladder))
        assert not res.failures and res.trained == n_models

    def test_baseline_delta_is_zero(self, tiny_run):
        for r in tiny_run[1].rows:
            if r.corruption == "none":
                assert r.delta_map == 0.0 or (r.delta_map is None and r.map == 0.0)

    def test_metric_ranges(self, tiny_run):
        for r in tiny_run[1].rows:
            assert 0 <= r.map <= 1 and 0 <= r.nds <= 1 and r.ate >= 0 and 0 <= r.ase <= 1 and r.runtime >= 0

    def test_rerun_is_cached(self, tiny_run):
        cfg, first = tiny_run
        again = run_experiment(cfg)
        assert again.trained == 0 and again.evaluated == 0
        assert [r.metrics() for r in again.rows] == [r.metrics() for r in first.rows]

    def test_persisted_outputs(self, tiny_run):
        cfg, res = tiny_run
        out = res.output_dir
        assert load_config(out / "config.json") == cfg
        assert [r.metrics() for r in load_results(out)] == [r.metrics() for r in res.rows]
        header = (out / "results.csv").read_text().splitlines()[0]
        assert header.startswith("variant,corruption,severity,seed,map,nds")

    def test_bitwise_deterministic(self, tiny_run, tmp_path):
        cfg, first = tiny_run
        other = run_experiment(cfg.replace(output_dir=str(tmp_path)))
        assert [r.metrics() for r in other.rows] == [r.metrics() for r in first.rows]

    def test_extending_ladder_reuses_models(self, tiny_run):
        cfg, _ = tiny_run
        wider = cfg.replace(ladder=cfg.ladder + (CorruptionSpec.misalign(0.1, 0.0),))
        res = run_experiment(wider)
        assert res.trained == 0 and res.evaluated == len(wider.variants)


def test_empty_ladder_baseline_only(tmp_path):
    cfg = toy_config(str(tmp_path), ladder=(), variants=("conv",), **TINY)
    res = run_experiment(cfg)
    assert [(r.variant, r.corruption) for r in res.rows] == [("conv", "none")]


def test_training_failure_recorded(tmp_path, monkeypatch):
    real = harness.train

    def flaky(frames, variant, *a, **kw):
        if variant == "concat":
            raise FloatingPointError("boom")
        return real(frames, variant, *a, **kw)

    monkeypatch.setattr(harness, "train", flaky)
    res = run_experiment(toy_config(str(tmp_path), **TINY))
    bad = [r for r in res.rows if not r.ok]
    assert len(bad) == 4 and all(r.variant == "concat" and "boom" in r.error for r in bad)
    assert all(r.ok for r in res.rows if r.variant == "conv_se")


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig()
        save_config(tmp_path / "c.json", cfg)
        assert load_config(tmp_path / "c.json") == cfg
        assert cfg.ladder == tuple(benchmark_ladder())
        assert cfg.variants[0] == "concat" and cfg.augmented == ("conv_ed_se",)

    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.dataset.train_frames, cfg.dataset.eval_frames, cfg.seeds) == (200, 60, (0, 1, 2))

    def test_table_names_resolve(self):
        assert ExperimentConfig(variants=("Convolution with SE-block",)).variants == ("conv_se",)

    @pytest.mark.parametrize("kw", [dict(seeds=()), dict(variants=("conv", "conv")), dict(variants=(), augmented=()),
                                    dict(ladder=(CorruptionSpec.layers(64),)), dict(ladder=(CorruptionSpec.none(),))])
    def test_invalid(self, kw):
        with pytest.raises((ConfigError, ValueError)):
            ExperimentConfig(**kw)

    def test_schema_version_and_unknown_keys(self, tmp_path):
        d = ExperimentConfig().to_dict()
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**d, "schema_version": 99})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**d, "colour": "red"})
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**ExperimentConfig().to_dict(), "variants": ["attention"]})


def test_result_store_last_wins(tmp_path):
    store = ResultStore(tmp_path / "r.jsonl")
    row = ResultRow("conv", "none", "none", 0, 0.5, 0.4, 0.1, 0.1, 0.1, 0.0, 1.0, "abc")
    store.append([row])
    store.append([ResultRow("conv", "none", "none", 0, 0.6, 0.4, 0.1, 0.1, 0.1, 0.0, 1.0, "abc")])
    assert store.load()["abc"].map == 0.6
    assert len((tmp_path / "r.jsonl").read_text().splitlines()) == 2
    assert json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0])["map"] == 0.5
