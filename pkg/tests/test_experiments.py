import json

import numpy as np
import pytest

from seqkd.corpus import split_leave_one_out
from seqkd.distill import DistillConfig
from seqkd.errors import ParameterError
from seqkd.experiments import PipelineConfig, apply_axis, run_pipeline, stability_experiment, sweep
from seqkd.model import ModelConfig, init_params
from seqkd.synthetic import markov_sequences, sequences_to_interactions
from seqkd.train import TrainConfig, train

SMALL = ModelConfig(num_layers=1, hidden_dim=8, num_heads=2, dropout_rate=0.1)
TEACHER = ModelConfig(num_layers=1, hidden_dim=16, num_heads=2, dropout_rate=0.1)
FAST = TrainConfig(learning_rate=5e-3, max_epochs=2, batch_size=16, patience=2)


@pytest.fixture(scope="module")
def seqs():
    return markov_sequences(40, 12, min_len=5, max_len=9, seed=6)


@pytest.fixture(scope="module")
def data(seqs):
    return split_leave_one_out(seqs, n=6, seed=0)


@pytest.fixture(scope="module")
def teacher(data):
    config = TEACHER.__class__(**{**TEACHER.to_json(), "vocab_size": data.vocab_size, "max_len": 6})
    params, _ = train((init_params(config, 0), config), data, FAST)
    return params, config


def distill_cfg(**kw):
    return PipelineConfig(model=SMALL, train=FAST, stage="distill",
                          distill=DistillConfig(learning_rate=5e-3, max_epochs=2, batch_size=16, **kw))


class TestSweep:
    def test_single_value_matches_direct_run(self, data):
        cfg = PipelineConfig(model=SMALL, train=FAST)
        grid = sweep("rho", [0.3], cfg, data)
        direct = run_pipeline(data, apply_axis(cfg, "rho", 0.3)).report
        assert grid.cells[0].metrics == direct.metrics
        assert grid.std == {k: 0.0 for k in direct.metrics}

    def test_alpha_endpoints_bit_match(self, data, teacher):
        base = distill_cfg()
        grid = sweep("alpha", [0.0, 1.0], base, data, teacher)
        for cell, alpha in zip(grid.cells, (0.0, 1.0)):
            direct = run_pipeline(data, distill_cfg(alpha=alpha), teacher).report
            assert cell.metrics == direct.metrics

    def test_grid_json(self, data, teacher):
        grid = sweep("temperature", [1.1, 1.7], distill_cfg(), data, teacher)
        obj = json.loads(json.dumps(grid.to_json()))
        assert obj["axis"] == "temperature" and obj["values"] == [1.1, 1.7]
        assert len(obj["cells"]) == 2 and obj["std_formula"] == "population"
        assert set(obj["mean"]) == set(obj["std"]) == {"HR@5", "NDCG@5", "HR@10", "NDCG@10"}

    def test_init_mode_axis(self, data, tmp_path):
        from seqkd.model import save_checkpoint

        cfg = PipelineConfig(model=SMALL, train=FAST)
        res = run_pipeline(data, cfg)
        save_checkpoint(res.params, res.config, tmp_path / "ck")
        cfg = PipelineConfig(model=SMALL, train=FAST, init_checkpoint=str(tmp_path / "ck"))
        grid = sweep("init_mode", ["scratch_embed", "scratch_layer", "from_checkpoint"], cfg, data)
        assert len(grid.cells) == 3

    def test_distill_stage_trains_its_teacher(self, data):
        cfg = PipelineConfig(model=SMALL, train=FAST, stage="distill", teacher_model=TEACHER,
                             distill=DistillConfig(max_epochs=1, batch_size=16))
        result = run_pipeline(data, cfg)
        assert result.teacher is not None and result.teacher[1].hidden_dim == 16

    def test_axis_errors(self, data):
        cfg = PipelineConfig(model=SMALL, train=FAST)
        with pytest.raises(ParameterError):
            apply_axis(cfg, "alpha", 0.5)
        with pytest.raises(ParameterError):
            sweep("dropout", [0.1], cfg, data)
        with pytest.raises(ParameterError):
            sweep("rho", [], cfg, data)
        with pytest.raises(ParameterError):
            run_pipeline(data, PipelineConfig(model=SMALL, train=FAST, stage="distill"))


class TestStability:
    def test_identical_seeds_zero_std(self, seqs):
        grid = stability_experiment(seqs, [4, 4], PipelineConfig(model=SMALL, train=FAST), n=6)
        assert all(v == 0.0 for v in grid.std.values())

    def test_two_seeds_population_std(self, seqs):
        grid = stability_experiment(seqs, [1, 2], PipelineConfig(model=SMALL, train=FAST), n=6)
        for name in grid.std:
            a, b = (c.metrics[name] for c in grid.cells)
            assert grid.std[name] == pytest.approx(abs(a - b) / 2, abs=1e-15)
            assert grid.mean[name] == pytest.approx((a + b) / 2, abs=1e-15)

    def test_input_forms_agree(self, seqs, data):
        cfg = PipelineConfig(model=SMALL, train=FAST)
        from_map = stability_experiment(seqs, [0, 5], cfg, n=6)
        from_log = stability_experiment(sequences_to_interactions(seqs), [0, 5], cfg, n=6)
        from_split = stability_experiment(data, [0, 5], cfg)
        assert [c.metrics for c in from_map.cells] == [c.metrics for c in from_log.cells]
        assert [c.metrics for c in from_map.cells] == [c.metrics for c in from_split.cells]

    def test_needs_two_seeds(self, seqs):
        with pytest.raises(ParameterError):
            stability_experiment(seqs, [1], PipelineConfig(model=SMALL, train=FAST))

    def test_mappings_really_differ(self, data):
        other = data.remap(9)
        assert not np.array_equal(other.train, data.train)
