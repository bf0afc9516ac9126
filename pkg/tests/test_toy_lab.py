import json
from dataclasses import replace

import numpy as np
import pytest

from maet.errors import StageError, UsageError
from maet.neuron_importance import NeuronMask, import_mask, universe_of
from maet.tensor_store import open_store
from maet import toy_lab as T


def test_param_count():
    assert T.PARAM_COUNT == 1377
    assert sum(v.size for v in T.ToyModel.init(0).params.values()) == 1377


def test_gen_tasks():
    tasks = T.gen_tasks(5, 3, 2)
    assert [(t.language, t.ability) for t in tasks] == [(l, a) for l in range(3) for a in range(2)]
    np.testing.assert_array_equal(tasks[0].rotation, np.eye(8))
    again = T.gen_tasks(5, 3, 2)
    for t, u in zip(tasks, again):
        assert t.rotation.tobytes() == u.rotation.tobytes()
    with pytest.raises(UsageError):
        T.gen_tasks(0, 0, 1)


def test_rotations_orthogonal():
    for seed in range(100):
        q = T.rotation(seed, 1)
        assert np.abs(q.T @ q - np.eye(8)).max() < 1e-5


def test_zero_steps_is_noop():
    m = T.ToyModel.init(1)
    task = T.gen_tasks(0, 1, 1)[0]
    out = T.train(m, task, None, 0)
    for k in m.params:
        assert out.params[k].tobytes() == m.params[k].tobytes()


def test_full_mask_equals_no_mask():
    m = T.ToyModel.init(2)
    task = T.gen_tasks(0, 1, 2)[1]
    free = T.train(m, task, None, 20, seed=3)
    full = T.train(m, task, NeuronMask.full(universe_of(m.to_store())), 20, seed=3)
    for k in m.params:
        assert free.params[k].tobytes() == full.params[k].tobytes()


def test_masked_training_leaves_outside_untouched():
    m = T.ToyModel.init(3)
    universe = universe_of(m.to_store())
    rng = np.random.default_rng(0)
    sel = {n: np.sort(rng.choice(size, size=max(1, size // 10), replace=False)) for n, size in universe.items()}
    mask = NeuronMask(sel, universe, T.PARAM_COUNT, 10.0)
    out = T.train(m, T.gen_tasks(0, 1, 1)[0], mask, 30, seed=1)
    changed = 0
    for name in m.params:
        before, after = m.params[name].ravel(), out.params[name].ravel()
        outside = np.ones(before.size, bool)
        outside[sel[name]] = False
        assert before[outside].tobytes() == after[outside].tobytes()
        changed += int(np.count_nonzero(before != after))
    assert changed > 0


def test_training_is_deterministic():
    m = T.ToyModel.init(4)
    task = T.gen_tasks(0, 2, 2)[3]
    a, b = T.train(m, task, None, 25, seed=9), T.train(m, task, None, 25, seed=9)
    for k in m.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_divergence_reports_step():
    with pytest.raises(T.DivergenceError) as info:
        T.train(T.ToyModel.init(0), T.gen_tasks(0, 1, 1)[0], None, 200, lr=50.0)
    assert info.value.step >= 0


class _Oracle:
    def __init__(self, task):
        self.task = task

    def predict(self, x):
        return self.task.target(x)


class _Zero:
    def predict(self, x):
        return np.zeros(len(x))


def test_evaluate_examples():
    task = T.gen_tasks(0, 2, 1)[1]
    assert T.evaluate(_Oracle(task), task, 1000) == 0.0
    # E[(chi2_8)^2] = 8^2 + 2*8 = 80
    assert T.evaluate(_Zero(), T.gen_tasks(0, 1, 1)[0], 100_000, 3) == pytest.approx(80.0, rel=0.05)
    m = T.ToyModel.init(0)
    assert T.evaluate(m, task, 500, 1) == T.evaluate(m, task, 500, 1)
    with pytest.raises(UsageError):
        T.evaluate(m, task, 0)


def test_gradient_check_every_layer():
    model = T.ToyModel.init(11)
    worst = T.gradient_check(model, T.gen_tasks(11, 2, 2)[3], probes_per_layer=50, eps=1e-3, seed=2)
    assert set(worst) == set(T.LAYER_SHAPES)
    assert max(worst.values()) < 1e-4


def test_store_round_trip():
    m = T.ToyModel.init(6)
    back = T.ToyModel.from_store(m.to_store())
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()


SMALL = T.ToyConfig(pretrain_steps=60, probe_steps=10, cpt_steps=40, eval_samples=256)


def test_config_validation():
    for bad in (dict(cpt_steps=-1), dict(mixture=1.5), dict(n_languages=1), dict(batch_size=0),
                dict(pretrain_on="x"), dict(n_abilities=3)):
        with pytest.raises(UsageError):
            replace(SMALL, **bad).validate()


def test_report_shape_and_artifacts(tmp_path):
    rep = T.run_transfer_experiment(SMALL, tmp_path)
    keys = {(r.ability, r.language, r.variant) for r in rep.rows}
    assert keys == {(a, l, v) for a in range(2) for l in range(2) for v in ("base", "merged", "ablation")}
    assert len(rep.rows) == 12
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["rows"]) == 12 and "language models" in doc["note"]
    merged = open_store(tmp_path / "merged_A1_merged.safetensors")
    assert merged.metadata["kind"] == "merged"
    assert import_mask(tmp_path / "mask_A0_L0.mask.safetensors").total_units == T.PARAM_COUNT
    ability = open_store(tmp_path / "R_A1_merged.safetensors")
    assert ability.metadata["alpha"] == "0.8" and ability.metadata["beta"] == "0.2"
    assert open_store(tmp_path / "R_A1_ablation.safetensors").metadata["beta"] == "0.0"


def test_null_pipeline_coincides():
    cfg = replace(SMALL, pretrain_steps=0, probe_steps=0, cpt_steps=0)
    rep = T.run_transfer_experiment(cfg)
    for a in range(2):
        for l in range(2):
            base = rep.mse(a, l, "base")
            assert rep.mse(a, l, "merged") == base and rep.mse(a, l, "ablation") == base


def test_experiment_bit_reproducible(tmp_path):
    T.run_transfer_experiment(SMALL, tmp_path / "a")
    T.run_transfer_experiment(SMALL, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_stage_errors_name_the_stage():
    with pytest.raises(StageError) as info:
        T.run_transfer_experiment(replace(SMALL, lr=1e4))
    assert info.value.stage == "pretrain"
