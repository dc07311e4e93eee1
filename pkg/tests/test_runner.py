import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from peftlab.config import TrainSection, build_experiment, load_experiment
from peftlab.core import numcore as nc
from peftlab.core.data import EOS
from peftlab.core.errors import CompatibilityError, ConfigError
from peftlab.core.metrics import PSCPConstants
from peftlab.core.model import REFERENCE_SPEC, build_model
from peftlab.core.peft import attach, parse_config, read_checkpoint
from peftlab.core.runner import (
    CHECKPOINT_FILE,
    PREDICT_REPORT_FILE,
    REPORT_FILE,
    OptimizerHyper,
    OptimizerState,
    batch_schedule,
    bench,
    build_base,
    greedy_decode,
    learning_rate,
    optimizer_step,
    predict,
    pretrain_base,
    train,
    train_step,
)
from tests.conftest import BUILTIN_METHODS, experiment_dict

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


class TestOptimizer:
    def test_sgd_step(self):
        w = nc.Tensor(np.zeros(1), requires_grad=True)
        optimizer_step({"w": w}, {"w": np.ones(1)}, OptimizerState(), OptimizerHyper(kind="sgd", lr=0.1))
        np.testing.assert_allclose(w.data, [-0.1], atol=1e-15)

    def test_adamw_first_step_moves_by_lr(self):
        w = nc.Tensor(np.zeros(3), requires_grad=True)
        grads = {"w": np.array([0.5, -2.0, 1e-3])}
        state = optimizer_step({"w": w}, grads, OptimizerState(), OptimizerHyper(lr=0.01))
        np.testing.assert_allclose(w.data, -0.01 * np.sign(grads["w"]), rtol=1e-4)
        assert state.step == 1

    def test_weight_decay_is_decoupled(self):
        w = nc.Tensor(np.full(2, 2.0), requires_grad=True)
        optimizer_step({"w": w}, {"w": np.zeros(2)}, OptimizerState(), OptimizerHyper(kind="sgd", lr=0.1, weight_decay=0.5))
        np.testing.assert_allclose(w.data, [1.9, 1.9])


class TestSchedules:
    def test_constant(self):
        train_cfg = TrainSection(steps=10, seed=0, lr=0.3)
        assert {learning_rate(train_cfg, s, 10) for s in range(10)} == {0.3}

    def test_warmup_then_linear_decay(self):
        train_cfg = TrainSection(steps=100, seed=0, lr=1.0, schedule="linear_warmup", warmup_steps=10)
        assert learning_rate(train_cfg, 0, 100) == pytest.approx(0.1)
        assert learning_rate(train_cfg, 9, 100) == pytest.approx(1.0)
        assert learning_rate(train_cfg, 10, 100) == pytest.approx(1.0)
        assert learning_rate(train_cfg, 55, 100) == pytest.approx(0.5)
        assert learning_rate(train_cfg, 99, 100) == pytest.approx(1 / 90)

    def test_step_budget(self):
        schedule = batch_schedule(10, TrainSection(steps=7, batch_size=4, seed=3))
        assert len(schedule) == 7
        assert [epoch for epoch, _ in schedule] == [0, 0, 0, 1, 1, 1, 2]
        assert sorted(p for _, batch in schedule[:3] for p in batch) == list(range(10))

    def test_epoch_budget(self):
        schedule = batch_schedule(10, TrainSection(epochs=2, batch_size=4, seed=3))
        assert len(schedule) == 6

    def test_depends_only_on_seed(self):
        a = batch_schedule(50, TrainSection(steps=20, batch_size=8, seed=4, lr=0.5))
        b = batch_schedule(50, TrainSection(steps=20, batch_size=8, seed=4, optimizer="sgd"))
        c = batch_schedule(50, TrainSection(steps=20, batch_size=8, seed=5))
        assert a == b
        assert a != c


class TestConfigFingerprint:
    def test_stable_under_key_order(self, tmp_path):
        raw = experiment_dict(tmp_path)
        reordered = {key: raw[key] for key in reversed(list(raw))}
        reordered["train"] = {key: raw["train"][key] for key in reversed(list(raw["train"]))}
        assert build_experiment(raw).fingerprint() == build_experiment(reordered).fingerprint()

    def test_changes_with_values(self, tmp_path):
        a = build_experiment(experiment_dict(tmp_path))
        b = build_experiment(experiment_dict(tmp_path, lr=0.02))
        assert a.fingerprint() != b.fingerprint()


@pytest.mark.parametrize("peft_type", BUILTIN_METHODS)
def test_train_step_leaves_frozen_base_untouched(peft_type, registry, tokenizer, copy_batch):
    model = build_model(REFERENCE_SPEC, seed=0)
    handle = attach(model, registry, parse_config(registry, peft_type, {}), seed=0)
    frozen = model.snapshot(handle.frozen)
    trainable = model.snapshot(handle.trainable)
    state, hyper = OptimizerState(), OptimizerHyper(lr=0.01)
    for step in range(50):
        train_step(model, handle, copy_batch[2 * (step % 8): 2 * (step % 8) + 2], state, hyper, 0.01)
    for name, data in frozen.items():
        np.testing.assert_array_equal(model.params[name].data, data, err_msg=name)
    assert any(not np.array_equal(model.params[n].data, d) for n, d in trainable.items())


def test_greedy_decode_respects_budget(model, copy_batch):
    generated = greedy_decode(model, copy_batch[0].prompt, max_new_tokens=3)
    assert len(generated) <= 3
    assert EOS not in generated


class ConstantModel:
    """Always predicts token 7; records every forward length."""

    def __init__(self, max_seq: int):
        self.spec = SimpleNamespace(max_seq=max_seq)
        self.lengths = []

    def forward(self, ids):
        self.lengths.append(len(ids))
        logits = np.zeros((len(ids), 16))
        logits[:, 7] = 1.0
        return nc.Tensor(logits)


def test_greedy_decode_uses_the_last_position():
    model = ConstantModel(max_seq=10)
    assert greedy_decode(model, [1] * 9, max_new_tokens=5) == [7, 7]
    assert max(model.lengths) == 10


def test_greedy_decode_counts_virtual_tokens():
    model = ConstantModel(max_seq=10)
    assert greedy_decode(model, [1] * 5, max_new_tokens=5, virtual_tokens=4) == [7, 7]
    assert greedy_decode(ConstantModel(max_seq=10), [1] * 7, max_new_tokens=5, virtual_tokens=4) == []


def without_timing(report) -> dict:
    payload = report.to_json()
    for key in ("train_seconds", "checkpoint"):
        payload.pop(key)
    for metrics in payload["metrics"].values():
        for key in ("time_per_example", "peak_memory_bytes", "pscp"):
            metrics.pop(key, None)
    return payload


class TestTrain:
    def test_writes_run_files(self, tmp_path, registry):
        config = build_experiment(experiment_dict(tmp_path))
        report = train(config, registry)
        out = tmp_path / "run"
        for name in (REPORT_FILE, CHECKPOINT_FILE, "metrics.prom"):
            assert (out / name).exists()
        payload = json.loads((out / REPORT_FILE).read_text(encoding="utf-8"))
        assert payload["peft_type"] == "bitfit"
        assert payload["trainable_params"] == 368
        assert payload["steps"] == 4
        assert set(payload["metrics"]) == {"test"}
        assert 0.0 <= report.metrics["test"].token_accuracy <= 1.0
        prom = (out / "metrics.prom").read_text(encoding="utf-8")
        assert "pf_train_steps_total" in prom
        assert "pf_trainable_parameters" in prom

    def test_deterministic(self, tmp_path, registry):
        raw = experiment_dict(tmp_path, peft_type="lora", dataset="toy-sentiment")
        raw["dataset"]["eval_splits"] = ["validation", "test"]
        raw["eval"] = {"max_new_tokens": 2}
        config = build_experiment(raw)
        first = train(config, registry, tmp_path / "a")
        second = train(config, registry, tmp_path / "b")
        assert set(first.metrics) == {"validation", "test"}
        assert without_timing(first) == without_timing(second)
        assert (tmp_path / "a" / CHECKPOINT_FILE).read_bytes() == (tmp_path / "b" / CHECKPOINT_FILE).read_bytes()

    def test_methods_share_batches(self, tmp_path, registry):
        fingerprints = {
            peft_type: train(
                build_experiment(experiment_dict(tmp_path, peft_type=peft_type)),
                registry,
                tmp_path / peft_type,
                evaluate_splits=False,
            ).batch_fingerprint
            for peft_type in ("bitfit", "prompt_tuning", "prefix_tuning")
        }
        assert len(set(fingerprints.values())) == 1

    def test_config_errors_precede_compute(self, tmp_path, registry):
        raw = experiment_dict(tmp_path)
        raw["method"]["hyperparameters"] = {"unfreeze_patterns": []}
        with pytest.raises(ConfigError):
            train(build_experiment(raw), registry)
        raw = experiment_dict(tmp_path, dataset="glue")
        with pytest.raises(ConfigError):
            train(build_experiment(raw), registry)
        assert not (tmp_path / "run").exists()


class TestPredict:
    def test_reproduces_training_evaluation(self, tmp_path, registry):
        config = build_experiment(experiment_dict(tmp_path, peft_type="lora"))
        trained = train(config, registry)
        predicted = predict(config, trained.checkpoint, registry, tmp_path / "predict")
        assert (tmp_path / "predict" / PREDICT_REPORT_FILE).exists()
        a, b = trained.metrics["test"], predicted.metrics["test"]
        assert a.token_accuracy == b.token_accuracy
        assert a.accuracy == b.accuracy
        assert predicted.trainable_params == trained.trainable_params

    def test_rejects_other_seed(self, tmp_path, registry):
        config = build_experiment(experiment_dict(tmp_path))
        trained = train(config, registry, evaluate_splits=False)
        other = build_experiment(experiment_dict(tmp_path, seed=2))
        with pytest.raises(CompatibilityError, match="seed"):
            predict(other, trained.checkpoint, registry)

    def test_rejects_other_method(self, tmp_path, registry):
        trained = train(build_experiment(experiment_dict(tmp_path)), registry, evaluate_splits=False)
        with pytest.raises(CompatibilityError):
            predict(build_experiment(experiment_dict(tmp_path, peft_type="ia3")), trained.checkpoint, registry)


def bench_config(tmp_path, peft_type, dataset="toy-sentiment", **method):
    raw = experiment_dict(tmp_path, peft_type=peft_type, dataset=dataset, steps=2)
    raw["method"]["hyperparameters"] = method
    raw["eval"] = {"max_new_tokens": 2, "compute_pscp": True}
    return build_experiment(raw)


class TestBench:
    @pytest.mark.slow
    def test_table_and_files(self, tmp_path, registry):
        configs = [bench_config(tmp_path, "bitfit"), bench_config(tmp_path, "ia3")]
        result = bench(configs, tmp_path / "bench", registry, workers=2)
        assert result.table.shape == (2, 1)
        assert list(result.table.index) == ["bitfit", "ia3"]
        assert not result.failed
        assert "## PSCP" in result.markdown
        assert (tmp_path / "bench" / "bench.md").read_text(encoding="utf-8") == result.markdown
        cells = json.loads((tmp_path / "bench" / "bench.json").read_text(encoding="utf-8"))["cells"]
        assert len({cell["batch_fingerprint"] for cell in cells}) == 1

    @pytest.mark.slow
    def test_bundled_set_is_reproducible(self, tmp_path, registry):
        configs = sorted((CONFIG_DIR / "bench").glob("*.yaml"))
        assert len(configs) == 6
        first = bench(configs, tmp_path / "one", registry, workers=2)
        second = bench(configs, tmp_path / "two", registry, workers=1)
        assert not first.failed and not second.failed
        assert first.table.shape == (3, 2)
        assert list(first.table.index) == ["bitfit", "ia3", "prefix_tuning"]
        assert list(first.table.columns) == ["toy-arith", "toy-sentiment"]
        assert first.table.equals(second.table)
        for result in (first, second):
            for dataset in ("toy-arith", "toy-sentiment"):
                prints = {c.batch_fingerprint for c in result.cells if c.dataset == dataset}
                assert len(prints) == 1
        assert [c.batch_fingerprint for c in first.cells] == [c.batch_fingerprint for c in second.cells]

    def test_failed_cell_keeps_exit_code(self, tmp_path, registry):
        configs = [bench_config(tmp_path, "lora", r=0)]
        result = bench(configs, tmp_path / "bench", registry)
        [cell] = result.failed
        assert cell.exit_code == 2
        assert result.table.loc["lora", "toy-sentiment"] == "failed"

    def test_rejects_differing_eval(self, tmp_path, registry):
        a = bench_config(tmp_path, "bitfit")
        b = bench_config(tmp_path, "ia3").model_copy(update={"eval": a.eval.model_copy(update={"max_new_tokens": 3})})
        with pytest.raises(ConfigError, match="eval"):
            bench([a, b], tmp_path / "bench", registry)

    def test_rejects_duplicate_cells(self, tmp_path, registry):
        config = bench_config(tmp_path, "bitfit")
        with pytest.raises(ConfigError):
            bench([config, config], tmp_path / "bench", registry)

    def test_rejects_empty(self, tmp_path, registry):
        with pytest.raises(ConfigError):
            bench([], tmp_path / "bench", registry)


def register_jsonl(tmp_path, monkeypatch, name, records, **descriptor):
    """Write records to <name>.jsonl and point PF_DATASETS_FILE at a registry holding it."""
    (tmp_path / f"{name}.jsonl").write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    entry = {"source": f"file:{name}.jsonl", "columns": {"input_cols": ["q"], "output_col": "a"}, **descriptor}
    path = tmp_path / "datasets.json"
    path.write_text(json.dumps({name: entry}), encoding="utf-8")
    monkeypatch.setenv("PF_DATASETS_FILE", str(path))


class TestEvaluate:
    def test_classification_metrics_can_be_disabled(self, tmp_path, registry):
        raw = experiment_dict(tmp_path, dataset="toy-sentiment", steps=1)
        raw["eval"] = {"max_new_tokens": 2, "compute_classification_metrics": False}
        report = train(build_experiment(raw), registry)
        metrics = report.metrics["test"]
        assert metrics.accuracy is None
        assert metrics.macro_f1 is None
        assert metrics.token_accuracy is not None
        payload = json.loads((tmp_path / "run" / REPORT_FILE).read_text(encoding="utf-8"))["metrics"]["test"]
        assert "accuracy" not in payload
        assert "macro_f1" not in payload

    def test_truncated_generation_is_an_invalid_false_negative(self, tmp_path, registry, monkeypatch):
        records = [{"q": f"{x} {y}", "a": (x + y) % 2} for x in range(3) for y in range(3)]
        register_jsonl(
            tmp_path, monkeypatch, "pairs", records[:8],
            label_verbalizer={"0": "a b", "1": "c d"}, splits={"train": 4, "test": 4},
        )
        raw = experiment_dict(tmp_path, dataset="pairs", steps=1)
        raw["eval"] = {"max_new_tokens": 1}
        metrics = train(build_experiment(raw), registry).metrics["test"]
        golds = [r["a"] for r in records[4:8]]
        assert metrics.invalid_rate == 1.0
        assert metrics.accuracy == 0.0
        assert metrics.per_class["a b"].fn == golds.count(0)
        assert metrics.per_class["c d"].fn == golds.count(1)
        assert metrics.per_class["a b"].tp == metrics.per_class["c d"].fp == 0

    def test_pscp_constants_prefer_config_values(self, tmp_path, registry, monkeypatch):
        seen = []

        def capture(performance, params, time_per_example, peak_bytes, constants):
            seen.append(constants)
            return 0.5

        monkeypatch.setattr("peftlab.core.runner.pscp", capture)
        monkeypatch.setenv("PSCP_CP", "123")
        monkeypatch.setenv("PSCP_BF", "0.5")
        raw = experiment_dict(tmp_path, steps=1)
        raw["eval"] = {"max_new_tokens": 4, "compute_pscp": True, "pscp_cp": 7.0, "pscp_bm": 2.0}
        report = train(build_experiment(raw), registry)
        assert report.metrics["test"].pscp == 0.5
        assert seen == [PSCPConstants(c_p=7.0, c_f=0.01, c_m=1e8, b_p=1.0, b_f=0.5, b_m=2.0)]


def pretrain_dict(tmp_path, **pretrain) -> dict:
    raw = experiment_dict(tmp_path, steps=2)
    raw["pretrain"] = {"datasets": ["copy"], "steps": 3, "batch_size": 2, "lr": 0.01, "max_offset": 3, **pretrain}
    return raw


class TestBaseModel:
    def test_without_pretrain_is_the_seeded_build(self, tmp_path, tokenizer):
        config = build_experiment(experiment_dict(tmp_path, seed=4))
        base = build_base(config, tokenizer)
        reference = build_model(REFERENCE_SPEC, seed=4)
        for name, tensor in reference.params.items():
            np.testing.assert_array_equal(base[name].data, tensor.data)

    def test_pretraining_lowers_loss(self, tmp_path, tokenizer):
        config = build_experiment(pretrain_dict(tmp_path, steps=40, batch_size=4))
        losses = pretrain_base(config, tokenizer, build_model(REFERENCE_SPEC, seed=1))
        assert len(losses) == 40
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_warm_start_is_cached_per_recipe(self, tmp_path, tokenizer):
        config = build_experiment(pretrain_dict(tmp_path))
        first = build_base(config, tokenizer)
        reference = first.snapshot()
        assert not np.array_equal(reference["tok_emb.weight"], build_model(REFERENCE_SPEC, seed=1)["tok_emb.weight"].data)
        first["tok_emb.weight"].data += 1.0
        second = build_base(config, tokenizer)
        for name, data in reference.items():
            np.testing.assert_array_equal(second[name].data, data)
        other = build_base(build_experiment(pretrain_dict(tmp_path, lr=0.02)), tokenizer)
        assert not np.array_equal(other["tok_emb.weight"].data, reference["tok_emb.weight"])

    def test_checkpoint_records_base(self, tmp_path, registry):
        config = build_experiment(pretrain_dict(tmp_path))
        report = train(config, registry, evaluate_splits=False)
        _, saved, _ = read_checkpoint(report.checkpoint)
        assert saved["base"] == report.base_fingerprint == config.base_fingerprint()

    def test_predict_rejects_other_base(self, tmp_path, registry):
        trained = train(build_experiment(pretrain_dict(tmp_path)), registry, evaluate_splits=False)
        other = build_experiment(pretrain_dict(tmp_path, steps=4))
        with pytest.raises(CompatibilityError, match="base"):
            predict(other, trained.checkpoint, registry)
        with pytest.raises(CompatibilityError, match="base"):
            predict(build_experiment(experiment_dict(tmp_path)), trained.checkpoint, registry)

    def test_unknown_pretrain_dataset(self, tmp_path, registry):
        with pytest.raises(ConfigError, match="unknown dataset"):
            train(build_experiment(pretrain_dict(tmp_path, datasets=["glue"])), registry)
        assert not (tmp_path / "run").exists()


class TestFileDataset:
    RECORDS = [{"q": f"{w} a", "a": w} for w in ("Xa", "bY", "XY", "Ya", "Xb", "aY")]

    def test_new_characters_extend_the_vocabulary(self, tmp_path, registry, monkeypatch):
        register_jsonl(tmp_path, monkeypatch, "shout", self.RECORDS, splits={"train": 4, "test": 2}, task_kind="generation")
        raw = experiment_dict(tmp_path, dataset="shout")
        raw["model"] = {"vocab_size": 80}
        report = train(build_experiment(raw), registry)
        assert report.metrics["test"].examples == 2

    def test_overflowing_reference_vocabulary_is_a_config_error(self, tmp_path, registry, monkeypatch):
        register_jsonl(tmp_path, monkeypatch, "shout", self.RECORDS, splits={"train": 4, "test": 2}, task_kind="generation")
        with pytest.raises(ConfigError, match="shout"):
            train(build_experiment(experiment_dict(tmp_path, dataset="shout")), registry)
        assert not (tmp_path / "run").exists()


TARGETS = [("copy", peft_type, "train", "token_accuracy", 0.95) for peft_type in BUILTIN_METHODS] + [
    ("parity", peft_type, "test", "accuracy", 0.90)
    for peft_type in ("bottleneck_adapter", "lora", "parallel_adapter", "prefix_tuning")
]


@pytest.mark.slow
@pytest.mark.parametrize("task, peft_type, split, metric, threshold", TARGETS)
def test_bundled_config_reaches_target(task, peft_type, split, metric, threshold, registry, tmp_path):
    """train() raises TrainingError if any frozen tensor moved during the run."""
    config = load_experiment(CONFIG_DIR / task / f"{peft_type}.yaml")
    report = train(config, registry, tmp_path)
    assert getattr(report.metrics[split], metric) >= threshold
    model = build_model(config.model_spec(), seed=config.train.seed)
    handle = attach(model, registry, parse_config(registry, peft_type, config.method.hyperparameters), seed=config.train.seed)
    _, saved, tensors = read_checkpoint(report.checkpoint)
    assert set(tensors) == set(handle.trainable)
    assert not set(tensors) & set(handle.frozen)
    assert saved["base"] == config.base_fingerprint()
