"""Shared fixtures: reference model, method registry, copy batches, configs."""
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from peftlab.config import build_experiment
from peftlab.core import numcore as nc
from peftlab.core.data import build_tokenizer, encode, get_dataset, load_split
from peftlab.core.model import REFERENCE_SPEC, build_model
from peftlab.core.peft import discover_methods
from peftlab.instrumentation.profiling import configure_debug

BUILTIN_METHODS = [
    "bitfit",
    "bottleneck_adapter",
    "ia3",
    "lntuning",
    "lora",
    "parallel_adapter",
    "prefix_tuning",
    "prompt_tuning",
    "ptuning",
]

IDENTITY_AT_INIT = ["lora", "ia3", "bottleneck_adapter", "parallel_adapter", "bitfit", "lntuning"]


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    nc.get_tape().clear()
    for var in ("PEFT_DIR", "PF_DATASETS_FILE", "DEBUG", "LOG_DIR", "BENCH_WORKERS"):
        monkeypatch.delenv(var, raising=False)
    configure_debug(False)


@pytest.fixture(scope="session")
def registry(tmp_path_factory):
    """Built-in methods only."""
    return discover_methods(tmp_path_factory.mktemp("no_plugins"))


@pytest.fixture
def model():
    return build_model(REFERENCE_SPEC, seed=0)


@pytest.fixture(scope="session")
def tokenizer():
    return build_tokenizer()


@pytest.fixture(scope="session")
def copy_batch(tokenizer):
    """16 encoded copy examples with room for 8 virtual tokens."""
    examples = load_split(get_dataset("copy"), "test", seed=3)[:16]
    return [encode(tokenizer, ex, REFERENCE_SPEC.max_seq, reserve=8) for ex in examples]


def batch_logits(model, batch) -> list[np.ndarray]:
    with nc.no_grad():
        return [model.forward(enc.ids).data.copy() for enc in batch]


def numeric_grad(loss_fn: Callable[[], nc.Tensor], tensor: nc.Tensor, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` at the given coordinates of ``tensor``."""
    values = []
    for idx in coords:
        original = tensor.data[idx]
        tensor.data[idx] = original + h
        with nc.no_grad():
            plus = loss_fn().item()
        tensor.data[idx] = original - h
        with nc.no_grad():
            minus = loss_fn().item()
        tensor.data[idx] = original
        values.append((plus - minus) / (2 * h))
    return np.array(values)


def assert_grads_match(analytic, numeric, rtol: float = 1e-6, atol: float = 1e-8) -> None:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def write_method(root: Path, name: str, manifest: str, impl: str = None) -> Path:
    directory = root / name
    directory.mkdir(parents=True)
    (directory / "manifest").write_text(manifest, encoding="utf-8")
    if impl is not None:
        (directory / "impl").write_text(impl, encoding="utf-8")
    return directory


def experiment_dict(tmp_path: Path, peft_type: str = "bitfit", dataset: str = "copy", **train) -> dict:
    train_section = {"steps": 4, "batch_size": 2, "lr": 0.01, "seed": 1}
    train_section.update(train)
    return {
        "model": "reference",
        "method": {"peft_type": peft_type, "hyperparameters": {}},
        "dataset": {"name": dataset, "eval_splits": ["test"]},
        "train": train_section,
        "eval": {"max_new_tokens": 4},
        "output_dir": str(tmp_path / "run"),
    }


@pytest.fixture
def tiny_config(tmp_path):
    return build_experiment(experiment_dict(tmp_path))
