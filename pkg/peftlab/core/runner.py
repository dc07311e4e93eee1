"""
Experiment Runner
=================
Training, prediction and benchmarking on top of the model, method registry,
data pipeline and metrics.

Pipeline (train):
1. Validate config, resolve method hyperparameters and dataset (no compute yet)
2. Build the base model from the seed (warm-started when the config has a
   pretrain section) and attach the method
3. Optimize over seeded shuffled batches, logging batch fingerprints
4. Verify the frozen base is untouched, save adapter.ckpt with the base
   fingerprint
5. Evaluate configured splits, write report.json and metrics.prom

Batch order depends only on the dataset and train.seed, so runs that differ
only in method see identical batches and evaluation sets.
"""
from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from peftlab.config import ExperimentConfig, TrainSection, get_settings, load_experiment
from peftlab.core import numcore as nc
from peftlab.core.data import (
    EOS,
    SPECIAL_TOKENS,
    DatasetDescriptor,
    EncodedExample,
    Tokenizer,
    build_tokenizer,
    bundled_tokens,
    encode,
    get_dataset,
    load_split,
    training_pair,
)
from peftlab.core.errors import CompatibilityError, ConfigError, TrainingError
from peftlab.core.jobs import JobQueue, TaskStatus
from peftlab.core.metrics import MetricReport, classification_scores, pscp, token_accuracy
from peftlab.core.model import TransformerModel, build_model, count_parameters
from peftlab.core.peft import (
    AttachHandle,
    MethodRegistry,
    TunerConfig,
    attach,
    discover_methods,
    load_adapter,
    parse_config,
    read_checkpoint,
    save_adapter,
)
from peftlab.core.report_utils import fingerprint, safe_number, sequence_fingerprint, write_json
from peftlab.core.telemetry import track_inference, track_train_step, track_trainable, write_metrics
from peftlab.instrumentation.profiling import ProfileBlock, configure_debug, log_execution_time, timed

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
PREDICT_REPORT_FILE = "predict_report.json"
CHECKPOINT_FILE = "adapter.ckpt"


# ============================================================================
# OPTIMIZER
# ============================================================================


class OptimizerHyper(BaseModel):
    kind: str = "adamw"
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def from_train(cls, train: TrainSection) -> "OptimizerHyper":
        return cls(
            kind=train.optimizer,
            lr=train.lr,
            beta1=train.beta1,
            beta2=train.beta2,
            eps=train.eps,
            weight_decay=train.weight_decay,
        )


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: Mapping[str, nc.Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    hyper: OptimizerHyper,
    lr: Optional[float] = None,
) -> OptimizerState:
    """
    Update ``params`` in place: AdamW with bias correction or plain SGD.

    Weight decay is decoupled (``p -= lr·wd·p``) and applies only to the
    parameters passed in, which are the trainable ones.
    """
    lr = hyper.lr if lr is None else lr
    state.step += 1
    for name, tensor in params.items():
        g = grads[name]
        if hyper.weight_decay:
            tensor.data -= lr * hyper.weight_decay * tensor.data
        if hyper.kind == "sgd":
            tensor.data -= lr * g
            continue
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - hyper.beta1 ** state.step)
        v_hat = v / (1.0 - hyper.beta2 ** state.step)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return state


def learning_rate(train: TrainSection, step: int, total_steps: int) -> float:
    """LR at 0-based ``step``: constant, or linear warmup then linear decay to 0."""
    if train.schedule == "constant":
        return train.lr
    warmup = train.warmup_steps
    if step < warmup:
        return train.lr * (step + 1) / warmup
    remaining = max(1, total_steps - warmup)
    return train.lr * max(0.0, (total_steps - step) / remaining)


# ============================================================================
# BATCHING
# ============================================================================


def epoch_batches(n_examples: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Positions of each batch in one epoch; depends only on seed and epoch."""
    order = np.random.default_rng((seed, epoch)).permutation(n_examples)
    return [order[i:i + batch_size].tolist() for i in range(0, n_examples, batch_size)]


def batch_schedule(n_examples: int, train: TrainSection) -> list[tuple[int, list[int]]]:
    """(epoch, positions) for every optimizer step of the run."""
    schedule = []
    epoch = 0
    while True:
        for batch in epoch_batches(n_examples, train.batch_size, train.seed, epoch):
            schedule.append((epoch, batch))
            if train.steps is not None and len(schedule) == train.steps:
                return schedule
        epoch += 1
        if train.epochs is not None and epoch == train.epochs:
            return schedule


# ============================================================================
# REPORTS
# ============================================================================


class RunReport(BaseModel):
    """Outcome of a train or predict run."""

    peft_type: str
    dataset: str
    steps: int = 0
    final_loss: Optional[float] = None
    loss_history: list[float] = Field(default_factory=list)
    metrics: dict[str, MetricReport] = Field(default_factory=dict)
    trainable_params: int
    total_params: int
    train_seconds: float = 0.0
    config_fingerprint: str
    base_fingerprint: Optional[str] = None
    batch_fingerprint: Optional[str] = None
    eval_fingerprints: dict[str, str] = Field(default_factory=dict)
    checkpoint: Optional[str] = None

    def to_json(self) -> dict:
        payload = self.model_dump(exclude={"metrics"})
        payload["final_loss"] = safe_number(self.final_loss)
        payload["metrics"] = {split: report.to_flat_dict() for split, report in self.metrics.items()}
        return payload


@dataclass
class _Prepared:
    config: ExperimentConfig
    registry: MethodRegistry
    descriptor: DatasetDescriptor
    tokenizer: Tokenizer
    tuner_config: TunerConfig


def _prepare(config: ExperimentConfig, registry: Optional[MethodRegistry]) -> _Prepared:
    """Everything that can fail as a config error, before any compute."""
    spec = config.model_spec()
    registry = registry if registry is not None else discover_methods()
    tuner_config = parse_config(registry, config.method.peft_type, config.method.hyperparameters)
    descriptor = get_dataset(config.dataset.name)
    for split in ["train", *config.dataset.eval_splits]:
        if split not in descriptor.splits:
            raise ConfigError(f"dataset '{descriptor.name}' has no split '{split}'; defined: {list(descriptor.splits)}")
    pretrain_descriptors = []
    if config.pretrain is not None:
        for name in config.pretrain.datasets:
            pretrain_descriptor = get_dataset(name)
            if "train" not in pretrain_descriptor.splits:
                raise ConfigError(f"pretrain dataset '{name}' has no train split")
            pretrain_descriptors.append(pretrain_descriptor)
    tokenizer = build_tokenizer([descriptor, *pretrain_descriptors], spec.vocab_size)
    if len(tokenizer) > spec.vocab_size:
        raise ConfigError(f"tokenizer has {len(tokenizer)} tokens but vocab_size is {spec.vocab_size}")
    config.eval.pscp_constants(get_settings().pscp)
    return _Prepared(config, registry, descriptor, tokenizer, tuner_config)


def _encode_split(prepared: _Prepared, split: str, reserve: int) -> list[EncodedExample]:
    examples = load_split(prepared.descriptor, split, prepared.config.train.seed)
    max_seq = prepared.config.model_spec().max_seq
    return [encode(prepared.tokenizer, ex, max_seq, reserve) for ex in examples]


# ============================================================================
# BASE MODEL
# ============================================================================

_base_cache: dict[str, dict[str, np.ndarray]] = {}
_base_lock = threading.Lock()


def _pretrain_set(config: ExperimentConfig, tokenizer: Tokenizer) -> list[EncodedExample]:
    section = config.pretrain
    max_seq = config.model_spec().max_seq
    encoded = []
    for name in section.datasets:
        examples = load_split(get_dataset(name), "train", config.train.seed)
        encoded += [encode(tokenizer, ex, max_seq, section.max_offset) for ex in examples]
    return encoded


def pretrain_base(config: ExperimentConfig, tokenizer: Tokenizer, model: TransformerModel) -> list[float]:
    """
    Full-parameter warm start of ``model`` on the pretraining datasets.

    Each example is shifted by 0..max_offset filler tokens drawn from the
    bundled vocabulary entries no pretraining example uses; fillers carry no
    loss.

    Raises:
        ConfigError: an offset is requested but every token appears in the data
        TrainingError: non-finite loss
    """
    section = config.pretrain
    train_set = _pretrain_set(config, tokenizer)
    used = {i for enc in train_set for i in enc.ids}
    bundled = range(len(SPECIAL_TOKENS), len(SPECIAL_TOKENS) + len(bundled_tokens()))
    fillers = [i for i in bundled if i not in used]
    if section.max_offset and not fillers:
        raise ConfigError(f"pretrain.max_offset is {section.max_offset} but no filler tokens are left")

    train_cfg = section.as_train(config.train.seed)
    schedule = batch_schedule(len(train_set), train_cfg)
    params = dict(model.named_parameters())
    hyper = OptimizerHyper.from_train(train_cfg)
    state = OptimizerState()
    rng = np.random.default_rng((config.train.seed, len(train_set)))
    logger.info(
        "Pretraining base on %s: %d steps over %d examples",
        ", ".join(section.datasets), len(schedule), len(train_set),
    )

    losses = []
    for step, (_, positions) in enumerate(schedule):
        for tensor in params.values():
            tensor.zero_grad()
        total = 0.0
        for p in positions:
            offset = int(rng.integers(0, section.max_offset + 1))
            filler = rng.choice(fillers, size=offset).tolist() if offset else []
            inputs, targets = training_pair(train_set[p], offset)
            loss = nc.softmax_cross_entropy(model.forward(filler + inputs), targets, nc.IGNORE_INDEX)
            total += loss.item()
            nc.backward(nc.scale(loss, 1.0 / len(positions)))
        loss = total / len(positions)
        if not math.isfinite(loss):
            raise TrainingError(f"pretraining loss became {loss} at step {step}")
        grads = {name: t.grad if t.grad is not None else np.zeros_like(t.data) for name, t in params.items()}
        optimizer_step(params, grads, state, hyper, learning_rate(train_cfg, step, len(schedule)))
        losses.append(loss)
        if (step + 1) % 100 == 0 or step == len(schedule) - 1:
            logger.info("pretrain step %d/%d loss %.6f", step + 1, len(schedule), loss)
    for tensor in params.values():
        tensor.zero_grad()
    return losses


def build_base(config: ExperimentConfig, tokenizer: Tokenizer) -> TransformerModel:
    """
    The seeded base model, warm-started when the config has a pretrain section.

    Warm-started weights are cached per base fingerprint for the process.
    """
    model = build_model(config.model_spec(), config.train.seed)
    if config.pretrain is None:
        return model
    key = config.base_fingerprint()
    with _base_lock:
        if key not in _base_cache:
            pretrain_base(config, tokenizer, model)
            _base_cache[key] = model.snapshot()
        weights = _base_cache[key]
    for name, data in weights.items():
        np.copyto(model.params[name].data, data)
    return model


# ============================================================================
# TRAINING
# ============================================================================


def _example_loss(model: TransformerModel, encoded: EncodedExample, virtual_tokens: int) -> nc.Tensor:
    inputs, targets = training_pair(encoded, virtual_tokens)
    logits = model.forward(inputs)
    return nc.softmax_cross_entropy(logits, targets, nc.IGNORE_INDEX)


@timed("train_step")
def train_step(
    model: TransformerModel,
    handle: AttachHandle,
    batch: Sequence[EncodedExample],
    state: OptimizerState,
    hyper: OptimizerHyper,
    lr: float,
) -> float:
    """One optimizer step over a batch; returns the mean example loss."""
    trainable = {name: model.params[name] for name in handle.trainable}
    for tensor in trainable.values():
        tensor.zero_grad()
    total = 0.0
    for encoded in batch:
        loss = _example_loss(model, encoded, handle.virtual_tokens)
        total += loss.item()
        nc.backward(nc.scale(loss, 1.0 / len(batch)))
    grads = {
        name: t.grad if t.grad is not None else np.zeros_like(t.data)
        for name, t in trainable.items()
    }
    optimizer_step(trainable, grads, state, hyper, lr)
    return total / len(batch)


def _verify_frozen(model: TransformerModel, before: dict[str, np.ndarray]) -> None:
    changed = [name for name, data in before.items() if not np.array_equal(model.params[name].data, data)]
    if changed:
        raise TrainingError(f"frozen parameters changed during training: {changed}")


def train(
    config: ExperimentConfig,
    registry: Optional[MethodRegistry] = None,
    output_dir: Optional[Union[str, Path]] = None,
    evaluate_splits: bool = True,
) -> RunReport:
    """
    Train the configured method and write adapter.ckpt, report.json, metrics.prom.

    Raises:
        ConfigError: invalid config, method or dataset (before any compute)
        DataError: unreadable data or over-long examples
        TrainingError: non-finite loss or a modified frozen parameter
    """
    configure_debug()
    prepared = _prepare(config, registry)
    out = Path(output_dir or config.output_dir)
    train_cfg = config.train
    peft_type = config.method.peft_type

    model = build_base(config, prepared.tokenizer)
    handle = attach(model, prepared.registry, prepared.tuner_config, seed=train_cfg.seed)
    trainable_count = count_parameters(model, trainable_only=True)
    track_trainable(peft_type, trainable_count)

    train_set = _encode_split(prepared, "train", handle.virtual_tokens)
    schedule = batch_schedule(len(train_set), train_cfg)
    frozen_before = model.snapshot(handle.frozen)
    hyper = OptimizerHyper.from_train(train_cfg)
    state = OptimizerState()

    logger.info(
        "Training %s on %s: %d steps, %d trainable / %d total parameters",
        peft_type, prepared.descriptor.name, len(schedule), trainable_count, count_parameters(model),
    )
    id_batches = []
    losses = []
    start = time.perf_counter()
    for step, (epoch, positions) in enumerate(schedule):
        batch = [train_set[p] for p in positions]
        ids = [ex.index for ex in batch]
        id_batches.append(ids)
        logger.debug("step %d epoch %d batch %s", step, epoch, fingerprint(ids)[:16])

        loss = train_step(model, handle, batch, state, hyper, learning_rate(train_cfg, step, len(schedule)))
        if not math.isfinite(loss):
            raise TrainingError(f"loss became {loss} at step {step}")
        losses.append(loss)
        track_train_step(peft_type, loss)
        if (step + 1) % train_cfg.log_every == 0 or step == len(schedule) - 1:
            logger.info("step %d/%d loss %.6f", step + 1, len(schedule), loss)
    train_seconds = time.perf_counter() - start

    _verify_frozen(model, frozen_before)
    base_fp = config.base_fingerprint()
    checkpoint = save_adapter(model, handle, out / CHECKPOINT_FILE, metadata={"base": base_fp})

    report = RunReport(
        peft_type=peft_type,
        dataset=prepared.descriptor.name,
        steps=len(schedule),
        final_loss=losses[-1] if losses else None,
        loss_history=losses,
        trainable_params=trainable_count,
        total_params=count_parameters(model),
        train_seconds=train_seconds,
        config_fingerprint=config.fingerprint(),
        base_fingerprint=base_fp,
        batch_fingerprint=sequence_fingerprint(id_batches),
        checkpoint=str(checkpoint),
    )
    if evaluate_splits:
        _evaluate_all(model, handle, prepared, report)

    write_json(out / REPORT_FILE, report.to_json())
    write_metrics(out)
    logger.info("Run written to %s", out)
    return report


# ============================================================================
# EVALUATION
# ============================================================================


def greedy_decode(
    model: TransformerModel,
    prompt: Sequence[int],
    max_new_tokens: int,
    virtual_tokens: int = 0,
) -> list[int]:
    """Argmax continuation of ``prompt`` until EOS, the budget or max_seq."""
    ids = list(prompt)
    generated = []
    with nc.no_grad():
        for _ in range(max_new_tokens):
            if len(ids) + virtual_tokens > model.spec.max_seq:
                break
            logits = model.forward(ids)
            next_id = int(np.argmax(logits.data[-1]))
            if next_id == EOS:
                break
            generated.append(next_id)
            ids.append(next_id)
    return generated


def next_token_predictions(model: TransformerModel, encoded: EncodedExample, virtual_tokens: int) -> tuple[list[int], list[int], list[bool]]:
    """Argmax at each position against the next gold token, with its mask."""
    inputs = encoded.ids[:-1]
    with nc.no_grad():
        logits = model.forward(inputs).data[virtual_tokens:]
    preds = np.argmax(logits, axis=1).tolist()
    return preds, encoded.ids[1:], encoded.loss_mask[1:]


@timed("evaluate_split")
def evaluate(
    model: TransformerModel,
    handle: AttachHandle,
    prepared: _Prepared,
    split: str,
) -> tuple[MetricReport, str]:
    """Metrics for one split and the fingerprint of its example order."""
    eval_cfg = prepared.config.eval
    encoded = _encode_split(prepared, split, handle.virtual_tokens)
    examples = load_split(prepared.descriptor, split, prepared.config.train.seed)
    golds = [ex.output for ex in examples]
    labels = prepared.descriptor.labels()

    report = MetricReport(examples=len(encoded))
    if eval_cfg.compute_token_accuracy:
        pred_ids, gold_ids, mask = [], [], []
        for enc in encoded:
            p, g, m = next_token_predictions(model, enc, handle.virtual_tokens)
            pred_ids += p
            gold_ids += g
            mask += m
        report.token_accuracy = token_accuracy(pred_ids, gold_ids, mask)

    with ProfileBlock(f"decode:{split}") as block:
        preds = [
            prepared.tokenizer.decode(
                greedy_decode(model, enc.prompt, eval_cfg.max_new_tokens, handle.virtual_tokens),
                skip_special=True,
            )
            for enc in encoded
        ]
    track_inference(handle.peft_type, block.elapsed)
    report.time_per_example = block.elapsed / max(1, len(encoded))
    report.peak_memory_bytes = block.peak_bytes

    if eval_cfg.compute_classification_metrics:
        if prepared.descriptor.task_kind == "classification" and labels:
            scores = classification_scores(preds, golds, labels)
            report.accuracy = scores.accuracy
            report.macro_f1 = scores.macro_f1
            report.invalid_rate = scores.invalid_rate
            report.per_class = scores.per_class
        else:
            matches = sum(p.strip() == g.strip() for p, g in zip(preds, golds))
            report.accuracy = matches / max(1, len(golds))

    if eval_cfg.compute_pscp:
        performance = next(
            (v for v in (report.macro_f1, report.accuracy, report.token_accuracy) if v is not None),
            0.0,
        )
        report.pscp = pscp(
            performance,
            count_parameters(model, trainable_only=True),
            report.time_per_example,
            report.peak_memory_bytes,
            eval_cfg.pscp_constants(get_settings().pscp),
        )
    logger.info(
        "%s/%s: token_acc=%s acc=%s macro_f1=%s",
        prepared.descriptor.name, split, report.token_accuracy, report.accuracy, report.macro_f1,
    )
    return report, fingerprint([ex.index for ex in examples])


def _evaluate_all(model: TransformerModel, handle: AttachHandle, prepared: _Prepared, report: RunReport) -> None:
    for split in prepared.config.dataset.eval_splits:
        metrics, eval_fp = evaluate(model, handle, prepared, split)
        report.metrics[split] = metrics
        report.eval_fingerprints[split] = eval_fp


def predict(
    config: ExperimentConfig,
    checkpoint: Union[str, Path],
    registry: Optional[MethodRegistry] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> RunReport:
    """
    Load an adapter onto the seeded base model and evaluate the configured splits.

    Raises:
        CompatibilityError: checkpoint spec, seed, base or method does not match the config
    """
    configure_debug()
    prepared = _prepare(config, registry)
    out = Path(output_dir or config.output_dir)
    _, saved, _ = read_checkpoint(checkpoint)
    if saved.get("peft_type") != config.method.peft_type:
        raise CompatibilityError(
            f"checkpoint holds a {saved.get('peft_type')} adapter but the config names {config.method.peft_type}"
        )
    if int(saved.get("seed", config.train.seed)) != config.train.seed:
        raise CompatibilityError(
            f"checkpoint was trained on the base built with seed {saved.get('seed')}, config seed is {config.train.seed}"
        )
    base_fp = config.base_fingerprint()
    if saved.get("base", base_fp) != base_fp:
        raise CompatibilityError(
            "checkpoint was trained on a different base model (pretrain recipe or spec differs from the config)"
        )

    model = build_base(config, prepared.tokenizer)
    handle = load_adapter(model, prepared.registry, checkpoint)
    report = RunReport(
        peft_type=handle.peft_type,
        dataset=prepared.descriptor.name,
        trainable_params=count_parameters(model, trainable_only=True),
        total_params=count_parameters(model),
        config_fingerprint=config.fingerprint(),
        base_fingerprint=base_fp,
        checkpoint=str(checkpoint),
    )
    _evaluate_all(model, handle, prepared, report)
    write_json(out / PREDICT_REPORT_FILE, report.to_json())
    write_metrics(out)
    return report


# ============================================================================
# BENCHMARK
# ============================================================================


@dataclass
class BenchCell:
    peft_type: str
    dataset: str
    status: str
    macro_f1: Optional[float] = None
    accuracy: Optional[float] = None
    pscp: Optional[float] = None
    batch_fingerprint: Optional[str] = None
    error: Optional[str] = None
    exit_code: int = 0


@dataclass
class BenchResult:
    cells: list[BenchCell]
    table: pd.DataFrame
    markdown: str

    @property
    def failed(self) -> list[BenchCell]:
        return [c for c in self.cells if c.status != TaskStatus.COMPLETED.value]


def run_cell(config: ExperimentConfig, registry: MethodRegistry, output_dir: Path) -> RunReport:
    """Train then predict from the written checkpoint."""
    trained = train(config, registry, output_dir, evaluate_splits=False)
    report = predict(config, trained.checkpoint, registry, output_dir)
    report.steps = trained.steps
    report.final_loss = trained.final_loss
    report.batch_fingerprint = trained.batch_fingerprint
    report.train_seconds = trained.train_seconds
    return report


def _cell_value(value: Optional[float], status: str) -> str:
    if status != TaskStatus.COMPLETED.value:
        return "failed"
    return "n/a" if value is None else f"{value * 100:.1f}"


def bench_table(cells: Sequence[BenchCell], value: str = "macro_f1") -> pd.DataFrame:
    """Methods × datasets pivot of a cell attribute (×100, one decimal)."""
    frame = pd.DataFrame(
        [{"method": c.peft_type, "dataset": c.dataset, value: _cell_value(getattr(c, value), c.status)} for c in cells]
    )
    return frame.pivot(index="method", columns="dataset", values=value).sort_index().sort_index(axis=1)


def markdown_table(frame: pd.DataFrame) -> str:
    """GitHub-style table with the index as the first column."""
    header = [frame.index.name or "", *[str(c) for c in frame.columns]]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for index, row in frame.iterrows():
        lines.append("| " + " | ".join([str(index), *[str(v) for v in row.tolist()]]) + " |")
    return "\n".join(lines)


@log_execution_time
def bench(
    configs: Sequence[Union[str, Path, ExperimentConfig]],
    bench_dir: Union[str, Path] = "runs/bench",
    registry: Optional[MethodRegistry] = None,
    workers: Optional[int] = None,
) -> BenchResult:
    """
    Run every config and emit bench.md / bench.json in ``bench_dir``.

    Failed runs appear as ``failed`` cells; callers decide the exit status.

    Raises:
        ConfigError: no configs, unreadable configs, or differing eval flags
    """
    configure_debug()
    if not configs:
        raise ConfigError("bench needs at least one config")
    loaded = [c if isinstance(c, ExperimentConfig) else load_experiment(c) for c in configs]
    flags = {c.eval.model_dump_json() for c in loaded}
    if len(flags) > 1:
        raise ConfigError("bench configs must share identical eval settings")
    cells_seen = [(c.method.peft_type, c.dataset.name) for c in loaded]
    if len(set(cells_seen)) != len(cells_seen):
        raise ConfigError("bench configs must name distinct (method, dataset) pairs")
    registry = registry if registry is not None else discover_methods()
    bench_dir = Path(bench_dir)
    compute_pscp = loaded[0].eval.compute_pscp

    jobs = []
    with JobQueue(workers=workers or get_settings().bench_workers) as queue:
        for config in loaded:
            label = f"{config.method.peft_type}__{config.dataset.name}"
            job_id = queue.add_task(run_cell, config, registry, bench_dir / label, label=label)
            jobs.append((config, job_id))
        queue.join()
        statuses = [(config, queue.get_task_status(job_id)) for config, job_id in jobs]
        logger.info("Bench jobs finished: %s", queue.get_queue_stats())

    cells = []
    for config, status in statuses:
        cell = BenchCell(config.method.peft_type, config.dataset.name, status["status"].value)
        if status["status"] == TaskStatus.COMPLETED:
            report: RunReport = status["result"]
            split = config.dataset.eval_splits[0]
            cell.macro_f1 = report.metrics[split].macro_f1
            cell.accuracy = report.metrics[split].accuracy
            cell.pscp = report.metrics[split].pscp
            cell.batch_fingerprint = report.batch_fingerprint
        else:
            cell.error = status["error"]["error_message"]
            cell.exit_code = status["error"]["exit_code"]
        cells.append(cell)

    table = bench_table(cells, "macro_f1")
    sections = ["## Macro F1", "", markdown_table(table)]
    if compute_pscp:
        sections += ["", "## PSCP", "", markdown_table(bench_table(cells, "pscp"))]
    markdown = "\n".join(sections) + "\n"

    bench_dir.mkdir(parents=True, exist_ok=True)
    (bench_dir / "bench.md").write_text(markdown, encoding="utf-8")
    write_json(bench_dir / "bench.json", {
        "cells": [cell.__dict__ for cell in cells],
        "macro_f1": table.to_dict(),
    })
    for cell in cells:
        if cell.error:
            logger.error("bench cell %s/%s failed: %s", cell.peft_type, cell.dataset, cell.error)
    return BenchResult(cells=cells, table=table, markdown=markdown)


__all__ = [
    "BenchResult",
    "OptimizerHyper",
    "OptimizerState",
    "RunReport",
    "batch_schedule",
    "bench",
    "build_base",
    "evaluate",
    "greedy_decode",
    "learning_rate",
    "optimizer_step",
    "predict",
    "pretrain_base",
    "train",
]
