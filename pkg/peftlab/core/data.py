"""
Dataset Pipeline
================
Descriptors, two-column conversion, the word-level tokenizer and encoding for
classification-as-generation.

Features:
- Dataset registry file (datasets.json): name → descriptor
- Sources: ``builtin:<corpus>`` generators, ``file:<path>`` JSON Lines
  (one file partitioned by split sizes, or a directory with one file per split)
- Conversion: instruction + "\\n" + input columns joined by " [SEP] ";
  output verbalized through the label map when present
- Tokenizer: vocabulary from the bundled corpora plus the characters of
  file datasets, specials at ids 0-3,
  character fallback for unknown words
- Encoding: BOS + input + SEP + output + EOS, loss on output and EOS only
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from peftlab.core import corpora
from peftlab.core.errors import ConfigError, DataError, LengthError
from peftlab.core.numcore import IGNORE_INDEX

logger = logging.getLogger(__name__)

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "[SEP]")
NEWLINE = "\n"
COLUMN_JOINER = " [SEP] "

_TOKEN_PATTERN = re.compile(r"\n|[^\s]+")


# ============================================================================
# DESCRIPTORS
# ============================================================================


class ColumnMap(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_cols: list[str] = Field(min_length=1)
    output_col: str


class DatasetDescriptor(BaseModel):
    """How to read one dataset and cast it to (input, output) text."""

    model_config = ConfigDict(extra="forbid")

    name: str
    source: str
    columns: ColumnMap
    instruction: Optional[str] = None
    label_verbalizer: Optional[dict[str, str]] = None
    splits: dict[str, Union[int, str]]
    task_kind: Literal["classification", "generation"] = "classification"
    label_set: Optional[list[str]] = None
    base_dir: Optional[str] = None

    @field_validator("source")
    @classmethod
    def validate_source(cls, v):
        if not re.match(r"^(builtin|file):.+", v):
            raise ValueError("source must be builtin:<corpus> or file:<path>")
        return v

    @model_validator(mode="after")
    def validate_columns(self):
        if self.columns.output_col in self.columns.input_cols:
            raise ValueError(f"output column '{self.columns.output_col}' is also an input column")
        if self.label_verbalizer is not None:
            texts = list(self.label_verbalizer.values())
            if len(set(texts)) != len(texts):
                raise ValueError("label_verbalizer must be injective")
        if not self.splits:
            raise ValueError("at least one split is required")
        return self

    @property
    def source_kind(self) -> str:
        return self.source.split(":", 1)[0]

    @property
    def source_target(self) -> str:
        return self.source.split(":", 1)[1]

    def labels(self) -> list[str]:
        """Label set for classification metrics; empty for generation tasks."""
        if self.label_set:
            return list(self.label_set)
        if self.label_verbalizer:
            return list(self.label_verbalizer.values())
        return []


class Example(BaseModel):
    """A converted two-field record; ``index`` is its position in the raw split."""

    model_config = ConfigDict(frozen=True)

    input: str
    output: str
    index: int = 0

    @field_validator("input", "output")
    @classmethod
    def nonempty(cls, v):
        if not v.strip():
            raise ValueError("must be nonempty")
        return v


# ============================================================================
# REGISTRY
# ============================================================================


def load_registry(path: Optional[Union[str, Path]] = None) -> dict[str, DatasetDescriptor]:
    """
    Read a datasets.json registry.

    Raises:
        ConfigError: unreadable file or invalid descriptor
    """
    from peftlab.config import get_settings

    path = Path(path) if path is not None else get_settings().resolved_datasets_file
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read dataset registry {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: registry must map names to descriptors")

    registry = {}
    for name, entry in raw.items():
        try:
            registry[name] = DatasetDescriptor(name=name, base_dir=str(path.parent.resolve()), **entry)
        except (ValidationError, TypeError) as e:
            raise ConfigError(f"{path}: dataset '{name}': {e}") from e
    return registry


def get_dataset(name: str, path: Optional[Union[str, Path]] = None) -> DatasetDescriptor:
    registry = load_registry(path)
    if name not in registry:
        raise ConfigError(f"unknown dataset '{name}'; available: {sorted(registry)}")
    return registry[name]


def list_datasets(path: Optional[Union[str, Path]] = None) -> list[dict]:
    rows = []
    for name, descriptor in sorted(load_registry(path).items()):
        rows.append({
            "name": name,
            "source": descriptor.source,
            "task_kind": descriptor.task_kind,
            "splits": ", ".join(f"{k}={v}" for k, v in descriptor.splits.items()),
            "labels": ", ".join(descriptor.labels()),
        })
    return rows


# ============================================================================
# CONVERSION
# ============================================================================


def convert(descriptor: DatasetDescriptor, record: dict, index: int = 0) -> Example:
    """
    Cast a raw record to an (input, output) Example.

    Raises:
        DataError: missing column, label outside the verbalizer, empty field
    """
    cols = descriptor.columns
    missing = [c for c in [*cols.input_cols, cols.output_col] if c not in record]
    if missing:
        raise DataError(f"{descriptor.name}: record {index} is missing column(s) {missing}")

    text = COLUMN_JOINER.join(str(record[c]) for c in cols.input_cols)
    if descriptor.instruction:
        text = f"{descriptor.instruction}{NEWLINE}{text}"

    raw_output = record[cols.output_col]
    if descriptor.label_verbalizer is not None:
        key = str(raw_output)
        if key not in descriptor.label_verbalizer:
            raise DataError(f"{descriptor.name}: record {index} has label {raw_output!r} outside the verbalizer")
        output = descriptor.label_verbalizer[key]
    else:
        output = str(raw_output)

    try:
        return Example(input=text, output=output, index=index)
    except ValidationError as e:
        raise DataError(f"{descriptor.name}: record {index}: {e.errors()[0]['loc'][0]} is empty") from e


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
        if not isinstance(record, dict):
            raise DataError(f"{path}:{lineno}: expected a JSON object")
        records.append(record)
    return records


def raw_records(descriptor: DatasetDescriptor, split: str) -> list[dict]:
    """
    Raises:
        ConfigError: unknown split or inconsistent split layout
        DataError: unreadable or malformed source
    """
    if split not in descriptor.splits:
        raise ConfigError(f"{descriptor.name}: unknown split '{split}'; defined: {list(descriptor.splits)}")
    spec = descriptor.splits[split]

    if descriptor.source_kind == "builtin":
        if not isinstance(spec, int):
            raise ConfigError(f"{descriptor.name}: builtin splits take sizes, got {spec!r}")
        return corpora.generate(descriptor.source_target, split, spec)

    target = Path(descriptor.source_target)
    if not target.is_absolute() and descriptor.base_dir:
        target = Path(descriptor.base_dir) / target

    if isinstance(spec, str):
        return _read_jsonl(target / spec)

    if not all(isinstance(v, int) for v in descriptor.splits.values()):
        raise ConfigError(f"{descriptor.name}: splits must be all sizes or all file names")
    records = _read_jsonl(target)
    start = 0
    for name, size in descriptor.splits.items():
        if name == split:
            break
        start += size
    end = start + spec
    if end > len(records):
        raise DataError(f"{target}: {len(records)} records cannot fill split '{split}' ending at {end}")
    return records[start:end]


def load_split(descriptor: DatasetDescriptor, split: str, seed: int) -> list[Example]:
    """Converted examples in an order determined by ``seed``."""
    records = raw_records(descriptor, split)
    examples = [convert(descriptor, record, index=i) for i, record in enumerate(records)]
    order = np.random.default_rng(seed).permutation(len(examples))
    logger.debug("Loaded %s/%s: %d examples", descriptor.name, split, len(examples))
    return [examples[i] for i in order]


# ============================================================================
# TOKENIZER
# ============================================================================


class Tokenizer:
    """Word-level vocabulary with specials at ids 0-3 and character fallback."""

    def __init__(self, tokens: Sequence[str]):
        vocab = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.vocab: dict[str, int] = {tok: i for i, tok in enumerate(vocab)}
        self.inverse: dict[int, str] = {i: tok for tok, i in self.vocab.items()}

    def __len__(self) -> int:
        return len(self.vocab)

    def tokenize(self, text: str) -> list[str]:
        pieces = []
        for word in _TOKEN_PATTERN.findall(text):
            if word in self.vocab:
                pieces.append(word)
                continue
            unknown = [ch for ch in word if ch not in self.vocab]
            if unknown:
                raise DataError(f"cannot tokenize '{word}': characters {unknown} are not in the vocabulary")
            pieces.extend(word)
        return pieces

    def encode_text(self, text: str) -> list[int]:
        return [self.vocab[piece] for piece in self.tokenize(text)]

    def decode(self, ids: Sequence[int], skip_special: bool = False) -> str:
        text = ""
        for i in ids:
            token = self.inverse.get(int(i))
            if token is None:
                raise DataError(f"token id {i} is not in the vocabulary")
            if skip_special and token in SPECIAL_TOKENS:
                continue
            if token == NEWLINE:
                text += NEWLINE
            else:
                if text and not text.endswith(NEWLINE):
                    text += " "
                text += token
        return text


def decode(tokenizer: Tokenizer, ids: Sequence[int], skip_special: bool = False) -> str:
    return tokenizer.decode(ids, skip_special=skip_special)


def _words(examples: Sequence[Example]) -> set[str]:
    words = set()
    for example in examples:
        words.update(_TOKEN_PATTERN.findall(example.input))
        words.update(_TOKEN_PATTERN.findall(example.output))
    return words


@lru_cache(maxsize=1)
def bundled_tokens() -> tuple[str, ...]:
    """Vocabulary of every bundled corpus: newline, then tokens in sorted order."""
    from peftlab.config import BUNDLED_DATASETS_FILE

    words = set()
    for descriptor in load_registry(BUNDLED_DATASETS_FILE).values():
        if descriptor.source_kind != "builtin":
            continue
        words.update(descriptor.labels())
        for split in descriptor.splits:
            words.update(_words(load_split(descriptor, split, seed=0)))
    words.discard(NEWLINE)
    words.difference_update(SPECIAL_TOKENS)
    return (NEWLINE, *sorted(words))


def build_tokenizer(
    descriptors: Sequence[DatasetDescriptor] = (),
    vocab_size: Optional[int] = None,
) -> Tokenizer:
    """
    Bundled vocabulary extended with the characters of file datasets.

    Bundled tokens keep their ids. Words of a ``file:`` dataset that the
    vocabulary cannot spell add their missing characters, sorted, after them.

    Raises:
        ConfigError: the extended vocabulary exceeds ``vocab_size``
        DataError: unreadable or malformed dataset source
    """
    tokens = list(bundled_tokens())
    known = set(tokens) | set(SPECIAL_TOKENS)
    for descriptor in descriptors:
        if descriptor.source_kind == "builtin":
            continue
        words = set(descriptor.labels())
        for split in descriptor.splits:
            words |= _words(load_split(descriptor, split, seed=0))
        added = sorted({ch for word in words if word not in known for ch in word} - known)
        if not added:
            continue
        size = len(SPECIAL_TOKENS) + len(tokens) + len(added)
        if vocab_size is not None and size > vocab_size:
            raise ConfigError(
                f"dataset '{descriptor.name}' needs {len(added)} new tokens {added}; "
                f"the vocabulary would hold {size} tokens but vocab_size is {vocab_size}"
            )
        logger.info("Dataset %s adds %d tokens to the vocabulary", descriptor.name, len(added))
        tokens += added
        known.update(added)
    tokenizer = Tokenizer(tokens)
    logger.debug("Built tokenizer with %d tokens", len(tokenizer))
    return tokenizer


# ============================================================================
# ENCODING
# ============================================================================


@dataclass(frozen=True)
class EncodedExample:
    ids: list[int]
    loss_mask: list[bool]
    prompt_len: int
    index: int = 0

    @property
    def prompt(self) -> list[int]:
        """BOS + input + SEP: the decoding prefix."""
        return self.ids[: self.prompt_len]

    @property
    def target_ids(self) -> list[int]:
        return self.ids[self.prompt_len:]


def encode(tokenizer: Tokenizer, example: Example, max_seq: int, reserve: int = 0) -> EncodedExample:
    """
    BOS + input + SEP + output + EOS with the loss on output and EOS.

    ``reserve`` is the virtual-token budget the model will prepend.

    Raises:
        LengthError: encoded length plus reserve exceeds max_seq
    """
    prompt = [BOS, *tokenizer.encode_text(example.input), SEP]
    answer = [*tokenizer.encode_text(example.output), EOS]
    if len(answer) < 2:
        raise DataError(f"example {example.index}: output encodes to no tokens")
    ids = prompt + answer
    if len(ids) + reserve > max_seq:
        raise LengthError(
            f"example {example.index} ({example.input!r} -> {example.output!r}): "
            f"{len(ids)} tokens + {reserve} virtual exceed max_seq {max_seq}"
        )
    mask = [False] * len(prompt) + [True] * len(answer)
    return EncodedExample(ids=ids, loss_mask=mask, prompt_len=len(prompt), index=example.index)


def training_pair(encoded: EncodedExample, virtual_tokens: int = 0) -> tuple[list[int], list[int]]:
    """
    Model inputs and next-token targets for one example.

    Inputs drop the final token; target ``t`` is the id at ``t + 1`` when that
    position is supervised, else the ignore sentinel. Virtual-token positions
    are prepended as ignored.
    """
    inputs = encoded.ids[:-1]
    targets = [
        encoded.ids[t + 1] if encoded.loss_mask[t + 1] else IGNORE_INDEX
        for t in range(len(inputs))
    ]
    return inputs, [IGNORE_INDEX] * virtual_tokens + targets
