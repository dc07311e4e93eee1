"""
Method Registry and Adapter Lifecycle
=====================================
Manifest-driven discovery of PEFT methods, schema-driven hyperparameter
parsing, and the attach / detach / merge / save / load lifecycle.

A method directory holds two TOML files:

``manifest``::

    [method]
    peft_type = "lora"
    family = "reparametrized"        # reparametrized | soft_prompt | adapter | selective
    prefix = "lora."
    description = "Low-rank delta on attention projections"

    [hyperparameters.r]
    kind = "int"                     # int | float | string | string-list | pattern
    default = 2
    constraint = ">= 1"              # >= N | > N | <= N | < N | in [a, b] | nonempty

``impl``, either a single primitive receiving every hyperparameter::

    [impl]
    builtin = "lora"

or a composition of primitives with literal or ``$hyperparameter`` args::

    [[impl.steps]]
    primitive = "bottleneck"
    args = { bottleneck_dim = "$bottleneck_dim", placement = "parallel" }

Built-in methods live in ``peftlab/builtin_methods`` and go through the same
loader as plugin directories under PEFT_DIR.
"""
from __future__ import annotations

import json
import logging
import re
import struct

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from peftlab.core.errors import (
    CapabilityError,
    CompatibilityError,
    ConfigError,
    DiscoveryIOError,
    RegistrationError,
    RegistryError,
    StateError,
)
from peftlab.core.methods import PRIMITIVES, HookRecord, Injection, Primitive, expected_count
from peftlab.core.model import HookTable, TransformerModel, detach, spec_fingerprint
from peftlab.core.telemetry import track_discovery

logger = logging.getLogger(__name__)

BUILTIN_DIR = Path(__file__).resolve().parent.parent / "builtin_methods"
MANIFEST_FILE = "manifest"
IMPL_FILE = "impl"
MERGEABLE_PRIMITIVES = frozenset({"lora"})

FAMILIES = ("reparametrized", "soft_prompt", "adapter", "selective")
KINDS = ("int", "float", "string", "string-list", "pattern")

Family = Literal["reparametrized", "soft_prompt", "adapter", "selective"]
Kind = Literal["int", "float", "string", "string-list", "pattern"]

_COMPARISON = re.compile(r"^(>=|<=|>|<)\s*(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)$")
_MEMBERSHIP = re.compile(r"^in\s*\[(.*)\]$")


# ============================================================================
# MANIFEST TYPES
# ============================================================================


class HyperParameter(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    kind: Kind
    default: Any
    constraint: str = ""


class ImplStep(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    primitive: str
    args: dict[str, Any] = {}


class MethodManifest(BaseModel):
    """A discovered method's schema and primitive composition."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    peft_type: str
    family: Family
    prefix: str
    description: str = ""
    hyperparameters: tuple[HyperParameter, ...] = ()
    steps: tuple[ImplStep, ...]
    origin: str = "builtin"

    def schema_keys(self) -> list[str]:
        return [hp.name for hp in self.hyperparameters]

    def defaults(self) -> dict[str, Any]:
        return {hp.name: hp.default for hp in self.hyperparameters}


class TunerConfig(BaseModel):
    """Resolved hyperparameters: every schema key present."""

    model_config = ConfigDict(frozen=True)

    peft_type: str
    values: dict[str, Any]


# ============================================================================
# KINDS & CONSTRAINTS
# ============================================================================


def coerce_value(kind: str, value: Any, name: str) -> Any:
    """
    Coerce a raw value (native or string) to the hyperparameter's kind.

    Raises:
        ConfigError: value cannot represent the kind
    """
    try:
        if kind == "int":
            if isinstance(value, bool):
                raise ValueError("boolean")
            if isinstance(value, float):
                if not value.is_integer():
                    raise ValueError("fractional")
                return int(value)
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError("boolean")
            return float(str(value).strip()) if isinstance(value, str) else float(value)
        if kind == "string":
            if isinstance(value, (list, dict)):
                raise ValueError("not a scalar")
            return str(value)
        # string-list / pattern
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        if isinstance(value, (list, tuple)):
            return [str(item) for item in value]
        raise ValueError("not a list")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"hyperparameter '{name}': cannot read {value!r} as {kind} ({e})") from e


def validate_constraint(kind: str, constraint: str) -> None:
    """Reject constraints the grammar or the kind does not support."""
    text = constraint.strip()
    if not text:
        return
    if _COMPARISON.match(text):
        if kind not in ("int", "float"):
            raise ConfigError(f"comparison constraint '{text}' needs a numeric kind, not {kind}")
        return
    if _MEMBERSHIP.match(text):
        if kind not in ("string", "string-list", "pattern", "int"):
            raise ConfigError(f"membership constraint '{text}' is not supported for kind {kind}")
        return
    if text == "nonempty":
        if kind not in ("string", "string-list", "pattern"):
            raise ConfigError(f"'nonempty' needs a string or list kind, not {kind}")
        return
    raise ConfigError(f"unrecognized constraint '{text}'")


def _members(text: str) -> list[str]:
    inner = _MEMBERSHIP.match(text).group(1)
    return [item.strip().strip("\"'") for item in inner.split(",") if item.strip()]


def check_constraint(name: str, kind: str, constraint: str, value: Any) -> None:
    """
    Raises:
        ConfigError: value violates the constraint
    """
    text = constraint.strip()
    if kind == "pattern" and any(not p for p in value):
        raise ConfigError(f"hyperparameter '{name}': patterns must be nonempty")
    if not text:
        return
    comparison = _COMPARISON.match(text)
    if comparison:
        op, bound = comparison.group(1), float(comparison.group(2))
        ok = {
            ">=": value >= bound,
            ">": value > bound,
            "<=": value <= bound,
            "<": value < bound,
        }[op]
        if not ok:
            raise ConfigError(f"hyperparameter '{name}' = {value} violates '{text}'")
        return
    if _MEMBERSHIP.match(text):
        allowed = _members(text)
        items = value if isinstance(value, list) else [value]
        bad = [item for item in items if str(item) not in allowed]
        if bad:
            raise ConfigError(f"hyperparameter '{name}': {bad} not in {allowed}")
        return
    if text == "nonempty" and len(value) == 0:
        raise ConfigError(f"hyperparameter '{name}' must be nonempty")


# ============================================================================
# TUNER
# ============================================================================


class Tuner:
    """Resolves a manifest's steps against a config and runs the primitives."""

    def __init__(self, manifest: MethodManifest):
        self.manifest = manifest

    def resolve(self, values: Mapping[str, Any]) -> list[tuple[Primitive, BaseModel]]:
        """
        Primitive settings for every step, with ``$name`` args substituted.

        Raises:
            ConfigError: the primitive rejects the resolved arguments
        """
        resolved = []
        for step in self.manifest.steps:
            primitive = PRIMITIVES[step.primitive]
            args = {}
            for key, arg in step.args.items():
                if isinstance(arg, str) and arg.startswith("$"):
                    arg = values[arg[1:]]
                args[key] = arg
            try:
                settings = primitive.settings(**args)
            except ValidationError as e:
                problems = "; ".join(
                    f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
                )
                raise ConfigError(f"{self.manifest.peft_type}: {problems}") from e
            resolved.append((primitive, settings))
        return resolved

    def apply(self, model: TransformerModel, values: Mapping[str, Any], rng) -> list[Injection]:
        return [
            primitive.apply(model, settings, self.manifest.prefix, rng)
            for primitive, settings in self.resolve(values)
        ]

    def expected_count(self, model: TransformerModel, values: Mapping[str, Any]) -> int:
        """Closed-form trainable count on an unattached model."""
        return sum(expected_count(model, p.name, s) for p, s in self.resolve(values))


# ============================================================================
# LOADER
# ============================================================================


def _line_of(text: str, token: str) -> int:
    for number, line in enumerate(text.splitlines(), start=1):
        if token in line:
            return number
    return 1


def _parse_toml(path: Path) -> tuple[dict, str]:
    text = path.read_text(encoding="utf-8")
    try:
        return tomllib.loads(text), text
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def _load_hyperparameters(path: Path, text: str, table: Any) -> tuple[HyperParameter, ...]:
    if not isinstance(table, dict):
        raise ConfigError(f"{path}:{_line_of(text, 'hyperparameters')}: [hyperparameters] must be a table")
    params = []
    for name, entry in table.items():
        line = _line_of(text, f"hyperparameters.{name}")
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}:{line}: hyperparameter '{name}' must be a table")
        if "default" not in entry:
            raise ConfigError(f"{path}:{line}: hyperparameter '{name}' has no default")
        kind = entry.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"{path}:{line}: hyperparameter '{name}' has unknown kind {kind!r}; use one of {list(KINDS)}")
        unknown = set(entry) - {"kind", "default", "constraint"}
        if unknown:
            raise ConfigError(f"{path}:{line}: hyperparameter '{name}' has unknown fields {sorted(unknown)}")
        constraint = str(entry.get("constraint", ""))
        try:
            validate_constraint(kind, constraint)
            default = coerce_value(kind, entry["default"], name)
            check_constraint(name, kind, constraint, default)
        except ConfigError as e:
            raise ConfigError(f"{path}:{line}: {e}") from e
        params.append(HyperParameter(name=name, kind=kind, default=default, constraint=constraint))
    return tuple(params)


def _load_steps(path: Path, text: str, data: dict, hp_names: list[str]) -> tuple[ImplStep, ...]:
    impl = data.get("impl")
    if not isinstance(impl, dict):
        raise ConfigError(f"{path}:1: missing [impl] table")
    if ("builtin" in impl) == ("steps" in impl):
        raise ConfigError(f"{path}:{_line_of(text, 'impl')}: [impl] needs exactly one of 'builtin' or 'steps'")

    if "builtin" in impl:
        raw_steps = [{"primitive": impl["builtin"], "args": {name: f"${name}" for name in hp_names}}]
    else:
        raw_steps = impl["steps"]
        if not isinstance(raw_steps, list) or not raw_steps:
            raise ConfigError(f"{path}:{_line_of(text, 'impl.steps')}: 'steps' must be a nonempty array of tables")

    steps = []
    for raw in raw_steps:
        primitive = raw.get("primitive") if isinstance(raw, dict) else None
        line = _line_of(text, str(primitive)) if primitive else _line_of(text, "primitive")
        if primitive not in PRIMITIVES:
            raise ConfigError(f"{path}:{line}: unknown primitive {primitive!r}; available: {sorted(PRIMITIVES)}")
        args = raw.get("args", {})
        if not isinstance(args, dict):
            raise ConfigError(f"{path}:{line}: 'args' must be a table")
        for key, arg in args.items():
            if isinstance(arg, str) and arg.startswith("$") and arg[1:] not in hp_names:
                raise ConfigError(f"{path}:{_line_of(text, arg)}: argument '{key}' references undeclared hyperparameter {arg}")
        steps.append(ImplStep(primitive=primitive, args=args))
    return tuple(steps)


def load_method_dir(directory: Path, origin: str) -> Tuner:
    """
    Parse and validate one method directory.

    Raises:
        ConfigError: missing component, syntax error or invalid manifest
    """
    manifest_path = directory / MANIFEST_FILE
    impl_path = directory / IMPL_FILE
    if not manifest_path.is_file():
        raise ConfigError(f"{directory}: missing config descriptor '{MANIFEST_FILE}'")
    if not impl_path.is_file():
        raise ConfigError(f"{directory}: missing implementation descriptor '{IMPL_FILE}'")

    data, text = _parse_toml(manifest_path)
    method = data.get("method")
    if not isinstance(method, dict):
        raise ConfigError(f"{manifest_path}:1: missing [method] table")
    for required in ("peft_type", "prefix"):
        if not str(method.get(required, "")).strip():
            raise ConfigError(f"{manifest_path}:{_line_of(text, required)}: required attribute '{required}' is missing or empty")
    if method.get("family") not in FAMILIES:
        raise ConfigError(
            f"{manifest_path}:{_line_of(text, 'family')}: family must be one of {list(FAMILIES)}, got {method.get('family')!r}"
        )
    unknown = set(method) - {"peft_type", "family", "prefix", "description"}
    if unknown:
        raise ConfigError(f"{manifest_path}:{_line_of(text, sorted(unknown)[0])}: unknown [method] fields {sorted(unknown)}")

    hyperparameters = _load_hyperparameters(manifest_path, text, data.get("hyperparameters", {}))
    impl_data, impl_text = _parse_toml(impl_path)
    steps = _load_steps(impl_path, impl_text, impl_data, [hp.name for hp in hyperparameters])

    manifest = MethodManifest(
        peft_type=str(method["peft_type"]).strip(),
        family=method["family"],
        prefix=str(method["prefix"]).strip(),
        description=str(method.get("description", "")),
        hyperparameters=hyperparameters,
        steps=steps,
        origin=origin,
    )
    tuner = Tuner(manifest)
    # defaults must instantiate every primitive
    tuner.resolve(manifest.defaults())
    return tuner


# ============================================================================
# REGISTRY & DISCOVERY
# ============================================================================


@dataclass
class DiscoveryReport:
    registered: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    duplicates: list[tuple[str, str]] = field(default_factory=list)


class MethodRegistry:
    """Immutable peft_type → Tuner mapping produced by discovery."""

    def __init__(self, tuners: Mapping[str, Tuner], report: Optional[DiscoveryReport] = None):
        self._tuners = MappingProxyType(dict(tuners))
        self.report = report or DiscoveryReport(registered=list(tuners))

    def __contains__(self, peft_type: str) -> bool:
        return peft_type in self._tuners

    def __len__(self) -> int:
        return len(self._tuners)

    def names(self) -> list[str]:
        return sorted(self._tuners)

    def get(self, peft_type: str) -> Tuner:
        try:
            return self._tuners[peft_type]
        except KeyError:
            raise RegistryError(f"unknown peft_type '{peft_type}'; registered: {self.names()}") from None

    def manifest(self, peft_type: str) -> MethodManifest:
        return self.get(peft_type).manifest

    def manifests(self) -> dict[str, MethodManifest]:
        return {name: self._tuners[name].manifest for name in self.names()}

    def describe(self) -> list[dict]:
        """One row per method for ``pf methods list``."""
        rows = []
        for name in self.names():
            manifest = self._tuners[name].manifest
            rows.append({
                "peft_type": name,
                "family": manifest.family,
                "prefix": manifest.prefix,
                "hyperparameters": ", ".join(f"{hp.name}={hp.default}" for hp in manifest.hyperparameters),
                "mergeable": all(s.primitive in MERGEABLE_PRIMITIVES for s in manifest.steps),
                "origin": manifest.origin,
            })
        return rows


def _method_dirs(root: Path) -> list[Path]:
    try:
        entries = sorted(root.iterdir())
    except OSError as e:
        raise DiscoveryIOError(f"cannot read method directory {root}: {e}") from e
    return [p for p in entries if p.is_dir() and not p.name.startswith((".", "__"))]


def discover_methods(peft_dir: Optional[Union[str, Path]] = None) -> MethodRegistry:
    """
    Built-in methods plus every valid method directory under ``peft_dir``.

    ``peft_dir`` defaults to the PEFT_DIR setting, then ``./peft``. Invalid
    directories are skipped with a warning. Duplicate peft_types are collected
    over the whole scan and reported together.

    Raises:
        DiscoveryIOError: explicit directory missing or unreadable
        RegistrationError: a peft_type is registered twice
    """
    from peftlab.config import get_settings

    tuners: dict[str, Tuner] = {}
    report = DiscoveryReport()

    for directory in _method_dirs(BUILTIN_DIR):
        tuner = load_method_dir(directory, origin="builtin")
        tuners[tuner.manifest.peft_type] = tuner
        report.registered.append(tuner.manifest.peft_type)
        track_discovery("builtin", "registered")

    settings = get_settings()
    if peft_dir is None and settings.peft_dir:
        peft_dir = settings.peft_dir
    if peft_dir is None:
        root = settings.default_peft_dir
        if not root.is_dir():
            logger.debug("No plugin directory at %s; using built-in methods only", root)
            return MethodRegistry(tuners, report)
    else:
        root = Path(peft_dir)
        if not root.is_dir():
            raise DiscoveryIOError(f"method directory {root} does not exist or is not a directory")

    for directory in _method_dirs(root):
        try:
            tuner = load_method_dir(directory, origin=str(directory))
        except ConfigError as e:
            logger.warning("Skipping method directory %s: %s", directory.name, e)
            report.skipped.append((directory.name, str(e)))
            track_discovery("plugin", "skipped")
            continue
        except OSError as e:
            logger.warning("Skipping unreadable method directory %s: %s", directory.name, e)
            report.skipped.append((directory.name, str(e)))
            track_discovery("plugin", "skipped")
            continue

        peft_type = tuner.manifest.peft_type
        if peft_type in tuners:
            report.duplicates.append((directory.name, peft_type))
            track_discovery("plugin", "duplicate")
            continue
        tuners[peft_type] = tuner
        report.registered.append(peft_type)
        track_discovery("plugin", "registered")
        logger.info("Registered plugin method %s from %s", peft_type, directory)

    if report.duplicates:
        listing = ", ".join(f"{d} ({t})" for d, t in report.duplicates)
        raise RegistrationError(f"duplicate peft_type registration: {listing}", report=report)

    logger.info("Discovered %d methods (%d skipped)", len(tuners), len(report.skipped))
    return MethodRegistry(tuners, report)


# ============================================================================
# CONFIG PARSING
# ============================================================================


def parse_config(registry: MethodRegistry, peft_type: str, raw: Optional[Mapping[str, Any]] = None) -> TunerConfig:
    """
    Resolve every schema key from ``raw`` (strings or native values) or defaults.

    Raises:
        ConfigError: unknown method or key, unreadable value, constraint violation
    """
    if peft_type not in registry:
        raise ConfigError(f"unknown peft_type '{peft_type}'; registered: {registry.names()}")
    tuner = registry.get(peft_type)
    manifest = tuner.manifest
    raw = dict(raw or {})

    valid = manifest.schema_keys()
    unknown = sorted(set(raw) - set(valid))
    if unknown:
        raise ConfigError(f"unknown hyperparameter(s) {unknown} for {peft_type}; valid keys: {valid}")

    values = {}
    for hp in manifest.hyperparameters:
        value = coerce_value(hp.kind, raw[hp.name], hp.name) if hp.name in raw else hp.default
        check_constraint(hp.name, hp.kind, hp.constraint, value)
        values[hp.name] = value
    tuner.resolve(values)
    return TunerConfig(peft_type=peft_type, values=values)


# ============================================================================
# LIFECYCLE
# ============================================================================


@dataclass
class AttachHandle:
    """The live attachment: trainable/frozen partition and injection state."""

    peft_type: str
    config: TunerConfig
    prefix: str
    injected: list[str]
    unfrozen: list[str]
    frozen: list[str]
    hooks: list[HookRecord]
    merge_fns: list
    virtual_tokens: int = 0
    seed: int = 0

    @property
    def mergeable(self) -> bool:
        return bool(self.merge_fns) and all(fn is not None for fn in self.merge_fns)

    @property
    def trainable(self) -> list[str]:
        return self.injected + self.unfrozen


def _restore(model: TransformerModel, grad_flags: dict[str, bool], hooks: HookTable) -> None:
    for name in [n for n in model.params if n not in grad_flags]:
        del model.params[name]
    for name, flag in grad_flags.items():
        model.params[name].requires_grad = flag
    model.hooks = hooks


def attach(model: TransformerModel, registry: MethodRegistry, config: TunerConfig, seed: int = 0) -> AttachHandle:
    """
    Freeze the base model and inject the method's tensors and hooks.

    Raises:
        StateError: the model already has an active attachment
        ConfigError: unresolvable targets or patterns (model left unchanged)
    """
    if model.active_handle is not None:
        raise StateError(
            f"model already has an active {model.active_handle.peft_type} adapter; detach it first"
        )
    tuner = registry.get(config.peft_type)
    grad_flags = {name: t.requires_grad for name, t in model.params.items()}
    saved_hooks = HookTable(
        site_transforms={site: list(fns) for site, fns in model.hooks.site_transforms.items()},
        kv_prefix=model.hooks.kv_prefix,
        embed_prepend=model.hooks.embed_prepend,
    )
    for tensor in model.params.values():
        tensor.requires_grad = False
        tensor.zero_grad()

    try:
        injections = tuner.apply(model, config.values, np.random.default_rng(seed))
    except Exception:
        _restore(model, grad_flags, saved_hooks)
        raise

    injected = [n for inj in injections for n in inj.injected]
    unfrozen = [n for inj in injections for n in inj.unfrozen]
    prefix = tuner.manifest.prefix
    stray = [n for n in injected if not n.startswith(prefix)]
    if stray:
        _restore(model, grad_flags, saved_hooks)
        raise ConfigError(f"injected names {stray} do not carry prefix '{prefix}'")

    handle = AttachHandle(
        peft_type=config.peft_type,
        config=config,
        prefix=prefix,
        injected=injected,
        unfrozen=unfrozen,
        frozen=[n for n, t in model.params.items() if not t.requires_grad],
        hooks=[h for inj in injections for h in inj.hooks],
        merge_fns=[inj.merge for inj in injections],
        virtual_tokens=sum(inj.virtual_tokens for inj in injections),
        seed=seed,
    )
    model.active_handle = handle
    logger.info(
        "Attached %s: %d trainable / %d total parameters",
        config.peft_type,
        sum(model.params[n].size for n in handle.trainable),
        sum(t.size for t in model.params.values()),
    )
    return handle


def merge(model: TransformerModel, handle: AttachHandle) -> None:
    """
    Fold the method's delta into the base weights and remove the adapter.

    Raises:
        CapabilityError: the method cannot be merged
        StateError: ``handle`` is not the model's active attachment
    """
    if not handle.mergeable:
        raise CapabilityError(f"{handle.peft_type} does not support merge")
    if model.active_handle is not handle:
        raise StateError("handle is not the active attachment of this model")
    for fn in handle.merge_fns:
        fn()
    detach(model, handle)
    logger.info("Merged %s into base weights", handle.peft_type)


# ============================================================================
# CHECKPOINTS
# ============================================================================

CHECKPOINT_MAGIC = b"PFADAPT\0"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sH64sI")


def save_adapter(
    model: TransformerModel,
    handle: AttachHandle,
    path: Union[str, Path],
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    """
    Write the trainable tensors, the TunerConfig and the spec fingerprint.

    ``metadata`` entries join the config JSON (the runner records the base
    model fingerprint there).

    Layout: magic, u16 version, 64-byte spec fingerprint, u32 config length,
    config JSON, u32 tensor count, then per tensor: u16 name length, name,
    u8 rank, u32 extents, little-endian f64 payload.

    Raises:
        StateError: ``handle`` is not the model's active attachment
    """
    if model.active_handle is not handle:
        raise StateError("cannot save: handle is not the active attachment of this model")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {**(metadata or {}), "peft_type": handle.peft_type, "values": handle.config.values, "seed": handle.seed}
    config_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    chunks = [
        _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, spec_fingerprint(model.spec).encode("ascii"), len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(handle.trainable)),
    ]
    for name in handle.trainable:
        data = model.params[name].data
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.info("Saved %s adapter (%d tensors) to %s", handle.peft_type, len(handle.trainable), path)
    return path


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CompatibilityError(f"{self.path}: truncated adapter checkpoint")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: Union[str, Path]) -> tuple[str, dict, dict[str, np.ndarray]]:
    """
    Parse a checkpoint into (spec fingerprint, config dict, tensors).

    Raises:
        CompatibilityError: not an adapter checkpoint, unknown version, truncated
    """
    path = Path(path)
    try:
        reader = _Reader(path.read_bytes(), path)
    except OSError as e:
        raise CompatibilityError(f"cannot read adapter checkpoint {path}: {e}") from e
    magic, version, fp, config_len = reader.unpack(_HEADER.format)
    if magic != CHECKPOINT_MAGIC:
        raise CompatibilityError(f"{path}: not an adapter checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: unsupported checkpoint version {version}")
    config = json.loads(reader.take(config_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(n_bytes), dtype="<f8").reshape(shape).astype(np.float64)
    return fp.decode("ascii"), config, tensors


def load_adapter(model: TransformerModel, registry: MethodRegistry, path: Union[str, Path]) -> AttachHandle:
    """
    Attach the checkpoint's method to ``model`` and restore its tensors.

    Raises:
        CompatibilityError: spec fingerprint or tensor layout mismatch
        RegistryError: checkpoint method not registered
    """
    fp, config_data, tensors = read_checkpoint(path)
    if fp != spec_fingerprint(model.spec):
        raise CompatibilityError(f"{path}: checkpoint was saved for a different model spec")
    peft_type = config_data.get("peft_type", "")
    if peft_type not in registry:
        raise RegistryError(f"{path}: checkpoint method '{peft_type}' is not registered; registered: {registry.names()}")

    config = parse_config(registry, peft_type, config_data.get("values", {}))
    handle = attach(model, registry, config, seed=int(config_data.get("seed", 0)))

    expected = set(handle.trainable)
    problems = sorted(set(tensors) ^ expected)
    problems += [
        name for name in expected & set(tensors)
        if tensors[name].shape != model.params[name].shape
    ]
    if problems:
        detach(model, handle)
        raise CompatibilityError(f"{path}: tensor layout does not match {peft_type}: {problems}")
    for name, data in tensors.items():
        model.params[name].data[...] = data
    logger.info("Loaded %s adapter from %s", peft_type, path)
    return handle


__all__ = [
    "AttachHandle",
    "DiscoveryReport",
    "MethodManifest",
    "MethodRegistry",
    "TunerConfig",
    "attach",
    "detach",
    "discover_methods",
    "load_adapter",
    "merge",
    "parse_config",
    "read_checkpoint",
    "save_adapter",
]
