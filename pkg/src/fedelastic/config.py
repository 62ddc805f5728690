"""Experiment configuration: YAML files with nested sections.

Every key is checked: unknown keys, wrong types and out-of-range values are
all collected and reported together, each under its dotted key path
(``algorithm.lambda2``), before any compute starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import yaml

from .errors import ConfigurationError, FedElasticError
from .model import ModelSpec
from .partition import PartitionSpec
from .protocol import AlgorithmConfig, ParticipationSpec, algorithm_problems, canonical_variant

OUTPUT_ENV = "FEDELASTIC_OUTPUT_DIR"
MNIST_ENV = "FEDELASTIC_MNIST_DIR"
DATASET_KINDS = ("synthetic", "mnist", "quadratic")
PRESET_DIR = Path(__file__).parent / "presets"


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    # synthetic classification clusters
    num_classes: int = 10
    input_dim: int = 20
    n_train: int = 5000
    n_test: int = 1000
    class_separation: float = 2.0
    # mnist idx files; relative names resolve against ``dir``
    dir: str | None = None
    train_images: str = "train-images.idx3-ubyte"
    train_labels: str = "train-labels.idx1-ubyte"
    test_images: str = "t10k-images.idx3-ubyte"
    test_labels: str = "t10k-labels.idx1-ubyte"
    # two-client linear regression family for convex diagnostics
    dim: int = 4
    n_per_client: int = 200
    beta: float = 1.0


@dataclass
class ModelSection:
    kind: str = "logistic"
    hidden: list = field(default_factory=list)
    activation: str = "relu"


@dataclass
class PartitionSection:
    mode: str = "iid"
    clients: int = 10
    alpha: float = 0.3
    size_mode: str = "equal"
    sigma: float = 0.3


@dataclass
class AlgorithmSection:
    variant: str = "feddyn_en"
    lambda1: float = 0.0
    lambda2: float = 0.1
    epsilon: float = 0.0
    lr: float = 0.1
    global_lr: float = 1.0
    epochs: int = 1
    batch_size: int = 10
    steps: int | None = None
    inner: str = "subgradient"
    renormalize: bool = False


@dataclass
class ParticipationSection:
    rate: float = 1.0


@dataclass
class MeteringSection:
    bin: float = 0.01
    pooling: str = "round"


@dataclass
class EvaluationSection:
    every: int = 1
    train_loss: bool = False


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class DiagnosticsSection:
    enabled: bool = False
    heavy: bool = False
    seeds: int = 5
    residuals: bool = False
    tolerance: float = 1e-10


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    algorithm: AlgorithmSection = field(default_factory=AlgorithmSection)
    participation: ParticipationSection = field(default_factory=ParticipationSection)
    metering: MeteringSection = field(default_factory=MeteringSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: OutputSection = field(default_factory=OutputSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    rounds: int = 10
    seed: int = 0
    threads: int = 1
    name: str = "experiment"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def semantic_dict(self) -> dict:
        """The config minus execution-only keys (thread count, output location)."""
        d = self.to_dict()
        d.pop("threads")
        d.pop("output")
        return d

    # domain objects; only valid after validate() passed
    def model_spec(self, input_dim: int, num_classes: int | None) -> ModelSpec:
        m = self.model
        if m.kind == "linear":
            return ModelSpec("linear", input_dim)
        return ModelSpec(m.kind, input_dim, num_classes, tuple(m.hidden), m.activation)

    def partition_spec(self) -> PartitionSpec:
        p = self.partition
        return PartitionSpec(p.mode, p.clients, p.alpha, p.size_mode, p.sigma, seed=self.seed)

    def algorithm_config(self) -> AlgorithmConfig:
        return AlgorithmConfig(**dataclasses.asdict(self.algorithm))

    def participation_spec(self) -> ParticipationSpec:
        return ParticipationSpec(self.participation.rate, seed=self.seed)

    @property
    def num_clients(self) -> int:
        return 2 if self.dataset.kind == "quadratic" else self.partition.clients

    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output.dir)


def _type_ok(value, default, ftype) -> bool:
    if isinstance(ftype, str):
        allow_none = "None" in ftype
    else:
        allow_none = False
    if value is None:
        return allow_none
    if isinstance(default, bool) or ftype == "bool":
        return isinstance(value, bool)
    if isinstance(default, float) or ftype.startswith("float"):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int) or ftype.startswith("int"):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str) or ftype.startswith("str"):
        return isinstance(value, str)
    if isinstance(default, list) or ftype == "list":
        return isinstance(value, list)
    return True


def _fill(cls, raw, path: str, errors: list[str]):
    """Build dataclass ``cls`` from mapping ``raw``, collecting problems in ``errors``."""
    obj = cls()
    if raw is None:
        return obj
    if not isinstance(raw, dict):
        errors.append(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
        return obj
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else str(key)
        f = fields.get(key)
        if f is None:
            errors.append(f"{where}: unknown key")
            continue
        default = getattr(obj, key)
        if isinstance(default, float) and isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-4) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if dataclasses.is_dataclass(default):
            setattr(obj, key, _fill(type(default), value, where, errors))
        elif _type_ok(value, default, f.type):
            if isinstance(default, float) and value is not None:
                value = float(value)
            setattr(obj, key, value)
        else:
            errors.append(f"{where}: expected {f.type}, got {value!r}")
    return obj


def _problems(cfg: ExperimentConfig) -> list[str]:
    errs = []
    d = cfg.dataset
    if d.kind not in DATASET_KINDS:
        errs.append(f"dataset.kind: must be one of {DATASET_KINDS}")
    elif d.kind == "synthetic":
        if d.num_classes < 2:
            errs.append("dataset.num_classes: need at least 2 classes")
        if d.input_dim < 1:
            errs.append("dataset.input_dim: must be positive")
        if d.n_train < 1 or d.n_test < 1:
            errs.append("dataset.n_train/n_test: must be positive")
    elif d.kind == "quadratic":
        if d.dim < 1 or d.n_per_client < d.dim:
            errs.append("dataset.dim/n_per_client: need n_per_client >= dim >= 1")
        if not d.beta > 0:
            errs.append("dataset.beta: must be positive")
        if cfg.model.kind != "linear":
            errs.append("model.kind: the quadratic dataset needs a linear model")
    if d.kind != "quadratic" and cfg.model.kind == "linear":
        errs.append("model.kind: linear regression needs the quadratic dataset")
    for key in ("rounds", "seed"):
        if getattr(cfg, key) < 0:
            errs.append(f"{key}: must be >= 0")
    if cfg.threads < 1:
        errs.append("threads: must be >= 1")
    if cfg.evaluation.every < 0:
        errs.append("evaluation.every: must be >= 0")
    if cfg.diagnostics.seeds < 1:
        errs.append("diagnostics.seeds: must be >= 1")
    if cfg.metering.pooling not in ("round", "client"):
        errs.append("metering.pooling: must be 'round' or 'client'")
    if not cfg.metering.bin > 0:
        errs.append("metering.bin: must be > 0")
    if cfg.diagnostics.enabled and cfg.model.kind == "mlp":
        errs.append("diagnostics.enabled: the convergence diagnostics need a convex model")
    try:
        # model dims are data dependent; validate the rest of the spec with placeholders
        nc = 1 if cfg.model.kind == "linear" else max(cfg.dataset.num_classes, 2)
        cfg.model_spec(1, nc)
    except ConfigurationError as exc:
        errs.extend(f"model: {e}" for e in exc.errors)
    try:
        cfg.partition_spec()
    except FedElasticError as exc:
        errs.append(f"partition: {exc}")
    try:
        variant = canonical_variant(cfg.algorithm.variant)
    except ConfigurationError as exc:
        errs.append(f"algorithm.variant: {exc}")
    else:
        fields = dict(dataclasses.asdict(cfg.algorithm), variant=variant)
        errs.extend(algorithm_problems(SimpleNamespace(**fields)))
    try:
        cfg.participation_spec()
    except ConfigurationError as exc:
        errs.append(str(exc))
    return errs


def from_dict(raw) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _fill(ExperimentConfig, raw or {}, "", errors)
    if not errors:
        errors = _problems(cfg)
    if errors:
        raise ConfigurationError(f"{len(errors)} configuration error(s): " + "; ".join(errors), errors)
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        cand = preset_path(str(path))
        if cand is None:
            raise ConfigurationError(f"config file not found: {path}")
        path = cand
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML: {exc}") from None
    return from_dict(raw)


def config_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


def preset_path(name: str) -> Path | None:
    """Resolve ``name``, ``presets/name`` or ``name.yaml`` to a bundled preset file."""
    stem = Path(name).name
    if stem.endswith(".yaml"):
        stem = stem[:-5]
    p = PRESET_DIR / f"{stem}.yaml"
    return p if p.exists() else None


def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Return a re-validated copy with CLI flag overrides applied (``None`` = keep)."""
    raw = cfg.to_dict()
    mapping = {"lambda1": ("algorithm", "lambda1"), "lambda2": ("algorithm", "lambda2"),
               "epsilon": ("algorithm", "epsilon"), "variant": ("algorithm", "variant"),
               "seed": (None, "seed"), "threads": (None, "threads"), "rounds": (None, "rounds"),
               "output": ("output", "dir")}
    for key, value in overrides.items():
        if value is None:
            continue
        section, name = mapping[key]
        if section is None:
            raw[name] = value
        else:
            raw[section][name] = value
    return from_dict(raw)
