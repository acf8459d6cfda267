"""Dataset ingestion (extended xyz), splitting, and run configuration.

The xyz dialect, per structure:

    line 1   atom count N
    line 2   comment; ``key=value`` tokens become named scalar targets
    3..N+2   ``<element-symbol-or-Z> x y z`` with coordinates in angstrom

Blocks concatenate back to back.  Parsing is strict about counts,
coordinates and element symbols, and error messages carry line numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .geometry import PointCloud
from .model import HEAD_KINDS, EncoderConfig

__all__ = [
    "MoleculeRecord",
    "parse_xyz",
    "format_xyz",
    "load_xyz",
    "split_dataset",
    "TrainParams",
    "DatasetParams",
    "RunConfig",
    "parse_run_config",
    "load_config",
    "apply_overrides",
    "REFERENCE_CONFIGS",
]

_ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe"
).split()
SYMBOL_TO_Z = {symbol: z for z, symbol in enumerate(_ELEMENTS, start=1)}
Z_TO_SYMBOL = {z: symbol for symbol, z in SYMBOL_TO_Z.items()}


@dataclass
class MoleculeRecord:
    """One structure plus its named scalar targets."""

    cloud: PointCloud
    targets: dict[str, float] = field(default_factory=dict)


def _parse_atom_token(token: str, line_no: int) -> int:
    if token in SYMBOL_TO_Z:
        return SYMBOL_TO_Z[token]
    if token.isdigit() and int(token) >= 1:
        return int(token)
    raise DataFormatError(f"line {line_no}: unknown element {token!r}")


def _parse_targets(comment: str) -> dict[str, float]:
    targets: dict[str, float] = {}
    for token in comment.split():
        if "=" not in token:
            continue
        key, _, raw = token.partition("=")
        try:
            targets[key] = float(raw)
        except ValueError:
            continue  # non-numeric annotations are comment noise
    return targets


def parse_xyz(text: str) -> list[MoleculeRecord]:
    """Parse concatenated xyz blocks into records."""
    lines = text.splitlines()
    records: list[MoleculeRecord] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():  # tolerate blank lines between blocks
            i += 1
            continue
        header_no = i + 1
        try:
            count = int(lines[i].strip())
        except ValueError:
            raise DataFormatError(
                f"line {header_no}: expected an atom count, got {lines[i].strip()!r}"
            ) from None
        if count < 1:
            raise DataFormatError(f"line {header_no}: atom count must be >= 1")
        if i + 1 >= len(lines):
            raise DataFormatError(f"line {header_no}: block is missing its comment line")
        comment = lines[i + 1]
        numbers = []
        positions = []
        for k in range(count):
            line_no = i + 3 + k
            if i + 2 + k >= len(lines):
                raise DataFormatError(
                    f"line {line_no}: unexpected end of file "
                    f"(block at line {header_no} declared {count} atoms)"
                )
            fields = lines[i + 2 + k].split()
            if len(fields) != 4:
                raise DataFormatError(
                    f"line {line_no}: expected 4 fields (element x y z), got {len(fields)}"
                )
            numbers.append(_parse_atom_token(fields[0], line_no))
            try:
                positions.append([float(v) for v in fields[1:]])
            except ValueError:
                raise DataFormatError(
                    f"line {line_no}: unparsable coordinate in {fields[1:]!r}"
                ) from None
        records.append(MoleculeRecord(
            cloud=PointCloud(np.array(numbers), np.array(positions)),
            targets=_parse_targets(comment),
        ))
        i += 2 + count
    return records


def format_xyz(records) -> str:
    """Inverse of parse_xyz; floats use repr, which round-trips exactly."""
    chunks = []
    for record in records:
        cloud = record.cloud
        comment = " ".join(f"{k}={v!r}" for k, v in record.targets.items())
        lines = [str(cloud.size), comment]
        for z, pos in zip(cloud.atomic_numbers, cloud.positions):
            symbol = Z_TO_SYMBOL.get(int(z), str(int(z)))
            lines.append(f"{symbol} {pos[0]!r} {pos[1]!r} {pos[2]!r}")
        chunks.append("\n".join(lines))
    return "\n".join(chunks) + "\n"


def load_xyz(path) -> list[MoleculeRecord]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset not found: {path}")
    return parse_xyz(path.read_text())


def split_dataset(records, fractions, seed: int):
    """Seeded shuffle, then contiguous partition into (train, val, test).

    Validation and test sizes round down; everything left over stays in
    the training split, so the three splits always partition the input.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigError("fractions must be (train, val, test)")
    if any(f <= 0 for f in fractions):
        raise ConfigError("split fractions must be positive")
    if sum(fractions) > 1.0 + 1e-12:
        raise ConfigError(f"split fractions sum to {sum(fractions)}, must be <= 1")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(fractions[1] * n)
    n_test = int(fractions[2] * n)
    n_train = n - n_val - n_test
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise ConfigError(
            f"split of {n} records into {fractions} leaves an empty split "
            f"({n_train}/{n_val}/{n_test})"
        )
    picked = [records[i] for i in order]
    return (picked[:n_train],
            picked[n_train:n_train + n_val],
            picked[n_train + n_val:])


# --------------------------------------------------------------------------
# run configuration

@dataclass(frozen=True)
class TrainParams:
    lr: float = 5e-4
    batch_size: int = 128
    max_epochs: int = 300
    early_stopping_patience: int = 20
    lr_patience: int = 5
    lr_factor: float = 0.75

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.early_stopping_patience < 1:
            raise ConfigError("early_stopping_patience must be >= 1")
        if self.lr_patience < 1:
            raise ConfigError("lr_patience must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError("lr_factor must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "early_stopping_patience": self.early_stopping_patience,
            "lr_patience": self.lr_patience,
            "lr_factor": self.lr_factor,
        }


@dataclass(frozen=True)
class DatasetParams:
    path: str
    target: str
    units: str = ""
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if not self.path:
            raise ConfigError("dataset.path is required")
        if not self.target:
            raise ConfigError("dataset.target is required")
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "target": self.target,
            "units": self.units,
            "fractions": list(self.fractions),
        }


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetParams
    model: EncoderConfig = EncoderConfig()
    train: TrainParams = TrainParams()
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "seed": self.seed,
        }


def _strict_section(data: dict, section: str, known: set[str]) -> dict:
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    return data


def parse_run_config(data: dict) -> RunConfig:
    """Validate a raw config dict; unknown keys anywhere are fatal."""
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    _strict_section(data, "top-level", {"dataset", "model", "train", "seed"})
    if "dataset" not in data:
        raise ConfigError("dataset section is required")
    dataset_raw = _strict_section(
        dict(data["dataset"]), "dataset", {"path", "target", "units", "fractions"}
    )
    if "fractions" in dataset_raw:
        dataset_raw["fractions"] = tuple(dataset_raw["fractions"])
    dataset = DatasetParams(**dataset_raw)
    train_raw = _strict_section(
        dict(data.get("train", {})), "train",
        {"lr", "batch_size", "max_epochs", "early_stopping_patience",
         "lr_patience", "lr_factor"},
    )
    train = TrainParams(**train_raw)
    model = EncoderConfig.from_dict(dict(data.get("model", {})))
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return RunConfig(dataset=dataset, model=model, train=train, seed=seed)


def load_config(path, overrides=()) -> RunConfig:
    """Read a JSON run config, apply dotted-key overrides, validate."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if overrides:
        data = apply_overrides(data, overrides)
    return parse_run_config(data)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings on top of a raw config dict.

    Values parse as JSON when possible, otherwise stay strings.  The
    dotted path must address an existing section; the final key may be
    new only where the schema allows it (validation still runs after).
    """
    data = json.loads(json.dumps(data))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        for key in keys[:-1]:
            if key not in node:
                node[key] = {}
            elif not isinstance(node[key], dict):
                raise ConfigError(f"override {item!r}: {key} is not a section")
            node = node[key]
        node[keys[-1]] = value
    return data


# Reference hyperparameter columns for the four published-scale setups.
# Desk-scale tests do not run these; they are the documented recipe for
# anyone with the full datasets and hardware.
REFERENCE_CONFIGS: dict[str, dict] = {
    "qm9": {
        "model": {"num_layers": 7, "scalar_channels": 128, "vector_channels": 32,
                  "rbf_count": 20, "cutoff": 5.0, "vocabulary": [1, 6, 7, 8, 9],
                  "head": "sum-pool-scalar"},
        "train": {"lr": 5e-4, "batch_size": 128, "max_epochs": 300,
                  "early_stopping_patience": 20, "lr_patience": 5, "lr_factor": 0.75},
    },
    "lba": {
        "model": {"num_layers": 5, "scalar_channels": 128, "vector_channels": 16,
                  "rbf_count": 16, "cutoff": 4.5,
                  "vocabulary": [1, 6, 7, 8, 9, 11, 12, 15, 16, 17, 19, 20, 25, 26, 30, 35, 53],
                  "head": "lba-geometric"},
        "train": {"lr": 1e-4, "batch_size": 16, "max_epochs": 20,
                  "early_stopping_patience": 10, "lr_patience": 4, "lr_factor": 0.5},
    },
    "psr": {
        "model": {"num_layers": 5, "scalar_channels": 128, "vector_channels": 16,
                  "rbf_count": 16, "cutoff": 4.5,
                  "vocabulary": [1, 6, 7, 8, 9, 11, 12, 15, 16, 17, 19, 20, 25, 26, 30, 35, 53],
                  "head": "mean-pool-scalar"},
        "train": {"lr": 1e-4, "batch_size": 16, "max_epochs": 20,
                  "early_stopping_patience": 10, "lr_patience": 4, "lr_factor": 0.5},
    },
    "rsr": {
        "model": {"num_layers": 5, "scalar_channels": 128, "vector_channels": 16,
                  "rbf_count": 16, "cutoff": 4.5,
                  "vocabulary": [1, 6, 7, 8, 9, 11, 12, 15, 16, 17, 19, 20, 25, 26, 30, 35, 53],
                  "head": "mean-pool-scalar"},
        "train": {"lr": 1e-4, "batch_size": 16, "max_epochs": 20,
                  "early_stopping_patience": 10, "lr_patience": 4, "lr_factor": 0.5},
    },
}
