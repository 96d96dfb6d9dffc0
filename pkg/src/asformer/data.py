"""Feature/label/class-map files and the synthetic dataset generator."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ConfigError

FEATURE_MAGIC = b"ASFF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A file does not follow its documented layout."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class MagicError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class LabelError(ValueError):
    pass


# ---------------------------------------------------------------- features


def write_features(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"features must be T x D, got shape {values.shape}")
    t, d = values.shape
    body = np.ascontiguousarray(values, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, d) + body)


def load_features(path: str | Path) -> np.ndarray:
    """Read a feature file into a float32 ``T x D`` array."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise MagicError(f"{path}: bad magic {buf[:4]!r}, expected {FEATURE_MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise TruncationError(
            f"{path}: header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf)
        )
    _, version, t, d = _HEADER.unpack_from(buf)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}", 4)
    expected = _HEADER.size + 4 * t * d
    if len(buf) != expected:
        kind = TruncationError if len(buf) < expected else FormatError
        raise kind(f"{path}: expected {expected} bytes for {t}x{d} features, got {len(buf)}", len(buf))
    values = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(t, d)
    bad = np.flatnonzero(~np.isfinite(values.ravel()))
    if bad.size:
        raise NonFiniteError(f"{path}: non-finite feature value", _HEADER.size + 4 * int(bad[0]))
    return values.astype(np.float32)


def features_from_text(src: str | Path, dst: str | Path) -> np.ndarray:
    """Convert whitespace-separated rows (one frame per line) to a feature file."""
    values = np.loadtxt(src, dtype=np.float64, ndmin=2)
    write_features(dst, values)
    return values


# ---------------------------------------------------------------- labels


@dataclass
class ClassMap:
    names: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if any(not n or n != n.strip() or " " in n for n in self.names):
            raise LabelError("class names must be non-empty and contain no spaces")
        if len(set(self.names)) != len(self.names):
            raise LabelError("class names must be unique")
        self.index = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def load(cls, path: str | Path) -> "ClassMap":
        names = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            idx, _, name = line.strip().partition(" ")
            if not idx.isdigit() or int(idx) != len(names):
                raise LabelError(f"{path}:{lineno}: expected index {len(names)}, got {idx!r}")
            names.append(name.strip())
        return cls(names)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{i} {n}\n" for i, n in enumerate(self.names)), encoding="utf-8")


def load_labels(path: str | Path, class_map: ClassMap, expected_length: int | None = None) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = np.empty(len(lines), dtype=np.int64)
    for lineno, name in enumerate(lines, 1):
        name = name.strip()
        if name not in class_map.index:
            raise LabelError(f"{path}:{lineno}: unknown class {name!r}")
        out[lineno - 1] = class_map.index[name]
    if expected_length is not None and len(out) != expected_length:
        raise LabelError(f"{path}: {len(out)} labels, expected {expected_length}")
    return out


def write_labels(path: str | Path, labels: Sequence[int], class_map: ClassMap) -> None:
    Path(path).write_text("".join(class_map.names[int(c)] + "\n" for c in labels), encoding="utf-8")


def load_manifest(path: str | Path) -> list[dict]:
    """Entries of a JSON manifest, with paths resolved against its directory."""
    path = Path(path)
    entries = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    out = []
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "features" not in e:
            raise FormatError(f"{path}: entry {i} needs a 'features' path")
        item = {k: str((path.parent / v).resolve()) if k in ("features", "labels") else v for k, v in e.items()}
        out.append(item)
    return out


def load_dataset(manifest: str | Path, class_map: ClassMap) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(name, features, labels) for every manifest entry."""
    out = []
    for entry in load_manifest(manifest):
        feats = load_features(entry["features"])
        labels = load_labels(entry["labels"], class_map, feats.shape[0])
        out.append((Path(entry["features"]).stem, feats, labels))
    return out


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    num_classes: int = 5
    feature_dim: int = 32
    transition: np.ndarray | None = None
    min_len: int = 20
    max_len: int = 80
    noise_sigma: float = 1.0
    mean_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("synthetic data needs at least 2 classes")
        if self.transition is None:
            # random zero-diagonal transitions, fixed by the seed
            rng = np.random.default_rng([self.seed, 1])
            w = rng.uniform(0.2, 1.0, size=(self.num_classes, self.num_classes)) ** 3
            np.fill_diagonal(w, 0.0)
            self.transition = w / w.sum(axis=1, keepdims=True)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        c = self.num_classes
        p = self.transition
        if c < 2:
            raise ConfigError("synthetic data needs at least 2 classes")
        if p.shape != (c, c):
            raise ConfigError(f"transition matrix must be {c}x{c}, got {p.shape}")
        if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("transition matrix rows must be non-negative and sum to 1")
        if np.any(np.diag(p) != 0):
            raise ConfigError("transition matrix must have a zero diagonal")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"segment lengths need 1 <= min_len <= max_len, got [{self.min_len}, {self.max_len}]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def class_means(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 2])
        return self.mean_scale * rng.standard_normal((self.num_classes, self.feature_dim))


def generate_synthetic(
    spec: SyntheticSpec, num_sequences: int, length_range: tuple[int, int], stream: int = 0
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Markov-chain segment labels with Gaussian class-conditional features.

    ``stream`` selects an independent draw for the same ``SyntheticSpec`` (e.g. a held-out split).
    """
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {length_range}")
    means = spec.class_means()
    rng = np.random.default_rng([spec.seed, 3, stream])
    out = []
    for _ in range(num_sequences):
        n = int(rng.integers(lo, hi + 1))
        labels = np.empty(n, dtype=np.int64)
        pos = 0
        cls = int(rng.integers(spec.num_classes))
        while pos < n:
            seg = int(rng.integers(spec.min_len, spec.max_len + 1))
            labels[pos : pos + seg] = cls
            pos += seg
            cls = int(rng.choice(spec.num_classes, p=spec.transition[cls]))
        feats = means[labels] + spec.noise_sigma * rng.standard_normal((n, spec.feature_dim))
        out.append((feats.astype(np.float32), labels))
    return out


def nearest_centroid_accuracy(spec: SyntheticSpec, sigma: float, frames: int = 20000) -> float:
    """Frame-level accuracy of the Bayes classifier (uniform class prior) at noise ``sigma``."""
    means = spec.class_means()
    rng = np.random.default_rng([spec.seed, 4])
    labels = rng.integers(spec.num_classes, size=frames)
    x = means[labels] + sigma * rng.standard_normal((frames, spec.feature_dim))
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == labels).mean())


def calibrate_noise(spec: SyntheticSpec, target_accuracy: float = 0.9, iters: int = 30) -> float:
    """Noise level at which nearest-centroid frame accuracy is ``target_accuracy``."""
    lo, hi = 0.0, 1.0
    while nearest_centroid_accuracy(spec, hi) > target_accuracy:
        hi *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if nearest_centroid_accuracy(spec, mid) > target_accuracy:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def write_synthetic(
    out_dir: str | Path,
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    num_classes: int,
    prefix: str = "seq",
) -> tuple[Path, Path]:
    """Write features, labels, class map and manifest; returns (manifest, class map)."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    cmap = ClassMap([f"action{c}" for c in range(num_classes)])
    cmap_path = out_dir / "mapping.txt"
    cmap.save(cmap_path)
    entries = []
    for i, (feats, labels) in enumerate(dataset):
        name = f"{prefix}{i:03d}"
        write_features(out_dir / "features" / f"{name}.asff", feats)
        write_labels(out_dir / "labels" / f"{name}.txt", labels, cmap)
        entries.append({"features": f"features/{name}.asff", "labels": f"labels/{name}.txt"})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    return manifest, cmap_path
