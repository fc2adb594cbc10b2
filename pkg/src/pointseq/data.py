"""Synthetic dynamic point clouds, the .pcsq binary format, dataset
manifests, and the checkpoint container.

Eight labeled motion classes are generated over four base shapes, with the
shape drawn independently of the class so a classifier has to read the
motion rather than the silhouette. All file formats are little-endian and
roundtrip byte-exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from pointseq.autodiff import ParamSet
from pointseq.errors import DataError, FileFormatError, TruncatedFileError, VersionError
from pointseq.geometry import normalize_sequence

PCSQ_MAGIC = b"PCSQ"
PCSQ_VERSION = 1
CKPT_MAGIC = b"CPR1"
CKPT_VERSION = 1

SHAPES = ("sphere-surface", "cube-surface", "torus-surface", "two-blob")
MOTIONS = (
    "translate-line",
    "translate-circle",
    "rotate-z",
    "rotate-x",
    "scale-oscillate",
    "shear-oscillate",
    "split-merge",
    "jitter-walk",
)

# per-class base speed giving comparable motion magnitudes on unit-scale shapes
CLASS_SPEEDS = {
    "translate-line": 0.06,
    "translate-circle": 0.06,
    "rotate-z": 0.8,
    "rotate-x": 0.8,
    "scale-oscillate": 0.25,
    "shear-oscillate": 0.5,
    "split-merge": 0.5,
    "jitter-walk": 0.08,
}


@dataclass
class PointCloudSequence:
    frames: np.ndarray            # (T, N, 3) float32
    label: Optional[int] = None
    source_id: str = ""
    normalized: bool = False
    degenerate: bool = False

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def N(self) -> int:
        return self.frames.shape[1]


@dataclass
class SyntheticSpec:
    class_id: int
    shape: str
    speed: float
    seed: int
    noise_sigma: float = 0.01
    motion: str = ""

    def __post_init__(self):
        if not 0 <= self.class_id < len(MOTIONS):
            raise DataError(f"unknown class_id {self.class_id}")
        if self.shape not in SHAPES:
            raise DataError(f"unknown shape {self.shape!r}")
        derived = MOTIONS[self.class_id]
        if self.motion and self.motion != derived:
            raise DataError(f"motion {self.motion!r} does not belong to class {self.class_id}")
        self.motion = derived


# ---------------------------------------------------------------------------
# shape samplers
# ---------------------------------------------------------------------------

def _sample_shape(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "sphere-surface":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if shape == "cube-surface":
        faces = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        for i in range(n):
            others = [a for a in range(3) if a != axis[i]]
            pts[i, axis[i]] = sign[i]
            pts[i, others[0]] = uv[i, 0]
            pts[i, others[1]] = uv[i, 1]
        return pts
    if shape == "torus-surface":
        u = rng.uniform(0, 2 * np.pi, size=n)
        v = rng.uniform(0, 2 * np.pi, size=n)
        r_minor = 0.35
        x = (1.0 + r_minor * np.cos(v)) * np.cos(u)
        y = (1.0 + r_minor * np.cos(v)) * np.sin(u)
        z = r_minor * np.sin(v)
        return np.stack([x, y, z], axis=1)
    if shape == "two-blob":
        half = n // 2
        centers = np.array([[0.8, 0.0, 0.0], [-0.8, 0.0, 0.0]])
        a = rng.normal(scale=0.35, size=(half, 3)) + centers[0]
        b = rng.normal(scale=0.35, size=(n - half, 3)) + centers[1]
        return np.concatenate([a, b], axis=0)
    raise DataError(f"unknown shape {shape!r}")


# ---------------------------------------------------------------------------
# motion transforms (closed form in the frame index)
# ---------------------------------------------------------------------------

def _rotation(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == 2:
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _motion_frames(spec: SyntheticSpec, base: np.ndarray, T: int,
                   rng: np.random.Generator) -> np.ndarray:
    n = base.shape[0]
    frames = np.empty((T, n, 3))
    v = spec.speed
    if spec.motion == "translate-line":
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        for f in range(T):
            frames[f] = base + f * v * direction
    elif spec.motion == "translate-circle":
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        w = rng.normal(size=3)
        w -= u * (w @ u)
        w /= np.linalg.norm(w)
        radius = v * T / (2 * np.pi)
        omega = 2 * np.pi / T
        for f in range(T):
            offset = radius * ((np.cos(omega * f) - 1.0) * u + np.sin(omega * f) * w)
            frames[f] = base + offset
    elif spec.motion in ("rotate-z", "rotate-x"):
        axis = 2 if spec.motion == "rotate-z" else 0
        omega = v * 2 * np.pi / T
        for f in range(T):
            frames[f] = base @ _rotation(axis, omega * f).T
    elif spec.motion == "scale-oscillate":
        for f in range(T):
            frames[f] = base * (1.0 + v * np.sin(2 * np.pi * f / T))
    elif spec.motion == "shear-oscillate":
        for f in range(T):
            shear = np.eye(3)
            shear[0, 1] = v * np.sin(2 * np.pi * f / T)
            frames[f] = base @ shear.T
    elif spec.motion == "split-merge":
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        side = np.where((base - base.mean(axis=0)) @ direction >= 0, 1.0, -1.0)
        for f in range(T):
            gap = v * np.sin(np.pi * f / max(T - 1, 1))
            frames[f] = base + side[:, None] * gap * direction
    elif spec.motion == "jitter-walk":
        steps = rng.normal(size=(T, 3)) * v
        steps[0] = 0.0
        offsets = np.cumsum(steps, axis=0)
        for f in range(T):
            frames[f] = base + offsets[f]
    else:
        raise DataError(f"unknown motion {spec.motion!r}")
    return frames


def generate_synthetic(spec: SyntheticSpec, T: int, N: int,
                       normalize: bool = True) -> PointCloudSequence:
    """Deterministic labeled sequence: seeded shape sample at frame 0, the
    class motion applied per frame, Gaussian coordinate noise, then
    whole-sequence normalization into the unit ball."""
    if T < 1 or N < 1:
        raise DataError(f"generate_synthetic: need T, N >= 1, got T={T}, N={N}")
    rng = np.random.default_rng([spec.seed, spec.class_id, SHAPES.index(spec.shape)])
    base = _sample_shape(spec.shape, N, rng)
    frames = _motion_frames(spec, base, T, rng)
    if spec.noise_sigma > 0:
        frames = frames + rng.normal(scale=spec.noise_sigma, size=frames.shape)
    degenerate = False
    if normalize:
        frames, degenerate = normalize_sequence(frames)
    source_id = f"c{spec.class_id}_{spec.shape}_s{spec.seed}"
    return PointCloudSequence(frames.astype(np.float32), label=spec.class_id,
                              source_id=source_id, normalized=normalize,
                              degenerate=degenerate)


def generate_dataset(out_dir: Union[str, Path], classes: int, per_class: int,
                     T: int = 24, N: int = 256, seed: int = 0,
                     noise_sigma: float = 0.01, val_fraction: float = 0.2) -> List[dict]:
    """Write a labeled synthetic dataset plus its manifest.json.

    Shapes and per-sequence speed jitter are drawn independently of the
    class label, so the label is recoverable from the motion only.
    """
    if not 1 <= classes <= len(MOTIONS):
        raise DataError(f"classes must be in [1, {len(MOTIONS)}], got {classes}")
    if per_class < 1:
        raise DataError("per-class count must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    assign_rng = np.random.default_rng([seed, 3])
    for class_id in range(classes):
        base_speed = CLASS_SPEEDS[MOTIONS[class_id]]
        for i in range(per_class):
            shape = SHAPES[int(assign_rng.integers(0, len(SHAPES)))]
            speed = base_speed * float(assign_rng.uniform(0.8, 1.2))
            spec = SyntheticSpec(class_id=class_id, shape=shape, speed=speed,
                                 seed=seed * 100003 + class_id * 1009 + i,
                                 noise_sigma=noise_sigma)
            seq = generate_synthetic(spec, T=T, N=N)
            save_sequence(seq, out_dir / f"c{class_id}_i{i:03d}.pcsq")
    manifest = build_manifest(out_dir, seed=seed, val_fraction=val_fraction)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# .pcsq binary sequence format
# ---------------------------------------------------------------------------

_PCSQ_HEADER = struct.Struct("<4sIIIBi")  # magic, version, T, N, has_label, label


def save_sequence(seq: PointCloudSequence, path: Union[str, Path]) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    if frames.ndim != 3 or frames.shape[2] != 3:
        raise DataError(f"save_sequence: frames must be (T, N, 3), got {frames.shape}")
    has_label = seq.label is not None
    header = _PCSQ_HEADER.pack(PCSQ_MAGIC, PCSQ_VERSION, frames.shape[0], frames.shape[1],
                               1 if has_label else 0, seq.label if has_label else 0)
    Path(path).write_bytes(header + frames.tobytes())


def _read_exact(data: bytes, offset: int, count: int, what: str) -> Tuple[bytes, int]:
    if len(data) < offset + count:
        raise TruncatedFileError(
            f"truncated {what}: expected {offset + count} bytes, got {len(data)} "
            f"(failed at byte offset {len(data)})")
    return data[offset:offset + count], offset + count


def load_sequence(path: Union[str, Path]) -> PointCloudSequence:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    raw, offset = _read_exact(data, 0, _PCSQ_HEADER.size, "header")
    magic, version, t, n, has_label, label = _PCSQ_HEADER.unpack(raw)
    if magic != PCSQ_MAGIC:
        raise FileFormatError(f"bad magic {magic!r} at byte 0, expected {PCSQ_MAGIC!r}")
    if version != PCSQ_VERSION:
        raise VersionError(f"unsupported version {version} at byte 4, expected {PCSQ_VERSION}")
    payload, offset = _read_exact(data, offset, t * n * 3 * 4, "payload")
    if len(data) != offset:
        raise FileFormatError(f"{len(data) - offset} trailing bytes after payload at byte {offset}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, n, 3).copy()
    return PointCloudSequence(frames, label=label if has_label else None,
                              source_id=path.stem)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _split_hash(seed: int, source_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{source_id}".encode()).hexdigest()
    return int(digest[:16], 16)


def build_manifest(source: Union[str, Path, Iterable[Union[str, Path]]],
                   seed: int = 0, val_fraction: float = 0.2) -> List[dict]:
    """Manifest of .pcsq files: [{path, label, T, N, split}], ordered by path.

    The train/val split ranks files by a seeded hash of the file stem and
    assigns the first floor(val_fraction * n) to "val". Unreadable files are
    skipped with a warning count appended to the manifest builder's stderr.
    """
    import sys

    if isinstance(source, (str, Path)):
        src_dir = Path(source)
        if not src_dir.is_dir():
            raise DataError(f"not a directory: {src_dir}")
        paths = sorted(src_dir.glob("*.pcsq"))
    else:
        paths = [Path(p) for p in source]
        seen = set()
        for p in paths:
            key = str(p)
            if key in seen:
                raise DataError(f"duplicate path in manifest input: {p}")
            seen.add(key)
        paths = sorted(paths, key=str)

    entries = []
    skipped = 0
    for p in paths:
        try:
            seq = load_sequence(p)
        except (OSError, DataError) as err:
            skipped += 1
            print(f"warning: skipping unreadable {p}: {err}", file=sys.stderr)
            continue
        entries.append({"path": str(p), "label": seq.label, "T": seq.T, "N": seq.N})
    if skipped:
        print(f"warning: skipped {skipped} unreadable file(s)", file=sys.stderr)

    n_val = int(len(entries) * val_fraction)
    ranked = sorted(entries, key=lambda e: (_split_hash(seed, Path(e["path"]).stem), e["path"]))
    val_paths = {e["path"] for e in ranked[:n_val]}
    for e in entries:
        e["split"] = "val" if e["path"] in val_paths else "train"
    return entries


def save_manifest(manifest: List[dict], path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path: Union[str, Path]) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    data = json.loads(path.read_text())
    if not isinstance(data, list):
        raise DataError(f"manifest {path} must be a JSON list")
    return data


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    params: ParamSet
    step: int = 0
    rng_state: Optional[dict] = None
    version: int = CKPT_VERSION


def _pack_blob(blob: bytes) -> bytes:
    return struct.pack("<I", len(blob)) + blob


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    config_blob = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode()
    rng_blob = json.dumps(ckpt.rng_state, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", ckpt.version), _pack_blob(config_blob),
             _pack_blob(rng_blob), struct.pack("<Q", ckpt.step)]
    names = ckpt.params.names()
    parts.append(struct.pack("<I", len(names)))
    for name, value, trainable in ckpt.params.items():
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", 1 if trainable else 0, value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    raw, offset = _read_exact(data, 0, 8, "checkpoint header")
    magic = raw[:4]
    if magic != CKPT_MAGIC:
        raise FileFormatError(f"bad magic {magic!r} at byte 0, expected {CKPT_MAGIC!r}")
    version = struct.unpack("<I", raw[4:])[0]
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} at byte 4")

    raw, offset = _read_exact(data, offset, 4, "config length")
    (config_len,) = struct.unpack("<I", raw)
    raw, offset = _read_exact(data, offset, config_len, "config json")
    config = json.loads(raw.decode())

    raw, offset = _read_exact(data, offset, 4, "rng length")
    (rng_len,) = struct.unpack("<I", raw)
    raw, offset = _read_exact(data, offset, rng_len, "rng state")
    rng_state = json.loads(raw.decode())

    raw, offset = _read_exact(data, offset, 8, "step")
    (step,) = struct.unpack("<Q", raw)
    raw, offset = _read_exact(data, offset, 4, "parameter count")
    (n_params,) = struct.unpack("<I", raw)

    params = ParamSet()
    for _ in range(n_params):
        raw, offset = _read_exact(data, offset, 2, "name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _read_exact(data, offset, name_len, "name")
        name = raw.decode()
        raw, offset = _read_exact(data, offset, 2, "tensor flags")
        trainable, ndim = struct.unpack("<BB", raw)
        raw, offset = _read_exact(data, offset, 4 * ndim, "shape")
        shape = struct.unpack(f"<{ndim}I", raw)
        count = int(np.prod(shape)) if ndim else 1
        raw, offset = _read_exact(data, offset, 4 * count, f"tensor {name}")
        value = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        params.add(name, value, trainable=bool(trainable))
    if len(data) != offset:
        raise FileFormatError(f"{len(data) - offset} trailing bytes at byte {offset}")
    return Checkpoint(config=config, params=params, step=step, rng_state=rng_state,
                      version=version)


def verify_param_shapes(params: ParamSet, expected: dict) -> None:
    """Check a loaded ParamSet against the shapes the config implies.

    Raises DataError naming the first mismatching tensor (lexicographic) or
    listing missing/extra names.
    """
    actual_names = set(params.names())
    expected_names = set(expected)
    if actual_names != expected_names:
        missing = sorted(expected_names - actual_names)
        extra = sorted(actual_names - expected_names)
        raise DataError(f"parameter names disagree with config: missing={missing}, extra={extra}")
    for name in sorted(expected):
        want = tuple(expected[name])
        got = params.value(name).shape
        if want != got:
            raise DataError(f"parameter {name!r} has shape {got}, config implies {want}")
