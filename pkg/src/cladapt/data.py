"""Domain-incremental experience streams.

The synthetic generator keeps the label semantics fixed across domains and
changes only the input distribution. Every class owns a zero-mean sinusoidal
texture (a frequency and, for images, an orientation). A domain rescales the
texture frequency, adds a constant brightness shift and draws noise at its own
level, so the same class looks different from one domain to the next.

Stream cache layout (``CLSTRM``), all integers little-endian::

    6s   magic b"CLSTRM"
    u16  version (1)
    u16  number of experiences
    u8   number of dims of one sample, then that many u32 sizes
    per experience:
        u16  name length, utf-8 name
        u32  train count, u32 test count
        train samples then test samples, each as
        prod(sample shape) float32 values followed by one u8 label
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import CLASS_NAMES, ConfigError

STREAM_MAGIC = b"CLSTRM"
STREAM_VERSION = 1
IMAGE_SIZE = 32

# named sub-streams of the root seed
SEED_GENERATOR = 1
SEED_INIT = 2
SEED_SHUFFLE = 3
SEED_SPLIT = 4


class DataError(ValueError):
    """Unreadable, inconsistent or unsupported input data."""


class PastDataError(RuntimeError):
    """Training data of a finished experience was requested."""


def sub_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *key]))


@dataclass
class Sample:
    x: np.ndarray
    label: int


@dataclass
class Experience:
    """One dataset of the stream, stored as stacked arrays."""

    id: int
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.train_x.shape[1:]) if len(self.train_x) else tuple(self.test_x.shape[1:])

    @property
    def train(self) -> list[Sample]:
        return [Sample(x, int(y)) for x, y in zip(self.train_x, self.train_y)]

    @property
    def test(self) -> list[Sample]:
        return [Sample(x, int(y)) for x, y in zip(self.test_x, self.test_y)]


@dataclass
class DomainSpec:
    name: str
    n_train: int
    n_test: int
    shift: float = 0.0
    noise: float = 0.1
    texture_scale: float = 1.0
    class_proportions: Optional[list[float]] = None


def _default_domains() -> list[DomainSpec]:
    return [
        DomainSpec("domain0", 3000, 600, shift=0.0, noise=0.10, texture_scale=1.0),
        DomainSpec("domain1", 900, 300, shift=0.25, noise=0.12, texture_scale=1.3),
        DomainSpec("domain2", 900, 300, shift=-0.20, noise=0.08, texture_scale=1.25),
    ]


@dataclass
class StreamSpec:
    """Everything needed to regenerate a synthetic stream bit for bit."""

    mode: str = "vector"
    seed: int = 7
    num_classes: int = 3
    dim: int = 16
    amplitude: float = 0.2
    class_frequencies: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0])
    class_orientations: list[float] = field(default_factory=lambda: [0.0, 60.0, 120.0])
    phase_jitter: float = 0.3
    domains: list[DomainSpec] = field(default_factory=_default_domains)

    @classmethod
    def from_dict(cls, d: dict) -> "StreamSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown stream keys: {sorted(extra)}")
        d = dict(d)
        if "domains" in d:
            dom_fields = set(DomainSpec.__dataclass_fields__)
            domains = []
            for i, dd in enumerate(d["domains"]):
                bad = set(dd) - dom_fields
                if bad:
                    raise ConfigError(f"domain {i}: unknown keys {sorted(bad)}")
                domains.append(DomainSpec(**dd))
            d["domains"] = domains
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return (self.dim,) if self.mode == "vector" else (1, IMAGE_SIZE, IMAGE_SIZE)

    def validate(self) -> None:
        if self.mode not in ("vector", "image"):
            raise ConfigError(f"mode must be 'vector' or 'image', got {self.mode!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if len(self.domains) < 2:
            raise ConfigError("need at least 2 domains")
        if self.mode == "vector" and self.dim < 1:
            raise ConfigError("dim must be positive")
        for key in ("class_frequencies", "class_orientations"):
            if len(getattr(self, key)) < self.num_classes:
                raise ConfigError(f"{key} needs one entry per class")
        for d in self.domains:
            if d.n_train <= 0 or d.n_test <= 0:
                raise ConfigError(f"domain {d.name!r}: sample counts must be positive")
            if d.noise < 0:
                raise ConfigError(f"domain {d.name!r}: noise must be >= 0")
            if d.class_proportions is not None and len(d.class_proportions) != self.num_classes:
                raise ConfigError(f"domain {d.name!r}: class_proportions needs {self.num_classes} entries")


def class_counts(n: int, num_classes: int, proportions: Optional[Sequence[float]] = None) -> np.ndarray:
    """Exact per-class counts summing to ``n`` (largest remainder)."""
    p = np.full(num_classes, 1.0 / num_classes) if proportions is None else np.asarray(proportions, float)
    if np.any(p < 0) or p.sum() <= 0:
        raise ConfigError("class proportions must be non-negative and not all zero")
    p = p / p.sum()
    raw = p * n
    counts = np.floor(raw).astype(np.int64)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def _texture(spec: StreamSpec, dom: DomainSpec, labels: np.ndarray, rng) -> np.ndarray:
    n = labels.size
    freq = np.asarray(spec.class_frequencies, float)[labels] * dom.texture_scale
    phase = rng.uniform(-spec.phase_jitter, spec.phase_jitter, size=n) * np.pi
    if spec.mode == "vector":
        pos = (np.arange(spec.dim) + 0.5) / spec.dim
        wave = np.cos(2 * np.pi * freq[:, None] * pos[None, :] + phase[:, None])
        wave -= wave.mean(axis=1, keepdims=True)
        return wave
    theta = np.deg2rad(np.asarray(spec.class_orientations, float)[labels])
    coords = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
    r, c = np.meshgrid(coords, coords, indexing="ij")
    proj = np.cos(theta)[:, None, None] * r + np.sin(theta)[:, None, None] * c
    wave = np.cos(2 * np.pi * 4.0 * freq[:, None, None] * proj + phase[:, None, None])
    wave -= wave.mean(axis=(1, 2), keepdims=True)
    return wave[:, None]


def _draw(spec: StreamSpec, dom: DomainSpec, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    counts = class_counts(n, spec.num_classes, dom.class_proportions)
    labels = np.repeat(np.arange(spec.num_classes), counts)
    labels = labels[rng.permutation(n)]
    x = 0.5 + dom.shift + spec.amplitude * _texture(spec, dom, labels, rng)
    x = x + dom.noise * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)


def generate_synthetic_stream(spec: StreamSpec) -> list[Experience]:
    spec.validate()
    out = []
    for i, dom in enumerate(spec.domains):
        rng = sub_rng(spec.seed, SEED_GENERATOR, i)
        tx, ty = _draw(spec, dom, dom.n_train, rng)
        vx, vy = _draw(spec, dom, dom.n_test, rng)
        out.append(Experience(i, dom.name, tx, ty, vx, vy))
    return out


def split(x: np.ndarray, y: np.ndarray, test_fraction: float = 0.2,
          seed: int = 0) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Stratified train/test partition; returns ``((train_x, train_y), (test_x, test_y))``."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    y = np.asarray(y, dtype=np.int64)
    rng = sub_rng(seed, SEED_SPLIT)
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if idx.size < 2:
            raise DataError(f"class {int(c)} has {idx.size} sample(s); cannot stratify")
        idx = idx[rng.permutation(idx.size)]
        n_test = min(max(int(round(idx.size * test_fraction)), 1), idx.size - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    x = np.asarray(x)
    return (x[tr], y[tr]), (x[te], y[te])


# --- netpbm decoding --------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 2
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise DataError("truncated header")
        tokens.append(buf[start:i])
    return tokens, i


def read_pnm(path: Path) -> np.ndarray:
    """Decode a PGM/PPM (P2, P3, P5 or P6) into a float64 grayscale image in [0, 1]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DataError(f"{path}: not a PGM/PPM file")
    try:
        tokens, end = _pnm_tokens(buf, 3)
        w, h, maxval = (int(t) for t in tokens)
        if w <= 0 or h <= 0 or not 0 < maxval < 65536:
            raise DataError("bad dimensions")
        channels = 3 if magic in (b"P3", b"P6") else 1
        n = w * h * channels
        if magic in (b"P5", b"P6"):
            dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
            raw = buf[end + 1:end + 1 + n * dtype.itemsize]
            if len(raw) != n * dtype.itemsize:
                raise DataError("pixel data truncated")
            pix = np.frombuffer(raw, dtype=dtype).astype(np.float64)
        else:
            pix = np.array(buf[end:].split()[:n], dtype=np.float64)
            if pix.size != n:
                raise DataError("pixel data truncated")
    except (ValueError, DataError) as exc:
        raise DataError(f"{path}: cannot decode ({exc})") from None
    img = pix.reshape(h, w, channels) / maxval
    if np.any(img > 1):
        raise DataError(f"{path}: sample exceeds maxval")
    if channels == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img[:, :, 0]


def center_crop_resize(img: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Center-crop to a square, then area-resample to ``size`` x ``size``."""
    h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    sq = img[top:top + s, left:left + s]
    # weights[i, j] = overlap of output cell i with input pixel j, rows sum to 1
    edges_out = np.arange(size + 1) * (s / size)
    lo = np.maximum(edges_out[:-1, None], np.arange(s)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, s + 1)[None, :])
    weights = np.clip(hi - lo, 0, None)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ sq @ weights.T


def _label_index(token: str, classes: Sequence[str]) -> int:
    token = token.strip()
    if token in classes:
        return classes.index(token)
    try:
        idx = int(token)
    except ValueError:
        raise DataError(f"unknown label {token!r}") from None
    if not 0 <= idx < len(classes):
        raise DataError(f"label index {idx} out of range")
    return idx


def load_csv(path: Path, classes: Sequence[str] = CLASS_NAMES) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``f1,...,fn,label``; a first row whose features are not numeric is a header."""
    xs, ys = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                feats = [float(c) for c in row[:-1]]
            except ValueError:
                if lineno == 1 and not xs:
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric feature") from None
            try:
                ys.append(_label_index(row[-1], classes))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            xs.append(feats)
    if not xs:
        raise DataError(f"{path}: no rows")
    if len({len(r) for r in xs}) != 1:
        raise DataError(f"{path}: rows have differing feature counts")
    return np.asarray(xs, dtype=np.float32), np.asarray(ys, dtype=np.int64)


_IMAGE_SUFFIXES = {".pgm", ".ppm", ".pnm"}


def _load_dir(root: Path, classes: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    csvs = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() == ".csv")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if csvs and subdirs:
        raise DataError(f"{root}: mixes CSV feature files with image class directories")
    if csvs:
        parts = [load_csv(p, classes) for p in csvs]
        if len({p[0].shape[1] for p in parts}) != 1:
            raise DataError(f"{root}: CSV files have differing feature counts")
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    xs, ys = [], []
    for d in subdirs:
        if d.name not in classes:
            raise DataError(f"{d}: unknown class directory (expected one of {list(classes)})")
        for f in sorted(d.iterdir()):
            if not f.is_file():
                continue
            if f.suffix.lower() not in _IMAGE_SUFFIXES:
                if f.suffix.lower() == ".csv":
                    raise DataError(f"{f}: mixes vector and image content")
                raise DataError(f"{f}: unsupported file type")
            xs.append(center_crop_resize(read_pnm(f))[None])
            ys.append(classes.index(d.name))
    if not xs:
        raise DataError(f"{root}: no samples found")
    return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64)


def load_folder_dataset(root, name: Optional[str] = None, exp_id: int = 0,
                        test_fraction: Optional[float] = None, seed: int = 0,
                        classes: Sequence[str] = CLASS_NAMES) -> Experience:
    """Load one experience from disk.

    ``root`` holds either class directories of PGM/PPM images or CSV files.
    If it contains ``train/`` and ``test/`` subdirectories those are used as
    the splits. Otherwise all samples go to ``train``, unless
    ``test_fraction`` is given, in which case a stratified split is made.
    """
    root = Path(root)
    if not root.exists():
        raise DataError(f"{root}: no such path")
    name = name or root.stem
    if root.is_file():
        x, y = load_csv(root, classes)
    elif (root / "train").is_dir() and (root / "test").is_dir():
        tx, ty = _load_dir(root / "train", classes)
        vx, vy = _load_dir(root / "test", classes)
        if tx.shape[1:] != vx.shape[1:]:
            raise DataError(f"{root}: train and test samples differ in shape")
        return Experience(exp_id, name, tx, ty, vx, vy)
    else:
        x, y = _load_dir(root, classes)
    if test_fraction is None:
        return Experience(exp_id, name, x, y, x[:0], y[:0])
    (tx, ty), (vx, vy) = split(x, y, test_fraction, seed)
    return Experience(exp_id, name, tx, ty, vx, vy)


# --- stream cache -------------------------------------------------------------

def serialize_stream(experiences: Sequence[Experience]) -> bytes:
    if not experiences:
        raise DataError("empty stream")
    shape = experiences[0].sample_shape
    out = io.BytesIO()
    out.write(STREAM_MAGIC)
    out.write(struct.pack("<HH", STREAM_VERSION, len(experiences)))
    out.write(struct.pack("<B", len(shape)))
    out.write(struct.pack(f"<{len(shape)}I", *shape))
    for e in experiences:
        if e.sample_shape != shape:
            raise DataError(f"experience {e.name!r} has sample shape {e.sample_shape}, expected {shape}")
        name = e.name.encode()
        out.write(struct.pack("<H", len(name)))
        out.write(name)
        out.write(struct.pack("<II", len(e.train_y), len(e.test_y)))
        for xs, ys in ((e.train_x, e.train_y), (e.test_x, e.test_y)):
            flat = np.ascontiguousarray(xs, dtype="<f4").reshape(len(ys), -1)
            rec = np.empty((len(ys), flat.shape[1] * 4 + 1), dtype=np.uint8)
            rec[:, :-1] = flat.view(np.uint8)
            rec[:, -1] = np.asarray(ys, dtype=np.uint8)
            out.write(rec.tobytes())
    return out.getvalue()


def deserialize_stream(buf: bytes) -> list[Experience]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DataError("stream file truncated")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(6) != STREAM_MAGIC:
        raise DataError("not a CLSTRM stream file (bad magic)")
    version, n_exp = struct.unpack("<HH", take(4))
    if version != STREAM_VERSION:
        raise DataError(f"unsupported stream version {version}")
    (ndim,) = struct.unpack("<B", take(1))
    shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
    per = int(np.prod(shape))
    exps = []
    for i in range(n_exp):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        n_tr, n_te = struct.unpack("<II", take(8))
        arrays = []
        for n in (n_tr, n_te):
            rec = np.frombuffer(take(n * (per * 4 + 1)), dtype=np.uint8).reshape(n, per * 4 + 1)
            x = np.ascontiguousarray(rec[:, :-1]).view("<f4").reshape((n, *shape)).astype(np.float32)
            arrays += [x, rec[:, -1].astype(np.int64)]
        exps.append(Experience(i, name, *arrays))
    if pos != len(buf):
        raise DataError("trailing bytes after stream data")
    return exps


def save_stream(experiences: Sequence[Experience], path) -> None:
    Path(path).write_bytes(serialize_stream(experiences))


def load_stream(path) -> list[Experience]:
    return deserialize_stream(Path(path).read_bytes())


class StreamView:
    """Per-run access to a stream that forgets train splits once released.

    Sequential strategies call :meth:`release` after finishing an experience;
    any later request for that training data raises :class:`PastDataError`.
    Test splits stay available for evaluation.
    """

    def __init__(self, experiences: Sequence[Experience]):
        if not experiences:
            raise DataError("stream has no experiences")
        self._train = {e.id: (e.train_x, e.train_y) for e in experiences}
        self._sizes = [len(e.train_y) for e in experiences]
        # keep only test splits beyond the releasable train dict
        self._experiences = [Experience(e.id, e.name, e.train_x[:0], e.train_y[:0], e.test_x, e.test_y)
                             for e in experiences]

    def __len__(self) -> int:
        return len(self._experiences)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self._experiences]

    def train(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        eid = self._experiences[i].id
        if eid not in self._train:
            raise PastDataError(f"training data of experience {i} ({self._experiences[i].name}) was released")
        return self._train[eid]

    def release(self, i: int) -> None:
        self._train.pop(self._experiences[i].id, None)

    def test_sets(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {e.name: (e.test_x, e.test_y) for e in self._experiences}

    def union_test(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.concatenate([e.test_x for e in self._experiences]),
                np.concatenate([e.test_y for e in self._experiences]))

    def train_sizes(self) -> list[int]:
        return list(self._sizes)
