"""Instance construction: synthetic square images, MNIST digits, the uniform case.

Images are flattened row-major everywhere, so histogram index ``k`` and cost
row ``k`` both refer to pixel ``(k // side, k % side)``.  Random numbers come
from numpy's PCG64 bit generator seeded with the given 64-bit integer.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CostMatrix, DomainError, Histogram, OTError

RNG_NAME = "numpy.PCG64"
FG_FRACTIONS = (0.1, 0.5, 0.9)
MNIST_FLOOR = 1e-6

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXParseError(OTError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GrayImage:
    intensities: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.intensities, dtype=np.float64)
        if a.ndim != 2:
            raise DomainError(f"image must be 2-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise DomainError("intensities must be finite and nonnegative")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "intensities", a)

    @property
    def side(self) -> int:
        return self.intensities.shape[0]

    @property
    def shape(self):
        return self.intensities.shape


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def foreground_side(side: int, fg_fraction: float) -> int:
    """Side of the foreground square whose area is closest to ``fg_fraction``."""
    return int(round(side * math.sqrt(fg_fraction)))


def gen_synthetic_image(seed: int, side: int = 20, fg_fraction: float = 0.1) -> GrayImage:
    """U[0, 1] background with one U[0, 50] square placed uniformly at random.

    Draw order: background (side*side values), top-left corner (row, col),
    foreground values (k*k).
    """
    if side < 2:
        raise DomainError("side must be at least 2")
    if not 0.0 < fg_fraction <= 1.0:
        raise DomainError("fg_fraction must lie in (0, 1]")
    rng = _rng(seed)
    img = rng.uniform(0.0, 1.0, size=(side, side))
    k = max(1, min(side, foreground_side(side, fg_fraction)))
    top = int(rng.integers(0, side - k + 1))
    left = int(rng.integers(0, side - k + 1))
    img[top:top + k, left:left + k] = rng.uniform(0.0, 50.0, size=(k, k))
    return GrayImage(img)


def synthetic_pair(seed: int, side: int = 20, fg_fraction: float = 0.1):
    """Two independent images from child streams of one seed."""
    ss = np.random.SeedSequence(int(seed))
    a, b = (int(child.generate_state(1, np.uint64)[0]) for child in ss.spawn(2))
    return gen_synthetic_image(a, side, fg_fraction), gen_synthetic_image(b, side, fg_fraction)


def image_to_histogram(img: GrayImage) -> Histogram:
    w = np.asarray(img.intensities, dtype=np.float64).ravel()
    total = w.sum()
    if not total > 0:
        raise DomainError("image has zero total intensity")
    return Histogram(_renormalize(w / total))


def _renormalize(w):
    # one more pass absorbs the last rounding error of the division
    return w / w.sum()


def mnist_histogram(img: GrayImage, floor: float = MNIST_FLOOR) -> Histogram:
    """Replace zero pixels by ``floor`` and normalize."""
    w = np.asarray(img.intensities, dtype=np.float64).ravel().copy()
    w[w == 0] = floor
    return Histogram(_renormalize(w / w.sum()))


def l1_cost_matrix(side: int) -> CostMatrix:
    """``C[(i1, j1), (i2, j2)] = |i1 - i2| + |j1 - j2|`` over a ``side x side`` grid."""
    if side < 1:
        raise DomainError("side must be at least 1")
    rows, cols = np.divmod(np.arange(side * side), side)
    C = np.abs(rows[:, None] - rows[None, :]) + np.abs(cols[:, None] - cols[None, :])
    return CostMatrix(C.astype(np.float64))


# ---------------------------------------------------------------------------
# IDX files


def _read_header(buf: bytes, magic: int, ndim: int):
    need = 4 * (1 + ndim)
    if len(buf) < 4:
        raise IDXParseError(f"file too short for magic number ({len(buf)} bytes)", 0)
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise IDXParseError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < need:
        raise IDXParseError(f"truncated header: need {need} bytes, have {len(buf)}", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    return dims, need


def _read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read IDX file {path}: {exc.strerror or exc}") from exc


def parse_idx_images(buf: bytes) -> list[GrayImage]:
    (count, rows, cols), off = _read_header(buf, IDX_IMAGES_MAGIC, 3)
    size = count * rows * cols
    if len(buf) < off + size:
        have = (len(buf) - off) // max(rows * cols, 1)
        raise IDXParseError(
            f"truncated pixel data: header declares {count} images, only {have} complete",
            len(buf),
        )
    pixels = np.frombuffer(buf, dtype=np.uint8, count=size, offset=off)
    stack = pixels.reshape(count, rows, cols).astype(np.float64)
    return [GrayImage(a) for a in stack]


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (count,), off = _read_header(buf, IDX_LABELS_MAGIC, 1)
    if len(buf) < off + count:
        raise IDXParseError(f"truncated labels: header declares {count}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off).copy()


def load_idx_images(path) -> list[GrayImage]:
    return parse_idx_images(_read_file(path))


def load_idx_labels(path) -> np.ndarray:
    return parse_idx_labels(_read_file(path))


def write_idx_images(path, images) -> None:
    """Inverse of :func:`load_idx_images` for uint8-valued images."""
    stack = np.stack([np.asarray(getattr(im, "intensities", im)) for im in images])
    if np.any((stack < 0) | (stack > 255) | (stack != np.round(stack))):
        raise DomainError("IDX images hold integers in [0, 255]")
    count, rows, cols = stack.shape
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols)
    Path(path).write_bytes(header + stack.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# instance specs


@dataclass
class InstanceSpec:
    """A concrete ``(C, r, c)`` triple plus the recipe that produced it."""

    kind: str
    cost: np.ndarray
    r: np.ndarray
    c: np.ndarray
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cost = CostMatrix(self.cost).entries
        self.r = Histogram(self.r).weights
        self.c = Histogram(self.c).weights
        if self.r.size != self.cost.shape[0] or self.c.size != self.cost.shape[0]:
            raise DomainError("marginal length does not match cost size")

    @property
    def n(self) -> int:
        return self.cost.shape[0]

    @property
    def meta(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "params": dict(self.params)}

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "cost": self.cost.ravel().tolist(),
            "r": self.r.tolist(),
            "c": self.c.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "InstanceSpec":
        try:
            n = int(doc["n"])
            cost = np.asarray(doc["cost"], dtype=np.float64).reshape(n, n)
            meta = doc.get("meta", {})
            return cls(meta.get("kind", "custom"), cost, doc["r"], doc["c"],
                       meta.get("seed"), meta.get("params", {}))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise DomainError(f"malformed instance document: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "InstanceSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def synthetic_instance(seed: int, side: int = 20, fg_fraction: float = 0.1) -> InstanceSpec:
    a, b = synthetic_pair(seed, side, fg_fraction)
    return InstanceSpec(
        "synthetic", l1_cost_matrix(side).entries,
        image_to_histogram(a).weights, image_to_histogram(b).weights,
        int(seed), {"side": side, "fg_fraction": fg_fraction, "rng": RNG_NAME},
    )


def mnist_instance(images, index_a: int, index_b: int) -> InstanceSpec:
    a, b = images[index_a], images[index_b]
    if a.shape != b.shape or a.shape[0] != a.shape[1]:
        raise DomainError("MNIST pair must be two square images of equal size")
    return InstanceSpec(
        "mnist", l1_cost_matrix(a.side).entries,
        mnist_histogram(a).weights, mnist_histogram(b).weights,
        None, {"index_a": int(index_a), "index_b": int(index_b), "floor": MNIST_FLOOR},
    )


def uniform_instance(n: int) -> InstanceSpec:
    """All-ones cost with uniform marginals."""
    if n < 2:
        raise DomainError("uniform instance needs n >= 2")
    u = np.full(n, 1.0 / n)
    return InstanceSpec("uniform", np.ones((n, n)), u, u.copy(), None, {"n": n})


def instance_from_config(entry: dict, seed: int | None = None) -> InstanceSpec:
    """Build an instance from a bench-config entry such as ``{"kind": "synthetic", "side": 8}``."""
    kind = entry.get("kind")
    if kind == "synthetic":
        return synthetic_instance(seed if seed is not None else entry.get("seed", 0),
                                  int(entry.get("side", 20)), float(entry.get("fg_fraction", 0.1)))
    if kind == "uniform":
        return uniform_instance(int(entry["n"]))
    if kind == "mnist":
        images = load_idx_images(entry["path"])
        return mnist_instance(images, int(entry["index_a"]), int(entry["index_b"]))
    if kind == "file":
        return InstanceSpec.load(entry["path"])
    raise DomainError(f"unknown instance kind {kind!r}")
