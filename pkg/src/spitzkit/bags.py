"""Tile-feature bags: data model, ``.spzb`` file format, subsampling, synthesis.

File layout (little-endian)::

    magic    4 bytes  b"SPZB"
    version  u32      1
    dim      u32
    n_tiles  u64
    payload  n_tiles * dim float32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ConfigError, SpitzkitError
from .cohort import SlideKind

MAGIC = b"SPZB"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
HEADER_SIZE = _HEADER.size


class BagFormatError(SpitzkitError, ValueError):
    """Malformed ``.spzb`` data."""


class BadMagicError(BagFormatError):
    pass


class TruncatedPayloadError(BagFormatError):
    pass


class DimMismatchError(BagFormatError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureBag:
    bag_id: str
    case_id: str
    slide_kind: SlideKind
    vectors: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ConfigError(f"bag {self.bag_id}: vectors must be a non-empty 2-D array")
        if not np.all(np.isfinite(v)):
            raise ConfigError(f"bag {self.bag_id}: non-finite feature values")
        if v is self.vectors:
            v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "slide_kind", SlideKind(self.slide_kind))

    @property
    def n_tiles(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def with_vectors(self, vectors: np.ndarray) -> FeatureBag:
        return replace(self, vectors=vectors)


def write_bag(bag: FeatureBag) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, bag.dim, bag.n_tiles)
    return header + bag.vectors.astype("<f4", copy=False).tobytes(order="C")


def read_bag(
    data: bytes,
    bag_id: str = "",
    case_id: str = "",
    slide_kind: SlideKind | str = SlideKind.INTERNAL,
    expected_dim: int | None = None,
) -> FeatureBag:
    """Parse ``.spzb`` bytes. Identifiers are not stored in the file; pass them in."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        if not data or not MAGIC.startswith(data[:4]):
            raise BadMagicError("bad magic: not an SPZB bag")
        raise TruncatedPayloadError(f"truncated payload: {len(data)} bytes, header needs {HEADER_SIZE}")
    magic, version, dim, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BagFormatError(f"unsupported bag version {version}")
    if dim == 0 or n == 0:
        raise BagFormatError(f"empty bag header (dim={dim}, n_tiles={n})")
    if expected_dim is not None and dim != expected_dim:
        raise DimMismatchError(f"dim mismatch: file has {dim}, expected {expected_dim}")
    need = n * dim * 4
    payload = len(data) - HEADER_SIZE
    if payload < need:
        raise TruncatedPayloadError(
            f"truncated payload: {payload} of {need} bytes ({payload // (4 * dim)} of {n} rows)"
        )
    if payload > need:
        raise DimMismatchError(f"dim mismatch: {payload - need} trailing bytes after {n}x{dim} payload")
    vectors = np.frombuffer(data, dtype="<f4", count=n * dim, offset=HEADER_SIZE).reshape(n, dim)
    return FeatureBag(bag_id, case_id, slide_kind, vectors.astype(np.float32))


def subsample_bag(bag: FeatureBag, cap: int, rng: np.random.Generator) -> FeatureBag:
    """Uniform without-replacement subset of ``cap`` tiles; no-op under the cap."""
    if cap < 1:
        raise ConfigError("cap must be >= 1", "cap")
    if bag.n_tiles <= cap:
        return bag
    keep = np.sort(rng.choice(bag.n_tiles, size=cap, replace=False))
    return bag.with_vectors(bag.vectors[keep])


def pool_bags(bags: list[FeatureBag]) -> np.ndarray:
    """Stack the tiles of several bags of one case into a single matrix."""
    if not bags:
        raise ConfigError("no bags to pool")
    dims = {b.dim for b in bags}
    if len(dims) != 1:
        raise DimMismatchError(f"bags disagree on dim: {sorted(dims)}")
    return np.concatenate([b.vectors for b in bags], axis=0)


# --------------------------------------------------------------------------
# Synthetic bags


@dataclass
class BagSynthSpec:
    """Class-conditional Gaussian tile generator.

    A bag of class k holds ``round(signal_fraction * n)`` tiles around
    ``centroids[k]`` and the rest around ``background``, each with isotropic
    noise of scale ``sigma``. ``slide_shift`` adds a fixed offset per slide kind.
    """

    centroids: np.ndarray
    background: np.ndarray
    signal_fraction: float = 0.5
    sigma: float = 1.0
    tiles_min: int = 32
    tiles_max: int = 128
    slide_shift: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise ConfigError("centroids must be K x dim", "centroids")
        if self.background.shape != (self.dim,):
            raise ConfigError("background must have length dim", "background")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ConfigError("signal_fraction must lie in (0, 1]", "signal_fraction")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0", "sigma")
        if not 1 <= self.tiles_min <= self.tiles_max:
            raise ConfigError("need 1 <= tiles_min <= tiles_max", "tiles_min")
        self.slide_shift = {
            SlideKind(k).value: np.asarray(v, dtype=np.float64) for k, v in self.slide_shift.items()
        }

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def n_classes(self) -> int:
        return self.centroids.shape[0]

    @classmethod
    def separated(
        cls,
        dim: int,
        n_classes: int,
        separation: float,
        sigma: float = 1.0,
        seed: int = 0,
        **kwargs,
    ) -> BagSynthSpec:
        """Centroids on random orthogonal axes, pairwise ``separation * sigma`` apart."""
        if n_classes > dim:
            raise ConfigError("need n_classes <= dim for orthogonal centroids", "n_classes")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        centroids = q[:, :n_classes].T * (separation * sigma / np.sqrt(2.0))
        return cls(centroids=centroids, background=np.zeros(dim), sigma=sigma, seed=seed, **kwargs)


def synth_bag(
    spec: BagSynthSpec,
    class_index: int,
    rng: np.random.Generator,
    bag_id: str = "",
    case_id: str = "",
    slide_kind: SlideKind | str = SlideKind.INTERNAL,
) -> FeatureBag:
    if not 0 <= class_index < spec.n_classes:
        raise ConfigError(f"class_index {class_index} outside [0, {spec.n_classes})", "class_index")
    n = int(rng.integers(spec.tiles_min, spec.tiles_max + 1))
    n_signal = int(np.floor(spec.signal_fraction * n + 0.5))
    centers = np.empty((n, spec.dim))
    centers[:n_signal] = spec.centroids[class_index]
    centers[n_signal:] = spec.background
    shift = spec.slide_shift.get(SlideKind(slide_kind).value)
    if shift is not None:
        centers += shift
    noise = rng.standard_normal((n, spec.dim)) * spec.sigma if spec.sigma > 0 else 0.0
    tiles = centers + noise
    tiles = tiles[rng.permutation(n)]
    return FeatureBag(bag_id, case_id, slide_kind, tiles.astype(np.float32))


def signal_mask(spec: BagSynthSpec, bag: FeatureBag, class_index: int) -> np.ndarray:
    """Tiles nearer the class centroid than the background (test helper)."""
    v = bag.vectors.astype(np.float64)
    d_sig = np.linalg.norm(v - spec.centroids[class_index], axis=1)
    d_bg = np.linalg.norm(v - spec.background, axis=1)
    return d_sig < d_bg
