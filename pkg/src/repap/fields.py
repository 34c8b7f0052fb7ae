"""Discrete field containers, observation masks, and the RPAP on-disk format.

Fields live on uniform 2D grids with square cells, stored [C, H, W] with row
index = y (row 0 at the bottom of the domain) and column index = x. Grid
spacing follows h = 1 / (n_x - 1), i.e. columns span the unit interval.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

RPAP_MAGIC = b"RPAP"
RPAP_VERSION = 1

# fixed-size header after the magic: version(u8), tag length(u8),
# N(u32), C(u16), H(u16), W(u16), all little-endian
_HEADER_STRUCT = struct.Struct("<BBIHHH")


class ContainerFormatError(ValueError):
    """Bad magic or unsupported version byte."""


class ContainerCorruptionError(ValueError):
    """Payload or header truncated relative to the declared shape."""


@dataclass(frozen=True)
class Grid2D:
    """Uniform grid with square cells; h is the node spacing."""

    n_x: int
    n_y: int
    h: float

    def __post_init__(self):
        if self.n_x < 3 or self.n_y < 3:
            raise ValueError(f"grid must be at least 3x3, got {self.n_x}x{self.n_y}")
        if not self.h > 0:
            raise ValueError(f"grid spacing must be positive, got {self.h}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_y, self.n_x)

    @property
    def n_points(self) -> int:
        return self.n_x * self.n_y

    @staticmethod
    def unit(n_x: int, n_y: int | None = None) -> "Grid2D":
        """Grid whose columns span [0, 1]: h = 1 / (n_x - 1)."""
        n_y = n_x if n_y is None else n_y
        return Grid2D(n_x=n_x, n_y=n_y, h=1.0 / (n_x - 1))

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """(y, x) coordinate arrays of shape [n_y, n_x]."""
        y = np.arange(self.n_y)[:, None] * self.h * np.ones((1, self.n_x))
        x = np.arange(self.n_x)[None, :] * self.h * np.ones((self.n_y, 1))
        return y, x


def _read_only(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Field:
    """One multi-channel sample on a grid; values are [C, H, W], read-only."""

    grid: Grid2D
    values: np.ndarray
    channels: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise ValueError(f"field values must be [C, H, W], got shape {v.shape}")
        if v.shape[-2:] != self.grid.shape:
            raise ValueError(
                f"field shape {v.shape[-2:]} does not match grid {self.grid.shape}"
            )
        if self.channels and len(self.channels) != v.shape[0]:
            raise ValueError("channel names do not match channel count")
        object.__setattr__(self, "values", _read_only(v))

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def channel(self, name: str) -> np.ndarray:
        return self.values[self.channels.index(name)]


@dataclass(frozen=True)
class BinaryMask:
    """0/1 observation mask on a grid; ratio is the target fraction of ones."""

    grid: Grid2D
    values: np.ndarray
    ratio: float

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"mask shape {v.shape} does not match grid")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "values", _read_only(v.astype(np.uint8)))

    @property
    def n_ones(self) -> int:
        return int(self.values.sum())


def make_observation_mask(grid: Grid2D, ratio: float, seed: int) -> BinaryMask:
    """Mask with exactly round(ratio * n_points) ones, uniform without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"observation ratio must lie in [0, 1], got {ratio}")
    n = grid.n_points
    k = int(round(ratio * n))
    rng = np.random.default_rng(seed)
    flat = np.zeros(n, dtype=np.uint8)
    if k > 0:
        flat[rng.choice(n, size=k, replace=False)] = 1
    return BinaryMask(grid=grid, values=flat.reshape(grid.shape), ratio=ratio)


@dataclass(frozen=True)
class DatasetContainer:
    """A batch of same-shaped samples plus task/channel/seed metadata.

    values are [N, C, H, W]; stored as real32 on disk. The in-memory array
    may be float64 (generators keep full precision until write time).
    """

    task: str
    layout: tuple[str, ...]
    values: np.ndarray
    seed_info: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 4:
            raise ValueError(f"container values must be [N, C, H, W], got {v.shape}")
        n, c, h, w = v.shape
        if n < 1 or c < 1:
            raise ValueError(f"container needs N >= 1 and C >= 1, got N={n}, C={c}")
        if h < 3 or w < 3:
            raise ValueError(f"container grid must be at least 3x3, got {h}x{w}")
        if len(self.layout) != v.shape[1]:
            raise ValueError(
                f"layout names {len(self.layout)} channels, payload has {v.shape[1]}"
            )
        for s in (self.task, self.seed_info, *self.layout):
            if "|" in s or "," in s:
                raise ValueError("metadata strings may not contain '|' or ','")
        object.__setattr__(self, "values", _read_only(v))

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> Grid2D:
        return Grid2D.unit(self.values.shape[3], self.values.shape[2])

    def sample(self, i: int) -> Field:
        return Field(grid=self.grid, values=self.values[i], channels=self.layout)

    def channel_index(self, name: str) -> int:
        return self.layout.index(name)


def _encode_tag(container: DatasetContainer) -> bytes:
    tag = "|".join([container.task, ",".join(container.layout), container.seed_info])
    raw = tag.encode("utf-8")
    if len(raw) > 255:
        raise ValueError("container metadata too long for the tag field (255 bytes)")
    return raw


def write_dataset(container: DatasetContainer, path) -> None:
    """Serialize to the RPAP container: magic, fixed header, tag, real32 payload."""
    n, c, h, w = container.values.shape
    tag = _encode_tag(container)
    payload = np.ascontiguousarray(container.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(RPAP_MAGIC)
        f.write(_HEADER_STRUCT.pack(RPAP_VERSION, len(tag), n, c, h, w))
        f.write(tag)
        f.write(payload.tobytes())


def read_dataset(path) -> DatasetContainer:
    """Parse an RPAP file; raises on bad magic and on truncation."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != RPAP_MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}, expected {RPAP_MAGIC!r}")
    head = buf.read(_HEADER_STRUCT.size)
    if len(head) != _HEADER_STRUCT.size:
        raise ContainerCorruptionError("truncated header")
    version, tag_len, n, c, h, w = _HEADER_STRUCT.unpack(head)
    if version != RPAP_VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    tag = buf.read(tag_len)
    if len(tag) != tag_len:
        raise ContainerCorruptionError("truncated tag")
    try:
        task, layout_str, seed_info = tag.decode("utf-8").split("|")
    except ValueError as e:
        raise ContainerCorruptionError(f"malformed tag {tag!r}") from e
    expected = n * c * h * w * 4
    raw = buf.read()
    if len(raw) != expected:
        raise ContainerCorruptionError(
            f"payload has {len(raw)} bytes, header declares {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4").reshape(n, c, h, w)
    layout = tuple(s for s in layout_str.split(",") if s)
    return DatasetContainer(task=task, layout=layout, values=values, seed_info=seed_info)
