"""First-order square lattices and region masks.

Nodes are numbered row-major: node ``r * width + c`` sits at row ``r`` and
column ``c``.  Boundaries are free (no wrap-around).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

# neighbour offsets in N, E, S, W order
_OFFSETS = ((-1, 0), (0, 1), (1, 0), (0, -1))


@dataclass(frozen=True)
class LatticeGraph:
    """A ``width`` x ``height`` lattice with nearest-neighbour edges.

    ``nbr`` is an ``(n_nodes, 4)`` table of neighbour ids in N, E, S, W order
    padded with -1; ``degree`` counts the valid entries per row.
    """

    width: int
    height: int
    nbr: np.ndarray = field(repr=False, compare=False)
    degree: np.ndarray = field(repr=False, compare=False)
    edges: np.ndarray = field(repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def coords(self, v: int) -> tuple[int, int]:
        return divmod(int(v), self.width)


def build_lattice(width: int, height: int) -> LatticeGraph:
    """Build the free-boundary lattice graph of the given size."""
    if int(width) != width or int(height) != height or width < 1 or height < 1:
        raise ValueError(f"lattice dimensions must be positive integers, got {width}x{height}")
    width, height = int(width), int(height)
    n = width * height
    nbr = np.full((n, 4), -1, dtype=np.int64)
    rows, cols = np.divmod(np.arange(n), width)
    for k, (dr, dc) in enumerate(_OFFSETS):
        rr, cc = rows + dr, cols + dc
        ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        nbr[ok, k] = rr[ok] * width + cc[ok]
    degree = (nbr >= 0).sum(axis=1)
    # each undirected edge once: east and south links only
    east = nbr[:, 1]
    south = nbr[:, 2]
    src = np.arange(n)
    edges = np.concatenate(
        [np.stack([src[east >= 0], east[east >= 0]], axis=1),
         np.stack([src[south >= 0], south[south >= 0]], axis=1)]
    )
    for arr in (nbr, degree, edges):
        arr.setflags(write=False)
    return LatticeGraph(width, height, nbr, degree, edges)


def neighbors(graph: LatticeGraph, v: int) -> list[int]:
    """Neighbour ids of ``v`` in N, E, S, W order (missing ones skipped)."""
    if not 0 <= int(v) < graph.n_nodes:
        raise ValueError(f"node id {v} out of range for {graph.n_nodes} nodes")
    row = graph.nbr[int(v)]
    return [int(u) for u in row if u >= 0]


@dataclass(frozen=True)
class RegionMask:
    """Integer region labels on a grid plus a label -> model-label mapping."""

    labels: np.ndarray
    mapping: Mapping[int, object] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def with_mapping(self, mapping: Mapping[int, object]) -> "RegionMask":
        return RegionMask(self.labels, {int(k): v for k, v in mapping.items()})

    def upscale(self, factor: int) -> "RegionMask":
        """Nearest-neighbour enlargement by an integer factor."""
        lab = np.kron(self.labels, np.ones((factor, factor), dtype=self.labels.dtype))
        return RegionMask(lab, dict(self.mapping))

    def downsample(self, factor: int) -> "RegionMask":
        """Keep every ``factor``-th pixel in both directions."""
        return RegionMask(self.labels[::factor, ::factor].copy(), dict(self.mapping))


def ground_truth_field(mask: RegionMask, states: Sequence[object] | None = None) -> np.ndarray:
    """Flattened (row-major) field of model indices into ``states``.

    With ``states=None`` the mapped labels themselves are returned.
    """
    present = np.unique(mask.labels)
    missing = [int(r) for r in present if int(r) not in mask.mapping]
    if missing:
        raise ValueError(f"region labels without a model mapping: {missing}")
    flat = mask.labels.ravel()
    if states is None:
        return np.array([mask.mapping[int(r)] for r in flat])
    states = list(states)
    lookup = {}
    for r in present:
        model = mask.mapping[int(r)]
        if model not in states:
            raise ValueError(f"region {int(r)} maps to unknown model {model!r}")
        lookup[int(r)] = states.index(model)
    return np.array([lookup[int(r)] for r in flat], dtype=np.int64)


def read_grid(path: str | Path) -> np.ndarray:
    """Read a whitespace-separated integer grid; ``#`` lines are comments."""
    rows = []
    for line in Path(path).read_text().splitlines():
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        rows.append([int(tok) for tok in s.split()])
    if not rows:
        raise ValueError(f"{path}: empty grid")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged grid rows")
    return np.array(rows, dtype=np.int64)


def write_grid(path: str | Path, grid: np.ndarray, comment: str | None = None) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError("grid must be two-dimensional")
    lines = []
    if comment:
        lines.extend(f"# {c}" for c in comment.splitlines())
    lines.extend(" ".join(str(int(x)) for x in row) for row in grid)
    Path(path).write_text("\n".join(lines) + "\n")


def load_mask(path: str | Path, mapping: Mapping[int, object] | None = None) -> RegionMask:
    return RegionMask(read_grid(path), dict(mapping or {}))


def default_mask(size: int = 20, mapping: Mapping[int, object] | None = None) -> RegionMask:
    """The shipped four-region ground-truth mask.

    ``size`` may be 20 (the base mask), 100 (5x upscale) or 10 (2x
    downsample).
    """
    ref = resources.files("pmpotts") / "data" / "mask20.txt"
    with resources.as_file(ref) as p:
        base = load_mask(p, mapping)
    if size == 20:
        return base
    if size == 100:
        return base.upscale(5)
    if size == 10:
        return base.downsample(2)
    raise ValueError(f"no default mask of size {size}")
