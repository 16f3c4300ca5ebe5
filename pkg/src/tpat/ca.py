"""Discrete Turing-pattern cellular automaton on +-1 grids.

A state of +-1 cells evolves by convolving with a balanced kernel (element sum
zero) and taking the sign:

    n'(i, j) = sign(sum_{m,l} Y(m, l) * n(i+m, j+l))

Balance makes the response to constant regions vanish, so alternating
structure with a characteristic length scale emerges from random starts.
Kernels come in three parametrizations: an inner disk of weight w surrounded
by a -1 annulus (w chosen so the sum is zero), an inner rectangle in a -1
field, and free elements that are mean-centered on realization.

Sign convention: responses with |z| <= SIGN_ZERO_TOL map to +1. The tolerance
band (rather than exact zero) keeps fixed points and oracle comparisons exact
regardless of floating-point summation order; realized Ring/Rect kernels can
produce responses that are either exactly 0 or at least 1/(inner cell count)
in magnitude, so the band never swallows a genuine sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .core import BoundaryMode, convolve2d

# tie band for the sign update; well above float error, well below the
# smallest nonzero exact response of a realized Ring/Rect kernel
SIGN_ZERO_TOL = 1e-9

# kernels must sum to zero within this tolerance to be accepted for a step
BALANCE_TOL = 1e-9

# realize_kernel guarantees this much balance
REALIZED_BALANCE_TOL = 1e-12

DEFAULT_STEP_CAP = 64


@dataclass(frozen=True)
class RingKernel:
    """Inner disk of weight w surrounded by a -1 annulus.

    A cell at offset (m, l) is inner when m^2 + l^2 < inner_radius and part of
    the annulus when inner_radius < m^2 + l^2 < outer_radius^2; w =
    (#annulus cells) / (#disk cells) using exact lattice-point counts, so the
    element sum is zero to machine precision. Ring(1.5, 2.5) realizes the
    5-cell plus-shape {(0,0), (+-1,0), (0,+-1)} at w = 16/5 inside a 16-cell
    annulus.
    """

    inner_radius: float
    outer_radius: float

    def __post_init__(self):
        if not (0 < self.inner_radius < self.outer_radius):
            raise ValueError(
                f"need 0 < inner_radius < outer_radius, got "
                f"{self.inner_radius}, {self.outer_radius}"
            )


@dataclass(frozen=True)
class RectKernel:
    """size x size kernel of -1 with a centered inner_h x inner_w positive block."""

    size: int
    inner_h: int
    inner_w: int

    def __post_init__(self):
        if self.size % 2 == 0 or self.size < 1:
            raise ValueError(f"kernel size must be odd and positive, got {self.size}")
        if not (1 <= self.inner_h <= self.size and 1 <= self.inner_w <= self.size):
            raise ValueError(
                f"inner block {self.inner_h}x{self.inner_w} outside [1, {self.size}]"
            )
        if self.inner_h * self.inner_w >= self.size * self.size:
            raise ValueError("inner block fills the kernel; no negative surround left")


@dataclass(frozen=True, eq=False)
class FreeKernel:
    """size x size kernel with arbitrary elements, mean-centered on realization."""

    size: int
    elements: np.ndarray

    def __post_init__(self):
        if self.size % 2 == 0 or self.size < 1:
            raise ValueError(f"kernel size must be odd and positive, got {self.size}")
        elems = np.asarray(self.elements, dtype=float)
        if elems.size != self.size * self.size:
            raise ValueError(
                f"expected {self.size * self.size} elements, got {elems.size}"
            )
        object.__setattr__(self, "elements", elems.reshape(self.size, self.size))


KernelSpec = Union[RingKernel, RectKernel, FreeKernel]


def realize_kernel(spec: KernelSpec) -> np.ndarray:
    """Materialize a kernel spec as a balanced 2D array (element sum ~ 0)."""
    if isinstance(spec, RingKernel):
        reach = int(math.ceil(spec.outer_radius)) - 1
        if reach < 0:
            raise ValueError("outer_radius too small to reach any lattice point")
        offs = np.arange(-reach, reach + 1)
        d2 = offs[:, None] ** 2 + offs[None, :] ** 2
        inner = d2 < spec.inner_radius
        outer = (d2 > spec.inner_radius) & (d2 < spec.outer_radius**2)
        n_in = int(inner.sum())
        n_out = int(outer.sum())
        if n_in == 0:
            raise ValueError("inner_radius encloses no lattice points")
        if n_out == 0:
            raise ValueError("annulus contains no lattice points")
        kernel = np.zeros_like(d2, dtype=float)
        kernel[inner] = n_out / n_in
        kernel[outer] = -1.0
        return kernel
    if isinstance(spec, RectKernel):
        size, ih, iw = spec.size, spec.inner_h, spec.inner_w
        kernel = np.full((size, size), -1.0)
        r0 = (size - ih) // 2
        c0 = (size - iw) // 2
        kernel[r0:r0 + ih, c0:c0 + iw] = (size * size - ih * iw) / (ih * iw)
        return kernel
    if isinstance(spec, FreeKernel):
        kernel = spec.elements - spec.elements.mean()
        kernel -= kernel.mean()  # second pass removes the rounding residual
        return kernel
    raise TypeError(f"not a kernel spec: {type(spec).__name__}")


def _check_balanced(kernel: np.ndarray) -> None:
    total = abs(float(kernel.sum()))
    if total > BALANCE_TOL:
        raise ValueError(f"kernel is not balanced: |sum| = {total:.3e}")


def _sign_plus(z: np.ndarray) -> np.ndarray:
    """sign with the |z| <= SIGN_ZERO_TOL band mapped to +1."""
    return np.where(z < -SIGN_ZERO_TOL, -1.0, 1.0)


@dataclass
class PatternState:
    """CA state: (C, H, W) cells in {-1, +1} plus bookkeeping."""

    cells: np.ndarray
    step_count: int = 0
    converged: bool = False

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=float)
        if cells.ndim == 2:
            cells = cells[np.newaxis]
        if cells.ndim != 3:
            raise ValueError(f"cells must be (H,W) or (C,H,W), got {cells.shape}")
        if cells.shape[0] not in (1, 3):
            raise ValueError(f"expected 1 or 3 channels, got {cells.shape[0]}")
        if not np.all(np.abs(cells) == 1.0):
            raise ValueError("cells must be exactly +-1")
        self.cells = cells

    @property
    def channels(self) -> int:
        return self.cells.shape[0]

    @property
    def shape(self) -> tuple:
        return self.cells.shape


def random_pattern(channels: int, height: int, width: int,
                   rng: np.random.Generator) -> PatternState:
    """iid uniform +-1 state."""
    cells = rng.integers(0, 2, size=(channels, height, width)) * 2.0 - 1.0
    return PatternState(cells)


def _per_channel(cells: np.ndarray, kernel: np.ndarray, mode) -> np.ndarray:
    return np.stack([convolve2d(ch, kernel, mode) for ch in cells])


def ca_step(state, kernel: np.ndarray, mode=BoundaryMode.PERIODIC):
    """One synchronous update n' = sign(Y * n) with a single shared kernel.

    Accepts a PatternState (returns PatternState, step_count incremented) or a
    bare (H,W) / (C,H,W) +-1 array (returns an array of the same shape).
    """
    if isinstance(state, PatternState):
        new = ca_step(state.cells, kernel, mode)
        return PatternState(new, step_count=state.step_count + 1)
    cells = np.asarray(state, dtype=float)
    if not np.all(np.abs(cells) == 1.0):
        raise ValueError("state entries must be exactly +-1")
    kernel = np.asarray(kernel, dtype=float)
    _check_balanced(kernel)
    if cells.ndim == 2:
        return _sign_plus(convolve2d(cells, kernel, mode))
    if cells.ndim == 3:
        return _sign_plus(_per_channel(cells, kernel, mode))
    raise ValueError(f"state must be (H,W) or (C,H,W), got {cells.shape}")


def ca_step_binary(state, kernel: np.ndarray, mode=BoundaryMode.PERIODIC):
    """The {0,1} form of the update: n' = (sign(Y * n) + 1) / 2."""
    cells = np.asarray(state, dtype=float)
    if not np.all((cells == 0.0) | (cells == 1.0)):
        raise ValueError("binary state entries must be 0 or 1")
    kernel = np.asarray(kernel, dtype=float)
    _check_balanced(kernel)
    if cells.ndim == 2:
        conv = convolve2d(cells, kernel, mode)
    elif cells.ndim == 3:
        conv = _per_channel(cells, kernel, mode)
    else:
        raise ValueError(f"state must be (H,W) or (C,H,W), got {cells.shape}")
    return 0.5 * (_sign_plus(conv) + 1.0)


@dataclass(frozen=True, eq=False)
class InitMap:
    """Coarse init state: per channel a tiles x tiles grid of +-1 constant tiles."""

    tile_values: np.ndarray  # (C, tiles, tiles)
    tile_size: int = 32

    def __post_init__(self):
        vals = np.asarray(self.tile_values, dtype=float)
        if vals.ndim == 2:
            vals = vals[np.newaxis]
        if vals.ndim != 3 or vals.shape[1] != vals.shape[2]:
            raise ValueError(f"tile_values must be (C, tiles, tiles), got {vals.shape}")
        if not np.all(np.abs(vals) == 1.0):
            raise ValueError("tile values must be exactly +-1")
        if self.tile_size < 1:
            raise ValueError("tile_size must be positive")
        object.__setattr__(self, "tile_values", vals)

    @property
    def channels(self) -> int:
        return self.tile_values.shape[0]

    @property
    def tiles(self) -> int:
        return self.tile_values.shape[1]


def expand_init(init_map: InitMap) -> PatternState:
    """Replicate each tile value over a tile_size x tile_size pixel block."""
    block = np.ones((init_map.tile_size, init_map.tile_size))
    cells = np.stack([np.kron(ch, block) for ch in init_map.tile_values])
    return PatternState(cells)


@dataclass(frozen=True)
class Independent:
    """One shared 2D kernel, channels evolve independently."""


@dataclass(frozen=True)
class Summation:
    """Shared 2D kernel; after convolving, channel 3 := channel 1 + channel 2."""


@dataclass(frozen=True, eq=False)
class Filter3D:
    """One 3 x L x L kernel; the response sums over channels and is shared.

    Elements are mean-centered over the whole block on use, so the summed
    response to a constant state vanishes.
    """

    elements: np.ndarray

    def __post_init__(self):
        elems = np.asarray(self.elements, dtype=float)
        if elems.ndim != 3 or elems.shape[0] != 3 or elems.shape[1] != elems.shape[2]:
            raise ValueError(f"Filter3D elements must be (3, L, L), got {elems.shape}")
        if elems.shape[1] % 2 == 0:
            raise ValueError("Filter3D kernel size must be odd")
        object.__setattr__(self, "elements", elems)


@dataclass(frozen=True, eq=False)
class Pointwise:
    """Three per-channel 2D kernels followed by a 3x3 channel mix before the sign."""

    mix: np.ndarray       # (3, 3)
    elements: np.ndarray  # (3, L, L), each channel kernel mean-centered on use

    def __post_init__(self):
        mix = np.asarray(self.mix, dtype=float)
        elems = np.asarray(self.elements, dtype=float)
        if mix.shape != (3, 3):
            raise ValueError(f"mix matrix must be 3x3, got {mix.shape}")
        if elems.ndim != 3 or elems.shape[0] != 3 or elems.shape[1] != elems.shape[2]:
            raise ValueError(f"Pointwise elements must be (3, L, L), got {elems.shape}")
        if elems.shape[1] % 2 == 0:
            raise ValueError("Pointwise kernel size must be odd")
        object.__setattr__(self, "mix", mix)
        object.__setattr__(self, "elements", elems)


MixStrategy = Union[Independent, Summation, Filter3D, Pointwise]


def _mix_response(cells: np.ndarray, base_kernel: Optional[np.ndarray],
                  mix: MixStrategy, mode) -> np.ndarray:
    """Pre-sign response of one CA step under a channel-mixing strategy."""
    if isinstance(mix, Independent):
        return _per_channel(cells, base_kernel, mode)
    if isinstance(mix, Summation):
        z = _per_channel(cells, base_kernel, mode)
        z[2] = z[0] + z[1]
        return z
    if isinstance(mix, Filter3D):
        k3 = mix.elements - mix.elements.mean()
        k3 -= k3.mean()
        summed = sum(convolve2d(cells[c], k3[c], mode) for c in range(3))
        return np.broadcast_to(summed, cells.shape).copy()
    if isinstance(mix, Pointwise):
        per = np.stack([
            convolve2d(cells[c], _center2d(mix.elements[c]), mode)
            for c in range(3)
        ])
        return np.einsum("cd,dhw->chw", mix.mix, per)
    raise TypeError(f"not a mix strategy: {type(mix).__name__}")


def _center2d(kernel: np.ndarray) -> np.ndarray:
    k = kernel - kernel.mean()
    k -= k.mean()
    return k


def run_ca(init: PatternState, kernel_spec: Optional[KernelSpec] = None,
           mix: MixStrategy = Independent(), steps: int = DEFAULT_STEP_CAP,
           mode=BoundaryMode.PERIODIC) -> PatternState:
    """Iterate the CA up to `steps` times, stopping early at a fixed point.

    Independent and Summation mixing realize their shared kernel from
    `kernel_spec`; Filter3D and Pointwise carry their own kernels and require
    kernel_spec=None. The returned state reports the steps actually taken and
    whether a fixed point was reached.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    cells = init.cells
    if isinstance(mix, (Independent, Summation)):
        if kernel_spec is None:
            raise ValueError(f"{type(mix).__name__} mixing needs a kernel spec")
        base = realize_kernel(kernel_spec)
        _check_balanced(base)
    else:
        if kernel_spec is not None:
            raise ValueError(
                f"{type(mix).__name__} mixing carries its own kernels; "
                "kernel_spec must be None"
            )
        base = None
    if not isinstance(mix, Independent) and init.channels != 3:
        raise ValueError(f"{type(mix).__name__} mixing needs a 3-channel state")
    if base is not None and (base.shape[0] > cells.shape[1] or base.shape[1] > cells.shape[2]):
        raise ValueError("kernel larger than the pattern grid")

    taken = 0
    converged = False
    for _ in range(steps):
        new = _sign_plus(_mix_response(cells, base, mix, mode))
        taken += 1
        if np.array_equal(new, cells):
            cells = new
            converged = True
            break
        cells = new
    return PatternState(cells, step_count=init.step_count + taken, converged=converged)
