"""Pattern attacks: parameter encoding, perturbation rendering, fooling rate.

Three parametrization variants are searched with CMA-ES over a flat real
vector:

  * "simple": an inner-rectangle kernel (l1, l2, continuous-relaxed and
    rounded at decode) plus per-channel tiled init maps;
  * "kernel-init": free kernel elements (per channel-mixing strategy) plus
    the tiled init maps;
  * "kernel-only": free kernel elements alone, the init drawn iid +-1 from a
    fixed seed.

A rendered perturbation is the CA fixed point (or capped run) scaled by the
max-norm budget, so every entry is exactly +-budget. The fooling rate of a
perturbation is the fraction of images whose argmax label changes when it is
added; clean labels are the classifier's own predictions, never ground truth.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .ca import (
    Filter3D,
    FreeKernel,
    Independent,
    InitMap,
    PatternState,
    Pointwise,
    RectKernel,
    Summation,
    expand_init,
    run_ca,
)
from .cmaes import EvalBudget, cma_optimize, default_lambda
from .classifiers import ClassifierHandle, cached
from .core import BoundaryMode, apply_perturbation, seeded_rng

VARIANTS = ("simple", "kernel-init", "kernel-only")
MIXES = ("independent", "summation", "filter3d", "pointwise")


@dataclass(frozen=True)
class AttackSpace:
    """Search-space description shared by encode/decode/render.

    The pattern is channels x (tiles*tile_size) square; the defaults
    (L=13, 7x7 tiles of 32) suit 224-pixel classifiers, small-scale runs pass
    smaller tilings.
    """

    variant: str = "simple"
    filter_size: int = 13
    tiles: int = 7
    tile_size: int = 32
    channels: int = 3
    budget: float = 10.0
    mix: str = "independent"
    steps: int = 64
    boundary: BoundaryMode = BoundaryMode.PERIODIC
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        if self.mix not in MIXES:
            raise ValueError(f"unknown mix {self.mix!r}; pick from {MIXES}")
        if self.variant == "simple" and self.mix != "independent":
            raise ValueError("the simple variant evolves channels independently")
        if self.filter_size % 2 == 0 or self.filter_size < 3:
            raise ValueError(f"filter size must be odd and >= 3, got {self.filter_size}")
        if self.channels != 3:
            raise ValueError("attack patterns are 3-channel")
        if self.tiles < 1 or self.tile_size < 1:
            raise ValueError("tiles and tile_size must be positive")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @property
    def pattern_shape(self) -> Tuple[int, int, int]:
        side = self.tiles * self.tile_size
        return (self.channels, side, side)

    @property
    def kernel_dim(self) -> int:
        k2 = self.filter_size * self.filter_size
        if self.mix in ("independent", "summation"):
            return k2
        if self.mix == "filter3d":
            return 3 * k2
        return 3 * k2 + 9  # pointwise: three kernels plus the 3x3 mix matrix

    @property
    def init_dim(self) -> int:
        return self.channels * self.tiles * self.tiles

    @property
    def dim(self) -> int:
        if self.variant == "simple":
            return 2 + self.init_dim
        if self.variant == "kernel-init":
            return self.kernel_dim + self.init_dim
        return self.kernel_dim


@dataclass(frozen=True, eq=False)
class SimpleCAParams:
    l1: int
    l2: int
    init: InitMap


@dataclass(frozen=True, eq=False)
class KernelAndInitParams:
    elements: np.ndarray
    init: InitMap
    mix_matrix: Optional[np.ndarray] = None  # pointwise only


@dataclass(frozen=True, eq=False)
class KernelOnlyParams:
    elements: np.ndarray
    mix_matrix: Optional[np.ndarray] = None


AttackParams = Union[SimpleCAParams, KernelAndInitParams, KernelOnlyParams]


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def _decode_rect_sides(v1: float, v2: float, size: int) -> Tuple[int, int]:
    l1 = min(max(_round_half_up(v1), 1), size)
    l2 = min(max(_round_half_up(v2), 1), size)
    if l1 * l2 >= size * size:  # keep a negative surround: shrink one side
        l2 = size - 1
    return l1, l2


def _decode_init(logits: np.ndarray, space: AttackSpace) -> InitMap:
    values = np.where(logits >= 0.0, 1.0, -1.0)
    values = values.reshape(space.channels, space.tiles, space.tiles)
    return InitMap(values, tile_size=space.tile_size)


def _split_kernel(flat: np.ndarray, space: AttackSpace
                  ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    k = space.filter_size
    if space.mix in ("independent", "summation"):
        return flat.reshape(k, k), None
    if space.mix == "filter3d":
        return flat.reshape(3, k, k), None
    return flat[: 3 * k * k].reshape(3, k, k), flat[3 * k * k:].reshape(3, 3)


def decode_params(vector: np.ndarray, space: AttackSpace) -> AttackParams:
    """Flat optimizer vector -> structured parameters (discretizing as needed)."""
    vector = np.asarray(vector, dtype=float).reshape(-1)
    if vector.shape != (space.dim,):
        raise ValueError(
            f"expected a {space.dim}-vector for {space.variant}, got {vector.shape}"
        )
    if space.variant == "simple":
        l1, l2 = _decode_rect_sides(vector[0], vector[1], space.filter_size)
        return SimpleCAParams(l1, l2, _decode_init(vector[2:], space))
    if space.variant == "kernel-init":
        elements, mix_matrix = _split_kernel(vector[: space.kernel_dim], space)
        init = _decode_init(vector[space.kernel_dim:], space)
        return KernelAndInitParams(elements, init, mix_matrix)
    elements, mix_matrix = _split_kernel(vector, space)
    return KernelOnlyParams(elements, mix_matrix)


def encode_params(theta: AttackParams, space: AttackSpace) -> np.ndarray:
    """Structured parameters -> flat vector; decode(encode(theta)) == theta."""
    if isinstance(theta, SimpleCAParams):
        if space.variant != "simple":
            raise ValueError(f"{space.variant} space cannot encode SimpleCAParams")
        return np.concatenate([
            [float(theta.l1), float(theta.l2)],
            theta.init.tile_values.reshape(-1),
        ])
    if isinstance(theta, KernelAndInitParams):
        if space.variant != "kernel-init":
            raise ValueError(f"{space.variant} space cannot encode KernelAndInitParams")
        parts = [np.asarray(theta.elements, dtype=float).reshape(-1)]
        if theta.mix_matrix is not None:
            parts.append(np.asarray(theta.mix_matrix, dtype=float).reshape(-1))
        parts.append(theta.init.tile_values.reshape(-1))
        return np.concatenate(parts)
    if isinstance(theta, KernelOnlyParams):
        if space.variant != "kernel-only":
            raise ValueError(f"{space.variant} space cannot encode KernelOnlyParams")
        parts = [np.asarray(theta.elements, dtype=float).reshape(-1)]
        if theta.mix_matrix is not None:
            parts.append(np.asarray(theta.mix_matrix, dtype=float).reshape(-1))
        return np.concatenate(parts)
    raise TypeError(f"not attack params: {type(theta).__name__}")


def _kernel_and_mix(theta: AttackParams, space: AttackSpace):
    if isinstance(theta, SimpleCAParams):
        return RectKernel(space.filter_size, theta.l1, theta.l2), Independent()
    elements = theta.elements
    if space.mix == "independent":
        return FreeKernel(space.filter_size, elements), Independent()
    if space.mix == "summation":
        return FreeKernel(space.filter_size, elements), Summation()
    if space.mix == "filter3d":
        return None, Filter3D(elements)
    return None, Pointwise(theta.mix_matrix, elements)


def _initial_state(theta: AttackParams, space: AttackSpace) -> PatternState:
    if isinstance(theta, KernelOnlyParams):
        rng = seeded_rng(space.init_seed, "kernel-only-init")
        cells = rng.integers(0, 2, size=space.pattern_shape) * 2.0 - 1.0
        return PatternState(cells)
    return expand_init(theta.init)


def render_perturbation(theta: AttackParams, space: AttackSpace) -> np.ndarray:
    """CA pattern scaled by the budget: every entry is exactly +-budget."""
    spec, mix = _kernel_and_mix(theta, space)
    state = run_ca(_initial_state(theta, space), spec, mix,
                   steps=space.steps, mode=space.boundary)
    return state.cells * space.budget


@dataclass
class FoolingReport:
    """Outcome of one fooling-rate measurement."""

    fooling_rate: float
    n_images: int
    flips: List[bool]
    queries_used: int
    provenance: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "fooling_rate": self.fooling_rate,
            "n_images": self.n_images,
            "flips": [bool(v) for v in self.flips],
            "queries_used": self.queries_used,
            "provenance": self.provenance,
            "wall_time_s": self.wall_time_s,
        }


def fooling_rate(classifier: ClassifierHandle, images, perturbation: np.ndarray,
                 budget: Optional[float] = None,
                 clean_labels: Optional[Sequence[int]] = None,
                 provenance: Optional[dict] = None) -> FoolingReport:
    """Fraction of images whose argmax label flips under the perturbation.

    `perturbation` is pre-scaled (entries already within the budget; rendered
    patterns are +-budget). Clean labels are classified here unless supplied;
    wrap the classifier with classifiers.cached() to make repeat calls cost
    one pass instead of two.
    """
    start = time.monotonic()
    images = np.asarray(images, dtype=float)
    if images.ndim == 3:
        images = images[np.newaxis]
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("need a non-empty batch of (3,H,W) images")
    perturbation = np.asarray(perturbation, dtype=float)
    if perturbation.shape != images.shape[1:]:
        raise ValueError(
            f"perturbation shape {perturbation.shape} does not match "
            f"images {images.shape[1:]}"
        )
    if budget is None:
        budget = max(float(np.max(np.abs(perturbation))), 1.0)
    queries = 0
    if clean_labels is None:
        clean_labels = classifier.classify_batch(images)
        queries += images.shape[0]
    elif len(clean_labels) != images.shape[0]:
        raise ValueError("clean_labels length does not match the batch")
    perturbed = apply_perturbation(images, perturbation, budget)
    adv_labels = classifier.classify_batch(perturbed)
    queries += images.shape[0]
    flips = [int(c) != int(a) for c, a in zip(clean_labels, adv_labels)]
    return FoolingReport(
        fooling_rate=sum(flips) / len(flips),
        n_images=len(flips),
        flips=flips,
        queries_used=queries,
        provenance=dict(provenance or {}),
        wall_time_s=time.monotonic() - start,
    )


def random_vector(space: AttackSpace, rng: np.random.Generator) -> np.ndarray:
    """A random point of the search space, distributed like the CMA-ES start."""
    if space.variant == "simple":
        sides = rng.uniform(1.0, space.filter_size, size=2)
        logits = rng.standard_normal(space.init_dim)
        return np.concatenate([sides, logits])
    return rng.standard_normal(space.dim)


def initial_vector(space: AttackSpace, seed: int) -> np.ndarray:
    """Deterministic CMA-ES starting mean for a seed."""
    return random_vector(space, seeded_rng(seed, "cma-x0"))


def _make_evaluator(objective, threads: int):
    if threads <= 1:
        return None, None
    executor = ThreadPoolExecutor(max_workers=threads)

    def evaluate(batch):
        return list(executor.map(objective, batch))

    return executor, evaluate


def optimize_attack(classifier: ClassifierHandle, train_images, space: AttackSpace,
                    query_budget: int, seed: int = 0, sigma0: float = 1.0,
                    lambda_override: Optional[int] = None, threads: int = 1,
                    ) -> Tuple[AttackParams, FoolingReport, List[dict]]:
    """CMA-ES search for the best-fooling parameters within a query budget.

    One query = one candidate evaluation (one fooling-rate measurement over
    the training images). Clean labels are classified once up front and do
    not count against the budget. Returns the decoded best parameters, a
    fooling report for them, and the per-generation trace.
    """
    start = time.monotonic()
    classifier = cached(classifier)
    images = np.asarray(train_images, dtype=float)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("need a non-empty (N,3,H,W) training batch")
    if images.shape[1:] != space.pattern_shape:
        raise ValueError(
            f"images {images.shape[1:]} do not match pattern {space.pattern_shape}"
        )
    clean_labels = classifier.classify_batch(images)

    def objective(vec: np.ndarray) -> float:
        theta = decode_params(vec, space)
        eps = render_perturbation(theta, space)
        report = fooling_rate(classifier, images, eps, budget=space.budget,
                              clean_labels=clean_labels)
        return -report.fooling_rate

    executor, evaluate = _make_evaluator(objective, threads)
    budget = EvalBudget(query_budget)
    try:
        best_x, best_f, trace = cma_optimize(
            objective, initial_vector(space, seed), sigma0, budget,
            seed=seed, lambda_override=lambda_override, evaluator=evaluate,
        )
    finally:
        if executor is not None:
            executor.shutdown()

    theta_star = decode_params(best_x, space)
    report = fooling_rate(
        classifier, images, render_perturbation(theta_star, space),
        budget=space.budget, clean_labels=clean_labels,
        provenance={
            "variant": space.variant,
            "mix": space.mix,
            "filter_size": space.filter_size,
            "seed": seed,
            "budget": space.budget,
            "sigma0": sigma0,
            "query_budget": query_budget,
        },
    )
    report.queries_used = budget.evaluations_used
    report.wall_time_s = time.monotonic() - start
    return theta_star, report, trace


def sweep_filter_size(classifier: ClassifierHandle, images,
                      sizes: Sequence[int], query_budget: int, seed: int = 0,
                      tiles: int = 4, tile_size: int = 8, sigma0: float = 1.0,
                      n_random_inits: int = 10, threads: int = 1) -> List[dict]:
    """Fooling rate versus kernel size.

    Per size: one kernel-and-init optimization, then the optimized kernel is
    re-rendered without its init map over `n_random_inits` random init seeds
    (kernel-only style) and the min/mean/max fooling rate is recorded.
    """
    classifier = cached(classifier)
    rows = []
    for size in sizes:
        space = AttackSpace(variant="kernel-init", filter_size=size,
                            tiles=tiles, tile_size=tile_size)
        theta, report, _ = optimize_attack(classifier, images, space,
                                           query_budget, seed=seed,
                                           sigma0=sigma0, threads=threads)
        init_rng = seeded_rng(seed, f"sweep-inits-{size}")
        frs = []
        for _ in range(n_random_inits):
            ko_space = AttackSpace(variant="kernel-only", filter_size=size,
                                   tiles=tiles, tile_size=tile_size,
                                   init_seed=int(init_rng.integers(0, 2**31)))
            ko_theta = KernelOnlyParams(theta.elements, theta.mix_matrix)
            eps = render_perturbation(ko_theta, ko_space)
            frs.append(fooling_rate(classifier, images, eps,
                                    budget=space.budget).fooling_rate)
        rows.append({
            "filter_size": int(size),
            "fr_kernel_init": report.fooling_rate,
            "fr_kernel_only_min": min(frs),
            "fr_kernel_only_mean": sum(frs) / len(frs),
            "fr_kernel_only_max": max(frs),
        })
    return rows


def transfer_eval(perturbations, classifiers: Sequence[ClassifierHandle],
                  images) -> np.ndarray:
    """Fooling-rate matrix: rows are perturbations, columns classifiers."""
    eps_list = np.asarray(perturbations, dtype=float)
    if eps_list.ndim == 3:
        eps_list = eps_list[np.newaxis]
    if eps_list.ndim != 4:
        raise ValueError("perturbations must be one or more (3,H,W) arrays")
    if not classifiers:
        raise ValueError("need at least one classifier")
    handles = [cached(handle) for handle in classifiers]
    matrix = np.zeros((eps_list.shape[0], len(handles)))
    for i, eps in enumerate(eps_list):
        for j, handle in enumerate(handles):
            matrix[i, j] = fooling_rate(handle, images, eps).fooling_rate
    return matrix


def make_synthetic_images(n: int, shape: Tuple[int, int, int] = (3, 32, 32),
                          seed: int = 0) -> np.ndarray:
    """Seeded stand-in data: smooth noise fields with geometric figures.

    Returns (n, 3, H, W) float64 values in [0, 255], quantized to 32-bit wire
    precision so downstream caching is bit-stable.
    """
    if n < 1:
        raise ValueError("need at least one image")
    channels, height, width = shape
    if channels != 3:
        raise ValueError("images are 3-channel")
    rng = seeded_rng(seed, "data")
    yy, xx = np.mgrid[0:height, 0:width]
    images = np.empty((n, channels, height, width))
    for idx in range(n):
        spectrum = rng.standard_normal((channels, height, width)) * np.exp(
            -0.35 * np.hypot(np.minimum(yy, height - yy),
                             np.minimum(xx, width - xx)))
        base = np.real(np.fft.ifft2(spectrum, axes=(1, 2)))
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            radius = rng.uniform(2.0, max(height, width) / 3.0)
            tint = rng.uniform(-1.0, 1.0, size=(channels, 1, 1))
            if rng.random() < 0.5:
                mask = (np.hypot(yy - cy, xx - cx) < radius)
            else:
                mask = ((np.abs(yy - cy) < radius) & (np.abs(xx - cx) < radius))
            base = base + tint * mask
        lo, hi = base.min(), base.max()
        span = hi - lo if hi > lo else 1.0
        images[idx] = (base - lo) / span * 255.0
    return images.astype(np.float32).astype(np.float64)
