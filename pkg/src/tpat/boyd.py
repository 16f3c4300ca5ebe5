"""White-box diagnostics: conv-net Jacobians, (p,q) power iteration, structure checks.

A small conv-ReLU network is assembled as explicit (sparse) convolution
operator matrices so the Jacobian of layer activations w.r.t. the input,

    J_i(x) = D_i M_i ... D_1 M_1,

is available densely at desk scale. On top of it:

  * boyd_iterate: the generalized power method
    eps <- psi_{p'}(J^T psi_q(J eps)) / ||.||_p, with the p = infinity form
    eps <- sign(J^T psi_q(J eps)); for q = 2 the iteration only needs the
    Gram matrix J^T J, so batch Grams plug in directly.
  * convolutionality_score: how close a grid-indexed matrix is to depending
    only on the 2D cell offset (Toeplitz-block-Toeplitz structure).
  * theorem1_mc_check: Monte-Carlo verification that E[D B D] = B o C for
    independent Bernoulli(c) activation indicators, C_lm = c on the diagonal
    and c^2 off it.

ReLU derivative at exactly 0 is defined as 0; hitting that case raises
SubgradientAmbiguityWarning since the Jacobian is then one-sided.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from statistics import NormalDist
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .core import BoundaryMode, seeded_rng
from .fourier import dominant_wavelength

# architecture and seed of the bundled diagnostics network; the depth sweep
# and emergence checks are pinned to this fixture
BUNDLED_NET_SEED = 20
BUNDLED_NET_SHAPE = (1, 32, 32)
BUNDLED_NET_CHANNELS = (1, 1, 1)


class DegenerateIterateError(RuntimeError):
    """The power-iteration update vector vanished; no direction to continue in."""


class SubgradientAmbiguityWarning(UserWarning):
    """Some pre-activation is exactly 0, where the ReLU derivative is one-sided."""


def psi(z, r: float):
    """Signed power psi_r(z) = sign(z) |z|^(r-1), with psi_r(0) = 0."""
    if r < 1:
        raise ValueError(f"psi exponent must satisfy r >= 1, got {r}")
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.abs(z) ** (r - 1.0)


def conv2d_matrix(kernel: np.ndarray, height: int, width: int,
                  mode: BoundaryMode = BoundaryMode.ZERO_PAD) -> sparse.csr_matrix:
    """Stride-1 2D convolution as a sparse matrix on flattened (C,H,W) vectors.

    kernel has shape (C_out, C_in, k, k) with k odd; the (c_out*H*W + i*W + j)
    output row sums kernel[c_out, c_in, m+r, l+r] * input[c_in, i+m, j+l],
    matching the correlation convention of core.convolve2d.
    """
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if k > height or k > width:
        raise ValueError("kernel larger than the grid")
    c_out, c_in = kernel.shape[:2]
    reach = k // 2
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    rows, cols, vals = [], [], []
    for co in range(c_out):
        for ci in range(c_in):
            for di in range(-reach, reach + 1):
                for dj in range(-reach, reach + 1):
                    w = kernel[co, ci, di + reach, dj + reach]
                    if w == 0.0:
                        continue
                    si, sj = ii + di, jj + dj
                    if mode == BoundaryMode.PERIODIC:
                        si, sj = si % height, sj % width
                        keep = slice(None)
                    else:
                        keep = ((si >= 0) & (si < height)
                                & (sj >= 0) & (sj < width))
                        si, sj = si[keep], sj[keep]
                    rows.append(co * height * width + (ii * width + jj)[keep])
                    cols.append(ci * height * width + si * width + sj)
                    vals.append(np.full(si.size, w))
    shape = (c_out * height * width, c_in * height * width)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=shape,
    )


class ToyConvNet:
    """Conv-ReLU stack (stride 1, zero padding) with a linear readout.

    All weights are drawn from the given seed; layer operators are kept both
    as kernels and as sparse matrices over flattened inputs.
    """

    def __init__(self, input_shape: Tuple[int, int, int],
                 channels: Sequence[int], kernel_size: int = 3,
                 n_classes: int = 10, seed: int = 0):
        c0, h, w = input_shape
        if c0 < 1 or h < 1 or w < 1:
            raise ValueError(f"bad input shape {input_shape}")
        self.input_shape = (c0, h, w)
        self.seed = int(seed)
        self.n_classes = int(n_classes)
        rng = seeded_rng(seed, "toy-conv-net")
        self.kernels: List[np.ndarray] = []
        self.operators: List[sparse.csr_matrix] = []
        prev = c0
        for c_next in channels:
            fan_in = prev * kernel_size * kernel_size
            kern = rng.standard_normal((c_next, prev, kernel_size, kernel_size))
            kern *= math.sqrt(2.0 / fan_in)
            self.kernels.append(kern)
            self.operators.append(conv2d_matrix(kern, h, w))
            prev = c_next
        feat = prev * h * w
        self.readout = rng.standard_normal((n_classes, feat)) / math.sqrt(feat)

    @property
    def depth(self) -> int:
        return len(self.operators)

    @property
    def input_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def _flat(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape == self.input_shape:
            x = x.reshape(-1)
        if x.shape != (self.input_dim,):
            raise ValueError(f"input shape {x.shape} does not match {self.input_shape}")
        return x

    def preactivations(self, x: np.ndarray) -> List[np.ndarray]:
        """Pre-ReLU vectors z_j = M_j a_{j-1} for every layer."""
        a = self._flat(x)
        zs = []
        for op in self.operators:
            z = op @ a
            zs.append(z)
            a = np.maximum(z, 0.0)
        return zs

    def features(self, x: np.ndarray, layer_index: int) -> np.ndarray:
        """Post-ReLU activation vector of the given layer (1-based)."""
        self._check_layer(layer_index)
        a = self._flat(x)
        for op in self.operators[:layer_index]:
            a = np.maximum(op @ a, 0.0)
        return a

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.readout @ self.features(x, self.depth)

    def preactivation_margin(self, x: np.ndarray) -> float:
        """Smallest |z| over all units; small margins make Jacobians fragile."""
        return min(float(np.min(np.abs(z))) for z in self.preactivations(x))

    def _check_layer(self, layer_index: int) -> None:
        if not 1 <= layer_index <= self.depth:
            raise ValueError(
                f"layer index {layer_index} outside 1..{self.depth}"
            )


def bundled_toy_net() -> ToyConvNet:
    """The fixed 3-layer diagnostics network used by the depth sweep."""
    return ToyConvNet(BUNDLED_NET_SHAPE, BUNDLED_NET_CHANNELS,
                      seed=BUNDLED_NET_SEED)


def jacobian(net: ToyConvNet, x: np.ndarray, layer_index: int) -> np.ndarray:
    """Dense J_i(x) = D_i M_i ... D_1 M_1 of layer activations w.r.t. the input.

    D_j is the diagonal of ReLU-derivative indicators of layer j's
    pre-activations, with derivative 0 at exactly 0 (warned, since the true
    subgradient there is ambiguous).
    """
    net._check_layer(layer_index)
    zs = net.preactivations(x)
    jac: Optional[np.ndarray] = None
    for j in range(layer_index):
        z = zs[j]
        if np.any(z == 0.0):
            warnings.warn(
                f"layer {j + 1} has a pre-activation exactly at 0; "
                "Jacobian uses derivative 0 there",
                SubgradientAmbiguityWarning,
            )
        op = net.operators[j]
        jac = op.toarray() if jac is None else op @ jac
        jac[z <= 0.0] = 0.0  # row scale by the indicator diagonal
    return jac


def batch_gram(net: ToyConvNet, images: Sequence[np.ndarray],
               layer_index: int) -> np.ndarray:
    """Sum of J_i(x)^T J_i(x) over the batch; symmetric PSD by construction."""
    images = list(images)
    if not images:
        raise ValueError("batch must be non-empty")
    gram = np.zeros((net.input_dim, net.input_dim))
    for x in images:
        jac = jacobian(net, x, layer_index)
        gram += jac.T @ jac
    return gram


@dataclass(frozen=True)
class BoydConfig:
    """(p, q) choice and stopping rule for the power iteration."""

    p: float = math.inf
    q: float = 2.0
    layer_index: int = 1
    max_iters: int = 100
    tol: float = 1e-10

    def __post_init__(self):
        if self.p not in (2.0, math.inf):
            raise ValueError(f"p must be 2 or inf, got {self.p}")
        if self.q not in (1.0, 2.0):
            raise ValueError(f"q must be 1 or 2, got {self.q}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")

    @property
    def p_dual(self) -> float:
        """Holder conjugate p' with 1/p + 1/p' = 1; p = inf gives p' = 1."""
        return 1.0 if math.isinf(self.p) else self.p / (self.p - 1.0)


def _p_normalize(vec: np.ndarray, p: float) -> np.ndarray:
    norm = float(np.linalg.norm(vec, ord=p))
    if norm < 1e-300:
        raise DegenerateIterateError("degenerate iterate: zero vector")
    return vec / norm


def boyd_iterate(operator: np.ndarray, cfg: BoydConfig, eps0: np.ndarray,
                 is_gram: bool = False) -> Tuple[np.ndarray, dict]:
    """Run the (p,q) power iteration to a fixed point or the iteration cap.

    `operator` is J itself, or with is_gram=True an already-formed J^T J
    (then q must be 2, the only case where the update factors through the
    Gram). History carries the objective ||J eps_t||_q^q per iterate, which
    for the Gram case is eps^T G eps.
    """
    operator = np.asarray(operator, dtype=float)
    if operator.ndim != 2:
        raise ValueError(f"operator must be a matrix, got shape {operator.shape}")
    if is_gram:
        if operator.shape[0] != operator.shape[1]:
            raise ValueError("Gram operator must be square")
        if cfg.q != 2.0:
            raise ValueError("Gram-only iteration requires q = 2")
    eps = np.asarray(eps0, dtype=float).reshape(-1)
    dim = operator.shape[1]
    if eps.shape != (dim,):
        raise ValueError(f"eps0 must have dimension {dim}, got {eps.shape}")
    if not np.any(eps):
        raise DegenerateIterateError("degenerate iterate: eps0 is zero")

    if math.isinf(cfg.p):
        eps = np.where(eps >= 0.0, 1.0, -1.0)
    else:
        eps = _p_normalize(eps, cfg.p)

    def objective(vec: np.ndarray) -> float:
        if is_gram:
            return float(vec @ operator @ vec)
        return float(np.sum(np.abs(operator @ vec) ** cfg.q))

    history = {"objective": [objective(eps)], "iterations": 0, "converged": False}
    for _ in range(cfg.max_iters):
        if is_gram:
            update = operator @ eps
        else:
            update = operator.T @ psi(operator @ eps, cfg.q)
        if float(np.max(np.abs(update))) < 1e-300:
            raise DegenerateIterateError("degenerate iterate: zero update vector")
        if math.isinf(cfg.p):
            nxt = np.where(update >= 0.0, 1.0, -1.0)
        else:
            nxt = _p_normalize(psi(update, cfg.p_dual), cfg.p)
        history["iterations"] += 1
        history["objective"].append(objective(nxt))
        done = float(np.max(np.abs(nxt - eps))) < cfg.tol
        eps = nxt
        if done:
            history["converged"] = True
            break
    return eps, history


def convolutionality_score(matrix: np.ndarray, geometry: Tuple[int, int],
                           margin: Optional[int] = None) -> float:
    """How closely matrix entries depend only on the 2D cell offset, in [0, 1].

    The matrix must be square over flattened (C, H, W) grids with C inferred
    from its size. Entries between interior cells (at least `margin` away
    from every edge, default min(H,W)//4) are grouped by (channel pair, row
    offset, column offset); the score is

        1 - mean(within-group std) / mean(within-group |mean|)

    clipped to [0, 1]. Exactly convolutional matrices have zero variance in
    every group and score 1.
    """
    matrix = np.asarray(matrix, dtype=float)
    height, width = geometry
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"matrix must be square, got shape {matrix.shape}")
    cells = height * width
    if height < 1 or width < 1 or matrix.shape[0] % cells != 0:
        raise ValueError(
            f"matrix dimension {matrix.shape[0]} does not fit geometry {geometry}"
        )
    channels = matrix.shape[0] // cells
    if margin is None:
        margin = min(height, width) // 4
    span_h = height - 2 * margin
    span_w = width - 2 * margin
    if span_h < 1 or span_w < 1:
        raise ValueError(f"margin {margin} leaves no interior cells")

    ii, jj = np.meshgrid(np.arange(margin, height - margin),
                         np.arange(margin, width - margin), indexing="ij")
    flat = (ii * width + jj).ravel()
    idx = (np.arange(channels)[:, None] * cells + flat[None, :]).ravel()
    sub = matrix[np.ix_(idx, idx)]

    n_int = flat.size
    chan = np.repeat(np.arange(channels), n_int)
    rows_i = np.tile(ii.ravel(), channels)
    cols_j = np.tile(jj.ravel(), channels)
    # group id of entry (a, b): channel pair plus 2D offset
    off_i = rows_i[None, :] - rows_i[:, None] + span_h - 1
    off_j = cols_j[None, :] - cols_j[:, None] + span_w - 1
    pair = chan[:, None] * channels + chan[None, :]
    n_off_i = 2 * span_h - 1
    n_off_j = 2 * span_w - 1
    gid = ((pair * n_off_i + off_i) * n_off_j + off_j).ravel()
    vals = sub.ravel()

    counts = np.bincount(gid)
    present = counts > 0
    sums = np.bincount(gid, weights=vals)
    group_mean = np.zeros_like(sums)
    group_mean[present] = sums[present] / counts[present]
    # two-pass variance: exact zero for constant groups
    resid = vals - group_mean[gid]
    sqsums = np.bincount(gid, weights=resid * resid)
    variances = sqsums[present] / counts[present]
    mean_std = float(np.mean(np.sqrt(variances)))
    mean_abs = float(np.mean(np.abs(group_mean[present])))
    if mean_abs < 1e-300:
        return 1.0 if mean_std < 1e-300 else 0.0
    return float(np.clip(1.0 - mean_std / mean_abs, 0.0, 1.0))


def circulant_from_stencil(stencil: Sequence[float], n: int) -> np.ndarray:
    """Symmetric n x n circulant with B[l, l +- d] = stencil[d] (cyclically)."""
    stencil = np.asarray(stencil, dtype=float)
    if stencil.ndim != 1 or stencil.size < 1:
        raise ValueError("stencil must be a non-empty 1D sequence")
    if stencil.size > n // 2 + 1:
        raise ValueError(f"stencil reach {stencil.size - 1} exceeds grid {n}")
    mat = np.zeros((n, n))
    for d, value in enumerate(stencil):
        if value == 0.0:
            continue
        idx = np.arange(n)
        mat[idx, (idx + d) % n] = value
        mat[idx, (idx - d) % n] = value
    return mat


@dataclass(frozen=True)
class DiagMatrixModel:
    """Activation-indicator model: P(unit active) = c, optional offset stencil.

    The stencil describes a convolutional covariance of the indicators
    (entry d = covariance at cell offset +-d); it must be symmetric under
    offset negation. The Monte-Carlo check itself draws independent
    indicators; the stencil is carried for reporting.
    """

    c: float
    stencil: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError(f"activation probability must be in [0,1], got {self.c}")
        if self.stencil is not None:
            s = np.asarray(self.stencil, dtype=float)
            if s.ndim != 1:
                raise ValueError("stencil must be 1D (indexed by |offset|)")
            object.__setattr__(self, "stencil", s)


def theorem1_mc_check(conv_matrix: np.ndarray, model: DiagMatrixModel,
                      samples: int, seed: int = 0) -> dict:
    """Monte-Carlo check that E[D B D] = B o C for independent Bernoulli diagonals.

    C has c on the diagonal and c^2 elsewhere. Each matrix entry's estimator
    has a known closed-form standard deviation (Bernoulli products scaled by
    B), so the report carries a per-entry bound at the 3-sigma confidence
    level with a family-wise (Sidak-style) correction over all entries with
    nonzero variance.
    """
    B = np.asarray(conv_matrix, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ValueError("conv matrix must be square")
    if samples < 1:
        raise ValueError("samples must be positive")
    n = B.shape[0]
    c = model.c

    draws = (seeded_rng(seed, "theorem1-mc").random((samples, n)) < c)
    draws = draws.astype(float)
    second_moment = (draws.T @ draws) / samples  # entry (l,m): mean of d_l d_m
    estimate = B * second_moment

    theory_c = np.full((n, n), c * c)
    np.fill_diagonal(theory_c, c)
    expected = B * theory_c
    deviation = estimate - expected

    sd_entry = np.full((n, n), math.sqrt(max(c * c * (1.0 - c * c), 0.0)))
    np.fill_diagonal(sd_entry, math.sqrt(max(c * (1.0 - c), 0.0)))
    entry_sigma = np.abs(B) * sd_entry / math.sqrt(samples)

    fluctuating = entry_sigma > 0.0
    m = int(fluctuating.sum())
    # per-entry quantile such that the family-wise miss probability matches
    # a single two-sided 3-sigma test (0.27%)
    per_entry_miss = 0.00135 / m if m else 0.00135
    threshold = NormalDist().inv_cdf(1.0 - per_entry_miss)

    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(fluctuating, np.abs(deviation) / np.where(
            fluctuating, entry_sigma, 1.0), 0.0)
    frozen_ok = bool(np.all(deviation[~fluctuating] == 0.0))
    max_ratio = float(ratio.max()) if m else 0.0
    return {
        "n": n,
        "c": c,
        "samples": int(samples),
        "max_abs_deviation": float(np.abs(deviation).max()),
        "max_deviation_sigmas": max_ratio,
        "threshold_sigmas": float(threshold),
        "fluctuating_entries": m,
        "within_bound": frozen_ok and max_ratio <= threshold,
    }


def layer_diagnostics(net: ToyConvNet, batch: Sequence[np.ndarray],
                      layers: Sequence[int], max_iters: int = 64,
                      seed: int = 0) -> List[dict]:
    """Per-layer batch-Gram diagnostics: Boyd pattern, wavelength, structure.

    For each layer the batch Gram is formed, the p=inf, q=2 sign power
    iteration is run from a seeded start, the +-1 result (reshaped to the
    input grid) is measured with fourier_analysis, and the Gram's
    convolutionality is scored. Deterministic for fixed inputs and seed.
    """
    _, grid_h, grid_w = net.input_shape
    out = []
    for layer_index in layers:
        gram = batch_gram(net, batch, layer_index)
        eps0 = seeded_rng(seed, f"boyd-eps0-layer{layer_index}").standard_normal(
            net.input_dim)
        cfg = BoydConfig(p=math.inf, q=2.0, layer_index=layer_index,
                         max_iters=max_iters, tol=1e-9)
        pattern, history = boyd_iterate(gram, cfg, eps0, is_gram=True)
        pattern = pattern.reshape(net.input_shape)
        out.append({
            "layer": int(layer_index),
            "pattern": pattern,
            "wavelength": dominant_wavelength(pattern),
            "convolutionality": convolutionality_score(gram, (grid_h, grid_w)),
            "iterations": history["iterations"],
            "converged": history["converged"],
        })
    return out


def depth_feature_size(net: ToyConvNet, batch: Sequence[np.ndarray],
                       layers: Sequence[int], max_iters: int = 64,
                       seed: int = 0) -> List[float]:
    """Dominant wavelength of the p=inf, q=2 Boyd pattern per requested layer."""
    return [row["wavelength"]
            for row in layer_diagnostics(net, batch, layers, max_iters, seed)]
