"""tpat: Turing-pattern cellular automata as universal adversarial perturbations.

Modules:
  core        tensors, convolution, perturbation application, TPAT/PNG I/O
  ca          balanced kernels, the sign cellular automaton, channel mixing
  fourier     unitary 2D DFT, threshold filtering, dominant wavelength
  cmaes       self-contained (mu_w, lambda)-CMA-ES minimizer
  boyd        conv-net Jacobians, (p,q) power iteration, structure checks
  classifiers bundled toy CNN, remote HTTP client, label caching
  attack      parametrizations, rendering, fooling rate, optimization
  cli         the `tpat` command
"""

from .core import (
    BoundaryMode,
    apply_perturbation,
    convolve2d,
    image_from_png,
    load_tensor,
    pattern_to_png,
    save_tensor,
    seeded_rng,
)
from .ca import (
    FreeKernel,
    Filter3D,
    Independent,
    InitMap,
    PatternState,
    Pointwise,
    RectKernel,
    RingKernel,
    Summation,
    ca_step,
    ca_step_binary,
    expand_init,
    random_pattern,
    realize_kernel,
    run_ca,
)
from .fourier import (
    FractionOfMax,
    KeepMaxOnly,
    MaxMinusOne,
    dft2,
    dominant_wavelength,
    idft2,
    sfa_report,
    threshold_filter,
)
from .cmaes import EvalBudget, cma_ask, cma_init, cma_optimize, cma_tell
from .boyd import (
    BoydConfig,
    DiagMatrixModel,
    ToyConvNet,
    batch_gram,
    boyd_iterate,
    bundled_toy_net,
    circulant_from_stencil,
    convolutionality_score,
    depth_feature_size,
    jacobian,
    psi,
    theorem1_mc_check,
)
from .classifiers import (
    CachedClassifier,
    ClassifierHandle,
    RemoteClassifier,
    ToyCnnClassifier,
    builtin_toy_classifier,
    cached,
    parse_classifier_spec,
)
from .attack import (
    AttackSpace,
    FoolingReport,
    KernelAndInitParams,
    KernelOnlyParams,
    SimpleCAParams,
    decode_params,
    encode_params,
    fooling_rate,
    make_synthetic_images,
    optimize_attack,
    render_perturbation,
    sweep_filter_size,
    transfer_eval,
)

__version__ = "0.1.0"
