"""Numerical toolkit for evolution equations with fading memory.

Past-history and minimal-state realizations of linear viscoelastic memory,
spectral Galerkin wave models, energy diagnostics, and attractor probes.
"""

from .attractors import (
    PointCloud,
    attraction_rate,
    box_counting_dim,
    cloud_from_states,
    hausdorff_semidist,
    invariance_residual,
)
from .evolution import (
    BlowUpError,
    ModelOperators,
    Trajectory,
    holder_growth_probe,
    integrate,
    intertwine_residual,
    reconstruct_eta,
    reconstruct_xi,
    step,
)
from .kernels import (
    KernelError,
    MemoryKernel,
    check_dafermos,
    check_nec,
    derived,
    flatness_rate,
    k_from_mu,
    load_kernel_file,
    make_exponential_kernel,
    make_flatzone_kernel,
    make_jump_exponential_kernel,
    make_tabulated_kernel,
    split_sets,
    truncated_kernel,
)
from .spaces import (
    ExtendedVector,
    HistoryField,
    ModalVector,
    StateField,
    big_l_map,
    h_functional,
    lambda_identity_residual,
    lambda_map,
    norm_H,
    right_translate,
    tail_function,
)
from .viscoelastic import (
    GalerkinModel,
    assemble,
    condition_asso_probe,
    dissipation_integral_probe,
    energy_sigma,
    gamma_functional,
    hypothesis_probe_suite,
    lk_split,
    load_model_file,
    make_model,
    phi_functional,
)

__version__ = "0.1.0"
