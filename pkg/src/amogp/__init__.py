"""Aligned multi-output Gaussian processes with sparse variational inference."""

import jax

jax.config.update("jax_enable_x64", True)

from .kernels import OutputTaggedPoints, RbfParams, SmoothingKernelParams, cp_cross_cov, cp_gram, rbf_gram  # noqa: E402
from .linalg import NotPositiveDefiniteError, robust_cholesky, trace_product  # noqa: E402
from .psi import GaussianMoments, PsiTriple, mc_psi_oracle, psi_cp, psi_rbf  # noqa: E402
from .model import (  # noqa: E402
    AmoGpModel,
    LabeledDataset,
    Layout,
    ModelConfig,
    build_model,
    decompose,
    elbo,
    load_model,
    predict,
    sample_functions,
    save_model,
    test_log_likelihood,
)

__version__ = "0.1.0"
