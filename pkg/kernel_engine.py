"""Infinite-width view of the ReLU random-features layer.

With U ~ N(0, 1/d) entrywise, (1/m) ReLU(Ux)^T ReLU(Ux') converges to the
first-order arc-cosine kernel. Theorem checks use ratios k(x, x')/k(x, x),
in which the prefactor cancels.
"""
import logging
from typing import Sequence, Tuple

import numpy as np

from config import NumericalLimits
from exceptions import DegenerateBasis, DegenerateFeatures, DegenerateInput, ParameterError
from models import FactEdit, KernelPrediction, MixtureDecomposition, ModelParams

logger = logging.getLogger(__name__)


def _norm_or_raise(x: np.ndarray, name: str) -> float:
    norm = float(np.linalg.norm(x))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateInput(f"{name} has zero (or non-finite) norm", {"vector": name})
    return norm


def _angle(x: np.ndarray, x2: np.ndarray) -> Tuple[float, float, float]:
    nx, nx2 = _norm_or_raise(x, "x"), _norm_or_raise(x2, "x'")
    inner = float(x @ x2)
    # arctan2 of (|x| |x'_perp|, x.x') stays exact at eta = 0 where arccos loses precision.
    perp = float(np.linalg.norm(x2 - (inner / (nx * nx)) * x))
    if perp <= 4 * np.finfo(float).eps * nx2:
        perp = 0.0  # parallel up to rounding
    return nx, nx2, float(np.arctan2(perp * nx, inner))


def arccos_kernel(x: np.ndarray, x2: np.ndarray, d: int) -> float:
    """|x||x'| / (2 (d+1) pi) * ((pi - eta) cos eta + sin eta)."""
    nx, nx2, eta = _angle(np.asarray(x, dtype=float), np.asarray(x2, dtype=float))
    shape = (np.pi - eta) * np.cos(eta) + np.sin(eta)
    return nx * nx2 / (2 * (d + 1) * np.pi) * shape


def kernel_ratio(x: np.ndarray, x2: np.ndarray) -> float:
    """k(x, x') / k(x, x); prefactor-free."""
    nx, nx2, eta = _angle(np.asarray(x, dtype=float), np.asarray(x2, dtype=float))
    shape = (np.pi - eta) * np.cos(eta) + np.sin(eta)
    return (nx2 / nx) * shape / np.pi


def _relu_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.maximum(params.U @ np.asarray(x, dtype=float), 0.0)


def mc_kernel_ratio(params: ModelParams, x: np.ndarray, x2: np.ndarray) -> float:
    """Finite-m counterpart of kernel_ratio using the model's own U."""
    phi = _relu_features(params, x)
    energy = float(phi @ phi)
    if energy <= NumericalLimits.FEATURE_EPS ** 2:
        raise DegenerateFeatures("all features of x are dead", {"m": params.dims.m})
    return float(phi @ _relu_features(params, x2)) / energy


def mc_kernel_value(params: ModelParams, x: np.ndarray, x2: np.ndarray) -> float:
    """(1/m) phi(x)^T phi(x'), compared against arccos_kernel as a diagnostic only."""
    return float(_relu_features(params, x) @ _relu_features(params, x2)) / params.dims.m


def two_hop_vectors(params: ModelParams, subject: int, r1: int, r2: int,
                    bridge: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attention outputs (eta1, eta2, xi) of 'X REL1', 'Y REL2' and 'X REL1 REL2'."""
    n = params.dims.num_entities
    E, V = params.E, params.V
    eta1 = V @ E[subject] + E[n + r1]
    eta2 = V @ E[bridge] + E[n + r2]
    xi = (V / 2) @ E[subject] + (V / 2) @ E[n + r1] + E[n + r2]
    return eta1, eta2, xi


def predict_two_hop(params: ModelParams, subject: int, r1: int, r2: int,
                    edit1: FactEdit, edit2: FactEdit) -> KernelPrediction:
    """Kernel-limit coefficients of the summed hop adapters on 'X REL1 REL2'."""
    if edit1.rel != r1 or edit1.subject != subject:
        raise ParameterError("edit1 must redirect r1 on the subject",
                             {"edit1": edit1.model_dump(), "subject": subject, "r1": r1})
    if edit2.rel != r2 or edit2.subject != edit1.new_target:
        raise ParameterError("edit2 must redirect r2 on the edited bridge entity",
                             {"edit2": edit2.model_dump(), "bridge": edit1.new_target, "r2": r2})
    eta1, eta2, xi = two_hop_vectors(params, subject, r1, r2, edit1.new_target)
    return KernelPrediction(
        c1=kernel_ratio(eta1, xi),
        c2=kernel_ratio(eta2, xi),
        eta1=eta1,
        eta2=eta2,
        xi=xi,
    )


def mixture_decompose(output: np.ndarray, w1: np.ndarray, w2: np.ndarray,
                      rank_tol: float = NumericalLimits.BASIS_RANK_TOL) -> MixtureDecomposition:
    """Least-squares projection of `output` onto span{w1, w2}."""
    basis = np.stack([np.asarray(w1, dtype=float), np.asarray(w2, dtype=float)], axis=1)
    s = np.linalg.svd(basis, compute_uv=False)
    if s[0] == 0.0 or s[-1] / s[0] <= rank_tol:
        raise DegenerateBasis("mixture directions are linearly dependent",
                              {"singular_values": s.tolist()})
    coeffs, *_ = np.linalg.lstsq(basis, output, rcond=None)
    out_norm = float(np.linalg.norm(output))
    residual = 0.0 if out_norm == 0.0 else float(np.linalg.norm(output - basis @ coeffs)) / out_norm
    return MixtureDecomposition(c1_hat=float(coeffs[0]), c2_hat=float(coeffs[1]), residual_rel=residual)


def fit_convergence_exponent(ms: Sequence[int], errors: Sequence[float]) -> float:
    """Slope of log(error) against log(m)."""
    ms, errors = np.asarray(ms, dtype=float), np.asarray(errors, dtype=float)
    if ms.size < 2 or np.any(errors <= 0):
        raise ParameterError("need at least two widths with positive errors to fit an exponent",
                             {"ms": ms.tolist(), "errors": errors.tolist()})
    slope, _ = np.polyfit(np.log(ms), np.log(errors), 1)
    logger.debug("Convergence exponent", extra={"slope": float(slope), "points": int(ms.size)})
    return float(slope)
