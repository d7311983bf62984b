import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.special import softmax

from exceptions import ContractError, DegenerateAdapter, ParameterError
from models import (
    Adapter,
    ArrowCombinator,
    CatCombinator,
    CatWeights,
    LinearMerge,
    ModelParams,
    RoutedDelta,
    SumCombinator,
    UniformMerge,
)
from transformer_engine import feature_matrix

logger = logging.getLogger(__name__)


def _check_shapes(adapters: Sequence[Adapter]) -> Tuple[int, int]:
    if not adapters:
        raise ParameterError("combine needs at least one adapter")
    shape = (adapters[0].out_factor.shape[0], adapters[0].in_factor.shape[0])
    for i, adapter in enumerate(adapters[1:], start=1):
        other = (adapter.out_factor.shape[0], adapter.in_factor.shape[0])
        if other != shape:
            raise ContractError(
                f"adapter {i} acts on {other}, adapter 0 on {shape}",
                {"index": i, "shape": list(other), "expected": list(shape)},
            )
    return shape


def _check_weights(weights: Sequence[float], count: int) -> np.ndarray:
    if len(weights) != count:
        raise ParameterError(f"{len(weights)} weights given for {count} adapters",
                             {"weights": len(weights), "adapters": count})
    return np.asarray(weights, dtype=float)


def _padded(factor: np.ndarray, rank: int) -> np.ndarray:
    if factor.shape[1] == rank:
        return factor
    return np.hstack([factor, np.zeros((factor.shape[0], rank - factor.shape[1]))])


def cat_delta(adapters: Sequence[Adapter], weights: np.ndarray) -> np.ndarray:
    """sum_i w_i O_i I_i^T."""
    delta = np.zeros((adapters[0].out_factor.shape[0], adapters[0].in_factor.shape[0]))
    for w, adapter in zip(weights, adapters):
        delta += w * adapter.delta
    return delta


def linear_merge_delta(adapters: Sequence[Adapter], weights: np.ndarray) -> np.ndarray:
    """(sum_i w_i O_i)(sum_i w_i I_i)^T, factors zero-padded to the largest rank."""
    rank = max(a.rank for a in adapters)
    out_factor = sum(w * _padded(a.out_factor, rank) for w, a in zip(weights, adapters))
    in_factor = sum(w * _padded(a.in_factor, rank) for w, a in zip(weights, adapters))
    return out_factor @ in_factor.T


def arrow_prototype(adapter: Adapter) -> np.ndarray:
    """Top right-singular vector of the adapter's update, largest entry positive."""
    Q, R = np.linalg.qr(adapter.in_factor)
    _, s, Vh = np.linalg.svd(adapter.out_factor @ R.T, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise DegenerateAdapter(f"adapter '{adapter.name}' is zero and has no prototype",
                                {"adapter": adapter.name})
    prototype = Q @ Vh[0]
    prototype /= np.linalg.norm(prototype)
    if prototype[np.argmax(np.abs(prototype))] < 0:
        prototype = -prototype
    return prototype


def arrow_route(adapters: Sequence[Adapter], query_features: np.ndarray,
                temperature: float = 1.0, use_abs: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax of prototype similarities; returns (weights, similarities)."""
    _, m = _check_shapes(adapters)
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}", {"temperature": temperature})
    query = np.asarray(query_features, dtype=float)
    if query.shape != (m,):
        raise ContractError(f"query has shape {query.shape}, expected ({m},)")
    scores = np.array([arrow_prototype(a) @ query for a in adapters])
    if use_abs:
        scores = np.abs(scores)
    return softmax(scores / temperature), scores


def combine(adapters: Sequence[Adapter], combinator,
            query_features: Optional[np.ndarray] = None) -> RoutedDelta:
    _check_shapes(adapters)
    n = len(adapters)

    if isinstance(combinator, SumCombinator):
        weights = np.ones(n)
        return RoutedDelta(delta=cat_delta(adapters, weights), per_adapter_weights=weights.tolist())

    if isinstance(combinator, CatCombinator):
        if combinator.weights is None:
            raise ParameterError("cat combinator has no weights; fit them with fit_cat_weights first")
        weights = _check_weights(combinator.weights, n)
        return RoutedDelta(delta=cat_delta(adapters, weights), per_adapter_weights=weights.tolist())

    if isinstance(combinator, UniformMerge):
        weights = np.full(n, 1.0 / n)
        return RoutedDelta(delta=linear_merge_delta(adapters, weights), per_adapter_weights=weights.tolist())

    if isinstance(combinator, LinearMerge):
        weights = _check_weights(combinator.weights, n)
        return RoutedDelta(delta=linear_merge_delta(adapters, weights), per_adapter_weights=weights.tolist())

    if isinstance(combinator, ArrowCombinator):
        if query_features is None:
            raise ParameterError("arrow routing needs the query's features")
        weights, scores = arrow_route(adapters, query_features, combinator.temperature, combinator.use_abs)
        merge = cat_delta if combinator.merge == "cat" else linear_merge_delta
        logger.debug("Arrow routing", extra={"weights": weights.round(4).tolist()})
        return RoutedDelta(delta=merge(adapters, weights), per_adapter_weights=weights.tolist(),
                           similarities=scores.tolist())

    raise ParameterError(f"unknown combinator {combinator!r}")


def fit_cat_weights(params: ModelParams, adapters: Sequence[Adapter],
                    probes: Sequence[Tuple[object, int]],
                    rank_tol: float = 1e-10) -> CatWeights:
    """Least-squares scalar weights so that (W + sum a_i dW_i) phi hits each probe's target."""
    if not adapters:
        raise ParameterError("fit_cat_weights needs at least one adapter")
    if not probes:
        raise ParameterError("fit_cat_weights needs at least one probe")
    _check_shapes(adapters)

    n = params.dims.num_entities
    P = feature_matrix(params, [p for p, _ in probes])
    targets = np.zeros((n, len(probes)))
    for j, (_, target) in enumerate(probes):
        targets[target, j] = 1.0
    # One column per adapter: its contribution on every probe, flattened.
    A = np.stack([(a.delta @ P).ravel(order="F") for a in adapters], axis=1)
    b = (targets - params.W @ P).ravel(order="F")

    weights, _, rank, sv = scipy.linalg.lstsq(A, b, cond=rank_tol)
    degenerate = rank < len(adapters)
    residual = float(np.linalg.norm(A @ weights - b))
    if degenerate:
        logger.warning("CAT weight system is rank deficient; returning minimum-norm weights",
                       extra={"rank": int(rank), "adapters": len(adapters)})
    return CatWeights(weights=weights.tolist(), degenerate=degenerate, residual=residual)


def with_fitted_weights(params: ModelParams, adapters: Sequence[Adapter],
                        combinator: CatCombinator) -> CatCombinator:
    """Cat combinator whose weights are fit on the adapters' own provenance prompts."""
    if combinator.weights is not None:
        return combinator
    probes = [(p.prompt, p.new_target) for a in adapters for p in a.provenance]
    fitted = fit_cat_weights(params, adapters, probes)
    return CatCombinator(weights=fitted.weights)

