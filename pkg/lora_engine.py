"""Closed-form low-rank edits of the output map.

A single-fact edit is the rank-one update

    delta = (1 / |phi|^2) * w phi^T,   w = i_new - i_old  (paper_strict)
                                       w = i_new - W phi  (exact_redirect)

and a k-fact edit is the minimum-penalty interpolant delta = D G^-1 P^T over
the edit features P with Gram matrix G = P^T P.
"""
import json
import logging
from typing import Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from config import LabConfig, NumericalLimits
from exceptions import (
    ContractError,
    DegenerateFeatures,
    OracleFailed,
    ParameterError,
    ParseError,
    SingularGram,
    StaleBaseFact,
)
from models import Adapter, EditMode, ModelParams, Provenance, TrainItem
from transformer_engine import feature_matrix, features, forward, predict
from validation_utils import check_index

logger = logging.getLogger(__name__)

ADAPTER_FORMAT = "loracomp-adapter"


def _one_hot(num_entities: int, index: int) -> np.ndarray:
    v = np.zeros(num_entities)
    v[index] = 1.0
    return v


def _target_difference(params: ModelParams, phi: np.ndarray, old_target: int,
                       new_target: int, mode: EditMode) -> np.ndarray:
    n = params.dims.num_entities
    if mode == EditMode.PAPER_STRICT:
        return _one_hot(n, new_target) - _one_hot(n, old_target)
    return _one_hot(n, new_target) - params.W @ phi


def _balanced_factors(out_part: np.ndarray, in_part: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Refactor out_part @ in_part.T so each rank's two columns have equal norm.

    This is the factorization with the smallest penalty among all
    factorizations of the same product; the in-factor stays inside the
    column space of `in_part`.
    """
    Q, R = np.linalg.qr(in_part)
    Ua, s, Vh = np.linalg.svd(out_part @ R.T, full_matrices=False)
    root = np.sqrt(s)
    return Ua * root, (Q @ Vh.T) * root


def rank_one_edit(params: ModelParams, prompt, old_target: int, new_target: int,
                  mode: EditMode = EditMode.EXACT_REDIRECT,
                  eps_feat: float = NumericalLimits.FEATURE_EPS) -> Adapter:
    n = params.dims.num_entities
    check_index(old_target, n, "old target")
    check_index(new_target, n, "new target")
    mode = EditMode(mode)

    phi = features(params, prompt)
    norm = float(np.linalg.norm(phi))
    if norm <= eps_feat:
        raise DegenerateFeatures(
            f"prompt '{prompt}' has dead features (|phi| = {norm:.3g})",
            {"prompt": str(prompt), "norm": norm},
        )
    if mode == EditMode.PAPER_STRICT:
        current = int(np.argmax(forward(params, prompt)))
        if current != old_target:
            raise StaleBaseFact(
                f"model predicts {current} on '{prompt}', not the stated old target {old_target}",
                {"prompt": str(prompt), "predicted": current, "old_target": old_target},
            )

    w = _target_difference(params, phi, old_target, new_target, mode)
    w_norm = float(np.linalg.norm(w))
    if w_norm == 0.0:
        p, q = np.zeros((n, 1)), np.zeros((params.dims.m, 1))
    else:
        scale = np.sqrt(w_norm / norm)
        p = (w / w_norm * scale)[:, None]
        q = (phi / norm * scale)[:, None]

    return Adapter(
        out_factor=p,
        in_factor=q,
        provenance=[Provenance(prompt=prompt, old_target=old_target, new_target=new_target)],
        mode=mode,
    )


def multi_fact_edit(params: ModelParams, edits: Sequence[Tuple[object, int, int]],
                    mode: EditMode = EditMode.EXACT_REDIRECT,
                    condition_cap: float = NumericalLimits.GRAM_CONDITION_CAP,
                    name: str = "") -> Adapter:
    """Minimum-penalty update interpolating every (prompt, old, new) edit."""
    if not edits:
        raise ParameterError("multi_fact_edit needs at least one edit")
    mode = EditMode(mode)
    n = params.dims.num_entities
    prompts = [e[0] for e in edits]
    for _, old, new in edits:
        check_index(old, n, "old target")
        check_index(new, n, "new target")

    P = feature_matrix(params, prompts)
    G = P.T @ P
    condition = float(np.linalg.cond(G))
    if not np.isfinite(condition) or condition > condition_cap:
        raise SingularGram(
            f"edit features are (nearly) dependent: Gram condition {condition:.3g} > {condition_cap:.0e}",
            {"condition": condition, "prompts": [str(p) for p in prompts]},
        )
    logger.debug("Gram condition", extra={"k": len(edits), "condition": condition})

    if mode == EditMode.PAPER_STRICT:
        current, _ = predict(params, prompts)
        stale = [(str(p), int(c), old) for p, c, (_, old, _) in zip(prompts, current, edits) if c != old]
        if stale:
            raise StaleBaseFact(f"model does not predict the stated old targets: {stale[:3]}",
                                {"stale": stale})
        D = np.stack([_one_hot(n, new) - _one_hot(n, old) for _, old, new in edits], axis=1)
    else:
        targets = np.stack([_one_hot(n, new) for _, _, new in edits], axis=1)
        D = targets - params.W @ P

    coeffs = scipy.linalg.solve(G, D.T, assume_a="pos").T   # D G^-1
    out_factor, in_factor = _balanced_factors(coeffs, P)
    return Adapter(
        out_factor=out_factor,
        in_factor=in_factor,
        provenance=[Provenance(prompt=p, old_target=old, new_target=new) for p, old, new in edits],
        mode=mode,
        name=name,
    )


def train_adapter(params: ModelParams, items: Sequence[TrainItem],
                  mode: EditMode = EditMode.EXACT_REDIRECT, name: str = "") -> Adapter:
    """Adapter teaching `items`; old targets are whatever the model predicts now."""
    current, _ = predict(params, [item.prompt for item in items])
    edits = [(item.prompt, int(old), item.target) for item, old in zip(items, current)]
    if len(edits) == 1:
        prompt, old, new = edits[0]
        return rank_one_edit(params, prompt, old, new, mode).model_copy(update={"name": name})
    return multi_fact_edit(params, edits, mode, name=name)


def penalty(adapter: Adapter) -> float:
    """|A|_F^2 + |B|_F^2 over the stored factors."""
    return float(np.sum(adapter.out_factor ** 2) + np.sum(adapter.in_factor ** 2))


def solve_min_penalty(phi: np.ndarray, w: np.ndarray, seed: int = 0,
                      tol: float = 1e-10, max_outer: int = 60) -> Tuple[float, np.ndarray, np.ndarray]:
    """Minimize |p|^2 + |q|^2 subject to p (q . phi) = w numerically.

    Augmented-Lagrangian outer loop with L-BFGS inner solves from a random
    start; independent of the closed form it is used to check.
    """
    n, m = w.shape[0], phi.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 0.5, size=n + m)
    lam = np.zeros(n)
    mu = 10.0
    trace = []

    def split(z):
        return z[:n], z[n:]

    for outer in range(max_outer):
        def objective(z):
            p, q = split(z)
            s = q @ phi
            c = p * s - w
            mult = lam + mu * c
            value = p @ p + q @ q + lam @ c + 0.5 * mu * (c @ c)
            grad_p = 2 * p + mult * s
            grad_q = 2 * q + phi * (mult @ p)
            return value, np.concatenate([grad_p, grad_q])

        result = minimize(objective, x, jac=True, method="L-BFGS-B",
                          options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-15})
        x = result.x
        p, q = split(x)
        violation = float(np.max(np.abs(p * (q @ phi) - w)))
        trace.append({"outer": outer, "penalty": float(p @ p + q @ q), "violation": violation, "mu": mu})
        if violation <= tol:
            logger.debug("Oracle converged", extra={"outer": outer, "violation": violation})
            return float(p @ p + q @ q), p, q
        lam = lam + mu * (p * (q @ phi) - w)
        mu = min(mu * 4.0, 1e10)

    raise OracleFailed(f"minimality oracle did not converge in {max_outer} rounds",
                       {"trace": trace[-5:]})


def minimality_oracle(params: ModelParams, prompt, old_target: int, new_target: int,
                      seed: int = 0) -> Tuple[float, float]:
    """(numerically minimal penalty, |cos(q, phi)|) for a paper_strict edit."""
    if params.dims.d > 32 or params.dims.m > 256:
        raise ParameterError("minimality oracle is limited to d <= 32 and m <= 256",
                             {"d": params.dims.d, "m": params.dims.m})
    phi = features(params, prompt)
    w = _one_hot(params.dims.num_entities, new_target) - _one_hot(params.dims.num_entities, old_target)
    value, _, q = solve_min_penalty(phi, w, seed=seed)
    cosine = abs(float(q @ phi)) / (np.linalg.norm(q) * np.linalg.norm(phi))
    return value, cosine


def save_adapter(adapter: Adapter, path) -> None:
    """npz container: JSON header (format, version, rank, mode, provenance) + factors."""
    header = {
        "format": ADAPTER_FORMAT,
        "version": LabConfig.FORMAT_VERSION,
        "rank": adapter.rank,
        "shape": [adapter.out_factor.shape[0], adapter.in_factor.shape[0]],
        "mode": adapter.mode.value,
        "name": adapter.name,
        "provenance": [p.model_dump() for p in adapter.provenance],
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)),
                 out_factor=adapter.out_factor, in_factor=adapter.in_factor)


def load_adapter(path) -> Adapter:
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            out_factor, in_factor = np.array(data["out_factor"]), np.array(data["in_factor"])
    except (OSError, KeyError, ValueError) as e:
        raise ParseError(f"cannot read adapter file {path}: {e}", {"path": str(path)})
    if header.get("format") != ADAPTER_FORMAT or header.get("version") != LabConfig.FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported adapter header", {"path": str(path), "header": header})
    try:
        return Adapter(out_factor=out_factor, in_factor=in_factor,
                       provenance=header["provenance"], mode=header["mode"], name=header.get("name", ""))
    except ValueError as e:
        raise ParseError(f"{path}: {e}", {"path": str(path)})


def check_compatible(adapter: Adapter, params: ModelParams) -> None:
    expected = (params.dims.num_entities, params.dims.m)
    actual = (adapter.out_factor.shape[0], adapter.in_factor.shape[0])
    if actual != expected:
        raise ContractError(f"adapter acts on {actual}, model output map is {expected}",
                            {"adapter": list(actual), "model": list(expected)})
