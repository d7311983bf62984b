"""One-layer transformer with uniform attention and a random-features MLP.

Only the output map W is ever trained. E, U and V are drawn once and then
marked read-only.
"""
import hashlib
import json
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from config import LabConfig
from exceptions import ContractError, ParameterError, ParseError, SingularFeatures
from models import ModelDims, ModelParams, OneHop, TrainItem
from validation_utils import check_index

logger = logging.getLogger(__name__)

PARAMS_FORMAT = "loracomp-params"


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """E, U, V ~ N(0, 1/d) entrywise (standard deviation d^-1/2); W = 0."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dims.d)
    E = rng.normal(0.0, scale, size=(dims.vocab, dims.d))
    V = rng.normal(0.0, scale, size=(dims.d, dims.d))
    # U last: widths sharing a seed share E, V and the leading rows of U.
    U = rng.normal(0.0, scale, size=(dims.m, dims.d))
    for frozen in (E, U, V):
        frozen.flags.writeable = False
    W = np.zeros((dims.num_entities, dims.m))
    return ModelParams(E=E, U=U, V=V, W=W, dims=dims, seed=seed)


def _check_prompt(params: ModelParams, prompt) -> None:
    check_index(prompt.subject, params.dims.num_entities, "entity")
    rels = (prompt.rel,) if isinstance(prompt, OneHop) else (prompt.rel1, prompt.rel2)
    for rel in rels:
        check_index(rel, params.dims.num_relations, "relation")


def mix(params: ModelParams, prompt) -> np.ndarray:
    """Attention output at the final position.

    The final token contributes its raw embedding; V is applied to the
    uniform mean of the preceding tokens.
    """
    _check_prompt(params, prompt)
    tokens = prompt.token_ids(params.dims.num_entities)
    context = params.E[list(tokens[:-1])]
    last = params.E[tokens[-1]]
    if len(context) == 1:
        return params.V @ context[0] + last
    return (params.V / 2) @ context[0] + (params.V / 2) @ context[1] + last


def pre_activations(params: ModelParams, prompt) -> np.ndarray:
    return params.U @ mix(params, prompt)


def features(params: ModelParams, prompt) -> np.ndarray:
    """phi = ReLU(U mix(prompt))."""
    return np.maximum(pre_activations(params, prompt), 0.0)


def feature_matrix(params: ModelParams, prompts: Sequence) -> np.ndarray:
    """Features of `prompts` as the columns of an (m, n) matrix."""
    if not prompts:
        return np.zeros((params.dims.m, 0))
    mixed = np.stack([mix(params, p) for p in prompts], axis=1)
    return np.maximum(params.U @ mixed, 0.0)


def forward(params: ModelParams, prompt, applied_delta: Optional[np.ndarray] = None) -> np.ndarray:
    """(W + delta) phi, computed as W phi + delta phi."""
    phi = features(params, prompt)
    out = params.W @ phi
    if applied_delta is not None:
        if applied_delta.shape != params.W.shape:
            raise ContractError(
                f"delta has shape {applied_delta.shape}, expected {params.W.shape}",
                {"delta": list(applied_delta.shape), "W": list(params.W.shape)},
            )
        out = out + applied_delta @ phi
    return out


def predict(params: ModelParams, prompts: Sequence,
            applied_delta: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax predictions (lowest index wins ties) and a mask of tied prompts."""
    if applied_delta is not None and applied_delta.shape != params.W.shape:
        raise ContractError(f"delta has shape {applied_delta.shape}, expected {params.W.shape}")
    P = feature_matrix(params, prompts)
    W = params.W if applied_delta is None else params.W + applied_delta
    scores = W @ P
    if scores.shape[1] == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=bool)
    best = scores.max(axis=0)
    ties = (scores == best).sum(axis=0) > 1
    return scores.argmax(axis=0), ties


def _one_hot_targets(num_entities: int, targets: Sequence[int]) -> np.ndarray:
    Y = np.zeros((num_entities, len(targets)))
    Y[np.asarray(targets, dtype=int), np.arange(len(targets))] = 1.0
    return Y


def _duplicate_columns(P: np.ndarray) -> List[Tuple[int, int]]:
    seen, pairs = {}, []
    for j in range(P.shape[1]):
        key = P[:, j].tobytes()
        if key in seen:
            pairs.append((seen[key], j))
        else:
            seen[key] = j
    return pairs


def fit_w(params: ModelParams, facts: Sequence[TrainItem], ridge: float = 0.0) -> np.ndarray:
    """Ridge / minimum-norm least-squares fit of W to one-hot targets.

    Solves in the dual (n x n) when there are fewer facts than features and
    in the primal (m x m) otherwise, by Cholesky with an SVD pseudo-inverse
    fallback.
    """
    if ridge < 0:
        raise ParameterError(f"ridge must be >= 0, got {ridge}", {"ridge": ridge})
    if not facts:
        return params.W.copy()

    prompts = [f.prompt for f in facts]
    for f in facts:
        check_index(f.target, params.dims.num_entities, "target entity")
    n, m = len(facts), params.dims.m
    if m < n:
        logger.warning("Fewer features than facts; exact recall is not guaranteed",
                       extra={"m": m, "facts": n})

    P = feature_matrix(params, prompts)
    Y = _one_hot_targets(params.dims.num_entities, [f.target for f in facts])

    if ridge == 0.0:
        collisions = _duplicate_columns(P)
        if collisions:
            names = [(str(prompts[i]), str(prompts[j])) for i, j in collisions]
            raise SingularFeatures(
                f"duplicate feature vectors make the fit singular: {names[:3]}",
                {"colliding_prompts": names},
            )

    dual = n <= m
    gram = P.T @ P if dual else P @ P.T
    gram = gram + ridge * np.eye(gram.shape[0])
    rhs = Y.T if dual else P @ Y.T
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
        solution = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
        solver = "cholesky"
    except scipy.linalg.LinAlgError:
        solution = scipy.linalg.pinv(gram) @ rhs
        solver = "pinv"
    W = (P @ solution).T if dual else solution.T

    logger.info("Fitted output map", extra={"facts": n, "m": m, "ridge": ridge,
                                            "form": "dual" if dual else "primal", "solver": solver})
    return W


def recall_accuracy(params: ModelParams, eval_items: Sequence[TrainItem],
                    applied_delta: Optional[np.ndarray] = None) -> float:
    """Fraction of prompts whose argmax equals the target.

    Ties resolve to the lowest entity index and count as that prediction;
    the number of tied prompts is logged.
    """
    if not eval_items:
        raise ParameterError("recall_accuracy needs at least one eval item")
    preds, ties = predict(params, [e.prompt for e in eval_items], applied_delta)
    targets = np.array([e.target for e in eval_items])
    if ties.any():
        logger.warning("Argmax ties broken by lowest entity index",
                       extra={"tied": int(ties.sum()), "total": len(eval_items)})
    return float(np.mean(preds == targets))


def params_digest(params: ModelParams) -> str:
    """Hash of the frozen matrices, used to assert they never change."""
    h = hashlib.sha256()
    for a in (params.E, params.U, params.V):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def save_params(params: ModelParams, path) -> None:
    """npz container: JSON header (format, version, dims, seed) + E, U, V, W."""
    header = {
        "format": PARAMS_FORMAT,
        "version": LabConfig.FORMAT_VERSION,
        "dims": params.dims.model_dump(),
        "seed": params.seed,
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)),
                 E=params.E, U=params.U, V=params.V, W=params.W)


def load_params(path) -> ModelParams:
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            arrays = {k: np.array(data[k]) for k in ("E", "U", "V", "W")}
    except (OSError, KeyError, ValueError) as e:
        raise ParseError(f"cannot read params file {path}: {e}", {"path": str(path)})
    if header.get("format") != PARAMS_FORMAT or header.get("version") != LabConfig.FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported params header {header.get('format')} v{header.get('version')}",
                         {"path": str(path), "header": header})
    for name in ("E", "U", "V"):
        arrays[name].flags.writeable = False
    try:
        return ModelParams(dims=ModelDims(**header["dims"]), seed=header.get("seed", 0), **arrays)
    except ValueError as e:
        raise ParseError(f"{path}: {e}", {"path": str(path)})
