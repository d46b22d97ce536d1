"""State encoding: PCA-compressed instance data plus dynamic node features.

The dynamic block of a node is laid out as::

    [depth / |J|,
     min(x_j, 1 - x_j) for j in J,          # fractionality of the node LP
     clamp((incumbent - bound) / (1 + |incumbent|), 0, 1)  (1 without incumbent),
     B (3|J| one-hot: fixed to 0 | fixed to 1 | free)]
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .instances import MilpInstance, same_structure

DEFAULT_K = 16
RANK_TOL = 1e-10


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    scale: np.ndarray
    warning: str = ""

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def d(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class StateEncoding:
    static: np.ndarray
    dynamic: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.static, self.dynamic])


def check_instances(X, require_same_structure: bool = True) -> list:
    """Validate a sequence of instances the way sklearn validates arrays."""
    if isinstance(X, MilpInstance):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one instance, got an empty sequence")
    for inst in X:
        if not isinstance(inst, MilpInstance):
            raise TypeError(f"expected MilpInstance, got {type(inst).__name__}")
    if require_same_structure and any(not same_structure(X[0], p) for p in X[1:]):
        raise ValueError("instances do not share one structure (m, n, J, sparsity)")
    return X


def _sign_fix(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for r in range(out.shape[0]):
        if out[r, np.argmax(np.abs(out[r]))] < 0:
            out[r] = -out[r]
    return out


def fit_pca(instances, k: int = DEFAULT_K) -> PcaModel:
    """Top-``k`` principal directions of the flattened (A, b, c) vectors."""
    if k < 1:
        raise ValueError("k must be positive")
    instances = check_instances(instances)
    X = np.stack([p.flatten() for p in instances])
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    rank = int(np.sum(s > RANK_TOL * max(s.max(initial=0.0), 1.0)))
    k_eff = min(k, rank, X.shape[1], X.shape[0])
    warning = ""
    if k_eff < k:
        warning = f"requested k={k} reduced to {max(k_eff, 1)} (data rank {rank})"
        warnings.warn(warning, RuntimeWarning, stacklevel=2)
    if k_eff == 0:
        # no variance at all: keep one arbitrary (but fixed) direction
        comps = np.zeros((1, X.shape[1]))
        comps[0, 0] = 1.0
    else:
        comps = _sign_fix(vt[:k_eff])
    proj = Xc @ comps.T
    scale = proj.std(axis=0)
    scale = np.where(scale > RANK_TOL, scale, 1.0)
    return PcaModel(mean=mean, components=comps, scale=scale, warning=warning)


def encode_static(instance: MilpInstance, pca: PcaModel) -> np.ndarray:
    flat = instance.flatten()
    if flat.shape[0] != pca.d:
        raise ValueError(f"instance has {flat.shape[0]} data entries, PCA expects {pca.d}")
    return pca.components @ (flat - pca.mean)


def dynamic_length(n_binaries: int) -> int:
    return 1 + n_binaries + 1 + 3 * n_binaries


_ENTRY = object()


def encode_dynamic(node, instance: MilpInstance, incumbent=_ENTRY, depth_norm: int | None = None) -> np.ndarray:
    """Dynamic feature vector of an LP-optimal node.

    ``incumbent`` defaults to the incumbent recorded when the node was expanded.
    """
    if node.lp is None or node.lp.x is None:
        raise ValueError("dynamic encoding needs an optimal node LP")
    if incumbent is _ENTRY:
        incumbent = node.incumbent_at_entry
    J = np.asarray(instance.J)
    nj = J.shape[0]
    depth_norm = depth_norm or nj
    x = node.lp.x[J]
    frac = np.clip(np.minimum(x, 1.0 - x), 0.0, 0.5)
    if incumbent is None:
        gap = 1.0
    else:
        gap = min(max((incumbent - node.lp.objective) / (1.0 + abs(incumbent)), 0.0), 1.0)
    pos = {j: k for k, j in enumerate(instance.J)}
    B = np.zeros(3 * nj)
    B[2 * nj:] = 1.0
    for j in node.fixings.zero:
        B[pos[j]] = 1.0
        B[2 * nj + pos[j]] = 0.0
    for j in node.fixings.one:
        B[nj + pos[j]] = 1.0
        B[2 * nj + pos[j]] = 0.0
    out = np.empty(dynamic_length(nj))
    out[0] = min(node.depth / depth_norm, 1.0)
    out[1:1 + nj] = frac
    out[1 + nj] = gap
    out[2 + nj:] = B
    return out


def encode_state(node, instance: MilpInstance, pca: PcaModel, static=None) -> StateEncoding:
    if static is None:
        static = encode_static(instance, pca)
    return StateEncoding(static=static, dynamic=encode_dynamic(node, instance))


class StaticPCA(TransformerMixin, BaseEstimator):
    """sklearn transformer mapping instances to their PCA static features.

    Parameters
    ----------
    n_components : int
        Requested number of components; reduced (with a warning) when the
        training data has lower rank.
    """

    def __init__(self, n_components: int = DEFAULT_K):
        self.n_components = n_components

    def fit(self, X, y=None):
        self.model_ = fit_pca(X, self.n_components)
        self.n_components_ = self.model_.k
        self.mean_ = self.model_.mean
        self.components_ = self.model_.components
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("StaticPCA is not fitted yet; call fit first")
        X = check_instances(X, require_same_structure=False)
        return np.stack([encode_static(p, self.model_) for p in X])

    @classmethod
    def from_model(cls, model: PcaModel) -> "StaticPCA":
        est = cls(n_components=model.k)
        est.model_ = model
        est.n_components_ = model.k
        est.mean_ = model.mean
        est.components_ = model.components
        return est
