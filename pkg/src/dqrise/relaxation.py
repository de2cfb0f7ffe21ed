"""Continuous relaxation of discrete hand codes.

The decoded code table is sorted along the first principal axis of the raw
dataset hand states, so neighbouring ranks are neighbouring hand poses. A
rank ``k`` of ``K`` is carried through the policy as the scalar
``2k/(K-1) - 1`` in [-1, 1]; predictions are rounded back to the nearest rank.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_finite_scalar, check_hand_states
from .mathcore import pca_first_component


@dataclass
class ReindexedCodebook:
    codes: np.ndarray         # (K, 6), row k is the code of rank k
    permutation: np.ndarray   # permutation[composite index] = rank
    pca_mean: np.ndarray
    pca_axis: np.ndarray
    source_model_hash: str = ""

    @property
    def K(self):
        return self.codes.shape[0]

    def projections(self):
        return (self.codes - self.pca_mean) @ self.pca_axis

    def to_dict(self):
        return {
            "K": self.K,
            "codes": self.codes.tolist(),
            "permutation": [int(p) for p in self.permutation],
            "pca_mean": self.pca_mean.tolist(),
            "pca_axis": self.pca_axis.tolist(),
            "source_model_hash": self.source_model_hash,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            cb = cls(np.asarray(doc["codes"], dtype=float),
                     np.asarray(doc["permutation"], dtype=int),
                     np.asarray(doc["pca_mean"], dtype=float),
                     np.asarray(doc["pca_axis"], dtype=float),
                     str(doc.get("source_model_hash", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed codebook document: {exc}") from exc
        K = int(doc.get("K", cb.K))
        if cb.codes.shape != (K, 6) or cb.pca_mean.shape != (6,) or cb.pca_axis.shape != (6,):
            raise ValueError("codebook arrays have the wrong shape")
        if sorted(cb.permutation.tolist()) != list(range(K)):
            raise ValueError("permutation is not a bijection on the code ranks")
        return cb

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def reindex_codes(table, dataset, reorder=True, source_model_hash=""):
    """Sort the composite code table by projection on the data's first PC.

    With ``reorder=False`` the ranks stay equal to the composite indices
    (the no-reindex ablation); the PCA fields are still filled in.
    """
    table = np.asarray(table, dtype=float)
    mean, axis = pca_first_component(check_hand_states(dataset, "dataset"))
    if reorder:
        proj = (table - mean) @ axis
        order = np.lexsort((np.arange(len(table)), proj))
    else:
        order = np.arange(len(table))
    permutation = np.empty(len(table), dtype=int)
    permutation[order] = np.arange(len(table))
    return ReindexedCodebook(table[order].copy(), permutation, mean, axis, source_model_hash)


def rank_to_scalar(rank, K=16):
    return 2.0 * np.asarray(rank, dtype=float) / (K - 1) - 1.0


def scalar_to_rank(z, K=16):
    """Round half away from zero onto {0..K-1}."""
    x = (np.asarray(z, dtype=float) + 1.0) * (K - 1) / 2.0
    k = np.sign(x) * np.floor(np.abs(x) + 0.5)
    out = np.clip(k, 0, K - 1).astype(int)
    return out if out.ndim else int(out)


def nearest_code(codebook: ReindexedCodebook, s):
    """Rank of the code closest to ``s`` in raw hand space (lowest rank on ties).

    Accepts one state or an (n, 6) batch.
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    S = np.atleast_2d(s)
    d2 = ((S[:, None, :] - codebook.codes[None, :, :]) ** 2).sum(axis=2)
    ranks = np.argmin(d2, axis=1)
    return int(ranks[0]) if single else ranks


def project_index(codebook: ReindexedCodebook, z):
    """Map a predicted scalar to ``(rank, hand state)``."""
    z = check_finite_scalar(z)
    k = scalar_to_rank(z, codebook.K)
    return k, codebook.codes[k].copy()


def relabel_demo(demo, codebook: ReindexedCodebook):
    """Replace hand states by relaxed scalars; originals are kept alongside."""
    original = demo.original_hand if demo.original_hand is not None else demo.hand
    ranks = nearest_code(codebook, original)
    return replace(demo, hand=rank_to_scalar(ranks, codebook.K), original_hand=original.copy(),
                   rank=ranks)


class CodeRelaxer(BaseEstimator, TransformerMixin):
    """Estimator wrapper: fit the ordering, transform hand states to scalars.

    ``code_table`` is the composite code table (K, 6), e.g. from
    :func:`dqrise.quantizer.merge_codebooks`.
    """

    def __init__(self, code_table=None, reorder=True):
        self.code_table = code_table
        self.reorder = reorder

    def fit(self, X, y=None):
        if self.code_table is None:
            raise ValueError("code_table is required")
        self.codebook_ = reindex_codes(self.code_table, X, reorder=self.reorder)
        return self

    def predict(self, X):
        check_is_fitted(self, "codebook_")
        return nearest_code(self.codebook_, check_hand_states(X))

    def transform(self, X):
        return rank_to_scalar(self.predict(X), self.codebook_.K)[:, None]

    def inverse_transform(self, Z):
        check_is_fitted(self, "codebook_")
        Z = np.asarray(Z, dtype=float).ravel()
        if not np.all(np.isfinite(Z)):
            raise ValueError("relaxed indices must be finite")
        ranks = scalar_to_rank(Z, self.codebook_.K)
        return self.codebook_.codes[np.atleast_1d(ranks)]

    @classmethod
    def from_codebook(cls, codebook):
        est = cls(code_table=None)
        est.codebook_ = codebook
        return est
