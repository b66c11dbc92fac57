"""Class prototypes and the QR orthogonality penalty on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

GUARD = 1e-8


@dataclass
class PrototypeMatrix:
    rows: Tensor  # (C', D)
    class_ids: np.ndarray  # row -> class


@dataclass
class QrFactors:
    Q: Tensor  # (C', p)
    R: Tensor  # (p, D)


def class_prototypes(attentions, labels) -> PrototypeMatrix:
    """Mean attention vector of every class present in the batch."""
    a = attentions if isinstance(attentions, Tensor) else Tensor(attentions)
    labels = np.asarray(labels)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ShapeError("need a non-empty (B, D) batch of attention vectors")
    if labels.shape != (a.shape[0],):
        raise ShapeError("one label per attention vector")
    classes = np.unique(labels)
    avg = (labels[None, :] == classes[:, None]).astype(np.float64)
    avg /= avg.sum(axis=1, keepdims=True)
    return PrototypeMatrix(rows=Tensor(avg) @ a, class_ids=classes)


def qr_decompose(A) -> QrFactors:
    """Modified Gram-Schmidt over the columns of A, built from recorded ops.

    Only the first min(C', D) columns produce orthonormal directions; every
    column still receives its projections onto them. A residual with norm
    below ``GUARD`` yields a zero direction.
    """
    A = A if isinstance(A, Tensor) else Tensor(A)
    if A.ndim != 2:
        raise ShapeError("qr_decompose needs a matrix")
    m, d = A.shape
    p = min(m, d)
    V = A
    qs: list[Tensor] = []
    rows: list[Tensor] = []
    for i in range(p):
        v = V[:, i]
        nrm = T.l2_norm(v)
        if nrm.item() < GUARD:
            q = Tensor(np.zeros(m))
            r_ii = nrm
        else:
            q = v / nrm
            r_ii = nrm
        qs.append(q)
        parts = []
        if i:
            parts.append(Tensor(np.zeros(i)))
        parts.append(r_ii.reshape(1))
        if i + 1 < d:
            rest = V[:, i + 1 :]
            r_rest = q.reshape(1, m) @ rest  # (1, d-i-1)
            V = T.concat([V[:, : i + 1], rest - q.reshape(m, 1) @ r_rest], axis=1)
            parts.append(r_rest.reshape(d - i - 1))
        rows.append(T.concat(parts))
    return QrFactors(Q=T.stack(qs, axis=1), R=T.stack(rows, axis=0))


def n_upper(p: int, d: int) -> int:
    """Number of strictly upper-triangular entries of a p x d R factor."""
    return sum(d - 1 - i for i in range(p))


ORIENTATIONS = ("auto", "columns", "rows")


def oriented(A: Tensor, orientation: str = "auto") -> Tensor:
    """The matrix whose columns get orthogonalised.

    ``columns`` keeps the feature columns of the (C', D) prototype matrix.
    ``rows`` uses the class prototypes instead. ``auto`` picks whichever
    axis is not longer than the other, so every column can own a pivot: the
    feature columns when D <= C', the class prototypes when D > C'.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")
    if orientation == "rows" or (orientation == "auto" and A.shape[1] > A.shape[0]):
        return A.T
    return A


def qr_ortho_loss(A, orientation: str = "auto") -> Tensor:
    """Mean absolute strictly-upper entry of R for the prototype matrix A."""
    if isinstance(A, PrototypeMatrix):
        A = A.rows
    A = A if isinstance(A, Tensor) else Tensor(A)
    if A.ndim != 2:
        raise ShapeError("the orthogonality loss needs a matrix")
    A = oriented(A, orientation)
    if A.shape[1] < 2:
        raise ShapeError("the orthogonality loss needs at least two columns to compare")
    R = qr_decompose(A).R
    p, d = R.shape
    mask = np.triu(np.ones((p, d)), k=1)
    return (T.absolute(R) * Tensor(mask)).sum() / float(n_upper(p, d))


def _formable(A, orientation: str) -> bool:
    if isinstance(A, PrototypeMatrix):
        A = A.rows
    shape = np.shape(A.data if isinstance(A, Tensor) else A)
    if len(shape) != 2:
        return False
    rows, cols = shape
    use_rows = orientation == "rows" or (orientation == "auto" and cols > rows)
    return (rows if use_rows else cols) >= 2


def offdiag_mean(A, orientation: str = "auto") -> float:
    """Non-recorded value of the loss, for monitoring (NaN if undefined)."""
    if not _formable(A, orientation):
        return float("nan")
    with T.no_grad():
        return qr_ortho_loss(A, orientation).item()


def total_loss(logits, labels, A, lam: float, orientation: str = "auto") -> tuple[Tensor, Tensor, Tensor | None]:
    """Cross entropy plus ``lam`` times the orthogonality loss.

    Returns (total, ce, qr); ``qr`` is None when ``lam`` is 0 or the batch
    cannot form a loss.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    ce = T.softmax_cross_entropy(logits, labels)
    if lam == 0 or not _formable(A, orientation):
        return ce, ce, None
    qr = qr_ortho_loss(A, orientation)
    return ce + lam * qr, ce, qr
