"""Two-covariance PLDA: EM training, verification scores and the
within-whitened / across-diagonal latent space used by VBx.

Model: ``x = mean + y + e`` with speaker variable ``y ~ N(0, across_class)``
and per-sample noise ``e ~ N(0, within_class)``.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import _atomic_write

MAGIC = b"PLDA"
VERSION = 1
_LOG2PI = np.log(2.0 * np.pi)


class PLDAError(ValueError):
    pass


@dataclass
class PLDAModel:
    mean: np.ndarray
    across_class: np.ndarray
    within_class: np.ndarray
    llh_trace: list = field(default_factory=list, compare=False)

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass
class LatentSpace:
    projection: np.ndarray  # R x D
    psi: np.ndarray  # R, descending
    mean: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.projection.T

    @property
    def dim(self) -> int:
        return len(self.psi)


def _group(embeddings, labels):
    labels = np.asarray(labels)
    groups = {}
    for lab in np.unique(labels):
        groups[lab] = embeddings[labels == lab]
    return groups


def _stats(groups, mean):
    """Per-speaker counts, centred means and summed within-speaker scatter."""
    counts, means = [], []
    scatter = 0.0
    for xs in groups.values():
        m = xs.mean(axis=0)
        d = xs - m
        scatter = scatter + d.T @ d
        counts.append(len(xs))
        means.append(m - mean)
    return np.array(counts), np.array(means), scatter


def _log_likelihood(counts, means, scatter, across, within) -> float:
    """Exact marginal log-likelihood of all training data."""
    d = within.shape[0]
    N = counts.sum()
    S = len(counts)
    w_chol = scipy.linalg.cho_factor(within)
    w_logdet = 2.0 * np.sum(np.log(np.diag(w_chol[0])))
    total = -0.5 * np.trace(scipy.linalg.cho_solve(w_chol, scatter))
    total -= 0.5 * (N - S) * (d * _LOG2PI + w_logdet)
    total -= 0.5 * d * np.sum(np.log(counts))
    for n in np.unique(counts):
        sel = means[counts == n]
        cov = across + within / n
        c = scipy.linalg.cho_factor(cov)
        logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
        quad = np.sum(sel * scipy.linalg.cho_solve(c, sel.T).T)
        total -= 0.5 * (len(sel) * (d * _LOG2PI + logdet) + quad)
    return float(total)


def _regularise(within, d):
    evals = np.linalg.eigvalsh(within)
    if evals[0] <= 1e-10 * max(evals[-1], 1e-300):
        warnings.warn("within-class covariance is singular; adding ridge", RuntimeWarning, stacklevel=3)
        within = within + 1e-6 * np.trace(within) / d * np.eye(d)
    return within


def train_plda(embeddings, speaker_labels, max_iters: int = 20, tol: float = 1e-7) -> PLDAModel:
    """Fit mean, across- and within-class covariances by EM.

    The log-likelihood of every iterate is stored in ``llh_trace``; EM makes
    it non-decreasing.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    groups = _group(x, speaker_labels)
    if len(groups) < 2:
        raise PLDAError("need at least two speakers")
    if max(len(g) for g in groups.values()) < 2:
        raise PLDAError("within-class covariance unidentifiable: every speaker has one embedding")
    N, d = x.shape
    mean = x.mean(axis=0)
    counts, means, scatter = _stats(groups, mean)
    S = len(counts)

    within = _regularise(scatter / max(N - S, 1), d)
    across = means.T @ means / S
    trace = [_log_likelihood(counts, means, scatter, across, within)]
    for _ in range(max_iters):
        # E-step: posterior of each speaker variable given its sample mean
        acc_across = np.zeros((d, d))
        acc_within = scatter.copy()
        for n in np.unique(counts):
            sel = means[counts == n]
            gain = scipy.linalg.solve(across + within / n, across, assume_a="pos").T  # B (B + W/n)^-1
            post_mean = sel @ gain.T
            post_cov = across - gain @ across
            post_cov = 0.5 * (post_cov + post_cov.T)
            k = len(sel)
            acc_across += post_mean.T @ post_mean + k * post_cov
            resid = sel - post_mean
            acc_within += n * (resid.T @ resid + k * post_cov)
        across = 0.5 * (acc_across + acc_across.T) / S
        within = 0.5 * (acc_within + acc_within.T) / N
        within = _regularise(within, d)
        trace.append(_log_likelihood(counts, means, scatter, across, within))
        if abs(trace[-1] - trace[-2]) < tol * abs(trace[-1]):
            break
    return PLDAModel(mean, across, within, trace)


def _eigh_sorted(model: PLDAModel):
    try:
        psi, vecs = scipy.linalg.eigh(model.across_class, model.within_class)
    except np.linalg.LinAlgError as exc:
        raise PLDAError(f"within-class covariance is not positive definite: {exc}") from exc
    order = np.argsort(-psi, kind="stable")
    psi, vecs = np.maximum(psi[order], 0.0), vecs[:, order]
    # fix eigenvector signs: largest-magnitude component positive
    pivot = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    return psi, vecs


def prepare_latent_space(model: PLDAModel, R: int | None = None) -> LatentSpace:
    """Projection to ``R`` dims where within-class covariance is identity and
    across-class covariance is ``diag(psi)`` (largest ``psi`` kept)."""
    D = model.dim
    R = D if R is None else int(R)
    if not 1 <= R <= D:
        raise ValueError(f"latent dim must lie in [1, {D}]")
    psi, vecs = _eigh_sorted(model)
    return LatentSpace(vecs[:, :R].T.copy(), psi[:R].copy(), model.mean.copy())


def length_normalise(x):
    """Scale each row to norm ``sqrt(D)``; all-zero rows are left alone."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x * (np.sqrt(x.shape[-1]) / np.where(norms > 0, norms, 1.0))


def _llr_terms(psi):
    denom = 2.0 * psi + 1.0
    quad = -0.5 * ((psi + 1.0) / denom - 1.0 / (psi + 1.0))  # weight of u^2 and v^2
    cross = psi / denom  # weight of u*v
    const = float(np.sum(-0.5 * np.log(denom) + np.log(psi + 1.0)))
    return quad, cross, const


def plda_llr(e1, e2, model: PLDAModel | LatentSpace) -> float:
    """log p(e1, e2 | same speaker) - log p(e1, e2 | different speakers)."""
    space = model if isinstance(model, LatentSpace) else prepare_latent_space(model)
    u, v = space.transform(e1), space.transform(e2)
    quad, cross, const = _llr_terms(space.psi)
    return float(const + np.sum(quad * (u * u + v * v)) + np.sum(cross * u * v))


def pairwise_llr(x: np.ndarray, space: LatentSpace, projected: bool = False) -> np.ndarray:
    """All-pairs LLR matrix for the rows of ``x``."""
    u = x if projected else space.transform(x)
    quad, cross, const = _llr_terms(space.psi)
    q = (u * u) @ quad
    scores = (u * cross) @ u.T
    scores += q[:, None]
    scores += q[None, :]
    scores += const
    return scores


# -- file I/O ----------------------------------------------------------------


def dumps_plda(model: PLDAModel) -> bytes:
    """``PLDA`` | u32 version | u32 D | f64 mean[D] | f64 across[D*D] | f64 within[D*D]"""
    D = model.dim
    return b"".join([
        MAGIC,
        struct.pack("<II", VERSION, D),
        np.ascontiguousarray(model.mean, "<f8").tobytes(),
        np.ascontiguousarray(model.across_class, "<f8").tobytes(),
        np.ascontiguousarray(model.within_class, "<f8").tobytes(),
    ])


def loads_plda(blob: bytes) -> PLDAModel:
    if blob[:4] != MAGIC:
        raise PLDAError("not a PLDA file")
    version, D = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise PLDAError(f"unsupported PLDA version {version}")
    if len(blob) != 12 + 8 * (D + 2 * D * D):
        raise PLDAError("PLDA file length does not match its header")
    pos = 12
    mean = np.frombuffer(blob, "<f8", D, pos).astype(np.float64)
    pos += 8 * D
    across = np.frombuffer(blob, "<f8", D * D, pos).reshape(D, D).astype(np.float64)
    pos += 8 * D * D
    within = np.frombuffer(blob, "<f8", D * D, pos).reshape(D, D).astype(np.float64)
    return PLDAModel(mean, across, within)


def save_plda(path, model: PLDAModel) -> None:
    _atomic_write(path, dumps_plda(model))


def load_plda(path) -> PLDAModel:
    with open(path, "rb") as fh:
        return loads_plda(fh.read())
