"""AHC initialisation and VB-HMM (VBx) speaker clustering.

Generative model in the PLDA latent space (within-class = I, across-class =
diag(psi)): each speaker ``s`` has ``y_s ~ N(0, I)``; frame ``t`` assigned to
speaker ``s`` emits ``x_t ~ N(diag(sqrt(psi)) y_s, I)``; assignments follow a
Markov chain that stays with probability ``ploop`` and otherwise jumps to
speaker ``s`` with probability ``pi_s``. ``fa`` scales the emission
log-likelihoods and ``fb`` the speaker prior, as in the usual recipe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from .plda import LatentSpace, PLDAModel, length_normalise, pairwise_llr, prepare_latent_space


@dataclass(frozen=True)
class VBxConfig:
    fa: float = 0.05
    fb: float = 120.0
    ploop: float = 0.99
    latent_dim: int = 128
    max_iters: int = 40
    elbo_tol: float = 1e-4
    min_speaker_mass: float = 1.0
    ahc_threshold: float = 0.0
    init_smoothing: float = 7.0
    length_norm: bool = True

    def __post_init__(self):
        if self.fa <= 0 or self.fb <= 0:
            raise ValueError("fa and fb must be positive")
        if not 0 < self.ploop < 1:
            raise ValueError("ploop must lie in (0, 1)")
        if not 1 <= self.latent_dim <= 256:
            raise ValueError("latent_dim must lie in [1, 256]")


@dataclass
class ClusteringResult:
    gamma: np.ndarray  # T x S responsibilities
    hard_labels: np.ndarray  # T
    elbo_trace: list = field(default_factory=list)
    pi: np.ndarray | None = None

    @property
    def num_speakers(self) -> int:
        return self.gamma.shape[1]


def _first_appearance(labels: np.ndarray) -> np.ndarray:
    uniq, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(uniq))
    return rank[inverse.reshape(-1)]


def ahc_init(embeddings, model: PLDAModel | LatentSpace, threshold: float) -> np.ndarray:
    """Average-linkage agglomeration on pairwise PLDA LLRs.

    Clusters keep merging while the best pair's average LLR is at least
    ``threshold``. Labels are numbered by first appearance.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    T = len(x)
    if T == 0:
        return np.zeros(0, dtype=np.int64)
    if T == 1 or threshold == -np.inf:
        return np.zeros(T, dtype=np.int64)
    if threshold == np.inf:
        return np.arange(T, dtype=np.int64)
    space = model if isinstance(model, LatentSpace) else prepare_latent_space(model)
    scores = pairwise_llr(x, space)
    top = scores.max()
    dist = top - scores
    np.fill_diagonal(dist, 0.0)
    dist = np.maximum(dist, 0.0)
    Z = linkage(squareform(dist, checks=False), method="average")
    labels = fcluster(Z, t=top - threshold, criterion="distance")
    return _first_appearance(labels)


def forward_backward(lls: np.ndarray, ploop: float, pi: np.ndarray):
    """Posteriors of the speaker-switching HMM.

    Emissions are shifted by their per-frame maximum and the forward/backward
    messages renormalised at every step, so nothing underflows; the shifts and
    normalisers are returned in the log domain.

    Returns ``(gamma, total_log_lik, reset_counts)`` where ``reset_counts[s]``
    is the expected number of frames entered through the ``(1-ploop)*pi``
    route into ``s`` (plus the initial frame).
    """
    T, S = lls.shape
    shift = lls.max(axis=1)
    e = np.exp(lls - shift[:, None])
    alpha = np.empty((T, S))
    norm = np.empty(T)
    jump = (1.0 - ploop) * pi
    a = pi * e[0]
    norm[0] = max(a.sum(), 1e-300)
    alpha[0] = a / norm[0]
    for t in range(1, T):
        a = (ploop * alpha[t - 1] + jump) * e[t]
        norm[t] = max(a.sum(), 1e-300)
        alpha[t] = a / norm[t]
    beta = np.empty((T, S))
    beta[-1] = 1.0
    for t in range(T - 1, 0, -1):
        v = e[t] * beta[t]
        beta[t - 1] = (ploop * v + jump @ v) / norm[t]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    resets = gamma[0].copy()
    if T > 1:
        # P(jump into s at t) = (1-ploop) pi_s e_t(s) beta_t(s) / norm_t, since alpha_{t-1} sums to 1
        resets += (jump[None, :] * e[1:] * beta[1:] / norm[1:, None]).sum(axis=0)
    total = float(np.sum(np.log(norm)) + np.sum(shift))
    return gamma, total, resets


def vbx_refine(x, init_labels, space: LatentSpace, cfg: VBxConfig = VBxConfig()) -> ClusteringResult:
    """Variational Bayes refinement of an initial hard clustering.

    ``x`` are embeddings already projected into ``space`` (T x R, R <= len(psi)).
    Speakers whose total responsibility stays below ``min_speaker_mass`` are
    removed once iterations finish.
    """
    x = np.asarray(x, dtype=np.float64)
    T = len(x)
    if T == 0:
        return ClusteringResult(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), [], np.zeros(0))
    init_labels = np.asarray(init_labels, dtype=np.int64)
    if init_labels.shape != (T,) or init_labels.min() < 0:
        raise ValueError("init_labels must hold one non-negative label per frame")
    R = x.shape[1]
    psi = space.psi[:R]
    S = int(init_labels.max()) + 1

    logits = np.zeros((T, S))
    logits[np.arange(T), init_labels] = cfg.init_smoothing
    gamma = np.exp(logits - logits.max(axis=1, keepdims=True))
    gamma /= gamma.sum(axis=1, keepdims=True)
    pi = np.full(S, 1.0 / S)

    ratio = cfg.fa / cfg.fb
    base = -0.5 * (np.sum(x * x, axis=1) + R * np.log(2 * np.pi))
    rho = x * np.sqrt(psi)
    trace: list[float] = []
    for _ in range(cfg.max_iters):
        counts = gamma.sum(axis=0)
        inv_prec = 1.0 / (1.0 + ratio * counts[:, None] * psi[None, :])  # S x R
        alpha = ratio * inv_prec * (gamma.T @ rho)
        lls = cfg.fa * (base[:, None] + rho @ alpha.T - 0.5 * ((inv_prec + alpha**2) @ psi)[None, :])
        neg_kl = 0.5 * np.sum(np.log(inv_prec) - inv_prec - alpha**2 + 1.0)
        gamma, total, resets = forward_backward(lls, cfg.ploop, pi)
        trace.append(total + cfg.fb * neg_kl)
        pi = resets / resets.sum()
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.elbo_tol:
            break

    keep = gamma.sum(axis=0) >= cfg.min_speaker_mass
    if not keep.any():
        keep[np.argmax(gamma.sum(axis=0))] = True
    gamma = gamma[:, keep]
    rows = gamma.sum(axis=1, keepdims=True)
    gamma = np.where(rows > 0, gamma / np.where(rows > 0, rows, 1.0), 1.0 / gamma.shape[1])
    pi = pi[keep] / pi[keep].sum()
    return ClusteringResult(gamma, gamma.argmax(axis=1), trace, pi)


def _fill_from_nearest(values, mask) -> np.ndarray:
    """Spread ``values`` (one per masked row) to all rows: each unmasked row
    takes the value of the nearest masked row by index (earlier on ties)."""
    keep = np.flatnonzero(mask)
    pos = np.searchsorted(keep, np.arange(len(mask)))
    left = keep[np.maximum(pos - 1, 0)]
    right = keep[np.minimum(pos, len(keep) - 1)]
    idx = np.arange(len(mask))
    take_right = np.abs(right - idx) < np.abs(idx - left)
    out = np.empty(len(mask), dtype=np.int64)
    out[keep] = values
    rest = ~mask
    out[rest] = out[np.where(take_right, right, left)[rest]]
    return out


def cluster_embeddings(embeddings, plda: PLDAModel, cfg: VBxConfig = VBxConfig(),
                       cluster_mask=None) -> ClusteringResult:
    """AHC on full-dimensional PLDA scores, then VBx in the top ``latent_dim``
    dimensions.

    With ``cfg.length_norm`` the embeddings are length-normalised first, so
    ``plda`` must have been trained on length-normalised embeddings too.

    ``cluster_mask`` restricts AHC and VBx to the selected rows (e.g. frames
    without detected overlap, whose mixed embeddings would otherwise form a
    speaker of their own); every other row copies the posterior of the
    nearest selected row.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    mask = None if cluster_mask is None else np.asarray(cluster_mask, dtype=bool)
    if mask is not None and len(mask) != len(x):
        raise ValueError("cluster_mask length differs from the number of embeddings")
    if mask is not None and 0 < mask.sum() < len(x):
        sub = cluster_embeddings(x[mask], plda, cfg)
        src = _fill_from_nearest(np.flatnonzero(mask), mask)
        gamma = sub.gamma[np.searchsorted(np.flatnonzero(mask), src)]
        return ClusteringResult(gamma, np.argmax(gamma, axis=1), sub.elbo_trace, sub.pi)
    if cfg.length_norm:
        x = length_normalise(x)
    full = prepare_latent_space(plda)
    init = ahc_init(x, full, cfg.ahc_threshold)
    R = min(cfg.latent_dim, full.dim)
    projected = full.transform(x)[:, :R]
    space = LatentSpace(full.projection[:R], full.psi[:R], full.mean)
    return vbx_refine(projected, init, space, cfg)
