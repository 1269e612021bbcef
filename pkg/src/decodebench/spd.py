"""Symmetric positive definite matrix primitives for the handcrafted pipelines.

Covariance estimation, Ledoit-Wolf shrinkage, the affine-invariant Karcher
mean, tangent-space projection, xDAWN spatial filtering, and Welch co-spectra.
All matrix functions go through symmetric eigendecompositions (the inputs are
SPD by construction).
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

TRACE_FLOOR = 1e-10
GAMMA_MIN = 1e-3


class SpdError(RuntimeError):
    """Matrix failed an SPD requirement or an iteration did not converge."""


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _eig_fn(m: np.ndarray, fn) -> np.ndarray:
    vals, vecs = np.linalg.eigh(_symmetrize(m))
    return vecs @ np.diag(fn(vals)) @ vecs.T


def logm(m: np.ndarray) -> np.ndarray:
    return _eig_fn(m, np.log)


def expm(m: np.ndarray) -> np.ndarray:
    return _eig_fn(m, np.exp)


def sqrtm(m: np.ndarray) -> np.ndarray:
    return _eig_fn(m, np.sqrt)


def invsqrtm(m: np.ndarray) -> np.ndarray:
    return _eig_fn(m, lambda v: 1.0 / np.sqrt(v))


def covariance(window: np.ndarray) -> np.ndarray:
    """Sample covariance of one [C, T] window after per-channel mean removal."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError(f"window must be [C, T] with T > 1, got {x.shape}")
    x = x - x.mean(axis=1, keepdims=True)
    return (x @ x.T) / (x.shape[1] - 1)


def ledoit_wolf_gamma(samples: np.ndarray) -> float:
    """Shrinkage intensity toward the scaled identity, from centered samples.

    `samples` is [C, T]; the estimate follows the standard ratio of the mean
    squared per-sample scatter to the dispersion of S around its trace target.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    c, t = x.shape
    s = (x @ x.T) / t
    mu = np.trace(s) / c
    delta2 = float(((s - mu * np.eye(c)) ** 2).sum()) / c
    if delta2 == 0:
        return 1.0
    beta2 = 0.0
    for k in range(t):
        outer = np.outer(x[:, k], x[:, k])
        beta2 += float(((outer - s) ** 2).sum())
    beta2 /= t * t * c
    return float(min(beta2, delta2) / delta2)


def shrink(s: np.ndarray, method: str = "ledoit-wolf",
           samples: np.ndarray | None = None, gamma: float | None = None
           ) -> np.ndarray:
    """(1 - gamma) S + gamma (tr S / C) I, with gamma floored at GAMMA_MIN.

    With `method="ledoit-wolf"` the intensity comes from `samples` (the window
    behind S); pass `gamma` to fix it instead. A zero (or negative) trace falls
    back to the TRACE_FLOOR so the output stays SPD.
    """
    s = _symmetrize(np.asarray(s, dtype=np.float64))
    c = s.shape[0]
    if gamma is None:
        if method != "ledoit-wolf":
            raise ValueError(f"unknown shrinkage method {method!r}")
        g = ledoit_wolf_gamma(samples) if samples is not None else GAMMA_MIN
    else:
        g = float(gamma)
    g = float(min(1.0, max(g, GAMMA_MIN)))
    mu = max(np.trace(s) / c, TRACE_FLOOR)
    return (1.0 - g) * s + g * mu * np.eye(c)


def is_spd(m: np.ndarray, tol: float = 1e-8) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if not np.allclose(m, m.T, atol=tol):
        return False
    return float(np.linalg.eigvalsh(_symmetrize(m)).min()) > 0


def riemannian_mean(matrices, tol: float = 1e-7, max_iter: int = 50) -> np.ndarray:
    """Affine-invariant Karcher mean by fixed-point iteration (step 1.0)."""
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not mats:
        raise ValueError("need at least one matrix")
    g = np.mean(mats, axis=0)
    for _ in range(max_iter):
        g_half = sqrtm(g)
        g_ihalf = invsqrtm(g)
        tangent = np.mean([logm(g_ihalf @ p @ g_ihalf) for p in mats], axis=0)
        g = g_half @ expm(tangent) @ g_half
        if float(np.linalg.norm(tangent)) <= tol:
            return _symmetrize(g)
    raise SpdError(f"Karcher mean did not converge within {max_iter} iterations "
                   f"(gradient norm {np.linalg.norm(tangent):.3e})")


_SQRT2 = np.sqrt(2.0)


def tangent_project(p: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Vectorized log-map of P at `ref`: upper triangle of
    logm(ref^-1/2 P ref^-1/2) with off-diagonals scaled by sqrt(2)."""
    ref_ihalf = invsqrtm(np.asarray(ref, dtype=np.float64))
    w = logm(ref_ihalf @ np.asarray(p, dtype=np.float64) @ ref_ihalf)
    c = w.shape[0]
    iu = np.triu_indices(c)
    coeffs = np.where(iu[0] == iu[1], 1.0, _SQRT2)
    return coeffs * w[iu]


def tangent_features(covs: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Stacked tangent vectors for a [N, C, C] covariance array."""
    ref_ihalf = invsqrtm(np.asarray(ref, dtype=np.float64))
    c = ref_ihalf.shape[0]
    iu = np.triu_indices(c)
    coeffs = np.where(iu[0] == iu[1], 1.0, _SQRT2)
    out = np.empty((covs.shape[0], c * (c + 1) // 2))
    for i, cov in enumerate(covs):
        w = logm(ref_ihalf @ cov @ ref_ihalf)
        out[i] = coeffs * w[iu]
    return out


def affine_invariant_distance(p: np.ndarray, q: np.ndarray) -> float:
    """delta(P, Q) = ||log(P^-1/2 Q P^-1/2)||_F (equals sqrt sum log^2 eigs of P^-1 Q)."""
    p_ihalf = invsqrtm(np.asarray(p, dtype=np.float64))
    w = logm(p_ihalf @ np.asarray(q, dtype=np.float64) @ p_ihalf)
    return float(np.linalg.norm(w))


# ---------------------------------------------------------------------------
# xDAWN spatial filtering
# ---------------------------------------------------------------------------

def xdawn_filters(epochs: np.ndarray, labels: np.ndarray, n_filters: int = 4
                  ) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Per-class spatial filters maximizing evoked-response SNR.

    For each class, solves the generalized eigenproblem of the evoked-response
    covariance against the (shrunk) total covariance and keeps the `n_filters`
    leading filters. Returns (filters, prototypes): filters[c] is
    [n_filters, C]; prototypes[c] is the filtered class mean [n_filters, T].
    """
    x = np.asarray(epochs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError(f"xDAWN needs >= 2 classes, got {len(classes)}")
    for c in classes:
        if np.count_nonzero(y == c) < 2:
            raise ValueError(f"class {c} has fewer than 2 epochs")
    # total covariance over the concatenated epochs, shrunk against singularity
    concat = np.concatenate(list(x), axis=1)
    sigma_total = shrink(covariance(concat), samples=concat)
    filters: dict[int, np.ndarray] = {}
    prototypes: dict[int, np.ndarray] = {}
    for c in classes:
        evoked = x[y == c].mean(axis=0)
        sigma_evoked = covariance(evoked)
        vals, vecs = linalg.eigh(_symmetrize(sigma_evoked), _symmetrize(sigma_total))
        order = np.argsort(vals)[::-1][:n_filters]
        v = vecs[:, order].T  # [n_filters, C]
        filters[int(c)] = v
        prototypes[int(c)] = v @ evoked
    return filters, prototypes


def xdawn_augmented_covariances(epochs: np.ndarray, filters: dict[int, np.ndarray],
                                prototypes: dict[int, np.ndarray]) -> np.ndarray:
    """Covariances of super-trials: filtered class prototypes stacked above the
    filtered epoch."""
    x = np.asarray(epochs, dtype=np.float64)
    classes = sorted(filters)
    proto = np.concatenate([prototypes[c] for c in classes], axis=0)
    v_all = np.concatenate([filters[c] for c in classes], axis=0)
    out = []
    for ep in x:
        super_trial = np.concatenate([proto, v_all @ ep], axis=0)
        out.append(shrink(covariance(super_trial), samples=super_trial))
    return np.stack(out)


# ---------------------------------------------------------------------------
# Welch co-spectra
# ---------------------------------------------------------------------------

def welch_cospectra(epoch: np.ndarray, sfreq: float, seg_seconds: float = 1.0
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Real part of the Welch cross-spectral density of one [C, T] epoch.

    Hann-windowed segments of `seg_seconds` with 50% overlap. Returns
    (freqs [F], cospectra [F, C, C]); diagonals are per-channel power (>= 0).
    """
    x = np.asarray(epoch, dtype=np.float64)
    nper = int(round(seg_seconds * sfreq))
    if x.shape[1] < nper:
        raise ValueError(f"epoch of {x.shape[1]} samples is shorter than one "
                         f"{nper}-sample Welch segment")
    step = nper // 2
    window = np.hanning(nper)
    scale = 1.0 / (sfreq * (window * window).sum())
    starts = range(0, x.shape[1] - nper + 1, step)
    acc = None
    for s0 in starts:
        seg = x[:, s0:s0 + nper] * window
        spec = np.fft.rfft(seg, axis=1)
        cross = np.einsum("cf,df->fcd", spec, np.conj(spec))
        acc = cross if acc is None else acc + cross
    csd = acc * (scale / len(list(starts)))
    # one-sided doubling except DC and Nyquist
    freqs = np.fft.rfftfreq(nper, d=1.0 / sfreq)
    csd[1:] *= 2.0
    if nper % 2 == 0:
        csd[-1] /= 2.0
    return freqs, csd.real


def cospectra_features(epochs: np.ndarray, sfreq: float,
                       freq_band: tuple[float, float]) -> np.ndarray:
    """Flattened upper-triangular co-spectra per frequency bin in `freq_band`,
    with log(1+x) applied to the diagonal (per-channel power) entries."""
    lo, hi = freq_band
    nyq = sfreq / 2.0
    if not 0 <= lo < hi <= nyq:
        raise ValueError(f"band [{lo}, {hi}] outside [0, {nyq}]")
    x = np.asarray(epochs, dtype=np.float64)
    c = x.shape[1]
    iu = np.triu_indices(c)
    diag_mask = iu[0] == iu[1]
    rows = []
    for ep in x:
        freqs, csd = welch_cospectra(ep, sfreq)
        bins = np.flatnonzero((freqs >= lo) & (freqs <= hi))
        feats = []
        for b in bins:
            flat = csd[b][iu]
            flat = np.where(diag_mask, np.log1p(np.maximum(flat, 0.0)), flat)
            feats.append(flat)
        rows.append(np.concatenate(feats))
    return np.stack(rows)
