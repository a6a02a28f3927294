"""Latent geometry of the circle-product manifold.

Angles live on D unit circles; their tuples are combined into a rank-1
tensor plus the vector of cosine components, which together form the
decoder input. Everything here is pure and side-effect free.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


class DegenerateInputError(ValueError):
    """Raised when an input collapses to a point with no direction."""


class ReconstructionError(ValueError):
    """Raised when an embedding is not consistent with any rank-1 unit structure."""


class CircleTuple(NamedTuple):
    m0: float
    m1: float


@dataclass(frozen=True)
class GaussianPairParams:
    """Per-circle Gaussian parameters, one (mu, sigma) pair of 2-vectors each.

    mu and sigma have shape (D, 2); sigma must be strictly positive.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.shape != sigma.shape or mu.ndim != 2 or mu.shape[1] != 2:
            raise ValueError(f"expected (D, 2) parameter arrays, got {mu.shape} / {sigma.shape}")
        if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
            raise ValueError("non-finite Gaussian parameters")
        if np.any(sigma <= 0.0):
            raise ValueError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_circles(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class LatentEmbedding:
    """Flattened rank-1 product of D circle tuples plus their cosine components."""

    v_prod: np.ndarray
    v_orient: np.ndarray
    d: int

    def __post_init__(self):
        v_prod = np.asarray(self.v_prod, dtype=float)
        v_orient = np.asarray(self.v_orient, dtype=float)
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if v_prod.shape != (2**self.d,) or v_orient.shape != (self.d,):
            raise ValueError(
                f"expected lengths ({2**self.d},) and ({self.d},), "
                f"got {v_prod.shape} and {v_orient.shape}"
            )
        if not (np.isfinite(v_prod).all() and np.isfinite(v_orient).all()):
            raise ValueError("non-finite embedding")
        object.__setattr__(self, "v_prod", v_prod)
        object.__setattr__(self, "v_orient", v_orient)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v_prod, self.v_orient])

    def validate(self, atol: float = 1e-10) -> None:
        if abs(np.linalg.norm(self.v_prod) - 1.0) > atol:
            raise ValueError("v_prod is not unit norm")
        if np.any(np.abs(self.v_orient) > 1.0 + atol):
            raise ValueError("v_orient component outside [-1, 1]")


def canonical_angle(theta):
    """Reduce angles modulo 2*pi into [0, 2*pi)."""
    theta = np.asarray(theta, dtype=float)
    if not np.isfinite(theta).all():
        raise ValueError("non-finite angle")
    out = np.mod(theta, TWO_PI)
    # mod can return 2*pi itself for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return out if out.ndim else float(out)


def make_circle_point(theta: float) -> CircleTuple:
    """Map an angle to its unit tuple (cos theta, sin theta)."""
    if not np.isfinite(theta):
        raise ValueError(f"non-finite angle: {theta!r}")
    t = canonical_angle(theta)
    return CircleTuple(float(np.cos(t)), float(np.sin(t)))


def normalize_pair(raw: Sequence[float]) -> CircleTuple:
    """Project a nonzero 2-vector onto the unit circle."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (2,):
        raise ValueError(f"expected a 2-vector, got shape {raw.shape}")
    if not np.isfinite(raw).all():
        raise ValueError("non-finite components")
    norm = float(np.hypot(raw[0], raw[1]))
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize the zero vector")
    return CircleTuple(float(raw[0] / norm), float(raw[1] / norm))


def tensor_product(tuples: Sequence[CircleTuple]) -> np.ndarray:
    """Flattened outer product of D unit tuples.

    The linear index is sum_a alpha_a * 2**(D - a), i.e. the first tuple's
    component index is the most significant bit.
    """
    if len(tuples) == 0:
        raise ValueError("need at least one circle tuple")
    v = np.asarray(tuples[0], dtype=float)
    for m in tuples[1:]:
        v = np.outer(v, np.asarray(m, dtype=float)).ravel()
    return v


def embed(tuples: Sequence[CircleTuple]) -> LatentEmbedding:
    """Combine D circle tuples into the decoder-facing latent vector."""
    v_prod = tensor_product(tuples)
    v_orient = np.array([m[0] for m in tuples], dtype=float)
    return LatentEmbedding(v_prod=v_prod, v_orient=v_orient, d=len(tuples))


def embed_angles(angles) -> LatentEmbedding:
    """embed() starting from raw angles instead of tuples."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    return embed([make_circle_point(t) for t in angles])


def embed_batch(angles: np.ndarray) -> np.ndarray:
    """Vectorized embedding of an (N, D) angle array into (N, 2**D + D) rows."""
    angles = np.asarray(angles, dtype=float)
    if angles.ndim != 2 or angles.shape[1] < 1:
        raise ValueError(f"expected an (N, D) array, got shape {angles.shape}")
    c = np.cos(angles)
    s = np.sin(angles)
    v = _product_from_components(c, s)
    return np.concatenate([v, c], axis=1)


def _product_from_components(c: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Rank-1 product rows built from (N, D) cosine and sine arrays."""
    n, d = c.shape
    v = np.stack([c[:, 0], s[:, 0]], axis=1)
    for a in range(1, d):
        m = np.stack([c[:, a], s[:, a]], axis=1)
        v = (v[:, :, None] * m[:, None, :]).reshape(n, -1)
    return v


def sample_circle(mu: Sequence[float], sigma: Sequence[float], noise: Sequence[float]) -> CircleTuple:
    """Reparameterized draw for one circle: normalize(mu + sigma * noise).

    Deterministic given the externally supplied standard-normal noise pair.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if mu.shape != (2,) or sigma.shape != (2,) or noise.shape != (2,):
        raise ValueError("mu, sigma and noise must all be 2-vectors")
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be strictly positive")
    raw = mu + sigma * noise
    return normalize_pair(raw)


def gaussian_kl(params: GaussianPairParams) -> float:
    """KL divergence of the pre-normalization Gaussians from N(0, 1).

    Summed over all 2D components: 0.5 * (sigma^2 + mu^2 - 1 - ln sigma^2).
    Zero exactly when every component has mu = 0 and sigma = 1.
    """
    var = params.sigma**2
    kl = 0.5 * np.sum(var + params.mu**2 - 1.0 - np.log(var))
    return float(max(kl, 0.0))


def _mode_sine_norms(prod: np.ndarray, d: int) -> np.ndarray:
    """Per-mode norms of the sine-side unfolding rows, shape (N, D).

    Unfolding mode a splits the product entries by bit a; the row with the
    bit set is sin(theta_a) times the unit-norm product of the remaining
    tuples, so its norm recovers |sin(theta_a)| directly.
    """
    n = prod.shape[0]
    cube = (prod * prod).reshape((n,) + (2,) * d)
    norms = np.empty((n, d), dtype=float)
    for a in range(d):
        axes = tuple(i + 1 for i in range(d) if i != a)
        norms[:, a] = np.sqrt(cube.sum(axis=axes)[:, 1]) if axes else np.sqrt(cube[:, 1])
    return norms


def recover_angles_batch(vectors: np.ndarray, d: int, check_tol: float = 1e-4) -> np.ndarray:
    """Invert embed_batch: (N, 2**D + D) rows back to (N, D) angles in [0, 2*pi).

    Cosines come straight from the orientation block. Sine magnitudes come
    from the mode-wise unfolding norms of the product block, which keeps the
    inversion well conditioned even at axis-aligned angles. Sine signs come
    from the ratio of the two product entries that differ only in the mode's
    own bit, anchored at the multi-index that picks each circle's dominant
    component (so the anchor entry is bounded away from zero).

    When a cosine is exactly zero the ratio carries no information; those
    signs are fixed from the anchor entry's overall parity, first such circle
    absorbing the parity and the rest defaulting to positive sine. Inputs
    whose joint signs are genuinely unidentifiable (two or more circles
    exactly at +-pi/2) are mapped to that convention.

    Raises ReconstructionError if the rows are inconsistent with a rank-1
    product of unit tuples beyond check_tol.
    """
    vectors = np.asarray(vectors, dtype=float)
    if d < 1:
        raise ValueError("d must be >= 1")
    width = 2**d + d
    if vectors.ndim != 2 or vectors.shape[1] != width:
        raise ValueError(f"expected (N, {width}) rows for d={d}, got shape {vectors.shape}")
    if not np.isfinite(vectors).all():
        raise ValueError("non-finite embedding rows")

    prod = vectors[:, : 2**d]
    orient = vectors[:, 2**d :]
    n = prod.shape[0]

    norm_err = np.abs(np.linalg.norm(prod, axis=1) - 1.0)
    if np.any(norm_err > 1e-3):
        raise ReconstructionError(
            f"product block norm deviates from 1 by up to {norm_err.max():.3e}"
        )

    c = np.clip(orient, -1.0, 1.0)
    t = _mode_sine_norms(prod, d)
    unit_err = np.abs(c**2 + t**2 - 1.0)
    if np.any(unit_err > max(check_tol, 1e-6)):
        raise ReconstructionError(
            f"cosine/sine pair leaves the unit circle by up to {unit_err.max():.3e}"
        )

    # anchor index: per circle, the larger-magnitude component
    bits = np.array([1 << (d - 1 - a) for a in range(d)], dtype=np.intp)
    choose_sin = t > np.abs(c)
    base_idx = (choose_sin * bits).sum(axis=1)
    rows = np.arange(n)
    v_base = prod[rows, base_idx]
    if np.any(v_base == 0.0):
        raise ReconstructionError("anchor product entry vanished; not a unit rank-1 structure")

    flip_idx = base_idx[:, None] ^ bits[None, :]
    v_flip = prod[rows[:, None], flip_idx]

    # sign(v_flip / v_base) equals sign(cos) * sign(sin) for either anchor choice
    sign_base = np.sign(v_base)
    signs = np.where(np.sign(v_flip) * sign_base[:, None] * np.sign(c) >= 0.0, 1.0, -1.0)
    signs[t == 0.0] = 1.0

    deferred = (c == 0.0) & (t > 0.0)
    if deferred.any():
        known = np.where(choose_sin, np.where(deferred, 1.0, signs), np.sign(c))
        required = sign_base * known.prod(axis=1)
        first = np.argmax(deferred, axis=1)
        has_deferred = deferred.any(axis=1)
        signs[deferred] = 1.0
        signs[rows[has_deferred], first[has_deferred]] = required[has_deferred]

    rebuilt = _product_from_components(c, signs * t)
    rebuild_err = np.abs(rebuilt - prod).max(axis=1)
    if np.any(rebuild_err > check_tol):
        raise ReconstructionError(
            f"product block is {rebuild_err.max():.3e} away from the nearest "
            "consistent rank-1 structure"
        )

    return canonical_angle(np.arctan2(signs * t, c))


def recover_angles(emb: LatentEmbedding, check_tol: float = 1e-4) -> np.ndarray:
    """Invert embed(); returns the D angles in [0, 2*pi)."""
    return recover_angles_batch(emb.as_vector()[None, :], emb.d, check_tol=check_tol)[0]
