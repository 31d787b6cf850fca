"""Forward filtering for the matrix-variate dynamic linear model.

Per voxel cluster, ``Y_t`` (a q-vector) follows

    Y_t' = F_t' Theta_t + nu_t',       nu_t ~ N_q(0, Sigma)
    Theta_t = G Theta_{t-1} + Omega_t, Omega_t ~ N_pq(0, W_t, Sigma)

with ``W_t`` specified through a discount factor ``delta`` (``R_t = G C G'/delta``)
and the conjugate matrix-normal / inverse-Wishart updating. The posterior at
``t`` is matrix-T ``T_{n_t}[m_t, C_t, S_t]``; the row covariance ``C_t`` is
on the unit observational scale (forecast variance ``q_t = F'RF + 1``) and all
observational variance lives in ``S_t``.

``C_t``, ``R_t`` and the gains do not depend on the data, so series that share
a design, prior and evolution are filtered together in one pass.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np

from .distributions import MatrixNormalParams, symmetrize
from .errors import DimensionMismatch, NonFinite, ValidationError

NORMAL_APPROX_MIN_DOF = 30


class ApproximationWarning(UserWarning):
    """Matrix-T posterior approximated by a normal with fewer than 30 dof."""


@dataclass(frozen=True)
class PriorSpec:
    """Initial moments. Scalars broadcast: ``m0`` fills the p x q mean,
    ``s0`` multiplies ``I_q``. ``C0 = c0_scale * I_p``."""

    m0: object = 0.0
    c0_scale: float = 100.0
    s0: object = 1.0
    n0: float = 1.0

    def __post_init__(self):
        if not self.c0_scale > 0:
            raise ValidationError("c0_scale must be > 0")
        if not self.n0 >= 1:
            raise ValidationError("n0 must be >= 1")

    def initial(self, p, q):
        m0 = np.broadcast_to(np.asarray(self.m0, dtype=float), (p, q)).copy()
        s0 = np.asarray(self.s0, dtype=float)
        s0 = s0 * np.eye(q) if s0.ndim == 0 else s0.copy()
        if s0.shape != (q, q):
            raise DimensionMismatch(f"s0 has shape {s0.shape}, expected {(q, q)}")
        return PosteriorMoments(m0, self.c0_scale * np.eye(p), s0, float(self.n0))

    def to_json(self):
        return {"m0": np.asarray(self.m0).tolist(), "c0_scale": self.c0_scale,
                "s0": np.asarray(self.s0).tolist(), "n0": self.n0}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["m0"], obj["c0_scale"], obj["s0"], obj["n0"])


@dataclass(frozen=True)
class EvolutionSpec:
    """Evolution matrix ``g`` (None means identity) and discount factor."""

    discount: float = 0.95
    g: object = None

    def __post_init__(self):
        if not 0 < self.discount <= 1:
            raise ValidationError(f"discount must lie in (0, 1], got {self.discount}")
        if self.discount <= 0.8:
            warnings.warn(f"discount {self.discount} is below the usual (0.8, 1] range",
                          stacklevel=2)
        if self.g is not None:
            g = np.atleast_2d(np.asarray(self.g, dtype=float))
            if not np.all(np.isfinite(g)):
                raise ValidationError("evolution matrix has non-finite entries")
            object.__setattr__(self, "g", g)

    def matrix(self, p):
        if self.g is None:
            return np.eye(p)
        if self.g.shape != (p, p):
            raise DimensionMismatch(f"evolution matrix is {self.g.shape}, expected {(p, p)}")
        return self.g

    @property
    def b_factor(self):
        """Scalar ``b`` of ``B_t = b I``, chosen so ``B C B - C = (1/delta - 1) C``."""
        return self.discount ** -0.5

    def to_json(self):
        return {"discount": self.discount,
                "g": None if self.g is None else self.g.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["discount"], obj.get("g"))


@dataclass(frozen=True)
class PosteriorMoments:
    m: np.ndarray
    c: np.ndarray
    s: np.ndarray
    n: float

    @property
    def p(self):
        return self.m.shape[0]

    @property
    def q(self):
        return self.m.shape[1]


@dataclass(frozen=True)
class PosteriorSequence:
    """Stacked moments for ``t = 0..T``; index 0 holds the prior."""

    m: np.ndarray  # (T+1, p, q)
    c: np.ndarray  # (T+1, p, p)
    s: np.ndarray  # (T+1, q, q)
    n: np.ndarray  # (T+1,)

    @property
    def n_scans(self):
        return self.m.shape[0] - 1

    @property
    def p(self):
        return self.m.shape[1]

    @property
    def q(self):
        return self.m.shape[2]

    def at(self, t):
        return PosteriorMoments(self.m[t], self.c[t], self.s[t], float(self.n[t]))


@dataclass(frozen=True)
class FilterOutput:
    """Filtered posterior sequence plus one-step forecast errors ``e``
    ``(T, q)`` and forecast variances ``qf`` ``(T,)``."""

    posterior: PosteriorSequence
    e: np.ndarray
    qf: np.ndarray
    prior: PriorSpec = field(default=None, compare=False)
    evolution: EvolutionSpec = field(default=None, compare=False)

    def __len__(self):
        return self.posterior.n_scans

    @property
    def final(self):
        return self.posterior.at(self.posterior.n_scans)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFinite("filter produced non-finite moments")


def filter_step(prev, f_t, evo, y_t):
    """One conjugate discount-filter update; returns the posterior at ``t``."""
    return _step(prev, f_t, evo, y_t)[0]


def _step(prev, f_t, evo, y_t):
    f_t = np.asarray(f_t, dtype=float)
    y_t = np.asarray(y_t, dtype=float)
    if f_t.shape != (prev.p,) or y_t.shape != (prev.q,):
        raise DimensionMismatch(
            f"f_t {f_t.shape} / y_t {y_t.shape} do not match state {prev.m.shape}"
        )
    g = evo.matrix(prev.p)
    a = g @ prev.m
    r = g @ prev.c @ g.T / evo.discount
    rf = r @ f_t
    qf = f_t @ rf + 1.0
    e = y_t - f_t @ a
    gain = rf / qf
    m = a + np.outer(gain, e)
    c = symmetrize(r - qf * np.outer(gain, gain))
    n = prev.n + 1
    s = symmetrize((prev.n * prev.s + np.outer(e, e) / qf) / n)
    _check_finite(m, c, s)
    return PosteriorMoments(m, c, s, n), e, qf


def _design_array(design):
    return getattr(design, "columns", design)


def filter_gains(design, evo, c0):
    """Data-independent part of the recursion.

    Returns ``(c, gain, qf)`` with ``c`` of shape ``(T+1, p, p)`` (prior
    first), gains ``(T, p)`` and forecast variances ``(T,)``.
    """
    f = np.asarray(_design_array(design), dtype=float)
    n_scans, p = f.shape
    g = evo.matrix(p)
    c = np.empty((n_scans + 1, p, p))
    c[0] = c0
    gains = np.empty((n_scans, p))
    qfs = np.empty(n_scans)
    for t in range(n_scans):
        r = g @ c[t] @ g.T / evo.discount
        rf = r @ f[t]
        qf = f[t] @ rf + 1.0
        gains[t] = rf / qf
        qfs[t] = qf
        c[t + 1] = symmetrize(r - qf * np.outer(gains[t], gains[t]))
    _check_finite(c)
    return c, gains, qfs


def filter_series(y, design, evo, prior):
    """Fold :func:`filter_step` over ``t = 1..T``.

    ``y`` is ``(T, q)``; a leading batch axis ``(B, T, q)`` filters B series
    sharing design, evolution and prior in one pass and returns a list.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    batched = y.ndim == 3
    ys = y if batched else y[None]
    f = np.asarray(_design_array(design), dtype=float)
    n_scans, p = f.shape
    nb, ty, q = ys.shape
    if ty != n_scans:
        raise DimensionMismatch(f"series has {ty} scans but design has {n_scans}")
    init = prior.initial(p, q)
    g = evo.matrix(p)
    c, gains, qfs = filter_gains(f, evo, init.c)
    n = init.n + np.arange(n_scans + 1, dtype=float)

    m = np.empty((nb, n_scans + 1, p, q))
    s = np.empty((nb, n_scans + 1, q, q))
    e = np.empty((nb, n_scans, q))
    m[:, 0] = init.m
    s[:, 0] = init.s
    for t in range(n_scans):
        a = g @ m[:, t]
        err = ys[:, t] - np.einsum("p,bpq->bq", f[t], a)
        e[:, t] = err
        m[:, t + 1] = a + gains[t][None, :, None] * err[:, None, :]
        outer = err[:, :, None] * err[:, None, :]
        s[:, t + 1] = symmetrize((n[t] * s[:, t] + outer / qfs[t]) / n[t + 1])
    _check_finite(m, s)

    outs = [
        FilterOutput(PosteriorSequence(m[b], c, s[b], n), e[b], qfs, prior, evo)
        for b in range(nb)
    ]
    return outs if batched else outs[0]


def filtered_means(y, design, evo, m0, c0):
    """Posterior means only, for many pseudo-series at once.

    ``y`` is ``(..., T, r)`` and ``m0`` is ``(p, r)``; returns ``(..., T, p, r)``
    holding ``m_1..m_T``. The means are linear in ``y``.
    """
    y = np.asarray(y, dtype=float)
    f = np.asarray(_design_array(design), dtype=float)
    n_scans, p = f.shape
    g = evo.matrix(p)
    _, gains, _ = filter_gains(f, evo, c0)
    out = np.empty(y.shape[:-2] + (n_scans, p, y.shape[-1]))
    m = np.broadcast_to(np.asarray(m0, dtype=float), y.shape[:-2] + (p, y.shape[-1]))
    for t in range(n_scans):
        a = g @ m
        err = y[..., t, :] - np.einsum("p,...pr->...r", f[t], a)
        m = a + gains[t][:, None] * err[..., None, :]
        out[..., t, :, :] = m
    return out


def normal_approx(pm):
    """Normal approximation ``N_pq[m, C, S]`` to the matrix-T posterior.

    Sets ``degraded`` and warns when ``n < 30``.
    """
    degraded = pm.n < NORMAL_APPROX_MIN_DOF
    if degraded:
        warnings.warn(
            f"normal approximation with n = {pm.n:g} < {NORMAL_APPROX_MIN_DOF} degrees of freedom",
            ApproximationWarning,
            stacklevel=2,
        )
    return MatrixNormalParams(pm.m, pm.c, pm.s, degraded=degraded)
