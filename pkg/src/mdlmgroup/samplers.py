"""Monte Carlo trajectory samplers and the activation-evidence estimator.

Four ways of drawing on-line trajectories of the state for one voxel:

* FEST draws effects from the posterior at every t, synthesizes
  pseudo-observations through the design, refilters them and keeps the
  trajectory of refiltered means;
* FSTS propagates a posterior draw at ``t-1`` one random-walk step;
* FFBS samples a scale matrix, the final state, and walks backwards through
  the smoothing conditionals;
* AG runs one of the above per subject and averages the trajectories.

Evidence is the Monte Carlo frequency of trajectories judged positive.

Trajectories are drawn directly in effect space: the state is right-multiplied
by the column projection of the requested effect kind (see
:mod:`mdlmgroup.group`). A matrix normal stays matrix normal under that map,
``N_pq[M, C, S] P = N_pr[M P, C, P'SP]``, and every step here is linear, so
this has the same distribution as sampling the full p x q state and reducing
it afterwards, at a fraction of the cost for the scalar effects.
"""
import warnings
from dataclasses import dataclass

import numpy as np

from .distributions import cholesky, inverse_wishart_factor, symmetrize
from .errors import (DesignMismatch, DimensionMismatch, EmptyTrajectorySet,
                     IndexOutOfRange, ValidationError)
from .group import EFFECT_KINDS, GroupPosterior, column_projection
from .mdlm_filter import PosteriorSequence, filtered_means

SAMPLERS = ("fest", "fsts", "ffbs", "ag")
BASE_SAMPLERS = ("fest", "fsts", "ffbs")
POSITIVITY_RULES = ("all_t", "mean_over_t")
JOINT_RULES = ("all", "center")
MIN_SIMU = 100
RECOMMENDED_SIMU = 1000


@dataclass(frozen=True)
class SamplerConfig:
    """Monte Carlo settings.

    ``covariate`` is the design column whose activation is assessed; ``base``
    is the per-subject sampler used by AG. ``joint_rule`` decides whether a
    joint-effect trajectory must be positive in every cluster component
    (``all``) or only in the center voxel (``center``).
    """

    n_simu: int = 1000
    seed: int = 0
    effect_kind: str = "marginal"
    positivity_rule: str = "all_t"
    sampler: str = "fsts"
    base: str = "ffbs"
    covariate: int = 1
    joint_rule: str = "all"

    def __post_init__(self):
        if self.n_simu < MIN_SIMU:
            raise ValidationError(f"n_simu must be >= {MIN_SIMU}, got {self.n_simu}")
        if self.n_simu < RECOMMENDED_SIMU:
            warnings.warn(f"n_simu = {self.n_simu} is below the recommended {RECOMMENDED_SIMU}",
                          stacklevel=2)
        for name, value, allowed in (
            ("effect_kind", self.effect_kind, EFFECT_KINDS),
            ("positivity_rule", self.positivity_rule, POSITIVITY_RULES),
            ("sampler", self.sampler, SAMPLERS),
            ("base", self.base, BASE_SAMPLERS),
            ("joint_rule", self.joint_rule, JOINT_RULES),
        ):
            if value not in allowed:
                raise ValidationError(f"{name} must be one of {allowed}, got {value!r}")

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class Trajectories:
    """``values`` is ``(n_simu, T, r)``: one row per replicate k."""

    values: np.ndarray
    covariate: int
    source: str
    kind: str

    def __len__(self):
        return self.values.shape[0]


def voxel_rng(seed, voxel_index, stream=0):
    """Generator keyed by ``(seed, voxel_index, stream)``.

    Streams are independent of scheduling, so maps do not depend on the
    number of workers. AG uses ``stream = z`` for subject z; stream 0 is the
    one the base samplers use.
    """
    ss = np.random.SeedSequence(seed, spawn_key=(int(voxel_index), int(stream)))
    return np.random.Generator(np.random.PCG64(ss))


def _unpack(posterior):
    if isinstance(posterior, GroupPosterior):
        return posterior.sequence, posterior.pooled_dof
    if isinstance(posterior, PosteriorSequence):
        return posterior, float(posterior.n[-1])
    raise TypeError(f"expected PosteriorSequence or GroupPosterior, got {type(posterior)!r}")


def _check_covariate(seq, l):
    if not 0 <= l < seq.p:
        raise IndexOutOfRange(f"covariate {l} out of range for p = {seq.p}")


def _colmix(z, lcol):
    """``z[:, t] @ lcol[t].T`` for ``z`` of shape ``(K, T, ..., r)``."""
    zt = np.moveaxis(z, 1, 0)
    shape = zt.shape
    out = zt.reshape(shape[0], -1, shape[-1]) @ np.swapaxes(lcol, -1, -2)
    return np.moveaxis(out.reshape(shape), 0, 1)


def _projected_scale_chol(s, proj):
    return cholesky(symmetrize(np.swapaxes(proj, -1, -2) @ s @ proj))


def fest_sample(posterior, design, evo, prior, cfg, rng):
    """Forward estimated trajectories.

    Per replicate: draw each covariate's effect from its posterior at every t,
    draw observation noise with the matching projected scale, synthesize
    ``Y~_t = sum_l theta_l x_l(t) + nu_t``, refilter with the original prior
    and evolution, and keep the refiltered means of the target covariate.
    """
    seq, _ = _unpack(posterior)
    f = getattr(design, "columns", None)
    if f is None:
        raise DesignMismatch("FEST needs the single design matrix shared by all subjects")
    if f.shape != (seq.n_scans, seq.p):
        raise DesignMismatch(
            f"design is {f.shape} but the posterior has (T, p) = {(seq.n_scans, seq.p)}"
        )
    l = cfg.covariate
    _check_covariate(seq, l)
    proj = column_projection(cfg.effect_kind, seq.q)
    k, n_scans, p, r = cfg.n_simu, seq.n_scans, seq.p, proj.shape[1]

    eff_mean = seq.m[1:] @ proj                               # (T, p, r)
    row_sd = np.sqrt(np.diagonal(seq.c[1:], axis1=1, axis2=2))  # (T, p)
    lcol = _projected_scale_chol(seq.s[1:], proj)             # (T, r, r)

    z_theta = rng.standard_normal((k, n_scans, p, r))
    theta = eff_mean + row_sd[None, :, :, None] * _colmix(z_theta, lcol)
    nu = _colmix(rng.standard_normal((k, n_scans, r)), lcol)
    y_tilde = np.einsum("tp,ktpr->ktr", f, theta) + nu

    init = prior.initial(p, seq.q)
    gamma = filtered_means(y_tilde, f, evo, init.m @ proj, init.c)
    return Trajectories(gamma[:, :, l, :], l, "fest", cfg.effect_kind)


def evolution_covariance(c_prev, evo):
    """``W_t = B C_{t-1} B - C_{t-1}`` with ``B = delta^{-1/2} I``."""
    p = c_prev.shape[-1]
    b = evo.b_factor * np.eye(p)
    return symmetrize(b @ c_prev @ b - c_prev)


def fsts_sample(posterior, evo, cfg, rng):
    """Forward state trajectories: ``Theta_t = Theta_{t-1} + Omega_t`` with
    ``Theta_{t-1} ~ N[m_{t-1}, C_{t-1}, S_{t-1}]`` and
    ``Omega_t ~ N[0, W_t, S_t]``, drawn independently for every t."""
    seq, _ = _unpack(posterior)
    l = cfg.covariate
    _check_covariate(seq, l)
    proj = column_projection(cfg.effect_kind, seq.q)
    k, n_scans, p, r = cfg.n_simu, seq.n_scans, seq.p, proj.shape[1]

    # rows of a matrix normal are N_r[m_l P, C_ll, P'SP]; only row l is kept
    c_prev = seq.c[:-1, l, l]
    w = evolution_covariance(seq.c[:-1], evo)[:, l, l]
    s_prev = _projected_scale_chol(seq.s[:-1], proj)

    z = rng.standard_normal((k, n_scans, r))
    theta = seq.m[:-1, l] @ proj + np.sqrt(c_prev)[:, None] * _colmix(z, s_prev)
    if np.any(w):
        s_cur = _projected_scale_chol(seq.s[1:], proj)
        z = rng.standard_normal((k, n_scans, r))
        theta = theta + np.sqrt(np.maximum(w, 0))[:, None] * _colmix(z, s_cur)
    return Trajectories(theta, l, "fsts", cfg.effect_kind)


def _backward_gains(c, evo):
    """Gains ``C (B C B)^{-1}`` and ``C* = C - gain C`` for a stack of ``C``."""
    p = c.shape[-1]
    b = evo.b_factor * np.eye(p)
    bcb = b @ c @ b
    gain = np.swapaxes(np.linalg.solve(np.swapaxes(bcb, -1, -2), np.swapaxes(c, -1, -2)), -1, -2)
    return gain, symmetrize(c - gain @ c)


def ffbs_backward_moments(posterior, j, theta_next, evo, proj=None):
    """Moments of ``Theta_{T-j} | Theta_{T-j+1}``:

    ``m* = m + C (B C B)^{-1} (Theta_next - m)`` and
    ``C* = C - C (B C B)^{-1} C`` at ``t = T - j``, with ``B = delta^{-1/2} I``.

    ``theta_next`` may carry leading batch axes and, when ``proj`` is given,
    live in projected columns (``m`` is projected to match).
    """
    seq, _ = _unpack(posterior)
    if not 1 <= j < seq.n_scans:
        raise IndexOutOfRange(f"backward step j = {j} outside 1..{seq.n_scans - 1}")
    t = seq.n_scans - j
    m = seq.m[t] if proj is None else seq.m[t] @ proj
    gain, c_star = _backward_gains(seq.c[t], evo)
    return m + gain @ (np.asarray(theta_next) - m), c_star


def ffbs_sample(posterior, evo, cfg, rng, dof=None):
    """Forward-filtering backward-sampling.

    ``Sigma ~ IW(dof, S_T)``; ``Theta_T ~ N[m_T, C_T, Sigma]``; then
    ``Theta_{T-j} ~ N[m*_j, C*_j, Sigma]`` for ``j = 1..T-1``. ``dof``
    defaults to ``n_T`` for a subject and to the pooled dof for a group.
    """
    seq, default_dof = _unpack(posterior)
    dof = default_dof if dof is None else dof
    l = cfg.covariate
    _check_covariate(seq, l)
    proj = column_projection(cfg.effect_kind, seq.q)
    k, n_scans, p, r = cfg.n_simu, seq.n_scans, seq.p, proj.shape[1]

    y = inverse_wishart_factor(dof, seq.s[-1], rng, size=k)      # (K, q, q)
    py = proj.T @ y
    l_sigma = cholesky(symmetrize(py @ np.swapaxes(py, -1, -2)))  # (K, r, r)
    z = rng.standard_normal((k, r, n_scans * p))
    noise = (l_sigma @ z).reshape(k, r, n_scans, p)
    # time-major layout (T, p, K, r) so each backward step is one matmul
    noise = np.ascontiguousarray(noise.transpose(2, 3, 0, 1))

    # the backward gains do not depend on the draws; index i holds time i + 1
    m_proj = (seq.m[1:] @ proj)[:, :, None, :]
    gain, c_star = _backward_gains(seq.c[1:-1], evo)
    flat = noise.reshape(n_scans, p, k * r)
    flat[:-1] = cholesky(c_star) @ flat[:-1]
    flat[-1] = cholesky(seq.c[-1]) @ flat[-1]

    theta = np.empty_like(noise)
    theta[-1] = m_proj[-1] + noise[-1]
    for i in range(n_scans - 2, -1, -1):
        m = m_proj[i]
        step = gain[i] @ (theta[i + 1] - m).reshape(p, k * r)
        theta[i] = m + step.reshape(p, k, r) + noise[i]
    theta = np.ascontiguousarray(np.moveaxis(theta[:, l], 1, 0))
    return Trajectories(theta, l, "ffbs", cfg.effect_kind)


def sample_base(name, posterior, cfg, rng, evo, design=None, prior=None, dof=None):
    if name == "fest":
        return fest_sample(posterior, design, evo, prior, cfg, rng)
    if name == "fsts":
        return fsts_sample(posterior, evo, cfg, rng)
    if name == "ffbs":
        return ffbs_sample(posterior, evo, cfg, rng, dof=dof)
    raise ValidationError(f"unknown base sampler {name!r}")


def ag_sample(subject_posteriors, base, cfg, rngs, evo, design=None, prior=None):
    """Average-group trajectories: one base-sampler trajectory per subject and
    replicate, averaged over subjects. ``rngs[z]`` drives subject z."""
    subject_posteriors = list(subject_posteriors)
    rngs = list(rngs)
    if len(rngs) != len(subject_posteriors):
        raise DimensionMismatch(f"{len(rngs)} generators for {len(subject_posteriors)} subjects")
    if not subject_posteriors:
        raise EmptyTrajectorySet("AG needs at least one subject")
    shape = _unpack(subject_posteriors[0])[0].m.shape
    total = None
    for z, (post, rng) in enumerate(zip(subject_posteriors, rngs)):
        if _unpack(post)[0].m.shape != shape:
            raise DimensionMismatch(f"subject {z} does not share (T, p, q) with subject 0")
        traj = sample_base(base, post, cfg, rng, evo, design=design, prior=prior)
        total = traj.values if total is None else total + traj.values
    return Trajectories(total / len(subject_posteriors), cfg.covariate, f"ag({base})",
                        cfg.effect_kind)


def activation_evidence(trajectories, rule="all_t", joint_rule="all"):
    """Fraction of replicates whose trajectory is positive.

    ``all_t``: every time point (and every effect component) is > 0.
    ``mean_over_t``: the time-averaged trajectory is > 0 (componentwise).
    With ``joint_rule='center'`` only component 0 is inspected.
    """
    values = getattr(trajectories, "values", trajectories)
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[..., None]
    if values.shape[0] == 0:
        raise EmptyTrajectorySet("no trajectories to assess")
    if joint_rule == "center":
        values = values[..., :1]
    elif joint_rule != "all":
        raise ValidationError(f"joint_rule must be one of {JOINT_RULES}")
    if rule == "all_t":
        positive = np.all(values > 0, axis=(1, 2))
    elif rule == "mean_over_t":
        positive = np.all(values.mean(axis=1) > 0, axis=-1)
    else:
        raise ValidationError(f"positivity rule must be one of {POSITIVITY_RULES}")
    return float(positive.mean())
