"""Group posterior and the three effect distributions.

Subject posteriors, each approximated by ``N_pq[m, C, S]``, are combined into
the distribution of the average activation::

    N_pq[ (1/N) sum m,  (1/N^2) sum C,  (1/N^2) sum S ]

Effects for covariate ``l`` are linear functionals of row ``l`` of ``Theta``.
Writing them as ``Theta[l, :] @ P`` for a q x r column projection ``P``, the
matrix-normal structure ``cov(vec Theta) = S kron C`` gives
``N_r(m[l, :] @ P, C[l, l] * P' S P)``:

* marginal: ``P = e_0`` (the cluster center, column 0);
* average_cluster: ``P = 1/q`` (mean over the cluster);
* joint: ``P = I_q``.
"""
from dataclasses import dataclass

import numpy as np

from .distributions import MatrixNormalParams, symmetrize
from .errors import DimensionMismatch, EmptyGroup, IndexOutOfRange, ValidationError
from .mdlm_filter import PosteriorSequence

EFFECT_KINDS = ("marginal", "average_cluster", "joint")


def _canonical_sum(stack):
    # sorting along the subject axis makes the sum independent of subject order
    return np.sort(stack, axis=0).sum(axis=0)


def combine_group(subject_params):
    """Average-activation posterior from per-subject normal approximations."""
    subject_params = list(subject_params)
    if not subject_params:
        raise EmptyGroup("cannot combine an empty group")
    shape = subject_params[0].shape
    for i, sp in enumerate(subject_params):
        if sp.shape != shape:
            raise DimensionMismatch(f"subject {i} has shape {sp.shape}, expected {shape}")
    n_g = len(subject_params)
    mean = _canonical_sum(np.stack([sp.mean for sp in subject_params])) / n_g
    row = _canonical_sum(np.stack([sp.row_cov for sp in subject_params])) / n_g**2
    col = _canonical_sum(np.stack([sp.col_cov for sp in subject_params])) / n_g**2
    return MatrixNormalParams(mean, row, col,
                              degraded=any(sp.degraded for sp in subject_params))


def pooled_dof(subject_dofs):
    """Group degrees of freedom ``sum n_z - (N_g - 1)``."""
    subject_dofs = np.asarray(subject_dofs, dtype=float)
    return subject_dofs.sum(axis=0) - (subject_dofs.shape[0] - 1)


@dataclass(frozen=True)
class GroupPosterior:
    """Per-t group moments (index 0 combines the subject priors)."""

    sequence: PosteriorSequence
    n_g: int
    pooled_dof: float
    subject_ids: tuple = ()


def combine_sequences(sequences, subject_ids=None, dof_override=None):
    """Apply :func:`combine_group` at every ``t`` of aligned subject sequences.

    The ``n`` field of the result holds the pooled degrees of freedom per t.
    """
    sequences = list(sequences)
    if not sequences:
        raise EmptyGroup("cannot combine an empty group")
    ref = sequences[0].m.shape
    for i, seq in enumerate(sequences):
        if seq.m.shape != ref:
            name = subject_ids[i] if subject_ids else i
            raise DimensionMismatch(
                f"subject {name} has (T+1, p, q) = {seq.m.shape}, expected {ref}"
            )
    n_g = len(sequences)
    m = _canonical_sum(np.stack([s.m for s in sequences])) / n_g
    c = _canonical_sum(np.stack([s.c for s in sequences])) / n_g**2
    s = _canonical_sum(np.stack([s.s for s in sequences])) / n_g**2
    n = pooled_dof([seq.n for seq in sequences])
    final_dof = float(n[-1]) if dof_override is None else float(dof_override)
    ids = tuple(subject_ids) if subject_ids is not None else tuple(str(i) for i in range(n_g))
    return GroupPosterior(PosteriorSequence(m, c, s, n), n_g, final_dof, ids)


@dataclass(frozen=True)
class EffectDistribution:
    """Normal over ``r`` effect coordinates (r = 1 for marginal / average_cluster)."""

    kind: str
    mean: np.ndarray
    cov: np.ndarray
    covariate: int

    @property
    def variance(self):
        if self.mean.size != 1:
            raise ValidationError(f"{self.kind} effect is {self.mean.size}-variate")
        return float(self.cov[0, 0])


def column_projection(kind, q):
    if kind == "marginal":
        proj = np.zeros((q, 1))
        proj[0, 0] = 1.0
        return proj
    if kind == "average_cluster":
        return np.full((q, 1), 1.0 / q)
    if kind == "joint":
        return np.eye(q)
    raise ValidationError(f"unknown effect kind {kind!r}; expected one of {EFFECT_KINDS}")


def _check_covariate(params, l):
    p = params.shape[0]
    if not 0 <= l < p:
        raise IndexOutOfRange(f"covariate {l} out of range for p = {p}")


def effect_distribution(params, l, kind):
    _check_covariate(params, l)
    proj = column_projection(kind, params.shape[1])
    mean = params.mean[l] @ proj
    cov = symmetrize(params.row_cov[l, l] * (proj.T @ params.col_cov @ proj))
    return EffectDistribution(kind, mean, cov, l)


def marginal_effect(params, l):
    """Entry ``(l, 0)``: ``N(m[l, 0], C[l, l] S[0, 0])``."""
    return effect_distribution(params, l, "marginal")


def avg_cluster_effect(params, l):
    """Cluster average of row ``l``: ``N(mean_j m[l, j], C[l, l] 1'S1 / q^2)``."""
    return effect_distribution(params, l, "average_cluster")


def joint_effect(params, l):
    """Row ``l`` as a whole: ``N_q(m[l, :], C[l, l] S)``."""
    return effect_distribution(params, l, "joint")
