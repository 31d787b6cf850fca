"""Synthetic group fMRI data with known active voxels.

Each subject gets its own amplitude ``a_z ~ N(amplitude, subject_amplitude_sd^2)``
(in signal units, independent of ``noise_sd``) and, at active voxels, the
series ``baseline + a_z x(t) + noise``, where
``x`` is the first stimulus regressor of the design. Noise has standard
deviation ``noise_sd`` and exchangeable spatial correlation ``rho``:
``noise = noise_sd * (sqrt(rho) shared_t + sqrt(1 - rho) own_vt)`` with one
shared series per subject. It is white in time unless ``ar1`` is set.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .design import DesignSpec, assemble_design
from .errors import RegionOutsideVolume, ValidationError


@dataclass(frozen=True)
class SimSpec:
    dims: tuple
    design: DesignSpec
    active_region: dict = field(default_factory=lambda: {"box": [[0, 0, 0], [1, 1, 1]]})
    amplitude: float = 1.0
    noise_sd: float = 1.0
    spatial_rho: float = 0.0
    n_subjects: int = 1
    subject_amplitude_sd: float = 0.0
    ar1: float = 0.0
    baseline: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError(f"dims must be three positive integers, got {self.dims}")
        if not np.isfinite(self.amplitude):
            raise ValidationError("amplitude must be finite")
        if not self.noise_sd > 0:
            raise ValidationError("noise_sd must be > 0")
        if not 0 <= self.spatial_rho < 1:
            raise ValidationError("spatial_rho must lie in [0, 1)")
        if not -1 < self.ar1 < 1:
            raise ValidationError("ar1 must lie in (-1, 1)")
        if self.n_subjects < 1:
            raise ValidationError("n_subjects must be >= 1")
        if self.subject_amplitude_sd < 0:
            raise ValidationError("subject_amplitude_sd must be >= 0")

    @property
    def n_scans(self):
        return self.design.n_scans


def region_mask(dims, region):
    """Boolean volume for ``{"box": [lo, hi]}`` (inclusive corners) or
    ``{"sphere": {"center": c, "radius": r}}`` (Euclidean, in voxels)."""
    dims = tuple(dims)
    if "box" in region:
        lo, hi = (np.asarray(c, dtype=int) for c in region["box"])
        if np.any(lo < 0) or np.any(hi >= dims) or np.any(lo > hi):
            raise RegionOutsideVolume(f"box {lo.tolist()}..{hi.tolist()} is not inside {dims}")
        mask = np.zeros(dims, dtype=bool)
        mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
        return mask
    if "sphere" in region:
        center = np.asarray(region["sphere"]["center"], dtype=float)
        radius = float(region["sphere"]["radius"])
        if np.any(center - radius < 0) or np.any(center + radius > np.asarray(dims) - 1):
            raise RegionOutsideVolume(f"sphere at {center.tolist()} r={radius} is not inside {dims}")
        grid = np.indices(dims).astype(float)
        dist2 = sum((grid[i] - center[i]) ** 2 for i in range(3))
        return dist2 <= radius**2
    raise ValidationError(f"active_region must define 'box' or 'sphere', got {sorted(region)}")


def _ar1(white, phi):
    if phi == 0:
        return white
    # stationary start, unit marginal variance
    out = signal.lfilter([np.sqrt(1 - phi**2)], [1, -phi], white, axis=-1,
                         zi=white[..., :1] * phi)[0]
    return out


@dataclass(frozen=True)
class SimResult:
    volumes: list        # per subject, float32 (nx, ny, nz, T)
    truth: np.ndarray    # bool (nx, ny, nz)
    amplitudes: np.ndarray
    design: object


def simulate_subject(spec, regressor, truth, amplitude, rng):
    nx, ny, nz = spec.dims
    n_scans = regressor.size
    rho = spec.spatial_rho
    own = _ar1(rng.standard_normal((nx, ny, nz, n_scans)), spec.ar1)
    shared = _ar1(rng.standard_normal(n_scans), spec.ar1)
    data = spec.noise_sd * (np.sqrt(rho) * shared + np.sqrt(1 - rho) * own)
    data += spec.baseline
    data[truth] += amplitude * regressor
    return data.astype(np.float32)


def simulate_group(spec):
    truth = region_mask(spec.dims, spec.active_region)
    design = assemble_design(spec.design)
    stim = design.stimulus_indices()
    if not stim:
        raise ValidationError("simulation design needs at least one stimulus track")
    regressor = design.columns[:, stim[0]]
    root = np.random.SeedSequence(spec.seed)
    amp_rng, *subject_seeds = root.spawn(spec.n_subjects + 1)
    amplitudes = spec.amplitude + spec.subject_amplitude_sd * np.random.default_rng(
        amp_rng).standard_normal(spec.n_subjects)
    volumes = [simulate_subject(spec, regressor, truth, a, np.random.default_rng(ss))
               for a, ss in zip(amplitudes, subject_seeds)]
    return SimResult(volumes, truth, amplitudes, design)
