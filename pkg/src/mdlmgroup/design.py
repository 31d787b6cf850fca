"""Expected-BOLD regressors and the design matrix ``F``.

A stimulus track is turned into a 0/1 boxcar on a grid oversampled
``oversample`` times per TR, convolved with a canonical double-gamma HRF,
sampled back on the scan grid and peak-normalized.
"""
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ValidationError


class TruncationWarning(UserWarning):
    """A stimulus event extends past the end of the scan window."""


@dataclass(frozen=True)
class StimulusTrack:
    label: str
    onsets: tuple = ()
    durations: tuple = ()

    def __post_init__(self):
        onsets = tuple(float(x) for x in self.onsets)
        durations = tuple(float(x) for x in self.durations)
        if len(onsets) != len(durations):
            raise ValidationError(
                f"track {self.label!r}: {len(onsets)} onsets but {len(durations)} durations"
            )
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise ValidationError(f"track {self.label!r}: onsets must be strictly increasing")
        if any(d < 0 for d in durations):
            raise ValidationError(f"track {self.label!r}: durations must be >= 0")
        object.__setattr__(self, "onsets", onsets)
        object.__setattr__(self, "durations", durations)


def merge_tracks(tracks, label="merged"):
    """Union several tracks into one (events sharing an onset keep the longest duration)."""
    events = {}
    for track in tracks:
        for onset, dur in zip(track.onsets, track.durations):
            events[onset] = max(dur, events.get(onset, 0.0))
    onsets = sorted(events)
    return StimulusTrack(label, onsets, [events[o] for o in onsets])


@dataclass(frozen=True)
class HrfParams:
    """Double-gamma HRF, in seconds (SPM canonical defaults)."""

    peak_delay: float = 6.0
    undershoot_delay: float = 16.0
    peak_dispersion: float = 1.0
    undershoot_dispersion: float = 1.0
    ratio: float = 6.0
    length: float = 32.0


def hrf_kernel(hrf, dt):
    t = np.arange(0.0, hrf.length + dt / 2, dt)
    peak = stats.gamma.pdf(t, hrf.peak_delay / hrf.peak_dispersion, scale=hrf.peak_dispersion)
    under = stats.gamma.pdf(
        t, hrf.undershoot_delay / hrf.undershoot_dispersion, scale=hrf.undershoot_dispersion
    )
    return (peak - under / hrf.ratio) * dt


def boxcar(track, tr, n_scans, oversample=16):
    """0/1 stimulus function sampled every ``tr / oversample`` seconds.

    Value is 1 on ``[onset, onset + duration)``; a zero-duration event marks
    the single nearest sample. Events running past ``n_scans * tr`` are
    truncated with a :class:`TruncationWarning`.
    """
    if oversample < 1:
        raise ValidationError("oversample must be >= 1")
    dt = tr / oversample
    n = n_scans * oversample
    window = n_scans * tr
    times = np.arange(n) * dt
    signal = np.zeros(n)
    for onset, dur in zip(track.onsets, track.durations):
        if onset + dur > window or onset >= window:
            warnings.warn(
                f"track {track.label!r}: event at {onset:g}s (duration {dur:g}s) "
                f"exceeds the {window:g}s scan window; truncated",
                TruncationWarning,
                stacklevel=2,
            )
        if dur == 0:
            idx = int(round(onset / dt))
            if 0 <= idx < n:
                signal[idx] = 1.0
        else:
            signal[(times >= onset) & (times < onset + dur)] = 1.0
    return signal


def hrf_convolve(signal, hrf, tr, oversample=16, normalize=True):
    """Convolve a high-resolution stimulus function with the HRF and sample
    it on the scan grid. With ``normalize`` the result is scaled to
    ``max |x| = 1`` (an all-zero signal stays zero)."""
    signal = np.asarray(signal, dtype=float)
    kernel = hrf_kernel(hrf, tr / oversample)
    conv = np.convolve(signal, kernel)[: signal.size]
    reg = conv[::oversample]
    if normalize:
        peak = np.max(np.abs(reg)) if reg.size else 0.0
        if peak > 0:
            reg = reg / peak
    return reg


@dataclass(frozen=True)
class DesignSpec:
    tracks: tuple
    tr_seconds: float
    n_scans: int
    hrf: HrfParams = field(default_factory=HrfParams)
    include_intercept: bool = True
    oversample: int = 16

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if self.n_scans < 1:
            raise ValidationError("n_scans must be >= 1")
        if not self.tr_seconds > 0:
            raise ValidationError("tr_seconds must be > 0")


@dataclass(frozen=True)
class DesignMatrix:
    """Regressors as a ``(T, p)`` array; row ``t`` is ``F_t``."""

    columns: np.ndarray
    names: tuple

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim != 2 or cols.shape[1] != len(self.names):
            raise ValidationError(f"design columns {cols.shape} do not match names {self.names}")
        if not np.all(np.isfinite(cols)):
            raise ValidationError("design matrix has non-finite entries")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n_scans(self):
        return self.columns.shape[0]

    @property
    def p(self):
        return self.columns.shape[1]

    def stimulus_indices(self):
        return [i for i, name in enumerate(self.names) if name != "intercept"]

    def to_json(self):
        return {"columns": [{"name": n, "values": self.columns[:, i].tolist()}
                            for i, n in enumerate(self.names)]}

    @classmethod
    def from_json(cls, obj):
        cols = obj["columns"]
        return cls(np.column_stack([c["values"] for c in cols]), [c["name"] for c in cols])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def assemble_design(spec):
    """One convolved regressor per track, with an optional constant intercept first."""
    cols, names = [], []
    if spec.include_intercept:
        cols.append(np.ones(spec.n_scans))
        names.append("intercept")
    for track in spec.tracks:
        sig = boxcar(track, spec.tr_seconds, spec.n_scans, spec.oversample)
        cols.append(hrf_convolve(sig, spec.hrf, spec.tr_seconds, spec.oversample))
        names.append(track.label)
    columns = np.column_stack(cols) if cols else np.zeros((spec.n_scans, 0))
    return DesignMatrix(columns, names)


def block_track(label, period_on, period_off, total, start=0.0):
    """Alternating on/off block design covering ``[start, total)``."""
    onsets = np.arange(start, total, period_on + period_off)
    return StimulusTrack(label, onsets, [period_on] * len(onsets))
