"""Synthetic detection study: ROC AUC and null false-positive rate per sampler.

A group is simulated with a known active box, every voxel is analyzed with
each sampler and effect kind, and the resulting evidence maps are scored
against the truth mask. The pass thresholds are engineering targets for this
harness, not values taken from real data.
"""
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.metrics import roc_auc_score

from .cluster import VolumeMask
from .design import DesignSpec, block_track
from .group import EFFECT_KINDS
from .pipeline import FitSettings, evidence_maps_in_memory
from .samplers import SamplerConfig
from .simulate import SimSpec, simulate_group

logger = logging.getLogger(__name__)

AUC_TARGET = 0.90
FALSE_POSITIVE_TARGET = 0.05
EVIDENCE_THRESHOLD = 0.95


@dataclass(frozen=True)
class DetectionStudy:
    """Settings of the detection study. Defaults are the acceptance setup."""

    dims: tuple = (16, 16, 8)
    n_scans: int = 100
    tr_seconds: float = 2.0
    block_on: float = 20.0
    block_off: float = 20.0
    amplitude: float = 1.0
    noise_sd: float = 1.0
    spatial_rho: float = 0.3
    n_subjects: int = 8
    active_box: tuple = ((4, 4, 2), (9, 9, 5))
    n_simu: int = 200
    seed: int = 2024
    samplers: tuple = ("fest", "fsts", "ffbs", "ag")
    ag_base: str = "ffbs"
    effect_kinds: tuple = EFFECT_KINDS
    positivity_rule: str = "mean_over_t"
    joint_rule: str = "all"
    fit: FitSettings = field(default_factory=FitSettings)

    def sim_spec(self):
        duration = self.n_scans * self.tr_seconds
        design = DesignSpec([block_track("stimulus", self.block_on, self.block_off, duration)],
                            self.tr_seconds, self.n_scans)
        return SimSpec(self.dims, design, {"box": [list(c) for c in self.active_box]},
                       amplitude=self.amplitude, noise_sd=self.noise_sd,
                       spatial_rho=self.spatial_rho, n_subjects=self.n_subjects,
                       seed=self.seed)

    def configs(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # n_simu below the recommended value is deliberate
            return [SamplerConfig(n_simu=self.n_simu, seed=self.seed, effect_kind=kind,
                                  positivity_rule=self.positivity_rule, sampler=sampler,
                                  base=self.ag_base, joint_rule=self.joint_rule)
                    for sampler in self.samplers for kind in self.effect_kinds]


@dataclass(frozen=True)
class DetectionScore:
    sampler: str
    effect_kind: str
    auc: float
    false_positive_rate: float
    n_active: int
    n_null: int

    @property
    def passed(self):
        return self.auc > AUC_TARGET and self.false_positive_rate <= FALSE_POSITIVE_TARGET


def score_map(evidence, truth, threshold=EVIDENCE_THRESHOLD):
    """ROC AUC of evidence against truth and the null fraction at or above threshold."""
    evidence = np.asarray(evidence).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    auc = float(roc_auc_score(truth, evidence))
    fpr = float(np.mean(evidence[~truth] >= threshold))
    return auc, fpr, int(truth.sum()), int((~truth).sum())


@dataclass
class StudyResult:
    study: DetectionStudy
    scores: list
    maps: dict
    truth: np.ndarray
    seconds: float
    workers: int

    def to_json(self):
        study = asdict(self.study)
        study["fit"] = self.study.fit.to_json()
        return {
            "study": study,
            "workers": self.workers,
            "seconds": self.seconds,
            "scores": [dict(asdict(s), passed=s.passed) for s in self.scores],
        }


def run_detection_study(study=None, workers=1):
    study = study or DetectionStudy()
    sim = simulate_group(study.sim_spec())
    mask = VolumeMask.full(study.dims)
    configs = study.configs()
    start = time.perf_counter()
    maps = evidence_maps_in_memory(sim.volumes, mask, sim.design, study.fit, configs, workers)
    seconds = time.perf_counter() - start
    scores, by_name = [], {}
    for cfg, emap in zip(configs, maps):
        name = cfg.sampler if cfg.sampler != "ag" else f"ag({cfg.base})"
        scores.append(DetectionScore(name, cfg.effect_kind, *score_map(emap, sim.truth)))
        by_name[(name, cfg.effect_kind)] = emap
    return StudyResult(study, scores, by_name, sim.truth, seconds, workers)
