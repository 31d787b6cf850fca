"""Voxel-parallel orchestration: fit subjects, combine them, map evidence.

Voxels are independent work items. They are split into contiguous chunks,
processed by a process pool (or in-process when ``workers == 1``) and merged
back in voxel order. Every random draw for a voxel comes from
:func:`mdlmgroup.samplers.voxel_rng` keyed by the voxel's linear index in the
volume, so results do not depend on the worker count or on scheduling.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cluster import build_cluster, extract_series
from .design import DesignMatrix
from .dumps import (KIND_GROUP, KIND_SUBJECT, DumpHeader, DumpReader, DumpWriter,
                    VoxelPosterior)
from .errors import DimensionMismatch, GridMismatch, ValidationError
from .group import GroupPosterior, combine_sequences
from .mdlm_filter import NORMAL_APPROX_MIN_DOF, EvolutionSpec, PriorSpec, filter_series
from .samplers import activation_evidence, ag_sample, sample_base, voxel_rng

logger = logging.getLogger(__name__)

WORKERS_ENV = "MDLMGROUP_WORKERS"


def default_workers():
    """Worker count from ``$MDLMGROUP_WORKERS``, else the available CPUs."""
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValidationError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if value < 1:
            raise ValidationError(f"{WORKERS_ENV} must be >= 1, got {value}")
        return value
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def voxel_index(voxel, dims):
    """Row-major linear index of ``voxel``; the RNG key of that voxel."""
    return int(np.ravel_multi_index(tuple(voxel), tuple(dims)))


def _chunks(n, workers, per_worker=4):
    if n == 0:
        return []
    size = max(1, -(-n // (workers * per_worker)))
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def run_chunks(task, n_items, workers, initializer, initargs):
    """Apply ``task(range)`` to contiguous chunks of ``range(n_items)``.

    ``initializer(*initargs)`` prepares per-process state. Results come back
    as a flat list in item order.
    """
    workers = max(1, int(workers))
    chunks = _chunks(n_items, workers)
    if workers == 1 or len(chunks) <= 1:
        initializer(*initargs)
        parts = [task(c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=initializer,
                                 initargs=initargs) as pool:
            parts = list(pool.map(task, chunks))
    return [item for part in parts for item in part]


# per-process state set by the initializers below
_STATE = {}


@dataclass(frozen=True)
class FitSettings:
    prior: PriorSpec = PriorSpec()
    evolution: EvolutionSpec = EvolutionSpec()
    radius: int = 1

    def to_json(self):
        return {"prior": self.prior.to_json(), "evolution": self.evolution.to_json(),
                "radius": self.radius}

    @classmethod
    def from_json(cls, obj):
        return cls(PriorSpec.from_json(obj["prior"]), EvolutionSpec.from_json(obj["evolution"]),
                   int(obj["radius"]))


@dataclass(frozen=True)
class FitReport:
    n_voxels: int
    n_degraded: int
    final_dof: float


def _init_fit(data, mask, design, settings):
    _STATE.update(data=data, mask=mask, design=design, settings=settings,
                  voxels=mask.voxels())


def _fit_task(chunk):
    st = _STATE
    settings = st["settings"]
    out = []
    for i in chunk:
        spec = build_cluster(st["mask"], st["voxels"][i], settings.radius)
        series = extract_series(st["data"], spec)
        fo = filter_series(series.values, st["design"], settings.evolution, settings.prior)
        out.append(VoxelPosterior(spec.center, spec.members, fo.posterior, fo.e, fo.qf))
    return out


def fit_subject(volume, mask, design, settings, path, workers=1, sidecar=None):
    """Filter every voxel cluster of one subject and write a subject dump.

    Voxels whose final degrees of freedom fall below the normal-approximation
    threshold are counted in the returned report.
    """
    data = volume.data if hasattr(volume, "tr_seconds") else np.asarray(volume)
    if data.shape[:3] != mask.dims:
        raise GridMismatch(f"volume grid {data.shape[:3]} differs from mask grid {mask.dims}")
    if data.shape[3] != design.n_scans:
        raise GridMismatch(f"volume has {data.shape[3]} scans, design has {design.n_scans}")
    voxels = mask.voxels()
    records = run_chunks(_fit_task, len(voxels), workers, _init_fit,
                         (data, mask, design, settings))
    q_max = max(r.sequence.q for r in records)
    header = DumpHeader(KIND_SUBJECT, mask.dims, design.p, q_max, design.n_scans, len(records))
    sidecar = dict(sidecar or {}, fit=settings.to_json())
    with DumpWriter(path, header, sidecar) as writer:
        for rec in records:
            writer.write(rec)
    final = float(records[0].sequence.n[-1])
    degraded = sum(1 for r in records if r.sequence.n[-1] < NORMAL_APPROX_MIN_DOF)
    if degraded:
        logger.warning("%d of %d voxels end with n < %d; their normal approximation is degraded",
                       degraded, len(records), NORMAL_APPROX_MIN_DOF)
    return FitReport(len(records), degraded, final)


def group_dumps(paths, out_path, subject_ids=None, sidecar=None):
    """Combine aligned subject dumps voxel by voxel into a group dump."""
    paths = [str(p) for p in paths]
    if not paths:
        raise ValidationError("at least one subject dump is required")
    ids = list(subject_ids) if subject_ids is not None else paths
    readers = [DumpReader(p) for p in paths]
    try:
        ref = readers[0].header
        for name, rd in zip(ids, readers):
            hd = rd.header
            if hd.is_group:
                raise ValidationError(f"{name} is a group dump, expected a subject dump")
            for field in ("dims", "p", "n_scans", "n_records", "q_max"):
                if getattr(hd, field) != getattr(ref, field):
                    raise DimensionMismatch(f"subject {name}: {field} = {getattr(hd, field)}, "
                                            f"expected {getattr(ref, field)}")
        fit = readers[0].sidecar.get("fit")
        for name, rd in zip(ids, readers):
            if rd.sidecar.get("fit") != fit:
                raise DimensionMismatch(f"subject {name} was fitted with different settings")
        writer = None
        pooled = None
        for idx in range(ref.n_records):
            recs = [rd.record(idx) for rd in readers]
            for name, rec in zip(ids, recs):
                if rec.voxel != recs[0].voxel or rec.members != recs[0].members:
                    raise DimensionMismatch(f"subject {name}: record {idx} is voxel {rec.voxel}, "
                                            f"expected {recs[0].voxel} (masks differ)")
            gp = combine_sequences([r.sequence for r in recs], subject_ids=ids)
            if writer is None:
                pooled = gp.pooled_dof
                header = DumpHeader(KIND_GROUP, ref.dims, ref.p, ref.q_max, ref.n_scans,
                                    ref.n_records, len(paths), pooled, tuple(ids))
                side = dict(sidecar or {}, fit=fit,
                            geometry=readers[0].sidecar.get("geometry"))
                writer = DumpWriter(out_path, header, side)
            writer.write(VoxelPosterior(recs[0].voxel, recs[0].members, gp.sequence))
        writer.close()
    finally:
        for rd in readers:
            rd.close()
    return len(paths), pooled


@dataclass(frozen=True)
class MapSettings:
    """What to sample and how: a :class:`SamplerConfig` plus fit settings."""

    sampler_cfg: object
    fit: FitSettings
    design: DesignMatrix = None


def _init_map(paths, dims, settings):
    _STATE.clear()
    _STATE.update(readers=[DumpReader(p) for p in paths], dims=dims, settings=settings)


def voxel_evidence(voxel_key, subject_sequences, group_posterior, settings):
    """Evidence for one voxel given its (subject or group) posteriors."""
    cfg = settings.sampler_cfg
    evo, prior, design = settings.fit.evolution, settings.fit.prior, settings.design
    if cfg.sampler == "ag":
        rngs = [voxel_rng(cfg.seed, voxel_key, z) for z in range(len(subject_sequences))]
        traj = ag_sample(subject_sequences, cfg.base, cfg, rngs, evo, design=design, prior=prior)
    else:
        traj = sample_base(cfg.sampler, group_posterior, cfg, voxel_rng(cfg.seed, voxel_key),
                           evo, design=design, prior=prior)
    return activation_evidence(traj, cfg.positivity_rule, cfg.joint_rule)


def _map_task(chunk):
    st = _STATE
    settings, readers = st["settings"], st["readers"]
    out = []
    for i in chunk:
        recs = [rd.record(i) for rd in readers]
        voxel = recs[0].voxel
        key = voxel_index(voxel, st["dims"])
        if readers[0].header.is_group:
            hd = readers[0].header
            gp = GroupPosterior(recs[0].sequence, hd.n_g, hd.pooled_dof, hd.subject_ids)
            out.append((voxel, voxel_evidence(key, None, gp, settings)))
        else:
            seqs = [r.sequence for r in recs]
            gp = combine_sequences(seqs) if settings.sampler_cfg.sampler != "ag" else None
            out.append((voxel, voxel_evidence(key, seqs, gp, settings)))
    return out


def evidence_map(paths, settings, workers=1):
    """Evidence volume from one group dump, or from subject dumps (AG).

    Voxels outside the mask are 0. Returns ``(map, n_g)``.
    """
    paths = [str(p) for p in paths]
    if not paths:
        raise ValidationError("no dumps given")
    readers = [DumpReader(p) for p in paths]
    try:
        headers = [rd.header for rd in readers]
    finally:
        for rd in readers:
            rd.close()
    ref = headers[0]
    cfg = settings.sampler_cfg
    if ref.is_group:
        if len(paths) > 1:
            raise ValidationError("give either one group dump or several subject dumps")
        if cfg.sampler == "ag":
            raise ValidationError("AG needs the per-subject dumps, not a group dump")
        n_g = ref.n_g
    else:
        for path, hd in zip(paths, headers):
            if hd.is_group or (hd.dims, hd.p, hd.n_scans, hd.n_records) != (
                    ref.dims, ref.p, ref.n_scans, ref.n_records):
                raise DimensionMismatch(f"subject {path} does not match {paths[0]}")
        n_g = len(paths)
    if settings.design is not None and settings.design.columns.shape != (ref.n_scans, ref.p):
        raise ValidationError(f"design is {settings.design.columns.shape}, dumps have "
                              f"(T, p) = {(ref.n_scans, ref.p)}")
    results = run_chunks(_map_task, ref.n_records, workers, _init_map,
                         (paths, ref.dims, settings))
    out = np.zeros(ref.dims, dtype=np.float64)
    for voxel, value in results:
        out[voxel] = value
    return out, n_g


def _init_study(volumes, mask, design, settings, configs):
    _STATE.clear()
    _STATE.update(volumes=volumes, mask=mask, design=design, settings=settings,
                  configs=configs, voxels=mask.voxels())


def _study_task(chunk):
    st = _STATE
    fit = st["settings"]
    out = []
    for i in chunk:
        voxel = st["voxels"][i]
        spec = build_cluster(st["mask"], voxel, fit.radius)
        ys = np.stack([extract_series(v, spec).values for v in st["volumes"]])
        seqs = [fo.posterior for fo in filter_series(ys, st["design"], fit.evolution, fit.prior)]
        gp = combine_sequences(seqs)
        key = voxel_index(voxel, st["mask"].dims)
        values = []
        for cfg in st["configs"]:
            ms = MapSettings(cfg, fit, st["design"])
            values.append(voxel_evidence(key, seqs, gp, ms))
        out.append((voxel, values))
    return out


def evidence_maps_in_memory(volumes, mask, design, settings, configs, workers=1):
    """Fit, combine and map several sampler configurations without dumps.

    Streams voxel by voxel so memory stays bounded by one cluster's
    posteriors. Returns one evidence volume per entry of ``configs``.
    """
    volumes = [v if isinstance(v, np.ndarray) else v.data for v in volumes]
    for z, vol in enumerate(volumes):
        if vol.shape[:3] != mask.dims or vol.shape[3] != design.n_scans:
            raise GridMismatch(f"subject {z} has shape {vol.shape}, expected "
                               f"{mask.dims + (design.n_scans,)}")
    results = run_chunks(_study_task, len(mask.voxels()), workers, _init_study,
                         (volumes, mask, design, settings, list(configs)))
    maps = np.zeros((len(configs),) + mask.dims)
    for voxel, values in results:
        maps[(slice(None),) + voxel] = values
    return list(maps)
