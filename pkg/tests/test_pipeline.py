import warnings

import numpy as np
import pytest

from mdlmgroup.cluster import VolumeMask
from mdlmgroup.design import DesignSpec, assemble_design, block_track
from mdlmgroup.dumps import DumpReader
from mdlmgroup.errors import DimensionMismatch, GridMismatch, ValidationError
from mdlmgroup.mdlm_filter import PriorSpec
from mdlmgroup.pipeline import (FitSettings, MapSettings, default_workers, evidence_map,
                                evidence_maps_in_memory, fit_subject, group_dumps, voxel_index)
from mdlmgroup.samplers import SamplerConfig
from mdlmgroup.simulate import SimSpec, simulate_group


def make_sim(n_scans=40, n_subjects=3, dims=(4, 4, 3), seed=1):
    ds = DesignSpec([block_track("s", 10, 10, 2.0 * n_scans)], 2.0, n_scans)
    return simulate_group(SimSpec(dims, ds, {"box": [[1, 1, 1], [2, 2, 1]]}, amplitude=1.5,
                                  n_subjects=n_subjects, seed=seed))


def cfg(**kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return SamplerConfig(**dict(dict(n_simu=100, seed=3), **kw))


@pytest.fixture(scope="module")
def dumps(tmp_path_factory):
    root = tmp_path_factory.mktemp("dumps")
    sim = make_sim()
    mask = VolumeMask.full(sim.volumes[0].shape[:3])
    paths = []
    for z, vol in enumerate(sim.volumes):
        path = root / f"sub{z}.dump"
        fit_subject(vol, mask, sim.design, FitSettings(), path)
        paths.append(path)
    return sim, mask, paths, root


def test_fit_dump_contents(dumps):
    sim, mask, paths, _ = dumps
    with DumpReader(paths[0]) as rd:
        assert rd.header.n_records == 48 and rd.header.q_max == 27
        rec = rd.record(0)
        assert rec.voxel == (0, 0, 0) and rec.sequence.q == 8
        assert rec.sequence.n[-1] == PriorSpec().n0 + 40
        assert rd.sidecar["fit"] == FitSettings().to_json()


def test_single_voxel_mask_and_degraded_count(tmp_path):
    sim = make_sim(n_scans=35, n_subjects=1)
    inc = np.zeros((4, 4, 3), bool)
    inc[2, 2, 1] = True
    report = fit_subject(sim.volumes[0], VolumeMask(inc), sim.design, FitSettings(),
                         tmp_path / "one.dump")
    assert report.n_voxels == 1 and report.n_degraded == 0 and report.final_dof == 36
    short = make_sim(n_scans=20, n_subjects=1)
    report = fit_subject(short.volumes[0], VolumeMask(inc), short.design, FitSettings(),
                         tmp_path / "short.dump")
    assert report.n_degraded == 1


def test_fit_grid_checks(tmp_path):
    sim = make_sim()
    with pytest.raises(GridMismatch):
        fit_subject(sim.volumes[0], VolumeMask.full((4, 4, 4)), sim.design, FitSettings(),
                    tmp_path / "x.dump")
    other = assemble_design(DesignSpec([block_track("s", 10, 10, 60.0)], 2.0, 30))
    with pytest.raises(GridMismatch):
        fit_subject(sim.volumes[0], VolumeMask.full((4, 4, 3)), other, FitSettings(),
                    tmp_path / "x.dump")


def test_group_of_one_is_identity(dumps, tmp_path):
    _, _, paths, _ = dumps
    group_dumps(paths[:1], tmp_path / "g1.dump")
    with DumpReader(paths[0]) as a, DumpReader(tmp_path / "g1.dump") as g:
        assert g.header.n_g == 1
        for ra, rg in zip(a, g):
            for f in ("m", "c", "s", "n"):
                assert getattr(ra.sequence, f).tobytes() == getattr(rg.sequence, f).tobytes()


def test_four_identical_dumps_quarter_row_cov(dumps, tmp_path):
    _, _, paths, _ = dumps
    n_g, pooled = group_dumps([paths[0]] * 4, tmp_path / "g4.dump", subject_ids="abcd")
    assert n_g == 4
    with DumpReader(paths[0]) as a, DumpReader(tmp_path / "g4.dump") as g:
        assert g.header.pooled_dof == pooled == 4 * 41 - 3
        ra, rg = a.record(5), g.record(5)
        np.testing.assert_allclose(rg.sequence.c, ra.sequence.c / 4, rtol=1e-15)
        np.testing.assert_allclose(rg.sequence.s, ra.sequence.s / 4, rtol=1e-15)


def test_group_mismatch_names_subject(dumps, tmp_path):
    _, _, paths, _ = dumps
    sim = make_sim(n_scans=30, n_subjects=1)
    odd = tmp_path / "odd.dump"
    fit_subject(sim.volumes[0], VolumeMask.full((4, 4, 3)), sim.design, FitSettings(), odd)
    with pytest.raises(DimensionMismatch, match="odd"):
        group_dumps([paths[0], odd], tmp_path / "bad.dump", subject_ids=["s0", "odd"])


def test_map_is_worker_invariant_and_bounded(dumps, tmp_path):
    _, _, paths, _ = dumps
    group_dumps(paths, tmp_path / "g.dump")
    settings = MapSettings(cfg(sampler="fsts", positivity_rule="mean_over_t"), FitSettings())
    one, n_g = evidence_map([tmp_path / "g.dump"], settings, workers=1)
    two, _ = evidence_map([tmp_path / "g.dump"], settings, workers=2)
    assert n_g == 3 and one.tobytes() == two.tobytes()
    assert one.min() >= 0 and one.max() <= 1
    assert one[1, 1, 1] > 0.9


def test_ag_single_subject_map_equals_base_map(dumps, tmp_path):
    _, _, paths, _ = dumps
    group_dumps(paths[:1], tmp_path / "g1.dump")
    base = MapSettings(cfg(sampler="ffbs"), FitSettings())
    ag = MapSettings(cfg(sampler="ag", base="ffbs"), FitSettings())
    a, _ = evidence_map([tmp_path / "g1.dump"], base)
    b, _ = evidence_map(paths[:1], ag)
    assert a.tobytes() == b.tobytes()


def test_map_input_checks(dumps, tmp_path):
    _, _, paths, _ = dumps
    group_dumps(paths, tmp_path / "g.dump")
    with pytest.raises(ValidationError):
        evidence_map([tmp_path / "g.dump"], MapSettings(cfg(sampler="ag"), FitSettings()))
    with pytest.raises(ValidationError):
        evidence_map([], MapSettings(cfg(), FitSettings()))


def test_subject_dumps_map_equals_group_map(dumps, tmp_path):
    _, _, paths, _ = dumps
    group_dumps(paths, tmp_path / "g.dump")
    settings = MapSettings(cfg(sampler="ffbs"), FitSettings())
    a, _ = evidence_map([tmp_path / "g.dump"], settings)
    b, _ = evidence_map(paths, settings)
    assert a.tobytes() == b.tobytes()


def test_in_memory_maps_match_dump_pipeline(dumps, tmp_path):
    sim, mask, paths, _ = dumps
    group_dumps(paths, tmp_path / "g.dump")
    configs = [cfg(sampler="fest"), cfg(sampler="ag", base="fsts", effect_kind="joint")]
    mem = evidence_maps_in_memory(sim.volumes, mask, sim.design, FitSettings(), configs)
    via_dump, _ = evidence_map([tmp_path / "g.dump"],
                               MapSettings(configs[0], FitSettings(), sim.design))
    via_subjects, _ = evidence_map(paths, MapSettings(configs[1], FitSettings()))
    assert mem[0].tobytes() == via_dump.tobytes()
    assert mem[1].tobytes() == via_subjects.tobytes()


def test_voxel_index_and_workers(monkeypatch):
    assert voxel_index((1, 2, 3), (4, 5, 6)) == 1 * 30 + 2 * 6 + 3
    monkeypatch.setenv("MDLMGROUP_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("MDLMGROUP_WORKERS", "zero")
    with pytest.raises(ValidationError):
        default_workers()
    monkeypatch.delenv("MDLMGROUP_WORKERS")
    assert default_workers() >= 1
