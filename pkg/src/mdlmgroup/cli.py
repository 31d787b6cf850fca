"""Command-line interface: ``mdlmgroup {simulate,fit,group,map,inspect,study}``.

Every option can also come from a JSON file given with ``--config``; keys are
the option names with dashes replaced by underscores, and options given on
the command line win. Exit status is 0 on success, 1 for invalid input and
2 for runtime or numerical failures.
"""
import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import VolumeMask
from .design import (DesignMatrix, DesignSpec, HrfParams, StimulusTrack, assemble_design,
                     block_track)
from .dumps import DumpReader
from .errors import ConfigError, DesignMismatch, GridMismatch, MdlmError, ValidationError
from .group import EFFECT_KINDS
from .io_volumes import Volume4D, read_events, read_mask, read_nifti1, write_nifti1
from .mdlm_filter import EvolutionSpec, PriorSpec
from .pipeline import (FitSettings, MapSettings, default_workers, evidence_map, fit_subject,
                       group_dumps)
from .samplers import BASE_SAMPLERS, JOINT_RULES, POSITIVITY_RULES, SAMPLERS, SamplerConfig
from .simulate import SimSpec, simulate_group

logger = logging.getLogger("mdlmgroup")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command, config, inputs=(), outputs=(), **extra):
    """Record what a command read, how it was configured and what it wrote."""
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
    }
    manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)
    return manifest


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _config_echo(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


# --- simulation spec files -------------------------------------------------

def _need(obj, key, path):
    if key not in obj:
        raise ConfigError(f"{path}{key}", "missing required field")
    return obj[key]


def _number(obj, key, path, default=None, kind=float):
    if key not in obj:
        if default is None:
            raise ConfigError(f"{path}{key}", "missing required field")
        return default
    try:
        return kind(obj[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{path}{key}", f"expected a number, got {obj[key]!r}") from None


def _tracks_from_json(items, tr, n_scans):
    if not isinstance(items, list) or not items:
        raise ConfigError("stimuli", "expected a non-empty list")
    tracks = []
    for i, item in enumerate(items):
        path = f"stimuli[{i}]."
        label = str(item.get("label", f"stimulus{i}"))
        try:
            if "block" in item:
                block = item["block"]
                tracks.append(block_track(label, _number(block, "on", path + "block."),
                                          _number(block, "off", path + "block."),
                                          tr * n_scans, _number(block, "start", path, 0.0)))
            else:
                tracks.append(StimulusTrack(label, _need(item, "onsets", path),
                                            _need(item, "durations", path)))
        except ConfigError:
            raise
        except ValidationError as exc:
            raise ConfigError(path.rstrip("."), str(exc)) from None
    return tracks


def sim_spec_from_json(obj, seed=None):
    """Build a :class:`SimSpec` from a JSON object, naming bad fields by path."""
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "simulation spec must be a JSON object")
    dims = _need(obj, "dims", "")
    if not (isinstance(dims, list) and len(dims) == 3):
        raise ConfigError("dims", "expected three integers")
    tr = _number(obj, "tr_seconds", "")
    n_scans = _number(obj, "n_scans", "", kind=int)
    hrf = HrfParams(**obj["hrf"]) if "hrf" in obj else HrfParams()
    try:
        design = DesignSpec(_tracks_from_json(_need(obj, "stimuli", ""), tr, n_scans),
                            tr, n_scans, hrf)
    except ConfigError:
        raise
    except ValidationError as exc:
        raise ConfigError("n_scans", str(exc)) from None
    fields = {}
    for key in ("amplitude", "noise_sd", "spatial_rho", "subject_amplitude_sd", "ar1",
                "baseline"):
        if key in obj:
            fields[key] = _number(obj, key, "")
    if "n_subjects" in obj:
        fields["n_subjects"] = _number(obj, "n_subjects", "", kind=int)
    fields["seed"] = int(seed if seed is not None else obj.get("seed", 0))
    region = _need(obj, "active_region", "")
    try:
        return SimSpec(tuple(dims), design, region, **fields)
    except ValidationError as exc:
        raise ConfigError("<root>", str(exc)) from None


def cmd_simulate(args):
    with open(args.spec) as fh:
        obj = json.load(fh)
    spec = sim_spec_from_json(obj, args.seed)
    voxel_size = tuple(obj.get("voxel_size", (3.0, 3.0, 3.0)))
    sim = simulate_group(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for z, vol in enumerate(sim.volumes, start=1):
        path = out / f"sub-{z:02d}_bold.nii.gz"
        write_nifti1(Volume4D(vol, voxel_size, spec.design.tr_seconds), path)
        written.append(path)
    for name, data in (("truth", sim.truth), ("mask", np.ones(spec.dims, dtype=bool))):
        path = out / f"{name}.nii.gz"
        write_nifti1(Volume4D(data.astype(np.float32), voxel_size, spec.design.tr_seconds), path)
        written.append(path)
    events = out / "events.tsv"
    with open(events, "w") as fh:
        fh.write("onset\tduration\ttrial_type\n")
        rows = sorted((o, d, t.label) for t in spec.design.tracks
                      for o, d in zip(t.onsets, t.durations))
        for onset, duration, label in rows:
            fh.write(f"{onset:g}\t{duration:g}\t{label}\n")
    design_path = out / "design.json"
    sim.design.save(design_path)
    echo = out / "spec.json"
    with open(echo, "w") as fh:
        json.dump(dict(obj, seed=spec.seed), fh, indent=2, sort_keys=True)
    written += [events, design_path, echo]
    write_manifest(out / "manifest.json", "simulate", _config_echo(args), [args.spec], written,
                   seed=spec.seed, n_subjects=spec.n_subjects,
                   amplitudes=sim.amplitudes.tolist())
    logger.info("wrote %d subjects to %s", spec.n_subjects, out)
    return 0


# --- fit / group / map -------------------------------------------------------

def _fit_settings(args):
    prior = PriorSpec(m0=args.prior_m0, c0_scale=args.prior_c0, s0=args.prior_s0,
                      n0=args.prior_n0)
    return FitSettings(prior, EvolutionSpec(args.discount), args.radius)


def _load_design(args, vol):
    if args.design:
        design = DesignMatrix.load(args.design)
    elif args.events:
        tracks = read_events(args.events, merge=args.merge_events)
        design = assemble_design(DesignSpec(tracks, vol.tr_seconds, vol.dims[3]))
    else:
        raise ValidationError("fit needs --events or --design")
    if design.n_scans != vol.dims[3]:
        raise GridMismatch(f"design has {design.n_scans} scans, volume has {vol.dims[3]}")
    return design


def cmd_fit(args):
    vol = read_nifti1(args.bold)
    inputs = [args.bold]
    if args.mask:
        mask = VolumeMask(read_mask(args.mask))
        inputs.append(args.mask)
    else:
        mask = VolumeMask.full(vol.dims[:3])
    if mask.dims != vol.dims[:3]:
        raise GridMismatch(f"mask grid {mask.dims} differs from volume grid {vol.dims[:3]}")
    design = _load_design(args, vol)
    inputs += [p for p in (args.events, args.design) if p]
    settings = _fit_settings(args)
    geometry = {"voxel_size": list(vol.voxel_size), "tr_seconds": vol.tr_seconds}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # degraded voxels are counted instead
        report = fit_subject(vol, mask, design, settings, args.out, workers=args.workers,
                             sidecar={"geometry": geometry, "design": design.names})
    outputs = [args.out]
    if args.design_out:
        design.save(args.design_out)
        outputs.append(args.design_out)
    write_manifest(f"{args.out}.manifest.json", "fit", _config_echo(args), inputs, outputs,
                   n_voxels=report.n_voxels, degraded_voxels=report.n_degraded,
                   final_dof=report.final_dof)
    print(f"fitted {report.n_voxels} voxels, final dof {report.final_dof:g}, "
          f"{report.n_degraded} degraded normal approximations")
    return 0


def cmd_group(args):
    ids = args.ids or [Path(p).name for p in args.dumps]
    if len(ids) != len(args.dumps):
        raise ValidationError(f"{len(ids)} ids for {len(args.dumps)} dumps")
    n_g, pooled = group_dumps(args.dumps, args.out, subject_ids=ids)
    write_manifest(f"{args.out}.manifest.json", "group", _config_echo(args), args.dumps,
                   [args.out], n_g=n_g, pooled_dof=pooled, subjects=ids)
    print(f"combined {n_g} subjects, pooled dof {pooled:g}")
    return 0


def cmd_map(args):
    if bool(args.group) == bool(args.subjects):
        raise ValidationError("give exactly one of --group or --subjects")
    paths = [args.group] if args.group else list(args.subjects)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # small n_simu is recorded in the manifest
        cfg = SamplerConfig(n_simu=args.n_simu, seed=args.seed, effect_kind=args.effect,
                            positivity_rule=args.rule, sampler=args.sampler, base=args.base,
                            covariate=args.covariate, joint_rule=args.joint_rule)
    uses_fest = cfg.sampler == "fest" or (cfg.sampler == "ag" and cfg.base == "fest")
    design = None
    if uses_fest:
        if not args.design:
            raise DesignMismatch("FEST refilters through the design shared by all subjects; "
                                 "pass it with --design")
        design = DesignMatrix.load(args.design)
    with DumpReader(paths[0]) as rd:
        side = rd.sidecar
    if "fit" not in side:
        raise ValidationError(f"{paths[0]} has no fit settings sidecar")
    settings = MapSettings(cfg, FitSettings.from_json(side["fit"]), design)
    emap, n_g = evidence_map(paths, settings, workers=args.workers)
    geometry = side.get("geometry") or {}
    write_nifti1(Volume4D(emap.astype(np.float32), geometry.get("voxel_size", (1.0, 1.0, 1.0)),
                          geometry.get("tr_seconds", 1.0)), args.out)
    above = int(np.sum(emap >= args.threshold))
    inputs = paths + ([args.design] if design is not None else [])
    write_manifest(f"{args.out}.manifest.json", "map", _config_echo(args), inputs, [args.out],
                   sampler=cfg.to_json(), n_g=n_g, fit=side["fit"], threshold=args.threshold,
                   voxels_at_or_above_threshold=above)
    print(f"{above} voxels with evidence >= {args.threshold:g}")
    return 0


# --- inspect / study ---------------------------------------------------------

def cmd_inspect(args):
    path = args.path
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"MDLM":
        with DumpReader(path) as rd:
            hd = rd.header
            info = {"kind": "group" if hd.is_group else "subject", "dims": hd.dims, "p": hd.p,
                    "q_max": hd.q_max, "n_scans": hd.n_scans, "n_records": hd.n_records}
            if hd.is_group:
                info.update(n_g=hd.n_g, pooled_dof=hd.pooled_dof, subjects=hd.subject_ids)
            info["sidecar"] = rd.sidecar
    elif head[:1] in (b"{", b"["):
        with open(path) as fh:
            info = json.load(fh)
    else:
        vol = read_nifti1(path)
        info = {"dims": vol.dims, "voxel_size": vol.voxel_size, "tr_seconds": vol.tr_seconds,
                "min": float(vol.data.min()), "max": float(vol.data.max())}
    print(json.dumps(info, indent=2, sort_keys=True, default=_jsonable))
    return 0


def cmd_study(args):
    from .study import DetectionStudy, run_detection_study

    study = DetectionStudy(n_simu=args.n_simu, seed=args.seed, ag_base=args.base,
                           fit=FitSettings(evolution=EvolutionSpec(args.discount)))
    result = run_detection_study(study, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = result.to_json()
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_jsonable)
    for (name, kind), emap in result.maps.items():
        safe = name.replace("(", "-").replace(")", "")
        write_nifti1(Volume4D(emap.astype(np.float32)), out / f"evidence_{safe}_{kind}.nii.gz")
    for s in result.scores:
        print(f"{'PASS' if s.passed else 'FAIL'} {s.sampler:9s} {s.effect_kind:16s} "
              f"auc={s.auc:.3f} null_fp={s.false_positive_rate:.3f}")
    print(f"{result.seconds:.1f} s on {result.workers} worker(s)")
    return 0


# --- argument parsing --------------------------------------------------------

def _add_common(p, seed=False):
    p.add_argument("--config", help="JSON file with option defaults; flags win")
    p.add_argument("--workers", type=int, default=None,
                   help="process count (default: $MDLMGROUP_WORKERS or the CPU count)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _add_sampler_flags(p):
    p.add_argument("--sampler", choices=SAMPLERS, default="fsts")
    p.add_argument("--base", choices=BASE_SAMPLERS, default="ffbs",
                   help="per-subject sampler used by ag")
    p.add_argument("--effect", choices=EFFECT_KINDS, default="marginal")
    p.add_argument("--rule", choices=POSITIVITY_RULES, default="all_t")
    p.add_argument("--joint-rule", choices=JOINT_RULES, default="all")
    p.add_argument("--n-simu", type=int, default=1000)
    p.add_argument("--covariate", type=int, default=1,
                   help="design column to assess (0 is the intercept)")
    p.add_argument("--threshold", type=float, default=0.95)


def build_parser():
    parser = argparse.ArgumentParser(prog="mdlmgroup", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a synthetic group")
    _add_common(p, seed=True)
    p.set_defaults(seed=None)
    p.add_argument("--spec", required=True, help="simulation spec (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="filter every voxel of one subject")
    _add_common(p)
    p.add_argument("--bold", required=True)
    p.add_argument("--mask")
    p.add_argument("--events", help="tab-separated onset/duration/trial_type file")
    p.add_argument("--merge-events", action="store_true",
                   help="merge all trial types into one regressor")
    p.add_argument("--design", help="design matrix JSON (instead of --events)")
    p.add_argument("--design-out", help="also write the design matrix used")
    p.add_argument("--discount", type=float, default=0.95)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--prior-m0", type=float, default=0.0)
    p.add_argument("--prior-c0", type=float, default=100.0)
    p.add_argument("--prior-s0", type=float, default=1.0)
    p.add_argument("--prior-n0", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("group", help="combine subject dumps")
    _add_common(p)
    p.add_argument("--dumps", nargs="+", required=True)
    p.add_argument("--ids", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("map", help="estimate an activation-evidence map")
    _add_common(p, seed=True)
    p.add_argument("--group", help="group dump")
    p.add_argument("--subjects", nargs="+", help="subject dumps (required by ag)")
    p.add_argument("--design", help="shared design matrix JSON (required by fest)")
    _add_sampler_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("inspect", help="print a dump header, volume header or manifest")
    _add_common(p)
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("study", help="run the synthetic detection study")
    _add_common(p, seed=True)
    p.set_defaults(seed=2024)
    p.add_argument("--n-simu", type=int, default=200)
    p.add_argument("--base", choices=BASE_SAMPLERS, default="ffbs")
    p.add_argument("--discount", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"{args.config} is not valid JSON: {exc}") from None
        if not isinstance(overrides, dict):
            raise ConfigError("<root>", "config file must hold a JSON object")
        known = set(vars(args)) - {"func", "config", "command"}
        for key in overrides:
            if key not in known:
                raise ConfigError(key, f"unknown option for '{args.command}'")
        # reparse with the file as defaults so explicit flags still win
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        subparser.set_defaults(**overrides)
        args = parser.parse_args(argv)
    if args.workers is None:
        args.workers = default_workers()
    if args.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except MdlmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
