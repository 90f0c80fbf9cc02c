"""Command-line front end.

Exit codes: 0 success, 2 usage or invalid parameter, 3 schema, 4 numeric,
5 file IO, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import AggregationConfig, aggregate_full
from .errors import GraspForgeError, IoError, NumericError, SchemaError
from .geom import project_points
from .hand import HandPose, forward_kinematics, skin_mesh
from .heatmap import HeatmapConfig, corrupt, load_binary, render_from_image, save_binary, to_svg
from .mesh import bbox_keypoints_27
from .metrics import (METRICS_SCHEMA, ObjectModel, contact_and_penetration, pose_errors, stability_proxy,
                      symmetry_of_primitive, write_csv)
from .physics import OmegaConfig
from .sample import (CandidateSet, GeneratorConfig, NoiseSchedule, NoiseSpec, generate_hand_candidates,
                     generate_object_candidates, perturbation_sampler)
from .scenario import TEMPLATES, Scenario, build_canonical, export_meshes
from .schema_io import read_json, validate, write_json
from .solve import SolverConfig, config_hash, solve_pseudo_forces

EXIT_USAGE, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_IO = 2, 3, 4, 5
THREADS_ENV = "GRASPFORGE_THREADS"


def stage_seed(seed, stage):
    """Named 64-bit substream of the run seed."""
    h = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _threads_default():
    v = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(v))
    except ValueError:
        return 1


# ---------------------------------------------------------------- config builders

def solver_config(a) -> SolverConfig:
    return SolverConfig(lr=a.lr, phase1_steps=a.phase1_steps, phase2_steps=a.phase2_steps, mu=a.mu, n_v=a.n_v,
                        omega=OmegaConfig())


def generator_config(a) -> GeneratorConfig:
    return GeneratorConfig(n=a.n, t_f_hand=a.t_f_hand, t_f_object=a.t_f_object)


def schedule(a) -> NoiseSchedule:
    return NoiseSchedule(a.sigma_min, a.sigma_max)


def aggregation_config(a) -> AggregationConfig:
    base = SolverConfig(mu=a.mu, n_v=a.n_v, lr=a.lr)
    return AggregationConfig(n=a.n, k_hand=a.k_hand, k_obj_trans=a.k_obj_trans, k_obj_rot=a.k_obj_rot,
                             k_phy_hand=a.k_phy_hand, k_phy_obj=a.k_phy_obj, physics=not a.no_physics,
                             hand_solver=replace(base, phase1_steps=a.pa_phase1_steps,
                                                 phase2_steps=a.pa_phase2_steps),
                             object_solver=replace(base, phase1_steps=a.phase1_steps, phase2_steps=a.phase2_steps))


def heatmap_config(text, sigma, seed) -> HeatmapConfig:
    """``text`` like ``"noise=0.05,dropout=0.1,jitter=1.0"``."""
    names = {"noise": "noise_sigma", "dropout": "dropout", "jitter": "jitter_sigma"}
    kw = {}
    for part in filter(None, (text or "").split(",")):
        key, _, val = part.partition("=")
        if key.strip() not in names:
            raise argparse.ArgumentTypeError(f"unknown corruption key {key!r}; expected noise, dropout, jitter")
        kw[names[key.strip()]] = float(val)
    return HeatmapConfig(sigma=sigma, seed=seed, **kw)


def _stamp(doc, seed, cfg):
    doc["seed"] = None if seed is None else int(seed)
    doc["config"] = cfg
    doc["config_hash"] = config_hash(cfg)
    return doc


# ---------------------------------------------------------------- stages

def render_heatmaps(scn: Scenario, entity, cfg: HeatmapConfig):
    if entity == "hand":
        pts = forward_kinematics(scn.pose, scn.shape)
    else:
        pts = bbox_keypoints_27(scn.object_mesh()) @ scn.R.T + scn.T
    uv, valid = project_points(pts, scn.intrinsics)
    uv = np.where(valid[:, None], uv, np.inf)
    clean = render_from_image(uv, cfg)
    return corrupt(clean, cfg)


def make_candidates(scn: Scenario, entity, a, seed, threads):
    gcfg = generator_config(a)
    if a.generator == "perturbation":
        noise = NoiseSpec(a.rot_sigma, a.trans_sigma)
        ref = scn.pose.theta if entity == "hand" else (scn.R, scn.T)
        cs = perturbation_sampler(ref, noise, a.n, seed, entity=entity)
        cfg = {"generator": "perturbation", "n": a.n, "rot_sigma": a.rot_sigma, "trans_sigma": a.trans_sigma}
    else:
        sched = schedule(a)
        if entity == "hand":
            cs = generate_hand_candidates(scn.pose.theta, gcfg, sched, seed, a.t_f, threads)
        else:
            cs = generate_object_candidates(scn.R, scn.T, scn.pose.trans, gcfg, sched, seed, a.t_f, threads)
        cfg = {"generator": "pf-ode", **gcfg.to_dict(), "t_f": a.t_f, "schedule": sched.to_dict()}
    cfg["entity"] = entity
    return cs, cfg


def run_solve(scn: Scenario, a, seed=None):
    cfg = solver_config(a)
    rep = solve_pseudo_forces(scn.pose, scn.shape, scn.object_mesh_camera(), scn.gravity_force, cfg, seed=seed)
    doc = rep.to_json()
    doc["scenario"] = scn.name
    validate(doc, "solve-report.v1")
    return rep, doc


def run_aggregate(scn: Scenario, cands, heatmaps, a, seed, threads):
    by_entity = {c.entity: c for c in cands}
    by_channels = {h.channels: h for h in heatmaps}
    if set(by_entity) != {"hand", "object"}:
        raise SchemaError("aggregate needs one hand and one object candidate file")
    if set(by_channels) != {21, 27}:
        raise SchemaError("aggregate needs a 21-channel hand and a 27-channel object heatmap file")
    cfg = aggregation_config(a)
    rep = aggregate_full(scn, by_entity["hand"], by_entity["object"], by_channels[21], by_channels[27], cfg,
                         seed=seed, threads=threads)
    doc = rep.to_json()
    doc["inputs"] = {"scenario": scn.name}
    validate(doc, "aggregation.v1")
    return rep, doc


def run_eval(scn: Scenario, pred, a):
    validate(pred, "aggregation.v1")
    shape = scn.shape
    pose = HandPose(np.array(pred["hand"]["theta"], dtype=float), np.array(pred["hand"]["trans"], dtype=float))
    R = np.array(pred["object"]["R"], dtype=float)
    T = np.array(pred["object"]["T"], dtype=float)
    prim = scn.primitive
    model = ObjectModel.from_mesh(scn.object_mesh(), symmetry_of_primitive(prim["kind"], prim["dimensions"]))
    hand_pred = skin_mesh(pose, shape)
    hand_gt = skin_mesh(scn.pose, shape)
    pe = pose_errors(forward_kinematics(pose, shape), forward_kinematics(scn.pose, shape), R, T, scn.R, scn.T,
                     model, scn.intrinsics, hand_pred.vertices, hand_gt.vertices)
    obj_pred = scn.object_mesh().transformed(R, T)
    phys = contact_and_penetration(hand_pred, obj_pred, a.tau)
    scfg = solver_config(a)
    phys.stability = stability_proxy(pose, shape, obj_pred, scn.gravity_force, scfg)
    cfg = {"tau": a.tau, "solver": scfg.to_dict(), "max_model_points": len(model.points),
           "prediction_config_hash": pred.get("config_hash")}
    doc = {"schema": METRICS_SCHEMA, "scenario": scn.name,
           "units": {"length": "mm", "rates": "%", "REP": "px", "stability": "dimensionless"},
           "pose": {k: (None if not np.isfinite(v) else float(v)) for k, v in pe.to_dict().items()},
           "physics": phys.to_dict()}
    _stamp(doc, pred.get("seed"), cfg)
    validate(doc, "metrics.v1")
    row = {"name": scn.name, **pe.to_dict(), "CP": phys.CP, "PD": phys.PD}
    return doc, row


# ---------------------------------------------------------------- figures

def forces_svg(scn: Scenario, rep, path, arrow_m=0.05):
    """Projected object outline, hand skeleton, anchors, force arrows (blue) and gravity (yellow)."""
    from scipy.spatial import ConvexHull

    k = scn.intrinsics
    W, H = k.width, k.height

    def proj(p):
        return project_points(np.atleast_2d(p), k)[0]

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             '<defs><marker id="a" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="5" markerHeight="5" '
             'orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="context-stroke"/></marker></defs>',
             f'<rect width="{W}" height="{H}" fill="white"/>']
    ov = proj(scn.object_mesh_camera().vertices)
    hull = ov[ConvexHull(ov).vertices]
    parts.append('<polygon points="' + " ".join(f"{u:.2f},{v:.2f}" for u, v in hull)
                 + '" fill="#dddddd" stroke="#888888"/>')
    kp = proj(forward_kinematics(scn.pose, scn.shape))
    from .hand import PARENTS, TIP_PARENTS
    bones = [(i, p) for i, p in enumerate(PARENTS) if p >= 0] + [(16 + n, p) for n, p in enumerate(TIP_PARENTS)]
    for i, p in bones:
        parts.append(f'<line x1="{kp[p, 0]:.2f}" y1="{kp[p, 1]:.2f}" x2="{kp[i, 0]:.2f}" y2="{kp[i, 1]:.2f}" '
                     'stroke="#999999" stroke-width="1"/>')
    O, F = rep.field.positions, rep.field.forces
    a0, a1 = proj(O), proj(O + arrow_m * F)
    for k_, (p, q) in enumerate(zip(a0, a1)):
        color = "#bbbbbb" if rep.frozen[k_] else "#333333"
        parts.append(f'<circle cx="{p[0]:.2f}" cy="{p[1]:.2f}" r="1.5" fill="{color}"/>')
        if not rep.frozen[k_] and np.linalg.norm(q - p) > 0.5:
            parts.append(f'<line x1="{p[0]:.2f}" y1="{p[1]:.2f}" x2="{q[0]:.2f}" y2="{q[1]:.2f}" stroke="blue" '
                         'stroke-width="1.5" marker-end="url(#a)"/>')
    c = scn.object_mesh_camera().centroid
    g0, g1 = proj(c)[0], proj(c + arrow_m * scn.gravity_force.vector)[0]
    parts.append(f'<line x1="{g0[0]:.2f}" y1="{g0[1]:.2f}" x2="{g1[0]:.2f}" y2="{g1[1]:.2f}" stroke="gold" '
                 'stroke-width="2" marker-end="url(#a)"/>')
    parts.append("</svg>")
    try:
        Path(path).write_text("\n".join(parts) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------- commands

def _load_scenario(path):
    return Scenario.from_json(read_json(path))


def _load_candidates(path):
    return CandidateSet.from_json(read_json(path))


def cmd_scenario_gen(a):
    scn = build_canonical(a.template, a.seed)
    out = Path(a.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc.strerror or exc}") from exc
    scn.save(out / "scenario.json")
    export_meshes(scn, out)
    print(out / "scenario.json")


def cmd_solve_forces(a):
    scn = _load_scenario(a.input)
    rep, doc = run_solve(scn, a, a.seed)
    write_json(doc, a.output)
    if a.svg:
        forces_svg(scn, rep, a.svg)
    r = rep.residuals
    print(f"L_force={r.L_force:.3e} L_torque={r.L_torque:.3e} converged={rep.converged}")


def cmd_gen_candidates(a):
    scn = _load_scenario(a.input)
    cs, cfg = make_candidates(scn, a.entity, a, a.seed, a.threads)
    doc = _stamp(cs.to_json(), a.seed, cfg)
    validate(doc, "candidates.v1")
    write_json(doc, a.output)
    print(f"{len(cs)} {a.entity} candidates -> {a.output}")


def cmd_heatmaps(a):
    cfg = heatmap_config(a.corrupt, a.sigma, a.seed)
    scn = _load_scenario(a.input)
    stack = render_heatmaps(scn, a.entity, cfg)
    save_binary(stack, a.output)
    if a.svg:
        to_svg(stack, a.svg)
    print(f"{stack.channels} channels -> {a.output}")


def cmd_aggregate(a):
    scn = _load_scenario(a.input)
    cands = [_load_candidates(p) for p in a.candidates]
    maps = [load_binary(p) for p in a.heatmaps]
    _, doc = run_aggregate(scn, cands, maps, a, a.seed, a.threads)
    write_json(doc, a.output)
    print(f"aggregation -> {a.output}")


def cmd_eval(a):
    scn = _load_scenario(a.scenario)
    doc, row = run_eval(scn, read_json(a.pred), a)
    write_json(doc, a.output)
    if a.csv:
        try:
            write_csv([row], a.csv)
        except OSError as exc:
            raise IoError(f"cannot write {a.csv}: {exc.strerror or exc}") from exc
    print(f"MJE={row['MJE']:.3f}mm OCE={row['OCE']:.3f}mm -> {a.output}")


def cmd_pipeline(a):
    heatmap_config(a.corrupt, a.sigma, 0)   # reject a bad --corrupt before any work
    scn = _load_scenario(a.input)
    out = Path(a.output)
    seed = a.seed
    _, sdoc = run_solve(scn, a, seed)
    write_json(sdoc, out / "forces.json")
    cands = []
    for entity in ("hand", "object"):
        s = stage_seed(seed, f"candidates/{entity}")
        cs, cfg = make_candidates(scn, entity, a, s, a.threads)
        doc = _stamp(cs.to_json(), s, cfg)
        write_json(doc, out / f"candidates_{entity}.json")
        cands.append(cs)
    maps = []
    for entity in ("hand", "object"):
        cfg = heatmap_config(a.corrupt, a.sigma, stage_seed(seed, f"heatmaps/{entity}"))
        st = render_heatmaps(scn, entity, cfg)
        save_binary(st, out / f"heatmaps_{entity}.bin")
        maps.append(st)
    _, adoc = run_aggregate(scn, cands, maps, a, seed, a.threads)
    write_json(adoc, out / "aggregation.json")
    mdoc, row = run_eval(scn, adoc, a)
    write_json(mdoc, out / "metrics.json")
    if a.csv:
        write_csv([row], out / "metrics.csv")
    print(f"MJE={row['MJE']:.3f}mm OCE={row['OCE']:.3f}mm -> {out / 'metrics.json'}")


# ---------------------------------------------------------------- parser

def _add_solver(p):
    g = p.add_argument_group("solver")
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--phase1-steps", type=int, default=300)
    g.add_argument("--phase2-steps", type=int, default=2700)
    g.add_argument("--mu", type=float, default=1.0)
    g.add_argument("--n-v", type=int, default=12)


def _add_sampling(p):
    g = p.add_argument_group("candidates")
    g.add_argument("--generator", choices=("pf-ode", "perturbation"), default="pf-ode")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--t-f", type=float, default=None, help="PF-ODE start time (default per entity)")
    g.add_argument("--t-f-hand", type=float, default=0.55)
    g.add_argument("--t-f-object", type=float, default=0.65)
    g.add_argument("--sigma-min", type=float, default=0.01)
    g.add_argument("--sigma-max", type=float, default=50.0)
    g.add_argument("--rot-sigma", type=float, default=0.1)
    g.add_argument("--trans-sigma", type=float, default=0.01)


def _add_aggregation(p):
    g = p.add_argument_group("aggregation")
    g.add_argument("--k-hand", type=int, default=30)
    g.add_argument("--k-obj-trans", type=int, default=10)
    g.add_argument("--k-obj-rot", type=int, default=10)
    g.add_argument("--k-phy-hand", type=int, default=5)
    g.add_argument("--k-phy-obj", type=int, default=5)
    g.add_argument("--pa-phase1-steps", type=int, default=300)
    g.add_argument("--pa-phase2-steps", type=int, default=0)
    g.add_argument("--no-physics", action="store_true", help="visual aggregation only")


def _add_heatmap(p):
    g = p.add_argument_group("heatmaps")
    g.add_argument("--sigma", type=float, default=2.0, help="Gaussian width in heatmap pixels")
    g.add_argument("--corrupt", default="", help="e.g. noise=0.05,dropout=0.1,jitter=1.0")


def _add_threads(p):
    p.add_argument("--threads", type=int, default=_threads_default(),
                   help=f"worker threads (default ${THREADS_ENV} or 1); output does not depend on it")


def build_parser():
    ap = argparse.ArgumentParser(prog="graspforge", description="Grasp force and pose aggregation toolkit")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scenario", help="synthetic scenarios")
    scs = sc.add_subparsers(dest="action", required=True)
    g = scs.add_parser("gen", help="build a canonical scenario")
    g.add_argument("--template", required=True, choices=TEMPLATES)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True, help="output directory")
    g.set_defaults(func=cmd_scenario_gen)

    p = sub.add_parser("solve-forces", help="pseudo-force solve on a scenario")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--svg")
    p.add_argument("--seed", type=int, default=None)
    _add_solver(p)
    p.set_defaults(func=cmd_solve_forces)

    p = sub.add_parser("gen-candidates", help="sample pose candidates")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--entity", choices=("hand", "object"), required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_sampling(p)
    _add_threads(p)
    p.set_defaults(func=cmd_gen_candidates)

    p = sub.add_parser("heatmaps", help="render (and optionally corrupt) keypoint heatmaps")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--entity", choices=("hand", "object"), default="hand")
    p.add_argument("--svg")
    p.add_argument("--seed", type=int, default=0)
    _add_heatmap(p)
    p.set_defaults(func=cmd_heatmaps)

    p = sub.add_parser("aggregate", help="visual and physics aggregation")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--candidates", nargs=2, required=True, metavar="FILE", help="hand and object candidate files")
    p.add_argument("--heatmaps", nargs=2, required=True, metavar="FILE", help="hand and object heatmap files")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=100)
    _add_aggregation(p)
    _add_solver(p)
    _add_threads(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("eval", help="metrics for an aggregation result")
    p.add_argument("--pred", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--csv")
    p.add_argument("--tau", type=float, default=0.002, help="contact threshold in meters")
    _add_solver(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="all stages end to end")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--tau", type=float, default=0.002)
    _add_sampling(p)
    _add_aggregation(p)
    _add_solver(p)
    _add_heatmap(p)
    _add_threads(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def _check(a):
    for name in ("n", "threads", "k_hand", "k_obj_trans", "k_obj_rot", "k_phy_hand", "k_phy_obj"):
        v = getattr(a, name, None)
        if v is not None and v < 1:
            raise argparse.ArgumentTypeError(f"--{name.replace('_', '-')} must be positive")
    if getattr(a, "seed", None) is not None and not 0 <= a.seed < 2**64:
        raise argparse.ArgumentTypeError("--seed must be a 64-bit unsigned integer")


def main(argv=None):
    ap = build_parser()
    a = ap.parse_args(argv)
    try:
        _check(a)
        a.func(a)
    except argparse.ArgumentTypeError as exc:
        ap.error(str(exc))
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NumericError as exc:
        print(f"numeric error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IoError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GraspForgeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
