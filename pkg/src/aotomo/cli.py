"""Command-line pipeline: phantom generation through reconstruction metrics.

Commands read a JSON experiment configuration and exchange the documented
file formats (binary fields, sinogram CSV, mask PGMs, metrics JSON). Exit
codes: 0 success, 2 configuration/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import acousto, diffusion, fields, helmholtz, inversion, radon
from . import phantom as phantom_mod
from . import segmentation
from .fields import Grid, SolverError

SCHEMA_VERSION = 1
__version__ = "0.1.0"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    n: int
    acoustic: acousto.AcousticConfig
    ny: int
    nr: int
    l: float
    g_value: float
    phantom_file: str
    theta: float | None
    tau: float | None
    max_iter: int
    stop_tol: float
    partition_step: float
    seed: int
    output_dir: str

    @property
    def grid(self) -> Grid:
        return Grid(self.n)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")

    def need(section, key, typ, default=None):
        src = doc.get(section, {})
        if key not in src:
            if default is not None:
                return default
            raise ConfigError(f"missing config field: {section}.{key}")
        try:
            return typ(src[key])
        except (TypeError, ValueError):
            raise ConfigError(f"config field {section}.{key} must be {typ.__name__}")

    n = need("grid", "n", int)
    if n < 17:
        raise ConfigError("config field grid.n must be at least 17")
    try:
        ac = acousto.AcousticConfig(
            mu=need("acoustic", "mu", float, 1.0),
            r0=need("acoustic", "r0", float, 0.25),
            R=need("acoustic", "R", float, 1.75),
            eta=need("acoustic", "eta", float, 0.02),
        )
    except ValueError as exc:
        raise ConfigError(f"config field acoustic: {exc}")
    ny = need("acoustic", "ny", int, 64)
    nr = need("acoustic", "nr", int, 128)
    if ny < 8 or nr < 16:
        raise ConfigError("config fields acoustic.ny/nr must be >= 8 and >= 16")
    problems = ac.resolution_problems(Grid(n))
    if problems:
        raise ConfigError(f"config fields grid.n/acoustic.eta: {problems[0]}")
    l = need("optics", "l", float, 0.1)
    if l < 0:
        raise ConfigError("config field optics.l must be nonnegative")
    g_value = need("optics", "g", float, 1.0)
    if g_value < 0:
        raise ConfigError("config field optics.g must be nonnegative")
    recon = doc.get("reconstruction", {})
    theta = recon.get("theta")
    tau = recon.get("tau")
    return ExperimentConfig(
        n=n,
        acoustic=ac,
        ny=ny,
        nr=nr,
        l=l,
        g_value=g_value,
        phantom_file=doc.get("phantom_file", ""),
        theta=None if theta is None else float(theta),
        tau=None if tau is None else float(tau),
        max_iter=int(recon.get("max_iter", 200)),
        stop_tol=float(recon.get("stop_tol", 1e-3)),
        partition_step=float(recon.get("partition_step", 0.125)),
        seed=int(doc.get("seed", 0)),
        output_dir=doc.get("output_dir", "."),
    )


def _load_phantom(cfg, override=None):
    path = override or cfg.phantom_file
    if not path:
        raise ConfigError("missing config field: phantom_file")
    if not os.path.exists(path):
        raise ConfigError(f"phantom file not found: {path}")
    return phantom_mod.load_phantom(path)


PRESETS = {
    "disk": dict(
        a0=1.0, lower=0.5, upper=2.0,
        inclusions=[dict(shape="disk", params=dict(center=[0.5, 0.5],
                                                   radius=0.2),
                         base=1.5, amplitude=0.3)],
    ),
    "two-disks": dict(
        a0=1.0, lower=0.5, upper=2.0,
        inclusions=[
            dict(shape="disk", params=dict(center=[0.35, 0.4], radius=0.12),
                 base=1.5, amplitude=0.2),
            dict(shape="disk", params=dict(center=[0.68, 0.62], radius=0.1),
                 base=0.55, amplitude=0.1),
        ],
    ),
    "ellipse": dict(
        a0=1.0, lower=0.5, upper=2.0,
        inclusions=[dict(shape="ellipse",
                         params=dict(center=[0.55, 0.45],
                                     semi_axes=[0.16, 0.1], angle=0.5),
                         base=1.25, amplitude=0.25)],
    ),
}


def cmd_phantom_gen(cfg, args):
    preset = PRESETS.get(args.preset)
    if preset is None:
        raise ConfigError(f"unknown preset {args.preset!r}")
    doc = dict(preset)
    doc["D_margin"] = 0.1
    p = phantom_mod.from_dict(doc)
    phantom_mod.save_phantom(args.out, p)
    print(f"wrote {args.out}")
    return 0


def _forward_context(cfg, phantom):
    return acousto.make_context(phantom, cfg.grid, g=cfg.g_value, l=cfg.l)


def cmd_forward(cfg, args):
    phantom = _load_phantom(cfg, args.phantom)
    ctx = _forward_context(cfg, phantom)
    os.makedirs(args.outdir, exist_ok=True)
    fields.save_field(os.path.join(args.outdir, "a.aorf"), ctx.a)
    fields.save_field(os.path.join(args.outdir, "phi.aorf"), ctx.solution.phi)
    fields.save_field(os.path.join(args.outdir, "flux.aorf"),
                      ctx.solution.flux)
    print(f"wrote a.aorf, phi.aorf, flux.aorf to {args.outdir}")
    return 0


def cmd_sinogram(cfg, args):
    phantom = _load_phantom(cfg, args.phantom)
    ctx = _forward_context(cfg, phantom)
    sino = acousto.sample_sinogram(ctx, cfg.acoustic, cfg.ny, cfg.nr,
                                   which=args.kind)
    os.makedirs(args.outdir, exist_ok=True)
    out = os.path.join(args.outdir, "sinogram.csv")
    sino.save_csv(out)
    print(f"wrote {out}")
    return 0


def cmd_recover_psi(cfg, args):
    if not os.path.exists(args.sinogram):
        raise ConfigError(f"sinogram file not found: {args.sinogram}")
    sino = acousto.Sinogram.load_csv(args.sinogram, cfg.acoustic)
    rpsi = radon.recover_Rpsi(sino, cfg.acoustic)
    rec, info = radon.invert_radon(rpsi, cfg.grid, tikhonov=args.tikhonov,
                                   max_iter=args.max_iter)
    psi = helmholtz.psi_from_field(rec)
    fields.save_field(args.out, psi.psi)
    print(f"wrote {args.out} (inversion iterations {info['iterations']}, "
          f"residual {info['residual']:.2e})")
    return 0


def _masks_from_manifest(path, grid):
    with open(path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(path)
    masks = []
    for entry in manifest["masks"]:
        img = _load_pgm(os.path.join(base, entry["file"]))
        mask = img.T[:, ::-1] > 127
        masks.append(segmentation.InclusionMask(
            grid, mask, entry["label"], entry.get("clipped", False)))
    return masks


def _load_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ConfigError(f"{path} is not a binary PGM")
    parts = data.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8,
                         count=w * h).reshape(h, w)


def cmd_segment(cfg, args):
    psi_field = fields.load_field(args.psi)
    psi = helmholtz.PsiField(psi_field, "from_measurements")
    edge = segmentation.detect_edges(psi, threshold=args.threshold,
                                     smooth_sigma=args.smooth)
    masks = segmentation.extract_inclusions(edge, cfg.grid)
    os.makedirs(args.outdir, exist_ok=True)
    manifest = {"masks": []}
    for m in masks:
        name = f"mask_{m.label:02d}.pgm"
        segmentation.save_mask_pgm(os.path.join(args.outdir, name), m)
        manifest["masks"].append(
            {"file": name, "label": m.label, "clipped": m.clipped}
        )
    path = os.path.join(args.outdir, "masks.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(masks)} masks and {path}")
    return 0


def cmd_reconstruct(cfg, args):
    masks = _masks_from_manifest(args.masks, cfg.grid)
    if not masks:
        raise ConfigError("mask manifest contains no masks")
    psi = helmholtz.PsiField(fields.load_field(args.psi), "from_measurements")
    flux = fields.load_field(args.flux)
    if not isinstance(flux, fields.BoundaryTrace):
        raise ConfigError(f"{args.flux} does not contain a boundary trace")
    truth_phantom = None
    if args.truth:
        truth_phantom = phantom_mod.load_phantom(args.truth)
    problem = inversion.ReconstructionProblem(
        cfg.grid, masks, a0=args.a0, lower=args.lower, upper=args.upper,
        g=cfg.g_value, l=cfg.l, theta=cfg.theta,
    )
    guess = inversion.initial_guess_exhaustion(
        problem, flux, partition_step=cfg.partition_step,
        mode="coordinate" if problem.k > 3 else "exhaustive",
    )
    truth = None
    if truth_phantom is not None:
        truth = inversion.truth_correction(problem, truth_phantom,
                                           guess.alphas)
    state = inversion.landweber_run(
        problem, psi, guess.alphas, max_iter=cfg.max_iter,
        stop_tol=cfg.stop_tol, tau=cfg.tau, truth=truth,
    )
    os.makedirs(args.outdir, exist_ok=True)
    rec = state.coefficient(problem)
    fields.save_field(os.path.join(args.outdir, "recon.aorf"), rec)
    inversion.save_log_csv(os.path.join(args.outdir, "recon_log.csv"), state)
    print(
        f"initial guess {guess.alphas} (J = {guess.misfit:.3e}); "
        f"{len(state.residuals)} iterations, {state.stopped_reason}"
    )
    return 0


def cmd_evaluate(cfg, args):
    truth = _load_phantom(cfg, args.phantom)
    rec = fields.load_field(args.recon)
    grid = rec.grid
    a_true = truth.sample(grid)
    num = fields.inner(rec - a_true, rec - a_true)
    den = fields.inner(a_true, a_true)
    l2_rel = math.sqrt(num / den) if den > 0 else 0.0

    hausdorff = float("nan")
    if args.masks:
        masks = _masks_from_manifest(args.masks, grid)
        dists = []
        for inc in truth.inclusions:
            pts = inc.boundary_points(720)
            best = min(
                (segmentation.boundary_hausdorff(m, pts) for m in masks),
                default=float("inf"),
            )
            dists.append(best)
        hausdorff = max(dists) if dists else float("nan")

    residual_final = float("nan")
    monotone_fraction = float("nan")
    if args.log and os.path.exists(args.log):
        rows = np.genfromtxt(args.log, delimiter=",", names=True)
        res = np.atleast_1d(rows["residual_Hstar"])
        residual_final = float(res[-1])
        dist = np.atleast_1d(rows["dist_to_truth_H"])
        dist = dist[np.isfinite(dist)]
        series = dist if dist.size > 1 else res
        if series.size > 1:
            monotone_fraction = float(np.mean(np.diff(series) < 1e-12))

    metrics = {
        "l2_rel_error": l2_rel,
        "hausdorff_boundary": hausdorff,
        "residual_final": residual_final,
        "monotone_fraction": monotone_fraction,
    }
    with open(args.out, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_export(cfg, args):
    obj = fields.load_field(args.field)
    if not isinstance(obj, fields.ScalarField):
        raise ConfigError("export --pgm needs a scalar field file")
    segmentation.save_field_pgm(args.out, obj)
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="aotomo",
        description="acousto-optic absorption reconstruction pipeline",
    )
    parser.add_argument(
        "--version", action="version",
        version=f"aotomo {__version__} (schema {SCHEMA_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="phantom file utilities")
    phsub = ph.add_subparsers(dest="phantom_command", required=True)
    gen = phsub.add_parser("gen", help="write a preset phantom description")
    gen.add_argument("--config", required=True)
    gen.add_argument("--preset", default="disk", choices=sorted(PRESETS))
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_phantom_gen)

    fw = sub.add_parser("forward", help="unperturbed optical solve")
    fw.add_argument("--config", required=True)
    fw.add_argument("--phantom", default=None)
    fw.add_argument("--outdir", required=True)
    fw.set_defaults(func=cmd_forward)

    sg = sub.add_parser("sinogram", help="acoustic measurement sweep")
    sg.add_argument("--config", required=True)
    sg.add_argument("--phantom", default=None)
    sg.add_argument("--kind", default="M_eta", choices=["M_eta", "Mtilde"])
    sg.add_argument("--outdir", required=True)
    sg.set_defaults(func=cmd_sinogram)

    rp = sub.add_parser("recover-psi", help="potential from measurements")
    rp.add_argument("--config", required=True)
    rp.add_argument("--sinogram", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--tikhonov", type=float, default=1e-6)
    rp.add_argument("--max-iter", type=int, default=200)
    rp.set_defaults(func=cmd_recover_psi)

    se = sub.add_parser("segment", help="inclusion masks from the potential")
    se.add_argument("--config", required=True)
    se.add_argument("--psi", required=True)
    se.add_argument("--threshold", default="auto")
    se.add_argument("--smooth", type=float, default=2.0,
                    help="pre-smoothing sigma in nodes for measured data")
    se.add_argument("--outdir", required=True)
    se.set_defaults(func=cmd_segment)

    rc = sub.add_parser("reconstruct", help="exhaustion plus Landweber")
    rc.add_argument("--config", required=True)
    rc.add_argument("--psi", required=True)
    rc.add_argument("--masks", required=True)
    rc.add_argument("--flux", required=True)
    rc.add_argument("--a0", type=float, default=1.0)
    rc.add_argument("--lower", type=float, default=0.5)
    rc.add_argument("--upper", type=float, default=2.0)
    rc.add_argument("--truth", default=None,
                    help="optional truth phantom for the distance audit")
    rc.add_argument("--outdir", required=True)
    rc.set_defaults(func=cmd_reconstruct)

    ev = sub.add_parser("evaluate", help="metrics against a truth phantom")
    ev.add_argument("--config", required=True)
    ev.add_argument("--phantom", required=True)
    ev.add_argument("--recon", required=True)
    ev.add_argument("--masks", default=None)
    ev.add_argument("--log", default=None)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    ex = sub.add_parser("export", help="field file conversion")
    ex.add_argument("--pgm", dest="pgm", action="store_true")
    ex.add_argument("field")
    ex.add_argument("out")
    ex.set_defaults(func=cmd_export)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
