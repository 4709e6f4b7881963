"""Command-line entry point: ``scrprior <subcommand> [options] [--section.key=value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("scrprior")


class MissingArtifactError(ConfigError):
    pass


def _require(path, what: str, producer: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{what} {path} not found; create it with `scrprior {producer}`")
    return path


def _fresh(path) -> Path:
    path = Path(path)
    if path.exists():
        raise ConfigError(f"output {path} already exists; outputs are never overwritten")
    return path


def write_manifest(path: Path, args, cfg: RunConfig, extra=None) -> None:
    import torch

    from . import __version__, kernels

    lines = [
        f"subcommand {args.command}",
        f"config_hash {cfg.digest()}",
        f"seed {getattr(args, 'seed_used', '')}",
        f"scrprior {__version__}",
        f"python {platform.python_version()}",
        f"numpy {np.__version__}",
        f"torch {torch.__version__}",
        f"kernels {kernels.BACKEND}",
        f"argv {' '.join(sys.argv[1:])}",
        f"timestamp {time.strftime('%Y-%m-%dT%H:%M:%S')}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    path.write_text("\n".join(lines) + "\n" + "\n# resolved config\n" + cfg.to_text())


# --- subcommands ------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig):
    from .synthscene import make_dataset, save_bundle

    out = _fresh(args.out)
    seed = cfg["scene"]["seed"]
    ds = make_dataset(seed, cfg.scene_config(), cfg.dataset_config())
    save_bundle(ds, out)
    args.seed_used = seed
    write_manifest(out / "manifest.txt", args, cfg)
    print(f"wrote bundle {out} ({len(ds.frames)} frames, {len(ds.mapping_frames)} mapping)")


def cmd_fit_prior(args, cfg: RunConfig):
    from .priors import fit_laplace
    from .synthscene import load_bundle

    bundles = [load_bundle(_require(b, "bundle", "synth")) for b in args.bundle]
    out = _fresh(args.out)
    depths = np.concatenate([f.gt_depth[np.isfinite(f.gt_depth)] for ds in bundles for f in ds.mapping_frames])
    params = fit_laplace(depths)
    out.write_text(params.to_text())
    write_manifest(out.with_name(out.name + ".manifest.txt"), args, cfg, {"samples": depths.size})
    print(f"mu {params.mu:.4f} b {params.b:.4f} from {depths.size} depths")


def training_clouds(cfg: RunConfig):
    from .synthscene import SceneConfig, generate_scene, sample_surface_points

    d = cfg["diffusion"]
    base_seed = d["seed"]
    sc = cfg.scene_config()
    scfg = SceneConfig(sc.room_min, sc.room_max, sc.furniture_count, 0.0, sc.panel_size)
    return [sample_surface_points(generate_scene(base_seed * 100_003 + i, scfg), d["room_points"], i)
            for i in range(d["n_rooms"])]


def cmd_train_diffusion(args, cfg: RunConfig):
    from .diffusion import make_schedule, save_denoiser, train_denoiser

    out = _fresh(args.out)
    d = cfg["diffusion"]
    clouds = training_clouds(cfg)
    sched = make_schedule(d["T"], d["beta_min"], d["beta_max"])
    res = train_denoiser(clouds, cfg.denoiser_config(), sched, d["iterations"], d["batch"], d["seed"],
                         cfg.augmentation_config(), d["lr"], log_every=max(d["iterations"] // 20, 1))
    save_denoiser(out, res.model, sched)
    args.seed_used = d["seed"]
    tail = float(np.mean(res.losses[-50:]))
    write_manifest(out.with_name(out.name + ".manifest.txt"), args, cfg, {"final_loss": f"{tail:.6g}"})
    print(f"wrote denoiser {out} (final loss {tail:.4f})")


def build_prior(cfg: RunConfig, dataset):
    from .diffusion import load_denoiser
    from .priors import (DiffusionPrior, LaplaceNLLPrior, LaplaceParams, LaplaceWassersteinPrior, Prior,
                         PriorConfigurationError, RgbdNLLPrior, RgbdParams)

    p = cfg["prior"]
    name = p["name"]
    lam = p["lambda_reg"]
    if name in ("laplace-nll", "laplace-wd"):
        params = LaplaceParams(p["mu"], p["b"])
        if p["params_file"]:
            params = LaplaceParams.from_text(_require(p["params_file"], "fitted prior", "fit-prior").read_text())
        cls = LaplaceNLLPrior if name == "laplace-nll" else LaplaceWassersteinPrior
        return cls(params, 0.1 if lam < 0 else lam)
    if name == "rgbd-nll":
        if not dataset.depth_sensor:
            raise PriorConfigurationError("prior 'rgbd-nll' needs measured_depth, but the bundle has no depth data")
        return RgbdNLLPrior(RgbdParams(p["b_prime"]), 1.0 if lam < 0 else lam)
    if name == "diffusion":
        if not p["diffusion_model"]:
            raise MissingArtifactError("prior 'diffusion' needs [prior] diffusion_model; "
                                       "create one with `scrprior train-diffusion`")
        model, sched = load_denoiser(_require(p["diffusion_model"], "diffusion model", "train-diffusion"))
        if sched.T != cfg["diffusion"]["T"]:
            raise ConfigError(f"diffusion model has T={sched.T} but [diffusion] T={cfg['diffusion']['T']}")
        return DiffusionPrior(model, sched, cfg.prior_schedule(), seed=cfg["mapping"]["seed"])
    return Prior()


def cmd_map(args, cfg: RunConfig):
    from .scr import export_pointcloud, map_scene, save_head
    from .synthscene import load_bundle

    ds = load_bundle(_require(args.bundle, "bundle", "synth"))
    mcfg = cfg.mapping_config()
    prior = build_prior(cfg, ds)
    out = _fresh(args.out)
    out.mkdir(parents=True)
    head, diag = map_scene(ds, mcfg, prior, log_every=max(mcfg.iterations // 20, 1))
    save_head(out / "head.bin", head, cfg.digest())
    export_pointcloud(head, ds, stride=8, path=out / "cloud.ply")
    (out / "diagnostics.txt").write_text(f"prior {prior.name}\n" + diag.report())
    args.seed_used = mcfg.seed
    write_manifest(out / "manifest.txt", args, cfg, {"prior": prior.name, "bundle": args.bundle})
    print(f"wrote {out}/head.bin, cloud.ply, diagnostics.txt")


def _load_head_and_bundle(args):
    from .scr import load_head
    from .synthscene import load_bundle

    ds = load_bundle(_require(args.bundle, "bundle", "synth"))
    head, _ = load_head(_require(args.head, "head checkpoint", "map"))
    if head.cfg.feature_dim != ds.frames[0].feature_map.shape[-1]:
        raise ConfigError(f"head expects {head.cfg.feature_dim}-dim features, bundle has "
                          f"{ds.frames[0].feature_map.shape[-1]}")
    return head, ds


def cmd_reloc(args, cfg: RunConfig):
    from .reloc import evaluate_reloc

    head, ds = _load_head_and_bundle(args)
    out = _fresh(args.out)
    frames = ds.query_frames or ds.frames
    report = evaluate_reloc(head, frames, cfg.ransac_config())
    out.write_text(report.to_text())
    args.seed_used = cfg["ransac"]["seed"]
    write_manifest(out.with_name(out.name + ".manifest.txt"), args, cfg)
    print(report.to_text(), end="")


def cmd_eval_depth(args, cfg: RunConfig):
    from .pipeline import evaluate_depth

    head, ds = _load_head_and_bundle(args)
    out = _fresh(args.out)
    report = evaluate_depth(head, ds.mapping_frames)
    out.write_text(report.to_text())
    write_manifest(out.with_name(out.name + ".manifest.txt"), args, cfg)
    print(report.to_text(), end="")


def cmd_eval_traj(args, cfg: RunConfig):
    from .evalmetrics import trajectory_errors
    from .geometry import read_trajectory, write_trajectory
    from .pipeline import estimate_trajectory

    out = _fresh(args.out)
    extra = {}
    if args.est:
        ids_e, est = read_trajectory(_require(args.est, "trajectory", "eval-traj --bundle"))
        ids_g, gt = read_trajectory(_require(args.gt, "trajectory", "synth"))
        lookup = dict(zip(ids_g, gt))
        missing = [i for i in ids_e if i not in lookup]
        if missing:
            raise ConfigError(f"estimated trajectory has frame ids absent from ground truth: {missing[:5]}")
        gt = [lookup[i] for i in ids_e]
    else:
        if not (args.bundle and args.head):
            raise ConfigError("eval-traj needs --est/--gt or --bundle/--head")
        head, ds = _load_head_and_bundle(args)
        est, counts = estimate_trajectory(head, ds.frames, cfg.ransac_config())
        gt = [f.pose for f in ds.frames]
        est_path = out.with_name(out.name + ".trajectory.txt")
        write_trajectory(est_path, [f.frame_id for f in ds.frames], est)
        extra["estimated_trajectory"] = est_path
    report = trajectory_errors(est, gt, cfg["eval"]["rpe_delta"])
    out.write_text(report.to_text())
    write_manifest(out.with_name(out.name + ".manifest.txt"), args, cfg, extra)
    print(report.to_text(), end="")


def cmd_sample(args, cfg: RunConfig):
    from .diffusion import load_denoiser, sample_pointcloud
    from .pointcloud import PointCloud, write_ply

    model, sched = load_denoiser(_require(args.model, "diffusion model", "train-diffusion"))
    out = _fresh(args.out)
    _, metres = sample_pointcloud(model, sched, args.n_points, args.seed, cfg["diffusion"]["scale_factor"])
    write_ply(out, PointCloud(metres))
    args.seed_used = args.seed
    write_manifest(out.with_name(out.name + ".manifest.txt"), args, cfg)
    print(f"wrote {args.n_points} points to {out}")


# --- argument parsing --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scrprior", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="sectioned config file")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "render a synthetic dataset bundle")
    sp.add_argument("--out", required=True)
    sp = add("fit-prior", cmd_fit_prior, "fit Laplace depth prior parameters")
    sp.add_argument("--bundle", required=True, action="append")
    sp.add_argument("--out", required=True)
    sp = add("train-diffusion", cmd_train_diffusion, "train the point-cloud denoiser")
    sp.add_argument("--out", required=True)
    sp = add("map", cmd_map, "train a regression head on a bundle")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--prior", choices=["none", "laplace-nll", "laplace-wd", "rgbd-nll", "diffusion"])
    sp.add_argument("--diffusion-model")
    sp.add_argument("--prior-params")
    sp = add("reloc", cmd_reloc, "relocalize query frames")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--head", required=True)
    sp.add_argument("--out", required=True)
    sp = add("eval-depth", cmd_eval_depth, "depth metrics of the mapped scene")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--head", required=True)
    sp.add_argument("--out", required=True)
    sp = add("eval-traj", cmd_eval_traj, "ATE / RPE of a trajectory")
    sp.add_argument("--est")
    sp.add_argument("--gt")
    sp.add_argument("--bundle")
    sp.add_argument("--head")
    sp.add_argument("--out", required=True)
    sp = add("sample", cmd_sample, "sample a point cloud from a denoiser")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-points", type=int, default=5120)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _split_overrides(argv):
    """Separate ``--section.key=value`` tokens from ordinary arguments."""
    rest, overrides = [], []
    for tok in argv:
        head = tok[2:].split("=", 1)[0] if tok.startswith("--") else ""
        if "." in head and "=" in tok:
            overrides.append(tok)
        else:
            rest.append(tok)
    return rest, overrides


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = _split_overrides(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(rest)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .priors import PriorConfigurationError

    try:
        if getattr(args, "prior", None):
            overrides.append(f"--prior.name={args.prior}")
        if getattr(args, "diffusion_model", None):
            overrides.append(f"--prior.diffusion_model={args.diffusion_model}")
        if getattr(args, "prior_params", None):
            overrides.append(f"--prior.params_file={args.prior_params}")
        cfg = RunConfig.load(args.config, overrides)
        args.func(args, cfg)
    except (ConfigError, PriorConfigurationError) as exc:
        print(f"scrprior {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary maps failures to an exit code
        log.debug("failure", exc_info=True)
        print(f"scrprior {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
