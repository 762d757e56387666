"""Command-line pipeline: gen, train-reg, train-diff, sample, eval, case, selfcheck.

Every stage writes a JSON manifest echoing the full run configuration and
all seeds, and no timestamps or absolute paths, so rerunning a stage with
the same inputs and seeds reproduces its files byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .io import ConfigError, FormatError, RunConfig, file_sha256, read_container, write_container

EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# helpers -------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig.default()


def _write_manifest(out: Path, manifest: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _read_manifest(d: Path) -> dict:
    p = Path(d) / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    return json.loads(p.read_text())


def _scenario_params(cfg: RunConfig):
    from .synth import ScenarioParams

    d = asdict(cfg.data)
    keep = {k: v for k, v in d.items() if k not in ("n_scenes", "seed")}
    return ScenarioParams(**keep)


def load_dataset(d):
    """Read a ``gen`` output directory back into a SceneDataset."""
    from .synth import ScenarioParams, SceneDataset

    d = Path(d)
    man = _read_manifest(d)
    coarse, fine, latents, kinds, seeds = [], [], [], [], []
    for entry in man["scenes"]:
        arrays, h = read_container(d / entry["file"])
        coarse.append(arrays.pop("coarse").astype(np.float64))
        fine.append(arrays.pop("fine").astype(np.float64))
        latents.append({k[len("latent/"):]: v.astype(np.float64) for k, v in arrays.items()
                        if k.startswith("latent/")})
        kinds.append(h["kind"])
        seeds.append(h["seed"])
    return SceneDataset(np.stack(coarse), np.stack(fine), seeds, ScenarioParams.from_dict(man["params"]),
                        kinds, latents)


def _train_config(sec):
    from .optim import TrainConfig

    return TrainConfig(lr=sec.lr, batch_size=sec.batch_size, n_samples=sec.n_samples,
                       ema_halflife=sec.ema_halflife, ema_rampup=sec.ema_rampup,
                       dropout=sec.dropout, lr_warmup=sec.lr_warmup)


def _net_spec(sec):
    from .network import NetSpec

    mult = tuple(int(m) for m in str(sec.channel_mult).split(","))
    return NetSpec(depth=sec.depth, base_width=sec.base_width, channel_mult=mult,
                   noise_width=sec.noise_width)


def _schedule(cfg: RunConfig):
    from .diffusion import NoiseSchedule

    s = cfg.sampling
    return NoiseSchedule(s.n_steps, s.sigma_max, s.sigma_min, s.rho, s.s_churn, s.s_noise)


def _interp_baseline(coarse: np.ndarray, fine_shape, z_value: float) -> np.ndarray:
    """Bilinear interpolation of the shared channels; Z, absent from the input, gets a constant."""
    from .grid import bilinear_array

    base = bilinear_array(coarse[:, :3], fine_shape)
    z = np.full((len(coarse), 1) + tuple(fine_shape), z_value)
    return np.concatenate([base, z], axis=1)


def _load_members(d: Path) -> tuple[np.ndarray, dict]:
    man = _read_manifest(d)
    members = [read_container(d / m["file"])[0]["fine"].astype(np.float64) for m in man["members"]]
    return np.stack(members, axis=1), man


# subcommands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    from .synth import make_dataset

    cfg = _load_config(args)
    over = {k: getattr(args, k) for k in ("scenario", "size", "factor", "amplitude", "bias_blur",
                                          "bias_damping") if getattr(args, k) is not None}
    cfg.data = replace(cfg.data, **over)
    if args.seed is not None:
        cfg.data.seed = args.seed
    n = args.n if args.n is not None else cfg.data.n_scenes
    params = _scenario_params(cfg)
    ds = make_dataset(params, n, cfg.data.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = []
    for i in range(n):
        arrays = {"fine": ds.fine[i], "coarse": ds.coarse[i]}
        arrays.update({f"latent/{k}": v for k, v in ds.latents[i].items()})
        header = {"seed": ds.seeds[i], "kind": ds.kinds[i], "index": i,
                  "fine_channels": [c.to_dict() for c in ds.fine_channels],
                  "coarse_channels": [c.to_dict() for c in ds.coarse_channels]}
        name = f"scene_{i:04d}.rsdf"
        scenes.append({"file": name, "seed": ds.seeds[i], "kind": ds.kinds[i],
                       "sha256": write_container(out / name, arrays, header)})
    _write_manifest(out, {"stage": "gen", "version": __version__, "config": cfg.to_dict(),
                          "params": params.to_dict(), "n": n, "seed": cfg.data.seed, "scenes": scenes})
    print(f"wrote {n} scenes to {out}")
    return 0


def cmd_train_reg(args) -> int:
    from .checkpoint import save_regressor
    from .regression import train_regression

    cfg = _load_config(args)
    if args.seed is not None:
        cfg.regression.seed = args.seed
    if args.samples is not None:
        cfg.regression.n_samples = args.samples
    ds = load_dataset(args.data)
    model = train_regression(ds, _train_config(cfg.regression), cfg.regression.seed,
                             _net_spec(cfg.regression))
    digest = save_regressor(args.out, model, {"config": cfg.to_dict()})
    lc = model.loss_curve_
    print(f"regression trained: {len(lc)} steps, final loss {lc[-max(1, len(lc) // 10):].mean():.4f}, "
          f"sha256 {digest[:16]}")
    return 0


def cmd_train_diff(args) -> int:
    from .checkpoint import load_regressor, save_diffusion
    from .diffusion import train_diffusion

    cfg = _load_config(args)
    if args.seed is not None:
        cfg.diffusion.seed = args.seed
    if args.samples is not None:
        cfg.diffusion.n_samples = args.samples
    ds = load_dataset(args.data)
    reg = load_regressor(args.reg)
    model = train_diffusion(ds, reg, _train_config(cfg.diffusion), cfg.diffusion.seed,
                            _net_spec(cfg.diffusion))
    model.schedule = _schedule(cfg)
    digest = save_diffusion(args.out, model, reg_path=args.reg, extra={"config": cfg.to_dict()})
    lc = model.loss_curve_
    print(f"diffusion trained: {len(lc)} steps, final loss {lc[-max(1, len(lc) // 10):].mean():.4f}, "
          f"sha256 {digest[:16]}")
    return 0


def cmd_sample(args) -> int:
    from .checkpoint import load_diffusion, load_regressor

    cfg = _load_config(args)
    s = cfg.sampling
    for k, attr in (("members", "members"), ("seed", "seed"), ("steps", "n_steps"),
                    ("sigma_max", "sigma_max"), ("churn", "s_churn")):
        if getattr(args, k) is not None:
            setattr(s, attr, getattr(args, k))
    ds = load_dataset(args.data)
    reg = load_regressor(args.reg)
    diff = load_diffusion(args.diff, reg, reg_path=args.reg)
    sched = _schedule(cfg)
    ens = diff.sample(ds.coarse, s.members, s.seed, sched)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    members = []
    for k in range(s.members):
        name = f"member_{k:03d}.rsdf"
        digest = write_container(out / name, {"fine": ens[:, k]},
                                 {"member": k, "seed": s.seed})
        members.append({"file": name, "member": k, "sha256": digest})
    _write_manifest(out, {
        "stage": "sample", "version": __version__, "config": cfg.to_dict(),
        "schedule": sched.to_dict(), "members": members, "scene_seeds": ds.seeds,
        "member_seed_rule": "SeedSequence([seed, scene_index, member_index])",
        "regressor_sha256": file_sha256(args.reg), "diffusion_sha256": file_sha256(args.diff),
    })
    print(f"wrote {s.members} members x {len(ds)} scenes to {out}")
    return 0


def evaluate(ds, ens: np.ndarray, mu: np.ndarray, z_climatology: float, cfg: RunConfig) -> dict:
    """The full verification bundle for one test split."""
    from . import metrics as M

    names = [c.name for c in ds.fine_channels]
    base = _interp_baseline(ds.coarse, ds.fine.shape[-2:], z_climatology)
    rep = M.skill_report(ens, ds.fine, base, mu, channels=names, n_boot=cfg.eval.n_boot,
                         seed=cfg.eval.seed)
    ordering = [{"channel": names[c], "comparison": k, "confidence": v}
                for c in range(len(names))
                for k, v in rep.ordering_confidence(c, cfg.eval.n_boot, cfg.eval.seed).items()]
    ranks, spread = [], []
    for c, name in enumerate(names):
        e = np.moveaxis(ens[:, :, c], 1, 0)
        counts = M.rank_histogram(e, ds.fine[:, c], seed=cfg.eval.seed)
        chi2, p = M.rank_chi2(counts)
        ranks += [{"channel": name, "rank": r, "count": int(n)} for r, n in enumerate(counts)]
        if ens.shape[1] >= 2:
            se = M.spread_error(e, ds.fine[:, c])
            spread += [{"channel": name, "bin": i, "spread": s, "rmse": r, "count": int(n),
                        "slope": se.slope, "rank_chi2_p": p}
                       for i, (s, r, n) in enumerate(zip(se.spread, se.rmse, se.counts))]
    spectra = []
    sources = {"truth": ds.fine, "regression": mu, "resdiff": ens[:, 0], "interpolation": base}
    for src, arr in sources.items():
        ke = M.ke_spectrum(arr[:, 0], arr[:, 1])
        spectra += [{"source": src, "quantity": "ke", "wavenumber": int(k), "power": p}
                    for k, p in zip(ke.wavenumber, ke.power)]
        for c in (2, 3):
            sp = M.radial_psd(arr[:, c])
            spectra += [{"source": src, "quantity": names[c], "wavenumber": int(k), "power": p}
                        for k, p in zip(sp.wavenumber, sp.power)]
    pdfs = []
    truth_ws = M.windspeed(ds.fine[:, 0], ds.fine[:, 1])
    for src, arr in sources.items():
        for q, vals, lo, hi in (("windspeed", M.windspeed(arr[:, 0], arr[:, 1]), 0.0, truth_ws.max()),
                                ("Z", arr[:, 3], 0.0, ds.fine[:, 3].max())):
            h = M.pdf_histogram(vals, cfg.eval.pdf_bins, range_=(lo, hi))
            pdfs += [{"source": src, "quantity": q, "center": c, "density": d}
                     for c, d in zip(h.centers, h.density)]
    return {"skill": rep.rows(), "ordering": ordering, "rank_histogram": ranks,
            "spread_error": spread, "spectra": spectra, "pdf": pdfs,
            "summary": rep.to_dict()}


def cmd_eval(args) -> int:
    from .checkpoint import load_regressor
    from .io import emit_report

    cfg = _load_config(args)
    ds = load_dataset(args.data)
    ens, man = _load_members(Path(args.samples))
    reg = load_regressor(args.reg)
    mu = reg.predict(ds.coarse)
    z_clim = float(reg.y_norm_.inverse_transform(np.zeros((1, reg.y_norm_.n_channels_, 1, 1)))[0, 3, 0, 0])
    report = evaluate(ds, ens, mu, z_clim, cfg)
    report["config"] = cfg.to_dict()
    paths = emit_report(report, args.out)
    for row in report["skill"]:
        print(f"{row['channel']:>3} {row['metric']:<20} {row['value']:.5f}")
    print(f"wrote {len(paths)} report files to {args.out}")
    return 0


def cmd_case(args) -> int:
    from .checkpoint import load_regressor
    from .cyclone import azimuthal_profile, ensemble_profile, find_center, front_cross_section
    from .grid import bilinear_array
    from .io import emit_report

    ds = load_dataset(args.data)
    ens, _ = _load_members(Path(args.samples))
    reg = load_regressor(args.reg)
    mu = reg.predict(ds.coarse)
    interp = bilinear_array(ds.coarse[:, :3], ds.fine.shape[-2:])
    idx = [i for i, k in enumerate(ds.kinds) if k == args.kind]
    if args.scene is not None:
        if not 0 <= args.scene < len(ds):
            raise ValueError(f"scene {args.scene} out of range for {len(ds)} scenes")
        if ds.kinds[args.scene] != args.kind:
            raise ValueError(f"scene {args.scene} is a {ds.kinds[args.scene]} scene, not {args.kind}")
        idx = [args.scene]
    if not idx:
        raise ValueError(f"no {args.kind} scenes in {args.data}")
    report = {"kind": args.kind, "scenes": idx}
    if args.kind == "vortex":
        rows, summary = [], []
        for i in idx:
            srcs = {"truth": ds.fine[i], "interpolation": interp[i], "regression": mu[i]}
            for src, f in srcs.items():
                c = find_center(f[0], f[1])
                p = azimuthal_profile(np.hypot(f[0], f[1]), c, args.bin_width, ds.fine.shape[-1] / 4)
                rows += [{"scene": i, "source": src, **r} for r in p.rows()]
                summary.append({"scene": i, "source": src, "r_max": p.r_max, "v_max": p.v_max})
            p = ensemble_profile(ens[i, :, 0], ens[i, :, 1], args.bin_width)
            rows += [{"scene": i, "source": "resdiff", **r} for r in p.rows()]
            summary.append({"scene": i, "source": "resdiff", "r_max": p.r_max, "v_max": p.v_max})
        report.update(profile=rows, summary=summary)
    else:
        rows = []
        for i in idx:
            lat = ds.latents[i]
            angle, origin = float(lat["angle"][0]), lat["origin"]
            srcs = {"truth": ds.fine[i], "interpolation": interp[i], "regression": mu[i],
                    "resdiff": ens[i].mean(axis=0)}
            for src, f in srcs.items():
                for c, name in enumerate(("u", "v", "T")):
                    cs = front_cross_section(f[c], angle, origin, n_lines=20)
                    rows += [{"scene": i, "source": src, "channel": name, "distance": s, "value": v}
                             for s, v in zip(cs.distance, cs.mean)]
        report.update(cross_section=rows)
    emit_report(report, args.out, name=f"case_{args.kind}")
    print(f"wrote {args.kind} case for {len(idx)} scenes to {args.out}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    ok = True
    for name, passed, detail in run_selfcheck(seed=args.seed or 0):
        print(f"{'PASS' if passed else 'FAIL'} {name} {detail}")
        ok &= passed
    return 0 if ok else 1


# entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="downscale", description="Two-stage generative downscaling pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic scenes")
    g.add_argument("--scenario", choices=["grf", "vortex", "front", "mixed"])
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--factor", type=int)
    g.add_argument("--amplitude", type=float)
    g.add_argument("--bias-blur", type=float)
    g.add_argument("--bias-damping", type=float)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    for name, func in (("train-reg", cmd_train_reg), ("train-diff", cmd_train_diff)):
        t = sub.add_parser(name, help=f"{'regression' if name == 'train-reg' else 'diffusion'} training")
        t.add_argument("--data", required=True)
        if name == "train-diff":
            t.add_argument("--reg", required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--samples", type=int)
        t.add_argument("--config")
        t.add_argument("--out", required=True)
        t.set_defaults(func=func)

    s = sub.add_parser("sample", help="draw ensemble members")
    s.add_argument("--data", required=True)
    s.add_argument("--reg", required=True)
    s.add_argument("--diff", required=True)
    s.add_argument("--members", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--sigma-max", type=float)
    s.add_argument("--churn", type=float)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="skill report, spectra and PDFs")
    e.add_argument("--data", required=True)
    e.add_argument("--samples", required=True)
    e.add_argument("--reg", required=True)
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("case", help="vortex profile or front cross-section")
    c.add_argument("--kind", choices=["vortex", "front"], required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--samples", required=True)
    c.add_argument("--reg", required=True)
    c.add_argument("--scene", type=int)
    c.add_argument("--bin-width", type=float, default=1.0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_case)

    k = sub.add_parser("selfcheck", help="run the analytic oracles")
    k.add_argument("--seed", type=int)
    k.set_defaults(func=cmd_selfcheck)
    return p


def _category(exc: BaseException) -> str:
    from .autodiff import ContractError
    from .grid import DimensionError
    from .regression import DataError

    for cls, name in ((ConfigError, "config"), (FormatError, "format"), (DataError, "data"),
                      (DimensionError, "dimension"), (ContractError, "contract"),
                      (OSError, "io"), (ValueError, "value")):
        if isinstance(exc, cls):
            return name
    return "internal"


def _error(category: str, message: str) -> None:
    msg = " ".join(str(message).split())
    print(f"ERROR category={category} message={json.dumps(msg)}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        _error("usage", e)
        return EXIT_USAGE
    if not getattr(args, "func", None):
        _error("usage", "a subcommand is required")
        return EXIT_USAGE
    try:
        return int(args.func(args))
    except Exception as e:  # one machine-readable line per failure
        _error(_category(e), e)
        return 1


def run_cli(argv) -> int:
    return main(list(argv))


if __name__ == "__main__":
    sys.exit(main())
