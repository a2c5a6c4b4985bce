"""Command-line interface.

Subcommands
-----------
simulate   draw a synthetic dataset (CSV + JSON sidecar) and its true correlation
fit        estimate the latent correlation and eigen-system of a dataset
predict    latent and observed-scale curve predictions for a fitted model
scores     FPC scores of a dataset under a fitted model
benchmark  Monte Carlo ISE comparison of the estimators
plot       SVG heatmaps of a model or eigenfunction plots of an eigen-system

Exit codes are 0 on success, 1 on runtime or data errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2
METHODS = ("m2fpca", "ps_m2fpca")
BENCH_METHODS = ("m2fpca", "ps_m2fpca", "naive_mfpca")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.exc = exc


def _k_list(text: str) -> tuple:
    try:
        ks = tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid K list {text!r}") from None
    if not ks or min(ks) < 2:
        raise argparse.ArgumentTypeError("K candidates must be integers >= 2")
    return ks


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHODS, default="m2fpca")
    p.add_argument("--grid", type=_positive_int, default=16, help="latent grid size m")
    p.add_argument("--c0", type=int, default=10, help="minimum pair count per cell")
    p.add_argument("--epsilon", type=float, default=1e-3, help="eigenvalue floor of the PD projection")
    p.add_argument("--k-candidates", type=_k_list, default=tuple(range(4, 11)))
    p.add_argument("--var-threshold", type=float, default=0.95)
    p.add_argument("--burn-in", type=int, default=100, help="Gibbs burn-in sweeps")
    p.add_argument("--draws", type=_positive_int, default=400, help="Gibbs sweeps kept")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=None, help="BLAS thread cap")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m2fpca", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--scenario", choices=("stationary", "nonstationary"), default="stationary")
    p.add_argument("--n", type=_positive_int, default=100)
    p.add_argument("--grid", type=_positive_int, default=16)
    p.add_argument("--missing", type=float, default=0.0, help="probability of dropping each observation")
    _add_common(p)

    p = sub.add_parser("fit", help="fit a model")
    p.add_argument("data", type=Path, help="long-form CSV (sidecar <data>.json)")
    p.add_argument("--sidecar", type=Path, default=None)
    _add_fit_flags(p)
    _add_common(p)

    for name, hlp in (("predict", "curve predictions"), ("scores", "FPC scores")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("data", type=Path)
        p.add_argument("--sidecar", type=Path, default=None)
        p.add_argument("--model-dir", type=Path, required=True, help="output directory of `fit`")
        if name == "predict":
            p.add_argument("--times", type=str, default=None,
                           help="comma-separated times in [0, 1] (default: the model grid)")
        _add_common(p)

    p = sub.add_parser("benchmark", help="Monte Carlo ISE comparison")
    p.add_argument("--scenario", choices=("stationary", "nonstationary"), default="stationary")
    p.add_argument("--n", type=_positive_int, default=100)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--methods", type=str, default=",".join(BENCH_METHODS))
    _add_fit_flags(p)
    _add_common(p)

    p = sub.add_parser("plot", help="SVG figures of a model or eigen JSON")
    p.add_argument("artifact", type=Path)
    _add_common(p)
    return parser


# --------------------------------------------------------------------------


def _version() -> str:
    from . import __version__

    return __version__


def _write_manifest(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    params = {}
    for key, val in sorted(vars(args).items()):
        if isinstance(val, Path):
            val = str(val)
        elif isinstance(val, tuple):
            val = list(val)
        params[key] = val
    manifest = {"version": _version(), "command": args.command, "seed": args.seed, "parameters": params}
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _settings(args):
    from .pipeline import FitSettings

    return FitSettings(grid_m=args.grid, c0=args.c0, eps=args.epsilon, k_candidates=tuple(args.k_candidates),
                       var_threshold=args.var_threshold, seed=args.seed,
                       burn_in=getattr(args, "burn_in", 100), draws=getattr(args, "draws", 400))


def _load(args):
    from .data_model import load_dataset

    return load_dataset(args.data, sidecar=args.sidecar)


def cmd_simulate(args) -> dict:
    import numpy as np

    from .data_model import save_dataset
    from .sim import SimulationConfig, simulate

    config = SimulationConfig(scenario=args.scenario, n=args.n, m=args.grid, seed=args.seed,
                              missing=args.missing)
    data, C, info = simulate(config)
    save_dataset(data, args.out / "data.csv", args.out / "data.csv.json")
    with open(args.out / "truth.json", "w") as fh:
        json.dump({"grid": np.linspace(0, 1, args.grid).tolist(), "C": C.tolist(), "draw": info}, fh)
    return {"simulation": config.to_dict()}


def _ps_model(res):
    from .covfit import assemble_and_project

    C = res.correlation()
    m = res.stage.grid.size
    J = C.shape[0] // m
    blocks = {(j, k): C[j * m:(j + 1) * m, k * m:(k + 1) * m] for j in range(J) for k in range(j, J)}
    surfaces = {key: s for key, s in res.stage.surfaces.items() if key[0] == key[1]}
    return assemble_and_project(blocks, res.settings.eps, res.stage.grid, surfaces)


def cmd_fit(args) -> dict:
    from .pipeline import fit_m2fpca, fit_ps_m2fpca, stage_one

    settings = _settings(args)
    stage_name = "load"
    try:
        data = _load(args)
        stage_name = "marginal estimation"
        stage = stage_one(data, settings)
        if args.method == "m2fpca":
            stage_name = "cross-covariance estimation and multivariate FPCA"
            res = fit_m2fpca(data, settings, stage=stage)
            model = res.model
        else:
            stage_name = "partially separable decomposition"
            res = fit_ps_m2fpca(data, settings, stage=stage)
            model = _ps_model(res)
    except Exception as exc:
        diag = {"stage": stage_name, "error": str(exc)}
        if stage_name != "load" and "stage" in locals():
            diag["selected_K"] = {f"{j},{k}": s.K for (j, k), s in stage.surfaces.items()}
        with open(args.out / "diagnostics.json", "w") as fh:
            json.dump(diag, fh, indent=2, sort_keys=True)
        raise StageError(stage_name, exc) from exc
    model.to_json(args.out / "model.json")
    res.eigen.to_json(args.out / "eigen.json")
    res.eigen.scores_csv(args.out / "scores.csv", list(data.names))
    with open(args.out / "marginals.json", "w") as fh:
        json.dump(res.marginals.to_dict() if hasattr(res, "marginals") else res.stage.marginals.to_dict(), fh)
    return {
        "fit_settings": settings.to_dict(),
        "selected_K": {f"{j},{k}": s.K for (j, k), s in sorted(model.surfaces.items())},
        "n_components": int(res.eigen.L),
        "sampler_warnings": len(res.latent.warnings),
    }


def _load_fitted(model_dir: Path):
    from .covfit import LatentCorrelationModel
    from .fpca import EigenSystem
    from .marginals import MarginalModel

    model = LatentCorrelationModel.from_json(model_dir / "model.json")
    eigen = EigenSystem.from_json(model_dir / "eigen.json")
    with open(model_dir / "marginals.json") as fh:
        marginals = MarginalModel.from_dict(json.load(fh))
    with open(model_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    return model, eigen, marginals, manifest


def _sampler(args, manifest):
    from .latent import SamplerSettings
    from .pipeline import FitSettings

    fs = manifest.get("fit_settings", {})
    base = FitSettings(seed=args.seed, burn_in=fs.get("burn_in", 100), draws=fs.get("draws", 400))
    return base.sampler("latent")


def cmd_predict(args) -> dict:
    import numpy as np

    from .latent import predict_curves, predict_latent, write_predictions

    model, _, marginals, manifest = _load_fitted(args.model_dir)
    data = _load(args)
    if args.times:
        try:
            times = np.array([float(x) for x in args.times.split(",")])
        except ValueError:
            raise ValueError(f"invalid --times {args.times!r}") from None
    else:
        times = model.grid
    settings = _sampler(args, manifest)
    latent = predict_latent(data, model, marginals, settings)
    preds = [predict_curves(data, sid, [times] * data.J, model, marginals, prediction=latent)
             for sid in data.subject_ids]
    write_predictions(args.out / "predictions.csv", preds, list(data.names))
    return {"n_subjects": data.n, "times": np.asarray(times).tolist()}


def cmd_scores(args) -> dict:
    import numpy as np

    from .fpca import EigenSystem
    from .latent import predict_latent

    model, eigen, marginals, manifest = _load_fitted(args.model_dir)
    data = _load(args)
    if data.J != eigen.mean.shape[0]:
        raise ValueError("dataset and model have different numbers of components")
    latent = predict_latent(data, model, marginals, _sampler(args, manifest))
    Xc = latent.values - eigen.mean[None]
    w = eigen.weights
    if eigen.flavor == "full":
        scores = np.einsum("ijm,m,ljm->il", Xc, w, eigen.eigenfunctions)
    else:
        scores = np.einsum("ijm,m,lm->ilj", Xc, w, eigen.eigenfunctions)
    out = EigenSystem(eigen.flavor, eigen.eigenvalues, eigen.eigenfunctions, scores, eigen.grid, w,
                      eigen.mean, latent.subject_ids)
    out.scores_csv(args.out / "scores.csv", list(data.names))
    return {"n_subjects": data.n, "flavor": eigen.flavor}


def cmd_benchmark(args) -> dict:
    from .sim import SimulationConfig, benchmark

    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    config = SimulationConfig(scenario=args.scenario, n=args.n, m=args.grid, seed=args.seed, reps=args.reps)
    settings = _settings(args)

    def progress(r, vals):
        txt = " ".join(f"{k}={'fail' if v is None else f'{v:.5f}'}" for k, v in vals.items())
        print(f"rep {r + 1}/{config.reps}: {txt}", file=sys.stderr)

    res = benchmark(config, methods, settings, progress)
    res.to_csv(args.out / "benchmark.csv")
    res.to_json(args.out / "benchmark.json")
    return {"simulation": config.to_dict(), "fit_settings": settings.to_dict()}


def _svg_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "m2fpca"
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def plot_model(model, path, names=None) -> None:
    """J x J grid of block heatmaps on a fixed [-1, 1] diverging scale."""
    plt = _svg_setup()
    J, m = model.J, model.m
    fig, axes = plt.subplots(J, J, figsize=(2.2 * J + 1, 2.2 * J), squeeze=False)
    ext = (model.grid[0], model.grid[-1], model.grid[-1], model.grid[0])
    im = None
    for j in range(J):
        for k in range(J):
            ax = axes[j][k]
            im = ax.imshow(model.block(j, k), cmap="RdBu_r", vmin=-1.0, vmax=1.0, extent=ext,
                           interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_title(names[k] if names else f"{k + 1}", fontsize=9)
            if k == 0:
                ax.set_ylabel(names[j] if names else f"{j + 1}", fontsize=9)
    fig.colorbar(im, ax=[a for row in axes for a in row], shrink=0.8)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_eigen(eigen, path, names=None) -> None:
    """Eigenfunction line plots: one panel per component (full) or one shared panel (ps)."""
    plt = _svg_setup()
    if eigen.flavor == "full":
        J = eigen.eigenfunctions.shape[1]
        fig, axes = plt.subplots(1, J, figsize=(3 * J, 2.8), squeeze=False, sharey=True)
        for j in range(J):
            ax = axes[0][j]
            for l in range(eigen.L):
                ax.plot(eigen.grid, eigen.eigenfunctions[l, j], label=f"{l + 1}")
            ax.set_title(names[j] if names else f"{j + 1}", fontsize=9)
        axes[0][0].legend(fontsize=7, title="l")
    else:
        fig, ax = plt.subplots(figsize=(4, 3))
        for l in range(eigen.L):
            ax.plot(eigen.grid, eigen.eigenfunctions[l], label=f"{l + 1}")
        ax.legend(fontsize=7, title="l")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_plot(args) -> dict:
    from .covfit import LatentCorrelationModel
    from .fpca import EigenSystem

    try:
        with open(args.artifact) as fh:
            d = json.load(fh)
        if "C_pd" in d:
            model = LatentCorrelationModel.from_dict(d)
            if model.C_pd.shape != (model.J * model.m,) * 2:
                raise ValueError("matrix size does not match the grid")
            target, kind = args.out / "covariance.svg", "model"
            plot_model(model, target)
        elif "flavor" in d:
            eigen = EigenSystem.from_dict(d)
            target, kind = args.out / "eigenfunctions.svg", "eigen"
            plot_eigen(eigen, target)
        else:
            raise ValueError("not a model or eigen artifact")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"corrupt artifact {args.artifact}: {exc}") from exc
    return {"artifact": kind, "figure": target.name}


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "scores": cmd_scores,
    "benchmark": cmd_benchmark,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "benchmark":
        if args.reps < 1:
            parser.print_usage(sys.stderr)
            print("m2fpca: error: --reps must be at least 1", file=sys.stderr)
            return EXIT_USAGE
        bad = [m for m in args.methods.split(",") if m.strip() and m.strip() not in BENCH_METHODS]
        if bad:
            print(f"m2fpca: error: unknown method(s) {', '.join(bad)}", file=sys.stderr)
            return EXIT_USAGE
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args)
        _write_manifest(args.out, args, extra)
    except Exception as exc:
        print(f"m2fpca: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
