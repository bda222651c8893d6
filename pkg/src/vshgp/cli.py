"""Command-line front end: ``vshgp {train,predict,eval,check-grads,bench}``.

Configuration is a key = value file (an optional ``[run]`` header is allowed)
whose entries are overridden by command-line flags. One top-level seed is
expanded with ``numpy.random.SeedSequence(seed).spawn(4)`` into independent
streams for data generation, the train/test split, initialization and
training, in that order.

Exit status: 0 success, 1 gradient check failed, 2 configuration or input
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .core import init_model, predict_latent, train_vshgp
from .distributed import DvshgpConfig, default_workers, init_dvshgp, predict_dvshgp, train_dvshgp
from .gradcheck import run_checks
from .io import Archive, ArchiveError, load_model, save_model, write_report, write_table, write_trace
from .linalg import NumericalError
from .metrics import msll, smse
from .predictive import log_predictive_density, log_predictive_density_gaussian, predict_y
from .stochastic import SvshgpConfig, elbo_factorized, predict_latent_svshgp, train_svshgp

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
KINDS = ("vshgp", "svshgp", "dvshgp")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "vshgp"
    data: str = "toy1d:n=500"
    target_column: str = ""
    test_fraction: float = 0.0
    seed: int = 0
    m: int = 20
    u: int = 20
    experts: int = 4
    m0: int = 0                      # 0: derived from n / experts
    u0: int = 0
    batch: int = 50
    iterations: int = 1000
    budget: int = 100
    variational_budget: int = 30
    stage1_budget: int = 30
    stage2_budget: int = 70
    workers: int = 0                 # 0: VSHGP_WORKERS or the number of cores
    lengthscale: float = 1.0
    adam_step: float = 0.01
    gamma_initial: float = 1e-4
    gamma_final: float = 0.1
    eval_every: int = 0
    quadrature_nodes: int = 20
    gaussian_density: bool = False
    out: str = "run"
    bench_models: str = "vshgp,svshgp,dvshgp"
    bench_sizes: str = "250,500,1000"

    def validate(self):
        if self.model not in KINDS:
            raise ConfigError(f"model: unknown kind {self.model!r} (expected one of {', '.join(KINDS)})")
        for name in ("m", "u", "experts", "batch", "quadrature_nodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("m0", "u0", "iterations", "budget", "variational_budget", "stage1_budget",
                     "stage2_budget", "workers", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative, got {getattr(self, name)}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError(f"test_fraction: must be in [0, 1), got {self.test_fraction}")
        if self.lengthscale <= 0 or self.adam_step <= 0:
            raise ConfigError("lengthscale and adam_step must be positive")
        if not 0 < self.gamma_initial <= 1 or not 0 < self.gamma_final <= 1:
            raise ConfigError("gamma_initial and gamma_final must lie in (0, 1]")
        return self

    @property
    def n_workers(self):
        return self.workers or default_workers()

    def seeds(self):
        """(data, split, init, train) seeds derived from the top-level seed."""
        return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(self.seed).spawn(4)]


def _coerce(name, typ, raw):
    try:
        if typ is bool:
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in cp.sections():
        out.update(cp[section])
    return out


def build_config(config_path=None, overrides=None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    types = {k: {"str": str, "int": int, "float": float, "bool": bool}[v] if isinstance(v, str) else v
             for k, v in types.items()}
    values = {}
    if config_path:
        for k, v in read_config(config_path).items():
            k = k.replace("-", "_")
            if k not in types:
                raise ConfigError(f"{k}: unknown configuration key")
            values[k] = _coerce(k, types[k], v)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, types[k], v)
    return RunConfig(**values).validate()


# ------------------------------------------------------------------ datasets

def parse_spec(spec):
    """``name:key=value,key=value`` -> (name, dict)."""
    name, _, rest = spec.partition(":")
    kw = {}
    for item in filter(None, rest.split(",")):
        k, eq, v = item.partition("=")
        if not eq:
            raise ConfigError(f"data: malformed generator option {item!r}")
        kw[k.strip()] = v.strip()
    return name.strip(), kw


def load_dataset(spec, seed=0, target_column=""):
    """A CSV path or a generator spec such as ``toy1d:n=500`` or ``sinc2d:n=2000``."""
    name, kw = parse_spec(spec)
    if name in ("toy1d", "sinc2d"):
        try:
            n = int(kw.pop("n", 500))
            normalized = kw.pop("normalized_sinc", "false").lower() in ("1", "true", "yes")
            seed = int(kw.pop("seed", seed))
        except ValueError as exc:
            raise ConfigError(f"data: {exc}") from None
        if kw:
            raise ConfigError(f"data: unknown generator options {sorted(kw)}")
        gen = data_mod.gen_toy1d if name == "toy1d" else data_mod.gen_sinc2d
        return gen(n, seed=seed, normalized_sinc=normalized)
    return data_mod.load_csv(spec, target_column or None)


def parse_grid(spec, d):
    """``grid:lo:hi:count`` -> tensor grid with ``count`` points per dimension."""
    parts = spec.split(":")
    if len(parts) != 4:
        raise ConfigError(f"grid spec must be grid:lo:hi:count, got {spec!r}")
    try:
        lo, hi, count = float(parts[1]), float(parts[2]), int(parts[3])
    except ValueError:
        raise ConfigError(f"grid spec must be grid:lo:hi:count, got {spec!r}") from None
    g = np.linspace(lo, hi, count)
    return np.array(np.meshgrid(*([g] * d), indexing="ij")).reshape(d, -1).T


# ------------------------------------------------------------------ training

def train(cfg: RunConfig, dataset=None):
    """Train the configured model. Returns (model, normalizer, trace rows, summary, test set)."""
    s_data, s_split, s_init, s_train = cfg.seeds()
    ds = dataset if dataset is not None else load_dataset(cfg.data, s_data, cfg.target_column)
    test = None
    if cfg.test_fraction > 0:
        ds, test = data_mod.split(ds, test_fraction=cfg.test_fraction, seed=s_split)
    nz = ds.normalizer
    X, y = ds.normalized()
    t0 = time.perf_counter()
    summary = {"kind": cfg.model, "n": ds.n, "d": ds.d, "seed": cfg.seed}
    if cfg.model == "vshgp":
        model0 = init_model(X, y, cfg.m, cfg.u, seed=s_init, lengthscale=cfg.lengthscale)
        model, values = train_vshgp(model0, cfg.budget, cfg.variational_budget)
        elapsed = time.perf_counter() - t0
        rows = [(i, v, "") for i, v in enumerate(values)]
        summary.update(m=model.m, u=model.u, final_elbo=values[-1])
    elif cfg.model == "svshgp":
        model0 = init_model(X, y, cfg.m, cfg.u, seed=s_init, lengthscale=cfg.lengthscale)
        sc = SvshgpConfig(batch_size=cfg.batch, iterations=cfg.iterations, gamma_initial=cfg.gamma_initial,
                          gamma_final=cfg.gamma_final, adam_step=cfg.adam_step, seed=s_train,
                          eval_every=cfg.eval_every)
        res = train_svshgp(model0, sc)
        elapsed = time.perf_counter() - t0
        model = res.state
        rows = res.trace
        summary.update(m=model.model.m, u=model.model.u, batch=min(cfg.batch, ds.n),
                       iterations=cfg.iterations, final_elbo=elbo_factorized(model.model, model.q))
    else:
        model0 = init_dvshgp(X, y, cfg.experts, cfg.m0 or None, cfg.u0 or None, seed=s_init,
                             lengthscale=cfg.lengthscale)
        dc = DvshgpConfig(cfg.stage1_budget, cfg.stage2_budget, cfg.n_workers)
        model, values = train_dvshgp(model0, dc)
        elapsed = time.perf_counter() - t0
        rows = [(i, v, stage) for i, (stage, v) in enumerate(values)]
        summary.update(experts=cfg.experts, effective_experts=model.M, m0=model.manifest["m0"],
                       u0=model.manifest["u0"], workers=cfg.n_workers, final_elbo=values[-1][1])
    summary["wall_time"] = elapsed
    return model, nz, rows, summary, test


def latent_predict(model, Xstar, workers=1):
    """Latent moments on the normalized scale for any of the three model kinds."""
    from .distributed import DvshgpModel
    from .stochastic import SvshgpModel

    if isinstance(model, DvshgpModel):
        agg = predict_dvshgp(model, Xstar, workers)
        return agg.latent()
    if isinstance(model, SvshgpModel):
        return predict_latent_svshgp(model, Xstar)
    return predict_latent(model, Xstar)


def predict_table(archive, Xraw, workers=1):
    """Raw-scale prediction columns: x..., mu, var, mu_f, var_f, mu_g, var_g."""
    nz = archive.normalizer
    model_d = nz.x_mean.size
    if Xraw.shape[1] != model_d:
        raise ConfigError(f"inputs have {Xraw.shape[1]} columns but the model was trained on {model_d}")
    lat = latent_predict(archive.model, nz.transform_x(Xraw), workers)
    with np.errstate(invalid="ignore"):
        finite = np.isfinite(lat.mu_g) & np.isfinite(lat.var_g)
        mu_g = np.where(finite, lat.mu_g, 0.0)
        var_g = np.where(finite, lat.var_g, 0.0)
    _, var = predict_y(type(lat)(lat.mu_f, lat.var_f, mu_g, var_g))
    var = np.where(finite, var, np.nan)
    # g is a log variance, so rescaling y by s shifts it by 2 log s
    shift = 2.0 * np.log(nz.y_std)
    cols = {
        "mu": nz.inverse_y(lat.mu_f), "var": nz.inverse_var(var),
        "mu_f": nz.inverse_y(lat.mu_f), "var_f": nz.inverse_var(lat.var_f),
        "mu_g": lat.mu_g + shift, "var_g": lat.var_g,
    }
    return lat, cols


# ------------------------------------------------------------------ commands

def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_train(args):
    cfg = build_config(args.config, _overrides(args))
    model, nz, rows, summary, test = train(cfg)
    out = _out_dir(cfg.out)
    save_model(out / "model.npz", model, nz, {"seed": cfg.seed, "data": cfg.data})
    write_trace(out / "trace.csv", rows)
    if test is not None:
        data_mod.write_csv(out / "test.csv", test.X, test.y)
    write_report(out / "summary.txt", summary)
    for k, v in summary.items():
        print(f"{k} = {v}")
    return EXIT_OK


def _read_inputs(spec, d):
    if spec.startswith("grid:"):
        return parse_grid(spec, d)
    ds = data_mod.load_csv(spec)
    # a file with exactly d columns has no target; load_csv then took the last input as y
    full = np.column_stack([ds.X, ds.y])
    if full.shape[1] == d:
        return full
    if ds.X.shape[1] == d:
        return ds.X
    raise ConfigError(f"{spec}: {full.shape[1]} columns, model expects {d} inputs (optionally plus a target)")


def cmd_predict(args):
    archive = load_model(args.model)
    d = archive.normalizer.x_mean.size
    if not args.data:
        raise ConfigError("--data: input CSV or grid:lo:hi:count is required")
    X = _read_inputs(args.data, d)
    _, cols = predict_table(archive, X, args.workers or 1)
    header = [f"x{i + 1}" for i in range(d)] + list(cols)
    rows = np.column_stack([X] + list(cols.values()))
    out = Path(args.out or "predictions.csv")
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, header, rows.tolist())
    print(f"wrote {len(rows)} predictions to {out}")
    return EXIT_OK


def evaluate(archive, test_ds, gaussian=False, nodes=20, workers=1):
    """SMSE and MSLL on the normalized scale, trivial model from the training moments."""
    nz = archive.normalizer
    Xt, yt = nz.transform_x(test_ds.X), nz.transform_y(test_ds.y)
    lat = latent_predict(archive.model, Xt, workers)
    if gaussian:
        lpd = log_predictive_density_gaussian(lat, yt)
    else:
        lpd = log_predictive_density(lat, yt, nodes)
    # training targets are already normalized, so their moments are (0, 1) up to rounding
    ytrain = _train_targets(archive.model)
    return {"n_test": yt.size, "smse": smse(yt, lat.mu_f),
            "msll": msll(yt, lpd, float(np.mean(ytrain)), float(np.var(ytrain))),
            "density": "gaussian" if gaussian else f"quadrature-{nodes}"}, lpd


def _train_targets(model):
    from .distributed import DvshgpModel
    from .stochastic import SvshgpModel

    if isinstance(model, DvshgpModel):
        return np.concatenate([e.y for e in model.experts])
    if isinstance(model, SvshgpModel):
        return model.model.y
    return model.y


def cmd_eval(args):
    archive = load_model(args.model)
    if not args.data:
        raise ConfigError("--data: test CSV is required")
    test = load_dataset(args.data, args.seed or 0)
    if test.d != archive.normalizer.x_mean.size:
        raise ConfigError(f"test data has {test.d} inputs, model expects {archive.normalizer.x_mean.size}")
    report, lpd = evaluate(archive, test, args.gaussian, workers=args.workers or 1)
    out = Path(args.out or "metrics.txt")
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    if args.per_point:
        write_table(out.with_suffix(".points.csv"), ["index", "log_density"], list(enumerate(lpd)))
    for k, v in report.items():
        print(f"{k} = {v}")
    return EXIT_OK


def cmd_check_grads(args, **grad_fns):
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    results = run_checks(seeds, args.tol, **grad_fns)
    lines = [r.line() for r in results]
    failed = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if failed:
        print("gradient check FAILED for: " + ", ".join(sorted({f"{r.suite}.{r.block}" for r in failed})),
              file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def bench_rows(cfg: RunConfig):
    kinds = [k.strip() for k in cfg.bench_models.split(",") if k.strip()]
    try:
        sizes = [int(s) for s in cfg.bench_sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bench_sizes: expected comma-separated integers, got {cfg.bench_sizes!r}") from None
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"bench_models: unknown kind {k!r}")
    name, kw = parse_spec(cfg.data)
    rows = []
    for kind in kinds:
        for n in sizes:
            spec = f"{name}:" + ",".join([f"n={n}"] + [f"{k}={v}" for k, v in kw.items() if k != "n"])
            sub = build_config(None, {**{f.name: getattr(cfg, f.name) for f in fields(RunConfig)},
                                      "model": kind, "data": spec, "test_fraction": cfg.test_fraction or 0.2})
            model, nz, _, summary, test = train(sub)
            report, _ = evaluate(Archive(kind, model, nz), test, cfg.gaussian_density, workers=sub.n_workers)
            rows.append([kind, n, summary["wall_time"], summary["final_elbo"], report["smse"], report["msll"]])
    return ["kind", "n", "train_seconds", "final_elbo", "smse", "msll"], rows


def cmd_bench(args):
    cfg = build_config(args.config, _overrides(args))
    header, rows = bench_rows(cfg)
    out = _out_dir(cfg.out)
    write_table(out / "bench.csv", header, rows)
    print(" ".join(f"{h:>14}" for h in header))
    for r in rows:
        print(" ".join(f"{v:>14.6g}" if isinstance(v, float) else f"{v!s:>14}" for v in r))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _overrides(args):
    return {"model": args.model, "data": args.data, "seed": args.seed, "workers": args.workers,
            "out": args.out, "m": args.m, "u": args.u, "experts": args.experts, "batch": args.batch}


def build_parser():
    p = argparse.ArgumentParser(prog="vshgp", description="Sparse heteroscedastic GP regression.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model_help="model kind: vshgp, svshgp or dvshgp"):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--model", help=model_help)
        sp.add_argument("--data", help="CSV path or generator spec (toy1d:n=500, sinc2d:n=2000)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="worker threads (default: $VSHGP_WORKERS or all cores)")
        sp.add_argument("--out", help="output directory or file")

    t = sub.add_parser("train", help="train a model and write archive, trace and summary")
    common(t)
    for flag in ("m", "u", "experts", "batch"):
        t.add_argument(f"--{flag}", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict at CSV inputs or a grid:lo:hi:count spec")
    common(pr, "model archive (.npz)")
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="SMSE and MSLL of an archive on a test CSV")
    common(ev, "model archive (.npz)")
    ev.add_argument("--gaussian", action="store_true", help="moment-matched Gaussian density for MSLL")
    ev.add_argument("--per-point", action="store_true", help="also write per-point log densities")
    ev.set_defaults(func=cmd_eval)

    cg = sub.add_parser("check-grads", help="finite-difference checks of every gradient block")
    cg.add_argument("--seed", type=int, default=0, help="first seed")
    cg.add_argument("--seeds", type=int, default=20, help="number of seeds")
    cg.add_argument("--tol", type=float, default=1e-4)
    cg.add_argument("--out", help="report file")
    cg.set_defaults(func=cmd_check_grads)

    b = sub.add_parser("bench", help="timing and accuracy across model kinds and sizes")
    common(b)
    for flag in ("m", "u", "experts", "batch"):
        b.add_argument(f"--{flag}", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None, **grad_fns):
    args = build_parser().parse_args(argv)
    try:
        if args.func is cmd_check_grads:
            return args.func(args, **grad_fns)
        return args.func(args)
    except (ConfigError, data_mod.DataError, ArchiveError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        for k, v in getattr(exc, "diagnostics", {}).items():
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
