"""Command-line front end: ``tmhmc simulate | run | summary``.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 runtime
failure.
"""

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np

from tmhmc import diagnostics, eis, hmc, transport
from tmhmc.errors import ConfigError, DataError, TmhmcError, Unsupported
from tmhmc.models import Dataset, get_model, simulate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
MODELS = ("sv", "gamma", "cev", "wishart", "lingauss")
MAPS = ("prior", "laplace", "fisher", "eis")
LOGW_TOL = 1e-6


@dataclass
class RunConfig:
    model: str = "sv"
    map: str = "laplace"
    K: int = 1
    J: int = 2
    r: int = 6
    L: int = 4
    eps: Optional[float] = None
    iters: int = 1500
    burnin: int = 500
    replicas: int = 1
    seed: int = 0
    data: Optional[str] = None
    out: str = "tmhmc_out"
    integrator: str = "ld"

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.map not in MAPS:
            raise ConfigError(f"unknown map {self.map!r}")
        if self.K < 0 or self.J < 1 or self.r < 4 or self.L < 1:
            raise ConfigError("need K >= 0, J >= 1, r >= 4 and L >= 1")
        if self.eps is not None and not self.eps > 0:
            raise ConfigError("eps must be positive")
        if not self.iters > self.burnin >= 0:
            raise ConfigError("need iters > burnin >= 0")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.integrator not in ("ld", "leapfrog"):
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.data is None:
            raise ConfigError("a data file is required (--data)")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value, where):
    typ = _FIELD_TYPES[key]
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (Optional[float], "Optional[float]"):
            return None if value.lower() in ("", "none") else float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"{where}: bad value {value!r} for {key}") from None


def read_config(path):
    """Flat ``key = value`` file with ``#`` comments."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value, f"{path}:{n}")
    return out


def resolve_config(args):
    """Defaults, then config-file keys, then command-line flags."""
    values = asdict(RunConfig())
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for key in _FIELD_TYPES:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# --- data files ------------------------------------------------------------------


def write_data(path, dataset):
    y = np.asarray(dataset.y, dtype=float)
    with open(path, "w", newline="") as fh:
        if y.ndim == 1:
            fh.write("t,y\n")
            for t, v in enumerate(y, 1):
                fh.write(f"{t},{float(v)!r}\n")
        else:
            fh.write("t,i,j,value\n")
            r = y.shape[1]
            for t in range(y.shape[0]):
                for i in range(r):
                    for j in range(i, r):
                        fh.write(f"{t + 1},{i + 1},{j + 1},{float(y[t, i, j])!r}\n")


def _parse_int(s, where):
    try:
        return int(s)
    except ValueError:
        raise DataError(f"{where}: expected an integer, got {s!r}") from None


def _parse_float(s, where):
    try:
        return float(s)
    except ValueError:
        raise DataError(f"{where}: expected a number, got {s!r}") from None


def read_data(path):
    """Load ``t,y`` or ``t,i,j,value`` CSV into a Dataset."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read data {path}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [(n, r) for n, r in enumerate(rows[1:], 2) if r]
    if not body:
        raise DataError(f"{path}: no data rows")
    if header == ["t", "y"]:
        y = []
        for n, row in body:
            where = f"{path}:{n}"
            if len(row) != 2:
                raise DataError(f"{where}: expected 2 fields")
            if _parse_int(row[0], where) != len(y) + 1:
                raise DataError(f"{where}: t must count up from 1")
            y.append(_parse_float(row[1], where))
        return Dataset(y=np.array(y))
    if header == ["t", "i", "j", "value"]:
        entries = {}
        for n, row in body:
            where = f"{path}:{n}"
            if len(row) != 4:
                raise DataError(f"{where}: expected 4 fields")
            t, i, j = (_parse_int(v, where) for v in row[:3])
            if min(t, i, j) < 1:
                raise DataError(f"{where}: indices are 1-based")
            if i > j:
                raise DataError(f"{where}: only upper-triangle entries (i <= j) are allowed")
            if (t, i, j) in entries:
                raise DataError(f"{where}: duplicate entry")
            entries[(t, i, j)] = _parse_float(row[3], where)
        D = max(k[0] for k in entries)
        r = max(k[2] for k in entries)
        Y = np.full((D, r, r), np.nan)
        for (t, i, j), v in entries.items():
            Y[t - 1, i - 1, j - 1] = v
            Y[t - 1, j - 1, i - 1] = v
        if np.isnan(Y).any():
            t = int(np.argwhere(np.isnan(Y))[0][0]) + 1
            raise DataError(f"{path}: matrix for t={t} is incomplete")
        return Dataset(y=Y)
    raise DataError(f"{path}:1: header must be 't,y' or 't,i,j,value'")


def model_for(name, dataset=None, dim=3):
    if name == "wishart":
        r = dataset.y.shape[1] if dataset is not None else dim
        return get_model("wishart", r=int(r))
    return get_model(name)


# --- simulate ----------------------------------------------------------------------


def parse_theta(text, model):
    values = dict(model.default_theta)
    if text:
        for item in text.split(","):
            if "=" not in item:
                raise ConfigError(f"bad --theta item {item!r}; expected name=value")
            k, v = (p.strip() for p in item.split("=", 1))
            if k not in model.param_names:
                raise ConfigError(f"unknown parameter {k!r} for {model.name}")
            try:
                values[k] = float(v)
            except ValueError:
                raise ConfigError(f"bad value for {k}: {v!r}") from None
    return values


def cmd_simulate(model_name, theta, D, seed, out, dim=3):
    model = model_for(model_name, dim=dim)
    values = parse_theta(theta, model) if not isinstance(theta, dict) else theta
    if D < 2:
        raise ConfigError("simulation requires D >= 2")
    ds = simulate(model, values, D, seed)
    write_data(out, ds)
    return ds


# --- run -------------------------------------------------------------------------------


def draws_header(model, S):
    cols = ["iter", "accept", "delta_H", *model.param_names]
    if S == 1:
        cols += ["x_1", "u_1"]
    else:
        for s in range(S):
            cols += [f"x_{s + 1}_1", f"u_{s + 1}_1"]
    return cols


def write_draws(path, chain, model, burnin):
    S = chain.x_first.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(draws_header(model, S)) + "\n")
        for k in range(chain.n):
            vals = [str(burnin + k + 1), str(int(chain.accept[k])), repr(float(chain.delta_H[k]))]
            vals += [repr(float(v)) for v in chain.params[k]]
            for s in range(S):
                vals += [repr(float(chain.x_first[k, s])), repr(float(chain.u_first[k, s]))]
            fh.write(",".join(vals) + "\n")


def write_latent_moments(path, chain):
    """Plot-ready posterior mean and std of every u and x component."""
    um, us = np.atleast_2d(chain.u_mean), np.atleast_2d(chain.u_sd)
    xm, xs = np.atleast_2d(chain.x_mean), np.atleast_2d(chain.x_sd)
    with open(path, "w", newline="") as fh:
        fh.write("series,t,u_mean,u_sd,x_mean,x_sd\n")
        for s in range(um.shape[0]):
            for t in range(um.shape[1]):
                vals = (um[s, t], us[s, t], xm[s, t], xs[s, t])
                fh.write(f"{s + 1},{t + 1}," + ",".join(repr(float(v)) for v in vals) + "\n")


def logw_spread(target, theta, n=100, seed=0):
    """Std over standard-normal u of log omega at fixed theta."""
    U = np.random.default_rng(seed).standard_normal((n,) + target.u_shape)
    f = jax.jit(jax.vmap(target.log_weight, in_axes=(None, 0)))
    lw = np.asarray(f(jnp.asarray(theta), jnp.asarray(U)))
    return float(np.std(lw)) if np.all(np.isfinite(lw)) else float("inf")


def _crn_seed(seed, replica):
    return int(np.random.SeedSequence([int(seed), int(replica)]).generate_state(1)[0])


def run_experiment(cfg, dataset=None, theta0=None, log=print):
    """Run ``cfg.replicas`` chains; returns (model, chains, summaries, info)."""
    if dataset is None:
        dataset = read_data(cfg.data)
    model = model_for(cfg.model, dataset)
    kind = transport.map_kind(cfg.map, cfg.K, cfg.J, cfg.r)
    transport.check_supported(model, kind)
    data = model.prepare(dataset)
    D = dataset.D
    if theta0 is None:
        theta0 = np.asarray(model.theta_from_dict(model.default_theta))
    theta_hat, mass = hmc.estimate_mass_matrix(model, kind, data, theta0)
    hcfg = hmc.HmcConfig(
        L=cfg.L, eps=cfg.eps, iters=cfg.iters, burnin=cfg.burnin, seed=cfg.seed,
        integrator=cfg.integrator,
    )

    def one(rep):
        Z = None
        if isinstance(kind, transport.Eis):
            Z = eis.make_crn(_crn_seed(cfg.seed, rep), model.n_series, kind.r, D).Z
        target = transport.ModifiedTarget(model, kind, data, Z)
        chain = hmc.run_chain(target, hcfg, mass, theta_hat, chain_index=rep)
        chain.extras["logw_sd"] = logw_spread(target, theta_hat, seed=cfg.seed)
        return chain

    threads = int(os.environ.get("TMHMC_THREADS", "0") or 0) or (os.cpu_count() or 1)
    workers = max(1, min(cfg.replicas, threads))
    if workers == 1:
        chains = [one(rep) for rep in range(cfg.replicas)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chains = list(pool.map(one, range(cfg.replicas)))
    summaries = [diagnostics.summarize(c) for c in chains]
    info = {"theta_hat": theta_hat, "mass": np.asarray(mass.M)}
    return model, chains, summaries, info


SUMMARY_HEADER = ["quantity", "mean", "std", "ess", "ess_per_s", "replica"]


def _fmt(v):
    return repr(float(v))


def summary_rows(summaries):
    rows = []
    for rep, s in enumerate(summaries, 1):
        for q in s.quantities:
            rows.append([q.name, _fmt(q.mean), _fmt(q.std), _fmt(q.ess), _fmt(q.ess_per_s), str(rep)])
        for key in ("accept_rate", "wall_time", "logw_sd"):
            if key == "wall_time":
                val = s.wall_time
            elif key in s.extras:
                val = s.extras[key]
            else:
                continue
            rows.append([key, _fmt(val), "", "", "", str(rep)])
    agg = diagnostics.aggregate(summaries)
    for how in ("min", "mean"):
        for name, vals in agg[how].items():
            rows.append(
                [name, _fmt(vals["mean"]), _fmt(vals["std"]), _fmt(vals["ess"]),
                 _fmt(vals["ess_per_s"]), how]
            )
    return rows


def write_summary(path, summaries):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(SUMMARY_HEADER) + "\n")
        for row in summary_rows(summaries):
            fh.write(",".join(row) + "\n")


def cmd_run(cfg, log=print):
    model, chains, summaries, info = run_experiment(cfg, log=log)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for rep, (chain, summ) in enumerate(zip(chains, summaries), 1):
        write_draws(out / f"draws_{rep}.csv", chain, model, cfg.burnin)
        write_latent_moments(out / f"latent_{rep}.csv", chain)
        summ.extras["logw_sd"] = chain.extras["logw_sd"]
        side = {
            "replica": rep,
            "model": cfg.model,
            "map": cfg.map,
            "wall_time": chain.wall_time,
            "burnin_time": chain.burnin_time,
            "accept_rate": chain.accept_rate,
            "logw_sd": chain.extras["logw_sd"],
            "u_sd_range": list(diagnostics.u_sd_check(chain)[1:]),
            "theta_hat": [float(v) for v in info["theta_hat"]],
            "config": asdict(cfg),
        }
        (out / f"draws_{rep}.json").write_text(json.dumps(side, indent=2))
    write_summary(out / "summary.csv", summaries)
    for rep, s in enumerate(summaries, 1):
        log(f"replica {rep}: accept {s.extras['accept_rate']:.3f}, "
            f"sampling time {s.wall_time:.2f}s, min ESS {s.min_ess:.0f}")
    worst = max(c.extras["logw_sd"] for c in chains)
    verdict = "PASS" if worst < LOGW_TOL else "FAIL"
    note = "" if verdict == "PASS" or cfg.model == "lingauss" else "; exact only for lingauss"
    log(f"log-weight constancy: {verdict} (max sd of log omega over u = {worst:.3g}{note})")
    checks = [diagnostics.u_sd_check(c) for c in chains]
    lo, hi = min(c[1] for c in checks), max(c[2] for c in checks)
    verdict = "PASS" if all(c[0] for c in checks) else "FAIL"
    band = diagnostics.U_SD_BAND
    log(f"u posterior std in [{band[0]}, {band[1]}]: {verdict} (range {lo:.3f} to {hi:.3f})")
    log(f"wrote {out / 'summary.csv'}")
    return summaries


# --- summary ---------------------------------------------------------------------------


def read_draws(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read draws {path}: {exc}") from None
    if len(rows) < 2:
        raise DataError(f"{path}: no draws")
    header = rows[0]
    if header[:3] != ["iter", "accept", "delta_H"]:
        raise DataError(f"{path}:1: not a draws file")
    cols = {h: [] for h in header}
    for n, row in enumerate(rows[1:], 2):
        if len(row) != len(header):
            raise DataError(f"{path}:{n}: expected {len(header)} fields")
        for h, v in zip(header, row):
            cols[h].append(_parse_float(v, f"{path}:{n}"))
    return {h: np.array(v) for h, v in cols.items()}


def summarize_draws_file(path):
    cols = read_draws(path)
    side = Path(path).with_suffix(".json")
    wall = float("nan")
    extras = {}
    if side.exists():
        meta = json.loads(side.read_text())
        wall = float(meta.get("wall_time", float("nan")))
        if "logw_sd" in meta:
            extras["logw_sd"] = float(meta["logw_sd"])
    quantities = {h: v for h, v in cols.items() if h not in ("iter", "accept", "delta_H")}
    summ = diagnostics.summarize_columns(quantities, wall)
    summ.extras["accept_rate"] = float(np.mean(cols["accept"]))
    summ.extras.update(extras)
    return summ


def cmd_summary(paths, out=None, log=print):
    summaries = [summarize_draws_file(p) for p in paths]
    names = summaries[0].names
    if any(s.names != names for s in summaries):
        raise DataError("draws files have different columns")
    if out:
        write_summary(out, summaries)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(summary_rows(summaries))
    return summaries


# --- entry point -------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="tmhmc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="write a synthetic data set")
    s.add_argument("--model", required=True, choices=MODELS)
    s.add_argument("--theta", default=None, help="name=value,... (defaults for the rest)")
    s.add_argument("--D", type=int, required=True, help="number of time points")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dim", type=int, default=3, help="matrix dimension for wishart")
    s.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run HMC chains on a data file")
    r.add_argument("--config", default=None)
    r.add_argument("--model", choices=MODELS, default=None)
    r.add_argument("--map", choices=MAPS, default=None)
    r.add_argument("--K", type=int, default=None, help="Newton steps of the Laplace map")
    r.add_argument("--J", type=int, default=None, help="EIS fixed-point sweeps")
    r.add_argument("--r", type=int, default=None, help="EIS trajectories per sweep")
    r.add_argument("--L", type=int, default=None, help="integrator steps per proposal")
    r.add_argument("--eps", type=float, default=None, help="step size (default (pi/2)/L)")
    r.add_argument("--iters", type=int, default=None, help="total iterations incl. burn-in")
    r.add_argument("--burnin", type=int, default=None)
    r.add_argument("--replicas", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--data", default=None)
    r.add_argument("--out", default=None)
    r.add_argument("--integrator", choices=("ld", "leapfrog"), default=None)

    m = sub.add_parser("summary", help="recompute summaries from draws files")
    m.add_argument("files", nargs="+")
    m.add_argument("--out", default=None)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.cmd == "simulate":
            ds = cmd_simulate(args.model, args.theta, args.D, args.seed, args.out, args.dim)
            truth = ",".join(f"{k}={v!r}" for k, v in ds.theta.items())
            print(f"true theta: {truth}")
            print(f"wrote {args.out} (D={ds.D})")
        elif args.cmd == "run":
            cmd_run(resolve_config(args))
        else:
            cmd_summary(args.files, args.out)
    except ConfigError as exc:
        print(f"tmhmc: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Unsupported as exc:
        print(f"tmhmc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"tmhmc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TmhmcError, FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"tmhmc: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
