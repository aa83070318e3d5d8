"""``umnn train|eval|sample|density-grid``.

Training options come from, in increasing priority: built-in defaults (the
2D-toy configuration), a ``--config`` file of ``key=value`` lines, and
command-line flags. The seed falls back to ``UMNN_SEED`` when neither the
file nor the flags set it.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from .errors import ConfigurationError, DimensionError, UMNNError
from .flow import data_log_density, model_sample
from .serialize import load_model
from .toy import GENERATORS, write_csv
from .train import RunConfig, TrainingAborted, deterministic_threads, load_points, train

EVAL_DEFAULT_POINTS = 10000


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment, dashes in keys equal underscores."""
    known = set(RunConfig.field_names())
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def _coerce(field: dataclasses.Field, value):
    if not isinstance(value, str):
        return value
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            lowered = value.strip().lower()
            if lowered not in {"1", "0", "true", "false", "yes", "no", "on", "off"}:
                raise ValueError(value)
            return lowered in {"1", "true", "yes", "on"}
    except ValueError:
        raise ConfigurationError(f"invalid value {value!r} for {field.name}") from None
    return value


def build_config(cli_values: dict, config_path=None, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values: dict = {}
    if config_path:
        values.update(read_config_file(config_path))
    values.update({k: v for k, v in cli_values.items() if v is not None})
    if "seed" not in values and environ.get("UMNN_SEED"):
        values["seed"] = environ["UMNN_SEED"]
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    return RunConfig(**{k: _coerce(fields[k], v) for k, v in values.items()}).validate()


def cmd_train(config: RunConfig):
    return train(config)


def cmd_eval(model_path, data: str, N: int = 100, n_points: int = EVAL_DEFAULT_POINTS,
             seed: int = 0, deterministic: bool = False) -> float:
    """Mean NLL of ``data`` (CSV path or toy name) in raw data units."""
    model = load_model(model_path)
    if data not in GENERATORS and not os.path.isfile(data):
        raise ConfigurationError(f"data must be a toy name {sorted(GENERATORS)} or a CSV file, got {data!r}")
    x = load_points(data, n_points, seed)
    if x.shape[1] != model.d:
        raise DimensionError(f"model has d={model.d} but data has {x.shape[1]} columns")
    if x.shape[0] == 0:
        raise ConfigurationError("no points to evaluate")
    with deterministic_threads(deterministic):
        return float(-np.mean(data_log_density(model, x, N)))


def cmd_sample(model_path, n: int, temperature: float = 1.0, seed: int = 0, out=None,
               tol: float = 1e-6) -> np.ndarray:
    """Raw-space samples; written as CSV when ``out`` is given (header only for ``n == 0``)."""
    model = load_model(model_path)
    x = model_sample(model, n, temperature, seed, tol) * model.std + model.mean
    if out is not None:
        write_csv(out, x)
    return x


def cell_centers(lo: float, hi: float, resolution: int) -> np.ndarray:
    h = (hi - lo) / resolution
    return lo + h * (np.arange(resolution) + 0.5)


def density_grid(model, xmin, xmax, ymin, ymax, resolution: int, N: int | None = None):
    """Log-density at cell centers; ``grid[i, j]`` is at ``(xs[j], ys[i])``."""
    if model.d != 2:
        raise DimensionError(f"density grids need a 2-dimensional model, got d={model.d}")
    if int(resolution) != resolution or resolution < 2:
        raise ConfigurationError(f"resolution must be an integer >= 2, got {resolution}")
    if not (xmax > xmin and ymax > ymin):
        raise ConfigurationError("grid bounds must satisfy xmin < xmax and ymin < ymax")
    xs = cell_centers(xmin, xmax, resolution)
    ys = cell_centers(ymin, ymax, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return xs, ys, data_log_density(model, pts, N).reshape(resolution, resolution)


def write_grid_csv(path, xs, ys, grid) -> None:
    gx, gy = np.meshgrid(xs, ys)
    table = np.column_stack([gx.ravel(), gy.ravel(), grid.ravel()])
    np.savetxt(path, table, fmt="%.17g", delimiter=",", header="x,y,log_density", comments="")


def write_pgm(path, grid) -> None:
    """8-bit binary PGM of ``exp(grid)`` scaled linearly from its min..max; top row is the largest y."""
    p = np.exp(grid)
    lo, hi = float(p.min()), float(p.max())
    scaled = np.zeros_like(p) if hi <= lo else (p - lo) / (hi - lo) * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)[::-1]
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def cmd_density_grid(model_path, xmin, xmax, ymin, ymax, resolution: int, out,
                     pgm=None, N: int | None = None) -> float:
    """Write the grid CSV (and PGM); returns the Riemann sum of the density over the box."""
    model = load_model(model_path)
    xs, ys, grid = density_grid(model, xmin, xmax, ymin, ymax, resolution, N)
    write_grid_csv(out, xs, ys, grid)
    if pgm is not None:
        write_pgm(pgm, grid)
    cell = (xmax - xmin) / resolution * (ymax - ymin) / resolution
    return float(np.exp(grid).sum() * cell)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umnn", description="Unconstrained monotonic neural network flows.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a UMNN-MAF model by maximum likelihood")
    t.add_argument("--config", help="file of key=value lines")
    t.add_argument("--dataset", help=f"toy name ({', '.join(sorted(GENERATORS))}) or CSV path")
    t.add_argument("--n-points", type=int, help="points drawn for toy datasets")
    t.add_argument("--flows", type=int, help="number of stacked flow steps")
    t.add_argument("--embedding", help="embedding network hidden layers, e.g. 4x50")
    t.add_argument("--integrand", help="integrand network hidden layers, e.g. 4x50")
    t.add_argument("--q", type=int, help="embedding size per dimension")
    t.add_argument("--steps", help="integration steps per batch: an integer or 'rand'")
    t.add_argument("--eval-steps", type=int, help="integration steps for validation")
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--weight-decay", type=float, help="decoupled weight decay")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, help="defaults to $UMNN_SEED, then 0")
    t.add_argument("--out", help="output directory for model.umnn and metrics.csv")
    t.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded BLAS and wall_ms recorded as 0")

    e = sub.add_parser("eval", help="mean negative log-likelihood of a data set")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="CSV path or toy name")
    e.add_argument("--steps", type=int, default=100)
    e.add_argument("--n-points", type=int, default=EVAL_DEFAULT_POINTS, help="points drawn for toy data")
    e.add_argument("--seed", type=int)
    e.add_argument("--deterministic", action="store_true")

    s = sub.add_parser("sample", help="draw samples by numerical inversion")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--out", required=True)

    g = sub.add_parser("density-grid", help="log-density on a regular 2D grid")
    g.add_argument("--model", required=True)
    g.add_argument("--xmin", type=float, default=-4.0)
    g.add_argument("--xmax", type=float, default=4.0)
    g.add_argument("--ymin", type=float, default=-4.0)
    g.add_argument("--ymax", type=float, default=4.0)
    g.add_argument("--resolution", type=int, default=100)
    g.add_argument("--steps", type=int, default=100)
    g.add_argument("--out", required=True, help="CSV with columns x,y,log_density")
    g.add_argument("--pgm", help="optional 8-bit PGM heatmap of the density")
    return parser


def _seed(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("UMNN_SEED")
    try:
        return int(env) if env else 0
    except ValueError:
        raise ConfigurationError(f"UMNN_SEED must be an integer, got {env!r}") from None


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            names = RunConfig.field_names()
            config = build_config({k: v for k, v in vars(args).items() if k in names}, args.config)
            result = cmd_train(config)
            print(f"best valid NLL {result.best_valid_nll!r} at epoch {result.best_epoch}")
        elif args.command == "eval":
            print(repr(cmd_eval(args.model, args.data, args.steps, args.n_points,
                                _seed(args.seed), args.deterministic)))
        elif args.command == "sample":
            cmd_sample(args.model, args.n, args.temperature, _seed(args.seed), args.out, args.tol)
        else:
            mass = cmd_density_grid(args.model, args.xmin, args.xmax, args.ymin, args.ymax,
                                    args.resolution, args.out, args.pgm, args.steps)
            print(f"mass {mass!r}")
    except TrainingAborted as err:
        print(f"umnn: training aborted: {err}", file=sys.stderr)
        return 3
    except (UMNNError, ValueError, OSError) as err:
        print(f"umnn: {type(err).__name__}: {err}", file=sys.stderr)
        return 2 if isinstance(err, ValueError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
