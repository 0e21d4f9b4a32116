"""Command-line driver: ``kgans dataset | train | eval | ot``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.
Run directories default to ``$KGANS_OUTPUT_ROOT`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from kgans.data import PRESETS, Dataset, ToySpec, load_csv, make_toy, save_csv
from kgans.ensemble import (
    HISTORY_FIELDS,
    CellSampler,
    KGansTrainer,
    TrainConfig,
    run_kgenerators,
    sample_ensemble,
)
from kgans.errors import ContractError
from kgans.gan import GanConfig
from kgans.metrics import GridSpec, MaskSet, coverage, export_figure, precision
from kgans.partition import Tessellation, cell_masses
from kgans.transport import DiscreteMeasure, EmpiricalMeasure, lp_cost, ot_exact_small, solve_dual

log = logging.getLogger("kgans")

OUTPUT_ROOT_ENV = "KGANS_OUTPUT_ROOT"
CHECKPOINT_FORMAT = "kgans-checkpoint"
CHECKPOINT_VERSION = 1

TRAIN_DEFAULTS = {
    "mode": "kgans",
    "preset": None,
    "data": None,
    "n": 10_000,
    "data_seed": 0,
    "centers": None,
    "radius": None,
    "k": 1,
    "p": 2.0,
    "epochs": 10,
    "iterations": 1000,
    "batch_size": 100,
    "lr_prototype": 1e-3,
    "burn_in": 600,
    "init": "kmeans",
    "seed": 0,
    "patience": 50,
    "parallel_epochs": False,
    "critic_steps": 5,
    "penalty_coef": 10.0,
    "penalty": "ratio",
    "lr_generator": 1e-4,
    "lr_critic": 1e-4,
    "latent_dim": 10,
    "rule": "medoid",
    "iters": 100,
}
RUN_FILES = ("config.json", "data.csv", "history.csv", "final.json", "metrics.json", "figure.svg")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def parse_points(text: str, field: str) -> list[list[float]]:
    """``"x,y;x,y"`` or a JSON list of points."""
    try:
        if text.strip().startswith("["):
            pts = json.loads(text)
        else:
            pts = [[float(v) for v in chunk.split(",")] for chunk in text.split(";") if chunk.strip()]
        pts = [[float(v) for v in p] for p in pts]
    except (ValueError, TypeError) as exc:
        raise ContractError(f"{field}: cannot parse points from {text!r} ({exc})") from None
    if not pts or len({len(p) for p in pts}) != 1:
        raise ContractError(f"{field}: need one or more points of equal dimension")
    return pts


def parse_floats(text: str, field: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ContractError(f"{field}: cannot parse numbers from {text!r}") from None


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def toy_spec(cfg: dict) -> ToySpec | None:
    """Geometry from a preset, optionally overridden by explicit centers/radius."""
    geometry = dict(PRESETS[cfg["preset"].lower()]) if cfg.get("preset") else {}
    if cfg.get("preset") and cfg["preset"].lower() not in PRESETS:
        raise ContractError(f"preset: unknown preset {cfg['preset']!r}, choose from {sorted(PRESETS)}")
    if cfg.get("centers") is not None:
        geometry["centers"] = cfg["centers"]
    if cfg.get("radius") is not None:
        geometry["radius"] = cfg["radius"]
    if not geometry:
        return None
    if "centers" not in geometry or "radius" not in geometry:
        raise ContractError("centers: custom geometry needs both centers and radius")
    return ToySpec(geometry["centers"], geometry["radius"], cfg["n"], cfg["data_seed"])


def load_dataset(cfg: dict) -> Dataset:
    if cfg.get("data"):
        return load_csv(cfg["data"])
    spec = toy_spec(cfg)
    if spec is None:
        raise ContractError("data: give --data FILE or a --preset (or --centers with --radius)")
    return make_toy(spec)


def write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def read_checkpoint(path: Path) -> dict:
    blob = json.loads(path.read_text())
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: not a version {CHECKPOINT_VERSION} kgans checkpoint")
    return blob


def checkpoint(kind: str, **payload) -> dict:
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": kind, **payload}


# ---------------------------------------------------------------- dataset


def cmd_dataset(args) -> int:
    cfg = {"preset": args.preset, "centers": args.centers, "radius": args.radius, "n": args.n, "data_seed": args.seed}
    if cfg["centers"] is not None:
        cfg["centers"] = parse_points(cfg["centers"], "centers")
    spec = toy_spec(cfg)
    if spec is None:
        raise ContractError("preset: give --preset or both --centers and --radius")
    ds = make_toy(spec)
    out = Path(args.out) if args.out else output_root() / f"{args.preset or 'custom'}-n{args.n}-seed{args.seed}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out)
    print(out)
    return 0


# ---------------------------------------------------------------- train


def resolve_train_config(args) -> dict:
    cfg = dict(TRAIN_DEFAULTS)
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ContractError(f"config: {args.config} is not valid JSON ({exc})") from None
        unknown = set(from_file) - set(TRAIN_DEFAULTS)
        if unknown:
            raise ContractError(f"config: unknown keys {sorted(unknown)}")
        cfg.update(from_file)
    flags = {k: v for k, v in vars(args).items() if k in TRAIN_DEFAULTS}
    cfg.update(flags)
    if isinstance(cfg["centers"], str):
        cfg["centers"] = parse_points(cfg["centers"], "centers")
    if cfg["data"]:
        cfg["data"] = str(Path(cfg["data"]).resolve())
    if cfg["mode"] not in ("kgans", "kgenerators"):
        raise ContractError(f"mode: must be 'kgans' or 'kgenerators', got {cfg['mode']!r}")
    if cfg["k"] < 1:
        raise ContractError(f"k: must be at least 1, got {cfg['k']}")
    if not cfg["p"] >= 1:
        raise ContractError(f"p: must be at least 1, got {cfg['p']}")
    build_configs(cfg)
    return cfg


def build_configs(cfg: dict) -> tuple[TrainConfig, GanConfig]:
    train = TrainConfig(**{f: cfg[f] for f in (
        "epochs", "iterations", "batch_size", "lr_prototype", "burn_in", "init", "seed", "patience", "parallel_epochs"
    )})
    gan = GanConfig(
        latent_dim=cfg["latent_dim"],
        critic_steps=cfg["critic_steps"],
        penalty_coef=cfg["penalty_coef"],
        penalty=cfg["penalty"],
        lr_generator=cfg["lr_generator"],
        lr_critic=cfg["lr_critic"],
        batch_size=cfg["batch_size"],
    )
    return train, gan


def prepare_run_dir(run_dir: Path, cfg: dict, force: bool) -> Path | None:
    """Create or validate the run directory; returns the checkpoint to resume from, if any."""
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        same = json.loads(cfg_path.read_text()) == cfg
        complete = (run_dir / "final.json").exists()
        if force:
            log.info("--force: clearing %s", run_dir)
            for name in RUN_FILES:
                (run_dir / name).unlink(missing_ok=True)
            for f in (run_dir / "checkpoints").glob("*.json"):
                f.unlink()
        elif not same:
            raise ContractError(f"out: {run_dir} holds a run with a different config; pass --force to overwrite")
        elif complete:
            raise ContractError(f"out: {run_dir} already holds a finished run; pass --force to retrain")
        else:
            ckpts = sorted((run_dir / "checkpoints").glob("epoch-*.json"))
            return ckpts[-1] if ckpts else None
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    write_json(cfg_path, cfg)
    return None


def write_history(path: Path, rows: list[dict], dim: int, append: bool) -> None:
    fields = list(HISTORY_FIELDS) + [f"y{d}" for d in range(dim)]
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        if not append:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_history(path: Path, before_epoch: int) -> list[dict]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["epoch"]) < before_epoch]


def train_kgans(run_dir: Path, cfg: dict, data: np.ndarray, resume: Path | None) -> None:
    train_cfg, gan_cfg = build_configs(cfg)
    gan_cfg.data_dim = data.shape[1]
    cost = lp_cost(cfg["p"])
    history_path = run_dir / "history.csv"
    dim = data.shape[1]
    if resume is not None:
        trainer = KGansTrainer.from_state_dict(read_checkpoint(resume)["state"], data, cost)
        kept = read_history(history_path, trainer.epoch)
        write_history(history_path, kept, dim, append=False)
        log.info("resuming %s at epoch %d", run_dir, trainer.epoch)
    else:
        trainer = KGansTrainer.create(data, train_cfg, gan_cfg, cost, cfg["k"])
        write_history(history_path, [], dim, append=False)
    while not trainer.done:
        start = len(trainer.history)
        trainer.run_epoch()
        write_history(history_path, trainer.history[start:], dim, append=True)
        write_json(run_dir / "checkpoints" / f"epoch-{trainer.epoch:04d}.json", checkpoint("kgans", state=trainer.state_dict()))
        log.info("epoch %d/%d prototypes %s", trainer.epoch, train_cfg.epochs, trainer.ensemble.prototypes.round(4).tolist())
    write_json(run_dir / "final.json", checkpoint("kgans", state=trainer.state_dict()))


def train_kgenerators(run_dir: Path, cfg: dict, data: np.ndarray) -> None:
    res = run_kgenerators(data, cfg["k"], lp_cost(cfg["p"]), cfg["iters"], cfg["seed"], cfg["rule"])
    dim = data.shape[1]
    with (run_dir / "history.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "cell", "objective"] + [f"y{d}" for d in range(dim)])
        for it, (protos, obj) in enumerate(zip(res.trajectory, res.objective)):
            for j, y in enumerate(protos):
                writer.writerow([it, j, repr(obj)] + [repr(float(v)) for v in y])
    write_json(
        run_dir / "final.json",
        checkpoint(
            "kgenerators",
            prototypes=res.prototypes.tolist(),
            assignment=res.assignment.tolist(),
            objective=res.objective,
        ),
    )


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    ds = load_dataset(cfg)
    run_dir = Path(args.out) if getattr(args, "out", None) else output_root() / f"{cfg['mode']}-k{cfg['k']}-{config_hash(cfg)[:8]}"
    resume = prepare_run_dir(run_dir, cfg, getattr(args, "force", False))
    save_csv(ds, run_dir / "data.csv")
    if cfg["mode"] == "kgans":
        train_kgans(run_dir, cfg, ds.points, resume)
    else:
        train_kgenerators(run_dir, cfg, ds.points)
    print(run_dir)
    return 0


# ---------------------------------------------------------------- eval


def load_run(run_dir: Path):
    """Return (config, data, tessellation, weights, sampler) for a finished run."""
    cfg_path, final_path = run_dir / "config.json", run_dir / "final.json"
    if not cfg_path.exists() or not final_path.exists():
        raise ContractError(f"run: {run_dir} has no finished run (config.json and final.json needed)")
    cfg = json.loads(cfg_path.read_text())
    data = load_csv(run_dir / "data.csv").points
    final = read_checkpoint(final_path)
    cost = lp_cost(cfg["p"])
    if final["kind"] == "kgans":
        ens = KGansTrainer.from_state_dict(final["state"], data, cost).ensemble
        return cfg, data, ens.tessellation(), ens.weights, lambda n, seed: sample_ensemble(ens, n, seed)
    protos = np.asarray(final["prototypes"], dtype=np.float64)
    assign = np.asarray(final["assignment"])
    tess = Tessellation(protos, cost)
    weights = cell_masses(data, tess)
    samplers = [CellSampler(data[assign == j]) for j in range(len(protos))]

    def sample(n, seed):
        rng = np.random.default_rng(seed)
        cells = rng.choice(len(protos), size=n, p=weights)
        out = np.empty((n, data.shape[1]))
        for j, s in enumerate(samplers):
            idx = np.flatnonzero(cells == j)
            if len(idx):
                out[idx] = s.sample(len(idx), rng)
        return out

    return cfg, data, tess, weights, sample


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg, data, tess, weights, sample = load_run(run_dir)
    if args.samples < 1:
        raise ContractError(f"samples: must be positive, got {args.samples}")
    grid = GridSpec(args.bins)
    spec = toy_spec(cfg)
    masks = MaskSet.from_spec(spec) if spec is not None else None
    samples = sample(args.samples, args.seed)
    metrics = {
        "coverage": coverage(samples, masks, grid) if masks and data.shape[1] == 2 else None,
        "precision": precision(samples, masks) if masks and data.shape[1] == 2 else None,
        "cell_masses": [float(w) for w in weights],
        "prototypes": tess.prototypes.tolist(),
        "seed": args.seed,
        "config_hash": config_hash(cfg),
        "grid": {"bins": grid.bins, "low": grid.low, "high": grid.high},
        "n_samples": args.samples,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    out = Path(args.output) if args.output else run_dir / "metrics.json"
    write_json(out, metrics)
    if data.shape[1] == 2:
        fig = Path(args.figure) if args.figure else run_dir / "figure.svg"
        export_figure(fig, samples, tess, masks, data)
    print(json.dumps({k: metrics[k] for k in ("coverage", "precision", "cell_masses")}))
    return 0


# ---------------------------------------------------------------- ot


def cmd_ot(args) -> int:
    cfg = {**TRAIN_DEFAULTS, "preset": args.preset, "data": args.data, "n": args.n, "data_seed": args.data_seed}
    points = load_dataset(cfg).points
    atoms = np.asarray(parse_points(args.atoms, "atoms"))
    weights = parse_floats(args.weights, "weights") if args.weights else [1.0 / len(atoms)] * len(atoms)
    if len(weights) != len(atoms):
        raise ContractError(f"weights: got {len(weights)} weights for {len(atoms)} atoms")
    if atoms.shape[1] != points.shape[1]:
        raise ContractError(f"atoms: dimension {atoms.shape[1]} does not match data dimension {points.shape[1]}")
    nu = EmpiricalMeasure(points)
    mu = DiscreteMeasure(atoms, np.asarray(weights))
    cost = lp_cost(args.p)
    exact = ot_exact_small(nu, mu, cost) if args.exact else None
    sol = solve_dual(nu, mu, cost, lr=args.lr, max_iters=args.max_iters, tol=args.tol)
    report = {
        "n_points": len(points),
        "dual_value": sol.value,
        "dual_weights": sol.dual_weights.tolist(),
        "cell_masses": sol.cell_masses.tolist(),
        "target_weights": list(weights),
        "residual": sol.residual,
        "iterations": sol.iterations,
        "converged": sol.converged,
    }
    if exact is not None:
        report["exact_value"] = exact
        report["gap"] = abs(sol.value - exact)
    print(json.dumps(report, indent=2))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgans", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="write a toy dataset to CSV")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--centers", help='disk centers, "x,y;x,y" or JSON')
    p.add_argument("--radius", type=float)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: under the output root)")
    p.set_defaults(func=cmd_dataset)

    # flags left unset do not appear in the namespace, so a config file can fill them
    p = sub.add_parser("train", help="train k-GANs (or k-generators) into a run directory", argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file of settings; command-line flags take precedence")
    p.add_argument("--out", help="run directory (default: under $KGANS_OUTPUT_ROOT)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("--mode", choices=["kgans", "kgenerators"])
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--data", help="training CSV instead of a preset")
    p.add_argument("--n", type=int, help="points drawn for a preset")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--centers", help="custom disk centers (also used as evaluation masks)")
    p.add_argument("--radius", type=float)
    p.add_argument("--k", type=int, help="number of cells; 1 is the plain WGAN baseline")
    p.add_argument("--p", type=float, help="exponent of the Lp transport cost")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int, help="iterations per cell per epoch")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-prototype", type=float)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--init", choices=["kmeans", "uniform"])
    p.add_argument("--seed", type=int)
    p.add_argument("--patience", type=int, help="empty sub-batches tolerated before a prototype is reseeded")
    p.add_argument("--parallel-epochs", action="store_true")
    p.add_argument("--critic-steps", type=int)
    p.add_argument("--penalty-coef", type=float)
    p.add_argument("--penalty", choices=["ratio", "literal"])
    p.add_argument("--lr-generator", type=float)
    p.add_argument("--lr-critic", type=float)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--rule", choices=["medoid", "mean"], help="k-generators prototype update")
    p.add_argument("--iters", type=int, help="k-generators rounds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="coverage/precision metrics and an SVG figure for a run")
    p.add_argument("run", help="run directory")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--output", help="metrics JSON path (default: RUN/metrics.json)")
    p.add_argument("--figure", help="SVG path (default: RUN/figure.svg)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ot", help="solve the semi-discrete transport dual for given atoms")
    p.add_argument("--data", help="CSV of points")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--atoms", required=True, help='"x,y;x,y" or JSON')
    p.add_argument("--weights", help="comma-separated target masses (default uniform)")
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--exact", action="store_true", help="also solve exactly (at most 10 points)")
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--tol", type=float, default=1e-2)
    p.set_defaults(func=cmd_ot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"kgans {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ArithmeticError, RuntimeError) as exc:
        print(f"kgans {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
