"""Command-line surface: data generation, training, evaluation, interventions.

Every command resolves its configuration from defaults, an optional
``key=value`` config file and command-line overrides (in that order), and
writes the resolved configuration beside its outputs so any run can be
reproduced from that file. Exit codes: 0 success, 1 numeric or training
failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import datagen, diffnum, evaluate, objective
from .errors import (CheckpointLoadError, ContractViolationError,
                     DegenerateDataError, NumericError, ParseError,
                     PreconditionError, RangeError, TrainingDivergedError)
from .model import DcvaeModel
from .train import (TrainConfig, fit, load_checkpoint, save_checkpoint,
                    write_loss_log)

_USAGE_ERRORS = (ContractViolationError, ParseError, RangeError,
                 CheckpointLoadError, FileNotFoundError)
_NUMERIC_ERRORS = (TrainingDivergedError, NumericError, PreconditionError,
                   DegenerateDataError)

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_kv_file(path: Path) -> dict:
    kv = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ParseError("expected key=value", line=lineno)
        key, value = stripped.split("=", 1)
        kv[key.strip()] = value.strip()
    return kv


def _parse_edges(text: str):
    edges = []
    for part in text.replace(",", ";").split(";"):
        part = part.strip()
        if not part:
            continue
        if "->" not in part:
            raise ContractViolationError(f"bad edge {part!r}; use j->i")
        j, i = part.split("->", 1)
        edges.append((int(j), int(i)))
    return tuple(edges)


def _coerce_field(name: str, value: str):
    spec = {f.name: f.type for f in fields(TrainConfig)}
    if name not in spec:
        raise ContractViolationError(f"unknown config key {name!r}")
    if name == "custom_edges":
        return _parse_edges(value)
    ftype = spec[name]
    if ftype == "bool":
        low = value.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ContractViolationError(f"bad boolean for {name!r}: {value!r}")
    if ftype == "int":
        return int(value)
    if ftype == "float":
        return float(value)
    return value


def _build_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        for key, raw in _parse_kv_file(Path(args.config)).items():
            values[key] = _coerce_field(key, raw)
    for key, raw in getattr(args, "set", None) or []:
        values[key] = _coerce_field(key, raw)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = args.epochs
    if getattr(args, "mask", None) is not None:
        values["mask_kind"] = {"true": "true_graph", "full": "full_lower",
                               "file": "custom"}[args.mask]
        if args.mask == "file":
            if not getattr(args, "mask_file", None):
                raise ContractViolationError("--mask file requires --mask-file")
            values["custom_edges"] = _parse_edges(
                Path(args.mask_file).read_text())
    if getattr(args, "no_flow", False):
        values["flow_enabled"] = False
    if getattr(args, "no_cond_prior", False):
        values["conditional_prior_enabled"] = False
    return TrainConfig.from_dict(values)


def _write_resolved(out_dir: Path, command: str, config: TrainConfig | None,
                    extras: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    kv = {}
    if config is not None:
        for key, value in config.to_dict().items():
            if key == "custom_edges" and value is not None:
                value = ";".join(f"{j}->{i}" for j, i in value)
            kv[key] = value
    kv.update(extras)
    lines = [f"{k}={'' if v is None else v}" for k, v in sorted(kv.items())]
    (out_dir / f"{command}_resolved.cfg").write_text("\n".join(lines) + "\n")


def _parse_set(pairs):
    out = []
    for pair in pairs or []:
        if "=" not in pair:
            raise ContractViolationError(f"--set expects key=value, got {pair!r}")
        out.append(tuple(pair.split("=", 1)))
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = datagen.generate_split(args.n_train, args.seed, role="train")
    test = datagen.generate_split(args.n_test, args.seed, role="test")
    if args.spurious:
        train = datagen.inject_spurious(train, align_ratio=args.align_ratio,
                                        seed=args.seed)
        test = datagen.inject_spurious(test, align_ratio=args.align_ratio,
                                       seed=args.seed)
    datagen.write_csv(train, out / "train.csv")
    datagen.write_csv(test, out / "test.csv")
    _write_resolved(out, "gen_data", None, {
        "n_train": args.n_train, "n_test": args.n_test, "seed": args.seed,
        "spurious": args.spurious, "align_ratio": args.align_ratio,
        "out": str(out)})
    print(f"wrote {len(train)} train and {len(test)} test records to {out}")
    return 0


def cmd_train(args) -> int:
    config = _build_config(args)
    split = datagen.read_csv(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, "train", config, {"data": args.data, "out": str(out)})
    try:
        checkpoint, log = fit(config, split)
    except TrainingDivergedError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoint.bin")
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    save_checkpoint(checkpoint, out / "checkpoint.bin")
    write_loss_log(log, out / "loss_log.csv")
    if log:
        last = log[-1]
        print(f"epoch {last.epoch}: recon={last.recon:.4f} kl={last.kl:.4f} "
              f"sup={last.sup:.4f} total={last.total:.4f}")
    print(f"checkpoint written to {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    train_split = datagen.read_csv(args.train)
    test_split = datagen.read_csv(args.test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate.evaluate_suite(checkpoint, train_split, test_split,
                                     downstream_seed=args.seed)
    evaluate.write_report(report, out / "report.txt")
    _write_resolved(out, "eval", checkpoint.config, {
        "checkpoint": args.checkpoint, "train": args.train,
        "test": args.test, "seed": args.seed, "out": str(out)})
    for key, value in report.items():
        print(f"{key}={value}")
    return 0


def cmd_intervene(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    split = datagen.read_csv(args.data)
    model = checkpoint.model
    x_all = split.arrays()[0]
    input_ids = ([int(v) for v in args.inputs.split(",")]
                 if args.inputs else list(range(min(4, len(split)))))
    for idx in input_ids:
        if not 0 <= idx < len(split):
            raise ContractViolationError(f"input index {idx} out of range")
    x = x_all[input_ids]

    pins = {}
    for pair in args.do or []:
        if "=" not in pair:
            raise ContractViolationError(f"--do expects dim=value, got {pair!r}")
        dim_s, value_s = pair.split("=", 1)
        dim = int(dim_s)
        if dim in pins:
            raise ContractViolationError(f"repeated --do on dim {dim}")
        pins[dim] = float(value_s)

    if args.dims:
        dims = [int(v) for v in args.dims.split(",")]
    elif pins:
        dims = []
    else:
        dims = list(range(model.m))
    if args.values:
        values = {d: [float(v) for v in args.values.split(",")] for d in dims}
    else:
        values = {d: evaluate.traverse_values(checkpoint, x_all, d)
                  for d in dims}

    kind = args.kind if args.kind else ("intervene" if pins else "traverse")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if dims:
        for d in dims:
            rows.extend(evaluate.export_grid(kind, checkpoint, x, [d],
                                             values[d], pins=pins))
    else:
        rows = evaluate.export_grid("intervene", checkpoint, x, [], [],
                                    pins=pins)
    evaluate.write_grid_csv(rows, checkpoint, out / "grid.csv")
    _write_resolved(out, "intervene", checkpoint.config, {
        "checkpoint": args.checkpoint, "data": args.data,
        "inputs": ",".join(str(i) for i in input_ids),
        "dims": ",".join(str(d) for d in dims),
        "do": ";".join(f"{k}={v}" for k, v in sorted(pins.items())),
        "kind": kind, "out": str(out)})
    print(f"wrote {len(rows)} rows to {out / 'grid.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    split = datagen.generate_split(16, args.seed, role="train")
    x, y, u, _, _ = split.arrays()
    model = DcvaeModel.init(split.meta.n_obs, d=4, m=4, u_dim=4,
                            seed=args.seed, full_random=True)
    noise = rng.standard_normal((x.shape[0], 4))

    def loss_fn():
        node, _ = objective.loss_graph(model, x, y, u, noise, beta_sup=8.0)
        return node

    grad_transform = None
    if args.corrupt:
        def grad_transform(name, grad):
            if name == "encoder.w1":
                grad = grad.copy()
                grad.flat[0] *= 2.0
            return grad

    report = diffnum.finite_diff_check(
        loss_fn, model.all_params(), step=1e-5, tol=args.tol,
        max_coords_per_param=args.max_coords, rng=np.random.default_rng(args.seed),
        grad_transform=grad_transform)
    print(report)
    if args.out:
        out = Path(args.out)
        _write_resolved(out, "gradcheck", None, {
            "seed": args.seed, "tol": args.tol, "corrupt": args.corrupt,
            "max_coords": args.max_coords, "out": str(out)})
        (out / "gradcheck_report.txt").write_text(str(report) + "\n")
    if not report.passed:
        print(f"gradient check FAILED for: {', '.join(report.failing())}",
              file=sys.stderr)
        return 1
    print("gradient check passed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcvae",
        description="Causal-flow VAE: synthetic data, training, evaluation, "
                    "do-operation interventions. Latent and factor indices "
                    "are 0-based.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the pendulum dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=datagen.TRAIN_SIZE_DEFAULT)
    p.add_argument("--n-test", type=int, default=datagen.TEST_SIZE_DEFAULT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spurious", action="store_true",
                   help="append the spurious shortcut feature")
    p.add_argument("--align-ratio", type=float, default=0.8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--mask", choices=("true", "full", "file"))
    p.add_argument("--mask-file", help="edge list file for --mask file")
    p.add_argument("--no-flow", action="store_true")
    p.add_argument("--no-cond-prior", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="downstream evaluation suite")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("intervene", help="traversal / do-operation export")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", help="comma-separated latent dims to sweep")
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--inputs", help="comma-separated record indices")
    p.add_argument("--do", action="append", metavar="DIM=VALUE",
                   help="pin a latent dim (repeatable)")
    p.add_argument("--kind", choices=("traverse", "intervene"))
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=8,
                   help="coordinates checked per tensor")
    p.add_argument("--corrupt", action="store_true",
                   help="fault-injection mode: double one gradient component")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = _make_parser()
    args = parser.parse_args(argv)
    if getattr(args, "set", None) is not None:
        args.set = _parse_set(args.set)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
