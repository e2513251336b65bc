"""Command-line interface.

Exit codes: 0 success, 1 validation, 2 numerical failure, 3 I/O or format.
Failures print one JSON line on stderr: {"error": kind, "code": n, "message": text}.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cfl import read_cfl, write_cfl
from .errors import FormatError, NumericalError, ReconError, ValidationError
from .experiment import (SCHEMA_VERSION, build_operator, operator_descriptor, run_experiment)
from .metrics import MetricsReport
from .numerics import make_rng
from .phantoms import PhantomSpec, add_noise, generate_phantoms
from .prior import PriorNet, Topology, load, save
from .recon import ReconConfig, cg_sense, map_reconstruct, zero_filled
from .training import TrainConfig, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: expected a JSON object")
    if obj.get("version") != SCHEMA_VERSION:
        raise ValidationError(f"{path}: unsupported schema version {obj.get('version')!r}")
    return obj


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stack(arr: np.ndarray) -> np.ndarray:
    """Accept a single (H, W) image or an (N, H, W) stack."""
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 3:
        return arr
    raise ValidationError(f"expected an image or image stack, got shape {arr.shape}")


def cmd_gen_data(args) -> None:
    cfg = _read_json(args.spec)
    n = cfg.pop("n", 1)
    cfg.pop("version")
    spec = PhantomSpec.from_dict(cfg)
    images = generate_phantoms(spec, n)
    out = Path(args.out)
    write_cfl(out / "phantoms", images)
    _write_json(out / "manifest.json", {"version": SCHEMA_VERSION, "n": n,
                                        "phantom_spec": spec.to_dict(),
                                        "array": "phantoms"})


def cmd_train(args) -> None:
    cfg = _read_json(args.config)
    topo = Topology(**cfg.pop("topology", {}))
    init_seed = cfg.pop("init_seed", 0)
    tcfg = TrainConfig.from_dict(cfg)
    images = _stack(read_cfl(Path(args.data) / "phantoms"))
    net = PriorNet(topo, seed=init_seed)
    hist = train(net, images, tcfg)
    save(net, args.out)
    Path(args.out).with_suffix(".loss.csv").write_text(hist.to_csv())


def cmd_simulate(args) -> None:
    img = read_cfl(args.image)
    if img.ndim == 3:
        img = img[args.index]
    if img.ndim != 2:
        raise ValidationError(f"--image must hold a 2-D image, got shape {img.shape}")
    desc = operator_descriptor(img.shape, args.mask_kind, args.coils, R=args.R,
                               rate=args.rate, acs=args.acs,
                               interleaves_total=args.interleaves_total,
                               interleaves_used=args.interleaves_used, seed=args.seed,
                               projection=args.projection)
    op = build_operator(desc)
    y = add_noise(op.forward(img), args.noise, make_rng(args.seed + 1))
    write_cfl(args.out, y)
    _write_json(f"{args.out}.op.json", desc)


def cmd_recon(args) -> None:
    op = build_operator(_read_json(args.op))
    y = read_cfl(args.kspace)
    if y.shape != op.data_shape:
        raise ValidationError(f"k-space shape {y.shape} does not match operator "
                              f"{op.data_shape}")
    log = None
    if args.method == "zero-filled":
        x = zero_filled(op, y)
    elif args.method == "cg-sense":
        x, res = cg_sense(op, y)
    else:
        if args.prior is None:
            raise ValidationError("--prior is required for --method map")
        cfg = {}
        if args.config:
            cfg = _read_json(args.config)
            cfg.pop("version")
        x, log = map_reconstruct(load(args.prior, args.n_mix), op, y, ReconConfig(**cfg))
    write_cfl(args.out, x)
    if log is not None:
        log.to_csv(f"{args.out}_conv.csv")


def cmd_metrics(args) -> None:
    x = _stack(read_cfl(args.recon))
    ref = _stack(read_cfl(args.ref))
    if x.shape != ref.shape:
        raise ValidationError(f"recon {x.shape} and reference {ref.shape} differ in shape")
    report = MetricsReport(["rmse", "psnr", "ssim"])
    for i, (a, b) in enumerate(zip(x, ref)):
        report.add(f"{i:03d}", args.method, a, b)
    _write_json(args.out, report.to_dict())
    print(report.table())


def cmd_run_experiment(args) -> None:
    spec = _read_json(args.spec)
    run_experiment(spec, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bayesrecon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate a phantom dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a prior network")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="simulate multi-coil k-space")
    s.add_argument("--image", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--mask-kind", choices=["uniform", "random", "full", "spiral"],
                   required=True)
    s.add_argument("--R", type=int, default=2)
    s.add_argument("--rate", type=float, default=0.15)
    s.add_argument("--acs", type=int, default=4)
    s.add_argument("--interleaves-total", type=int, default=24)
    s.add_argument("--interleaves-used", type=int, default=6)
    s.add_argument("--coils", type=int, default=1)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--projection", default="direct")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("recon", help="reconstruct an image")
    s.add_argument("--method", choices=["map", "zero-filled", "cg-sense"], required=True)
    s.add_argument("--prior")
    s.add_argument("--kspace", required=True)
    s.add_argument("--op", required=True)
    s.add_argument("--n-mix", type=int, help="reject a prior whose K differs")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_recon)

    s = sub.add_parser("metrics", help="compare reconstructions with references")
    s.add_argument("--recon", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--method", default="recon")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("run-experiment", help="run a full experiment from a spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_run_experiment)
    return p


def _fail(kind: str, code: int, message: str) -> int:
    line = json.dumps({"error": kind, "code": code, "message": " ".join(message.split())})
    print(line, file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except ReconError as exc:
        return _fail(type(exc).__name__, exc.exit_code, str(exc))
    except (TypeError, KeyError) as exc:
        # malformed config contents, e.g. an unknown field
        return _fail("ValidationError", ValidationError.exit_code, f"bad configuration: {exc}")
    except OSError as exc:
        return _fail("FormatError", FormatError.exit_code, str(exc))
    except FloatingPointError as exc:
        return _fail("NumericalError", NumericalError.exit_code, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
