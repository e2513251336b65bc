"""End-to-end experiments: data, prior, simulated acquisitions, reconstruction
with every method, metrics, and a manifest that replays the run exactly.

Everything random is derived from the experiment's master seed, so re-running a
spec (or the manifest it produced) rewrites byte-identical outputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .cfl import export_magnitude_pgm, export_phase_pgm, write_cfl
from .encoding import (PROJECTIONS, EncodingOperator, make_full_mask, make_random_mask,
                       make_spiral, make_uniform_mask, synth_sensitivities)
from .errors import FormatError, ValidationError
from .metrics import METRICS, MetricsReport, psnr_db
from .phantoms import PhantomSpec, add_noise, generate_phantoms
from .prior import PriorNet, Topology, load, save
from .recon import ReconConfig, cg_sense, map_reconstruct, zero_filled
from .training import TrainConfig, mean_bits_per_dim, train

SCHEMA_VERSION = 1
METHODS = ("zero-filled", "cg-sense", "map")
DEFAULT_STEP_GRID = (1e-5, 3e-5, 1e-4, 3e-4, 1e-3)

DEFAULT_SPEC: dict = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "out_dir": "experiment_out",
    "data": {"shape": [32, 32], "n_ellipses": 6, "intensity": [0.2, 1.0],
             "phase_amplitude": 1.0, "n_test": 50, "n_val": 1},
    "prior": {"path": None, "n_train": 200, "train": TrainConfig().to_dict(),
              "topology": {"n_filters": 32, "n_blocks": 4, "kernel": 3, "n_mix": 5}},
    "sampling": {"kind": "uniform", "R": 2, "rate": 0.15, "acs": 4,
                 "interleaves_total": 24, "interleaves_used": 6, "samples_per_leaf": None},
    "coils": 4,
    "noise_std": 0.02,
    "projection": "direct",
    "recon": {**ReconConfig().to_dict(), "step_size": None, "seed": None},
    "step_grid": list(DEFAULT_STEP_GRID),
    "cg": {"tol": 1e-6, "max_iter": 100},
    "methods": list(METHODS),
    "metrics": ["rmse", "psnr", "ssim"],
    "export_pgm": False,
}


def derive_seed(master: int, tag: str) -> int:
    """Independent 32-bit seed for one named purpose."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(tag.encode())])
    return int(ss.generate_state(1)[0])


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_spec(spec: dict) -> dict:
    """Fill defaults and validate; a manifest's ``spec`` entry is accepted too."""
    if "spec" in spec and "outputs" in spec:
        spec = spec["spec"]
    version = spec.get("version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported experiment schema version {version!r}")
    # "seeds" is written by resolution and may come back in a replayed manifest
    unknown = set(spec) - set(DEFAULT_SPEC) - {"seeds"}
    if unknown:
        raise ValidationError(f"unknown experiment keys: {sorted(unknown)}")
    out = _merge(DEFAULT_SPEC, spec)
    for m in out["methods"]:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}")
    for m in out["metrics"]:
        if m not in METRICS:
            raise ValidationError(f"unknown metric {m!r}")
    if out["projection"] not in PROJECTIONS:
        raise ValidationError(f"projection must be one of {PROJECTIONS}")
    if out["sampling"]["kind"] not in ("uniform", "random", "full", "spiral"):
        raise ValidationError(f"unknown sampling kind {out['sampling']['kind']!r}")
    if len(out["step_grid"]) < 1:
        raise ValidationError("step_grid must not be empty")
    seed = int(out["seed"])
    seeds = out.setdefault("seeds", {})
    for tag in ("train_data", "test_data", "val_data", "prior_init", "train",
                "mask", "noise", "recon"):
        seeds.setdefault(tag, derive_seed(seed, tag))
    return out


# -- operator descriptors -----------------------------------------------------


def operator_descriptor(shape, kind: str, coils: int, *, R: int = 2, rate: float = 0.15,
                        acs: int = 4, interleaves_total: int = 24, interleaves_used: int = 6,
                        samples_per_leaf: int | None = None, seed: int = 0,
                        projection: str = "direct") -> dict:
    return {"version": SCHEMA_VERSION, "shape": [int(shape[0]), int(shape[1])],
            "kind": kind, "coils": int(coils), "R": int(R), "rate": float(rate),
            "acs": int(acs), "interleaves_total": int(interleaves_total),
            "interleaves_used": int(interleaves_used), "samples_per_leaf": samples_per_leaf,
            "seed": int(seed), "projection": projection}


def build_operator(desc: dict) -> EncodingOperator:
    try:
        h, w = desc["shape"]
        kind = desc["kind"]
        coils = desc["coils"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad operator descriptor: {exc}") from exc
    if kind == "uniform":
        sampling = make_uniform_mask(h, w, desc.get("R", 2), desc.get("acs", 4))
    elif kind == "random":
        sampling = make_random_mask(h, w, desc.get("rate", 0.15), desc.get("acs", 4),
                                    np.random.default_rng(desc.get("seed", 0)))
    elif kind == "full":
        sampling = make_full_mask(h, w)
    elif kind == "spiral":
        sampling = make_spiral(h, w, desc.get("interleaves_total", 24),
                               desc.get("interleaves_used", 6), desc.get("samples_per_leaf"))
    else:
        raise ValidationError(f"unknown sampling kind {kind!r}")
    return EncodingOperator(synth_sensitivities(h, w, coils), sampling,
                            projection=desc.get("projection", "direct"))


# -- pipeline -----------------------------------------------------------------


def phantom_spec(spec: dict, tag: str) -> PhantomSpec:
    d = spec["data"]
    return PhantomSpec(shape=tuple(d["shape"]), n_ellipses=d["n_ellipses"],
                       intensity=tuple(d["intensity"]),
                       phase_amplitude=d["phase_amplitude"], seed=spec["seeds"][tag])


def obtain_prior(spec: dict, out_dir: Path | None = None):
    """Load the configured prior or train one; returns ``(net, info)``."""
    p = spec["prior"]
    if p.get("path"):
        return load(p["path"]), {"source": str(p["path"])}
    topo = Topology(**p["topology"])
    net = PriorNet(topo, seed=spec["seeds"]["prior_init"])
    train_imgs = generate_phantoms(phantom_spec(spec, "train_data"), p["n_train"])
    cfg = TrainConfig.from_dict({**p["train"], "seed": spec["seeds"]["train"]})
    hist = train(net, train_imgs, cfg)
    info = {"source": "trained", "final_epoch_bits_per_dim": hist.epoch_loss[-1]}
    if out_dir is not None:
        save(net, out_dir / "prior.bin")
        (out_dir / "train_loss.csv").write_text(hist.to_csv())
        info["weights"] = "prior.bin"
    return net, info


def simulate(op: EncodingOperator, image, noise_std: float, rng) -> np.ndarray:
    return add_noise(op.forward(image), noise_std, rng)


def recon_config(spec: dict, step_size: float) -> ReconConfig:
    r = {k: v for k, v in spec["recon"].items()}
    r["step_size"] = step_size
    if r.get("seed") is None:
        r["seed"] = spec["seeds"]["recon"]
    return ReconConfig(**r)


def tune_step_size(net, op, images, spec: dict) -> tuple[float, list[dict]]:
    """Pick the grid step with the best mean PSNR on validation phantoms."""
    rng = np.random.default_rng(derive_seed(spec["seeds"]["noise"], "validation"))
    data = [simulate(op, im, spec["noise_std"], rng) for im in images]
    scores = []
    for alpha in spec["step_grid"]:
        cfg = recon_config(spec, float(alpha))
        ps = [psnr_db(map_reconstruct(net, op, y, cfg)[0], im) for im, y in zip(images, data)]
        scores.append({"step_size": float(alpha), "psnr": float(np.mean(ps))})
    best = max(scores, key=lambda s: s["psnr"])
    return best["step_size"], scores


def reconstruct(method: str, net, op, y, spec: dict, step_size: float | None):
    """Run one method; returns ``(image, log or None)``."""
    if method == "zero-filled":
        return zero_filled(op, y), None
    if method == "cg-sense":
        x, _ = cg_sense(op, y, tol=spec["cg"]["tol"], max_iter=spec["cg"]["max_iter"])
        return x, None
    return map_reconstruct(net, op, y, recon_config(spec, step_size))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_experiment(spec: dict, out_dir=None) -> dict:
    """Execute a full experiment and write its outputs; returns the manifest."""
    spec = resolve_spec(spec)
    out = Path(out_dir if out_dir is not None else spec["out_dir"])
    try:
        (out / "arrays").mkdir(parents=True, exist_ok=True)
        (out / "logs").mkdir(exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create output directory {out}: {exc}") from exc

    test = generate_phantoms(phantom_spec(spec, "test_data"), spec["data"]["n_test"])
    s = spec["sampling"]
    desc = operator_descriptor(spec["data"]["shape"], s["kind"], spec["coils"], R=s["R"],
                               rate=s["rate"], acs=s["acs"],
                               interleaves_total=s["interleaves_total"],
                               interleaves_used=s["interleaves_used"],
                               samples_per_leaf=s["samples_per_leaf"],
                               seed=spec["seeds"]["mask"], projection=spec["projection"])
    op = build_operator(desc)

    net, prior_info = (None, {"source": "none"})
    step_size, grid_scores = spec["recon"]["step_size"], []
    if "map" in spec["methods"]:
        net, prior_info = obtain_prior(spec, out)
        if step_size is None:
            val = generate_phantoms(phantom_spec(spec, "val_data"), spec["data"]["n_val"])
            step_size, grid_scores = tune_step_size(net, op, val, spec)
        prior_info["test_bits_per_dim"] = mean_bits_per_dim(net, test)

    report = MetricsReport(list(spec["metrics"]))
    noise_rng = np.random.default_rng(spec["seeds"]["noise"])
    for i, truth in enumerate(test):
        tag = f"{i:03d}"
        y = simulate(op, truth, spec["noise_std"], noise_rng)
        write_cfl(out / "arrays" / f"truth_{tag}", truth)
        write_cfl(out / "arrays" / f"kspace_{tag}", y)
        for method in spec["methods"]:
            x, log = reconstruct(method, net, op, y, spec, step_size)
            write_cfl(out / "arrays" / f"{method}_{tag}", x)
            if log is not None:
                log.to_csv(out / "logs" / f"{method}_{tag}.csv", timing=False)
            if spec["export_pgm"]:
                export_magnitude_pgm(out / "arrays" / f"{method}_{tag}_mag.pgm", x)
                export_phase_pgm(out / "arrays" / f"{method}_{tag}_phase.pgm", x)
            report.add(tag, method, x, truth)

    (out / "report.json").write_text(_dump(report.to_dict()))
    (out / "operator.json").write_text(_dump(desc))
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "version": SCHEMA_VERSION,
        "package_version": __version__,
        "spec": spec,
        "resolved": {"step_size": step_size, "step_grid_scores": grid_scores,
                     "prior": prior_info, "sampling_fraction": _fraction(op)},
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(_dump(manifest))
    return manifest


def _fraction(op: EncodingOperator) -> float | None:
    return op.sampling.fraction if op.mode == "cartesian" else None
