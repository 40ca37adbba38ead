"""Command-line entry point: ``microevo <command> [options]``.

Every command resolves its configuration from built-in defaults, then the
matching table of an optional TOML file (``[train]``, ``[gen-fcg]``, ...),
then explicit flags, and writes the result as ``resolved_config.json`` next
to its outputs. Outputs live under ``--out``::

    libraries/<name>/     generated digital libraries
    checkpoints/<name>/   trained parameters and training logs
    reports/<name>/       evaluation and analysis reports
    exports/<name>/       PGM/CSV frame exports and rollouts
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import analysis, fcg, field, models, runtime, turing
from .models import ModelSpec, TrainConfig

log = logging.getLogger("microevo")

DEFAULTS = {
    "gen-turing": {"name": "turing", "sequences": 15, "frames": 68, "record_stride": 20, "burn_in": 200},
    "gen-fcg": {"name": "fcg", "samples": 908, "on_band_exit": "regenerate"},
    "train": {
        "name": None,
        "library": "fcg",
        "family": "base_snn",
        "n_train": 800,
        "in_len": 3,
        "out_len": 1,
        "epochs": 300,
        "batch_size": 16,
        "lr": 1e-3,
        "init_gain": "auto",
        "output_bias": "prior",
        "checkpoint_every": 0,
        "max_seconds": None,
    },
    "eval": {"name": None, "library": "fcg", "model": None, "n_train": 800, "horizon": None, "refeed_threshold": "auto"},
    "rollout": {"name": None, "library": "fcg", "model": None, "sample": 0, "n_future": None, "refeed_threshold": "auto"},
    "analyze": {"name": None, "model": None, "family": "base_snn", "grid": [96, 132], "threshold": 0.001, "bins": 101},
    "export-frames": {"name": None, "library": "fcg", "sample": 0, "format": "pgm"},
}


class CommandError(RuntimeError):
    """A command could not produce or validate its outputs."""


# ---------------------------------------------------------------------------
# configuration


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        with open(args.config, "rb") as fh:
            doc = tomllib.load(fh)
        table = doc.get(command, {})
        unknown = set(table) - set(cfg)
        if unknown:
            raise CommandError(f"unknown keys in [{command}]: {sorted(unknown)}")
        cfg.update(table)
        for key in ("seed", "deterministic", "threads"):
            if key in doc:
                setattr(args, key, getattr(args, key) if getattr(args, key) not in (None, False) else doc[key])
    for key in cfg:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    cfg["seed"] = args.seed if args.seed is not None else 0
    cfg["deterministic"] = bool(args.deterministic)
    cfg["threads"] = args.threads
    cfg["command"] = command
    cfg["out"] = str(args.out)
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the resolved config, ignoring where outputs are written."""
    keep = {k: v for k, v in cfg.items() if k not in ("out", "name")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()


def _run_dir(cfg: dict, kind: str, default_name: str) -> Path:
    d = Path(cfg["out"]) / kind / (cfg.get("name") or default_name)
    d.mkdir(parents=True, exist_ok=True)
    (d / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return d


def _library_path(cfg: dict, ref: str) -> Path:
    p = Path(ref)
    if (p / "manifest.json").exists():
        return p
    q = Path(cfg["out"]) / "libraries" / ref
    if (q / "manifest.json").exists():
        return q
    raise CommandError(f"library {ref!r} not found (looked in {p} and {q})")


def _checkpoint_path(cfg: dict, ref: str) -> Path:
    for p in (Path(ref), Path(ref) / "final", Path(cfg["out"]) / "checkpoints" / ref / "final"):
        if (p / "manifest.json").exists() and (p / "params.bin").exists():
            return p
    raise CommandError(f"checkpoint {ref!r} not found")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_turing(cfg: dict) -> Path:
    lib = turing.build_turing_library(
        n_sequences=int(cfg["sequences"]),
        frames_per_sequence=int(cfg["frames"]),
        record_stride=int(cfg["record_stride"]),
        burn_in=int(cfg["burn_in"]),
        base_seed=int(cfg["seed"]),
        deterministic=cfg["deterministic"],
    )
    return _save_library(cfg, lib, "turing")


def cmd_gen_fcg(cfg: dict) -> Path:
    lib = fcg.build_fcg_library(
        n_samples=int(cfg["samples"]),
        base_seed=int(cfg["seed"]),
        on_band_exit=cfg["on_band_exit"],
        deterministic=cfg["deterministic"],
    )
    return _save_library(cfg, lib, "fcg")


def _save_library(cfg: dict, lib: field.DigitalLibrary, default: str) -> Path:
    d = _run_dir(cfg, "libraries", default)
    field.save_library(lib, d)
    digest = field.library_digest(lib)
    if field.library_digest(field.load_library(d)) != digest:
        raise CommandError("library failed its read-back check")
    t, h, w = len(lib), lib.sequence_length, lib.frame_shape
    print(f"{d}: {t} sequences x {h} frames x {w[0]}x{w[1]}  sha256 {digest[:16]}")
    if lib.manifest.get("regenerated"):
        print(f"  regenerated attempts: {len(lib.manifest['regenerated'])}")
    return d


def _load_split(cfg: dict):
    lib = field.load_library(_library_path(cfg, cfg["library"]))
    n_train = int(cfg["n_train"])
    if n_train >= len(lib):
        n_train = max(len(lib) - 1, 1)
        log.warning("n_train exceeds the library; using %d", n_train)
    train_lib, test_lib = field.split_library(lib, n_train)
    return lib, train_lib, test_lib


def cmd_train(cfg: dict) -> Path:
    lib, train_lib, _ = _load_split(cfg)
    data = field.window_library(train_lib, int(cfg["in_len"]), int(cfg["out_len"]))
    bias = cfg["output_bias"]
    bias = models.prior_logit(data.targets) if bias == "prior" else float(bias)
    spec = ModelSpec(
        cfg["family"],
        in_len=int(cfg["in_len"]),
        out_len=int(cfg["out_len"]),
        grid=lib.frame_shape,
        init_gain=models.default_init_gain(cfg["family"]) if cfg["init_gain"] == "auto" else float(cfg["init_gain"]),
        output_bias=bias,
    )
    d = _run_dir(cfg, "checkpoints", f"{cfg['family']}")
    model = models.build_model(spec, int(cfg["seed"]))
    tc = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]), lr=float(cfg["lr"]),
                     checkpoint_every=int(cfg["checkpoint_every"]),
                     max_seconds=None if cfg["max_seconds"] is None else float(cfg["max_seconds"]))
    result = models.train(model, data, tc, out_dir=d)
    meta = {"config_sha256": config_hash(cfg), "library_sha256": field.library_digest(lib), "epochs": tc.epochs}
    models.save_model(model, d / "final", meta)
    if models.load_model(d / "final").digest() != model.digest():
        raise CommandError("checkpoint failed its read-back check")
    last = result.losses[-1] if result.losses else float("nan")
    print(f"{d}: {models.count_params(model)} parameters, {len(result.history)} epochs, final loss {last:.6g}")
    return d


def _predictor(cfg: dict, test_lib, in_len: int = 3, out_len: int = 1):
    ref = cfg["model"]
    if ref in (None, "persistence"):
        return models.Persistence(in_len, out_len), None, "persistence"
    if ref == "ground-truth":
        return analysis.GroundTruthStub(test_lib, in_len, out_len), None, "ground-truth"
    model = models.load_model(_checkpoint_path(cfg, ref))
    return model, model, model.spec.family


def _refeed(cfg: dict, family: str, lib) -> float | None:
    thr = cfg["refeed_threshold"]
    if thr == "auto":
        binary = bool(np.all(np.isin(lib.stack(), (0.0, 1.0))))
        return models.default_refeed_threshold(family, binary)
    return None if thr in (None, "none") else float(thr)


def _memory_costs(lib, n_params: int) -> dict[str, int]:
    h, w = lib.frame_shape
    out = {"pixel": analysis.memory_pixel(4, w, h), "model": analysis.memory_model(4, n_params)}
    # vector cost of the largest crack polyline, when the library carries one
    nodes = [len(s.extras["path"]["vertices"]) for s in lib.samples if "path" in s.extras]
    if nodes:
        out["vector"] = analysis.memory_vector(max(nodes))
    return out


def cmd_eval(cfg: dict) -> Path:
    lib, _, test_lib = _load_split(cfg)
    predictor, model, family = _predictor(cfg, test_lib)
    horizon = cfg["horizon"] or lib.sequence_length - predictor.in_len
    thr = _refeed(cfg, family, lib)
    curve = analysis.error_curve(predictor, test_lib, int(horizon), thr)
    n_params = models.count_params(model) if model is not None else 0
    rep = analysis.EvalReport(
        per_step_mae=curve.per_step,
        cumulative_mae=curve.cumulative,
        n_params=n_params,
        memory_bytes=_memory_costs(test_lib, n_params),
        meta={
            "predictor": family,
            "refeed_threshold": thr,
            "config_sha256": config_hash(cfg),
            "library_sha256": field.library_digest(lib),
            "checkpoint_sha256": model.digest() if model is not None else None,
            "n_test_sequences": len(test_lib),
        },
    )
    if model is not None:
        finals = [models.rollout_autoregressive(model, s.data[: model.in_len], 1)[0] for s in test_lib.samples]
        rep.interface_thickness = analysis.mean_thickness(finals)
        dens = analysis.connectivity_density(model)
        rep.density, rep.density_per_layer = dens.pooled, dens.per_layer
    d = _run_dir(cfg, "reports", f"eval_{family}")
    rep.write_json(d / "report.json")
    rep.write_curve_csv(d / "curve.csv")
    json.loads((d / "report.json").read_text())
    print(f"{d}: one-step MAE {curve.per_step[0]:.6g}, cumulative {curve.total:.6g} over {len(curve.per_step)} steps")
    return d


def cmd_rollout(cfg: dict) -> Path:
    lib = field.load_library(_library_path(cfg, cfg["library"]))
    predictor, _, family = _predictor(cfg, lib)
    seq = lib.samples[int(cfg["sample"])].data
    n_future = int(cfg["n_future"] or seq.shape[0] - predictor.in_len)
    frames = models.rollout_autoregressive(predictor, seq[: predictor.in_len], n_future, _refeed(cfg, family, lib))
    d = _run_dir(cfg, "exports", f"rollout_{family}_{int(cfg['sample']):05d}")
    field.write_blob(d / "rollout.bin", frames)
    for i, f in enumerate(frames):
        field.export_pgm(f, d / f"pred_{i + predictor.in_len:03d}.pgm")
    if not np.array_equal(field.read_blob(d / "rollout.bin"), frames):
        raise CommandError("rollout failed its read-back check")
    print(f"{d}: {n_future} predicted frames")
    return d


def cmd_analyze(cfg: dict) -> Path:
    if cfg["model"]:
        model = models.load_model(_checkpoint_path(cfg, cfg["model"]))
    else:
        model = models.build_model(ModelSpec(cfg["family"], grid=tuple(cfg["grid"])), int(cfg["seed"]))
    stats = analysis.weight_statistics(model, bins=int(cfg["bins"]))
    dens = analysis.connectivity_density(model, float(cfg["threshold"]))
    n = models.count_params(model)
    out = {
        "family": model.spec.family,
        "checkpoint_sha256": model.digest(),
        "config_sha256": config_hash(cfg),
        "n_params": n,
        "closed_form_params": model.closed_form_param_count(),
        "memory_model_bytes": analysis.memory_model(4, n),
        "pooled_variance": stats.pooled_variance,
        "layer_variance": stats.layer_variance,
        "density": dens.pooled,
        "density_per_layer": dens.per_layer,
        "density_threshold": dens.threshold,
    }
    d = _run_dir(cfg, "reports", f"analyze_{model.spec.family}")
    _write_json(d / "analysis.json", out)
    stats.write_csv(d / "histogram.csv")
    print(f"{d}: {n} parameters, kernel variance {stats.pooled_variance:.4g}, density {dens.pooled:.4f}")
    return d


def cmd_export_frames(cfg: dict) -> Path:
    lib = field.load_library(_library_path(cfg, cfg["library"]))
    idx = int(cfg["sample"])
    seq = lib.samples[idx]
    d = _run_dir(cfg, "exports", f"{Path(cfg['library']).name}_{idx:05d}")
    for i, f in enumerate(seq.data):
        if cfg["format"] == "pgm":
            field.export_pgm(f, d / f"frame_{i:03d}.pgm")
        elif cfg["format"] == "csv":
            np.savetxt(d / f"frame_{i:03d}.csv", f, delimiter=",", fmt="%.9g")
        else:
            raise CommandError(f"unknown export format {cfg['format']!r}")
    print(f"{d}: {seq.data.shape[0]} frames as {cfg['format']}")
    return d


COMMANDS = {
    "gen-turing": cmd_gen_turing,
    "gen-fcg": cmd_gen_fcg,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "analyze": cmd_analyze,
    "export-frames": cmd_export_frames,
}


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file; the table named after the command supplies defaults")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs", help="output root (default: runs)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, timestamp-free, byte-reproducible")
    p.add_argument("--threads", type=int, default=None, help="cap native thread pools")
    p.add_argument("--name", default=None, help="output subdirectory name")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="microevo", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-turing", help="simulate the Gray-Scott library")
    _common(p)
    p.add_argument("--sequences", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--record-stride", type=int, dest="record_stride")
    p.add_argument("--burn-in", type=int, dest="burn_in")

    p = sub.add_parser("gen-fcg", help="simulate the fatigue-crack library")
    _common(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--on-band-exit", choices=["regenerate", "flag"], dest="on_band_exit")

    p = sub.add_parser("train", help="train a model on a library")
    _common(p)
    p.add_argument("--library")
    p.add_argument("--family", choices=models.FAMILIES)
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--in-len", type=int, dest="in_len")
    p.add_argument("--out-len", type=int, dest="out_len")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--init-gain", dest="init_gain", help="kernel init scale, or 'auto' (4 for spiking families, else 1)")
    p.add_argument("--output-bias", dest="output_bias", help="float, or 'prior' for the logit of the mean target")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--max-seconds", type=float, dest="max_seconds", help="stop after the epoch that crosses this wall time")

    for name, helptext in (("eval", "error curve on the held-out split"), ("rollout", "autoregressive rollout of one sample")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--library")
        p.add_argument("--model", help="checkpoint path or name, 'persistence' or 'ground-truth'")
        p.add_argument("--refeed-threshold", dest="refeed_threshold", help="float, 'none' or 'auto'")
        if name == "eval":
            p.add_argument("--n-train", type=int, dest="n_train")
            p.add_argument("--horizon", type=int)
        else:
            p.add_argument("--sample", type=int)
            p.add_argument("--n-future", type=int, dest="n_future")

    p = sub.add_parser("analyze", help="weight histogram and connectivity density")
    _common(p)
    p.add_argument("--model", help="checkpoint; omit to analyze a freshly initialized --family")
    p.add_argument("--family", choices=models.FAMILIES)
    p.add_argument("--threshold", type=float)
    p.add_argument("--bins", type=int)

    p = sub.add_parser("export-frames", help="write a library sample as PGM or CSV frames")
    _common(p)
    p.add_argument("--library")
    p.add_argument("--sample", type=int)
    p.add_argument("--format", choices=["pgm", "csv"])
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        runtime.set_threads(cfg["threads"])
        with runtime.deterministic(cfg["deterministic"]) if cfg["deterministic"] else contextlib.nullcontext():
            COMMANDS[args.command](cfg)
    except (CommandError, field.LibraryFormatError, FileNotFoundError, ValueError, KeyError, OSError,
            turing.SolverInstabilityError, models.TrainingDivergedError) as exc:
        print(f"microevo {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
