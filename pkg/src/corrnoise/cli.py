"""``corrnoise`` command line.

Every command takes one JSON config by path; ``--set a.b=value`` overrides a
scalar leaf (values parse as JSON, falling back to a plain string). Exit
codes: 0 success, 1 invalid input, 2 verification failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import checks, simulator
from ._accel import BACKEND
from .emb import (CoalescedNoiseStore, TileSpec, avg_noise_entries, precompute_coalesced,
                  provenance_digest, split_hot_cold, tile_size_solver)
from .errors import CapacityExceededError, CorrNoiseError, ValidationError
from .fileio import as_float_dtype, atomic_write_bytes, atomic_write_text
from .mixing import (MixingMatrix, banded_toeplitz, identity_matrix, load_matrix,
                     random_banded, save_matrix)
from .noise import NoisePlan
from .trace import (AccessTrace, TraceConfig, frequency_histogram, generate_zipf_trace,
                    ingest_trace_file)
from .trainer import ToyModel, compare_runs, save_table, train_eager, train_lazy

log = logging.getLogger("corrnoise")

EXIT_OK, EXIT_INVALID, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3


# -- schemas -------------------------------------------------------------------

def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_STR = {"type": "string"}

MIXING = _obj({
    "kind": {"enum": ["identity", "toeplitz", "random", "file"]},
    "coeffs": {"type": "array", "items": _NUM},
    "path": _STR,
    "min_abs_diag": _NUM,
    "offdiag_scale": _NUM,
}, ["kind"])

TRACE_GEN = {
    "num_entries": _POS, "iterations": _POS, "batch_size": _POS, "pooling": _POS,
    "zipf_alpha": _NUM, "seed": _INT,
}
TRACE_SRC = _obj({**TRACE_GEN, "path": _STR})
NOISE = _obj({"d_emb": _POS, "band": _POS, "sigma": _NUM})
SPLIT = _obj({"threshold": {"type": ["number", "string"]}})
TILES = _obj({"budget_bytes": _POS, "tile_entries": _POS, "parts": _POS})
COMMON = {"seed": _INT, "dtype": {"enum": ["f4", "f8", "float32", "float64"]}}

SCHEMAS = {
    "gen-mixing": _obj({
        **COMMON, "n": _POS, "band": _POS, "mixing": MIXING, "output": _STR,
    }, ["n", "band", "mixing", "output"]),
    "gen-trace": _obj({
        **COMMON,
        "trace": _obj({**TRACE_GEN, "zipf_alphas": {"type": "array", "items": _NUM, "minItems": 1}},
                      ["num_entries", "iterations", "batch_size"]),
        "output": _STR,
    }, ["trace", "output"]),
    "precompute": _obj({
        **COMMON, "noise": NOISE, "mixing": MIXING, "trace": TRACE_SRC, "split": SPLIT,
        "tiles": TILES, "threads": _POS,
        "output": _obj({"store": _STR, "stats": _STR}, ["store", "stats"]),
    }, ["noise", "mixing", "trace", "output"]),
    "verify": _obj({
        **COMMON,
        "suites": {"type": "array", "items": {"enum": list(checks.SUITES)}},
        "corrupt_store": {"type": "boolean"},
        "size": _obj({"num_entries": _POS, "d_emb": _POS, "iterations": _POS, "band": _POS}),
        "output": _STR,
    }),
    "simulate": _obj({
        "profile": _STR,
        "cost_model": {"type": "object"},
        "emb": {"type": ["object", "null"]},
        "sweep": _obj({"param": _STR, "values": {"type": "array", "minItems": 1}},
                      ["param", "values"]),
        "output": _obj({"csv": _STR, "json": _STR}),
    }),
    "train-toy": _obj({
        **COMMON, "mode": {"enum": ["eager", "lazy", "both"]},
        "noise": NOISE, "mixing": MIXING, "trace": TRACE_SRC, "split": SPLIT,
        "store": _STR,
        "model": _obj({"learning_rate": _NUM, "init_seed": _INT, "batch_size": _POS}),
        "tolerance": _NUM,
        "output": _obj({"report": _STR, "table_prefix": _STR}),
    }, ["noise", "mixing", "trace"]),
}


# -- config plumbing -------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        path, sep, raw = item.partition("=")
        if not sep or not path:
            raise ValidationError(f"override {item!r} is not of the form a.b=value")
        keys = path.split(".")
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {path!r}: {k!r} is not an object")
        if isinstance(node.get(keys[-1]), dict):
            raise ValidationError(f"override {path!r} targets an object, not a scalar leaf")
        node[keys[-1]] = _parse_value(raw)
    return doc


def load_config(command: str, path, overrides=()) -> dict:
    if path is None:
        doc = {}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    doc = apply_overrides(doc, overrides)
    try:
        jsonschema.validate(doc, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ValidationError(f"config {where}: {exc.message}") from None
    return doc


def config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _report(command: str, cfg: dict, measured=None, modeled=None, **extra) -> dict:
    """Report body; only ``metadata`` carries run-dependent fields."""
    body = {"command": command, "config_digest": config_digest(cfg)}
    if measured is not None:
        body["measured"] = measured
    if modeled is not None:
        body["modeled"] = modeled
    body.update(extra)
    body["metadata"] = {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "backend": BACKEND,
    }
    return body


def report_digest(report: dict) -> str:
    return config_digest({k: v for k, v in report.items() if k != "metadata"})


def _write_json(path, doc) -> None:
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True, default=_json_default,
                      allow_nan=False)
    atomic_write_text(path, text + "\n")


def _jsonable(obj):
    """Non-finite floats become null so the output stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _finite(x: float):
    return x if math.isfinite(x) else None


# -- builders from config sections -----------------------------------------------

def build_matrix(section: dict, n: int, band: int, seed: int) -> MixingMatrix:
    kind = section["kind"]
    if kind == "identity":
        if band != 1:
            raise ValidationError("identity mixing requires band=1")
        return identity_matrix(n)
    if kind == "toeplitz":
        if "coeffs" not in section:
            raise ValidationError("toeplitz mixing needs 'coeffs'")
        if len(section["coeffs"]) != band:
            raise ValidationError(f"toeplitz has {len(section['coeffs'])} coefficients, band is {band}")
        return banded_toeplitz(section["coeffs"], n)
    if kind == "random":
        rng = np.random.default_rng([seed, 1])
        return random_banded(n, band, rng, section.get("min_abs_diag", 0.5),
                             section.get("offdiag_scale", 0.5))
    if "path" not in section:
        raise ValidationError("file mixing needs 'path'")
    C = load_matrix(section["path"])
    if (C.n, C.band) != (n, band):
        raise ValidationError(f"matrix file has n={C.n}, band={C.band}; expected n={n}, band={band}")
    return C


def build_trace(section: dict, seed: int) -> AccessTrace:
    if "path" in section:
        extra = set(section) - {"path", "num_entries"}
        if extra:
            raise ValidationError(f"trace.path cannot be combined with {sorted(extra)}")
        return ingest_trace_file(section["path"], section.get("num_entries"))
    missing = {"num_entries", "iterations", "batch_size"} - set(section)
    if missing:
        raise ValidationError(f"trace config missing {sorted(missing)}")
    return generate_zipf_trace(TraceConfig(
        section["num_entries"], section["iterations"], section["batch_size"],
        section.get("pooling", 1), section.get("zipf_alpha", 1.0), section.get("seed", seed)))


def _threshold(section: dict | None) -> float:
    th = (section or {}).get("threshold", math.inf)
    if isinstance(th, str):
        if th.lower() not in ("inf", "infinity"):
            raise ValidationError(f"threshold must be a number or 'inf', got {th!r}")
        return math.inf
    return float(th)


def _emb_setup(cfg: dict):
    seed = cfg.get("seed", 0)
    dtype = as_float_dtype(cfg.get("dtype", "f8"))
    trace = build_trace(cfg["trace"], seed)
    noise = cfg["noise"]
    d, band = noise.get("d_emb", 1), noise.get("band", 1)
    plan = NoisePlan(seed, trace.num_entries * d, trace.iterations, band,
                     noise.get("sigma", 1.0), dtype)
    C = build_matrix(cfg["mixing"], plan.n, band, seed)
    stats = frequency_histogram(trace)
    split = split_hot_cold(stats, _threshold(cfg.get("split")))
    return plan, C, trace, split, d


# -- commands ------------------------------------------------------------------

def cmd_gen_mixing(cfg: dict) -> int:
    C = build_matrix(cfg["mixing"], cfg["n"], cfg["band"], cfg.get("seed", 0))
    save_matrix(C, cfg["output"])
    log.info("wrote %s (n=%d, band=%d)", cfg["output"], C.n, C.band)
    return EXIT_OK


def alpha_path(template: str, alpha: float) -> Path:
    tag = f"{alpha:g}"
    if "{alpha}" in template:
        return Path(template.replace("{alpha}", tag))
    p = Path(template)
    suffixes = "".join(p.suffixes)
    stem = p.name[: len(p.name) - len(suffixes)] if suffixes else p.name
    return p.with_name(f"{stem}_alpha{tag}{suffixes}")


def cmd_gen_trace(cfg: dict) -> int:
    sec = dict(cfg["trace"])
    alphas = sec.pop("zipf_alphas", None)
    sec.setdefault("seed", cfg.get("seed", 0))
    if alphas is None:
        trace = generate_zipf_trace(TraceConfig(**sec))
        trace.save(cfg["output"])
        log.info("wrote %s", cfg["output"])
        return EXIT_OK
    for a in alphas:
        trace = generate_zipf_trace(TraceConfig(**{**sec, "zipf_alpha": a}))
        out = alpha_path(cfg["output"], a)
        trace.save(out)
        log.info("wrote %s", out)
    return EXIT_OK


def _tiles(cfg: dict, split, d: int, band: int, width: int) -> TileSpec | None:
    sec = cfg.get("tiles")
    if not sec:
        return None
    n_cold = max(split.cold_entries.size, 1)
    if "tile_entries" in sec:
        return TileSpec(sec["tile_entries"] * d, d)
    if "parts" in sec:
        return TileSpec.partition(n_cold, sec["parts"], d)
    if "budget_bytes" in sec:
        return tile_size_solver(sec["budget_bytes"], band, n_cold * d, d, width)
    return None


def store_stats(store: CoalescedNoiseStore, split, tiles: TileSpec | None, file_bytes: int) -> dict:
    return {
        "nnz": store.nnz,
        "n": store.n,
        "d_emb": store.d_emb,
        "avg_noise_entries": avg_noise_entries(store),
        "payload_bytes": store.payload_bytes,
        "index_bytes": store.index_bytes,
        "footprint_bytes": store.footprint_bytes,
        "file_bytes": file_bytes,
        "hot_fraction": split.hot_fraction,
        "cold_entries": int(store.cold_entries.size),
        "threshold": _finite(split.threshold),
        "predicted_nnz": split.predicted_nnz,
        "reduction_vs_all_cold": _finite(split.reduction),
        "num_tiles": tiles.num_tiles(int(store.cold_entries.size) * store.d_emb) if tiles else 1,
    }


def cmd_precompute(cfg: dict) -> int:
    plan, C, trace, split, d = _emb_setup(cfg)
    if split.cold_entries.size == 0:
        log.warning("every entry is hot at threshold %s; the store will be empty", split.threshold)
    tiles = _tiles(cfg, split, d, plan.band, plan.dtype.itemsize)
    store = precompute_coalesced(plan, C, trace, split, tiles=tiles, workers=cfg.get("threads"))
    data = store.to_bytes()
    atomic_write_bytes(cfg["output"]["store"], data)
    stats = store_stats(store, split, tiles, len(data))
    stats["store_sha256"] = hashlib.sha256(data).hexdigest()
    _write_json(cfg["output"]["stats"], _report("precompute", cfg, measured=stats))
    log.info("store: nnz=%d avg_noise_entries=%.4g payload=%d bytes",
             stats["nnz"], stats["avg_noise_entries"], stats["payload_bytes"])
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    results = checks.run_suites(cfg.get("seed", 0), cfg.get("suites"),
                                cfg.get("corrupt_store", False), size=cfg.get("size"))
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} cases={r.cases} worst={r.worst:.3e}"
              + (f" ({'; '.join(r.detail)})" if r.detail else ""))
    ok = all(r.ok for r in results)
    if "output" in cfg:
        _write_json(cfg["output"], _report("verify", cfg, measured={
            "ok": ok, "suites": [r.to_dict() for r in results]}))
    return EXIT_OK if ok else EXIT_VERIFY


def _sim_inputs(cfg: dict):
    profile = cfg.get("profile", "dlrm")
    profiles = simulator.load_profiles()
    if profile not in profiles:
        raise ValidationError(f"unknown profile {profile!r}; have {sorted(profiles)}")
    base = profiles[profile]
    cm = {**base["cost_model"], **cfg.get("cost_model", {})}
    if "tiers" in cfg.get("cost_model", {}):
        cm["tiers"] = {**base["cost_model"]["tiers"], **cfg["cost_model"]["tiers"]}
    model = simulator.CostModelConfig.from_dict(cm)
    emb = cfg["emb"] if "emb" in cfg else base.get("emb")
    stats = None
    if emb:
        try:
            stats = simulator.EmbStoreStats(**emb)
        except TypeError as exc:
            raise ValidationError(f"emb: {exc}") from None
    return model, stats


def cmd_simulate(cfg: dict) -> int:
    model, stats = _sim_inputs(cfg)
    sweep = cfg.get("sweep")
    if sweep:
        comparisons = simulator.sweep(model, sweep["param"], sweep["values"], stats)
    else:
        comparisons = [simulator.compare_strategies(model, stats)]
    out = cfg.get("output", {})
    csv_text = simulator.to_csv(comparisons)
    if "csv" in out:
        atomic_write_text(out["csv"], csv_text)
    else:
        sys.stdout.write(csv_text)
    if "json" in out:
        points = [c.to_dict() for c in comparisons]
        _write_json(out["json"], _report("simulate", cfg, modeled={"points": points}))
    for c in comparisons:
        log.info("band=%d m=%d best=%s", c.config.band, c.config.m, c.best)
    return EXIT_OK


def cmd_train_toy(cfg: dict) -> int:
    plan, C, trace, split, d = _emb_setup(cfg)
    mode = cfg.get("mode", "both")
    msec = cfg.get("model", {})
    model = ToyModel.random(trace.num_entries, d, msec.get("init_seed", cfg.get("seed", 0)),
                            plan.dtype, msec.get("learning_rate", 0.1), msec.get("batch_size", 1))
    tol = cfg.get("tolerance", 1e-9)
    runs = {}
    if mode in ("eager", "both"):
        runs["eager"] = train_eager(model, plan, C, trace)
    if mode in ("lazy", "both"):
        if "store" in cfg:
            store = CoalescedNoiseStore.load(cfg["store"])
            if store.provenance != provenance_digest(plan, C, trace, split):
                raise ValidationError(
                    f"store {cfg['store']} was built from a different plan, matrix, trace or split")
        else:
            store = precompute_coalesced(plan, C, trace, split)
        runs["lazy"] = train_lazy(model, plan, C, trace, split, store)
    measured = {name: {"mean_step_s": float(np.mean(r.step_seconds))} for name, r in runs.items()}
    diff = None
    if len(runs) == 2:
        diff = compare_runs(runs["eager"], runs["lazy"], tol)
        print(f"eager vs lazy: max_abs={diff.max_abs:.3e} max_rel={diff.max_rel:.3e} "
              f"tolerance={tol:g} {'PASS' if diff.ok else 'FAIL'}")
    out = cfg.get("output", {})
    if "table_prefix" in out:
        for name, r in runs.items():
            save_table(r.table, f"{out['table_prefix']}{name}.cnt")
    if "report" in out:
        body = {"diff": diff.to_dict() if diff else None,
                "table_sha256": {k: hashlib.sha256(r.table.tobytes()).hexdigest()
                                 for k, r in runs.items()}}
        # timings vary run to run, so they live in metadata
        rep = _report("train-toy", cfg, measured=body)
        rep["metadata"]["timings"] = measured
        _write_json(out["report"], rep)
    if diff is not None and not diff.ok:
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {
    "gen-mixing": cmd_gen_mixing,
    "gen-trace": cmd_gen_trace,
    "precompute": cmd_precompute,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "train-toy": cmd_train_toy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrnoise", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?", help="JSON config path")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a scalar config leaf (dot path)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args.command, args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except (ValidationError, CapacityExceededError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CorrNoiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
