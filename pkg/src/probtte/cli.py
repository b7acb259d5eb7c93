"""Command-line pipeline: synthesize, train, evaluate, predict, export, contract.

Every subcommand writes into ``--out`` and refuses to replace existing
files unless ``--force`` is given. Failures print one JSON object on
stderr and exit with 2 (invalid input) or 3 (numerical failure).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
from collections import Counter

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DEFAULT_MAX_TIME, DEFAULT_MIN_TIME, assign_bucket, load_queries, load_trips
from .data import save_trips, split_trips, subsample
from .errors import NumericalError, ValidationError
from .inference import condition, predict, predict_prior, predict_trip, select_conditioning
from .metrics import MEAN_BASED, SAMPLE_BASED, score
from .model import mu_vector
from .network import ContractionMap, apply_contraction, contract, load_network, save_network
from .training import DivergenceError, TrainConfig, train

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    """Argument errors become :class:`ValidationError` so they emit JSON."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# helpers ----------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(paths):
    out = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full):
                    out[full] = _sha256(full)
        elif os.path.isfile(p):
            out[p] = _sha256(p)
    return out


def _versions():
    import matplotlib
    import scipy
    return {
        "probtte": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
        "python": platform.python_version(),
    }


class _Outputs:
    """Collects planned output paths and enforces the no-overwrite rule."""

    def __init__(self, out_dir, force, names):
        self.dir = out_dir
        self.paths = {n: os.path.join(out_dir, n) for n in names + ["run-manifest.json"]}
        if not force:
            clash = sorted(p for p in self.paths.values() if os.path.exists(p))
            if clash:
                raise ValidationError(f"refusing to overwrite {clash[0]} (use --force)")
        os.makedirs(out_dir, exist_ok=True)

    def __getitem__(self, name):
        return self.paths[name]


def _num(value) -> str:
    """Shortest round-trip text for a float (numpy scalars included)."""
    return repr(float(value))


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_manifest(outs, args, inputs, config=None, extra=None):
    manifest = {
        "command": args.command,
        "args": {k: v for k, v in sorted(vars(args).items())
                 if k not in ("func", "command", "force", "out")},
        "config": config,
        "seed": getattr(args, "seed", None),
        "versions": _versions(),
        "inputs": _input_hashes(inputs),
        "outputs": {
            os.path.relpath(p, outs.dir): _sha256(p)
            for n, p in sorted(outs.paths.items())
            if n != "run-manifest.json" and os.path.isfile(p)
        },
    }
    if extra:
        manifest.update(extra)
    _write_json(outs["run-manifest.json"], manifest)


def _load_config(path):
    if path is None:
        return {}
    try:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            with open(path, "rb") as fh:
                cfg = tomllib.load(fh)
        else:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a table/object of TrainConfig fields")
    return cfg.get("train", cfg)


def _bound(text):
    return None if text.lower() == "none" else float(text)


def _grid(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("grid must look like 10x10") from None
    return w, h


def _split_subset(trips, split_path, part):
    if split_path is None:
        return trips
    with open(split_path, encoding="utf-8") as fh:
        ids = set(json.load(fh)[part])
    subset = [t for t in trips if t.trip_id in ids]
    if not subset:
        raise ValidationError(f"split {part!r} selects no trips")
    return subset


def _stored_augmentation(manifest):
    return int(manifest.get("k", 0)), manifest.get("eta")


# subcommands ------------------------------------------------------------

def cmd_synth(args):
    from .synth import gen_ground_truth, gen_network, gen_trips

    outs = _Outputs(args.out, args.force, [
        "network/links.csv", "network/edges.csv", "trips.jsonl", "truth.ckpt", "truth.ckpt.json"])
    os.makedirs(os.path.join(args.out, "network"), exist_ok=True)
    net = gen_network(*args.grid)
    truth = gen_ground_truth(net, args.rank, args.rank, seed=args.seed)
    trips = gen_trips(truth, args.days, args.trips_per_day,
                      checkpoint_rate=args.checkpoint_rate, seed=args.seed)
    save_network(net, os.path.join(args.out, "network"))
    save_trips(trips, outs["trips.jsonl"])
    save_checkpoint(truth.params, outs["truth.ckpt"], synthetic=True, seed=args.seed,
                    length_scale=truth.length_scale,
                    short_length_scale=truth.short_length_scale)
    _write_manifest(outs, args, [], extra={"n_links": net.link_count, "n_trips": len(trips)})
    return {"n_links": net.link_count, "n_edges": len(net.edges), "n_trips": len(trips)}


_TRAIN_FLAGS = ("b", "k", "eta", "p", "r_L", "r_H", "lr", "epochs", "patience", "seed")


def cmd_train(args):
    from .plotting import training_curves

    cfg_dict = _load_config(args.config)
    for name in _TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            cfg_dict[name] = value
    if args.deterministic:
        cfg_dict["deterministic"] = True
    cfg = TrainConfig.from_dict(cfg_dict)

    outs = _Outputs(args.out, args.force, [
        "model.ckpt", "model.ckpt.json", "train-report.json", "split.json", "training.png"])
    net = load_network(args.network)
    trips = load_trips(args.trips, net, args.min_time, args.max_time)
    tr, va, te = split_trips(trips, cfg.seed)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    try:
        params, report = train(tr, net, cfg, va or None, log=log)
    except DivergenceError as exc:
        _write_json(outs["train-report.json"], exc.report.to_dict())
        raise
    counts = Counter(assign_bucket(t.depart, cfg.p) for t in tr)
    save_checkpoint(params, outs["model.ckpt"], k=cfg.k, eta=cfg.eta,
                    bucket_counts={str(b): n for b, n in sorted(counts.items())},
                    config=cfg.to_dict())
    rep = report.to_dict()
    rep["epochs"] = [{k: (float(v) if isinstance(v, (float, np.floating)) else v)
                      for k, v in e.items()} for e in rep["epochs"]]
    _write_json(outs["train-report.json"], rep)
    _write_json(outs["split.json"], {
        "seed": cfg.seed,
        "train": [t.trip_id for t in tr],
        "val": [t.trip_id for t in va],
        "test": [t.trip_id for t in te],
    })
    training_curves(rep, outs["training.png"])
    _write_manifest(outs, args, [args.network, args.trips, args.config], config=cfg.to_dict())
    return {"best_epoch": report.best_epoch, "best_val_nll": report.best_val_nll,
            "status": report.status}


def _cumulative_series(trip, params, pool, max_obs, k, eta):
    bucket = assign_bucket(trip.depart, params.p)
    observed = select_conditioning(trip, pool, params.p, max_obs)
    post = condition([subsample(t, k, eta) for t in observed], params, bucket) if observed else None
    prior, cond = [], []
    for n, _ in trip.checkpoints:
        pr = predict_prior(trip.links[:n], params, bucket)
        prior.append((pr.mean, pr.std))
        c = predict(trip.links[:n], post, params) if post is not None else pr
        cond.append((c.mean, c.std))
    return prior, cond


def cmd_eval(args):
    from .plotting import cumulative_time, pit_histogram, predictions_vs_truth

    outs = _Outputs(args.out, args.force, [
        "metrics.json", "predictions.csv", "predictions.png", "pit.png", "cumulative.png"])
    net = load_network(args.network)
    params, manifest = load_checkpoint(args.checkpoint)
    if params.n_links != net.link_count:
        raise ValidationError("checkpoint and network disagree on the link count")
    k, eta = _stored_augmentation(manifest)
    if args.k is not None:
        k = args.k
    pool = load_trips(args.trips, net, args.min_time, args.max_time)
    queries = _split_subset(pool, args.split, args.part)
    preds = [predict_trip(q, params, pool, args.policy, args.max_obs, k, eta) for q in queries]
    truths = [q.total_time for q in queries]
    report = score(preds, truths, params.scale, args.mode, args.seed, args.policy)
    _write_json(outs["metrics.json"], report.to_dict())

    with open(outs["predictions.csv"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trip_id", "day", "bucket", "truth_s", "mean_s", "var_s2",
                    "lo90", "hi90", "n_conditioning"])
        for q, pr in zip(queries, preds):
            lo, hi = pr.interval(0.9)
            w.writerow([q.trip_id, q.day, assign_bucket(q.depart, params.p), _num(q.total_time),
                        _num(pr.mean), _num(pr.variance), _num(lo), _num(hi), pr.n_conditioning])

    std = [p.std for p in preds]
    predictions_vs_truth(truths, [p.mean for p in preds], std, outs["predictions.png"],
                         title=f"{args.policy} policy")
    pit_histogram(truths, [p.mean for p in preds], std, outs["pit.png"])
    example = max(queries, key=lambda q: (len(q.checkpoints), q.trip_id))
    prior, cond = _cumulative_series(example, params, pool, args.max_obs, k, eta)
    cumulative_time([n for n, _ in example.checkpoints], [t for _, t in example.checkpoints],
                    prior, cond if args.policy == "conditional" else None,
                    outs["cumulative.png"], title=example.trip_id)
    _write_manifest(outs, args, [args.network, args.trips, args.checkpoint, args.split])
    return report.to_dict()


def cmd_predict(args):
    outs = _Outputs(args.out, args.force, ["predictions.jsonl"])
    params, manifest = load_checkpoint(args.checkpoint)
    net = load_network(args.network) if args.network else None
    if net is not None and params.n_links != net.link_count:
        raise ValidationError("checkpoint and network disagree on the link count")
    k, eta = _stored_augmentation(manifest)
    queries = load_queries(args.queries, net)
    for q in queries:
        if max(q.links) >= params.n_links:
            raise ValidationError(f"trip {q.trip_id}: link id outside the model")
    pool = load_trips(args.conditioning, net, None, None) if args.conditioning else []
    policy = args.policy if pool else "prior"
    with open(outs["predictions.jsonl"], "w", encoding="utf-8", newline="\n") as fh:
        for q in queries:
            pr = predict_trip(q, params, pool, policy, args.max_obs, k, eta)
            lo, hi = pr.interval(0.9)
            fh.write(json.dumps({
                "trip_id": q.trip_id, "mean_s": float(pr.mean), "var_s2": float(pr.variance),
                "interval90": [float(lo), float(hi)], "n_conditioning": pr.n_conditioning,
            }) + "\n")
    _write_manifest(outs, args, [args.checkpoint, args.queries, args.conditioning, args.network])
    return {"n_predictions": len(queries), "policy": policy}


def principal_projection(X: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Scores of the centered rows of ``X`` on its top principal directions.

    Each direction's sign is fixed so its largest-magnitude loading is
    positive, making the output deterministic.
    """
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    vt = vt[:n_components]
    flip = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    vt = vt * flip[:, None]
    proj = Xc @ vt.T
    if proj.shape[1] < n_components:  # rank-deficient input
        proj = np.hstack([proj, np.zeros((len(X), n_components - proj.shape[1]))])
    return proj


def cmd_export(args):
    from .plotting import embedding_projection

    outs = _Outputs(args.out, args.force, ["embeddings.csv", "embeddings.png"])
    params, manifest = load_checkpoint(args.checkpoint)
    bucket = args.bucket
    if bucket is None:
        counts = manifest.get("bucket_counts") or {"0": 0}
        bucket = int(max(counts, key=lambda b: (counts[b], -int(b))))
    params.check_bucket(bucket)
    L, H = params.L[bucket], params.H[bucket]
    proj = principal_projection(np.hstack([L, H]))
    with open(outs["embeddings.csv"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"L{i}" for i in range(params.r_L)] + [f"H{i}" for i in range(params.r_H)]
                   + ["pc1", "pc2"])
        for row in np.hstack([L, H, proj]):
            w.writerow([_num(v) for v in row])
    embedding_projection(proj, outs["embeddings.png"], mu_vector(params, bucket) * params.scale,
                         "mean link time (s)")
    _write_manifest(outs, args, [args.checkpoint], extra={"bucket": bucket})
    return {"bucket": bucket, "rows": params.n_links, "columns": params.r_L + params.r_H + 2}


def cmd_contract(args):
    outs = _Outputs(args.out, args.force, [
        "network/links.csv", "network/edges.csv", "model.ckpt", "model.ckpt.json"])
    net = load_network(args.network)
    try:
        with open(args.groups, encoding="utf-8") as fh:
            groups = json.load(fh)
        cmap = ContractionMap([list(map(int, g)) for g in groups])
    except (OSError, ValueError, TypeError) as exc:
        raise ValidationError(f"cannot read contraction groups: {exc}") from exc
    cmap.validate(net)
    params, manifest = load_checkpoint(args.checkpoint)
    if params.n_links != net.link_count:
        raise ValidationError("checkpoint and network disagree on the link count")
    os.makedirs(os.path.join(args.out, "network"), exist_ok=True)
    save_network(contract(net, cmap), os.path.join(args.out, "network"))
    keep = {k: v for k, v in manifest.items() if k in ("k", "eta", "bucket_counts", "config")}
    save_checkpoint(apply_contraction(params, cmap), outs["model.ckpt"], contracted=True, **keep)
    _write_manifest(outs, args, [args.network, args.checkpoint, args.groups])
    return {"links": net.link_count, "groups": cmap.target_count}


# parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="probtte", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"probtte {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if seed:
            p.add_argument("--seed", type=int, default=0, help="master random seed")
        p.add_argument("--deterministic", action="store_true",
                       help="omit wall-clock fields so outputs are byte-identical")

    def filters(p):
        p.add_argument("--min-time", type=_bound, default=DEFAULT_MIN_TIME,
                       help=f"drop trips shorter than this many seconds, or 'none' (default {DEFAULT_MIN_TIME:g})")
        p.add_argument("--max-time", type=_bound, default=DEFAULT_MAX_TIME,
                       help=f"drop trips longer than this many seconds, or 'none' (default {DEFAULT_MAX_TIME:g})")

    p = sub.add_parser("synth", help="generate a synthetic network, corpus and ground truth")
    common(p)
    p.add_argument("--grid", type=_grid, default=(10, 10), help="grid size WxH (default 10x10)")
    p.add_argument("--days", type=int, default=20)
    p.add_argument("--trips-per-day", type=int, default=200)
    p.add_argument("--rank", type=int, default=8, help="rank of the true embeddings")
    p.add_argument("--checkpoint-rate", type=int, default=3, help="links between GPS checkpoints")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit link embeddings and write a checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--deterministic", action="store_true",
                   help="omit wall-clock fields so outputs are byte-identical")
    p.add_argument("--network", required=True, help="directory holding links.csv and edges.csv")
    p.add_argument("--trips", required=True, help="trips JSONL file")
    p.add_argument("--config", help="TOML or JSON file with training settings")
    filters(p)
    p.add_argument("--b", type=int, help="trips per batch")
    p.add_argument("--k", type=int, help="sub-trips per trip")
    p.add_argument("--eta", type=float, help="stride rate for sub-trips")
    p.add_argument("--p", type=int, help="time buckets per day")
    p.add_argument("--r-L", dest="r_L", type=int, help="day-level embedding rank")
    p.add_argument("--r-H", dest="r_H", type=int, help="trip-level embedding rank")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs")
    p.add_argument("--seed", type=int, help="master random seed (overrides config)")
    p.add_argument("--verbose", action="store_true", help="log epochs to stderr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score held-out trips and write metrics and figures")
    common(p)
    p.add_argument("--network", required=True)
    p.add_argument("--trips", required=True, help="trips JSONL; also the conditioning pool")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split.json from train; restricts queries to one part")
    p.add_argument("--part", default="test", choices=("train", "val", "test"))
    p.add_argument("--policy", default="conditional", choices=("prior", "conditional"))
    p.add_argument("--max-obs", type=int, default=32, help="conditioning trips per query")
    p.add_argument("--k", type=int, help="sub-trips per conditioning trip (default: as trained)")
    p.add_argument("--mode", default=MEAN_BASED, choices=(MEAN_BASED, SAMPLE_BASED))
    filters(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict query trips, optionally conditioning on completed ones")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True, help="query trips JSONL (checkpoints optional)")
    p.add_argument("--conditioning", help="completed trips JSONL used for conditioning")
    p.add_argument("--network", help="validate link ids against this network")
    p.add_argument("--policy", default="conditional", choices=("prior", "conditional"))
    p.add_argument("--max-obs", type=int, default=32)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-embeddings", help="write per-link embeddings and a 2-D projection")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bucket", type=int, help="time bucket (default: most populated)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("contract", help="merge link groups in a network and checkpoint")
    common(p, seed=False)
    p.add_argument("--network", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--groups", required=True, help="JSON list of link-id lists, one per super-link")
    p.set_defaults(func=cmd_contract)
    return parser


def _fail(code, exc):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    diag = getattr(exc, "diagnostics", None)
    if diag:
        payload["diagnostics"] = diag
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        summary = args.func(args)
    except ValidationError as exc:
        return _fail(EXIT_VALIDATION, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (OSError, KeyError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    print(json.dumps(summary, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
