"""Command-line entry point: ``hardhash {train,encode,query,evaluate,gradcheck,synth}``.

Exit status: 0 success, 1 usage error, 2 data error (missing or corrupt
input), 3 numeric error (non-finite loss, failed gradient check).
Progress goes to stderr; JSON results go to stdout or ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .data import DataError, SyntheticSpec, check_dataset_section, dump_manifest, generate_synthetic, load_dataset_section
from .hashing import CodeDatabase, CodeFormatError, HammingIndex, HashCode, quantize
from .losses import LossConfig
from .metrics import EvalConfig, round6, evaluate
from .network import ConfigError, Network, NetworkConfig
from .optim import SGDConfig
from .tensor import NumericError
from .trainer import TrainConfig, encode_dataset, loss_log_csv, train

log = logging.getLogger("hardhash")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers


def _read_json(path: Path) -> object:
    if not path.is_file():
        raise DataError(f"{path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def _check_out(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.parent.is_dir():
        raise DataError(f"output directory {p.parent} does not exist")
    return p


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _dataset_section(path: Path) -> tuple[dict, Path]:
    """A dataset description, given on its own or as part of a run config."""
    doc = _read_json(path)
    if isinstance(doc, dict) and "dataset" in doc:
        doc = doc["dataset"]
    check_dataset_section(doc, path.parent)
    return doc, path.parent


def _load_network(checkpoint: Path, network: Path | None) -> Network:
    network = network or checkpoint.parent / "network.json"
    if not checkpoint.is_file():
        raise DataError(f"checkpoint {checkpoint} not found")
    cfg = NetworkConfig.from_dict(_read_json(network))
    try:
        return Network.load(checkpoint, cfg)
    except ConfigError as exc:
        raise DataError(f"{checkpoint} does not match {network}: {exc}") from exc


def _parse_metrics(spec: str) -> EvalConfig:
    """``map,p@k:100,p@k:1000,p@h:2`` -> EvalConfig."""
    metrics, topk, radius = [], [], 2
    for item in filter(None, (s.strip() for s in spec.split(","))):
        name, _, arg = item.partition(":")
        try:
            if name == "map" and not arg:
                metrics.append("map")
            elif name == "p@k":
                topk.extend(int(a) for a in arg.split(":"))
                metrics.append("p@k")
            elif name == "p@h":
                radius = int(arg) if arg else 2
                metrics.append("p@h")
            else:
                raise ValueError
        except ValueError:
            raise UsageError(f"bad metric {item!r}; use map, p@k:K or p@h:R") from None
    if any(k < 1 for k in topk) or radius < 0:
        raise UsageError("p@k needs k >= 1 and p@h needs r >= 0")
    if not metrics:
        raise UsageError("no metrics requested")
    return EvalConfig(topk=topk, radius=radius, metrics=tuple(dict.fromkeys(metrics)))


def _merge_radius_csv(path: Path, bits: int, value: float | None) -> str:
    rows = {}
    if path.is_file():
        for row in csv.DictReader(io.StringIO(path.read_text())):
            rows[int(row["bits"])] = row["value"]
    rows[bits] = str(round6(value))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bits", "value"])
    for b in sorted(rows):
        w.writerow([b, rows[b]])
    return buf.getvalue()


def _read_image(path: Path, net: Network) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"image {path} not found")
    raw = path.read_bytes()
    c, s = net.config.in_channels, net.config.image_size
    if len(raw) != c * s * s:
        raise DataError(f"{path}: expected {c * s * s} bytes of interleaved {s}x{s} RGB, got {len(raw)}")
    img = np.frombuffer(raw, np.uint8).reshape(s, s, c).transpose(2, 0, 1)
    return img[None].astype(np.float32) / 255.0


# --------------------------------------------------------------- commands


def build_run(doc: dict, base_dir: Path):
    """Parse a run config into (dataset section, TrainConfig, EvalConfig, output dir)."""
    if not isinstance(doc, dict):
        raise DataError("run config must be a JSON object")
    unknown = set(doc) - {"dataset", "train", "loss", "network", "seed", "output_dir", "eval"}
    if unknown:
        raise DataError(f"unknown run config keys: {sorted(unknown)}")
    if "dataset" not in doc or "output_dir" not in doc:
        raise DataError("run config needs 'dataset' and 'output_dir'")
    check_dataset_section(doc["dataset"], base_dir)
    train_doc = dict(doc.get("train", {}))
    if "optimizer" in train_doc:
        train_doc["optimizer"] = SGDConfig(**train_doc["optimizer"])
    try:
        cfg = TrainConfig(
            **{k: v for k, v in train_doc.items() if k not in ("loss", "network", "seed")},
            loss=LossConfig.from_dict(doc.get("loss", {})),
            network=NetworkConfig.from_dict(doc.get("network", {})),
            seed=doc.get("seed", 0),
        )
    except TypeError as exc:
        raise DataError(f"bad train config: {exc}") from exc
    ev = doc.get("eval", {})
    eval_cfg = EvalConfig(topk=list(ev.get("topk", [100, 500, 1000])), radius=ev.get("radius", 2))
    out = Path(doc["output_dir"])
    out = out if out.is_absolute() else base_dir / out
    return doc["dataset"], cfg, eval_cfg, out


def cmd_train(args) -> int:
    config = Path(args.config)
    doc = _read_json(config)
    section, cfg, eval_cfg, out_dir = build_run(doc, config.parent)
    train_ds, test_ds = load_dataset_section(section, config.parent)
    net_doc = doc.get("network", {})
    # image geometry and class count follow the data unless set explicitly
    for key, value in (("num_classes", train_ds.num_classes), ("image_size", train_ds.image_size),
                       ("in_channels", train_ds.images.shape[1])):
        if key not in net_doc:
            setattr(cfg.network, key, value)
    Network(cfg.network)  # raises ConfigError before anything is written
    log.info("training on %d images, testing on %d", len(train_ds), len(test_ds))
    net, history = train(train_ds, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    net.save(out_dir / "checkpoint.hegh")
    (out_dir / "network.json").write_text(cfg.network.to_json())
    (out_dir / "loss_log.csv").write_text(loss_log_csv(history))
    db, queries = encode_dataset(net, train_ds), encode_dataset(net, test_ds)
    db.save(out_dir / "db.heghcode")
    queries.save(out_dir / "queries.heghcode")
    report = evaluate(queries, db, eval_cfg)
    (out_dir / "report.json").write_text(report.to_json())
    sys.stdout.write(report.to_json())
    return EXIT_OK


def cmd_encode(args) -> int:
    out = _check_out(args.out)
    section, base = _dataset_section(Path(args.dataset))
    net = _load_network(Path(args.checkpoint), Path(args.network) if args.network else None)
    train_ds, test_ds = load_dataset_section(section, base)
    ds = train_ds if args.split == "train" else test_ds
    db = encode_dataset(net, ds)
    db.save(out)
    log.info("wrote %d %d-bit codes to %s", len(db), db.k, out)
    return EXIT_OK


def cmd_query(args) -> int:
    if not Path(args.codes).is_file():
        raise DataError(f"code database {args.codes} not found")
    db = CodeDatabase.load(Path(args.codes))
    if args.code is not None:
        try:
            value = int(args.code, 16)
        except ValueError:
            raise UsageError(f"--code must be hexadecimal, got {args.code!r}") from None
        try:
            q = HashCode.from_int(value, db.k)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        if not args.checkpoint:
            raise UsageError("--image needs --checkpoint")
        net = _load_network(Path(args.checkpoint), Path(args.network) if args.network else None)
        if net.config.hash_bits != db.k:
            raise DataError(f"network produces {net.config.hash_bits}-bit codes, database holds {db.k}-bit codes")
        codes, _ = net.predict(_read_image(Path(args.image), net))
        q = quantize(codes[0])
    index = HammingIndex(db)
    if args.radius is not None:
        if not 0 <= args.radius <= db.k:
            raise UsageError(f"--radius must be in [0, {db.k}]")
        hits = index.radius(q, args.radius)
    else:
        if args.topk < 1:
            raise UsageError("--topk must be >= 1")
        hits = index.topk(q, args.topk)
    sys.stdout.write(json.dumps([[i, d] for i, d in hits]) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _parse_metrics(args.metrics)
    out, pk_csv, radius_csv = _check_out(args.out), _check_out(args.pk_csv), _check_out(args.radius_csv)
    if args.checkpoint:
        if not args.dataset:
            raise UsageError("--checkpoint needs --dataset")
        section, base = _dataset_section(Path(args.dataset))
        net = _load_network(Path(args.checkpoint), Path(args.network) if args.network else None)
        train_ds, test_ds = load_dataset_section(section, base)
        db, queries = encode_dataset(net, train_ds), encode_dataset(net, test_ds)
    else:
        if not (args.codes and args.queries):
            raise UsageError("evaluate needs --codes and --queries, or --checkpoint and --dataset")
        for p in (args.codes, args.queries):
            if not Path(p).is_file():
                raise DataError(f"code database {p} not found")
        db, queries = CodeDatabase.load(Path(args.codes)), CodeDatabase.load(Path(args.queries))
    if queries.k != db.k:
        raise DataError(f"query codes have {queries.k} bits, database has {db.k}")
    if cfg.radius > db.k:
        raise UsageError(f"p@h radius {cfg.radius} exceeds the code length {db.k}")
    report = evaluate(queries, db, cfg)
    _emit(report.to_json(), out)
    if pk_csv:
        pk_csv.write_text(report.precision_curve_csv())
    if radius_csv:
        radius_csv.write_text(_merge_radius_csv(radius_csv, report.hash_bits, report.p_at_h))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import SCOPES, run_scope

    scopes = SCOPES if args.scope == "all" else (args.scope,)
    errors = {}
    for scope in scopes:
        log.info("checking %s", scope)
        errors.update({f"{scope}/{k}": v for k, v in run_scope(scope, args.points, args.epsilon, args.seed).items()})
    ok = all(v < GRAD_TOLERANCE for v in errors.values())
    result = {
        "scope": args.scope,
        "points": args.points,
        "epsilon": args.epsilon,
        "tolerance": GRAD_TOLERANCE,
        "max_relative_error": {k: round6(v) for k, v in errors.items()},
        "passed": ok,
    }
    sys.stdout.write(json.dumps(result, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    out = _check_out(args.out)
    spec = SyntheticSpec.from_dict(_read_json(Path(args.spec))) if args.spec else SyntheticSpec()
    spec.validate()
    ds = generate_synthetic(spec)
    _emit(dump_manifest(ds), out)
    log.info("wrote %d synthetic images", len(ds))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hardhash", description="Deep hashing with confidence-weighted pairs: train, encode, retrieve.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a network from a run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="hash a dataset split into a code database")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--network", help="network config JSON (default: network.json beside the checkpoint)")
    e.add_argument("--dataset", required=True, help="dataset description or run config JSON")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    q = sub.add_parser("query", help="top-k or radius lookup in a code database")
    q.add_argument("--codes", required=True)
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--code", help="query code in hex, bit 0 least significant")
    src.add_argument("--image", help="raw interleaved RGB file, hashed with --checkpoint")
    q.add_argument("--checkpoint")
    q.add_argument("--network")
    mode = q.add_mutually_exclusive_group(required=True)
    mode.add_argument("--topk", type=int)
    mode.add_argument("--radius", type=int)
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("evaluate", help="MAP, Precision@k and radius precision")
    v.add_argument("--codes", help="database codes")
    v.add_argument("--queries", help="query codes")
    v.add_argument("--checkpoint")
    v.add_argument("--network")
    v.add_argument("--dataset")
    v.add_argument("--metrics", default="map,p@k:100:500:1000,p@h:2")
    v.add_argument("--out")
    v.add_argument("--pk-csv", help="write the Precision@k curve as k,value")
    v.add_argument("--radius-csv", help="add this run's radius precision to a bits,value curve")
    v.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", choices=("primitives", "network", "loss", "all"), required=True)
    g.add_argument("--points", type=int, default=20)
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic dataset as a manifest")
    s.add_argument("--spec")
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hardhash {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"hardhash {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CodeFormatError, CheckpointError, ConfigError, OSError, ValueError) as exc:
        print(f"hardhash {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


execute = main

if __name__ == "__main__":
    sys.exit(main())
