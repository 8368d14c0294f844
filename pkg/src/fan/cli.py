"""``fan`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``FAN_THREADS``
overrides the BLAS thread count (default 1, which keeps runs bit-reproducible).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .blocks import TABLE1, ModelConfig, count_flops
from .corruptions import NOISE_KINDS, corruption_suite, kinds
from .errors import ConfigError, FanError
from .harness.robustness import as_percent, comparison_table, robustness_suite
from .harness.shapes import make_split
from .harness.train import TrainConfig, load, train
from .ib_cluster import IBConfig, ib_cluster, two_blobs
from .imageio import load_image, write_pnm
from .serialize import FormatError, save_tensor
from .spectral import (DEFAULT_TAU, block_clusters, input_spectrum, noise_probe,
                       per_block_spectrum)

log = logging.getLogger("fan")

CONFIG_SECTIONS = {"model", "train", "dataset"}


class UsageError(Exception):
    """Bad arguments detected after parsing; exits with status 2."""


# ---------------------------------------------------------------- provenance


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(command: str, config, seed: int) -> dict:
    return {"tool": "fan", "version": __version__, "command": command,
            "config_hash": config_hash(config), "seed": seed}


def write_json(path, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def csv_with_header(prov: dict, body: str) -> str:
    head = "".join(f"# {k}: {prov[k]}\n" for k in sorted(prov))
    return head + body


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be an object")
    return cfg


def model_config(raw: dict) -> ModelConfig:
    raw = dict(raw)
    table = raw.pop("table", None)
    if table is not None:
        base = ModelConfig.from_table(table).to_dict()
        base.update(raw)
        raw = base
    return ModelConfig.from_dict(raw)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    spec = read_config(args.config)
    spec.setdefault("seed", args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = ["train", "val"] if args.split == "both" else [args.split]
    for split in splits:
        ds = make_split(spec, split)
        save_tensor(out / f"{split}_images.fant", ds.images)
        save_tensor(out / f"{split}_labels.fant", ds.labels)
    write_json(out / "dataset.json", {"provenance": provenance("gen-data", spec, spec["seed"]),
                                      "dataset": spec, "splits": splits})
    return 0


def _train_setup(args):
    cfg = read_config(args.config)
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    model_raw = dict(cfg.get("model", {}))
    if args.kind:
        model_raw["kind"] = args.kind
    train_raw = dict(cfg.get("train", {}))
    train_raw.setdefault("seed", args.seed)
    if args.epochs is not None:
        train_raw["epochs"] = args.epochs
    dataset = dict(cfg.get("dataset", {}))
    dataset.setdefault("seed", 0)
    return model_config(model_raw), TrainConfig.from_dict(train_raw), dataset


def cmd_train(args) -> int:
    model, tcfg, dataset = _train_setup(args)
    train_set, val_set = make_split(dataset, "train"), make_split(dataset, "val")
    res = train(model, train_set, tcfg, val_set, dataset_spec=dataset)
    effective = {"model": model.to_dict(), "train": asdict(tcfg), "dataset": dataset}
    prov = provenance("train", effective, tcfg.seed)
    res.header["provenance"] = prov
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.save(out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.json")
    write_json(log_path, {"provenance": prov, "log": res.log})
    final = res.log[-1]
    print(f"trained {model.kind}: final val_acc={final.get('val_acc', float('nan')):.4f} -> {out}")
    return 0


def _eval_images(header: dict, dataset_path):
    if dataset_path is None:
        if not header.get("dataset"):
            raise UsageError("checkpoint carries no dataset spec; pass --dataset")
        ds = make_split(header["dataset"], "val")
        return ds.images, ds.labels, header["dataset"]
    spec = read_config(dataset_path)
    split = spec.pop("split", "val")
    ds = make_split(spec, split)
    return ds.images, ds.labels, spec


def cmd_eval(args) -> int:
    cfg, params, header = load(args.checkpoint)
    images, labels, spec = _eval_images(header, args.dataset)
    models = [(Path(args.checkpoint).stem, params, cfg)]
    if args.baseline:
        bcfg, bparams, _ = load(args.baseline)
        models.insert(0, (Path(args.baseline).stem, bparams, bcfg))
    kinds_ = args.corrupt or []
    reports = robustness_suite(models, images, labels, kinds_, tuple(args.severities), args.seed,
                               baseline=models[0][0])
    effective = {"checkpoints": [m[0] for m in models], "dataset": spec, "kinds": kinds_,
                 "severities": args.severities}
    prov = provenance("eval", effective, args.seed)
    payload = {"provenance": prov, "reports": []}
    for r in reports:
        row = {"model_id": r.model_id, "clean_acc": r.clean_acc, "corrupted": r.corrupted,
               "severities": r.severities, "baseline_id": r.baseline_id}
        if kinds_:
            row.update(robust_acc=r.robust_acc, retention=r.retention,
                       retention_pct=as_percent(r.retention), mce=r.mce)
        payload["reports"].append(row)
    write_json(args.out, payload)
    if args.table and kinds_:
        Path(args.table).write_text(csv_with_header(prov, comparison_table(reports)))
    return 0


def cmd_corrupt(args) -> int:
    if args.input:
        dataset = [Path(p) for p in args.input]
        source = [str(p) for p in args.input]
    else:
        spec = read_config(args.dataset) if args.dataset else {"seed": 0}
        ds = make_split(spec, "val")
        n = args.limit or len(ds)
        dataset = list(ds.images[:n])
        source = {"dataset": spec, "limit": n}
    kinds_ = args.kinds or list(kinds())
    manifest = corruption_suite(dataset, kinds_, tuple(args.severities), args.seed, args.out,
                                ext=args.ext)
    effective = {"source": source, "kinds": kinds_, "severities": args.severities}
    manifest["provenance"] = provenance("corrupt", effective, args.seed)
    write_json(Path(args.out) / "manifest.json", manifest)
    if manifest["errors"]:
        for e in manifest["errors"]:
            print(f"fan: warning: {e}", file=sys.stderr)
        return 1
    return 0


def _load_input_image(path, cfg: ModelConfig) -> np.ndarray:
    img = load_image(path)
    expect = (cfg.in_chans, cfg.image_size, cfg.image_size)
    if img.shape != expect:
        raise FormatError(f"{path}: image shape {img.shape} does not match model input {expect}")
    return img.astype(np.float64)


def cmd_spectrum(args) -> int:
    cfg, params, _ = load(args.checkpoint)
    img = _load_input_image(args.image, cfg)
    params = {k: v.astype(np.float64) for k, v in params.items()}
    specs = [input_spectrum(img, cfg.patch, args.tau)] + per_block_spectrum(params, cfg, img,
                                                                            args.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = {"checkpoint": Path(args.checkpoint).name, "image": Path(args.image).name,
                 "tau": args.tau, "k": args.k}
    prov = provenance("spectrum", effective, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = cfg.num_tokens
    w.writerow(["block", "significant"] + [f"lambda_{i + 1}" for i in range(n)])
    for b, s in enumerate(specs):
        w.writerow([b, s.significant] + [repr(float(v)) for v in s.eigenvalues])
    (out / "spectrum.csv").write_text(csv_with_header(prov, buf.getvalue()))
    g = cfg.image_size // cfg.patch
    note = "\n".join(f"{k}: {prov[k]}" for k in sorted(prov))
    for b in range(cfg.depth):
        labels = block_clusters(params, cfg, img, args.k, block=b, seed=args.seed)
        mask = np.kron(labels, np.ones((cfg.patch, cfg.patch))) / max(args.k - 1, 1)
        write_pnm(out / f"clusters_block{b + 1}.pgm", mask.reshape(1, g * cfg.patch, -1), note)
    return 0


def cmd_noise_probe(args) -> int:
    cfg, params, _ = load(args.checkpoint)
    img = _load_input_image(args.image, cfg)
    params = {k: v.astype(np.float64) for k, v in params.items()}
    rep = noise_probe(params, cfg, img, args.scale, args.seed, Path(args.checkpoint).stem)
    effective = {"checkpoint": Path(args.checkpoint).name, "image": Path(args.image).name,
                 "scale": args.scale}
    write_json(args.out, {"provenance": provenance("noise-probe", effective, args.seed),
                          "report": rep.to_dict()})
    return 0


def cmd_ib_demo(args) -> int:
    points, truth = two_blobs(args.points, d=args.dim, sigma=args.sigma,
                              separation=args.separation, seed=args.seed, blobs=args.blobs)
    cfg = IBConfig(beta=args.beta, convention=args.convention, max_iter=args.max_iter)
    res = ib_cluster(points, args.clusters or args.blobs, cfg, seed=args.seed)
    effective = {"blobs": args.blobs, "points": args.points, "dim": args.dim, "sigma": args.sigma,
                 "separation": args.separation, "ib": asdict(cfg),
                 "clusters": args.clusters or args.blobs}
    write_json(args.out, {
        "provenance": provenance("ib-demo", effective, args.seed),
        "converged": res.converged,
        "iterations": res.iterations,
        "points": points.tolist(),
        "truth": truth.tolist(),
        "labels": res.labels().tolist(),
        "trajectory": res.trajectory,
    })
    return 0


def cmd_flops(args) -> int:
    if args.table:
        raw = {"table": args.table}
    else:
        raw = read_config(args.config) if args.config else {}
    raw = raw.get("model", raw)
    base = model_config(raw)
    dims = [base.dim, 2 * base.dim]
    rows = {}
    for kind in ("vit", "fan-ca", "fan-eca"):
        for d in dims:
            cfg = ModelConfig.from_dict({**base.to_dict(), "kind": kind, "dim": d})
            rows[(kind, d)] = count_flops(cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "sub_block", f"d={dims[0]}", f"d={dims[1]}", "ratio"])
    for kind in ("vit", "fan-ca", "fan-eca"):
        small, big = rows[(kind, dims[0])], rows[(kind, dims[1])]
        for name, val in small.per_block.items():
            w.writerow([kind, name, val, big.per_block[name], f"{big.per_block[name] / val:.4f}"])
        w.writerow([kind, "model_total", small.total, big.total, f"{big.total / small.total:.4f}"])
    prov = provenance("flops", base.to_dict(), args.seed)
    text = csv_with_header(prov, buf.getvalue())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fan {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads; FAN_THREADS overrides, default 1")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[common], help="write the shapes dataset as tensors")
    g.add_argument("--config", help="dataset spec JSON (n_train_per_class, n_val_per_class, "
                                    "size, noise, seed)")
    g.add_argument("--split", choices=["train", "val", "both"], default="both")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model on the shapes dataset")
    t.add_argument("--config", help="JSON with optional 'model', 'train', 'dataset' sections")
    t.add_argument("--kind", choices=["vit", "fan-ca", "fan-eca"], help="override model kind")
    t.add_argument("--epochs", type=int, help="override epoch count")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log JSON (default: <out>.log.json)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="clean and corrupted accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", help="dataset spec JSON (default: the checkpoint's own val split)")
    e.add_argument("--corrupt", nargs="+", choices=list(kinds()) + ["noise"], metavar="KIND",
                   help="corruption kinds; 'noise' expands to the three noise kinds")
    e.add_argument("--severities", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    e.add_argument("--baseline", help="baseline checkpoint for mCE (default: the model itself)")
    e.add_argument("--out", default="-", help="report JSON (default stdout)")
    e.add_argument("--table", help="also write the comparison table as CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("corrupt", parents=[common], help="write corrupted copies and a manifest")
    src = c.add_mutually_exclusive_group()
    src.add_argument("--input", nargs="+", help="PPM/PGM/tensor images")
    src.add_argument("--dataset", help="dataset spec JSON; its val split is corrupted")
    c.add_argument("--limit", type=int, help="first N dataset images only")
    c.add_argument("--kinds", nargs="+", choices=list(kinds()), metavar="KIND")
    c.add_argument("--severities", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    c.add_argument("--ext", choices=[".fant", ".ppm", ".pgm"], default=".fant")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("spectrum", parents=[common], help="per-block affinity spectra and masks")
    s.add_argument("checkpoint")
    s.add_argument("image", help="PPM or tensor image matching the model input")
    s.add_argument("--tau", type=float, default=DEFAULT_TAU, help="relative eigenvalue threshold")
    s.add_argument("--k", type=int, default=2, help="clusters per mask")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_spectrum)

    n = sub.add_parser("noise-probe", parents=[common], help="per-block Gaussian noise response")
    n.add_argument("checkpoint")
    n.add_argument("image")
    n.add_argument("--scale", type=float, default=0.1, help="noise standard deviation")
    n.add_argument("--out", default="-", help="report JSON (default stdout)")
    n.set_defaults(func=cmd_noise_probe)

    i = sub.add_parser("ib-demo", parents=[common], help="IB clustering of Gaussian blobs")
    i.add_argument("--blobs", type=int, default=2)
    i.add_argument("--clusters", type=int, help="number of clusters (default: --blobs)")
    i.add_argument("--points", type=int, default=20, help="points per blob")
    i.add_argument("--dim", type=int, default=2)
    i.add_argument("--sigma", type=float, default=0.1)
    i.add_argument("--separation", type=float, default=10.0)
    i.add_argument("--beta", type=float, default=1.0)
    i.add_argument("--convention", choices=["standard-ib", "paper-literal"], default="standard-ib")
    i.add_argument("--max-iter", type=int, default=100)
    i.add_argument("--out", default="-", help="trajectory JSON (default stdout)")
    i.set_defaults(func=cmd_ib_demo)

    f = sub.add_parser("flops", parents=[common], help="per-sub-block FLOP table at d and 2d")
    grp = f.add_mutually_exclusive_group()
    grp.add_argument("--config", help="model config JSON")
    grp.add_argument("--table", choices=sorted(TABLE1), help="named configuration")
    f.add_argument("--out", help="CSV path (default stdout)")
    f.set_defaults(func=cmd_flops)
    return p


def _threads(args) -> int:
    env = os.environ.get("FAN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"FAN_THREADS must be an integer, got {env!r}") from None
    return args.threads or 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "corrupt", None) and "noise" in args.corrupt:
        args.corrupt = [k for k in args.corrupt if k != "noise"] + [
            k for k in NOISE_KINDS if k not in args.corrupt]
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads(args)):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fan: error: {exc}", file=sys.stderr)
        return 2
    except (FanError, OSError, ValueError, KeyError) as exc:
        print(f"fan: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
