"""Command-line driver: ``blkrew {train,prune,reorder,infer,bench,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
from pathlib import Path
import sys

import numpy as np

from . import data as datasets
from . import modelfile, nn, prune, reorder
from .blocks import ConfigError, LayerMask, parse_block, scheme_for_layer
from .config import RunConfig, load_config, parse_config
from .regularize import RegConfig
from .tensor import ShapeError, im2col

log = logging.getLogger("blkrew")


class UsageError(Exception):
    pass


def dataset_spec(cfg: RunConfig) -> datasets.DatasetSpec:
    return datasets.DatasetSpec(
        source=cfg["task"], classes=cfg["classes"], features=cfg["features"],
        samples=cfg["samples"], noise=cfg["noise"],
        seed=cfg.get("data_seed", cfg.get("seed", 0)),
        path=cfg["data"], label_path=cfg["labels"])


def build_network(cfg: RunConfig, n_features: int, seed: int) -> nn.Network:
    conv = None
    if cfg["conv"] is not None:
        shape = cfg["input_shape"]
        if shape is None or len(shape) != 3 or int(np.prod(shape)) != n_features:
            raise ConfigError("conv needs input_shape = C,H,W matching the feature count")
        if len(cfg["conv"]) != 4:
            raise ConfigError("conv must be out_channels,kernel,stride,padding")
        out, k, s, p = cfg["conv"]
        conv = nn.LayerSpec("conv2d", (*shape, out, k, k, s, p))
    return nn.mlp([n_features, *cfg["hidden"], cfg["classes"]], seed=seed, conv=conv)


def train_state(cfg: RunConfig, seed: int) -> nn.TrainState:
    return nn.TrainState(lr=cfg["lr"], seed=seed, batch_size=cfg["batch_size"],
                         momentum=cfg["momentum"])


def run_id(command: str, cfg: RunConfig, seed: int, extra: str = "") -> str:
    digest = hashlib.sha1(f"{command}\n{seed}\n{extra}\n{cfg.text}".encode("utf-8")).hexdigest()
    return f"{command}-{digest[:10]}"


def write_report(report: dict, report_dir) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S%f")
    path = Path(report_dir) / f"{report['run_id']}_{stamp}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")
    return path


def _layer_forward(model: modelfile.ModelFile, i: int, layer: nn.LayerSpec, x: np.ndarray,
                   workers: int) -> np.ndarray:
    """Rows of ``x`` are samples; returns rows of outputs."""
    w, b = model.network.weights[i], model.network.biases[i]
    r = model.reordered[i]
    if layer.kind == "fully_connected":
        if r is None:
            out = nn.gemm(x, w.T)
        else:
            out = reorder.sparse_exec(r, x.T, reorder.make_plan(r, workers)).T.copy()
        return out + b if layer.has_bias else out
    spec = layer.conv_spec()
    c, h, wd = layer.dims[:3]
    outs = []
    plan = reorder.make_plan(r, workers) if r is not None else None
    for sample in x:
        cols = im2col(sample.reshape(c, h, wd), spec)
        y = nn.gemm(w, cols) if r is None else reorder.sparse_exec(r, cols, plan)
        if layer.has_bias:
            y = y + b[:, None]
        outs.append(y.ravel())
    return np.stack(outs)


def model_logits(model: modelfile.ModelFile, x, workers: int = 1) -> np.ndarray:
    """Forward pass that runs reordered layers through the sparse runtime."""
    net = model.network
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    if x.shape[1] != net.input_size:
        raise ShapeError(f"data has {x.shape[1]} features, model expects {net.input_size}")
    pi = 0
    for layer in net.layers:
        if layer.parameterized:
            x = _layer_forward(model, pi, layer, x, workers)
            pi += 1
        elif layer.kind == "relu":
            x = np.maximum(x, 0.0)
    return x


def model_accuracy(model: modelfile.ModelFile, x, y, workers: int = 1) -> float:
    return float(np.mean(np.argmax(model_logits(model, x, workers), axis=1) == y))


def _seed(cfg: RunConfig, args) -> int:
    return args.seed if args.seed is not None else cfg["seed"]


def _workers(cfg: RunConfig, args) -> int:
    w = args.workers if args.workers is not None else cfg["workers"]
    w = reorder.default_workers() if w is None else w
    if w < 1:
        raise ConfigError("workers must be >= 1")
    return w


def cmd_train(cfg: RunConfig, args) -> dict:
    cfg.require("train")
    seed = _seed(cfg, args)
    x, y = datasets.load(dataset_spec(cfg))
    net = build_network(cfg, x.shape[1], seed)
    state = train_state(cfg, seed)
    losses = nn.fit(net, x, y, cfg["epochs"], state)
    acc = nn.evaluate(net, x, y)
    out = args.out or "model.blk"
    modelfile.save(modelfile.ModelFile(net, meta={"seed": seed, "stage": "dense"}), out)
    return {"command": "train", "run_id": run_id("train", cfg, seed), "model": str(out),
            "accuracy": acc, "final_loss": losses[-1] if losses else None,
            "epochs": cfg["epochs"], "weights": net.weight_count()}


def prune_configs(cfg: RunConfig) -> tuple[RegConfig, prune.PruneConfig]:
    regcfg = RegConfig(lam=cfg["lambda"], epsilon_scale=cfg["epsilon_scale"],
                       epsilon=cfg["epsilon"], directions=cfg.directions(), mode=cfg["mode"])
    prunecfg = prune.PruneConfig(
        T=cfg["T"], epochs_per_iteration=cfg["epochs_per_iteration"],
        retrain_epochs=cfg["retrain_epochs"], threshold_mode=cfg["threshold_mode"],
        tau=cfg["tau"], baseline=cfg["baseline"], schedule=cfg["schedule"],
        floor=cfg["floor"], target_rate=cfg["target_rate"])
    return regcfg, prunecfg


def cmd_prune(cfg: RunConfig, args) -> dict:
    cfg.require("prune")
    if not args.checkpoint:
        raise UsageError("prune needs --checkpoint")
    seed = _seed(cfg, args)
    x, y = datasets.load(dataset_spec(cfg))
    model = modelfile.load(args.checkpoint)
    pretrained = model.network
    regcfg, prunecfg = prune_configs(cfg)
    m, n = parse_block(cfg["block"])
    schemes = prune.make_schemes(pretrained, m, n)
    for i, s in enumerate(schemes):
        if s.clamped:
            log.warning("layer %d: block %s clamped to %s", i, cfg["block"], s.describe())
    state = train_state(cfg, seed)
    net, mask, report = prune.run_pipeline(pretrained, x, y, schemes, regcfg, prunecfg, state)
    out = args.out or "pruned.blk"
    modelfile.save(modelfile.ModelFile(net, mask.layers, meta={"seed": seed, "stage": "masked"}), out)
    doc = {"command": "prune", "run_id": run_id("prune", cfg, seed, str(args.checkpoint)), "model": str(out)}
    doc.update(report.to_dict())
    return doc


def reorder_model(model: modelfile.ModelFile, similarity: int = 0) -> modelfile.ModelFile:
    """Attach a reordered form to every layer, verifying reconstruction."""
    masks, reordered = [], []
    for i, w in enumerate(model.network.weights):
        lm = model.masks[i]
        if lm is None:
            log.warning("layer %d has no mask; reordering it as a dense layer", i)
            lm = LayerMask.full(scheme_for_layer(*w.shape, None, None))
        r = reorder.reorder(w, lm, similarity)
        expected = np.where(lm.elements(), w, 0.0)
        if not np.array_equal(r.to_dense(), expected):
            raise RuntimeError(f"layer {i}: reordered weights do not reconstruct the masked matrix")
        masks.append(lm)
        reordered.append(r)
    meta = dict(model.meta, stage="reordered")
    net = model.network.copy()
    return modelfile.ModelFile(net, masks, reordered, meta)


def cmd_reorder(cfg: RunConfig, args) -> dict:
    if not args.checkpoint:
        raise UsageError("reorder needs --checkpoint")
    model = modelfile.load(args.checkpoint)
    out = args.out or "reordered.blk"
    new = reorder_model(model, cfg["similarity"])
    modelfile.save(new, out)
    if modelfile.load(out).network.weights[0].shape != new.network.weights[0].shape:
        raise RuntimeError("written model does not load back")
    layers = []
    for i, r in enumerate(new.reordered):
        plan = reorder.make_plan(r, _workers(cfg, args))
        layers.append({"layer": i, "groups": len(r.groups), "active_rows": r.n_active,
                       "multiplies_per_column": r.multiply_count(),
                       **reorder.balance_metrics(r, plan)})
    return {"command": "reorder", "run_id": run_id("reorder", cfg, 0, str(args.checkpoint)), "model": str(out),
            "layers": layers}


def cmd_infer(cfg: RunConfig, args) -> dict:
    cfg.require("infer")
    if not args.checkpoint:
        raise UsageError("infer needs --checkpoint")
    model = modelfile.load(args.checkpoint)
    x, y = datasets.load(dataset_spec(cfg))
    workers = _workers(cfg, args)
    return {"command": "infer", "run_id": run_id("infer", cfg, 0, str(args.checkpoint)), "model": str(args.checkpoint),
            "accuracy": model_accuracy(model, x, y, workers), "workers": workers,
            "samples": int(len(y)),
            "representations": [model.representation(i) for i in range(len(model.masks))]}


def _shapes(text: str) -> list[tuple[int, int, int]]:
    out = []
    for part in text.split(","):
        dims = part.strip().lower().split("x")
        if len(dims) != 3:
            raise ConfigError(f"bench shape must be MxKxN, got {part!r}")
        out.append(tuple(int(d) for d in dims))
    return out


def cmd_bench(cfg: RunConfig, args) -> dict:
    workers = _workers(cfg, args)
    repeats = cfg["repeats"]
    seed = cfg.get("seed", 0)
    if args.checkpoint:
        model = modelfile.load(args.checkpoint)
        rng = np.random.default_rng(seed)
        table = []
        for i, w in enumerate(model.network.weights):
            lm = model.masks[i] or LayerMask.full(scheme_for_layer(*w.shape, None, None))
            x = rng.standard_normal((w.shape[1], cfg["bench_cols"]))
            row = reorder.bench_case(w, lm, x, repeats, workers, cfg["similarity"])
            row["layer"] = i
            table.append(row)
    else:
        m, n = parse_block(cfg.get("block", "4x8"))
        block = (m or 4, n or 8)
        table = reorder.bench(_shapes(cfg["bench_shapes"]), repeats, workers, block, seed=seed)
    return {"command": "bench", "run_id": run_id("bench", cfg, seed), "workers": workers,
            "repeats": repeats, "bench": table}


def _summary(doc: dict) -> list[str]:
    keys = ("command", "run_id", "model", "accuracy", "base_accuracy", "pruned_accuracy",
            "compression_rate", "surviving_weights", "total_weights")
    return [f"{k}: {doc[k]}" for k in keys if k in doc]


def cmd_report(path) -> None:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read report {path}: {exc}") from None
    for line in _summary(doc):
        print(line)
    for row in doc.get("bench", []):
        print("bench {shape}: dense {d:.2f} ms, naive {n:.2f} ms, reordered {r:.2f} ms".format(
            shape="x".join(map(str, row["shape"])), d=row["dense"]["median_ms"],
            n=row["naive_sparse"]["median_ms"], r=row["reordered"]["median_ms"]))
    print(json.dumps(doc, indent=2, sort_keys=True))


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "reorder": cmd_reorder,
            "infer": cmd_infer, "bench": cmd_bench}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blkrew", description="Block-based reweighted pruning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value run configuration")
        sp.add_argument("--checkpoint", help="input model file")
        sp.add_argument("--out", help="output model file")
        sp.add_argument("--workers", type=int, help=f"worker threads (default ${reorder.THREADS_ENV})")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--report-dir", default="reports", help="where JSON reports go")
    rp = sub.add_parser("report", help="pretty-print a JSON report")
    rp.add_argument("path")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.path)
            return 0
        cfg = load_config(args.config) if args.config else parse_config("", "<empty>")
        doc = COMMANDS[args.command](cfg, args)
        path = write_report(doc, args.report_dir)
        for line in _summary(doc):
            print(line)
        print(f"report: {path}")
        return 0
    except (ConfigError, UsageError, datasets.DatasetError) as exc:
        print(f"blkrew: error: {exc}", file=sys.stderr)
        return 2
    except (modelfile.ModelFileError, nn.DivergenceError, prune.PruneError, ShapeError,
            RuntimeError, ValueError) as exc:
        print(f"blkrew: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
