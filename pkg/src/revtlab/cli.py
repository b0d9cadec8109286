"""Command-line experiment runner.

Every subcommand reads a flat TOML config (``--config``), writes under the
output directory and records what it wrote in ``manifest.json``.  Exit code 2
signals a usage problem (bad flags, config or missing inputs), 1 a runtime
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli

from . import __version__
from . import ensemble as E
from . import evaldiag as D
from . import experiments as X
from .params import ENCODER, Checkpoint
from .reparam import PART_MODES, MergeSpec, block_mode, merge_checkpoint, part_mode, sweep_weights
from .synthdata import SegSample, dump_split, load_split
from .tensor import UsageError
from .train import model_from_checkpoint

log = logging.getLogger("revtlab")

SPLITS = ("train", "dev", "test")
ENSEMBLE_FLAGS = {"mean": "posterior_mean", "product": "posterior_product", "feature": "encoder_feature_mean"}


class InputError(Exception):
    """Missing or malformed input; maps to exit code 2."""


# ------------------------------------------------------------------ config


def load_config(path: str | Path | None) -> tuple[X.DeskConfig, dict]:
    """Parse a flat TOML file into a :class:`DeskConfig` plus the raw table."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        try:
            raw = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as exc:
            raise InputError(f"cannot parse {p}: {exc}") from exc
    known = {f.name for f in fields(X.DeskConfig)}
    extra = set(raw) - known - {"out_dir"}
    if extra:
        raise InputError(f"unknown config keys: {', '.join(sorted(extra))}")
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise InputError(f"config must be flat; tables found: {', '.join(nested)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items() if k in known}
    try:
        cfg = X.DeskConfig(**values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    bad = [p for p in cfg.policies if p not in ("a1", "a2", "a3", "a4", "a5", "a6")]
    if bad:
        raise InputError(f"unknown policy ids: {bad}")
    return cfg, raw


def config_hash(cfg: X.DeskConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- manifest


class Workspace:
    """Output directory plus its manifest."""

    def __init__(self, root: Path, cfg: X.DeskConfig):
        self.root = root
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = root / "manifest.json"
        self.manifest = {"tool": "revtlab", "version": __version__, "config_hash": config_hash(cfg),
                         "config": asdict(cfg), "entries": {}}
        if self.manifest_path.exists():
            old = json.loads(self.manifest_path.read_text())
            if old.get("config_hash") == self.manifest["config_hash"]:
                self.manifest["entries"] = old.get("entries", {})
            else:
                log.warning("config changed since the last run in %s; starting a fresh manifest", root)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, rel: str, command: str) -> None:
        digest = hashlib.sha256((self.root / rel).read_bytes()).hexdigest()
        self.manifest["entries"][rel] = {"sha256": digest, "command": command}

    def save(self) -> None:
        self.manifest["entries"] = dict(sorted(self.manifest["entries"].items()))
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def write_json(self, rel: str, obj, command: str) -> None:
        self.path(rel).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        self.record(rel, command)

    # data and checkpoints

    def data_file(self, domain: str, split: str) -> Path:
        return self.root / "data" / f"{domain}_{split}.bin"

    def split(self, domain: str, split: str) -> list[SegSample]:
        f = self.data_file(domain, split)
        if not f.exists():
            raise InputError(f"missing dataset {f}; run gen-data first")
        return load_split(f, domain)

    def domains(self) -> list[str]:
        idx = self.root / "data" / "domains.json"
        if not idx.exists():
            raise InputError(f"missing {idx}; run gen-data first")
        return json.loads(idx.read_text())["domains"]

    def checkpoint(self, rel: str) -> Checkpoint:
        f = self.root / rel
        if not f.exists():
            raise InputError(f"missing checkpoint {f}; run the producing command first")
        return Checkpoint.read(f)

    def members(self) -> list[Checkpoint]:
        return [self.checkpoint(f"checkpoints/model{m}.ckpt") for m in range(1, self.cfg.m + 1)]


# ----------------------------------------------------------------- commands


def cmd_gen_data(ws: Workspace, args) -> None:
    bench = X.benchmark(ws.cfg)
    for name, dd in bench.items():
        for split in SPLITS:
            rel = f"data/{name}_{split}.bin"
            dump_split(ws.path(rel), getattr(dd, split))
            ws.record(rel, "gen-data")
    ws.write_json("data/domains.json", {"domains": list(bench), "source": ws.cfg.source,
                                        "num_classes": bench[ws.cfg.source].spec.num_classes}, "gen-data")


def _warm(ws: Workspace) -> Checkpoint | None:
    if ws.cfg.warm_iters <= 0:
        return None
    rel = "checkpoints/warm.ckpt"
    if (ws.root / rel).exists() and rel in ws.manifest["entries"]:
        return ws.checkpoint(rel)
    warm = X.warm_start(ws.cfg, ws.split(ws.cfg.source, "train"))
    warm.write(ws.path(rel))
    ws.record(rel, "train")
    return warm


def cmd_train(ws: Workspace, args) -> None:
    if args.all:
        which = list(range(1, ws.cfg.m + 1))
    elif args.model is not None:
        if not 1 <= args.model <= ws.cfg.m:
            raise InputError(f"--model must be in 1..{ws.cfg.m}")
        which = [args.model]
    else:
        raise InputError("train needs --model M or --all")
    data = ws.split(ws.cfg.source, "train")
    warm = _warm(ws)
    for m in which:
        metrics = f"metrics/model{m}.csv"
        ck = X.train_member(ws.cfg, m, data, warm, metrics_path=ws.path(metrics))
        ck.write(ws.path(f"checkpoints/model{m}.ckpt"))
        ws.record(f"checkpoints/model{m}.ckpt", "train")
        ws.record(metrics, "train")
        log.info("model %d: final loss %.4f", m, ck.meta.get("final_loss", float("nan")))


def parse_weights(text: str | None, m: int) -> tuple[float, ...] | None:
    if text is None or text == "uniform":
        return None
    try:
        w = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise InputError(f"cannot parse weights {text!r}") from exc
    if len(w) != m:
        raise InputError(f"{len(w)} weights for {m} models")
    return tuple(w)


def merge_name(args) -> str:
    what = args.block if args.block else args.mode
    wt = "uniform" if args.weights in (None, "uniform") else args.weights.replace(",", "_")
    return f"{what}_{wt}_d{args.donor}"


def cmd_merge(ws: Workspace, args) -> None:
    members = ws.members()
    names = tuple(f"model{m}" for m in range(1, len(members) + 1))
    try:
        spec = MergeSpec(tuple(members), weights=parse_weights(args.weights, len(members)), donor=args.donor,
                         names=names)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    spec = block_mode(spec, args.block) if args.block else part_mode(spec, args.mode)
    rel = f"merged/{merge_name(args)}.ckpt"
    merge_checkpoint(spec).write(ws.path(rel))
    ws.record(rel, "merge")


def _parse_subset(text: str | None) -> list[int] | None:
    if not text:
        return None
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise InputError(f"cannot parse class list {text!r}") from exc


def _eval_splits(ws: Workspace) -> list[tuple[str, str]]:
    return [(d, s) for d in ws.domains() for s in ("dev", "test")]


def _num_classes(ws: Workspace) -> int:
    return json.loads((ws.root / "data" / "domains.json").read_text())["num_classes"]


def _evaluate(ws: Workspace, predict, subset) -> dict[str, D.EvalReport]:
    s = _num_classes(ws)
    out = {}
    for d, sp in _eval_splits(ws):
        x, y = X.images_of(ws.split(d, sp))
        pred = np.concatenate([predict(x[i:i + 25]).argmax(1) for i in range(0, len(x), 25)])
        out[f"{d}/{sp}"] = D.miou(pred, y, class_subset=subset, num_classes=s, domain=f"{d}/{sp}")
    return out


def _scores_file(ws: Workspace) -> dict:
    f = ws.root / "reports" / "scores.json"
    return json.loads(f.read_text()) if f.exists() else {"models": {}}


def _store_scores(ws: Workspace, name: str, reports: dict[str, D.EvalReport], subset, command: str) -> None:
    D.write_iou_csv(ws.path(f"reports/iou_{name}.csv"), reports)
    ws.record(f"reports/iou_{name}.csv", command)
    scores = _scores_file(ws)
    scores["models"][name] = {"subset": subset, "miou": {k: r.miou for k, r in reports.items()}}
    scores["models"] = dict(sorted(scores["models"].items()))
    ws.write_json("reports/scores.json", scores, command)


def cmd_eval(ws: Workspace, args) -> None:
    subset = _parse_subset(args.subset)
    targets = {f"model{m}": f"checkpoints/model{m}.ckpt" for m in range(1, ws.cfg.m + 1)}
    merged_dir = ws.root / "merged"
    if merged_dir.exists():
        for f in sorted(merged_dir.glob("*.ckpt")):
            targets[f"merged_{f.stem}"] = f"merged/{f.name}"
    for name, rel in targets.items():
        model = model_from_checkpoint(ws.checkpoint(rel))
        _store_scores(ws, name, _evaluate(ws, model.predict, subset), subset, "eval")


def cmd_ensemble(ws: Workspace, args) -> None:
    kind = ENSEMBLE_FLAGS[args.ensemble]
    subset = _parse_subset(args.subset)
    models = [model_from_checkpoint(c) for c in ws.members()]
    if kind == "encoder_feature_mean":
        for k in range(1, len(models) + 1):
            fn = lambda x, k=k: E.encoder_feature_mean(models, x, k)
            _store_scores(ws, f"ensemble_feature_d{k}", _evaluate(ws, fn, subset), subset, "ensemble")
    else:
        fn = lambda x: E.ensemble_predict(kind, models, x)[0]
        _store_scores(ws, f"ensemble_{args.ensemble}", _evaluate(ws, fn, subset), subset, "ensemble")


def cmd_cosine(ws: Workspace, args) -> None:
    trees = [c.tree for c in ws.members()]
    rel = "reports/cosine.csv"
    with open(ws.path(rel), "w") as fh:
        fh.write("scope,layer,cosine\n")
        for scope in ("encoder_mean", "full_mean"):
            fh.write(f"{scope},,{D.cosine_similarity(trees, scope):.8f}\n")
        for layer, v in D.cosine_similarity(trees, "per_layer").items():
            fh.write(f"per_layer,{layer},{v:.8f}\n")
    ws.record(rel, "cosine")


def cmd_sweep(ws: Workspace, args) -> None:
    members = ws.members()
    if len(members) != 3:
        raise InputError("weight sweeps need exactly three base models")
    samples = ws.split(ws.cfg.target, "dev")
    s = _num_classes(ws)
    table = sweep_weights(members, args.grid_step, ENCODER,
                          lambda model: X.score(model.predict, samples, s).miou, donor=args.donor)
    rel = "reports/sweep.csv"
    with open(ws.path(rel), "w") as fh:
        fh.write("alpha,beta,gamma,miou\n")
        for (a, b, c), v in table:
            fh.write(f"{a:.6f},{b:.6f},{c:.6f},{v:.6f}\n")
    ws.record(rel, "sweep")


def cmd_report(ws: Workspace, args) -> None:
    scores = _scores_file(ws)["models"]
    if not scores:
        raise InputError("no evaluation results; run eval first")
    grouping = D.default_grouping(ws.domains(), ws.cfg.source)
    base_names = [f"model{m}" for m in range(1, ws.cfg.m + 1) if f"model{m}" in scores]
    rows: dict[str, dict[str, D.GroupScore]] = {}
    if base_names:
        per_domain = {k: [scores[n]["miou"][k] for n in base_names] for k in scores[base_names[0]]["miou"]}
        rows["base"] = D.aggregate(per_domain, grouping)
    for name, entry in scores.items():
        if name not in base_names:
            rows[name] = D.aggregate(entry["miou"], grouping)
    rel = "reports/groups.csv"
    with open(ws.path(rel), "w") as fh:
        fh.write("model,group,miou,std\n")
        for model, groups in rows.items():
            for g in groups.values():
                fh.write(f"{model},{g.group},{g.miou:.6f},{g.std:.6f}\n")
    ws.record(rel, "report")
    summary = {
        "config_hash": ws.manifest["config_hash"],
        "grouping": grouping,
        "ensemble_feature_reduction": "mean over decoders",
        "groups": {m: {g.group: {"miou": g.miou, "std": g.std} for g in gs.values()} for m, gs in rows.items()},
    }
    ws.write_json("reports/summary.json", summary, "report")


def cmd_pipeline(ws: Workspace, args) -> None:
    """gen-data, train all, encoder-only merge, eval and report in one go."""
    cmd_gen_data(ws, args)
    args.all, args.model = True, None
    cmd_train(ws, args)
    args.mode, args.block, args.weights, args.donor = "encoder_only", None, "uniform", 1
    cmd_merge(ws, args)
    cmd_eval(ws, args)
    cmd_report(ws, args)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "merge": cmd_merge,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "cosine": cmd_cosine,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revtlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"revtlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (default: config out_dir or runs/default)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--model", type=int, help="1-based base model index")
            p.add_argument("--all", action="store_true", help="train every base model")
        if name in ("merge", "pipeline"):
            p.add_argument("--mode", choices=PART_MODES, default="encoder_only")
            p.add_argument("--block", choices=("patch_embed", "attention", "mixffn", "conv", "fc"))
            p.add_argument("--weights", default="uniform", help="'uniform' or comma-separated weights")
        if name in ("merge", "sweep"):
            p.add_argument("--donor", type=int, default=1, help="1-based decoder donor")
        if name == "ensemble":
            p.add_argument("--ensemble", choices=tuple(ENSEMBLE_FLAGS), required=True)
        if name in ("eval", "ensemble", "pipeline"):
            p.add_argument("--subset", help="comma-separated class ids to average over")
        if name == "sweep":
            p.add_argument("--grid-step", type=float, default=1 / 12)
    return parser


_BLOCK_FLAGS = {"conv": "conv_layers", "fc": "fc_layers"}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "block", None):
        args.block = _BLOCK_FLAGS.get(args.block, args.block)
    try:
        cfg, raw = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_(master_seed=args.seed)
        out = Path(args.out or raw.get("out_dir", "runs/default"))
        ws = Workspace(out, cfg)
        try:
            COMMANDS[args.command](ws, args)
        finally:
            ws.save()
    except (InputError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
