"""Config-driven experiment runner.

Configs are YAML (JSON is valid YAML). Precedence, lowest to highest:
built-in defaults, the config file, ``--set block.key=value`` overrides, then
dedicated flags such as ``--seed`` or ``--mode``. Relative ``output_dir``
values are resolved against ``$SATKIT_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 configuration error, 2 missing or corrupt artifact,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .attacks import AttackSpec, parse_epsilon
from .data import SaliencyStore, load_dataset
from .errors import ConfigError, MissingArtifactError, SatkitError
from .evaluation import default_grid, eval_grid
from .models import Checkpoint, build_model, load_checkpoint, save_checkpoint
from .saliency import (EnsembleSelector, SaliencyMap, binarize, compute_saliency,
                       weak_saliency_from_annotation)
from .sat import HybridPolicy, SatSchedule, hybrid_train, sat_train
from .training import TrainConfig, make_teacher, train

log = logging.getLogger("satkit")

OUTPUT_ROOT_ENV = "SATKIT_OUTPUT_ROOT"

DEFAULTS = {
    "seed": 0,
    "output_dir": "satkit-runs",
    "dataset": {"name": "synthetic_blobs", "classes": 2, "per_class": 400, "eval_per_class": 200},
    "teacher": {"arch": "mini_resnet", "mode": "adv", "epochs": 30, "batch_size": 64,
                "learning_rate": 1e-3, "epsilon": "8/255"},
    "saliency": {"method": "guided_backprop", "binarize": "sign", "q": None, "batch_size": 128},
    "train": {"mode": "sat", "arch": "small_cnn", "epochs": 30, "batch_size": 64,
              "learning_rate": 1e-3, "alpha10": 0.6, "epsilon0": "8/255", "time_unit": "epoch",
              "saliency_mode": "sign", "store": None, "attack": None, "noise_epsilon": "8/255",
              "trades_beta": 6.0, "sat_probability": 0.5},
    "eval": {"grid": "default", "batch_size": 256},
    "sweep": {"param": "alpha10", "values": [0.1, 0.5, 0.9], "plot": False},
}

TRAIN_MODES = {
    "standard": "standard",
    "uniform": "uniform_noise",
    "pgd": "pgd_at",
    "trades": "trades_at",
    "pgd-uniform": "pgd_at_uniform",
    "trades-uniform": "trades_at_uniform",
    "sat": None,
    "pgd-sat": None,
    "trades-sat": None,
}


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_set(items) -> dict:
    override: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects block.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        node = override
        keys = dotted.strip().split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = yaml.safe_load(raw)
    return override


def load_config(path=None, overrides=None) -> dict:
    """Defaults merged with the file at ``path`` and the ``overrides`` mapping."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"config file {path} not found")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def output_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _guard(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    return path


def _provenance(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": int(cfg["seed"])}


def _write_text(path: Path, text: str, force: bool) -> Path:
    _guard(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def _dataset(cfg: dict, split: str = "train"):
    d = cfg["dataset"]
    per_class = d["per_class"] if split == "train" else d.get("eval_per_class", d["per_class"])
    return load_dataset(d["name"], seed=int(cfg["seed"]), split=split, classes=d.get("classes"),
                        per_class=per_class)


def _attack_from(block, family: str) -> AttackSpec:
    if block is None:
        return AttackSpec(family, 8 / 255, steps=5)
    spec = AttackSpec.from_dict(dict(block))
    if spec.family != family:
        raise ConfigError(f"this mode needs a {family} attack, config gives {spec.family}")
    return spec


def _schedule(t: dict) -> SatSchedule:
    return SatSchedule.from_alpha10(float(t["alpha10"]), epsilon0=parse_epsilon(t["epsilon0"]),
                                    time_unit=t["time_unit"])


def _store_dirs(cfg: dict, flag) -> list[Path]:
    chosen = flag or cfg["train"]["store"]
    if chosen is None:
        chosen = str(output_dir(cfg) / "saliency" / cfg["saliency"]["method"])
    if isinstance(chosen, str):
        chosen = chosen.split(",")
    return [Path(p) for p in chosen]


def _open_store(cfg: dict, flag=None):
    dirs = _store_dirs(cfg, flag)
    stores = [SaliencyStore.open(d) for d in dirs]
    if len(stores) == 1:
        return stores[0], [str(d) for d in dirs]
    return EnsembleSelector(stores, selection_seed=int(cfg["seed"])), [str(d) for d in dirs]


def _grid(source) -> list[AttackSpec]:
    if source is None or source == "default":
        return default_grid()
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        if not path.exists():
            raise MissingArtifactError(f"grid file {path} not found")
        try:
            source = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed grid file {path}: {exc}") from exc
        if isinstance(source, dict):
            source = source.get("grid", source.get("specs"))
        return _grid(source)
    if not isinstance(source, list):
        raise ConfigError("an eval grid is 'default', a file path, or a list of attack specs")
    try:
        return [AttackSpec.from_dict(dict(item)) for item in source]
    except TypeError as exc:
        raise ConfigError(f"malformed attack spec in grid: {exc}") from exc


def run_training(cfg: dict, mode: str, store_flag=None):
    """Train a student per the ``train`` block; returns (model, history, extra metadata)."""
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown train mode {mode!r}; known: {sorted(TRAIN_MODES)}")
    t = cfg["train"]
    seed = int(cfg["seed"])
    dataset = _dataset(cfg)
    model = build_model(t["arch"], dataset.image_shape, dataset.num_classes, seed=seed)
    base = dict(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                learning_rate=float(t["learning_rate"]), seed=seed,
                trades_beta=float(t["trades_beta"]), noise_epsilon=t["noise_epsilon"])
    extra: dict = {"mode": mode}
    baseline = TRAIN_MODES[mode]
    if baseline is not None:
        attack = None
        if baseline != "standard" and baseline != "uniform_noise":
            attack = _attack_from(t["attack"], "trades" if mode.startswith("trades") else "pgd")
        config = TrainConfig(mode=baseline, attack=attack, **base)
        model, history = train(model, dataset, config)
        return model, history, extra
    store, dirs = _open_store(cfg, store_flag)
    extra["saliency_stores"] = dirs
    schedule = _schedule(t)
    config = TrainConfig(**base)
    if mode == "sat":
        model, history = sat_train(model, dataset, store, schedule, config, t["saliency_mode"])
    else:
        partner = mode.split("-")[0]
        spec = _attack_from(t["attack"], partner)
        policy = HybridPolicy(partner, float(t["sat_probability"]))
        model, history = hybrid_train(model, dataset, store, schedule, policy, spec, config,
                                      t["saliency_mode"])
    return model, history, extra


def _save_run(cfg, model, history, out: Path, tag: str, force: bool, **metadata):
    prov = _provenance(cfg)
    ckpt_path = _guard(out / "model.zip", force)
    hist_path = _guard(out / "history.jsonl", force)
    ckpt = Checkpoint.from_model(model, tag, dataset=cfg["dataset"], experiment_config=cfg,
                                 **prov, **metadata)
    save_checkpoint(ckpt, ckpt_path)
    _write_text(hist_path, history.to_jsonl(prov), force=True)
    _write_text(out / "config.json", json.dumps(cfg, indent=1, sort_keys=True), force=True)
    return ckpt_path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_teacher(cfg, args) -> int:
    t = cfg["teacher"]
    dataset = _dataset(cfg)
    out = output_dir(cfg) / "teacher" / t["mode"]
    _guard(out / "model.zip", args.force)
    log.info("training %s teacher (%s, %d epochs)", t["mode"], t["arch"], t["epochs"])
    prov = _provenance(cfg)
    ckpt = make_teacher(dataset, t["arch"], t["mode"], seed=int(cfg["seed"]), epochs=int(t["epochs"]),
                        batch_size=int(t["batch_size"]), epsilon=parse_epsilon(t["epsilon"]),
                        learning_rate=float(t["learning_rate"]), config_hash=prov["config_hash"])
    ckpt.metadata["dataset"] = cfg["dataset"]
    ckpt.metadata["experiment_config"] = cfg
    path = save_checkpoint(ckpt, out / "model.zip")
    _write_text(out / "config.json", json.dumps(cfg, indent=1, sort_keys=True), force=True)
    print(path)
    return 0


def cmd_extract_saliency(cfg, args) -> int:
    s = cfg["saliency"]
    method = args.method or s["method"]
    dataset = _dataset(cfg)
    out = Path(args.store) if args.store else output_dir(cfg) / "saliency" / method
    _guard(out / SaliencyStore.MANIFEST, args.force)
    rule = s["binarize"]
    if rule not in ("none", "sign", "topq"):
        raise ConfigError(f"saliency.binarize must be none, sign or topq, got {rule!r}")
    meta = {"method": method, "binarize": rule, "dataset": cfg["dataset"], **_provenance(cfg)}
    if method == "bbox":
        if dataset.annotations is None:
            raise ConfigError(f"dataset {dataset.name} has no annotations for bbox saliency")
        teacher_id = "annotation"
        meta["teacher_id"] = teacher_id
        store = SaliencyStore(out, dataset.image_shape, dataset.sample_ids, meta)
        for sid, label in zip(dataset.sample_ids, dataset.labels):
            smap = weak_saliency_from_annotation(dataset.annotations[sid], dataset.image_shape,
                                                 teacher_id, int(label))
            store.put(sid, smap, flush=False)
        store.flush()
        print(out)
        return 0
    ckpt_path = args.checkpoint
    if ckpt_path is None:
        raise ConfigError("extract-saliency needs --checkpoint for model-based methods")
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.build().eval()
    teacher_id = f"{ckpt.training_mode_tag}-{ckpt.parameter_hash()[:12]}"
    meta["teacher_id"] = teacher_id
    store = SaliencyStore(out, dataset.image_shape, dataset.sample_ids, meta)
    x_all, y_all = dataset.tensors()
    dtype = next(model.parameters()).dtype
    bs = int(s["batch_size"])
    for start in range(0, len(dataset), bs):
        x = x_all[start:start + bs].to(dtype)
        y = y_all[start:start + bs]
        maps = compute_saliency(method, model, x, y)
        if rule != "none":
            maps = binarize(maps, rule, s.get("q"))
        kind = "raw" if rule == "none" else "signed"
        for i, sid in enumerate(dataset.sample_ids[start:start + bs]):
            smap = SaliencyMap(maps[i].detach().float().numpy(), kind, method, teacher_id, int(y[i]))
            store.put(sid, smap, flush=False)
    store.flush()
    print(out)
    return 0


def cmd_train(cfg, args) -> int:
    mode = args.mode or cfg["train"]["mode"]
    out = output_dir(cfg) / "models" / mode
    _guard(out / "model.zip", args.force)
    log.info("training %s (%d epochs)", mode, cfg["train"]["epochs"])
    model, history, extra = run_training(cfg, mode, args.store)
    print(_save_run(cfg, model, history, out, mode, args.force, **extra))
    return 0


def _evaluate(ckpt, cfg, specs, model_id):
    dataset = _dataset(cfg, split="test")
    model = ckpt.build().eval()
    report = eval_grid(model, dataset, specs, model_id=model_id, seed=int(cfg["seed"]),
                       batch_size=int(cfg["eval"]["batch_size"]))
    report.metadata.update(_provenance(cfg))
    report.metadata["parameter_hash"] = ckpt.parameter_hash()
    report.metadata["training_mode_tag"] = ckpt.training_mode_tag
    return report


def _write_report(report, out: Path, force: bool):
    _write_text(out / "report.json", report.to_json() + "\n", force)
    _write_text(out / "report.csv", report.to_csv(), force)


def cmd_evaluate(cfg, args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.config is None and "experiment_config" in ckpt.metadata:
        # without --config, evaluate under the config the checkpoint was trained with
        cfg = load_config(None, _merge(ckpt.metadata["experiment_config"], args.overrides))
    specs = _grid(args.grid if args.grid is not None else cfg["eval"]["grid"])
    out = Path(args.output) if args.output else Path(args.checkpoint).resolve().parent
    _guard(out / "report.json", args.force)
    _guard(out / "report.csv", args.force)
    report = _evaluate(ckpt, cfg, specs, Path(args.checkpoint).stem)
    _write_report(report, out, args.force)
    print(out / "report.json")
    return 0


def _value_label(value) -> str:
    return str(value).replace("/", "_")


def cmd_sweep(cfg, args) -> int:
    sw = cfg["sweep"]
    param = args.param or sw["param"]
    if param not in ("alpha10", "epsilon0"):
        raise ConfigError(f"sweep parameter must be alpha10 or epsilon0, got {param!r}")
    values = sw["values"] if args.values is None else [yaml.safe_load(v) for v in args.values.split(",")]
    if not values:
        raise ConfigError("sweep needs at least one value")
    mode = args.mode or cfg["train"]["mode"]
    if mode not in ("sat", "pgd-sat", "trades-sat"):
        raise ConfigError(f"sweeps vary SAT parameters; mode {mode!r} has none")
    specs = _grid(args.grid if args.grid is not None else cfg["eval"]["grid"])
    root = output_dir(cfg) / f"sweep-{param}"
    combined = root / "sweep.csv"
    _guard(combined, args.force)
    rows = []
    for value in values:
        run_cfg = copy.deepcopy(cfg)
        run_cfg["train"][param] = value
        numeric = float(value) if param == "alpha10" else parse_epsilon(value)
        out = root / f"value-{_value_label(value)}"
        log.info("sweep %s=%s", param, value)
        model, history, extra = run_training(run_cfg, mode, args.store)
        _save_run(run_cfg, model, history, out, mode, args.force, sweep_param=param,
                  sweep_value=value, **extra)
        report = _evaluate(Checkpoint.from_model(model, mode), run_cfg, specs, f"{mode}-{param}-{value}")
        _write_report(report, out, args.force)
        for row in report.rows():
            rows.append({"param": param, "value": numeric, **row})
        rows.append({"param": param, "value": numeric, "attack": "clean", "steps": 0,
                     "epsilon": 0.0, "accuracy": report.clean_accuracy})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["param", "value", "attack", "steps", "epsilon", "accuracy"],
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _write_text(combined, buf.getvalue(), args.force)
    print(combined)
    if args.plot or sw.get("plot"):
        print(_plot_sweep(rows, param, root / "sweep.png", args.force))
    return 0


def _plot_sweep(rows, param, path: Path, force: bool) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    _guard(path, force)
    lines: dict = {}
    for row in rows:
        if row["attack"] == "clean":
            continue
        key = (row["attack"], row["steps"], row["epsilon"])
        lines.setdefault(key, []).append((row["value"], row["accuracy"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (attack, steps, eps), pts in sorted(lines.items()):
        pts.sort()
        label = f"{attack}{'-' + str(steps) if attack in ('pgd', 'trades') else ''} eps={eps * 255:g}/255"
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("alpha^10" if param == "alpha10" else "epsilon0")
    ax.set_ylabel("robust accuracy")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="YAML/JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. --set train.epochs=5 (repeatable)")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--output-dir", help="output directory (overrides config)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    common(sub.add_parser("train-teacher", help="train a std or adv saliency teacher"))

    p = common(sub.add_parser("extract-saliency", help="write a saliency store for the training set"))
    p.add_argument("--checkpoint", help="teacher checkpoint (not needed for --method bbox)")
    p.add_argument("--method", help="saliency method id, or bbox for annotation maps")
    p.add_argument("--store", help="store directory (default: <output_dir>/saliency/<method>)")

    p = common(sub.add_parser("train", help="train a student with a baseline, SAT or hybrid mode"))
    p.add_argument("--mode", choices=sorted(TRAIN_MODES))
    p.add_argument("--store", help="saliency store directory for SAT modes")

    p = common(sub.add_parser("evaluate", help="robust accuracy grid for a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", help="YAML/JSON list of attack specs, or 'default'")
    p.add_argument("--output", help="report directory (default: next to the checkpoint)")

    p = common(sub.add_parser("sweep", help="train and evaluate one SAT model per parameter value"))
    p.add_argument("--param", choices=["alpha10", "epsilon0"])
    p.add_argument("--values", help="comma separated values, e.g. 0.1,0.5,0.9 or 2/255,8/255")
    p.add_argument("--mode", choices=["sat", "pgd-sat", "trades-sat"])
    p.add_argument("--store", help="saliency store directory")
    p.add_argument("--grid", help="YAML/JSON list of attack specs, or 'default'")
    p.add_argument("--plot", action="store_true", help="also write sweep.png")
    return parser


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "extract-saliency": cmd_extract_saliency,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_set(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.output_dir is not None:
            overrides["output_dir"] = args.output_dir
        args.overrides = overrides
        cfg = load_config(args.config, overrides)
        torch.manual_seed(int(cfg["seed"]))
        np.random.seed(int(cfg["seed"]) % 2**32)
        return COMMANDS[args.command](cfg, args)
    except SatkitError as exc:
        print(f"satkit: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
