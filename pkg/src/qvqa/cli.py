"""Command-line entry point: ``qvqa gen-data | pretrain | eval | verify``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

log = logging.getLogger("qvqa")

RESOLVED_NAME = "resolved_config.json"
PAPER_LR = 2e-5

DEFAULTS = {
    "seed": 0,
    "data.count": 64,
    "data.ratios": [7, 1, 2],
    "train.preset": "report_gen",
    "train.lam": 1.0,
    "train.batch_size": 25,
    "train.buffer_size": 100,
    "train.lr": 1e-3,
    "train.paper_lr": PAPER_LR,
    "train.weight_decay": 0.05,
    "train.warmup_fraction": 0.4,
    "train.init_lr": 1e-8,
    "train.epochs": 30,
    "train.early_stop_patience": 5,
    "train.use_cl": True,
    "train.use_qcl": True,
    "train.granularities": ["coarse", "medium", "fine"],
    "train.max_steps": None,
    "train.grad_clip": 1.0,
    "train.loss_weights": None,
    "model.image_size": 64,
    "model.patch_size": 8,
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.vis_layers": 2,
    "model.txt_layers": 2,
    "model.qft_layers": 3,
    "model.gen_layers": 2,
    "model.m": 8,
    "model.max_text_len": 96,
    "model.gen_text_len": 80,
    "model.max_gen_len": 48,
    "model.pool": "mean",
    "eval.split": "test",
    "eval.batch_size": 32,
    "eval.max_len": None,
}
NULLABLE = {"train.early_stop_patience", "train.max_steps", "train.grad_clip", "train.loss_weights", "eval.max_len"}
PRESET_WEIGHTS = {"report_gen": [9.0, 1.0, 3.0], "visual": [1.0, 3.0, 9.0]}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def flatten(mapping, prefix=""):
    """Nested dicts become dotted keys; already-dotted keys pass through."""
    out = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _type_ok(key, value):
    default = DEFAULTS[key]
    if value is None:
        return key in NULLABLE
    if key in NULLABLE and default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, type(default))


def resolve_config(file_values=None, overrides=None):
    """Defaults <- config file <- flag overrides; every problem is reported at once."""
    cfg = dict(DEFAULTS)
    problems = []
    for source, values in (("config file", file_values or {}), ("flags", overrides or {})):
        for key, value in flatten(values).items():
            if key not in DEFAULTS:
                problems.append(f"unknown key {key!r} in {source}")
            elif not _type_ok(key, value):
                problems.append(f"{key}: expected {type(DEFAULTS[key]).__name__}, got {value!r} ({source})")
            else:
                cfg[key] = float(value) if isinstance(DEFAULTS[key], float) and value is not None else value
    if cfg["train.preset"] not in PRESET_WEIGHTS:
        problems.append(f"train.preset must be one of {sorted(PRESET_WEIGHTS)}, got {cfg['train.preset']!r}")
    for key in ("train.batch_size", "train.epochs", "data.count", "eval.batch_size"):
        if isinstance(cfg[key], int) and cfg[key] < 1:
            problems.append(f"{key} must be >= 1, got {cfg[key]}")
    if isinstance(cfg["train.buffer_size"], int) and cfg["train.buffer_size"] < 0:
        problems.append(f"train.buffer_size must be >= 0, got {cfg['train.buffer_size']}")
    wf = cfg["train.warmup_fraction"]
    if isinstance(wf, float) and not 0 <= wf < 1:
        problems.append(f"train.warmup_fraction must lie in [0, 1), got {wf}")
    if isinstance(cfg["train.lr"], float) and cfg["train.lr"] < 0:
        problems.append(f"train.lr must be >= 0, got {cfg['train.lr']}")
    ratios = cfg["data.ratios"]
    if not (isinstance(ratios, list) and len(ratios) == 3 and all(isinstance(r, (int, float)) and r >= 0 for r in ratios)
            and ratios[0] > 0 and ratios[1] > 0):
        problems.append(f"data.ratios must be three non-negative numbers with positive train and val parts, got {ratios!r}")
    grans = cfg["train.granularities"]
    if not isinstance(grans, list) or not grans or any(g not in ("coarse", "medium", "fine") for g in grans):
        problems.append(f"train.granularities must be a non-empty subset of coarse/medium/fine, got {grans!r}")
    lw = cfg["train.loss_weights"]
    if lw is not None and not (isinstance(lw, list) and len(lw) == 3 and all(isinstance(w, (int, float)) and w >= 0 for w in lw)):
        problems.append(f"train.loss_weights must be null or three non-negative numbers, got {lw!r}")
    if cfg["eval.split"] not in ("train", "val", "test", "all"):
        problems.append(f"eval.split must be train, val, test or all, got {cfg['eval.split']!r}")
    if cfg["model.pool"] not in ("mean", "cls"):
        problems.append(f"model.pool must be 'mean' or 'cls', got {cfg['model.pool']!r}")
    if problems:
        raise ConfigError(problems)
    cfg["train.loss_weights_resolved"] = list(lw) if lw is not None else PRESET_WEIGHTS[cfg["train.preset"]]
    return cfg


def write_resolved(out_dir, cfg, command):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **cfg}
    (out_dir / RESOLVED_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def train_config(cfg):
    from .trainer import TrainConfig

    lw = cfg["train.loss_weights"]
    return TrainConfig(
        batch_size=cfg["train.batch_size"],
        buffer_size=cfg["train.buffer_size"],
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        warmup_fraction=cfg["train.warmup_fraction"],
        init_lr=cfg["train.init_lr"],
        epochs=cfg["train.epochs"],
        early_stop_patience=cfg["train.early_stop_patience"],
        seed=cfg["seed"],
        preset=cfg["train.preset"],
        lam=cfg["train.lam"],
        use_cl=cfg["train.use_cl"],
        use_qcl=cfg["train.use_qcl"],
        granularities=tuple(cfg["train.granularities"]),
        max_steps=cfg["train.max_steps"],
        grad_clip=cfg["train.grad_clip"],
        weights_override=tuple(lw) if lw is not None else None,
    )


def model_config(cfg, vocab_size):
    from .model import ModelConfig

    names = {f.name for f in fields(ModelConfig)}
    kwargs = {k[len("model."):]: v for k, v in cfg.items() if k.startswith("model.") and k[len("model."):] in names}
    return ModelConfig(vocab_size=vocab_size, init_seed=cfg["seed"], **kwargs)


def vocab_digest(vocab):
    return hashlib.sha256(json.dumps(vocab.to_json(), sort_keys=True).encode()).hexdigest()


# commands --------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    from .data import make_samples, write_dataset

    out = Path(args.out)
    samples = make_samples(cfg["seed"], cfg["data.count"])
    write_dataset(out, samples)
    write_resolved(out, {k: v for k, v in cfg.items() if k == "seed" or k.startswith("data.")}, "gen-data")
    log.info("wrote %d scenes (%d images) to %s", len(samples), 2 * len(samples), out)
    return 0


def _load_split(data_dir, seed, ratios):
    from .data import read_dataset, split_samples

    samples, vocab = read_dataset(data_dir)
    return split_samples(samples, seed, tuple(ratios)), vocab


def cmd_pretrain(args, cfg):
    from .trainer import encode_sample, pretrain

    data = Path(args.data)
    if not (data / "dataset.jsonl").exists():
        raise FileNotFoundError(f"dataset not found: {data / 'dataset.jsonl'} (run gen-data first)")
    out = Path(args.out)
    write_resolved(out, cfg, "pretrain")
    (train, val, _), vocab = _load_split(data, cfg["seed"], cfg["data.ratios"])
    if not train or not val:
        raise ValueError(f"split {cfg['data.ratios']} leaves an empty train or validation set "
                         f"({len(train)} train, {len(val)} val)")
    tcfg = train_config(cfg)
    mcfg = model_config(cfg, len(vocab))
    enc_train = [encode_sample(s, vocab) for s in train]
    enc_val = [encode_sample(s, vocab) for s in val]

    def progress(epoch, record, val_loss):
        log.info("epoch %d step %d train %.4f val %.4f lr %.2e", epoch, record["step"], record["L_total"],
                 val_loss, record["lr"])

    meta = {"data": {"split_seed": cfg["seed"], "ratios": cfg["data.ratios"], "vocab_sha256": vocab_digest(vocab)}}
    res = pretrain(tcfg, enc_train, enc_val, mcfg, out_dir=out, progress=progress, meta=meta)
    log.info("finished after epoch %d (best %d); outputs in %s", res.stopped_epoch, res.best_epoch, out)
    return 0


def cmd_eval(args, cfg):
    from .metrics import evaluate
    from .model import QVQAModel
    from .trainer import encode_sample

    ckpt = Path(args.checkpoint)
    meta = json.loads((ckpt / "config.json").read_text())
    model = QVQAModel.load(ckpt)
    data_meta = meta.get("data", {})
    split_seed = data_meta.get("split_seed", cfg["seed"])
    ratios = data_meta.get("ratios", cfg["data.ratios"])
    (train, val, test), vocab = _load_split(Path(args.data), split_seed, ratios)
    expected = data_meta.get("vocab_sha256")
    if expected is not None and expected != vocab_digest(vocab):
        raise ValueError("dataset vocabulary differs from the one the checkpoint was trained with")
    if len(vocab) != model.cfg.vocab_size:
        raise ValueError(f"dataset vocabulary has {len(vocab)} tokens, checkpoint expects {model.cfg.vocab_size}")
    split = cfg["eval.split"]
    chosen = {"train": train, "val": val, "test": test, "all": train + val + test}[split]
    if not chosen:
        raise ValueError(f"the {split} split is empty")
    result = evaluate(model, [encode_sample(s, vocab) for s in chosen], vocab,
                      batch_size=cfg["eval.batch_size"], max_len=cfg["eval.max_len"])
    result["split"] = split
    out = Path(args.out)
    write_resolved(out, cfg, "eval")
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    agg = result["aggregates"]
    log.info("BLEU4 %.4f ROUGE_L %.4f on %d %s scenes", agg["BLEU4"], agg["ROUGE_L"], agg["n"], split)
    return 0


def cmd_verify(args, cfg):
    from . import verify

    checks = verify.run(args.only, n_configs=args.configs)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


# argument parsing ------------------------------------------------------------


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="qvqa", description="Desk-scale VQA-driven multimodal pre-training.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON file of dotted keys (e.g. train.lr, model.m)")
        p.add_argument("--seed", type=int, help="global seed (falls back to $QVQA_SEED, then 0)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; VALUE is parsed as JSON when possible")
        p.add_argument("--out", required=out_required, help="run directory for all outputs")

    g = sub.add_parser("gen-data", help="generate the synthetic scene dataset")
    common(g)
    g.add_argument("--count", type=_positive_int, help="number of scenes")

    p = sub.add_parser("pretrain", help="pre-train on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--preset", choices=sorted(PRESET_WEIGHTS), help="LM granularity weighting")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=float)

    e = sub.add_parser("eval", help="generate reports and score a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True, help="checkpoint directory")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", choices=["train", "val", "test", "all"])

    v = sub.add_parser("verify", help="run the built-in invariant suites")
    v.add_argument("--only", action="append", choices=["tensor", "losses", "buffers", "metrics"],
                   help="run only this suite (repeatable)")
    v.add_argument("--configs", type=_positive_int, default=20, help="random configurations per gradient check")
    return parser


def _overrides(args):
    out = {}
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigError([f"--set expects KEY=VALUE, got {item!r}"])
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    seed = args.seed if getattr(args, "seed", None) is not None else os.environ.get("QVQA_SEED")
    if seed is not None:
        try:
            out["seed"] = int(seed)
        except ValueError:
            raise ConfigError([f"QVQA_SEED must be an integer, got {seed!r}"]) from None
    for flag, key in (("count", "data.count"), ("preset", "train.preset"), ("epochs", "train.epochs"),
                      ("lr", "train.lr"), ("split", "eval.split")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        file_values = {}
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.exists():
                raise ConfigError([f"config file not found: {path}"])
            try:
                file_values = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
        cfg = resolve_config(file_values, _overrides(args))
    except ConfigError as exc:
        print("configuration errors:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, cfg)
    except (FileNotFoundError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
