"""Command-line front end: ``avfusion {synth,train,eval,count-params,gradcheck,list}``.

Every setting can come from three places, later ones winning: the built-in
default for the command, a flat ``key = value`` config file (``--config``),
and command-line flags. Errors print one line ``avfusion:error:<kind>: ...``
on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from threadpoolctl import threadpool_limits

from . import checks
from .data import CorruptFileError, SynthConfig, load_dataset, synth_generate
from .metrics import evaluate
from .models import (ARCHITECTURES, ArchSpec, build_model, count_by_block, count_params,
                     list_architectures)
from .numcore import NumericalError
from .trainer import HISTORY_HEADER, TrainConfig, TrainingAborted, fit, load_checkpoint

PROG = "avfusion"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v):
    return None if v is None or str(v).strip().lower() in ("", "none") else int(v)


# key -> (parser, help). Flags are the key with dashes.
SETTINGS: dict[str, tuple[Callable, str]] = {
    "seed": (int, "seed for data generation, initialisation, shuffling and dropout"),
    # synth
    "out": (str, "output dataset path"),
    "records": (int, "number of records"),
    "classes": (int, "number of classes"),
    "visual_dim": (int, "visual feature width"),
    "audio_dim": (int, "audio feature width"),
    "audio_only": (int, "classes decided by audio alone"),
    "visual_only": (int, "classes decided by visual alone"),
    "cross_modal": (int, "classes needing both modalities (XOR)"),
    "noise": (float, "std of additive gaussian noise"),
    "distractors": (_opt_int, "pure-noise dims per vector (none = three quarters)"),
    # architecture
    "arch": (str, "architecture name (see `list`)"),
    "hidden": (int, "hidden width (0 = family default)"),
    "attn": (int, "attention width"),
    "tokens": (int, "tokens each feature vector is split into"),
    "fusion_depth": (int, "FC layers after late fusion"),
    "attention": (_bool, "keep attention layers (false = same-width FC ablation)"),
    "modalities": (str, "comma list of modalities used by attend_fusion"),
    # training
    "train": (str, "training dataset"),
    "valid": (str, "validation dataset (metrics per epoch)"),
    "lr": (float, "AdamW learning rate"),
    "epochs": (int, "epochs"),
    "batch_size": (int, "mini-batch size"),
    "dropout": (float, "dropout rate"),
    "weight_decay": (float, "decoupled weight decay"),
    "checkpoint_dir": (str, "directory for final.avck (and last_good.avck on abort)"),
    "history": (str, "per-epoch CSV (default: <checkpoint_dir>/history.csv)"),
    "epoch_checkpoints": (_bool, "also save epochNNN.avck every epoch"),
    # metrics
    "k": (int, "top-k per video for GAP"),
    "threshold": (float, "decision threshold for F1"),
    # eval
    "checkpoint": (str, "checkpoint file"),
    "data": (str, "dataset to evaluate"),
    "csv": (str, "also write the report as CSV here"),
    # count-params / gradcheck
    "all": (_bool, "every architecture"),
    "seeds": (int, "independent seeds per check"),
    "eps": (float, "finite-difference step"),
    "tol": (float, "end-to-end relative error tolerance"),
    "layer_tol": (float, "per-layer relative error tolerance"),
}

_TOY = dict(visual_dim=6, audio_dim=4, hidden=5, attn=4, classes=3)

COMMANDS: dict[str, dict[str, Any]] = {
    "synth": dict(out=None, records=20000, classes=32, visual_dim=64, audio_dim=32, audio_only=8,
                  visual_only=8, cross_modal=16, noise=0.3, distractors=None),
    "train": dict(train=None, valid=None, arch="attend_fusion", hidden=0, attn=1024, tokens=2,
                  fusion_depth=1, attention=True, modalities="audio,visual", lr=1e-4, epochs=20,
                  batch_size=256, dropout=0.4, weight_decay=0.01, checkpoint_dir="checkpoints",
                  history=None, epoch_checkpoints=False, k=20, threshold=0.5),
    "eval": dict(checkpoint=None, data=None, k=20, threshold=0.5, csv=None),
    "count-params": dict(arch=None, all=False, visual_dim=1024, audio_dim=128, hidden=0, attn=1024,
                         classes=4716, tokens=2, fusion_depth=1, attention=True, modalities="audio,visual"),
    "gradcheck": dict(arch=None, seeds=5, eps=1e-5, tol=1e-4, layer_tol=1e-5, **_TOY),
    "list": dict(),
}

HELP = {
    "synth": "write a synthetic cross-modal dataset",
    "train": "train a model and write a checkpoint plus history CSV",
    "eval": "score a checkpoint on a dataset",
    "count-params": "parameter counts per block and in total",
    "gradcheck": "finite-difference checks of every layer and architecture",
    "list": "list the architecture catalog",
}


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise CliError("config", f"config file not found: {path}", 2)
    out = {}
    for n, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise CliError("config", f"{path}:{n}: expected 'key = value'", 2)
        if key not in SETTINGS:
            raise CliError("config", f"{path}:{n}: unknown key {key!r}", 2)
        out[key] = value.strip()
    return out


def resolve(command: str, file_values: dict[str, str], flags: dict[str, Any]) -> dict[str, Any]:
    """defaults < config file < flags; config keys the command does not use are ignored."""
    values = {"seed": 0, **COMMANDS[command]}
    for key, raw in file_values.items():
        if key in values:
            try:
                values[key] = SETTINGS[key][0](raw)
            except ValueError as e:
                raise CliError("config", f"bad value for {key}: {e}", 2) from e
    for key, v in flags.items():
        if v is not None and key in values:
            values[key] = v
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="flat key = value file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=SETTINGS["seed"][1])
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only print results")

    parser = _Parser(prog=PROG, description="Audio-visual fusion models on video-level features.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for cmd, defaults in COMMANDS.items():
        sp = sub.add_parser(cmd, help=HELP[cmd], parents=[common])
        for key, default in defaults.items():
            conv, text = SETTINGS[key]
            flag = "--" + key.replace("_", "-")
            if conv is _bool:
                sp.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=text)
                if default is True:
                    sp.add_argument("--no-" + key.replace("_", "-"), dest=key, action="store_const",
                                    const=False, help=f"disable: {text}")
            else:
                sp.add_argument(flag, dest=key, type=conv, default=None, help=f"{text} (default: {default})")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _say(v: dict, *lines: str) -> None:
    if not v["quiet"]:
        for line in lines:
            print(line)


def _need(v: dict, *keys: str) -> None:
    for k in keys:
        if v.get(k) in (None, ""):
            raise CliError("usage", f"--{k.replace('_', '-')} is required", 2)


def _spec(v: dict, visual_dim: int, audio_dim: int, num_classes: int) -> ArchSpec:
    if v["arch"] not in ARCHITECTURES:
        raise CliError("arch", f"unknown architecture {v['arch']!r}; run `{PROG} list`", 2)
    return ArchSpec(v["arch"], visual_dim=visual_dim, audio_dim=audio_dim, hidden_dim=v["hidden"],
                    attn_dim=v["attn"], num_classes=num_classes, num_tokens=v["tokens"],
                    fusion_depth=v["fusion_depth"], attention=v["attention"], modalities=v["modalities"])


def cmd_synth(v: dict) -> int:
    _need(v, "out")
    cfg = SynthConfig(num_classes=v["classes"], num_records=v["records"], audio_dim=v["audio_dim"],
                      visual_dim=v["visual_dim"], audio_only=v["audio_only"], visual_only=v["visual_only"],
                      cross_modal=v["cross_modal"], noise_std=v["noise"], distractor_dims=v["distractors"],
                      seed=v["seed"])
    cfg.validate()
    h = synth_generate(cfg, v["out"])
    _say(v, f"wrote {v['out']}: records={h.num_records} classes={h.num_classes} "
            f"visual_dim={h.visual_dim} audio_dim={h.audio_dim} seed={cfg.seed}")
    return 0


def cmd_train(v: dict) -> int:
    _need(v, "train")
    train_set = load_dataset(v["train"])
    valid_set = load_dataset(v["valid"]) if v["valid"] else None
    h = train_set.header
    spec = _spec(v, h.visual_dim, h.audio_dim, h.num_classes)
    cfg = TrainConfig(learning_rate=v["lr"], epochs=v["epochs"], batch_size=v["batch_size"],
                      dropout_rate=v["dropout"], weight_decay=v["weight_decay"], seed=v["seed"])
    model = build_model(spec, v["seed"])
    ckdir = Path(v["checkpoint_dir"])
    ckdir.mkdir(parents=True, exist_ok=True)
    hist_path = Path(v["history"]) if v["history"] else ckdir / "history.csv"
    _say(v, f"training {spec.label} ({count_params(model)} params) on {len(train_set)} records")

    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        fh.flush()

        def on_epoch(rec):
            w.writerow(rec.csv_row())
            fh.flush()
            gap = f" gap={rec.report.gap:.4f} f1={rec.report.f1:.4f}" if rec.report else ""
            _say(v, f"epoch {rec.epoch} loss={rec.loss:.6f}{gap} ({rec.seconds:.1f}s)")

        try:
            fit(model, train_set, valid_set, cfg, k=v["k"], threshold=v["threshold"], checkpoint_dir=ckdir,
                per_epoch_checkpoints=v["epoch_checkpoints"], on_epoch=on_epoch)
        except TrainingAborted as e:
            raise CliError("numeric", f"{e}; last good weights in {ckdir / 'last_good.avck'}") from e
    _say(v, f"checkpoint {ckdir / 'final.avck'}", f"history {hist_path}")
    return 0


def cmd_eval(v: dict) -> int:
    _need(v, "checkpoint", "data")
    model = load_checkpoint(v["checkpoint"]).to_model()
    ds = load_dataset(v["data"])
    rep = evaluate(model, ds, v["k"], v["threshold"])
    print(rep.to_line())
    if v["csv"]:
        Path(v["csv"]).write_text(rep.to_csv())
    return 0


def cmd_count_params(v: dict) -> int:
    names = ARCHITECTURES if v["all"] else ([v["arch"]] if v["arch"] else [])
    if not names:
        raise CliError("usage", "pass --arch NAME or --all", 2)
    specs = [_spec({**v, "arch": n}, v["visual_dim"], v["audio_dim"], v["classes"]) for n in names]
    if len(specs) == 1:
        spec = specs[0]
        rows = count_by_block(spec)
        width = max(len(n) for n, _ in rows)
        for name, n in rows:
            print(f"{name:<{width}}  {n:>12d}")
        total = count_params(spec)
        print(f"{'total':<{width}}  {total:>12d}  ({total / 1e6:.2f}M)")
        return 0
    print(f"{'arch':<26}{'params':>14}{'M':>10}")
    for spec in specs:
        total = count_params(spec)
        print(f"{spec.name:<26}{total:>14d}{total / 1e6:>10.2f}")
    return 0


def cmd_gradcheck(v: dict) -> int:
    dims = dict(visual_dim=v["visual_dim"], audio_dim=v["audio_dim"], hidden_dim=v["hidden"],
                attn_dim=v["attn"], num_classes=v["classes"])
    archs = [v["arch"]] if v["arch"] else list(ARCHITECTURES)
    for a in archs:
        if a not in ARCHITECTURES:
            raise CliError("arch", f"unknown architecture {a!r}", 2)
        n = count_params(ArchSpec(a, **dims))
        if n >= 10_000:
            raise CliError("usage", f"{a} has {n} parameters at these dims; finite differences need < 10000", 2)
    rows = []
    for name in checks.LAYER_CASES:
        for s in range(v["seeds"]):
            rows.append((f"layer:{name}", s, checks.check_layer(name, s, v["eps"], v["layer_tol"])))
    for a in archs:
        for s in range(v["seeds"]):
            rows.append((f"arch:{a}", s, checks.check_architecture(a, s, v["eps"], v["tol"], **dims)))
    for label, s, r in rows:
        _say(v, f"{label:<36} seed={s}  {r}")
    failed = [(label, s, r) for label, s, r in rows if not r.passed]
    if failed:
        label, s, r = max(failed, key=lambda t: t[2].max_rel_error)
        raise CliError("gradcheck", f"{len(failed)}/{len(rows)} checks failed; worst {label} seed={s} "
                                    f"{r.worst_param}{list(r.worst_index)} analytic={r.analytic!r} "
                                    f"numeric={r.numeric!r} rel_err={r.max_rel_error:.3e}")
    print(f"gradcheck: {len(rows)}/{len(rows)} passed")
    return 0


def cmd_list(v: dict) -> int:
    for e in list_architectures():
        print(f"{e.name:<26}{e.family:<10}{e.spec.fusion:<7}{e.description}")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "gradcheck": cmd_gradcheck,
    "list": cmd_list,
}


def _threads() -> int:
    raw = os.environ.get("AVFUSION_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError("config", f"AVFUSION_THREADS must be an integer, got {raw!r}", 2) from None
    if n < 1:
        raise CliError("config", "AVFUSION_THREADS must be >= 1", 2)
    return n


def run(argv: Sequence[str] | None = None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    if command is None:
        raise CliError("usage", f"missing command; one of {', '.join(COMMANDS)}", 2)
    config = args.pop("config", None)
    quiet = args.pop("quiet", False)
    file_values = read_config(config) if config else {}
    values = resolve(command, file_values, args)
    values["quiet"] = quiet
    logging.basicConfig(level=logging.WARNING, format=f"{PROG}: %(message)s")
    with threadpool_limits(limits=_threads()):
        return HANDLERS[command](values)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except CliError as e:
        code, kind, msg = e.code, e.kind, str(e)
    except CorruptFileError as e:
        code, kind, msg = 1, "corrupt", str(e)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        code, kind, msg = 1, "io", f"{e.strerror}: {e.filename}"
    except NumericalError as e:
        code, kind, msg = 1, "numeric", str(e)
    except ValueError as e:
        code, kind, msg = 1, "value", str(e)
    print(f"{PROG}:error:{kind}: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
