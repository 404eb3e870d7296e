"""``treecalc`` command line: gen-data, train, eval, complete, sweep.

Configuration is a flat ``key = value`` text file.  Positional ``key=value``
arguments and the ``--seed`` flag override it.  Every key is checked against
``SCHEMA``; unknown keys are a usage error (exit code 2).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import evaluation as ev
from .generate import (MutationConfig, completion_candidates, format_stats, generate_dataset,
                       load_axioms, read_dataset, write_dataset, split_dataset)
from .model import ModelConfig, load_checkpoint, predict, read_checkpoint, save_checkpoint
from .training import TrainConfig, fit, named_rng, record_dict

log = logging.getLogger("treecalc")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad configuration or missing input; maps to exit code 2."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    # data
    "axioms": (str, ""),
    "data": (str, "data"),
    "n": (int, 2000),
    "max_depth": (int, 13),
    "train_max_depth": (int, 7),
    "test_min_depth": (int, 8),
    "test_max_depth": (int, 13),
    "valid_frac": (float, 0.2),
    # model
    "cell": (str, "mtree_lstm"),
    "stack": (_bool, False),
    "hidden": (int, 25),
    "stack_size": (int, 10),
    "dropout": (float, 0.0),
    "first_order": (_bool, False),
    # training
    "lr": (float, 0.1),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "weight_decay": (float, 2e-5),
    "batch": (int, 50),
    "max_epochs": (int, 500),
    "patience": (int, 10),
    # evaluation and completion
    "checkpoint": (str, ""),
    "splits": (str, "train,valid,test"),
    "ks": (_int_list, [1, 5]),
    "cap": (int, 50),
    "blank_height": (int, 1),
    "candidate_depth": (int, 2),
    "complete_split": (str, "valid"),
    "max_instances": (int, 0),
    # sweep
    "grid_hidden": (_int_list, [8, 15, 25, 30, 40, 45, 50, 55, 60, 80, 100]),
    "grid_dropout": (_float_list, [0.1, 0.2, 0.3]),
    "grid_seeds": (_int_list, [0]),
}

MODEL_KEYS = ("cell", "stack", "hidden", "stack_size", "dropout", "first_order")
TRAIN_KEYS = ("lr", "beta1", "beta2", "eps", "weight_decay", "batch", "max_epochs", "patience")


@dataclass
class RunConfig:
    values: dict[str, Any]
    explicit: set[str] = field(default_factory=set)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: self.values[k] for k in MODEL_KEYS})

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.values["seed"], **{k: self.values[k] for k in TRAIN_KEYS})

    def with_values(self, **kw) -> "RunConfig":
        return RunConfig({**self.values, **kw}, self.explicit | set(kw))

    def dump(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}


def parse_pairs(lines: list[str], source: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for num, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{num}: expected key=value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def build_config(config_path: str | None, overrides: list[str], seed: int | None) -> RunConfig:
    raw: dict[str, str] = {}
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from None
        raw.update(parse_pairs(text.splitlines(), config_path))
    raw.update(parse_pairs(overrides, "command line"))
    if seed is not None:
        raw["seed"] = str(seed)
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for key, text in raw.items():
        conv = SCHEMA[key][0]
        try:
            values[key] = conv(text)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    return RunConfig(values, set(raw))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_split(cfg: RunConfig, split: str):
    path = Path(cfg["data"]) / f"{split}.tsv"
    if not path.is_file():
        raise UsageError(f"dataset not found: {path}")
    try:
        return read_dataset(path, split)
    except ValueError as exc:
        raise UsageError(f"bad dataset {path}: {exc}") from None


# -- commands --------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    try:
        axioms = load_axioms(cfg["axioms"] or None)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read axioms: {exc}") from None
    mcfg = MutationConfig(max_depth=cfg["max_depth"])
    res = generate_dataset(axioms, cfg["n"], int(named_rng(cfg["seed"], "data").integers(2**31)), mcfg)
    splits = split_dataset(res.items, int(named_rng(cfg["seed"], "split").integers(2**31)),
                           cfg["train_max_depth"], cfg["test_min_depth"], cfg["test_max_depth"],
                           cfg["valid_frac"])
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        write_dataset(out / f"{name}.tsv", ds.items)
    stats = format_stats(res.items)
    _write(out / "stats.txt", stats + "\n")
    print(stats)
    if not res.complete:
        print(f"warning: generated {len(res.items)} of {cfg['n']} equations", file=sys.stderr)
    return EXIT_OK


def _train_one(cfg: RunConfig, out: Path | None) -> dict:
    train, valid = _load_split(cfg, "train"), _load_split(cfg, "valid")
    try:
        mc, tc = cfg.model_config(), cfg.train_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    lines = [json.dumps({"header": True, "seed": cfg["seed"], "config": cfg.dump()}, sort_keys=True)]

    def on_epoch(rec):
        lines.append(json.dumps(record_dict(rec), sort_keys=True))

    res = fit(train.items, valid.items, mc, tc, on_epoch)
    res.restore_best()
    summary = {"valid_acc": res.best_valid_acc, "epochs_to_best": res.epochs_to_best,
               "epochs": len(res.log)}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.txt", res.model,
                        {"seed": cfg["seed"], **summary})
        _write(out / "train_log.jsonl", "\n".join(lines) + "\n")
        # wall-clock times vary run to run, so they stay out of the reproducible log
        _write(out / "timing.jsonl", "".join(json.dumps({"epoch": r.epoch, "seconds": s}) + "\n"
                                             for r, s in zip(res.log, res.seconds)))
    return summary


def cmd_train(cfg: RunConfig, out: Path) -> int:
    summary = _train_one(cfg, out)
    print(f"best valid accuracy {summary['valid_acc']:.4f} at epoch {summary['epochs_to_best']}")
    return EXIT_OK


def _checked_model(cfg: RunConfig):
    path = cfg["checkpoint"]
    if not path:
        raise UsageError("checkpoint=PATH is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    stored, _, _ = read_checkpoint(path)
    for key in MODEL_KEYS:
        if key in cfg.explicit and getattr(stored, key) != cfg[key]:
            raise UsageError(f"checkpoint/config mismatch on {key}: "
                             f"checkpoint has {getattr(stored, key)!r}, config has {cfg[key]!r}")
    model, _ = load_checkpoint(path)
    return model


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    model = _checked_model(cfg)
    splits = [s.strip() for s in cfg["splits"].split(",") if s.strip()]
    datasets = {s: _load_split(cfg, s) for s in splits}
    train_items = datasets["train"].items if "train" in datasets else _load_split(cfg, "train").items
    rows = []
    for split, ds in datasets.items():
        if not ds.items:
            continue
        preds = [predict(model.predict_proba(it.expr)) for it in ds.items]
        dm = ev.verification_metrics(preds, [it.label for it in ds.items], [it.depth for it in ds.items])
        rows.extend(dm.records(split))
        base = ev.majority_baseline(train_items, ds.items)
        rows.append({"split": f"{split}:majority", "depth": "all", **ev._metric_dict(base.overall)})
    _write(out / "metrics.jsonl", ev.to_jsonl(rows))
    _write(out / "metrics.csv", ev.to_csv(rows))
    for r in rows:
        if r["depth"] == "all":
            print(f"{r['split']:<16} acc {r['acc']:.4f}  n {r['n']}")
    return EXIT_OK


def cmd_complete(cfg: RunConfig, out: Path) -> int:
    model = _checked_model(cfg)
    ds = _load_split(cfg, cfg["complete_split"])
    if any(k < 1 for k in cfg["ks"]) or not cfg["ks"]:
        raise UsageError("ks must be a nonempty list of positive integers")
    rng = named_rng(cfg["seed"], "blanks")
    records = []
    rows_inst = []
    limit = cfg["max_instances"] or None
    for idx, item in enumerate(ds.items):
        if not item.correct:
            continue
        inst = completion_candidates(item, int(rng.integers(2**31)), max_depth=cfg["candidate_depth"],
                                     cap=cfg["cap"], blank_height=cfg["blank_height"])
        if inst is None:
            continue
        scores = ev.score_instance(model, inst)
        rec = ev.completion_record(idx, inst, scores)
        records.append(rec)
        rows_inst.append({"id": idx, "blank": inst.blanked(), "gold": sorted(rec.gold),
                          "ranking": rec.ranking[:max(cfg["ks"])]})
        if limit and len(records) >= limit:
            break
    rows = ev.topk_report(records, cfg["ks"])
    _write(out / "topk.jsonl", ev.to_jsonl(rows))
    _write(out / "topk.csv", ev.to_csv(rows))
    _write(out / "completions.jsonl", ev.to_jsonl(rows_inst))
    for r in rows:
        if r["depth"] == "all":
            print(f"Top-{r['K']}: {r['topk']:.4f} over {r['n']} instances")
    return EXIT_OK


def _sweep_point(args: tuple[dict, set, int, float, int]) -> dict:
    values, explicit, hidden, dropout, seed = args
    cfg = RunConfig(values, explicit).with_values(hidden=hidden, dropout=dropout, seed=seed)
    summary = _train_one(cfg, None)
    return {"hidden": hidden, "dropout": dropout, "seed": seed, **summary}


def cmd_sweep(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    grid = list(itertools.product(cfg["grid_hidden"], cfg["grid_dropout"], cfg["grid_seeds"]))
    if not grid:
        raise UsageError("empty sweep grid")
    # fail early, before any worker starts
    _load_split(cfg, "train")
    _load_split(cfg, "valid")
    tasks = [(cfg.values, cfg.explicit, h, d, s) for h, d, s in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(t) for t in tasks]
    rows.sort(key=lambda r: (-r["valid_acc"], r["hidden"], r["dropout"], r["seed"]))
    _write(out / "leaderboard.jsonl", ev.to_jsonl(rows))
    _write(out / "leaderboard.csv", ev.to_csv(rows))
    for r in rows:
        print(f"hidden {r['hidden']:>3}  dropout {r['dropout']:.2f}  seed {r['seed']}  "
              f"valid {r['valid_acc']:.4f}  epochs {r['epochs_to_best']}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "complete": cmd_complete, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treecalc", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel fits for sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.config, args.overrides, args.seed)
        out = Path(args.out)
        if args.command == "sweep":
            if args.jobs < 1:
                raise UsageError("--jobs must be >= 1")
            return cmd_sweep(cfg, out, args.jobs)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"treecalc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort report
        log.debug("internal error", exc_info=True)
        print(f"treecalc: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
