"""Command-line entry point: ``generate``, ``train``, ``eval``, ``experiment``.

Exit codes: 0 success, 2 config error, 3 data/schema error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import (generator_spec, load_experiment, model_config, model_options, model_section, parse_config,
                     read_config, render, train_config, train_section, weights_section)
from .data import load_dataset, save_dataset, generate
from .errors import AttrDAError, ConfigError
from .experiment import run_experiment, table, write_outputs
from .metrics import evaluate
from .model import checkpoint_meta, load_checkpoint, save_checkpoint
from .schema import load_schema, save_schema
from .train import make_split, train

log = logging.getLogger("attrda")


def _config(path):
    return read_config(path) if path else parse_config("")


def _echo(text: str) -> None:
    print("# effective configuration")
    print(text.rstrip("\n"))
    print("# end configuration", flush=True)


def _schema_for(dataset: Path):
    """Datasets live next to the ``schema.txt`` that ``generate`` writes."""
    path = dataset.parent / "schema.txt"
    if not path.is_file():
        raise ConfigError(f"no schema.txt next to {dataset}")
    return load_schema(path)


def cmd_generate(args) -> int:
    cp = _config(args.config)
    spec = generator_spec(cp, Path(args.config).parent if args.config else Path("."))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    _echo(render({"generator": spec.section()}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_schema(spec.schema, out / "schema.txt")
    for split in ("train", "test"):
        ds = generate(spec.config(split=split), split)
        save_dataset(ds, out / f"{split}.txt")
        print(f"wrote {out / f'{split}.txt'} ({len(ds)} examples)")
    (out / "generator.ini").write_text(render({"generator": spec.section()}), encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    cp = _config(args.config)
    tc = train_config(cp, mode=args.mode, seed=args.seed)
    opts = model_options(cp)
    dataset = Path(args.dataset)
    schema = _schema_for(dataset)
    _echo(render({"data": {"dataset": dataset}, "model": model_section(opts), "train": train_section(tc),
                  "weights": weights_section(tc.weights), "effective weights": weights_section(tc.effective_weights)}))
    ds = load_dataset(dataset, schema)
    mc = model_config(opts, schema, ds.features.shape[1], tc.seed)
    split = make_split(ds, tc.setting)
    out = Path(args.out)
    res = train(ds, mc, tc, split=split, out_dir=out)
    meta = {"mode": tc.mode, "setting": tc.setting, "steps": tc.steps,
            "labeled_classes": ",".join(map(str, split.labeled_classes)) or "-",
            "heldout_classes": ",".join(map(str, split.heldout_classes)) or "-"}
    save_checkpoint(res.params, out / "checkpoint.txt", meta)
    last = res.log[-1]["total"] if res.log else float("nan")
    print(f"trained {tc.steps} steps, final loss {last:.6f}; wrote {out / 'checkpoint.txt'}")
    return 0


def cmd_eval(args) -> int:
    ckpt, dataset = Path(args.checkpoint), Path(args.dataset)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    schema = _schema_for(dataset)
    classes = None
    if args.held_out_only:
        held = checkpoint_meta(ckpt).get("heldout_classes", "-")
        if held == "-":
            raise ConfigError("--held-out-only needs a checkpoint trained with held-out classes")
        classes = [int(c) for c in held.split(",")]
    _echo(render({"eval": {"checkpoint": ckpt, "dataset": dataset, "held_out_only": args.held_out_only,
                           "classes": classes if classes is not None else "all"}}))
    params = load_checkpoint(ckpt)
    params.config.check_schema(schema)
    report = evaluate(params, load_dataset(dataset, schema, "test"), classes)
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text + "\n", encoding="utf-8")
        (out / "per_class.csv").write_text(report.to_csv(), encoding="utf-8")
    print(text)
    return 0


def cmd_experiment(args) -> int:
    if not args.config:
        raise ConfigError("experiment needs --config SPEC")
    spec = load_experiment(args.config)
    if args.seed is not None:
        spec = replace(spec, seeds=(args.seed,))
    if args.mode is not None:
        spec = replace(spec, modes=(args.mode,), gain=None)
    out = Path(args.out or spec.out or "experiment-out")
    _echo(spec.render())
    res = run_experiment(spec)
    write_outputs(res, out)
    print(table(res), end="")
    print(f"wrote outputs to {out}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "experiment": cmd_experiment}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrda", description="Attribute-consistent domain adaptation on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write schema.txt, train.txt and test.txt")
    g.add_argument("--config", help="config file with a [generator] section")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train one model; writes checkpoint.txt and metrics.jsonl")
    t.add_argument("dataset", help="dataset file (schema.txt must sit next to it)")
    t.add_argument("--config", help="config file with [model], [train], [weights] sections")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--mode")
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on target examples")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--held-out-only", action="store_true", help="score only the classes held out in training")
    e.add_argument("--out", help="directory for report.json and per_class.csv")

    x = sub.add_parser("experiment", help="run a mode x seed comparison")
    x.add_argument("--config", help="experiment spec file")
    x.add_argument("--out", help="output directory")
    x.add_argument("--mode", help="run only this mode")
    x.add_argument("--seed", type=int, help="run only this seed")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except AttrDAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
