"""``fedcrfd`` command line: gen-data, train, eval, study.

Exit codes: 0 success, 2 config error, 3 IO error, 4 missing input,
5 numeric failure. Failures also print a ``error_code=<n>`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import load_partition, save_partition
from .federation import METHODS, NumericError, result_from_checkpoint, train
from .metrics import evaluate, model_predictor
from .study import STUDIES, build_partition, run_study

EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4, 5


class MissingInput(FileNotFoundError):
    pass


def _fail(code: int, message: str, **fields) -> int:
    extra = "".join(f" {k}={v}" for k, v in fields.items())
    print(f"error_code={code}{extra} message={json.dumps(message)}", file=sys.stderr)
    return code


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "rounds", None) is not None:
        overrides.append(f"federation.rounds={args.rounds}")
    for i in (1, 2, 3):
        value = getattr(args, f"mu{i}", None)
        if value is not None:
            overrides.append(f"federation.mu{i}={float(value)!r}")
    rc = load_config(args.config, overrides)
    if args.seed is not None:
        field_name = "data" if args.command == "gen-data" else "run"
        section = getattr(rc, field_name)
        rc = dataclasses.replace(rc, **{field_name: dataclasses.replace(section, seed=args.seed)})
    return rc


def _load_dataset(path: str | Path):
    path = Path(path)
    if not (path / "partition.json").exists():
        raise MissingInput(f"no dataset at {path} (run gen-data first)")
    return load_partition(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    rc = _config(args)
    out = Path(args.out or rc.run.dataset)
    fed = build_partition(rc.data)
    out.mkdir(parents=True, exist_ok=True)
    save_partition(fed, out)
    (out / "config.toml").write_text(dump_config(rc))
    print(f"wrote {fed.num_clients} clients to {out}")
    for c in fed.clients:
        print(
            f"  client {c.index}: modality {c.modality}, mask {c.mask_spec} "
            f"(rate {c.mask.sampled_fraction:.3f}), {len(c.horizontal)} horizontal / {len(c.vertical)} vertical slices"
        )
    return 0


def cmd_train(args) -> int:
    rc = _config(args)
    method = args.method or rc.run.method
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    fed = _load_dataset(args.dataset or rc.run.dataset)
    if fed.num_clients != rc.data.num_clients:
        raise ConfigError(f"dataset has {fed.num_clients} clients, config expects {rc.data.num_clients}")
    cfg = rc.federation_for()
    out = Path(args.out or rc.run.out)
    result = train(method, cfg, fed, out_dir=out)
    print(f"{method}: {cfg.rounds} rounds, log at {out / 'log.jsonl'}, checkpoint at {out / 'checkpoints' / 'final'}")
    if result.log:
        last = [r for r in result.log if r["round"] == cfg.rounds]
        for r in last:
            print(f"  client {r['client']}: l_recon {r['l_recon']:.5f}")
    return 0


def cmd_eval(args) -> int:
    rc = _config(args)
    fed = _load_dataset(args.dataset or rc.run.dataset)
    if args.passthrough:
        by_client = {c.index: c for c in fed.clients}

        def predict(k, x):
            # ground truth in test order, for checking the metric pipeline
            return np.stack([s.y for s in by_client[k].test])[:, None]

        report = evaluate(predict, fed)
        csv_default = Path(args.dataset or rc.run.dataset) / "eval_passthrough.csv"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --passthrough)")
        ckpt = Path(args.checkpoint)
        if not (ckpt / "manifest.json").exists():
            raise MissingInput(f"no checkpoint at {ckpt}")
        result = result_from_checkpoint(ckpt)
        expected = rc.federation_for().arch
        if args.config is not None and nn.arch_to_dict(result.config.arch) != nn.arch_to_dict(expected):
            raise ConfigError("checkpoint architecture does not match the config")
        if len(result.models) != fed.num_clients:
            raise ConfigError(f"checkpoint has {len(result.models)} clients, dataset has {fed.num_clients}")
        report = evaluate(model_predictor(result), fed)
        csv_default = ckpt / "eval.csv"
    out = Path(args.out) if args.out else csv_default
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    for row in report.rows():
        print(f"{row['client']:>8}  PSNR {row['psnr_mean']:.3f} +- {row['psnr_std']:.3f} dB  SSIM {row['ssim_mean']:.4f} +- {row['ssim_std']:.4f}  (n={row['n']})")
    print(f"wrote {out}")
    return 0


def cmd_study(args) -> int:
    rc = _config(args)
    if args.study not in STUDIES:
        raise ConfigError(f"unknown study {args.study!r}; choose from {', '.join(STUDIES)}")
    parallel = args.parallel_trials or rc.run.parallel_trials
    out = Path(args.out or "results")
    rows = run_study(args.study, rc, out, parallel=parallel)
    for r in rows:
        p = f"{r['p_value']:.4f}" if isinstance(r["p_value"], float) else "-"
        print(f"{r['method']:>24}  PSNR {r['psnr_mean']:.3f} +- {r['psnr_std']:.3f}  SSIM {r['ssim_mean']:.4f}  p {p}")
    print(f"wrote {out / args.study / 'summary.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="data seed for gen-data, trial seed otherwise")
    common.add_argument("--out", help="output location")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")

    parser = argparse.ArgumentParser(prog="fedcrfd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic federated dataset")

    p = sub.add_parser("train", parents=[common], help="train one method")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--dataset", help="dataset directory (default run.dataset)")
    p.add_argument("--rounds", type=int)
    for i in (1, 2, 3):
        p.add_argument(f"--mu{i}", type=float)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--dataset", help="dataset directory (default run.dataset)")
    p.add_argument("--passthrough", action="store_true", help="score the ground truth itself")

    p = sub.add_parser("study", parents=[common], help="run a multi-seed study")
    p.add_argument("study", help=", ".join(STUDIES))
    p.add_argument("--parallel-trials", type=int, default=None)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "study": cmd_study}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except MissingInput as exc:
        return _fail(EXIT_MISSING, str(exc))
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, str(exc), round=exc.round_index, client=exc.client)
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))


if __name__ == "__main__":
    sys.exit(main())
