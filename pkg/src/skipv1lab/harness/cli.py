"""Command-line driver: ``skv1 <subcommand> [options]``.

Every subcommand prints CSV to stdout, prefixed by ``#`` lines echoing the
configuration, and writes its outputs under the run directory (``--out-dir``,
else ``$SKV1_RUN_DIR``, else ``./runs``).
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from ..checkpoint_io import load, parse_kv_text, read_kv_file, save
from ..config import ModelConfig
from ..convert import ConversionStrategy, compare_csv, convert, initial_loss_compare
from ..errors import SkipV1Error
from ..kvcache import MLA_MODES, PRESETS, CacheSpec, cache_report, preset_specs, report_csv
from ..mesa import TaskSpec, TheoremReport, verify_theorem
from .analysis import matrix_csv, probe, probe_csv, similarity
from .data import ingest
from .train import TrainConfig, evaluate, run_dir, train

MESA_PRESETS = {
    "theorem-small": dict(d=4, a=2, n=16, sigma=0.1, w0_scale=3.0, mc=50_000, seed=7),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    return parse_kv_text("\n".join(pairs or []))


def _echo(args: argparse.Namespace) -> list[str]:
    keys = sorted(k for k in vars(args) if k not in ("func",))
    return [f"{k}={getattr(args, k)}" for k in keys if getattr(args, k) is not None]


def _out_dir(args) -> str:
    return args.out_dir if args.out_dir else run_dir()


def _write(out_dir: str, name: str, text: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> None:
    mapping = read_kv_file(args.config) if args.config else {}
    for flag in ("steps", "batch_size", "seq_len", "lr", "seed", "corpus", "variant"):
        value = getattr(args, flag)
        if value is not None:
            mapping[flag] = str(value)
    mapping.update(_overrides(args.set))
    cfg = TrainConfig.from_mapping(mapping)
    out = _out_dir(args)
    ck, log = train(cfg, out_dir=out)
    text = log.to_csv()
    sys.stdout.write(text)
    print(f"# checkpoint={os.path.join(out, 'checkpoint.skv1')}", file=sys.stderr)


def cmd_eval(args) -> None:
    ck = load(args.ck)
    corpus = ingest(args.corpus, args.val_fraction)
    loss, ppl = evaluate(ck, corpus, args.seq_len, args.windows)
    text = "".join(f"# {line}\n" for line in _echo(args))
    text += "loss,perplexity\n" + f"{loss:.6f},{ppl:.6f}\n"
    _write(_out_dir(args), "eval.csv", text)
    sys.stdout.write(text)


def cmd_convert(args) -> None:
    ck = load(args.inp)
    out = convert(ck, args.strategy, args.ratio)
    save(out, args.out)
    if args.compare:
        corpus = ingest(args.corpus)
        windows = corpus.fixed_windows("val", args.seq_len + 1, args.windows)
        rows = initial_loss_compare(ck, windows, ratio=args.ratio)
        text = compare_csv(rows, _echo(args))
        _write(_out_dir(args), "convert.csv", text)
        sys.stdout.write(text)


def cmd_mesa(args) -> None:
    params = dict(MESA_PRESETS[args.preset]) if args.preset else dict(MESA_PRESETS["theorem-small"])
    for key in ("d", "a", "n", "sigma", "w0_scale", "mc", "seed"):
        value = getattr(args, key)
        if value is not None:
            params[key] = value
    spec = TaskSpec.isotropic(**params)
    report = verify_theorem(spec, restarts=args.restarts, steps=args.steps)
    row = report.row()
    echo = [f"{k}={v}" for k, v in params.items()] + [f"restarts={args.restarts}", f"steps={args.steps}"]
    text = "".join(f"# {line}\n" for line in echo)
    text += ",".join(TheoremReport.FIELDS) + "\n"
    text += ",".join(_fmt(row[k]) for k in TheoremReport.FIELDS) + "\n"
    _write(_out_dir(args), "mesa.csv", text)
    sys.stdout.write(text)
    print(f"L1_min={report.L1_min:.4f} (se {report.L1_stderr:.4f})  "
          f"L2_min={report.L2_min:.4f} (se {report.L2_stderr:.4f})  "
          f"gap={report.gap:.4f} at {report.gap_z:.1f} stderr", file=sys.stderr)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def cmd_cache_audit(args) -> None:
    echo = _echo(args)
    if args.preset:
        specs = preset_specs(args.preset)
    else:
        mapping = read_kv_file(args.config) if args.config else {}
        mapping.update(_overrides(args.set))
        if args.variant:
            mapping["variant"] = args.variant
        config = ModelConfig.from_mapping(mapping)
        specs = [CacheSpec.from_config(config, args.elem_bytes, args.mla_mode)]
        echo += [f"model.{line}" for line in config.to_lines()]
    seq_lens = [int(s) for s in args.seq_lens.split(",") if s.strip()]
    if not seq_lens:
        raise UsageError("--seq-lens needs at least one length")
    text = report_csv(cache_report(specs, seq_lens), echo)
    _write(_out_dir(args), "cache_audit.csv", text)
    sys.stdout.write(text)


def cmd_probe(args) -> None:
    ck = load(args.ck)
    corpus = ingest(args.corpus)
    layers = [int(x) for x in args.layers.split(",")] if args.layers else None
    rows = probe(ck, corpus, layers, seq_len=args.seq_len, steps=args.steps, seed=args.seed)
    text = probe_csv(rows, _echo(args))
    _write(_out_dir(args), "probe.csv", text)
    sys.stdout.write(text)


def cmd_similarity(args) -> None:
    ck = load(args.ck)
    corpus = ingest(args.corpus)
    heads, tokens = similarity(ck, corpus, args.layer, args.seq_len, args.windows)
    echo = _echo(args)
    head_text = matrix_csv(heads, "head", echo)
    out = _out_dir(args)
    _write(out, f"head_head_layer{args.layer}.csv", head_text)
    _write(out, f"token_token_layer{args.layer}.csv", matrix_csv(tokens, "token", echo))
    sys.stdout.write(head_text)


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skv1", description="SkipV1 attention experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, corpus=True):
        p.add_argument("--out-dir", help="output directory (default $SKV1_RUN_DIR or ./runs)")
        if corpus:
            p.add_argument("--corpus", help="UTF-8 text file (default: bundled corpus)")

    p = sub.add_parser("train", help="train a byte-level model")
    common(p)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--variant")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="validation loss and perplexity of a checkpoint")
    common(p)
    p.add_argument("--ck", required=True)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--windows", type=int, default=64)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="convert an MHA checkpoint to SkipV1")
    common(p)
    p.add_argument("--strategy", required=True, choices=[s.value for s in ConversionStrategy])
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--compare", action="store_true", help="report initial loss of every strategy")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--windows", type=int, default=64)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("mesa", help="verify the skip-connection mesa-optimizer gap")
    common(p, corpus=False)
    p.add_argument("--preset", choices=sorted(MESA_PRESETS))
    p.add_argument("--d", type=int)
    p.add_argument("--a", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--w0-scale", type=float)
    p.add_argument("--mc", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--steps", type=int, default=5000)
    p.set_defaults(func=cmd_mesa)

    p = sub.add_parser("cache-audit", help="KV-cache bytes per token and per sequence")
    common(p, corpus=False)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--config", help="key=value model config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a model config key")
    p.add_argument("--variant")
    p.add_argument("--elem-bytes", type=int)
    p.add_argument("--mla-mode", choices=MLA_MODES, default="uniform")
    p.add_argument("--seq-lens", default="1,1024")
    p.set_defaults(func=cmd_cache_audit)

    p = sub.add_parser("probe", help="per-layer linear probe losses")
    common(p)
    p.add_argument("--ck", required=True)
    p.add_argument("--layers", help="comma-separated layers (default: all)")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("similarity", help="head-head and token-token cosine similarity")
    common(p)
    p.add_argument("--ck", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--windows", type=int, default=16)
    p.set_defaults(func=cmd_similarity)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as exc:
        print(f"skv1 {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SkipV1Error, OSError, ValueError, IndexError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"skv1 {args.command}: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
