"""``budgetlm`` command line.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed input),
2 numerical abort (non-finite loss or gradient during training).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .embedding_init import embedding_warmup, method_from_name, swap_embeddings, train_aux_embeddings
from .evaluation import param_change, word_normalized_nll
from .experiments import (
    DEFAULT_FILTER_TAGS,
    ExperimentConfig,
    IngestError,
    continue_run,
    ingest,
    run_adaptation,
    sub_seed,
    switch_precision_at,
    time_steps,
)
from .optim import AdamWConfig, NumericalAbort
from .packing import pack_documents
from .planner import GIB, Coefficients, HardwareSpec, ModelShape, best_config
from .tokenizer import TokenizerModel, TrainerConfig, train_bpe

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _tags(value: str | None):
    if value is None:
        return DEFAULT_FILTER_TAGS
    return frozenset(t for t in value.split(",") if t)


def _texts(paths, tags):
    docs, report = ingest(paths, tags)
    return [d.text for d in docs], report


def _emit(args, payload_json: str, payload_csv: str | None = None, stem: str = "report"):
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(payload_json)
        if payload_csv is not None:
            (out / f"{stem}.csv").write_text(payload_csv)
        print(out / f"{stem}.json")
    else:
        print(payload_json)


# ---------------------------------------------------------------- commands


def cmd_ingest_stats(args):
    _, report = ingest(args.input, _tags(args.tags))
    print(json.dumps(report.to_dict(), indent=2))


def cmd_tokenizer_train(args):
    texts, _ = _texts(args.input, _tags(args.tags))
    model = train_bpe(texts, TrainerConfig(args.vocab_size, args.coverage, True, args.seed))
    model.save(args.out)
    print(json.dumps({"vocab_size": len(model), "merges": len(model.merges), "path": args.out}))


def cmd_init_embeddings(args):
    params, _, _ = load_checkpoint(args.checkpoint)
    old = TokenizerModel.load(args.old_tokenizer)
    new = TokenizerModel.load(args.new_tokenizer)
    if params.cfg.vocab_size != len(old):
        raise UserError("checkpoint vocabulary does not match the old tokenizer")
    method = method_from_name(args.method)
    texts = _texts(args.input, _tags(args.tags))[0] if args.input else []
    aux = None
    if args.method == "focus":
        if not texts:
            raise UserError("the focus method needs --input text for its auxiliary embeddings")
        aux = train_aux_embeddings([[new.vocab[i] for i in new.encode(t)] for t in texts], seed=sub_seed(args.seed, "aux"))
    out = swap_embeddings(params, old.vocab, new.vocab, method, sub_seed(args.seed, "init-method"), aux)
    if args.warmup_steps > 0:
        if not texts:
            raise UserError("embedding warmup needs --input text")
        ids = [x for x in (new.encode(t) for t in texts) if x]
        blocks = pack_documents(ids, "bos_masked", out.cfg.context_length, bos_id=new.bos_id, eos_id=new.eos_id, pad_id=new.pad_id)
        embedding_warmup(out, blocks, args.warmup_steps, out.policy, AdamWConfig(), args.lr, 4, sub_seed(args.seed, "embedding-warmup"))
    reports = {k: {"method": args.method, "n_overlap": r.n_overlap, "fell_back": r.fell_back} for k, r in out.init_reports.items()}
    save_checkpoint(args.out, out, None, {"init_reports": reports, "warmup_steps": args.warmup_steps})
    print(json.dumps(reports))


def _experiment_config(args) -> ExperimentConfig:
    d = {}
    flag_map = {
        "train": "train_paths", "eval": "eval_paths", "output_dir": "output_dir", "precision": "precision",
        "steps": "steps", "batch_size": "batch_size", "seed": "seed", "init_method": "init_method",
        "tokenizer": "tokenizer_path", "base_checkpoint": "base_checkpoint", "base_tokenizer": "base_tokenizer",
        "vocab_size": "tokenizer_vocab_size", "rounding": "rounding", "warmup_steps": "embedding_warmup_steps",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    if args.config:
        d.update(json.loads(Path(args.config).read_text()))
    return ExperimentConfig.from_dict(d)


def cmd_train(args):
    print(run_adaptation(_experiment_config(args)))


def cmd_continue(args):
    print(continue_run(args.run_dir, args.steps))


def cmd_switch_precision(args):
    print(switch_precision_at(_experiment_config(args), args.fraction))


def cmd_eval(args):
    params, _, _ = load_checkpoint(args.checkpoint)
    tok = TokenizerModel.load(args.tokenizer)
    texts, _ = _texts(args.input, _tags(args.tags))
    report = word_normalized_nll(params, tok, texts)
    _emit(args, report.to_json(), report.to_csv(), "eval_report")


def cmd_analyze_weights(args):
    params, state, _ = load_checkpoint(args.checkpoint)
    current = state.master if state is not None and state.master else None
    report = param_change(params, current=current, bins=args.bins)
    _emit(args, report.to_json(), report.to_csv(), "weight_report")


def cmd_plan(args):
    opts = {}
    if args.config:
        opts = json.loads(Path(args.config).read_text())
    get = lambda key, default: opts.get(key, default)  # noqa: E731
    hw = HardwareSpec(get("gpus", args.gpus), get("memory_gib", args.memory_gib) * GIB, get("interconnect_penalty", 0.0))
    shape = ModelShape(get("params", args.params), get("n_layers", args.n_layers), get("d_model", args.d_model), get("context_length", args.context))
    coef = Coefficients(**get("coefficients", {}))
    precisions = get("precision", args.precision)
    precisions = ["pure", "mixed"] if precisions == "both" else [precisions]
    rows, csvs = [], []
    for prec in precisions:
        plan = best_config(prec, hw, shape, coef)
        rows.extend(json.loads(plan.to_json()))
        csvs.append(plan.to_csv())
        if not plan.ranked:
            print(f"{prec}: no feasible configuration (OOM)", file=sys.stderr)
    _emit(args, json.dumps(rows, indent=2), "".join(csvs), "plan")


def cmd_time_steps(args):
    cfg = _experiment_config(args)
    report = time_steps(cfg, args.n)
    print(json.dumps(report.to_dict(), indent=2))


# ---------------------------------------------------------------- parser


def _add_experiment_flags(p):
    p.add_argument("--config", help="JSON ExperimentConfig; its keys override flags")
    p.add_argument("--train", nargs="+", help="JSON-lines training corpus files")
    p.add_argument("--eval", nargs="+", help="JSON-lines held-out files")
    p.add_argument("--output-dir")
    p.add_argument("--precision", choices=["pure", "mixed", "wide-pure", "wide-mixed"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init-method", choices=["normal", "fitted_normal", "random_assign", "overlap", "focus"])
    p.add_argument("--tokenizer")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--base-checkpoint")
    p.add_argument("--base-tokenizer")
    p.add_argument("--warmup-steps", type=int, help="embedding-only warmup steps after a swap")
    p.add_argument("--rounding", choices=["nearest", "stochastic"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="budgetlm", description="Low-budget continued pretraining toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest-stats", help="count documents read and dropped by quality tag")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--tags", help="comma-separated filter tags (empty string keeps everything)")
    p.set_defaults(func=cmd_ingest_stats)

    p = sub.add_parser("tokenizer-train", help="train a byte-fallback BPE tokenizer")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=32768)
    p.add_argument("--coverage", type=float, default=0.9995)
    p.add_argument("--tags")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("init-embeddings", help="swap a checkpoint's tokenizer and re-initialize embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--old-tokenizer", required=True)
    p.add_argument("--new-tokenizer", required=True)
    p.add_argument("--method", default="focus", choices=["normal", "fitted_normal", "random_assign", "overlap", "focus"])
    p.add_argument("--input", nargs="+", help="target-language corpus (aux vectors and warmup)")
    p.add_argument("--tags")
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--lr", type=float, default=4e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_embeddings)

    p = sub.add_parser("train", help="run an adaptation experiment")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("continue", help="resume a run directory from its checkpoint")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_continue)

    p = sub.add_parser("switch-precision", help="pure bf16 run that branches to mixed precision at a fraction")
    _add_experiment_flags(p)
    p.add_argument("--fraction", type=float, required=True)
    p.set_defaults(func=cmd_switch_precision)

    p = sub.add_parser("eval", help="word- and token-normalized NLL of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--tags")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-weights", help="weight histograms and change since init, RMSNorm vs other")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_weights)

    p = sub.add_parser("plan", help="memory/throughput search over training configurations")
    p.add_argument("--config", help="JSON with any of the flag names as keys")
    p.add_argument("--precision", default="both", choices=["pure", "mixed", "both"])
    p.add_argument("--gpus", type=int, default=1)
    p.add_argument("--memory-gib", type=float, default=80.0)
    p.add_argument("--params", type=float, default=7e9)
    p.add_argument("--n-layers", type=int, default=32)
    p.add_argument("--d-model", type=int, default=4096)
    p.add_argument("--context", type=int, default=4096)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("time-steps", help="time n training steps, mean excludes the first")
    _add_experiment_flags(p)
    p.add_argument("-n", type=int, default=11)
    p.set_defaults(func=cmd_time_steps)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, IngestError, CheckpointError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
