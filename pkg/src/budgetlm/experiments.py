"""End-to-end experiment drivers: corpus ingestion, adaptation runs, precision switching, step timing."""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .embedding_init import embedding_warmup, method_from_name, swap_embeddings, train_aux_embeddings
from .evaluation import param_change, word_normalized_nll
from .model import ModelConfig, ParameterSet, init_model
from .numerics import NEAREST_EVEN, Stochastic, quantize
from .optim import AdamWConfig, NumericalAbort, OptimizerState, init_optimizer_state
from .packing import pack_documents
from .precision import MIXED_BF16, policy_from_name
from .schedules import ScheduleSpec, lr_at
from .tokenizer import TokenizerModel, TrainerConfig, train_bpe
from .training import iterate_batches, train_step

__all__ = [
    "DEFAULT_FILTER_TAGS",
    "EVAL_GRID",
    "CorpusDocument",
    "IngestError",
    "IngestReport",
    "iter_documents",
    "ingest",
    "ExperimentConfig",
    "sub_seed",
    "eval_steps",
    "run_adaptation",
    "continue_run",
    "switch_precision_at",
    "TimingReport",
    "time_steps",
]

log = logging.getLogger(__name__)

DEFAULT_FILTER_TAGS = frozenset({"adult", "noisy", "header", "footer", "tiny", "short_sentences"})
EVAL_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


# ---------------------------------------------------------------- ingestion


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusDocument:
    text: str
    annotations: frozenset = frozenset()


@dataclass
class IngestReport:
    read: int = 0
    retained: int = 0
    dropped_by_tag: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def iter_documents(paths, tags=DEFAULT_FILTER_TAGS, report: IngestReport | None = None):
    """Yield retained documents in file order; a document is dropped iff it carries an active tag.

    A dropped document counts once, under its alphabetically first matching tag.
    """
    tags = frozenset(tags)
    report = report if report is not None else IngestReport()
    for path in [paths] if isinstance(paths, (str, Path)) else paths:
        path = Path(path)
        if not path.exists():
            raise IngestError(f"{path}: no such file")
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    text = rec["text"]
                    warnings = rec.get("quality_warnings") or []
                    if not isinstance(text, str) or not isinstance(warnings, list):
                        raise TypeError("text must be a string and quality_warnings a list")
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise IngestError(f"{path}:{lineno}: malformed record ({exc})") from None
                doc = CorpusDocument(text, frozenset(map(str, warnings)))
                report.read += 1
                hit = sorted(doc.annotations & tags)
                if hit:
                    report.dropped_by_tag[hit[0]] = report.dropped_by_tag.get(hit[0], 0) + 1
                    continue
                report.retained += 1
                yield doc


def ingest(paths, tags=DEFAULT_FILTER_TAGS) -> tuple[list[CorpusDocument], IngestReport]:
    report = IngestReport()
    docs = list(iter_documents(paths, tags, report))
    return docs, report


# ---------------------------------------------------------------- configuration


def sub_seed(seed: int, stream: str) -> int:
    """Independent, reproducible seed for a named random stream."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stream.encode())]).generate_state(1)[0])


def _default_schedule() -> dict:
    return {"kind": "cosine_floor", "warmup_frac": 76 / 7680, "lr_peak": 4e-5, "cosine_end_lr": 2e-6}


@dataclass
class ExperimentConfig:
    """Everything a run needs; ``to_json``/``from_json`` round-trip exactly."""

    train_paths: list[str] = field(default_factory=list)
    eval_paths: list[str] = field(default_factory=list)
    output_dir: str = "runs/default"
    filter_tags: list[str] = field(default_factory=lambda: sorted(DEFAULT_FILTER_TAGS))
    model: dict = field(default_factory=lambda: {"d_model": 64, "n_layers": 2, "d_ff": 128, "context_length": 64})
    precision: str = "pure"
    schedule: dict = field(default_factory=_default_schedule)
    steps: int = 200
    batch_size: int = 4
    weight_decay: float = 0.05
    betas: list[float] = field(default_factory=lambda: [0.9, 0.95])
    adam_eps: float = 1e-8
    rounding: str = "nearest"
    tokenizer_path: str | None = None
    tokenizer_vocab_size: int = 512
    character_coverage: float = 0.9995
    base_checkpoint: str | None = None
    base_tokenizer: str | None = None
    init_method: str = "focus"
    embedding_warmup_steps: int = 100
    packing: str = "bos_masked"
    eval_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.rounding not in ("nearest", "stochastic"):
            raise ValueError("rounding must be 'nearest' or 'stochastic'")
        policy_from_name(self.precision)
        method_from_name(self.init_method)
        self.schedule_spec()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def schedule_spec(self) -> ScheduleSpec:
        return ScheduleSpec(total_steps=self.steps, **self.schedule)

    def adam(self) -> AdamWConfig:
        mode = NEAREST_EVEN if self.rounding == "nearest" else Stochastic(sub_seed(self.seed, "rounding"))
        return AdamWConfig(self.schedule.get("lr_peak", 4e-5), tuple(self.betas), self.weight_decay, self.adam_eps, mode)


def eval_steps(steps: int) -> list[int]:
    """Optimizer steps after which the held-out loss is logged."""
    return sorted({round(f * steps) for f in EVAL_GRID})


# ---------------------------------------------------------------- run pieces


class _EventLog:
    def __init__(self, path: Path):
        self.path = path
        self.fh = open(path, "a", encoding="utf-8")

    def write(self, **event):
        self.fh.write(json.dumps(event, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _load_corpus(cfg: ExperimentConfig):
    docs, report = ingest(cfg.train_paths, cfg.filter_tags)
    texts = [d.text for d in docs if d.text.split()]
    if cfg.eval_paths:
        eval_docs, _ = ingest(cfg.eval_paths, cfg.filter_tags)
        held = [d.text for d in eval_docs if d.text.split()]
    else:
        k = max(1, int(round(cfg.eval_fraction * len(texts))))
        texts, held = texts[:-k], texts[-k:]
    if not texts or not held:
        raise ValueError("corpus too small after filtering for a train/eval split")
    return texts, held, report


def _tokenizer(cfg: ExperimentConfig, texts) -> TokenizerModel:
    if cfg.tokenizer_path:
        return TokenizerModel.load(cfg.tokenizer_path)
    tcfg = TrainerConfig(cfg.tokenizer_vocab_size, cfg.character_coverage, True, cfg.seed)
    return train_bpe(texts, tcfg)


def _blocks(cfg: ExperimentConfig, tok: TokenizerModel, texts, context_length: int):
    ids = [tok.encode(t) for t in texts]
    ids = [x for x in ids if x]
    return pack_documents(ids, cfg.packing, context_length, bos_id=tok.bos_id, eos_id=tok.eos_id, pad_id=tok.pad_id)


def _build_model(cfg: ExperimentConfig, tok: TokenizerModel, texts):
    policy = policy_from_name(cfg.precision)
    if cfg.base_checkpoint is None:
        mcfg = ModelConfig(vocab_size=len(tok), **cfg.model)
        return init_model(mcfg, sub_seed(cfg.seed, "model-init"), policy), {}
    base, _, _ = load_checkpoint(cfg.base_checkpoint)
    base.policy = policy
    for p in base.values():
        p.values = quantize(p.values, policy.weights_fmt)
        p.init_snapshot = None
    if cfg.base_tokenizer is None:
        if base.cfg.vocab_size != len(tok):
            raise ValueError("base checkpoint vocabulary does not match the tokenizer; pass base_tokenizer")
        return base, {}
    old = TokenizerModel.load(cfg.base_tokenizer)
    if old.vocab == tok.vocab:
        return base, {}
    method = method_from_name(cfg.init_method)
    aux = None
    if cfg.init_method == "focus":
        seqs = [[tok.vocab[i] for i in tok.encode(t)] for t in texts]
        aux = train_aux_embeddings(seqs, seed=sub_seed(cfg.seed, "aux"))
    params = swap_embeddings(base, old.vocab, tok.vocab, method, sub_seed(cfg.seed, "init-method"), aux)
    info = {
        name: {"method": cfg.init_method, "n_overlap": r.n_overlap, "fell_back": r.fell_back}
        for name, r in params.init_reports.items()
    }
    return params, info


def _evaluate(params, tok, held, policy):
    return word_normalized_nll(params, tok, held, policy)


def _train_range(params, state, blocks, cfg, policy, adam, start, end, events, on_eval, batch_seed):
    """Optimizer steps ``start+1 .. end`` with the schedule of ``cfg``; batches replay the same stream."""
    spec = cfg.schedule_spec()
    grid = set(eval_steps(cfg.steps))
    batches = iterate_batches(blocks, cfg.batch_size, batch_seed)
    for _ in range(start):
        next(batches)
    for step in range(start + 1, end + 1):
        lr = lr_at(spec, step)
        batch = next(batches)
        try:
            rec = train_step(params, state, batch, adam, policy, lr)
        except NumericalAbort as exc:
            events.write(event="abort", step=step, lr=lr, error=str(exc), batch_lengths=[b.length for b in batch])
            raise
        events.write(event="step", step=step, lr=lr, loss=rec["loss"], grad_norm=rec["grad_norm"], tokens=rec["tokens"])
        if step in grid:
            on_eval(step)


def _write_reports(run_dir: Path, params, state, report):
    current = state.master if state is not None and state.master is not None else None
    weights = param_change(params, current=current)
    (run_dir / "weight_report.json").write_text(weights.to_json())
    (run_dir / "weight_report.csv").write_text(weights.to_csv())
    (run_dir / "eval_report.json").write_text(report.to_json())
    (run_dir / "eval_report.csv").write_text(report.to_csv())


def _prepare(cfg: ExperimentConfig):
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    texts, held, report = _load_corpus(cfg)
    (run_dir / "ingest_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    tok = _tokenizer(cfg, texts)
    tok.save(run_dir / "tokenizer.json")
    return run_dir, texts, held, tok


def run_adaptation(cfg: ExperimentConfig) -> Path:
    """Train (or adapt a base model) under ``cfg`` and write checkpoints, logs and reports to ``cfg.output_dir``."""
    run_dir, texts, held, tok = _prepare(cfg)
    policy = policy_from_name(cfg.precision)
    adam = cfg.adam()
    params, init_info = _build_model(cfg, tok, texts)
    blocks = _blocks(cfg, tok, texts, params.cfg.context_length)
    events = _EventLog(run_dir / "events.jsonl")
    try:
        if init_info:
            events.write(event="init", reports=init_info)
            if cfg.embedding_warmup_steps > 0:
                embedding_warmup(
                    params, blocks, cfg.embedding_warmup_steps, policy, adam, adam.lr_peak,
                    cfg.batch_size, sub_seed(cfg.seed, "embedding-warmup"),
                )
                events.write(event="embedding_warmup", steps=cfg.embedding_warmup_steps)
        params.snapshot()
        state = init_optimizer_state(params, policy)
        grid = []

        def on_eval(step):
            r = _evaluate(params, tok, held, policy)
            grid.append({"step": step, "fraction": step / cfg.steps, "nll_per_word": r.nll_per_word, "nll_per_token": r.nll_per_token})
            events.write(event="eval", **grid[-1])
            return r

        on_eval(0)
        _train_range(params, state, blocks, cfg, policy, adam, 0, cfg.steps, events, on_eval, sub_seed(cfg.seed, "data-order"))
    finally:
        events.close()
    final = _evaluate(params, tok, held, policy)
    (run_dir / "eval_grid.json").write_text(json.dumps(grid, indent=2))
    save_checkpoint(run_dir / "checkpoint", params, state, {"step": cfg.steps, "seed": cfg.seed})
    _write_reports(run_dir, params, state, final)
    return run_dir


def continue_run(run_dir, steps: int | None = None) -> Path:
    """Resume a run from its checkpoint up to ``steps`` (default: the configured total)."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    params, state, extra = load_checkpoint(run_dir / "checkpoint")
    if state is None:
        raise ValueError("checkpoint has no optimizer state to resume from")
    target = cfg.steps if steps is None else steps
    if target > cfg.steps:
        cfg.steps = target
        (run_dir / "config.json").write_text(cfg.to_json())
    start = extra.get("step", state.step)
    if target <= start:
        return run_dir
    tok = TokenizerModel.load(run_dir / "tokenizer.json")
    texts, held, _ = _load_corpus(cfg)
    policy = params.policy
    blocks = _blocks(cfg, tok, texts, params.cfg.context_length)
    events = _EventLog(run_dir / "events.jsonl")
    try:
        _train_range(params, state, blocks, cfg, policy, cfg.adam(), start, target, events,
                     lambda s: events.write(event="eval", step=s, fraction=s / cfg.steps,
                                            **_eval_fields(_evaluate(params, tok, held, policy))),
                     sub_seed(cfg.seed, "data-order"))
    finally:
        events.close()
    save_checkpoint(run_dir / "checkpoint", params, state, {**extra, "step": target})
    _write_reports(run_dir, params, state, _evaluate(params, tok, held, policy))
    return run_dir


def _eval_fields(r):
    return {"nll_per_word": r.nll_per_word, "nll_per_token": r.nll_per_token}


def _to_mixed(params: ParameterSet, state: OptimizerState):
    """Switch a pure-bf16 run to mixed precision; the master copy starts from the bf16 weights."""
    policy = MIXED_BF16
    out = params.copy()
    out.policy = policy
    master = {n: quantize(p.values, policy.master_fmt) for n, p in out.items()}
    m = {n: quantize(a, policy.optimizer_state_fmt) for n, a in state.m.items()}
    v = {n: quantize(a, policy.optimizer_state_fmt) for n, a in state.v.items()}
    return out, OptimizerState(m, v, master, state.step, dict(state.extra))


def switch_precision_at(cfg: ExperimentConfig, fraction: float) -> Path:
    """Train pure bf16 to ``fraction`` of the steps, then branch: one branch stays pure, the other goes mixed.

    Writes ``switch/`` (shared prefix), ``pure/`` and ``pure_pp/`` checkpoints under the run directory.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    if cfg.precision != "pure":
        raise ValueError("the precision switch starts from a pure bf16 run")
    k = int(round(fraction * cfg.steps))
    if not 0 < k < cfg.steps:
        raise ValueError(f"fraction {fraction} of {cfg.steps} steps leaves an empty branch")
    run_dir, texts, held, tok = _prepare(cfg)
    policy = policy_from_name(cfg.precision)
    adam = cfg.adam()
    params, _ = _build_model(cfg, tok, texts)
    params.snapshot()
    state = init_optimizer_state(params, policy)
    blocks = _blocks(cfg, tok, texts, params.cfg.context_length)
    seed = sub_seed(cfg.seed, "data-order")
    noop = lambda s: None  # noqa: E731

    events = _EventLog(run_dir / "events_prefix.jsonl")
    try:
        _train_range(params, state, blocks, cfg, policy, adam, 0, k, events, noop, seed)
    finally:
        events.close()
    save_checkpoint(run_dir / "switch", params, state, {"step": k, "fraction": fraction})

    branches = {
        "pure": (params.copy(), _copy_state(state), policy),
        "pure_pp": (*_to_mixed(params, state), MIXED_BF16),
    }
    for name, (p, s, pol) in branches.items():
        events = _EventLog(run_dir / f"events_{name}.jsonl")
        try:
            _train_range(p, s, blocks, cfg, pol, adam, k, cfg.steps, events, noop, seed)
        finally:
            events.close()
        save_checkpoint(run_dir / name, p, s, {"step": cfg.steps, "switch_step": k})
        report = _evaluate(p, tok, held, pol)
        branch_dir = run_dir / name
        _write_reports(branch_dir, p, s, report)
    return run_dir


def _copy_state(s: OptimizerState) -> OptimizerState:
    master = None if s.master is None else {k: v.copy() for k, v in s.master.items()}
    return OptimizerState({k: v.copy() for k, v in s.m.items()}, {k: v.copy() for k, v in s.v.items()}, master, s.step, dict(s.extra))


# ---------------------------------------------------------------- timing


@dataclass
class TimingReport:
    raw_seconds: list[float]
    mean_seconds: float
    excluded_first: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def mean_excluding_first(times) -> float:
    times = list(times)
    if len(times) < 2:
        raise ValueError("need at least two timed steps")
    return float(np.mean(times[1:]))


def time_steps(cfg: ExperimentConfig, n: int = 11, texts=None, clock=time.perf_counter) -> TimingReport:
    """Wall-clock ``n`` training steps; the first one (warm caches, allocation) is left out of the mean."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if texts is None:
        texts, _, _ = _load_corpus(cfg)
    tok = _tokenizer(cfg, texts)
    policy = policy_from_name(cfg.precision)
    params, _ = _build_model(cfg, tok, texts)
    state = init_optimizer_state(params, policy)
    blocks = _blocks(cfg, tok, texts, params.cfg.context_length)
    batches = iterate_batches(blocks, cfg.batch_size, sub_seed(cfg.seed, "data-order"))
    adam = cfg.adam()
    raw = []
    for _ in range(n):
        batch = next(batches)
        t0 = clock()
        train_step(params, state, batch, adam, policy, adam.lr_peak)
        raw.append(clock() - t0)
    return TimingReport(raw, mean_excluding_first(raw))
