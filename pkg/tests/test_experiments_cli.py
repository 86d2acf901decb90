import itertools
import json

import numpy as np
import pytest

from budgetlm import cli
from budgetlm.checkpoint import load_checkpoint
from budgetlm.experiments import (
    ExperimentConfig,
    IngestError,
    continue_run,
    eval_steps,
    ingest,
    mean_excluding_first,
    run_adaptation,
    switch_precision_at,
    time_steps,
)
from budgetlm.schedules import phase_boundaries
from budgetlm.synthetic import make_language, sample_documents

TINY = {"d_model": 8, "n_layers": 1, "d_ff": 16, "context_length": 16}
INFINITE = {
    "kind": "infinite", "warmup_frac": 0.01, "lr_peak": 3e-5, "cosine_end_lr": 1.65e-5,
    "constant_frac": 0.25, "anneal_frac": 0.14, "final_lr": 2e-6,
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    docs = sample_documents(make_language(0), 40, 1, sentences=(1, 2))
    rows = [{"text": t, "quality_warnings": []} for t in docs]
    rows[0]["quality_warnings"] = ["adult"]
    rows[1]["quality_warnings"] = ["tiny", "noisy"]
    path = d / "train.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


def config(corpus, out, **kw):
    base = dict(train_paths=[str(corpus)], output_dir=str(out), model=TINY, steps=10, batch_size=2,
                tokenizer_vocab_size=300, eval_fraction=0.15)
    base.update(kw)
    return ExperimentConfig(**base)


class TestIngest:
    def test_filter_and_counts(self, corpus):
        docs, rep = ingest([corpus])
        assert rep.read == 40 and rep.retained == 38 == len(docs)
        assert rep.dropped_by_tag == {"adult": 1, "noisy": 1}

    def test_no_tags_keeps_all(self, corpus):
        docs, rep = ingest([corpus], tags=[])
        assert len(docs) == rep.read == 40

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"text": "ok", "quality_warnings": []}\n{oops\n')
        with pytest.raises(IngestError, match=r"bad.jsonl:2: malformed"):
            ingest([p])

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestError):
            ingest([tmp_path / "none.jsonl"])


class TestConfig:
    def test_json_round_trip(self, corpus, tmp_path):
        cfg = config(corpus, tmp_path, schedule=INFINITE, rounding="stochastic")
        assert ExperimentConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"stepz": 3})

    def test_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(steps=0)
        with pytest.raises(ValueError):
            ExperimentConfig(precision="fp8")

    @pytest.mark.parametrize("steps", [10, 100, 7680])
    def test_eval_grid(self, steps):
        assert eval_steps(steps) == sorted({round(f * steps) for f in (0, 0.1, 0.3, 0.5, 0.7, 0.9, 1)})
        if steps == 100:
            assert eval_steps(100) == [0, 10, 30, 50, 70, 90, 100]


def events(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestRuns:
    def test_run_outputs_and_grid(self, corpus, tmp_path):
        run = run_adaptation(config(corpus, tmp_path / "a"))
        for name in ("config.json", "tokenizer.json", "events.jsonl", "eval_grid.json", "weight_report.json",
                     "weight_report.csv", "eval_report.json", "eval_report.csv", "ingest_report.json"):
            assert (run / name).exists(), name
        ev = events(run / "events.jsonl")
        assert [e["step"] for e in ev if e["event"] == "eval"] == [0, 1, 3, 5, 7, 9, 10]
        assert [e["step"] for e in ev if e["event"] == "step"] == list(range(1, 11))
        assert ExperimentConfig.load(run / "config.json") == config(corpus, tmp_path / "a")

    def test_deterministic(self, corpus, tmp_path):
        a = run_adaptation(config(corpus, tmp_path / "a"))
        b = run_adaptation(config(corpus, tmp_path / "b"))
        for f in ("checkpoint/tensors.bin", "checkpoint/manifest.json", "tokenizer.json"):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_continue_at_target_is_noop(self, corpus, tmp_path):
        run = run_adaptation(config(corpus, tmp_path / "n", steps=4))
        before = (run / "checkpoint/tensors.bin").read_bytes()
        continue_run(run, steps=4)
        assert (run / "checkpoint/tensors.bin").read_bytes() == before

    def test_continue_extends(self, corpus, tmp_path):
        run = run_adaptation(config(corpus, tmp_path / "c", steps=5))
        continue_run(run, steps=8)
        _, state, extra = load_checkpoint(run / "checkpoint")
        assert state.step == 8 and extra["step"] == 8

    def test_base_checkpoint_swap(self, corpus, tmp_path):
        base = run_adaptation(config(corpus, tmp_path / "base", steps=3))
        cfg = config(corpus, tmp_path / "swap", steps=3, base_checkpoint=str(base / "checkpoint"),
                     base_tokenizer=str(base / "tokenizer.json"), tokenizer_vocab_size=290,
                     init_method="overlap", embedding_warmup_steps=2)
        run = run_adaptation(cfg)
        ev = events(run / "events.jsonl")
        assert ev[0]["event"] == "init" and ev[1] == {"event": "embedding_warmup", "steps": 2}


class TestSwitch:
    def test_rejects_bounds(self, corpus, tmp_path):
        for f in (0.0, 1.0):
            with pytest.raises(ValueError):
                switch_precision_at(config(corpus, tmp_path), f)
        with pytest.raises(ValueError):
            switch_precision_at(config(corpus, tmp_path, precision="mixed"), 0.5)

    def test_anneal_start_and_shared_prefix(self, corpus, tmp_path):
        cfg = config(corpus, tmp_path / "sw", steps=50, schedule=INFINITE)
        run = switch_precision_at(cfg, 0.86)
        anneal_start = phase_boundaries(cfg.schedule_spec())[2]
        _, state, extra = load_checkpoint(run / "switch")
        assert extra["step"] == state.step == anneal_start == 43
        pure, pure_state, _ = load_checkpoint(run / "pure")
        pp, pp_state, _ = load_checkpoint(run / "pure_pp")
        assert pure_state.master is None and pp_state.master is not None
        assert pp.policy.name == "mixed"
        # both branches start from the switch checkpoint and see the same batches afterwards
        a, b = events(run / "events_pure.jsonl"), events(run / "events_pure_pp.jsonl")
        assert [e["step"] for e in a] == [e["step"] for e in b] == list(range(44, 51))
        assert a[0]["lr"] == b[0]["lr"] and a[0]["loss"] == b[0]["loss"]


class TestTiming:
    def test_mean_excludes_first(self):
        assert mean_excluding_first([9.0, 1.0]) == 1.0
        assert mean_excluding_first([100.0] + list(range(1, 11))) == 5.5
        with pytest.raises(ValueError):
            mean_excluding_first([1.0])

    def test_fake_clock(self, corpus, tmp_path):
        ticks = itertools.count()
        clock = lambda: float(next(ticks)) ** 2  # noqa: E731
        rep = time_steps(config(corpus, tmp_path), n=3, clock=clock)
        # intervals: 1-0, 9-4, 25-16
        assert rep.raw_seconds == [1.0, 5.0, 9.0]
        assert rep.mean_seconds == 7.0

    def test_real_clock(self, corpus, tmp_path):
        rep = time_steps(config(corpus, tmp_path), n=2)
        assert len(rep.raw_seconds) == 2 and rep.mean_seconds == rep.raw_seconds[1]
        with pytest.raises(ValueError):
            time_steps(config(corpus, tmp_path), n=1)


class TestCLI:
    def test_ingest_stats(self, corpus, capsys):
        assert cli.main(["ingest-stats", "--input", str(corpus)]) == 0
        assert json.loads(capsys.readouterr().out)["retained"] == 38

    def test_bad_flag_exit_1(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["plan", "--gpus", "two"])
        assert e.value.code == 1

    def test_malformed_input_exit_1(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{nope\n")
        assert cli.main(["ingest-stats", "--input", str(bad)]) == 1

    def test_plan(self, capsys, tmp_path):
        assert cli.main(["plan", "--precision", "mixed", "--gpus", "2", "--out", str(tmp_path / "plan")]) == 0
        assert (tmp_path / "plan/plan.json").exists() and (tmp_path / "plan/plan.csv").exists()

    def test_train_eval_analyze(self, corpus, tmp_path):
        out = tmp_path / "run"
        flags = ["--train", str(corpus), "--output-dir", str(out), "--steps", "3", "--batch-size", "2", "--vocab-size", "300"]
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": TINY}))
        assert cli.main(["train", "--config", str(cfg), *flags]) == 0
        assert ExperimentConfig.load(out / "config.json").model == TINY
        assert cli.main(["eval", "--checkpoint", str(out / "checkpoint"), "--tokenizer", str(out / "tokenizer.json"),
                         "--input", str(corpus), "--out", str(tmp_path / "ev")]) == 0
        assert json.loads((tmp_path / "ev/eval_report.json").read_text())["word_count"] > 0
        assert cli.main(["analyze-weights", "--checkpoint", str(out / "checkpoint"), "--out", str(tmp_path / "w")]) == 0
        assert (tmp_path / "w/weight_report.csv").exists()
        assert cli.main(["continue", "--run-dir", str(out), "--steps", "4"]) == 0

    def test_nan_abort_exit_2(self, corpus, tmp_path, monkeypatch, capsys):
        import budgetlm.training as training

        real = training.batch_gradients

        def poisoned(params, batch, policy):
            loss, n, grads = real(params, batch, policy)
            return float("nan"), n, grads

        monkeypatch.setattr(training, "batch_gradients", poisoned)
        out = tmp_path / "nan"
        code = cli.main(["train", "--train", str(corpus), "--output-dir", str(out), "--steps", "3",
                         "--vocab-size", "300", "--config", str(self._tiny(tmp_path))])
        assert code == 2
        ev = events(out / "events.jsonl")
        assert ev[-1]["event"] == "abort" and ev[-1]["step"] == 1

    @staticmethod
    def _tiny(tmp_path):
        p = tmp_path / "tiny.json"
        p.write_text(json.dumps({"model": TINY, "batch_size": 2}))
        return p
