"""Session fixtures that run the benchmark pipeline through the CLI.

The runs are expensive (minutes each on one core), so they are shared across
test modules and only started by tests that ask for them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from concept_effects.cli import main

SEED = 0


@dataclass
class PipelineRun:
    root: Path
    seconds: dict[str, float] = field(default_factory=dict)

    def path(self, name: str) -> Path:
        return self.root / name


def _cli(run: PipelineRun, step: str, *argv) -> None:
    start = time.perf_counter()
    code = main([str(a) for a in argv])
    run.seconds[step] = time.perf_counter() - start
    assert code == 0, f"{step} exited with {code}"


def run_pipeline(root: Path, seed: int = SEED) -> PipelineRun:
    """gen-synth -> baseline -> tc (lambda 6) -> cf -> estimate, with default benchmark settings."""
    run = PipelineRun(root)
    data = root / "data"
    _cli(run, "gen-synth", "gen-synth", "--out", data, "--seed", seed)
    corpus = data / "train.jsonl"
    _cli(run, "baseline", "train", "--stage", "baseline", "--corpus", corpus, "--out", root / "base",
         "--seed", seed)
    _cli(run, "tc", "train", "--stage", "tc", "--corpus", corpus, "--out", root / "tc", "--seed", seed)
    _cli(run, "cf", "train", "--stage", "cf", "--corpus", corpus, "--tc-checkpoint", root / "tc",
         "--out", root / "cf", "--seed", seed)
    _cli(run, "estimate", "estimate", "--baseline", root / "base", "--cf", root / "cf",
         "--test", data / "test.jsonl", "--out", root / "report", "--seed", seed)
    return run


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory) -> PipelineRun:
    return run_pipeline(tmp_path_factory.mktemp("benchmark"))


@pytest.fixture(scope="session")
def benchmark_repeat(tmp_path_factory) -> PipelineRun:
    return run_pipeline(tmp_path_factory.mktemp("benchmark-repeat"))


@pytest.fixture(scope="session")
def null_concept(benchmark) -> PipelineRun:
    """Stage 1 with lambda 0 on the benchmark corpus, then stage 2.

    With lambda 0 the reversal passes no gradient to the encoder, so the encoder
    is exactly the one a never-occurring concept would leave behind.
    """
    run = PipelineRun(benchmark.root)
    corpus = benchmark.path("data") / "train.jsonl"
    _cli(run, "tc0", "train", "--stage", "tc", "--corpus", corpus, "--out", benchmark.path("tc0"),
         "--seed", SEED, "--lambda", 0)
    _cli(run, "cf0", "train", "--stage", "cf", "--corpus", corpus, "--tc-checkpoint", benchmark.path("tc0"),
         "--out", benchmark.path("cf0"), "--seed", SEED)
    return run


_VERDICTS: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict line, then fail the test if it did not pass."""

    def record(name: str, ok: bool, detail: str) -> None:
        _VERDICTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
