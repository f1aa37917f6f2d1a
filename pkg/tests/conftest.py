import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


import pytest  # noqa: E402

from fieldflow.harness import ModelCache, PipelineConfig, benchmark_scenarios, prepare_all  # noqa: E402


class Benchmark:
    """Default-config evaluation contexts plus lazily trained per-mode models."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.models = ModelCache(config)
        self._contexts = None
        self.reports = {}
        self.sweeps = {}

    @property
    def contexts(self):
        if self._contexts is None:
            self._contexts = prepare_all(self.config, benchmark_scenarios(self.config))
        return self._contexts

    def of_kind(self, kind):
        return [c for c in self.contexts if c.scenario.kind.value == kind]


@pytest.fixture(scope="session")
def benchmark():
    return Benchmark(PipelineConfig())


ACCEPTANCE_LINES: list = []


def record_criterion(label: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
