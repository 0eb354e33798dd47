import os

import pytest

from ammlab.parallel import THREADS_ENV, resolve_threads, run_parallel


def _square_or_fail(x):
    if x == 3:
        raise ValueError("three")
    return x * x


class TestRunParallel:
    @pytest.mark.parametrize("threads", [1, 4])
    def test_order_and_errors(self, threads) -> None:
        outcomes = run_parallel(_square_or_fail, list(range(6)), threads)
        assert [o.item for o in outcomes] == list(range(6))
        assert [o.result for o in outcomes if o.success] == [0, 1, 4, 16, 25]
        failed = outcomes[3]
        assert not failed.success and isinstance(failed.error, ValueError)

    def test_empty(self) -> None:
        assert run_parallel(_square_or_fail, [], 4) == []


class TestResolveThreads:
    def test_explicit_wins(self, monkeypatch) -> None:
        monkeypatch.setenv(THREADS_ENV, "7")
        assert resolve_threads(3) == 3
        assert resolve_threads(0) == 1

    def test_environment(self, monkeypatch) -> None:
        monkeypatch.setenv(THREADS_ENV, "5")
        assert resolve_threads() == 5

    def test_bad_environment_falls_back(self, monkeypatch) -> None:
        monkeypatch.setenv(THREADS_ENV, "many")
        assert resolve_threads() == (os.cpu_count() or 1)
