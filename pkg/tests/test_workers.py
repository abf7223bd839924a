import threading
import time

import pytest

from workers import derive_seed, run_parallel


class InFlight:
    """Counts concurrently running calls."""

    def __init__(self):
        self.lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def __call__(self, item):
        with self.lock:
            self.current += 1
            self.peak = max(self.peak, self.current)
        time.sleep(0.01 * (item % 3))
        with self.lock:
            self.current -= 1
        return item * item


def test_results_keep_input_order():
    items = list(range(20))
    assert run_parallel(lambda x: x * x, items, jobs=1) == [x * x for x in items]
    assert run_parallel(InFlight(), items, jobs=4) == [x * x for x in items]


def test_concurrency_is_bounded():
    tracker = InFlight()
    run_parallel(tracker, range(30), jobs=3)
    assert 1 <= tracker.peak <= 3


def test_progress_reaches_total():
    seen = []
    run_parallel(lambda x: x, range(7), jobs=2, progress_callback=lambda d, t: seen.append((d, t)))
    assert sorted(seen) == [(i, 7) for i in range(1, 8)]
    seen.clear()
    run_parallel(lambda x: x, range(3), jobs=1, progress_callback=lambda d, t: seen.append((d, t)))
    assert seen == [(1, 3), (2, 3), (3, 3)]


def test_first_failure_is_raised():
    def fail_on_five(x):
        if x == 5:
            raise ValueError("five")
        return x

    with pytest.raises(ValueError, match="five"):
        run_parallel(fail_on_five, range(10), jobs=3)


def test_empty_input():
    assert run_parallel(lambda x: x, [], jobs=4) == []


def test_derive_seed():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
    assert derive_seed(1, 1, 2) != derive_seed(0, 1, 2)
    assert 0 <= derive_seed(123, 4) < 2 ** 32
