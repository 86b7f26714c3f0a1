from pathlib import Path

import numpy as np
import pytest

from fhaim.encoding import AttributeDomain, Dataset, DatasetSchema

DATA = Path(__file__).resolve().parent.parent / "data"


def make_schema(sizes, prefix="a"):
    return DatasetSchema(tuple(AttributeDomain(f"{prefix}{i}", s) for i, s in enumerate(sizes)))


def random_dataset(rng, sizes, n):
    schema = make_schema(sizes)
    rows = np.stack([rng.integers(0, s, n) for s in sizes], axis=1)
    return Dataset(schema, rows)


def dataset_paths(name):
    return DATA / f"{name}.csv", DATA / f"{name}.domain.json"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
