import numpy as np
import pytest

from metacvr import simgen
from metacvr.featurespace import FeatureSchema, read_records

TINY = dict(n_users=60, n_items=48, clicks_per_day=80, n_brands=10, base_cvr=0.05, seed=3)


@pytest.fixture(scope="session")
def tiny_params():
    return simgen.SimParams(**TINY)


@pytest.fixture(scope="session")
def tiny_schema(tiny_params):
    return simgen.schema_for(tiny_params, seq_len=6)


@pytest.fixture(scope="session")
def tiny_lines(tiny_params):
    cal = simgen.generate_calendar(tiny_params)
    return simgen.split_lines(simgen.generate_logs(cal, tiny_params), cal, tiny_params)


@pytest.fixture(scope="session")
def tiny_data(tiny_lines, tiny_schema):
    return {k: read_records(v, tiny_schema) for k, v in tiny_lines.items()}


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory, tiny_params):
    out = tmp_path_factory.mktemp("tiny")
    simgen.write_dataset(out, tiny_params, seq_len=6)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_schema(seq_len=4) -> FeatureSchema:
    return FeatureSchema(vocab={"user_id": 11, "item_id": 21, "category_id": 6, "brand_id": 5,
                                "position": 4, "time_bucket": 3},
                         dense={"user": 2, "item": 3, "inter": 2}, seq_len=seq_len)


@pytest.fixture(scope="session")
def tiny_stage1(tiny_data, tiny_schema):
    from metacvr.trainer import TrainConfig, train_base
    return train_base(tiny_data["train"], tiny_schema, TrainConfig(epochs_base=1, seed=5))


# -- acceptance summary: one pass/fail line per criterion ------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the outcome of acceptance criterion ``n``."""
    def record(n: int, ok: bool, detail: str = "") -> bool:
        prev = ACCEPTANCE.get(n)
        if prev is not None:
            ok, detail = prev[0] and ok, "; ".join(d for d in (prev[1], detail) if d)
        ACCEPTANCE[n] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
