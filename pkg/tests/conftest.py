import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from tabms import ModelConfig, TabularICLModel  # noqa: E402


def small_config(**kw) -> ModelConfig:
    """Tiny architecture for oracle comparisons; every stage present."""
    base = dict(
        d=8, col_inducing=3, col_heads=2, col_blocks=2, col_ff=12, n_cls=2, n_global=2,
        scales=(1, 2), row_blocks=2, row_heads=2, row_ff=12, window=2, random_links=0,
        mem_slots=3, mem_write=1, mem_read=1, mem_heads=2, icl_blocks=2, icl_heads=2, icl_ff=20, c_max=4,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return TabularICLModel(small_config())


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


# acceptance verdicts, printed together at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, title: str, detail: str) -> None:
    ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
