import numpy as np
import pytest

from ngprt.config import Config, desk_config


def tiny_config(**overrides) -> Config:
    """A model small enough for double-precision gradient checks."""
    base = dict(
        coarse_resolution=8,
        n_coarse_levels=3,
        coarse_base_resolution=2,
        coarse_table_len=64,
        fine_table_len=128,
        fine_resolutions=[16, 32],
        grid_resolution=16,
        hidden_width=8,
        dtype="float64",
    )
    base.update(overrides)
    return Config(**base)


def small_desk_config(**overrides) -> Config:
    """Desk-shaped config with lattices small enough for fast unit tests."""
    base = dict(
        coarse_resolution=16,
        coarse_base_resolution=4,
        grid_resolution=32,
        fine_table_len=2**12,
        coarse_table_len=2**12,
        fine_resolutions=[32, 64],
        ray_cap=64,
        sample_cap=4096,
        iterations=20,
        lr_warmup_iters=5,
        eta_warmup_iters=10,
        occ_warmup_iters=8,
        occ_warmup_every=4,
        occ_update_every=8,
    )
    base.update(overrides)
    return desk_config(**base)


def unit_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    from ngprt.scene import desk_scene, synth_dataset

    return synth_dataset(desk_scene(), n_train=4, n_test=2, size=16, seed=3)


ACCEPTANCE_FILE = "test_acceptance.py"


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    rows = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if ACCEPTANCE_FILE not in nodeid or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            name = nodeid.split("::")[-1]
            if not name.startswith("test_"):
                continue
            num, _, label = name[len("test_") :].partition("_")
            rows.append((int(num), label.replace("_", " "), "PASS" if outcome == "passed" else outcome.upper()))
    if rows:
        terminalreporter.section("acceptance criteria")
        for num, label, status in sorted(rows):
            terminalreporter.write_line(f"criterion {num:2d}  {status:6s}  {label}")
