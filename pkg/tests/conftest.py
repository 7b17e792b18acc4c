import numpy as np
import pytest

from skipv1lab.config import ModelConfig, VariantKind

ALL_VARIANTS = list(VariantKind)


def tiny_config(variant, **kw) -> ModelConfig:
    """Small config valid for every variant (latent and rotary dims set for MLA)."""
    base = dict(n_layers=4, d_model=16, n_heads=4, ffn_dim=32, vocab_size=13, n_max=64,
                variant=variant)
    if VariantKind(variant).is_mla:
        base.update(latent_dim=8, rope_dim=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --- acceptance summary --------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seen": False})
    if report.when == "call":
        entry["seen"] = True
    if report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}  {status}  {entry['title']}")
