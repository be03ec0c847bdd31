import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", derandomize=True)
settings.register_profile("explore", max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

from vstrestore.image import ImagePlane, RealizationStack, RegionMask
from vstrestore.noise import AcquisitionModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def canonical_model():
    return AcquisitionModel(alpha=1.0, sigma_e=2.0, tau=50.0)


def constant_plane(value, shape=(64, 64)):
    return ImagePlane(np.full(shape, float(value)))


def stack_of(arrays, pitch=0.14):
    return RealizationStack(np.asarray(arrays, dtype=np.float64), pitch, pitch)


def full_mask(shape):
    return RegionMask.full(*shape)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, built from the test outcomes."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and rep.passed:
                continue
            props = dict(getattr(rep, "user_properties", []))
            label = props.get("criterion", rep.nodeid.split("::")[-1])
            status = "PASS" if rep.passed else "FAIL"
            lines.append((label, f"{status}  {label}: {props.get('detail', '')}".rstrip()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines, key=lambda item: _criterion_key(item[0])):
            terminalreporter.write_line(text)


def _criterion_key(label):
    head = label.split()[1] if label.startswith("criterion ") else label
    return (0, int(head)) if head.isdigit() else (1, label)
