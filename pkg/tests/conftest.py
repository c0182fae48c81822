import pytest

from slfi.config import config_from_dict


def tiny_doc(**over):
    """A run small enough to finish in a few seconds."""
    doc = {
        "simulator": "slcp-d",
        "simulator_options": {"d": 2},
        "rounds": 2,
        "budget": 60,
        "seed": 3,
        "sampler": {"kind": "isp", "chains": 60, "transitions": 5, "step_scale": 0.3},
        "head_fit": {"max_epochs": 3, "batch_size": 20},
        "surrogate_fit": {"max_epochs": 3, "batch_size": 20},
        "flow": {"hidden": [8], "layers": 2, "bins": 4},
        "metrics": {"names": ["missed_mode", "imbalance", "nll", "ess"], "n_mc": 2000},
    }
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    return doc


@pytest.fixture
def tiny_config():
    return lambda **over: config_from_dict(tiny_doc(**over))


# ------------------------------------------------------------------ acceptance report

_CRITERIA: dict = {}


class CriterionRecorder:
    """Collects sub-checks for one acceptance criterion; fails the test at the end."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list = []
        _CRITERIA[number] = self

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        self.checks.append((name, bool(ok), detail))
        return bool(ok)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for _, ok, _ in self.checks)

    def finish(self) -> None:
        failed = [f"{n} ({d})" for n, ok, d in self.checks if not ok]
        assert not failed, "failed: " + "; ".join(failed)


@pytest.fixture
def criterion():
    return CriterionRecorder


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        rec = _CRITERIA[number]
        status = "PASS" if rec.passed else "FAIL"
        parts = "; ".join(f"{n}={'ok' if ok else 'FAIL'} [{d}]" for n, ok, d in rec.checks)
        terminalreporter.write_line(f"criterion {number} {status}: {rec.title}: {parts}")
