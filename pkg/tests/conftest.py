import pytest

from focusclf.synth import SynthConfig, synth_generate

from helpers import calibrated_model


@pytest.fixture(scope="session")
def tiny_ckpt():
    return calibrated_model()


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """40 synthetic lesions (10 malignant) on disk; returns (directory, records)."""
    root = tmp_path_factory.mktemp("cohort")
    records = synth_generate(root, SynthConfig(lesions=40, ratio=0.25, seed=3))
    return root, records


def pytest_terminal_summary(terminalreporter):
    from helpers import VERDICTS

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        status, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
