import pytest
import torch

from icestyle.experiments.synth import SyntheticDomainParams, gen_synthetic_domains

torch.set_num_threads(1)

ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def domains(tmp_path_factory):
    """Default synthetic domains (30/10/10 per domain), generated once per session."""
    root = tmp_path_factory.mktemp("domains")
    params = SyntheticDomainParams(seed=0)
    source, target, bank = gen_synthetic_domains(params, root)
    return {"root": root, "params": params, "source": source, "target": target, "bank": bank,
            "source_path": root / "source" / "manifest.json",
            "target_path": root / "target" / "manifest.json",
            "bank_path": root / "bank" / "bank.json"}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")
