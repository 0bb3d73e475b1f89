import re

import pytest
import torch

from crossmim import ModelConfig

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture
def tiny_cfg():
    """986-parameter instance used for finite-difference gradient checks."""
    return ModelConfig(
        image_size=4, patch_size=2, embed_dim=4, heads=2, mlp_ratio=0.5,
        image_layers=1, text_layers=1, fusion_layers=1, decoder_layers=1,
        vocab_size=6, max_text_len=3, code_dim=4, head_hidden_dim=4,
        inject_start_layer=1, mask_ratio=0.5,
    )


@pytest.fixture
def small_cfg():
    """Fast but non-degenerate instance for behavioral tests."""
    return ModelConfig(
        image_size=16, patch_size=4, embed_dim=16, heads=2,
        image_layers=2, text_layers=1, fusion_layers=1, decoder_layers=1,
        vocab_size=32, max_text_len=8, code_dim=8, head_hidden_dim=16,
        inject_start_layer=2,
    )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            m = re.search(r"test_acceptance\.py::test_c(\d+)", nodeid)
            if m:
                word = "PASS" if status == "passed" else "FAIL"
                name = nodeid.split("::")[-1]
                lines.append((int(m.group(1)), f"criterion {int(m.group(1)):2d} {word}: {name}"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
