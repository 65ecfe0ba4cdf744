from pathlib import Path

import pytest

from src.evaluation import MetricsReport
from src.utils import format_report_table

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def reports():
    return [MetricsReport.load(FIXTURES / "reports" / name) for name in ("zero", "final")]


def test_table_matches_golden_file(reports):
    assert format_report_table(reports) == (FIXTURES / "expected_table.txt").read_text()


def test_loaded_fixture_values(reports):
    zero, final = reports
    assert zero.domains == [0] and zero.dice is None
    assert final.dice == [0.99, 0.6]
    assert final.config == {"scope": "all", "seed": "0"}
    assert final.mean("psnr") == pytest.approx(22.25)


def test_table_without_dice_has_no_dice_column(reports):
    table = format_report_table(reports[:1])
    lines = table.splitlines()
    assert lines[2].split() == ["Method", "Protocol", "N", "Domain", "0"]
    assert len(lines[1]) == len("Method") + 2 + len("single-missing:0") + 2 + 1 + 2 + 34


def test_empty_table_rejected():
    with pytest.raises(ValueError):
        format_report_table([])
