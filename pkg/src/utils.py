import torch

from .evaluation import METRICS, MetricsReport

METRIC_LABELS = {"mae": "MAE", "nrmse": "NRMSE", "psnr": "PSNR", "ssim": "SSIM"}


def configure_determinism(threads: int = 1) -> None:
    """Single-threaded, deterministic kernels: identical seeds give bit-identical runs."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def _format_cell(report: MetricsReport, domain: int) -> str:
    if domain not in report.domains:
        return "-"
    return " / ".join(f"{getattr(report, metric)[domain]:.4f}" for metric in METRICS)


def format_report_table(reports: list[MetricsReport]) -> str:
    """Display metrics reports as an aligned table: one row per report, one column per domain"""
    if not reports:
        raise ValueError("No reports to format.")
    domains = sorted({d for report in reports for d in report.domains})
    with_dice = any(report.dice is not None for report in reports)

    header = ["Method", "Protocol", "N"] + [f"Domain {d}" for d in domains]
    if with_dice:
        header.append("Dice")
    rows = []
    for report in reports:
        row = [report.method, report.protocol, str(report.sample_count)]
        row += [_format_cell(report, d) for d in domains]
        if with_dice:
            row.append("-" if report.dice is None else f"{report.dice_mean:.4f}")
        rows.append(row)

    widths = [max(len(line[i]) for line in [header] + rows) for i in range(len(header))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1)) + "\n"

    def render(line: list[str]) -> str:
        return "  ".join(f"{cell:<{w}}" for cell, w in zip(line, widths)).rstrip() + "\n"

    table = f"Metrics per domain: {' / '.join(METRIC_LABELS[m] for m in METRICS)}\n"
    table += rule + render(header) + rule
    for row in rows:
        table += render(row)
    return table
