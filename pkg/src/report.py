"""Report files and plain-text table renderers"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

from src.io_utils import atomic_write_json, atomic_write_text
from src.models import ConjectureReport, EvalReport

logger = logging.getLogger(__name__)


def _acc(mean: float, std: float, n_runs: int) -> str:
    return f"{mean:.2f} ± {std:.2f}" if n_runs > 1 else f"{mean:.2f}"


def _table(header: Sequence[str], rows: List[Sequence[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    line = "+".join("-" * (w + 2) for w in widths)
    out = [" | ".join(str(h).ljust(w) for h, w in zip(header, widths)), line]
    out += [" | ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(out) + "\n"


def render_robustness_table(reports: Sequence[EvalReport]) -> str:
    """Defense / clean / robust / average accuracy per dataset and attack"""
    rows = [
        (r.defense, r.dataset, _acc(r.clean_acc, r.clean_std, r.n_runs),
         _acc(r.robust_acc, r.robust_std, r.n_runs), f"{r.avg_acc:.2f}", r.attack_label)
        for r in reports
    ]
    return _table(("Defense", "Dataset", "Clean Acc. (%)", "Robust Acc. (%)", "Avg. Acc. (%)", "Attack"), rows)


def render_quality_table(reports: Sequence[EvalReport]) -> str:
    """PSNR and SSIM of purified clean and adversarial images"""
    psnr_rows = [
        (r.defense, f"{r.psnr_clean:.4f}", f"{r.psnr_adv:.4f}",
         f"{(r.psnr_clean + r.psnr_adv) / 2:.4f}", r.attack_label)
        for r in reports
    ]
    ssim_rows = [
        (r.defense, f"{r.ssim_clean:.4f}", f"{r.ssim_adv:.4f}",
         f"{(r.ssim_clean + r.ssim_adv) / 2:.4f}", r.attack_label)
        for r in reports
    ]
    return (_table(("Defense", "Clean_PSNR", "Robust_PSNR", "Avg. PSNR", "Attack"), psnr_rows)
            + "\n"
            + _table(("Defense", "Clean_SSIM", "Robust_SSIM", "Avg. SSIM", "Attack"), ssim_rows))


def render_objective_table(results: Sequence[Tuple[str, EvalReport]]) -> str:
    """One row per training objective"""
    rows = [
        (name, _acc(r.clean_acc, r.clean_std, r.n_runs), _acc(r.robust_acc, r.robust_std, r.n_runs),
         f"{r.avg_acc:.2f}")
        for name, r in results
    ]
    return _table(("Objective", "Clean Acc. (%)", "Robust Acc. (%)", "Avg. Acc. (%)"), rows)


def render_patch_ratio_table(grid: Dict[Tuple[int, float], EvalReport]) -> str:
    """Rows are patch sizes, columns masking ratios; cells are robust / clean accuracy"""
    sizes = sorted({ps for ps, _ in grid})
    ratios = sorted({r for _, r in grid})
    rows = []
    for ps in sizes:
        cells = [f"ps={ps}"]
        for r in ratios:
            report = grid.get((ps, r))
            cells.append("-" if report is None else f"{report.robust_acc:.2f} / {report.clean_acc:.2f}")
        rows.append(cells)
    return _table(["Patch size"] + [f"r={r:g}" for r in ratios], rows)


def render_conjecture(report: ConjectureReport) -> str:
    rows = [
        ("c(P(x_a))", f"{report.acc_c_Pxa:.2f}"),
        ("c(P(x))", f"{report.acc_c_Px:.2f}"),
        ("c(x - delta_a)", f"{report.acc_c_x_minus_delta:.2f}"),
        ("|c(P(x)) - c(x - delta_a)|", f"{report.gap:.2f}"),
    ]
    return _table(("Quantity", "Accuracy (%)"), rows)


def write_report(report: EvalReport, out_dir: Union[str, Path], name: str) -> Path:
    """Write <name>.json plus the rendered text tables; returns the JSON path"""
    out_dir = Path(out_dir)
    path = atomic_write_json(out_dir / f"{name}.json", report.to_dict())
    text = render_robustness_table([report])
    if report.psnr_clean or report.psnr_adv:
        text += "\n" + render_quality_table([report])
    atomic_write_text(out_dir / f"{name}.txt", text)
    logger.info(f"Report written to {path}")
    return path


def read_report(path: Union[str, Path]) -> EvalReport:
    with open(path, "r", encoding="utf-8") as f:
        return EvalReport.from_dict(json.load(f))


def write_conjecture(report: ConjectureReport, out_dir: Union[str, Path], name: str = "verify") -> Path:
    out_dir = Path(out_dir)
    path = atomic_write_json(out_dir / f"{name}.json", report.to_dict())
    atomic_write_text(out_dir / f"{name}.txt", render_conjecture(report))
    logger.info(f"Direction check written to {path}")
    return path


def read_conjecture(path: Union[str, Path]) -> ConjectureReport:
    with open(path, "r", encoding="utf-8") as f:
        return ConjectureReport.from_dict(json.load(f))
