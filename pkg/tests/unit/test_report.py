"""Unit tests for report files and tables"""
from src.models import ConjectureReport, EvalReport, SeedResult
from src.report import (
    read_conjecture, read_report, render_objective_table, render_patch_ratio_table,
    render_robustness_table, write_conjecture, write_report
)


def _report(defense: str, clean: float, robust: float, n_runs: int = 1) -> EvalReport:
    seeds = [SeedResult(s, clean + s, robust + s) for s in range(n_runs)]
    return EvalReport.from_seeds(defense, "synthetic", seeds, "fp", attack_label="PGD-linf")


class TestReportFiles:
    """Test report persistence"""

    def test_report_roundtrip(self, tmp_path):
        report = _report("maep", 80.0, 40.0, n_runs=3)
        path = write_report(report, tmp_path, "eval_maep")
        assert path.name == "eval_maep.json"
        back = read_report(path)
        assert back.clean_acc == report.clean_acc
        assert back.per_seed == report.per_seed
        assert (tmp_path / "eval_maep.txt").read_text().startswith("Defense")

    def test_quality_table_only_with_metrics(self, tmp_path):
        write_report(_report("none", 80.0, 10.0), tmp_path, "plain")
        assert "PSNR" not in (tmp_path / "plain.txt").read_text()
        report = _report("maep", 80.0, 40.0)
        report.psnr_clean = 30.0
        write_report(report, tmp_path, "quality")
        assert "Clean_PSNR" in (tmp_path / "quality.txt").read_text()

    def test_conjecture_roundtrip(self, tmp_path):
        report = ConjectureReport(acc_c_Pxa=60.0, acc_c_Px=85.0, acc_c_x_minus_delta=88.0,
                                  n_samples=100, attack_fingerprint="fp")
        path = write_conjecture(report, tmp_path)
        back = read_conjecture(path)
        assert back == report
        assert back.gap == 3.0
        assert "c(x - delta_a)" in (tmp_path / "verify.txt").read_text()


class TestTables:
    """Test the text renderers"""

    def test_robustness_table_shows_std_for_multi_seed(self):
        text = render_robustness_table([_report("maep", 80.0, 40.0, n_runs=2), _report("none", 90.0, 0.0)])
        lines = text.strip().splitlines()
        assert len(lines) == 4
        assert "80.50 ± 0.71" in lines[2]
        assert "±" not in lines[3]

    def test_objective_table(self):
        text = render_objective_table([("maep", _report("maep", 80.0, 40.0))])
        assert "maep" in text and "60.00" in text

    def test_patch_ratio_grid_marks_missing_cells(self):
        grid = {(2, 0.5): _report("a", 80.0, 40.0), (4, 0.0): _report("b", 70.0, 30.0)}
        text = render_patch_ratio_table(grid)
        assert "r=0" in text and "r=0.5" in text
        assert "40.00 / 80.00" in text
        assert "-" in text.splitlines()[2]
