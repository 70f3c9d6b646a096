"""Unit tests for AblationRunner"""
import json

import pytest

from src.ablation import AblationRunner
from src.models import DistanceKind, Objective


@pytest.fixture
def runner(run_config, classifier, synthetic_handle, tmp_path, db):
    """Create ablation runner over the tiny run configuration"""
    return AblationRunner(run_config, classifier, synthetic_handle, tmp_path / "ablation", db)


class TestAblationRunner:
    """Test AblationRunner"""

    def test_objectives_share_data_and_budget(self, runner, db):
        results = runner.run_objectives([Objective.DISCO_STYLE, Objective.MAEP])
        assert [name for name, _ in results] == ["disco_style", "maep"]
        fingerprints = {report.attack_fingerprint for _, report in results}
        assert len(fingerprints) == 1
        assert (runner.out_dir / "objective_maep" / "maep.safetensors").exists()
        assert "disco_style" in (runner.out_dir / "ablation_objectives.txt").read_text()
        assert len(db.get_reports()) == 2

    def test_patch_ratio_grid(self, runner):
        grid = runner.run_patch_ratio(patch_sizes=(2, 4), ratios=(0.0, 0.5))
        assert set(grid) == {(2, 0.0), (2, 0.5), (4, 0.0), (4, 0.5)}
        assert (runner.out_dir / "ps4_r0" / "disco_style.safetensors").exists()
        assert (runner.out_dir / "ps2_r0.5" / "maep.safetensors").exists()
        saved = json.loads((runner.out_dir / "ablation_patch_ratio.json").read_text())
        assert "ps=4,r=0.5" in saved

    def test_distance_variants(self, runner):
        results = runner.run_distance([DistanceKind.MSE])
        assert results[0][0] == "maep[mse]"
        assert 0 <= results[0][1].avg_acc <= 100
