"""Unit tests for the report store and checkpoint registry"""
from datetime import datetime, timedelta, timezone

from src.models import CheckpointRecord, EvalReport, SeedResult


def _report(defense: str = "maep", dataset: str = "synthetic") -> EvalReport:
    seeds = [SeedResult(0, 80.0, 40.0), SeedResult(1, 82.0, 44.0)]
    return EvalReport.from_seeds(defense, dataset, seeds, "attack-fp", attack_label="PGD-linf",
                                 psnr_clean=30.0, psnr_adv=25.0, ssim_clean=0.9, ssim_adv=0.8)


class TestDatabase:
    """Test Database operations"""

    def test_store_and_get_report(self, db):
        report_id = db.store_report(_report())
        assert report_id == 1
        stored = db.get_reports()[0]
        assert stored.defense == "maep"
        assert stored.clean_acc == 81.0
        assert stored.robust_std == _report().robust_std
        assert stored.per_seed == _report().per_seed
        assert stored.psnr_adv == 25.0
        assert stored.attack_label == "PGD-linf"

    def test_filter_reports(self, db):
        db.store_report(_report("maep", "synthetic"))
        db.store_report(_report("none", "synthetic"))
        db.store_report(_report("maep", "cifar10"))
        assert len(db.get_reports(defense="maep")) == 2
        assert len(db.get_reports(dataset="synthetic")) == 2
        assert [r.dataset for r in db.get_reports(defense="maep", dataset="cifar10")] == ["cifar10"]

    def test_register_checkpoint_upserts(self, db):
        record = CheckpointRecord(path="runs/maep.safetensors", config_hash="abc", objective="maep",
                                  dataset="synthetic", step=10, val_loss=0.2)
        db.register_checkpoint(record)
        record.step = 20
        db.register_checkpoint(record)
        records = db.get_checkpoints()
        assert len(records) == 1
        assert records[0].step == 20

    def test_checkpoints_newest_first(self, db):
        now = datetime.now(timezone.utc)
        for index, objective in enumerate(["maep", "disco_style", "maep"]):
            db.register_checkpoint(CheckpointRecord(
                path=f"ckpt_{index}.safetensors", config_hash="abc", objective=objective,
                dataset="synthetic", step=index, created_at=now + timedelta(seconds=index),
            ))
        assert [r.path for r in db.get_checkpoints(objective="maep")] == [
            "ckpt_2.safetensors", "ckpt_0.safetensors"
        ]
