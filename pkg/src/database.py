"""Database layer for evaluation reports and the checkpoint registry"""
import logging
from datetime import datetime, timezone
from typing import List, Optional

from sqlalchemy import JSON, Column, DateTime, Float, Integer, String, create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker
from sqlalchemy.pool import StaticPool

from src.models import CheckpointRecord, EvalReport, SeedResult

logger = logging.getLogger(__name__)

Base = declarative_base()


class EvalReportORM(Base):
    """ORM model for evaluation reports"""
    __tablename__ = "eval_reports"

    id = Column(Integer, primary_key=True, autoincrement=True)
    defense = Column(String, nullable=False)
    dataset = Column(String, nullable=False)
    clean_acc = Column(Float, nullable=False)
    robust_acc = Column(Float, nullable=False)
    avg_acc = Column(Float, nullable=False)
    clean_std = Column(Float, default=0.0)
    robust_std = Column(Float, default=0.0)
    n_runs = Column(Integer, nullable=False)
    per_seed = Column(JSON, nullable=False)
    psnr_clean = Column(Float, default=0.0)
    psnr_adv = Column(Float, default=0.0)
    ssim_clean = Column(Float, default=0.0)
    ssim_adv = Column(Float, default=0.0)
    attack_fingerprint = Column(String, nullable=False)
    attack_label = Column(String, default="")
    config_fingerprint = Column(String, default="")
    created_at = Column(DateTime(timezone=True), default=lambda: datetime.now(timezone.utc))


class CheckpointORM(Base):
    """ORM model for written checkpoints"""
    __tablename__ = "checkpoints"

    path = Column(String, primary_key=True)
    config_hash = Column(String, nullable=False)
    objective = Column(String, nullable=False)
    dataset = Column(String, nullable=False)
    step = Column(Integer, nullable=False)
    val_loss = Column(Float, nullable=True)
    created_at = Column(DateTime(timezone=True), default=lambda: datetime.now(timezone.utc))


class Database:
    """Database connection and session management"""

    def __init__(self, db_url: str = "sqlite:///:memory:"):
        """Initialize database connection"""
        self.engine = create_engine(
            db_url,
            connect_args={"check_same_thread": False} if "sqlite" in db_url else {},
            poolclass=StaticPool if "sqlite" in db_url else None
        )
        self.SessionLocal = sessionmaker(bind=self.engine)
        Base.metadata.create_all(self.engine)
        logger.info(f"Database initialized: {db_url}")

    def get_session(self) -> Session:
        """Get a database session"""
        return self.SessionLocal()

    def store_report(self, report: EvalReport) -> int:
        """Store an evaluation report; returns its row id"""
        session = self.get_session()
        try:
            orm_obj = EvalReportORM(
                defense=report.defense,
                dataset=report.dataset,
                clean_acc=report.clean_acc,
                robust_acc=report.robust_acc,
                avg_acc=report.avg_acc,
                clean_std=report.clean_std,
                robust_std=report.robust_std,
                n_runs=report.n_runs,
                per_seed=[s.to_dict() for s in report.per_seed],
                psnr_clean=report.psnr_clean,
                psnr_adv=report.psnr_adv,
                ssim_clean=report.ssim_clean,
                ssim_adv=report.ssim_adv,
                attack_fingerprint=report.attack_fingerprint,
                attack_label=report.attack_label,
                config_fingerprint=report.config_fingerprint,
                created_at=report.created_at,
            )
            session.add(orm_obj)
            session.commit()
            logger.debug(f"Stored report for {report.defense} on {report.dataset} (id {orm_obj.id})")
            return orm_obj.id
        finally:
            session.close()

    @staticmethod
    def _to_report(orm_obj: EvalReportORM) -> EvalReport:
        return EvalReport(
            defense=orm_obj.defense,
            dataset=orm_obj.dataset,
            clean_acc=orm_obj.clean_acc,
            robust_acc=orm_obj.robust_acc,
            avg_acc=orm_obj.avg_acc,
            n_runs=orm_obj.n_runs,
            attack_fingerprint=orm_obj.attack_fingerprint,
            per_seed=[SeedResult(**s) for s in orm_obj.per_seed],
            clean_std=orm_obj.clean_std,
            robust_std=orm_obj.robust_std,
            psnr_clean=orm_obj.psnr_clean,
            psnr_adv=orm_obj.psnr_adv,
            ssim_clean=orm_obj.ssim_clean,
            ssim_adv=orm_obj.ssim_adv,
            attack_label=orm_obj.attack_label,
            config_fingerprint=orm_obj.config_fingerprint,
            created_at=orm_obj.created_at,
        )

    def get_reports(self, defense: Optional[str] = None,
                    dataset: Optional[str] = None) -> List[EvalReport]:
        """Retrieve reports, optionally filtered, oldest first"""
        session = self.get_session()
        try:
            query = session.query(EvalReportORM)
            if defense:
                query = query.filter_by(defense=defense)
            if dataset:
                query = query.filter_by(dataset=dataset)
            return [self._to_report(o) for o in query.order_by(EvalReportORM.id).all()]
        finally:
            session.close()

    def register_checkpoint(self, record: CheckpointRecord) -> None:
        """Store or update a checkpoint registry entry"""
        session = self.get_session()
        try:
            session.merge(CheckpointORM(
                path=record.path,
                config_hash=record.config_hash,
                objective=record.objective,
                dataset=record.dataset,
                step=record.step,
                val_loss=record.val_loss,
                created_at=record.created_at,
            ))
            session.commit()
            logger.debug(f"Registered checkpoint {record.path}")
        finally:
            session.close()

    def get_checkpoints(self, objective: Optional[str] = None) -> List[CheckpointRecord]:
        """List registered checkpoints, newest first"""
        session = self.get_session()
        try:
            query = session.query(CheckpointORM)
            if objective:
                query = query.filter_by(objective=objective)
            return [
                CheckpointRecord(
                    path=o.path, config_hash=o.config_hash, objective=o.objective,
                    dataset=o.dataset, step=o.step, val_loss=o.val_loss, created_at=o.created_at,
                )
                for o in query.order_by(CheckpointORM.created_at.desc()).all()
            ]
        finally:
            session.close()
