"""Objective, patch-size x mask-ratio and distance ablations"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch

from src.attacks import ClassifierHandle
from src.config_manager import RunConfig, derive_config
from src.data_pipeline import DatasetHandle
from src.database import Database
from src.evaluation import eval_defense
from src.io_utils import atomic_write_json, atomic_write_text
from src.models import DistanceKind, EvalReport, Objective
from src.purifier import build_purifier
from src.report import render_objective_table, render_patch_ratio_table
from src.training import train_objective

logger = logging.getLogger(__name__)

OBJECTIVE_ROSTER = (
    Objective.MLM_PRETRAIN,
    Objective.DISCO_STYLE,
    Objective.RECON_BASELINE,
    Objective.TRADES_PIXEL,
    Objective.TRADES_LATENT,
    Objective.MAEP,
)

PATCH_SIZES = (2, 4, 8)
MASK_RATIOS = (0.0, 0.25, 0.5, 0.75)


class AblationRunner:
    """Train and evaluate config variants against one dataset and one frozen classifier"""

    def __init__(self, config: RunConfig, classifier: ClassifierHandle, handle: DatasetHandle,
                 out_dir: Union[str, Path], database: Optional[Database] = None,
                 device: Optional[torch.device] = None):
        """Initialize ablation runner"""
        self.config = config
        self.classifier = classifier
        self.handle = handle
        self.out_dir = Path(out_dir)
        self.database = database
        self.device = device or torch.device("cpu")

    def run_variant(self, name: str, updates: Dict[str, object]) -> EvalReport:
        """Train one variant from scratch and evaluate it under the eval attack"""
        config = derive_config(self.config, updates)
        torch.manual_seed(config.train.seed)
        model = build_purifier(config.model, device=self.device)
        run_dir = self.out_dir / name
        train_objective(config, model, self.classifier, self.handle, run_dir, self.database, self.device)
        report = eval_defense(self.classifier, model, self.handle, config.eval.attack, config.eval,
                              defense=name, device=self.device)
        report.config_fingerprint = config.fingerprint()
        if self.database is not None:
            self.database.store_report(report)
        atomic_write_json(run_dir / "report.json", report.to_dict())
        logger.info(f"Variant {name}: clean={report.clean_acc:.2f} robust={report.robust_acc:.2f}")
        return report

    def run_objectives(self, objectives: Sequence[Objective] = OBJECTIVE_ROSTER
                       ) -> List[Tuple[str, EvalReport]]:
        """Every roster objective on identical data, classifier and budget"""
        masked_ratio = self.config.train.mask_ratio or 0.5
        results = []
        for objective in objectives:
            ratio = masked_ratio if objective.uses_mask else 0.0
            updates = {"train.objective": objective.value, "train.mask_ratio": ratio}
            if objective == Objective.MLM_PRETRAIN:
                updates["train.mlm_finetune_epochs"] = self.config.train.mlm_finetune_epochs
            results.append((objective.value, self.run_variant(f"objective_{objective.value}", updates)))
        atomic_write_text(self.out_dir / "ablation_objectives.txt", render_objective_table(results))
        atomic_write_json(self.out_dir / "ablation_objectives.json",
                          {name: r.to_dict() for name, r in results})
        return results

    def run_patch_ratio(self, patch_sizes: Sequence[int] = PATCH_SIZES,
                        ratios: Sequence[float] = MASK_RATIOS) -> Dict[Tuple[int, float], EvalReport]:
        """Grid over patch size and masking ratio; r = 0 cells train the unmasked purification loss"""
        grid: Dict[Tuple[int, float], EvalReport] = {}
        for ps in patch_sizes:
            for r in ratios:
                objective = Objective.MAEP if r > 0 else Objective.DISCO_STYLE
                updates = {"model.patch_size": ps, "train.objective": objective.value,
                           "train.mask_ratio": r}
                grid[(ps, r)] = self.run_variant(f"ps{ps}_r{r:g}", updates)
        atomic_write_text(self.out_dir / "ablation_patch_ratio.txt", render_patch_ratio_table(grid))
        atomic_write_json(self.out_dir / "ablation_patch_ratio.json",
                          {f"ps={ps},r={r:g}": rep.to_dict() for (ps, r), rep in grid.items()})
        return grid

    def run_distance(self, kinds: Sequence[DistanceKind] = (DistanceKind.L1_MEAN, DistanceKind.MSE)
                     ) -> List[Tuple[str, EvalReport]]:
        """MAEP with each distance measure"""
        ratio = self.config.train.mask_ratio or 0.5
        results = []
        for kind in kinds:
            updates = {"train.objective": Objective.MAEP.value, "train.mask_ratio": ratio,
                       "train.distance": kind.value}
            results.append((f"maep[{kind.value}]", self.run_variant(f"distance_{kind.value}", updates)))
        atomic_write_text(self.out_dir / "ablation_distance.txt", render_objective_table(results))
        atomic_write_json(self.out_dir / "ablation_distance.json",
                          {name: r.to_dict() for name, r in results})
        return results
