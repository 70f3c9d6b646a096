"""Command-line surface: one subcommand per pipeline stage"""
import argparse
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from src.ablation import AblationRunner
from src.attacks import ClassifierHandle
from src.checkpoint import load_checkpoint
from src.classifier import load_classifier, save_classifier, train_classifier
from src.config_manager import ConfigurationManager, RunConfig
from src.data_pipeline import DatasetHandle, load_from_config, make_adv_pairs
from src.database import Database
from src.error_handler import EXIT_OK, ErrorHandler
from src.evaluation import eval_defense, transfer_eval, verify_purification_direction
from src.logging_config import setup_logging
from src.models import TransferSpec
from src.purifier import build_purifier
from src.report import write_conjecture, write_report
from src.training import Trainer, resolve_device

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    """Everything a subcommand needs, built once from the validated configuration"""
    manager: ConfigurationManager
    config: RunConfig
    out_dir: Path
    database: Database
    device: torch.device

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunContext":
        manager = ConfigurationManager(config_file=args.config, overrides=args.set)
        config = manager.config
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        setup_logging(config.log_level, log_dir=str(out_dir / "logs"))
        manager.echo(str(out_dir))
        db_url = os.getenv("DATABASE_URL", f"sqlite:///{out_dir / 'results.db'}")
        return cls(manager, config, out_dir, Database(db_url), resolve_device(config.device))


def _classifier_for(ctx: RunContext, handle: DatasetHandle, path: Optional[str],
                    default_name: str = "classifier.safetensors") -> ClassifierHandle:
    """Load the configured classifier, or train and store one next to the run"""
    candidate = Path(path) if path else ctx.out_dir / default_name
    if candidate.exists():
        return load_classifier(candidate, expected_classes=handle.num_classes, device=ctx.device)
    logger.info(f"No classifier at {candidate}; training one on {handle.tag}")
    classifier = train_classifier(handle, epochs=ctx.config.data.classifier_epochs,
                                  seed=ctx.config.train.seed, device=ctx.device,
                                  progress=ctx.config.train.progress)
    save_classifier(classifier, candidate)
    return classifier


def cmd_train_classifier(ctx: RunContext) -> Path:
    handle = load_from_config(ctx.config.data)
    classifier = train_classifier(handle, epochs=ctx.config.data.classifier_epochs,
                                  seed=ctx.config.train.seed, device=ctx.device,
                                  progress=ctx.config.train.progress)
    path = Path(ctx.config.data.classifier_path or ctx.out_dir / "classifier.safetensors")
    save_classifier(classifier, path)
    x, y = handle.tensors("test")
    with torch.no_grad():
        acc = 100.0 * (classifier(x.to(ctx.device)).argmax(dim=1).cpu() == y).float().mean().item()
    logger.info(f"Classifier clean test accuracy: {acc:.2f}%")
    return path


def cmd_pretrain(ctx: RunContext, resume: bool = False) -> Path:
    """Train the configured objective from scratch and write its checkpoint"""
    handle = load_from_config(ctx.config.data)
    classifier = _classifier_for(ctx, handle, ctx.config.data.classifier_path)
    torch.manual_seed(ctx.config.train.seed)
    model = build_purifier(ctx.config.model, device=ctx.device)
    trainer = Trainer(ctx.config, model, classifier, handle, ctx.out_dir, ctx.database, ctx.device)
    trainer.pretrain(resume=resume)
    return trainer.save(f"{ctx.config.train.objective.value}.safetensors")


def cmd_finetune(ctx: RunContext, checkpoint: str) -> Path:
    """Decoder finetuning at r = 0 on top of a pretrained checkpoint"""
    model, metadata = load_checkpoint(checkpoint, expected_config=ctx.config.model, device=ctx.device)
    handle = load_from_config(ctx.config.data)
    classifier = _classifier_for(ctx, handle, ctx.config.data.classifier_path)
    trainer = Trainer(ctx.config, model, classifier, handle, ctx.out_dir, ctx.database, ctx.device)
    trainer.state.step = metadata.step
    trainer.finetune()
    return trainer.save(f"finetune_{ctx.config.train.finetune_mode.value}.safetensors", finetuned=True)


def cmd_gen_adv(ctx: RunContext) -> Path:
    """Precompute the fingerprinted adversarial pair cache"""
    handle = load_from_config(ctx.config.data)
    classifier = _classifier_for(ctx, handle, ctx.config.data.classifier_path)
    cache_dir = Path(ctx.config.data.cache_dir or ctx.out_dir / "adv_cache")
    count = sum(1 for _ in make_adv_pairs(handle, classifier, ctx.config.attack, cache_dir=cache_dir,
                                          batch_size=ctx.config.train.batch_size,
                                          max_batches=ctx.config.train.max_steps_per_epoch,
                                          device=ctx.device))
    logger.info(f"{count} adversarial batches available in {cache_dir}")
    return cache_dir


def cmd_eval(ctx: RunContext, checkpoint: Optional[str] = None) -> Path:
    """Clean/robust accuracy of the classifier, defended when a checkpoint is given"""
    handle = load_from_config(ctx.config.data)
    classifier = _classifier_for(ctx, handle, ctx.config.data.classifier_path)
    purifier = None
    defense = "none"
    if checkpoint:
        purifier, metadata = load_checkpoint(checkpoint, device=ctx.device)
        defense = Path(checkpoint).stem
    report = eval_defense(classifier, purifier, handle, ctx.config.eval.attack, ctx.config.eval,
                          defense=defense, device=ctx.device, progress=ctx.config.train.progress)
    report.config_fingerprint = ctx.config.fingerprint()
    ctx.database.store_report(report)
    return write_report(report, ctx.out_dir, f"eval_{defense}")


def cmd_verify(ctx: RunContext, checkpoint: str) -> Path:
    """Compare c(P(x_a)), c(P(x)) and c(x - delta_a)"""
    purifier, _ = load_checkpoint(checkpoint, device=ctx.device)
    handle = load_from_config(ctx.config.data)
    classifier = _classifier_for(ctx, handle, ctx.config.data.classifier_path)
    report = verify_purification_direction(
        classifier, purifier, handle, ctx.config.eval.attack, split=ctx.config.eval.split,
        batch_size=ctx.config.eval.batch_size, max_batches=ctx.config.eval.max_batches, device=ctx.device,
    )
    return write_conjecture(report, ctx.out_dir)


def cmd_transfer_eval(ctx: RunContext, checkpoint: str) -> Path:
    """Evaluate a purifier on the configured target dataset and resolution"""
    purifier, metadata = load_checkpoint(checkpoint, device=ctx.device)
    target = load_from_config(ctx.config.data, target=True)
    classifier = _classifier_for(ctx, target, ctx.config.data.target_classifier_path,
                                 default_name=f"classifier_{target.tag}.safetensors")
    spec = TransferSpec(train_tag=metadata.dataset, test_tag=target.tag,
                        policy=ctx.config.data.resolution_policy)
    report = transfer_eval(purifier, spec, classifier, target, ctx.config.eval.attack,
                           tuple(metadata.config.input_hw), ctx.config.eval, device=ctx.device)
    report.config_fingerprint = ctx.config.fingerprint()
    ctx.database.store_report(report)
    return write_report(report, ctx.out_dir, f"transfer_{spec.train_tag}_to_{spec.test_tag}_{spec.policy.value}")


def cmd_ablate(ctx: RunContext, kind: str) -> Path:
    handle = load_from_config(ctx.config.data)
    classifier = _classifier_for(ctx, handle, ctx.config.data.classifier_path)
    runner = AblationRunner(ctx.config, classifier, handle, ctx.out_dir / "ablation", ctx.database, ctx.device)
    if kind == "objectives":
        runner.run_objectives()
        return runner.out_dir / "ablation_objectives.txt"
    if kind == "patch-ratio":
        runner.run_patch_ratio()
        return runner.out_dir / "ablation_patch_ratio.txt"
    runner.run_distance()
    return runner.out_dir / "ablation_distance.txt"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Masked AutoEncoder Purifier: adversarial purification toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.getenv("CONFIG_FILE"),
                        help="JSON run configuration (defaults to $CONFIG_FILE)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a configuration key by dotted path, e.g. train.epochs=5")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-classifier", parents=[common], help="Train the reference classifier")
    pretrain = sub.add_parser("pretrain", parents=[common], help="Train the purifier objective")
    pretrain.add_argument("--resume", action="store_true", help="Continue from train_state.pt")
    for name, help_text in (("finetune", "Decoder finetuning at r=0"),
                            ("verify", "Purification-direction check"),
                            ("transfer-eval", "Cross-dataset / cross-resolution evaluation")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint", required=True)
    sub.add_parser("gen-adv", parents=[common], help="Precompute adversarial training pairs")
    evaluate = sub.add_parser("eval", parents=[common], help="Clean/robust accuracy report")
    evaluate.add_argument("--checkpoint", default=None, help="Purifier checkpoint; omit for no defense")
    ablate = sub.add_parser("ablate", parents=[common], help="Run an ablation grid")
    ablate.add_argument("--kind", choices=("objectives", "patch-ratio", "distance"), required=True)
    return parser


def dispatch(ctx: RunContext, args: argparse.Namespace) -> Path:
    command = args.command
    if command == "train-classifier":
        return cmd_train_classifier(ctx)
    if command == "pretrain":
        return cmd_pretrain(ctx, resume=args.resume)
    if command == "finetune":
        return cmd_finetune(ctx, args.checkpoint)
    if command == "gen-adv":
        return cmd_gen_adv(ctx)
    if command == "eval":
        return cmd_eval(ctx, args.checkpoint)
    if command == "verify":
        return cmd_verify(ctx, args.checkpoint)
    if command == "transfer-eval":
        return cmd_transfer_eval(ctx, args.checkpoint)
    return cmd_ablate(ctx, args.kind)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and map failures to exit codes"""
    args = build_parser().parse_args(list(argv) if argv is not None else None)
    handler = ErrorHandler(actor=args.command)
    try:
        ctx = RunContext.from_args(args)
        output = dispatch(ctx, args)
        logger.info(f"{args.command} finished: {output}")
        print(output)
        return EXIT_OK
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130
    except Exception as e:
        return handler.handle_error(e, context=" ".join(_describe(args)))


def _describe(args: argparse.Namespace) -> List[str]:
    parts = [args.command]
    if args.config:
        parts.append(f"config={args.config}")
    if getattr(args, "checkpoint", None):
        parts.append(f"checkpoint={args.checkpoint}")
    return parts
