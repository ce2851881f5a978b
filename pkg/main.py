import argparse
import sys
from pathlib import Path
from typing import List, Optional

import torch
from dotenv import load_dotenv

from src.config import (
    Ablation,
    Method,
    PipelineConfig,
    Stage,
    apply_overrides,
    load_pipeline_config,
    save_pipeline_config,
    settings,
)
from src.exceptions import RaMoeError
from src.logger import setup_logger
from src.pipeline import RaMoePipeline
from src.taxonomy import Judge


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ra-moe",
        description="Routing-aligned fine-tuning of a toy mixture-of-experts language model",
    )
    parser.add_argument("--config", type=Path, help="Pipeline configuration JSON")
    parser.add_argument(
        "--stage",
        default="all",
        choices=[s.value for s in Stage] + ["all", "write-config"],
        help="Stage to run; 'all' runs the configured stage list",
    )
    parser.add_argument("--seed", type=int, help="Seed for corpus, pretraining and fine-tuning")
    parser.add_argument("--lambda", dest="lambda_align", type=float, help="Alignment weight")
    parser.add_argument("--k-experts", type=int, help="Task experts per middle layer")
    parser.add_argument(
        "--ablate",
        action="append",
        default=[],
        choices=[a.value for a in Ablation],
        help="Ablation switch (repeatable)",
    )
    parser.add_argument("--steer-delta", type=float, help="Router-logit offset for steering")
    parser.add_argument("--method", choices=[m.value for m in Method])
    parser.add_argument("--judge", choices=[j.value for j in Judge])
    parser.add_argument("--out", type=Path, help="Run directory")
    parser.add_argument(
        "--run",
        action="append",
        default=[],
        help="Run name for finetune/eval; repeat to choose the runs a report compares",
    )
    parser.add_argument(
        "--expert-map", help="Task-expert map to transfer instead of re-identifying"
    )
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_pipeline_config(args.config) if args.config else PipelineConfig()
    config = apply_overrides(
        config,
        seed=args.seed if args.seed is not None or args.config else settings.default_seed,
        lambda_align=args.lambda_align,
        k_experts=args.k_experts,
        ablations=[Ablation(a) for a in args.ablate],
        steer_delta=args.steer_delta,
        method=Method(args.method) if args.method else None,
        judge=Judge(args.judge) if args.judge else None,
        expert_map_path=args.expert_map,
        run_name=args.run[0] if len(args.run) == 1 else None,
    )
    if args.run:
        config = config.model_copy(update={"report_runs": list(args.run)})
    return config


def main(argv: Optional[List[str]] = None) -> int:
    """Run the requested pipeline stage.

    Returns:
        Exit code (0 for success, 1 for error)
    """
    load_dotenv()
    logger = setup_logger(level=settings.log_level, log_file=settings.log_file)
    torch.set_num_threads(settings.torch_num_threads)
    args = build_parser().parse_args(argv)

    try:
        config = resolve_config(args)
        out = args.out or Path(settings.runs_dir)
        if args.stage == "write-config":
            path = save_pipeline_config(config, out / "config.json")
            logger.info(f"Wrote configuration to {path}")
            return 0

        pipeline = RaMoePipeline(config, out)
        if args.stage == "all":
            paths = pipeline.run()
        else:
            paths = [pipeline.run_stage(Stage(args.stage))]
        for path in paths:
            logger.info(f"Output: {path}")
        return 0

    except RaMoeError as e:
        logger.error(f"Pipeline error: {e}")
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 1
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
