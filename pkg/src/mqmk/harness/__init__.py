from .config import DEFAULT_CONFIG, ConfigError, ExperimentConfig, PretrainConfig, load_config, parse_config
from .runner import (
    ABLATION_AXES,
    RunResult,
    aggregate,
    axis_values,
    build_stream,
    cmd_ablate,
    cmd_cost,
    cmd_pretrain,
    cmd_report,
    cmd_run,
    dumps,
    load_backbone,
    run_continual,
    variant,
)

__all__ = [
    "ABLATION_AXES", "DEFAULT_CONFIG", "ConfigError", "ExperimentConfig", "PretrainConfig", "RunResult",
    "aggregate", "axis_values", "build_stream", "cmd_ablate", "cmd_cost", "cmd_pretrain", "cmd_report",
    "cmd_run", "dumps", "load_backbone", "load_config", "parse_config", "run_continual", "variant",
]
