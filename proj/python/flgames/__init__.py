"""Python bindings for the flgames simulator."""

import json

from ._flgames import (
    Config,
    FlgamesError,
    check_gradients,
    load_config,
    oscillation_metrics,
    parse_config,
    run_single,
    synth_sem,
    verify,
)
from ._flgames import run_experiment as _run_experiment


def run_experiment(config):
    """Run every repeat of `config`, write artifacts and return the summary dict."""
    return json.loads(_run_experiment(config))


__all__ = [
    "Config",
    "FlgamesError",
    "check_gradients",
    "load_config",
    "oscillation_metrics",
    "parse_config",
    "run_experiment",
    "run_single",
    "synth_sem",
    "verify",
]
