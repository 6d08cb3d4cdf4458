"""
This file contains the command-line entry point of the SSM lab.

    ssmlab run <scenario> [--config file] [--set dotted.key=value]... [--out dir]
    ssmlab validate <file>
    ssmlab list

Exit codes: 0 all acceptance thresholds met, 1 threshold failure, 2 execution error.
"""

import argparse
import glob
import importlib
import logging
import os.path
import sys
from pathlib import Path

from field_core import SsmLabException
from ssmlab_models import (ConfigValidationException, ScenarioConfig, ScenarioReport, apply_override,
                           config_errors, config_from_dict, merge_documents, read_document)

logger = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).resolve().parent / "scenarios"
DEFAULT_SEED = 0
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2


def discover_scenarios() -> dict:
    """
    Loads every scenario plugin of the scenarios package.

    The module name must be the class name.

    Returns:
        dict: scenario name -> scenario class.
    """
    registry = {}
    for path in sorted(glob.glob(str(SCENARIO_DIR / "*.py"))):
        module_name = os.path.basename(path).split(".")[0]
        if module_name.startswith("_"):
            continue
        scenario = getattr(importlib.import_module(f"scenarios.{module_name}"), module_name)
        registry[scenario.name] = scenario
    return registry


def list_scenarios() -> list[tuple[str, str]]:
    """ (name, description) of every scenario, sorted by name """
    return [(name, scenario.description) for name, scenario in sorted(discover_scenarios().items())]


def build_config(name: str, config_path=None, overrides=()) -> ScenarioConfig:
    """
    Layers scenario defaults < config file < --set overrides into a validated config.
    The default seed only applies without a config file, where the seed is mandatory.

    Raises:
        ConfigValidationException: Unknown scenario or invalid document.
    """
    registry = discover_scenarios()
    if name not in registry:
        raise ConfigValidationException([f"scenario: unknown scenario {name!r}, expected one of {sorted(registry)}"])
    document = merge_documents({"scenario": name}, registry[name].defaults)
    if config_path is None:
        document["seed"] = DEFAULT_SEED
    else:
        loaded = read_document(config_path)
        if not isinstance(loaded, dict) or "seed" not in loaded:
            raise ConfigValidationException([f"{config_path}: seed: missing (mandatory)"])
        document = merge_documents(document, loaded)
        if document.get("scenario") != name:
            raise ConfigValidationException(
                [f"scenario: config file is for {document.get('scenario')!r}, not {name!r}"])
    for assignment in overrides:
        document = apply_override(document, assignment)
    return config_from_dict(document)


def validate_config(path) -> list[str]:
    """ Named errors of a config file, empty when it is valid; never runs a simulation """
    try:
        document = read_document(path)
    except ConfigValidationException as error:
        return error.errors
    errors = config_errors(document)
    name = document.get("scenario") if isinstance(document, dict) else None
    if isinstance(name, str) and name not in discover_scenarios():
        errors.append(f"scenario: unknown scenario {name!r}")
    return errors


def run_scenario(config: ScenarioConfig, out_dir=None) -> ScenarioReport:
    """
    Runs the scenario a config names.

    Raises:
        ScenarioStageException: A stage failed, the stage is named.
    """
    registry = discover_scenarios()
    if config.scenario not in registry:
        raise ConfigValidationException([f"scenario: unknown scenario {config.scenario!r}"])
    return registry[config.scenario]().run(config, out_dir)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmlab", description="Spatial spin-wave modulator lab")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one scenario")
    run.add_argument("scenario")
    run.add_argument("--config", help="JSON configuration file")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override one dotted key, e.g. camera.gain=3.0")
    run.add_argument("--out", help="output directory (config output_dir by default)")

    validate = commands.add_parser("validate", help="check a configuration file")
    validate.add_argument("config")

    commands.add_parser("list", help="list the scenarios")
    return parser


def main(argv=None) -> int:
    arguments = _parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, arguments.log_level), format=LOG_FORMAT)

    if arguments.command == "list":
        for name, description in list_scenarios():
            print(f"{name:20s} {description}")
        return EXIT_OK

    if arguments.command == "validate":
        errors = validate_config(arguments.config)
        for error in errors:
            print(error)
        if not errors:
            print(f"{arguments.config}: ok")
        return EXIT_ERROR if errors else EXIT_OK

    try:
        config = build_config(arguments.scenario, arguments.config, arguments.overrides)
        report = run_scenario(config, arguments.out)
    except ConfigValidationException as error:
        for message in error.errors:
            logger.error(message)
        return EXIT_ERROR
    except SsmLabException as error:
        logger.error("%s", error)
        return EXIT_ERROR
    except Exception:
        logger.exception("scenario %s: unexpected error", arguments.scenario)
        return EXIT_ERROR
    for metric in report.metrics:
        if not metric.passed:
            logger.warning("threshold failure: %s = %.4g outside [%s, %s] %s", metric.name, metric.value,
                           metric.low, metric.high, metric.source)
    return EXIT_OK if report.passed else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
