import json
import logging
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from .errors.errors import GCalcError
from .models.builtins import list_builtins
from .routers import gexp, ldp_router
from .routers.router import ExperimentRegistry, version
from .session import runtime_settings

logger = logging.getLogger(__name__)

registry = ExperimentRegistry()
registry.include_router(gexp.router)
registry.include_router(ldp_router.router)


def configure_logging():
    logging.basicConfig(
        level=runtime_settings.log_level(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)


def api_error_response(exc: GCalcError) -> dict:
    return {
        "mssg": exc.description,
        "details": str(exc),
        "version": version
    }


def validation_error_response(exc: ValidationError) -> dict:
    errors = []
    for error in exc.errors():
        error_detail = {
            "location": list(error["loc"]),
            "message": error["msg"],
            "type": error["type"]
        }
        errors.append(error_detail)
    return {
        "mssg": "Validation Error",
        "details": errors,
        "version": version
    }


@click.group(name="g-calc")
@click.version_option(version, prog_name="g-calc")
def cli():
    configure_logging()


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=click.IntRange(min=0), help="Override the config seed.")
@click.option("--workers", type=click.IntRange(min=1), help="Cap on worker threads.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
@click.pass_context
def run(ctx: click.Context, config: Path, seed, workers, out):
    """Run the experiment described by CONFIG."""
    try:
        summary = registry.run(config, seed=seed, workers=workers, out=out)
    except ValidationError as exc:
        click.echo(json.dumps(validation_error_response(exc)), err=True)
        ctx.exit(2)
    except GCalcError as exc:
        logger.error("%s: %s", exc.description, exc)
        click.echo(json.dumps(api_error_response(exc)), err=True)
        ctx.exit(exc.code)
    click.echo(str(summary))


@cli.command(name="list-builtins")
def list_builtins_command():
    """Print the named functionals, flows and events."""
    click.echo(list_builtins())


if __name__ == "__main__":
    cli()
