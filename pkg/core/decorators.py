import json
import logging
from functools import wraps
from pathlib import Path

from django.core.management.base import CommandError
from rest_framework.exceptions import ValidationError

from core.exceptions import MFGError, NumericalError, SpecError
from core.utils import write_json

logger = logging.getLogger(__name__)


def _write_error(options, payload):
    out = options.get('out')
    if not out:
        return
    try:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        write_json(path / 'error.json', payload)
    except OSError as exc:
        logger.warning("could not write error.json: %s", exc)


def command_errors(handle):
    """Map library errors raised by a command to CommandError exit codes.

    Input and IO problems exit with 1, numerical failures with 2; both leave
    an error.json in the output directory when one was requested.
    """
    @wraps(handle)
    def wrapper(self, *args, **options):
        try:
            return handle(self, *args, **options)
        except CommandError:
            raise
        except NumericalError as exc:
            _write_error(options, exc.to_dict())
            raise CommandError(exc.message, returncode=2) from exc
        except SpecError as exc:
            _write_error(options, exc.to_dict())
            raise CommandError(exc.message, returncode=1) from exc
        except MFGError as exc:
            _write_error(options, exc.to_dict())
            raise CommandError(exc.message, returncode=exc.exit_code) from exc
        except ValidationError as exc:
            payload = {'code': 'invalid_input', 'message': 'input failed validation', 'detail': exc.detail}
            _write_error(options, payload)
            raise CommandError(f"invalid input: {exc.detail}", returncode=1) from exc
        except (OSError, json.JSONDecodeError) as exc:
            payload = {'code': 'io_error', 'message': str(exc), 'detail': {}}
            _write_error(options, payload)
            raise CommandError(str(exc), returncode=1) from exc
    return wrapper
