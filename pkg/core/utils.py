import csv
import json
import logging
import math
import shutil
from pathlib import Path

import numpy as np
from django.conf import settings
from django.db import DatabaseError
from django.utils import timezone

from mfg_lab import __version__
from core.models import RunManifest

logger = logging.getLogger(__name__)


def resolve_output_dir(out, command):
    """Return the output directory for a run, creating it."""
    if out:
        path = Path(out)
    else:
        stamp = timezone.now().strftime('%Y%m%dT%H%M%S')
        path = Path(settings.MFG_OUTPUT_DIR) / f"{command}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def to_jsonable(value):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path, payload):
    path = Path(path)
    with path.open('w', encoding='utf-8') as fh:
        json.dump(to_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write('\n')
    return path


def read_json(path):
    with Path(path).open('r', encoding='utf-8') as fh:
        return json.load(fh)


def format_number(value):
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), '.17g')
    return str(value)


def write_csv(path, header, rows):
    """Write rows with a fixed header; floats use '%.17g' so reruns are byte-identical."""
    path = Path(path)
    with path.open('w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(col, '') for col in header]
            writer.writerow([format_number(v) for v in row])
    return path


def build_manifest(command, spec_path, overrides, seed, output_dir, kind=''):
    return {
        'command': command,
        'kind': kind,
        'spec_path': str(spec_path),
        'overrides': to_jsonable(overrides),
        'seed': seed,
        'output_dir': str(output_dir),
        'tool_version': __version__,
        'timestamp': timezone.now().isoformat(),
    }


def prepare_run(command, spec_path, overrides, seed, out, kind=''):
    """Create the output directory, copy the input file and write manifest.json."""
    output_dir = resolve_output_dir(out, command)
    spec_path = Path(spec_path)
    shutil.copyfile(spec_path, output_dir / f"input{spec_path.suffix or '.json'}")
    manifest = build_manifest(command, spec_path, overrides, seed, output_dir, kind=kind)
    write_json(output_dir / 'manifest.json', manifest)
    return output_dir, manifest


def save_run(manifest, status, summary):
    """Persist the manifest to the run ledger; returns None when the ledger is unavailable."""
    if not settings.MFG_RECORD_RUNS:
        return None
    try:
        run = RunManifest.objects.create(
            command=manifest['command'],
            kind=manifest.get('kind', ''),
            spec_path=manifest['spec_path'],
            overrides=manifest['overrides'],
            seed=manifest['seed'],
            output_dir=manifest['output_dir'],
            tool_version=manifest['tool_version'],
            status=status,
            summary=to_jsonable(summary),
        )
    except DatabaseError as exc:
        logger.warning("run ledger unavailable, manifest not persisted: %s", exc)
        return None
    return run
