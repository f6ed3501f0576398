from core.utils import write_csv, write_json


def parse_list(value, cast=float):
    """'16,64,256' -> [16, 64, 256]."""
    if value is None or value == '':
        return None
    return [cast(item) for item in str(value).split(',') if item.strip()]


def write_result(result, out_dir):
    """Write <kind>.csv and summary.json for an experiment result."""
    csv_path = write_csv(out_dir / f'{result.kind}.csv', result.header, result.rows)
    write_json(out_dir / 'summary.json', {'kind': result.kind, **result.summary})
    return csv_path
