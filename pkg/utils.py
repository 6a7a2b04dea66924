# (c) 2024 Niels Provos
#

import csv
import io
import shutil
import time
from functools import wraps
from pathlib import Path

import numpy as np
import orjson


def timeit(func):
    @wraps(func)
    def timeit_wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        end_time = time.perf_counter()
        total_time_ms = (end_time - start_time) * 1000.0
        print(
            f'Function {func.__name__} took {total_time_ms:.1f} ms')
        return result
    return timeit_wrapper


def split_seed(master_seed, index):
    """
    Derives an independent child seed from a master seed and an index.

    The derivation is counter based: the child for index i depends only on
    (master_seed, i), so children can be generated in any order or in parallel.

    Args:
        master_seed (int): The master seed.
        index (int): The index of the child stream.

    Returns:
        int: A 64-bit child seed.
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed, *keys):
    """Returns a numpy Generator for a seed and an optional counter path."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(seq)


def canonical_json(data):
    """Serializes data to canonical JSON bytes (sorted keys, 2-space indent)."""
    return orjson.dumps(
        data, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY)


def load_json(data):
    return orjson.loads(data)


def write_bytes_atomic(file_path, data):
    """
    Writes bytes to a file through a temporary file and a backup of the old file.

    Args:
        file_path (str or Path): The destination file.
        data (bytes): The payload.
    """
    file_path = Path(file_path)
    temp_file = file_path.with_suffix(file_path.suffix + '.tmp')
    backup_file = file_path.with_suffix(file_path.suffix + '.bak')

    try:
        with open(temp_file, 'wb') as file:
            file.write(data)

        if file_path.exists():
            shutil.move(file_path, backup_file)

        shutil.move(temp_file, file_path)

        if backup_file.exists():
            backup_file.unlink()

    except Exception as e:
        if temp_file.exists():
            temp_file.unlink()
        if backup_file.exists() and not file_path.exists():
            shutil.move(backup_file, file_path)
        raise e


def csv_bytes(header, rows):
    """Formats rows as CSV bytes with '\\n' line endings."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue().encode('utf-8')


def format_float(value, digits=6):
    """Formats a float for reports; None becomes an empty cell."""
    if value is None:
        return ''
    return f'{value:.{digits}f}'
