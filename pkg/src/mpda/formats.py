"""File formats: fields, observations, configuration, diagnostics and images.

Field file::

    MPDA1
    nx ny dx dy boundary
    <nx * ny little-endian float64 values, row-major>

Observation file, one record per line, ``#`` starting a comment::

    # grid nx ny dx dy boundary
    i j value variance

The optional ``# grid`` comment records the grid of the observations.
``i`` and ``j`` may be fractional; a record snaps to the nearest node.
Floats are written with ``repr`` so that every file round-trips exactly.
"""

import math
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .graph import ObservationError, ObservationSet
from .grid import Boundary, GridSizeError, GridSpec, node_coordinates
from .oracle import Field, FieldError
from .utils import MPDAError

PathLike = Union[str, Path]

MAGIC = b'MPDA1'
GRID_COMMENT = 'grid'
MID_GRAY = 128


class FormatError(MPDAError, ValueError):
    """Raised for a malformed file; the message names the file."""
    pass


def _grid_fields(g: GridSpec) -> str:
    return f'{g.nx} {g.ny} {g.dx!r} {g.dy!r} {g.boundary.value}'


def _parse_grid(tokens: list, path: PathLike) -> GridSpec:
    if len(tokens) != 5:
        raise FormatError(f"{path}: grid header needs 'nx ny dx dy boundary', got {' '.join(tokens)!r}")
    try:
        return GridSpec(int(tokens[0]), int(tokens[1]), float(tokens[2]), float(tokens[3]), Boundary(tokens[4]))
    except (ValueError, GridSizeError) as exc:
        raise FormatError(f"{path}: invalid grid header: {exc}") from exc


def _read_lines(path: PathLike, encoding: str = 'utf-8') -> list[str]:
    try:
        return Path(path).read_text(encoding=encoding).splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not a text file") from exc


def write_field(path: PathLike, field: Field):
    header = f'{_grid_fields(field.grid)}\n'.encode('ascii')
    with open(path, 'wb') as stream:
        stream.write(MAGIC + b'\n')
        stream.write(header)
        stream.write(field.values.astype('<f8').tobytes())


def read_field(path: PathLike) -> Field:
    """Read a field file.

    Raises:
        FormatError: On a bad magic string, header or value count.
        OSError: If the file cannot be read.
    """
    with open(path, 'rb') as stream:
        if stream.readline().rstrip(b'\n') != MAGIC:
            raise FormatError(f"{path}: not a field file (missing {MAGIC.decode()} magic)")
        try:
            tokens = stream.readline().decode('ascii').split()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: unreadable header") from exc
        grid = _parse_grid(tokens, path)
        payload = stream.read()
    if len(payload) != 8 * grid.n:
        raise FormatError(f"{path}: expected {grid.n} values, found {len(payload) / 8:g}")
    try:
        return Field(grid, np.frombuffer(payload, dtype='<f8').astype(float))
    except FieldError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_observations(path: PathLike, g: GridSpec, obs: ObservationSet):
    i, j = node_coordinates(g)
    lines = [f'# {GRID_COMMENT} {_grid_fields(g)}', '# i j value variance']
    for index, value, variance in zip(obs.index, obs.value, obs.variance):
        lines.append(f'{i[index]} {j[index]} {float(value)!r} {float(variance)!r}')
    Path(path).write_text('\n'.join(lines) + '\n', encoding='ascii')


def read_observations(path: PathLike, g: Optional[GridSpec] = None) -> tuple[GridSpec, ObservationSet]:
    """Read an observation file.

    The grid comes from the ``# grid`` comment when present, else from `g`.
    Coordinates snap to the nearest node, see
    :meth:`mpda.graph.ObservationSet.from_coordinates`.

    Raises:
        FormatError: On malformed records, records outside the grid or a
            file without a grid when `g` is omitted.
    """
    records = []
    for number, line in enumerate(_read_lines(path, 'ascii'), start=1):
        text = line.strip()
        if text.startswith('#'):
            tokens = text[1:].split()
            if tokens and tokens[0] == GRID_COMMENT:
                g = _parse_grid(tokens[1:], path)
            continue
        if not text:
            continue
        tokens = text.split()
        try:
            if len(tokens) != 4:
                raise ValueError(f"expected 4 columns, got {len(tokens)}")
            record = tuple(float(token) for token in tokens)
            if not all(math.isfinite(number) for number in record[:2]):
                raise ValueError("non-finite coordinate")
            records.append(record)
        except ValueError as exc:
            raise FormatError(f"{path}:{number}: {exc}") from exc
    if g is None:
        raise FormatError(f"{path}: no grid comment and no grid given")
    if not records:
        return g, ObservationSet.empty()
    i, j, value, variance = (np.array(column) for column in zip(*records))
    try:
        return g, ObservationSet.from_coordinates(g, i, j, value, variance)
    except ObservationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_config(path: PathLike) -> dict[str, str]:
    """``key=value`` lines, ``#`` comments and blank lines ignored."""
    config = {}
    for number, line in enumerate(_read_lines(path), start=1):
        text = line.split('#', 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition('=')
        if not sep or not key.strip():
            raise FormatError(f"{path}:{number}: expected key=value, got {line.strip()!r}")
        config[key.strip().replace('-', '_')] = value.strip()
    return config


def write_diagnostics(path: PathLike, record: dict):
    """One ``key: value`` line per entry, in insertion order."""
    lines = [f'{key}: {value}' for key, value in record.items()]
    Path(path).write_text('\n'.join(lines) + '\n')


def read_diagnostics(path: PathLike) -> dict[str, str]:
    record = {}
    for line in _read_lines(path):
        key, sep, value = line.partition(': ')
        if sep:
            record[key] = value
    return record


def gray_levels(values: np.ndarray) -> np.ndarray:
    """Min-max normalized 8-bit levels; a constant field maps to mid gray."""
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        return np.full(values.shape, MID_GRAY, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255).astype(np.uint8)


def diverging_colors(values: np.ndarray) -> np.ndarray:
    """Blue-white-red RGB triples, white at zero and saturated at the largest magnitude."""
    scale = float(np.max(np.abs(values)))
    t = values / scale if scale > 0 else np.zeros_like(values)
    fade = np.rint(255 * (1 - np.abs(t))).astype(np.uint8)
    full = np.full(values.shape, 255, dtype=np.uint8)
    red = np.where(t < 0, fade, full)
    blue = np.where(t > 0, fade, full)
    return np.stack([red, fade, blue], axis=-1)


def render(path: PathLike, field: Field, mode: str = 'gray'):
    """Write `field` as a binary PGM (``gray``) or PPM (``diverging``) image.

    The first grid row is the top image row; the image is ``nx`` by ``ny`` pixels.
    """
    values = field.as_array()
    if mode == 'gray':
        magic, pixels = b'P5', gray_levels(values)
    elif mode == 'diverging':
        magic, pixels = b'P6', diverging_colors(values)
    else:
        raise FormatError(f"{path}: unknown render mode {mode!r}")
    with open(path, 'wb') as stream:
        stream.write(magic + f'\n{field.grid.nx} {field.grid.ny}\n255\n'.encode('ascii'))
        stream.write(pixels.tobytes())
