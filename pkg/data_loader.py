"""
Data loading and saving utilities: field CSVs, dataset bundles, network
checkpoints, loss traces and JSON documents
"""
import json
import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import pandas as pd

from data_generation import SyntheticDataset, noise_from_dict, scenario_from_dict
from network import NetworkSpec, ParamStore
from numerics_core import (Field, Grid, Grid1D, Grid2D, GridMismatchError,
                           InvalidArgumentError, field_points, make_field)
from trainer import LossTrace

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FLOAT_FORMAT = '%.17g'
CHECKPOINT_FORMAT = 2
VALUE_BYTES = 8


def _to_builtin(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(data: Dict, path: PathLike):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_to_builtin)
        fh.write('\n')


def read_json(path: PathLike) -> Dict:
    with open(path) as fh:
        return json.load(fh)


def write_frame_csv(df: pd.DataFrame, path: PathLike):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


def grid_to_dict(grid: Grid) -> Dict:
    if isinstance(grid, Grid2D):
        return {'ndim': 2, 'axis1': grid_to_dict(grid.axis1), 'axis2': grid_to_dict(grid.axis2)}
    return {'ndim': 1, 'start': grid.start, 'stop': grid.stop, 'count': grid.count}


def grid_from_dict(data: Dict) -> Grid:
    if data.get('ndim') == 2:
        return Grid2D(grid_from_dict(data['axis1']), grid_from_dict(data['axis2']))
    return Grid1D(float(data['start']), float(data['stop']), int(data['count']))


def field_to_frame(field: Field) -> pd.DataFrame:
    points = field_points(field.grid)
    if field.grid.ndim == 2:
        return pd.DataFrame({'x1': points[:, 0], 'x2': points[:, 1], 'value': field.values})
    return pd.DataFrame({'x': points[:, 0], 'value': field.values})


def write_field_csv(field: Field, path: PathLike):
    """`x,value` rows for 1D fields, `x1,x2,value` (row-major) for 2D"""
    write_frame_csv(field_to_frame(field), path)


def read_field_csv(path: PathLike, grid: Grid) -> Field:
    df = pd.read_csv(path)
    expected = ['x1', 'x2', 'value'] if grid.ndim == 2 else ['x', 'value']
    if list(df.columns) != expected:
        raise InvalidArgumentError(f"{path}: expected columns {expected}, got {list(df.columns)}")
    if len(df) != grid.size:
        raise GridMismatchError(f"{path}: {len(df)} rows for a grid of {grid.size} points")
    coordinates = df[expected[:-1]].to_numpy()
    if not np.allclose(coordinates, field_points(grid), rtol=0.0, atol=1e-9):
        raise GridMismatchError(f"{path}: coordinates do not match the grid")
    return make_field(grid, df['value'].to_numpy())


def save_dataset(dataset: SyntheticDataset, directory: PathLike):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_field_csv(dataset.phi_star, directory / 'phi_star.csv')
    write_field_csv(dataset.y, directory / 'y.csv')
    write_json(grid_to_dict(dataset.y.grid), directory / 'grid.json')
    write_json(dataset.meta(), directory / 'meta.json')
    logger.info(f"Saved dataset to {directory}")


def load_dataset(directory: PathLike) -> SyntheticDataset:
    directory = Path(directory)
    grid = grid_from_dict(read_json(directory / 'grid.json'))
    meta = read_json(directory / 'meta.json')
    return SyntheticDataset(phi_star=read_field_csv(directory / 'phi_star.csv', grid),
                            y=read_field_csv(directory / 'y.csv', grid),
                            scenario=scenario_from_dict(meta['scenario']),
                            noise=noise_from_dict(meta['noise']),
                            seed=int(meta['seed']))


def save_checkpoint(net: NetworkSpec, params: ParamStore, path: PathLike):
    """
    Write `<path>.json` (layer specs and tensor table) and `<path>.bin`
    (all tensors as little-endian float64, concatenated in table order).
    Each table entry carries the byte offset of its tensor in the data file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    byte_offset = 0
    chunks = []
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype='<f8').tobytes()
        tensors.append({'name': name, 'shape': list(value.shape), 'byte_offset': byte_offset})
        byte_offset += len(data)
        chunks.append(data)
    manifest = {'format_version': CHECKPOINT_FORMAT, 'dtype': 'float64', 'byteorder': 'little',
                'network': net.to_dict(), 'tensors': tensors, 'total_values': byte_offset // VALUE_BYTES,
                'data_file': path.with_suffix('.bin').name}
    with open(path.with_suffix('.bin'), 'wb') as fh:
        fh.write(b''.join(chunks))
    write_json(manifest, path.with_suffix('.json'))


def load_checkpoint(path: PathLike) -> Tuple[NetworkSpec, ParamStore]:
    path = Path(path)
    manifest = read_json(path.with_suffix('.json'))
    if manifest.get('format_version') != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"Unsupported checkpoint format: {manifest.get('format_version')}")
    flat = np.fromfile(path.with_name(manifest['data_file']), dtype='<f8')
    if flat.size != manifest['total_values']:
        raise InvalidArgumentError(f"Checkpoint data holds {flat.size} values, manifest expects "
                                   f"{manifest['total_values']}")
    params = ParamStore()
    for entry in manifest['tensors']:
        shape = tuple(entry['shape'])
        size = int(np.prod(shape)) if shape else 1
        if entry['byte_offset'] % VALUE_BYTES:
            raise InvalidArgumentError(f"Tensor {entry['name']} starts at unaligned byte {entry['byte_offset']}")
        start = entry['byte_offset'] // VALUE_BYTES
        params[entry['name']] = flat[start:start + size].astype(np.float64).reshape(shape)
    return NetworkSpec.from_dict(manifest['network']), params


def write_trace_csv(trace: LossTrace, path: PathLike):
    write_frame_csv(trace.to_frame(), path)


def read_trace_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)
