"""
Artifacts - on-disk layout of an experiment run and atomic file writes
Layout: <run_dir>/seed-<s>/<strategy>/{params0,final,mask,...}
"""
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

MANIFEST_NAME = "manifest.json"
CELL_NAME = "cell.json"

# File names inside a cell directory
PARAMS0_FILE = "params0.lgcp"
FINAL_PARAMS_FILE = "final.lgcp"
MASK_FILE = "mask.lgcm"
BASE_TRAJECTORY_FILE = "base.lgct"
PERT_TRAJECTORY_FILE = "pert.lgct"
LAMBDA_FILE = "lambda.csv"
ACCURACY_FILE = "accuracy.csv"
GRANGER_FILE = "granger.csv"
SDIC_FILE = "sdic.csv"
PRUNE_FILE = "prune.json"
ESD_FILE = "esd.json"
ESD_EIGENVALUES_FILE = "esd.csv"
CSV_EXPORT_DIR = "csv"
SHAP_FILE = "shap.json"


def atomic_write_bytes(path, data: bytes):
    """Write to a sibling temp file then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode('utf-8'))


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_frame(path, frame: pd.DataFrame, float_format="%.10g"):
    # fixed float format keeps reruns byte-identical across platforms
    atomic_write_text(path, frame.to_csv(index=False, float_format=float_format, lineterminator="\n"))


def file_checksum(path):
    sha = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            sha.update(chunk)
    return sha.hexdigest()


class RunLayout:
    """Paths of one configured run"""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)

    def cell_dir(self, seed, strategy) -> Path:
        name = getattr(strategy, 'value', strategy)
        return self.run_dir / f"seed-{seed}" / name

    def cell_file(self, seed, strategy, name) -> Path:
        return self.cell_dir(seed, strategy) / name

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / MANIFEST_NAME

    def table_path(self, table_id, variant="median") -> Path:
        return self.run_dir / f"{table_id}-{variant}.csv"

    def cells(self):
        """(seed, strategy name, cell.json path) for every recorded cell"""
        found = []
        for cell in sorted(self.run_dir.glob(f"seed-*/*/{CELL_NAME}")):
            seed = int(cell.parent.parent.name.split("-", 1)[1])
            found.append((seed, cell.parent.name, cell))
        return found

    def checksums(self):
        sums = {}
        for path in sorted(self.run_dir.glob("seed-*/*/*")):
            if path.is_file() and not path.name.startswith("."):
                sums[str(path.relative_to(self.run_dir))] = file_checksum(path)
        return sums
