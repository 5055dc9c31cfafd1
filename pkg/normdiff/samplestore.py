"""
Binary store for generated samples.

``<name>.bin`` holds one block of little-endian float64 values per entry
(row-major ``m x D``, scaled units); ``<name>_index.json`` maps each entry to
its byte offset and row count and carries the standardizer needed to return
values in native units.
"""

import json
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from normdiff.dataset import Standardizer
from normdiff.errors import DataValidationError, DimensionError
from normdiff.eval_calibration import ConditionalSampleSet
from normdiff.utils import log_stage_operation

STORE_FORMAT = "normdiff.samples/v1"
DTYPE = np.dtype("<f8")
GRID_STORE = "samples"
SUBJECT_STORE = "subject_samples"


class StoreEntry(BaseModel):
    cell_id: str
    covariates: Optional[List[float]] = None
    offset: int
    m: int


class StoreIndex(BaseModel):
    format: str = STORE_FORMAT
    d: int
    idp_names: List[str]
    standardizer: Standardizer
    seed: int = 0
    entries: List[StoreEntry] = Field(default_factory=list)

    def entry(self, cell_id: str) -> StoreEntry:
        for entry in self.entries:
            if entry.cell_id == cell_id:
                return entry
        raise DataValidationError(f"No samples stored for cell '{cell_id}'")


def store_paths(directory: Union[str, Path], name: str = GRID_STORE):
    directory = Path(directory)
    return directory / f"{name}.bin", directory / f"{name}_index.json"


class SampleStoreWriter:
    """Appends sample blocks in call order; the index is written on close."""

    def __init__(
        self,
        directory: Union[str, Path],
        idp_names: List[str],
        standardizer: Standardizer,
        seed: int = 0,
        name: str = GRID_STORE,
    ):
        self.bin_path, self.index_path = store_paths(directory, name)
        self.bin_path.parent.mkdir(parents=True, exist_ok=True)
        self.index = StoreIndex(d=len(idp_names), idp_names=list(idp_names), standardizer=standardizer, seed=seed)
        self._handle = open(self.bin_path, "wb")
        self._offset = 0

    def append(self, cell_id: str, samples: np.ndarray, covariates: Optional[List[float]] = None) -> StoreEntry:
        samples = np.ascontiguousarray(samples, dtype=DTYPE)
        if samples.ndim != 2 or samples.shape[1] != self.index.d:
            raise DimensionError(f"Expected an m x {self.index.d} block, got {samples.shape}")
        entry = StoreEntry(cell_id=cell_id, covariates=covariates, offset=self._offset, m=samples.shape[0])
        self._handle.write(samples.tobytes(order="C"))
        self._offset += samples.nbytes
        self.index.entries.append(entry)
        return entry

    def close(self) -> None:
        if self._handle.closed:
            return
        self._handle.close()
        self.index_path.write_text(self.index.model_dump_json(indent=2), encoding="utf-8")
        log_stage_operation(
            operation="write",
            run_id=self.bin_path.parent.name,
            details=f"{self.bin_path.name}: {len(self.index.entries)} blocks, {self._offset} bytes",
        )

    def __enter__(self) -> 'SampleStoreWriter':
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


class SampleStore:
    """Read access to a store written by :class:`SampleStoreWriter`."""

    def __init__(self, directory: Union[str, Path], name: str = GRID_STORE):
        self.bin_path, self.index_path = store_paths(directory, name)
        if not self.bin_path.exists() or not self.index_path.exists():
            raise DataValidationError(f"Sample store '{name}' not found in {directory}")
        data = json.loads(self.index_path.read_text(encoding="utf-8"))
        if data.get("format") != STORE_FORMAT:
            raise DataValidationError(f"{self.index_path} has format '{data.get('format')}', expected '{STORE_FORMAT}'")
        self.index = StoreIndex.model_validate(data)

    @property
    def cell_ids(self) -> List[str]:
        return [entry.cell_id for entry in self.index.entries]

    @property
    def idp_names(self) -> List[str]:
        return self.index.idp_names

    def read(self, cell_id: str, native: bool = False) -> np.ndarray:
        """The ``m x D`` block of one entry, optionally unscaled to native units."""
        entry = self.index.entry(cell_id)
        values = np.fromfile(self.bin_path, dtype=DTYPE, count=entry.m * self.index.d, offset=entry.offset)
        block = values.reshape(entry.m, self.index.d).astype(np.float64)
        return self.index.standardizer.inverse_transform(block) if native else block

    def get(self, cell_id: str) -> ConditionalSampleSet:
        return ConditionalSampleSet(cell_id=cell_id, samples=self.read(cell_id))

    def as_bins(self, native: bool = False) -> Dict[str, np.ndarray]:
        return {cell_id: self.read(cell_id, native) for cell_id in self.cell_ids}

    def __iter__(self) -> Iterator[ConditionalSampleSet]:
        for cell_id in self.cell_ids:
            yield self.get(cell_id)

    def __len__(self) -> int:
        return len(self.index.entries)
