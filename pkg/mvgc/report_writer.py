"""Report tables (CSV / Parquet) and run manifests."""

import json
import hashlib
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Union

import pyarrow as pa
from pyarrow import csv as pacsv
from pyarrow import parquet as pq

from mvgc.config import TOOL_VERSION
from mvgc.errors import InvalidSpec

TABLE_FORMATS = ("csv", "parquet")


def compute_hash(file_path: Union[str, Path]) -> str:
    """Compute SHA256 hash of file."""
    sha256 = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(8192), b""):
            sha256.update(chunk)
    return f"sha256:{sha256.hexdigest()}"


def file_entry(path: Union[str, Path], rows: Optional[int] = None, base: Optional[Path] = None) -> dict:
    """Manifest record for one written file."""
    path = Path(path)
    name = str(path.relative_to(base)) if base is not None else path.name
    return {
        "file": name,
        "rows": rows,
        "size_bytes": path.stat().st_size,
        "hash": compute_hash(path),
    }


class TableWriter:
    """
    Write named report tables into a directory.

    Creates files like:
        shift_study.csv
        gradcheck.parquet
        ...
    and keeps a file_info list for the run manifest.
    """

    def __init__(self, output_dir: Union[str, Path], compression: str = "snappy"):
        self.output_dir = Path(output_dir)
        self.compression = compression
        self.file_info: List[dict] = []

        self.output_dir.mkdir(parents=True, exist_ok=True)

    def write(
        self,
        name: str,
        table: pa.Table,
        fmt: str = "csv",
        preamble: Optional[Sequence[str]] = None,
    ) -> Path:
        """Write a table; ``preamble`` lines are emitted as ``# `` comments above a CSV header."""
        if fmt not in TABLE_FORMATS:
            raise InvalidSpec(f"unknown table format {fmt!r}, expected one of {TABLE_FORMATS}")

        path = self.output_dir / f"{name}.{fmt}"
        if fmt == "parquet":
            compression = "snappy" if self.compression == "snappy" else "none"
            pq.write_table(table, path, compression=compression, write_statistics=True)
        else:
            sink = pa.BufferOutputStream()
            pacsv.write_csv(table, sink)
            with open(path, "wb") as f:
                for line in preamble or ():
                    f.write(f"# {line}\n".encode("utf-8"))
                f.write(sink.getvalue().to_pybytes())

        self.file_info.append(file_entry(path, table.num_rows))
        return path

    def write_rows(
        self,
        name: str,
        rows: Sequence[Dict[str, Any]],
        fmt: str = "csv",
        schema: Optional[pa.Schema] = None,
        preamble: Optional[Sequence[str]] = None,
    ) -> Path:
        table = pa.Table.from_pylist(list(rows), schema=schema)
        return self.write(name, table, fmt=fmt, preamble=preamble)

    def record(self, path: Union[str, Path], rows: Optional[int] = None) -> dict:
        """Track a file written by other means (rasters, JSON)."""
        entry = file_entry(path, rows, base=self.output_dir)
        self.file_info.append(entry)
        return entry


def read_table(path: Union[str, Path]) -> pa.Table:
    """Read a CSV or Parquet report, skipping ``#`` preamble lines."""
    path = Path(path)
    if path.suffix == ".parquet":
        return pq.read_table(path)
    lines = path.read_bytes().splitlines(keepends=True)
    body = b"".join(line for line in lines if not line.startswith(b"#"))
    return pacsv.read_csv(pa.BufferReader(body))


# =============================================================================
# Run manifests
# =============================================================================


@dataclass
class RunManifest:
    """What was run, on which inputs, producing which files."""

    command: str
    arguments: Dict[str, Any]
    seed: Optional[int] = None
    tool_version: str = TOOL_VERSION
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    )
    wall_time_s: float = 0.0
    inputs: List[dict] = field(default_factory=list)
    outputs: List[dict] = field(default_factory=list)
    _started: float = field(default_factory=time.time, repr=False, compare=False)

    def add_input(self, path: Union[str, Path]) -> None:
        path = Path(path)
        self.inputs.append({"path": str(path), "hash": compute_hash(path)})

    def add_output(self, path: Union[str, Path], rows: Optional[int] = None) -> None:
        self.outputs.append(file_entry(path, rows))

    def extend_outputs(self, entries: Sequence[dict]) -> None:
        self.outputs.extend(entries)

    def finish(self) -> "RunManifest":
        self.wall_time_s = round(time.time() - self._started, 3)
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("_started")
        return out

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path


def manifest_path_for(output: Union[str, Path]) -> Path:
    """``<dir>/manifest.json`` for directories, ``<name>.manifest.json`` beside single files."""
    output = Path(output)
    if output.is_dir():
        return output / "manifest.json"
    return output.with_name(output.stem + ".manifest.json")
