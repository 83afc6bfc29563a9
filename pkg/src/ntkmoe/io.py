"""CSV datasets and checksummed JSON snapshots."""

from __future__ import annotations

import csv
import json
import re
import zlib
from pathlib import Path

import numpy as np

from .nn import LabeledDataset, MlpParams, MlpSpec

FORMAT_VERSION = 1

_X_COL = re.compile(r"x(\d+)$")
_Y_COL = re.compile(r"y(\d+)$")


class CsvFormatError(ValueError):
    pass


class SnapshotError(ValueError):
    pass


# --- CSV --------------------------------------------------------------------

def _parse_header(header, path):
    xs, ys = [], []
    for name in header:
        name = name.strip()
        mx, my = _X_COL.match(name), _Y_COL.match(name)
        if mx and not ys:
            xs.append(int(mx.group(1)))
        elif my:
            ys.append(int(my.group(1)))
        else:
            raise CsvFormatError(f"{path}:1: header error: unexpected column {name!r} "
                                 "(expected x0..x{D-1} followed by y0..y{K-1})")
    if not xs:
        raise CsvFormatError(f"{path}:1: header error: no input columns x0..")
    if not ys:
        raise CsvFormatError(f"{path}:1: header error: no output columns y0..")
    if xs != list(range(len(xs))) or ys != list(range(len(ys))):
        raise CsvFormatError(f"{path}:1: header error: columns must be numbered from 0 "
                             "without gaps")
    return len(xs), len(ys)


def load_csv(path) -> LabeledDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}:1: header error: file is empty") from None
        D, K = _parse_header(header, path)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != D + K:
                raise CsvFormatError(
                    f"{path}:{lineno}: ragged row: {len(row)} cells, expected {D + K}")
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise CsvFormatError(
                    f"{path}:{lineno}: non-numeric cell {bad!r}") from None
            if not all(np.isfinite(values)):
                raise CsvFormatError(f"{path}:{lineno}: non-finite value")
            rows.append(values)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    A = np.asarray(rows, dtype=np.float64)
    return LabeledDataset(A[:, :D], A[:, D:])


def _is_float(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def save_csv(data: LabeledDataset, path) -> None:
    D, K = data.X.shape[1], data.Y.shape[1]
    header = [f"x{i}" for i in range(D)] + [f"y{j}" for j in range(K)]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for x, y in zip(data.X, data.Y):
            # repr() of a float is the shortest string that round-trips
            writer.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])


# --- snapshots --------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


def encode_snapshot(doc: dict) -> bytes:
    body = _plain(doc)
    body["format_version"] = FORMAT_VERSION
    body.pop("crc32", None)
    crc = zlib.crc32(_canonical(body))
    return _canonical({**body, "crc32": crc}) + b"\n"


def decode_snapshot(data: bytes) -> dict:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"truncated or malformed snapshot: {exc}") from None
    if not isinstance(doc, dict):
        raise SnapshotError("snapshot is not a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise SnapshotError(
            f"unsupported snapshot format_version {version!r} (expected {FORMAT_VERSION})")
    if "crc32" not in doc:
        raise SnapshotError("snapshot has no checksum")
    crc = doc.pop("crc32")
    if zlib.crc32(_canonical(doc)) != crc:
        raise SnapshotError("snapshot checksum mismatch")
    return doc


def encode_mlp(params: MlpParams, train_config: dict | None = None,
               report: dict | None = None) -> bytes:
    return encode_snapshot({
        "kind": "mlp",
        "mlp_spec": {"layer_widths": list(params.spec.layer_widths),
                     "activation": params.spec.activation},
        "theta": params.theta,
        "train_config_echo": dict(train_config or {}),
        "metadata": dict(report or {}),
    })


def decode_mlp(data: bytes) -> tuple[MlpParams, dict]:
    doc = decode_snapshot(data)
    if "mlp_spec" not in doc or "theta" not in doc:
        raise SnapshotError("snapshot does not contain a network")
    spec = MlpSpec(tuple(doc["mlp_spec"]["layer_widths"]), doc["mlp_spec"]["activation"])
    return MlpParams(np.asarray(doc["theta"], dtype=np.float64), spec), \
        dict(doc.get("train_config_echo", {}))


def snapshot_write(model, path) -> None:
    from .pipeline import serialize

    Path(path).write_bytes(serialize(model))


def snapshot_read(path):
    from .pipeline import load

    return load(Path(path).read_bytes())
