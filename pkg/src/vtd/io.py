"""Line-delimited dataset files and parameter manifests.

Numbers are written as decimal text with 17 significant digits, which
round-trips every finite float64 exactly.

Dataset layout (one JSON object per line)::

    {"record": "header", "format": "vtd-longitudinal", "version": 1,
     "n_patients": N, "n_steps": T, "n_covariates": p, "n_confounders": r,
     "fields": [...], "meta": {...}}
    {"id": "p00000", "x": [[...], ...], "a": [...], "y": [...], "mask": [...],
     "z_true": ..., "y_both_arms": ..., "tau_true": ..., "propensity_true": ...}
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import GROUND_TRUTH_FIELDS, LongitudinalDataset

DATASET_FORMAT = "vtd-longitudinal"
MODEL_FORMAT = "vtd-model"
FORMAT_VERSION = 1
REQUIRED_FIELDS = ("id", "x", "a", "y")


class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def fmt_float(v: float) -> str:
    v = float(v)
    if not np.isfinite(v):
        raise ValueError(f"cannot serialize non-finite value {v!r}")
    return format(v, ".17g")


def _encode(v) -> str:
    """Compact JSON text with 17-significant-digit floats."""
    if isinstance(v, np.ndarray):
        v = v.tolist() if v.dtype == bool or np.issubdtype(v.dtype, np.integer) else v
    if isinstance(v, np.ndarray):
        if v.ndim == 0:
            return fmt_float(v)
        return "[" + ",".join(_encode(item) for item in v) + "]"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_encode(item) for item in v) + "]"
    if isinstance(v, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _encode(val) for k, val in v.items()) + "}"
    if v is None:
        return "null"
    return json.dumps(v)


def _float_rows(arr: np.ndarray) -> str:
    # Fast path for the bulk numeric fields.
    if arr.ndim == 1:
        return "[" + ",".join(format(v, ".17g") for v in arr.tolist()) + "]"
    return "[" + ",".join(_float_rows(row) for row in arr) + "]"


def save_dataset(ds: LongitudinalDataset, path) -> None:
    path = Path(path)
    present = [name for name in GROUND_TRUTH_FIELDS if getattr(ds, name) is not None]
    header = {
        "record": "header",
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "n_patients": len(ds),
        "n_steps": ds.n_steps,
        "n_covariates": ds.n_covariates,
        "n_confounders": ds.n_confounders,
        "fields": list(REQUIRED_FIELDS) + ["mask"] + present,
        "meta": ds.meta,
    }
    for name in ("x", "y") + tuple(present):
        if not np.all(np.isfinite(getattr(ds, name))):
            raise ValueError(f"field {name!r} contains non-finite values")
    lines = [_encode(header)]
    for i in range(len(ds)):
        parts = [
            f'"id":{json.dumps(str(ds.ids[i]))}',
            f'"x":{_float_rows(ds.x[i])}',
            f'"a":[{",".join(str(int(v)) for v in ds.a[i])}]',
            f'"y":{_float_rows(ds.y[i])}',
            f'"mask":[{",".join("true" if v else "false" for v in ds.mask[i])}]',
        ]
        for name in present:
            parts.append(f'"{name}":{_float_rows(getattr(ds, name)[i])}')
        lines.append("{" + ",".join(parts) + "}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_shape(line: int, name: str, value, shape: tuple) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetFormatError(line, f"field {name!r} is not a numeric array") from None
    if arr.shape != shape:
        raise DatasetFormatError(line, f"field {name!r} has shape {arr.shape}, header implies {shape}")
    if not np.all(np.isfinite(arr)):
        raise DatasetFormatError(line, f"field {name!r} contains non-finite values")
    return arr


def _read_lines(lines: Iterable[str]) -> LongitudinalDataset:
    it = iter(enumerate(lines, start=1))
    header = None
    for lineno, text in it:
        if text.strip():
            try:
                header = json.loads(text)
            except json.JSONDecodeError as err:
                raise DatasetFormatError(lineno, f"invalid JSON ({err.msg})") from None
            break
    if not isinstance(header, dict) or header.get("record") != "header":
        raise DatasetFormatError(1, "first record must be the header")
    for key in ("n_patients", "n_steps", "n_covariates"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise DatasetFormatError(1, f"header field {key!r} must be a positive integer")
    n, t_max, p = header["n_patients"], header["n_steps"], header["n_covariates"]
    r = header.get("n_confounders")

    ids, xs, as_, ys, masks = [], [], [], [], []
    gt: dict[str, list] = {name: [] for name in GROUND_TRUTH_FIELDS}
    gt_seen: dict[str, int] = {name: 0 for name in GROUND_TRUTH_FIELDS}
    count = 0
    for lineno, text in it:
        if not text.strip():
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as err:
            raise DatasetFormatError(lineno, f"invalid JSON ({err.msg})") from None
        if not isinstance(rec, dict):
            raise DatasetFormatError(lineno, "record must be a JSON object")
        for name in REQUIRED_FIELDS:
            if name not in rec:
                raise DatasetFormatError(lineno, f"missing required field {name!r}")
        ids.append(str(rec["id"]))
        xs.append(_check_shape(lineno, "x", rec["x"], (t_max, p)))
        a = _check_shape(lineno, "a", rec["a"], (t_max,))
        if not np.isin(a, (0.0, 1.0)).all():
            raise DatasetFormatError(lineno, "field 'a' must contain only 0 and 1")
        as_.append(a.astype(np.int64))
        ys.append(_check_shape(lineno, "y", rec["y"], (t_max,)))
        mask = rec.get("mask", [True] * t_max)
        if not isinstance(mask, list) or len(mask) != t_max or not all(isinstance(v, bool) for v in mask):
            raise DatasetFormatError(lineno, f"field 'mask' must be {t_max} booleans")
        masks.append(np.array(mask, dtype=bool))
        shapes = {
            "z_true": (t_max, r if r is not None else -1),
            "y_both_arms": (t_max, 2),
            "tau_true": (t_max,),
            "propensity_true": (t_max,),
        }
        for name in GROUND_TRUTH_FIELDS:
            if name in rec:
                shape = shapes[name]
                if name == "z_true" and r is None:
                    raise DatasetFormatError(lineno, "z_true present but header lacks n_confounders")
                gt[name].append(_check_shape(lineno, name, rec[name], shape))
                gt_seen[name] += 1
        count += 1
    if count != n:
        raise DatasetFormatError(0, f"header declares {n} patients but file has {count}")
    kwargs = {}
    for name in GROUND_TRUTH_FIELDS:
        if gt_seen[name] == n:
            kwargs[name] = np.stack(gt[name])
        elif gt_seen[name]:
            raise DatasetFormatError(0, f"optional field {name!r} present for only {gt_seen[name]} of {n} patients")
    return LongitudinalDataset(
        x=np.stack(xs), a=np.stack(as_), y=np.stack(ys), mask=np.stack(masks), ids=ids,
        meta=header.get("meta") or {}, **kwargs,
    )


def load_dataset(path) -> LongitudinalDataset:
    with open(path, encoding="utf-8") as fh:
        return _read_lines(fh)


def loads_dataset(text: str) -> LongitudinalDataset:
    return _read_lines(text.splitlines())


# -- parameter manifests ----------------------------------------------------------


def save_arrays(path, model: str, arrays: dict, config: dict, extra: dict | None = None) -> None:
    """Write named arrays as a manifest with shapes and 17-digit values."""
    entries = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append(
            "{" + f'"name":{json.dumps(name)},"shape":{_encode(list(arr.shape))},'
            f'"values":[{",".join(fmt_float(v) for v in arr.ravel().tolist())}]' + "}"
        )
    body = (
        "{"
        f'"format":"{MODEL_FORMAT}","version":{FORMAT_VERSION},"model":{json.dumps(model)},'
        f'"config":{_encode(config)},"extra":{_encode(extra or {})},'
        '"arrays":[\n' + ",\n".join(entries) + "\n]}"
    )
    Path(path).write_text(body + "\n", encoding="utf-8")


def load_arrays(path) -> tuple[str, dict, dict, dict]:
    """Returns (model name, config dict, extra dict, name -> array)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
    arrays = {}
    for entry in doc["arrays"]:
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{path}: array {entry['name']!r} has {values.size} values for shape {shape}")
        arrays[entry["name"]] = values.reshape(shape)
    return doc["model"], doc["config"], doc.get("extra", {}), arrays
