"""Dataset ingestion, checkpoint persistence, and metrics export.

The dataset format is the classification subset of the UEA text format:
``@`` header directives followed by ``@data`` and one bag per line, with
``:``-separated dimensions of comma-separated reals and the class label as
the final field. Unequal-length series are zero-padded to the maximum length
with a validity mask recorded per bag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor

CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


class ParseError(ValueError):
    """A data line or directive could not be parsed; message carries the line number."""


class SchemaError(ValueError):
    """The file parses but violates the declared schema."""


class IntegrityError(ValueError):
    """A checkpoint is internally inconsistent or from another version."""


@dataclass
class Bag:
    """One multivariate time series: values are (T, d), label a class index.

    ``mask`` marks valid time points for padded variable-length series;
    None means every point is valid.
    """

    values: np.ndarray
    label: int
    id: str
    mask: np.ndarray | None = None

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class DatasetMeta:
    name: str
    dimensions: int
    length: int
    variable_length: bool
    class_labels: list[str] = field(default_factory=list)
    train_size: int = 0
    test_size: int = 0


def _parse_values(text: str, line_no: int) -> np.ndarray:
    try:
        vals = np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"line {line_no}: bad numeric value ({exc})") from None
    if not np.all(np.isfinite(vals)):
        raise ParseError(f"line {line_no}: non-finite value")
    return vals


def parse_ts(path) -> tuple[DatasetMeta, list[Bag]]:
    """Parse one '.ts' file into metadata and bags.

    Header directives understood: @problemName, @dimensions, @seriesLength,
    @equalLength, @classLabel, @data; other @-directives are ignored.
    """
    path = Path(path)
    name = path.stem
    dimensions = None
    series_length = None
    equal_length = True
    class_labels: list[str] | None = None
    in_data = False
    raw_bags: list[tuple[list[np.ndarray], str, int]] = []

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("@"):
                if in_data:
                    raise ParseError(f"line {line_no}: directive after @data")
                head, _, rest = line.partition(" ")
                directive = head[1:].lower()
                rest = rest.strip()
                if directive == "problemname":
                    name = rest or name
                elif directive == "dimensions":
                    try:
                        dimensions = int(rest)
                    except ValueError:
                        raise ParseError(f"line {line_no}: @dimensions needs an integer") from None
                elif directive == "serieslength":
                    try:
                        series_length = int(rest)
                    except ValueError:
                        raise ParseError(f"line {line_no}: @seriesLength needs an integer") from None
                elif directive == "equallength":
                    equal_length = rest.lower() == "true"
                elif directive == "classlabel":
                    parts = rest.split()
                    if not parts or parts[0].lower() != "true" or len(parts) < 2:
                        raise SchemaError(f"line {line_no}: classification needs '@classLabel true <labels>'")
                    class_labels = parts[1:]
                    if len(set(class_labels)) != len(class_labels):
                        raise SchemaError(f"line {line_no}: duplicate class labels")
                elif directive == "data":
                    in_data = True
                # anything else (@timeStamps, @missing, @univariate, ...) is ignored
                continue
            if not in_data:
                raise ParseError(f"line {line_no}: data before @data directive")
            fields = line.split(":")
            if len(fields) < 2:
                raise ParseError(f"line {line_no}: expected ':'-separated dimensions and label")
            label = fields[-1].strip()
            dims = [_parse_values(f, line_no) for f in fields[:-1]]
            if dimensions is not None and len(dims) != dimensions:
                raise ParseError(
                    f"line {line_no}: {len(dims)} dimensions, header declares {dimensions}"
                )
            if len({d.size for d in dims}) != 1:
                raise ParseError(f"line {line_no}: dimensions have differing lengths")
            raw_bags.append((dims, label, line_no))

    if class_labels is None:
        raise SchemaError(f"{path}: missing @classLabel directive")
    if not raw_bags:
        raise SchemaError(f"{path}: empty data section")

    label_index = {lab: i for i, lab in enumerate(class_labels)}
    d = dimensions if dimensions is not None else len(raw_bags[0][0])
    lengths = [dims[0].size for dims, _, _ in raw_bags]
    max_len = max(lengths)
    if series_length is not None and equal_length and max_len != series_length:
        raise SchemaError(f"{path}: series length {max_len} != declared {series_length}")
    variable = len(set(lengths)) > 1 or not equal_length

    bags = []
    for idx, (dims, label, line_no) in enumerate(raw_bags):
        if label not in label_index:
            raise SchemaError(f"line {line_no}: label {label!r} not in classLabel set")
        if len(dims) != d:
            raise ParseError(f"line {line_no}: {len(dims)} dimensions, expected {d}")
        t = dims[0].size
        values = np.zeros((max_len, d), dtype=np.float64)
        for j, series in enumerate(dims):
            values[:t, j] = series
        mask = None
        if variable and t < max_len:
            mask = np.zeros(max_len, dtype=bool)
            mask[:t] = True
        bags.append(Bag(values=values, label=label_index[label], id=f"{name}-{idx}", mask=mask))

    meta = DatasetMeta(
        name=name,
        dimensions=d,
        length=max_len,
        variable_length=variable,
        class_labels=list(class_labels),
    )
    if name.upper().endswith("_TEST"):
        meta.test_size = len(bags)
    else:
        meta.train_size = len(bags)
    return meta, bags


def write_ts(path, bags: list[Bag], class_labels: list[str], name: str) -> None:
    """Serialize bags in the same '.ts' subset parse_ts reads."""
    d = bags[0].channels if bags else 1
    lengths = {b.length for b in bags}
    equal = len(lengths) <= 1
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"@problemName {name}\n")
        fh.write(f"@dimensions {d}\n")
        fh.write(f"@equalLength {'true' if equal else 'false'}\n")
        if equal and bags:
            fh.write(f"@seriesLength {bags[0].length}\n")
        fh.write("@classLabel true " + " ".join(class_labels) + "\n")
        fh.write("@data\n")
        for bag in bags:
            dims = [",".join(repr(float(v)) for v in bag.values[:, j]) for j in range(d)]
            fh.write(":".join(dims) + ":" + class_labels[bag.label] + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_params(params: dict[str, Tensor], out_dir, extra: dict | None = None) -> None:
    """Write manifest.json + params.bin; floats stored little-endian float32."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    registry = []
    blob = bytearray()
    for pname, tensor in params.items():
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        registry.append(
            {
                "name": pname,
                "shape": list(arr.shape),
                "offset": len(blob),
                "nbytes": arr.nbytes,
            }
        )
        blob.extend(arr.tobytes())
    manifest = {"version": CHECKPOINT_VERSION, "params": registry}
    if extra:
        manifest.update(extra)
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / BLOB_NAME, "wb") as fh:
        fh.write(bytes(blob))


def load_params(in_dir) -> tuple[dict, dict[str, np.ndarray]]:
    in_dir = Path(in_dir)
    try:
        with open(in_dir / MANIFEST_NAME, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise IntegrityError(f"{in_dir}: missing {MANIFEST_NAME}") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{in_dir}: corrupt manifest ({exc})") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(
            f"{in_dir}: checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}"
        )
    try:
        blob = (in_dir / BLOB_NAME).read_bytes()
    except FileNotFoundError:
        raise IntegrityError(f"{in_dir}: missing {BLOB_NAME}") from None
    expected = sum(entry["nbytes"] for entry in manifest["params"])
    if len(blob) != expected:
        raise IntegrityError(f"{in_dir}: blob is {len(blob)} bytes, manifest declares {expected}")
    arrays = {}
    for entry in manifest["params"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start : start + nbytes], dtype="<f4")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return manifest, arrays


# ---------------------------------------------------------------------------
# metrics export

METRICS_HEADER = "epoch,loss,accuracy,macro_f1,macro_precision,macro_recall,auc_roc"


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(
                ",".join(
                    [str(row["epoch"])]
                    + [repr(float(row[k])) for k in METRICS_HEADER.split(",")[1:]]
                )
                + "\n"
            )
