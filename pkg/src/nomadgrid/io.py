"""CSV artifacts with an embedded provenance line.

Every file starts with ``# nomadgrid artifact=<kind> config_hash=<hash> seeds=<lo>-<hi>``
followed by a header row. Readers refuse files whose hash does not match
the active configuration.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence


class ArtifactError(RuntimeError):
    pass


def fmt_value(v, float_fmt: str = ".9g") -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, float_fmt)
    if hasattr(v, "dtype"):
        if v.dtype.kind in "iub":
            return str(int(v))
        return format(float(v), float_fmt)
    return str(v)


def meta_line(artifact: str, config_hash: str, seeds: tuple[int, int] | None = None, **extra) -> str:
    parts = [f"artifact={artifact}", f"config_hash={config_hash}"]
    if seeds is not None:
        parts.append(f"seeds={seeds[0]}-{seeds[1]}")
    parts.extend(f"{k}={v}" for k, v in extra.items())
    return "# nomadgrid " + " ".join(parts)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence], artifact: str,
              config_hash: str, seeds: tuple[int, int] | None = None, float_fmt: str = ".9g",
              **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(meta_line(artifact, config_hash, seeds, **extra) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt_value(v, float_fmt) for v in r])
    tmp.replace(path)
    return path


def parse_meta(line: str) -> dict[str, str]:
    meta = {}
    for tok in line.lstrip("#").split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            meta[k] = v
    return meta


def read_csv(path: str | Path, expect_artifact: str | None = None,
             config_hash: str | None = None) -> tuple[dict[str, str], list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    with open(path, newline="") as fh:
        first = fh.readline()
        meta = parse_meta(first) if first.startswith("#") else {}
        if not first.startswith("#"):
            fh.seek(0)
        rows = list(csv.reader(fh))
    if not rows:
        raise ArtifactError(f"{path}: no header row")
    if expect_artifact and meta.get("artifact") != expect_artifact:
        raise ArtifactError(f"{path}: expected a '{expect_artifact}' artifact, found '{meta.get('artifact')}'")
    if config_hash is not None and meta.get("config_hash") != config_hash:
        raise ArtifactError(
            f"{path}: config hash {meta.get('config_hash')} does not match the active config "
            f"({config_hash}); regenerate it with the current config")
    return meta, rows[0], rows[1:]


def seed_range(meta: dict[str, str]) -> tuple[int, int] | None:
    if "seeds" not in meta:
        return None
    lo, hi = meta["seeds"].split("-")
    return int(lo), int(hi)
