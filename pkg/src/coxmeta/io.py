"""File formats: grid headers, raw volumes, foci/covariate CSVs, chain output.

Volumes are a JSON header (``dims``, ``voxel_size_mm``, ``origin_mm``) next to
a raw file of little-endian values with x varying fastest: unsigned bytes for
masks, float32 for everything else.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .grid import VoxelGrid, build_grid, world_to_voxels
from .model import PriorConfig, StudySet
from .sampler import ChainDraws, HmcConfig

__all__ = [
    "atomic_write",
    "read_grid",
    "write_grid",
    "write_volume",
    "read_volume",
    "parse_foci_csv",
    "format_foci_csv",
    "parse_covariates_csv",
    "format_covariates_csv",
    "assemble_studyset",
    "studies_to_json",
    "studies_from_json",
    "save_draws",
    "load_draws",
    "RunConfig",
    "load_config",
    "grid_from_config",
    "region_from_spec",
    "write_csv",
    "read_csv_rows",
]

FLOAT = np.dtype("<f4")


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _header_path(raw_path: Path) -> Path:
    return raw_path.with_suffix(".json")


# -- grids and volumes ---------------------------------------------------------

def read_grid(header_path, mask_path=None) -> VoxelGrid:
    try:
        header = json.loads(Path(header_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read grid header {header_path}: {exc}") from exc
    mask = None
    if mask_path is not None:
        try:
            mask = Path(mask_path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read mask {mask_path}: {exc}") from exc
    return build_grid(header, mask)


def write_grid(header_path, mask_path, grid: VoxelGrid) -> None:
    header = grid.header()
    header["ext_dims"] = [int(m) for m in grid.ext_dims]
    atomic_write(header_path, _dump_json(header))
    atomic_write(mask_path, grid.mask.astype(np.uint8).tobytes())


def write_volume(path, grid: VoxelGrid, values) -> None:
    """Write a float32 volume; ``values`` is full-grid (V) or masked (V_B).

    Voxels outside the mask are written as 0.
    """
    path = Path(path)
    v = np.asarray(values, dtype=float).ravel()
    if v.size == grid.n_masked and v.size != grid.n_voxels:
        full = np.zeros(grid.n_voxels)
        full[grid.mask_index] = v
    elif v.size == grid.n_voxels:
        full = np.where(grid.mask, v, 0.0)
    else:
        raise DataError(f"volume has {v.size} values; grid has {grid.n_voxels} "
                        f"({grid.n_masked} masked)")
    header = grid.header()
    header["dtype"] = "float32"
    atomic_write(_header_path(path), _dump_json(header))
    atomic_write(path, full.astype(FLOAT).tobytes())


def read_volume(path):
    """Read a float32 volume; returns ``(header, values)`` with values of length V."""
    path = Path(path)
    try:
        header = json.loads(_header_path(path).read_text())
        raw = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    n = int(np.prod(header["dims"]))
    if len(raw) != 4 * n:
        raise DataError(f"volume {path} has {len(raw) // 4} floats, header dims need {n}")
    return header, np.frombuffer(raw, dtype=FLOAT).copy()


# -- CSV -----------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header: list, rows) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    atomic_write(path, buf.getvalue())


def read_csv_rows(path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    return rows[0], rows[1:]


def parse_foci_csv(text: str) -> list:
    """Parse ``study_id,x,y,z`` rows (mm). Returns ``[(study_id, (x, y, z)), ...]``."""
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["study_id", "x", "y", "z"]:
        raise DataError("foci CSV must start with header 'study_id,x,y,z'")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise DataError(f"foci CSV line {lineno}: expected 4 fields, got {len(row)}")
        sid = row[0].strip()
        if not sid:
            raise DataError(f"foci CSV line {lineno}: empty study id")
        try:
            xyz = tuple(float(c) for c in row[1:])
        except ValueError as exc:
            raise DataError(f"foci CSV line {lineno}: non-numeric coordinate") from exc
        if not all(math.isfinite(c) for c in xyz):
            raise DataError(f"foci CSV line {lineno}: non-finite coordinate")
        out.append((sid, xyz))
    return out


def format_foci_csv(studies: StudySet, grid: VoxelGrid | None = None) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["study_id", "x", "y", "z"])
    for i, sid in enumerate(studies.ids):
        if studies.points is not None:
            pts = np.asarray(studies.points[i]).reshape(-1, 3)
        elif grid is not None:
            pts = grid.centers(studies.foci[i])
        else:
            raise ValueError("need points or a grid to write foci")
        for p in pts:
            w.writerow([sid] + [repr(float(c)) for c in p])
    return buf.getvalue()


def parse_covariates_csv(text: str):
    """Parse ``study_id,<name>,...``. Returns ``(ids, names, matrix)``."""
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows or not rows[0] or rows[0][0].strip() != "study_id":
        raise DataError("covariates CSV must start with a 'study_id' column")
    names = [c.strip() for c in rows[0][1:]]
    if len(set(names)) != len(names):
        raise DataError("duplicate covariate names")
    ids, vals = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(names) + 1:
            raise DataError(f"covariates CSV line {lineno}: expected {len(names) + 1} fields")
        try:
            vals.append([float(c) for c in row[1:]])
        except ValueError as exc:
            raise DataError(f"covariates CSV line {lineno}: non-numeric value") from exc
        ids.append(row[0].strip())
    if len(set(ids)) != len(ids):
        raise DataError("duplicate study ids in covariates CSV")
    return ids, names, np.array(vals, dtype=float).reshape(len(ids), len(names))


def format_covariates_csv(studies: StudySet) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["study_id"] + list(studies.names[1:]))
    for sid, row in zip(studies.ids, studies.z):
        w.writerow([sid] + [repr(float(x)) for x in row[1:]])
    return buf.getvalue()


def assemble_studyset(foci_table: list, covariates, grid: VoxelGrid, spatial=(), global_=(),
                      drop_outside_mask: bool = False, log=None) -> StudySet:
    """Map foci to voxels and attach covariates.

    Studies are enumerated by the covariate table, so a study without foci is
    kept with zero points. Foci in unmasked voxels raise :class:`DataError`
    unless ``drop_outside_mask`` is set.
    """
    ids, names, mat = covariates
    spatial, global_ = list(spatial), list(global_)
    col = {n: k for k, n in enumerate(names)}
    for n in spatial + global_:
        if n not in col:
            raise ConfigError(f"covariate {n!r} not found in covariates table")
    if set(spatial) & set(global_):
        raise ConfigError("a covariate cannot be both spatial and global")
    index = {sid: i for i, sid in enumerate(ids)}
    pts = [[] for _ in ids]
    for sid, xyz in foci_table:
        if sid not in index:
            raise DataError(f"focus for study {sid!r} which has no covariate row")
        pts[index[sid]].append(xyz)
    foci, points = [], []
    for sid, p in zip(ids, pts):
        arr = np.array(p, dtype=float).reshape(-1, 3)
        vox = world_to_voxels(grid, arr) if arr.size else np.zeros(0, np.int64)
        inside = grid.mask[vox]
        if not inside.all():
            bad = arr[~inside][0]
            msg = f"study {sid}: focus {tuple(float(c) for c in bad)} lies outside the mask"
            if not drop_outside_mask:
                raise DataError(msg)
            if log is not None:
                log.warning("dropping %d focus/foci of study %s outside the mask",
                            int((~inside).sum()), sid)
            arr, vox = arr[inside], vox[inside]
        foci.append(vox)
        points.append(arr)
    n = len(ids)
    z = np.column_stack([np.ones(n)] + [mat[:, col[c]] for c in spatial + global_])
    return StudySet(list(ids), foci, z.reshape(n, 1 + len(spatial) + len(global_)),
                    k_star=len(spatial), names=["intercept"] + spatial + global_,
                    points=points)


def studies_to_json(studies: StudySet) -> dict:
    return {
        "ids": list(studies.ids),
        "names": list(studies.names),
        "k_star": int(studies.k_star),
        "z": studies.z.tolist(),
        "foci": [f.tolist() for f in studies.foci],
        "points": None if studies.points is None
        else [np.asarray(p).reshape(-1, 3).tolist() for p in studies.points],
    }


def studies_from_json(obj: dict) -> StudySet:
    pts = obj.get("points")
    return StudySet(obj["ids"], obj["foci"], np.array(obj["z"], dtype=float).reshape(
        len(obj["ids"]), len(obj["names"])), int(obj["k_star"]), list(obj["names"]),
        None if pts is None else [np.array(p, dtype=float).reshape(-1, 3) for p in pts])


def fingerprint(studies: StudySet, grid: VoxelGrid) -> str:
    h = hashlib.sha256()
    h.update(_dump_json(grid.header()).encode())
    h.update(grid.mask.astype(np.uint8).tobytes())
    h.update(_dump_json(studies_to_json(studies)).encode())
    return h.hexdigest()


# -- chain output ----------------------------------------------------------------

def _trace_header(names: list, S: int) -> list:
    sp, gl = names[:S], names[S:]
    return (["iter", "logpost", "accepted", "eps"] + [f"mu[{n}]" for n in sp]
            + [f"sigma[{n}]" for n in sp] + [f"rho_scaled[{n}]" for n in sp]
            + [f"beta[{n}]" for n in gl])


def save_draws(directory, draws: ChainDraws, studies: StudySet | None = None,
               extra_meta: dict | None = None) -> None:
    """Persist a chain: ``trace.csv``, ``fields.raw`` + ``fields.json``, grid, data."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    grid = draws.grid
    S = draws.n_spatial
    header = _trace_header(draws.names, S)
    rows = []
    for t in range(draws.logpost.size):
        rows.append([t + 1, float(draws.logpost[t]), int(draws.accepted[t]),
                     float(draws.eps[t])] + [float(x) for x in draws.mu[t]]
                    + [float(x) for x in draws.sigma[t]] + [float(x) for x in draws.rho_scaled[t]]
                    + [float(x) for x in draws.beta[t]])
    write_csv(d / "trace.csv", header, rows)

    vols = np.zeros((draws.n_draws, S, grid.n_voxels), dtype=FLOAT)
    vols[:, :, grid.mask_index] = draws.fields
    atomic_write(d / "fields.raw", vols.tobytes())
    manifest = grid.header()
    manifest.update({
        "dtype": "float32",
        "n_draws": int(draws.n_draws),
        "fields": list(draws.names[:S]),
        "draw_iterations": [int(t) for t in draws.draw_iters],
        "layout": "draw-major, then spatial effect, then voxel (x fastest)",
    })
    atomic_write(d / "fields.json", _dump_json(manifest))
    write_grid(d / "grid.json", d / "mask.raw", grid)
    meta = dict(draws.meta)
    meta["names"] = list(draws.names)
    if studies is not None:
        atomic_write(d / "studies.json", _dump_json(studies_to_json(studies)))
        meta["data_sha256"] = fingerprint(studies, grid)
    if extra_meta:
        meta.update(extra_meta)
    atomic_write(d / "meta.json", _dump_json(meta))


def load_draws(directory):
    """Inverse of :func:`save_draws`. Returns ``(draws, studies_or_None)``."""
    d = Path(directory)
    try:
        grid = read_grid(d / "grid.json", d / "mask.raw")
        meta = json.loads((d / "meta.json").read_text())
        manifest = json.loads((d / "fields.json").read_text())
        header, rows = read_csv_rows(d / "trace.csv")
        raw = (d / "fields.raw").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read chain output in {d}: {exc}") from exc
    names = meta["names"]
    S = len(manifest["fields"])
    G = len(names) - S
    if header != _trace_header(names, S):
        raise DataError("trace.csv columns do not match meta.json")
    arr = np.array([[float(x) for x in r] for r in rows]).reshape(len(rows), len(header))
    T = int(manifest["n_draws"])
    if len(raw) != 4 * T * S * grid.n_voxels:
        raise DataError("fields.raw size does not match fields.json")
    vols = np.frombuffer(raw, dtype=FLOAT).reshape(T, S, grid.n_voxels)
    c = 4
    draws = ChainDraws(
        mu=arr[:, c:c + S], sigma=arr[:, c + S:c + 2 * S], rho_scaled=arr[:, c + 2 * S:c + 3 * S],
        beta=arr[:, c + 3 * S:c + 3 * S + G], logpost=arr[:, 1], accepted=arr[:, 2].astype(bool),
        eps=arr[:, 3], draw_iters=np.array(manifest["draw_iterations"], dtype=np.int64),
        fields=vols[:, :, grid.mask_index].astype(float), names=names, meta=meta, grid=grid)
    studies = None
    if (d / "studies.json").exists():
        studies = studies_from_json(json.loads((d / "studies.json").read_text()))
    return draws, studies


# -- configuration ---------------------------------------------------------------

@dataclass
class RunConfig:
    """Parsed JSON run configuration; relative paths resolve against ``base_dir``."""

    raw: dict
    base_dir: Path
    priors: PriorConfig = field(default_factory=PriorConfig)
    hmc: HmcConfig = field(default_factory=HmcConfig)

    def path(self, key: str, required: bool = True):
        val = self.raw.get(key)
        if val is None:
            if required:
                raise ConfigError(f"config is missing {key!r}")
            return None
        return self.resolve(val)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def spatial(self) -> list:
        return list(self.raw.get("model", {}).get("spatial", []))

    @property
    def global_(self) -> list:
        return list(self.raw.get("model", {}).get("global", []))

    @property
    def delta(self) -> float:
        return float(self.raw.get("model", {}).get("delta", 2.0))

    @property
    def threads(self) -> int:
        return int(self.raw.get("threads", 1))


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = int(seed)
        raw.setdefault("hmc", {})["seed"] = int(seed)
    try:
        priors = PriorConfig(**raw.get("priors", {}))
        hmc = HmcConfig(**raw.get("hmc", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid priors/hmc settings: {exc}") from exc
    cfg = RunConfig(raw=raw, base_dir=path.parent.resolve(), priors=priors, hmc=hmc)
    m = raw.get("model", {})
    if not isinstance(m.get("spatial", []), list) or not isinstance(m.get("global", []), list):
        raise ConfigError("model.spatial and model.global must be lists of covariate names")
    return cfg


def _ball_mask(dims, voxel_size, origin, center=None, radius=None) -> np.ndarray:
    g = build_grid({"dims": dims, "voxel_size_mm": voxel_size, "origin_mm": origin})
    c = g.centers()
    if center is None:
        center = c.mean(axis=0)
    if radius is None:
        radius = 0.5 * voxel_size * min(dims)
    return (np.linalg.norm(c - np.asarray(center, dtype=float), axis=1) <= radius).astype(np.uint8)


def grid_from_config(cfg: RunConfig) -> VoxelGrid:
    """Grid from ``{"header": path, "mask": path}`` or an inline definition.

    Inline form: ``{"dims": [...], "voxel_size_mm": a, "origin_mm": [...],
    "mask": "all" | "ball" | path}``.
    """
    spec = cfg.raw.get("grid")
    if spec is None:
        raise ConfigError("config is missing 'grid'")
    if "header" in spec:
        mask = spec.get("mask")
        return read_grid(cfg.resolve(spec["header"]), None if mask is None else cfg.resolve(mask))
    header = {k: spec[k] for k in ("dims", "voxel_size_mm", "origin_mm", "ext_dims") if k in spec}
    header.setdefault("origin_mm", [0.0, 0.0, 0.0])
    mask = spec.get("mask", "all")
    try:
        if mask == "all":
            return build_grid(header, None)
        if mask == "ball":
            m = _ball_mask(header["dims"], header["voxel_size_mm"], header["origin_mm"],
                           spec.get("center_mm"), spec.get("radius_mm"))
            return build_grid(header, m.tobytes())
    except KeyError as exc:
        raise ConfigError(f"grid definition is missing {exc}") from exc
    return build_grid(header, cfg.resolve(mask).read_bytes())


def region_from_spec(spec: dict, grid: VoxelGrid, base: RunConfig | None = None) -> np.ndarray:
    """Linear voxel indices for ``{"indices": [...]}``, ``{"mask": path}`` or
    ``{"sphere": {"center_mm": [...], "radius_mm": r}}``, intersected with the grid mask."""
    if "indices" in spec:
        idx = np.asarray(spec["indices"], dtype=np.int64)
    elif "mask" in spec:
        p = base.resolve(spec["mask"]) if base is not None else Path(spec["mask"])
        m = np.frombuffer(Path(p).read_bytes(), dtype=np.uint8)
        if m.size != grid.n_voxels:
            raise DataError(f"region mask {p} has {m.size} voxels, grid has {grid.n_voxels}")
        idx = np.flatnonzero(m)
    elif "sphere" in spec:
        s = spec["sphere"]
        dist = np.linalg.norm(grid.centers() - np.asarray(s["center_mm"], dtype=float), axis=1)
        idx = np.flatnonzero(dist <= float(s["radius_mm"]))
    else:
        raise ConfigError(f"unrecognised region spec {spec}")
    return idx[grid.mask[idx]] if idx.size else idx
