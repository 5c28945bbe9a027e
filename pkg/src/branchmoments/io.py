"""File formats: model.json, reads.csv, cbc.csv and run outputs.

reads.csv is long format ``barcode_id,time,cell_type,read_count``; absent
(barcode, time, type) rows are zero.  cbc.csv holds ``time,cell_type,B,b``.
Times are written with ``repr`` so every float round-trips exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .model import ModelTopology, Params, check_topology, param_names
from .simulator import ReadDataset

__all__ = [
    "load_model",
    "model_to_dict",
    "save_model",
    "write_reads",
    "write_cbc",
    "read_dataset",
    "write_json",
    "config_hash",
    "write_manifest",
    "write_table",
]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


# ---------------------------------------------------------------- model.json


def model_from_dict(spec: dict):
    comp = spec["compartments"]
    hsc = str(comp.get("hsc", "0"))
    progs, mats, parent = [], [], {}
    for entry in comp["progenitors"]:
        a = str(entry["id"])
        progs.append(a)
        for m in entry["children"]:
            mats.append(str(m))
            parent[str(m)] = a
    labels = {str(k): str(v) for k, v in comp.get("labels", {}).items()}
    topo = check_topology(ModelTopology(progs, mats, parent, labels, hsc=hsc))
    pr = spec.get("params")
    if pr is None:
        raise ValueError("model file has no params block")
    try:
        values = {"lambda": float(pr["lambda"])}
        for a in progs:
            values[f"nu_{a}"] = float(pr["nu_prog"][a])
            values[f"mu_{a}"] = float(pr["mu_prog"][a])
        for m in mats:
            values[f"nu_{m}"] = float(pr["nu_mat"][m])
            values[f"mu_{m}"] = float(pr["mu_mat"][m])
        for c in (hsc, *progs):
            values[f"pi_{c}"] = float(pr["pi"][c])
    except KeyError as exc:
        raise ValueError(f"model file is missing parameter {exc}") from None
    fixed = [str(f) for f in spec.get("fixed", [])]
    unknown = set(fixed) - set(param_names(topo))
    if unknown:
        raise ValueError(f"unknown fixed parameter names: {sorted(unknown)}")
    return topo, Params.from_dict(topo, values, fixed=fixed).check(topo)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def model_to_dict(topology: ModelTopology, params: Params) -> dict:
    d = params.as_dict(topology)
    comp = {
        "hsc": topology.hsc,
        "progenitors": [{"id": a, "children": list(topology.children(a))} for a in topology.progenitors],
    }
    if topology.labels:
        comp["labels"] = dict(topology.labels)
    return {
        "compartments": comp,
        "params": {
            "lambda": d["lambda"],
            "nu_prog": {a: d[f"nu_{a}"] for a in topology.progenitors},
            "mu_prog": {a: d[f"mu_{a}"] for a in topology.progenitors},
            "nu_mat": {m: d[f"nu_{m}"] for m in topology.matures},
            "mu_mat": {m: d[f"mu_{m}"] for m in topology.matures},
            "pi": {c: d[f"pi_{c}"] for c in topology.compartments[: topology.n_init]},
        },
        "fixed": [n for n in param_names(topology) if n in params.fixed],
    }


def save_model(path, topology, params):
    write_json(path, model_to_dict(topology, params))


# ----------------------------------------------------------- reads and cbc


def write_reads(path, data: ReadDataset):
    """Nonzero counts, plus one zero row for barcodes never observed so the
    barcode count survives the round trip."""
    reads = np.asarray(data.reads)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["barcode_id", "time", "cell_type", "read_count"])
        for p, bid in enumerate(data.barcode_ids):
            nz = np.argwhere(reads[p] != 0)
            if nz.size == 0:
                w.writerow([bid, _fmt(data.times[0]), data.cell_types[0], 0])
                continue
            for j, m in nz:
                w.writerow([bid, _fmt(data.times[j]), data.cell_types[m], _fmt(reads[p, j, m])])


def write_cbc(path, data: ReadDataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "cell_type", "B", "b"])
        for j, t in enumerate(data.times):
            for m, ct in enumerate(data.cell_types):
                w.writerow([_fmt(t), ct, _fmt(data.B[j, m]), _fmt(data.b[m])])


def _type_lookup(topology: ModelTopology) -> dict:
    """Accept either mature ids or their labels as cell_type strings."""
    out = {}
    for i, m in enumerate(topology.matures):
        out[m] = i
        out[topology.label(m)] = i
    return out


def _barcode_key(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def read_dataset(reads_path, cbc_path, topology: ModelTopology) -> ReadDataset:
    """Load reads.csv and cbc.csv into the (barcode, time, type) array.

    Observation times and types come from cbc.csv; barcodes keep their
    first-appearance order.
    """
    types = _type_lookup(topology)
    M = topology.n_mat
    cbc = {}
    times = []
    with open(cbc_path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                t = float(row["time"])
                m = types[row["cell_type"]]
                cbc[(t, m)] = (float(row["B"]), float(row["b"]))
            except KeyError as exc:
                raise ValueError(f"cbc.csv: unknown column or cell type {exc}") from None
            if t not in times:
                times.append(t)
    times = sorted(times)
    tindex = {t: j for j, t in enumerate(times)}
    B = np.zeros((len(times), M))
    b = np.full(M, np.nan)
    for (t, m), (Bv, bv) in cbc.items():
        B[tindex[t], m] = Bv
        if not np.isnan(b[m]) and b[m] != bv:
            raise ValueError("sample size b must be constant over time for each cell type")
        b[m] = bv
    missing = [(t, topology.matures[m]) for t in times for m in range(M) if (t, m) not in cbc]
    if missing:
        raise ValueError(f"cbc.csv lacks entries for {missing[:3]}")

    ids, rows = {}, []
    with open(reads_path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"barcode_id", "time", "cell_type", "read_count"}
        if not need <= set(reader.fieldnames or ()):
            raise ValueError(f"reads.csv needs columns {sorted(need)}")
        for row in reader:
            t = float(row["time"])
            if t not in tindex:
                raise ValueError(f"reads.csv time {t} not present in cbc.csv")
            ct = row["cell_type"]
            if ct not in types:
                raise ValueError(f"reads.csv cell type {ct!r} is not a mature type of the model")
            bid = _barcode_key(row["barcode_id"])
            p = ids.setdefault(bid, len(ids))
            count = float(row["read_count"])
            if count < 0:
                raise ValueError("negative read count")
            rows.append((p, tindex[t], types[ct], count))
    reads = np.zeros((len(ids), len(times), M))
    for p, j, m, c in rows:
        reads[p, j, m] += c
    if np.all(reads == np.rint(reads)):
        reads = reads.astype(np.int64)
    return ReadDataset(
        reads=reads,
        times=np.array(times),
        B=B,
        b=b,
        barcode_ids=np.array(list(ids), dtype=object if any(isinstance(k, str) for k in ids) else np.int64),
        cell_types=tuple(topology.label(m) for m in topology.matures),
    )


# ------------------------------------------------------------------ outputs


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=False)
        fh.write("\n")


def config_hash(config: dict) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(path, command: str, seed: int, config: dict):
    from . import __version__

    write_json(
        path,
        {
            "command": command,
            "seed": int(seed),
            "version": __version__,
            "config": config,
            "config_hash": config_hash(config),
        },
    )


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (int, float, np.integer, np.floating)) else v for v in r])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
