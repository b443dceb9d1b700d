"""Portable operator files (``*.mat``).

Layout: a magic line, one JSON header line, then the payload. The header
carries the basis kind, dim, hermitian flag and order tag. Payloads are
row-major complex pairs, either dense (N*N entries) or as COO triplets,
stored as text or little-endian binary.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .basis import make_basis
from .operators import TruncatedOperator

MAGIC = b"SOBOLEVLAB-OP 1\n"


def write_operator(path: str | Path, op: TruncatedOperator, storage: str = "binary", layout: str | None = None) -> Path:
    if storage not in ("binary", "text"):
        raise ValueError(f"unknown storage {storage!r}")
    layout = layout or ("coo" if op.is_sparse else "dense")
    if layout not in ("dense", "coo"):
        raise ValueError(f"unknown layout {layout!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": op.basis.kind.value,
        "dim": op.dim,
        "hermitian": bool(op.hermitian),
        "order_tag": float(op.order_tag),
        "layout": layout,
        "storage": storage,
    }
    if layout == "coo":
        coo = op.tocsr().tocoo()
        order = np.lexsort((coo.col, coo.row))
        rows, cols, vals = coo.row[order].astype("<i8"), coo.col[order].astype("<i8"), coo.data[order].astype("<c16")
        header["nnz"] = int(vals.size)
    else:
        dense = np.ascontiguousarray(op.toarray(), dtype="<c16")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        if storage == "binary":
            if layout == "coo":
                fh.write(rows.tobytes())
                fh.write(cols.tobytes())
                fh.write(vals.tobytes())
            else:
                fh.write(dense.tobytes())
        else:
            lines = []
            if layout == "coo":
                for r, c, v in zip(rows, cols, vals):
                    lines.append(f"{int(r)} {int(c)} {float(v.real)!r} {float(v.imag)!r}")
            else:
                for row in dense:
                    lines.append(" ".join(f"{float(z.real)!r} {float(z.imag)!r}" for z in row))
            fh.write(("\n".join(lines) + "\n").encode())
    return path


def read_operator(path: str | Path) -> TruncatedOperator:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an operator file")
    rest = raw[len(MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    payload = rest[nl + 1:]
    basis = make_basis(header["kind"], int(header["dim"]))
    n = basis.dim
    if header["layout"] == "coo":
        nnz = int(header["nnz"])
        if header["storage"] == "binary":
            rows = np.frombuffer(payload, "<i8", nnz, 0)
            cols = np.frombuffer(payload, "<i8", nnz, 8 * nnz)
            vals = np.frombuffer(payload, "<c16", nnz, 16 * nnz)
        else:
            table = np.loadtxt(payload.decode().splitlines(), ndmin=2) if nnz else np.zeros((0, 4))
            rows, cols = table[:, 0].astype(np.int64), table[:, 1].astype(np.int64)
            vals = table[:, 2] + 1j * table[:, 3]
        matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)
    else:
        if header["storage"] == "binary":
            matrix = np.frombuffer(payload, "<c16", n * n).reshape(n, n).copy()
        else:
            table = np.loadtxt(payload.decode().splitlines(), ndmin=2)
            matrix = table[:, 0::2] + 1j * table[:, 1::2]
    return TruncatedOperator(basis, matrix, bool(header["hermitian"]), float(header["order_tag"]))
