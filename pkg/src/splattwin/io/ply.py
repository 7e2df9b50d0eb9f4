"""Binary PLY serialization of Gaussian clouds in the layout GS viewers expect.

Higher-order SH coefficients are stored channel-major: ``f_rest_{c*(K-1)+k-1}``
holds coefficient ``k`` of colour channel ``c``.  Two extra ``uchar``
properties, ``damage_label`` and ``frozen``, carry the hierarchy state.
"""
from __future__ import annotations

import os

import numpy as np

from ..errors import FormatError, UnsupportedFormatError
from ..gaussians import GaussianCloud, sh_degree_of

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
REQUIRED = (["x", "y", "z"] + [f"f_dc_{i}" for i in range(3)] + ["opacity"]
            + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])


def _vertex_dtype(n_rest: int) -> np.dtype:
    names = (["x", "y", "z", "nx", "ny", "nz"] + [f"f_dc_{i}" for i in range(3)]
             + [f"f_rest_{i}" for i in range(n_rest)] + ["opacity"]
             + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])
    fields = [(n, "<f4") for n in names] + [("damage_label", "u1"), ("frozen", "u1")]
    return np.dtype(fields)


def write_ply(cloud: GaussianCloud, path) -> None:
    n, K = cloud.count, cloud.sh_coeffs.shape[1]
    if np.any(cloud.damage_label > 255) or np.any(cloud.damage_label < 0):
        raise FormatError("damage labels must fit in an unsigned byte")
    dt = _vertex_dtype(3 * (K - 1))
    v = np.zeros(n, dtype=dt)
    for i, axis in enumerate("xyz"):
        v[axis] = cloud.positions[:, i]
    for c in range(3):
        v[f"f_dc_{c}"] = cloud.sh_coeffs[:, 0, c]
        for k in range(1, K):
            v[f"f_rest_{c * (K - 1) + k - 1}"] = cloud.sh_coeffs[:, k, c]
    v["opacity"] = cloud.logit_opacities
    for i in range(3):
        v[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        v[f"rot_{i}"] = cloud.rotations[:, i]
    v["damage_label"] = cloud.damage_label
    v["frozen"] = cloud.frozen
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for name in dt.names:
        header.append(f"property {'uchar' if dt[name].itemsize == 1 else 'float'} {name}")
    header.append("end_header")
    with open(os.fspath(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(v.tobytes())


def _read_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise FormatError(f"{path}: not a PLY file")
    elements = []
    fmt = None
    while True:
        raw = fh.readline()
        if not raw:
            raise FormatError(f"{path}: header ends without end_header")
        tok = raw.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element" and len(tok) == 3:
            try:
                elements.append((tok[1], int(tok[2]), []))
            except ValueError:
                raise FormatError(f"{path}: bad element count {tok[2]!r}") from None
        elif tok[0] == "property" and elements:
            if tok[1] == "list":
                raise UnsupportedFormatError(f"{path}: list property {tok[-1]} not supported")
            if len(tok) != 3 or tok[1] not in PLY_TYPES:
                raise FormatError(f"{path}: bad property line {raw!r}")
            elements[-1][2].append((tok[2], "<" + PLY_TYPES[tok[1]]))
        else:
            raise FormatError(f"{path}: unexpected header line {raw!r}")
    if fmt != "binary_little_endian":
        raise UnsupportedFormatError(f"{path}: PLY format {fmt} (only binary_little_endian)")
    return elements


def read_ply(path) -> GaussianCloud:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        elements = _read_header(fh, path)
        data = fh.read()
    offset = 0
    vertex = None
    for name, count, props in elements:
        dt = np.dtype(props)
        size = dt.itemsize * count
        if count < 0 or offset + size > len(data):
            raise FormatError(f"{path}: truncated {name} data")
        if name == "vertex":
            vertex = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            break
        offset += size
    if vertex is None:
        raise FormatError(f"{path}: no vertex element")
    names = set(vertex.dtype.names or ())
    missing = [p for p in REQUIRED if p not in names]
    if missing:
        raise FormatError(f"{path}: missing required properties: {', '.join(missing)}")
    n_rest = sum(1 for p in names if p.startswith("f_rest_"))
    if n_rest % 3 or any(f"f_rest_{i}" not in names for i in range(n_rest)):
        raise FormatError(f"{path}: f_rest properties must be f_rest_0..f_rest_(3m-1)")
    K = n_rest // 3 + 1
    try:
        sh_degree_of(K)
    except ValueError:
        raise FormatError(f"{path}: {n_rest} f_rest properties is not a valid SH block") from None

    def col(p):
        return vertex[p].astype(np.float64)

    n = len(vertex)
    sh = np.empty((n, K, 3))
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
        for k in range(1, K):
            sh[:, k, c] = col(f"f_rest_{c * (K - 1) + k - 1}")
    labels = vertex["damage_label"].astype(np.int64) if "damage_label" in names else None
    frozen = vertex["frozen"] != 0 if "frozen" in names else None
    return GaussianCloud(np.stack([col(a) for a in "xyz"], 1),
                         np.stack([col(f"rot_{i}") for i in range(4)], 1),
                         np.stack([col(f"scale_{i}") for i in range(3)], 1),
                         col("opacity"), sh, frozen, labels)
