"""File formats: PLY/OBJ meshes, PFM/PNG images, Radiance HDR (read-only), JSON.

Float formats round-trip bit-exactly at float32 precision; PNG masks
round-trip exactly. Malformed files raise :class:`ParseError` carrying the
byte offset and what was expected there.
"""

import json
import struct

import numpy as np
from PIL import Image

from .camera import Camera
from .errors import DataError, ParseError
from .mesh import TriangleMesh

# ---------------------------------------------------------------------------
# sRGB <-> linear
# ---------------------------------------------------------------------------


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * x ** (1.0 / 2.4) - 0.055)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def save_ply(path, vertices, faces=None, normals=None, extra=None, binary=True):
    """Write a PLY file; ``extra`` maps property name -> per-vertex float array."""
    v = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    props = [("x", v[:, 0]), ("y", v[:, 1]), ("z", v[:, 2])]
    if normals is not None:
        n = np.asarray(normals, dtype=np.float32).reshape(-1, 3)
        props += [("nx", n[:, 0]), ("ny", n[:, 1]), ("nz", n[:, 2])]
    if extra:
        for name, arr in extra.items():
            props.append((name, np.asarray(arr, dtype=np.float32).reshape(-1)))
    fmt = "binary_little_endian" if binary else "ascii"
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {len(v)}"]
    lines += [f"property float {name}" for name, _ in props]
    nf = 0 if faces is None else len(faces)
    lines += [f"element face {nf}", "property list uchar int vertex_indices", "end_header"]
    header = ("\n".join(lines) + "\n").encode("ascii")
    cols = np.stack([p for _, p in props], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            fh.write(cols.tobytes())
            if nf:
                f = np.asarray(faces, dtype="<i4").reshape(-1, 3)
                rec = np.empty(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                rec["n"] = 3
                rec["i"] = f
                fh.write(rec.tobytes())
        else:
            for row in cols:
                fh.write((" ".join(repr(float(x)) for x in row) + "\n").encode("ascii"))
            if nf:
                for tri in np.asarray(faces, dtype=np.int64).reshape(-1, 3):
                    fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode("ascii"))


def load_ply(path):
    """Read a PLY file written by :func:`save_ply` (plus common variants).

    Returns dict with vertices, faces (may be empty), and any float vertex
    properties by name (normals under nx/ny/nz).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def next_line():
        nonlocal off
        end = data.find(b"\n", off)
        if end < 0:
            raise ParseError(path, off, "a newline-terminated header line")
        line = data[off:end].decode("ascii", errors="replace").strip()
        off = end + 1
        return line

    if next_line() != "ply":
        raise ParseError(path, 0, "magic 'ply'")
    fmt_line = next_line()
    if not fmt_line.startswith("format "):
        raise ParseError(path, off, "'format' line")
    fmt = fmt_line.split()[1]
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(path, off, "ascii or binary_little_endian format")

    elements = []  # (name, count, [(prop_name, dtype) or ('list', ...)])
    while True:
        line = next_line()
        if line == "end_header":
            break
        if line.startswith("comment") or line.startswith("obj_info"):
            continue
        if line.startswith("element "):
            _, name, cnt = line.split()
            elements.append([name, int(cnt), []])
        elif line.startswith("property "):
            if not elements:
                raise ParseError(path, off, "'element' before 'property'")
            parts = line.split()
            if parts[1] == "list":
                elements[-1][2].append(("__list__", (parts[2], parts[3])))
            else:
                elements[-1][2].append((parts[-1], parts[1]))
        else:
            raise ParseError(path, off, "element/property/end_header")

    scalar_np = {
        "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
        "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
        "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
        "short": "<i2", "ushort": "<u2",
    }
    out = {"vertices": np.zeros((0, 3)), "faces": np.zeros((0, 3), dtype=np.int32), "properties": {}}

    if fmt == "ascii":
        text = data[off:].decode("ascii", errors="replace").split()
        pos = 0
        for name, cnt, props in elements:
            if name == "vertex":
                names = [p for p, _ in props]
                vals = np.array(text[pos : pos + cnt * len(props)], dtype=np.float64)
                if len(vals) != cnt * len(props):
                    raise ParseError(path, len(data), f"{cnt * len(props)} vertex scalars")
                pos += cnt * len(props)
                vals = vals.reshape(cnt, len(props))
                for i, pn in enumerate(names):
                    out["properties"][pn] = vals[:, i]
            elif name == "face":
                faces = []
                for _ in range(cnt):
                    k = int(text[pos])
                    idx = [int(x) for x in text[pos + 1 : pos + 1 + k]]
                    pos += 1 + k
                    for j in range(1, k - 1):
                        faces.append([idx[0], idx[j], idx[j + 1]])
                out["faces"] = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
    else:
        for name, cnt, props in elements:
            if name == "vertex":
                if any(p == "__list__" for p, _ in props):
                    raise ParseError(path, off, "scalar-only vertex properties")
                dt = np.dtype([(p, scalar_np[t]) for p, t in props])
                need = cnt * dt.itemsize
                if len(data) - off < need:
                    raise ParseError(path, len(data), f"{need} bytes of vertex data")
                rec = np.frombuffer(data, dtype=dt, count=cnt, offset=off)
                off += need
                for p, _ in props:
                    out["properties"][p] = rec[p].astype(np.float64)
            elif name == "face":
                faces = np.empty((cnt, 3), dtype=np.int32)
                for i in range(cnt):
                    if len(data) - off < 1:
                        raise ParseError(path, len(data), "face vertex count byte")
                    k = data[off]
                    off += 1
                    if k != 3:
                        raise ParseError(path, off - 1, "triangle faces (count 3)")
                    if len(data) - off < 12:
                        raise ParseError(path, len(data), "12 bytes of face indices")
                    faces[i] = struct.unpack_from("<3i", data, off)
                    off += 12
                out["faces"] = faces

    p = out["properties"]
    if not all(k in p for k in ("x", "y", "z")):
        raise ParseError(path, len(data), "x/y/z vertex properties")
    out["vertices"] = np.stack([p["x"], p["y"], p["z"]], axis=1)
    if all(k in p for k in ("nx", "ny", "nz")):
        out["normals"] = np.stack([p["nx"], p["ny"], p["nz"]], axis=1)
    return out


def save_mesh(path, mesh: TriangleMesh, binary=True):
    save_ply(path, mesh.vertices, mesh.faces, normals=mesh.normals, binary=binary)


def load_mesh(path):
    path = str(path)
    if path.endswith(".obj"):
        return load_obj(path)
    d = load_ply(path)
    normals = d.get("normals")
    if normals is not None:
        lens = np.linalg.norm(normals, axis=1)
        if np.any(lens < 1e-12):
            normals = None
        else:
            normals = normals / lens[:, None]
    return TriangleMesh(d["vertices"], d["faces"], normals=normals)


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------


def save_obj(path, mesh: TriangleMesh):
    with open(path, "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for n in mesh.normals:
            fh.write(f"vn {n[0]!r} {n[1]!r} {n[2]!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0]+1}//{f[0]+1} {f[1]+1}//{f[1]+1} {f[2]+1}//{f[2]+1}\n")


def load_obj(path):
    verts, normals, faces = [], [], []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("ascii", errors="replace").strip()
            try:
                if line.startswith("v "):
                    verts.append([float(x) for x in line.split()[1:4]])
                elif line.startswith("vn "):
                    normals.append([float(x) for x in line.split()[1:4]])
                elif line.startswith("f "):
                    idx = [int(tok.split("/")[0]) - 1 for tok in line.split()[1:]]
                    for j in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[j], idx[j + 1]])
            except (ValueError, IndexError) as exc:
                raise ParseError(path, offset, f"valid OBJ record ({line[:30]!r})") from exc
            offset += len(raw)
    if not verts:
        raise ParseError(path, offset, "at least one vertex")
    n = np.asarray(normals) if len(normals) == len(verts) else None
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int32), normals=n)


# ---------------------------------------------------------------------------
# PFM (float images; scanlines stored bottom-up, negative scale = little endian)
# ---------------------------------------------------------------------------


def save_pfm(path, image):
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        header = b"Pf\n"
        data = img[::-1]
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF\n"
        data = img[::-1]
    else:
        raise DataError("PFM supports HxW or HxWx3 float images")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{img.shape[1]} {img.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_pfm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def token():
        nonlocal off
        while off < len(data) and data[off : off + 1].isspace():
            off += 1
        start = off
        while off < len(data) and not data[off : off + 1].isspace():
            off += 1
        if start == off:
            raise ParseError(path, start, "a PFM header token")
        return data[start:off]

    magic = token()
    if magic not in (b"PF", b"Pf"):
        raise ParseError(path, 0, "magic 'PF' or 'Pf'")
    channels = 3 if magic == b"PF" else 1
    try:
        w = int(token())
        h = int(token())
        scale = float(token())
    except ValueError as exc:
        raise ParseError(path, off, "integer dims and float scale") from exc
    off += 1  # single whitespace after the scale token
    count = w * h * channels
    dt = "<f4" if scale < 0 else ">f4"
    if len(data) - off < count * 4:
        raise ParseError(path, len(data), f"{count * 4} bytes of pixel data")
    img = np.frombuffer(data, dtype=dt, count=count, offset=off).astype(np.float64)
    img = img.reshape(h, w, channels)[::-1]
    if abs(scale) not in (0.0, 1.0):
        img = img * abs(scale)
    return img[:, :, 0] if channels == 1 else img


# ---------------------------------------------------------------------------
# PNG (8-bit sRGB display images and binary masks) via Pillow
# ---------------------------------------------------------------------------


def save_png(path, image):
    """Tone-clip a linear image to [0,1], sRGB-encode, write 8-bit PNG."""
    img = linear_to_srgb(image)
    arr = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path)


def load_png(path):
    """Read an 8-bit PNG and inverse-sRGB-decode it to linear floats."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def save_mask(path, mask):
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path):
    arr = np.asarray(Image.open(path).convert("L"))
    return arr > 127


# ---------------------------------------------------------------------------
# Radiance HDR (RGBE), read-only
# ---------------------------------------------------------------------------


def load_hdr(path):
    """Decode a Radiance .hdr (RGBE) file to linear float RGB."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not (data.startswith(b"#?RADIANCE") or data.startswith(b"#?RGBE")):
        raise ParseError(path, 0, "Radiance magic '#?RADIANCE'")
    off = data.find(b"\n") + 1
    # header lines until the blank separator
    while True:
        end = data.find(b"\n", off)
        if end < 0:
            raise ParseError(path, off, "end of header")
        line = data[off:end]
        off = end + 1
        if line == b"":
            break
        if line.startswith(b"FORMAT=") and b"32-bit_rle_rgbe" not in line:
            raise ParseError(path, off, "FORMAT=32-bit_rle_rgbe")
    end = data.find(b"\n", off)
    if end < 0:
        raise ParseError(path, off, "resolution line")
    res = data[off:end].split()
    off = end + 1
    if len(res) != 4 or res[0] != b"-Y" or res[2] != b"+X":
        raise ParseError(path, off, "resolution line '-Y H +X W'")
    h, w = int(res[1]), int(res[3])

    rgbe = np.zeros((h, w, 4), dtype=np.uint8)
    for row in range(h):
        if len(data) - off < 4:
            raise ParseError(path, len(data), "scanline header")
        if data[off] == 2 and data[off + 1] == 2 and (data[off + 2] << 8 | data[off + 3]) == w:
            off += 4
            for ch in range(4):
                x = 0
                while x < w:
                    if off >= len(data):
                        raise ParseError(path, len(data), "RLE run byte")
                    run = data[off]
                    off += 1
                    if run > 128:  # run of one repeated value
                        n = run - 128
                        if off >= len(data) or x + n > w:
                            raise ParseError(path, off, "valid RLE repeat run")
                        rgbe[row, x : x + n, ch] = data[off]
                        off += 1
                        x += n
                    else:  # literal run
                        n = run
                        if n == 0 or x + n > w or len(data) - off < n:
                            raise ParseError(path, off, "valid RLE literal run")
                        rgbe[row, x : x + n, ch] = np.frombuffer(data, np.uint8, n, off)
                        off += n
                        x += n
        else:
            need = 4 * w
            if len(data) - off < need:
                raise ParseError(path, len(data), f"{need} bytes of flat RGBE")
            rgbe[row] = np.frombuffer(data, np.uint8, need, off).reshape(w, 4)
            off += need

    e = rgbe[:, :, 3].astype(np.int32)
    scale = np.where(e == 0, 0.0, np.ldexp(1.0, e - 136))
    return rgbe[:, :, :3].astype(np.float64) * scale[:, :, None]


def load_env_image(path):
    path = str(path)
    if path.endswith(".hdr"):
        return load_hdr(path)
    if path.endswith(".pfm"):
        img = load_pfm(path)
        return np.repeat(img[:, :, None], 3, axis=2) if img.ndim == 2 else img
    raise DataError(f"environment maps must be .hdr or .pfm, got {path}")


# ---------------------------------------------------------------------------
# JSON cameras and manifests
# ---------------------------------------------------------------------------


def save_camera(path, camera: Camera):
    with open(path, "w", encoding="ascii") as fh:
        json.dump(camera.to_dict(), fh, indent=1)


def load_camera(path):
    try:
        with open(path, "r", encoding="ascii") as fh:
            return Camera.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.pos, "valid JSON") from exc


def save_json(path, obj):
    with open(path, "w", encoding="ascii") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def load_json(path):
    try:
        with open(path, "r", encoding="ascii") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.pos, "valid JSON") from exc
