"""On-disk formats: checkpoints, PPM/PGM images, CSV reports and SVG plots.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"FLOWINV1"
    8 bytes   uint64 length L of the header
    L bytes   UTF-8 JSON header (sorted keys): format_version, arch, params
              [[name, shape], ...] in declaration order, train config, seed
    rest      float64 '<f8' values of every parameter, C order, declaration order

CSV files begin with one ``# config: {json}`` comment line carrying the
resolved run configuration; :func:`read_csv` skips ``#`` lines.
"""
import csv
import io as _io
import json
import math
import struct

import numpy as np

from .training import NeuralField

MAGIC = b"FLOWINV1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, field, train_config=None, seed=None, extra=None):
    names = field.param_shapes()
    header = {
        "format_version": FORMAT_VERSION,
        "arch": field.config(),
        "params": [[n, list(s)] for n, s in names],
        "train": train_config,
        "seed": seed,
    }
    if extra:
        header["extra"] = extra
    hb = _dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for n, _ in names:
            f.write(np.ascontiguousarray(field.params[n], dtype="<f8").tobytes())


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        return _read_header(f)


def _read_header(f):
    if f.read(8) != MAGIC:
        raise CheckpointError("not a FLOWINV1 checkpoint (bad magic)")
    raw = f.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw)
    try:
        header = json.loads(f.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    version = header.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}")
    return header


def load_checkpoint(path):
    """Returns ``(field, header)``."""
    with open(path, "rb") as f:
        header = _read_header(f)
        payload = f.read()
    arch = header["arch"]
    field = NeuralField(arch["shape"], arch["n_classes"], arch["hidden"], arch["time_dim"], arch["cond_dim"],
                        params=None)
    expected = [[n, list(s)] for n, s in field.param_shapes()]
    if header["params"] != expected:
        raise CheckpointError("parameter list in header does not match the declared architecture")
    sizes = [int(np.prod(s)) for _, s in expected]
    if len(payload) != 8 * sum(sizes):
        raise CheckpointError(f"payload has {len(payload)} bytes, expected {8 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params, off = {}, 0
    for (n, s), k in zip(expected, sizes):
        params[n] = flat[off:off + k].reshape(s).copy()
        off += k
    field.params = params
    return field, header


def _to_bytes(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _comment_lines(comments):
    return "".join(f"# {line}\n" for c in comments or () for line in str(c).splitlines())


def write_ppm(path, img, comments=()):
    """RGB image ``[3, H, W]`` in [0, 1] as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM needs a [3, H, W] image, got {img.shape}")
    _, h, w = img.shape
    head = f"P6\n{_comment_lines(comments)}{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(head + _to_bytes(img).transpose(1, 2, 0).tobytes())


def write_pgm(path, m, comments=()):
    """Gray map ``[H, W]`` in [0, 1] as binary P5."""
    m = np.asarray(m)
    h, w = m.shape
    head = f"P5\n{_comment_lines(comments)}{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(head + _to_bytes(m).tobytes())


def read_pnm(path):
    """Read P5/P6 written above; returns floats in [0, 1] as [H, W] or [3, H, W]."""
    data = open(path, "rb").read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    arr = np.frombuffer(data[pos:], dtype=np.uint8).astype(np.float64) / 255.0
    if magic == "P6":
        return arr.reshape(h, w, 3).transpose(2, 0, 1)
    if magic == "P5":
        return arr.reshape(h, w)
    raise ValueError(f"unsupported image type {magic}")


def _fmt(x):
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return "" if x is None else str(x)


def write_csv(path, columns, rows, config=None):
    buf = _io.StringIO()
    if config is not None:
        buf.write(f"# config: {_dumps(config)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def read_csv(path):
    """Rows as dicts of strings, skipping ``#`` comment lines."""
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def read_csv_config(path):
    with open(path) as f:
        first = f.readline()
    if first.startswith("# config: "):
        return json.loads(first[len("# config: "):])
    return None


def svg_plot(series, title="", xlabel="", ylabel="", logx=False, logy=False, width=480, height=360,
             comment=None):
    """Line plot as an SVG string.

    ``series`` is a list of ``(label, xs, ys)``; non-positive values are
    dropped on log axes. Output is deterministic for identical input.
    """
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    tx = (lambda v: math.log10(v)) if logx else float
    ty = (lambda v: math.log10(v)) if logy else float
    pts = []
    for label, xs, ys in series:
        p = [(tx(x), ty(y)) for x, y in zip(xs, ys)
             if math.isfinite(x) and math.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)]
        pts.append((label, p))
    allp = [q for _, p in pts for q in p] or [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(q[0] for q in allp), max(q[0] for q in allp)
    y0, y1 = min(q[1] for q in allp), max(q[1] for q in allp)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ml, mr, mt, mb = 60, 120, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    if comment:
        out.append(f"<!-- {str(comment).replace('--', '- -')} -->")
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="11" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        fy = y0 + (y1 - y0) * k / 4
        lx = f"1e{fx:.2g}" if logx else f"{fx:.3g}"
        ly = f"1e{fy:.2g}" if logy else f"{fy:.3g}"
        out.append(f'<text x="{sx(fx):.1f}" y="{mt + ph + 14}" text-anchor="middle" font-size="9">{lx}</text>')
        out.append(f'<text x="{ml - 4}" y="{sy(fy) + 3:.1f}" text-anchor="end" font-size="9">{ly}</text>')
    for k, (label, p) in enumerate(pts):
        col = palette[k % len(palette)]
        if p:
            coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in p)
            out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{coords}"/>')
        ly = mt + 14 + 16 * k
        out.append(f'<line x1="{ml + pw + 8}" y1="{ly - 4}" x2="{ml + pw + 24}" y2="{ly - 4}" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 28}" y="{ly}" font-size="10">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_svg(path, *args, **kwargs):
    with open(path, "w") as f:
        f.write(svg_plot(*args, **kwargs))
