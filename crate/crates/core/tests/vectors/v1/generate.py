#!/usr/bin/env python3
"""Writes the v1 format fixtures with explicit little-endian packing.

Independent of the Rust writer: only `struct` and a hand-rolled FNV-1a.
Run from this directory; output is deterministic.
"""

import struct

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def container(d, rows, width):
    fmt = "<f" if width == 4 else "<d"
    payload = b"".join(struct.pack(fmt, v) for row in rows for v in row)
    head = b"CNAN" + struct.pack("<IIQB", 1, d, len(rows), width)
    return head + payload + struct.pack("<Q", fnv1a64(payload))


def container_value(i, j, d):
    return (i * d + j) * 0.375 - 1.0


def write(name, data):
    with open(name, "wb") as f:
        f.write(data)


D = 3
ROWS = [[container_value(i, j, D) for j in range(D)] for i in range(5)]
write("container_f64.cnan", container(D, ROWS, 8))
write("container_f32.cnan", container(D, ROWS, 4))
write("container_empty.cnan", container(7, [], 8))

write("dataset.cnan", container(D, ROWS, 4))
with open("dataset.toml", "w") as f:
    f.write(
        """format_version = 1
d = 3
container = "dataset.cnan"

[[templates]]
template_id = "alice-g0"
subject_id = "alice"
distribution = "gallery"
split = "val"
rows = [0, 1]

[[templates]]
template_id = "alice-p0"
subject_id = "alice"
distribution = "probe"
split = "val"
rows = [4, 2, 3]
quality_hint = [1.0, 0.0, 1.0]
media_ids = ["frame-a", "frame-b", "frame-c"]
"""
    )

# Checkpoint: d = 4, two heads, hidden [3, 2], blocks C, DTE, mean, probe
# transform on. Payload element k holds (k - 60) / 64.
TENSORS = [
    ("attention.w_q", [4, 4]),
    ("attention.w_k", [4, 4]),
    ("attention.w_v", [4, 4]),
    ("attention.w_o", [4, 4]),
    ("attention.dte_probe", [1, 4]),
    ("attention.dte_gallery", [1, 4]),
    ("context.w1", [12, 3]),
    ("context.b1", [1, 3]),
    ("context.w2", [3, 2]),
    ("context.b2", [1, 2]),
    ("context.w3", [2, 4]),
    ("context.b3", [1, 4]),
    ("probe.w", [4, 4]),
    ("probe.b", [1, 4]),
]
lines = [
    "format_version = 1",
    "d = 4",
    "heads = 2",
    "hidden = [3, 2]",
    "layout_version = 1",
    'layout = ["C", "DTE", "mean"]',
    "probe_transform = true",
    "temperature = 0.1",
    "",
]
offset = 0
for name, shape in TENSORS:
    lines += [
        "[[tensors]]",
        f'name = "{name}"',
        f"shape = [{shape[0]}, {shape[1]}]",
        f"offset = {offset}",
        "",
    ]
    offset += shape[0] * shape[1]
header = "\n".join(lines).encode()
payload = b"".join(struct.pack("<d", (k - 60) / 64) for k in range(offset))
body = header + payload
write(
    "checkpoint.cnck",
    b"CNCK" + struct.pack("<IQ", 1, len(header)) + body + struct.pack("<Q", fnv1a64(body)),
)
