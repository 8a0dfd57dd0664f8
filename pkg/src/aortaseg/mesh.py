"""Isosurface extraction from binary masks, mesh statistics, STL/OBJ I/O.

Marching cubes on the 0/1 voxel field: the mask is zero-padded by one
voxel (so surfaces close), each 2x2x2 cell is triangulated from a
256-case table, and vertices are placed on lattice edges at the iso
level (0.5 -> edge midpoints) then scaled into physical mm coordinates.

The case table is generated at import time from a fixed rule: on an
ambiguous face (foreground corners on one diagonal) the crossing
segments always separate the foreground corners, so both cells adjacent
to a face agree on its triangulation and the extracted surface is
watertight for every input mask. Crossing-point loops of length 3 are
emitted directly; longer loops are fanned from their centroid.
Triangles are wound so normals point out of the foreground.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Volume

# cube corner c sits at ((c>>0)&1, (c>>1)&1, (c>>2)&1)
_CORNER_COORDS = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=np.int64)
_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]
_EDGE_AXIS = [int(np.log2(a ^ b)) for a, b in _EDGES]


def _face_cycles():
    """The 6 cube faces as cyclically ordered corner quadruples."""
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            cycle = []
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                bits = [0, 0, 0]
                bits[axis] = side
                bits[u] = du
                bits[v] = dv
                cycle.append(bits[0] | (bits[1] << 1) | (bits[2] << 2))
            faces.append(cycle)
    return faces


_FACES = _face_cycles()
_EDGE_INDEX = {e: i for i, e in enumerate(_EDGES)}


def _face_segments(cycle, inside):
    """Crossing-point connections on one face; ambiguous faces separate
    the inside corners."""
    cross = []
    for i in range(4):
        a, b = cycle[i], cycle[(i + 1) % 4]
        if inside[a] != inside[b]:
            cross.append((i, _EDGE_INDEX[(min(a, b), max(a, b))]))
    if len(cross) == 2:
        return [(cross[0][1], cross[1][1])]
    if len(cross) == 4:
        segments = []
        for i in range(4):
            if inside[cycle[i]]:
                prev_edge = _EDGE_INDEX[(min(cycle[i - 1], cycle[i]), max(cycle[i - 1], cycle[i]))]
                next_edge = _EDGE_INDEX[(min(cycle[i], cycle[(i + 1) % 4]), max(cycle[i], cycle[(i + 1) % 4]))]
                segments.append((prev_edge, next_edge))
        return segments
    return []


def _build_case_table():
    """Per configuration: the oriented crossing-point loops.

    Loops of length 3 become single triangles at extraction; longer
    loops are fanned from their centroid. Fanning from a loop vertex
    would create chords that can coincide between diagonal cells,
    yielding edges shared by four triangles; centroid fans keep every
    edge on exactly two triangles for any input.
    """
    table = []
    midpoints = {
        i: (_CORNER_COORDS[a] + _CORNER_COORDS[b]) / 2.0 for i, (a, b) in enumerate(_EDGES)
    }
    for config in range(256):
        inside = [(config >> c) & 1 for c in range(8)]
        adjacency = {}
        for cycle in _FACES:
            for e1, e2 in _face_segments(cycle, inside):
                adjacency.setdefault(e1, []).append(e2)
                adjacency.setdefault(e2, []).append(e1)

        loops = []
        visited = set()
        for start in adjacency:
            if start in visited:
                continue
            loop = [start]
            visited.add(start)
            prev, cur = None, start
            while True:
                # every crossing edge has exactly two neighbors; step to
                # the one we did not come from
                step = next(e for e in adjacency[cur] if e != prev)
                if step == loop[0]:
                    break
                loop.append(step)
                visited.add(step)
                prev, cur = cur, step

            pts = np.array([midpoints[e] for e in loop])
            normal = np.zeros(3)
            for i in range(len(pts)):
                p, q = pts[i], pts[(i + 1) % len(pts)]
                normal += np.cross(p, q)
            hint = np.zeros(3)
            for e in loop:
                a, b = _EDGES[e]
                if inside[a]:
                    hint += _CORNER_COORDS[b] - _CORNER_COORDS[a]
                else:
                    hint += _CORNER_COORDS[a] - _CORNER_COORDS[b]
            if normal @ hint < 0:
                loop.reverse()
            loops.append(tuple(loop))
        table.append(loops)
    return table


_CASE_TABLE = _build_case_table()


@dataclass
class TriMesh:
    """Triangle surface in physical (mm) coordinates."""

    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.triangles) and self.triangles.min() < 0:
            raise ValueError("negative triangle index")


def _triangle_areas(vertices, triangles):
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def marching_cubes(mask: Volume, level: float = 0.5, smooth_iters: int = 0) -> TriMesh:
    """Extract the iso-surface of a binary mask as a triangle mesh.

    The mask is zero-padded by one voxel first, so the surface is always
    closed. ``smooth_iters`` applies Taubin smoothing (lambda = 0.5,
    mu = -0.53), which relaxes the staircase without shrinking volume.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"iso level must be in (0, 1), got {level}")
    fg = mask.data > 0
    if not fg.any():
        raise ValueError("cannot mesh an empty mask")
    padded = np.pad(fg, 1).astype(np.uint8)

    nx, ny, nz = padded.shape
    config = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint8)
    for c in range(8):
        dx, dy, dz = _CORNER_COORDS[c]
        config |= (padded[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1] << c)
    cells = np.argwhere((config != 0) & (config != 255))

    spacing = np.asarray(mask.spacing)
    origin = np.asarray(mask.origin)
    vertex_ids: dict[tuple, int] = {}
    vertex_pos: list[np.ndarray] = []
    tris: list[tuple[int, int, int]] = []

    def vertex_for(cell, edge):
        a, b = _EDGES[edge]
        ca = _CORNER_COORDS[a] + cell
        cb = _CORNER_COORDS[b] + cell
        lo, hi = (ca, cb) if tuple(ca) < tuple(cb) else (cb, ca)
        key = (lo[0], lo[1], lo[2], _EDGE_AXIS[edge])
        idx = vertex_ids.get(key)
        if idx is None:
            if padded[tuple(lo)]:
                pos = hi + float(level) * (lo - hi)
            else:
                pos = lo + float(level) * (hi - lo)
            idx = len(vertex_pos)
            vertex_ids[key] = idx
            # shift by the pad voxel, scale into mm
            vertex_pos.append(origin + (pos - 1.0) * spacing)
        return idx

    for cell in cells:
        for loop in _CASE_TABLE[config[tuple(cell)]]:
            ids = [vertex_for(cell, e) for e in loop]
            if len(ids) == 3:
                tris.append((ids[0], ids[1], ids[2]))
                continue
            centroid_id = len(vertex_pos)
            vertex_pos.append(np.mean([vertex_pos[i] for i in ids], axis=0))
            for i in range(len(ids)):
                tris.append((centroid_id, ids[i], ids[(i + 1) % len(ids)]))

    mesh = TriMesh(np.array(vertex_pos), np.array(tris, dtype=np.int64))
    areas = _triangle_areas(mesh.vertices, mesh.triangles)
    mesh = TriMesh(mesh.vertices, mesh.triangles[areas > 0.0])
    if smooth_iters > 0:
        mesh = taubin_smooth(mesh, smooth_iters)
    return mesh


def taubin_smooth(mesh: TriMesh, iterations: int, lam: float = 0.5, mu: float = -0.53) -> TriMesh:
    """Volume-preserving two-pass Laplacian smoothing."""
    verts = mesh.vertices.copy()
    tri = mesh.triangles
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    counts = np.zeros(len(verts))
    np.add.at(counts, edges[:, 0], 1)
    np.add.at(counts, edges[:, 1], 1)
    counts = np.maximum(counts, 1)[:, None]

    def laplace(v):
        acc = np.zeros_like(v)
        np.add.at(acc, edges[:, 0], v[edges[:, 1]])
        np.add.at(acc, edges[:, 1], v[edges[:, 0]])
        return acc / counts - v

    for _ in range(iterations):
        verts = verts + lam * laplace(verts)
        verts = verts + mu * laplace(verts)
    return TriMesh(verts, tri)


def mesh_stats(mesh: TriMesh) -> dict:
    """Watertightness, Euler characteristic, volume, area, components.

    watertight <=> every undirected edge is shared by exactly two
    triangles. Volume is signed (divergence theorem), positive for
    outward winding.
    """
    tri = mesh.triangles
    verts = mesh.vertices
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    edges_sorted = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges_sorted, axis=0, return_counts=True)
    watertight = bool(len(tri)) and bool((counts == 2).all())

    used = np.unique(tri)
    euler = int(len(used) - len(uniq) + len(tri))

    a = verts[tri[:, 0]]
    b = verts[tri[:, 1]]
    c = verts[tri[:, 2]]
    volume = float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)
    area = float(_triangle_areas(verts, tri).sum())

    parent = np.arange(len(verts))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for e0, e1 in uniq:
        r0, r1 = find(e0), find(e1)
        if r0 != r1:
            parent[r0] = r1
    n_components = len({find(i) for i in used})

    return {
        "watertight": watertight,
        "euler": euler,
        "volume": volume,
        "area": area,
        "n_components": n_components,
    }


# ---------------------------------------------------------------------------
# STL / OBJ
# ---------------------------------------------------------------------------

_STL_TRI_DTYPE = np.dtype(
    [("normal", "<f4", 3), ("vertices", "<f4", (3, 3)), ("attr", "<u2")]
)


def save_mesh(mesh: TriMesh, path, format: str = "stl_binary") -> None:
    """Write binary STL (80-byte header + 50-byte triangles) or OBJ."""
    if len(mesh.triangles) == 0:
        raise ValueError("cannot save an empty mesh")
    path = Path(path)
    if format == "stl_binary":
        _save_stl(mesh, path)
    elif format == "obj":
        _save_obj(mesh, path)
    else:
        raise ValueError(f"unknown mesh format {format!r} (use 'stl_binary' or 'obj')")


def _save_stl(mesh: TriMesh, path: Path) -> None:
    # cast to f32 BEFORE computing normals so a save/load/save cycle is
    # byte-identical
    verts32 = mesh.vertices.astype(np.float32)
    tri = mesh.triangles
    a = verts32[tri[:, 0]].astype(np.float64)
    b = verts32[tri[:, 1]].astype(np.float64)
    c = verts32[tri[:, 2]].astype(np.float64)
    n = np.cross(b - a, c - a)
    lengths = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, lengths, out=np.zeros_like(n), where=lengths > 0)

    records = np.zeros(len(tri), dtype=_STL_TRI_DTYPE)
    records["normal"] = n.astype(np.float32)
    records["vertices"][:, 0] = verts32[tri[:, 0]]
    records["vertices"][:, 1] = verts32[tri[:, 1]]
    records["vertices"][:, 2] = verts32[tri[:, 2]]
    header = b"binary STL surface mesh".ljust(80, b"\x00")
    with open(path, "wb") as f:
        f.write(header)
        f.write(struct.pack("<I", len(tri)))
        f.write(records.tobytes())


def load_stl(path) -> TriMesh:
    """Read a binary STL back; exact f32 vertex values are preserved."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 84:
        raise IOError(f"{path}: truncated STL file")
    (count,) = struct.unpack_from("<I", raw, 80)
    expected = 84 + count * _STL_TRI_DTYPE.itemsize
    if len(raw) < expected:
        raise IOError(f"{path}: STL payload truncated ({len(raw)} < {expected} bytes)")
    records = np.frombuffer(raw[84:expected], dtype=_STL_TRI_DTYPE)
    soup = records["vertices"].reshape(-1, 3)
    verts, inverse = np.unique(soup, axis=0, return_inverse=True)
    return TriMesh(verts.astype(np.float64), inverse.reshape(-1, 3))


def _save_obj(mesh: TriMesh, path: Path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
