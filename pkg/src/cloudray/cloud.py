"""Point clouds with per-point capture features, plus PLY ingestion/emission."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEUTRAL_COLOR = np.array([0.5, 0.5, 0.5])


@dataclass
class CaptureFeatures:
    """Per-point record of how a point was captured.

    ``ray_dir`` is the unit camera-ray direction, ``du``/``dv`` the 3-space
    offsets to the points of the next pixel in x/y, ``cam_axis`` the optical
    axis of the capturing camera.
    """

    ray_dir: np.ndarray   # (n, 3)
    du: np.ndarray        # (n, 3)
    dv: np.ndarray        # (n, 3)
    cam_axis: np.ndarray  # (n, 3)

    @staticmethod
    def zeros(n: int) -> "CaptureFeatures":
        z = np.zeros((n, 3))
        return CaptureFeatures(z.copy(), z.copy(), z.copy(), z.copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.ray_dir, self.du, self.dv, self.cam_axis], axis=1)

    def subset(self, idx) -> "CaptureFeatures":
        return CaptureFeatures(self.ray_dir[idx], self.du[idx], self.dv[idx],
                               self.cam_axis[idx])


@dataclass
class PointCloud:
    """Positions plus optional colors, capture features, and materials.

    ``has_color`` / ``has_capture`` are the per-point validity indicators;
    where a slot is invalid the color holds the neutral gray fill and the
    capture features hold zeros.
    """

    positions: np.ndarray                      # (n, 3)
    colors: np.ndarray | None = None           # (n, 3) in [0, 1]
    capture: CaptureFeatures | None = None
    materials: np.ndarray | None = None        # (n, 12), see render.Material
    has_color: np.ndarray = field(default=None)    # (n,) bool
    has_capture: np.ndarray = field(default=None)  # (n,) bool

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if self.colors is None:
            self.colors = np.broadcast_to(NEUTRAL_COLOR, (n, 3)).copy()
            if self.has_color is None:
                self.has_color = np.zeros(n, dtype=bool)
        else:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if self.has_color is None:
                self.has_color = np.ones(n, dtype=bool)
        if self.capture is None:
            self.capture = CaptureFeatures.zeros(n)
            if self.has_capture is None:
                self.has_capture = np.zeros(n, dtype=bool)
        elif self.has_capture is None:
            self.has_capture = np.ones(n, dtype=bool)
        self.has_color = np.asarray(self.has_color, dtype=bool).reshape(n)
        self.has_capture = np.asarray(self.has_capture, dtype=bool).reshape(n)
        for name in ("colors",):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match positions")
        if self.materials is not None:
            self.materials = np.asarray(self.materials, dtype=np.float64).reshape(n, -1)

    def __len__(self) -> int:
        return len(self.positions)

    def drop_colors(self) -> None:
        """Mark colors invalid and overwrite them with the neutral fill."""
        self.colors = np.broadcast_to(NEUTRAL_COLOR, (len(self), 3)).copy()
        self.has_color[:] = False

    def drop_capture(self) -> None:
        """Mark capture features invalid and zero them."""
        self.capture = CaptureFeatures.zeros(len(self))
        self.has_capture[:] = False

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.positions[idx], self.colors[idx],
                          self.capture.subset(idx),
                          None if self.materials is None else self.materials[idx],
                          self.has_color[idx], self.has_capture[idx])

    def extend(self, positions: np.ndarray, colors: np.ndarray) -> "PointCloud":
        """New cloud with appended points (no capture features on the new ones)."""
        m = len(positions)
        cap = CaptureFeatures(
            np.concatenate([self.capture.ray_dir, np.zeros((m, 3))]),
            np.concatenate([self.capture.du, np.zeros((m, 3))]),
            np.concatenate([self.capture.dv, np.zeros((m, 3))]),
            np.concatenate([self.capture.cam_axis, np.zeros((m, 3))]),
        )
        mats = None
        if self.materials is not None:
            mats = np.concatenate([self.materials,
                                   np.tile(self.materials.mean(axis=0), (m, 1))])
        return PointCloud(
            np.concatenate([self.positions, np.asarray(positions).reshape(-1, 3)]),
            np.concatenate([self.colors, np.asarray(colors).reshape(-1, 3)]),
            cap, mats,
            np.concatenate([self.has_color, np.ones(m, dtype=bool)]),
            np.concatenate([self.has_capture, np.zeros(m, dtype=bool)]),
        )


def save_ply(path, cloud: PointCloud, normals: np.ndarray | None = None,
             binary: bool = True) -> None:
    """Write positions (float32), optional uint8 colors and float32 normals."""
    n = len(cloud)
    props = ["property float x", "property float y", "property float z"]
    if cloud.has_color.any():
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    if normals is not None:
        props += ["property float nx", "property float ny", "property float nz"]
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        *props,
        "end_header",
    ]) + "\n"
    pos = cloud.positions.astype("<f4")
    cols = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8) \
        if cloud.has_color.any() else None
    nrm = None if normals is None else np.asarray(normals).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if cols is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            if nrm is not None:
                fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
            rec = np.zeros(n, dtype=np.dtype(fields))
            rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
            if cols is not None:
                rec["red"], rec["green"], rec["blue"] = cols[:, 0], cols[:, 1], cols[:, 2]
            if nrm is not None:
                rec["nx"], rec["ny"], rec["nz"] = nrm[:, 0], nrm[:, 1], nrm[:, 2]
            fh.write(rec.tobytes())
        else:
            for i in range(n):
                row = [f"{v:g}" for v in pos[i]]
                if cols is not None:
                    row += [str(int(v)) for v in cols[i]]
                if nrm is not None:
                    row += [f"{v:g}" for v in nrm[i]]
                fh.write((" ".join(row) + "\n").encode("ascii"))


def load_ply(path) -> PointCloud:
    """Read ascii or binary_little_endian PLY with x/y/z and optional colors."""
    with open(path, "rb") as fh:
        data = fh.read()
    head_end = data.find(b"end_header")
    if not data.startswith(b"ply") or head_end < 0:
        raise ValueError(f"{path} is not a PLY file")
    header = data[:head_end].decode("ascii", errors="replace").splitlines()
    body = data[head_end + len(b"end_header") + 1:]
    fmt, count, props = None, 0, []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] != "vertex" and count:
                raise ValueError("only vertex elements are supported")
            if parts[1] == "vertex":
                count = int(parts[2])
        elif parts[0] == "property" and parts[1] != "list":
            props.append((parts[2], parts[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    typemap = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
               "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
               "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4",
               "uint": "<u4", "uint32": "<u4"}
    names = [p[0] for p in props]
    if not all(k in names for k in ("x", "y", "z")):
        raise ValueError("PLY is missing x/y/z vertex properties")
    if fmt == "ascii":
        rows = np.loadtxt([ln for ln in body.decode("ascii").splitlines() if ln.strip()],
                          ndmin=2)
        if rows.shape[0] != count or rows.shape[1] != len(props):
            raise ValueError("PLY vertex data does not match header")
        table = {name: rows[:, i] for i, (name, _) in enumerate(props)}
    else:
        dtype = np.dtype([(name, typemap[t]) for name, t in props])
        if len(body) < count * dtype.itemsize:
            raise ValueError("PLY binary payload is truncated")
        rec = np.frombuffer(body[:count * dtype.itemsize], dtype=dtype)
        table = {name: rec[name] for name, _ in props}
    positions = np.stack([table["x"], table["y"], table["z"]], axis=1).astype(np.float64)
    colors = None
    if all(k in table for k in ("red", "green", "blue")):
        colors = np.stack([table["red"], table["green"], table["blue"]],
                          axis=1).astype(np.float64) / 255.0
    return PointCloud(positions, colors)
